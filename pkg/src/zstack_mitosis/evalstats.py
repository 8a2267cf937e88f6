"""Detection scoring and the statistical comparison protocol.

Detections are matched one-to-one to ground truth within a distance cutoff
(maximum cardinality first, then minimum total distance).  Per-condition
means come from bootstrap resampling; single-layer vs z-stack differences are
tested with a one-way ANOVA over all condition groups followed by Tukey HSD.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.special import betainc, gammaln, ndtr

DEFAULT_CUTOFF_UM = 7.5
DEFAULT_N_BOOT = 10_000
LAYER_MODES = ("single", "zstack")
METRICS = ("sensitivity", "precision")
REPORT_COLUMNS = ("scanner", "pipeline", "layer_mode", "metric", "mean", "ci_lo", "ci_hi",
                  "delta_pct", "p_value")


class ReportError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# matching
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[str, str, float], ...]
    cutoff_um: float


def _points(items) -> tuple[list[str], np.ndarray]:
    ids, xy = [], []
    for k, it in enumerate(items):
        if isinstance(it, tuple):
            ids.append(str(it[0]))
            xy.append((float(it[1]), float(it[2])))
            continue
        if hasattr(it, "rep"):
            it = it.rep
        ids.append(str(getattr(it, "id", k)))
        if hasattr(it, "x_um"):
            xy.append((float(it.x_um), float(it.y_um)))
        else:
            xy.append((float(it.pos.x_um), float(it.pos.y_um)))
    return ids, np.asarray(xy, dtype=np.float64).reshape(-1, 2)


def match_detections(dets, gts, cutoff_um: float = DEFAULT_CUTOFF_UM) -> MatchResult:
    """One-to-one matching of detections to ground truth.

    ``dets``/``gts`` hold candidates, merged candidates, ground-truth records
    or ``(id, x_um, y_um)`` tuples.  A pair is admissible when its distance is
    at most ``cutoff_um``.  Among all maximum-cardinality matchings the one
    with the smallest total distance is returned.
    """
    if not cutoff_um > 0:
        raise ValueError("cutoff_um must be positive")
    det_ids, dxy = _points(dets)
    gt_ids, gxy = _points(gts)
    # canonical order makes the solver's tie-breaking reproducible
    d_ord = sorted(range(len(det_ids)), key=lambda i: det_ids[i])
    g_ord = sorted(range(len(gt_ids)), key=lambda i: gt_ids[i])
    det_ids = [det_ids[i] for i in d_ord]
    gt_ids = [gt_ids[i] for i in g_ord]
    dxy, gxy = dxy[d_ord], gxy[g_ord]
    nd, ng = len(det_ids), len(gt_ids)
    if nd == 0 or ng == 0:
        return MatchResult(0, nd, ng, (), cutoff_um)

    sdm = cKDTree(gxy).sparse_distance_matrix(cKDTree(dxy), cutoff_um, output_type="ndarray")
    gi = sdm["i"].astype(np.int64)
    dj = sdm["j"].astype(np.int64)
    dist = sdm["v"].astype(np.float64)
    if gi.size == 0:
        return MatchResult(0, nd, ng, (), cutoff_um)
    graph = coo_matrix((np.ones(gi.size), (gi, ng + dj)), shape=(ng + nd, ng + nd))
    _, comp = connected_components(graph, directed=False)

    pairs = []
    edge_comp = comp[gi]
    order = np.argsort(edge_comp, kind="stable")
    bounds = np.nonzero(np.diff(edge_comp[order]))[0] + 1
    for chunk in np.split(order, bounds):
        cg, cd, cdist = gi[chunk], dj[chunk], dist[chunk]
        ug, g_loc = np.unique(cg, return_inverse=True)
        ud, d_loc = np.unique(cd, return_inverse=True)
        if ug.size == 1 and ud.size == 1:
            pairs.append((int(ud[0]), int(ug[0]), float(cdist[0])))
            continue
        # feasible pairs cost (d - big); any extra match outweighs all distance savings
        big = cutoff_um * (min(ug.size, ud.size) + 1) + 1.0
        cost = np.zeros((ug.size, ud.size))
        dmat = np.zeros((ug.size, ud.size))
        feasible = np.zeros((ug.size, ud.size), dtype=bool)
        dmat[g_loc, d_loc] = cdist
        cost[g_loc, d_loc] = cdist - big
        feasible[g_loc, d_loc] = True
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows.tolist(), cols.tolist()):
            if feasible[r, c]:
                pairs.append((int(ud[c]), int(ug[r]), float(dmat[r, c])))
    out = sorted(((det_ids[d], gt_ids[g], dd) for d, g, dd in pairs), key=lambda p: (p[1], p[0]))
    tp = len(out)
    return MatchResult(tp, nd - tp, ng - tp, tuple(out), cutoff_um)


def sensitivity(m: MatchResult) -> float:
    """TP / (TP + FN); NaN (with a warning) when there is no ground truth."""
    denom = m.tp + m.fn
    if denom == 0:
        warnings.warn("sensitivity undefined: no ground truth", RuntimeWarning, stacklevel=2)
        return math.nan
    return m.tp / denom


def precision(m: MatchResult) -> float:
    """TP / (TP + FP); NaN (with a warning) when there are no detections."""
    denom = m.tp + m.fp
    if denom == 0:
        warnings.warn("precision undefined: no detections", RuntimeWarning, stacklevel=2)
        return math.nan
    return m.tp / denom


def pool_matches(results: Iterable[MatchResult]) -> MatchResult:
    results = list(results)
    cutoff = results[0].cutoff_um if results else DEFAULT_CUTOFF_UM
    return MatchResult(sum(r.tp for r in results), sum(r.fp for r in results),
                       sum(r.fn for r in results),
                       tuple(p for r in results for p in r.pairs), cutoff)


# --------------------------------------------------------------------------
# bootstrap
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    mean: float
    ci95_lo: float
    ci95_hi: float


def bootstrap_mean(values: Sequence[float], n_boot: int = DEFAULT_N_BOOT,
                   seed: int = 0, chunk: int = 2000) -> BootstrapResult:
    """Mean of ``n_boot`` resample means (with replacement) and a percentile 95% CI."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    if v.size == 0:
        raise ValueError("bootstrap_mean needs at least one value")
    rng = np.random.default_rng(seed)
    means = np.empty(n_boot)
    for a in range(0, n_boot, chunk):
        b = min(a + chunk, n_boot)
        idx = rng.integers(0, v.size, size=(b - a, v.size))
        means[a:b] = v[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    return BootstrapResult(float(means.mean()), float(lo), float(hi))


# --------------------------------------------------------------------------
# ANOVA / Tukey
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AnovaResult:
    F: float
    df_between: int
    df_within: int
    p: float
    ms_within: float


def f_sf(F: float, d1: float, d2: float) -> float:
    """Survival function of the F distribution via the regularised incomplete beta."""
    if math.isinf(F):
        return 0.0
    if F <= 0:
        return 1.0
    return float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * F)))


def _check_groups(groups):
    gs = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(gs) < 2:
        raise ValueError("need at least two groups")
    if any(g.size < 2 for g in gs):
        raise ValueError("each group needs at least two values")
    return gs


def one_way_anova(groups: Sequence[Sequence[float]]) -> AnovaResult:
    gs = _check_groups(groups)
    n = sum(g.size for g in gs)
    k = len(gs)
    grand = sum(g.sum() for g in gs) / n
    means = [g.mean() for g in gs]
    ss_between = sum(g.size * (m - grand) ** 2 for g, m in zip(gs, means))
    ss_within = sum(((g - m) ** 2).sum() for g, m in zip(gs, means))
    dfb, dfw = k - 1, n - k
    msb, msw = ss_between / dfb, ss_within / dfw
    if msw == 0.0:
        if max(means) == min(means):
            return AnovaResult(0.0, dfb, dfw, 1.0, 0.0)
        return AnovaResult(math.inf, dfb, dfw, 0.0, 0.0)
    F = msb / msw
    return AnovaResult(float(F), dfb, dfw, f_sf(F, dfb, dfw), float(msw))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


def _composite_gl(a: float, b: float, panels: int):
    edges = np.linspace(a, b, panels + 1)
    half = np.diff(edges) / 2.0
    mid = (edges[:-1] + edges[1:]) / 2.0
    x = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    w = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return x, w


def _range_cdf_normal(w: np.ndarray, k: int, panels: int) -> np.ndarray:
    """P(range of k iid standard normals <= w), vectorised over w."""
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    z, wz = _composite_gl(-9.0, 9.0, panels)
    phi = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    diff = ndtr(z[None, :]) - ndtr(z[None, :] - w[:, None])
    out = k * (diff ** (k - 1) * (phi * wz)[None, :]).sum(axis=1)
    out[w <= 0] = 0.0
    return np.clip(out, 0.0, 1.0)


def _studentized_range_cdf(q: float, k: int, df: float, panels: int) -> float:
    if math.isinf(df) or df > 1e5:
        return float(_range_cdf_normal(np.array([q]), k, panels)[0])
    # s = chi_df / sqrt(df); integrate its density times the normal-range cdf at q*s
    sd = 1.0 / math.sqrt(2.0 * df)
    mode = math.sqrt(max(df - 1.0, 0.0) / df)
    lo = max(0.0, mode - 14.0 * sd)
    hi = mode + 14.0 * max(sd, 0.5 if df < 3 else sd)
    # the normal-range cdf saturates near q*s = 12; resolve the rise separately
    brk = min(hi, max(lo, 12.0 / q))
    parts = [_composite_gl(a, b, panels) for a, b in ((lo, brk), (brk, hi)) if b > a]
    s = np.concatenate([p[0] for p in parts])
    ws = np.concatenate([p[1] for p in parts])
    logf = (0.5 * df * math.log(df) - gammaln(0.5 * df) - (0.5 * df - 1.0) * math.log(2.0)
            + (df - 1.0) * np.log(np.maximum(s, 1e-300)) - 0.5 * df * s * s)
    dens = np.exp(logf) * ws
    return float(np.clip((dens * _range_cdf_normal(q * s, k, panels)).sum(), 0.0, 1.0))


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    """CDF of the studentized range statistic for ``k`` means and ``df`` error dof.

    Evaluated as an outer Gauss-Legendre integral over the scaled chi
    distribution of an inner integral over the normal range.  The result is
    computed at two resolutions; disagreement above 1e-6 raises.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if not df >= 1:
        raise ValueError("df must be >= 1")
    if q < 0:
        raise ValueError("q must be >= 0")
    if q == 0:
        return 0.0
    if math.isinf(q):
        return 1.0
    coarse = _studentized_range_cdf(q, k, df, 10)
    fine = _studentized_range_cdf(q, k, df, 16)
    if abs(fine - coarse) > 1e-6:
        raise NumericError(f"studentized range cdf did not converge for q={q}, k={k}, df={df}: "
                           f"{coarse:.8f} vs {fine:.8f}")
    return fine


def studentized_range_sf(q: float, k: int, df: float) -> float:
    return max(0.0, 1.0 - studentized_range_cdf(q, k, df))


def q_critical(alpha: float, k: int, df: float) -> float:
    """Upper-alpha quantile of the studentized range distribution."""
    target = 1.0 - alpha
    hi = 10.0
    while studentized_range_cdf(hi, k, df) < target:
        hi *= 2.0
    return brentq(lambda q: studentized_range_cdf(q, k, df) - target, 1e-6, hi, xtol=1e-10)


@dataclass(frozen=True)
class TukeyPair:
    i: int
    j: int
    mean_diff: float
    q: float
    p: float
    significant: bool


def tukey_hsd(groups: Sequence[Sequence[float]], alpha: float = 0.05,
              pairs: Optional[Iterable[tuple[int, int]]] = None) -> list[TukeyPair]:
    """Tukey-Kramer pairwise comparisons (all pairs unless ``pairs`` is given)."""
    gs = _check_groups(groups)
    an = one_way_anova(gs)
    k, dfw = len(gs), an.df_within
    means = [float(g.mean()) for g in gs]
    if pairs is None:
        pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    out = []
    for i, j in pairs:
        diff = means[j] - means[i]
        if an.ms_within == 0.0:
            q = 0.0 if diff == 0 else math.inf
        else:
            se = math.sqrt(an.ms_within / 2.0 * (1.0 / gs[i].size + 1.0 / gs[j].size))
            q = abs(diff) / se
        p = 1.0 if q == 0 else studentized_range_sf(q, k, dfw)
        out.append(TukeyPair(i, j, diff, q, p, p < alpha))
    return out


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricSample:
    scanner: str
    pipeline: str
    layer_mode: str
    run_index: int
    metric: str
    value: float
    slide_id: str = ""  # empty: pooled over all test slides of the run

    def __post_init__(self):
        if self.layer_mode not in LAYER_MODES:
            raise ValueError(f"layer_mode must be one of {LAYER_MODES}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.run_index < 1:
            raise ValueError("run_index starts at 1")
        if not (math.isnan(self.value) or 0.0 <= self.value <= 1.0):
            raise ValueError(f"metric value out of [0, 1]: {self.value}")


SAMPLE_COLUMNS = ("scanner", "pipeline", "layer_mode", "run_index", "metric", "value",
                  "slide_id")
BOOTSTRAP_UNITS = ("runs", "slides")


def write_samples_csv(samples: Sequence[MetricSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_COLUMNS)
    for s in samples:
        w.writerow([s.scanner, s.pipeline, s.layer_mode, s.run_index, s.metric, repr(s.value),
                    s.slide_id])
    return buf.getvalue()


def read_samples_csv(text: str) -> list[MetricSample]:
    rows = csv.DictReader(io.StringIO(text))
    return [MetricSample(r["scanner"], r["pipeline"], r["layer_mode"], int(r["run_index"]),
                         r["metric"], float(r["value"]), r.get("slide_id") or "")
            for r in rows]


@dataclass(frozen=True)
class ComparisonRow:
    scanner: str
    pipeline: str
    single_mean: float
    zstack_mean: float
    delta_pct: float
    p_value: Optional[float]
    single_ci: tuple[float, float] = (math.nan, math.nan)
    zstack_ci: tuple[float, float] = (math.nan, math.nan)


def delta_pct(single: float, zstack: float) -> float:
    if single <= 0:
        return math.nan
    return (zstack - single) / single * 100.0


def format_delta(d: float) -> str:
    if math.isnan(d):
        return "N/A"
    return f"{d:+.2f}%"


def format_p(p: Optional[float]) -> str:
    if p is None or math.isnan(p):
        return "N/A"
    if p < 0.001:
        return "<0.001"
    return f"{p:.3f}"


@dataclass
class Report:
    metric: str
    rows: list[ComparisonRow]
    average: ComparisonRow
    cutoff_um: float
    n_boot: int
    header: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# metric={self.metric}\n")
        buf.write(f"# match_cutoff_um={self.cutoff_um:g}\n")
        buf.write(f"# bootstrap_n={self.n_boot}\n")
        for k, v in sorted(self.header.items()):
            buf.write(f"# {k}={v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows + [self.average]:
            for mode, mean, ci in (("single", r.single_mean, r.single_ci),
                                   ("zstack", r.zstack_mean, r.zstack_ci)):
                w.writerow([r.scanner, r.pipeline, mode, self.metric, f"{mean:.4f}",
                            "" if math.isnan(ci[0]) else f"{ci[0]:.4f}",
                            "" if math.isnan(ci[1]) else f"{ci[1]:.4f}",
                            format_delta(r.delta_pct), format_p(r.p_value)])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'Scanner':<12}{'Pipeline':<14}{'Single':>8}{'Z-Stack':>9}{'Delta':>10}{'p':>8}"]
        for r in self.rows + [self.average]:
            lines.append(f"{r.scanner:<12}{r.pipeline:<14}{r.single_mean:>8.3f}{r.zstack_mean:>9.3f}"
                         f"{format_delta(r.delta_pct):>10}{format_p(r.p_value):>8}")
        return "\n".join(lines)


def _stable_seed(seed: int, *parts: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32("|".join(parts).encode())) & 0xFFFFFFFF


def build_report(samples: Sequence[MetricSample], metric: str, n_boot: int = DEFAULT_N_BOOT,
                 seed: int = 0, cutoff_um: float = DEFAULT_CUTOFF_UM,
                 alpha: float = 0.05, unit: str = "runs") -> Report:
    """Per-condition bootstrap means, deltas and Tukey p-values for one metric.

    Tukey HSD runs over every (scanner, pipeline, layer mode) group of the
    pooled per-run values; each condition reports the p-value of its single vs
    z-stack pair. ``unit`` selects what the bootstrap resamples: the pooled
    per-run values (``"runs"``) or per-slide values averaged over runs
    (``"slides"``, needs samples carrying a ``slide_id``).
    """
    if metric not in METRICS:
        raise ReportError(f"unknown metric {metric!r}")
    if unit not in BOOTSTRAP_UNITS:
        raise ReportError(f"bootstrap unit must be one of {BOOTSTRAP_UNITS}, got {unit!r}")
    groups: dict[tuple[str, str, str], list[float]] = {}
    per_slide: dict[tuple[str, str, str], dict[str, list[float]]] = {}
    for s in samples:
        if s.metric != metric or math.isnan(s.value):
            continue
        key = (s.scanner, s.pipeline, s.layer_mode)
        if s.slide_id:
            per_slide.setdefault(key, {}).setdefault(s.slide_id, []).append(s.value)
        else:
            groups.setdefault(key, []).append(s.value)
    conditions = sorted({(sc, pl) for sc, pl, _ in groups})
    if not conditions:
        raise ReportError(f"no samples for metric {metric!r}")
    absent = [f"{sc}/{pl}/{mode}" for sc, pl in conditions for mode in LAYER_MODES
              if (sc, pl, mode) not in groups]
    if absent:
        raise ReportError("missing condition(s): " + ", ".join(absent))

    keys = [(sc, pl, mode) for sc, pl in conditions for mode in LAYER_MODES]
    pvals: dict[tuple[str, str], Optional[float]] = {}
    if all(len(groups[k]) >= 2 for k in keys):
        wanted = [(2 * c, 2 * c + 1) for c in range(len(conditions))]
        for c, tp in enumerate(tukey_hsd([groups[k] for k in keys], alpha, wanted)):
            pvals[conditions[c]] = tp.p
    else:
        warnings.warn("fewer than two runs in some group: p-values omitted", RuntimeWarning,
                      stacklevel=2)

    if unit == "runs":
        units = groups
    else:
        missing = [f"{'/'.join(k)}" for k in keys if k not in per_slide]
        if missing:
            raise ReportError("no per-slide samples for: " + ", ".join(missing))
        units = {k: [float(np.mean(v)) for _, v in sorted(per_slide[k].items())] for k in keys}

    rows = []
    for sc, pl in conditions:
        bs = {mode: bootstrap_mean(units[(sc, pl, mode)], n_boot,
                                   _stable_seed(seed, metric, sc, pl, mode))
              for mode in LAYER_MODES}
        s_mean, z_mean = bs["single"].mean, bs["zstack"].mean
        rows.append(ComparisonRow(sc, pl, s_mean, z_mean, delta_pct(s_mean, z_mean),
                                  pvals.get((sc, pl)),
                                  (bs["single"].ci95_lo, bs["single"].ci95_hi),
                                  (bs["zstack"].ci95_lo, bs["zstack"].ci95_hi)))
    s_avg = float(np.mean([r.single_mean for r in rows]))
    z_avg = float(np.mean([r.zstack_mean for r in rows]))
    average = ComparisonRow("Average", "", s_avg, z_avg, delta_pct(s_avg, z_avg), None)
    return Report(metric, rows, average, cutoff_um, n_boot, {"bootstrap_unit": unit})
