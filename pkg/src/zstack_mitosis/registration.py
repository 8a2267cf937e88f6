"""Transfer annotations from a reference scan to a target scan.

Two stages:

1. :func:`estimate_global` fits a similarity transform (scale, rotation,
   translation) between low-resolution thumbnails by maximising normalised
   cross-correlation.  Each start of a scale/rotation grid gets its translation
   from an FFT masked NCC, and the best start is polished with Nelder-Mead.
2. :func:`refine_local` corrects the residual translation around every
   annotation by template matching a 64 um reference patch inside the target
   resampled into the reference frame (so only a shift remains), with a
   parabolic sub-pixel peak.

All coordinates are in um with the slide origin at the top-left corner.
Pixel ``i`` of a raster with resolution ``mpp`` has its centre at
``(i + 0.5) * mpp``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage, optimize
from scipy.fft import irfft2, next_fast_len, rfft2

from .scanmodel import PointUm
from .seeding import derive_rng

log = logging.getLogger(__name__)

THUMB_MPP = 32.0
PATCH_UM = 64.0
MARGIN_UM = 16.0
MIN_GLOBAL_PEAK = 0.2
MIN_LOCAL_PEAK = 0.5
MIN_OVERLAP = 0.25
SCALE_RANGE = (0.9, 1.1)
MAX_ROTATION_DEG = 5.0

ANNOTATION_COLUMNS = ("slide_id", "x_um", "y_um", "class")
TRANSFER_COLUMNS = ANNOTATION_COLUMNS + ("mapped_x_um", "mapped_y_um", "status", "ncc_peak")
STATUSES = ("refined", "global_only", "failed")


class RegistrationError(RuntimeError):
    """Global registration did not find a credible alignment."""


# --------------------------------------------------------------------------
# transforms
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GlobalTransform:
    """Similarity map from reference um to target um about the slide origin.

    ``t(p) = scale * R(rotation_deg) @ p + (dx_um, dy_um)``.  With y pointing
    down, a positive angle turns +x towards +y.
    """

    scale: float = 1.0
    rotation_deg: float = 0.0
    dx_um: float = 0.0
    dy_um: float = 0.0
    ncc_peak: float = float("nan")

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")
        if not all(math.isfinite(v) for v in (self.rotation_deg, self.dx_um, self.dy_um)):
            raise ValueError("transform parameters must be finite")

    @property
    def translation(self) -> tuple[float, float]:
        return (self.dx_um, self.dy_um)

    @property
    def matrix(self) -> np.ndarray:
        th = math.radians(self.rotation_deg)
        c, s = math.cos(th), math.sin(th)
        return self.scale * np.array([[c, -s], [s, c]])

    def within_limits(self) -> bool:
        lo, hi = SCALE_RANGE
        return lo <= self.scale <= hi and abs(self.rotation_deg) <= MAX_ROTATION_DEG

    def apply(self, xy) -> np.ndarray:
        """Map an (n, 2) array (or a single pair) of reference um to target um."""
        xy = np.asarray(xy, dtype=np.float64)
        return xy @ self.matrix.T + np.array([self.dx_um, self.dy_um])

    def __call__(self, p: PointUm) -> PointUm:
        x, y = self.apply((p.x_um, p.y_um))
        return PointUm(float(x), float(y))

    def inverse(self) -> "GlobalTransform":
        a_inv = np.linalg.inv(self.matrix)
        t = -a_inv @ np.array([self.dx_um, self.dy_um])
        return GlobalTransform(1.0 / self.scale, -self.rotation_deg, float(t[0]), float(t[1]),
                               self.ncc_peak)

    @classmethod
    def identity(cls) -> "GlobalTransform":
        return cls()


IDENTITY = GlobalTransform(ncc_peak=1.0)


@dataclass(frozen=True)
class TransferredAnnotation:
    source: PointUm
    mapped: Optional[PointUm]
    local_shift_um: tuple[float, float]
    ncc_peak: float
    status: str

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}")
        if self.status == "failed" and self.mapped is not None:
            raise ValueError("failed transfers carry no mapped point")
        if self.status != "failed" and self.mapped is None:
            raise ValueError("only failed transfers may lack a mapped point")


# --------------------------------------------------------------------------
# raster helpers
# --------------------------------------------------------------------------

def um_to_index(xy_um: np.ndarray, mpp: float) -> np.ndarray:
    """um -> continuous pixel index (pixel centres at integers)."""
    return np.asarray(xy_um, dtype=np.float64) / mpp - 0.5


def sample(img: np.ndarray, x_um: np.ndarray, y_um: np.ndarray, mpp: float,
           order: int = 1, cval: float = np.nan, prefiltered: bool = False) -> np.ndarray:
    """Interpolate ``img`` at um positions; outside points get ``cval``."""
    cols = um_to_index(x_um, mpp)
    rows = um_to_index(y_um, mpp)
    return ndimage.map_coordinates(img, [rows, cols], order=order, mode="constant", cval=cval,
                                   prefilter=not prefiltered and order > 1)


def warp_image(img: np.ndarray, mpp: float, t: GlobalTransform,
               out_shape: Optional[tuple[int, int]] = None, order: int = 1,
               cval: float = np.nan) -> np.ndarray:
    """Render ``img`` (reference frame) into the target frame of ``t``.

    Output pixel ``q`` takes the reference value at ``t^-1(q)``.
    """
    h, w = out_shape or img.shape
    a_inv = np.linalg.inv(t.matrix)
    # index-space affine: ref_idx = M @ tgt_idx + off
    m = a_inv
    off = (a_inv @ (np.array([0.5, 0.5]) * mpp - np.array(t.translation))) / mpp - 0.5
    # ndimage works in (row, col) order
    mat = np.array([[m[1, 1], m[1, 0]], [m[0, 1], m[0, 0]]])
    return ndimage.affine_transform(img, mat, offset=(off[1], off[0]), output_shape=(h, w),
                                    order=order, mode="constant", cval=cval)


def thumbnail(img: np.ndarray, mpp: float, thumb_mpp: float = THUMB_MPP) -> tuple[np.ndarray, float]:
    """Block-average ``img`` down to about ``thumb_mpp``; returns (thumb, actual mpp)."""
    f = max(1, int(round(thumb_mpp / mpp)))
    h, w = (img.shape[0] // f) * f, (img.shape[1] // f) * f
    if h == 0 or w == 0:
        raise ValueError(f"image {img.shape} too small for a {f}x downsample")
    t = np.asarray(img[:h, :w], dtype=np.float64).reshape(h // f, f, w // f, f).mean(axis=(1, 3))
    return t, mpp * f


def texture_raster(shape: tuple[int, int], seed: int,
                   scales_px: Sequence[float] = (1.0, 3.0, 10.0, 30.0)) -> np.ndarray:
    """Multi-scale smooth random texture in [0, 1], a stand-in for tissue.

    White noise low-passed by a Gaussian of each scale (periodic, in the
    Fourier domain); the unit-variance layers are summed.
    """
    rng = np.random.default_rng(seed)
    spec = rfft2(rng.standard_normal(shape))
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.rfftfreq(shape[1])[None, :]
    k2 = fx ** 2 + fy ** 2
    out = np.zeros(shape)
    for s in scales_px:
        layer = irfft2(spec * np.exp(-2.0 * np.pi ** 2 * s ** 2 * k2), shape)
        out += layer / (layer.std() or 1.0)
    out -= out.min()
    return out / (out.max() or 1.0)


# --------------------------------------------------------------------------
# NCC
# --------------------------------------------------------------------------

def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation over pixels finite in both; 0 when undefined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 2:
        return 0.0
    a = a[ok] - a[ok].mean()
    b = b[ok] - b[ok].mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den <= 1e-12 * max(1.0, float(ok.sum())):
        return 0.0
    return float(a @ b) / den


def masked_ncc_map(fixed: np.ndarray, moving: np.ndarray, fixed_mask: np.ndarray,
                   moving_mask: np.ndarray, min_overlap: float = MIN_OVERLAP,
                   cache: Optional[dict] = None):
    """NCC of ``moving`` against ``fixed`` at every integer shift (masked FFT form).

    Returns ``(ncc, shifts_r, shifts_c)``: ``ncc[i, j]`` is the correlation when
    ``moving`` pixel ``(r, c)`` lies on ``fixed`` pixel
    ``(r + shifts_r[i], c + shifts_c[j])``.  Shifts with overlap below
    ``min_overlap`` of the smaller mask are set to -1.  Pass the same
    ``cache`` dict across calls with one ``fixed`` image to reuse its spectra.
    """
    f = np.where(fixed_mask, fixed, 0.0)
    m = np.where(moving_mask, moving, 0.0)
    fm = fixed_mask.astype(np.float64)
    mm = moving_mask.astype(np.float64)
    H = next_fast_len(fixed.shape[0] + moving.shape[0] - 1)
    W = next_fast_len(fixed.shape[1] + moving.shape[1] - 1)
    shape = (H, W)

    def F(x):
        return rfft2(x, shape)

    def Fr(x):  # reversed moving image so products become correlations
        return rfft2(x[::-1, ::-1], shape)

    if cache is not None and shape in cache:
        Ff, Ff2, Ffm = cache[shape]
    else:
        Ff, Ff2, Ffm = F(f), F(f * f), F(fm)
        if cache is not None:
            cache[shape] = (Ff, Ff2, Ffm)
    Fm, Fm2, Fmm = Fr(m), Fr(m * m), Fr(mm)
    n = np.rint(irfft2(Ffm * Fmm, shape))
    sum_f = irfft2(Ff * Fmm, shape)
    sum_m = irfft2(Ffm * Fm, shape)
    sum_fm = irfft2(Ff * Fm, shape)
    sum_f2 = irfft2(Ff2 * Fmm, shape)
    sum_m2 = irfft2(Ffm * Fm2, shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        num = sum_fm - sum_f * sum_m / n
        vf = sum_f2 - sum_f ** 2 / n
        vm = sum_m2 - sum_m ** 2 / n
        out = num / np.sqrt(np.clip(vf, 0, None) * np.clip(vm, 0, None))
    need = min_overlap * min(fm.sum(), mm.sum())
    eps = 1e-9 * max(1.0, float(np.abs(f).max()) ** 2, float(np.abs(m).max()) ** 2)
    bad = (n < max(need, 2)) | ~np.isfinite(out) | (vf <= eps * n) | (vm <= eps * n)
    out[bad] = -1.0
    out = np.clip(out, -1.0, 1.0)
    # full correlation occupies indices 0 .. Hf+Hm-2, index k <-> shift k - (Hm - 1)
    hf, wf = fixed.shape
    hm, wm = moving.shape
    out = out[:hf + hm - 1, :wf + wm - 1]
    return out, np.arange(hf + hm - 1) - (hm - 1), np.arange(wf + wm - 1) - (wm - 1)


def _parabolic(cm: float, c0: float, cp: float) -> float:
    den = cm - 2.0 * c0 + cp
    if den >= 0 or not np.isfinite(den):
        return 0.0
    d = 0.5 * (cm - cp) / den
    return float(min(0.5, max(-0.5, d)))


# --------------------------------------------------------------------------
# stage 1
# --------------------------------------------------------------------------

def _default_grid():
    scales = np.round(np.arange(0.90, 1.1001, 0.1), 4)
    rots = np.round(np.arange(-5.0, 5.0001, 2.5), 4)
    return scales, rots


def _score(params, ref, ref_mask, tgt, mpp, centre):
    s, th, dx, dy = params
    if not (SCALE_RANGE[0] - 0.05 <= s <= SCALE_RANGE[1] + 0.05):
        return 1.0
    t = _centred_to_global(s, th, dx, dy, centre)
    warped = warp_image(ref, mpp, t, tgt.shape, order=1)
    if not np.isfinite(warped).sum() >= MIN_OVERLAP * min(ref_mask.sum(), tgt.size):
        return 1.0
    return -ncc(warped, tgt)


def _centred_to_global(s, th_deg, dx, dy, centre) -> GlobalTransform:
    """Similarity about ``centre``: p -> A (p - c) + c + (dx, dy), re-expressed about the origin."""
    t = GlobalTransform(s, th_deg)
    c = np.asarray(centre, dtype=np.float64)
    off = c - t.matrix @ c + np.array([dx, dy])
    return GlobalTransform(s, th_deg, float(off[0]), float(off[1]))


def estimate_global(ref_thumb: np.ndarray, tgt_thumb: np.ndarray, mpp: float,
                    seed: int = 0, scales: Optional[Sequence[float]] = None,
                    rotations_deg: Optional[Sequence[float]] = None, n_random_starts: int = 4,
                    min_peak: float = MIN_GLOBAL_PEAK, refine: bool = True) -> GlobalTransform:
    """Fit the similarity transform mapping reference um to target um.

    Both thumbnails must share resolution ``mpp``.  Every (scale, rotation)
    start, the regular grid plus ``n_random_starts`` draws seeded by ``seed``,
    gets its best translation from a masked FFT NCC; the overall best start is
    polished with Nelder-Mead over all four parameters.

    Raises
    ------
    RegistrationError
        If the best NCC peak is below ``min_peak``.
    """
    ref = np.asarray(ref_thumb, dtype=np.float64)
    tgt = np.asarray(tgt_thumb, dtype=np.float64)
    if ref.ndim != 2 or tgt.ndim != 2:
        raise ValueError("thumbnails must be 2-D grey images")
    g_s, g_r = _default_grid()
    scales = g_s if scales is None else np.asarray(scales, dtype=np.float64)
    rots = g_r if rotations_deg is None else np.asarray(rotations_deg, dtype=np.float64)
    starts = [(float(s), float(r)) for s in scales for r in rots]
    if n_random_starts:
        rng = derive_rng(seed, "registration", "starts")
        lo, hi = float(min(scales)), float(max(scales))
        rmax = float(max(abs(r) for r in rots))
        for _ in range(n_random_starts):
            starts.append((float(rng.uniform(lo, hi)), float(rng.uniform(-rmax, rmax))))
    centre = np.array([ref.shape[1], ref.shape[0]]) * mpp / 2.0
    tgt_mask = np.isfinite(tgt)
    tgt0 = np.where(tgt_mask, tgt, 0.0)
    ref_mask = np.isfinite(ref)

    spectra: dict = {}
    best = (-2.0, None)
    for s, r in starts:
        # ref rendered with scale/rotation about its centre, on an enlarged canvas
        rot_only = _centred_to_global(s, r, 0.0, 0.0, centre)
        pad = int(math.ceil(0.1 * max(ref.shape)))
        shifted = GlobalTransform(rot_only.scale, rot_only.rotation_deg,
                                  rot_only.dx_um + pad * mpp, rot_only.dy_um + pad * mpp)
        canvas = (ref.shape[0] + 2 * pad, ref.shape[1] + 2 * pad)
        mov = warp_image(np.where(ref_mask, ref, np.nan), mpp, shifted, canvas, order=1)
        mov_mask = np.isfinite(mov)
        cmap, sr, sc = masked_ncc_map(tgt0, np.where(mov_mask, mov, 0.0), tgt_mask, mov_mask,
                                      cache=spectra)
        i, j = np.unravel_index(int(np.argmax(cmap)), cmap.shape)
        peak = float(cmap[i, j])
        if peak > best[0] + 1e-12:
            di = dj = 0.0
            if 0 < i < cmap.shape[0] - 1:
                di = _parabolic(cmap[i - 1, j], peak, cmap[i + 1, j])
            if 0 < j < cmap.shape[1] - 1:
                dj = _parabolic(cmap[i, j - 1], peak, cmap[i, j + 1])
            dx = (sc[j] + dj + pad) * mpp
            dy = (sr[i] + di + pad) * mpp
            best = (peak, (s, r, dx, dy))
    peak, params = best
    if params is None or peak < min_peak:
        raise RegistrationError(f"global NCC peak {peak:.3f} below {min_peak}")
    if refine:
        res = optimize.minimize(
            _score, np.array(params), args=(ref, ref_mask, tgt, mpp, centre), method="Nelder-Mead",
            options=dict(initial_simplex=_simplex(params, mpp), xatol=1e-3, fatol=1e-6,
                         maxiter=400))
        if -res.fun >= peak - 1e-9:
            params, peak = tuple(float(v) for v in res.x), float(-res.fun)
    if peak < min_peak:
        raise RegistrationError(f"global NCC peak {peak:.3f} below {min_peak}")
    t = _centred_to_global(*params, centre)
    return GlobalTransform(t.scale, t.rotation_deg, t.dx_um, t.dy_um, peak)


def _simplex(p, mpp):
    p = np.asarray(p, dtype=np.float64)
    steps = np.array([0.01, 0.5, mpp, mpp])
    return np.vstack([p] + [p + np.eye(4)[k] * steps[k] for k in range(4)])


# --------------------------------------------------------------------------
# stage 2
# --------------------------------------------------------------------------

def _patch_grid(point: PointUm, half_um: float, mpp: float):
    n = int(round(2 * half_um / mpp))
    offs = (np.arange(n) - (n - 1) / 2.0) * mpp
    return point.x_um + offs[None, :] + 0 * offs[:, None], point.y_um + offs[:, None] + 0 * offs[None, :]


def refine_local(point: PointUm, ref_patch: np.ndarray, tgt_window: np.ndarray, mpp: float,
                 glob: GlobalTransform = IDENTITY, min_peak: float = MIN_LOCAL_PEAK
                 ) -> TransferredAnnotation:
    """Find the residual shift of ``ref_patch`` inside ``tgt_window``.

    ``ref_patch`` is centred on ``point`` in the reference image and
    ``tgt_window`` is the target resampled into the reference frame through
    ``glob`` on a grid extending the patch by the search margin on every
    side, both at ``mpp``.  NaN marks window pixels outside the target.
    The point maps to ``glob(point + shift)``; when the NCC peak is below
    ``min_peak`` the shift is dropped and the status is ``global_only``.
    """
    ref_patch = np.asarray(ref_patch, dtype=np.float64)
    tgt_window = np.asarray(tgt_window, dtype=np.float64)
    ph, pw = ref_patch.shape
    wh, ww = tgt_window.shape
    if wh < ph or ww < pw:
        raise ValueError("target window must be at least as large as the patch")
    fallback = glob(point)
    if not np.isfinite(ref_patch).all() or np.ptp(ref_patch) <= 0:
        return TransferredAnnotation(point, fallback, (0.0, 0.0), 0.0, "global_only")
    valid = np.isfinite(tgt_window)
    if not valid.all():
        log.warning("target window around (%.1f, %.1f) um clipped at the slide edge",
                    point.x_um, point.y_um)
    win = np.lib.stride_tricks.sliding_window_view(np.where(valid, tgt_window, 0.0), (ph, pw))
    vwin = np.lib.stride_tricks.sliding_window_view(valid, (ph, pw))
    full = vwin.all(axis=(2, 3))
    a = ref_patch - ref_patch.mean()
    na = math.sqrt(float((a * a).sum()))
    n = ph * pw
    s1 = win.sum(axis=(2, 3))
    s2 = (win * win).sum(axis=(2, 3))
    cross = np.einsum("ijkl,kl->ij", win, a)
    var = s2 - s1 * s1 / n
    with np.errstate(divide="ignore", invalid="ignore"):
        c = cross / (na * np.sqrt(np.clip(var, 0, None)))
    c[~full | ~np.isfinite(c) | (var <= 1e-12 * max(1.0, float(s2.max())))] = -1.0
    i, j = np.unravel_index(int(np.argmax(c)), c.shape)
    peak = float(np.clip(c[i, j], -1.0, 1.0))
    if not full.any() or peak < min_peak:
        return TransferredAnnotation(point, fallback, (0.0, 0.0), max(peak, 0.0) if full.any() else 0.0,
                                     "global_only")
    di = _parabolic(c[i - 1, j], c[i, j], c[i + 1, j]) if 0 < i < c.shape[0] - 1 else 0.0
    dj = _parabolic(c[i, j - 1], c[i, j], c[i, j + 1]) if 0 < j < c.shape[1] - 1 else 0.0
    oy, ox = (wh - ph) / 2.0, (ww - pw) / 2.0
    sx = (j + dj - ox) * mpp
    sy = (i + di - oy) * mpp
    mapped = glob(PointUm(point.x_um + sx, point.y_um + sy))
    return TransferredAnnotation(point, mapped, (sx, sy), peak, "refined")


@dataclass
class _Images:
    ref: np.ndarray
    tgt: np.ndarray
    mpp: float
    tgt_coef: np.ndarray  # spline coefficients of tgt


def _transfer_one(point: PointUm, imgs: _Images, glob: GlobalTransform, refine: bool,
                  patch_um: float, margin_um: float, min_peak: float) -> TransferredAnnotation:
    th, tw = imgs.tgt.shape
    mx, my = glob.apply((point.x_um, point.y_um))
    if not (0 <= mx <= tw * imgs.mpp and 0 <= my <= th * imgs.mpp):
        return TransferredAnnotation(point, None, (0.0, 0.0), 0.0, "failed")
    if not refine:
        return TransferredAnnotation(point, glob(point), (0.0, 0.0), float("nan"), "global_only")
    px, py = _patch_grid(point, patch_um / 2.0, imgs.mpp)
    patch = sample(imgs.ref, px, py, imgs.mpp, order=1)
    wx, wy = _patch_grid(point, patch_um / 2.0 + margin_um, imgs.mpp)
    txy = glob.apply(np.column_stack([wx.ravel(), wy.ravel()]))
    window = sample(imgs.tgt_coef, txy[:, 0], txy[:, 1], imgs.mpp, order=3,
                    prefiltered=True).reshape(wx.shape)
    # pixels whose source lies outside the target are invalid
    inside = ((txy[:, 0] >= 0) & (txy[:, 0] <= tw * imgs.mpp)
              & (txy[:, 1] >= 0) & (txy[:, 1] <= th * imgs.mpp)).reshape(wx.shape)
    window[~inside] = np.nan
    if not np.isfinite(patch).all():
        log.warning("reference patch around (%.1f, %.1f) um clipped at the slide edge",
                    point.x_um, point.y_um)
        patch = np.where(np.isfinite(patch), patch, np.nanmean(patch) if np.isfinite(patch).any() else 0.0)
    return refine_local(point, patch, window, imgs.mpp, glob, min_peak)


def _transfer_chunk(args):
    points, imgs, glob, refine, patch_um, margin_um, min_peak = args
    return [_transfer_one(p, imgs, glob, refine, patch_um, margin_um, min_peak) for p in points]


def transfer_annotations(points: Iterable, ref_img: np.ndarray, tgt_img: np.ndarray, mpp: float,
                         glob: GlobalTransform, refine: bool = True, patch_um: float = PATCH_UM,
                         margin_um: float = MARGIN_UM, min_peak: float = MIN_LOCAL_PEAK,
                         workers: int = 1) -> list[TransferredAnnotation]:
    """Map reference points into the target frame, in input order.

    ``points`` holds :class:`PointUm` or objects with ``x_um``/``y_um``.
    Points that land outside the target are ``failed``; the batch never
    aborts.
    """
    pts = [p if isinstance(p, PointUm) else PointUm(float(p.x_um), float(p.y_um)) for p in points]
    ref = np.asarray(ref_img, dtype=np.float64)
    tgt = np.asarray(tgt_img, dtype=np.float64)
    coef = ndimage.spline_filter(tgt, order=3) if refine else tgt
    imgs = _Images(ref, tgt, float(mpp), coef)
    if workers > 1 and len(pts) > 1:
        k = max(1, math.ceil(len(pts) / workers))
        chunks = [pts[i:i + k] for i in range(0, len(pts), k)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_transfer_chunk, [(c, imgs, glob, refine, patch_um, margin_um,
                                                   min_peak) for c in chunks]))
        return [t for part in parts for t in part]
    return _transfer_chunk((pts, imgs, glob, refine, patch_um, margin_um, min_peak))


def register_images(ref_img: np.ndarray, tgt_img: np.ndarray, mpp: float, points: Iterable,
                    seed: int = 0, thumb_mpp: float = THUMB_MPP, refine: bool = True,
                    workers: int = 1) -> tuple[GlobalTransform, list[TransferredAnnotation]]:
    """Both stages on two rasters sharing resolution ``mpp``."""
    rt, tmpp = thumbnail(ref_img, mpp, thumb_mpp)
    tt, _ = thumbnail(tgt_img, mpp, thumb_mpp)
    glob = estimate_global(rt, tt, tmpp, seed=seed)
    return glob, transfer_annotations(points, ref_img, tgt_img, mpp, glob, refine, workers=workers)


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Annotation:
    slide_id: str
    x_um: float
    y_um: float
    cls: str = "mitosis"

    @property
    def pos(self) -> PointUm:
        return PointUm(self.x_um, self.y_um)


def read_annotations_csv(text: str) -> list[Annotation]:
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for k, r in enumerate(rows, start=2):
        try:
            out.append(Annotation(r["slide_id"], float(r["x_um"]), float(r["y_um"]), r["class"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"annotations line {k}: {exc!r}") from None
    return out


def write_annotations_csv(anns: Iterable[Annotation]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANNOTATION_COLUMNS)
    for a in anns:
        w.writerow([a.slide_id, repr(float(a.x_um)), repr(float(a.y_um)), a.cls])
    return buf.getvalue()


def write_transfer_csv(anns: Sequence[Annotation], transferred: Sequence[TransferredAnnotation],
                       target_slide_id: Optional[str] = None) -> str:
    if len(anns) != len(transferred):
        raise ValueError("annotations and transfers differ in length")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRANSFER_COLUMNS)
    for a, t in zip(anns, transferred):
        mx = "" if t.mapped is None else f"{t.mapped.x_um:.4f}"
        my = "" if t.mapped is None else f"{t.mapped.y_um:.4f}"
        peak = "" if not math.isfinite(t.ncc_peak) else f"{t.ncc_peak:.4f}"
        w.writerow([target_slide_id or a.slide_id, repr(float(a.x_um)), repr(float(a.y_um)),
                    a.cls, mx, my, t.status, peak])
    return buf.getvalue()
