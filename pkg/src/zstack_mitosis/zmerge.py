"""Cross-plane candidate merging.

Two candidates are duplicates when they lie strictly closer than ``radius_um``
in the slide plane (10 px at 0.25 mpp = 2.5 um).  Clusters are the connected
components of that "closer than radius" graph, so chains merge transitively.
Edges are found with a uniform grid of cell size ``radius`` and components
are labelled with a vectorised union-find (min-label hooking plus pointer
jumping), which makes the labelling independent of input order.
"""
from __future__ import annotations

import gc
from collections import defaultdict
from dataclasses import dataclass
from operator import attrgetter
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .candidate import Candidate

DEFAULT_MERGE_RADIUS_UM = 2.5

# forward half of the 3x3 neighbourhood; each unordered cell pair is visited once
_HALF_NEIGHBOURHOOD = ((0, 0), (1, -1), (1, 0), (1, 1), (0, 1))


@dataclass(frozen=True, slots=True)
class MergedCandidate:
    rep: Candidate
    members: tuple[Candidate, ...]

    @property
    def planes_present(self) -> frozenset:
        return frozenset(c.plane_offset_um for c in self.members)

    @property
    def pos(self):
        return self.rep.pos


def neighbor_pairs(x: np.ndarray, y: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs ``(i, j)``, ``i != j``, with Euclidean distance < radius.

    Each unordered pair is returned once.  Pairs are found by bucketing points
    into square cells of side ``radius``; only the 3x3 block of cells around a
    point can hold a neighbour.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)

    cx = np.floor((x - x.min()) / radius).astype(np.int64)
    cy = np.floor((y - y.min()) / radius).astype(np.int64)
    # +2 keeps the (cx+1, cy+-1) probes from aliasing into another column
    ny = int(cy.max()) + 3
    key = cx * ny + (cy + 1)
    order = np.argsort(key, kind="stable")
    skey = key[order]
    ucell, start, count = np.unique(skey, return_index=True, return_counts=True)

    ii, jj = [], []
    for dx, dy in _HALF_NEIGHBOURHOOD:
        probe = ucell + dx * ny + dy
        pos = np.searchsorted(ucell, probe)
        pos_c = np.minimum(pos, ucell.size - 1)
        hit = ucell[pos_c] == probe
        a_cells = np.nonzero(hit)[0]
        b_cells = pos_c[hit]
        if a_cells.size == 0:
            continue
        na = count[a_cells]
        nb = count[b_cells]
        if dx == 0 and dy == 0:
            # pairs inside one cell: keep a < b only
            sel = na > 1
            a_cells, b_cells, na, nb = a_cells[sel], b_cells[sel], na[sel], nb[sel]
        npairs = na * nb
        total = int(npairs.sum())
        if total == 0:
            continue
        # expand every (cell a, cell b) block into its na*nb point pairs
        block = np.repeat(np.arange(a_cells.size), npairs)
        offset_in_block = np.arange(total) - np.repeat(np.cumsum(npairs) - npairs, npairs)
        ia = start[a_cells][block] + offset_in_block // nb[block]
        ib = start[b_cells][block] + offset_in_block % nb[block]
        if dx == 0 and dy == 0:
            keep = ia < ib
            ia, ib = ia[keep], ib[keep]
        pi, pj = order[ia], order[ib]
        d2 = (x[pi] - x[pj]) ** 2 + (y[pi] - y[pj]) ** 2
        close = d2 < radius * radius
        ii.append(pi[close])
        jj.append(pj[close])
    if not ii:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(ii), np.concatenate(jj)


def component_labels(n: int, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """Label connected components; each label is the smallest index in its component."""
    parent = np.arange(n, dtype=np.int64)
    if i.size == 0:
        return parent
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    while True:
        ri, rj = parent[i], parent[j]
        diff = ri != rj
        if not diff.any():
            break
        ri, rj = ri[diff], rj[diff]
        # hook the larger root under the smaller one
        np.minimum.at(parent, np.maximum(ri, rj), np.minimum(ri, rj))
        while True:
            grand = parent[parent]
            if np.array_equal(grand, parent):
                break
            parent = grand
        i, j = i[diff], j[diff]
    return parent


def merge_labels(x, y, radius: float) -> np.ndarray:
    """Component label per point under the strict ``< radius`` rule."""
    x = np.asarray(x, dtype=np.float64)
    i, j = neighbor_pairs(x, y, radius)
    return component_labels(x.size, i, j)


def _columns(cands: Sequence[Candidate]):
    n = len(cands)
    return tuple(np.fromiter(map(attrgetter(name), cands), np.float64, n)
                 for name in ("x_um", "y_um", "plane_offset_um", "seg_score"))


def merge_candidates(cands: Sequence[Candidate],
                     radius_um: float = DEFAULT_MERGE_RADIUS_UM) -> list[MergedCandidate]:
    """Merge duplicate candidates across planes.

    The representative of each cluster is the member with the highest
    ``seg_score``; ties go to the smallest ``(plane_offset, x, y, id)``.
    Output is sorted by the representative's ``(y, x)``.
    """
    if radius_um <= 0:
        raise ValueError("radius_um must be positive")
    # millions of small acyclic objects: cyclic GC passes only cost time here
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _merge(list(cands), radius_um)
    finally:
        if gc_was_enabled:
            gc.enable()


def _merge(cands, radius_um):
    n = len(cands)
    if n == 0:
        return []
    x, y, z, s = _columns(cands)
    labels = merge_labels(x, y, radius_um)
    sizes = np.bincount(labels, minlength=n)
    multi_rows = np.nonzero(sizes[labels] > 1)[0]

    # representative row per component; singletons are their own representative
    rep_of = np.arange(n)
    groups = {}
    if multi_rows.size:
        _, id_rank = np.unique(np.array([cands[r].id for r in multi_rows.tolist()]),
                               return_inverse=True)
        mx, my, mz, ms, ml = (a[multi_rows] for a in (x, y, z, s, labels))
        sub = np.lexsort((id_rank.ravel(), my, mx, mz, -ms, ml))
        rows = multi_rows[sub]
        lab_sorted = ml[sub]
        first = np.ones(rows.size, dtype=bool)
        first[1:] = lab_sorted[1:] != lab_sorted[:-1]
        rep_of[lab_sorted[first]] = rows[first]
        bounds = np.append(np.nonzero(first)[0], rows.size).tolist()
        rows_l = rows.tolist()
        for a, b in zip(bounds, bounds[1:]):
            groups[rows_l[a]] = rows_l[a:b]

    roots = np.nonzero(labels == np.arange(n))[0]
    reps = rep_of[roots]
    reps = reps[np.lexsort((x[reps], y[reps]))]
    out = []
    append = out.append
    for r in reps.tolist():
        rep = cands[r]
        members = groups.get(r)
        if members is None:
            append(MergedCandidate(rep, (rep,)))
        else:
            append(MergedCandidate(rep, tuple(sorted((cands[q] for q in members),
                                                     key=_member_key))))
    return out


def _member_key(c: Candidate):
    return (c.plane_offset_um, c.y_um, c.x_um, c.id)


def representatives(merged: Iterable[MergedCandidate]) -> list[Candidate]:
    return [m.rep for m in merged]


def dedup_in_order(cands: Sequence[Candidate],
                   radius_um: float = DEFAULT_MERGE_RADIUS_UM) -> list[Candidate]:
    """Same clustering as :func:`merge_candidates`, representatives kept in input order."""
    cands = list(cands)
    if not cands:
        return []
    index = {id(c): k for k, c in enumerate(cands)}
    reps = representatives(merge_candidates(cands, radius_um))
    return sorted(reps, key=lambda c: index[id(c)])


def strip_halo_duplicates(per_tile_candidates: Union[Mapping[str, Sequence[Candidate]],
                                                     Sequence[Candidate]],
                          radius_um: float = DEFAULT_MERGE_RADIUS_UM) -> list[Candidate]:
    """Remove copies of one detection reported by overlapping tiles.

    Only candidates on the same plane are merged.  Output is ordered by
    ``(plane, y, x)``.
    """
    if isinstance(per_tile_candidates, Mapping):
        flat = []
        for tile_id in sorted(per_tile_candidates):
            flat.extend(per_tile_candidates[tile_id])
    else:
        flat = list(per_tile_candidates)
    by_plane = defaultdict(list)
    for c in flat:
        by_plane[c.plane_offset_um].append(c)
    out = []
    for plane in sorted(by_plane):
        out.extend(representatives(merge_candidates(by_plane[plane], radius_um)))
    return out
