"""Byzantine consensus primitives: trimmed scalar rounds and Tverberg-point rounds.

Tverberg points are deterministic.  Partitions of the input multiset into
``f + 1`` nonempty parts are tried in lexicographic restricted-growth-string
order and the first one whose hulls intersect is used; inside it the point
minimising the coordinate sum is returned (ties broken lexicographically).
For ``m == 1`` this is interval intersection, for ``m == 2`` a vertex scan
of the hull intersection, otherwise a linear program.  When ``f == 1`` the
input has ``m + 2`` points and, in general position, the only intersecting
partition is the Radon partition with a single common point, so
:func:`one_iter` takes vectorised shortcuts (a planar case analysis for
``m == 2``, Radon points otherwise) and falls back to the exact routine
whenever a subset is degenerate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np
from scipy.optimize import linprog

FEASIBILITY_TOL = 1e-9
DEFAULT_MAX_INPUTS = 20
# |a_k| below this fraction of max|a| counts as an affine degeneracy
RADON_REL_TOL = 1e-12
# tighter than the HiGHS defaults so LP points respect FEASIBILITY_TOL
_LP_OPTIONS = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}


class DegenerateInputError(ValueError):
    """Too few values for the requested fault budget / dimension."""


class TverbergError(RuntimeError):
    """No partition had intersecting hulls; indicates a numerical bug."""


@dataclass(frozen=True)
class ReceivedMultiset:
    """Values received by one agent, one entry per incoming neighbour.

    ``defaults`` counts the entries that were filled in because the
    neighbour sent nothing.
    """

    entries: tuple[tuple[int, object], ...]
    defaults: int = 0

    @classmethod
    def collect(cls, neighbors, inbox: dict, default) -> "ReceivedMultiset":
        entries = []
        missing = 0
        for j in sorted(neighbors):
            if j in inbox:
                entries.append((j, inbox[j]))
            else:
                entries.append((j, default))
                missing += 1
        return cls(tuple(entries), missing)

    @property
    def values(self) -> list:
        return [v for _, v in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def set_partitions(size: int, parts: int) -> Iterator[tuple[int, ...]]:
    """Restricted growth strings of length ``size`` using exactly ``parts`` blocks, in lex order."""
    if parts < 1 or parts > size:
        return

    def rec(prefix: list[int], used: int) -> Iterator[tuple[int, ...]]:
        k = len(prefix)
        if k == size:
            if used == parts:
                yield tuple(prefix)
            return
        # not enough positions left to open the remaining blocks
        if parts - used > size - k:
            return
        for b in range(min(used + 1, parts)):
            prefix.append(b)
            yield from rec(prefix, max(used, b + 1))
            prefix.pop()

    yield from rec([0], 1)


@dataclass(frozen=True)
class TverbergResult:
    point: np.ndarray
    partition: tuple[tuple[int, ...], ...]
    points: np.ndarray

    @cached_property
    def feasibility_margin(self) -> float:
        """Minus the largest distance from ``point`` to any part's hull."""
        return -max(hull_distance(self.points[list(part)], self.point) for part in self.partition)


def hull_distance(pts: np.ndarray, x: np.ndarray) -> float:
    """Chebyshev distance from ``x`` to the convex hull of ``pts``."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    k, m = pts.shape
    if k == 1:
        return float(np.abs(pts[0] - x).max())
    # minimise s subject to |pts^T lam - x| <= s, lam in the simplex
    c = np.zeros(k + 1)
    c[-1] = 1.0
    a_ub = np.vstack([
        np.hstack([pts.T, -np.ones((m, 1))]),
        np.hstack([-pts.T, -np.ones((m, 1))]),
    ])
    b_ub = np.concatenate([x, -x])
    a_eq = np.hstack([np.ones((1, k)), np.zeros((1, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0],
                  bounds=[(0, None)] * (k + 1), method="highs", options=_LP_OPTIONS)
    return float(max(res.fun, 0.0))


def _part_lists(labels: Sequence[int], parts: int) -> tuple[tuple[int, ...], ...]:
    out: list[list[int]] = [[] for _ in range(parts)]
    for idx, b in enumerate(labels):
        out[b].append(idx)
    return tuple(tuple(p) for p in out)


def _better(cand: np.ndarray, best: np.ndarray | None, tol: float) -> bool:
    if best is None:
        return True
    ds = cand.sum() - best.sum()
    if ds < -tol:
        return True
    if ds > tol:
        return False
    for a, b in zip(cand, best):
        if a < b - tol:
            return True
        if a > b + tol:
            return False
    return False


def _intersect_1d(parts: list[np.ndarray], tol: float) -> np.ndarray | None:
    lo = max(float(p.min()) for p in parts)
    hi = min(float(p.max()) for p in parts)
    if lo <= hi + tol:
        return np.array([lo])
    return None


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _hull_2d(pts: np.ndarray) -> list[tuple[float, float]]:
    """Counter-clockwise hull vertices (monotone chain); collinear input gives its two ends."""
    p = sorted(set(map(tuple, pts.tolist())))
    if len(p) <= 2:
        return p
    lower: list = []
    for q in p:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], q) <= 0:
            lower.pop()
        lower.append(q)
    upper: list = []
    for q in reversed(p):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], q) <= 0:
            upper.pop()
        upper.append(q)
    hull = lower[:-1] + upper[:-1]
    return hull


def _in_hull_2d(hull: list, x, tol: float) -> bool:
    if len(hull) == 1:
        return abs(hull[0][0] - x[0]) <= tol and abs(hull[0][1] - x[1]) <= tol
    if len(hull) == 2:
        return _on_segment(hull[0], hull[1], x, tol)
    for k in range(len(hull)):
        a, b = hull[k], hull[(k + 1) % len(hull)]
        edge = math.hypot(b[0] - a[0], b[1] - a[1])
        if _cross(a, b, x) < -tol * edge:
            return False
    return True


def _on_segment(a, b, x, tol: float) -> bool:
    dx, dy = b[0] - a[0], b[1] - a[1]
    length = math.hypot(dx, dy)
    if length == 0.0:
        return abs(a[0] - x[0]) <= tol and abs(a[1] - x[1]) <= tol
    if abs(_cross(a, b, x)) > tol * length:
        return False
    t = ((x[0] - a[0]) * dx + (x[1] - a[1]) * dy) / (length * length)
    return -tol / length <= t <= 1 + tol / length


def _edges(hull: list) -> list:
    if len(hull) < 2:
        return []
    if len(hull) == 2:
        return [(hull[0], hull[1])]
    return [(hull[k], hull[(k + 1) % len(hull)]) for k in range(len(hull))]


def _segment_cross(a, b, c, d):
    r = (b[0] - a[0], b[1] - a[1])
    s = (d[0] - c[0], d[1] - c[1])
    den = r[0] * s[1] - r[1] * s[0]
    if den == 0.0:
        return None
    qp = (c[0] - a[0], c[1] - a[1])
    t = (qp[0] * s[1] - qp[1] * s[0]) / den
    u = (qp[0] * r[1] - qp[1] * r[0]) / den
    if -1e-12 <= t <= 1 + 1e-12 and -1e-12 <= u <= 1 + 1e-12:
        return (a[0] + t * r[0], a[1] + t * r[1])
    return None


def _intersect_2d(parts: list[np.ndarray], tol: float) -> np.ndarray | None:
    # extreme points of an intersection of convex polygons are hull vertices
    # or crossings of two hull edges, so scanning those candidates is exact
    hulls = [_hull_2d(p) for p in parts]
    cands = [v for h in hulls for v in h]
    for ha, hb in itertools.combinations(hulls, 2):
        for ea in _edges(ha):
            for eb in _edges(hb):
                x = _segment_cross(ea[0], ea[1], eb[0], eb[1])
                if x is not None:
                    cands.append(x)
    best = None
    for x in cands:
        if all(_in_hull_2d(h, x, tol) for h in hulls):
            arr = np.array(x, dtype=float)
            if _better(arr, best, tol):
                best = arr
    return best


def _intersect_lp(parts: list[np.ndarray], tol: float) -> np.ndarray | None:
    m = parts[0].shape[1]
    single = next((p[0] for p in parts if len(p) == 1), None)
    if single is not None:
        # the intersection is at most this point
        if all(hull_distance(p, single) <= tol for p in parts):
            return single.copy()
        return None
    sizes = [len(p) for p in parts]
    nvar = m + sum(sizes)
    rows = []
    rhs = []
    off = m
    for p in parts:
        for d in range(m):
            row = np.zeros(nvar)
            row[d] = -1.0
            row[off:off + len(p)] = p[:, d]
            rows.append(row)
            rhs.append(0.0)
        row = np.zeros(nvar)
        row[off:off + len(p)] = 1.0
        rows.append(row)
        rhs.append(1.0)
        off += len(p)
    a_eq = np.array(rows)
    b_eq = np.array(rhs)
    bounds = [(None, None)] * m + [(0, None)] * (nvar - m)
    c = np.zeros(nvar)
    c[:m] = 1.0
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs", options=_LP_OPTIONS)
    if res.status != 0:
        return None
    x = res.x
    # lexicographic tie-break along the optimal face
    a_ub = [c.copy()]
    b_ub = [res.fun + tol * max(1.0, abs(res.fun))]
    for d in range(m - 1):
        obj = np.zeros(nvar)
        obj[d] = 1.0
        sub = linprog(obj, A_ub=np.array(a_ub), b_ub=np.array(b_ub), A_eq=a_eq, b_eq=b_eq,
                      bounds=bounds, method="highs", options=_LP_OPTIONS)
        if sub.status != 0:
            break
        x = sub.x
        a_ub.append(obj)
        b_ub.append(sub.fun + tol * max(1.0, abs(sub.fun)))
    return np.asarray(x[:m], dtype=float)


def _intersect(parts: list[np.ndarray], tol: float, method: str) -> np.ndarray | None:
    m = parts[0].shape[1]
    if method == "auto":
        method = {1: "interval", 2: "geometric"}.get(m, "lp")
    if method == "interval":
        return _intersect_1d(parts, tol)
    if method == "geometric":
        return _intersect_2d(parts, tol)
    return _intersect_lp(parts, tol)


def tverberg_point(points, f: int, method: str = "auto") -> TverbergResult:
    """Tverberg point of exactly ``(m + 1) f + 1`` points in ``R^m``.

    Args:
        points: array-like of shape ``(k, m)`` (a 1-D array is read as ``m = 1``).
        f: fault budget; the partition has ``f + 1`` parts.
        method: ``"auto"``, ``"interval"``, ``"geometric"`` or ``"lp"``.

    Raises:
        DegenerateInputError: on a wrong number of points.
        TverbergError: if no partition is feasible.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    k, m = pts.shape
    need = (m + 1) * f + 1
    if k != need:
        raise DegenerateInputError(f"need exactly {need} points for m={m}, f={f}; got {k}")
    scale = max(1.0, float(np.abs(pts).max()))
    tol = FEASIBILITY_TOL * scale
    if f == 0 or np.all(pts == pts[0]):
        labels = (0,) * k if f == 0 else next(set_partitions(k, f + 1))
        return TverbergResult(pts[0].copy(), _part_lists(labels, f + 1), pts)
    for labels in set_partitions(k, f + 1):
        parts_idx = _part_lists(labels, f + 1)
        x = _intersect([pts[list(p)] for p in parts_idx], tol, method)
        if x is not None:
            return TverbergResult(x, parts_idx, pts)
    raise TverbergError(f"no Tverberg partition found for {k} points in R^{m}")


def _radon_points(subsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radon points of a batch of ``(m + 2)``-point subsets.

    Returns the points and a mask of subsets in general position; entries
    outside the mask are meaningless.
    """
    b, k, m = subsets.shape
    centred = subsets - subsets[:, :1, :]
    aug = np.concatenate([centred, np.ones((b, k, 1))], axis=2)  # (b, m+2, m+1)
    coef = np.empty((b, k))
    for idx in range(k):
        minor = np.delete(aug, idx, axis=1)
        coef[:, idx] = (-1) ** idx * np.linalg.det(minor)
    amax = np.abs(coef).max(axis=1)
    ok = (amax > 0) & np.all(np.abs(coef) > RADON_REL_TOL * amax[:, None], axis=1)
    pos = np.where(coef > 0, coef, 0.0)
    denom = pos.sum(axis=1)
    safe = np.where(denom > 0, denom, 1.0)
    pts = np.einsum("bk,bkm->bm", pos, subsets) / safe[:, None]
    return pts, ok & (denom > 0)


# canonical 2-part partitions of 4 points: (kind, indices); "tri" = (a, b, c | d), "seg" = (a, b | c, d)
_PLANAR_PARTITIONS = (
    ("tri", (0, 1, 2, 3)),
    ("tri", (0, 1, 3, 2)),
    ("seg", (0, 1, 2, 3)),
    ("tri", (0, 2, 3, 1)),
    ("seg", (0, 2, 1, 3)),
    ("seg", (0, 3, 1, 2)),
    ("tri", (1, 2, 3, 0)),
)


def _orient(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def _pick(p: np.ndarray, q: np.ndarray, tol: np.ndarray) -> np.ndarray:
    """Row-wise the better of two candidate points: smaller coordinate sum, then smaller x."""
    ds = p.sum(axis=1) - q.sum(axis=1)
    take_p = (ds < -tol) | ((np.abs(ds) <= tol) & (p[:, 0] <= q[:, 0] + tol))
    return np.where(take_p[:, None], p, q)


def _segment_pair_meet(pa, pb, pc, pd, tol):
    """Best common point of segments ``ab`` and ``cd``, row-wise; ``(feasible, point)``."""
    r = pb - pa
    q = pd - pc
    len_r = np.linalg.norm(r, axis=1)
    len_q = np.linalg.norm(q, axis=1)
    tiny = 1e-300
    den = r[:, 0] * q[:, 1] - r[:, 1] * q[:, 0]
    zero_r = len_r <= tol
    zero_q = len_q <= tol
    parallel = np.abs(den) <= 1e-14 * np.maximum(len_r * len_q, tiny)
    ok = np.zeros(len(pa), dtype=bool)
    pts = np.zeros_like(pa)

    # proper crossing
    go = ~parallel & ~zero_r & ~zero_q
    safe = np.where(go, den, 1.0)
    w = pc - pa
    t = (w[:, 0] * q[:, 1] - w[:, 1] * q[:, 0]) / safe
    u = (w[:, 0] * r[:, 1] - w[:, 1] * r[:, 0]) / safe
    et = tol / np.maximum(len_r, tiny)
    eu = tol / np.maximum(len_q, tiny)
    hit = go & (t >= -et) & (t <= 1 + et) & (u >= -eu) & (u <= 1 + eu)
    ok |= hit
    pts = np.where(hit[:, None], pa + np.clip(t, 0.0, 1.0)[:, None] * r, pts)

    # collinear overlap of two proper segments
    col = parallel & ~zero_r & ~zero_q
    col &= np.abs(_orient(pa, pb, pc)) <= tol * np.maximum(len_r, tiny)
    rr = np.maximum(len_r * len_r, tiny)
    sc = ((pc - pa) * r).sum(axis=1) / rr
    sd = ((pd - pa) * r).sum(axis=1) / rr
    lo = np.maximum(0.0, np.minimum(sc, sd))
    hi = np.minimum(1.0, np.maximum(sc, sd))
    hit = col & (lo <= hi + et)
    best = _pick(pa + lo[:, None] * r, pa + np.maximum(lo, hi)[:, None] * r, tol)
    ok |= hit
    pts = np.where(hit[:, None], best, pts)

    # a segment that is a single point must lie on the other one
    for point, seg_a, seg_b, here in ((pa, pc, pd, zero_r & ~zero_q), (pc, pa, pb, zero_q & ~zero_r)):
        v = seg_b - seg_a
        lv = np.maximum(np.linalg.norm(v, axis=1), tiny)
        on_line = np.abs(_orient(seg_a, seg_b, point)) <= tol * lv
        s_par = ((point - seg_a) * v).sum(axis=1) / np.maximum(lv * lv, tiny)
        within = (s_par >= -tol / lv) & (s_par <= 1 + tol / lv)
        hit = here & on_line & within
        ok |= hit
        pts = np.where(hit[:, None], point, pts)
    both = zero_r & zero_q & (np.abs(pa - pc).max(axis=1) <= tol)
    ok |= both
    pts = np.where(both[:, None], pa, pts)
    return ok, pts


def _planar_tverberg_batch(subsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised Tverberg points for ``f = 1`` in the plane (4 points each).

    Walks the canonical partitions in order.  A (3 | 1) partition is
    feasible iff the lone point lies in the triangle, and then it is the
    answer; a (2 | 2) partition of non-parallel segments has at most one
    common point, and collinear ones overlap in an interval whose better
    endpoint is taken.  The second return value marks subsets with no
    feasible partition (possible only through round-off); callers redo
    those with :func:`tverberg_point`.
    """
    b = subsets.shape[0]
    scale = np.maximum(1.0, np.abs(subsets).reshape(b, -1).max(axis=1))
    tol = FEASIBILITY_TOL * scale
    out = np.zeros((b, 2))
    done = np.zeros(b, dtype=bool)
    for kind, (i, j, k, l) in _PLANAR_PARTITIONS:
        live = ~done
        if not live.any():
            break
        pa, pb, pc, pd = (subsets[:, idx] for idx in (i, j, k, l))
        if kind == "tri":
            s = np.stack([_orient(pa, pb, pd), _orient(pb, pc, pd), _orient(pc, pa, pd)], axis=1)
            edges = np.stack([
                np.linalg.norm(pb - pa, axis=1),
                np.linalg.norm(pc - pb, axis=1),
                np.linalg.norm(pa - pc, axis=1),
            ], axis=1)
            slack = tol[:, None] * np.maximum(edges, 1e-300)
            mixed = np.any(s < -slack, axis=1) & np.any(s > slack, axis=1)
            tri = subsets[:, [i, j, k]]
            inbox = np.all(
                (pd >= tri.min(axis=1) - tol[:, None]) & (pd <= tri.max(axis=1) + tol[:, None]), axis=1
            )
            ok = live & ~mixed & inbox
            out[ok] = pd[ok]
            done |= ok
        else:
            ok, pts = _segment_pair_meet(pa, pb, pc, pd, tol)
            ok &= live
            out[ok] = pts[ok]
            done |= ok
    return out, ~done


def _prepare(own, received: ReceivedMultiset, f: int, m: int | None, max_inputs: int):
    x = np.atleast_1d(np.asarray(own, dtype=float))
    if m is None:
        m = x.shape[0]
    vals = np.array([x] + [np.atleast_1d(np.asarray(v, dtype=float)) for v in received.values])
    total = len(vals)
    need = (m + 1) * f + 1
    if total < need:
        raise DegenerateInputError(
            f"{total} values available but dimension {m} with f={f} needs at least {need}"
        )
    if total > max_inputs:
        raise DegenerateInputError(
            f"{total} values exceed the subset-loop guard of {max_inputs} (C({total}, {need}) LPs)"
        )
    return x, vals, m, need


def _tverberg_batch(subsets: np.ndarray, f: int, m: int) -> np.ndarray:
    if f == 1 and m == 2:
        z, redo = _planar_tverberg_batch(subsets)
        for b in np.flatnonzero(redo):
            z[b] = tverberg_point(subsets[b], f).point
    elif f == 1:
        z, ok = _radon_points(subsets)
        for b in np.flatnonzero(~ok):
            z[b] = tverberg_point(subsets[b], f).point
    else:
        z = np.array([tverberg_point(s, f).point for s in subsets])
    return z


def one_iter(own, received: ReceivedMultiset, f: int, m: int | None = None,
             max_inputs: int = DEFAULT_MAX_INPUTS) -> np.ndarray:
    """One Tverberg-trimmed averaging round for a vector-valued state.

    Every ``(m + 1) f + 1``-subset of ``[own] + received`` (in
    ``itertools.combinations`` order, own value first, then senders by id)
    contributes one Tverberg point; the result is the plain mean of ``own``
    and all those points.

    Raises:
        DegenerateInputError: when fewer than ``(m + 1) f + 1`` values are
            available or more than ``max_inputs``.
    """
    return one_iter_many([own], [received], f, m, max_inputs)[0]


def one_iter_many(owns, receiveds, f: int, m: int | None = None,
                  max_inputs: int = DEFAULT_MAX_INPUTS) -> list[np.ndarray]:
    """:func:`one_iter` for several agents at once; subsets share one batched solve."""
    prepared = [_prepare(x, r, f, m, max_inputs) for x, r in zip(owns, receiveds)]
    if not prepared:
        return []
    if f == 0:
        # every 1-subset is its own Tverberg point
        return [(vals.sum(axis=0) + x) / (len(vals) + 1) for x, vals, _, _ in prepared]
    dim = prepared[0][2]
    blocks = []
    for x, vals, _, need in prepared:
        combos = np.array(list(itertools.combinations(range(len(vals)), need)))
        blocks.append(vals[combos])
    z = _tverberg_batch(np.concatenate(blocks), f, dim)
    out = []
    off = 0
    for (x, _, _, _), block in zip(prepared, blocks):
        part = z[off:off + len(block)]
        off += len(block)
        out.append((x + part.sum(axis=0)) / (1 + len(part)))
    return out


def trimmed_scalar_round(own: float, received: ReceivedMultiset, f: int) -> float:
    """Drop the ``f`` smallest and ``f`` largest received values, average the rest with ``own``.

    Ties are ordered by sender id so the trimmed set is deterministic.
    """
    if len(received) < 2 * f + 1:
        raise DegenerateInputError(
            f"trimming needs at least {2 * f + 1} received values, got {len(received)}"
        )
    ordered = sorted(received.entries, key=lambda e: (float(e[1]), e[0]))
    kept = ordered[f:len(ordered) - f]
    return (sum(float(v) for _, v in kept) + float(own)) / (len(kept) + 1)


def trimmed_survivors(received: ReceivedMultiset, f: int) -> list[int]:
    ordered = sorted(received.entries, key=lambda e: (float(e[1]), e[0]))
    return [j for j, _ in ordered[f:len(ordered) - f]]
