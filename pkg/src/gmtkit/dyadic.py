"""Nested dyadic-style cube trees over weighted point clouds.

Construction: greedy maximal 2^-k-separated nets per level (coarse to fine,
centers promoted downward, candidates scanned in input index order), one
nearest-center cell assignment at the finest level, and nearest-coarser-
center links between consecutive levels.  Cube membership at level k is the
composition of those links, so the partition and nesting invariants hold by
construction; ``validate_grid`` re-checks everything from the stored tables
and measures the geometric quality constants (inner-ball a0, diameter
ratio C1).

Distance ties break by (center generation, point index): the generation of
a center is the level at which it first entered the net ladder, so older
centers win ties.  This keeps cells two-sided around their centers (bare
index ties would systematically hand midpoint territory to one side and
collapse the inner-ball constant at coarse levels).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .metrics import EUCLIDEAN, cover_many, diameter, points_near_set, rowwise
from .space import RegularityError, WeightedSet

__all__ = [
    "Cube",
    "DyadicTree",
    "GridReport",
    "GridViolation",
    "build_tree",
    "validate_grid",
    "dilate",
    "sawtooth",
]

# A net at separation s may not exceed this many centers per covering ball
# of radius diam; blowing past it means the cloud is not d-regular at that
# scale and the tree build aborts.
NET_CARDINALITY_SLACK = 64.0


# ---------------------------------------------------------------------------
# net construction
# ---------------------------------------------------------------------------


def _seedless_net(S: WeightedSet, sep: float) -> np.ndarray:
    """Sequential greedy net for the top level (few centers expected)."""
    pts, met = S.points, S.metric
    alive = np.ones(len(pts), dtype=bool)
    net = []
    while True:
        rest = np.flatnonzero(alive)
        if rest.size == 0:
            break
        c = rest[0]
        net.append(c)
        near = points_near_set(met, pts, pts[c][None, :], sep, strict=True)
        alive[near] = False
        alive[c] = False
        if len(net) > 4096:
            raise RegularityError(
                f"net at separation {sep:.3g} exploded; cloud looks irregular"
            )
    return np.asarray(net, dtype=int)


def _sequential_rest(S: WeightedSet, cand: np.ndarray, sep: float) -> np.ndarray:
    """Sequential greedy over an explicit candidate list (index order)."""
    pts, met = S.points, S.metric
    ctree = cKDTree(pts[cand])
    cover = met._cover_radius(sep) * (1 + 1e-12)
    alive = np.ones(cand.size, dtype=bool)
    accepted = []
    pos = 0
    while pos < cand.size:
        if not alive[pos]:
            pos += 1
            continue
        c = int(cand[pos])
        accepted.append(c)
        alive[pos] = False
        nb = np.asarray(ctree.query_ball_point(pts[c], cover), dtype=int)
        if nb.size:
            d = met.dist_to_point(pts[cand[nb]], pts[c])
            alive[nb[d < sep]] = False
        pos += 1
    return np.asarray(accepted, dtype=int)


def _extend_net(S: WeightedSet, seeds: np.ndarray, sep: float) -> np.ndarray:
    """Greedy maximal sep-separated subset scanned in point-index order.

    ``seeds`` (pairwise >= sep apart) are kept, in order; new centers are
    appended in ascending point index — the sequential greedy outcome.  At
    fine scales batched rounds do the work vectorised: a candidate is
    accepted once every smaller-index candidate within sep of it has been
    rejected, and rejection only happens through an accepted center within
    sep.  At coarse scales (huge cover neighbourhoods, few centers) the
    scan falls back to sequential exclusion, which is cheap there.
    """
    pts, met = S.points, S.metric
    if len(seeds) == 0:
        return _seedless_net(S, sep)
    near = points_near_set(met, pts, pts[seeds], sep, strict=True)
    alive = np.ones(len(pts), dtype=bool)
    alive[near] = False
    alive[seeds] = False
    cand = np.flatnonzero(alive)
    new_idx: list[np.ndarray] = []
    rounds = 0
    while cand.size:
        rounds += 1
        if rounds > 64:
            raise RegularityError(
                f"net refinement at separation {sep:.3g} did not settle; "
                "cloud looks irregular"
            )
        ctree = cKDTree(pts[cand])
        cover = met._cover_radius(sep) * (1 + 1e-12)
        probe = cand[:: max(1, cand.size // 256)][:256]
        counts = ctree.query_ball_point(pts[probe], cover, return_length=True)
        est_pairs = float(np.mean(counts)) * cand.size / 2.0
        if est_pairs > 2e7:
            new_idx.append(_sequential_rest(S, cand, sep))
            break
        unsafe = np.zeros(cand.size, dtype=bool)
        if met.kind == EUCLIDEAN:
            pairs = ctree.query_pairs(sep * (1 - 1e-12), output_type="ndarray")
            if len(pairs):
                unsafe[pairs[:, 1]] = True
        else:
            pairs = ctree.query_pairs(cover, output_type="ndarray")
            for lo in range(0, len(pairs), 4_000_000):
                hi = min(lo + 4_000_000, len(pairs))
                d = rowwise(
                    met, pts[cand[pairs[lo:hi, 0]]], pts[cand[pairs[lo:hi, 1]]]
                )
                blocked = pairs[lo:hi, 1][d < sep]
                unsafe[blocked] = True
        acc = cand[~unsafe]
        new_idx.append(acc)
        rest = cand[unsafe]
        if rest.size:
            blocked = points_near_set(met, pts[rest], pts[acc], sep, strict=True)
            keep = np.ones(rest.size, dtype=bool)
            keep[blocked] = False
            cand = rest[keep]
        else:
            cand = rest
    new = np.sort(np.concatenate(new_idx)) if new_idx else np.empty(0, dtype=int)
    return np.concatenate([np.asarray(seeds, dtype=int), new])


def _nearest_with_pref(
    met,
    center_pts: np.ndarray,
    gen: np.ndarray,
    order: np.ndarray,
    query_pts: np.ndarray,
    tie_rel: float = 1e-9,
) -> np.ndarray:
    """Ordinal of the preferred nearest center for each query row.

    Preference: smallest distance, then smallest generation, then smallest
    point index (``order``).  Exact in both metric kinds: a Euclidean
    k-candidate pass is widened per query until provably complete.
    """
    center_pts = np.atleast_2d(center_pts)
    query_pts = np.atleast_2d(query_pts)
    nc = len(center_pts)
    tree = cKDTree(center_pts)
    k = min(nc, 12)
    de, ci = tree.query(query_pts, k=k)
    de = de.reshape(len(query_pts), k)
    ci = ci.reshape(len(query_pts), k)
    if met.kind == EUCLIDEAN:
        dm = de
    else:
        flat = rowwise(
            met,
            np.repeat(query_pts, k, axis=0),
            center_pts[ci.ravel()],
        )
        dm = flat.reshape(len(query_pts), k)
    best = dm.min(axis=1)
    # Which queries might prefer a center outside the k candidates?  Any
    # center at metric distance <= best*(1+tol) lies within the Euclidean
    # cover of that radius; if the k-th Euclidean distance exceeds it, the
    # candidate list is complete.
    gen = np.asarray(gen, dtype=np.int64)
    order = np.asarray(order, dtype=np.int64)
    shift = gen - gen.min() if nc else gen
    big = np.int64(len(order) + 1 if order.size == 0 else order.max() + 2)
    key_all = shift * big + order

    def pick(drow, crow):
        mask = drow <= drow.min() * (1 + tie_rel) + 0.0
        keys = np.where(mask, key_all[crow], np.iinfo(np.int64).max)
        return crow[int(np.argmin(keys))]

    out = np.empty(len(query_pts), dtype=int)
    keys = np.where(
        dm <= (best * (1 + tie_rel))[:, None],
        key_all[ci],
        np.iinfo(np.int64).max,
    )
    out[:] = ci[np.arange(len(query_pts)), np.argmin(keys, axis=1)]
    if k < nc:
        need = de[:, -1] <= cover_many(met, best * (1 + tie_rel)) * (1 + 1e-12)
        for i in np.flatnonzero(need):
            cand = tree.query_ball_point(
                query_pts[i], met._cover_radius(best[i] * (1 + tie_rel)) * (1 + 1e-12)
            )
            cand = np.asarray(cand, dtype=int)
            d = met.dist_to_point(center_pts[cand], query_pts[i])
            out[i] = pick(d, cand)
    return out


# ---------------------------------------------------------------------------
# tree
# ---------------------------------------------------------------------------


@dataclass
class Cube:
    """Read-only view of one cube of the tree."""

    id: int
    level_k: int
    center_index: int
    member_indices: np.ndarray
    parent: int | None
    children: list
    mass: float
    ell: float


@dataclass
class DyadicTree:
    space: WeightedSet
    k_min: int
    k_max: int
    # flat cube tables (index = cube id)
    level_of: np.ndarray
    center_of: np.ndarray  # point index of the cube center
    parent_of: np.ndarray  # cube id, -1 at the top level
    mass_of: np.ndarray
    # per-level membership tables: order[k] lists point indices grouped by
    # cube ordinal, bounds[k][i]:bounds[k][i+1] slices ordinal i's cell
    _order: dict = field(repr=False)
    _bounds: dict = field(repr=False)
    _offset: dict = field(repr=False)  # level -> first cube id
    children_of: list = field(repr=False)
    # measured by validate_grid
    a0: float | None = None
    C1: float | None = None
    _diam: np.ndarray | None = field(default=None, repr=False)
    _euler: tuple | None = field(default=None, repr=False)

    # -- basics -------------------------------------------------------------

    @property
    def n_cubes(self) -> int:
        return len(self.level_of)

    def levels(self) -> range:
        return range(self.k_min, self.k_max + 1)

    def level_ids(self, k: int) -> np.ndarray:
        off = self._offset[k]
        return np.arange(off, off + len(self._bounds[k]) - 1)

    def ell(self, q: int) -> float:
        return 2.0 ** (-int(self.level_of[q]))

    def members(self, q: int) -> np.ndarray:
        k = int(self.level_of[q])
        i = q - self._offset[k]
        b = self._bounds[k]
        return self._order[k][b[i] : b[i + 1]]

    def member_count(self, q: int) -> int:
        k = int(self.level_of[q])
        i = q - self._offset[k]
        b = self._bounds[k]
        return int(b[i + 1] - b[i])

    def cube_of(self, point_index: int, k: int) -> int:
        """Cube id containing a point at level k (via the stored tables)."""
        return int(self.assign(k)[point_index])

    def assign(self, k: int) -> np.ndarray:
        """Point index -> cube id at level k."""
        inv = np.empty(len(self.space), dtype=int)
        b = self._bounds[k]
        off = self._offset[k]
        for i in range(len(b) - 1):
            inv[self._order[k][b[i] : b[i + 1]]] = off + i
        return inv

    def cube(self, q: int) -> Cube:
        return Cube(
            id=int(q),
            level_k=int(self.level_of[q]),
            center_index=int(self.center_of[q]),
            member_indices=self.members(q),
            parent=None if self.parent_of[q] < 0 else int(self.parent_of[q]),
            children=list(self.children_of[q]),
            mass=float(self.mass_of[q]),
            ell=self.ell(q),
        )

    def roots(self) -> np.ndarray:
        return self.level_ids(self.k_min)

    def center_point(self, q: int) -> np.ndarray:
        return self.space.points[int(self.center_of[q])]

    # -- derived geometry ----------------------------------------------------

    def diam(self, q: int) -> float:
        if self._diam is None:
            self._diam = np.full(self.n_cubes, np.nan)
        if np.isnan(self._diam[q]):
            pts = self.space.points[self.members(q)]
            self._diam[q] = diameter(self.space.metric, pts, exact_below=512)
        return float(self._diam[q])

    # -- tree walking ---------------------------------------------------------

    def _euler_tour(self):
        if self._euler is None:
            tin = np.zeros(self.n_cubes, dtype=int)
            tout = np.zeros(self.n_cubes, dtype=int)
            clock = 0
            for r in self.roots():
                stack = [(int(r), False)]
                while stack:
                    q, done = stack.pop()
                    if done:
                        tout[q] = clock
                        continue
                    tin[q] = clock
                    clock += 1
                    stack.append((q, True))
                    for c in reversed(self.children_of[q]):
                        stack.append((int(c), False))
            self._euler = (tin, tout)
        return self._euler

    def is_ancestor(self, a: int, q: int) -> bool:
        """True when a == q or a is a strict ancestor of q."""
        tin, tout = self._euler_tour()
        return tin[a] <= tin[q] and tout[q] <= tout[a]

    def subtree_ids(self, q: int) -> np.ndarray:
        """All ids in the subtree rooted at q, q included, sorted by id."""
        tin, tout = self._euler_tour()
        inside = (tin >= tin[q]) & (tout <= tout[q])
        return np.flatnonzero(inside)

    def bottom_up_ids(self) -> np.ndarray:
        """All ids ordered finest level first (stable within a level)."""
        return np.argsort(-self.level_of, kind="stable")

    # -- export ---------------------------------------------------------------

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for q in range(self.n_cubes):
                row = {
                    "id": int(q),
                    "k": int(self.level_of[q]),
                    "parent": None if self.parent_of[q] < 0 else int(self.parent_of[q]),
                    "center": int(self.center_of[q]),
                    "n_members": self.member_count(q),
                    "mass": float(self.mass_of[q]),
                }
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def _level_window(S: WeightedSet) -> tuple[int, int]:
    r_min, r_max = S.scale_range
    # finest separation ~ 4 r_min (>= 8x the point resolution), coarsest <= r_max
    k_max = int(round(-math.log2(4.0 * r_min)))
    k_min = int(math.ceil(-math.log2(r_max) - 1e-9))
    if k_min > k_max:
        raise ValueError(
            f"scale_range {S.scale_range} leaves no room for a cube level: "
            f"k_min={k_min} > k_max={k_max}"
        )
    return k_min, k_max


def build_tree(S: WeightedSet) -> DyadicTree:
    """Construct the nested cube tree for a resolved, regular cloud.

    Raises RegularityError when the cloud under-resolves its scale range or
    when net cardinalities explode (non-regular cloud); ValueError when the
    scale range admits no level.
    """
    S.validate()
    k_min, k_max = _level_window(S)
    pts = S.points
    n = len(pts)
    met = S.metric
    diam = S.diameter()

    # internal ladder may start above the requested window so that every
    # seeded level only refines small pockets
    if diam > 0:
        k_top = min(k_min, int(math.floor(-math.log2(diam))) + 1)
    else:
        k_top = k_min

    nets: dict[int, np.ndarray] = {}
    generation = np.full(n, np.iinfo(np.int32).max, dtype=np.int64)
    seeds = np.empty(0, dtype=int)
    for k in range(k_top, k_max + 1):
        sep = 2.0 ** (-k)
        net = _extend_net(S, seeds, sep)
        cap = NET_CARDINALITY_SLACK * max(1.0, (diam / sep + 1.0) ** S.dim_d)
        if len(net) > cap:
            raise RegularityError(
                f"net at level {k} holds {len(net)} centers (cap {cap:.0f}); "
                "cloud is not regular at that scale"
            )
        fresh = net[generation[net] == np.iinfo(np.int32).max]
        generation[fresh] = k
        nets[k] = net
        seeds = net

    # finest-level cell assignment
    fine_net = nets[k_max]
    fine_assign = _nearest_with_pref(
        met, pts[fine_net], generation[fine_net], fine_net, pts
    )
    self_cells = fine_assign[fine_net] == np.arange(len(fine_net))
    if not np.all(self_cells):
        raise RegularityError("duplicate points? a net center lost its own cell")

    # parent links between consecutive exposed levels
    link: dict[int, np.ndarray] = {}
    for k in range(k_min + 1, k_max + 1):
        up, down = nets[k - 1], nets[k]
        link[k] = _nearest_with_pref(
            met, pts[up], generation[up], up, pts[down]
        )

    # chains: finest ordinal -> level-k ordinal
    chain: dict[int, np.ndarray] = {k_max: np.arange(len(fine_net))}
    for k in range(k_max - 1, k_min - 1, -1):
        chain[k] = link[k + 1][chain[k + 1]]

    # flat cube tables
    offset: dict[int, int] = {}
    level_of, center_of, parent_of, mass_parts = [], [], [], []
    order: dict[int, np.ndarray] = {}
    bounds: dict[int, np.ndarray] = {}
    next_id = 0
    for k in range(k_min, k_max + 1):
        m = len(nets[k])
        offset[k] = next_id
        level_of.append(np.full(m, k, dtype=int))
        center_of.append(nets[k])
        if k == k_min:
            parent_of.append(np.full(m, -1, dtype=int))
        else:
            parent_of.append(offset[k - 1] + link[k])
        a = chain[k][fine_assign]
        mass_parts.append(np.bincount(a, weights=S.weights, minlength=m))
        srt = np.argsort(a, kind="stable")
        order[k] = srt
        bounds[k] = np.concatenate(
            [[0], np.cumsum(np.bincount(a, minlength=m))]
        ).astype(int)
        if np.any(np.diff(bounds[k]) == 0):
            raise RegularityError(f"empty cube at level {k}; construction broke")
        next_id += m

    level_arr = np.concatenate(level_of)
    center_arr = np.concatenate(center_of)
    parent_arr = np.concatenate(parent_of)
    mass_arr = np.concatenate(mass_parts)
    total = S.total_mass
    level_sums = [mass_parts[i].sum() for i in range(len(mass_parts))]
    if not np.allclose(level_sums, total, rtol=1e-9, atol=0):
        raise AssertionError("per-level cube masses do not add up to the total")

    children: list[list[int]] = [[] for _ in range(next_id)]
    for q in range(next_id):
        p = parent_arr[q]
        if p >= 0:
            children[p].append(q)

    return DyadicTree(
        space=S,
        k_min=k_min,
        k_max=k_max,
        level_of=level_arr,
        center_of=center_arr,
        parent_of=parent_arr,
        mass_of=mass_arr,
        _order=order,
        _bounds=bounds,
        _offset=offset,
        children_of=children,
    )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


@dataclass
class GridViolation:
    kind: str
    cube_id: int
    detail: str


@dataclass
class GridReport:
    passed: bool
    a0: float
    C1: float
    k_min: int
    k_max: int
    n_cubes: int
    level_counts: dict
    violations: list

    def to_json(self) -> dict:
        return {
            "passed": bool(self.passed),
            "a0": self.a0,
            "C1": self.C1,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "n_cubes": self.n_cubes,
            "level_counts": {str(k): int(v) for k, v in self.level_counts.items()},
            "violations": [
                {"kind": v.kind, "cube_id": int(v.cube_id), "detail": v.detail}
                for v in self.violations
            ],
        }


def _outside_distance(T: DyadicTree, k: int, inv: np.ndarray) -> np.ndarray:
    """Distance from each level-k center to the nearest non-member point.

    +inf for a cube that owns the whole cloud.  Exact in both metric kinds.
    """
    S = T.space
    met, pts = S.metric, S.points
    ids = T.level_ids(k)
    centers = pts[T.center_of[ids]]
    out = np.full(len(ids), np.inf)
    kq = min(len(pts), 64)
    de, ci = S.index.tree.query(centers, k=kq)
    de = de.reshape(len(ids), kq)
    ci = ci.reshape(len(ids), kq)
    if met.kind == EUCLIDEAN:
        dm = de
    else:
        dm = rowwise(
            met, np.repeat(centers, kq, axis=0), pts[ci.ravel()]
        ).reshape(len(ids), kq)
    foreign = inv[ci] != ids[:, None]
    dm_f = np.where(foreign, dm, np.inf)
    best = dm_f.min(axis=1)
    # the k-NN pass is complete for query i when its k-th Euclidean distance
    # already exceeds the cover radius of the found distance
    done = de[:, -1] >= cover_many(met, best) * (1 - 1e-12)
    done |= kq >= len(pts)
    out[done] = best[done]
    for i in np.flatnonzero(~done):
        r = 2.0 ** (-k)
        found = np.inf
        while True:
            cand = np.asarray(
                S.index.tree.query_ball_point(centers[i], met._cover_radius(r)),
                dtype=int,
            )
            cand = cand[inv[cand] != ids[i]]
            if len(cand):
                d = met.dist_to_point(pts[cand], centers[i])
                found = float(d.min())
                if met._cover_radius(found) <= r * (1 + 1e-12):
                    break
                r = met._cover_radius(found)
            else:
                if len(T.members(ids[i])) == len(pts):
                    found = np.inf
                    break
                r *= 2.0
        out[i] = found
    return out


def _level_diams(T: DyadicTree, k: int) -> np.ndarray:
    """Diameter of every level-k cube.

    Small cubes (<= 96 members) get the exact pairwise maximum in padded
    batches; larger cubes fall back to iterated sweeps.
    """
    S = T.space
    met, pts = S.metric, S.points
    b, order = T._bounds[k], T._order[k]
    counts = np.diff(b)
    out = np.empty(len(counts))
    small = np.flatnonzero(counts <= 96)
    large = np.flatnonzero(counts > 96)
    for i in large:
        out[i] = diameter(met, pts[order[b[i] : b[i + 1]]], exact_below=512)
    chunk = 256
    for lo in range(0, len(small), chunk):
        sel = small[lo : lo + chunk]
        mx = int(counts[sel].max())
        gather = np.empty((len(sel), mx), dtype=int)
        for j, i in enumerate(sel):
            row = order[b[i] : b[i + 1]]
            gather[j, : len(row)] = row
            gather[j, len(row) :] = row[0]
        P = pts[gather]  # (c, mx, dim)
        if met.kind == EUCLIDEAN:
            D = np.linalg.norm(P[:, :, None, :] - P[:, None, :, :], axis=3)
        else:
            dx = np.linalg.norm(
                P[:, :, None, : met.n] - P[:, None, :, : met.n], axis=3
            )
            dt = np.abs(P[:, :, None, met.n] - P[:, None, :, met.n])
            D = dx + np.sqrt(dt)
        out[sel] = D.max(axis=(1, 2))
    return out


def validate_grid(T: DyadicTree) -> GridReport:
    """Re-check every tree invariant from the stored tables.

    Checks: per-level partition, center membership, child/parent nesting,
    unique parent one level up, mass consistency.  Measures: C1 (largest
    diam(Q)/2^-k) and a0 (largest ball-fraction around centers contained in
    their cube, reported as min over cubes of the center-to-outside
    distance over 2^-k).
    """
    S = T.space
    n = len(S)
    violations: list[GridViolation] = []
    inv_by_level: dict[int, np.ndarray] = {}

    for k in T.levels():
        ids = T.level_ids(k)
        order, b = T._order[k], T._bounds[k]
        counts = np.diff(b)
        if counts.min(initial=1) < 1:
            empty = ids[np.argmin(counts)]
            violations.append(GridViolation("empty-cube", int(empty), f"level {k}"))
        cover = np.bincount(order, minlength=n) if len(order) else np.zeros(n, int)
        if len(order) != n or cover.max(initial=0) > 1:
            p = int(np.argmax(cover))
            violations.append(
                GridViolation("overlap", -1, f"point {p} sits in {cover[p]} cubes")
            )
        if cover.min(initial=1) < 1:
            p = int(np.argmin(cover))
            violations.append(
                GridViolation("gap", -1, f"point {p} uncovered at level {k}")
            )
        inv = np.full(n, -1, dtype=int)
        inv[order] = np.repeat(ids, counts)
        inv_by_level[k] = inv
        bad_center = inv[T.center_of[ids]] != ids
        if bad_center.any():
            q = ids[int(np.flatnonzero(bad_center)[0])]
            violations.append(
                GridViolation(
                    "center-outside", int(q), f"center point {T.center_of[q]}"
                )
            )

    for k in T.levels():
        if k == T.k_min:
            continue
        up = inv_by_level[k - 1]
        here = inv_by_level[k]
        ok = here >= 0
        parent_mismatch = ok & (T.parent_of[np.where(ok, here, 0)] != up)
        if parent_mismatch.any():
            p = int(np.flatnonzero(parent_mismatch)[0])
            violations.append(
                GridViolation(
                    "nesting",
                    int(here[p]),
                    f"point {p}: cube {here[p]} not inside its parent "
                    f"{T.parent_of[here[p]]} (point's level-{k-1} cube is {up[p]})",
                )
            )

    top = T.parent_of < 0
    bad_top = top & (T.level_of != T.k_min)
    for q in np.flatnonzero(bad_top):
        violations.append(
            GridViolation("orphan", int(q), f"missing parent at level {T.level_of[q]}")
        )
    with_parent = np.flatnonzero(~top)
    lvl_bad = T.level_of[T.parent_of[with_parent]] != T.level_of[with_parent] - 1
    for q in with_parent[np.flatnonzero(lvl_bad)]:
        violations.append(
            GridViolation(
                "parent-level", int(q), f"parent {T.parent_of[q]} at wrong level"
            )
        )

    for k in T.levels():
        ids = T.level_ids(k)
        sums = np.add.reduceat(S.weights[T._order[k]], T._bounds[k][:-1])
        err = np.abs(T.mass_of[ids] - sums)
        worst = int(np.argmax(err))
        if err[worst] > 1e-9 * S.total_mass:
            violations.append(
                GridViolation(
                    "mass", int(ids[worst]), f"cached mass off by {err[worst]:.3g}"
                )
            )

    if T._diam is None:
        T._diam = np.full(T.n_cubes, np.nan)
    C1 = 0.0
    for k in T.levels():
        d = _level_diams(T, k)
        T._diam[T.level_ids(k)] = d
        C1 = max(C1, float(d.max()) * 2.0 ** k)

    a0 = np.inf
    for k in T.levels():
        d_out = _outside_distance(T, k, inv_by_level[k])
        ratios = d_out / 2.0 ** (-k)
        finite = ratios[np.isfinite(ratios)]
        if len(finite):
            a0 = min(a0, float(finite.min()))
    if not np.isfinite(a0):
        a0 = 1.0  # every cube owns the whole cloud (single-center levels)

    report = GridReport(
        passed=not violations and a0 > 0,
        a0=float(a0),
        C1=float(C1),
        k_min=T.k_min,
        k_max=T.k_max,
        n_cubes=T.n_cubes,
        level_counts={k: len(T.level_ids(k)) for k in T.levels()},
        violations=violations,
    )
    if report.passed:
        T.a0, T.C1 = report.a0, report.C1
    return report


# ---------------------------------------------------------------------------
# derived families
# ---------------------------------------------------------------------------


def dilate(T: DyadicTree, q: int, K: float) -> np.ndarray:
    """Point indices of the K-dilation: members plus every cloud point
    within (K-1)*diam(Q) of the member set.  K=1 returns the members."""
    if K < 1:
        raise ValueError("dilation factor must be >= 1")
    members = np.sort(T.members(q))
    if K == 1:
        return members
    S = T.space
    r = (K - 1) * T.diam(q)
    if r == 0:
        return members
    center = T.center_point(q)
    cand = S.index.ball(center, r + T.diam(q) * (1 + 1e-12))
    if len(cand) == 0:
        return members
    near = points_near_set(S.metric, S.points[cand], S.points[members], r)
    return np.union1d(members, cand[near])


def sawtooth(T: DyadicTree, q0: int, F) -> np.ndarray:
    """Ids of subcubes of q0 not contained in any cube of the family F.

    F must be pairwise disjoint subcubes of q0 (ancestor/descendant pairs
    are rejected).  q0 itself belongs to the result unless it sits in F.
    """
    F = [int(f) for f in F]
    for f in F:
        if not T.is_ancestor(q0, f):
            raise ValueError(f"cube {f} is not below {q0}")
    for i, a in enumerate(F):
        for b in F[i + 1 :]:
            if T.is_ancestor(a, b) or T.is_ancestor(b, a):
                raise ValueError(f"family is not disjoint: {a} and {b} nest")
    fset = set(F)
    out = []
    stack = [int(q0)]
    while stack:
        q = stack.pop()
        if q in fset:
            continue
        out.append(q)
        stack.extend(int(c) for c in T.children_of[q])
    return np.asarray(sorted(out), dtype=int)
