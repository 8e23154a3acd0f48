"""Distance machinery for weighted point clouds.

Two metric kinds are supported:

* ``euclidean(n)`` -- the usual metric on R^n.
* ``parabolic(n)`` -- on R^(n+1), points are (X, t) with X in R^n and a
  trailing time coordinate; d((X,t),(Y,s)) = |X - Y| + |t - s|^(1/2).

All ball conventions are *closed*: a point y belongs to B(x, r) iff
d(x, y) <= r.  Ball queries run through a cKDTree on the raw coordinates
with an exact metric filter, so results are exact for both kinds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

EUCLIDEAN = "euclidean"
PARABOLIC = "parabolic"


@dataclass(frozen=True)
class Metric:
    """A metric tag: ``kind`` plus the number of *spatial* dimensions n.

    Euclidean points carry n coordinates; parabolic points carry n + 1
    (the last column is time).
    """

    kind: str
    n: int

    def __post_init__(self):
        if self.kind not in (EUCLIDEAN, PARABOLIC):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("need at least one spatial dimension")

    @property
    def ambient_dim(self) -> int:
        return self.n if self.kind == EUCLIDEAN else self.n + 1

    def check_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.ambient_dim:
            raise ValueError(
                f"points must be (m, {self.ambient_dim}) for {self.kind}({self.n})"
            )
        return pts

    # -- distances -------------------------------------------------------

    def dist_to_point(self, pts: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Distances from every row of ``pts`` to the single point ``x``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        x = np.asarray(x, dtype=float).ravel()
        if self.kind == EUCLIDEAN:
            return np.linalg.norm(pts - x, axis=1)
        dx = np.linalg.norm(pts[:, : self.n] - x[: self.n], axis=1)
        dt = np.abs(pts[:, self.n] - x[self.n])
        return dx + np.sqrt(dt)

    def pairwise(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Full distance matrix (len(a), len(b)).  Use chunked helpers for
        large inputs."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if self.kind == EUCLIDEAN:
            diff = a[:, None, :] - b[None, :, :]
            return np.linalg.norm(diff, axis=2)
        dx = np.linalg.norm(a[:, None, : self.n] - b[None, :, : self.n], axis=2)
        dt = np.abs(a[:, None, self.n] - b[None, :, self.n])
        return dx + np.sqrt(dt)

    def scale(self, pts: np.ndarray, rho: float) -> np.ndarray:
        """The metric's natural dilation by rho > 0.

        Euclidean: x -> rho x.  Parabolic: (X, t) -> (rho X, rho^2 t); this
        is the homogeneity d(delta_rho p, delta_rho q) = rho d(p, q).
        """
        pts = self.check_points(np.atleast_2d(pts))
        out = pts * rho
        if self.kind == PARABOLIC:
            out[:, self.n] = pts[:, self.n] * rho * rho
        return out

    def _cover_radius(self, r: float) -> float:
        """Euclidean radius whose ball covers the metric ball of radius r."""
        if self.kind == EUCLIDEAN:
            return r
        return float(np.sqrt(r * r + r ** 4))


def diameter(metric: Metric, pts: np.ndarray, exact_below: int = 384) -> float:
    """Diameter of a finite cloud.

    Exact O(m^2) scan for small clouds; iterated two-sweep (farthest point
    from the current pole, four rounds) otherwise.  The two-sweep value is a
    lower bound on the true diameter but is exact on the convex-ish clouds
    produced here; call sites that need a certified upper bound should pair
    it with 2 * max-distance-from-one-point, which the sweep also yields.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    m = len(pts)
    if m <= 1:
        return 0.0
    if m <= exact_below:
        best = 0.0
        for i in range(m - 1):
            d = metric.dist_to_point(pts[i + 1 :], pts[i]).max()
            best = max(best, float(d))
        return best
    pole = 0
    best = 0.0
    for _ in range(4):
        d = metric.dist_to_point(pts, pts[pole])
        far = int(np.argmax(d))
        if d[far] <= best:
            break
        best = float(d[far])
        pole = far
    return best


class BallIndex:
    """Closed-ball and nearest-neighbour queries over a fixed cloud."""

    def __init__(self, metric: Metric, pts: np.ndarray):
        self.metric = metric
        self.pts = metric.check_points(np.atleast_2d(pts))
        self.tree = cKDTree(self.pts)

    def __len__(self) -> int:
        return len(self.pts)

    def ball(self, x: np.ndarray, r: float) -> np.ndarray:
        """Indices of points with d(x, .) <= r (sorted ascending)."""
        x = np.asarray(x, dtype=float).ravel()
        cand = self.tree.query_ball_point(x, self.metric._cover_radius(r))
        cand = np.asarray(sorted(cand), dtype=int)
        if len(cand) == 0:
            return cand
        if self.metric.kind == EUCLIDEAN:
            return cand
        d = self.metric.dist_to_point(self.pts[cand], x)
        return cand[d <= r]

    def ball_many(self, xs: np.ndarray, r: float) -> list[np.ndarray]:
        """Per-center index lists for a shared radius."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        lists = self.tree.query_ball_point(xs, self.metric._cover_radius(r))
        out = []
        for i, cand in enumerate(lists):
            cand = np.asarray(cand, dtype=int)
            if len(cand) and self.metric.kind == PARABOLIC:
                d = self.metric.dist_to_point(self.pts[cand], xs[i])
                cand = cand[d <= r]
            out.append(cand)
        return out

    def mass_many(self, xs: np.ndarray, r: float, weights: np.ndarray) -> np.ndarray:
        """Sum of ``weights`` over each closed ball B(x, r), x in xs."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        lists = self.tree.query_ball_point(xs, self.metric._cover_radius(r))
        out = np.zeros(len(xs))
        arrs = [np.asarray(c, dtype=int) for c in lists]
        lens = np.fromiter((len(a) for a in arrs), dtype=int, count=len(arrs))
        if lens.sum() == 0:
            return out
        flat = np.concatenate(arrs)
        rows = np.repeat(np.arange(len(xs)), lens)
        if self.metric.kind == PARABOLIC:
            n = self.metric.n
            dx = np.linalg.norm(self.pts[flat, :n] - xs[rows, :n], axis=1)
            dt = np.abs(self.pts[flat, n] - xs[rows, n])
            keep = dx + np.sqrt(dt) <= r
            flat, rows = flat[keep], rows[keep]
        return np.bincount(rows, weights=weights[flat], minlength=len(xs))

    def nn_dist(self, xs: np.ndarray, exclude_self: bool = False) -> np.ndarray:
        """Exact nearest-neighbour distance from each query to the cloud.

        For the parabolic kind a Euclidean candidate pass seeds an exact
        range rescan, so the result is the true d_p nearest distance.  The
        rescan runs in fixed-size query chunks with per-point radii, so
        memory stays linear in the batch even for cloud-sized batches.
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        k = 2 if exclude_self else 1
        if self.metric.kind == EUCLIDEAN:
            d, _ = self.tree.query(xs, k=k)
            d = np.atleast_2d(d)
            return d[:, -1] if k == 2 else d.ravel()
        kq = min(len(self.pts), 8 if not exclude_self else 9)
        _, idx = self.tree.query(xs, k=kq)
        idx = np.atleast_2d(idx)
        # upper bound from the Euclidean candidates (exact d_p to each)
        cand_d = rowwise(
            self.metric,
            np.repeat(xs, idx.shape[1], axis=0),
            self.pts[idx.ravel()],
        ).reshape(idx.shape)
        if exclude_self:
            cand_d[cand_d <= 0.0] = np.inf
        out = cand_d.min(axis=1)
        # exact pass: anything parabolically closer sits within the
        # Euclidean cover radius of the current bound
        chunk = 1024
        for s in range(0, len(xs), chunk):
            sl = slice(s, min(s + chunk, len(xs)))
            r_cov = cover_many(self.metric, np.where(np.isfinite(out[sl]), out[sl], 0.0))
            lists = self.tree.query_ball_point(xs[sl], r_cov * (1 + 1e-12))
            arrs = [np.asarray(l, dtype=int) for l in lists]
            lens = np.fromiter((len(a) for a in arrs), dtype=int, count=len(arrs))
            if lens.sum() == 0:
                continue
            flat = np.concatenate([a for a in arrs if len(a)])
            rows = np.repeat(np.arange(sl.stop - sl.start), lens)
            d = rowwise(self.metric, xs[sl][rows], self.pts[flat])
            if exclude_self:
                keep = d > 0.0
                rows, d = rows[keep], d[keep]
            if len(rows):
                np.minimum.at(out[sl], rows, d)
        return out


def dist_to_cloud(metric: Metric, queries: np.ndarray, cloud_index: BallIndex) -> np.ndarray:
    """Exact distance from each query point to a cloud (via its BallIndex)."""
    return cloud_index.nn_dist(queries)


def rowwise(metric: Metric, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance between corresponding rows of two equally shaped stacks."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if metric.kind == EUCLIDEAN:
        return np.linalg.norm(a - b, axis=1)
    dx = np.linalg.norm(a[:, : metric.n] - b[:, : metric.n], axis=1)
    dt = np.abs(a[:, metric.n] - b[:, metric.n])
    return dx + np.sqrt(dt)


def cover_many(metric: Metric, r) -> np.ndarray:
    """Vectorised Euclidean cover radius for an array of metric radii."""
    r = np.asarray(r, dtype=float)
    if metric.kind == EUCLIDEAN:
        return r
    return np.sqrt(r * r + r ** 4)


def points_near_set(
    metric: Metric,
    pts: np.ndarray,
    set_pts: np.ndarray,
    r: float,
    strict: bool = False,
) -> np.ndarray:
    """Positions (into ``pts``) of all points within r of the finite set.

    Closed threshold by default; ``strict`` switches to d < r.  Exact in
    both metric kinds.  The query runs from the candidate side: one
    Euclidean nearest-neighbour pass over ``pts`` settles most points (a
    point on the set, or far outside the cover radius, resolves
    immediately), and only the ambiguous band gets an exact chunked
    rescan.  Memory stays linear in len(pts) + len(set_pts) instead of
    quadratic, which matters when the set is a sizeable chunk of the
    cloud.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    set_pts = np.atleast_2d(np.asarray(set_pts, dtype=float))
    set_tree = cKDTree(set_pts)
    d_e, j = set_tree.query(pts, k=1)
    if metric.kind == EUCLIDEAN:
        keep = d_e < r if strict else d_e <= r
        return np.nonzero(keep)[0]
    # exact distance to the Euclidean-nearest set point is an upper bound
    # on the distance to the set; the cover radius bounds it from below
    d_near = rowwise(metric, pts, set_pts[j])
    near = d_near < r if strict else d_near <= r
    cover = metric._cover_radius(r) * (1 + 1e-12)
    ambig = np.nonzero(~near & (d_e <= cover))[0]
    chunk = 512
    for s in range(0, len(ambig), chunk):
        rows_g = ambig[s : s + chunk]
        lists = set_tree.query_ball_point(pts[rows_g], cover)
        arrs = [np.asarray(l, dtype=int) for l in lists]
        lens = np.fromiter((len(a) for a in arrs), dtype=int, count=len(arrs))
        if lens.sum() == 0:
            continue
        flat = np.concatenate([a for a in arrs if len(a)])
        src = np.repeat(rows_g, lens)
        d = rowwise(metric, pts[src], set_pts[flat])
        keep = d < r if strict else d <= r
        if keep.any():
            near[np.unique(src[keep])] = True
    return np.nonzero(near)[0]
