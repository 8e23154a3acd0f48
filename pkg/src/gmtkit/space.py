"""Weighted point clouds, regularity measurement, localization, scale trading.

A :class:`WeightedSet` stands for a pair (E, mu): ``points`` are the atoms of
E and ``weights`` the mass mu assigns to each.  ``dim_d`` is the regularity
dimension and ``scale_range = (r_min, r_max)`` the band of radii at which the
cloud faithfully represents a continuum set.  All statements below are
asserted for radii in that band only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .metrics import EUCLIDEAN, PARABOLIC, BallIndex, Metric, diameter

# Centers are exhaustive below this cloud size; above it the radius grid
# uses a scale-adapted deterministic subsample of centers (see ledger).
EXHAUSTIVE_CENTER_LIMIT = 2048
RADII_PER_OCTAVE = 8


class RegularityError(ValueError):
    """Raised when a cloud cannot support the claimed regularity at all."""


@dataclass(frozen=True)
class WeightedSet:
    metric: Metric
    points: np.ndarray
    weights: np.ndarray
    dim_d: float
    scale_range: tuple[float, float]
    _index: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        pts = self.metric.check_points(self.points)
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(w) != len(pts):
            raise ValueError("points and weights disagree in length")
        if len(pts) == 0:
            raise ValueError("empty cloud")
        if not np.all(w > 0):
            raise ValueError("all weights must be strictly positive")
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(pts)):
            raise ValueError("non-finite data")
        r_min, r_max = self.scale_range
        if not (0 < r_min <= r_max):
            raise ValueError("scale_range must satisfy 0 < r_min <= r_max")
        if self.dim_d <= 0:
            raise ValueError("dim_d must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        pts.setflags(write=False)
        w.setflags(write=False)

    # -- cached geometry ---------------------------------------------------

    @property
    def index(self) -> BallIndex:
        if not self._index:
            self._index.append(BallIndex(self.metric, self.points))
        return self._index[0]

    def __len__(self) -> int:
        return len(self.points)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def r_min(self) -> float:
        return self.scale_range[0]

    @property
    def r_max(self) -> float:
        return self.scale_range[1]

    def diameter(self) -> float:
        return diameter(self.metric, self.points)

    def max_nn_distance(self) -> float:
        """Maximal nearest-neighbour distance within the cloud (exact)."""
        if len(self) == 1:
            return 0.0
        if self.metric.kind == EUCLIDEAN:
            d, _ = self.index.tree.query(self.points, k=2)
            return float(d[:, 1].max())
        # parabolic: euclidean candidates give an upper bound per point; the
        # bound is exact unless the true neighbour fell outside the k-list,
        # so refine only the worst offenders exactly.
        k = min(len(self), 8)
        _, idx = self.index.tree.query(self.points, k=k)
        cand = self.points[idx]  # (m, k, dim)
        dx = np.linalg.norm(
            cand[:, :, : self.metric.n] - self.points[:, None, : self.metric.n], axis=2
        )
        dt = np.abs(cand[:, :, self.metric.n] - self.points[:, None, self.metric.n])
        dp = dx + np.sqrt(dt)
        dp[dp == 0] = np.inf
        ub = dp.min(axis=1)
        order = np.argsort(-ub)[: max(8, len(self) // 100)]
        exact = self.index.nn_dist(self.points[order], exclude_self=True)
        return float(max(exact.max(), np.delete(ub, order).max() if len(self) > len(order) else 0.0))

    def validate(self):
        """Check the resolution invariant r_min >= 2 * max NN distance."""
        nn = self.max_nn_distance()
        if self.r_min < 2 * nn:
            raise RegularityError(
                f"r_min={self.r_min:.4g} under-resolves the cloud "
                f"(max nearest-neighbour distance {nn:.4g})"
            )

    def subset(self, indices: np.ndarray, scale_range=None) -> "WeightedSet":
        indices = np.asarray(indices, dtype=int)
        return WeightedSet(
            metric=self.metric,
            points=self.points[indices].copy(),
            weights=self.weights[indices].copy(),
            dim_d=self.dim_d,
            scale_range=scale_range or self.scale_range,
        )


@dataclass(frozen=True)
class RegularityReport:
    constant_C: float | None
    dim_d: float
    scale_range: tuple[float, float]
    worst_ball: tuple[int, float, float]  # (center index, radius, ratio)
    per_scale_stats: list  # [(radius, min ratio, max ratio)]
    centers_sampled: str = "all"

    @property
    def passed(self) -> bool:
        return self.constant_C is not None

    def to_json(self) -> dict:
        return {
            "constant_C": self.constant_C,
            "dim_d": self.dim_d,
            "scale_range": list(self.scale_range),
            "worst_ball": [self.worst_ball[0], self.worst_ball[1], self.worst_ball[2]],
            "per_scale_stats": [[r, lo, hi] for r, lo, hi in self.per_scale_stats],
            "centers_sampled": self.centers_sampled,
        }


def ball_mass(S: WeightedSet, center, r: float) -> float:
    """mu(B(center, r) cap E) with the closed-ball convention."""
    if r <= 0:
        raise ValueError("radius must be positive")
    idx = S.index.ball(np.asarray(center, dtype=float), r)
    return float(S.weights[idx].sum())


def radius_grid(r_min: float, r_max: float, per_octave: int = RADII_PER_OCTAVE) -> np.ndarray:
    if r_max <= r_min:
        return np.array([r_min])
    octaves = np.log2(r_max / r_min)
    count = max(2, int(np.ceil(octaves * per_octave)) + 1)
    return np.geomspace(r_min, r_max, count)


def _center_subsample(
    n_points: int, r: float, diam: float, dim_d: float, limit: int | None = None
) -> np.ndarray:
    """Deterministic stride subsample of centers, denser at small radii
    (ball masses vary slowly in the center at scale r, so a sparse sample
    suffices once balls are large)."""
    limit = EXHAUSTIVE_CENTER_LIMIT if limit is None else limit
    if n_points <= limit:
        return np.arange(n_points)
    want = int(np.ceil(8.0 * (max(diam, r) / r) ** dim_d))
    want = int(np.clip(want, 16, limit))
    return np.unique(np.linspace(0, n_points - 1, want).round().astype(int))


def _ball_mass_table(
    S: WeightedSet, centers: np.ndarray, radii: np.ndarray
) -> np.ndarray:
    """Ball masses mu(B(center, r)) for every center x radius pair: bucket
    each center-to-point distance into the radius grid, accumulate bucket
    masses, and cumulative-sum -- no per-ball index queries, no sorting."""
    from scipy.spatial.distance import cdist

    pts, w = S.points, S.weights
    met = S.metric
    n = len(pts)
    nr = len(radii)
    out = np.empty((len(centers), nr))
    chunk = max(1, int(6e6 // max(n, 1)))
    for s in range(0, len(centers), chunk):
        rows = centers[s : s + chunk]
        c = len(rows)
        if met.kind == EUCLIDEAN:
            dist = cdist(pts[rows], pts)
        else:
            dist = cdist(pts[rows, : met.n], pts[:, : met.n])
            dist += np.sqrt(np.abs(pts[rows, None, met.n] - pts[None, :, met.n]))
        # bucket b means radii[b-1] < dist <= radii[b]; mass at radius i
        # is then the cumulative bucket mass through i
        bucket = np.searchsorted(radii, dist.ravel(), side="left")
        ids = np.repeat(np.arange(c) * (nr + 1), n) + bucket
        acc = np.bincount(
            ids,
            weights=np.broadcast_to(w, (c, n)).ravel(),
            minlength=c * (nr + 1),
        ).reshape(c, nr + 1)
        out[s : s + c] = np.cumsum(acc[:, :nr], axis=1)
    return out


def regularity_check(
    S: WeightedSet,
    fail_above: float | None = None,
    validate_resolution: bool = True,
    per_octave: int | None = None,
    center_limit: int | None = None,
) -> RegularityReport:
    """Measure the smallest C with C^-1 r^d <= mu(B(x,r)) <= C r^d over the
    radius grid and sampled centers.

    Centers are exhaustive for clouds up to EXHAUSTIVE_CENTER_LIMIT points and
    a scale-adapted stride subsample beyond that (ball masses vary slowly in
    the center at scale r, so the subsample changes the constant only by a
    bounded factor).  ``per_octave`` and ``center_limit`` override the
    default sampling density; lighter settings suit bulk audits where a
    generous tolerance absorbs the sampling slack.
    """
    if validate_resolution:
        S.validate()
    radii = radius_grid(
        *S.scale_range,
        per_octave=RADII_PER_OCTAVE if per_octave is None else per_octave,
    )
    diam = S.diameter()
    stats = []
    worst = (0, radii[0], 1.0)
    worst_dev = 1.0
    c_lo, c_hi = np.inf, 0.0
    limit = EXHAUSTIVE_CENTER_LIMIT if center_limit is None else center_limit
    exhaustive = len(S) <= limit
    per_r_centers = [
        _center_subsample(len(S), float(r), diam, S.dim_d, limit) for r in radii
    ]
    uniq = np.unique(np.concatenate(per_r_centers))
    table = _ball_mass_table(S, uniq, np.asarray(radii, dtype=float))
    for i, r in enumerate(radii):
        centers = per_r_centers[i]
        masses = table[np.searchsorted(uniq, centers), i]
        if np.any(masses <= 0):
            bad = centers[int(np.argmin(masses))]
            raise RegularityError(
                f"ball of radius {r:.4g} at point {bad} carries no mass"
            )
        ratios = masses / r ** S.dim_d
        lo, hi = float(ratios.min()), float(ratios.max())
        stats.append((float(r), lo, hi))
        c_lo, c_hi = min(c_lo, lo), max(c_hi, hi)
        for val, pick in ((lo, int(centers[np.argmin(ratios)])), (hi, int(centers[np.argmax(ratios)]))):
            dev = max(val, 1.0 / val)
            if dev > worst_dev:
                worst_dev = dev
                worst = (pick, float(r), val)
    constant = max(c_hi, 1.0 / c_lo, 1.0)
    if fail_above is not None and constant > fail_above:
        return RegularityReport(
            constant_C=None,
            dim_d=S.dim_d,
            scale_range=S.scale_range,
            worst_ball=worst,
            per_scale_stats=stats,
            centers_sampled="all" if exhaustive else "scale-adapted",
        )
    return RegularityReport(
        constant_C=float(constant),
        dim_d=S.dim_d,
        scale_range=S.scale_range,
        worst_ball=worst,
        per_scale_stats=stats,
        centers_sampled="all" if exhaustive else "scale-adapted",
    )


def localize_indices(S: WeightedSet, x: int, r: float) -> np.ndarray:
    """Indices selected by the ball-growth localization around point x."""
    r_min, r_max = S.scale_range
    if not (r_min <= r <= r_max):
        raise ValueError(f"radius {r} outside scale_range {S.scale_range}")
    x = int(x)
    center = S.points[x]
    member = np.zeros(len(S), dtype=bool)
    frontier = S.index.ball(center, r)
    member[frontier] = True
    cap = int(np.ceil(np.log2(max(r / r_min, 1.0)))) + 4
    for k in range(1, cap + 1):
        rk = r * 2.0 ** (-k)
        new = []
        for lst in S.index.ball_many(S.points[frontier], rk):
            new.append(lst)
        if new:
            cand = np.unique(np.concatenate(new)) if len(new) else np.array([], int)
            fresh = cand[~member[cand]]
        else:
            fresh = np.array([], dtype=int)
        if len(fresh) == 0:
            break
        member[fresh] = True
        frontier = fresh
    return np.flatnonzero(member)


def localize(S: WeightedSet, x: int, r: float) -> WeightedSet:
    """The ball-growth localization: A_0 = B(x,r) cap E, then
    A_k = union over z in A_{k-1} of B(z, 2^-k r) cap E until stable.

    The output sits between B(x,r) cap E and B(x,3r) cap E, inherits weights,
    and carries scale_range (r_min, 10r).
    """
    indices = localize_indices(S, x, r)
    return S.subset(indices, scale_range=(S.scale_range[0], 10.0 * r))


def scale_trade(report: RegularityReport, R: float, R_prime: float) -> RegularityReport:
    """Trade regularity to a larger top scale: Reg(C, R) with diam < R gives
    Reg(C (R'/R)^d, R')."""
    if R_prime <= R:
        raise ValueError("R_prime must exceed R")
    if not report.passed:
        raise ValueError("cannot scale-trade a failed report")
    factor = (R_prime / R) ** report.dim_d
    return replace(
        report,
        constant_C=report.constant_C * factor,
        scale_range=(report.scale_range[0], R_prime),
    )


# -- I/O --------------------------------------------------------------------


def save_cloud(S: WeightedSet, csv_path) -> None:
    csv_path = Path(csv_path)
    n = S.metric.n
    if S.metric.kind == EUCLIDEAN:
        header = [f"x{i + 1}" for i in range(n)] + ["w"]
    else:
        header = [f"x{i + 1}" for i in range(n)] + ["t", "w"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p, w in zip(S.points, S.weights):
            writer.writerow([repr(float(v)) for v in p] + [repr(float(w))])
    sidecar = {
        "metric": S.metric.kind,
        "n": S.metric.n,
        "d": S.dim_d,
        "r_min": S.scale_range[0],
        "r_max": S.scale_range[1],
    }
    csv_path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def load_cloud(csv_path) -> WeightedSet:
    csv_path = Path(csv_path)
    sidecar = json.loads(csv_path.with_suffix(".json").read_text())
    metric = Metric(sidecar["metric"], int(sidecar["n"]))
    rows = []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "w":
            raise ValueError("cloud CSV must end with a weight column 'w'")
        for row in reader:
            rows.append([float(v) for v in row])
    data = np.asarray(rows, dtype=float)
    return WeightedSet(
        metric=metric,
        points=data[:, :-1],
        weights=data[:, -1],
        dim_d=float(sidecar["d"]),
        scale_range=(float(sidecar["r_min"]), float(sidecar["r_max"])),
    )
