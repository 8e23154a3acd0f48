"""Flatness numbers over cube trees and the cross-set comparison checks.

For each cube the module measures how well the doubled cube is matched by
a member of a plane family (or an explicit list of reference clouds):
``beta_q`` in the L^q-mean sense, ``beta_inf`` in the sup sense, and
``bbeta`` bilaterally (the plane must also stay near the cloud).  On top
sit three Carleson-packing verifiers for those numbers, proximity numbers
between two clouds, companion-cube selection across two trees, and
``transfer_check`` which measures the inequalities that push flatness
from big-piece approximants back to the ambient cloud.

q = 2 fits are exact weighted least squares; every other exponent and the
sup variants use bounded candidate searches seeded at the L^2 fit, so the
reported values are achieved upper bounds, conservative for every packing
verdict tested here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .carleson import DiscreteMeasure, carleson_norm
from .dyadic import DyadicTree, dilate
from .space import WeightedSet

__all__ = [
    "Plane",
    "PlaneFamily",
    "BetaValue",
    "beta_q",
    "beta_inf",
    "bbeta",
    "companion_cube",
    "CompanionError",
    "companion_multiplicity",
    "i_numbers",
    "beta_table",
    "GeoLemmaReport",
    "glem_check",
    "wglem_check",
    "bwglem_check",
    "TransferReport",
    "transfer_check",
    "beta_table_csv",
]

OFFSET_STEPS = 17        # offset sweep per normal direction in the sup search
GRID_PER_DIM = 9         # plane-sampling grid used by the bilateral term
COMPANION_C2 = 40.0      # companion diameter window [10, C2] * diam(Q)
WEISZFELD_CAP = 50
WEISZFELD_SEEDS = 3
DEGENERATE_TOL = 1e-9


class CompanionError(ValueError):
    """No admissible companion cube exists (window boundary or missed set)."""


# ---------------------------------------------------------------------------
# plane families


@dataclass(frozen=True)
class Plane:
    """One candidate flat.

    Affine flats store a point and an orthonormal spanning basis (columns);
    t-axis-parallel hyperplanes store a unit spatial normal and an offset.
    """

    kind: str  # "affine" | "parabolic"
    point: np.ndarray | None = None
    basis: np.ndarray | None = None
    normal: np.ndarray | None = None
    offset: float = 0.0

    def params(self) -> list:
        if self.kind == "affine":
            return [float(v) for v in np.concatenate([self.point, self.basis.ravel()])]
        return [float(v) for v in np.append(self.normal, self.offset)]


@dataclass
class PlaneFamily:
    """A family of competitor sets: affine d-flats, t-axis-parallel
    hyperplanes (the spatial-normal family), or explicit reference clouds."""

    kind: str  # "affine" | "parabolic" | "explicit"
    n: int = 0  # ambient columns for affine; spatial columns for parabolic
    d_int: int = 0
    sets: list = field(default_factory=list)

    @classmethod
    def affine_d_planes(cls, n: int, d_int: int) -> "PlaneFamily":
        if not 0 < d_int < n:
            raise ValueError("need 0 < plane dimension < ambient dimension")
        return cls(kind="affine", n=n, d_int=d_int)

    @classmethod
    def parabolic_planes(cls, n: int) -> "PlaneFamily":
        """Hyperplanes of (X, t)-space containing a line parallel to the
        t axis: { <X, normal> = offset } with zero t-component normals."""
        if n < 1:
            raise ValueError("need at least one spatial dimension")
        return cls(kind="parabolic", n=n)

    @classmethod
    def explicit_sets(cls, sets: list) -> "PlaneFamily":
        if not sets:
            raise ValueError("explicit family needs at least one set")
        return cls(kind="explicit", sets=list(sets))

    def dist(self, plane, pts: np.ndarray) -> np.ndarray:
        """Distances from pts to one family member (plane or set index)."""
        pts = np.atleast_2d(pts)
        if self.kind == "explicit":
            return self.sets[int(plane)].index.nn_dist(pts)
        if self.kind == "parabolic":
            return np.abs(pts[:, : self.n] @ plane.normal - plane.offset)
        r = pts - plane.point
        return np.linalg.norm(r - (r @ plane.basis) @ plane.basis.T, axis=1)

    def project(self, plane: Plane, pts: np.ndarray) -> np.ndarray:
        """Nearest points on the plane (affine/parabolic kinds only)."""
        pts = np.atleast_2d(pts)
        if self.kind == "parabolic":
            out = pts.copy()
            shift = pts[:, : self.n] @ plane.normal - plane.offset
            out[:, : self.n] -= shift[:, None] * plane.normal[None, :]
            return out
        r = pts - plane.point
        return plane.point + (r @ plane.basis) @ plane.basis.T


@dataclass
class BetaValue:
    cube: int
    q: float  # np.inf for the sup variants
    value: float
    minimizer: object = None  # Plane, explicit-set index, or None
    heuristic: bool = False
    mass_q: float = 0.0
    mass_2q: float = 0.0
    bilateral: bool = False

    @property
    def normalized(self) -> float:
        """Mass-normalized variant (doubled-cube mean), monotone in q."""
        if not np.isfinite(self.q) or self.mass_2q <= 0:
            return self.value
        return self.value * (self.mass_q / self.mass_2q) ** (1.0 / self.q)


# ---------------------------------------------------------------------------
# exact L2 fits and the Weiszfeld iteration


def _fit_affine_l2(pts: np.ndarray, w: np.ndarray, d_int: int) -> Plane:
    mean = np.average(pts, axis=0, weights=np.maximum(w, 0))
    x = (pts - mean) * np.sqrt(np.maximum(w, 0))[:, None]
    cov = x.T @ x
    vals, vecs = np.linalg.eigh(cov)
    return Plane(kind="affine", point=mean, basis=vecs[:, pts.shape[1] - d_int :])


def _fit_parabolic_l2(pts: np.ndarray, w: np.ndarray, n: int) -> Plane:
    y = pts[:, :n]
    mean = np.average(y, axis=0, weights=np.maximum(w, 0))
    x = (y - mean) * np.sqrt(np.maximum(w, 0))[:, None]
    vals, vecs = np.linalg.eigh(x.T @ x)
    nu = vecs[:, 0]
    c = float(np.average(y @ nu, axis=0, weights=np.maximum(w, 0)))
    return Plane(kind="parabolic", normal=nu, offset=c)


def _fit_l2(family: PlaneFamily, pts: np.ndarray, w: np.ndarray) -> Plane:
    if family.kind == "parabolic":
        return _fit_parabolic_l2(pts, w, family.n)
    return _fit_affine_l2(pts, w, family.d_int)


def _objective(family, plane, pts, w, q, diam) -> float:
    d = family.dist(plane, pts) / diam
    return float(np.sum(w * d**q))


def _jitter_plane(family: PlaneFamily, plane: Plane, rng, scale: float) -> Plane:
    if family.kind == "parabolic":
        nu = plane.normal + scale * rng.standard_normal(len(plane.normal))
        nu /= np.linalg.norm(nu)
        return Plane(kind="parabolic", normal=nu, offset=plane.offset)
    basis = plane.basis + scale * rng.standard_normal(plane.basis.shape)
    basis, _ = np.linalg.qr(basis)
    return Plane(kind="affine", point=plane.point, basis=basis)


def _fit_weiszfeld(family, pts, w, q, diam, seed: int) -> Plane:
    """Iteratively reweighted fit for exponents without a closed form.

    Bounded iteration count, three starts (the L2 fit plus two jittered
    copies), best achieved objective kept.
    """
    rng = np.random.default_rng(seed)
    base = _fit_l2(family, pts, w)
    best, best_obj = base, _objective(family, base, pts, w, q, diam)
    floor = 1e-12 * diam
    for s in range(WEISZFELD_SEEDS):
        plane = base if s == 0 else _jitter_plane(family, base, rng, 0.05)
        prev = np.inf
        for _ in range(WEISZFELD_CAP):
            d = np.maximum(family.dist(plane, pts), floor)
            u = w * (d / diam) ** (q - 2.0)
            if not np.isfinite(u).all() or u.sum() <= 0:
                break
            plane = _fit_l2(family, pts, u)
            obj = _objective(family, plane, pts, w, q, diam)
            if obj < best_obj:
                best, best_obj = plane, obj
            if abs(prev - obj) <= 1e-12 * max(obj, 1e-300):
                break
            prev = obj
    return best


def _cube_patch(T: DyadicTree, q_cube: int, K: float = 2.0):
    """Dilated-cube point rows, weights, cube mass, and the scale used to
    normalize distances (cube diameter)."""
    idx = dilate(T, q_cube, K)
    pts = T.space.points[idx]
    w = T.space.weights[idx]
    return idx, pts, w, float(T.mass_of[q_cube]), float(T.diam(q_cube))


def beta_q(
    T: DyadicTree, q_cube: int, family: PlaneFamily, q: float, K: float = 2.0
) -> BetaValue:
    """L^q flatness of the doubled cube, normalized by the cube's own mass
    and diameter.  Exact minimizer for q = 2 over plane families; achieved
    (heuristic) values otherwise."""
    if not (np.isfinite(q) and q > 0):
        raise ValueError("q must be finite and positive; use beta_inf for sup")
    idx, pts, w, mu, diam = _cube_patch(T, q_cube, K)
    m2 = float(w.sum())
    if diam <= 0 or len(idx) < 2:
        return BetaValue(q_cube, q, 0.0, None, False, mu, m2)
    if family.kind == "explicit":
        vals = [
            (np.sum(w * (family.dist(j, pts) / diam) ** q) / mu) ** (1 / q)
            for j in range(len(family.sets))
        ]
        j = int(np.argmin(vals))
        return BetaValue(q_cube, q, float(vals[j]), j, False, mu, m2)
    if q == 2.0:
        plane = _fit_l2(family, pts, w)
        flag = False
    else:
        plane = _fit_weiszfeld(family, pts, w, q, diam, seed=9176 + 131 * q_cube)
        flag = True
    val = (_objective(family, plane, pts, w, q, diam) / mu) ** (1 / q)
    return BetaValue(q_cube, q, float(val), plane, flag, mu, m2)


# ---------------------------------------------------------------------------
# sup-norm variants via structured candidate search


def _normal_space(family: PlaneFamily, plane: Plane) -> np.ndarray:
    """Orthonormal basis (columns) of directions off the plane."""
    if family.kind == "parabolic":
        return plane.normal[:, None]
    n = plane.basis.shape[0]
    full = np.linalg.qr(
        np.concatenate([plane.basis, np.eye(n)], axis=1)
    )[0]
    return full[:, plane.basis.shape[1] :]


def _shift(family: PlaneFamily, plane: Plane, direction: np.ndarray, o: float) -> Plane:
    if family.kind == "parabolic":
        return Plane(kind="parabolic", normal=plane.normal, offset=plane.offset + o)
    return Plane(kind="affine", point=plane.point + o * direction, basis=plane.basis)


def _rotations(family, plane, pts, w, angles) -> list:
    out = []
    if family.kind == "parabolic":
        n = len(plane.normal)
        comp = np.linalg.qr(
            np.concatenate([plane.normal[:, None], np.eye(n)], axis=1)
        )[0][:, 1:]
        y = pts[:, :n]
        for j in range(comp.shape[1]):
            for sgn in (+1.0, -1.0):
                for s in angles:
                    nu = plane.normal * np.cos(s) + sgn * comp[:, j] * np.sin(s)
                    nu /= np.linalg.norm(nu)
                    c = float(np.average(y @ nu, weights=np.maximum(w, 0)))
                    out.append(Plane(kind="parabolic", normal=nu, offset=c))
        return out
    nspace = _normal_space(family, plane)
    for i in range(plane.basis.shape[1]):
        for j in range(nspace.shape[1]):
            for s in angles:
                for sgn in (+1.0, -1.0):
                    b = plane.basis.copy()
                    b[:, i] = b[:, i] * np.cos(s) + sgn * nspace[:, j] * np.sin(s)
                    bq, _ = np.linalg.qr(b)
                    mean = np.average(pts, axis=0, weights=np.maximum(w, 0))
                    out.append(Plane(kind="affine", point=mean, basis=bq))
    return out


def _sup_candidates(family, pts, w, diam) -> list:
    """Candidate planes for the sup-norm searches: the L2 fit, offset sweeps
    along every normal direction, and small rotations of the fit."""
    fit = _fit_l2(family, pts, w)
    d2 = family.dist(fit, pts) / diam
    b2v = float(np.sqrt(np.sum(w * d2**2) / max(w.sum(), 1e-300)))
    cands = [fit]
    if b2v <= DEGENERATE_TOL:
        return cands
    nspace = _normal_space(family, fit)
    for j in range(nspace.shape[1]):
        for o in np.linspace(-b2v * diam, b2v * diam, OFFSET_STEPS):
            if o != 0.0:
                cands.append(_shift(family, fit, nspace[:, j], o))
    angles = [min(b2v, 0.5), min(b2v / 2, 0.25)]
    cands.extend(_rotations(family, fit, pts, w, angles))
    return cands


def beta_inf(
    T: DyadicTree, q_cube: int, family: PlaneFamily, K: float = 2.0
) -> BetaValue:
    """Sup-norm flatness over the dilated cube; candidate-search upper
    bound for plane families, exact minimum over explicit sets."""
    idx, pts, w, mu, diam = _cube_patch(T, q_cube, K)
    m2 = float(w.sum())
    if diam <= 0 or len(idx) < 2:
        return BetaValue(q_cube, np.inf, 0.0, None, False, mu, m2)
    if family.kind == "explicit":
        vals = [family.dist(j, pts).max() / diam for j in range(len(family.sets))]
        j = int(np.argmin(vals))
        return BetaValue(q_cube, np.inf, float(vals[j]), j, False, mu, m2)
    best, best_v = None, np.inf
    for plane in _sup_candidates(family, pts, w, diam):
        v = family.dist(plane, pts).max() / diam
        if v < best_v:
            best, best_v = plane, v
    return BetaValue(q_cube, np.inf, float(best_v), best, True, mu, m2)


def _plane_samples(family, plane, center, r, n_ambient) -> np.ndarray:
    """A regular patch of plane points inside the metric ball B(center, r)."""
    if family.kind == "explicit":
        member = family.sets[int(plane)]
        return member.points[member.index.ball(center, r)]
    base = family.project(plane, center[None, :])[0]
    if family.kind == "parabolic":
        n = family.n
        comp = np.linalg.qr(
            np.concatenate([plane.normal[:, None], np.eye(n)], axis=1)
        )[0][:, 1:]
        axes = [np.linspace(-r, r, GRID_PER_DIM)] * comp.shape[1]
        axes.append(np.linspace(-(r * r), r * r, GRID_PER_DIM))
        mesh = np.stack(
            [g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1
        )
        out = np.tile(base, (len(mesh), 1))
        out[:, :n] += mesh[:, :-1] @ comp.T
        out[:, n] += mesh[:, -1]
        return out
    dp = plane.basis.shape[1]
    if dp <= 3:
        axes = [np.linspace(-r, r, GRID_PER_DIM)] * dp
        mesh = np.stack(
            [g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1
        )
    else:
        rng = np.random.default_rng(4242)
        mesh = rng.uniform(-r, r, size=(GRID_PER_DIM**3, dp))
    return base[None, :] + mesh @ plane.basis.T


def bbeta(T: DyadicTree, q_cube: int, family: PlaneFamily) -> BetaValue:
    """Bilateral flatness: the sup distance from the doubled cube to the
    plane plus the sup distance from the plane (inside twice the cube's
    ball) back to the cloud; the second term is zero when the plane misses
    the ball entirely."""
    idx, pts, w, mu, diam = _cube_patch(T, q_cube)
    m2 = float(w.sum())
    if diam <= 0 or len(idx) < 2:
        return BetaValue(q_cube, np.inf, 0.0, None, False, mu, m2, bilateral=True)
    met = T.space.metric
    x_q = T.center_point(q_cube)
    r = 2.0 * diam
    cloud = T.space.index
    if family.kind == "explicit":
        cands = list(range(len(family.sets)))
    else:
        cands = _sup_candidates(family, pts, w, diam)
    t1s = np.array([family.dist(pl, pts).max() / diam for pl in cands])
    order = np.argsort(t1s, kind="stable")  # cheap term first so the skip bites
    best, best_v = None, np.inf
    for ci in order:
        plane, t1 = cands[int(ci)], float(t1s[ci])
        if t1 >= best_v:
            break
        samples = _plane_samples(family, plane, x_q, r, pts.shape[1])
        if family.kind != "explicit" and len(samples):
            on_plane = met.dist_to_point(samples, x_q) <= r
            proj = family.project(plane, pts)
            proj = proj[met.dist_to_point(proj, x_q) <= r]
            samples = np.concatenate([samples[on_plane], proj], axis=0)
        t2 = 0.0
        if len(samples):
            t2 = float(cloud.nn_dist(samples).max()) / diam
        v = t1 + t2
        if v < best_v:
            best, best_v = plane, v
    return BetaValue(
        q_cube, np.inf, float(best_v), best,
        family.kind != "explicit", mu, m2, bilateral=True,
    )


# ---------------------------------------------------------------------------
# companion cubes across two trees


def companion_cube(
    T_E: DyadicTree,
    T_Et: DyadicTree,
    q_cube: int,
    c2: float = COMPANION_C2,
    delta: float | None = None,
) -> int:
    """The cube of the second tree meeting q_cube whose diameter lands in
    [10, c2] x diam(q_cube), at the finest admissible level, ties broken
    by id.  Raises CompanionError when q_cube misses the second cloud or
    the window exceeds the second tree's range."""
    from .metrics import points_near_set

    dq = float(T_E.diam(q_cube))
    if dq <= 0:
        # singleton cubes carry no spread; fall back to the lattice scale
        dq = 0.25 * T_E.ell(q_cube)
    if delta is None:
        delta = 2.0 * max(T_E.space.r_min, T_Et.space.r_min)
    q_pts = T_E.space.points[T_E.members(q_cube)]
    near = points_near_set(T_Et.space.metric, T_Et.space.points, q_pts, delta)
    if len(near) == 0:
        raise CompanionError(
            f"cube {q_cube} has no second-cloud point within {delta:.3g}"
        )
    lo, hi = 10.0 * dq, c2 * dq
    for k in range(T_Et.k_max, T_Et.k_min - 1, -1):
        ids = np.unique(T_Et.assign(k)[near])
        ok = [int(i) for i in ids if lo <= T_Et.diam(int(i)) <= hi]
        if ok:
            return min(ok)
    raise CompanionError(
        f"no cube of the companion tree meets cube {q_cube} with diameter in "
        f"[{lo:.3g}, {hi:.3g}] (window boundary)"
    )


def companion_multiplicity(
    T_E: DyadicTree, T_Et: DyadicTree, cubes=None, c2: float = COMPANION_C2
) -> dict:
    """How many source cubes pick each companion; used to audit the
    bounded-multiplicity requirement."""
    counts: dict[int, int] = {}
    cubes = range(T_E.n_cubes) if cubes is None else cubes
    for q in cubes:
        try:
            qt = companion_cube(T_E, T_Et, int(q), c2=c2)
        except CompanionError:
            continue
        counts[qt] = counts.get(qt, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# proximity numbers between two clouds


def i_numbers(T_E2: DyadicTree, E3: WeightedSet, q_cube: int, q: float) -> float:
    """Mean (or sup, q = inf) distance from the doubled cube of the first
    tree to the second cloud, truncated at twice the cube diameter and
    normalized by cube mass and diameter."""
    idx, pts, w, mu, diam = _cube_patch(T_E2, q_cube)
    if diam <= 0:
        return 0.0
    d = E3.index.nn_dist(pts)
    keep = d < 2.0 * diam
    if not keep.any():
        return 0.0
    if np.isinf(q):
        return float(d[keep].max()) / diam
    s = np.sum(w[keep] * (d[keep] / diam) ** q) / mu
    return float(s ** (1.0 / q))


# ---------------------------------------------------------------------------
# geometric-lemma verifiers


def beta_table(
    T: DyadicTree, family: PlaneFamily, mode: str = "q", q: float = 2.0
) -> list:
    """BetaValue for every cube; mode in {'q', 'inf', 'bilateral'}."""
    if mode == "q":
        return [beta_q(T, i, family, q) for i in range(T.n_cubes)]
    if mode == "inf":
        return [beta_inf(T, i, family) for i in range(T.n_cubes)]
    if mode == "bilateral":
        return [bbeta(T, i, family) for i in range(T.n_cubes)]
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class GeoLemmaReport:
    kind: str  # "glem" | "wglem" | "bwglem"
    p: float | None
    q: float | None
    eps: float | None
    bound: float
    worst_ratio: float
    witness: int | None
    passed: bool
    n_cubes: int

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "p": self.p,
            "q": self.q,
            "eps": self.eps,
            "bound": self.bound,
            "worst_ratio": self.worst_ratio,
            "witness": self.witness,
            "passed": bool(self.passed),
            "n_cubes": self.n_cubes,
        }


def _packing_ratio(T: DyadicTree, per_cube: np.ndarray):
    m = DiscreteMeasure(T, per_cube)
    return carleson_norm(m, return_witness=True)


def glem_check(
    T: DyadicTree,
    family: PlaneFamily,
    p: float,
    q: float,
    M: float,
    betas: list | None = None,
) -> GeoLemmaReport:
    """Packing of the q-flatness numbers: the worst over cubes R of
    sum_{Q below R} beta_q(Q)^p mu(Q) / mu(R), tested against M."""
    if betas is None:
        betas = beta_table(T, family, "q", q)
    v = np.array([b.value for b in betas]) ** p * T.mass_of
    ratio, witness = _packing_ratio(T, v)
    return GeoLemmaReport(
        "glem", p, q, None, M, float(ratio), witness, ratio <= M, T.n_cubes
    )


def _threshold_report(T, kind, eps, M_eps, values) -> GeoLemmaReport:
    v = T.mass_of * (np.asarray(values) > eps)
    ratio, witness = _packing_ratio(T, v)
    return GeoLemmaReport(
        kind, None, None, eps, M_eps, float(ratio), witness, ratio <= M_eps, T.n_cubes
    )


def wglem_check(
    T: DyadicTree,
    family: PlaneFamily,
    eps: float,
    M_eps: float,
    betas: list | None = None,
) -> GeoLemmaReport:
    """Carleson packing of the cubes whose sup flatness exceeds eps."""
    if betas is None:
        betas = beta_table(T, family, "inf")
    return _threshold_report(T, "wglem", eps, M_eps, [b.value for b in betas])


def bwglem_check(
    T: DyadicTree,
    family: PlaneFamily,
    eps: float,
    M_eps: float,
    betas: list | None = None,
) -> GeoLemmaReport:
    """Carleson packing of the cubes whose bilateral flatness exceeds eps."""
    if betas is None:
        betas = beta_table(T, family, "bilateral")
    return _threshold_report(T, "bwglem", eps, M_eps, [b.value for b in betas])


# ---------------------------------------------------------------------------
# cross-set comparison (transfer) checks


@dataclass
class TransferReport:
    p: float
    q: float
    theta: float
    n_cubes: int
    n_eligible: int
    n_window_skipped: int
    n_violations: int
    mean_c_mean: float      # measured constant, L^q inequality
    max_c_mean: float
    max_c_sup: float        # sup-norm inequality
    max_c_bilateral: float  # bilateral inequality
    m_prime: float          # inherited packing constant for the ambient set
    a5_constant: float      # packing constant of the proximity numbers
    passed: bool
    notes: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "p": self.p,
            "q": self.q,
            "theta": self.theta,
            "n_cubes": self.n_cubes,
            "n_eligible": self.n_eligible,
            "n_window_skipped": self.n_window_skipped,
            "n_violations": self.n_violations,
            "mean_c_mean": self.mean_c_mean,
            "max_c_mean": self.max_c_mean,
            "max_c_sup": self.max_c_sup,
            "max_c_bilateral": self.max_c_bilateral,
            "m_prime": self.m_prime,
            "a5_constant": self.a5_constant,
            "passed": bool(self.passed),
            "notes": list(self.notes),
        }


def _default_family(E: WeightedSet) -> PlaneFamily:
    if E.metric.kind == "parabolic":
        return PlaneFamily.parabolic_planes(E.metric.n)
    return PlaneFamily.affine_d_planes(E.points.shape[1], int(round(E.dim_d)))


def transfer_check(
    E: WeightedSet,
    T_E: DyadicTree,
    catalog,
    theta: float,
    p: float = 2.0,
    q: float = 2.0,
    family: PlaneFamily | None = None,
    c2: float = COMPANION_C2,
) -> TransferReport:
    """Measure the flatness-comparison inequalities cube by cube.

    Every cube holding a theta-big piece of some catalog member gets a
    companion cube on that member's own tree; the mean, sup, and bilateral
    flatness of the cube are each compared against the companion's value
    plus the appropriate proximity numbers, and the achieved constants are
    recorded.  The inherited packing constant for the ambient cloud and
    the packing constant of the proximity numbers are evaluated directly.
    """
    if 1.0 / q - 1.0 / p + 1.0 / E.dim_d <= 0:
        raise ValueError(
            f"exponent gate failed: 1/q - 1/p + 1/d = "
            f"{1.0 / q - 1.0 / p + 1.0 / E.dim_d:.4g} <= 0 "
            f"(q={q}, p={p}, d={E.dim_d})"
        )
    from .bigpieces import bp_check

    witnesses = bp_check(E, T_E, catalog, theta)
    if not isinstance(witnesses, list):
        raise ValueError(f"big-piece precondition failed: {witnesses}")
    if family is None:
        family = _default_family(E)

    trees: dict[int, DyadicTree] = {}

    def member_tree(j: int) -> DyadicTree:
        if j not in trees:
            from .dyadic import build_tree

            trees[j] = build_tree(catalog.sets[j])
        return trees[j]

    E_cloud = E
    tol = 1e-9
    c_mean, c_sup, c_bil = [], [], []
    n_viol = n_window = n_elig = 0
    i_vals = np.zeros(T_E.n_cubes)
    notes: list[str] = []
    by_cube = {wit.location: wit for wit in witnesses}
    for q_cube in range(T_E.n_cubes):
        wit = by_cube.get(q_cube)
        if wit is None:
            continue
        j = wit.approximant_id
        Et = catalog.sets[j]
        try:
            T_t = member_tree(j)
            q_t = companion_cube(T_E, T_t, q_cube, c2=c2)
        except CompanionError:
            n_window += 1
            continue
        n_elig += 1
        iq = i_numbers(T_E, Et, q_cube, q)
        i_inf = i_numbers(T_E, Et, q_cube, np.inf)
        i_t_inf = i_numbers(T_t, E_cloud, q_t, np.inf)
        i_vals[q_cube] = iq
        pairs = (
            (
                c_mean,
                beta_q(T_E, q_cube, family, q).value,
                beta_q(T_t, q_t, family, q).value + iq,
            ),
            (
                c_sup,
                beta_inf(T_E, q_cube, family).value,
                beta_inf(T_t, q_t, family).value + i_inf,
            ),
            (
                c_bil,
                bbeta(T_E, q_cube, family).value,
                bbeta(T_t, q_t, family).value + i_inf + i_t_inf,
            ),
        )
        for acc, lhs, rhs in pairs:
            if lhs <= tol:
                acc.append(1.0)
            elif rhs <= tol:
                n_viol += 1
                notes.append(
                    f"cube {q_cube}: lhs {lhs:.4g} with vanishing rhs "
                    f"(companion {q_t}, member {j})"
                )
            else:
                acc.append(lhs / rhs)

    betas_q = beta_table(T_E, family, "q", q)
    vq = np.array([b.value for b in betas_q]) ** p * T_E.mass_of
    m_prime, _ = _packing_ratio(T_E, vq)
    a5, _ = _packing_ratio(T_E, i_vals**q * T_E.mass_of)
    return TransferReport(
        p=p,
        q=q,
        theta=theta,
        n_cubes=T_E.n_cubes,
        n_eligible=n_elig,
        n_window_skipped=n_window,
        n_violations=n_viol,
        mean_c_mean=float(np.mean(c_mean)) if c_mean else 0.0,
        max_c_mean=float(np.max(c_mean)) if c_mean else 0.0,
        max_c_sup=float(np.max(c_sup)) if c_sup else 0.0,
        max_c_bilateral=float(np.max(c_bil)) if c_bil else 0.0,
        m_prime=float(m_prime),
        a5_constant=float(a5),
        passed=n_viol == 0 and n_elig > 0,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# export


def beta_table_csv(path: str, T: DyadicTree, betas: list) -> None:
    """CSV rows: cube_id, level, exponent, value, plane parameters."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["cube_id", "k", "q", "beta", "plane_params"])
        for b in betas:
            if isinstance(b.minimizer, Plane):
                params = ";".join(repr(v) for v in b.minimizer.params())
            elif b.minimizer is None:
                params = ""
            else:
                params = str(int(b.minimizer))
            wr.writerow(
                [b.cube, int(T.level_of[b.cube]), b.q, repr(b.value), params]
            )
