"""Discrete packing measures on cube trees: norms, stopping, extrapolation.

A discrete measure assigns a nonnegative coefficient to every cube of a
tree.  The Carleson norm over a root is the largest subtree sum divided by
the cube mass; the extrapolation routine splits a subtree into a stopping
family whose sawtooth keeps a small norm while the "bad" part of the family
keeps a small mass fraction.  Both conclusions are runtime-checked on every
call.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .dyadic import DyadicTree

__all__ = [
    "CarlesonContractError",
    "DiscreteMeasure",
    "ExtrapolationResult",
    "PackingReport",
    "measure_of",
    "subtree_sums",
    "carleson_norm",
    "extrapolate",
    "packing_check",
]

# Declared sawtooth-norm constant for `extrapolate`: the construction
# guarantees ||m_F|| <= a + 2b outright, so the declared C*b bound holds
# whenever a <= 2b; indicator-style measures (coefficient 0 or the full cube
# mass) get an exactly-zero sawtooth norm for every a.  Callers with larger
# a/b ratios must consume `sawtooth_norm` from the result instead.
EXTRAPOLATION_C = 4.0

# cubes lighter than this fraction of the total mass are dropped from norm
# suprema (they still contribute to every sum)
PRUNE_FRACTION = 1e-12


class CarlesonContractError(AssertionError):
    """An extrapolation contract failed at runtime (should be impossible)."""


@dataclass
class DiscreteMeasure:
    """Nonnegative cube coefficients over a fixed tree."""

    tree: DyadicTree
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float).ravel()
        if len(a) != self.tree.n_cubes:
            raise ValueError("coefficient vector does not match the tree")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("coefficients must be finite and nonnegative")
        self.alpha = a

    @classmethod
    def from_dict(cls, tree: DyadicTree, values: dict) -> "DiscreteMeasure":
        a = np.zeros(tree.n_cubes)
        for q, v in values.items():
            a[int(q)] = float(v)
        return cls(tree, a)

    @classmethod
    def indicator(cls, tree: DyadicTree, ids, scale_by_mass: bool = True):
        """Coefficient = cube mass (or 1) exactly on the given cubes."""
        a = np.zeros(tree.n_cubes)
        ids = np.asarray(list(ids), dtype=int)
        a[ids] = tree.mass_of[ids] if scale_by_mass else 1.0
        return cls(tree, a)

    def total(self) -> float:
        return float(self.alpha.sum())

    # -- I/O -----------------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cube_id", "alpha"])
            for q in range(len(self.alpha)):
                if self.alpha[q] != 0.0:
                    w.writerow([q, repr(float(self.alpha[q]))])

    @classmethod
    def from_csv(cls, tree: DyadicTree, path) -> "DiscreteMeasure":
        a = np.zeros(tree.n_cubes)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                a[int(row["cube_id"])] = float(row["alpha"])
        return cls(tree, a)


def measure_of(m: DiscreteMeasure, cube_ids) -> float:
    """Sum of coefficients over an explicit cube family."""
    ids = np.asarray(list(cube_ids), dtype=int)
    if len(ids) and (ids.min() < 0 or ids.max() >= m.tree.n_cubes):
        raise ValueError("cube id out of range")
    if len(np.unique(ids)) != len(ids):
        raise ValueError("cube family has repeats")
    return float(m.alpha[ids].sum()) if len(ids) else 0.0


def _under_mask(tree: DyadicTree, F) -> np.ndarray:
    """Boolean mask of cubes contained in (or equal to) a member of F."""
    under = np.zeros(tree.n_cubes, dtype=bool)
    F = np.asarray(list(F), dtype=int)
    if len(F) == 0:
        return under
    under[F] = True
    for k in range(tree.k_min + 1, tree.k_max + 1):
        ids = tree.level_ids(k)
        under[ids] |= under[tree.parent_of[ids]]
    return under


def subtree_sums(tree: DyadicTree, values: np.ndarray) -> np.ndarray:
    """For every cube, the sum of ``values`` over its subtree (cube included)."""
    s = np.asarray(values, dtype=float).copy()
    for k in range(tree.k_max, tree.k_min, -1):
        ids = tree.level_ids(k)
        np.add.at(s, tree.parent_of[ids], s[ids])
    return s


def carleson_norm(
    m: DiscreteMeasure,
    q0: int | None = None,
    F=None,
    return_witness: bool = False,
):
    """sup over subcubes Q of q0 of m_F(subtree of Q) / mass(Q).

    With a stopping family F, coefficients of cubes under any member of F
    are dropped before the subtree sums (members included).  Cubes lighter
    than PRUNE_FRACTION of the total mass are skipped by the supremum but
    still feed every sum.  q0=None takes the sup over all roots' subtrees.
    """
    tree = m.tree
    vals = m.alpha
    if F is not None:
        vals = np.where(_under_mask(tree, F), 0.0, vals)
    s = subtree_sums(tree, vals)
    ref_mass = tree.space.total_mass if q0 is None else float(tree.mass_of[int(q0)])
    eligible = tree.mass_of > PRUNE_FRACTION * ref_mass
    if q0 is not None:
        inside = np.zeros(tree.n_cubes, dtype=bool)
        inside[tree.subtree_ids(int(q0))] = True
        eligible &= inside
    if not eligible.any():
        return (0.0, None) if return_witness else 0.0
    ratios = np.where(eligible, s / tree.mass_of, -np.inf)
    w = int(np.argmax(ratios))
    out = float(ratios[w])
    return (out, w) if return_witness else out


@dataclass
class PackingReport:
    worst_ratio: float
    witness: int | None
    bound: float | None
    passed: bool

    def to_json(self) -> dict:
        return {
            "worst_ratio": self.worst_ratio,
            "witness": self.witness,
            "bound": self.bound,
            "passed": bool(self.passed),
        }


def packing_check(tree: DyadicTree, family, bound: float | None = None) -> PackingReport:
    """Check sum_{Q in family, Q inside R} mass(Q) <= bound * mass(R) for all R."""
    fam = np.asarray(sorted(set(int(q) for q in family)), dtype=int)
    v = np.zeros(tree.n_cubes)
    if len(fam):
        v[fam] = tree.mass_of[fam]
    s = subtree_sums(tree, v)
    eligible = tree.mass_of > PRUNE_FRACTION * tree.space.total_mass
    ratios = np.where(eligible, s / tree.mass_of, -np.inf)
    w = int(np.argmax(ratios))
    worst = float(ratios[w]) if np.isfinite(ratios[w]) else 0.0
    passed = bound is None or worst <= bound * (1 + 1e-12)
    return PackingReport(worst, w if np.isfinite(ratios[w]) else None, bound, passed)


@dataclass
class ExtrapolationResult:
    q0: int
    a: float
    b: float
    case: str  # "direct" (F = {q0}) or "stopped"
    F: np.ndarray
    bad: np.ndarray
    sawtooth_norm: float
    bad_mass: float
    bad_mass_bound: float
    declared_C: float = EXTRAPOLATION_C
    norm_within_declared: bool = True

    def to_json(self) -> dict:
        return {
            "q0": int(self.q0),
            "a": self.a,
            "b": self.b,
            "case": self.case,
            "F": [int(q) for q in self.F],
            "bad": [int(q) for q in self.bad],
            "sawtooth_norm": self.sawtooth_norm,
            "bad_mass": self.bad_mass,
            "bad_mass_bound": self.bad_mass_bound,
            "declared_C": self.declared_C,
            "norm_within_declared": bool(self.norm_within_declared),
        }


def extrapolate(m: DiscreteMeasure, q0: int, a: float, b: float) -> ExtrapolationResult:
    """Split the subtree under q0 into a stopping family with two contracts.

    Precondition: a >= 0, b > 0, and the subtree sum at q0 is at most
    (a + b) * mass(q0).  Postconditions, checked here on every call:

    (1) the sawtooth norm of m relative to F over q0 is <= a + 2b
        (hence <= EXTRAPOLATION_C * b whenever a <= 2b; exactly 0 for
        indicator-style coefficient vectors);
    (2) the "bad" members of F (those whose strict-subtree sum still
        exceeds a * their mass) carry at most (a+b)/(a+2b) of q0's mass.

    Construction: if the coefficient at q0 alone exceeds b * mass(q0), stop
    immediately (F = {q0}, empty bad set).  Otherwise F collects the
    maximal strict subcubes whose subtree sum exceeds (a + 2b) * mass (T1)
    or whose strict-subtree sum is already <= a * mass (T2); leaves satisfy
    T2, so F partitions the leaf set.
    """
    tree = m.tree
    q0 = int(q0)
    if not (a >= 0 and b > 0):
        raise ValueError("need a >= 0 and b > 0")
    s = subtree_sums(tree, m.alpha)
    mu = tree.mass_of
    if s[q0] > (a + b) * mu[q0] * (1 + 1e-12):
        raise ValueError(
            f"precondition failed: subtree sum {s[q0]:.6g} exceeds "
            f"(a+b) * mass = {(a + b) * mu[q0]:.6g}"
        )

    if m.alpha[q0] > b * mu[q0]:
        F = np.asarray([q0], dtype=int)
        bad = np.empty(0, dtype=int)
        case = "direct"
    else:
        case = "stopped"
        F_list = []
        stack = list(tree.children_of[q0])
        if not stack:
            # q0 is a leaf: strict subtree sum is 0 <= a * mass, so q0 itself
            # satisfies the stopping test; stop at q0
            F_list.append(q0)
        while stack:
            q = stack.pop()
            t1 = s[q] > (a + 2 * b) * mu[q]
            t2 = (s[q] - m.alpha[q]) <= a * mu[q]
            if t1 or t2:
                F_list.append(q)
            else:
                stack.extend(tree.children_of[q])
        F = np.asarray(sorted(F_list), dtype=int)
        bad_mask = (s[F] - m.alpha[F]) > a * mu[F]
        bad = F[bad_mask]

    norm = carleson_norm(m, q0, F)
    if norm > (a + 2 * b) * (1 + 1e-9):
        raise CarlesonContractError(
            f"sawtooth norm {norm:.6g} exceeds a + 2b = {a + 2 * b:.6g}"
        )
    bad_mass = float(mu[bad].sum())
    bound = (a + b) / (a + 2 * b) * mu[q0]
    if bad_mass > bound * (1 + 1e-9):
        raise CarlesonContractError(
            f"bad mass {bad_mass:.6g} exceeds (a+b)/(a+2b) * mass = {bound:.6g}"
        )
    return ExtrapolationResult(
        q0=q0,
        a=float(a),
        b=float(b),
        case=case,
        F=F,
        bad=bad,
        sawtooth_norm=float(norm),
        bad_mass=bad_mass,
        bad_mass_bound=float(bound),
        norm_within_declared=bool(norm <= EXTRAPOLATION_C * b * (1 + 1e-9)),
    )
