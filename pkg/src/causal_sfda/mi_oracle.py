"""Exact information quantities on small discrete distributions.

Everything here works on explicit probability tables, so results are exact up
to floating point. The module is the ground truth that the variational
estimators in :mod:`causal_sfda.objectives` and the two information
inequalities used by the bottleneck (data processing under a compressive map,
and the upper bound obtained by replacing the bottleneck variable with an
invertible relabelling of it) are checked against.

All quantities are in nats and ``0 * log 0`` is taken to be 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX_ALPHABET = 64
SUM_TOL = 1e-12
INEQ_TOL = 1e-10
DEFAULT_SWEEP_SEED = 20240917


class ValidationError(ValueError):
    """Raised when a table or map does not describe a valid distribution."""


class PreconditionError(ValueError):
    """Raised when inputs are valid but violate an operation's precondition."""


def _check_probs(p: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(p)):
        raise ValidationError(f"{what}: non-finite entries")
    if np.any(p < 0):
        raise ValidationError(f"{what}: negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > SUM_TOL:
        raise ValidationError(f"{what}: entries sum to {total!r}, not 1")


@dataclass(frozen=True)
class DiscreteDist:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("distribution must be a non-empty vector")
        if p.size > MAX_ALPHABET:
            raise ValidationError(f"alphabet size {p.size} exceeds {MAX_ALPHABET}")
        _check_probs(p, "distribution")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.size


@dataclass(frozen=True)
class DiscreteJoint:
    """Joint table over two finite alphabets; rows index the first variable."""

    table: np.ndarray
    first_labels: tuple = field(default=None)
    second_labels: tuple = field(default=None)

    def __post_init__(self):
        t = np.array(self.table, dtype=np.float64)
        if t.ndim != 2 or 0 in t.shape:
            raise ValidationError("joint table must be a non-empty matrix")
        if max(t.shape) > MAX_ALPHABET:
            raise ValidationError(f"alphabet size {max(t.shape)} exceeds {MAX_ALPHABET}")
        _check_probs(t, "joint table")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        first = tuple(range(t.shape[0])) if self.first_labels is None else tuple(self.first_labels)
        second = tuple(range(t.shape[1])) if self.second_labels is None else tuple(self.second_labels)
        if len(first) != t.shape[0] or len(second) != t.shape[1]:
            raise ValidationError("alphabet labels do not match table shape")
        object.__setattr__(self, "first_labels", first)
        object.__setattr__(self, "second_labels", second)

    @property
    def shape(self) -> tuple[int, int]:
        return self.table.shape

    def marginal(self, axis: str) -> DiscreteDist:
        # Renormalise away the rounding drift of the row/column sums.
        m = self.table.sum(axis=1 if axis == "first" else 0)
        return DiscreteDist(m / m.sum())

    def transpose(self) -> "DiscreteJoint":
        return DiscreteJoint(self.table.T, self.second_labels, self.first_labels)

    @classmethod
    def product(cls, a: DiscreteDist, b: DiscreteDist) -> "DiscreteJoint":
        t = np.outer(a.probs, b.probs)
        return cls(t / t.sum())


@dataclass(frozen=True)
class AlphabetMap:
    """Total function from ``range(n_in)`` to ``range(n_out)``.

    ``targets[i]`` is the output symbol of input symbol ``i``. Every output
    symbol must be hit, so the output alphabet is exactly the image.
    """

    targets: tuple
    n_out: int

    def __post_init__(self):
        targets = tuple(int(t) for t in self.targets)
        if not targets:
            raise ValidationError("map needs at least one input symbol")
        if any(t < 0 or t >= self.n_out for t in targets):
            raise ValidationError("map target outside the output alphabet")
        if set(targets) != set(range(self.n_out)):
            raise ValidationError("map is not onto its output alphabet")
        object.__setattr__(self, "targets", targets)

    @property
    def n_in(self) -> int:
        return len(self.targets)

    @property
    def compressive(self) -> bool:
        return self.n_out < self.n_in

    @property
    def bijective(self) -> bool:
        return self.n_out == self.n_in

    def inverse(self) -> "AlphabetMap":
        if not self.bijective:
            raise PreconditionError("only bijective maps are invertible")
        inv = [0] * self.n_in
        for i, t in enumerate(self.targets):
            inv[t] = i
        return AlphabetMap(tuple(inv), self.n_in)

    @classmethod
    def identity(cls, n: int) -> "AlphabetMap":
        return cls(tuple(range(n)), n)

    @classmethod
    def merge(cls, n_in: int, groups: Sequence[Sequence[int]]) -> "AlphabetMap":
        """Build a map sending every symbol of ``groups[k]`` to ``k``."""
        targets = [-1] * n_in
        for k, group in enumerate(groups):
            for s in group:
                targets[s] = k
        if -1 in targets:
            raise ValidationError("merge groups do not cover the input alphabet")
        return cls(tuple(targets), len(groups))


def _plogp_sum(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(np.sum(nz * np.log(nz)))


def entropy(d: DiscreteDist) -> float:
    if not isinstance(d, DiscreteDist):
        d = DiscreteDist(d)
    return max(0.0, -_plogp_sum(d.probs))


def mutual_information(j: DiscreteJoint) -> float:
    if not isinstance(j, DiscreteJoint):
        j = DiscreteJoint(j)
    t = j.table
    pa = t.sum(axis=1, keepdims=True)
    pb = t.sum(axis=0, keepdims=True)
    rows, cols = np.nonzero(t)
    nz = t[rows, cols]
    # Log space: the product of two tiny marginals can underflow to zero.
    mi = float(np.sum(nz * (np.log(nz) - np.log(pa[rows, 0]) - np.log(pb[0, cols]))))
    # Round-off can leave tiny negatives for independent tables.
    return max(mi, 0.0)


def push_forward(j: DiscreteJoint, m: AlphabetMap, axis: str = "second") -> DiscreteJoint:
    """Joint of ``(A, m(B))`` (or ``(m(A), B)`` for ``axis="first"``)."""
    if axis not in ("first", "second"):
        raise ValidationError(f"axis must be 'first' or 'second', got {axis!r}")
    t = j.table if axis == "second" else j.table.T
    if t.shape[1] != m.n_in:
        raise ValidationError(
            f"map input alphabet has {m.n_in} symbols but the {axis} axis has {t.shape[1]}"
        )
    out = np.zeros((t.shape[0], m.n_out))
    np.add.at(out.T, np.asarray(m.targets), t.T)
    out /= out.sum()
    if axis == "first":
        return DiscreteJoint(out.T, second_labels=j.second_labels)
    return DiscreteJoint(out, first_labels=j.first_labels)


@dataclass(frozen=True)
class Lemma1Result:
    holds: bool
    lhs: float
    rhs: float


@dataclass(frozen=True)
class Theorem1Result:
    bound_holds: bool
    literal: float
    surrogate: float
    equality_holds: bool | None = None


def check_lemma1(j: DiscreteJoint, m: AlphabetMap) -> Lemma1Result:
    """Check ``I(Z, X) >= I(Z, m(X))`` with ``X`` on the second axis."""
    if not m.compressive:
        raise PreconditionError("map must be compressive (fewer outputs than inputs)")
    lhs = mutual_information(j)
    rhs = mutual_information(push_forward(j, m, "second"))
    return Lemma1Result(lhs >= rhs - INEQ_TOL, lhs, rhs)


def check_theorem1(j_zz: DiscreteJoint, j_zy: DiscreteJoint, m: AlphabetMap) -> Theorem1Result:
    """Compare the bottleneck objective with its relabelled surrogate.

    ``j_zz`` is the joint of ``(Z, Z')`` and ``j_zy`` that of ``(Z', Y)``; ``m``
    acts on the ``Z'`` alphabet and produces ``Y' = m(Z')``.
    """
    zp_from_zz = j_zz.table.sum(axis=0)
    zp_from_zy = j_zy.table.sum(axis=1)
    if zp_from_zz.shape != zp_from_zy.shape or np.max(np.abs(zp_from_zz - zp_from_zy)) > 1e-9:
        raise ValidationError("the two joints disagree on the Z' marginal")
    i_zz = mutual_information(j_zz)
    i_zpy = mutual_information(j_zy)
    i_ypy = mutual_information(push_forward(j_zy, m, "first"))
    literal = i_zz - i_zpy
    surrogate = i_zz - i_ypy
    equality = abs(i_ypy - i_zpy) <= INEQ_TOL if m.bijective else None
    return Theorem1Result(literal <= surrogate + INEQ_TOL, literal, surrogate, equality)


# -- randomised sweeps -------------------------------------------------------

def random_joint(rng: np.random.Generator, n_a: int, n_b: int) -> DiscreteJoint:
    """Dirichlet(1) draw over the ``n_a * n_b`` cells."""
    t = rng.dirichlet(np.ones(n_a * n_b)).reshape(n_a, n_b)
    return DiscreteJoint(t / t.sum())


def random_compressive_map(rng: np.random.Generator, n_in: int) -> AlphabetMap:
    if n_in < 2:
        raise PreconditionError("a compressive map needs at least two input symbols")
    n_out = int(rng.integers(1, n_in))
    # Every output symbol gets one input, the rest land anywhere.
    targets = np.concatenate([np.arange(n_out), rng.integers(0, n_out, n_in - n_out)])
    rng.shuffle(targets)
    return AlphabetMap(tuple(targets), n_out)


def random_bijection(rng: np.random.Generator, n: int) -> AlphabetMap:
    return AlphabetMap(tuple(rng.permutation(n)), n)


@dataclass
class SweepTrial:
    trial: int
    lhs: float
    rhs: float
    holds: bool


@dataclass
class SweepReport:
    name: str
    trials: list[SweepTrial]

    @property
    def passed(self) -> int:
        return sum(t.holds for t in self.trials)

    @property
    def ok(self) -> bool:
        return self.passed == len(self.trials)

    def summary(self) -> str:
        return f"{self.name}: {self.passed}/{len(self.trials)}"

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trial", "lhs_nats", "rhs_nats", "holds"])
            for t in self.trials:
                w.writerow([t.trial, repr(t.lhs), repr(t.rhs), int(t.holds)])


def lemma1_sweep(trials: int = 1000, seed: int = DEFAULT_SWEEP_SEED, max_size: int = 8) -> SweepReport:
    rng = np.random.default_rng(seed)
    out = []
    for k in range(trials):
        n_a = int(rng.integers(2, max_size + 1))
        n_b = int(rng.integers(2, max_size + 1))
        j = random_joint(rng, n_a, n_b)
        m = random_compressive_map(rng, n_b)
        r = check_lemma1(j, m)
        out.append(SweepTrial(k, r.lhs, r.rhs, r.holds))
    return SweepReport("lemma1", out)


def random_chain(rng: np.random.Generator, n_z: int, n_zp: int, n_y: int):
    """Joints of ``(Z, Z')`` and ``(Z', Y)`` for a chain ``Z - Z' - Y``."""
    zp = rng.dirichlet(np.ones(n_zp))
    z_given_zp = rng.dirichlet(np.ones(n_z), size=n_zp)  # rows: z' -> p(z | z')
    y_given_zp = rng.dirichlet(np.ones(n_y), size=n_zp)
    j_zz = (z_given_zp * zp[:, None]).T
    j_zy = y_given_zp * zp[:, None]
    return DiscreteJoint(j_zz / j_zz.sum()), DiscreteJoint(j_zy / j_zy.sum())


def theorem1_sweep(trials: int = 1000, seed: int = DEFAULT_SWEEP_SEED, max_size: int = 8) -> SweepReport:
    """Alternates bijective and compressive maps on ``Z'``.

    A trial holds when the bound holds and, for bijective maps, the two
    second terms coincide. ``lhs``/``rhs`` are the literal and surrogate
    objectives.
    """
    rng = np.random.default_rng(seed + 1)
    out = []
    for k in range(trials):
        n_z, n_zp, n_y = (int(v) for v in rng.integers(2, max_size + 1, size=3))
        j_zz, j_zy = random_chain(rng, n_z, n_zp, n_y)
        m = random_bijection(rng, n_zp) if k % 2 == 0 else random_compressive_map(rng, n_zp)
        r = check_theorem1(j_zz, j_zy, m)
        holds = r.bound_holds and r.equality_holds is not False
        out.append(SweepTrial(k, r.literal, r.surrogate, holds))
    return SweepReport("theorem1", out)
