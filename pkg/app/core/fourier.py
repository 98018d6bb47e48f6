from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import BudgetExceeded, DomainError, NotContractive, RankDeficient
from app.core.hyperbolic import AdaptedNorm
from app.core.lattice import IntMatrix, SubgroupBasis
from app.core.tolerances import STATE_CAP, TAU_GEO, ZERO_CHARACTER
from app.core.walk import (
    IncrementMeasure,
    TorusDistribution,
    affine_permutation,
    all_states,
    state_count,
)

logger = logging.getLogger(__name__)

# grid points examined per vectorised batch in certified_gamma
GRID_BATCH: int = 1 << 16
GRID_CAP: int = 50_000_000


@dataclass(frozen=True)
class DualPoint:
    rho: Tuple[int, ...]
    n: int

    def __post_init__(self) -> None:
        if any(not 0 <= r < self.n for r in self.rho):
            raise ValueError(f"coordinates of {self.rho} must lie in [0, {self.n - 1}]")

    @classmethod
    def reduce(cls, rho: Sequence[int], n: int) -> DualPoint:
        return cls(tuple(int(r) % n for r in rho), n)


@dataclass(frozen=True)
class BadSetW:
    """Torus points where every character of H is trivial."""

    points: Tuple[Tuple[Fraction, ...], ...]
    factors: Tuple[int, ...]

    def as_array(self) -> np.ndarray:
        return np.array([[float(c) for c in point] for point in self.points])

    def min_pairwise_distance(self, norm: AdaptedNorm) -> float:
        coords = self.as_array()
        if len(coords) < 2:
            return math.inf
        i, j = np.triu_indices(len(coords), k=1)
        return float(np.min(norm.torus_distance(coords[i], coords[j])))


@dataclass(frozen=True)
class GammaCertificate:
    """gamma = grid_max + lipschitz_bound · covering radius, certified below 1."""

    eta: float
    gamma: float
    grid_max: float
    grid_step: float
    lipschitz_bound: float
    grid_points: int


@dataclass(frozen=True)
class L2Bound:
    total: float

    @property
    def tv_bound(self) -> float:
        return 0.5 * math.sqrt(self.total)


def mu_hat(mu: IncrementMeasure, rho: DualPoint) -> complex:
    """Σ_x μ(x) e^{2πi⟨x,ρ⟩/n}."""
    phases = mu.support_array() @ np.array(rho.rho, dtype=np.int64)
    angles = 2j * np.pi * (phases % rho.n) / rho.n
    return complex(np.sum(mu.weights_array() * np.exp(angles)))


def mu_hat_table(mu: IncrementMeasure, n: int, *, cap: int = STATE_CAP) -> np.ndarray:
    """μ̂ at every ρ ∈ (Z/nZ)^d, in state-index order."""
    d = mu.dimension
    state_count(n, d, cap)
    phases = (all_states(n, d) @ mu.support_array().T) % n
    return np.exp(2j * np.pi * phases / n) @ mu.weights_array()


def walk_character(
    mu: IncrementMeasure, A: IntMatrix, rho: DualPoint, n: int, t: int
) -> complex:
    """P̂^t(ρ) = Π_{j<t} μ̂((Aᵀ)^j ρ)."""
    if t < 0:
        raise DomainError(f"horizon must be non-negative, got {t}")
    transpose = A.transpose()
    value = 1.0 + 0.0j
    current = rho.rho
    for _ in range(t):
        value *= mu_hat(mu, DualPoint.reduce(current, n))
        current = tuple(v % n for v in transpose.apply(current))
    return value


def fourier_transform(p: TorusDistribution) -> np.ndarray:
    """p̂(ρ) = Σ_x p(x) e^{2πi⟨x,ρ⟩/n} for every ρ, in state-index order."""
    transformed = np.fft.ifftn(p.grid()) * p.size
    return transformed.reshape(p.size, order="F")


class OrbitWindows:
    """
    Windowed products of |μ̂|² along the cycles of ρ ↦ Aᵀρ on (Z/nZ)^d.

    Each cycle is stored as log|μ̂|² values; a window of length t starting at any
    position is q·(cycle total) plus a partial sum read off cyclic prefix sums, so
    every horizon costs O(n^d) regardless of t.
    """

    def __init__(
        self, mu: IncrementMeasure, A: IntMatrix, n: int, *, cap: int = STATE_CAP
    ) -> None:
        self.n = n
        self.d = A.d
        magnitudes = np.abs(mu_hat_table(mu, n, cap=cap))
        self._zero = magnitudes < ZERO_CHARACTER
        safe = np.where(self._zero, 1.0, magnitudes)
        self._logs = np.where(self._zero, 0.0, 2.0 * np.log(safe))
        self.cycles = self._cycles(affine_permutation(A.transpose(), n, cap))
        logger.debug("Dual orbits: %d cycles for n=%d", len(self.cycles), n)

    @staticmethod
    def _cycles(perm: np.ndarray) -> List[np.ndarray]:
        seen = np.zeros(perm.size, dtype=bool)
        cycles: List[np.ndarray] = []
        for start in range(perm.size):
            if seen[start]:
                continue
            members = []
            node = start
            while not seen[node]:
                seen[node] = True
                members.append(node)
                node = int(perm[node])
            cycles.append(np.array(members, dtype=np.int64))
        return cycles

    def log_windows(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """Per-ρ log of Π_{j<t}|μ̂((Aᵀ)^jρ)|² and the number of zero factors in it."""
        logs = np.zeros(self._logs.size)
        zeros = np.zeros(self._logs.size, dtype=np.int64)
        for cycle in self.cycles:
            length = cycle.size
            laps, rest = divmod(t, length)
            values = self._logs[cycle]
            hits = self._zero[cycle].astype(np.int64)
            starts = np.arange(length)
            value_prefix = np.concatenate([[0.0], np.cumsum(np.tile(values, 2))])
            hit_prefix = np.concatenate([[0], np.cumsum(np.tile(hits, 2))])
            partial = value_prefix[starts + rest] - value_prefix[starts]
            logs[cycle] = laps * values.sum() + partial
            partial_hits = hit_prefix[starts + rest] - hit_prefix[starts]
            zeros[cycle] = laps * hits.sum() + partial_hits
        return logs, zeros

    def bound(self, t: int) -> L2Bound:
        if t < 0:
            raise DomainError(f"horizon must be non-negative, got {t}")
        logs, zeros = self.log_windows(t)
        alive = zeros == 0
        alive[0] = False
        return L2Bound(total=math.fsum(np.exp(logs[alive])))


def l2_bound(
    mu: IncrementMeasure, A: IntMatrix, n: int, t: int, *, cap: int = STATE_CAP
) -> L2Bound:
    """Σ_{ρ≠0} |P̂^t(ρ)|²; TV(P^t, U) <= ½·sqrt of it."""
    return OrbitWindows(mu, A, n, cap=cap).bound(t)


def l2_bound_naive(mu: IncrementMeasure, A: IntMatrix, n: int, t: int) -> L2Bound:
    table = mu_hat_table(mu, n)
    perm = affine_permutation(A.transpose(), n)
    product = np.ones(table.size, dtype=np.complex128)
    current = np.arange(table.size)
    for _ in range(t):
        product *= table[current]
        current = perm[current]
    return L2Bound(total=math.fsum(np.abs(product[1:]) ** 2))


def _power_images(mu: IncrementMeasure, A: IntMatrix, d: int) -> List[np.ndarray]:
    """Support points pushed by A^k, k = 0..d−1."""
    images, power = [], IntMatrix.identity(A.d)
    for _ in range(d):
        images.append(np.array([power.apply(x) for x in mu.support], dtype=np.float64))
        power = power @ A
    return images


def _f_values(xi: np.ndarray, weights: np.ndarray, points: np.ndarray) -> np.ndarray:
    phases = np.mod(xi @ points.T, 1.0)
    return np.abs(np.exp(2j * np.pi * phases) @ weights) ** 2


def f_min(
    xi: np.ndarray, mu: IncrementMeasure, A: IntMatrix, d: Optional[int] = None
):
    """f(ξ) = min over k < d of |Σ_x μ(x) e^{2πi⟨A^k x, ξ⟩}|²."""
    d = A.d if d is None else d
    xi = np.asarray(xi, dtype=np.float64)
    single = xi.ndim == 1
    points = np.atleast_2d(xi)
    weights = mu.weights_array()
    values = np.min(
        [_f_values(points, weights, image) for image in _power_images(mu, A, d)], axis=0
    )
    values = np.clip(values, 0.0, 1.0)
    return float(values[0]) if single else values


def contraction_alpha(mu: IncrementMeasure) -> float:
    return float(mu.weights_array().min())


def generator_contraction_bound(
    xi: np.ndarray, mu: IncrementMeasure, A: IntMatrix
) -> np.ndarray:
    """
    min over generators h = A^k(x−y) of 1 − 2α²(1 − cos 2π⟨h, ξ⟩), an upper bound for f.
    """
    alpha = contraction_alpha(mu)
    points = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    bound = np.ones(points.shape[0])
    for image in _power_images(mu, A, A.d):
        for i, j in itertools.permutations(range(len(image)), 2):
            h = image[i] - image[j]
            bound = np.minimum(
                bound, 1.0 - 2.0 * alpha**2 * (1.0 - np.cos(2.0 * np.pi * points @ h))
            )
    return bound


def bad_set_W(H: SubgroupBasis, A: Optional[IntMatrix] = None) -> BadSetW:
    """
    W = {ξ : ⟨h, ξ⟩ ∈ Z for all h ∈ H} = {Q^{-T}(k_i/a_i)} mod 1.

    When A is given the Aᵀ-invariance of W is verified.
    """
    if H.rank < H.dimension:
        raise RankDeficient(f"H has rank {H.rank} < d={H.dimension}; W is infinite")
    inverse_transpose = H.inverse_change_of_basis.transpose()
    points = []
    for ks in itertools.product(*(range(a) for a in H.factors)):
        adapted = [Fraction(k, a) for k, a in zip(ks, H.factors)]
        point = tuple(
            sum((row[i] * adapted[i] for i in range(H.dimension)), Fraction(0)) % 1
            for row in inverse_transpose.rows
        )
        points.append(point)
    W = BadSetW(points=tuple(sorted(points)), factors=H.factors)
    if A is not None and not is_transpose_invariant(W, A):
        raise DomainError("W is not invariant under the transpose; H is not A-stable")
    return W


def is_transpose_invariant(W: BadSetW, A: IntMatrix) -> bool:
    transpose = A.transpose()
    images = {
        tuple(
            sum((a * c for a, c in zip(row, point)), Fraction(0)) % 1
            for row in transpose.rows
        )
        for point in W.points
    }
    return images == set(W.points)


def lipschitz_constants(mu: IncrementMeasure, A: IntMatrix) -> List[float]:
    """L_k = 2π Σ_{x,y} μ(x)μ(y)‖A^k(x−y)‖₂ for f_k = Σ_{x,y} μμ e^{2πi⟨A^k(x−y),ξ⟩}."""
    weights = mu.weights_array()
    constants = []
    for image in _power_images(mu, A, A.d):
        gaps = np.linalg.norm(image[:, None, :] - image[None, :, :], axis=-1)
        constants.append(2.0 * np.pi * float(weights @ gaps @ weights))
    return constants


def certified_gamma(
    mu: IncrementMeasure,
    A: IntMatrix,
    W: BadSetW,
    eta: float,
    norm: AdaptedNorm,
    grid_step: Optional[float] = None,
) -> GammaCertificate:
    """
    Certified bound γ >= sup{f(ξ) : d(ξ, W) >= η}.

    f is evaluated on a regular grid; every ξ in the region lies within
    h·sqrt(d)/2 of a grid point, and grid points are kept down to distance
    η − c_high·h·sqrt(d)/2 from W so that nearest grid points are never excluded.
    """
    if eta <= 0:
        raise DomainError(f"eta must be positive, got {eta}")
    if eta >= W.min_pairwise_distance(norm) / 2:
        raise DomainError(f"eta = {eta} is not below half the spacing of W")
    d = A.d
    lipschitz = max(lipschitz_constants(mu, A))
    if grid_step is None:
        grid_step = eta / (8.0 * lipschitz) if lipschitz > 0 else eta / 8.0
    per_axis = max(1, math.ceil(1.0 / grid_step))
    step = 1.0 / per_axis
    total = per_axis**d
    if total > GRID_CAP:
        raise BudgetExceeded(f"certification grid of {total} points exceeds {GRID_CAP}")

    covering = step * math.sqrt(d) / 2.0
    threshold = eta - norm.c_high * covering
    centers = W.as_array()
    weights = mu.weights_array()
    images = _power_images(mu, A, d)
    grid_max = 0.0
    for begin in range(0, total, GRID_BATCH):
        flat = np.arange(begin, min(begin + GRID_BATCH, total), dtype=np.int64)
        points = ((flat[:, None] // per_axis ** np.arange(d)) % per_axis) * step
        distance = np.min(
            [norm.torus_distance(points, center) for center in centers], axis=0
        )
        kept = points[distance >= threshold]
        if kept.size == 0:
            continue
        values = np.min([_f_values(kept, weights, image) for image in images], axis=0)
        grid_max = max(grid_max, float(values.max()))

    gamma = grid_max + lipschitz * covering
    logger.info("Certified gamma %.6f on %d grid points (eta=%.3g)", gamma, total, eta)
    if gamma >= 1.0:
        raise NotContractive(
            f"certified gamma {gamma:.6f} >= 1 (grid max {grid_max:.6f}); "
            "shrink the grid step or enlarge eta"
        )
    return GammaCertificate(
        eta=eta,
        gamma=gamma,
        grid_max=grid_max,
        grid_step=step,
        lipschitz_bound=lipschitz,
        grid_points=total,
    )


def theoretical_bound(m0: int, m1: int, k: int, gamma: float, r: int) -> float:
    """¼(e^{m₀m₁kγ^r} − 1)."""
    _check_bound_arguments(m0, m1, k, gamma, r)
    return 0.25 * math.expm1(m0 * m1 * k * gamma**r)


def intermediate_bound(m0: int, m1: int, k: int, gamma: float, r: int) -> float:
    """¼((1 + m₀m₁γ^r)^k − 1), never larger than the exponential form."""
    _check_bound_arguments(m0, m1, k, gamma, r)
    return 0.25 * math.expm1(k * math.log1p(m0 * m1 * gamma**r))


def choose_r(m0: int, m1: int, k: int, gamma: float, s: int = 10) -> int:
    return math.ceil(math.log(m0 * m1 * k) / math.log(1.0 / gamma)) + s


def interchange_holds(gamma: float, a: int, a2: int, b: int, b2: int) -> bool:
    """γ^{a+b'} + γ^{a'+b} <= γ^{a+b} + γ^{a'+b'} for a <= a', b <= b'."""
    left = gamma ** (a + b2) + gamma ** (a2 + b)
    right = gamma ** (a + b) + gamma ** (a2 + b2)
    return left <= right + TAU_GEO


def _check_bound_arguments(m0: int, m1: int, k: int, gamma: float, r: int) -> None:
    if not 0.0 < gamma < 1.0:
        raise DomainError(f"gamma must lie in (0, 1), got {gamma}")
    if min(m0, m1, k, r) < 0:
        raise DomainError("m0, m1, k and r must be non-negative")
