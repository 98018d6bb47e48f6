from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import null_space, svdvals

from app.core.errors import (
    DomainError,
    NotHyperbolic,
    NotPseudoOrbit,
    RankDeficient,
    TooFar,
)
from app.core.lattice import IntMatrix, SubgroupBasis, integer_inverse, is_hyperbolic
from app.core.tolerances import TAU_GEO, TAU_LIN

logger = logging.getLogger(__name__)


def frac(x: np.ndarray) -> np.ndarray:
    return np.mod(x, 1.0)


def wrap(delta: np.ndarray) -> np.ndarray:
    """Representative of a torus difference in [−1/2, 1/2)^d."""
    return np.mod(delta + 0.5, 1.0) - 0.5


def _orient(basis: np.ndarray) -> np.ndarray:
    # sign convention: largest-magnitude entry of each column is positive
    if basis.size == 0:
        return basis
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(basis.shape[1])])
    return basis * np.where(signs == 0, 1.0, signs)


def _spectral_norm(M: np.ndarray) -> float:
    return float(svdvals(M)[0]) if M.size else 0.0


@dataclass(frozen=True, eq=False)
class Splitting:
    """A-invariant decomposition R^d = E_s ⊕ E_u with its projections."""

    stable_basis: np.ndarray
    unstable_basis: np.ndarray
    P_s: np.ndarray
    P_u: np.ndarray
    stable_eigenvalues: Tuple[complex, ...]
    unstable_eigenvalues: Tuple[complex, ...]
    A: np.ndarray = field(repr=False)
    A_inv: np.ndarray = field(repr=False)

    @property
    def dims(self) -> Tuple[int, int]:
        return self.stable_basis.shape[1], self.unstable_basis.shape[1]

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def S(self) -> np.ndarray:
        """A restricted to E_s, in the orthonormal stable basis."""
        return self.stable_basis.T @ self.A @ self.stable_basis

    @property
    def T(self) -> np.ndarray:
        """A⁻¹ restricted to E_u, in the orthonormal unstable basis."""
        return self.unstable_basis.T @ self.A_inv @ self.unstable_basis

    def residuals(self) -> Tuple[float, float]:
        stable = self.A @ self.stable_basis - self.stable_basis @ self.S
        unstable = self.A_inv @ self.unstable_basis - self.unstable_basis @ self.T
        return (
            float(np.abs(stable).max(initial=0.0)),
            float(np.abs(unstable).max(initial=0.0)),
        )


def _polynomial_of_matrix(coefficients: np.ndarray, M: np.ndarray) -> np.ndarray:
    result = np.zeros_like(M)
    for c in coefficients:
        result = result @ M + c * np.eye(M.shape[0])
    return result


def stable_unstable_split(A: IntMatrix) -> Splitting:
    """
    E_s = ker P_s(A) and E_u = ker P_u(A), where P_s, P_u are the real factors of the
    characteristic polynomial collecting the roots inside and outside the unit circle.
    """
    if not is_hyperbolic(A):
        raise NotHyperbolic(f"matrix {A.rows} has an eigenvalue of modulus 1")
    matrix = A.to_float()
    eigenvalues = np.linalg.eigvals(matrix)
    inside = eigenvalues[np.abs(eigenvalues) < 1.0]
    outside = eigenvalues[np.abs(eigenvalues) > 1.0]

    def kernel(roots: np.ndarray) -> np.ndarray:
        if roots.size == 0:
            return np.zeros((A.d, 0))
        coefficients = np.real(np.poly(roots))
        kernel_of = _polynomial_of_matrix(coefficients, matrix)
        return _orient(null_space(kernel_of, rcond=TAU_LIN))

    stable = kernel(inside)
    unstable = kernel(outside)
    if stable.shape[1] + unstable.shape[1] != A.d:
        raise NotHyperbolic(
            f"numerical kernels have dimensions {stable.shape[1]} + {unstable.shape[1]}"
            f" != {A.d}"
        )
    B = np.hstack([stable, unstable])
    B_inv = np.linalg.inv(B)
    d_s = stable.shape[1]
    inverse = integer_inverse(A).to_float()
    splitting = Splitting(
        stable_basis=stable,
        unstable_basis=unstable,
        P_s=stable @ B_inv[:d_s, :],
        P_u=unstable @ B_inv[d_s:, :],
        stable_eigenvalues=tuple(complex(v) for v in sorted(inside, key=abs)),
        unstable_eigenvalues=tuple(complex(v) for v in sorted(outside, key=abs)),
        A=matrix,
        A_inv=inverse,
    )
    logger.debug(
        "Splitting dims %s, residuals %s", splitting.dims, splitting.residuals()
    )
    return splitting


@dataclass(frozen=True, eq=False)
class AdaptedNorm:
    """
    ‖x‖' = max(Σ_{k<l} ‖S^k x_s‖₂, Σ_{k<l} ‖T^k x_u‖₂), S = A|E_s, T = A⁻¹|E_u.

    `lam` bounds both ‖A|E_s‖' and ‖A⁻¹|E_u‖'; `c_low`, `c_high` compare ‖·‖' with
    the Euclidean norm: c_low‖x‖₂ <= ‖x‖' <= c_high‖x‖₂.
    """

    splitting: Splitting
    l: int
    lam: float
    lam_stable: float
    lam_unstable: float
    norm_A: float
    norm_A_inv: float
    c_low: float
    c_high: float

    @property
    def d(self) -> int:
        return self.splitting.d

    def components(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        stable = x @ self.splitting.P_s.T
        unstable = x @ self.splitting.P_u.T
        stable_total = np.zeros(x.shape[:-1])
        unstable_total = np.zeros(x.shape[:-1])
        for _ in range(self.l):
            stable_total = stable_total + np.linalg.norm(stable, axis=-1)
            unstable_total = unstable_total + np.linalg.norm(unstable, axis=-1)
            stable = stable @ self.splitting.A.T
            unstable = unstable @ self.splitting.A_inv.T
        return stable_total, unstable_total

    def __call__(self, x: np.ndarray) -> np.ndarray:
        stable, unstable = self.components(x)
        result = np.maximum(stable, unstable)
        return float(result) if result.ndim == 0 else result

    def stable_part(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.splitting.P_s.T

    def unstable_part(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.splitting.P_u.T

    @cached_property
    def search_shifts(self) -> np.ndarray:
        """Integer shifts that can realise the quotient distance of a wrapped delta."""
        radius = math.ceil(math.sqrt(self.d) / 2 * (1 + self.c_high / self.c_low))
        span = range(-radius, radius + 1)
        return np.array(list(itertools.product(span, repeat=self.d)), dtype=np.float64)

    def representative(self, delta: np.ndarray) -> np.ndarray:
        """Lift of the torus difference `delta` of least adapted norm."""
        delta = wrap(np.asarray(delta, dtype=np.float64))
        candidates = delta[..., None, :] + self.search_shifts
        best = np.asarray(np.argmin(self(candidates), axis=-1))
        index = np.broadcast_to(best[..., None, None], best.shape + (1, self.d))
        return np.take_along_axis(candidates, index, axis=-2)[..., 0, :]

    def torus_distance(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self(self.representative(np.asarray(x) - np.asarray(y)))


def _sum_of_powers(M: np.ndarray, l: int) -> float:
    total, power = 0.0, np.eye(M.shape[0])
    for _ in range(l):
        total += _spectral_norm(power)
        power = power @ M
    return total


def adapted_norm(A: IntMatrix, splitting: Optional[Splitting] = None) -> AdaptedNorm:
    """
    Build ‖·‖' from the least l with ‖S^l‖₂ < 1 and ‖T^l‖₂ < 1.

    With M = Σ_{k<l} ‖S^k‖₂, ‖Sx‖' = ‖x‖' − ‖x‖ + ‖S^l x‖ gives the certified
    rate 1 − (1 − ‖S^l‖₂)/M, which is the exact |eigenvalue| when E_s is a line.
    """
    splitting = splitting or stable_unstable_split(A)
    S, T = splitting.S, splitting.T
    l = 1
    while (
        _spectral_norm(np.linalg.matrix_power(S, l)) >= 1.0
        or _spectral_norm(np.linalg.matrix_power(T, l)) >= 1.0
    ):
        l += 1
        if l > 10_000:
            raise DomainError("no contracting power found for the restricted maps")

    def rate(M: np.ndarray) -> Tuple[float, float]:
        if M.size == 0:
            return 0.0, 1.0
        total = _sum_of_powers(M, l)
        return 1.0 - (1.0 - _spectral_norm(np.linalg.matrix_power(M, l))) / total, total

    lam_stable, weight_stable = rate(S)
    lam_unstable, weight_unstable = rate(T)
    slack = 0.0 if l == 1 else 1.0
    expand_u = _spectral_norm(np.linalg.inv(T)) + slack if T.size else 0.0
    expand_s = _spectral_norm(np.linalg.inv(S)) + slack if S.size else 0.0

    B = np.hstack([splitting.stable_basis, splitting.unstable_basis])
    singular = svdvals(B)
    norm = AdaptedNorm(
        splitting=splitting,
        l=l,
        lam=max(lam_stable, lam_unstable),
        lam_stable=lam_stable,
        lam_unstable=lam_unstable,
        norm_A=max(lam_stable, expand_u),
        norm_A_inv=max(lam_unstable, expand_s),
        c_low=1.0 / (math.sqrt(2.0) * singular[0]),
        c_high=max(weight_stable, weight_unstable) / singular[-1],
    )
    logger.debug("Adapted norm: l=%d, lambda=%.6f", l, norm.lam)
    return norm


def torus_distance(x: np.ndarray, y: np.ndarray, norm: AdaptedNorm) -> float:
    """Quotient distance d(x, y) = min over integer shifts v of ‖x − y + v‖'."""
    return float(norm.torus_distance(np.asarray(x, float), np.asarray(y, float)))


def shortest_lattice_vector(norm: AdaptedNorm) -> Tuple[float, Tuple[int, ...]]:
    """Least adapted norm of a nonzero integer vector, by exhaustive enumeration."""
    d = norm.d
    best = min(
        (
            (float(norm(np.eye(d)[i])), tuple(int(i == j) for j in range(d)))
            for i in range(d)
        )
    )
    radius = int(math.floor(best[0] / norm.c_low))
    span = range(-radius, radius + 1)
    candidates = np.array(
        [v for v in itertools.product(span, repeat=d) if any(v)], dtype=np.float64
    )
    if candidates.size:
        values = norm(candidates)
        index = int(np.argmin(values))
        if values[index] < best[0]:
            best = (float(values[index]), tuple(int(v) for v in candidates[index]))
    return best


@dataclass(frozen=True)
class HyperbolicConstants:
    epsilon_c: float
    c1: float
    c2: float
    shortest_vector: float
    injectivity_radius: float
    lam: float
    c1_derivation: str


def hyperbolic_constants(
    A: IntMatrix, norm: AdaptedNorm, H: SubgroupBasis
) -> HyperbolicConstants:
    """
    Expansiveness constant and the gap constants (c₁, c₂).

    For ρ/n outside W some coordinate of Qᵀ(ρ/n − w) is at least 1/(a_i n) in size,
    hence d(ρ/n, W) >= c_low / (a_max · max_i ‖u_i‖₂) / n.
    """
    if H.rank < H.dimension:
        raise RankDeficient(f"H has rank {H.rank} < d={H.dimension}")
    shortest, _ = shortest_lattice_vector(norm)
    epsilon_c = shortest / (2.0 * max(norm.norm_A, norm.norm_A_inv))
    c2 = 1.0 + math.log(norm.norm_A) / math.log(1.0 / norm.lam)
    a_max = max(H.factors)
    column_norm = float(
        np.linalg.norm(H.change_of_basis.to_float(), axis=0).max()
    )
    raw_c1 = norm.c_low / (a_max * column_norm)
    c1 = min(raw_c1, 1.0 - TAU_GEO)
    derivation = (
        f"c1 = c_low / (a_max * max|u_i|) = {norm.c_low:.6g} / ({a_max} * "
        f"{column_norm:.6g}) = {raw_c1:.6g}"
    )
    return HyperbolicConstants(
        epsilon_c=epsilon_c,
        c1=c1,
        c2=c2,
        shortest_vector=shortest,
        injectivity_radius=shortest / 2.0,
        lam=norm.lam,
        c1_derivation=derivation,
    )


@dataclass(frozen=True, eq=False)
class ExpansivenessReport:
    k_plus: Optional[int]
    representative: np.ndarray
    v_s: np.ndarray
    v_u: np.ndarray
    unstable_norm: float
    bound: float

    @property
    def holds(self) -> bool:
        return self.k_plus is None or self.unstable_norm < self.bound * (1 + TAU_LIN)


def _closeness_horizon(
    v: np.ndarray, M: np.ndarray, norm: AdaptedNorm, epsilon: float, K: int
) -> Optional[int]:
    if norm(v) >= epsilon:
        return None
    image = v
    for k in range(1, K + 1):
        image = image @ M.T
        if norm(norm.representative(image)) >= epsilon:
            return k - 1
    return K


def expansiveness_report(
    x: np.ndarray,
    y: np.ndarray,
    A: IntMatrix,
    norm: AdaptedNorm,
    epsilon: float,
    K: int,
) -> ExpansivenessReport:
    """
    Forward closeness horizon K₊ of x and y and the unstable estimate ‖v_u‖' < λ^{K₊}ε.

    The orbit difference is tracked as A^l v for the least representative v of y − x,
    which stays the least representative while it is within ε <= ε_c.
    """
    v = norm.representative(np.asarray(y, float) - np.asarray(x, float))
    k_plus = _closeness_horizon(v, A.to_float(), norm, epsilon, K)
    v_s, v_u = norm.stable_part(v), norm.unstable_part(v)
    bound = norm.lam**k_plus * epsilon if k_plus is not None else math.inf
    return ExpansivenessReport(
        k_plus=k_plus,
        representative=v,
        v_s=v_s,
        v_u=v_u,
        unstable_norm=float(norm(v_u)),
        bound=bound,
    )


def two_sided_horizon(
    x: np.ndarray, y: np.ndarray, norm: AdaptedNorm, epsilon: float, K: int
) -> Optional[int]:
    """Largest K' <= K with d(A^l x, A^l y) < ε for all |l| <= K'."""
    v = norm.representative(np.asarray(y, float) - np.asarray(x, float))
    forward = _closeness_horizon(v, norm.splitting.A, norm, epsilon, K)
    backward = _closeness_horizon(v, norm.splitting.A_inv, norm, epsilon, K)
    if forward is None or backward is None:
        return None
    return min(forward, backward)


def local_product(
    x: np.ndarray, y: np.ndarray, epsilon: float, norm: AdaptedNorm
) -> np.ndarray:
    """[x, y] = x + P_s v, the point of W^s_ε(x) ∩ W^u_ε(y)."""
    v = norm.representative(np.asarray(y, float) - np.asarray(x, float))
    if norm(v) >= epsilon:
        raise TooFar(f"d(x, y) = {norm(v):.6g} is not below epsilon = {epsilon:.6g}")
    return frac(np.asarray(x, float) + norm.stable_part(v))


@dataclass(frozen=True, eq=False)
class ShadowResult:
    point: np.ndarray
    beta: float
    residual: float
    max_deviation: float


def shadow_orbit(
    pseudo_orbit: np.ndarray, norm: AdaptedNorm, alpha: float
) -> ShadowResult:
    """
    True orbit through `point` staying within β = α/(1−λ) of the pseudo-orbit.

    With δ_k the least representative of x_{k+1} − A x_k, the shadow keeps the stable
    part of x_0 and corrects the unstable part by Σ_k A^{-(k+1)} P_u δ_k. The residual
    is evaluated on the split errors, each recursion running in its contracting
    direction.
    """
    points = np.asarray(pseudo_orbit, dtype=np.float64)
    splitting = norm.splitting
    shortest, _ = shortest_lattice_vector(norm)
    if alpha * (1 + norm.norm_A) / (1 - norm.lam) >= shortest / 2:
        raise DomainError(
            f"alpha = {alpha:.3g} too large for the "
            f"injectivity radius {shortest / 2:.3g}"
        )
    deltas = norm.representative(points[1:] - frac(points[:-1] @ splitting.A.T))
    deviations = norm(deltas) if len(deltas) else np.zeros(0)
    if np.any(deviations >= alpha):
        worst = int(np.argmax(deviations))
        raise NotPseudoOrbit(
            f"step {worst} deviates by {deviations[worst]:.6g} >= alpha = {alpha:.6g}"
        )

    # each recursion stays inside its own subspace
    steps = len(deltas)
    unstable_errors = np.zeros((steps + 1, splitting.d))
    for k in range(steps - 1, -1, -1):
        pulled = splitting.A_inv @ (unstable_errors[k + 1] + splitting.P_u @ deltas[k])
        unstable_errors[k] = splitting.P_u @ pulled
    stable_errors = np.zeros((steps + 1, splitting.d))
    for k in range(steps):
        carried = splitting.A @ stable_errors[k] - splitting.P_s @ deltas[k]
        stable_errors[k + 1] = splitting.P_s @ carried

    residual = float(
        np.maximum(norm(stable_errors), norm(unstable_errors)).max(initial=0.0)
    )
    point = frac(points[0] + unstable_errors[0])
    return ShadowResult(
        point=point,
        beta=alpha / (1.0 - norm.lam),
        residual=residual,
        max_deviation=float(deviations.max(initial=0.0)),
    )
