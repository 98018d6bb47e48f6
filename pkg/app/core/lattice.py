from __future__ import annotations

import logging
from dataclasses import dataclass
from math import gcd
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np
import sympy
from mpmath import mp

from app.core.errors import AmbiguousSpectrum, DomainError
from app.core.tolerances import TAU_EIG

if TYPE_CHECKING:
    from app.core.walk import IncrementMeasure

logger = logging.getLogger(__name__)

_X = sympy.Symbol("x")


@dataclass(frozen=True)
class IntMatrix:
    """Integer matrix with arbitrary-precision entries, stored row-major."""

    rows: Tuple[Tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.rows or not self.rows[0]:
            raise ValueError("IntMatrix needs at least one row and one column")
        width = len(self.rows[0])
        if any(len(row) != width for row in self.rows):
            raise ValueError("IntMatrix rows must all have the same length")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> IntMatrix:
        return cls(tuple(tuple(int(v) for v in row) for row in rows))

    @classmethod
    def identity(cls, d: int) -> IntMatrix:
        return cls(tuple(tuple(int(i == j) for j in range(d)) for i in range(d)))

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.rows), len(self.rows[0])

    @property
    def d(self) -> int:
        n_rows, n_cols = self.shape
        if n_rows != n_cols:
            raise ValueError(f"matrix of shape {self.shape} is not square")
        return n_rows

    def to_object_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=object)

    def to_float(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64)

    def to_int64(self) -> np.ndarray:
        if any(abs(v) >= 2**62 for row in self.rows for v in row):
            raise OverflowError("matrix entries do not fit into int64")
        return np.array(self.rows, dtype=np.int64)

    def to_sympy(self) -> sympy.Matrix:
        return sympy.Matrix(self.rows)

    def transpose(self) -> IntMatrix:
        return IntMatrix(tuple(zip(*self.rows)))

    def __matmul__(self, other: IntMatrix) -> IntMatrix:
        product = self.to_object_array().dot(other.to_object_array())
        return IntMatrix.from_rows(product.tolist())

    def apply(self, vector: Sequence[int]) -> Tuple[int, ...]:
        return tuple(sum(a * int(v) for a, v in zip(row, vector)) for row in self.rows)

    def power(self, k: int) -> IntMatrix:
        if k < 0:
            return integer_inverse(self).power(-k)
        result = IntMatrix.identity(self.d)
        base = self
        while k:
            if k & 1:
                result = result @ base
            base = base @ base
            k >>= 1
        return result

    def column(self, j: int) -> Tuple[int, ...]:
        return tuple(row[j] for row in self.rows)


@dataclass(frozen=True)
class IntPolynomial:
    """Integer polynomial, coefficients in ascending degree order."""

    coefficients: Tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.coefficients or self.coefficients[-1] == 0:
            raise ValueError("leading coefficient must be nonzero")

    @property
    def degree(self) -> int:
        return len(self.coefficients) - 1

    def to_sympy(self) -> sympy.Poly:
        return sympy.Poly(list(reversed(self.coefficients)), _X)

    def __str__(self) -> str:
        return str(self.to_sympy().as_expr())


@dataclass(frozen=True)
class SmithDecomposition:
    """U·M·V = diag(factors, 0, ...), with U and V unimodular."""

    U: IntMatrix
    V: IntMatrix
    factors: Tuple[int, ...]
    rank: int


@dataclass(frozen=True)
class SubgroupBasis:
    """H generated by a_i·u_i, with u_i the first columns of the unimodular Q."""

    basis_vectors: Tuple[Tuple[int, ...], ...]
    factors: Tuple[int, ...]
    rank: int
    dimension: int
    change_of_basis: IntMatrix
    inverse_change_of_basis: IntMatrix


@dataclass(frozen=True)
class ConvergenceVerdict:
    converges: bool
    diagnostic: str


def integer_inverse(A: IntMatrix) -> IntMatrix:
    """Exact inverse of a unimodular matrix."""
    if not is_unimodular(A):
        raise DomainError(f"matrix {A.rows} is not unimodular, no integer inverse")
    inverse = A.to_sympy().inv()
    return IntMatrix.from_rows([[int(v) for v in inverse.row(i)] for i in range(A.d)])


def determinant(A: IntMatrix) -> int:
    return int(A.to_sympy().det(method="bareiss"))


def characteristic_polynomial(A: IntMatrix) -> IntPolynomial:
    """Exact coefficients of det(xI − A)."""
    descending = A.to_sympy().charpoly(_X).all_coeffs()
    return IntPolynomial(tuple(int(c) for c in reversed(descending)))


def is_unimodular(A: IntMatrix) -> bool:
    return abs(determinant(A)) == 1


def _near_unit_circle(roots: Sequence[complex]) -> bool:
    return any(abs(abs(complex(root)) - 1.0) <= TAU_EIG for root in roots)


def is_hyperbolic(A: IntMatrix) -> bool:
    """
    No characteristic root on the unit circle.

    Unit-modulus roots of a real polynomial are roots of gcd(p, reverse(p)), so the
    numerical step only ever looks at that factor. Its roots are computed twice, in
    double precision and with mpmath at 30 digits; if the two verdicts disagree the
    spectrum is reported as ambiguous.
    """
    p = characteristic_polynomial(A).to_sympy()
    reverse = sympy.Poly(list(reversed(p.all_coeffs())), _X)
    common = sympy.gcd(p, reverse)
    if common.degree() <= 0:
        return True
    common = common.sqf_part()
    coarse = np.roots([float(c) for c in common.all_coeffs()])
    try:
        fine = common.nroots(n=30, maxsteps=500)
    except mp.NoConvergence as exc:
        raise AmbiguousSpectrum(
            f"could not isolate the roots of {common.as_expr()}"
        ) from exc
    coarse_hit = _near_unit_circle(coarse)
    fine_hit = _near_unit_circle(fine)
    if coarse_hit != fine_hit:
        raise AmbiguousSpectrum(
            f"root moduli of {common.as_expr()} cannot be separated from 1 "
            f"at tolerance {TAU_EIG}"
        )
    return not fine_hit


def _swap_rows(matrix: List[List[int]], i: int, j: int) -> None:
    matrix[i], matrix[j] = matrix[j], matrix[i]


def _swap_cols(matrix: List[List[int]], i: int, j: int) -> None:
    for row in matrix:
        row[i], row[j] = row[j], row[i]


def _add_row(matrix: List[List[int]], target: int, source: int, factor: int) -> None:
    matrix[target] = [a + factor * b for a, b in zip(matrix[target], matrix[source])]


def _add_col(matrix: List[List[int]], target: int, source: int, factor: int) -> None:
    for row in matrix:
        row[target] += factor * row[source]


def _smallest_entry(D: List[List[int]], t: int) -> Optional[Tuple[int, int]]:
    best: Optional[Tuple[int, int]] = None
    for i in range(t, len(D)):
        for j in range(t, len(D[0])):
            if D[i][j] == 0:
                continue
            if best is None or abs(D[i][j]) < abs(D[best[0]][best[1]]):
                best = (i, j)
    return best


def smith_normal_form(M: IntMatrix) -> SmithDecomposition:
    """
    Smith normal form with the unimodular transforms, exact integer arithmetic.

    Pivots on the smallest nonzero entry, clears its row and column by Euclidean
    steps and repairs divisibility by folding an offending row into the pivot row.
    """
    n_rows, n_cols = M.shape
    D = [list(row) for row in M.rows]
    U = [list(row) for row in IntMatrix.identity(n_rows).rows]
    V = [list(row) for row in IntMatrix.identity(n_cols).rows]

    def row_op(target: int, source: int, factor: int) -> None:
        _add_row(D, target, source, factor)
        _add_row(U, target, source, factor)

    def col_op(target: int, source: int, factor: int) -> None:
        _add_col(D, target, source, factor)
        _add_col(V, target, source, factor)

    def row_swap(i: int, j: int) -> None:
        _swap_rows(D, i, j)
        _swap_rows(U, i, j)

    def col_swap(i: int, j: int) -> None:
        _swap_cols(D, i, j)
        _swap_cols(V, i, j)

    t = 0
    while t < min(n_rows, n_cols):
        pivot = _smallest_entry(D, t)
        if pivot is None:
            break
        row_swap(t, pivot[0])
        col_swap(t, pivot[1])
        while True:
            for i in range(t + 1, n_rows):
                q = D[i][t] // D[t][t]
                if q:
                    row_op(i, t, -q)
            for j in range(t + 1, n_cols):
                q = D[t][j] // D[t][t]
                if q:
                    col_op(j, t, -q)
            if any(D[i][t] for i in range(t + 1, n_rows)):
                in_column = min(
                    (i for i in range(t + 1, n_rows) if D[i][t]),
                    key=lambda i: abs(D[i][t]),
                )
                row_swap(t, in_column)
                continue
            if any(D[t][j] for j in range(t + 1, n_cols)):
                in_row = min(
                    (j for j in range(t + 1, n_cols) if D[t][j]),
                    key=lambda j: abs(D[t][j]),
                )
                col_swap(t, in_row)
                continue
            offending = next(
                (
                    i
                    for i in range(t + 1, n_rows)
                    for j in range(t + 1, n_cols)
                    if D[i][j] % D[t][t]
                ),
                None,
            )
            if offending is None:
                break
            row_op(t, offending, 1)
        if D[t][t] < 0:
            D[t] = [-v for v in D[t]]
            U[t] = [-v for v in U[t]]
        t += 1

    factors = tuple(D[i][i] for i in range(t))
    logger.debug(
        "Smith normal form of %dx%d matrix: factors %s", n_rows, n_cols, factors
    )
    return SmithDecomposition(
        U=IntMatrix.from_rows(U),
        V=IntMatrix.from_rows(V),
        factors=factors,
        rank=t,
    )


def invariant_subgroup(A: IntMatrix, mu: IncrementMeasure) -> SubgroupBasis:
    """Smallest A-invariant subgroup containing supp μ − supp μ."""
    d = A.d
    if not mu.support:
        raise DomainError("increment measure has empty support")
    base = mu.support[0]
    differences = [
        tuple(x - b for x, b in zip(point, base)) for point in mu.support[1:]
    ]
    generators: List[Tuple[int, ...]] = []
    for diff in differences:
        image = diff
        for _ in range(d):
            if any(image):
                generators.append(image)
            image = A.apply(image)

    if not generators:
        identity = IntMatrix.identity(d)
        return SubgroupBasis((), (), 0, d, identity, identity)

    M = IntMatrix.from_rows(list(zip(*generators)))
    decomposition = smith_normal_form(M)
    Q = integer_inverse(decomposition.U)
    basis = tuple(Q.column(i) for i in range(decomposition.rank))
    return SubgroupBasis(
        basis_vectors=basis,
        factors=decomposition.factors,
        rank=decomposition.rank,
        dimension=d,
        change_of_basis=Q,
        inverse_change_of_basis=decomposition.U,
    )


def subgroup_contains(H: SubgroupBasis, vector: Sequence[int]) -> bool:
    """Exact membership of an integer vector in H."""
    coordinates = H.inverse_change_of_basis.apply(vector)
    for i, c in enumerate(coordinates):
        if i < H.rank:
            if c % H.factors[i]:
                return False
        elif c:
            return False
    return True


def convergence_check(H: SubgroupBasis, n: int) -> ConvergenceVerdict:
    """The walk mod n converges to uniform iff rank H = d and gcd(n, a_i) = 1."""
    if n < 2:
        raise DomainError(f"modulus must be at least 2, got {n}")
    if H.rank < H.dimension:
        return ConvergenceVerdict(
            False, f"rank {H.rank} < d={H.dimension}: walk stays in a proper subgroup"
        )
    for i, a in enumerate(H.factors, start=1):
        common = gcd(n, a)
        if common != 1:
            return ConvergenceVerdict(
                False, f"gcd(n={n}, a_{i}={a}) = {common}: walk confined to cosets"
            )
    return ConvergenceVerdict(True, "rank d and all invariant factors coprime to n")
