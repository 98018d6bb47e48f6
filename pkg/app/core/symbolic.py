from __future__ import annotations

import itertools
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigvals
from scipy.optimize import linprog
from scipy.spatial import ConvexHull, HalfspaceIntersection, cKDTree

from app.core.errors import (
    DiameterTooLarge,
    DimensionUnsupported,
    DomainError,
    EmptyIntersection,
)
from app.core.fourier import BadSetW
from app.core.hyperbolic import AdaptedNorm, HyperbolicConstants, adapted_norm
from app.core.lattice import IntMatrix, integer_inverse
from app.core.tolerances import TAU_AREA, TAU_GEO
from app.core.walk import affine_permutation, all_states

logger = logging.getLogger(__name__)

MAX_REFINEMENTS: int = 12
MAX_WORDS: int = 10_000
# seed points sit this far inside the quadrants around each segment crossing
CORNER_OFFSET: float = 1e-9


def unit_torus(x: np.ndarray) -> np.ndarray:
    """Reduce into [0, 1)^d, mapping the rounding artefact 1.0 back to 0."""
    reduced = np.mod(x, 1.0)
    return np.where(reduced >= 1.0, 0.0, reduced)


@dataclass(frozen=True, eq=False)
class Rectangle:
    """
    Convex rectangle on the torus, stored as a lifted polytope.

    Built partitions give parallelograms
    anchor + [0,1]·stable_edge + [0,1]·unstable_edge; externally supplied
    rectangles may give a vertex list instead.
    """

    id: int
    anchor: np.ndarray
    stable_edge: Optional[np.ndarray] = None
    unstable_edge: Optional[np.ndarray] = None
    vertices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        edges = (self.stable_edge, self.unstable_edge)
        if self.vertices is None and any(edge is None for edge in edges):
            raise ValueError(f"rectangle {self.id} needs edges or a vertex list")
        if self.volume <= TAU_AREA:
            raise ValueError(
                f"rectangle {self.id} is degenerate (volume {self.volume:.3g})"
            )

    @cached_property
    def lifted_vertices(self) -> np.ndarray:
        if self.vertices is not None:
            return np.asarray(self.vertices, dtype=np.float64)
        s = np.asarray(self.stable_edge, float)
        u = np.asarray(self.unstable_edge, float)
        anchor = np.asarray(self.anchor, float)
        return np.array([anchor, anchor + s, anchor + s + u, anchor + u])

    @cached_property
    def equations(self) -> np.ndarray:
        """Rows (normal, offset), unit normals; inside is normal·x + offset <= 0."""
        return ConvexHull(self.lifted_vertices).equations

    @cached_property
    def volume(self) -> float:
        return float(ConvexHull(self.lifted_vertices).volume)

    @property
    def d(self) -> int:
        return self.lifted_vertices.shape[1]

    @cached_property
    def center(self) -> np.ndarray:
        return self.lifted_vertices.mean(axis=0)

    @cached_property
    def radius(self) -> float:
        return float(np.linalg.norm(self.lifted_vertices - self.center, axis=1).max())

    @cached_property
    def translates(self) -> np.ndarray:
        """Integer shifts z with p + z in the lift for some p in [0,1)^d."""
        low = np.floor(self.lifted_vertices.min(axis=0)).astype(int) - 1
        high = np.ceil(self.lifted_vertices.max(axis=0)).astype(int)
        ranges = [range(lo, hi + 1) for lo, hi in zip(low, high)]
        return np.array(list(itertools.product(*ranges)), dtype=np.float64)

    def signed_distance(self, lifted: np.ndarray) -> np.ndarray:
        """max over faces of normal·x + offset; negative inside the lift."""
        normals, offsets = self.equations[:, :-1], self.equations[:, -1]
        return np.max(lifted @ normals.T + offsets, axis=-1)

    def depth(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Signed distance of torus points and the integer shift realising it."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        lifted = unit_torus(points)[:, None, :] + self.translates[None, :, :]
        distances = self.signed_distance(lifted)
        best = np.argmin(distances, axis=1)
        return distances[np.arange(len(points)), best], self.translates[best]

    def chord(
        self, lifted_point: np.ndarray, direction: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Parameters [t_lo, t_hi] of the line point + t·direction inside the lift."""
        normals, offsets = self.equations[:, :-1], self.equations[:, -1]
        slope = direction @ normals.T
        level = lifted_point @ normals.T + offsets
        with np.errstate(divide="ignore", invalid="ignore"):
            limit = -level / slope
        upper = np.where(slope > 0, limit, np.inf).min(axis=-1)
        lower = np.where(slope < 0, limit, -np.inf).max(axis=-1)
        return lower, upper

    def sample_interior(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Random lifted interior points as convex combinations of the vertices."""
        weights = rng.dirichlet(np.ones(len(self.lifted_vertices)), size=count)
        return weights @ self.lifted_vertices


@dataclass(frozen=True, eq=False)
class MarkovPartition:
    rectangles: Tuple[Rectangle, ...]
    adjacency: np.ndarray
    diameter: float
    matrix: IntMatrix
    delta0: Optional[float] = None
    transition_counts: Optional[np.ndarray] = None
    refinement_diameters: Tuple[float, ...] = ()

    @property
    def m(self) -> int:
        return len(self.rectangles)

    @property
    def total_volume(self) -> float:
        return math.fsum(rect.volume for rect in self.rectangles)

    @cached_property
    def _tree(self) -> cKDTree:
        centers = unit_torus(np.array([rect.center for rect in self.rectangles]))
        return cKDTree(centers, boxsize=1.0)

    @cached_property
    def _reach(self) -> float:
        return max(rect.radius for rect in self.rectangles)

    def depths(
        self, points: np.ndarray
    ) -> Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Point indices, signed distances and shifts per nearby rectangle."""
        points = unit_torus(np.atleast_2d(np.asarray(points, dtype=np.float64)))
        neighbours = self._tree.query_ball_point(points, r=self._reach + 1e-6)
        by_rectangle: Dict[int, List[int]] = {}
        for index, candidates in enumerate(neighbours):
            for rect in candidates:
                by_rectangle.setdefault(rect, []).append(index)
        result = {}
        for rect, indices in by_rectangle.items():
            selected = np.array(indices, dtype=np.int64)
            distance, shift = self.rectangles[rect].depth(points[selected])
            result[rect] = (selected, distance, shift)
        return result

    def locate(self, points: np.ndarray, tol: float = TAU_GEO) -> List[Tuple[int, ...]]:
        """Ids of every rectangle containing each point, within `tol`."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        found: List[List[int]] = [[] for _ in range(len(points))]
        for rect, (selected, distance, _) in sorted(self.depths(points).items()):
            for index in selected[distance <= tol]:
                found[int(index)].append(rect)
        return [tuple(sorted(ids)) for ids in found]


@dataclass(frozen=True, eq=False)
class _EigenFrame:
    """Coordinates (σ, τ) with x = σ·e_s + τ·e_u; A acts as diag(λ_s, λ_u)."""

    basis: np.ndarray
    inverse: np.ndarray
    lam_s: float
    lam_u: float

    @classmethod
    def from_norm(cls, norm: AdaptedNorm) -> _EigenFrame:
        splitting = norm.splitting
        if splitting.d != 2 or splitting.dims != (1, 1):
            raise DimensionUnsupported(
                "eigen-coordinate geometry needs a 2x2 hyperbolic map"
            )
        basis = np.hstack([splitting.stable_basis, splitting.unstable_basis])
        return cls(
            basis=basis,
            inverse=np.linalg.inv(basis),
            lam_s=float(np.real(splitting.stable_eigenvalues[0])),
            lam_u=float(np.real(splitting.unstable_eigenvalues[0])),
        )

    @property
    def area_scale(self) -> float:
        return abs(float(np.linalg.det(self.basis)))

    def lattice_in_box(
        self, low: Sequence[float], high: Sequence[float], slack: float = 1e-12
    ) -> np.ndarray:
        """Eigen coordinates of the integer points inside [low, high]."""
        corners = np.array(list(itertools.product(*zip(low, high)))) @ self.basis.T
        start = np.floor(corners.min(axis=0)).astype(np.int64)
        stop = np.ceil(corners.max(axis=0)).astype(np.int64)
        axes = [np.arange(a, b + 1) for a, b in zip(start, stop)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
        coords = grid @ self.inverse.T
        above = coords >= np.asarray(low) - slack
        below = coords <= np.asarray(high) + slack
        inside = np.all(above & below, axis=1)
        return coords[inside]


@dataclass(frozen=True)
class _Segments:
    """Stable segment [−p, q]·e_s and unstable segment [−r, s]·e_u through 0."""

    p: float
    q: float
    r: float
    s: float


def _next_hit(
    frame: _EigenFrame,
    axis: int,
    sign: int,
    beyond: float,
    band: Tuple[float, float],
) -> float:
    """
    Distance from 0 of the first crossing at or beyond `beyond` along one segment.

    Crossings of the stable line with the unstable segment are lattice points
    (σ, y) with y in `band`; crossings along the unstable line are (σ, y) with σ
    in `band` and distance −y.
    """
    window = max(beyond, 1.0)
    while window < 1e6:
        if axis == 0:
            low = (beyond if sign > 0 else -2 * window, band[0])
            high = (2 * window if sign > 0 else -beyond, band[1])
            coords = frame.lattice_in_box(low, high)
            values = sign * coords[:, 0]
        else:
            low = (band[0], -2 * window if sign > 0 else beyond)
            high = (band[1], -beyond if sign > 0 else 2 * window)
            coords = frame.lattice_in_box(low, high)
            values = -sign * coords[:, 1]
        values = values[values >= max(beyond, 1e-9)]
        if values.size:
            return float(values.min())
        window *= 2
    raise DomainError("no segment crossing found; the splitting is not irrational")


def _balance(
    frame: _EigenFrame,
    axis: int,
    rate: float,
    lengths: List[float],
    band: Tuple[float, float],
) -> List[float]:
    """For a negative eigenvalue, grow the sides until |rate|·side <= other side."""
    if rate > 0:
        return lengths
    ratio = abs(rate)
    for _ in range(1000):
        minus, plus = lengths
        if ratio * plus > minus:
            lengths[0] = _next_hit(frame, axis, -1, ratio * plus, band)
        elif ratio * minus > plus:
            lengths[1] = _next_hit(frame, axis, +1, ratio * minus, band)
        else:
            return lengths
    raise DomainError("could not balance the segments for a negative eigenvalue")


def _base_segments(frame: _EigenFrame, initial_length: float) -> _Segments:
    """
    Segments whose complement is a Markov partition.

    The stable segment is grown until both ends lie on the unstable one and vice
    versa; with A S ⊆ S and A⁻¹ U ⊆ U the stable boundary is forward invariant
    and the unstable boundary backward invariant.
    """
    r = s = initial_length
    band_u = (-s, r)
    stable = [
        _next_hit(frame, 0, -1, 0.0, band_u),
        _next_hit(frame, 0, +1, 0.0, band_u),
    ]
    p, q = _balance(frame, 0, frame.lam_s, stable, band_u)
    band_s = (-p, q)
    unstable = [
        _next_hit(frame, 1, -1, r, band_s),
        _next_hit(frame, 1, +1, s, band_s),
    ]
    r, s = _balance(frame, 1, 1.0 / frame.lam_u, unstable, band_s)
    return _Segments(p, q, r, s)


def _refine(frame: _EigenFrame, segments: _Segments) -> _Segments:
    """Boundaries of R ∨ A⁻¹R ∨ AR: stable segment A⁻¹S and unstable segment AU."""
    ls, lu = abs(frame.lam_s), abs(frame.lam_u)
    p, q = (segments.p / ls, segments.q / ls)
    if frame.lam_s < 0:
        p, q = q, p
    r, s = (segments.r * lu, segments.s * lu)
    if frame.lam_u < 0:
        r, s = s, r
    return _Segments(p, q, r, s)


def _locate_box(
    frame: _EigenFrame, x: np.ndarray, seg: _Segments
) -> Tuple[float, float, float, float]:
    height, width = seg.r + seg.s, seg.p + seg.q
    horizontal = frame.lattice_in_box(
        (x[0] - seg.q, x[1] - height), (x[0] + seg.p, x[1] + height)
    )[:, 1]
    vertical = frame.lattice_in_box(
        (x[0] - width, x[1] - seg.s), (x[0] + width, x[1] + seg.r)
    )[:, 0]
    bottom = horizontal[horizontal <= x[1]].max()
    top = horizontal[horizontal > x[1]].min()
    left = vertical[vertical <= x[0]].max()
    right = vertical[vertical > x[0]].min()
    return float(left), float(bottom), float(right - left), float(top - bottom)


Box = Tuple[np.ndarray, float, float]


def _boxes(frame: _EigenFrame, seg: _Segments) -> List[Box]:
    """
    Components of the torus minus both segments, as (anchor, width, height).

    Every component is a box in eigen coordinates whose corners are segment
    crossings, so probing the quadrants around every crossing finds them all.
    """
    crossings = frame.lattice_in_box((-seg.p, -seg.s), (seg.q, seg.r))
    found: Dict[Tuple[float, ...], Box] = {}
    for sigma in crossings[:, 0]:
        for dx, dy in itertools.product((-1.0, 1.0), repeat=2):
            inside = np.array([sigma + dx * CORNER_OFFSET, dy * CORNER_OFFSET])
            left, bottom, width, height = _locate_box(frame, inside, seg)
            anchor = unit_torus(frame.basis @ np.array([left, bottom]))
            key = tuple(np.round(anchor, 8) % 1.0) + (
                round(width, 8),
                round(height, 8),
            )
            found.setdefault(key, (anchor, width, height))
    boxes = sorted(found.values(), key=lambda box: tuple(np.round(box[0], 10)))
    area = math.fsum(w * h for _, w, h in boxes) * frame.area_scale
    if abs(area - 1.0) > 1e-9:
        raise RuntimeError(f"partition boxes cover area {area!r}, expected 1")
    return boxes


def _box_transitions(
    frame: _EigenFrame, boxes: List[Box], tau_area: float
) -> np.ndarray:
    """Components of A(R_i) ∩ R_j whose area exceeds tau_area."""
    origins = np.array([frame.inverse @ anchor for anchor, _, _ in boxes])
    sizes = np.array([[w, h] for _, w, h in boxes])
    scale = np.array([frame.lam_s, frame.lam_u])
    counts = np.zeros((len(boxes), len(boxes)), dtype=np.int64)
    for i in range(len(boxes)):
        ends = np.stack([origins[i] * scale, (origins[i] + sizes[i]) * scale])
        image_low, image_high = ends.min(axis=0), ends.max(axis=0)
        shifts = frame.lattice_in_box(
            image_low - (origins + sizes).max(axis=0), image_high - origins.min(axis=0)
        )
        if not shifts.size:
            continue
        low = np.maximum(image_low, origins[None, :, :] + shifts[:, None, :])
        ends = origins[None, :, :] + sizes[None, :, :] + shifts[:, None, :]
        high = np.minimum(image_high, ends)
        overlap = np.clip(high - low, 0.0, None).prod(axis=-1) * frame.area_scale
        counts[i] = (overlap > tau_area).sum(axis=0)
    return counts


def box_adjacency(
    partition: MarkovPartition, tau_area: float = TAU_AREA
) -> np.ndarray:
    """Transition counts of a parallelogram partition aligned with E_s and E_u."""
    frame = _EigenFrame.from_norm(adapted_norm(partition.matrix))
    return _box_transitions(frame, _eigen_boxes(partition, frame), tau_area)


def _eigen_boxes(partition: MarkovPartition, frame: _EigenFrame) -> List[Box]:
    boxes = []
    for rect in partition.rectangles:
        if rect.stable_edge is None or rect.unstable_edge is None:
            raise DimensionUnsupported(f"rectangle {rect.id} is not a parallelogram")
        s = frame.inverse @ np.asarray(rect.stable_edge, float)
        u = frame.inverse @ np.asarray(rect.unstable_edge, float)
        if abs(s[1]) > 1e-9 * abs(s[0]) or abs(u[0]) > 1e-9 * abs(u[1]):
            raise DimensionUnsupported(
                f"rectangle {rect.id} is not aligned with E_s, E_u"
            )
        origin = frame.inverse @ np.asarray(rect.anchor, float)
        corner = origin + np.minimum(s, 0) + np.minimum(u, 0)
        boxes.append((frame.basis @ corner, abs(float(s[0])), abs(float(u[1]))))
    return boxes


def _box_diameter(
    norm: AdaptedNorm, frame: _EigenFrame, width: float, height: float
) -> float:
    diagonals = np.array([[width, height], [width, -height]]) @ frame.basis.T
    return float(np.max(norm(diagonals)))


def build_partition_2d(
    A: IntMatrix,
    target_diameter: float,
    *,
    simple_transitions: bool = True,
    initial_length: float = 1.0,
    max_rounds: int = MAX_REFINEMENTS,
) -> MarkovPartition:
    """
    Markov partition of T² by parallelograms with edges along E_s and E_u.

    Refines until the adapted-norm diameter is at most `target_diameter` and, when
    `simple_transitions` is set, until every A(R_i) ∩ R_j is connected, so that the
    0/1 adjacency carries the full transition structure.
    """
    if A.shape != (2, 2):
        raise DimensionUnsupported(
            f"partition construction is implemented for d=2, got {A.shape}"
        )
    norm = adapted_norm(A)
    frame = _EigenFrame.from_norm(norm)
    segments = _base_segments(frame, initial_length)
    diameters: List[float] = []
    for round_index in range(max_rounds + 1):
        boxes = _boxes(frame, segments)
        counts = _box_transitions(frame, boxes, TAU_AREA)
        diameter = max(_box_diameter(norm, frame, w, h) for _, w, h in boxes)
        diameters.append(diameter)
        logger.info(
            "Partition round %d: %d rectangles, diameter %.4g",
            round_index,
            len(boxes),
            diameter,
        )
        simple = not simple_transitions or counts.max() <= 1
        if diameter <= target_diameter and simple:
            break
        segments = _refine(frame, segments)
    else:
        raise DomainError(
            f"diameter {diameters[-1]:.4g} still above {target_diameter:.4g} "
            f"after {max_rounds} refinements"
        )

    e_s, e_u = frame.basis[:, 0], frame.basis[:, 1]
    rectangles = tuple(
        Rectangle(id=i, anchor=anchor, stable_edge=w * e_s, unstable_edge=h * e_u)
        for i, (anchor, w, h) in enumerate(boxes)
    )
    return MarkovPartition(
        rectangles=rectangles,
        adjacency=(counts > 0).astype(np.int64),
        diameter=diameters[-1],
        matrix=A,
        transition_counts=counts,
        refinement_diameters=tuple(diameters),
    )


def perron_root(
    adjacency: np.ndarray, *, tol: float = 1e-14, max_iter: int = 100_000
) -> float:
    """Spectral radius of a nonnegative irreducible matrix, iterating on 𝒜 + I."""
    shifted = np.asarray(adjacency, dtype=np.float64) + np.eye(len(adjacency))
    vector = np.ones(len(adjacency)) / len(adjacency)
    estimate = 0.0
    for _ in range(max_iter):
        image = shifted @ vector
        new_estimate = float(image.sum() / vector.sum())
        vector = image / np.linalg.norm(image, 1)
        if abs(new_estimate - estimate) <= tol * new_estimate:
            return new_estimate - 1.0
        estimate = new_estimate
    logger.warning("Power iteration did not settle; falling back to the full spectrum")
    return float(np.max(np.abs(eigvals(adjacency))))


def topological_entropy(partition: MarkovPartition) -> float:
    return math.log(perron_root(partition.adjacency))


@dataclass(frozen=True)
class MarkovReport:
    accepted: bool
    reason: str
    max_overlap_area: float
    coverage_error: float
    uncovered_samples: int
    stable_violation: float
    unstable_violation: float
    rectangle_violation: float
    samples_checked: int

    @property
    def worst_violation(self) -> float:
        return max(
            self.stable_violation, self.unstable_violation, self.rectangle_violation
        )


def _overlap_area(first: Rectangle, second: Rectangle, shift: np.ndarray) -> float:
    """Volume of int(first) ∩ int(second + shift)."""
    halfspaces = np.vstack([first.equations, second.equations.copy()])
    halfspaces[len(first.equations):, -1] -= second.equations[:, :-1] @ shift
    normals, offsets = halfspaces[:, :-1], halfspaces[:, -1]
    d = normals.shape[1]
    # Chebyshev centre: maximise r subject to normal·x + r <= −offset
    result = linprog(
        c=np.concatenate([np.zeros(d), [-1.0]]),
        A_ub=np.hstack([normals, np.ones((len(normals), 1))]),
        b_ub=-offsets,
        bounds=[(None, None)] * d + [(0, None)],
        method="highs",
    )
    if not result.success or result.x[-1] <= 1e-12:
        return 0.0
    intersection = HalfspaceIntersection(halfspaces, result.x[:d])
    return float(ConvexHull(intersection.intersections).volume)


def _bounding_overlap(first: Rectangle, second: Rectangle) -> List[np.ndarray]:
    low_a, high_a = first.lifted_vertices.min(0), first.lifted_vertices.max(0)
    low_b, high_b = second.lifted_vertices.min(0), second.lifted_vertices.max(0)
    start = np.ceil(low_a - high_b).astype(int)
    stop = np.floor(high_a - low_b).astype(int)
    return [
        np.array(z, dtype=np.float64)
        for z in itertools.product(*[range(a, b + 1) for a, b in zip(start, stop)])
    ]


def _fibre_violation(
    source: Rectangle,
    target: Rectangle,
    points: np.ndarray,
    images: np.ndarray,
    basis: np.ndarray,
    forward: np.ndarray,
    rng: np.random.Generator,
) -> float:
    """
    Worst escape of mapped fibre points from the target lift.

    Fibres are chords of `source` through `points` along random directions in the
    span of `basis`; `forward` carries a fibre displacement to the target side.
    """
    directions = rng.standard_normal((len(points), basis.shape[1])) @ basis.T
    lo, hi = source.chord(points, directions)
    worst = -np.inf
    for fraction in np.linspace(0.0, 1.0, 5):
        offsets = (lo + fraction * (hi - lo))[:, None] * directions
        moved = images + offsets @ forward.T
        worst = max(worst, float(np.max(target.signed_distance(moved))))
    return worst


def _diameter(rect: Rectangle, norm: AdaptedNorm) -> float:
    vertices = rect.lifted_vertices
    return float(np.max(norm(vertices[:, None, :] - vertices[None, :, :])))


def verify_markov(
    partition: MarkovPartition,
    norm: AdaptedNorm,
    samples: int = 100,
    *,
    epsilon: Optional[float] = None,
    seed: int = 0,
) -> MarkovReport:
    """
    Check a partition against the Markov-partition axioms.

    Interiors must be disjoint and cover the torus; each rectangle must be closed
    under the local product; stable fibres must map into stable fibres of the image
    rectangle and unstable fibres of the image rectangle must pull back into
    unstable fibres. Fibres are chords of the lifted rectangle along E_s or E_u.
    """
    rng = np.random.default_rng(seed)
    splitting = norm.splitting
    rects = partition.rectangles

    if epsilon is not None:
        widest = max(_diameter(rect, norm) for rect in rects)
        if widest > epsilon:
            return MarkovReport(
                accepted=False,
                reason=f"diameter {widest:.4g} exceeds epsilon {epsilon:.4g}",
                max_overlap_area=math.nan,
                coverage_error=math.nan,
                uncovered_samples=0,
                stable_violation=math.nan,
                unstable_violation=math.nan,
                rectangle_violation=math.nan,
                samples_checked=0,
            )

    max_overlap = 0.0
    close_pairs = partition._tree.query_pairs(r=2 * partition._reach + 1e-6)
    for i, j in sorted(close_pairs | {(i, i) for i in range(len(rects))}):
        for shift in _bounding_overlap(rects[i], rects[j]):
            if i == j and not shift.any():
                continue
            area = _overlap_area(rects[i], rects[j], shift)
            max_overlap = max(max_overlap, area)

    coverage_error = abs(partition.total_volume - 1.0)
    scattered = rng.random((samples * len(rects), splitting.d))
    uncovered = sum(1 for ids in partition.locate(scattered, tol=1e-9) if not ids)

    stable_worst = unstable_worst = rectangle_worst = 0.0
    checked = 0
    for rect in rects:
        points = rect.sample_interior(rng, samples)
        images = points @ splitting.A.T
        for target, (selected, distance, shift) in partition.depths(images).items():
            interior = distance < -1e-9
            if not interior.any():
                continue
            x = points[selected[interior]]
            lifted = unit_torus(images[selected[interior]]) + shift[interior]
            checked += len(x)
            stable = _fibre_violation(
                rect, rects[target], x, lifted, splitting.stable_basis, splitting.A, rng
            )
            unstable = _fibre_violation(
                rects[target],
                rect,
                lifted,
                x,
                splitting.unstable_basis,
                splitting.A_inv,
                rng,
            )
            stable_worst = max(stable_worst, stable)
            unstable_worst = max(unstable_worst, unstable)

        partners = rect.sample_interior(rng, samples)
        product = points + (partners - points) @ splitting.P_s.T
        outside = float(np.max(rect.signed_distance(product)))
        rectangle_worst = max(rectangle_worst, outside)

    problems = []
    if max_overlap >= TAU_AREA:
        problems.append(f"interiors overlap (area {max_overlap:.3g})")
    if coverage_error > 1e-9 or uncovered:
        problems.append(
            f"cover defect {coverage_error:.3g} with {uncovered} uncovered samples"
        )
    worst = max(stable_worst, unstable_worst, rectangle_worst)
    if worst > TAU_GEO:
        problems.append(f"Markov inclusion violated by {worst:.3g}")
    return MarkovReport(
        accepted=not problems,
        reason="; ".join(problems) or "all axioms hold on the samples",
        max_overlap_area=max_overlap,
        coverage_error=coverage_error,
        uncovered_samples=uncovered,
        stable_violation=stable_worst,
        unstable_violation=unstable_worst,
        rectangle_violation=rectangle_worst,
        samples_checked=checked,
    )


@dataclass(frozen=True)
class SymbolicWindow:
    """Admissible words for positions −offset .. len−1−offset."""

    words: Tuple[Tuple[int, ...], ...]
    offset: int

    @property
    def word(self) -> Tuple[int, ...]:
        return self.words[0]

    @property
    def ambiguous(self) -> bool:
        return len(self.words) > 1


def admissible_words(
    letter_sets: Sequence[Sequence[int]],
    adjacency: np.ndarray,
    limit: int = MAX_WORDS,
) -> List[Tuple[int, ...]]:
    """Every path through the letter sets allowed by the adjacency matrix."""
    words: List[Tuple[int, ...]] = [(letter,) for letter in letter_sets[0]]
    for letters in letter_sets[1:]:
        words = [w + (b,) for w in words for b in letters if adjacency[w[-1], b]]
        if len(words) > limit:
            raise DomainError(f"more than {limit} admissible words")
    return words


def code_point(
    xi: np.ndarray,
    partition: MarkovPartition,
    A: IntMatrix,
    K: int,
    tol: float = TAU_GEO,
) -> SymbolicWindow:
    """Set-valued symbolic code of ξ over positions −K..K."""
    if K < 0:
        raise DomainError(f"window radius must be non-negative, got {K}")
    matrix = A.to_float()
    inverse = integer_inverse(A).to_float()
    start = unit_torus(np.asarray(xi, dtype=np.float64))
    forward, backward = [start], [start]
    for _ in range(K):
        forward.append(unit_torus(matrix @ forward[-1]))
        backward.append(unit_torus(inverse @ backward[-1]))
    orbit = np.array(backward[:0:-1] + forward)
    letter_sets = partition.locate(orbit, tol)
    if any(not letters for letters in letter_sets):
        raise EmptyIntersection("an orbit point lies outside every rectangle")
    words = admissible_words(letter_sets, partition.adjacency)
    if not words:
        raise EmptyIntersection("no admissible word codes this orbit")
    return SymbolicWindow(tuple(words), K)


@dataclass(frozen=True, eq=False)
class DecodedPoint:
    point: np.ndarray
    radius: float


def decode_word(
    window: SymbolicWindow,
    partition: MarkovPartition,
    A: IntMatrix,
    word_index: int = 0,
) -> DecodedPoint:
    """
    Intersect A^{-k} R_{ω_k} over the window and return its centre and radius.

    Works in eigen coordinates of a partition aligned with E_s and E_u: forward
    letters cut the unstable coordinate and backward letters the stable one. Each
    constraint is pulled back to position 0, so no expanding map is applied to
    the unknown point itself.
    """
    word = window.words[word_index]
    offset = window.offset
    if any(not partition.adjacency[a, b] for a, b in zip(word, word[1:])):
        raise EmptyIntersection(f"word {word} is not admissible")
    norm = adapted_norm(A)
    frame = _EigenFrame.from_norm(norm)
    boxes = _eigen_boxes(partition, frame)
    origins = [frame.inverse @ anchor for anchor, _, _ in boxes]
    sizes = [np.array([w, h]) for _, w, h in boxes]
    rates = np.array([frame.lam_s, frame.lam_u])

    def constrain(
        low: np.ndarray, high: np.ndarray, position: int
    ) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        letter = word[position]
        factor = rates ** (position - offset)
        image = np.sort(np.stack([low * factor, high * factor]), axis=0)
        axis = 1 if position > offset else 0
        other = 1 - axis
        shifts = frame.lattice_in_box(
            image[0] - origins[letter] - sizes[letter] - 1e-6,
            image[1] - origins[letter] + 1e-6,
        )
        best = None
        for shift in shifts:
            target_low = origins[letter] + shift
            target_high = target_low + sizes[letter]
            # the contracted coordinate only selects the translate
            if (
                image[1][other] < target_low[other] - 1e-6
                or image[0][other] > target_high[other] + 1e-6
            ):
                continue
            bounds = np.sort(np.stack([target_low, target_high]) / factor, axis=0)
            new_low, new_high = low.copy(), high.copy()
            new_low[axis] = max(low[axis], bounds[0][axis])
            new_high[axis] = min(high[axis], bounds[1][axis])
            width = new_high[axis] - new_low[axis]
            if width <= TAU_GEO * (1 + abs(new_low[axis])):
                continue
            if best is None or width > best[1][axis] - best[0][axis]:
                best = (new_low, new_high)
        return best

    base = word[offset]
    low, high = origins[base].copy(), origins[base] + sizes[base]
    order = list(range(offset + 1, len(word))) + list(range(offset - 1, -1, -1))
    for position in order:
        narrowed = constrain(low, high, position)
        if narrowed is None:
            raise EmptyIntersection(
                f"letter {word[position]} at position {position} is infeasible"
            )
        low, high = narrowed

    center = unit_torus(frame.basis @ ((low + high) / 2))
    half = (high - low) / 2
    diagonals = np.array([[half[0], half[1]], [half[0], -half[1]]]) @ frame.basis.T
    return DecodedPoint(point=center, radius=float(np.max(norm(diagonals))))


@dataclass(frozen=True)
class Classification:
    R0: Tuple[int, ...]
    R1: Tuple[int, ...]
    successor_unique: bool

    @property
    def m0(self) -> int:
        return len(self.R0)

    @property
    def m1(self) -> int:
        return len(self.R1)


def delta0(W: BadSetW, norm: AdaptedNorm, epsilon_c: float) -> float:
    """min(ε_c, min pairwise W distance / (1 + ‖A‖'))."""
    spacing = W.min_pairwise_distance(norm)
    return min(epsilon_c, spacing / (1.0 + norm.norm_A))


def classify_rectangles(
    partition: MarkovPartition, W: BadSetW, bound: float
) -> Classification:
    """R₀: rectangles containing a point of W; R₁: the rest."""
    if partition.diameter >= bound:
        raise DiameterTooLarge(
            f"partition diameter {partition.diameter:.4g} "
            f"is not below delta0 = {bound:.4g}"
        )
    hits = partition.locate(W.as_array(), tol=1e-9)
    R0 = tuple(sorted({rect for ids in hits for rect in ids}))
    R1 = tuple(i for i in range(partition.m) if i not in R0)
    in_R0 = np.zeros(partition.m, dtype=bool)
    in_R0[list(R0)] = True
    successors = partition.adjacency[np.ix_(in_R0, in_R0)].sum(axis=1)
    unique = bool(np.all(successors == 1))
    if not unique:
        logger.warning(
            "Some R0 rectangle lacks a unique R0 successor: %s", successors.tolist()
        )
    return Classification(R0=R0, R1=R1, successor_unique=unique)


def distance_to_W(
    partition: MarkovPartition,
    classification: Classification,
    W: BadSetW,
    norm: AdaptedNorm,
) -> float:
    """
    η = min over R₁ rectangles of the adapted torus distance to W.

    Exact for eigen-aligned boxes: the norm grows separately in |σ| and |τ|, so the
    nearest point of a box is the coordinate-wise clamp.
    """
    if not classification.R1:
        raise DomainError("every rectangle meets W; no R1 rectangle to measure")
    frame = _EigenFrame.from_norm(norm)
    boxes = _eigen_boxes(partition, frame)
    shifts = np.array(list(itertools.product((-1, 0, 1), repeat=2)), dtype=float)
    best = math.inf
    for index in classification.R1:
        anchor, width, height = boxes[index]
        low = frame.inverse @ anchor
        high = low + np.array([width, height])
        for w in W.as_array():
            lifted = (unit_torus(w - anchor) + anchor + shifts) @ frame.inverse.T
            gap = np.maximum(np.maximum(low - lifted, lifted - high), 0.0)
            best = min(best, float(np.min(norm(gap @ frame.basis.T))))
    return best


def block_length(constants: HyperbolicConstants, n: int) -> int:
    """k = 1 + ⌈(c₂ / log λ⁻¹) · log n⌉."""
    rate = constants.c2 / math.log(1.0 / constants.lam)
    return 1 + math.ceil(rate * math.log(n))


@dataclass(frozen=True)
class BlockReport:
    k: int
    r: int
    blocks: Tuple[Tuple[Tuple[int, ...], ...], ...]
    g_counts: Tuple[int, ...]
    m0: int
    m1: int

    @property
    def g(self) -> int:
        return sum(self.g_counts)


def _max_r1_letters(
    block: Sequence[Tuple[int, ...]], adjacency: np.ndarray, in_R1: np.ndarray
) -> int:
    """Most R₁ letters on an admissible path through the block's letter sets."""
    best = {letter: int(in_R1[letter]) for letter in block[0]}
    for letters in block[1:]:
        best = {
            b: max(score for a, score in best.items() if adjacency[a, b])
            + int(in_R1[b])
            for b in letters
            if any(adjacency[a, b] for a in best)
        }
        if not best:
            raise EmptyIntersection("no admissible path through a block")
    return max(best.values())


def _r1_mask(partition: MarkovPartition, classification: Classification) -> np.ndarray:
    in_R1 = np.zeros(partition.m, dtype=bool)
    in_R1[list(classification.R1)] = True
    return in_R1


def block_statistics(
    rho: Sequence[int],
    n: int,
    partition: MarkovPartition,
    constants: HyperbolicConstants,
    r: int,
    classification: Classification,
    tol: float = 1e-9,
) -> BlockReport:
    """
    k-block statistics of the orbit of ρ/n under the partition's matrix.

    The orbit is followed exactly on integer vectors mod n; g counts the R₁
    letters of each block, maximised over admissible words when a point sits on
    a boundary.
    """
    if not any(int(v) % n for v in rho):
        raise DomainError("rho = 0 is excluded from block statistics")
    k = block_length(constants, n)
    A = partition.matrix
    orbit, current = [], tuple(int(v) % n for v in rho)
    for _ in range(r * k):
        orbit.append(current)
        current = tuple(v % n for v in A.apply(current))
    letters = partition.locate(np.array(orbit, dtype=np.float64) / n, tol)
    in_R1 = _r1_mask(partition, classification)
    blocks = tuple(tuple(letters[i * k:(i + 1) * k]) for i in range(r))
    counts = tuple(
        _max_r1_letters(block, partition.adjacency, in_R1) for block in blocks
    )
    return BlockReport(k, r, blocks, counts, classification.m0, classification.m1)


@dataclass(frozen=True)
class LemmaReport:
    n: int
    k: int
    first_blocks_hit_R1: bool
    first_blocks_distinct: bool
    block_multisets_equal: bool

    @property
    def holds(self) -> bool:
        return (
            self.first_blocks_hit_R1
            and self.first_blocks_distinct
            and self.block_multisets_equal
        )


def lemma_block_checks(
    n: int,
    partition: MarkovPartition,
    constants: HyperbolicConstants,
    classification: Classification,
    r: int = 3,
    tol: float = 1e-9,
) -> LemmaReport:
    """
    Exhaustive k-block checks over every ρ ≠ 0 mod n.

    Letters are located once per dual state and words follow the permutation
    ρ ↦ Aρ mod n.
    """
    k = block_length(constants, n)
    letters = partition.locate(all_states(n, partition.matrix.d) / n, tol)
    perm = affine_permutation(partition.matrix, n)
    in_R1 = _r1_mask(partition, classification)

    states = np.arange(1, n**partition.matrix.d)
    paths = np.empty((states.size, r * k), dtype=np.int64)
    current = states
    for step in range(r * k):
        paths[:, step] = current
        current = perm[current]

    hit_all = True
    blocks_by_index: List[Counter] = [Counter() for _ in range(r)]
    for row in paths:
        word = [letters[state] for state in row]
        for i in range(r):
            blocks_by_index[i][tuple(word[i * k:(i + 1) * k])] += 1
        first = tuple(word[:k])
        if hit_all and _max_r1_letters(first, partition.adjacency, in_R1) < 1:
            hit_all = False
    first_blocks = blocks_by_index[0]
    return LemmaReport(
        n=n,
        k=k,
        first_blocks_hit_R1=hit_all,
        first_blocks_distinct=len(first_blocks) == states.size,
        block_multisets_equal=all(c == first_blocks for c in blocks_by_index[1:]),
    )


def lemma_threshold(reports: Sequence[LemmaReport]) -> Optional[int]:
    """Smallest tested n from which on every report holds; None if the largest fails."""
    threshold = None
    for report in sorted(reports, key=lambda rep: rep.n, reverse=True):
        if not report.holds:
            break
        threshold = report.n
    return threshold
