from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from functools import reduce
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import entr
from scipy.stats import entropy as scipy_entropy

from app.core.errors import BudgetExceeded, DomainError
from app.core.lattice import IntMatrix, is_unimodular
from app.core.tolerances import SIMULATION_BLOCK, STATE_CAP, TAU_WEIGHTS

logger = logging.getLogger(__name__)

Weight = Union[Fraction, float]

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


@dataclass(frozen=True)
class IncrementMeasure:
    """Finitely supported probability measure on Z^d."""

    support: Tuple[Tuple[int, ...], ...]
    weights: Tuple[Weight, ...]

    def __post_init__(self) -> None:
        if not self.support:
            raise DomainError("increment measure needs a nonempty support")
        if len(self.support) != len(self.weights):
            raise DomainError("support and weights differ in length")
        if len({len(point) for point in self.support}) != 1:
            raise DomainError("support points have mixed dimensions")
        if len(set(self.support)) != len(self.support):
            raise DomainError("support points must be pairwise distinct")
        if any(w <= 0 for w in self.weights):
            raise DomainError("weights must be positive")
        if self.exact:
            if sum(self.weights, Fraction(0)) != 1:
                raise DomainError(f"rational weights sum to {sum(self.weights)}, not 1")
        elif abs(math.fsum(float(w) for w in self.weights) - 1.0) > TAU_WEIGHTS:
            raise DomainError("float weights do not sum to 1 within 1e-12")

    @classmethod
    def from_pairs(
        cls, points: Sequence[Sequence[int]], weights: Sequence[Weight]
    ) -> IncrementMeasure:
        return cls(
            tuple(tuple(int(v) for v in point) for point in points), tuple(weights)
        )

    @classmethod
    def uniform(cls, points: Sequence[Sequence[int]]) -> IncrementMeasure:
        share = Fraction(1, len(points))
        return cls.from_pairs(points, [share] * len(points))

    @classmethod
    def dirac(cls, point: Sequence[int]) -> IncrementMeasure:
        return cls.from_pairs([point], [Fraction(1)])

    @property
    def exact(self) -> bool:
        return all(isinstance(w, Fraction) for w in self.weights)

    @property
    def dimension(self) -> int:
        return len(self.support[0])

    def support_array(self) -> np.ndarray:
        return np.array(self.support, dtype=np.int64)

    def weights_array(self) -> np.ndarray:
        return np.array([float(w) for w in self.weights], dtype=np.float64)

    @property
    def entropy(self) -> float:
        return float(scipy_entropy(self.weights_array()))


@dataclass(frozen=True)
class WalkConfig:
    A: IntMatrix
    mu: IncrementMeasure
    n: int
    t: int
    seed: int = 0
    replicates: int = 1

    def __post_init__(self) -> None:
        if self.n < 2:
            raise DomainError(f"modulus must be at least 2, got {self.n}")
        if self.t < 0 or self.replicates < 0:
            raise DomainError("horizon and replicate count must be non-negative")
        if self.mu.dimension != self.A.d:
            raise DomainError(
                f"measure lives in Z^{self.mu.dimension}, matrix acts on Z^{self.A.d}"
            )
        if not is_unimodular(self.A):
            raise DomainError("walk matrix must be unimodular")


@dataclass(frozen=True, eq=False)
class TorusDistribution:
    """Probability vector on (Z/nZ)^d, mixed-radix index with coordinate 0 fastest."""

    n: int
    d: int
    probabilities: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.probabilities.shape != (self.n**self.d,):
            raise ValueError(
                f"expected {self.n ** self.d} probabilities, "
                f"got {self.probabilities.shape}"
            )

    @property
    def size(self) -> int:
        return self.n**self.d

    def grid(self) -> np.ndarray:
        """View as a d-dimensional array indexed by coordinates."""
        return self.probabilities.reshape((self.n,) * self.d, order="F")


@dataclass(frozen=True)
class LowerBound:
    raw: float
    clamped: float


@dataclass(frozen=True)
class ErgodicityReport:
    irreducible: bool
    period: int

    @property
    def converges(self) -> bool:
        return self.irreducible and self.period == 1


@dataclass(frozen=True)
class MixingResult:
    t_mix: Optional[int]
    tv: float


def splitmix64(value: int) -> int:
    """One output of the splitmix64 generator seeded at `value`."""
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 output function on uint64 words; arithmetic wraps modulo 2^64."""
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def state_count(n: int, d: int, cap: int = STATE_CAP) -> int:
    size = n**d
    if size > cap:
        raise BudgetExceeded(f"n^d = {n}^{d} = {size} states exceeds the cap {cap}")
    return size


def encode_states(states: np.ndarray, n: int) -> np.ndarray:
    """Mixed-radix little-endian index of each row of `states`."""
    radix = n ** np.arange(states.shape[-1], dtype=np.int64)
    return (np.mod(states, n) * radix).sum(axis=-1)


def decode_indices(indices: np.ndarray, n: int, d: int) -> np.ndarray:
    radix = n ** np.arange(d, dtype=np.int64)
    return (np.asarray(indices, dtype=np.int64)[:, None] // radix) % n


def all_states(n: int, d: int) -> np.ndarray:
    return decode_indices(np.arange(n**d, dtype=np.int64), n, d)


def _matrix_int64(A: IntMatrix, n: int) -> np.ndarray:
    # reduced mod n so that products stay below d·n^2
    return np.mod(A.to_int64(), n)


def affine_permutation(A: IntMatrix, n: int, cap: int = STATE_CAP) -> np.ndarray:
    """perm[idx(x)] = idx(A x mod n)."""
    state_count(n, A.d, cap)
    coords = all_states(n, A.d)
    return encode_states(coords @ _matrix_int64(A, n).T, n)


class WalkEnsemble:
    """
    All replicates of one walk, advanced in lockstep.

    Replicate i owns a splitmix64 stream started at seed XOR splitmix64(i), so its
    path depends only on the seed and its own index. SIMULATION_BLOCK only sets the
    slices handed to worker threads.
    """

    def __init__(self, config: WalkConfig, *, threads: int = 1) -> None:
        self._config = config
        self._threads = max(1, threads)
        self._matrix = _matrix_int64(config.A, config.n)
        self._increments = config.mu.support_array()
        self.states = np.zeros((config.replicates, config.A.d), dtype=np.int64)
        self.time = 0
        index = np.arange(config.replicates, dtype=np.uint64)
        self._streams = _mix64(index + _GOLDEN) ^ np.uint64(config.seed & _MASK64)
        self._blocks: List[Tuple[int, int]] = [
            (start, min(start + SIMULATION_BLOCK, config.replicates))
            for start in range(0, config.replicates, SIMULATION_BLOCK)
        ]

        mu = config.mu
        if mu.exact:
            denominator = reduce(math.lcm, (w.denominator for w in mu.weights), 1)
            numerators = [int(w * denominator) for w in mu.weights]
            self._denominator: Optional[int] = denominator
            self._cdf = np.cumsum(np.array(numerators, dtype=object)).astype(np.int64)
            if denominator > 2**32:
                raise DomainError("rational weights have a denominator beyond 2^32")
        else:
            self._denominator = None
            self._cdf = np.cumsum(mu.weights_array())

    def _draw(self, start: int, stop: int) -> np.ndarray:
        self._streams[start:stop] += _GOLDEN
        words = _mix64(self._streams[start:stop])
        if self._denominator is not None:
            draws = (words % np.uint64(self._denominator)).astype(np.int64)
        else:
            draws = (words >> np.uint64(11)).astype(np.float64) * 2.0**-53
        chosen = np.searchsorted(self._cdf, draws, side="right")
        return self._increments[np.minimum(chosen, len(self._cdf) - 1)]

    def _advance_block(self, block: Tuple[int, int]) -> None:
        start, stop = block
        increments = self._draw(start, stop)
        self.states[start:stop] = np.mod(
            self.states[start:stop] @ self._matrix.T + increments, self._config.n
        )

    def step(self) -> np.ndarray:
        if self._threads == 1:
            for block in self._blocks:
                self._advance_block(block)
        else:
            with ThreadPoolExecutor(max_workers=self._threads) as pool:
                list(pool.map(self._advance_block, self._blocks))
        self.time += 1
        return self.states


def simulate_walk(config: WalkConfig, *, threads: int = 1) -> np.ndarray:
    """Final state X_t of every replicate, started at X_0 = 0."""
    ensemble = WalkEnsemble(config, threads=threads)
    for _ in range(config.t):
        ensemble.step()
    logger.debug("Simulated %d replicates for %d steps", config.replicates, config.t)
    return ensemble.states


def empirical_tv(states: np.ndarray, n: int) -> float:
    """TV between the empirical law of `states` and uniform, without a histogram."""
    total_states = n ** states.shape[1]
    _, counts = np.unique(encode_states(states, n), return_counts=True)
    visited = np.abs(counts / states.shape[0] - 1.0 / total_states)
    unvisited = (total_states - counts.size) / total_states
    return 0.5 * (math.fsum(visited) + unvisited)


def empirical_distribution(states: np.ndarray, n: int) -> TorusDistribution:
    d = states.shape[1]
    counts = np.bincount(encode_states(states, n), minlength=state_count(n, d))
    return TorusDistribution(n, d, counts / states.shape[0])


def evolve_distribution(
    A: IntMatrix, mu: IncrementMeasure, n: int, *, cap: int = STATE_CAP
) -> Iterator[TorusDistribution]:
    """
    Yield P^0, P^1, ... exactly.

    One step moves mass from x to A x (a permutation of the states), then averages
    the |supp μ| cyclic shifts by b, always summed in support order.
    """
    d = A.d
    size = state_count(n, d, cap)
    perm = affine_permutation(A, n, cap)
    shifts = [tuple(int(v) % n for v in point) for point in mu.support]
    weights = mu.weights_array()
    axes = tuple(range(d))

    current = np.zeros(size, dtype=np.float64)
    current[0] = 1.0
    while True:
        yield TorusDistribution(n, d, current)
        moved = np.empty_like(current)
        moved[perm] = current
        grid = moved.reshape((n,) * d, order="F")
        accumulated = np.zeros_like(grid)
        for weight, shift in zip(weights, shifts):
            accumulated += weight * np.roll(grid, shift, axis=axes)
        current = accumulated.reshape(size, order="F")


def exact_distribution(
    A: IntMatrix, mu: IncrementMeasure, n: int, t: int, *, cap: int = STATE_CAP
) -> TorusDistribution:
    if t < 0:
        raise DomainError(f"horizon must be non-negative, got {t}")
    for step, distribution in enumerate(evolve_distribution(A, mu, n, cap=cap)):
        if step == t:
            return distribution
    raise AssertionError("unreachable")


def tv_to_uniform(p: TorusDistribution) -> float:
    return 0.5 * math.fsum(np.abs(p.probabilities - 1.0 / p.size))


def shannon_entropy(p: Union[TorusDistribution, Sequence[float], np.ndarray]) -> float:
    """Entropy in nats, 0·log 0 = 0."""
    values = p.probabilities if isinstance(p, TorusDistribution) else np.asarray(p)
    return float(scipy_entropy(values))


def entropy_lower_bound(
    mu: IncrementMeasure, n: int, d: int, t: int, mode: str = "derived"
) -> LowerBound:
    """
    TV(P^t, U) >= 1 − (t·H(μ) + log 2) / log N.

    "derived" uses N = n^d as the entropy comparison requires; "paper-literal" keeps
    log n in the denominator.
    """
    if t < 0 or n < 2:
        raise DomainError(f"need t >= 0 and n >= 2, got t={t}, n={n}")
    if mode == "derived":
        denominator = d * math.log(n)
    elif mode == "paper-literal":
        denominator = math.log(n)
    else:
        raise ValueError(f"unknown lower-bound mode {mode!r}")
    raw = 1.0 - (t * mu.entropy + math.log(2)) / denominator
    return LowerBound(raw=raw, clamped=min(1.0, max(0.0, raw)))


def binary_entropy(eps: float) -> float:
    return float(entr(eps) + entr(1.0 - eps))


def fannes_audenaert_gap(entropy_gap: float, N: int) -> float:
    """
    Smallest ε with ε·log(N−1) + H_b(ε) >= entropy_gap.

    The left side increases on [0, (N−1)/N], where it reaches log N, so the search
    is confined to that branch.
    """
    if N < 4:
        raise DomainError(f"N must be at least 4, got {N}")
    top = (N - 1) / N
    ceiling = math.log(N)
    if entropy_gap < 0 or entropy_gap > ceiling + 1e-12:
        raise DomainError(f"entropy gap {entropy_gap} outside [0, log N = {ceiling}]")
    if entropy_gap == 0:
        return 0.0
    if entropy_gap >= ceiling:
        return top

    def excess(eps: float) -> float:
        return eps * math.log(N - 1) + binary_entropy(eps) - entropy_gap

    return float(brentq(excess, 0.0, top, xtol=1e-14, rtol=1e-14))


def transition_graph_ergodicity(
    A: IntMatrix, mu: IncrementMeasure, n: int, *, cap: int = STATE_CAP
) -> ErgodicityReport:
    """
    Breadth-first irreducibility and period of the walk's state graph.

    The period of a strongly connected graph is the gcd of level(u) + 1 − level(v)
    over its edges u → v, levels being BFS distances from state 0.
    """
    d = A.d
    size = state_count(n, d, cap)
    coords = all_states(n, d)
    rotated = coords @ _matrix_int64(A, n).T
    successors = [encode_states(rotated + np.array(b), n) for b in mu.support]

    def reach(edges: List[np.ndarray]) -> np.ndarray:
        level = np.full(size, -1, dtype=np.int64)
        level[0] = 0
        frontier = np.array([0], dtype=np.int64)
        depth = 0
        while frontier.size:
            depth += 1
            targets = np.unique(np.concatenate([edge[frontier] for edge in edges]))
            targets = targets[level[targets] < 0]
            level[targets] = depth
            frontier = targets
        return level

    forward = reach(successors)
    predecessors = [np.argsort(edge) for edge in successors]
    backward = reach(predecessors)
    irreducible = bool((forward >= 0).all() and (backward >= 0).all())

    period = 0
    reachable = forward >= 0
    for edge in successors:
        gaps = forward[reachable] + 1 - forward[edge[reachable]]
        period = int(np.gcd.reduce(np.abs(gaps), initial=period))
    return ErgodicityReport(irreducible=irreducible, period=period)


def mixing_time(
    A: IntMatrix,
    mu: IncrementMeasure,
    n: int,
    target: float,
    t_max: int,
    *,
    method: str = "exact",
    seed: int = 0,
    replicates: int = 100_000,
    cap: int = STATE_CAP,
) -> MixingResult:
    """
    First t <= t_max with TV(P^t, U) <= target.

    TV is non-increasing in t, so the first crossing is the answer a bisection over
    t would return; marching forward costs one step per t instead of recomputing.
    """
    tv = 1.0
    if method == "exact":
        for t, distribution in enumerate(evolve_distribution(A, mu, n, cap=cap)):
            tv = tv_to_uniform(distribution)
            if tv <= target:
                return MixingResult(t, tv)
            if t >= t_max:
                break
        return MixingResult(None, tv)
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    ensemble = WalkEnsemble(WalkConfig(A, mu, n, t_max, seed, replicates))
    for t in range(t_max + 1):
        if t:
            ensemble.step()
        tv = empirical_tv(ensemble.states, n)
        if tv <= target:
            return MixingResult(t, tv)
    return MixingResult(None, tv)
