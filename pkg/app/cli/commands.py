from __future__ import annotations

import asyncio
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score

from app.cli.schemas import (
    AnalyzeReport,
    BoundReport,
    CodeReport,
    ConvergenceReport,
    GammaCertificateModel,
    LemmaCheck,
    MarkovCheck,
    PartitionReport,
    ScanFit,
    ScanReport,
    ScanRow,
    ScanSpec,
    TvRow,
)
from app.core.errors import BudgetExceeded, DomainError, RankDeficient
from app.core.fourier import (
    OrbitWindows,
    bad_set_W,
    certified_gamma,
    choose_r,
    contraction_alpha,
    intermediate_bound,
    theoretical_bound,
)
from app.core.hyperbolic import adapted_norm, hyperbolic_constants
from app.core.lattice import (
    IntMatrix,
    SubgroupBasis,
    characteristic_polynomial,
    convergence_check,
    determinant,
    invariant_subgroup,
    is_hyperbolic,
    is_unimodular,
)
from app.core.symbolic import (
    MarkovPartition,
    block_length,
    build_partition_2d,
    classify_rectangles,
    code_point,
    decode_word,
    delta0,
    distance_to_W,
    lemma_block_checks,
    lemma_threshold,
    perron_root,
    topological_entropy,
    unit_torus,
    verify_markov,
)
from app.core.tolerances import STATE_CAP
from app.core.walk import (
    IncrementMeasure,
    WalkConfig,
    WalkEnsemble,
    empirical_tv,
    entropy_lower_bound,
    evolve_distribution,
    exact_distribution,
    mixing_time,
    splitmix64,
    state_count,
    transition_graph_ergodicity,
    tv_to_uniform,
)
from app.formats.files import load_partition, partition_to_json

logger = logging.getLogger(__name__)

# horizon cap factor of a scan: t_max = SCAN_HORIZON_FACTOR * log2(n)
SCAN_HORIZON_FACTOR: int = 64
# partition target as a fraction of the admissible diameter
PARTITION_MARGIN: float = 0.99


def full_lattice_measure(d: int) -> IncrementMeasure:
    """Uniform on {0, e_1, ..., e_d}; its invariant subgroup is all of Z^d."""
    points = [tuple(0 for _ in range(d))]
    points += [tuple(int(i == j) for j in range(d)) for i in range(d)]
    return IncrementMeasure.uniform(points)


def _subgroup(A: IntMatrix, mu: Optional[IncrementMeasure]) -> SubgroupBasis:
    return invariant_subgroup(A, mu if mu is not None else full_lattice_measure(A.d))


def _check_dimensions(A: IntMatrix, mu: Optional[IncrementMeasure]) -> None:
    if mu is not None and mu.dimension != A.d:
        raise DomainError(
            f"measure lives in Z^{mu.dimension}, matrix acts on Z^{A.d}"
        )


def cmd_analyze(
    A: IntMatrix, mu: Optional[IncrementMeasure] = None
) -> AnalyzeReport:
    """Determinant, spectrum type and hyperbolic constants of A."""
    _check_dimensions(A, mu)
    poly = characteristic_polynomial(A)
    hyperbolic = is_hyperbolic(A)
    unimodular = is_unimodular(A)
    report = AnalyzeReport(
        det=determinant(A),
        hyperbolic=hyperbolic,
        char_poly=list(poly.coefficients),
        char_poly_text=str(poly),
        unimodular=unimodular,
    )
    if not hyperbolic:
        logger.warning("Matrix %s has an eigenvalue on the unit circle", A.rows)
        return report
    if not unimodular:
        logger.warning("Matrix is not unimodular; torus dynamics are not invertible")
        return report

    norm = adapted_norm(A)
    H = _subgroup(A, mu)
    rank_deficient = H.rank < A.d
    if rank_deficient:
        logger.warning("H has rank %d < d=%d; c1 is not defined", H.rank, A.d)
        H = _subgroup(A, None)
    constants = hyperbolic_constants(A, norm, H)
    return report.model_copy(
        update={
            "dims": list(norm.splitting.dims),
            "lambda_": norm.lam,
            "l": norm.l,
            "norm_A": norm.norm_A,
            "norm_A_inv": norm.norm_A_inv,
            "epsilon_c": constants.epsilon_c,
            "c1": None if rank_deficient else constants.c1,
            "c1_derivation": None if rank_deficient else constants.c1_derivation,
            "c2": constants.c2,
            "shortest_vector": constants.shortest_vector,
            "subgroup_factors": None if rank_deficient else list(H.factors),
        }
    )


def cmd_convergence(
    A: IntMatrix,
    mu: IncrementMeasure,
    n: int,
    *,
    verify: bool = False,
    cap: int = STATE_CAP,
) -> ConvergenceReport:
    _check_dimensions(A, mu)
    H = invariant_subgroup(A, mu)
    verdict = convergence_check(H, n)
    report = ConvergenceReport(
        n=n,
        rank=H.rank,
        d=A.d,
        factors=list(H.factors),
        basis_vectors=[list(v) for v in H.basis_vectors],
        converges=verdict.converges,
        diagnostic=verdict.diagnostic,
    )
    if not verify:
        return report
    ergodicity = transition_graph_ergodicity(A, mu, n, cap=cap)
    if ergodicity.converges != verdict.converges:
        logger.warning(
            "Algebraic verdict %s disagrees with the state graph for n=%d",
            verdict.converges,
            n,
        )
    return report.model_copy(
        update={
            "irreducible": ergodicity.irreducible,
            "period": ergodicity.period,
            "verified_converges": ergodicity.converges,
        }
    )


def _exact_curve(
    A: IntMatrix, mu: IncrementMeasure, n: int, horizons: Sequence[int], cap: int
) -> Dict[int, float]:
    wanted = set(horizons)
    last = max(horizons)
    curve: Dict[int, float] = {}
    for t, distribution in enumerate(evolve_distribution(A, mu, n, cap=cap)):
        if t in wanted:
            curve[t] = tv_to_uniform(distribution)
        if t >= last:
            break
    return curve


def _mc_curve(
    config: WalkConfig, horizons: Sequence[int], threads: int
) -> Dict[int, float]:
    wanted = set(horizons)
    ensemble = WalkEnsemble(config, threads=threads)
    curve: Dict[int, float] = {}
    for t in range(config.t + 1):
        if t:
            ensemble.step()
        if t in wanted:
            curve[t] = empirical_tv(ensemble.states, config.n)
    return curve


def cmd_tv(
    A: IntMatrix,
    mu: IncrementMeasure,
    n: int,
    horizons: Sequence[int],
    *,
    method: str = "exact",
    lower_bound_mode: str = "derived",
    proceed: bool = False,
    mc_fallback: bool = False,
    replicates: int = 100_000,
    seed: int = 0,
    threads: int = 1,
    cap: int = STATE_CAP,
) -> List[TvRow]:
    """TV to uniform at each horizon, with the entropy and character-sum bounds."""
    _check_dimensions(A, mu)
    if not horizons:
        raise DomainError("no horizons requested")
    if method not in ("exact", "mc", "both"):
        raise ValueError(f"unknown method {method!r}")
    horizons = sorted(set(horizons))
    verdict = convergence_check(invariant_subgroup(A, mu), n)
    if not verdict.converges:
        if not proceed:
            raise DomainError(
                f"walk does not converge for n={n}: {verdict.diagnostic}; "
                "pass --proceed to compute anyway"
            )
        logger.warning("Proceeding with a non-convergent walk: %s", verdict.diagnostic)

    exact: Dict[int, float] = {}
    l2: Dict[int, float] = {}
    if method in ("exact", "both"):
        try:
            state_count(n, A.d, cap)
            exact = _exact_curve(A, mu, n, horizons, cap)
            windows = OrbitWindows(mu, A, n, cap=cap)
            l2 = {t: windows.bound(t).total for t in horizons}
        except BudgetExceeded as exc:
            if not mc_fallback:
                raise
            logger.warning("Exact budget exceeded (%s); using Monte Carlo", exc)
            method = "mc"
    mc: Dict[int, float] = {}
    if method in ("mc", "both"):
        config = WalkConfig(A, mu, n, max(horizons), seed, replicates)
        mc = _mc_curve(config, horizons, threads)

    rows = []
    for t in horizons:
        derived = entropy_lower_bound(mu, n, A.d, t, "derived").clamped
        literal = entropy_lower_bound(mu, n, A.d, t, "paper-literal").clamped
        rows.append(
            TvRow(
                n=n,
                d=A.d,
                t=t,
                tv_exact=exact.get(t),
                tv_mc=mc.get(t),
                lower_bound=derived if lower_bound_mode == "derived" else literal,
                l2_bound=l2.get(t),
                lower_bound_derived=derived,
                lower_bound_paper_literal=literal,
            )
        )
    logger.info("TV curve for n=%d: %d rows", n, len(rows))
    return rows


def scan_moduli(spec: ScanSpec, H: SubgroupBasis) -> List[int]:
    moduli = spec.n_values or list(range(spec.n_min, spec.n_max + 1))
    if spec.n_filter == "odd":
        return [n for n in moduli if n % 2]
    if spec.n_filter == "coprime-to-factors":
        return [n for n in moduli if all(math.gcd(n, a) == 1 for a in H.factors)]
    return list(moduli)


def scan_horizon(n: int, spec: ScanSpec) -> int:
    if spec.t_max is not None:
        return spec.t_max
    return math.ceil(SCAN_HORIZON_FACTOR * math.log2(n))


def scan_fit(rows: Sequence[ScanRow]) -> Optional[ScanFit]:
    """Fit t_mix against log n over the rows that reached the target."""
    done = [row for row in rows if row.status == "ok" and row.t_mix is not None]
    if len(done) < 2:
        return None
    x = np.log([[row.n] for row in done])
    y = np.array([row.t_mix for row in done], dtype=float)
    model = LinearRegression().fit(x, y)
    ratios = [row.t_mix_over_log_n for row in done]
    return ScanFit(
        slope=float(model.coef_[0]),
        intercept=float(model.intercept_),
        r2=float(r2_score(y, model.predict(x))),
        points=len(done),
        ratio_min=min(ratios),
        ratio_max=max(ratios),
    )


async def cmd_scan(
    A: IntMatrix,
    mu: IncrementMeasure,
    spec: ScanSpec,
    *,
    seed: int = 0,
    cap: int = STATE_CAP,
    concurrency: int = 8,
) -> ScanReport:
    """
    Mixing time for every eligible modulus.

    Moduli run concurrently in worker threads, at most `concurrency` at a time;
    rows come back sorted by n.
    """
    _check_dimensions(A, mu)
    H = invariant_subgroup(A, mu)
    semaphore = asyncio.Semaphore(concurrency)

    async def measure(n: int) -> ScanRow:
        verdict = convergence_check(H, n)
        if not verdict.converges:
            logger.warning("Skipping n=%d: %s", n, verdict.diagnostic)
            return ScanRow(n=n, status="skipped", detail=verdict.diagnostic)
        t_max = scan_horizon(n, spec)
        async with semaphore:
            try:
                result = await asyncio.to_thread(
                    mixing_time,
                    A,
                    mu,
                    n,
                    spec.target_tv,
                    t_max,
                    method=spec.method,
                    seed=seed ^ splitmix64(n),
                    replicates=spec.replicates,
                    cap=cap,
                )
            except BudgetExceeded as exc:
                logger.warning("Skipping n=%d: %s", n, exc)
                return ScanRow(n=n, status="budget", detail=str(exc))
        if result.t_mix is None:
            return ScanRow(
                n=n, status="capped", detail=f"TV {result.tv:.4g} at t_max={t_max}"
            )
        logger.debug("n=%d: t_mix=%d", n, result.t_mix)
        return ScanRow(
            n=n, t_mix=result.t_mix, t_mix_over_log_n=result.t_mix / math.log(n)
        )

    rows = await asyncio.gather(*(measure(n) for n in scan_moduli(spec, H)))
    rows = sorted(rows, key=lambda row: row.n)
    logger.info("Scan finished: %d rows", len(rows))
    return ScanReport(spec=spec, rows=rows, fit=scan_fit(rows))


def default_diameter(A: IntMatrix) -> float:
    """A diameter below the expansiveness constant of A."""
    norm = adapted_norm(A)
    constants = hyperbolic_constants(A, norm, _subgroup(A, None))
    return PARTITION_MARGIN * constants.epsilon_c


def obtain_partition(
    A: IntMatrix,
    *,
    target_diameter: Optional[float] = None,
    load_path: Optional[str] = None,
) -> MarkovPartition:
    """Load a partition file for A or build one."""
    if load_path is not None:
        return load_partition(load_path, A, adapted_norm(A))
    if target_diameter is None:
        target_diameter = default_diameter(A)
    return build_partition_2d(A, target_diameter)


def cmd_partition(
    A: IntMatrix,
    *,
    target_diameter: Optional[float] = None,
    load_path: Optional[str] = None,
    samples: int = 100,
    seed: int = 0,
) -> Tuple[MarkovPartition, PartitionReport]:
    partition = obtain_partition(
        A, target_diameter=target_diameter, load_path=load_path
    )
    check = verify_markov(
        partition, adapted_norm(A), samples, epsilon=target_diameter, seed=seed
    )
    if not check.accepted:
        logger.warning("Partition rejected: %s", check.reason)
    counts = partition.transition_counts
    report = PartitionReport(
        m=partition.m,
        diameter=partition.diameter,
        refinement_diameters=list(partition.refinement_diameters),
        adjacency=partition.adjacency.tolist(),
        transition_counts=None if counts is None else counts.tolist(),
        perron_root=perron_root(partition.adjacency),
        topological_entropy=topological_entropy(partition),
        total_volume=partition.total_volume,
        verification=MarkovCheck(
            accepted=check.accepted,
            reason=check.reason,
            max_overlap_area=check.max_overlap_area,
            coverage_error=check.coverage_error,
            uncovered_samples=check.uncovered_samples,
            stable_violation=check.stable_violation,
            unstable_violation=check.unstable_violation,
            rectangle_violation=check.rectangle_violation,
            samples_checked=check.samples_checked,
        ),
        rectangles=partition_to_json(partition)["rectangles"],
    )
    return partition, report


def cmd_code(
    A: IntMatrix,
    point: Sequence[float],
    K: int,
    *,
    target_diameter: Optional[float] = None,
    load_path: Optional[str] = None,
) -> Tuple[MarkovPartition, CodeReport]:
    """Code a point over positions −K..K and decode the first word back."""
    if len(point) != A.d:
        raise DomainError(f"point has {len(point)} coordinates, expected {A.d}")
    partition = obtain_partition(
        A, target_diameter=target_diameter, load_path=load_path
    )
    xi = unit_torus(np.asarray(point, dtype=np.float64))
    window = code_point(xi, partition, A, K)
    if window.ambiguous:
        logger.info("Point lies on a boundary: %d admissible words", len(window.words))
    decoded = decode_word(window, partition, A)
    error = float(adapted_norm(A).torus_distance(decoded.point, xi))
    report = CodeReport(
        point=xi.tolist(),
        K=K,
        offset=window.offset,
        words=[list(word) for word in window.words],
        ambiguous=window.ambiguous,
        decoded=unit_torus(decoded.point).tolist(),
        radius=decoded.radius,
        round_trip_error=error,
        within_radius=error <= decoded.radius + 1e-9,
    )
    return partition, report


def cmd_bound(
    A: IntMatrix,
    mu: IncrementMeasure,
    n: int,
    *,
    r: Optional[int] = None,
    eta: Optional[float] = None,
    grid_step: Optional[float] = None,
    lemma_max: int = 0,
    cap: int = STATE_CAP,
) -> BoundReport:
    """
    Closed-form TV bound at t = r·k + d for the walk mod n.

    The symbolic machinery runs on Aᵀ, which drives the dual orbit ρ ↦ Aᵀρ. The
    default η is the distance from the rectangles of R₁ to W.
    """
    _check_dimensions(A, mu)
    H = invariant_subgroup(A, mu)
    if H.rank < A.d:
        raise RankDeficient(f"H has rank {H.rank} < d={A.d}; no bound applies")
    verdict = convergence_check(H, n)
    if not verdict.converges:
        raise DomainError(f"walk does not converge for n={n}: {verdict.diagnostic}")

    dual = A.transpose()
    norm = adapted_norm(dual)
    W = bad_set_W(H, A)
    constants = hyperbolic_constants(dual, norm, H)
    admissible = delta0(W, norm, constants.epsilon_c)
    partition = build_partition_2d(dual, PARTITION_MARGIN * admissible)
    classification = classify_rectangles(partition, W, admissible)
    if eta is None:
        eta = distance_to_W(partition, classification, W, norm)
        logger.info("Distance from R1 to W: eta=%.4g", eta)
    certificate = certified_gamma(mu, A, W, eta, norm, grid_step)
    gamma = certificate.gamma

    k = block_length(constants, n)
    m0, m1 = classification.m0, classification.m1
    if r is None:
        r = choose_r(m0, m1, k, gamma)
    t = r * k + A.d
    exact_tv: Optional[float] = None
    try:
        exact_tv = tv_to_uniform(exact_distribution(A, mu, n, t, cap=cap))
    except BudgetExceeded as exc:
        logger.info("Exact TV at t=%d skipped: %s", t, exc)

    checks = []
    for modulus in range(2, lemma_max + 1):
        if not convergence_check(H, modulus).converges:
            continue
        lemma = lemma_block_checks(modulus, partition, constants, classification)
        checks.append(lemma)
    return BoundReport(
        n=n,
        W=[[str(c) for c in point] for point in W.points],
        delta0=admissible,
        partition_size=partition.m,
        partition_diameter=partition.diameter,
        m0=m0,
        m1=m1,
        R0=list(classification.R0),
        successor_unique=classification.successor_unique,
        eta=eta,
        gamma=gamma,
        certificate=GammaCertificateModel(
            eta=certificate.eta,
            gamma=certificate.gamma,
            grid_max=certificate.grid_max,
            grid_step=certificate.grid_step,
            lipschitz_bound=certificate.lipschitz_bound,
            grid_points=certificate.grid_points,
        ),
        alpha=contraction_alpha(mu),
        k=k,
        r=r,
        t=t,
        bound=theoretical_bound(m0, m1, k, gamma, r),
        intermediate_bound=intermediate_bound(m0, m1, k, gamma, r),
        exact_tv=exact_tv,
        lemma_checks=[
            LemmaCheck(
                n=lemma.n,
                k=lemma.k,
                first_blocks_hit_R1=lemma.first_blocks_hit_R1,
                first_blocks_distinct=lemma.first_blocks_distinct,
                block_multisets_equal=lemma.block_multisets_equal,
                holds=lemma.holds,
            )
            for lemma in checks
        ],
        lemma_threshold=lemma_threshold(checks) if checks else None,
    )
