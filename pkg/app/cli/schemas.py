from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.tolerances import STATE_CAP

OutputFormat = Literal["json", "csv", "svg"]


class RunSettings(BaseModel):
    """Process-wide options parsed from the global flags."""

    seed: int = Field(0, ge=0, description="Root seed for every random stream")
    threads: int = Field(1, ge=1, description="Worker threads for simulations")
    state_cap: int = Field(
        STATE_CAP, ge=1, description="Largest n^d handled by exact computations"
    )
    out: Optional[str] = Field(None, description="Output file; stdout when unset")
    format: Optional[OutputFormat] = Field(
        None, description="Output format; each subcommand has its own default"
    )

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"examples": [{"seed": 7, "threads": 4, "format": "csv"}]},
    )


class AnalyzeReport(BaseModel):
    """Algebraic and hyperbolic summary of one matrix."""

    det: int
    hyperbolic: bool
    char_poly: List[int] = Field(
        ..., description="Coefficients of det(xI - A), constant term first"
    )
    char_poly_text: str
    unimodular: bool
    dims: Optional[List[int]] = Field(None, description="(dim E_s, dim E_u)")
    lambda_: Optional[float] = Field(None, alias="lambda")
    l: Optional[int] = Field(None, description="Power used to build the norm")
    norm_A: Optional[float] = None
    norm_A_inv: Optional[float] = None
    epsilon_c: Optional[float] = None
    c1: Optional[float] = None
    c2: Optional[float] = None
    c1_derivation: Optional[str] = None
    shortest_vector: Optional[float] = None
    subgroup_factors: Optional[List[int]] = None

    model_config = ConfigDict(populate_by_name=True)


class ConvergenceReport(BaseModel):
    n: int = Field(..., ge=2)
    rank: int = Field(..., ge=0)
    d: int = Field(..., ge=1)
    factors: List[int]
    basis_vectors: List[List[int]]
    converges: bool
    diagnostic: str
    irreducible: Optional[bool] = Field(
        None, description="Breadth-first cross-check, only with --verify"
    )
    period: Optional[int] = None
    verified_converges: Optional[bool] = None


class TvRow(BaseModel):
    """One horizon of a TV curve; the CSV keeps the first seven fields."""

    n: int
    d: int
    t: int = Field(..., ge=0)
    tv_exact: Optional[float] = None
    tv_mc: Optional[float] = None
    lower_bound: float = Field(..., description="Bound in the selected mode")
    l2_bound: Optional[float] = Field(
        None, description="Sum of squared characters; TV <= sqrt(l2_bound) / 2"
    )
    lower_bound_derived: float
    lower_bound_paper_literal: float


class ScanSpec(BaseModel):
    """Which moduli a mixing-time scan visits and how t_mix is measured."""

    n_min: int = Field(..., ge=2)
    n_max: int = Field(..., ge=2)
    n_filter: Literal["all", "coprime-to-factors", "odd"] = "all"
    n_values: Optional[List[int]] = Field(
        None, description="Explicit moduli; overrides the n_min..n_max range"
    )
    target_tv: float = Field(0.25, gt=0.0, lt=1.0)
    method: Literal["exact", "mc"] = "exact"
    t_max: Optional[int] = Field(
        None, ge=1, description="Horizon cap; defaults to 64*log2(n)"
    )
    replicates: int = Field(100_000, ge=1, description="Monte Carlo replicates")

    model_config = {
        "json_schema_extra": {
            "examples": [
                {
                    "n_min": 16,
                    "n_max": 1025,
                    "n_filter": "odd",
                    "target_tv": 0.25,
                    "method": "exact",
                }
            ]
        }
    }

    @model_validator(mode="after")
    def _range(self) -> ScanSpec:
        if self.n_max < self.n_min:
            raise ValueError(f"n_max={self.n_max} is below n_min={self.n_min}")
        if self.n_values is not None and any(n < 2 for n in self.n_values):
            raise ValueError("every explicit modulus must be at least 2")
        return self


class ScanRow(BaseModel):
    n: int
    t_mix: Optional[int] = None
    t_mix_over_log_n: Optional[float] = None
    status: Literal["ok", "skipped", "capped", "budget"] = "ok"
    detail: str = ""


class ScanFit(BaseModel):
    """Least-squares fit t_mix ≈ slope·log n + intercept over the ok rows."""

    slope: float
    intercept: float
    r2: float
    points: int = Field(..., ge=2)
    ratio_min: float
    ratio_max: float


class ScanReport(BaseModel):
    spec: ScanSpec
    rows: List[ScanRow]
    fit: Optional[ScanFit] = None


class MarkovCheck(BaseModel):
    accepted: bool
    reason: str
    max_overlap_area: float
    coverage_error: float
    uncovered_samples: int
    stable_violation: float
    unstable_violation: float
    rectangle_violation: float
    samples_checked: int


class PartitionReport(BaseModel):
    m: int = Field(..., ge=1)
    diameter: float
    refinement_diameters: List[float]
    adjacency: List[List[int]]
    transition_counts: Optional[List[List[int]]] = None
    perron_root: float
    topological_entropy: float
    total_volume: float
    verification: MarkovCheck
    rectangles: List[Dict[str, Any]]


class CodeReport(BaseModel):
    point: List[float]
    K: int = Field(..., ge=0)
    offset: int
    words: List[List[int]]
    ambiguous: bool
    decoded: List[float]
    radius: float
    round_trip_error: float
    within_radius: bool


class GammaCertificateModel(BaseModel):
    eta: float = Field(..., gt=0.0)
    gamma: float = Field(..., gt=0.0, lt=1.0)
    grid_max: float
    grid_step: float
    lipschitz_bound: float
    grid_points: int


class LemmaCheck(BaseModel):
    n: int
    k: int
    first_blocks_hit_R1: bool
    first_blocks_distinct: bool
    block_multisets_equal: bool
    holds: bool


class BoundReport(BaseModel):
    """Theoretical-bound pipeline output for one modulus."""

    n: int = Field(..., ge=2)
    W: List[List[str]] = Field(..., description="Bad set as rational coordinates")
    delta0: float
    partition_size: int
    partition_diameter: float
    m0: int
    m1: int
    R0: List[int]
    successor_unique: bool
    eta: float
    gamma: float
    certificate: GammaCertificateModel
    alpha: float
    k: int
    r: int
    t: int = Field(..., description="Horizon r*k + d the bound applies to")
    bound: float
    intermediate_bound: float
    exact_tv: Optional[float] = None
    lemma_checks: List[LemmaCheck] = Field(default_factory=list)
    lemma_threshold: Optional[int] = None


class RunReport(BaseModel):
    """Envelope around every JSON result."""

    tool: str = "affine-walks"
    version: str
    command: str
    seed: int
    inputs: Dict[str, Any]
    elapsed_seconds: float = Field(..., ge=0.0)
    result: Any
