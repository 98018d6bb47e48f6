from __future__ import annotations

import csv
import io
import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Polygon
from pydantic import (
    BaseModel,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from app.core.errors import DomainError, InputError
from app.core.hyperbolic import AdaptedNorm
from app.core.lattice import IntMatrix
from app.core.symbolic import MarkovPartition, Rectangle, box_adjacency
from app.core.walk import IncrementMeasure

logger = logging.getLogger(__name__)

TV_COLUMNS: List[str] = ["n", "d", "t", "tv_exact", "tv_mc", "lower_bound", "l2_bound"]
SCAN_COLUMNS: List[str] = ["n", "t_mix", "t_mix_over_log_n", "status"]


class MatrixFile(BaseModel):
    """Matrix input: {"d": int, "rows": [[int, ...], ...]}."""

    d: int = Field(..., ge=1, description="Dimension of the torus")
    rows: List[List[int]] = Field(..., description="Integer rows of A")

    model_config = {
        "json_schema_extra": {"examples": [{"d": 2, "rows": [[1, 1], [1, 0]]}]}
    }

    @model_validator(mode="after")
    def _square(self) -> MatrixFile:
        if len(self.rows) != self.d or any(len(row) != self.d for row in self.rows):
            raise ValueError(f"rows must form a {self.d}x{self.d} matrix")
        return self

    def to_matrix(self) -> IntMatrix:
        return IntMatrix.from_rows(self.rows)


class MeasureEntry(BaseModel):
    """One atom of an increment measure; prob is a "p/q" string or a float."""

    point: List[int] = Field(..., min_length=1, description="Support point in Z^d")
    prob: Union[str, float] = Field(..., description="Weight as 'p/q' or float")

    model_config = {
        "json_schema_extra": {"examples": [{"point": [1, 0], "prob": "1/3"}]}
    }

    @field_validator("prob")
    @classmethod
    def _parse_rational(cls, value: Union[str, float]) -> Union[str, float]:
        if isinstance(value, str):
            Fraction(value)
        return value

    def weight(self) -> Union[Fraction, float]:
        if isinstance(self.prob, str):
            return Fraction(self.prob)
        return float(self.prob)


class RectangleEntry(BaseModel):
    id: int = Field(..., ge=0)
    anchor: List[float]
    stable_edge: Optional[List[float]] = None
    unstable_edge: Optional[List[float]] = None
    vertices: Optional[List[List[float]]] = None

    @model_validator(mode="after")
    def _shape(self) -> RectangleEntry:
        has_edges = self.stable_edge is not None and self.unstable_edge is not None
        if not has_edges and self.vertices is None:
            raise ValueError(f"rectangle {self.id} needs edges or vertices")
        return self

    def to_rectangle(self) -> Rectangle:
        def array(values: Optional[Sequence]) -> Optional[np.ndarray]:
            return None if values is None else np.asarray(values, dtype=np.float64)

        return Rectangle(
            id=self.id,
            anchor=np.asarray(self.anchor, dtype=np.float64),
            stable_edge=array(self.stable_edge),
            unstable_edge=array(self.unstable_edge),
            vertices=array(self.vertices),
        )


class PartitionFile(BaseModel):
    """Partition exchange format: rectangles plus a 0/1 adjacency matrix."""

    rectangles: List[RectangleEntry] = Field(..., min_length=1)
    adjacency: Optional[List[List[int]]] = None

    @model_validator(mode="after")
    def _ids(self) -> PartitionFile:
        if [rect.id for rect in self.rectangles] != list(range(len(self.rectangles))):
            raise ValueError("rectangle ids must be 0..m-1 in order")
        if self.adjacency is not None:
            m = len(self.rectangles)
            if len(self.adjacency) != m or any(len(row) != m for row in self.adjacency):
                raise ValueError(f"adjacency must be {m}x{m}")
        return self


def _read_json(path: Union[str, Path]) -> object:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def load_matrix(path: Union[str, Path]) -> IntMatrix:
    try:
        return MatrixFile.model_validate(_read_json(path)).to_matrix()
    except ValidationError as exc:
        raise InputError(f"invalid matrix file {path}: {exc}") from exc


def load_measure(path: Union[str, Path]) -> IncrementMeasure:
    payload = _read_json(path)
    try:
        if not isinstance(payload, list):
            raise InputError(f"measure file {path} must hold a JSON list")
        entries = [MeasureEntry.model_validate(item) for item in payload]
        return IncrementMeasure.from_pairs(
            [entry.point for entry in entries], [entry.weight() for entry in entries]
        )
    except (ValidationError, ValueError, ZeroDivisionError, DomainError) as exc:
        raise InputError(f"invalid measure file {path}: {exc}") from exc


def partition_to_json(partition: MarkovPartition) -> dict:
    rectangles = []
    for rect in partition.rectangles:
        entry = {"id": rect.id, "anchor": np.asarray(rect.anchor).tolist()}
        if rect.stable_edge is not None and rect.unstable_edge is not None:
            entry["stable_edge"] = np.asarray(rect.stable_edge).tolist()
            entry["unstable_edge"] = np.asarray(rect.unstable_edge).tolist()
        else:
            entry["vertices"] = np.asarray(rect.vertices).tolist()
        rectangles.append(entry)
    return {"rectangles": rectangles, "adjacency": partition.adjacency.tolist()}


def load_partition(
    path: Union[str, Path], A: IntMatrix, norm: AdaptedNorm
) -> MarkovPartition:
    """
    Read a partition file for the map A.

    A missing adjacency is recomputed from the rectangle geometry.
    """
    try:
        spec = PartitionFile.model_validate(_read_json(path))
        rectangles = tuple(entry.to_rectangle() for entry in spec.rectangles)
    except (ValidationError, ValueError) as exc:
        raise InputError(f"invalid partition file {path}: {exc}") from exc
    diameter = max(
        float(np.max(norm(v[:, None, :] - v[None, :, :])))
        for v in (rect.lifted_vertices for rect in rectangles)
    )
    partition = MarkovPartition(
        rectangles=rectangles,
        adjacency=np.zeros((len(rectangles), len(rectangles)), dtype=np.int64),
        diameter=diameter,
        matrix=A,
    )
    if spec.adjacency is not None:
        adjacency = np.asarray(spec.adjacency, dtype=np.int64)
        counts = None
    else:
        logger.info("Partition file has no adjacency; recomputing from geometry")
        counts = box_adjacency(partition)
        adjacency = (counts > 0).astype(np.int64)
    return MarkovPartition(
        rectangles=rectangles,
        adjacency=adjacency,
        diameter=diameter,
        matrix=A,
        transition_counts=counts,
    )


def dump_json(payload: dict) -> str:
    """Stable JSON text: sorted keys, fixed indentation and a trailing newline."""
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_csv(rows: Iterable[dict], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: _csv_cell(row.get(key)) for key in columns})
    return buffer.getvalue()


def _csv_cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_partition_svg(
    partition: MarkovPartition, orbit: Optional[np.ndarray] = None
) -> str:
    """SVG of the rectangles on the unit square, optionally with one coded orbit."""
    if partition.matrix.d != 2:
        raise InputError("SVG rendering is only available for d=2")
    figure = Figure(figsize=(6, 6))
    axes = figure.add_subplot()
    colours = matplotlib.colormaps["tab20"]
    shifts = [np.array([i, j], dtype=float) for i in (-1, 0, 1) for j in (-1, 0, 1)]
    for rect in partition.rectangles:
        for shift in shifts:
            axes.add_patch(
                Polygon(
                    rect.lifted_vertices + shift,
                    closed=True,
                    facecolor=colours(rect.id % 20),
                    edgecolor="black",
                    linewidth=0.4,
                    alpha=0.8,
                )
            )
        center = np.mod(rect.center, 1.0)
        if partition.m <= 60:
            axes.annotate(str(rect.id), center, fontsize=6, ha="center", va="center")
    if orbit is not None and len(orbit):
        points = np.mod(np.asarray(orbit, dtype=float), 1.0)
        axes.plot(points[:, 0], points[:, 1], "o", color="black", markersize=3)
    axes.set_xlim(0, 1)
    axes.set_ylim(0, 1)
    axes.set_aspect("equal")
    axes.set_title(f"{partition.m} rectangles, diameter {partition.diameter:.3g}")
    buffer = io.StringIO()
    with matplotlib.rc_context({"svg.hashsalt": "affine-walks"}):
        figure.savefig(buffer, format="svg", metadata={"Date": None})
    return buffer.getvalue()
