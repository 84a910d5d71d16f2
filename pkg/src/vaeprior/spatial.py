"""Spatial configurations that priors and trained decoders are bound to.

A :class:`SpatialStructure` is either a set of grid points (1D or 2D, in the
unit interval / unit square) or an areal adjacency graph. Every structure
carries a 64-bit fingerprint of its canonical text serialization so that a
decoder trained on one structure can refuse to run on another.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, DomainError, InvalidArgumentError, ParseError


class StructureKind(str, Enum):
    GRID_1D = "Grid1D"
    GRID_2D = "Grid2D"
    AREAL_GRAPH = "ArealGraph"


def _canonical_text(kind: StructureKind, coords: np.ndarray, adjacency: np.ndarray) -> str:
    buf = io.StringIO()
    buf.write(f"kind={kind.value}\n")
    n = coords.shape[0] if kind is not StructureKind.AREAL_GRAPH else adjacency.shape[0]
    buf.write(f"n={n}\n")
    if kind is StructureKind.AREAL_GRAPH:
        for row in adjacency.astype(np.uint8):
            buf.write("".join("1" if v else "0" for v in row))
            buf.write("\n")
    else:
        for point in coords.reshape(n, -1):
            buf.write(",".join(format(float(v), ".17g") for v in point))
            buf.write("\n")
    return buf.getvalue()


def fingerprint_text(text: str) -> str:
    """64-bit hex digest of a canonical serialization."""
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


@dataclass(frozen=True, eq=False)
class SpatialStructure:
    """Immutable spatial configuration.

    ``coords`` has shape (n,) for Grid1D and (n, 2) for Grid2D and is empty
    for areal graphs; ``adjacency`` is a symmetric 0/1 matrix for areal
    graphs and empty for grids.
    """

    kind: StructureKind
    coords: np.ndarray
    adjacency: np.ndarray
    regular: bool = False
    spacing: float | None = None
    fingerprint: str = field(init=False)

    def __post_init__(self) -> None:
        coords = np.array(self.coords, dtype=np.float64)
        adjacency = np.array(self.adjacency, dtype=np.int8)
        coords.setflags(write=False)
        adjacency.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "adjacency", adjacency)
        if self.kind is StructureKind.AREAL_GRAPH:
            _validate_adjacency(adjacency)
        elif coords.shape[0] < 2:
            raise InvalidArgumentError("a grid needs at least two points")
        text = _canonical_text(self.kind, coords, adjacency)
        object.__setattr__(self, "fingerprint", fingerprint_text(text))

    @property
    def n(self) -> int:
        if self.kind is StructureKind.AREAL_GRAPH:
            return int(self.adjacency.shape[0])
        return int(self.coords.shape[0])

    @property
    def has_coords(self) -> bool:
        return self.kind is not StructureKind.AREAL_GRAPH

    @property
    def points(self) -> np.ndarray:
        """Coordinates as an (n, dim) array."""
        if not self.has_coords:
            raise InvalidArgumentError("areal graphs have no coordinates")
        return self.coords.reshape(self.n, -1)

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.float64)

    def edges(self) -> np.ndarray:
        """Undirected edges (i < j) as an (m, 2) integer array, 0-based."""
        i, j = np.nonzero(np.triu(self.adjacency, k=1))
        return np.stack([i, j], axis=1)

    def pairwise_sq_distances(self) -> np.ndarray:
        pts = self.points
        diff = pts[:, None, :] - pts[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind.value, "n": self.n, "regular": self.regular}
        if self.spacing is not None:
            out["spacing"] = self.spacing
        if self.has_coords:
            out["coords"] = self.coords.tolist()
        else:
            out["edges"] = self.edges().tolist()
        out["fingerprint"] = self.fingerprint
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SpatialStructure":
        kind = StructureKind(data["kind"])
        if kind is StructureKind.AREAL_GRAPH:
            adjacency = adjacency_from_edges(int(data["n"]), np.asarray(data["edges"], dtype=int))
            structure = cls(kind, np.empty(0), adjacency)
        else:
            structure = cls(
                kind,
                np.asarray(data["coords"], dtype=np.float64),
                np.empty((0, 0)),
                regular=bool(data.get("regular", False)),
                spacing=data.get("spacing"),
            )
        expected = data.get("fingerprint")
        if expected is not None and expected != structure.fingerprint:
            raise ParseError("structure fingerprint does not match its contents")
        return structure


def _validate_adjacency(adjacency: np.ndarray) -> None:
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise DimensionMismatchError("adjacency must be square")
    if adjacency.shape[0] < 1:
        raise InvalidArgumentError("adjacency must have at least one area")
    if not np.isin(adjacency, (0, 1)).all():
        raise InvalidArgumentError("adjacency must be binary")
    if np.any(np.diag(adjacency) != 0):
        raise InvalidArgumentError("adjacency must have a zero diagonal")
    if not np.array_equal(adjacency, adjacency.T):
        raise InvalidArgumentError("adjacency must be symmetric")


def adjacency_from_edges(n: int, edges: np.ndarray) -> np.ndarray:
    """Symmetric adjacency matrix from 0-based undirected edges."""
    adjacency = np.zeros((n, n), dtype=np.int8)
    edges = np.asarray(edges, dtype=int).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise DimensionMismatchError(f"edge index outside [0, {n})")
    if np.any(edges[:, 0] == edges[:, 1]):
        raise InvalidArgumentError("self-loops are not allowed")
    adjacency[edges[:, 0], edges[:, 1]] = 1
    adjacency[edges[:, 1], edges[:, 0]] = 1
    return adjacency


def build_regular_grid_1d(n: int, lo: float = 0.0, hi: float = 1.0) -> SpatialStructure:
    """``n`` cell-centre points in (lo, hi), point i at lo + (i + 0.5)(hi - lo)/n."""
    if n < 2:
        raise InvalidArgumentError(f"n must be >= 2, got {n}")
    if not lo < hi:
        raise InvalidArgumentError(f"need lo < hi, got lo={lo}, hi={hi}")
    spacing = (hi - lo) / n
    coords = lo + (np.arange(n) + 0.5) * spacing
    return SpatialStructure(StructureKind.GRID_1D, coords, np.empty((0, 0)), regular=True, spacing=spacing)


def build_irregular_grid_1d(n: int, lo: float = 0.0, hi: float = 1.0, seed: int = 0) -> SpatialStructure:
    if n < 2:
        raise InvalidArgumentError(f"n must be >= 2, got {n}")
    if not lo < hi:
        raise InvalidArgumentError(f"need lo < hi, got lo={lo}, hi={hi}")
    rng = np.random.default_rng(seed)
    coords = np.sort(rng.uniform(lo, hi, size=n))
    # Uniform draws on the open interval; redraw on the (measure-zero) ties or endpoints.
    while np.any(np.diff(coords) <= 0) or coords[0] <= lo or coords[-1] >= hi:
        coords = np.sort(rng.uniform(lo, hi, size=n))
    return SpatialStructure(StructureKind.GRID_1D, coords, np.empty((0, 0)), regular=False)


def build_regular_grid_2d(segments: int) -> SpatialStructure:
    """Cell centres of a ``segments`` x ``segments`` grid on the unit square, row-major."""
    if segments < 2:
        raise InvalidArgumentError(f"segments must be >= 2, got {segments}")
    spacing = 1.0 / segments
    axis = (np.arange(segments) + 0.5) * spacing
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel()], axis=1)
    return SpatialStructure(StructureKind.GRID_2D, coords, np.empty((0, 0)), regular=True, spacing=spacing)


def areal_graph(adjacency: np.ndarray) -> SpatialStructure:
    return SpatialStructure(StructureKind.AREAL_GRAPH, np.empty(0), np.asarray(adjacency))


def observation_count(fraction: float, n: int) -> int:
    """Number of observed locations for a fraction of ``n`` (round half to even)."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError(f"fraction must be in (0, 1], got {fraction}")
    return max(1, round(fraction * n))


@dataclass(frozen=True, eq=False)
class ArealDataset:
    structure: SpatialStructure
    y: np.ndarray
    E: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    names: tuple[str, ...]

    def __post_init__(self) -> None:
        n = self.structure.n
        if not (len(self.y) == len(self.E) == self.covariates.shape[0] == len(self.names) == n):
            raise DimensionMismatchError("dataset columns must all have one entry per area")
        if np.any(self.E <= 0):
            raise DomainError("expected counts E must be strictly positive")

    @property
    def n(self) -> int:
        return self.structure.n

    def covariate(self, name: str) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index(name)]


def _read_areal_csv(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        if header[:4] != ["name", "y", "E", "aff"]:
            raise ParseError(f"{path}: header must start with name,y,E,aff", line=1)
        names, ys, es, covs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}", line=lineno)
            try:
                y = float(row[1])
                e = float(row[2])
                cov = [float(c) for c in row[3:]]
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
            if y < 0 or y != int(y):
                raise ParseError(f"{path}: y must be a nonnegative integer", line=lineno)
            if e <= 0:
                raise DomainError(f"{path}: line {lineno}: E must be strictly positive, got {e}")
            names.append(row[0].strip())
            ys.append(int(y))
            es.append(e)
            covs.append(cov)
    return header[3:], names, np.array(ys, dtype=np.int64), np.array(es), np.array(covs, dtype=np.float64)


def read_edge_list(path: Path, n: int) -> np.ndarray:
    """Read a 1-based undirected ``i j`` edge list into an adjacency matrix.

    Text after ``#`` is ignored.
    """
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 2:
                raise ParseError(f"{path}: expected 'i j'", line=lineno)
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(f"{path}: non-integer index", line=lineno) from None
            if not (1 <= i <= n and 1 <= j <= n):
                raise DimensionMismatchError(f"{path}: line {lineno}: index outside 1..{n}")
            edges.append((i - 1, j - 1))
    return adjacency_from_edges(n, np.array(edges, dtype=int).reshape(-1, 2))


def load_adjacency_matrix(adjacency: np.ndarray, symmetrize: bool = False) -> np.ndarray:
    """Validate a dense 0/1 adjacency, rejecting asymmetry unless ``symmetrize``."""
    adjacency = np.asarray(adjacency, dtype=np.int8)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise DimensionMismatchError("adjacency must be square")
    if symmetrize:
        adjacency = np.maximum(adjacency, adjacency.T)
    _validate_adjacency(adjacency)
    return adjacency


def load_areal_dataset(data_path: str | Path, adjacency_path: str | Path) -> ArealDataset:
    data_path, adjacency_path = Path(data_path), Path(adjacency_path)
    cov_names, names, y, E, covs = _read_areal_csv(data_path)
    n = len(names)
    if n == 0:
        raise ParseError(f"{data_path}: no data rows", line=2)
    try:
        adjacency = read_edge_list(adjacency_path, n)
    except DimensionMismatchError as exc:
        raise DimensionMismatchError(f"adjacency does not match {n} data rows: {exc}") from None
    structure = areal_graph(adjacency)
    return ArealDataset(structure, y, E, covs, tuple(cov_names), tuple(names))


def lip_cancer_paths() -> tuple[Path, Path]:
    """Paths of the bundled Scottish lip cancer data and adjacency files."""
    root = resources.files("vaeprior") / "data"
    return Path(str(root / "lip_cancer.csv")), Path(str(root / "lip_cancer_adjacency.txt"))


def load_lip_cancer() -> ArealDataset:
    return load_areal_dataset(*lip_cancer_paths())


def is_connected(adjacency: np.ndarray) -> bool:
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.nonzero(adjacency[i])[0]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    return bool(seen.all())
