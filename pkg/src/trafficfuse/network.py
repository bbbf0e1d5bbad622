"""Directed road network containers and count-matrix I/O.

A network is a set of road segments (the graph nodes) joined by directed
connectivity edges; traffic flows along edges. Segment ids are dense
0-based integers assigned in file order at load time, and the original
external ids are kept on the network for export. All containers here are
treated as immutable after construction and are safe to share across
threads.
"""

from __future__ import annotations

import csv
import datetime as _dt
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Segment",
    "RoadNetwork",
    "CountMatrix",
    "SchemaError",
    "load_network",
    "save_network",
    "load_counts",
    "save_counts",
    "boundary_segments",
    "max_storage",
]

# Advisory bounds; violations are diagnostics, not errors.
LENGTH_RANGE_M = (50.0, 2000.0)


class SchemaError(ValueError):
    """Raised when a network or count file violates its schema."""


@dataclass(frozen=True)
class Segment:
    """One directed road segment.

    Attributes:
        id: dense 0-based integer id, assigned at load.
        length_m: segment length in metres.
        lanes: lane count.
        capacity_vph: capacity C in vehicles per hour.
        free_flow_mps: free-flow speed v_free in metres per second.
        is_boundary: explicit boundary flag (overrides the degree rule).
    """

    id: int
    length_m: float
    lanes: int
    capacity_vph: float
    free_flow_mps: float
    is_boundary: bool = False

    def __post_init__(self):
        if self.length_m <= 0:
            raise SchemaError(f"segment {self.id}: length_m must be > 0")
        if self.lanes < 1:
            raise SchemaError(f"segment {self.id}: lanes must be >= 1")
        if self.capacity_vph <= 0:
            raise SchemaError(f"segment {self.id}: capacity_vph must be > 0")
        if self.free_flow_mps <= 0:
            raise SchemaError(f"segment {self.id}: free_flow_mps must be > 0")
        if not (LENGTH_RANGE_M[0] <= self.length_m <= LENGTH_RANGE_M[1]):
            warnings.warn(
                f"segment {self.id}: length {self.length_m} m outside advisory "
                f"range {LENGTH_RANGE_M}",
                stacklevel=2,
            )


@dataclass(frozen=True)
class RoadNetwork:
    """Immutable directed road network.

    edges are (from_id, to_id) pairs over dense ids. upstream[i] and
    downstream[i] are sorted id lists derived once at construction.
    external_ids maps dense id -> id string from the source file.
    """

    segments: tuple[Segment, ...]
    edges: tuple[tuple[int, int], ...]
    external_ids: tuple[str, ...]
    upstream: tuple[tuple[int, ...], ...] = field(init=False)
    downstream: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        n = len(self.segments)
        ups: list[list[int]] = [[] for _ in range(n)]
        downs: list[list[int]] = [[] for _ in range(n)]
        seen = set()
        for k, (i, j) in enumerate(self.edges):
            if not (0 <= i < n and 0 <= j < n):
                raise SchemaError(f"edge {k}: ({i}, {j}) references unknown segment")
            if i == j:
                raise SchemaError(f"edge {k}: self-loop on segment {i}")
            if (i, j) in seen:
                raise SchemaError(f"edge {k}: duplicate edge ({i}, {j})")
            seen.add((i, j))
            downs[i].append(j)
            ups[j].append(i)
        object.__setattr__(self, "upstream", tuple(tuple(sorted(u)) for u in ups))
        object.__setattr__(self, "downstream", tuple(tuple(sorted(d)) for d in downs))

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def adjacency(self) -> np.ndarray:
        """Dense 0/1 adjacency, A[i, j] = 1 iff edge i -> j."""
        a = np.zeros((self.n_segments, self.n_segments))
        for i, j in self.edges:
            a[i, j] = 1.0
        return a

    def free_flow(self) -> np.ndarray:
        return np.array([s.free_flow_mps for s in self.segments])

    def lengths(self) -> np.ndarray:
        return np.array([s.length_m for s in self.segments])


@dataclass
class CountMatrix:
    """Per-segment, per-bin vehicle counts; NaN marks missing bins.

    values has shape (n_segments, n_bins). start_time anchors bin 0 and
    bin_seconds is the uniform bin width, from which hour-of-day and
    day-of-week (Monday = 0) sequences are derived.
    """

    values: np.ndarray
    bin_seconds: int
    start_time: _dt.datetime

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise SchemaError("count values must be 2-D (segments x bins)")
        if self.bin_seconds <= 0:
            raise SchemaError("bin_seconds must be > 0")
        finite = self.values[np.isfinite(self.values)]
        if finite.size and finite.min() < 0:
            raise SchemaError("counts must be nonnegative")

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def bin_start(self, t: int) -> _dt.datetime:
        return self.start_time + _dt.timedelta(seconds=t * self.bin_seconds)

    def hours(self) -> np.ndarray:
        """Hour of day of each bin start, shape (n_bins,)."""
        return np.array([self.bin_start(t).hour for t in range(self.n_bins)])

    def days(self) -> np.ndarray:
        """Day of week of each bin start, Monday = 0."""
        return np.array([self.bin_start(t).weekday() for t in range(self.n_bins)])


def _parse_bool(raw: str, where: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no", ""):
        return False
    raise SchemaError(f"{where}: bad boolean {raw!r}")


_SEGMENT_FIELDS = ["id", "length_m", "lanes", "capacity_vph", "free_flow_mps", "is_boundary"]
_EDGE_FIELDS = ["from_id", "to_id"]


def load_network(path) -> RoadNetwork:
    """Load a network from a directory holding segments.csv and edges.csv.

    Segment records get dense ids in file order; edge files reference the
    external ids. Schema violations raise SchemaError with the offending
    file and line number.
    """
    import os

    seg_path = os.path.join(path, "segments.csv")
    edge_path = os.path.join(path, "edges.csv")
    segments: list[Segment] = []
    externals: list[str] = []
    index: dict[str, int] = {}
    with open(seg_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != _SEGMENT_FIELDS:
            raise SchemaError(f"{seg_path}: header must be {','.join(_SEGMENT_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{seg_path} line {lineno}"
            ext = row["id"].strip()
            if not ext:
                raise SchemaError(f"{where}: empty id")
            if ext in index:
                raise SchemaError(f"{where}: duplicate id {ext!r}")
            try:
                seg = Segment(
                    id=len(segments),
                    length_m=float(row["length_m"]),
                    lanes=int(row["lanes"]),
                    capacity_vph=float(row["capacity_vph"]),
                    free_flow_mps=float(row["free_flow_mps"]),
                    is_boundary=_parse_bool(row["is_boundary"], where),
                )
            except (TypeError, KeyError, ValueError) as exc:
                if isinstance(exc, SchemaError):
                    raise
                raise SchemaError(f"{where}: {exc}") from exc
            index[ext] = seg.id
            segments.append(seg)
            externals.append(ext)
    edges: list[tuple[int, int]] = []
    with open(edge_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != _EDGE_FIELDS:
            raise SchemaError(f"{edge_path}: header must be {','.join(_EDGE_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{edge_path} line {lineno}"
            u, v = row["from_id"].strip(), row["to_id"].strip()
            if u not in index or v not in index:
                raise SchemaError(f"{where}: unknown segment id in ({u!r}, {v!r})")
            edges.append((index[u], index[v]))
    return RoadNetwork(tuple(segments), tuple(edges), tuple(externals))


def save_network(net: RoadNetwork, path) -> None:
    """Write segments.csv and edges.csv under path (canonical order)."""
    import os

    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "segments.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_SEGMENT_FIELDS)
        for seg, ext in zip(net.segments, net.external_ids):
            w.writerow(
                [
                    ext,
                    _fmt(seg.length_m),
                    seg.lanes,
                    _fmt(seg.capacity_vph),
                    _fmt(seg.free_flow_mps),
                    int(seg.is_boundary),
                ]
            )
    with open(os.path.join(path, "edges.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_EDGE_FIELDS)
        for i, j in net.edges:
            w.writerow([net.external_ids[i], net.external_ids[j]])


def _fmt(x: float) -> str:
    # repr round-trips; integral values written without the trailing .0
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def load_counts(path, bin_seconds: int | None = None) -> CountMatrix:
    """Read a count matrix CSV: header of ISO-8601 bin starts, one row per segment.

    Empty cells become NaN. Bin width is inferred from the first two
    header timestamps unless there is a single bin, in which case
    bin_seconds must be given.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if not header or header[0] != "segment_id":
            raise SchemaError(f"{path}: first header cell must be 'segment_id'")
        try:
            stamps = [_dt.datetime.fromisoformat(h) for h in header[1:]]
        except ValueError as exc:
            raise SchemaError(f"{path}: bad ISO-8601 header: {exc}") from exc
        if not stamps:
            raise SchemaError(f"{path}: no time bins")
        if len(stamps) >= 2:
            step = int((stamps[1] - stamps[0]).total_seconds())
            for k in range(1, len(stamps) - 1):
                if int((stamps[k + 1] - stamps[k]).total_seconds()) != step:
                    raise SchemaError(f"{path}: non-uniform bin width at column {k + 2}")
        elif bin_seconds is None:
            raise SchemaError(f"{path}: single bin; pass bin_seconds")
        else:
            step = bin_seconds
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"{path} line {lineno}: expected {len(header)} cells")
            vals = [float(c) if c.strip() != "" else np.nan for c in row[1:]]
            rows.append(vals)
    return CountMatrix(np.array(rows, dtype=float), step, stamps[0])


def save_counts(cm: CountMatrix, path) -> None:
    """Write a CountMatrix in the CSV layout load_counts reads."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id"] + [cm.bin_start(t).isoformat() for t in range(cm.n_bins)])
        for i in range(cm.values.shape[0]):
            w.writerow([i] + ["" if not np.isfinite(v) else _fmt(v) for v in cm.values[i]])


def boundary_segments(net: RoadNetwork) -> list[int]:
    """Segments where traffic may enter or leave the network.

    If any segment carries an explicit is_boundary flag the flagged set is
    returned verbatim; otherwise the degree rule applies: segments with an
    empty upstream or empty downstream set. A closed ring with no flags
    therefore has no boundary.
    """
    flagged = [s.id for s in net.segments if s.is_boundary]
    if flagged:
        return flagged
    return [
        s.id
        for s in net.segments
        if not net.upstream[s.id] or not net.downstream[s.id]
    ]


def max_storage(seg: Segment, bin_seconds: float) -> float:
    """Capacity of one segment over one bin, Q_max = C * dt, in vehicles."""
    if bin_seconds <= 0:
        raise ValueError("bin_seconds must be > 0")
    return seg.capacity_vph / 3600.0 * bin_seconds
