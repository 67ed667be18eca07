"""On-disk formats connecting exporters, the probe, selection, and reports.

Four artifact kinds live here:

* binary probe traces (one checkpoint's head weights, detached features,
  and targets, little-endian, magic ``HGP1``),
* run manifests (JSON index of a run's trace files),
* series tables (CSV of per-checkpoint readouts),
* analysis reports (JSON) and scatter plots (SVG).

Every format round-trips byte-identically: write -> read -> write yields
the same bytes.  Writers never emit timestamps or machine-local state.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from gradprobe._version import __version__
from gradprobe.probe import CLASSIFICATION, REGRESSION, ProbeBatch
from gradprobe.stats import PairedSample

TOOL_NAME = "gradprobe"

TRACE_MAGIC = b"HGP1"
TRACE_VERSION = 1
DTYPE_F32 = 0
MODE_CODES = {CLASSIFICATION: 0, REGRESSION: 1}
MODE_NAMES = {0: CLASSIFICATION, 1: REGRESSION}

# magic, version, mode, dtype, C, d, B, step, metric, aux_loss
_HEADER = struct.Struct("<4sHBBIIIQdd")

SERIES_BASE_COLUMNS = ("step", "score", "metric", "aux_loss")

# optional per-checkpoint readout columns, in canonical order
READOUT_COLUMNS = (
    "grad_fro",
    "grad_l1",
    "grad_linf",
    "score_z",
    "score_w",
    "fisher_trace",
    "confidence",
    "entropy",
    "margin",
    "loss",
)


class TraceFormatError(ValueError):
    """Malformed binary trace; `code` identifies the failure class."""

    code = "format"


class BadMagicError(TraceFormatError):
    code = "bad-magic"


class BadVersionError(TraceFormatError):
    code = "bad-version"


class BadDtypeError(TraceFormatError):
    code = "bad-dtype"


class TruncatedTraceError(TraceFormatError):
    code = "truncated"


class TrailingBytesError(TraceFormatError):
    code = "trailing-bytes"


class LabelRangeError(TraceFormatError):
    code = "label-range"


class ManifestError(ValueError):
    """Malformed or inconsistent run manifest."""


class SeriesFormatError(ValueError):
    """Malformed series CSV; messages carry the offending line number."""


@dataclass
class ProbeTraceFile:
    """One checkpoint's probe inputs plus trace metadata.

    `run_id` travels in the manifest, not in the binary layout; a trace
    read from disk carries run_id None until a manifest attaches one.
    """

    batch: ProbeBatch
    step: int
    metric: Optional[float] = None
    aux_loss: Optional[float] = None
    run_id: Optional[str] = None

    def __post_init__(self):
        if not 0 <= int(self.step) < 2**64:
            raise ValueError(f"step must fit in u64, got {self.step}")
        self.step = int(self.step)
        for name in ("metric", "aux_loss"):
            v = getattr(self, name)
            if v is not None:
                v = float(v)
                if not math.isfinite(v):
                    raise ValueError(f"{name} must be finite or None, got {v}")
                setattr(self, name, v)

    @property
    def mode(self) -> str:
        return self.batch.mode


def _payload_f4(name: str, values: np.ndarray) -> bytes:
    with np.errstate(over="ignore"):
        cast = np.ascontiguousarray(values, dtype="<f4")
    if not np.isfinite(cast).all():
        raise ValueError(f"{name} contain values outside the f32 storage range")
    return cast.tobytes()


def trace_to_bytes(trace: ProbeTraceFile) -> bytes:
    batch = trace.batch
    c = batch.n_outputs
    d = batch.feature_dim
    b = batch.batch_size
    header = _HEADER.pack(
        TRACE_MAGIC,
        TRACE_VERSION,
        MODE_CODES[batch.mode],
        DTYPE_F32,
        c,
        d,
        b,
        trace.step,
        math.nan if trace.metric is None else trace.metric,
        math.nan if trace.aux_loss is None else trace.aux_loss,
    )
    parts = [
        header,
        _payload_f4("head weights", batch.head_weights),
        _payload_f4("features", batch.features),
    ]
    if batch.mode == CLASSIFICATION:
        parts.append(np.ascontiguousarray(batch.labels, dtype="<u4").tobytes())
    else:
        parts.append(_payload_f4("targets", batch.targets))
    return b"".join(parts)


def trace_from_bytes(data: bytes) -> ProbeTraceFile:
    if len(data) < _HEADER.size:
        raise TruncatedTraceError(
            f"file is {len(data)} bytes, shorter than the {_HEADER.size}-byte header"
        )
    magic, version, mode_code, dtype, c, d, b, step, metric, aux_loss = _HEADER.unpack_from(
        data, 0
    )
    if magic != TRACE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {TRACE_MAGIC!r}")
    if version != TRACE_VERSION:
        raise BadVersionError(f"unsupported version {version}, expected {TRACE_VERSION}")
    if dtype != DTYPE_F32:
        raise BadDtypeError(f"unsupported dtype code {dtype}, expected {DTYPE_F32} (f32)")
    if mode_code not in MODE_NAMES:
        raise TraceFormatError(f"unknown mode code {mode_code}")
    mode = MODE_NAMES[mode_code]
    target_bytes = 4 * b if mode == CLASSIFICATION else 4 * c * b
    expected = _HEADER.size + 4 * c * d + 4 * d * b + target_bytes
    if len(data) < expected:
        raise TruncatedTraceError(
            f"payload truncated: file is {len(data)} bytes, layout requires {expected}"
        )
    if len(data) > expected:
        raise TrailingBytesError(
            f"{len(data) - expected} trailing bytes after a {expected}-byte trace"
        )
    offset = _HEADER.size
    w = np.frombuffer(data, dtype="<f4", count=c * d, offset=offset).reshape(c, d)
    offset += 4 * c * d
    z = np.frombuffer(data, dtype="<f4", count=d * b, offset=offset).reshape(d, b)
    offset += 4 * d * b
    if mode == CLASSIFICATION:
        labels = np.frombuffer(data, dtype="<u4", count=b, offset=offset)
        bad = np.flatnonzero(labels >= c)
        if bad.size:
            i = int(bad[0])
            raise LabelRangeError(
                f"label {int(labels[i])} at position {i} out of range for {c} classes"
            )
        batch = ProbeBatch.classification(
            features=z, head_weights=w, labels=labels.astype(np.int64)
        )
    else:
        targets = np.frombuffer(data, dtype="<f4", count=c * b, offset=offset).reshape(c, b)
        batch = ProbeBatch.regression(features=z, head_weights=w, targets=targets)
    return ProbeTraceFile(
        batch=batch,
        step=step,
        metric=None if math.isnan(metric) else metric,
        aux_loss=None if math.isnan(aux_loss) else aux_loss,
    )


def write_trace(trace: ProbeTraceFile, path) -> None:
    with open(path, "wb") as fh:
        fh.write(trace_to_bytes(trace))


def read_trace(path) -> ProbeTraceFile:
    with open(path, "rb") as fh:
        return trace_from_bytes(fh.read())


@dataclass
class ManifestEntry:
    """Trace files recorded at one training step (several when a step is
    probed with repeated draws)."""

    step: int
    files: list

    def __post_init__(self):
        self.step = int(self.step)
        if self.step < 0:
            raise ManifestError(f"negative step {self.step}")
        if not self.files:
            raise ManifestError(f"step {self.step} lists no trace files")
        self.files = [str(f) for f in self.files]


@dataclass
class RunManifest:
    run_id: str
    task: str
    n_classes: int
    feature_dim: int
    batch_size: int
    entries: list
    higher_is_better: bool = True
    notes: str = ""

    def __post_init__(self):
        if self.task not in (CLASSIFICATION, REGRESSION):
            raise ManifestError(f"unknown task kind {self.task!r}")
        prev = None
        for e in self.entries:
            if prev is not None and e.step <= prev:
                raise ManifestError(
                    f"manifest steps must be strictly increasing: {e.step} after {prev}"
                )
            prev = e.step

    @property
    def steps(self) -> list:
        return [e.step for e in self.entries]

    def trace_paths(self, base_dir) -> list:
        """All trace paths, manifest order, resolved against base_dir."""
        return [os.path.join(base_dir, f) for e in self.entries for f in e.files]

    def as_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "task": self.task,
            "n_classes": self.n_classes,
            "feature_dim": self.feature_dim,
            "batch_size": self.batch_size,
            "higher_is_better": self.higher_is_better,
            "notes": self.notes,
            "entries": [{"step": e.step, "files": list(e.files)} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunManifest":
        try:
            entries = [
                ManifestEntry(step=e["step"], files=e["files"]) for e in doc["entries"]
            ]
            return cls(
                run_id=str(doc["run_id"]),
                task=str(doc["task"]),
                n_classes=int(doc["n_classes"]),
                feature_dim=int(doc["feature_dim"]),
                batch_size=int(doc["batch_size"]),
                entries=entries,
                higher_is_better=bool(doc.get("higher_is_better", True)),
                notes=str(doc.get("notes", "")),
            )
        except KeyError as exc:
            raise ManifestError(f"manifest missing field {exc.args[0]!r}") from exc


def write_manifest(manifest: RunManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.as_dict(), fh, indent=2)
        fh.write("\n")


def read_manifest(path, check_files: bool = True) -> RunManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    manifest = RunManifest.from_dict(doc)
    if check_files:
        base = os.path.dirname(os.path.abspath(path))
        missing = [p for p in manifest.trace_paths(base) if not os.path.isfile(p)]
        if missing:
            raise ManifestError(
                f"manifest lists {len(missing)} missing trace file(s): "
                + ", ".join(os.path.basename(m) for m in missing[:5])
            )
    return manifest


@dataclass
class SeriesTable:
    """Per-checkpoint readout rows with the fixed leading columns
    step,score,metric,aux_loss and optional named readout columns.

    Scores are required and finite; metric/aux/readout cells may be
    absent (None in memory, empty cell on disk)."""

    steps: list
    scores: list
    metrics: list = field(default_factory=list)
    aux_losses: list = field(default_factory=list)
    extra_columns: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.steps)
        if not self.metrics:
            self.metrics = [None] * n
        if not self.aux_losses:
            self.aux_losses = [None] * n
        for name, col in (
            ("scores", self.scores),
            ("metrics", self.metrics),
            ("aux_losses", self.aux_losses),
        ):
            if len(col) != n:
                raise SeriesFormatError(f"{name} column has {len(col)} rows, expected {n}")
        for name in self.extra_columns:
            if name in SERIES_BASE_COLUMNS:
                raise SeriesFormatError(f"readout column shadows base column {name!r}")
            if len(self.extras.get(name, ())) != n:
                raise SeriesFormatError(f"readout column {name!r} row count mismatch")
        prev = None
        for i, s in enumerate(self.steps):
            if prev is not None and s <= prev:
                raise SeriesFormatError(
                    f"steps must be strictly increasing: row {i + 1} has step {s} after {prev}"
                )
            prev = s
            if self.scores[i] is None or not math.isfinite(self.scores[i]):
                raise SeriesFormatError(f"row {i + 1} has a missing or non-finite score")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def header(self) -> list:
        return list(SERIES_BASE_COLUMNS) + list(self.extra_columns)

    def column(self, name: str) -> list:
        if name == "step":
            return list(self.steps)
        if name == "score":
            return list(self.scores)
        if name == "metric":
            return list(self.metrics)
        if name == "aux_loss":
            return list(self.aux_losses)
        if name in self.extras:
            return list(self.extras[name])
        raise KeyError(f"no column {name!r}")

    def to_trajectory(self, run_id: Optional[str] = None):
        from gradprobe.selection import TrajectorySeries

        return TrajectorySeries.from_columns(
            self.steps, self.scores, self.metrics, self.aux_losses, run_id=run_id
        )

    @classmethod
    def from_trajectory(cls, series) -> "SeriesTable":
        return cls(
            steps=[r.step for r in series.records],
            scores=[r.score for r in series.records],
            metrics=[r.metric for r in series.records],
            aux_losses=[r.aux_loss for r in series.records],
        )


def _cell(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def _parse_cell(text: str, line_no: int, column: str) -> Optional[float]:
    stripped = text.strip()
    if stripped == "" or stripped.lower() == "nan":
        return None
    try:
        v = float(stripped)
    except ValueError:
        raise SeriesFormatError(
            f"line {line_no}: malformed number {text!r} in column {column!r}"
        ) from None
    if not math.isfinite(v):
        raise SeriesFormatError(f"line {line_no}: non-finite value in column {column!r}")
    return v


def series_to_csv(table: SeriesTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.header)
    for i in range(len(table)):
        row = [
            str(int(table.steps[i])),
            _cell(table.scores[i]),
            _cell(table.metrics[i]),
            _cell(table.aux_losses[i]),
        ]
        row.extend(_cell(table.extras[name][i]) for name in table.extra_columns)
        writer.writerow(row)
    return buf.getvalue()


def series_from_csv(text: str) -> SeriesTable:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SeriesFormatError("empty series file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:4]) != SERIES_BASE_COLUMNS:
        raise SeriesFormatError(
            f"line 1: header must start with {','.join(SERIES_BASE_COLUMNS)}, "
            f"got {','.join(header[:4])}"
        )
    extra_columns = header[4:]
    steps: list = []
    scores: list = []
    metrics: list = []
    aux_losses: list = []
    extras: dict = {name: [] for name in extra_columns}
    for r, row in enumerate(rows[1:]):
        line_no = r + 2
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != len(header):
            raise SeriesFormatError(
                f"line {line_no}: {len(row)} cells, header has {len(header)}"
            )
        try:
            step = int(row[0].strip())
        except ValueError:
            raise SeriesFormatError(f"line {line_no}: malformed step {row[0]!r}") from None
        if steps and step <= steps[-1]:
            raise SeriesFormatError(
                f"line {line_no}: step {step} not greater than previous step {steps[-1]}"
            )
        score = _parse_cell(row[1], line_no, "score")
        if score is None:
            raise SeriesFormatError(f"line {line_no}: score cell is required")
        steps.append(step)
        scores.append(score)
        metrics.append(_parse_cell(row[2], line_no, "metric"))
        aux_losses.append(_parse_cell(row[3], line_no, "aux_loss"))
        for name, cell in zip(extra_columns, row[4:]):
            extras[name].append(_parse_cell(cell, line_no, name))
    if not steps:
        raise SeriesFormatError("series file has a header but no data rows")
    return SeriesTable(
        steps=steps,
        scores=scores,
        metrics=metrics,
        aux_losses=aux_losses,
        extra_columns=extra_columns,
        extras=extras,
    )


def write_series(table: SeriesTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(series_to_csv(table))


def read_series(path) -> SeriesTable:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return series_from_csv(fh.read())


def _jsonable(value):
    """Recursively convert to plain JSON types; non-finite floats -> None."""
    if value is None or isinstance(value, (bool, str, int)):
        return value
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if hasattr(value, "as_dict"):
        return _jsonable(value.as_dict())
    raise TypeError(f"cannot serialize {type(value).__name__} into a report")


def build_report(
    kind: str,
    results: dict,
    seed: Optional[int] = None,
    config: Optional[dict] = None,
) -> dict:
    """Assemble a report document with the standard provenance envelope."""
    return {
        "tool": TOOL_NAME,
        "version": __version__,
        "kind": kind,
        "seed": seed,
        "config": _jsonable(config) if config is not None else None,
        "results": _jsonable(results),
    }


def report_to_json(report: dict) -> str:
    return json.dumps(_jsonable(report), indent=2, allow_nan=False) + "\n"


def write_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report_to_json(report))


def read_report(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


@dataclass
class ScatterOptions:
    width: int = 640
    height: int = 480
    margin: int = 60
    log10_x: bool = False
    x_label: str = "score"
    y_label: str = "metric"
    title: str = ""
    lower_is_better_x: bool = False
    lower_is_better_y: bool = False
    point_radius: float = 3.5


def least_squares_fit(x: Sequence[float], y: Sequence[float]) -> tuple:
    """Slope and intercept of the least-squares line y = a*x + b."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2:
        raise ValueError("fit needs at least 2 points")
    dx = x - x.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0:
        raise ValueError("x has zero variance; the fit line is undefined")
    slope = float(dx @ (y - y.mean())) / sxx
    return slope, float(y.mean() - slope * x.mean())


def _axis_range(lo: float, hi: float) -> tuple:
    if lo == hi:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _px(v: float) -> str:
    return f"{v:.2f}"


def emit_scatter(sample: PairedSample, options: Optional[ScatterOptions] = None) -> str:
    """Deterministic SVG scatter of a paired sample with its fit line.

    With log10_x the fit runs in log10 of x (the x axis then shows the
    log-space coordinate); points carry their original data coordinates
    in data-x/data-y attributes and the fit line carries data-slope /
    data-intercept, so the drawing doubles as a machine-readable record.
    """
    opt = options or ScatterOptions()
    x_raw = sample.x
    y = sample.y
    if opt.log10_x:
        bad = np.flatnonzero(x_raw <= 0.0)
        if bad.size:
            listed = ", ".join(
                f"#{int(i)} (x={x_raw[int(i)]!r})" for i in bad[:5]
            )
            raise ValueError(f"log10 axis requires positive x; offending points: {listed}")
        x = np.log10(x_raw)
    else:
        x = x_raw
    slope, intercept = least_squares_fit(x, y)

    x0, x1 = _axis_range(float(x.min()), float(x.max()))
    y0, y1 = _axis_range(float(y.min()), float(y.max()))
    plot_w = opt.width - 2 * opt.margin
    plot_h = opt.height - 2 * opt.margin

    def sx(v: float) -> float:
        return opt.margin + (v - x0) / (x1 - x0) * plot_w

    def sy(v: float) -> float:
        return opt.height - opt.margin - (v - y0) / (y1 - y0) * plot_h

    x_label = opt.x_label
    if opt.log10_x:
        x_label = f"log10({x_label})"
    if opt.lower_is_better_x:
        x_label += "  (lower is better ←)"
    y_label = opt.y_label
    if opt.lower_is_better_y:
        y_label += "  (lower is better ↓)"

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{opt.width}" '
        f'height="{opt.height}" viewBox="0 0 {opt.width} {opt.height}">',
        f'<rect x="0" y="0" width="{opt.width}" height="{opt.height}" fill="white"/>',
        f'<rect x="{opt.margin}" y="{opt.margin}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#444" stroke-width="1"/>',
    ]
    if opt.title:
        lines.append(
            f'<text x="{opt.width // 2}" y="{opt.margin - 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{escape(opt.title)}</text>'
        )
    lines.append(
        f'<text x="{opt.width // 2}" y="{opt.height - opt.margin // 4}" '
        'text-anchor="middle" font-family="sans-serif" font-size="13">'
        f"{escape(x_label)}</text>"
    )
    lines.append(
        f'<text x="{opt.margin // 3}" y="{opt.height // 2}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 {opt.margin // 3} {opt.height // 2})">'
        f"{escape(y_label)}</text>"
    )
    # fit line across the full x range, clipped vertically to the plot box
    fy0 = slope * x0 + intercept
    fy1 = slope * x1 + intercept
    lines.append(
        f'<line x1="{_px(sx(x0))}" y1="{_px(sy(fy0))}" x2="{_px(sx(x1))}" '
        f'y2="{_px(sy(fy1))}" stroke="#c0392b" stroke-width="1.5" '
        f'data-slope="{repr(slope)}" data-intercept="{repr(intercept)}" '
        f'clip-path="url(#plot-area)"/>'
    )
    lines.insert(
        3,
        f'<clipPath id="plot-area"><rect x="{opt.margin}" y="{opt.margin}" '
        f'width="{plot_w}" height="{plot_h}"/></clipPath>',
    )
    for i in range(sample.n):
        lines.append(
            f'<circle cx="{_px(sx(float(x[i])))}" cy="{_px(sy(float(y[i])))}" '
            f'r="{opt.point_radius}" fill="#2c6fbb" fill-opacity="0.75" '
            f'data-x="{repr(float(x_raw[i]))}" data-y="{repr(float(y[i]))}"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_scatter(sample: PairedSample, path, options: Optional[ScatterOptions] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(emit_scatter(sample, options))
