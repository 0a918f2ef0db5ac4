"""ROI time series, parcellations and individual brain functional networks.

File formats
------------
ROI series (one scan per file, UTF-8, comma-delimited)::

    #scan_id=s001_a,subject_id=s001,label=1,n_roi=4,n_time=10
    <N lines of T floats>

Parcellation: one ``roi_index,subnet_name`` line per ROI. An optional
``roi_index,subnet_name`` header and ``#`` comment lines are ignored. Subnet
indices follow the order in which names first appear by ascending ROI index.
"""
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, InputIOError, ParseError, ValidationError

SUBNET_NAMES_7 = ("VIS", "SM", "DAN", "VAN", "LIM", "FP", "DMN")
DEFAULT_PARCELLATION = "schaefer100_7net.csv"
_HEADER_KEYS = ("scan_id", "subject_id", "label", "n_roi", "n_time")


@dataclass
class RoiTimeSeries:
    scan_id: str
    subject_id: str
    label: int
    series: np.ndarray  # (N, T), rows are ROIs

    def __post_init__(self):
        self.series = np.ascontiguousarray(self.series, dtype=np.float64)

    @property
    def n_roi(self):
        return self.series.shape[0]

    @property
    def n_time(self):
        return self.series.shape[1]

    def validate(self):
        if self.series.ndim != 2:
            raise ValidationError(f"{self.scan_id}: series must be 2-D, got {self.series.shape}")
        n, t = self.series.shape
        if n < 2 or t < 3:
            raise ValidationError(f"{self.scan_id}: need N >= 2 ROIs and T >= 3 points, got {n}x{t}")
        if self.label not in (0, 1):
            raise ValidationError(f"{self.scan_id}: label must be 0 or 1, got {self.label!r}")
        if not np.all(np.isfinite(self.series)):
            raise ValidationError(f"{self.scan_id}: series contains non-finite values")
        flat = np.flatnonzero(np.ptp(self.series, axis=1) == 0)
        if flat.size:
            raise ValidationError(f"{self.scan_id}: ROI {int(flat[0])} has zero variance")
        return self


@dataclass(frozen=True)
class Parcellation:
    assignment: np.ndarray  # (N,) subnet index per ROI
    subnet_names: tuple = field(default=SUBNET_NAMES_7)

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "subnet_names", tuple(self.subnet_names))
        s = len(self.subnet_names)
        if len(set(self.subnet_names)) != s:
            raise ValidationError(f"subnet names are not unique: {self.subnet_names}")
        if a.ndim != 1 or a.size == 0:
            raise ValidationError("parcellation needs at least one ROI")
        bad = np.flatnonzero((a < 0) | (a >= s))
        if bad.size:
            raise ValidationError(f"ROI {int(bad[0])} assigned to unknown subnet {int(a[bad[0]])}")
        sizes = np.bincount(a, minlength=s)
        empty = np.flatnonzero(sizes == 0)
        if empty.size:
            raise ValidationError(f"subnet {self.subnet_names[empty[0]]} has no ROIs")

    @property
    def roi_count(self):
        return int(self.assignment.size)

    @property
    def subnet_count(self):
        return len(self.subnet_names)

    def members(self, subnet):
        return np.flatnonzero(self.assignment == subnet)

    def sizes(self):
        return np.bincount(self.assignment, minlength=self.subnet_count)

    def subnet_index(self, name_or_index):
        if isinstance(name_or_index, (int, np.integer)):
            if not 0 <= name_or_index < self.subnet_count:
                raise ConfigError(f"unknown subnet index {name_or_index}")
            return int(name_or_index)
        try:
            return self.subnet_names.index(str(name_or_index).strip())
        except ValueError:
            raise ConfigError(f"unknown subnet name {name_or_index!r}") from None

    @classmethod
    def uniform(cls, rois_per_subnet, names=SUBNET_NAMES_7):
        """Contiguous blocks of ``rois_per_subnet`` ROIs, one block per subnet."""
        return cls(np.repeat(np.arange(len(names)), rois_per_subnet), tuple(names))


@dataclass
class BrainGraph:
    adjacency: np.ndarray  # (N, N) Pearson FC
    features: np.ndarray  # (N, T)
    scan_id: str
    subject_id: str
    label: int

    @property
    def n_roi(self):
        return self.adjacency.shape[0]


# ---------------------------------------------------------------- parcellation IO


def load_parcellation(path=None):
    """Read a ``roi_index,subnet_name`` table; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("slmil.data").joinpath(DEFAULT_PARCELLATION).read_text("utf-8")
        source = DEFAULT_PARCELLATION
    else:
        source = Path(path)
        try:
            text = source.read_text("utf-8")
        except OSError as exc:
            raise InputIOError(f"cannot read parcellation {source}: {exc}") from exc
    rows = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#") or line.lower().startswith("roi_index"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or not parts[1]:
            raise ParseError("expected 'roi_index,subnet_name'", source, lineno)
        try:
            idx = int(parts[0])
        except ValueError:
            raise ParseError(f"bad ROI index {parts[0]!r}", source, lineno, 1) from None
        if idx < 0:
            raise ParseError(f"negative ROI index {idx}", source, lineno, 1)
        if idx in rows:
            raise ValidationError(f"{source}: duplicate ROI index {idx}")
        rows[idx] = parts[1]
    if not rows:
        raise ValidationError(f"{source}: no ROIs listed")
    n = max(rows) + 1
    missing = [i for i in range(n) if i not in rows]
    if missing:
        raise ValidationError(f"{source}: ROI {missing[0]} is not assigned to a subnet")
    names = []
    for i in range(n):
        if rows[i] not in names:
            names.append(rows[i])
    assignment = np.array([names.index(rows[i]) for i in range(n)])
    return Parcellation(assignment, tuple(names))


def write_parcellation(path, parc):
    lines = ["roi_index,subnet_name"]
    lines += [f"{i},{parc.subnet_names[s]}" for i, s in enumerate(parc.assignment)]
    _write_text(Path(path), "\n".join(lines) + "\n")


# ---------------------------------------------------------------- series IO


def _write_text(path, text):
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot write {path}: {exc}") from exc


def format_roi_series(ts):
    n, t = ts.series.shape
    head = (f"#scan_id={ts.scan_id},subject_id={ts.subject_id},label={int(ts.label)},"
            f"n_roi={n},n_time={t}")
    # repr() is the shortest string that round-trips a float64 exactly
    body = "\n".join(",".join(repr(float(v)) for v in row) for row in ts.series)
    return head + "\n" + body + "\n"


def write_roi_series(path, ts):
    _write_text(Path(path), format_roi_series(ts))


def _parse_header(line, path):
    if not line.startswith("#"):
        raise ParseError("missing '#scan_id=...' header", path, 1)
    fields = {}
    for item in line[1:].strip().split(","):
        key, sep, value = item.partition("=")
        if not sep:
            raise ParseError(f"malformed header item {item!r}", path, 1)
        fields[key.strip()] = value.strip()
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise ParseError(f"header lacks {', '.join(missing)}", path, 1)
    try:
        label = int(fields["label"])
        n, t = int(fields["n_roi"]), int(fields["n_time"])
    except ValueError:
        raise ParseError("label, n_roi and n_time must be integers", path, 1) from None
    return fields["scan_id"], fields["subject_id"], label, n, t


def parse_roi_series(text, path="<string>"):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("empty file", path)
    scan_id, subject_id, label, n, t = _parse_header(lines[0].strip(), path)
    body = lines[1:]
    if len(body) != n:
        raise ParseError(f"header declares {n} ROI rows, found {len(body)}", path)
    series = np.empty((n, t))
    for r, line in enumerate(body):
        cells = line.split(",")
        if len(cells) != t:
            raise ParseError(f"expected {t} values, found {len(cells)}", path, r + 2)
        for c, cell in enumerate(cells):
            try:
                series[r, c] = float(cell)
            except ValueError:
                raise ParseError(f"malformed number {cell.strip()!r}", path, r + 2, c + 1) from None
    ts = RoiTimeSeries(scan_id, subject_id, label, series)
    try:
        ts.validate()
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return ts


def load_roi_series(path, n_roi=None):
    """Load one series file, or every ``*.csv`` in a directory (sorted by name).

    ``n_roi`` optionally pins the expected ROI count.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
    elif path.exists():
        files = [path]
    else:
        raise InputIOError(f"no such file or directory: {path}")
    out = []
    for f in files:
        try:
            text = f.read_text("utf-8")
        except OSError as exc:
            raise InputIOError(f"cannot read {f}: {exc}") from exc
        ts = parse_roi_series(text, f)
        if n_roi is not None and ts.n_roi != n_roi:
            raise ValidationError(f"{f}: expected {n_roi} ROIs, found {ts.n_roi}")
        out.append(ts)
    return out


# ---------------------------------------------------------------- BFN


def pearson_fc(series):
    """Pearson correlation between every pair of ROI rows."""
    x = series.series if isinstance(series, RoiTimeSeries) else np.asarray(series, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValidationError(f"pearson_fc needs an N x T matrix with T >= 2, got {x.shape}")
    const = np.flatnonzero(np.ptp(x, axis=1) == 0)
    if const.size:
        raise ValidationError(f"correlation undefined: ROI {int(const[0])} has zero variance")
    return kernels.pearson_fc(x)


def build_brain_graph(series, parc):
    if series.n_roi != parc.roi_count:
        raise ConfigError(
            f"{series.scan_id}: series has {series.n_roi} ROIs, parcellation has {parc.roi_count}")
    return BrainGraph(pearson_fc(series), series.series.copy(), series.scan_id,
                      series.subject_id, int(series.label))
