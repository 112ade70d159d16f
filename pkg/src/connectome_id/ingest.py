"""Numeric artifacts on disk, synthetic cohorts and simulated scanner noise.

Two matrix formats are supported:

``csv``
    Comma separated, ``.`` as decimal mark, one matrix row per line, no header
    unless ``header=True``. Values are written with 17 significant digits so a
    round trip reproduces every float64 exactly.

``binary``
    Little-endian. Header is the magic ``b"CNID"``, a ``u16`` version (1), then
    ``u64`` row and column counts; the payload is the matrix in row-major order
    as 64-bit floats.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError, IoError

MAGIC = b"CNID"
VERSION = 1
_HEADER = struct.Struct("<4sHQQ")

DEFAULT_TR = 0.72
TASK_NAMES = ("wm", "gambling", "motor", "language", "social", "relational", "emotion")

# SeedSequence spawn-key tags, one stream per kind of random draw
_SIGNATURE, _CONDITION, _SESSION, _ORDER, _NOISE = range(5)


@dataclass(frozen=True)
class TimeSeriesMatrix:
    """Denoised signal, rows are regions (or voxels) and columns time points."""

    values: np.ndarray
    tr_seconds: float = DEFAULT_TR
    row_kind: str = "region"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise FormatError(f"time series must be 2-D, got shape {values.shape}")
        if values.shape[0] < 2 or values.shape[1] < 3:
            raise FormatError(
                f"time series needs >= 2 rows and >= 3 columns, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise FormatError("time series contains non-finite entries")
        if not self.tr_seconds > 0:
            raise DomainError(f"tr_seconds must be positive, got {self.tr_seconds}")
        if self.row_kind not in ("voxel", "region"):
            raise FormatError(f"row_kind must be 'voxel' or 'region', got {self.row_kind!r}")
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.values.shape[1]

    def with_values(self, values, row_kind=None) -> "TimeSeriesMatrix":
        return TimeSeriesMatrix(values, self.tr_seconds, row_kind or self.row_kind)


@dataclass(frozen=True)
class AtlasLabeling:
    """One integer region label (1-based) per voxel row."""

    labels: np.ndarray
    region_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size == 0:
            raise FormatError("atlas labels must be a non-empty 1-D vector")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise FormatError("atlas labels must be integers")
            labels = labels.astype(np.int64)
        if self.region_count < 1:
            raise FormatError("region_count must be positive")
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic cohort generator.

    Each scan is ``signature_strength * L_subject @ F + strength_c * L_c @ G +
    noise_sigma * E`` where ``L_subject`` (regions x ``n_factors``) is drawn
    once per subject, ``L_c`` once per condition (rest is condition 0) and the
    factor series ``F``, ``G`` and noise ``E`` afresh for every session. The
    stacked factor series are whitened (zero mean, identity sample covariance).

    ``condition_strengths`` overrides ``task_strength`` per condition, rest
    first. ``signature_regions`` restricts the subject loading to the first
    that many regions (``None`` means all regions carry it).
    """

    n_subjects: int
    n_regions: int
    n_timepoints: int
    n_tasks: int = 0
    signature_strength: float = 1.0
    task_strength: float = 1.0
    noise_sigma: float = 1.0
    seed: int = 0
    n_factors: int = 5
    tr_seconds: float = DEFAULT_TR
    condition_strengths: tuple | None = None
    signature_regions: int | None = None
    shuffle_targets: bool = True

    def __post_init__(self):
        if self.condition_strengths is not None:
            object.__setattr__(self, "condition_strengths", tuple(self.condition_strengths))
        self.validate()

    def validate(self):
        ints = {
            "n_subjects": self.n_subjects,
            "n_regions": self.n_regions,
            "n_timepoints": self.n_timepoints,
            "n_factors": self.n_factors,
        }
        for name, value in ints.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        if self.n_regions < 4:
            raise ConfigError(f"n_regions must be >= 4, got {self.n_regions}")
        if self.n_timepoints < 16:
            raise ConfigError(f"n_timepoints must be >= 16, got {self.n_timepoints}")
        if self.n_timepoints <= 2 * self.n_factors + 1:
            raise ConfigError("n_timepoints must exceed 2 * n_factors + 1 for whitened factors")
        if self.n_tasks < 0 or int(self.n_tasks) != self.n_tasks:
            raise ConfigError(f"n_tasks must be a non-negative integer, got {self.n_tasks}")
        if self.signature_strength < 0 or self.task_strength < 0:
            raise ConfigError("signature_strength and task_strength must be >= 0")
        if not self.noise_sigma > 0:
            raise ConfigError(f"noise_sigma must be > 0, got {self.noise_sigma}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.tr_seconds <= 0:
            raise ConfigError("tr_seconds must be positive")
        if self.condition_strengths is not None:
            if len(self.condition_strengths) != self.n_tasks + 1:
                raise ConfigError(
                    f"condition_strengths needs {self.n_tasks + 1} entries (rest first)"
                )
            if min(self.condition_strengths) < 0:
                raise ConfigError("condition_strengths must be >= 0")
        if self.signature_regions is not None and not 1 <= self.signature_regions <= self.n_regions:
            raise ConfigError("signature_regions must lie in [1, n_regions]")

    @property
    def condition_names(self) -> list[str]:
        return ["rest"] + task_names(self.n_tasks)

    def strengths(self) -> tuple:
        if self.condition_strengths is not None:
            return self.condition_strengths
        return (self.task_strength,) * (self.n_tasks + 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown SynthConfig fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def task_names(n_tasks: int) -> list[str]:
    if n_tasks <= len(TASK_NAMES):
        return list(TASK_NAMES[:n_tasks])
    return [f"task{k + 1:02d}" for k in range(n_tasks)]


@dataclass
class Cohort:
    """Two-session scan collection with the ground-truth session pairing.

    Session 1 is the de-anonymized reference, ordered like ``subjects``.
    Session 2 is the anonymous target, ordered like ``target_order``;
    ``truth[i]`` is the position in ``target_order`` of ``subjects[i]``.
    """

    subjects: list
    tasks: list
    sessions: dict
    target_order: list
    tr_seconds: float = DEFAULT_TR
    performance: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)

    def __post_init__(self):
        if sorted(self.target_order) != sorted(self.subjects):
            raise FormatError("target_order must be a permutation of subjects")
        shapes = {ts.shape[0] for ts in self.sessions.values()}
        trs = {ts.tr_seconds for ts in self.sessions.values()}
        if len(shapes) > 1:
            raise FormatError(f"cohort mixes region counts {sorted(shapes)}")
        if len(trs) > 1:
            raise FormatError(f"cohort mixes sampling intervals {sorted(trs)}")

    @property
    def truth(self) -> dict:
        position = {s: k for k, s in enumerate(self.target_order)}
        return {i: position[s] for i, s in enumerate(self.subjects)}

    def truth_array(self, subjects=None) -> np.ndarray:
        """Truth as an index array, optionally restricted to a subject subset.

        For a subset, both sides are re-indexed to the subset: reference order
        follows ``subjects`` and target order follows ``target_order``.
        """
        subjects = list(self.subjects if subjects is None else subjects)
        order = self.session_order(2, subjects)
        position = {s: k for k, s in enumerate(order)}
        return np.array([position[s] for s in subjects], dtype=np.int64)

    def session_order(self, session: int, subjects=None) -> list:
        keep = set(self.subjects if subjects is None else subjects)
        if session == 1:
            return [s for s in (self.subjects if subjects is None else subjects) if s in keep]
        return [s for s in self.target_order if s in keep]

    def scans(self, session: int, task: str, subjects=None) -> list:
        """Time series for one session and task, in that session's order."""
        order = self.session_order(session, subjects)
        try:
            return [self.sessions[(s, session, task)] for s in order]
        except KeyError as exc:
            raise FormatError(f"cohort has no scan {exc.args[0]}") from None

    @property
    def n_regions(self) -> int:
        return next(iter(self.sessions.values())).n_rows

    def with_sessions(self, sessions: dict) -> "Cohort":
        return Cohort(
            list(self.subjects), list(self.tasks), sessions, list(self.target_order),
            self.tr_seconds, dict(self.performance), dict(self.groups),
        )


# ---------------------------------------------------------------------------
# matrix files


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "binary"):
            raise FormatError(f"unknown matrix format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith((".csv", ".txt")) else "binary"


def load_matrix(path, format=None, header=False) -> np.ndarray:
    """Read a finite, non-empty 2-D float64 matrix from ``path``."""
    fmt = _infer_format(path, format)
    try:
        if fmt == "csv":
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
        else:
            with open(path, "rb") as fh:
                raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    m = _parse_csv(rows, header) if fmt == "csv" else _parse_binary(raw)
    if m.size == 0:
        raise FormatError(f"{path}: empty matrix")
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{path}: non-finite entries")
    return m


def _parse_csv(rows, header):
    if header:
        rows = rows[1:]
    rows = [r for r in rows if r]
    if not rows:
        return np.empty((0, 0))
    width = len(rows[0])
    values = []
    for lineno, row in enumerate(rows, start=2 if header else 1):
        if len(row) != width:
            raise FormatError(f"ragged CSV: line {lineno} has {len(row)} cells, expected {width}")
        try:
            values.append([float(cell) for cell in row])
        except ValueError:
            raise FormatError(f"non-numeric cell on line {lineno}") from None
    return np.array(values, dtype=np.float64)


def _parse_binary(raw):
    if len(raw) < _HEADER.size:
        raise FormatError("binary matrix shorter than its header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported binary version {version}")
    expected = _HEADER.size + 8 * rows * cols
    if len(raw) != expected:
        raise FormatError(f"binary payload size {len(raw)} does not match {rows}x{cols}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def save_matrix(m, path, format=None, header=None) -> None:
    """Write a finite matrix. ``header`` is an optional list of column names (CSV only)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2 or m.size == 0:
        raise FormatError(f"cannot save matrix of shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FormatError("cannot save non-finite entries")
    fmt = _infer_format(path, format)
    try:
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                if header is not None:
                    writer.writerow(header)
                for row in m:
                    writer.writerow([format_float(v) for v in row])
        else:
            with open(path, "wb") as fh:
                fh.write(_HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1]))
                fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def format_float(v) -> str:
    return "%.17g" % v


def load_time_series(path, format=None, tr_seconds=DEFAULT_TR, row_kind="region", header=False):
    """Load a time-series matrix, enforcing the >= 2 rows / >= 3 columns shape."""
    return TimeSeriesMatrix(load_matrix(path, format, header), tr_seconds, row_kind)


# ---------------------------------------------------------------------------
# cohort manifests


def save_cohort(cohort: Cohort, directory, format="binary") -> Path:
    """Write every scan plus a ``manifest.json`` describing the cohort."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = "csv" if format == "csv" else "cnid"
    scans = []
    for (subject, session, task), ts in sorted(cohort.sessions.items()):
        name = f"{subject}_ses-{session}_{task}.{ext}"
        save_matrix(ts.values, directory / name, format)
        entry = {"subject": subject, "session": session, "task": task, "path": name, "format": format}
        if (subject, task) in cohort.performance and session == 1:
            entry["performance"] = cohort.performance[(subject, task)]
        scans.append(entry)
    manifest = {
        "version": 1,
        "tr_seconds": cohort.tr_seconds,
        "subjects": list(cohort.subjects),
        "tasks": list(cohort.tasks),
        "target_order": list(cohort.target_order),
        "groups": dict(cohort.groups),
        "scans": scans,
    }
    path = directory / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_cohort(manifest_path) -> Cohort:
    """Load a cohort from a manifest; scan paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if "scans" not in manifest:
        raise FormatError(f"{manifest_path}: manifest lists no scans")
    tr = float(manifest.get("tr_seconds", DEFAULT_TR))
    base = manifest_path.parent
    sessions, performance = {}, {}
    subjects, tasks = [], []
    for entry in manifest["scans"]:
        try:
            subject, session, task = str(entry["subject"]), int(entry["session"]), str(entry["task"])
            path = base / entry["path"]
        except KeyError as exc:
            raise FormatError(f"manifest scan entry lacks {exc.args[0]!r}") from None
        if session not in (1, 2):
            raise FormatError(f"session must be 1 or 2, got {session}")
        sessions[(subject, session, task)] = load_time_series(
            path, entry.get("format"), tr, entry.get("row_kind", "region"), entry.get("header", False)
        )
        if "performance" in entry and entry["performance"] is not None:
            score = float(entry["performance"])
            if not 0 <= score <= 100:
                raise FormatError(f"performance {score} outside [0, 100]")
            performance[(subject, task)] = score
        if subject not in subjects:
            subjects.append(subject)
        if task not in tasks:
            tasks.append(task)
    subjects = [str(s) for s in manifest.get("subjects", subjects)]
    tasks = [str(t) for t in manifest.get("tasks", tasks)]
    target_order = [str(s) for s in manifest.get("target_order", subjects)]
    return Cohort(subjects, tasks, sessions, target_order, tr, performance,
                  dict(manifest.get("groups", {})))


# ---------------------------------------------------------------------------
# synthetic data


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _whitened(z):
    """Rows with zero mean and identity sample covariance (1/T), split in halves.

    Whitening makes the latent covariance of every session exactly ``L L^T``,
    so sessions differ only through ``noise_sigma``.
    """
    T = z.shape[1]
    q, _ = np.linalg.qr((z - z.mean(axis=1, keepdims=True)).T)
    w = np.sqrt(T) * q.T
    half = z.shape[0] // 2
    return w[:half], w[half:]


def generate_synthetic_cohort(cfg: SynthConfig) -> Cohort:
    """Generate a two-session cohort whose subjects carry a covariance signature.

    Every random draw comes from its own stream keyed by (kind, subject,
    condition, session), so the result depends only on ``cfg``.
    """
    cfg.validate()
    R, T, k = cfg.n_regions, cfg.n_timepoints, cfg.n_factors
    names = cfg.condition_names
    strengths = cfg.strengths()
    subjects = [f"sub-{i:03d}" for i in range(cfg.n_subjects)]

    mask = np.ones((R, 1))
    if cfg.signature_regions is not None:
        mask[cfg.signature_regions:] = 0.0
    condition_loadings = [_rng(cfg.seed, _CONDITION, c).standard_normal((R, k)) for c in range(len(names))]

    sessions = {}
    for i, subject in enumerate(subjects):
        signature = _rng(cfg.seed, _SIGNATURE, i).standard_normal((R, k)) * mask
        for c, task in enumerate(names):
            for session in (1, 2):
                rng = _rng(cfg.seed, _SESSION, i, c, session)
                factors, shared = _whitened(rng.standard_normal((2 * k, T)))
                noise = rng.standard_normal((R, T))
                values = (
                    cfg.signature_strength * (signature @ factors)
                    + strengths[c] * (condition_loadings[c] @ shared)
                    + cfg.noise_sigma * noise
                )
                sessions[(subject, session, task)] = TimeSeriesMatrix(values, cfg.tr_seconds, "region")

    target_order = list(subjects)
    if cfg.shuffle_targets:
        perm = _rng(cfg.seed, _ORDER).permutation(cfg.n_subjects)
        target_order = [subjects[p] for p in perm]
    return Cohort(subjects, names, sessions, target_order, cfg.tr_seconds)


def inject_scanner_noise(ts: TimeSeriesMatrix, variance_fraction: float, seed) -> TimeSeriesMatrix:
    """Add Gaussian noise with the row's mean and a fraction of the row's variance.

    The standard-normal draws depend only on ``seed`` and the shape, so calls
    that differ only in ``variance_fraction`` share the same noise pattern.
    """
    if not 0 < variance_fraction < 1:
        raise DomainError(f"variance_fraction must lie in (0, 1), got {variance_fraction}")
    x = ts.values
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    flat = np.flatnonzero(var[:, 0] == 0)
    if flat.size:
        raise DomainError(f"rows with zero variance cannot be noised: {flat.tolist()}")
    z = _rng(int(seed), _NOISE).standard_normal(x.shape)
    return ts.with_values(x + mean + np.sqrt(variance_fraction * var) * z)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
