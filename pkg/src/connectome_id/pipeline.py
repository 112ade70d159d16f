"""End-to-end experiments on synthetic or manifest-backed cohorts.

Every run writes its artifacts into one output directory together with
``run_manifest.json``, which records the experiment spec, the seeds, the
sha256 of every input file read and of every artifact written. Re-running
the same ExperimentSpec reproduces the artifacts byte for byte on the same machine.

Experiment kinds
----------------
rest_vs_rest      session-1 rest vs session-2 rest identification
cross_task_grid   identifiability matrix over all conditions
task_clustering   t-SNE of all session-1 scans, nearest-neighbor task labels
performance       leverage-selected regression of a behavioral score
case_control      identification in a cohort mixing two sub-populations
multisite         identification with simulated scanner noise on session 2
"""

from __future__ import annotations

import contextlib
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .connectome import group_from_time_series
from .errors import ConfigError, ConnectomeIdError, DomainError, IoError
from .ingest import (
    Cohort, SynthConfig, ensure_dir, file_sha256, format_float, generate_synthetic_cohort,
    inject_scanner_noise, load_cohort,
)
from .matcher import cross_similarity, identifiability_matrix, match_subjects
from .regress import plant_performance, random_performance, run_performance_experiment
from .sketch import principal_features, restrict_features, save_selection
from .tsne import TsneParams, nn_classify, tsne_embed

KINDS = ("rest_vs_rest", "cross_task_grid", "task_clustering", "performance", "case_control", "multisite")
MANIFEST_NAME = "run_manifest.json"

# Default cohorts, calibrated so each experiment shows its effect at desk scale.
PRESET_COHORTS = {
    "rest_vs_rest": dict(n_subjects=50, n_regions=60, n_timepoints=200),
    "cross_task_grid": dict(
        n_subjects=50, n_regions=60, n_timepoints=200, n_tasks=7, signature_strength=0.5,
        condition_strengths=(1.0, 3.0, 1.5, 3.0, 1.0, 1.5, 1.0, 1.5),
    ),
    "task_clustering": dict(n_subjects=40, n_regions=60, n_timepoints=200, n_tasks=7, task_strength=2.0),
    "performance": dict(n_subjects=100, n_regions=60, n_timepoints=200, n_tasks=7, signature_regions=15),
    "case_control": dict(n_subjects=50, n_regions=60, n_timepoints=200, signature_strength=0.35),
    "multisite": dict(n_subjects=50, n_regions=60, n_timepoints=200, signature_strength=0.27),
}

PRESET_T = {"performance": 30}

PRESET_PARAMS = {
    "rest_vs_rest": {"task": "rest"},
    "cross_task_grid": {},
    "task_clustering": {
        "perplexity": 30.0, "iterations": 1000, "learning_rate": 100.0,
        "labeled_fraction": 0.5, "kernel_distance": "sq",
    },
    "performance": {
        "tasks": ["language", "emotion", "relational", "wm"], "repeats": 100,
        "loss": "epsilon_insensitive", "regularization": 1e-2, "epsilon": 0.1,
        "train_fraction": 0.8, "normalizer": "range",
        "planted_features": 5, "planted_noise": 0.01, "null_model": False,
    },
    "case_control": {
        "case_overrides": {"task_strength": 2.0, "n_factors": 8},
        "splits": 10, "train_fraction": 0.8, "task": "rest", "degenerate": "abort",
    },
    "multisite": {"noise_fractions": [0.10, 0.20, 0.30], "task": "rest"},
}

REQUIRED_PARAMS = {"multisite": ("noise_fractions",), "performance": ("tasks",)}


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run, on which cohort, with which seeds, and where to write.

    Exactly one cohort source may be given: ``synth`` (SynthConfig fields,
    the seed is replaced by each run seed) or ``manifest`` (path to a cohort
    manifest). With neither, the kind's preset synthetic cohort is used.
    ``params`` overrides the kind's preset parameters key by key.
    """

    kind: str
    out_dir: str
    synth: dict | None = None
    manifest: str | None = None
    t: int | None = None
    seeds: tuple = (0,)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.synth is not None and self.manifest is not None:
            raise ConfigError("give either a synthetic config or a manifest, not both")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if self.t is not None and (int(self.t) != self.t or self.t < 1):
            raise ConfigError(f"t must be a positive integer, got {self.t}")
        unknown = set(self.params) - set(PRESET_PARAMS[self.kind])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = self.resolved_params()
        for name in REQUIRED_PARAMS.get(self.kind, ()):
            if not merged.get(name):
                raise ConfigError(f"{self.kind} requires a non-empty {name!r}")
        if self.kind == "multisite":
            for f in merged["noise_fractions"]:
                if not 0 < f < 1:
                    raise ConfigError(f"noise fractions must lie in (0, 1), got {f}")
        if self.synth is not None:
            self.synth_config(0)

    @property
    def top_features(self) -> int:
        return int(self.t) if self.t is not None else PRESET_T.get(self.kind, 100)

    def resolved_params(self) -> dict:
        return {**PRESET_PARAMS[self.kind], **self.params}

    def synth_config(self, seed: int, overrides=None) -> SynthConfig:
        base = dict(PRESET_COHORTS[self.kind] if self.synth is None else self.synth)
        base.update(overrides or {})
        base["seed"] = int(seed)
        return SynthConfig.from_dict(base)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "out_dir": str(self.out_dir), "synth": self.synth,
            "manifest": self.manifest, "t": self.top_features, "seeds": list(self.seeds),
            "params": self.resolved_params(),
        }

    @classmethod
    def from_dict(cls, data: dict, **overrides) -> "ExperimentSpec":
        data = {**data, **{k: v for k, v in overrides.items() if v is not None}}
        known = {"kind", "out_dir", "synth", "manifest", "t", "seeds", "params"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        if "kind" not in data or "out_dir" not in data:
            raise ConfigError("experiment config needs 'kind' and 'out_dir'")
        return cls(**data)


@dataclass
class RunResult:
    out_dir: Path
    files: list
    manifest_path: Path
    summary: dict


@contextlib.contextmanager
def stage(name: str):
    """Tag package errors raised inside the block with the stage name."""
    try:
        yield
    except ConnectomeIdError as exc:
        if exc.stage is None:
            exc.stage = name
        raise
    except OSError as exc:
        err = IoError(str(exc))
        err.stage = name
        raise err from exc


# ---------------------------------------------------------------------------
# artifact writers


def render_heatmap(m, path) -> Path:
    """Write ``m`` as a binary PGM (P5) grayscale image, one pixel per cell.

    Layout: ASCII header ``P5\\n<cols> <rows>\\n255\\n`` followed by one byte
    per cell in row-major order. Values are min-max scaled to 0..255 and
    rounded half to even; a constant matrix maps to 128.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DomainError(f"heatmap needs a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError("heatmap input must be finite")
    lo, hi = m.min(), m.max()
    if hi == lo:
        pixels = np.full(m.shape, 128, dtype=np.uint8)
    else:
        pixels = np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
            fh.write(pixels.tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write heatmap {path}: {exc}") from exc
    return path


_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def render_scatter_svg(y, labels, path, size=480, radius=3.0) -> Path:
    """Minimal SVG scatter plot of a 2-D embedding, one color per label."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] < 2:
        raise DomainError("scatter plot needs at least two embedding dimensions")
    classes = sorted(set(labels), key=str)
    color = {c: _PALETTE[k % len(_PALETTE)] for k, c in enumerate(classes)}
    lo, hi = y[:, :2].min(axis=0), y[:, :2].max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    pad = 10.0
    xy = pad + (y[:, :2] - lo) / span * (size - 2 * pad)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    for (px, py), lab in zip(xy, labels):
        lines.append(f'<circle cx="{px:.3f}" cy="{size - py:.3f}" r="{radius}" '
                     f'fill="{color[lab]}"><title>{lab}</title></circle>')
    for k, c in enumerate(classes):
        lines.append(f'<text x="{pad}" y="{pad + 12 * (k + 1)}" font-size="10" '
                     f'fill="{color[c]}">{c}</text>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return format_float(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_table(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return Path(path)


def write_labeled_matrix(path, m, row_ids, col_ids, corner="") -> Path:
    rows = [[r, *m[k]] for k, r in enumerate(row_ids)]
    return write_table(path, [corner, *col_ids], rows)


def _write_json(path, data) -> Path:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return Path(path)


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return list(v)
    raise TypeError(f"cannot serialize {type(v).__name__}")


# ---------------------------------------------------------------------------
# cohorts


class _Inputs:
    """Cohort provider that remembers every file it reads."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.files = {}
        self._loaded = None

    def cohort(self, seed: int) -> Cohort:
        if self.spec.manifest is None:
            return generate_synthetic_cohort(self.spec.synth_config(seed))
        if self._loaded is None:
            path = Path(self.spec.manifest)
            self._loaded = load_cohort(path)
            self.files[str(path)] = file_sha256(path)
            with open(path) as fh:
                entries = json.load(fh)["scans"]
            for entry in entries:
                scan = path.parent / entry["path"]
                self.files[str(scan)] = file_sha256(scan)
        return self._loaded


def _noise_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(31, k)).generate_state(1, np.uint64)[0])


def _split_seed(seed: int, tag: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(tag,))


def merge_cohorts(parts: dict) -> Cohort:
    """Union of cohorts with disjoint subject names; ``groups`` maps subject -> part label.

    Subject names are prefixed with the part label. The target order is the
    concatenation of the parts' target orders.
    """
    subjects, target, sessions, performance, groups = [], [], {}, {}, {}
    tasks = None
    for label, c in parts.items():
        if tasks is None:
            tasks = list(c.tasks)
        elif list(c.tasks) != tasks:
            raise ConfigError("merged cohorts must share their task list")
        rename = {s: f"{label}-{s}" for s in c.subjects}
        subjects += [rename[s] for s in c.subjects]
        target += [rename[s] for s in c.target_order]
        for (s, ses, task), ts in c.sessions.items():
            sessions[(rename[s], ses, task)] = ts
        for (s, task), v in c.performance.items():
            performance[(rename[s], task)] = v
        groups.update({rename[s]: label for s in c.subjects})
    first = next(iter(parts.values()))
    return Cohort(subjects, tasks, sessions, target, first.tr_seconds, performance, groups)


# ---------------------------------------------------------------------------
# experiments


def _identify_groups(cohort, task, t, subjects=None, degenerate="abort"):
    ref_ids = cohort.session_order(1, subjects)
    tgt_ids = cohort.session_order(2, subjects)
    ref = group_from_time_series(cohort.scans(1, task, subjects), ref_ids, degenerate)
    tgt = group_from_time_series(cohort.scans(2, task, subjects), tgt_ids, degenerate)
    return ref, tgt


def _run_rest_vs_rest(spec, inputs, out):
    p = spec.resolved_params()
    t = spec.top_features
    rows, files = [], []
    for seed in spec.seeds:
        with stage("ingest"):
            cohort = inputs.cohort(seed)
        with stage("connectome"):
            ref, tgt = _identify_groups(cohort, p["task"], t)
        with stage("sketch"):
            sel = principal_features(ref, min(t, ref.n_features), source_group=p["task"])
        with stage("matcher"):
            sim = cross_similarity(restrict_features(ref, sel), restrict_features(tgt, sel))
            res = match_subjects(sim, cohort.truth_array())
        files.append(write_labeled_matrix(out / f"similarity_seed-{seed}.csv", sim.sim,
                                          sim.row_ids, sim.col_ids, "reference"))
        files.append(render_heatmap(sim.sim, out / f"similarity_seed-{seed}.pgm"))
        save_selection(sel, ref.feature_ids, out / f"selection_seed-{seed}.csv")
        files.append(out / f"selection_seed-{seed}.csv")
        rows.append([seed, res.accuracy, float(np.mean(res.margin))])
    files.append(write_table(out / "accuracy.csv", ["seed", "accuracy", "mean_margin"], rows))
    acc = np.array([r[1] for r in rows])
    return files, {"accuracy": acc.tolist(), "mean_accuracy": float(acc.mean())}


def _run_cross_task_grid(spec, inputs, out):
    t = spec.top_features
    files, grids, tasks = [], [], None
    for seed in spec.seeds:
        with stage("ingest"):
            cohort = inputs.cohort(seed)
        with stage("connectome"):
            ref_ids, tgt_ids = cohort.session_order(1), cohort.session_order(2)
            refs = {k: group_from_time_series(cohort.scans(1, k), ref_ids) for k in cohort.tasks}
            tgts = {k: group_from_time_series(cohort.scans(2, k), tgt_ids) for k in cohort.tasks}
        with stage("matcher"):
            tasks, acc = identifiability_matrix(refs, tgts, t, cohort.truth_array())
        grids.append(acc)
        files.append(write_labeled_matrix(out / f"grid_seed-{seed}.csv", acc, tasks, tasks, "reference"))
    mean = np.mean(grids, axis=0)
    files.append(write_labeled_matrix(out / "grid_mean.csv", mean, tasks, tasks, "reference"))
    files.append(render_heatmap(mean, out / "grid_mean.pgm"))
    return files, {"tasks": tasks, "mean_grid": mean.tolist(), "grids": [g.tolist() for g in grids]}


def _stack_session(cohort, session):
    """Rows = scans of every condition (condition-major), columns = features."""
    blocks, labels, subjects = [], [], []
    for task in cohort.tasks:
        order = cohort.session_order(session)
        gm = group_from_time_series(cohort.scans(session, task), order)
        blocks.append(gm.a.T)
        labels += [task] * gm.n_columns
        subjects += order
    return np.vstack(blocks), labels, subjects


def _run_task_clustering(spec, inputs, out):
    p = spec.resolved_params()
    rows, files = [], []
    for seed in spec.seeds:
        with stage("ingest"):
            cohort = inputs.cohort(seed)
        with stage("connectome"):
            x, labels, subjects = _stack_session(cohort, 1)
        with stage("tsne"):
            params = TsneParams(perplexity=p["perplexity"], iterations=int(p["iterations"]),
                                learning_rate=p["learning_rate"], seed=seed,
                                kernel_distance=p["kernel_distance"])
            emb = tsne_embed(x, params)
        rng = np.random.default_rng(_split_seed(seed, 41))
        n_known = int(round(p["labeled_fraction"] * len(cohort.subjects)))
        if not 1 <= n_known < len(cohort.subjects):
            raise ConfigError("labeled_fraction must leave both labeled and unlabeled subjects")
        known = set(np.array(cohort.subjects)[rng.permutation(len(cohort.subjects))[:n_known]])
        is_known = np.array([s in known for s in subjects])
        lab_idx, unl_idx = np.flatnonzero(is_known), np.flatnonzero(~is_known)
        labels_arr = np.array(labels)
        with stage("classify"):
            pred = nn_classify(emb, lab_idx, labels_arr[lab_idx], unl_idx)
        acc = float(np.mean(pred == labels_arr[unl_idx]))
        predicted = labels_arr.copy()
        predicted[unl_idx] = pred
        table = [[f"{s}:{lab}", emb.y[k, 0], emb.y[k, 1], lab, int(is_known[k]), predicted[k]]
                 for k, (s, lab) in enumerate(zip(subjects, labels))]
        files.append(write_table(out / f"embedding_seed-{seed}.csv",
                                 ["id", "x", "y", "label", "labeled", "predicted"], table))
        files.append(render_scatter_svg(emb.y, labels, out / f"embedding_seed-{seed}.svg"))
        rows.append([seed, acc, emb.final_kl])
    files.append(write_table(out / "classification.csv", ["seed", "accuracy", "final_kl"], rows))
    acc = np.array([r[1] for r in rows])
    return files, {"accuracy": acc.tolist(), "mean_accuracy": float(acc.mean())}


def _run_performance(spec, inputs, out):
    p = spec.resolved_params()
    t = spec.top_features
    rows, files, reports = [], [], {}
    for seed in spec.seeds:
        with stage("ingest"):
            cohort = inputs.cohort(seed)
        for task in p["tasks"]:
            if task not in cohort.tasks:
                raise ConfigError(f"cohort has no task {task!r}")
            with stage("regress"):
                if spec.manifest is None and p["null_model"]:
                    cohort = random_performance(cohort, task, seed)
                elif spec.manifest is None:
                    cohort, _ = plant_performance(cohort, task, int(p["planted_features"]),
                                                  p["planted_noise"], seed)
                rep = run_performance_experiment(
                    cohort, task, t, int(p["repeats"]), seed, p["loss"], p["regularization"],
                    p["epsilon"], p["train_fraction"], p["normalizer"],
                )
            r = rep.row()
            rows.append([seed, task, r["train_nrmse_mean"], r["train_nrmse_std"],
                         r["test_nrmse_mean"], r["test_nrmse_std"], r["repeats"], r["n_train"], r["n_test"]])
            reports.setdefault(task, []).append(rep.test_nrmse_mean)
    files.append(write_table(out / "performance.csv", [
        "seed", "task", "train_nrmse_mean", "train_nrmse_std", "test_nrmse_mean",
        "test_nrmse_std", "repeats", "n_train", "n_test"], rows))
    return files, {"test_nrmse_mean": {k: float(np.mean(v)) for k, v in reports.items()}}


def _case_control_cohort(spec, seed):
    p = spec.resolved_params()
    control = generate_synthetic_cohort(spec.synth_config(seed))
    case_seed = int(_split_seed(seed, 51).generate_state(1, np.uint64)[0])
    case = generate_synthetic_cohort(spec.synth_config(case_seed, p["case_overrides"]))
    return merge_cohorts({"control": control, "case": case})


def _stratified_split(groups_of, subjects, train_fraction, rng):
    train, test = [], []
    for label in sorted(set(groups_of.values())):
        members = [s for s in subjects if groups_of[s] == label]
        perm = rng.permutation(len(members))
        n_train = int(round(train_fraction * len(members)))
        if not 1 <= n_train < len(members) - 1:
            raise ConfigError(f"group {label!r} is too small for a {train_fraction} split")
        train += [members[k] for k in sorted(perm[:n_train])]
        test += [members[k] for k in sorted(perm[n_train:])]
    order = {s: k for k, s in enumerate(subjects)}
    return sorted(train, key=order.get), sorted(test, key=order.get)


def _heldout_accuracy(cohort, task, t, train, test, degenerate):
    ref_train = group_from_time_series(cohort.scans(1, task, train), train, degenerate)
    sel = principal_features(ref_train, min(t, ref_train.n_features))
    ref, tgt = _identify_groups(cohort, task, t, test, degenerate)
    sim = cross_similarity(restrict_features(ref, sel), restrict_features(tgt, sel))
    return match_subjects(sim, cohort.truth_array(test)), sim


def _run_case_control(spec, inputs, out):
    p = spec.resolved_params()
    t = spec.top_features
    rows, files = [], []
    for seed in spec.seeds:
        with stage("ingest"):
            cohort = inputs.cohort(seed) if spec.manifest else _case_control_cohort(spec, seed)
        if not cohort.groups:
            raise ConfigError("case_control needs subject groups in the cohort")
        labels = sorted(set(cohort.groups.values()))
        rng = np.random.default_rng(_split_seed(seed, 61))
        for split in range(int(p["splits"])):
            train, test = _stratified_split(cohort.groups, cohort.subjects, p["train_fraction"], rng)
            with stage("matcher"):
                mixed, sim = _heldout_accuracy(cohort, p["task"], t, train, test, p["degenerate"])
                per = {}
                for label in labels:
                    tr = [s for s in train if cohort.groups[s] == label]
                    te = [s for s in test if cohort.groups[s] == label]
                    per[label] = (_heldout_accuracy(cohort, p["task"], t, tr, te, p["degenerate"])[0].accuracy,
                                  len(te))
            pooled = sum(a * n for a, n in per.values()) / sum(n for _, n in per.values())
            rows.append([seed, split, mixed.accuracy, pooled, *[per[k][0] for k in labels]])
            if split == 0:
                files.append(render_heatmap(sim.sim, out / f"similarity_seed-{seed}.pgm"))
    files.append(write_table(out / "case_control.csv",
                             ["seed", "split", "mixed_accuracy", "subpopulation_accuracy",
                              *[f"{k}_accuracy" for k in labels]], rows))
    mixed = np.array([r[2] for r in rows])
    pooled = np.array([r[3] for r in rows])
    return files, {"mixed_accuracy": float(mixed.mean()), "subpopulation_accuracy": float(pooled.mean()),
                   "mixed_accuracy_std": float(mixed.std())}


def _run_multisite(spec, inputs, out):
    p = spec.resolved_params()
    t = spec.top_features
    fractions = [float(f) for f in p["noise_fractions"]]
    rows = []
    for seed in spec.seeds:
        with stage("ingest"):
            cohort = inputs.cohort(seed)
            target = cohort.scans(2, p["task"])
            noisy = {f: [inject_scanner_noise(ts, f, _noise_seed(seed, k)) for k, ts in enumerate(target)]
                     for f in fractions}
        with stage("connectome"):
            ref_ids, tgt_ids = cohort.session_order(1), cohort.session_order(2)
            ref = group_from_time_series(cohort.scans(1, p["task"]), ref_ids)
            targets = [group_from_time_series(target, tgt_ids)]
            targets += [group_from_time_series(noisy[f], tgt_ids) for f in fractions]
        with stage("sketch"):
            sel = principal_features(ref, min(t, ref.n_features))
        with stage("matcher"):
            ref_red = restrict_features(ref, sel)
            accs = [match_subjects(cross_similarity(ref_red, restrict_features(g, sel)),
                                   cohort.truth_array()).accuracy for g in targets]
        rows.append([seed, *accs])
    header = ["seed", "clean", *[f"noise_{f:g}" for f in fractions]]
    acc = np.array([r[1:] for r in rows])
    noisy_acc = acc[:, 1:]
    monotone = np.all(np.diff(noisy_acc, axis=1) <= 0, axis=1)
    files = [write_table(out / "multisite.csv", header, rows)]
    return files, {
        "noise_fractions": fractions,
        "mean_accuracy": dict(zip(header[1:], acc.mean(axis=0).tolist())),
        "monotone_fraction": float(monotone.mean()),
        "mean_drop": float(np.mean(noisy_acc[:, 0] - noisy_acc[:, -1])),
    }


_RUNNERS = {
    "rest_vs_rest": _run_rest_vs_rest,
    "cross_task_grid": _run_cross_task_grid,
    "task_clustering": _run_task_clustering,
    "performance": _run_performance,
    "case_control": _run_case_control,
    "multisite": _run_multisite,
}


def run_experiment(spec: ExperimentSpec, extra_manifest=None) -> RunResult:
    """Run one experiment and write its artifacts plus ``run_manifest.json``.

    ``extra_manifest`` is merged into the manifest (the CLI stores its flags
    there). Errors carry the name of the failing stage in ``stage``.
    """
    spec.validate()
    with stage("output"):
        out = ensure_dir(spec.out_dir)
    inputs = _Inputs(spec)
    files, summary = _RUNNERS[spec.kind](spec, inputs, out)
    report = out / "report.json"
    _write_json(report, {"kind": spec.kind, "summary": summary})
    files = sorted({Path(f) for f in files} | {report})
    manifest = {
        "package_version": __version__,
        "spec": spec.to_dict(),
        "seeds": list(spec.seeds),
        "inputs": dict(sorted(inputs.files.items())),
        "artifacts": {f.name: file_sha256(f) for f in files},
    }
    if spec.manifest is None:
        manifest["cohorts"] = {str(s): spec.synth_config(s).to_dict() for s in spec.seeds}
    if extra_manifest:
        manifest.update(extra_manifest)
    path = _write_json(out / MANIFEST_NAME, manifest)
    return RunResult(out, files, path, summary)


def load_spec(path, **overrides) -> ExperimentSpec:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentSpec.from_dict(data, **overrides)


__all__ = [
    "ExperimentSpec", "KINDS", "RunResult", "load_spec", "merge_cohorts", "render_heatmap",
    "render_scatter_svg", "run_experiment", "write_table",
]
