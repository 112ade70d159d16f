"""Command line interface: ``connectome-id <command> [options]``.

Exit status is 0 on success, 2 when an input or configuration is invalid and
3 when a numerical routine fails. Every command writes ``run_manifest.json``
into its output directory with the flags it was called with.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .connectome import (
    bandpass_filter, global_signal_regression, group_from_time_series, load_group_matrix,
    save_group_matrix,
)
from .errors import ConfigError, ConnectomeIdError, IoError, NumericalFailure
from .ingest import SynthConfig, ensure_dir, file_sha256, generate_synthetic_cohort, load_cohort, save_cohort
from .matcher import cross_similarity, match_subjects
from .pipeline import (
    MANIFEST_NAME, ExperimentSpec, load_spec, render_heatmap, render_scatter_svg, run_experiment,
    stage, write_labeled_matrix, write_table,
)
from .regress import plant_performance
from .sketch import load_selection, principal_features, restrict_features, save_selection
from .tsne import TsneParams, nn_classify, tsne_embed

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


def _read_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _flags(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _write_manifest(out: Path, args, inputs=(), artifacts=(), extra=None) -> Path:
    manifest = {
        "package_version": __version__,
        "command": args.command,
        "flags": _flags(args),
        "inputs": {str(p): file_sha256(p) for p in sorted(set(map(str, inputs)))},
        "artifacts": {Path(p).name: file_sha256(p) for p in sorted(set(map(str, artifacts)))},
    }
    manifest.update(extra or {})
    path = out / MANIFEST_NAME
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _cohort_inputs(manifest_path):
    manifest_path = Path(manifest_path)
    files = [manifest_path]
    for entry in _read_json(manifest_path).get("scans", []):
        files.append(manifest_path.parent / entry["path"])
    return files


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    data = _read_json(args.config)
    plant = data.pop("performance", None)
    if args.seed is not None:
        data["seed"] = args.seed[-1]
    with stage("ingest"):
        cfg = SynthConfig.from_dict(data)
        cohort = generate_synthetic_cohort(cfg)
    if plant:
        with stage("regress"):
            for task in plant.get("tasks", []):
                cohort, _ = plant_performance(cohort, task, int(plant.get("planted_features", 5)),
                                              float(plant.get("noise", 0.01)), cfg.seed)
    out = ensure_dir(args.out)
    with stage("output"):
        manifest = save_cohort(cohort, out, args.format)
    artifacts = [manifest] + [out / e["path"] for e in _read_json(manifest)["scans"]]
    _write_manifest(out, args, artifacts=artifacts, extra={"synth_config": cfg.to_dict()})
    print(manifest)


def cmd_connectome(args):
    opts = {"bandpass": None, "gsr": False, "degenerate": args.degenerate, "format": "binary"}
    extra = _read_json(args.config)
    unknown = set(extra) - set(opts)
    if unknown:
        raise ConfigError(f"unknown connectome options: {sorted(unknown)}")
    opts.update(extra)
    if args.degenerate != "abort":
        opts["degenerate"] = args.degenerate
    with stage("ingest"):
        cohort = load_cohort(args.manifest)
    out = ensure_dir(args.out)
    written = []
    for session in (1, 2):
        order = cohort.session_order(session)
        for task in cohort.tasks:
            with stage("preprocess"):
                series = cohort.scans(session, task)
                if opts["gsr"]:
                    series = [global_signal_regression(ts) for ts in series]
                if opts["bandpass"]:
                    lo, hi = opts["bandpass"]
                    series = [bandpass_filter(ts, lo, hi) for ts in series]
            with stage("connectome"):
                gm = group_from_time_series(series, order, opts["degenerate"])
            ext = "csv" if opts["format"] == "csv" else "cnid"
            path = out / f"group_ses-{session}_{task}.{ext}"
            save_group_matrix(gm, path, opts["format"])
            written += [path, Path(f"{path}.features.csv"), Path(f"{path}.meta.json")]
    _write_manifest(out, args, _cohort_inputs(args.manifest), written, {"options": opts})
    for p in written[::3]:
        print(p)


def cmd_select(args):
    with stage("ingest"):
        gm = load_group_matrix(args.group)
    with stage("sketch"):
        sel = principal_features(gm, min(args.top_features, gm.n_features), source_group=str(args.group))
    out = ensure_dir(args.out)
    path = out / "selection.csv"
    save_selection(sel, gm.feature_ids, path)
    inputs = [args.group, f"{args.group}.features.csv", f"{args.group}.meta.json"]
    _write_manifest(out, args, inputs, [path])
    print(path)


def cmd_match(args):
    with stage("ingest"):
        ref = load_group_matrix(args.ref)
        tgt = load_group_matrix(args.target)
    inputs = [args.ref, f"{args.ref}.features.csv", f"{args.ref}.meta.json",
              args.target, f"{args.target}.features.csv", f"{args.target}.meta.json"]
    with stage("sketch"):
        if args.selection:
            sel = load_selection(args.selection)
            inputs.append(args.selection)
        else:
            sel = principal_features(ref, min(args.top_features, ref.n_features))
    with stage("matcher"):
        try:
            ref_red, tgt_red = restrict_features(ref, sel), restrict_features(tgt, sel)
        except IndexError as exc:
            raise ConfigError(str(exc)) from None
        sim = cross_similarity(ref_red, tgt_red)
        position = {c: k for k, c in enumerate(tgt.column_ids)}
        truth = None
        if set(ref.column_ids) == set(tgt.column_ids):
            truth = np.array([position[c] for c in ref.column_ids])
        res = match_subjects(sim, truth)
    out = ensure_dir(args.out)
    files = [
        write_labeled_matrix(out / "similarity.csv", sim.sim, sim.row_ids, sim.col_ids, "reference"),
        render_heatmap(sim.sim, out / "similarity.pgm"),
    ]
    rows = []
    for k, r in enumerate(ref.column_ids):
        row = [r, tgt.column_ids[res.assignment[k]]]
        if truth is not None:
            row += [int(res.correct[k]), res.margin[k]]
        rows.append(row)
    header = ["reference", "predicted"] + (["correct", "margin"] if truth is not None else [])
    files.append(write_table(out / "assignment.csv", header, rows))
    report = out / "report.json"
    with open(report, "w") as fh:
        json.dump({"accuracy": res.accuracy, "t": sel.t}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files.append(report)
    _write_manifest(out, args, inputs, files)
    if res.accuracy is not None:
        print(f"accuracy {res.accuracy:.4f}")


def _cohort_for(args):
    """Cohort from ``--manifest`` or from a synthetic config (``--config``)."""
    if args.manifest:
        return load_cohort(args.manifest), _cohort_inputs(args.manifest), None
    data = _read_json(args.config)
    data.pop("performance", None)
    if args.seed is not None:
        data["seed"] = args.seed[-1]
    cfg = SynthConfig.from_dict(data)
    return generate_synthetic_cohort(cfg), [], cfg.to_dict()


def cmd_embed(args):
    with stage("ingest"):
        cohort, inputs, cfg = _cohort_for(args)
    rows_x, ids, labels = [], [], []
    with stage("connectome"):
        order = cohort.session_order(args.session)
        for task in cohort.tasks:
            gm = group_from_time_series(cohort.scans(args.session, task), order)
            rows_x.append(gm.a.T)
            ids += [f"{s}:{task}" for s in order]
            labels += [task] * len(order)
    seed = args.seed[-1] if args.seed else 0
    with stage("tsne"):
        params = TsneParams(perplexity=args.perplexity, iterations=args.iterations,
                            learning_rate=args.learning_rate, seed=seed,
                            kernel_distance=args.kernel_distance)
        emb = tsne_embed(np.vstack(rows_x), params)
    out = ensure_dir(args.out)
    table = [[i, emb.y[k, 0], emb.y[k, 1], lab] for k, (i, lab) in enumerate(zip(ids, labels))]
    files = [
        write_table(out / "embedding.csv", ["id", "x", "y", "label"], table),
        render_scatter_svg(emb.y, labels, out / "embedding.svg"),
        write_table(out / "kl_trace.csv", ["iteration", "kl"],
                    [[k + 1, v] for k, v in enumerate(emb.kl_trace)]),
    ]
    _write_manifest(out, args, inputs, files, {"synth_config": cfg} if cfg else None)
    print(f"final KL {emb.final_kl:.6f}")


def cmd_classify(args):
    with stage("ingest"):
        try:
            with open(args.embedding, newline="") as fh:
                rows = list(csv.DictReader(fh))
        except OSError as exc:
            raise IoError(f"cannot read {args.embedding}: {exc}") from exc
        if not rows or not {"id", "x", "y", "label"} <= set(rows[0]):
            raise ConfigError("embedding CSV needs columns id, x, y, label")
        y = np.array([[float(r["x"]), float(r["y"])] for r in rows])
        labels = np.array([r["label"] for r in rows])
        subjects = [r["id"].split(":")[0] for r in rows]
    unique = sorted(set(subjects))
    seed = args.seed[-1] if args.seed else 0
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(41,)))
    n_known = int(round(args.labeled_fraction * len(unique)))
    if not 1 <= n_known < len(unique):
        raise ConfigError("labeled fraction must leave both labeled and unlabeled subjects")
    known = {unique[k] for k in rng.permutation(len(unique))[:n_known]}
    is_known = np.array([s in known for s in subjects])
    lab_idx, unl_idx = np.flatnonzero(is_known), np.flatnonzero(~is_known)
    with stage("classify"):
        pred = nn_classify(y, lab_idx, labels[lab_idx], unl_idx)
    acc = float(np.mean(pred == labels[unl_idx]))
    out = ensure_dir(args.out)
    files = [write_table(out / "predictions.csv", ["id", "label", "predicted"],
                         [[rows[k]["id"], labels[k], p] for k, p in zip(unl_idx, pred)])]
    report = out / "report.json"
    per_class = {c: float(np.mean(pred[labels[unl_idx] == c] == c)) for c in sorted(set(labels))}
    with open(report, "w") as fh:
        json.dump({"accuracy": acc, "per_class_accuracy": per_class}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    files.append(report)
    _write_manifest(out, args, [args.embedding], files)
    print(f"accuracy {acc:.4f}")


def _experiment(kind):
    def run(args):
        seeds = tuple(args.seed) if args.seed else None
        if args.config:
            spec = load_spec(args.config, out_dir=args.out, t=args.top_features, seeds=seeds)
            if kind is not None and spec.kind != kind:
                raise ConfigError(f"config describes a {spec.kind} experiment, not {kind}")
        else:
            if kind is None:
                raise ConfigError("run needs --config naming the experiment kind")
            spec = ExperimentSpec(kind, args.out, t=args.top_features, seeds=seeds or (0,))
        result = run_experiment(spec, {"command": args.command, "flags": _flags(args)})
        print(json.dumps(_headline(result.summary), sort_keys=True))
    return run


def _headline(summary):
    return {k: v for k, v in summary.items() if k not in ("grids", "mean_grid", "accuracy")}


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="connectome-id", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help, config_help="JSON configuration file"):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help=config_help)
        p.add_argument("--seed", type=int, action="append",
                       help="random seed; experiments accept it repeatedly")
        p.add_argument("--top-features", type=int, default=None, help="number of features t")
        p.add_argument("--out", required=True, help="output directory")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic two-session cohort",
                "SynthConfig fields as JSON, optionally with a 'performance' block")
    p.add_argument("--format", choices=("binary", "csv"), default="binary")

    p = command("connectome", cmd_connectome, "group matrices for every session and task",
                "options: bandpass [lo, hi], gsr, degenerate, format")
    p.add_argument("--manifest", required=True, help="cohort manifest.json")
    p.add_argument("--degenerate", choices=("abort", "zero"), default="abort")

    p = command("select", cmd_select, "top-leverage features of a group matrix")
    p.add_argument("--group", required=True)

    p = command("match", cmd_match, "identify target scans against reference scans")
    p.add_argument("--ref", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--selection", help="selection CSV; computed from --ref when omitted")

    p = command("embed", cmd_embed, "t-SNE map of every scan of one session",
                "SynthConfig JSON (when no --manifest is given)")
    p.add_argument("--manifest", help="cohort manifest.json")
    p.add_argument("--session", type=int, choices=(1, 2), default=1)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=100.0)
    p.add_argument("--kernel-distance", choices=("sq", "abs"), default="sq")

    p = command("classify", cmd_classify, "nearest-neighbor task labels on an embedding")
    p.add_argument("--embedding", required=True, help="embedding.csv from 'embed'")
    p.add_argument("--labeled-fraction", type=float, default=0.5)

    command("grid", _experiment("cross_task_grid"), "cross-task identifiability matrix",
            "experiment JSON; preset cohort when omitted")
    command("perf", _experiment("performance"), "performance regression experiment",
            "experiment JSON; preset cohort when omitted")
    command("multisite", _experiment("multisite"), "identification under simulated scanner noise",
            "experiment JSON; preset cohort when omitted")
    command("run", _experiment(None), "any experiment kind described by --config")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.top_features is None and args.command in ("select", "match"):
        args.top_features = 100
    try:
        args.func(args)
    except NumericalFailure as exc:
        print(f"connectome-id: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ConnectomeIdError as exc:
        print(f"connectome-id: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"connectome-id: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
