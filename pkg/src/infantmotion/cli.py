"""Command-line entry point: ``infantmotion <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import cnn, report, synth
from .core import CLASS_SETS, load_dataset
from .features import export_feature_matrix, frame_features, parse_sensors
from .iar import export_refined, iar_refine
from .loso import (
    ABLATION_CONFIGS,
    RunConfig,
    likelihood_fn,
    posture_condition,
    ablate,
    fit_cnn,
    fit_svm,
    loso_run,
    prepare,
)
from .svm import dump_model

log = logging.getLogger("infantmotion")


class CliError(Exception):
    pass


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory (recordings/, annotations/, truth/)")
    p.add_argument("--classifier", choices=("svm", "cnn"), help="classifier family (default svm)")
    p.add_argument("--track", choices=("posture", "movement", "both"), help="tracks to evaluate (default both)")
    p.add_argument("--iar", type=_on_off, metavar="{on,off}", help="refine training labels (default off)")
    p.add_argument("--iterations", type=int, help="refinement iterations (default 5)")
    p.add_argument("--iar-classifier", choices=("svm", "cnn"), help="inner-fold trainer (default: --classifier)")
    p.add_argument("--sensors", help="sensor subset: all, left_arm, arms, legs, arm_leg, ... or LeftArm+RightLeg")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--jobs", type=int, help="worker processes for folds (default: CPU count)")
    p.add_argument("--svm-lambda", type=float, help="SVM regularisation (default 1e-4)")
    p.add_argument("--svm-epochs", type=int, help="SVM passes over the data (default 20)")
    p.add_argument("--cnn-lr", type=float, help="CNN Adam learning rate (default 1e-3)")
    p.add_argument("--cnn-epochs", type=int, help="CNN training epochs (default 30)")
    p.add_argument("--cnn-chunk-frames", type=int, help="split recordings into chunks of this many frames")
    p.add_argument("--config", help="JSON file of run settings; its values override the flags")
    p.add_argument("--out", help="output directory")


def resolve_config(args: argparse.Namespace) -> tuple[RunConfig, dict]:
    """Merge defaults, flags and the optional config file (file wins)."""
    values = {"jobs": os.cpu_count() or 1}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    extra = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError("config file must hold a JSON object")
        for k in ("data", "out"):
            if k in doc:
                extra[k] = doc.pop(k)
        values.update(doc)
    try:
        return RunConfig.from_dict(values), extra
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from None


def _load(path: str):
    try:
        subjects = load_dataset(path)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from None
    if not subjects:
        raise CliError(f"no recordings found under {path}")
    warnings = []
    for s in subjects:
        if not s.annotators:
            warnings.append(f"subject {s.subject_id} has no annotation files")
    return subjects, warnings


def cmd_synth(args) -> int:
    scenario = synth.load_scenario(args.scenario) if args.scenario else synth.Scenario()
    if args.subjects < 1:
        raise CliError("--subjects must be >= 1")
    subjects = synth.make_dataset(scenario, args.subjects, args.seed, args.annotators)
    synth.write_dataset(args.out, subjects, scenario, args.seed)
    print(f"wrote {len(subjects)} subjects to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg, extra = resolve_config(args)
    data = extra.get("data", args.data)
    out = extra.get("out", args.out) or "report"
    subjects, warnings = _load(data)
    rep = loso_run(subjects, cfg)
    rep["warnings"] = warnings + rep["warnings"]
    rep["data"] = str(data)
    report.write_eval_bundle(rep, out)
    print(report.table1(rep))
    print(f"report written to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg, extra = resolve_config(args)
    data = extra.get("data", args.data)
    out = extra.get("out", args.out) or "ablation"
    configs = [c.strip() for c in args.configs.split(",")] if args.configs else list(ABLATION_CONFIGS)
    if not configs or any(not c for c in configs):
        raise CliError("empty sensor configuration in --configs")
    subjects, _ = _load(data)
    result = ablate(subjects, configs, cfg)
    report.write_ablation_bundle(result, out)
    for name in configs:
        row = result["rows"][name]
        cells = "  ".join(f"{t}={row[t]['full_agreement']:.3f}" for t in cfg.tracks)
        print(f"{name:12s} {cells}{'  (baseline)' if row['baseline'] else ''}")
    return 0


def cmd_report(args) -> int:
    try:
        written = report.render_bundle(args.bundle, args.out)
    except report.CorruptBundleError as exc:
        raise CliError(str(exc)) from None
    for p in written:
        print(p)
    return 0


def cmd_featurize(args) -> int:
    subjects, _ = _load(args.data)
    sensors = parse_sensors(args.sensors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in subjects:
        p = prepare(s, sensors)
        feats = frame_features(p.windows, p.rate, sensors)
        with open(out / f"{s.subject_id}.csv", "w") as fh:
            export_feature_matrix(feats, fh, sensors)
    print(f"wrote {len(subjects)} feature tables to {out}")
    return 0


def cmd_refine(args) -> int:
    cfg, extra = resolve_config(args)
    subjects, _ = _load(extra.get("data", args.data))
    prepared = [prepare(s, cfg.sensors) for s in subjects]
    out = Path(extra.get("out", args.out) or "refined")
    out.mkdir(parents=True, exist_ok=True)
    labels = {}
    for track in ("posture", "movement"):
        if track not in cfg.tracks and not (track == "posture" and cfg.inner_classifier == "cnn"):
            continue
        fp = likelihood_fn(prepared, track, cfg, labels.get("posture"))
        state = iar_refine([p.priors[track] for p in prepared], fp, cfg.iterations, seed=cfg.seed)
        labels[track] = state.labels
        if track in cfg.tracks:
            with open(out / f"refined_{track}.jsonl", "w") as fh:
                export_refined(zip([p.subject_id for p in prepared], state.labels), fh)
    print(f"refined labels written to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, extra = resolve_config(args)
    subjects, _ = _load(extra.get("data", args.data))
    prepared = [prepare(s, cfg.sensors) for s in subjects]
    out = Path(extra.get("out", args.out) or "model")
    out.mkdir(parents=True, exist_ok=True)
    priors = {t: [p.priors[t] for p in prepared] for t in CLASS_SETS}
    if cfg.classifier == "svm":
        for track in cfg.tracks:
            std, model = fit_svm(prepared, priors[track], track, cfg, cfg.seed)
            with open(out / f"svm_{track}.json", "w") as fh:
                dump_model(model, fh)
            np.savez(out / f"standardizer_{track}.npz", mean=std.mean, std=std.std)
    else:
        net, trace = fit_cnn(prepared, priors["posture"], "posture", cfg, cfg.seed)
        cnn.save_checkpoint(net, out / "cnn_posture.npz")
        with open(out / "loss_posture.csv", "w") as fh:
            cnn.export_loss_trace(trace, fh)
        if "movement" in cfg.tracks:
            conds = [posture_condition(l) for l in priors["posture"]]
            net, trace = fit_cnn(prepared, priors["movement"], "movement", cfg, cfg.seed + 1, conds)
            cnn.save_checkpoint(net, out / "cnn_movement.npz")
            with open(out / "loss_movement.csv", "w") as fh:
                cnn.export_loss_trace(trace, fh)
    (out / "config.json").write_text(report.dumps(cfg.to_dict()))
    print(f"model written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="infantmotion", description="Infant posture and movement classification from limb IMU recordings."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--scenario", help="scenario JSON file (default: built-in scenario)")
    p.add_argument("--subjects", type=int, default=12)
    p.add_argument("--annotators", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="leave-one-subject-out evaluation and report bundle")
    _add_run_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="LOSO UAR for several sensor configurations")
    _add_run_flags(p)
    p.add_argument("--configs", help=f"comma-separated configurations (default {','.join(ABLATION_CONFIGS)})")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures and tables from a bundle")
    p.add_argument("bundle", help="directory written by eval or ablate")
    p.add_argument("--out", help="output directory (default: the bundle)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("featurize", help="export per-frame feature tables")
    p.add_argument("--data", required=True)
    p.add_argument("--sensors", default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("refine", help="refine the annotations of a training set")
    _add_run_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train", help="train on every subject and save the model")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
