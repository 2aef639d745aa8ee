"""Command-line entry point for the full experiment protocol.

Subcommands: synth (generate the synthetic corpus), folds (stratified fold
assignment), train (runs x rotations training for one task), evaluate
(majority-vote test metrics from checkpoints), baseline (SVM+PCA reference),
report (combined table with significance tests).

Exit codes: 0 success, 1 runtime failure, 2 usage error. The CIDER_THREADS
environment variable caps numerical worker threads (0 = automatic); it must
be set before the process imports numpy, so the CLI applies it first and
imports the heavy modules lazily.
"""

import argparse
import json
import os
import sys

TOOL_VERSION = "0.1.0"


def _apply_thread_cap():
    cap = os.environ.get("CIDER_THREADS", "").strip()
    if cap and cap != "0":
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, cap)


def parse_config_file(path) -> dict:
    """Flat key=value text; '#' starts a comment, blank lines ignored."""
    values = {}
    with open(str(path)) as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


_SPEC_KEYS = {"fft_n": int, "hop": int, "sr": int, "segment_seconds": int,
              "amin": float, "top_db": float}
_TRAIN_KEYS = {"learning_rate": float, "batch_size": int, "max_epochs": int,
               "seed": int, "adam_beta1": float, "adam_beta2": float,
               "adam_eps": float}
_MODEL_KEYS = {"kernel": int}


def _build_configs(args):
    """Defaults < config file < explicit CLI flags."""
    from .dsp import SpectrogramConfig
    from .model import CiderConfig
    from .trainer import TrainConfig

    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}

    def pick(key, cast, flag_value):
        if flag_value is not None:
            return flag_value
        if key in file_values:
            return cast(file_values[key])
        return None

    spec_kwargs = {}
    for key, cast in _SPEC_KEYS.items():
        v = pick(key, cast, getattr(args, key, None))
        if v is not None:
            spec_kwargs[key] = v
    spec_config = SpectrogramConfig(**spec_kwargs)

    train_kwargs = {}
    for key, cast in _TRAIN_KEYS.items():
        v = pick(key, cast, getattr(args, key, None))
        if v is not None:
            train_kwargs[key] = v
    train_config = TrainConfig(**train_kwargs)

    model_kwargs = {}
    if "channels" in file_values:
        model_kwargs["channels"] = tuple(
            int(c) for c in file_values["channels"].split(","))
    if "strides" in file_values:
        model_kwargs["strides"] = tuple(
            int(s) for s in file_values["strides"].split(","))
    for key, cast in _MODEL_KEYS.items():
        if key in file_values:
            model_kwargs[key] = cast(file_values[key])
    model_kwargs["input_shape"] = (spec_config.freq_bins, spec_config.frames, 2)
    model_config = CiderConfig(**model_kwargs)
    return spec_config, train_config, model_config


def _write_json(path, doc):
    with open(str(path), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


# --- subcommands ---

def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate

    kwargs = {"seed": args.seed}
    if args.preset == "paper-cohort":
        pass  # the full default cohort: 245/30/19/39/23 across the five strata
    elif args.preset == "mini":
        kwargs["stratum_counts"] = {"healthy-no-symptoms": 8,
                                    "healthy-with-cough": 4,
                                    "asthma-with-cough": 4,
                                    "COVID-no-cough": 4,
                                    "COVID-cough": 4}
    if args.sr is not None:
        kwargs["sr"] = args.sr
    config = SynthConfig(**kwargs)
    manifest = generate(config, args.out)
    n = sum(config.stratum_counts.values())
    print(f"wrote {manifest} ({n} participants)")
    return 0


def cmd_folds(args) -> int:
    from .folds import load_manifest, make_folds

    participants = load_manifest(args.manifest)
    assignment = make_folds(participants, seed=args.seed)
    with open(args.out, "w") as f:
        f.write(assignment.to_json())
    spreads = {s: max(c) - min(c) for s, c in assignment.stratum_tallies.items()}
    print(f"wrote {args.out}: {len(assignment.fold_of)} participants, "
          f"test fold {assignment.test_fold}, per-stratum spread "
          f"{max(spreads.values())}")
    return 0


class SystemExit2(RuntimeError):
    """Runtime failure surfaced as exit code 1."""


def _load_inputs(args):
    from .folds import FoldAssignment, load_manifest

    participants = load_manifest(args.manifest)
    with open(args.folds) as f:
        assignment = FoldAssignment.from_json(f.read())
    manifest_ids = {p.id for p in participants}
    if manifest_ids != set(assignment.fold_of):
        raise SystemExit2("folds file does not cover the manifest participants")
    return participants, assignment


def cmd_train(args) -> int:
    from .protocol import run_task_protocol

    participants, assignment = _load_inputs(args)
    spec_config, train_config, model_config = _build_configs(args)
    os.makedirs(args.out, exist_ok=True)
    result = run_task_protocol(participants, assignment, args.task,
                               model_config, train_config, spec_config,
                               n_runs=args.runs, out_dir=args.out)
    report_path = os.path.join(args.out, f"task{args.task}_train_report.json")
    _write_json(report_path, result.report.to_dict())
    manifest_doc = {
        "tool_version": TOOL_VERSION,
        "task": args.task,
        "runs": args.runs,
        "seeds": [f.seed for f in result.fits],
        "manifest": os.path.abspath(args.manifest),
        "folds": os.path.abspath(args.folds),
        "checkpoints": [f.checkpoint_path for f in result.fits],
        "report": report_path,
        "spectrogram": {k: getattr(spec_config, k) for k in
                        ("fft_n", "hop", "sr", "segment_seconds", "amin", "top_db")},
        "train": {k: getattr(train_config, k) for k in
                  ("learning_rate", "batch_size", "max_epochs", "seed")},
        "model": model_config.to_dict(),
    }
    _write_json(os.path.join(args.out, f"task{args.task}_run_manifest.json"),
                manifest_doc)
    print(f"task {args.task}: {len(result.fits)} checkpoints, "
          f"test AUC {result.report.auc:.3f} UAR {result.report.uar:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    from . import evaluator
    from .dsp import SpectrogramConfig
    from .folds import select_task
    from .model import load_model
    from .protocol import _fold_examples, load_examples

    participants, assignment = _load_inputs(args)
    ckpts = sorted(p for p in os.listdir(args.checkpoints)
                   if p.startswith(f"task{args.task}_run") and p.endswith(".ckpt"))
    if not ckpts:
        raise SystemExit2(f"no task {args.task} checkpoints in {args.checkpoints}")

    loaded = []
    for name in ckpts:
        params, sidecar = load_model(os.path.join(args.checkpoints, name))
        used = set(sidecar.get("train_folds", [])) | {sidecar.get("dev_fold")}
        if assignment.test_fold in used:
            raise SystemExit2(
                f"{name}: fold {assignment.test_fold} appears in train/dev "
                f"metadata; refusing to evaluate a leaked checkpoint")
        loaded.append((name, params, sidecar))

    spec_config = SpectrogramConfig(**loaded[0][2]["spectrogram"])
    cohort, labels = select_task(participants, args.task)
    cache = load_examples(cohort, labels, spec_config)
    test_examples = _fold_examples(cache, assignment, assignment.test_fold)
    n_total = sum(len(v) for v in cache.values())

    by_run = {}
    first_eval = None
    for name, params, sidecar in loaded:
        ev = evaluator.evaluate_examples(params, test_examples)
        if first_eval is None:
            first_eval = ev
        run = int(sidecar.get("run", 1))
        by_run.setdefault(run, []).append((sidecar.get("rotation", 0), ev))

    run_values = []
    for run in sorted(by_run):
        rotations_detail = [{"rotation": rot, "auc": ev.auc, "uar": ev.uar}
                            for rot, ev in sorted(by_run[run],
                                                  key=lambda item: item[0])]
        run_values.append({
            "run": run,
            "auc": float(sum(d["auc"] for d in rotations_detail)
                         / len(rotations_detail)),
            "uar": float(sum(d["uar"] for d in rotations_detail)
                         / len(rotations_detail)),
            "rotations": rotations_detail,
        })
    report = evaluator.build_report(args.task, "cider", run_values, first_eval,
                                    n_train_dev_pairs=n_total - first_eval.n_pairs)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, f"task{args.task}_cider_report.json")
    with open(report_path, "w") as f:
        f.write(report.to_json())
    evaluator.write_scores_csv(
        os.path.join(args.out, f"task{args.task}_cider_scores.csv"),
        first_eval.records)
    print(f"task {args.task}: AUC {report.auc:.3f}+-{report.auc_std:.3f} "
          f"UAR {report.uar:.3f}+-{report.uar_std:.3f} -> {report_path}")
    return 0


def cmd_baseline(args) -> int:
    from .baseline import FeatureConfig
    from .protocol import run_baseline_protocol

    participants, assignment = _load_inputs(args)
    feature_config = FeatureConfig(sr=args.feature_sr)
    os.makedirs(args.out, exist_ok=True)
    cache_path = os.path.join(args.out, f"task{args.task}_features.feat")
    result = run_baseline_protocol(participants, assignment, args.task,
                                   feature_config, seed=args.seed,
                                   cache_path=cache_path, out_dir=args.out)
    report_path = os.path.join(args.out, f"task{args.task}_baseline_report.json")
    doc = result.report.to_dict()
    doc["tuning"] = {"best_c": result.best_c, "dev_auc": result.dev_auc}
    _write_json(report_path, doc)
    print(f"task {args.task}: baseline AUC {result.report.auc:.3f} "
          f"UAR {result.report.uar:.3f} (C={result.best_c:g}) -> {report_path}")
    return 0


def _fmt_cell(mean, std, bold):
    text = f"{mean:.3f}+-{std:.3f}"
    return f"**{text}**" if bold else text


def cmd_report(args) -> int:
    from .evaluator import MetricsReport, two_sample_ttest

    def load_reports(paths):
        out = {}
        for p in paths or []:
            with open(p) as f:
                report = MetricsReport.from_dict(json.load(f))
            out[report.task] = report
        return out

    cider_reports = load_reports(args.cider)
    base_reports = load_reports(args.baseline)
    if not cider_reports:
        raise SystemExit2("no model reports given")

    lines = ["task | samples [train+dev/test] | cider AUC | cider UAR | "
             "baseline AUC | baseline UAR | t-test AUC (p)"]
    combined = {}
    for task in sorted(cider_reports):
        cr = cider_reports[task]
        br = base_reports.get(task)
        entry = {"cider": cr.to_dict()}
        if br is None:
            row = (f"{task} | [{cr.n_train_dev_files}/{cr.n_test_files}] | "
                   f"{_fmt_cell(cr.auc, cr.auc_std, False)} | "
                   f"{_fmt_cell(cr.uar, cr.uar_std, False)} | - | - | -")
        elif len(cr.runs) < 2 or len(br.runs) < 2:
            # a t-test needs at least two values per side; print plain cells
            entry["baseline"] = br.to_dict()
            row = (f"{task} | [{cr.n_train_dev_files}/{cr.n_test_files}] | "
                   f"{_fmt_cell(cr.auc, cr.auc_std, False)} | "
                   f"{_fmt_cell(cr.uar, cr.uar_std, False)} | "
                   f"{_fmt_cell(br.auc, br.auc_std, False)} | "
                   f"{_fmt_cell(br.uar, br.uar_std, False)} | -")
        else:
            cider_aucs = [r["auc"] for r in cr.runs]
            base_aucs = [r["auc"] for r in br.runs]
            cider_uars = [r["uar"] for r in cr.runs]
            base_uars = [r["uar"] for r in br.runs]
            t_auc, p_auc, sig_auc = two_sample_ttest(cider_aucs, base_aucs,
                                                     alpha=args.alpha)
            t_uar, p_uar, sig_uar = two_sample_ttest(cider_uars, base_uars,
                                                     alpha=args.alpha)
            entry["baseline"] = br.to_dict()
            entry["t_test"] = {
                "auc": {"t": t_auc, "p": p_auc,
                        "significant_0.05": bool(p_auc < 0.05),
                        "significant_0.01": bool(p_auc < 0.01)},
                "uar": {"t": t_uar, "p": p_uar,
                        "significant_0.05": bool(p_uar < 0.05),
                        "significant_0.01": bool(p_uar < 0.01)},
            }
            row = (f"{task} | [{cr.n_train_dev_files}/{cr.n_test_files}] | "
                   f"{_fmt_cell(cr.auc, cr.auc_std, sig_auc and cr.auc > br.auc)} | "
                   f"{_fmt_cell(cr.uar, cr.uar_std, sig_uar and cr.uar > br.uar)} | "
                   f"{_fmt_cell(br.auc, br.auc_std, sig_auc and br.auc > cr.auc)} | "
                   f"{_fmt_cell(br.uar, br.uar_std, sig_uar and br.uar > cr.uar)} | "
                   f"{p_auc:.4f}")
        combined[str(task)] = entry
        lines.append(row)

    table = "\n".join(lines)
    print(table)
    if args.out:
        _write_json(args.out, combined)
        with open(os.path.splitext(args.out)[0] + ".txt", "w") as f:
            f.write(table + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cider",
        description="Joint breath/cough audio classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=["paper-cohort", "mini"],
                   default="paper-cohort")
    p.add_argument("--sr", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("folds", help="stratified fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("train", help="train one task (runs x rotations)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--task", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    for key in _SPEC_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                       type=_SPEC_KEYS[key], default=None)
    for key in _TRAIN_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key,
                       type=_TRAIN_KEYS[key], default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate checkpoints on the test fold")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--task", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("baseline", help="SVM+PCA reference pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--task", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feature-sr", type=int, default=24000)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="combined table with significance tests")
    p.add_argument("--cider", nargs="+", required=True)
    p.add_argument("--baseline", nargs="*", default=[])
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit2 as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
