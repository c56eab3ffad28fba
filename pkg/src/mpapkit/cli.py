"""Command-line experiments: synth, features, tune, run, ablate, report.

Every command derives its stage seeds from one master ``--seed`` so reruns
produce byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boost, cohort, hemo, metrics, tune

log = logging.getLogger("mpapkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3
REGRESSION, CLASSIFICATION = "regression", "classification"
TASKS = (REGRESSION, CLASSIFICATION)
MODES = (boost.GOSS, boost.GBDT, boost.DART)
CV_CHOICES = ("loocv", "kfold8", "stratified8")

# column order of the ablation grid
ABLATION_SUBSETS = (
    (cohort.DEMOGRAPHICS,),
    (cohort.PHYSICS,),
    (cohort.MRI,),
    (cohort.DEMOGRAPHICS, cohort.PHYSICS),
    (cohort.PHYSICS, cohort.MRI),
    (cohort.DEMOGRAPHICS, cohort.MRI),
    cohort.GROUPS,
)
ABLATION_BUDGET = 20
# narrower than the full search space so 42 cells fit a desk-scale run
ABLATION_TREES = (20, 150)
ABLATION_DEPTH = (2, 4)


class UsageError(Exception):
    pass


def stage_seed(master, stage):
    """Independent 31-bit seed for a named pipeline stage."""
    return zlib.crc32(f"{master}:{stage}".encode()) & 0x7FFFFFFF


def subset_name(groups):
    return "+".join(groups)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = REGRESSION
    mode: str = boost.DART
    groups: tuple = cohort.GROUPS
    cv: str = "loocv"
    tune_cv: str | None = None
    budget: int = 200
    strategy: str = "f1"
    threshold: float = cohort.PH_THRESHOLD
    seed: int = 0
    n_trees: tuple = (50, 1000)
    max_depth: tuple = (2, 8)

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}")
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.strategy not in metrics.STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}")
        if self.budget < tune.N_INITIAL:
            raise UsageError(f"budget must be at least {tune.N_INITIAL}")

    @property
    def loss(self):
        return boost.LOGISTIC if self.task == CLASSIFICATION else boost.SQUARED_ERROR

    @property
    def tuning_cv(self):
        if self.tune_cv:
            return self.tune_cv
        return "stratified8" if self.task == CLASSIFICATION else "kfold8"

    def describe(self):
        return {"task": self.task, "mode": self.mode, "groups": list(self.groups), "cv": self.cv,
                "tune_cv": self.tuning_cv, "budget": self.budget, "strategy": self.strategy,
                "threshold": self.threshold, "seed": self.seed,
                "n_trees": list(self.n_trees), "max_depth": list(self.max_depth)}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: dict
    measured: np.ndarray
    predicted: np.ndarray
    tuning: tune.TuneResult
    roc: metrics.RocCurve | None = None
    extras: dict = field(default_factory=dict)

    @property
    def abs_errors(self):
        return np.abs(self.predicted - self.measured)


# ---------------------------------------------------------------- data plumbing

def prepare_matrix(data: cohort.Cohort, groups):
    imputed = cohort.impute(data)
    X, _ = cohort.encode(imputed)
    return cohort.select_feature_set(X, groups)


def _folds(name, n, labels, seed):
    scheme = tune.CvScheme.parse(name, seed=seed)
    return tune.make_folds(n, labels if scheme.kind == tune.STRATIFIED else None, scheme)


def run_experiment(data: cohort.Cohort, config: ExperimentConfig) -> ExperimentResult:
    """Tune on k-fold CV, then score the best configuration out of fold."""
    X = prepare_matrix(data, config.groups)
    mpap = data.mpap
    labels = (mpap >= config.threshold).astype(np.float64)
    target = labels if config.task == CLASSIFICATION else mpap
    base = boost.BoostingConfig(mode=config.mode, loss=config.loss)
    space = tune.boosting_space(config.mode, n_trees=config.n_trees, max_depth=config.max_depth)
    tune_folds = _folds(config.tuning_cv, len(data), labels, stage_seed(config.seed, "tune-folds"))
    train_seed = stage_seed(config.seed, "train")
    tuned = tune.tune_boosting(X, target, base, space, tune_folds, budget=config.budget,
                               seed=train_seed)
    best = base.replace(**tuned.best_params)
    eval_folds = _folds(config.cv, len(data), labels, stage_seed(config.seed, "eval-folds"))
    objective = "auc" if config.task == CLASSIFICATION else "mse"
    oof, value = tune.cross_validate(X, target, eval_folds, tune.boosting_trainer(best, train_seed),
                                     objective)
    report = {"experiment": config.describe(), "n_samples": int(len(data)),
              "n_features": int(X.shape[1]), "best_config": best.to_dict(),
              "tuning_objective": tuned.best_objective}
    roc = None
    if config.task == REGRESSION:
        reg = metrics.regression_metrics(mpap, oof)
        report["regression"] = reg.as_dict()
        report["confusion"] = metrics.confusion_at(mpap, oof, config.threshold).as_dict()
        report["mae"] = reg.mae
        measured = mpap
    else:
        roc = metrics.roc_curve(labels, oof)
        report["auc"] = roc.auc
        report["strategies"] = {}
        for strategy in metrics.STRATEGIES:
            thr, cm = metrics.select_threshold(roc, labels, oof, strategy)
            report["strategies"][strategy] = {"threshold": thr, **cm.as_dict()}
        report["confusion"] = dict(report["strategies"][config.strategy])
        measured = labels
    return ExperimentResult(config, report, measured, oof, tuned, roc)


# ---------------------------------------------------------------- writers

def _dump_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True,
                      default=lambda o: o.item() if hasattr(o, "item") else str(o))
    Path(path).write_text(text + "\n", encoding="utf-8")


def _fmt(v):
    return repr(float(v))


def write_result(result: ExperimentResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(result.report, out / "report.json")
    _dump_json(result.report["best_config"], out / "best_config.json")
    result.tuning.write_csv(out / "tuning_history.csv")
    with (out / "predictions.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["measured", "predicted"])
        for m, p in zip(result.measured, result.predicted):
            w.writerow([_fmt(m), _fmt(p)])
    if result.config.task == REGRESSION:
        (out / "scatter.csv").write_bytes((out / "predictions.csv").read_bytes())
    else:
        with (out / "roc.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr", "threshold"])
            for f, t, thr in zip(result.roc.fpr, result.roc.tpr, result.roc.thresholds):
                w.writerow([_fmt(f), _fmt(t), _fmt(thr)])


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    seed = args.seed
    config = cohort.SynthConfig(n_patients=args.n, seed=stage_seed(seed, "synth"),
                                threshold=args.threshold)
    synthetic = cohort.synth_cohort(config)
    cohort.write_synthetic(synthetic, args.out)
    labels = synthetic.cohort.labels(args.threshold)
    print(f"synthesized {len(labels)} patients: {int(labels.sum())} PH, {int((1 - labels).sum())} no PH")
    print(f"master seed {seed}, synth seed {config.seed}, calibration alpha={synthetic.calibration[0]:.6g} "
          f"beta={synthetic.calibration[1]:.6g}")
    print(f"wrote {Path(args.out) / 'cohort.csv'}")
    return EXIT_OK


def extract_features(in_dir, exclude_failures=False, options=None):
    """Fill the physics columns from per-patient waveform files.

    Returns (cohort, failures) where failures lists (row, stage, message).
    """
    in_dir = Path(in_dir)
    data = cohort.load_cohort(in_dir / "cohort.csv")
    laws = cohort.read_laws(in_dir / "laws.csv")
    values = {name: [] for name in hemo.PHYSICS_FEATURES}
    failures, keep = [], []
    for i in range(len(data)):
        path = in_dir / "waveforms" / cohort.waveform_name(i)
        if not path.exists():
            raise cohort.CohortError(f"patient {i}: missing waveform file {path}")
        if i not in laws:
            raise cohort.CohortError(f"patient {i}: no tube law in laws.csv")
        flow, area = hemo.read_waveforms(path)
        try:
            feats = hemo.physics_features(flow, area, laws[i], options)
        except hemo.HemoError as exc:
            log.warning("patient %d: %s stage failed: %s", i, exc.stage, exc)
            failures.append((i, exc.stage, str(exc)))
            if not exclude_failures:
                raise
            continue
        keep.append(i)
        for name in hemo.PHYSICS_FEATURES:
            values[name].append(feats[name])
    data = data.take(keep)
    return data.with_columns(values), failures


def cmd_features(args):
    data, failures = extract_features(args.in_, exclude_failures=args.exclude_failures,
                                      options=hemo.FitOptions(seed=stage_seed(args.seed, "features")))
    out = Path(args.out) if args.out else Path(args.in_) / "features.csv"
    cohort.save_cohort(data, out)
    print(f"physics features for {len(data)} patients ({len(failures)} excluded) -> {out}")
    return EXIT_OK


def _experiment_from_args(args, **overrides):
    try:
        groups = cohort.parse_groups(args.groups)
    except cohort.CohortError as exc:
        raise UsageError(str(exc)) from None
    fields = dict(task=args.task, mode=args.mode, groups=groups,
                  cv=args.cv, budget=args.budget, strategy=args.strategy,
                  threshold=args.threshold, seed=args.seed)
    fields.update(overrides)
    return ExperimentConfig(**fields)


def cmd_tune(args):
    config = _experiment_from_args(args, cv="loocv", tune_cv=args.cv if args.cv != "loocv" else None)
    data = cohort.load_cohort(args.in_)
    X = prepare_matrix(data, config.groups)
    labels = (data.mpap >= config.threshold).astype(np.float64)
    target = labels if config.task == CLASSIFICATION else data.mpap
    base = boost.BoostingConfig(mode=config.mode, loss=config.loss)
    folds = _folds(config.tuning_cv, len(data), labels, stage_seed(config.seed, "tune-folds"))
    result = tune.tune_boosting(X, target, base, tune.boosting_space(config.mode), folds,
                                budget=config.budget, seed=stage_seed(config.seed, "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "tuning_history.csv")
    _dump_json(base.replace(**result.best_params).to_dict(), out / "best_config.json")
    print(f"best objective {result.best_objective:.6g} after {result.iterations} evaluations -> {out}")
    return EXIT_OK


def cmd_run(args):
    config = _experiment_from_args(args)
    data = cohort.load_cohort(args.in_)
    result = run_experiment(data, config)
    write_result(result, args.out)
    print(format_report(result.report))
    return EXIT_OK


def run_ablation(data, seed, budget=ABLATION_BUDGET, tasks=TASKS, modes=MODES, subsets=ABLATION_SUBSETS,
                 strategy="f1", threshold=cohort.PH_THRESHOLD, n_trees=ABLATION_TREES,
                 max_depth=ABLATION_DEPTH, progress=None):
    """All (task, mode, feature subset) cells; failed cells are recorded, not raised."""
    cells = {}
    for task in tasks:
        for mode in modes:
            for groups in subsets:
                config = ExperimentConfig(task=task, mode=mode, groups=tuple(groups), budget=budget,
                                          strategy=strategy, threshold=threshold, seed=seed,
                                          n_trees=tuple(n_trees), max_depth=tuple(max_depth))
                try:
                    cells[(task, mode, subset_name(groups))] = run_experiment(data, config)
                except (ValueError, ArithmeticError) as exc:
                    log.error("cell %s/%s/%s failed: %s", task, mode, subset_name(groups), exc)
                    cells[(task, mode, subset_name(groups))] = exc
                if progress is not None:
                    progress(task, mode, groups)
    return cells


def ablation_table(cells, tasks=TASKS, modes=MODES, subsets=ABLATION_SUBSETS):
    """Rows of (task, mode, row kind, value per subset) with p-values against all features."""
    names = [subset_name(g) for g in subsets]
    full = subset_name(cohort.GROUPS)
    rows = []
    for task in tasks:
        metric = "mae" if task == REGRESSION else "auc"
        for mode in modes:
            values, pvalues = [], []
            ref = cells.get((task, mode, full))
            for name in names:
                cell = cells.get((task, mode, name))
                if not isinstance(cell, ExperimentResult):
                    values.append("failed")
                    pvalues.append("failed")
                    continue
                values.append(cell.report[metric])
                if isinstance(ref, ExperimentResult):
                    pvalues.append(metrics.paired_error_test(cell.abs_errors, ref.abs_errors))
                else:
                    pvalues.append("failed")
            rows.append((task, mode, metric, values))
            rows.append((task, mode, "p_value", pvalues))
    return names, rows


def write_ablation(cells, out_dir, subsets=ABLATION_SUBSETS):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = sorted({k[0] for k in cells}, key=TASKS.index)
    modes = sorted({k[1] for k in cells}, key=MODES.index)
    names, rows = ablation_table(cells, tasks, modes, subsets)
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "mode", "row", *names])
        for task, mode, kind, values in rows:
            w.writerow([task, mode, kind, *(v if isinstance(v, str) else _fmt(v) for v in values)])
    summary = {}
    for (task, mode, name), cell in sorted(cells.items()):
        cell_dir = out / "cells" / f"{task}_{mode}_{name}"
        if isinstance(cell, ExperimentResult):
            write_result(cell, cell_dir)
            summary[f"{task}/{mode}/{name}"] = {"status": "ok", **{k: cell.report[k] for k in ("mae", "auc")
                                                                  if k in cell.report},
                                                "confusion": cell.report["confusion"]}
        else:
            summary[f"{task}/{mode}/{name}"] = {"status": "failed", "error": str(cell)}
    _dump_json(summary, out / "ablation.json")
    return out / "ablation.csv"


def cmd_ablate(args):
    data = cohort.load_cohort(args.in_)
    tasks = (args.task,) if args.task else TASKS
    modes = (args.mode,) if args.mode else MODES
    start = time.perf_counter()

    def progress(task, mode, groups):
        log.info("done %s %s %s (%.0f s)", task, mode, subset_name(groups), time.perf_counter() - start)

    cells = run_ablation(data, args.seed, budget=args.budget, tasks=tasks, modes=modes,
                         strategy=args.strategy, threshold=args.threshold, progress=progress)
    path = write_ablation(cells, args.out)
    print(path.read_text(encoding="utf-8"), end="")
    failed = sum(not isinstance(c, ExperimentResult) for c in cells.values())
    print(f"{len(cells) - failed}/{len(cells)} cells ok in {time.perf_counter() - start:.0f} s -> {args.out}")
    return EXIT_OK


def format_report(report):
    exp = report["experiment"]
    lines = [f"{exp['task']} | {exp['mode']} | {'+'.join(exp['groups'])} | cv={exp['cv']} "
             f"budget={exp['budget']} seed={exp['seed']}"]
    if "regression" in report:
        r = report["regression"]
        lines.append(f"  MAE {r['mae']:.3f}  RMSE {r['rmse']:.3f}  MSE {r['mse']:.3f}  R2 {r['r2']:.3f}")
    if "auc" in report:
        lines.append(f"  AUC {report['auc']:.4f}")
    for name, cm in report.get("strategies", {"@threshold": report["confusion"]}).items():
        lines.append(f"  {name:12s} sens {cm['sensitivity']:.3f}  spec {cm['specificity']:.3f}  "
                     f"acc {cm['accuracy']:.3f}  tp {cm['tp']} fp {cm['fp']} tn {cm['tn']} fn {cm['fn']}")
    return "\n".join(lines)


def cmd_report(args):
    root = Path(args.in_)
    reports = sorted(root.rglob("report.json"))
    if not reports:
        raise cohort.CohortError(f"no report.json under {root}")
    for path in reports:
        print(f"# {path.parent.relative_to(root) if path.parent != root else '.'}")
        print(format_report(json.loads(path.read_text(encoding="utf-8"))))
    if (root / "ablation.csv").exists():
        print((root / "ablation.csv").read_text(encoding="utf-8"), end="")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="mpapkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, budget):
        p.add_argument("--in", dest="in_", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--task", choices=TASKS, default=REGRESSION)
        p.add_argument("--mode", choices=MODES, default=boost.DART)
        p.add_argument("--groups", default="all", help="'all' or e.g. demographics+physics")
        p.add_argument("--cv", choices=CV_CHOICES, default="loocv")
        p.add_argument("--strategy", choices=metrics.STRATEGIES, default="f1")
        p.add_argument("--threshold", type=float, default=cohort.PH_THRESHOLD)
        p.add_argument("--budget", type=int, default=budget)

    p = sub.add_parser("synth", help="write a synthetic cohort with waveforms")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=352)
    p.add_argument("--threshold", type=float, default=cohort.PH_THRESHOLD)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="fill physics columns from waveforms")
    p.add_argument("--in", dest="in_", required=True, help="directory written by synth")
    p.add_argument("--out", help="defaults to <in>/features.csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exclude-failures", action="store_true")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("tune", help="Bayesian hyperparameter search")
    common(p, 200)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("run", help="tune, then evaluate out of fold")
    common(p, 200)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="all feature-group subsets x modes x tasks")
    p.add_argument("--in", dest="in_", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=int, default=ABLATION_BUDGET)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--strategy", choices=metrics.STRATEGIES, default="f1")
    p.add_argument("--threshold", type=float, default=cohort.PH_THRESHOLD)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="print reports found under a directory")
    p.add_argument("--in", dest="in_", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (hemo.FitError, hemo.ConvergenceError) as exc:
        print(f"fit error ({exc.stage}): {exc}", file=sys.stderr)
        return EXIT_FIT
    except (OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
