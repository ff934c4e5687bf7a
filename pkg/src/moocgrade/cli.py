"""Command-line entry point: ``moocgrade <command> [options]``.

Every command writes into ``--out`` (a directory) and leaves a
``manifest.json`` next to its outputs. Options resolve as command-line
flags, then the JSON ``--config`` file, then ``PLMR_SEED`` (seed only),
then built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, baselines, evaluation, plmr, simgen
from .eventlog import CourseCatalog, ingest_log
from .exceptions import DataError, DivergenceError, MoocGradeError
from .features import FeatureGroup

logger = logging.getLogger("moocgrade")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3

DEFAULTS = {
    # simulate
    "students": 200, "homeworks": 6, "quizzes_per_homework": 3, "videos_per_quiz": 1,
    "grading": "continuous", "noise": 0.01, "planted_l": 3,
    # data
    "log": None, "catalog": None, "max_drop_fraction": 0.05,
    # experiments
    "protocol": None, "target": None, "cohort": "all", "model": "plmr", "l": 5,
    "gamma": 0.0, "loss": None, "remove_group": [], "learning_rate": 0.01,
    "max_epochs": 500, "tol": 1e-6, "no_line_search": False, "no_standardize": False,
    "plmr_model": None, "targets": None, "l_grid": "1,2,3,4,5", "gamma_grid": "0",
    "models": "plmr,meanscore", "jobs": 1, "seed": 0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    """What ran, with which merged settings, on which inputs, producing what."""

    command: str
    argv: list[str]
    config: dict
    seed: int
    version: str = __version__
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def add_input(self, role, path):
        self.inputs[role] = {"path": str(path), "sha256": sha256_file(path)}

    def add_output(self, name, path, out_dir):
        self.outputs[name] = {"path": Path(path).relative_to(out_dir).as_posix(),
                              "sha256": sha256_file(path)}

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- argument parsing ------------------------------------------------------

def _common(p, data=True):
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--config", type=Path, help="JSON file of option values")
    p.add_argument("--seed", type=int, help="random seed (fallback: $PLMR_SEED, then 0)")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--log", type=Path, help="JSON-lines event log")
        p.add_argument("--catalog", type=Path, help="course catalog JSON")
        p.add_argument("--max-drop-fraction", type=float)


def _experiment(p, model_choices=evaluation.MODELS):
    p.add_argument("--protocol", choices=evaluation.PROTOCOLS)
    p.add_argument("--target", type=int, help="target homework ordinal")
    p.add_argument("--cohort", choices=evaluation.COHORTS)
    p.add_argument("--model", choices=model_choices)
    p.add_argument("--l", type=int, help="number of shared regression models")
    p.add_argument("--gamma", type=float, help="regularization weight")
    p.add_argument("--loss", choices=plmr.LOSSES,
                   help="PLMR loss (default: logistic for binary courses, else squared)")
    p.add_argument("--remove-group", action="append", choices=[g.value for g in FeatureGroup],
                   help="leave a feature group out (repeatable)")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--no-line-search", action="store_true", default=None,
                   help="fixed step size; divergence then aborts with exit code 3")
    p.add_argument("--no-standardize", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moocgrade", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic course with a planted grade model")
    _common(p, data=False)
    p.add_argument("--students", type=int)
    p.add_argument("--homeworks", type=int)
    p.add_argument("--quizzes-per-homework", type=int)
    p.add_argument("--videos-per-quiz", type=int)
    p.add_argument("--grading", choices=("continuous", "binary"))
    p.add_argument("--noise", type=float, help="grade noise standard deviation")
    p.add_argument("--planted-l", type=int, help="number of planted regression models")

    p = sub.add_parser("featurize", help="write the feature matrix of a log")
    _common(p)

    p = sub.add_parser("train", help="fit PLMR or KT-IDEM and save the model document")
    _common(p)
    _experiment(p, model_choices=("plmr", "ktidem"))

    p = sub.add_parser("evaluate", help="score one model on one protocol target")
    _common(p)
    _experiment(p)

    p = sub.add_parser("ablate", help="rerun an evaluation with each feature group left out")
    _common(p)
    _experiment(p)

    p = sub.add_parser("importance", help="feature importance of a PLMR model")
    _common(p)
    _experiment(p, model_choices=("plmr",))
    p.add_argument("--plmr-model", type=Path, help="saved model (default: train one)")

    p = sub.add_parser("sweep", help="grid of models, l and gamma over protocol targets")
    _common(p)
    _experiment(p)
    p.add_argument("--targets", help="comma-separated ordinals (default: every valid one)")
    p.add_argument("--l-grid", help="comma-separated l values")
    p.add_argument("--gamma-grid", help="comma-separated gamma values")
    p.add_argument("--models", help="comma-separated models")
    p.add_argument("--jobs", type=int, help="parallel worker processes")
    return parser


def resolve_options(args: argparse.Namespace, env=None) -> dict:
    """Merge flags > config file > $PLMR_SEED > defaults."""
    env = os.environ if env is None else env
    flags = {k: v for k, v in vars(args).items()
             if k not in ("command", "config", "out", "verbose") and v is not None}
    file_opts = {}
    if args.config is not None:
        try:
            file_opts = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(file_opts, dict):
            raise UsageError("config file must hold a JSON object")
        file_opts = {k.replace("-", "_"): v for k, v in file_opts.items()}
        unknown = sorted(set(file_opts) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    opts = dict(DEFAULTS)
    if "PLMR_SEED" in env:
        try:
            opts["seed"] = int(env["PLMR_SEED"])
        except ValueError:
            raise UsageError(f"PLMR_SEED must be an integer, got {env['PLMR_SEED']!r}") from None
    opts.update(file_opts)
    opts.update(flags)
    # only options this command understands are kept in the record
    known = set(vars(args))
    return {k: v for k, v in opts.items() if k in known}


# -- helpers ---------------------------------------------------------------

def _floats(text) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _load_data(opts, manifest):
    if opts["log"] is None or opts["catalog"] is None:
        raise UsageError("--log and --catalog are required")
    catalog = CourseCatalog.load(opts["catalog"])
    manifest.add_input("catalog", opts["catalog"])
    manifest.add_input("log", opts["log"])
    ingested = ingest_log(opts["log"], catalog, opts["max_drop_fraction"])
    logger.info("ingested %d lines, %d dropped, %d students",
                ingested.n_lines, ingested.n_dropped, ingested.n_students)
    return evaluation.ExperimentData.prepare(ingested.events, catalog)


def _experiment_config(opts, **overrides) -> evaluation.ExperimentConfig:
    kw = dict(model=opts["model"], cohort=opts["cohort"], n_models=opts["l"],
              gamma=opts["gamma"], learning_rate=opts["learning_rate"],
              max_epochs=opts["max_epochs"], tol=opts["tol"], seed=opts["seed"],
              standardize=not opts["no_standardize"], loss=opts["loss"],
              line_search=not opts["no_line_search"],
              remove_groups=tuple(opts["remove_group"] or ()))
    kw.update(overrides)
    return evaluation.ExperimentConfig(**kw)


def _require_split(opts):
    if opts["protocol"] is None or opts["target"] is None:
        raise UsageError("--protocol and --target are required")
    return opts["protocol"], opts["target"]


def _training_table(data, opts):
    """Cohort rows, cut to the protocol's training split when one is given."""
    table = data.cohort_table(opts["cohort"])
    if opts["remove_group"]:
        table = table.drop_groups(opts["remove_group"])
    if opts["protocol"] is not None or opts["target"] is not None:
        protocol, target = _require_split(opts)
        train_idx, _ = evaluation.split_protocol(table.ordinals, protocol, target,
                                                 data.catalog.n_homeworks)
        table = table.subset(np.isin(np.arange(len(table)), train_idx))
    if len(table) == 0:
        raise DataError("no training rows")
    return table


def _fit_plmr(table, opts, binary):
    est = evaluation._plmr_estimator(_experiment_config(opts), binary)
    est.fit(table.X, table.y, table.students, feature_names=table.names)
    return est.model_


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- commands --------------------------------------------------------------

def cmd_simulate(opts, out, manifest):
    cfg = simgen.SimConfig(seed=opts["seed"], n_students=opts["students"],
                           n_homeworks=opts["homeworks"],
                           quizzes_per_homework=opts["quizzes_per_homework"],
                           videos_per_quiz=opts["videos_per_quiz"], grading=opts["grading"],
                           noise_sigma=opts["noise"], n_planted_models=opts["planted_l"])
    result = simgen.generate_logs(cfg)
    paths = simgen.write_outputs(result, cfg, out)
    for name, path in paths.items():
        manifest.add_output(name, path, out)
    print(f"simulated {cfg.n_students} students, {len(result.events)} events -> {out}")


def cmd_featurize(opts, out, manifest):
    data = _load_data(opts, manifest)
    path = out / "features.csv"
    data.table.to_csv(path)
    manifest.add_output("features", path, out)
    print(f"{len(data.table)} rows x {len(data.table.names)} features -> {path}")


def cmd_train(opts, out, manifest):
    data = _load_data(opts, manifest)
    table = _training_table(data, opts)
    if opts["model"] == "ktidem":
        if not data.binary:
            raise DataError("KT-IDEM predicts binary grades only")
        seqs = [evaluation.unit_sequence(data.events[s], data.catalog, h, True)
                for s, h in zip(table.students, table.targets)]
        model = baselines.ktidem_fit(seqs, seed=opts["seed"])
        path = out / "ktidem.json"
        path.write_text(model.dumps(), encoding="utf-8")
    else:
        model = _fit_plmr(table, opts, data.binary)
        path = out / "model.json"
        plmr.save(model, path)
    manifest.add_output("model", path, out)
    print(f"trained {opts['model']} on {len(table)} rows -> {path}")


def cmd_evaluate(opts, out, manifest):
    data = _load_data(opts, manifest)
    protocol, target = _require_split(opts)
    res = evaluation.run_experiment(data, protocol, target, _experiment_config(opts))
    metrics = out / "metrics.json"
    _write_json(metrics, res.report.to_dict())
    preds = out / "predictions.csv"
    with open(preds, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["student", "target", "prediction", "grade"])
        for s, h, p, g in zip(res.test.students, res.test.targets, res.predictions, res.test.y):
            w.writerow([s, h, repr(float(p)), repr(float(g))])
    manifest.add_output("metrics", metrics, out)
    manifest.add_output("predictions", preds, out)
    r = res.report
    score = f"rmse={r.rmse:.4f}" if r.rmse is not None else f"accuracy={r.accuracy:.4f} f1={r.f1:.4f}"
    print(f"{r.label} {protocol} target {target}: {score} (n={r.n_rows}) -> {metrics}")


def cmd_ablate(opts, out, manifest):
    data = _load_data(opts, manifest)
    protocol, target = _require_split(opts)
    reports = evaluation.ablation_study(data, protocol, target,
                                        _experiment_config(opts, remove_groups=()),
                                        groups=opts["remove_group"] or None)
    path = out / "ablation.json"
    _write_json(path, {k: r.to_dict() for k, r in reports.items()})
    table = out / "ablation.csv"
    with open(table, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["removed", "rmse", "accuracy", "f1"])
        for k, r in reports.items():
            w.writerow([k, *("" if v is None else repr(v) for v in (r.rmse, r.accuracy, r.f1))])
    manifest.add_output("ablation", path, out)
    manifest.add_output("ablation_table", table, out)
    print(f"ablation over {len(reports) - 1} groups -> {path}")


def cmd_importance(opts, out, manifest):
    data = _load_data(opts, manifest)
    table = _training_table(data, opts)
    if opts["plmr_model"] is not None:
        model = plmr.load(opts["plmr_model"])
        manifest.add_input("plmr_model", opts["plmr_model"])
        if model.feature_names and tuple(model.feature_names) != tuple(table.names):
            raise DataError(
                "model features do not match the feature table")
        known = np.array([model.knows(s) for s in table.students], dtype=bool)
        table = table.subset(known)
    else:
        model = _fit_plmr(table, opts, data.binary)
    report = evaluation.feature_importance(model, table.X, table.students)
    path = out / "importance.json"
    _write_json(path, report.to_dict())
    manifest.add_output("importance", path, out)
    top = sorted(zip(report.importance, report.names), reverse=True)[:3]
    print("top features: " + ", ".join(f"{n}={v:.3f}" for v, n in top) + f" -> {path}")


def cmd_sweep(opts, out, manifest):
    data = _load_data(opts, manifest)
    if opts["protocol"] is None:
        raise UsageError("--protocol is required")
    n = data.catalog.n_homeworks
    first = 1 if opts["protocol"] == "mix_data" else 2
    targets = _ints(opts["targets"]) if opts["targets"] else list(range(first, n + 1))
    if opts["target"] is not None and not opts["targets"]:
        targets = [opts["target"]]
    configs = []
    for model in [m.strip() for m in str(opts["models"]).split(",") if m.strip()]:
        if model not in evaluation.MODELS:
            raise UsageError(f"unknown model {model!r}")
        if model == "plmr":
            configs += [_experiment_config(opts, model=model, n_models=l, gamma=g)
                        for l in _ints(opts["l_grid"]) for g in _floats(opts["gamma_grid"])]
        else:
            configs.append(_experiment_config(opts, model=model))
    reports = evaluation.sweep(data, opts["protocol"], targets, configs, jobs=opts["jobs"])
    js, table, agg = out / "reports.json", out / "reports.csv", out / "aggregate.csv"
    evaluation.write_reports(reports, js, table)
    evaluation.write_aggregate(reports, agg)
    for name, path in (("reports", js), ("reports_table", table), ("aggregate", agg)):
        manifest.add_output(name, path, out)
    print(f"{len(reports)} runs -> {agg}")


COMMANDS = {"simulate": cmd_simulate, "featurize": cmd_featurize, "train": cmd_train,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "importance": cmd_importance,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = resolve_options(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        record = {k: str(v) if isinstance(v, Path) else v for k, v in opts.items()}
        manifest = RunManifest(args.command, argv, record, opts["seed"])
        COMMANDS[args.command](opts, out, manifest)
        manifest.write(out)
    except (UsageError, ValueError) as exc:
        parser.print_usage(sys.stderr)
        print(f"moocgrade: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"moocgrade: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (MoocGradeError, OSError) as exc:
        print(f"moocgrade: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
