"""Experimental protocols, cohorts, metrics, ablation and feature importance."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import baselines, plmr
from .eventlog import CourseCatalog, EventKind, EventRecord
from .exceptions import DataError, ImportanceError, ProtocolError
from .features import (FEATURE_GROUPS, FeatureGroup, FeatureTable, attempt_instants,
                       build_feature_matrix)

logger = logging.getLogger(__name__)

PROTOCOLS = ("previous_hw", "previous_one_hw", "mix_data")
COHORTS = ("all", "partial")
MODELS = ("plmr", "meanscore", "ktidem")


def protocol_ordinals(n: int, protocol: str, target: int) -> tuple[list[int], int]:
    """Training ordinals and test ordinal for homework ``target`` of ``n``."""
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if not 1 <= target <= n:
        raise ProtocolError(f"target ordinal {target} outside 1..{n}")
    if protocol == "previous_hw":
        if target == 1:
            raise ProtocolError("previous_hw has no training data for the first homework")
        return list(range(1, target)), target
    if protocol == "previous_one_hw":
        if target == 1:
            raise ProtocolError("previous_one_hw has no training data for the first homework")
        return [target - 1], target
    return [o for o in range(1, n + 1) if o != target], target


def split_protocol(ordinals: Sequence[int], protocol: str, target: int,
                   n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Row indices ``(train, test)`` for rows keyed by homework ordinal."""
    ordinals = np.asarray(ordinals, dtype=int)
    if n is None:
        n = int(ordinals.max()) if len(ordinals) else target
    train_ord, test_ord = protocol_ordinals(n, protocol, target)
    return (np.flatnonzero(np.isin(ordinals, train_ord)), np.flatnonzero(ordinals == test_ord))


@dataclass(frozen=True)
class Cohort:
    kind: str
    members: frozenset


def submitted_homeworks(events_by_student: Mapping[str, Sequence[EventRecord]]) -> dict[str, set[str]]:
    return {s: {e.target for e in evs if e.kind is EventKind.HOMEWORK_SUBMIT}
            for s, evs in events_by_student.items()}


def partition_cohorts(submissions: Mapping[str, Iterable[str]],
                      catalog: CourseCatalog) -> dict[str, Cohort]:
    """Split students by whether they submitted every homework."""
    required = set(catalog.homeworks)
    full, partial = set(), set()
    for student, done in submissions.items():
        done = set(done) & required
        if not done:
            continue
        (full if done == required else partial).add(student)
    return {"all_hw": Cohort("all_hw", frozenset(full)),
            "partial_hw": Cohort("partial_hw", frozenset(partial))}


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("rmse of an empty sequence")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def accuracy_f1(pred, truth) -> tuple[float, float]:
    """Accuracy and F1 with class 1 (correct) as the positive class."""
    pred, truth = np.asarray(pred, dtype=int), np.asarray(truth, dtype=int)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty sequence")
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    accuracy = float(np.mean(pred == truth))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, f1


@dataclass
class MetricsReport:
    protocol: str
    target: int
    model: str
    cohort: str
    n_rows: int
    n_train: int
    rmse: float | None = None
    accuracy: float | None = None
    f1: float | None = None
    n_cold_start: int = 0
    label: str = ""
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_rows <= 0:
            raise DataError("a metrics report needs at least one test row")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentConfig:
    model: str = "plmr"
    cohort: str = "all"
    n_models: int = 5
    gamma: float = 0.0
    regularizer: str = "frobenius"
    learning_rate: float = 0.01
    max_epochs: int = 500
    tol: float = 1e-6
    seed: int = 0
    standardize: bool = True
    nonneg_memberships: bool = False
    loss: str | None = None
    line_search: bool = True
    remove_groups: tuple[str, ...] = ()
    ktidem_max_iter: int = 100
    ktidem_tol: float = 1e-5

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.cohort not in COHORTS:
            raise ValueError(f"cohort must be one of {COHORTS}")
        if self.loss not in (None, *plmr.LOSSES):
            raise ValueError(f"loss must be one of {plmr.LOSSES}")
        self.remove_groups = tuple(FeatureGroup(g).value for g in self.remove_groups)

    def label(self) -> str:
        if self.model == "plmr":
            return f"plmr_l{self.n_models}" + (f"_g{self.gamma:g}" if self.gamma else "")
        return self.model


@dataclass
class ExperimentData:
    """Everything an experiment needs, featurized once."""

    catalog: CourseCatalog
    events: Mapping[str, Sequence[EventRecord]]
    table: FeatureTable
    cohorts: dict[str, Cohort]

    @classmethod
    def prepare(cls, events: Mapping[str, Sequence[EventRecord]],
                catalog: CourseCatalog) -> "ExperimentData":
        table = build_feature_matrix(events, catalog)
        cohorts = partition_cohorts(submitted_homeworks(events), catalog)
        return cls(catalog, events, table, cohorts)

    @property
    def binary(self) -> bool:
        return self.catalog.grading == "binary"

    def cohort_table(self, cohort: str) -> FeatureTable:
        members = self.cohorts["all_hw" if cohort == "all" else "partial_hw"].members
        return self.table.subset([s in members for s in self.table.students])


@dataclass
class ExperimentResult:
    report: MetricsReport
    predictions: np.ndarray
    test: FeatureTable
    model: object = None


def _plmr_estimator(cfg: ExperimentConfig, binary: bool):
    """Logistic PLMR for binary courses unless ``cfg.loss`` says otherwise."""
    logistic = cfg.loss == "logistic" or (cfg.loss is None and binary)
    cls = plmr.PLMRClassifier if logistic else plmr.PLMRRegressor
    return cls(n_models=cfg.n_models, gamma=cfg.gamma, regularizer=cfg.regularizer,
               learning_rate=cfg.learning_rate, max_epochs=cfg.max_epochs, tol=cfg.tol,
               random_state=cfg.seed, nonneg_memberships=cfg.nonneg_memberships,
               line_search=cfg.line_search, standardize=cfg.standardize)


def unit_sequence(events: Sequence[EventRecord], catalog: CourseCatalog, homework: str,
                   include_outcome: bool) -> list[tuple[str, int]]:
    """Quiz responses of the homework's unit before its attempt, then the outcome."""
    quizzes = {q for q, h in catalog.quizzes.items() if h == homework}
    cutoff = attempt_instants(events).get(homework)
    seq = [(e.target, int(e.grade >= 0.5)) for e in events
           if e.kind is EventKind.QUIZ_ATTEMPT and e.target in quizzes
           and (cutoff is None or e.timestamp < cutoff)]
    if include_outcome:
        submit = next((e for e in events if e.kind is EventKind.HOMEWORK_SUBMIT
                       and e.target == homework), None)
        if submit is not None:
            seq.append((homework, int(submit.grade >= 0.5)))
    return seq


def _ktidem_predictions(data: ExperimentData, train: FeatureTable, test: FeatureTable,
                        cfg: ExperimentConfig):
    catalog, events = data.catalog, data.events
    sequences = [unit_sequence(events[s], catalog, h, True)
                 for s, h in zip(train.students, train.targets)]
    prefixes = [unit_sequence(events[s], catalog, h, False)
                for s, h in zip(test.students, test.targets)]
    model = baselines.ktidem_fit(sequences + prefixes, max_iter=cfg.ktidem_max_iter,
                                 tol=cfg.ktidem_tol, seed=cfg.seed)
    # unseen homework items borrow the mean homework guess/slip
    hw_items = [i for i in model.items if i in catalog.homeworks] or model.items
    guess = float(np.mean([model.guess[i] for i in hw_items]))
    slip = float(np.mean([model.slip[i] for i in hw_items]))
    probs = np.empty(len(test))
    for i, (prefix, hw) in enumerate(zip(prefixes, test.targets)):
        if hw not in model.guess:
            model = model.with_item(hw, guess, slip)
        _, mastery = baselines.predict_sequence(model, prefix)
        probs[i] = baselines.ktidem_predict(model, mastery, hw)
    return probs, model


def run_experiment(data: ExperimentData, protocol: str, target: int,
                   config: ExperimentConfig = ExperimentConfig()) -> ExperimentResult:
    """Featurize, split, fit on the training ordinals and score the target.

    PLMR test students unseen in training fall back to the Meanscore
    baseline; their count is reported as ``n_cold_start``.
    """
    cfg = config
    table = data.cohort_table(cfg.cohort)
    if cfg.remove_groups:
        table = table.drop_groups(cfg.remove_groups)
    train_idx, test_idx = split_protocol(table.ordinals, protocol, target, data.catalog.n_homeworks)
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise DataError(f"{protocol} target {target} ({cfg.cohort} cohort): empty "
                        f"{'training' if len(train_idx) == 0 else 'test'} split")
    train, test = table.subset(np.isin(np.arange(len(table)), train_idx)), table.subset(
        np.isin(np.arange(len(table)), test_idx))

    meanscore = baselines.MeanscoreBaseline().fit(table.students, table.ordinals, table.y,
                                                  fallback_grades=train.y)
    n_cold = 0
    fitted = None
    if cfg.model == "meanscore":
        pred = meanscore.predict(test.students, test.ordinals)
        fitted = meanscore
    elif cfg.model == "ktidem":
        if not data.binary:
            raise DataError("KT-IDEM predicts binary grades only")
        pred, fitted = _ktidem_predictions(data, train, test, cfg)
    else:
        est = _plmr_estimator(cfg, data.binary)
        est.fit(train.X, train.y, train.students, feature_names=table.names)
        known = est.knows(test.students)
        pred = meanscore.predict(test.students, test.ordinals)
        if known.any():
            kidx = np.flatnonzero(known)
            students = [test.students[i] for i in kidx]
            if isinstance(est, plmr.PLMRClassifier):
                pred[kidx] = est.predict_proba(test.X[kidx], students)[:, 1]
            else:
                pred[kidx] = est.predict(test.X[kidx], students)
        n_cold = int((~known).sum())
        fitted = est

    report = MetricsReport(protocol, target, cfg.model, cfg.cohort, len(test), len(train),
                           n_cold_start=n_cold, label=cfg.label(),
                           params={"n_models": cfg.n_models, "gamma": cfg.gamma,
                                   "seed": cfg.seed, "loss": cfg.loss,
                                   "remove_groups": list(cfg.remove_groups),
                                   "standardize": cfg.standardize})
    if data.binary:
        report.accuracy, report.f1 = accuracy_f1((pred >= 0.5).astype(int), test.y.astype(int))
    else:
        report.rmse = rmse(np.clip(pred, 0.0, 1.0), test.y)
    return ExperimentResult(report, pred, test, fitted)


def ablation_study(data: ExperimentData, protocol: str, target: int,
                   config: ExperimentConfig = ExperimentConfig(),
                   groups: Iterable[str] | None = None) -> dict[str, MetricsReport]:
    """Reference run plus one run per left-out feature group, same seed."""
    present = {FEATURE_GROUPS[n].value for n in data.table.names}
    groups = [FeatureGroup(g).value for g in (groups if groups is not None else
              [g.value for g in FeatureGroup if g.value in present])]
    for g in groups:
        if g not in present:
            raise DataError(f"feature group {g!r} is not in the configuration")
    out = {"none": run_experiment(data, protocol, target, config).report}
    for g in groups:
        cfg = replace(config, remove_groups=tuple(config.remove_groups) + (g,))
        out[g] = run_experiment(data, protocol, target, cfg).report
    return out


@dataclass
class ImportanceReport:
    names: tuple[str, ...]
    importance: np.ndarray
    n_samples: int
    n_skipped: int

    def to_dict(self) -> dict:
        return {"importance": dict(zip(self.names, map(float, self.importance))),
                "n_samples": self.n_samples, "n_skipped": self.n_skipped}


def feature_importance(model: plmr.PlmrModel, X, students,
                       exclude: Iterable[str] | None = None) -> ImportanceReport:
    """Average share of each feature in the absolute per-model contributions.

    For sample ``n`` of student ``s`` and feature ``i`` the share is
    ``sum_d |p_sd f_i w_di| / sum_d |p_sd sum_k f_k w_dk|``; biases take no
    part. Features in ``exclude`` (default: the Meanscore group) are left
    out of both sums. ``f`` is the row in model input space. Samples whose
    denominator is zero are skipped and counted.
    """
    names = model.feature_names or tuple(f"f{i}" for i in range(model.n_features))
    if exclude is None:
        exclude = [n for n in names if FEATURE_GROUPS.get(n) is FeatureGroup.MEANSCORE]
    exclude = set(exclude)
    keep = np.array([i for i, n in enumerate(names) if n not in exclude], dtype=int)
    Z = model.inputs(np.atleast_2d(np.asarray(X, dtype=float)))
    if len(Z) == 0:
        raise ImportanceError("feature importance needs at least one sample")
    P = model.P[model.student_index(list(students))]
    C = P[:, :, None] * Z[:, None, keep] * model.W[None, :, keep]   # (N, l, kept)
    num = np.abs(C).sum(axis=1)
    den = np.abs(C.sum(axis=2)).sum(axis=1)
    ok = den > 0
    if not ok.any():
        raise ImportanceError("every sample has a zero contribution denominator")
    shares = num[ok] / den[ok, None]
    return ImportanceReport(tuple(names[i] for i in keep), shares.mean(axis=0),
                            int(ok.sum()), int((~ok).sum()))


def _run_one(args):
    data, protocol, target, cfg = args
    return run_experiment(data, protocol, target, cfg).report


def sweep(data: ExperimentData, protocol: str, targets: Sequence[int],
          configs: Sequence[ExperimentConfig], jobs: int = 1) -> list[MetricsReport]:
    """Every (config, target) pair; results come back in input order."""
    tasks = [(data, protocol, t, c) for c in configs for t in targets]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, tasks))


def select_gamma(data: ExperimentData, protocol: str, target: int, config: ExperimentConfig,
                 grid: Sequence[float] = (0.0, 1e-5, 1e-4, 1e-3)) -> float:
    """Pick gamma by validating on the last training ordinal (inner split)."""
    train_ord, _ = protocol_ordinals(data.catalog.n_homeworks, protocol, target)
    if len(train_ord) < 2:
        return config.gamma
    inner_target = max(train_ord)
    inner = "previous_hw" if protocol != "mix_data" else "mix_data"
    if inner == "mix_data":
        keep = set(train_ord)
        table = data.table.subset([o in keep for o in data.table.ordinals])
        data = ExperimentData(data.catalog, data.events, table, data.cohorts)
    scores = []
    for g in grid:
        r = run_experiment(data, inner, inner_target, replace(config, gamma=g)).report
        scores.append(r.rmse if r.rmse is not None else -r.accuracy)
    return float(grid[int(np.argmin(scores))])


REPORT_COLUMNS = ("label", "model", "protocol", "target", "cohort", "rmse", "accuracy", "f1",
                  "n_rows", "n_train", "n_cold_start")


def write_reports(reports: Sequence[MetricsReport], json_path=None, csv_path=None):
    if json_path is not None:
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump([r.to_dict() for r in reports], f, indent=1)
            f.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in reports:
                d = r.to_dict()
                w.writerow(["" if d[c] is None else d[c] for c in REPORT_COLUMNS])


def aggregate_table(reports: Sequence[MetricsReport], metric: str | None = None):
    """Rows = target ordinal, columns = model labels, plus an ``Avg`` row."""
    if metric is None:
        metric = "rmse" if any(r.rmse is not None for r in reports) else "accuracy"
    labels = list(dict.fromkeys(r.label for r in reports))
    targets = sorted({r.target for r in reports})
    cell = {(r.target, r.label): getattr(r, metric) for r in reports}
    rows = [[t, *[cell.get((t, m)) for m in labels]] for t in targets]
    avg = []
    for j, m in enumerate(labels):
        vals = [row[j + 1] for row in rows if row[j + 1] is not None]
        avg.append(float(np.mean(vals)) if vals else None)
    rows.append(["Avg", *avg])
    return ["target", *labels], rows


def write_aggregate(reports: Sequence[MetricsReport], path, metric: str | None = None):
    header, rows = aggregate_table(reports, metric)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
                        for v in row])
