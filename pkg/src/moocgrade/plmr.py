"""Personalized linear multi-regression (PLMR).

A grade is predicted as ``b_s + p_s^T W f``: ``l`` shared linear models
(rows of ``W``) blended per student by a membership vector ``p_s``, plus a
per-student bias ``b_s``. Training minimizes

    loss(W, P, B) + gamma * (||P||_F + ||W||_F)

with mean squared error (regression) or mean log-loss (classification).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.metrics import accuracy_score, r2_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ColdStartError, DataError, DivergenceError, ModelFormatError
from .features import StandardizationStats, standardize

FORMAT_VERSION = 1
LOSSES = ("squared", "logistic")
REGULARIZERS = ("frobenius", "l1")


@dataclass(frozen=True)
class TrainConfig:
    n_models: int = 5
    gamma: float = 0.0
    regularizer: str = "frobenius"
    learning_rate: float = 0.01
    max_epochs: int = 500
    tol: float = 1e-6
    seed: int = 0
    init_scale: float = 0.01
    loss: str = "squared"
    freeze_memberships: bool = False
    nonneg_memberships: bool = False
    line_search: bool = True
    patience: int = 5

    def __post_init__(self):
        if self.n_models < 1:
            raise ValueError("n_models must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.learning_rate <= 0 or self.init_scale <= 0:
            raise ValueError("learning_rate and init_scale must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")


@dataclass
class Dataset:
    students: Sequence[str]
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.X.ndim != 2 or len(self.X) != len(self.y) or len(self.y) != len(self.students):
            raise DataError("students, X and y must have matching lengths and X must be 2-D")


@dataclass
class PlmrModel:
    """Fitted parameters. ``P`` rows and ``B`` entries follow ``students``."""

    students: tuple[str, ...]
    B: np.ndarray
    P: np.ndarray
    W: np.ndarray
    loss: str = "squared"
    feature_names: tuple[str, ...] | None = None
    standardization: StandardizationStats | None = None
    train_log: list[float] = field(default_factory=list)

    def __post_init__(self):
        self._index = {s: i for i, s in enumerate(self.students)}

    @property
    def n_models(self) -> int:
        return self.W.shape[0]

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    def knows(self, student) -> bool:
        return student in self._index

    def student_index(self, students) -> np.ndarray:
        missing = [s for s in dict.fromkeys(students) if s not in self._index]
        if missing:
            raise ColdStartError(missing)
        return np.array([self._index[s] for s in students], dtype=int)

    def inputs(self, X) -> np.ndarray:
        """Map raw features to the space the parameters live in."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got {X.shape[-1]}")
        return X if self.standardization is None else self.standardization.apply(X)

    def decision(self, students, X) -> np.ndarray:
        idx = self.student_index(students)
        Z = self.inputs(np.atleast_2d(X))
        return _scores(self.B, self.P, self.W, Z, idx)


def _scores(B, P, W, X, idx):
    return B[idx] + np.einsum("nd,nd->n", P[idx], X @ W.T)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def predict(model: PlmrModel, student, f) -> float:
    """``b_s + sum_d p_{s,d} sum_k f_k w_{d,k}`` for a single observation."""
    return float(model.decision([student], np.asarray(f, dtype=float)[None, :])[0])


def predict_proba(model: PlmrModel, student, f) -> float:
    return float(_sigmoid(predict(model, student, f)))


def _loss(scores, y, kind):
    if kind == "squared":
        return float(np.mean((scores - y) ** 2))
    return float(np.mean(np.logaddexp(0.0, scores) - y * scores))


def _dloss(scores, y, kind):
    n = len(y)
    if kind == "squared":
        return 2.0 * (scores - y) / n
    return (_sigmoid(scores) - y) / n


def _penalty(M, kind):
    if kind == "frobenius":
        return float(np.linalg.norm(M))
    return float(np.abs(M).sum())


def _penalty_grad(M, kind):
    if kind == "frobenius":
        norm = np.linalg.norm(M)
        return M / norm if norm > 0 else np.zeros_like(M)
    return np.sign(M)


def _objective(B, P, W, X, y, idx, cfg):
    with np.errstate(over="ignore", invalid="ignore"):
        return (_loss(_scores(B, P, W, X, idx), y, cfg.loss)
                + cfg.gamma * (_penalty(P, cfg.regularizer) + _penalty(W, cfg.regularizer)))


def objective(model: PlmrModel, dataset: Dataset, config: TrainConfig) -> float:
    """Training objective of ``model`` on ``dataset`` (raw features)."""
    if len(dataset.y) == 0:
        raise DataError("objective needs a non-empty dataset")
    idx = model.student_index(dataset.students)
    cfg = config if config.loss == model.loss else TrainConfig(**{**asdict(config), "loss": model.loss})
    return _objective(model.B, model.P, model.W, model.inputs(dataset.X), dataset.y, idx, cfg)


def train(dataset: Dataset, config: TrainConfig = TrainConfig(), *,
          feature_names=None, standardization: StandardizationStats | None = None) -> PlmrModel:
    """Fit a PLMR model by full-batch block gradient descent.

    Each epoch updates the biases, then the memberships, then the
    coefficient matrix. Bias and membership gradients are rescaled by
    ``N / n_s`` so every student's block moves at the rate of its own mean
    loss. With ``line_search`` each block step is halved until the
    objective does not increase and grows by 25% after an accepted step;
    the objective is then monotone. Without it the step is fixed at
    ``learning_rate`` and a non-finite objective raises
    :class:`DivergenceError`.

    ``dataset.X`` must already be in model input space; ``standardization``
    is only recorded on the returned model.
    """
    cfg = config
    X, y = dataset.X, dataset.y
    if len(y) == 0:
        raise DataError("cannot train on an empty dataset")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise DataError("features and grades must be finite")
    if cfg.loss == "logistic" and not np.all((y == 0) | (y == 1)):
        raise DataError("logistic loss needs binary grades")

    students = tuple(dict.fromkeys(dataset.students))
    index = {s: i for i, s in enumerate(students)}
    idx = np.array([index[s] for s in dataset.students], dtype=int)
    n_students, (N, n_features), l = len(students), X.shape, cfg.n_models
    counts = np.bincount(idx, minlength=n_students).astype(float)
    precond = N / counts
    owner = sparse.csr_matrix((np.ones(N), (idx, np.arange(N))), shape=(n_students, N))

    rng = np.random.default_rng(cfg.seed)
    if cfg.freeze_memberships:
        P = np.ones((n_students, l))
    else:
        P = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(n_students, l))
        if cfg.nonneg_memberships:
            P = np.abs(P)
    W = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(l, n_features))
    mean = float(np.mean(y))
    if cfg.loss == "logistic":
        mean = math.log(min(max(mean, 1e-3), 1 - 1e-3) / (1 - min(max(mean, 1e-3), 1 - 1e-3)))
    B = np.full(n_students, mean)

    def obj(B, P, W):
        return _objective(B, P, W, X, y, idx, cfg)

    def grads(B, P, W):
        U = X @ W.T
        g = _dloss(B[idx] + np.einsum("nd,nd->n", P[idx], U), y, cfg.loss)
        gB = np.bincount(idx, weights=g, minlength=n_students)
        gP = owner @ (g[:, None] * U)
        gW = (g[:, None] * P[idx]).T @ X
        return gB, gP, gW

    current = obj(B, P, W)
    if not math.isfinite(current):
        raise DivergenceError(0, current)
    log = [current]
    steps = {"B": cfg.learning_rate, "P": cfg.learning_rate, "W": cfg.learning_rate}
    stalled = 0
    blocks = ("B", "W") if cfg.freeze_memberships else ("B", "P", "W")

    for epoch in range(1, cfg.max_epochs + 1):
        for block in blocks:
            gB, gP, gW = grads(B, P, W)
            if block == "B":
                direction, base = gB * precond, B
            elif block == "P":
                direction = (gP + cfg.gamma * _penalty_grad(P, cfg.regularizer)) * precond[:, None]
                base = P
            else:
                direction, base = gW + cfg.gamma * _penalty_grad(W, cfg.regularizer), W

            def candidate(step):
                new = base - step * direction
                if block == "P" and cfg.nonneg_memberships:
                    new = np.maximum(new, 0.0)
                params = {"B": B, "P": P, "W": W, block: new}
                return new, obj(params["B"], params["P"], params["W"])

            if not cfg.line_search:
                new, value = candidate(steps[block])
                if not math.isfinite(value):
                    raise DivergenceError(epoch, value)
            else:
                step = steps[block]
                for _ in range(60):
                    new, value = candidate(step)
                    if math.isfinite(value) and value <= current:
                        steps[block] = min(step * 1.25, 1e8)
                        break
                    step /= 2.0
                else:
                    steps[block] = step
                    continue
            if block == "B":
                B = new
            elif block == "P":
                P = new
            else:
                W = new
            current = value

        previous = log[-1]
        log.append(current)
        rel = (previous - current) / max(abs(previous), 1e-12)
        stalled = stalled + 1 if rel < cfg.tol else 0
        if stalled >= cfg.patience:
            break

    return PlmrModel(students, B, P, W, cfg.loss,
                     tuple(feature_names) if feature_names is not None else None,
                     standardization, [float(v) for v in log])


# -- serialization ---------------------------------------------------------

def to_dict(model: PlmrModel) -> dict:
    return {
        "version": FORMAT_VERSION,
        "loss": model.loss,
        "l": model.n_models,
        "n_F": model.n_features,
        "feature_names": list(model.feature_names) if model.feature_names is not None else None,
        "standardization": model.standardization.to_dict() if model.standardization else None,
        "B": {s: float(b) for s, b in zip(model.students, model.B)},
        "P": {s: [float(v) for v in p] for s, p in zip(model.students, model.P)},
        "W": [[float(v) for v in row] for row in model.W],
        "train_log": [float(v) for v in model.train_log],
    }


def from_dict(doc) -> PlmrModel:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    if doc.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model version {doc.get('version')!r}, "
                               f"expected {FORMAT_VERSION}")
    try:
        l, n_f, loss = int(doc["l"]), int(doc["n_F"]), doc["loss"]
        B_doc, P_doc = doc["B"], doc["P"]
        W = np.array(doc["W"], dtype=float)
        students = tuple(B_doc)
        B = np.array([B_doc[s] for s in students], dtype=float)
        P = np.array([P_doc[s] for s in students], dtype=float).reshape(len(students), -1)
        names = doc.get("feature_names")
        std = doc.get("standardization")
        stats = StandardizationStats.from_dict(std) if std is not None else None
        log = [float(v) for v in doc.get("train_log", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model document: {exc!r}") from None
    if loss not in LOSSES:
        raise ModelFormatError(f"unknown loss {loss!r}")
    if set(P_doc) != set(B_doc):
        raise ModelFormatError("B and P must cover the same students")
    if W.shape != (l, n_f):
        raise ModelFormatError(f"W has shape {W.shape}, header says ({l}, {n_f})")
    if P.shape != (len(students), l):
        raise ModelFormatError(f"membership vectors must have length {l}")
    if names is not None and len(names) != n_f:
        raise ModelFormatError(f"{len(names)} feature names for n_F={n_f}")
    if stats is not None and (stats.mean.shape != (n_f,) or stats.std.shape != (n_f,)):
        raise ModelFormatError("standardization length does not match n_F")
    if not all(np.all(np.isfinite(a)) for a in (B, P, W)):
        raise ModelFormatError("non-finite parameters")
    return PlmrModel(students, B, P, W, loss, tuple(names) if names is not None else None,
                     stats, log)


def dumps(model: PlmrModel) -> str:
    return json.dumps(to_dict(model), indent=1) + "\n"


def loads(text: str) -> PlmrModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"model document is not valid JSON: {exc.msg}") from None
    return from_dict(doc)


def save(model: PlmrModel, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(model))


def load(path) -> PlmrModel:
    with open(path, encoding="utf-8") as f:
        return loads(f.read())


# -- estimators ------------------------------------------------------------

class _PLMRBase(BaseEstimator):
    _loss = "squared"

    def __init__(self, n_models=5, gamma=0.0, regularizer="frobenius", learning_rate=0.01,
                 max_epochs=500, tol=1e-6, random_state=0, init_scale=0.01,
                 freeze_memberships=False, nonneg_memberships=False, line_search=True,
                 standardize=True):
        self.n_models = n_models
        self.gamma = gamma
        self.regularizer = regularizer
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.tol = tol
        self.random_state = random_state
        self.init_scale = init_scale
        self.freeze_memberships = freeze_memberships
        self.nonneg_memberships = nonneg_memberships
        self.line_search = line_search
        self.standardize = standardize

    def _config(self) -> TrainConfig:
        return TrainConfig(n_models=self.n_models, gamma=self.gamma, regularizer=self.regularizer,
                           learning_rate=self.learning_rate, max_epochs=self.max_epochs,
                           tol=self.tol, seed=int(self.random_state or 0),
                           init_scale=self.init_scale, loss=self._loss,
                           freeze_memberships=self.freeze_memberships,
                           nonneg_memberships=self.nonneg_memberships,
                           line_search=self.line_search)

    def fit(self, X, y, students, feature_names=None):
        """Fit on rows ``X`` with grades ``y``; ``students[i]`` owns row ``i``."""
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        if len(students) != len(y):
            raise DataError("students must have one entry per row")
        stats = None
        Z = X
        if self.standardize:
            Z, stats = standardize(X)
        self.model_ = train(Dataset(list(students), Z, y), self._config(),
                            feature_names=feature_names, standardization=stats)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: PlmrModel):
        est = cls(n_models=model.n_models, standardize=model.standardization is not None)
        est.model_ = model
        est.n_features_in_ = model.n_features
        return est

    @property
    def students_(self):
        return self.model_.students

    @property
    def bias_(self):
        return self.model_.B

    @property
    def memberships_(self):
        return self.model_.P

    @property
    def coef_(self):
        return self.model_.W

    @property
    def train_log_(self):
        return self.model_.train_log

    def decision_function(self, X, students):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float, ensure_min_samples=0)
        if len(students) != len(X):
            raise DataError("students must have one entry per row")
        if len(X) == 0:
            return np.zeros(0)
        return self.model_.decision(list(students), X)

    def knows(self, students) -> np.ndarray:
        check_is_fitted(self, "model_")
        return np.array([self.model_.knows(s) for s in students], dtype=bool)


class PLMRRegressor(RegressorMixin, _PLMRBase):
    """PLMR with squared loss for continuous grades in [0, 1].

    Parameters
    ----------
    n_models : int, default=5
        Number of shared linear models ``l``.
    gamma : float, default=0.0
        Regularization weight.
    regularizer : {"frobenius", "l1"}, default="frobenius"
        Unsquared Frobenius norms of ``P`` and ``W``, or elementwise L1.
    learning_rate : float, default=0.01
        Initial (or, without line search, fixed) block step size.
    max_epochs : int, default=500
    tol : float, default=1e-6
        Stop once the relative objective decrease stays below ``tol``.
    random_state : int, default=0
        Seed for parameter initialization.
    standardize : bool, default=True
        Z-score features on the training rows before fitting.

    Attributes
    ----------
    model_ : PlmrModel
        Fitted parameters; ``bias_``, ``memberships_`` and ``coef_`` are views.
    """

    _loss = "squared"

    def predict(self, X, students, clip=False):
        pred = self.decision_function(X, students)
        return np.clip(pred, 0.0, 1.0) if clip else pred

    def score(self, X, y, students, sample_weight=None):
        return r2_score(y, self.predict(X, students), sample_weight=sample_weight)


class PLMRClassifier(ClassifierMixin, _PLMRBase):
    """PLMR with logistic loss for binary (correct / incorrect) grades."""

    _loss = "logistic"

    def fit(self, X, y, students, feature_names=None):
        super().fit(X, y, students, feature_names)
        self.classes_ = np.array([0, 1])
        return self

    @classmethod
    def from_model(cls, model: PlmrModel):
        est = super().from_model(model)
        est.classes_ = np.array([0, 1])
        return est

    def predict_proba(self, X, students):
        p = _sigmoid(self.decision_function(X, students))
        return np.column_stack([1.0 - p, p])

    def predict(self, X, students):
        return (self.predict_proba(X, students)[:, 1] >= 0.5).astype(int)

    def score(self, X, y, students, sample_weight=None):
        return accuracy_score(y, self.predict(X, students), sample_weight=sample_weight)
