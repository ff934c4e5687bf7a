"""Comparison predictors: previous-homework mean and KT-IDEM.

KT-IDEM is Bayesian knowledge tracing with one guess and one slip
probability per item. It is fitted by EM on a two-state hidden Markov
model (unlearned / learned, no forgetting).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import DataError, ModelFormatError

logger = logging.getLogger(__name__)

PROB_MIN, PROB_MAX = 0.001, 0.999
GUESS_SLIP_MAX = 0.5


def meanscore_predict(history: Sequence[float], fallback: float) -> float:
    """Mean of previous homework grades, or ``fallback`` with no history."""
    if len(history) == 0:
        return float(fallback)
    return float(np.mean(history))


class MeanscoreBaseline(BaseEstimator):
    """Predicts each student's mean grade over homeworks before the target.

    ``fit`` receives the grade history (every known submission, not only
    training rows) and the training grades used for the cold fallback.
    """

    def fit(self, students, ordinals, grades, fallback_grades=None):
        grades = np.asarray(grades, dtype=float)
        self.history_: dict[Hashable, list[tuple[int, float]]] = {}
        for s, o, g in zip(students, ordinals, grades):
            self.history_.setdefault(s, []).append((int(o), float(g)))
        pool = grades if fallback_grades is None else np.asarray(fallback_grades, dtype=float)
        self.fallback_ = float(np.mean(pool)) if len(pool) else 0.5
        return self

    def previous(self, student, ordinal) -> list[float]:
        return [g for o, g in self.history_.get(student, ()) if o < ordinal]

    def predict(self, students, ordinals) -> np.ndarray:
        return np.array([meanscore_predict(self.previous(s, o), self.fallback_)
                         for s, o in zip(students, ordinals)], dtype=float)


@dataclass
class KtIdemModel:
    prior: float
    learn: float
    guess: dict[str, float]
    slip: dict[str, float]
    log_likelihood: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.prior = _clip(self.prior)
        self.learn = _clip(self.learn)
        self.guess = {k: _clip(v, GUESS_SLIP_MAX) for k, v in self.guess.items()}
        self.slip = {k: _clip(v, GUESS_SLIP_MAX) for k, v in self.slip.items()}

    @property
    def items(self) -> list[str]:
        return sorted(self.guess)

    def params(self, item) -> tuple[float, float]:
        try:
            return self.guess[item], self.slip[item]
        except KeyError:
            raise DataError(f"item {item!r} has no guess/slip parameters") from None

    def with_item(self, item, guess, slip) -> "KtIdemModel":
        return KtIdemModel(self.prior, self.learn, {**self.guess, item: guess},
                           {**self.slip, item: slip}, list(self.log_likelihood))

    def to_dict(self) -> dict:
        return {"prior": self.prior, "learn": self.learn,
                "guess": dict(sorted(self.guess.items())), "slip": dict(sorted(self.slip.items()))}

    @classmethod
    def from_dict(cls, doc) -> "KtIdemModel":
        try:
            return cls(float(doc["prior"]), float(doc["learn"]),
                       {k: float(v) for k, v in doc["guess"].items()},
                       {k: float(v) for k, v in doc["slip"].items()})
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ModelFormatError(f"corrupt KT-IDEM document: {exc!r}") from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"


def _clip(p, upper=PROB_MAX):
    return float(min(max(p, PROB_MIN), upper))


def p_correct(mastery: float, guess: float, slip: float) -> float:
    """BKT observation equation ``P(L)(1 - slip) + (1 - P(L)) guess``."""
    return mastery * (1.0 - slip) + (1.0 - mastery) * guess


def mastery_posterior(mastery: float, guess: float, slip: float, observed: int) -> float:
    """Bayes update of ``P(L)`` after one response."""
    if observed:
        num, alt = mastery * (1.0 - slip), (1.0 - mastery) * guess
    else:
        num, alt = mastery * slip, (1.0 - mastery) * (1.0 - guess)
    denom = num + alt
    return num / denom if denom > 0 else mastery


def learning_transition(mastery: float, learn: float) -> float:
    return mastery + (1.0 - mastery) * learn


def ktidem_predict(model: KtIdemModel, mastery: float, item) -> float:
    """P(correct) on ``item`` given P(learned) = ``mastery``."""
    return p_correct(mastery, *model.params(item))


def ktidem_posterior(model: KtIdemModel, mastery: float, item, observed: int) -> float:
    return mastery_posterior(mastery, *model.params(item), observed)


def ktidem_update(model: KtIdemModel, mastery: float, item, observed: int) -> float:
    """Condition mastery on one response, then apply the learning transition."""
    return learning_transition(ktidem_posterior(model, mastery, item, observed), model.learn)


def predict_sequence(model: KtIdemModel, sequence: Sequence[tuple[str, int]],
                     mastery: float | None = None) -> tuple[np.ndarray, float]:
    """Next-step P(correct) along ``sequence``; also returns final mastery."""
    m = model.prior if mastery is None else mastery
    out = np.empty(len(sequence))
    for t, (item, c) in enumerate(sequence):
        out[t] = ktidem_predict(model, m, item)
        m = ktidem_update(model, m, item, c)
    return out, m


def _pad(sequences, item_index):
    T = max(len(s) for s in sequences)
    n = len(sequences)
    items = np.zeros((n, T), dtype=int)
    obs = np.zeros((n, T))
    mask = np.zeros((n, T), dtype=bool)
    for i, seq in enumerate(sequences):
        for t, (item, c) in enumerate(seq):
            items[i, t] = item_index[item]
            obs[i, t] = c
            mask[i, t] = True
    return items, obs, mask


def _forward_backward(prior, learn, guess, slip, items, obs, mask):
    n, T = items.shape
    # emission likelihoods per state, padded steps emit 1
    e1 = np.where(obs == 1, 1.0 - slip[items], slip[items])
    e0 = np.where(obs == 1, guess[items], 1.0 - guess[items])
    e1 = np.where(mask, e1, 1.0)
    e0 = np.where(mask, e0, 1.0)

    a0, a1 = np.empty((n, T)), np.empty((n, T))
    scale = np.empty((n, T))
    f0, f1 = (1.0 - prior) * e0[:, 0], prior * e1[:, 0]
    for t in range(T):
        if t:
            p0, p1 = a0[:, t - 1], a1[:, t - 1]
            f0 = p0 * (1.0 - learn) * e0[:, t]
            f1 = (p0 * learn + p1) * e1[:, t]
        c = f0 + f1
        scale[:, t] = c
        a0[:, t], a1[:, t] = f0 / c, f1 / c

    b0, b1 = np.ones((n, T)), np.ones((n, T))
    for t in range(T - 2, -1, -1):
        n0 = e0[:, t + 1] * b0[:, t + 1] / scale[:, t + 1]
        n1 = e1[:, t + 1] * b1[:, t + 1] / scale[:, t + 1]
        b0[:, t] = (1.0 - learn) * n0 + learn * n1
        b1[:, t] = n1

    g0, g1 = a0 * b0, a1 * b1
    # expected 0 -> 1 transitions between steps t and t+1
    xi01 = a0[:, :-1] * learn * e1[:, 1:] * b1[:, 1:] / scale[:, 1:]
    loglik = float(np.log(scale).sum())
    return g0, g1, xi01, loglik


def ktidem_fit(sequences: Iterable[Sequence[tuple[str, int]]], items: Iterable[str] | None = None,
               max_iter: int = 100, tol: float = 1e-5, seed: int = 0) -> KtIdemModel:
    """EM fit of prior, learn and per-item guess/slip.

    ``sequences`` holds chronological ``(item, correct)`` runs, one per
    student and skill. The M-step clips each parameter to its feasible box
    (guess and slip at most 0.5), which is the exact constrained maximizer
    for these separable terms, so the likelihood trace is non-decreasing.
    Iteration stops once the per-observation log-likelihood gain drops
    below ``tol``. Items in ``items`` with no observations are skipped.
    """
    seqs = [list(s) for s in sequences if len(s)]
    if not seqs:
        raise DataError("KT-IDEM needs at least one non-empty sequence")
    for seq in seqs:
        for _, c in seq:
            if c not in (0, 1):
                raise DataError(f"responses must be binary, got {c!r}")
    seen = sorted({item for seq in seqs for item, _ in seq})
    if items is not None:
        missing = sorted(set(items) - set(seen))
        if missing:
            logger.warning("KT-IDEM: no observations for %d items, excluded: %s",
                           len(missing), missing[:10])
    index = {item: i for i, item in enumerate(seen)}
    its, obs, mask = _pad(seqs, index)
    n_obs = int(mask.sum())

    rng = np.random.default_rng(seed)
    prior = rng.uniform(0.2, 0.6)
    learn = rng.uniform(0.05, 0.3)
    guess = rng.uniform(0.1, 0.3, size=len(seen))
    slip = rng.uniform(0.05, 0.2, size=len(seen))

    trace: list[float] = []
    trans_mask = mask[:, 1:]
    for _ in range(max_iter):
        g0, g1, xi01, ll = _forward_backward(prior, learn, guess, slip, its, obs, mask)
        trace.append(ll)
        if len(trace) > 1 and (trace[-1] - trace[-2]) / n_obs < tol:
            break
        prior = _clip(g1[:, 0].mean())
        denom = (g0[:, :-1] * trans_mask).sum()
        if denom > 0:
            learn = _clip((xi01 * trans_mask).sum() / denom)
        w0 = np.where(mask, g0, 0.0)
        w1 = np.where(mask, g1, 0.0)
        s0 = np.bincount(its.ravel(), weights=w0.ravel(), minlength=len(seen))
        s1 = np.bincount(its.ravel(), weights=w1.ravel(), minlength=len(seen))
        c0 = np.bincount(its.ravel(), weights=(w0 * obs).ravel(), minlength=len(seen))
        c1 = np.bincount(its.ravel(), weights=(w1 * (1 - obs)).ravel(), minlength=len(seen))
        with np.errstate(invalid="ignore", divide="ignore"):
            guess = np.where(s0 > 0, c0 / s0, guess)
            slip = np.where(s1 > 0, c1 / s1, slip)
        guess = np.clip(guess, PROB_MIN, GUESS_SLIP_MAX)
        slip = np.clip(slip, PROB_MIN, GUESS_SLIP_MAX)
    else:
        # final parameters were updated after the last recorded E-step
        trace.append(_forward_backward(prior, learn, guess, slip, its, obs, mask)[3])

    return KtIdemModel(prior, learn, dict(zip(seen, guess.tolist())),
                       dict(zip(seen, slip.tolist())), trace)


def sequence_loglik(model: KtIdemModel, sequences) -> float:
    seqs = [list(s) for s in sequences if len(s)]
    index = {item: i for i, item in enumerate(model.items)}
    its, obs, mask = _pad(seqs, index)
    guess = np.array([model.guess[i] for i in model.items])
    slip = np.array([model.slip[i] for i in model.items])
    return _forward_backward(model.prior, model.learn, guess, slip, its, obs, mask)[3]


class KTIDEM(BaseEstimator):
    """Estimator wrapper: ``fit(sequences)`` then ``predict_proba(sequence)``."""

    def __init__(self, max_iter=100, tol=1e-5, random_state=0):
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, sequences, items=None):
        self.model_ = ktidem_fit(sequences, items, self.max_iter, self.tol,
                                 int(self.random_state or 0))
        return self

    def predict_proba(self, sequence):
        return predict_sequence(self.model_, sequence)[0]
