"""Deterministic synthetic MOOC with a planted PLMR grade model.

Students are completers (submit every homework), partials (submit a
non-empty strict subset) or auditors (never submit). Activity sits on a
fixed daily grid so that every feature value is known from the plan:

* unit ``i`` spans ``unit_days`` days and its homework is attempted on
  the unit's last day at 15:00 (+ up to 30 min) in a dedicated session;
* study sessions start at 09:00 and 20:00 (+ up to 59 min) and last well
  under two hours, so sessions never merge or cross midnight;
* a video is loaded, played from 0 and stopped at an exact watched
  position, optionally with one pause half-way.

Grades are the planted model's prediction on the planned features plus
Gaussian noise, clamped to [0, 1] (thresholded at 0.5 for binary courses).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, plmr
from .eventlog import CourseCatalog, EventKind, EventRecord, write_log
from .features import DAY, FEATURE_NAMES

ARCHETYPES = ("completer", "partial", "auditor")

# (center, scale) per planted feature: x = (f - center) / scale
_PLANT_FEATURES = {
    "NumSession": (0.9, 0.3),
    "AvgNumLogin": (0.7, 0.2),
    "AvgQuiz": (3.6, 1.6),
    "VideoPctWatch": (0.85, 0.15),
    "TimePlayVideo": (0.7, 0.12),
    "IntervalNumQuiz": (2.0, 1.4),
    "IntervalDailySession": (0.55, 0.4),
    "IntervalLogin": (0.47, 0.33),
    "Meanscore": (0.57, 0.17),
}


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    n_students: int = 200
    n_homeworks: int = 6
    quizzes_per_homework: int = 3
    videos_per_quiz: int = 1
    archetype_mix: tuple[float, float, float] = (0.7, 0.2, 0.1)
    n_planted_models: int = 3
    noise_sigma: float = 0.01
    grading: str = "continuous"
    unit_days: int = 7
    video_length: float = 600.0
    start_epoch: int = 1401580800  # 2014-06-01T00:00:00Z
    membership_concentration: float = 0.3
    effect_size: float = 0.02

    def __post_init__(self):
        if abs(sum(self.archetype_mix) - 1.0) > 1e-9 or min(self.archetype_mix) < 0:
            raise ValueError("archetype_mix must be non-negative and sum to 1")
        if self.n_homeworks < 2:
            raise ValueError("n_homeworks must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.grading not in ("continuous", "binary"):
            raise ValueError("grading must be 'continuous' or 'binary'")
        if self.unit_days < 1 or self.n_students < 1:
            raise ValueError("unit_days and n_students must be positive")

    @classmethod
    def from_dict(cls, doc) -> "SimConfig":
        doc = dict(doc)
        if "archetype_mix" in doc:
            doc["archetype_mix"] = tuple(doc["archetype_mix"])
        return cls(**doc)


@dataclass(frozen=True)
class StudentProfile:
    student: str
    archetype: str
    diligence: float    # base daily login probability, [0.3, 0.9]
    completion: float   # typical watched fraction of a video, [0.3, 1.0]
    persistence: int    # max attempts per quiz in a session, 1..3
    ability: float      # mean quiz grade, [0.3, 0.9]
    save_habit: int     # max problem saves before a submit, 0..3


@dataclass
class _Session:
    start: int
    end: int
    quizzes: list = field(default_factory=list)   # (quiz, t, grade)
    videos: list = field(default_factory=list)    # (video, watched_sec, pauses, last_t)
    saves: list = field(default_factory=list)     # homework ids
    submit: tuple | None = None                   # (homework, t, grade)


@dataclass
class SimResult:
    catalog: CourseCatalog
    events: list[EventRecord]
    profiles: list[StudentProfile]
    planted: plmr.PlmrModel
    truth: list[dict]


def generate_course(config: SimConfig) -> CourseCatalog:
    homeworks = tuple(f"hw{i}" for i in range(1, config.n_homeworks + 1))
    quizzes, videos, lengths = {}, {}, {}
    for i, hw in enumerate(homeworks, start=1):
        for j in range(1, config.quizzes_per_homework + 1):
            q = f"q{i}.{j}"
            quizzes[q] = hw
            for k in range(1, config.videos_per_quiz + 1):
                v = f"v{i}.{j}.{k}"
                videos[v] = q
                lengths[v] = float(config.video_length)
    return CourseCatalog(homeworks, quizzes, videos, lengths, config.grading)


def _profiles(config: SimConfig, rng) -> list[StudentProfile]:
    n = config.n_students
    counts = np.floor(np.array(config.archetype_mix) * n).astype(int)
    counts[0] += n - counts.sum()
    kinds = np.repeat(np.arange(3), counts)
    rng.shuffle(kinds)
    out = []
    for i, k in enumerate(kinds):
        out.append(StudentProfile(
            student=f"u{i:04d}", archetype=ARCHETYPES[k],
            diligence=float(rng.uniform(0.3, 0.9)),
            completion=float(rng.uniform(0.3, 1.0)),
            persistence=int(rng.integers(1, 4)),
            ability=float(rng.uniform(0.3, 0.9)),
            save_habit=int(rng.integers(0, 4)),
        ))
    return out


def plant_model(config: SimConfig, students, rng) -> plmr.PlmrModel:
    """Planted PLMR in raw feature space.

    Memberships are Dirichlet draws (lower concentration, more
    heterogeneous students). Each shared model weights the planted
    features with a common normal trend plus its own normal deviation.
    The IntervalMissing weight cancels the interval terms when no
    previous submission exists, so a missing interval scores as average.
    """
    l, n_f = config.n_planted_models, len(FEATURE_NAMES)
    W_norm = np.zeros((l, n_f))
    center = np.zeros(n_f)
    scale = np.ones(n_f)
    for name, (c, s) in _PLANT_FEATURES.items():
        k = FEATURE_NAMES.index(name)
        center[k], scale[k] = c, s
        W_norm[:, k] = rng.normal(0.0, config.effect_size) + rng.normal(0.0, config.effect_size, size=l)
    P = rng.dirichlet(np.full(l, config.membership_concentration), size=len(students)) * l
    b0 = rng.uniform(0.5, 0.7, size=len(students))
    W = W_norm / scale
    interval = [k for k, name in enumerate(FEATURE_NAMES)
                if name.startswith("Interval") and name != "IntervalMissing"]
    W[:, FEATURE_NAMES.index("IntervalMissing")] = W_norm[:, interval] @ (center[interval] / scale[interval])
    B = b0 - P @ (W_norm @ (center / scale))
    return plmr.PlmrModel(tuple(students), B, P, W, "squared", FEATURE_NAMES)


def _day(t):
    return t // DAY


def planned_features(sessions: list[_Session], first_t: int, attempt_t: int,
                     interval_start: int | None, video_length: float) -> dict[str, float]:
    """Feature values implied by the plan, without looking at any events."""
    prior = [s for s in sessions if s.end < attempt_t]

    def session_stats(ss, start):
        days = max(1, _day(attempt_t) - _day(start) + 1)
        if not ss:
            return 0.0, 0.0, 0.0
        return (len(ss) / days, sum(s.end - s.start for s in ss) / len(ss) / 60.0,
                len({_day(s.start) for s in ss}) / days)

    def quiz_stats(ss):
        attempts = {}
        for s in ss:
            for q, _, _ in s.quizzes:
                attempts[q] = attempts.get(q, 0) + 1
        if not attempts:
            return 0.0, 0.0
        return float(len(attempts)), sum(attempts.values()) / len(attempts)

    f = {}
    f["NumSession"], f["AvgSessionLen"], f["AvgNumLogin"] = session_stats(prior, first_t)
    f["NumQuiz"], f["AvgQuiz"] = quiz_stats(prior)

    watched, pauses = {}, 0
    for s in prior:
        for v, sec, p, _ in s.videos:
            watched[v] = watched.get(v, 0.0) + sec
            pauses += p
    watched = {v: min(sec, video_length) for v, sec in watched.items()}
    nv = len(watched)
    f["VideoNum"] = float(nv)
    f["VideoNumPause"] = pauses / nv if nv else 0.0
    f["VideoViewTime"] = sum(watched[v] for v in sorted(watched)) / 60.0
    f["VideoPctWatch"] = float(np.mean([watched[v] / video_length for v in sorted(watched)])) if nv else 0.0

    saves = {}
    for s in prior:
        for h in s.saves:
            saves[h] = saves.get(h, 0) + 1
    f["HWProblemSave"] = sum(saves.values()) / len(saves) if saves else 0.0

    span = (attempt_t - first_t) / 60.0
    quiz_times = [t for s in prior for _, t, _ in s.quizzes]
    video_times = [t for s in prior for *_, t in s.videos]
    f["TimeHwQuiz"] = min(span, (attempt_t - max(quiz_times)) / 60.0) if quiz_times else span
    f["TimeHwVideo"] = min(span, (attempt_t - max(video_times)) / 60.0) if video_times else span
    f["TimePlayVideo"] = sum(1 for s in prior if s.videos) / len(prior) if prior else 0.0
    f["HwSessions"] = float(sum(1 for s in prior if s.saves or s.submit))

    if interval_start is None:
        f.update(IntervalNumQuiz=0.0, IntervalQuizAttempt=0.0, IntervalVideo=0.0,
                 IntervalDailySession=0.0, IntervalLogin=0.0, IntervalMissing=1.0)
    else:
        inside = [s for s in prior if s.start >= interval_start]
        f["IntervalNumQuiz"], f["IntervalQuizAttempt"] = quiz_stats(inside)
        f["IntervalVideo"] = float(len({v for s in inside for v, *_ in s.videos}))
        daily, _, login = session_stats(inside, interval_start)
        f["IntervalDailySession"], f["IntervalLogin"] = daily, login
        f["IntervalMissing"] = 0.0

    grades = [g for s in prior for _, _, g in s.quizzes]
    grades += [s.submit[2] for s in prior if s.submit]
    f["Meanscore"] = float(np.mean(grades)) if grades else 0.0
    f["MeanscoreMissing"] = 0.0 if grades else 1.0
    return f


class _StudentSim:
    def __init__(self, profile: StudentProfile, config: SimConfig, catalog: CourseCatalog,
                 planted: plmr.PlmrModel, rng):
        self.p, self.cfg, self.catalog, self.planted, self.rng = profile, config, catalog, planted, rng
        self.events: list[EventRecord] = []
        self.sessions: list[_Session] = []
        self.attempts: dict[str, int] = {}
        self.truth: list[dict] = []

    def emit(self, t, kind, target, **payload):
        self.events.append(EventRecord(self.p.student, int(t), kind, target, payload))

    def study_session(self, t, unit):
        rng, cfg = self.rng, self.cfg
        session = _Session(start=t, end=t)
        unit_hw = self.catalog.homeworks[unit - 1]
        unit_videos = [v for v, q in self.catalog.videos.items() if self.catalog.quizzes[q] == unit_hw]
        seen_videos = [v for v, q in self.catalog.videos.items()
                       if self.catalog.ordinal(self.catalog.quizzes[q]) <= unit]
        n_videos = int(rng.integers(0, 3))
        n_quizzes = 0 if self.p.archetype == "auditor" and rng.random() < 0.7 else int(rng.integers(0, 3))
        if n_videos + n_quizzes == 0:
            n_videos = 1
        L = int(cfg.video_length)
        for _ in range(n_videos):
            pool = unit_videos if rng.random() < 0.7 else seen_videos
            v = pool[int(rng.integers(len(pool)))]
            frac = float(np.clip(self.p.completion + rng.normal(0, 0.2), 0.05, 1.0))
            watched = int(round(frac * L / 10.0)) * 10
            watched = max(10, min(L, watched))
            self.emit(t, EventKind.VIDEO_LOAD, v, pos=0.0)
            t += 2
            self.emit(t, EventKind.VIDEO_PLAY, v, pos=0.0)
            pauses = 0
            if rng.random() < 0.4 and watched >= 20:
                mid = watched // 2
                t += mid
                self.emit(t, EventKind.VIDEO_PAUSE, v, pos=float(mid))
                t += 30
                self.emit(t, EventKind.VIDEO_PLAY, v, pos=float(mid))
                t += watched - mid
                pauses = 1
            else:
                t += watched
            self.emit(t, EventKind.VIDEO_STOP, v, pos=float(watched))
            session.videos.append((v, float(watched), pauses, t))
            t += 20
        unit_quizzes = self.catalog.quizzes_of(unit_hw)
        for _ in range(n_quizzes):
            q = unit_quizzes[int(rng.integers(len(unit_quizzes)))]
            for _ in range(int(rng.integers(1, self.p.persistence + 1))):
                self.attempts[q] = self.attempts.get(q, 0) + 1
                g = round(float(np.clip(self.p.ability + rng.normal(0, 0.15), 0, 1)), 2)
                self.emit(t, EventKind.QUIZ_ATTEMPT, q, att=self.attempts[q], g=g)
                session.quizzes.append((q, t, g))
                t += 90
        session.end = self.events[-1].timestamp
        self.sessions.append(session)

    def homework_session(self, t, hw, interval_start):
        cfg, rng = self.cfg, self.rng
        first_t = self.events[0].timestamp
        f = planned_features(self.sessions, first_t, t, interval_start, cfg.video_length)
        x = np.array([f[n] for n in FEATURE_NAMES])
        planted = float(plmr.predict(self.planted, self.p.student, x))
        grade = float(np.clip(planted + (rng.normal(0.0, cfg.noise_sigma) if cfg.noise_sigma else 0.0),
                              0.0, 1.0))
        if cfg.grading == "binary":
            grade = float(grade >= 0.5)
        session = _Session(start=t, end=t)
        for _ in range(int(rng.integers(0, self.p.save_habit + 1))):
            self.emit(t, EventKind.PROBLEM_SAVE, hw)
            session.saves.append(hw)
            t += 120
        self.emit(t, EventKind.HOMEWORK_SUBMIT, hw, g=grade)
        session.submit = (hw, t, grade)
        session.end = t
        self.sessions.append(session)
        self.truth.append({"student": self.p.student, "target": hw, "archetype": self.p.archetype,
                           **f, "planted": planted, "grade": grade})
        return t

    def run(self, submit: set[int]):
        cfg, rng = self.cfg, self.rng
        base = cfg.start_epoch
        last_submit = None
        for unit in range(1, cfg.n_homeworks + 1):
            active = float(np.clip(self.p.diligence + rng.normal(0, 0.2), 0.05, 1.0))
            for d in range((unit - 1) * cfg.unit_days, unit * cfg.unit_days):
                day0 = base + d * DAY
                if d == 0 or rng.random() < active:
                    self.study_session(day0 + 9 * 3600 + 60 * int(rng.integers(0, 60)), unit)
                hw_day = d == unit * cfg.unit_days - 1
                if hw_day and unit in submit:
                    hw = self.catalog.homework_at(unit)
                    interval = last_submit + 1 if unit - 1 in submit and last_submit is not None else None
                    last_submit = self.homework_session(day0 + 15 * 3600 + 60 * int(rng.integers(0, 31)),
                                                        hw, interval)
                if rng.random() < 0.35 * active:
                    self.study_session(day0 + 20 * 3600 + 60 * int(rng.integers(0, 60)), unit)


def _submission_plan(profile: StudentProfile, n: int, rng) -> set[int]:
    if profile.archetype == "completer":
        return set(range(1, n + 1))
    if profile.archetype == "auditor":
        return set()
    k = int(rng.integers(1, n))
    return {int(i) + 1 for i in rng.choice(n, size=k, replace=False)}


def generate_logs(config: SimConfig, catalog: CourseCatalog | None = None) -> SimResult:
    """Simulate every student; events come back sorted by (time, student)."""
    catalog = catalog or generate_course(config)
    root = np.random.SeedSequence(config.seed)
    course_seq, *student_seqs = root.spawn(config.n_students + 1)
    rng = np.random.default_rng(course_seq)
    profiles = _profiles(config, rng)
    planted = plant_model(config, [p.student for p in profiles], rng)

    events, truth = [], []
    for profile, seq in zip(profiles, student_seqs):
        srng = np.random.default_rng(seq)
        sim = _StudentSim(profile, config, catalog, planted, srng)
        sim.run(_submission_plan(profile, config.n_homeworks, srng))
        events.extend(sim.events)
        truth.extend(sim.truth)
    events.sort(key=lambda e: (e.timestamp, e.student))
    return SimResult(catalog, events, profiles, planted, truth)


TRUTH_COLUMNS = ("student", "target", "archetype", *FEATURE_NAMES, "planted", "grade")


def write_outputs(result: SimResult, config: SimConfig, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "log": out / "log.jsonl",
        "catalog": out / "catalog.json",
        "truth": out / "truth.csv",
        "students": out / "students.csv",
        "planted_model": out / "planted_model.json",
        "sim_config": out / "sim_config.json",
    }
    write_log(result.events, paths["log"])
    result.catalog.save(paths["catalog"])
    with open(paths["truth"], "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRUTH_COLUMNS)
        for row in result.truth:
            w.writerow([row[c] if isinstance(row[c], str) else repr(float(row[c]))
                        for c in TRUTH_COLUMNS])
    with open(paths["students"], "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        cols = list(asdict(result.profiles[0])) if result.profiles else []
        w.writerow(cols)
        for p in result.profiles:
            w.writerow([getattr(p, c) for c in cols])
    plmr.save(result.planted, paths["planted_model"])
    paths["sim_config"].write_text(json.dumps(asdict(config), indent=2) + "\n", encoding="utf-8")
    return paths


def read_truth(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        for k in r:
            if k not in ("student", "target", "archetype"):
                r[k] = float(r[k])
    return rows


@dataclass
class PlantedData:
    """Feature-level planted data: training rows, held-out rows, truth."""

    train: plmr.Dataset
    ordinals: np.ndarray
    heldout: plmr.Dataset
    model: plmr.PlmrModel


def planted_dataset(n_students: int = 300, n_homeworks: int = 6, n_models: int = 3,
                    n_features: int = 10, noise_sigma: float = 0.01, n_heldout: int = 1,
                    membership_concentration: float = 0.5, seed: int = 0) -> PlantedData:
    """Planted PLMR data drawn directly in feature space, bypassing logs.

    Each student gets one training row per homework (``ordinals`` gives
    the homework position of every row) and ``n_heldout`` extra rows from
    the same model. Features are standard normal; grades are
    ``b_s + p_s^T W f`` plus Gaussian noise, clamped to [0, 1].
    """
    rng = np.random.default_rng(seed)
    students = [f"u{i:04d}" for i in range(n_students)]
    # models agree on a common trend and differ around it
    W = (rng.normal(0.0, 0.015, size=n_features)
         + rng.normal(0.0, 0.015, size=(n_models, n_features)))
    P = rng.dirichlet(np.full(n_models, membership_concentration), size=n_students) * n_models
    B = rng.uniform(0.4, 0.6, size=n_students)
    planted = plmr.PlmrModel(tuple(students), B, P, W)

    def rows(k):
        owner = np.repeat(np.arange(n_students), k)
        X = rng.normal(size=(len(owner), n_features))
        y = B[owner] + np.einsum("nd,nd->n", P[owner], X @ W.T)
        if noise_sigma:
            y = y + rng.normal(0.0, noise_sigma, size=len(y))
        return plmr.Dataset([students[i] for i in owner], X, np.clip(y, 0.0, 1.0))

    train = rows(n_homeworks)
    ordinals = np.tile(np.arange(1, n_homeworks + 1), n_students)
    return PlantedData(train, ordinals, rows(n_heldout), planted)


def simulate_responses(model: "baselines.KtIdemModel", n_students: int, items, seed: int = 0):
    """Response sequences drawn from a KT-IDEM model.

    Every student answers ``items`` in order. Mastery starts from the
    prior, each answer is correct with probability ``1 - slip`` when
    mastered and ``guess`` otherwise, and an unmastered student learns
    after each step with probability ``learn``.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_students):
        mastered = rng.random() < model.prior
        seq = []
        for item in items:
            guess, slip = model.params(item)
            p = 1.0 - slip if mastered else guess
            seq.append((item, int(rng.random() < p)))
            if not mastered:
                mastered = rng.random() < model.learn
        out.append(seq)
    return out
