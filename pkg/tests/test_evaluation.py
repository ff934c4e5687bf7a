import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moocgrade import evaluation as ev
from moocgrade import simgen
from moocgrade.eventlog import CourseCatalog, group_events
from moocgrade.exceptions import DataError, ImportanceError, ProtocolError
from moocgrade.features import FEATURE_NAMES
from moocgrade.plmr import PlmrModel


class TestProtocols:
    ORD = np.repeat(np.arange(1, 7), 2)

    def ordinals(self, protocol, target):
        train, test = ev.split_protocol(self.ORD, protocol, target, 6)
        return set(self.ORD[train].tolist()), set(self.ORD[test].tolist())

    def test_previous_hw(self):
        assert self.ordinals("previous_hw", 4) == ({1, 2, 3}, {4})

    def test_previous_one_hw(self):
        assert self.ordinals("previous_one_hw", 4) == ({3}, {4})

    def test_mix_data(self):
        assert self.ordinals("mix_data", 1) == ({2, 3, 4, 5, 6}, {1})

    @pytest.mark.parametrize("protocol", ["previous_hw", "previous_one_hw"])
    def test_first_homework_rejected(self, protocol):
        with pytest.raises(ProtocolError):
            ev.split_protocol(self.ORD, protocol, 1, 6)

    def test_bad_inputs(self):
        with pytest.raises(ProtocolError):
            ev.protocol_ordinals(6, "random", 2)
        with pytest.raises(ProtocolError):
            ev.protocol_ordinals(6, "mix_data", 7)

    @given(st.integers(2, 12), st.data())
    def test_disjoint_and_exact(self, n, data):
        protocol = data.draw(st.sampled_from(ev.PROTOCOLS))
        target = data.draw(st.integers(2, n))
        ords = np.array(data.draw(st.lists(st.integers(1, n), min_size=1, max_size=60)))
        train, test = ev.split_protocol(ords, protocol, target, n)
        assert not set(train) & set(test)
        expected, _ = ev.protocol_ordinals(n, protocol, target)
        assert set(ords[train]) <= set(expected) and set(ords[test]) <= {target}
        assert sorted(np.concatenate([train, test])) == sorted(
            np.flatnonzero(np.isin(ords, expected + [target])))


class TestCohorts:
    CAT = CourseCatalog(tuple(f"h{i}" for i in range(1, 7)), {}, {}, {})

    def test_examples(self):
        subs = {"full": [f"h{i}" for i in range(1, 7)], "half": ["h1", "h2", "h5"], "none": []}
        cohorts = ev.partition_cohorts(subs, self.CAT)
        assert cohorts["all_hw"].members == {"full"}
        assert cohorts["partial_hw"].members == {"half"}

    @given(st.dictionaries(st.text(min_size=1, max_size=4),
                           st.sets(st.sampled_from([f"h{i}" for i in range(1, 7)]))))
    def test_partition(self, subs):
        c = ev.partition_cohorts(subs, self.CAT)
        full, part = c["all_hw"].members, c["partial_hw"].members
        assert not full & part
        assert full | part == {s for s, d in subs.items() if d}


class TestMetrics:
    def test_rmse(self):
        assert ev.rmse([0.2, 0.4], [0.2, 0.4]) == 0.0
        assert ev.rmse([0, 1], [0, 0]) == pytest.approx(0.70711, abs=1e-5)
        rng = np.random.default_rng(0)
        a, b = rng.random(50), rng.random(50)
        oracle = (sum((x - y) ** 2 for x, y in zip(a, b)) / 50) ** 0.5
        assert ev.rmse(a, b) == pytest.approx(oracle, rel=1e-12) == ev.rmse(b, a)
        with pytest.raises(ValueError):
            ev.rmse([1], [1, 2])
        with pytest.raises(ValueError):
            ev.rmse([], [])

    def test_accuracy_f1(self):
        assert ev.accuracy_f1([1, 0, 1], [1, 0, 1]) == (1.0, 1.0)
        acc, f1 = ev.accuracy_f1([1, 1, 0, 0], [1, 0, 1, 0])
        assert acc == 0.5 and f1 == pytest.approx(0.5)
        assert ev.accuracy_f1([0, 0, 0], [1, 0, 1])[1] == 0.0
        with pytest.raises(ValueError):
            ev.accuracy_f1([1], [1, 0])


@pytest.fixture(scope="module")
def data(small_sim, small_events):
    return ev.ExperimentData.prepare(small_events, small_sim[1].catalog)


@pytest.fixture(scope="module")
def binary_data():
    cfg = simgen.SimConfig(seed=5, n_students=60, n_homeworks=4, grading="binary")
    res = simgen.generate_logs(cfg)
    return ev.ExperimentData.prepare(group_events(res.events), res.catalog)


FAST = dict(max_epochs=100)


class TestExperiments:
    def test_meanscore_smoke(self, data):
        r = ev.run_experiment(data, "previous_hw", 3, ev.ExperimentConfig(model="meanscore")).report
        assert np.isfinite(r.rmse) and r.n_rows > 0 and r.accuracy is None

    def test_l_sweep_one_report_each(self, data):
        cfgs = [ev.ExperimentConfig(n_models=l, **FAST) for l in (1, 5, 10, 15, 20)]
        reports = ev.sweep(data, "mix_data", [2], cfgs)
        assert [r.label for r in reports] == ["plmr_l1", "plmr_l5", "plmr_l10", "plmr_l15", "plmr_l20"]

    def test_deterministic(self, data):
        cfg = ev.ExperimentConfig(n_models=3, seed=2, **FAST)
        a = ev.run_experiment(data, "previous_hw", 4, cfg)
        b = ev.run_experiment(data, "previous_hw", 4, cfg)
        assert a.report == b.report and np.array_equal(a.predictions, b.predictions)

    def test_parallel_sweep_matches_serial(self, data):
        cfgs = [ev.ExperimentConfig(n_models=l, **FAST) for l in (1, 2)]
        assert ev.sweep(data, "previous_hw", [2, 3], cfgs, jobs=2) == ev.sweep(
            data, "previous_hw", [2, 3], cfgs, jobs=1)

    def test_cold_start_falls_back_to_meanscore(self, data):
        # previous_one_hw for the partial cohort: some test students skipped the previous homework
        cfg = ev.ExperimentConfig(cohort="partial", **FAST)
        res = ev.run_experiment(data, "previous_one_hw", 3, cfg)
        assert res.report.n_cold_start > 0
        ms = ev.run_experiment(data, "previous_one_hw", 3, dataclasses.replace(cfg, model="meanscore"))
        cold = ~res.model.knows(res.test.students)
        assert np.array_equal(res.predictions[cold], ms.predictions[cold])

    def test_cohort_rows(self, data):
        for cohort, key in (("all", "all_hw"), ("partial", "partial_hw")):
            table = data.cohort_table(cohort)
            assert set(table.students) <= data.cohorts[key].members

    def test_ktidem_needs_binary(self, data):
        with pytest.raises(DataError):
            ev.run_experiment(data, "previous_hw", 3, ev.ExperimentConfig(model="ktidem"))

    def test_binary_reports(self, binary_data):
        for model in ("plmr", "ktidem", "meanscore"):
            r = ev.run_experiment(binary_data, "previous_one_hw", 3,
                                  ev.ExperimentConfig(model=model, **FAST)).report
            assert 0 <= r.accuracy <= 1 and 0 <= r.f1 <= 1 and r.rmse is None

    def test_squared_loss_on_binary(self, binary_data):
        r = ev.run_experiment(binary_data, "mix_data", 2,
                              ev.ExperimentConfig(loss="squared", **FAST)).report
        assert 0 <= r.accuracy <= 1

    def test_empty_split(self, data):
        empty = dataclasses.replace(data, table=data.table.subset(data.table.ordinals != 1))
        with pytest.raises(DataError):
            ev.run_experiment(empty, "previous_one_hw", 2, ev.ExperimentConfig(**FAST))

    def test_select_gamma(self, data):
        grid = (0.0, 1e-4)
        assert ev.select_gamma(data, "previous_hw", 4, ev.ExperimentConfig(**FAST), grid) in grid


class TestAblation:
    def test_columns_and_reference(self, data):
        cfg = ev.ExperimentConfig(n_models=2, **FAST)
        out = ev.ablation_study(data, "mix_data", 2, cfg, groups=["session"])
        assert set(out) == {"none", "session"}
        assert out["none"] == ev.run_experiment(data, "mix_data", 2, cfg).report
        assert out["session"].params["remove_groups"] == ["session"]
        assert data.table.drop_groups(["session"]).X.shape[1] == len(FEATURE_NAMES) - 3
        assert ev.ablation_study(data, "mix_data", 2, cfg, groups=[]) == {"none": out["none"]}

    def test_unknown_group(self, data):
        with pytest.raises(ValueError):
            ev.ablation_study(data, "mix_data", 2, groups=["forum"])

    def test_removing_the_only_signal_hurts(self, data):
        nq = data.table.X[:, FEATURE_NAMES.index("NumQuiz")]
        y = 0.2 + 0.6 * (nq - nq.min()) / (nq.max() - nq.min())
        planted = dataclasses.replace(data, table=dataclasses.replace(data.table, y=y))
        out = ev.ablation_study(planted, "mix_data", 3,
                                ev.ExperimentConfig(n_models=1, max_epochs=300), groups=["quiz"])
        assert out["quiz"].rmse > out["none"].rmse


def brute_importance(m, X, students, keep):
    rows = []
    for f, s in zip(X, students):
        i = m.students.index(s)
        den = 0.0
        for d in range(m.n_models):
            den += abs(m.P[i, d] * sum(f[k] * m.W[d, k] for k in keep))
        if den == 0:
            continue
        rows.append([sum(abs(m.P[i, d] * f[k] * m.W[d, k]) for d in range(m.n_models)) / den
                     for k in keep])
    return np.mean(rows, axis=0)


class TestImportance:
    def test_single_active_feature(self):
        m = PlmrModel(("s",), np.zeros(1), np.ones((1, 1)), np.array([[1.0, 0.0]]),
                      feature_names=("NumQuiz", "AvgQuiz"))
        rep = ev.feature_importance(m, [[2.0, 5.0]], ["s"])
        assert rep.importance.tolist() == [1.0, 0.0] and rep.n_samples == 1

    def test_meanscore_excluded_by_default(self):
        rng = np.random.default_rng(0)
        m = PlmrModel(("s",), np.zeros(1), rng.normal(size=(1, 2)), rng.normal(size=(2, 22)),
                      feature_names=FEATURE_NAMES)
        rep = ev.feature_importance(m, rng.normal(size=(3, 22)), ["s"] * 3)
        assert "Meanscore" not in rep.names and len(rep.names) == 20

    def test_random_two_model_against_brute_force(self):
        rng = np.random.default_rng(7)
        m = PlmrModel(("a", "b"), rng.normal(size=2), rng.normal(size=(2, 2)), rng.normal(size=(2, 5)))
        X = rng.normal(size=(10, 5))
        students = list(rng.choice(["a", "b"], size=10))
        rep = ev.feature_importance(m, X, students)
        assert np.allclose(rep.importance, brute_importance(m, X, students, range(5)), atol=1e-12)

    def test_zero_rows_skipped(self):
        m = PlmrModel(("s",), np.zeros(1), np.ones((1, 1)), np.array([[1.0, 2.0]]))
        rep = ev.feature_importance(m, [[0.0, 0.0], [1.0, 1.0]], ["s", "s"])
        assert rep.n_skipped == 1 and rep.n_samples == 1
        with pytest.raises(ImportanceError):
            ev.feature_importance(m, [[0.0, 0.0]], ["s"])
        with pytest.raises(ImportanceError):
            ev.feature_importance(m, np.zeros((0, 2)), [])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_bounds(self, seed):
        rng = np.random.default_rng(seed)
        l, n_f = rng.integers(1, 4), rng.integers(1, 6)
        m = PlmrModel(("a", "b"), rng.normal(size=2), rng.normal(size=(2, l)),
                      rng.normal(size=(l, n_f)))
        X = rng.normal(size=(int(rng.integers(1, 8)), n_f))
        rep = ev.feature_importance(m, X, ["a"] * len(X))
        assert np.all(rep.importance >= 0) and np.all(np.isfinite(rep.importance))
        if rep.n_skipped == 0:
            assert rep.importance.sum() >= 1 - 1e-12


class TestReports:
    def test_files_and_aggregate(self, data, tmp_path):
        cfgs = [ev.ExperimentConfig(model="meanscore"), ev.ExperimentConfig(n_models=1, **FAST)]
        reports = ev.sweep(data, "previous_hw", [2, 3], cfgs)
        ev.write_reports(reports, tmp_path / "r.json", tmp_path / "r.csv")
        ev.write_aggregate(reports, tmp_path / "agg.csv")
        rows = (tmp_path / "agg.csv").read_text().splitlines()
        assert rows[0] == "target,meanscore,plmr_l1"
        assert [r.split(",")[0] for r in rows[1:]] == ["2", "3", "Avg"]
        header, table = ev.aggregate_table(reports)
        assert table[-1][1] == pytest.approx(np.mean([r.rmse for r in reports if r.model == "meanscore"]))
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 5
