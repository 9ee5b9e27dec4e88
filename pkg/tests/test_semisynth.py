import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grounded_cate.data import Dataset
from grounded_cate.errors import DataError
from grounded_cate.grounding import pseudo_outcomes
from grounded_cate.semisynth import (
    InjectionSpec,
    ground_truth_outcomes,
    inject_confounding,
    lower_half,
    naive_ate,
    star_like_rct,
    star_like_tau,
)


def gt_of(t, y, q):
    ds = Dataset(np.zeros((1, 1)), ("x",), [t], [y])
    return ground_truth_outcomes(ds, q)[0]


@pytest.mark.parametrize("t, y, q, expected", [(1, 4.0, 0.5, 8.0), (0, 4.0, 0.5, -8.0), (0, 1.0, 0.428, -1.7483)])
def test_ground_truth_examples(t, y, q, expected):
    assert gt_of(t, y, q) == pytest.approx(expected, abs=1e-4)


def test_ground_truth_matches_pseudo_outcomes_exactly():
    r = np.random.default_rng(0)
    n = 500
    ds = Dataset(r.normal(size=(n, 2)), ("a", "b"), r.integers(0, 2, n), r.normal(size=n) * 10, np.full(n, 0.43))
    assert ground_truth_outcomes(ds, 0.43).tobytes() == pseudo_outcomes(ds).tobytes()


def test_ground_truth_rejects_bad_q():
    ds = Dataset(np.zeros((1, 1)), ("x",), [1], [1.0])
    for q in (0.0, 1.0):
        with pytest.raises(ValueError):
            ground_truth_outcomes(ds, q)


def test_lower_half_ties_by_row_index():
    y = np.array([5.0, 1.0, 5.0, 0.0, 5.0])
    np.testing.assert_array_equal(lower_half(np.arange(5), y), [1, 3])
    np.testing.assert_array_equal(lower_half(np.array([0, 2, 4]), y), [0])


def hundred_treated_table(seed=0):
    """Stratum A: 60 rows with 30 treated; stratum B: 40 rows with 20 treated."""
    r = np.random.default_rng(seed)
    s = np.r_[np.ones(60), np.zeros(40)]
    t = np.r_[np.ones(30), np.zeros(30), np.ones(20), np.zeros(20)].astype(int)
    x = r.normal(size=100)
    return Dataset(np.column_stack([s, x]), ("s", "x"), t, r.normal(size=100) + t)


class TestInjection:
    def test_counts_on_generated_table(self):
        res = inject_confounding(hundred_treated_table(), InjectionSpec("s", q_prime=0.5, seed=3))
        a = res.audit
        assert a["n_unc"] == 30
        assert res.unc.feature_names == ("x",) and a["split_col_dropped"]
        assert res.q == 0.5
        np.testing.assert_array_equal(res.unc.propensity, 0.5)
        assert res.conf.propensity is None
        # each stratum keeps floor(m/2) of its treated rows before UNC removal
        assert a["strata"]["A"]["treated_lower_half_size"] == 15
        assert a["strata"]["B"]["treated_lower_half_size"] == 10
        assert a["counts"]["B"]["treated"] == {"unc": 0, "conf": 10, "removed": 10}
        assert a["counts"]["B"]["control"] == {"unc": 0, "conf": 20, "removed": 0}

    def test_full_stratum_a_in_unc(self):
        res = inject_confounding(hundred_treated_table(), InjectionSpec("s", q_prime=1.0, drop_split_col=False))
        assert res.audit["n_unc"] == 60
        assert np.all(res.conf.column("s") == 0)
        assert res.eval_pool.n == 40

    def test_keep_split_col(self):
        res = inject_confounding(hundred_treated_table(), InjectionSpec("s", drop_split_col=False))
        assert res.conf.feature_names == ("s", "x")

    def test_q_override(self):
        res = inject_confounding(hundred_treated_table(), InjectionSpec("s", q=0.4))
        assert res.q == 0.4 and res.audit["q_source"] == "override"
        np.testing.assert_array_equal(res.y_gt, ground_truth_outcomes(res.eval_pool, 0.4))

    def test_deterministic(self):
        spec = InjectionSpec("s", q_prime=0.3, seed=9)
        r1 = inject_confounding(hundred_treated_table(), spec)
        r2 = inject_confounding(hundred_treated_table(), spec)
        assert r1.unc.equals(r2.unc) and r1.conf.equals(r2.conf)
        assert r1.audit == r2.audit

    def test_unc_nested_in_q_prime(self):
        ds = hundred_treated_table()
        rows = [set(inject_confounding(ds, InjectionSpec("s", q, seed=4)).unc_rows) for q in (0.1, 0.3, 0.5, 1.0)]
        assert all(a <= b for a, b in zip(rows, rows[1:]))

    def test_outputs_read_only(self):
        res = inject_confounding(hundred_treated_table(), InjectionSpec("s"))
        with pytest.raises(ValueError):
            res.y_gt[0] = 0.0

    @pytest.mark.parametrize(
        "mutate, match",
        [
            (lambda X, t: (X, t), "not among"),
            (lambda X, t: (np.column_stack([X[:, 0] * 2, X[:, 1]]), t), "binary"),
            (lambda X, t: (X, np.where(X[:, 0] == 0, 1, t)), "stratum B needs rows in both arms"),
        ],
    )
    def test_errors(self, mutate, match):
        ds = hundred_treated_table()
        X, t = mutate(ds.features, ds.treatment)
        split = "missing" if match == "not among" else "s"
        with pytest.raises(DataError, match=match):
            inject_confounding(Dataset(X, ds.feature_names, t, ds.outcome), InjectionSpec(split))

    def test_empty_unc(self):
        with pytest.raises(DataError, match="leaves UNC empty"):
            inject_confounding(hundred_treated_table(), InjectionSpec("s", q_prime=0.001))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            InjectionSpec("s", q_prime=0.0)
        with pytest.raises(ValueError):
            InjectionSpec("s", q=1.0)

    def test_write(self, tmp_path):
        res = inject_confounding(hundred_treated_table(), InjectionSpec("s", seed=1))
        res.write(tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["audit.json", "conf.csv", "eval_pool.csv", "unc.csv"]
        assert json.loads((tmp_path / "audit.json").read_text()) == res.audit
        assert (tmp_path / "eval_pool.csv").read_text().splitlines()[0].split(",")[-1] == "y_gt"
        assert (tmp_path / "unc.csv").read_text().count("\n") == res.unc.n + 1


def check_invariants(ds, spec, res):
    s = ds.column(spec.split_col)
    t = ds.treatment
    unc, conf, ev = set(res.unc_rows), set(res.conf_rows), set(res.eval_rows)
    assert not unc & conf
    assert ev == set(range(ds.n)) - unc
    assert all(s[i] == 1 for i in unc)
    for name, code in (("A", 1), ("B", 0)):
        for arm_name, arm in (("treated", 1), ("control", 0)):
            c = res.audit["counts"][name][arm_name]
            assert c["unc"] + c["conf"] + c["removed"] == int(np.sum((s == code) & (t == arm)))
        # every control outside UNC is kept
        assert res.audit["counts"][name]["control"]["removed"] == 0
    for name, code in (("A", 1), ("B", 0)):
        treated = np.flatnonzero((s == code) & (t == 1))
        kept = [i for i in treated if i in conf]
        if kept:
            dropped = [i for i in treated if i not in conf and i not in unc]
            if dropped:
                assert max(ds.outcome[kept]) <= min(ds.outcome[dropped])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), q_prime=st.floats(0.05, 1.0), data_seed=st.integers(0, 1000))
def test_invariants_hold(seed, q_prime, data_seed):
    ds = hundred_treated_table(data_seed)
    spec = InjectionSpec("s", q_prime=q_prime, seed=seed)
    check_invariants(ds, spec, inject_confounding(ds, spec))


def test_rct60_hand_counts(rct60):
    # stratum A: 12 treated (y = 12..1, lower half rows 6-11), 18 controls
    # stratum B: 9 treated, lower four are rows 30, 31, 32, 34; 21 controls
    res = inject_confounding(rct60, InjectionSpec("rural", q_prime=1.0))
    assert res.q == pytest.approx(0.35)
    assert res.audit["n_unc"] == 30 and res.audit["n_conf"] == 25 and res.audit["n_eval_pool"] == 30
    np.testing.assert_array_equal(res.conf_rows, [30, 31, 32, 34] + list(range(39, 60)))
    assert res.audit["counts"]["B"] == {
        "treated": {"unc": 0, "conf": 4, "removed": 5},
        "control": {"unc": 0, "conf": 21, "removed": 0},
    }


def test_constant_effect_recovered_by_ground_truth_mean():
    r = np.random.default_rng(3)
    n = 20_000
    t = (r.random(n) < 0.4).astype(int)
    y = r.normal(size=n) + 1.5 * t
    ds = Dataset(r.integers(0, 2, (n, 1)).astype(float), ("s",), t, y)
    gt = ground_truth_outcomes(ds, float(t.mean()))
    assert abs(gt.mean() - 1.5) < 3 * gt.std() / np.sqrt(n)


def test_naive_ate_biased_down_on_star_like_fixture():
    ds = star_like_rct(seed=0)
    res = inject_confounding(ds, InjectionSpec("rural", q_prime=0.3, seed=1))
    full = ground_truth_outcomes(ds, res.q)
    assert naive_ate(res.conf) < full.mean()


class TestStarLike:
    def test_shape_and_propensity(self):
        ds = star_like_rct(seed=1)
        assert ds.n == 4218 and ds.feature_names == ("rural", "girl", "free_lunch", "white", "age")
        assert ds.column("rural").sum() == 2811 and ds.treatment.sum() == 1805
        np.testing.assert_array_equal(ds.propensity, 1805 / 4218)

    def test_deterministic(self):
        assert star_like_rct(seed=2).equals(star_like_rct(seed=2))
        assert not star_like_rct(seed=2).equals(star_like_rct(seed=3))

    def test_ground_truth_tracks_effect(self):
        ds = star_like_rct(seed=4, n=200_000, n_a=133_000, n_treated=85_000)
        gt = ground_truth_outcomes(ds, 85_000 / 200_000)
        tau = star_like_tau(ds.column("girl"), ds.column("free_lunch"), ds.column("age"))
        assert abs(gt.mean() - tau.mean()) < 3 * gt.std() / np.sqrt(ds.n)
        assert tau.mean() > 0

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            star_like_rct(n=10, n_a=10)
