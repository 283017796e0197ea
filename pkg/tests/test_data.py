import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simeval.data import (AnalystLog, Dataset, FeatureSchema, SignalSpec, SyntheticConfig, distribution_check,
                          dumps_transactions, generate_synthetic, load_analyst_log, load_transactions,
                          make_arm_splits, simulate_analyst, write_analyst_log, write_transactions)
from simeval.errors import ConfigError, DataError, IngestionError

# exact two-sided 99% binomial intervals, from scipy.stats.binom.interval
FRAUD_COUNT_99 = (260, 342)  # n = 2000, p = 0.15
FLIP_COUNT_99 = (34, 68)  # n = 500, p = 0.1
# kstwobign.isf(0.001 / 20) / sqrt(250): max over 20 features of the
# two-sample KS null at 500 vs 500 (Monte Carlo 99th percentile is 0.128)
KS_MAX_THRESHOLD_D20 = 0.1456


def small_dataset(n=5, d=3):
    rng = np.random.default_rng(1)
    return Dataset(FeatureSchema.numeric(d), [f"r{k}" for k in range(n)], rng.normal(size=(n, d)),
                   rng.uniform(1, 100, n), rng.integers(0, 2, n))


# ------------------------------------------------------------------ schema


def test_schema_rejects_duplicate_names():
    with pytest.raises(ConfigError):
        FeatureSchema(("a", "a"))


def test_schema_rejects_single_category():
    with pytest.raises(ConfigError):
        FeatureSchema(("a", "b"), (None, ("only",)))


def test_schema_counts_features():
    s = FeatureSchema(("a", "b", "c"), (None, ("x", "y"), None))
    assert s.d == 3
    assert s.categorical_mask.tolist() == [False, True, False]


# ----------------------------------------------------------------- dataset


def test_dataset_rejects_nonpositive_amount():
    with pytest.raises(DataError):
        Dataset(FeatureSchema.numeric(1), ["a"], [[0.0]], [0.0], [0])


def test_dataset_rejects_duplicate_ids():
    with pytest.raises(DataError):
        Dataset(FeatureSchema.numeric(1), ["a", "a"], [[0.0], [1.0]], [1.0, 2.0], [0, 1])


def test_dataset_rejects_bad_label_and_width():
    with pytest.raises(DataError):
        Dataset(FeatureSchema.numeric(1), ["a"], [[0.0]], [1.0], [2])
    with pytest.raises(DataError):
        Dataset(FeatureSchema.numeric(2), ["a"], [[0.0]], [1.0], [0])


def test_dataset_subset_and_positions():
    ds = small_dataset()
    sub = ds.subset(["r3", "r1"])
    assert sub.ids.tolist() == ["r3", "r1"]
    np.testing.assert_array_equal(sub.X, ds.X[[3, 1]])
    with pytest.raises(DataError):
        ds.positions(["nope"])


def test_dataset_is_immutable():
    ds = small_dataset()
    with pytest.raises(ValueError):
        ds.X[0, 0] = 1.0


# --------------------------------------------------------------- ingestion


def test_load_header_only_gives_empty_dataset(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,amount,label,f0,f1\n")
    ds = load_transactions(p, FeatureSchema.numeric(2))
    assert len(ds) == 0


def test_load_zero_amount_names_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,amount,label,f0\na,1.5,0,0.1\nb,0,1,0.2\n")
    with pytest.raises(IngestionError, match="non-positive amount at row 2"):
        load_transactions(p, FeatureSchema.numeric(1))


@pytest.mark.parametrize("body,cause", [
    ("a,1,0,0.1\na,2,1,0.2\n", "duplicate"),
    ("a,1,0\n", "malformed"),
    ("a,1,0,zz\n", "row 1"),
    ("a,1,3,0.1\n", "row 1"),
])
def test_load_rejects_bad_rows(tmp_path, body, cause):
    p = tmp_path / "t.csv"
    p.write_text("id,amount,label,f0\n" + body)
    with pytest.raises(IngestionError, match=cause):
        load_transactions(p, FeatureSchema.numeric(1))


def test_load_unknown_category(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,amount,label,f0,g\na,1,0,0.5,red\nb,1,0,0.5,blue\n")
    schema = FeatureSchema(("f0", "g"), (None, ("red", "green")))
    with pytest.raises(IngestionError, match="row 2"):
        load_transactions(p, schema)


def test_three_row_round_trip_is_byte_identical(tmp_path):
    text = "id,amount,label,f0,g\na,12.5,0,0.25,red\nb,3.0,1,-1.5,green\nc,7.75,0,2.0,red\n"
    p = tmp_path / "t.csv"
    p.write_text(text)
    schema = FeatureSchema(("f0", "g"), (None, ("red", "green")))
    ds = load_transactions(p, schema)
    assert len(ds) == 3
    assert ds.X[1].tolist() == [-1.5, 1.0]
    assert dumps_transactions(ds) == text


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 25), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_write_then_load_is_identity(tmp_path_factory, n, d, seed):
    rng = np.random.default_rng(seed)
    ds = Dataset(FeatureSchema.numeric(d), [f"id{k}" for k in range(n)], rng.normal(size=(n, d)) * 1e3,
                 rng.uniform(1e-6, 1e6, n), rng.integers(0, 2, n))
    p = tmp_path_factory.mktemp("rt") / "t.csv"
    write_transactions(ds, p)
    assert load_transactions(p, ds.schema) == ds


# --------------------------------------------------------------- synthetic


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(d=10, n=300, seed=5)
    assert generate_synthetic(cfg) == generate_synthetic(cfg)
    assert generate_synthetic(cfg) != generate_synthetic(SyntheticConfig(d=10, n=300, seed=6))


def test_noiseless_rule_holds_exactly():
    cfg = SyntheticConfig(d=4, n=1000, signal=SignalSpec((0,), (1.0,), 0.0, 0.0))
    ds = generate_synthetic(cfg)
    np.testing.assert_array_equal(ds.labels, (ds.X[:, 0] > 0).astype(int))


def test_fraud_rate_inside_binomial_interval():
    ds = generate_synthetic(SyntheticConfig(d=20, n=2000, fraud_rate=0.15, seed=11))
    lo, hi = FRAUD_COUNT_99
    assert lo <= ds.labels.sum() <= hi


def test_synthetic_amounts_positive_and_categoricals_valid():
    ds = generate_synthetic(SyntheticConfig(d=6, n=200, n_categorical=2, n_categories=3))
    assert (ds.amounts > 0).all()
    assert set(np.unique(ds.X[:, 4:])) <= {0.0, 1.0, 2.0}


@pytest.mark.parametrize("kw", [dict(n=0), dict(fraud_rate=0.0), dict(fraud_rate=1.0),
                                dict(signal=SignalSpec(())), dict(signal=SignalSpec((0,), (0.0,))),
                                dict(signal=SignalSpec((50,)))])
def test_synthetic_rejects_bad_config(kw):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(d=8, **{"n": 10, **kw}))


# ------------------------------------------------------------------ splits


def test_default_protocol_four_arms():
    ds = generate_synthetic(SyntheticConfig(d=4, n=2000))
    splits = make_arm_splits(ds, ["a", "b", "c", "d"], seed=3)
    assert len(splits) == 4
    for s in splits:
        assert len(s.train_ids) == 1000 and len(set(s.train_ids)) == 1000
        assert len(s.validation_ids) == 500
        assert not set(s.train_ids) & set(s.validation_ids)
    vals = [set(s.validation_ids) for s in splits]
    assert len(set().union(*vals)) == 2000


def test_one_arm_trains_on_the_rest():
    ds = generate_synthetic(SyntheticConfig(d=4, n=1500))
    (s,) = make_arm_splits(ds, ["only"], seed=0)
    assert s.validation_ids == tuple(ds.ids[:500])
    assert set(s.train_ids) == set(ds.ids[500:])


def test_splits_reject_small_dataset():
    ds = generate_synthetic(SyntheticConfig(d=4, n=1900))
    with pytest.raises(DataError):
        make_arm_splits(ds, ["a", "b", "c", "d"], seed=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 10**6), st.integers(0, 40))
def test_split_partition_property(n_arms, seed, extra):
    vs, ts = 20, 30
    n = max(vs * n_arms, vs + ts) + extra
    ds = generate_synthetic(SyntheticConfig(d=4, n=n, seed=1))
    splits = make_arm_splits(ds, [f"arm{k}" for k in range(n_arms)], seed, validation_size=vs, train_size=ts)
    seen = set()
    for s in splits:
        assert len(s.train_ids) == ts and len(s.validation_ids) == vs
        assert not set(s.train_ids) & set(s.validation_ids)
        assert not seen & set(s.validation_ids)
        seen |= set(s.validation_ids)
    assert splits == make_arm_splits(ds, [f"arm{k}" for k in range(n_arms)], seed, validation_size=vs, train_size=ts)


# ----------------------------------------------------------- distribution


def test_identical_sets_have_zero_ks():
    ds = small_dataset(20)
    rep = distribution_check(ds.ids, ds.ids, ds)
    assert rep.max_statistic == 0.0


def test_disjoint_support_has_ks_one():
    ds = Dataset(FeatureSchema.numeric(1), list("abcdef"), [[0], [0], [0], [1], [1], [1]], [1] * 6, [0] * 6)
    rep = distribution_check(["a", "b", "c"], ["d", "e", "f"], ds)
    assert rep.statistics["f0"] == 1.0


def test_seeded_halves_below_null_threshold():
    ds = generate_synthetic(SyntheticConfig(d=20, n=1000, seed=4))
    perm = np.random.default_rng(9).permutation(1000)
    rep = distribution_check(ds.ids[perm[:500]], ds.ids[perm[500:]], ds)
    assert rep.max_statistic < KS_MAX_THRESHOLD_D20


def test_distribution_check_unknown_id():
    ds = small_dataset()
    with pytest.raises(DataError):
        distribution_check(["r0"], ["zz"], ds)


# ----------------------------------------------------------------- analyst


def test_perfect_analyst():
    ds = generate_synthetic(SyntheticConfig(d=4, n=300))
    log = simulate_analyst(ds, (0, 0), 0, seed=1)
    expect = ["declined" if y else "approved" for y in ds.labels]
    assert log.decisions_for(ds.ids) == expect


def test_adversarial_analyst_inverts():
    ds = generate_synthetic(SyntheticConfig(d=4, n=300))
    log = simulate_analyst(ds, (1, 1), 0, seed=1)
    expect = ["approved" if y else "declined" for y in ds.labels]
    assert log.decisions_for(ds.ids) == expect


def test_flip_rate_inside_binomial_interval():
    ds = generate_synthetic(SyntheticConfig(d=4, n=500, seed=2))
    log = simulate_analyst(ds, (0.1, 0.1), 0.0, seed=8)
    flips = sum((d == "declined") != bool(y) for d, y in zip(log.decisions_for(ds.ids), ds.labels))
    lo, hi = FLIP_COUNT_99
    assert lo <= flips <= hi


def test_suspicious_only_replaces_declines():
    ds = generate_synthetic(SyntheticConfig(d=4, n=400))
    plain = simulate_analyst(ds, (0.2, 0.2), 0.0, seed=3)
    susp = simulate_analyst(ds, (0.2, 0.2), 0.5, seed=3)
    for tid in ds.ids:
        if susp[tid] == "suspicious":
            assert plain[tid] == "declined"
        else:
            assert susp[tid] == plain[tid]


def test_analyst_log_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticConfig(d=4, n=50))
    log = simulate_analyst(ds, (0.3, 0.3), 0.3, seed=0)
    write_analyst_log(log, tmp_path / "log.csv", ds.ids)
    assert load_analyst_log(tmp_path / "log.csv", ds) == log


def test_analyst_log_rejects_bad_decision_and_unknown_id(tmp_path):
    ds = small_dataset()
    p = tmp_path / "log.csv"
    p.write_text("id,decision\nr0,maybe\n")
    with pytest.raises(IngestionError, match="row 1"):
        load_analyst_log(p, ds)
    p.write_text("id,decision\nr0,approved\nzz,declined\n")
    with pytest.raises(IngestionError, match="row 2"):
        load_analyst_log(p, ds)
    with pytest.raises(DataError):
        AnalystLog({"a": "nope"})
