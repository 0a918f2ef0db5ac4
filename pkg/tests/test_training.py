import math
from itertools import product
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import roc_auc_score

from slmil import numerics as nx
from slmil.connectome import RoiTimeSeries
from slmil.errors import ConfigError, MetricUndefinedError
from slmil.gctrans import GctransConfig
from slmil.milhead import AttentionReport, MilConfig, init_model
from slmil.training import (MetricsRecord, TrainConfig, accuracy, auc, bce_loss, count_parameters,
                            cross_validate, make_splits, topk_occurrence, train_model)


def _scans(n_subjects, scans_per_subject=1):
    out = []
    for s in range(n_subjects):
        for j in range(scans_per_subject):
            out.append(RoiTimeSeries(f"s{s}_{j}", f"sub{s:03d}", s % 2, np.zeros((2, 3))))
    return out


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return total / (len(pos) * len(neg))


def sort_and_count(reports, k):
    n = len(reports[0].attention)
    counts = [0] * n
    for r in reports:
        ranked = sorted(range(n), key=lambda j: (-r.attention[j], r.instance_ids[j]))
        for j in ranked[:k]:
            counts[j] += 1
    return counts


def _report(a, ids=None, scan="s"):
    ids = list(range(len(a))) if ids is None else ids
    return AttentionReport(scan, "p", 0, 0.5, ids, [["X"]] * len(a), list(a))


# ------------------------------------------------------------ splits


def test_subject_scans_stay_together():
    scans = _scans(12, scans_per_subject=3)
    for plan in make_splits(scans, TrainConfig(splits=10)):
        tr, va = plan.indices(scans)
        side = {}
        for idx, name in [(j, "tr") for j in tr] + [(j, "va") for j in va]:
            side.setdefault(scans[idx].subject_id, set()).add(name)
        assert all(len(v) == 1 for v in side.values())


def test_splits_deterministic_and_seeded():
    scans = _scans(30)
    a = make_splits(scans, TrainConfig(seed=4))
    assert a == make_splits(scans, TrainConfig(seed=4))
    assert a != make_splits(scans, TrainConfig(seed=5))


def test_split_validation_count():
    scans = _scans(100)
    plans = make_splits(scans, TrainConfig(val_fraction=0.2, splits=10))
    assert len(plans) == 10
    for p in plans:
        assert 19 <= len(p.val_subjects) <= 21
        assert set(p.train_subjects).isdisjoint(p.val_subjects)
        assert set(p.train_subjects) | set(p.val_subjects) == {s.subject_id for s in scans}


def test_splits_both_classes_each_side():
    scans = _scans(8)
    labels = {s.subject_id: s.label for s in scans}
    for p in make_splits(scans, TrainConfig(val_fraction=0.25, splits=20)):
        assert {labels[s] for s in p.val_subjects} == {0, 1}
        assert {labels[s] for s in p.train_subjects} == {0, 1}


def test_stratified_splits():
    scans = _scans(40)
    labels = {s.subject_id: s.label for s in scans}
    for p in make_splits(scans, TrainConfig(stratify=True)):
        assert sum(labels[s] for s in p.val_subjects) == 4
        assert len(p.val_subjects) == 8


def test_too_few_subjects():
    with pytest.raises(ConfigError):
        make_splits(_scans(3), TrainConfig())


# ------------------------------------------------------------ loss


def test_bce_examples():
    for y in (0, 1):
        assert abs(float(bce_loss(np.array([0.5]), [y]).data[0]) - math.log(2.0)) < 1e-15
    assert float(bce_loss(np.array([1.0 - 1e-15]), [1]).data[0]) < 1e-12
    assert float(bce_loss(np.array([1e-15]), [0]).data[0]) < 1e-12
    assert math.isfinite(float(bce_loss(np.array([0.0]), [1]).data[0]))


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-9, 1 - 1e-9), st.floats(1e-9, 1 - 1e-9))
def test_bce_decreasing_for_positive(p, q):
    if p < q:
        lp = float(bce_loss(np.array([p]), [1]).data[0])
        lq = float(bce_loss(np.array([q]), [1]).data[0])
        assert lp > lq


def test_bce_grad_check(rng):
    p = nx.ParamTensor(rng.uniform(0.05, 0.95, 6))
    y = rng.integers(0, 2, 6)
    assert nx.grad_check(lambda: nx.tmean(bce_loss(p, y, pos_weight=1.7)), [p]) < 1e-7


# ------------------------------------------------------------ auc / accuracy


def test_auc_examples():
    assert auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auc([0.3] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    with pytest.raises(MetricUndefinedError):
        auc([0.1, 0.2], [1, 1])


def test_auc_brute_force(rng):
    for _ in range(100):
        scores = np.round(rng.standard_normal(20), 1)
        labels = rng.integers(0, 2, 20)
        labels[:2] = [0, 1]
        assert abs(auc(scores, labels) - brute_auc(scores, labels)) <= 1e-12
        assert abs(auc(scores, labels) - roc_auc_score(labels, scores)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(seed):
    r = np.random.default_rng(seed)
    s = np.round(r.standard_normal(15), 1)
    y = r.integers(0, 2, 15)
    y[:2] = [0, 1]
    assert auc(s, y) == auc(np.exp(3.0 * s) + 7.0, y)


def test_accuracy_examples(rng):
    y = rng.integers(0, 2, 30)
    assert accuracy(y.astype(float), y) == 1.0
    p = rng.random(30)
    assert abs(accuracy(p, 1 - y) - (1.0 - accuracy(p, y))) < 1e-15
    count = sum(int((pi >= 0.5) == yi) for pi, yi in zip(p, y))
    assert accuracy(p, y) == count / 30
    assert accuracy([0.5], [1]) == 1.0


# ------------------------------------------------------------ parameters


def test_count_single_linear():
    w, b = nx.ParamTensor(np.zeros((5, 3))), nx.ParamTensor(np.zeros(3))
    assert count_parameters(SimpleNamespace(named_params=lambda: [w, b])) == 5 * 3 + 3


def test_count_hand_computed():
    g = GctransConfig(layers=1, d_model=4, heads=2, ff_width=3, shorten=2)
    params = init_model(g, MilConfig(hidden=2), n_time=8, n_instances=21, seed=0)
    encoder = (4 + 4) + 8 + 4 * (16 + 4) + 8 + (12 + 3) + (12 + 4) + 8 + (4 + 1)
    scorer = 4 * 2 + 2 + 2 + 1  # embedding length ceil(8 / 2) = 4
    head = 4 + 1
    assert count_parameters(params) == encoder + scorer + head == 166


def test_count_independent_of_i():
    g = GctransConfig(d_model=8, heads=2, ff_width=8)
    counts = {count_parameters(init_model(g, MilConfig(), 32, k, 0)) for k in (7, 21, 35)}
    assert len(counts) == 1


def test_metrics_record_summary(rng):
    vals = list(rng.random(10))
    m = MetricsRecord(vals, vals[::-1])
    assert min(vals) <= m.auc_mean <= max(vals)
    assert abs(m.auc_std - np.std(vals)) < 1e-15
    assert m.to_dict()["acc_mean"] == m.acc_mean


# ------------------------------------------------------------ top-k


def test_topk_examples():
    r = _report([0.1, 0.5, 0.2, 0.2])
    assert topk_occurrence([r], 1).tolist() == [0, 1, 0, 0]
    assert topk_occurrence([r], 2).tolist() == [0, 1, 1, 0]  # tie goes to the lower index
    reports = [r, _report([0.4, 0.3, 0.2, 0.1])]
    assert topk_occurrence(reports, 4).tolist() == [2, 2, 2, 2]


def test_topk_sort_and_count(rng):
    for _ in range(100):
        k_inst = int(rng.integers(2, 10))
        reports = [_report(np.round(rng.dirichlet(np.ones(k_inst)), 2)) for _ in range(int(rng.integers(1, 12)))]
        k = int(rng.integers(1, k_inst + 1))
        counts = topk_occurrence(reports, k)
        assert counts.tolist() == sort_and_count(reports, k)
        assert counts.sum() == k * len(reports)


def test_topk_errors():
    with pytest.raises(ConfigError):
        topk_occurrence([_report([0.5, 0.5]), _report([0.5, 0.5], ids=[1, 0])], 1)
    with pytest.raises(ConfigError):
        topk_occurrence([_report([0.5, 0.5])], 3)
    with pytest.raises(ConfigError):
        topk_occurrence([], 1)


# ------------------------------------------------------------ training loop


GCFG = GctransConfig(layers=1, d_model=8, heads=2, ff_width=8)
MCFG = MilConfig(hidden=4)


def test_overfit_single_scan(tiny_cohort, tiny_graphs):
    _, parc = tiny_cohort
    one = [g for g in tiny_graphs if g.label == 1][:1]
    res = train_model(one, parc, 2, GCFG, MCFG,
                      TrainConfig(learning_rate=3e-2, epochs=60, batch_size=1))
    assert res.history[-1]["train_loss"] < 0.05


def test_zero_learning_rate(tiny_cohort, tiny_graphs):
    _, parc = tiny_cohort
    tcfg = TrainConfig(learning_rate=0.0, epochs=3, batch_size=4, seed=2)
    res = train_model(tiny_graphs[:8], parc, 2, GCFG, MCFG, tcfg, val_graphs=tiny_graphs[8:12])
    init_seed = nx.derive_seeds(2, 3, purpose=2)[0]
    fresh = init_model(GCFG, MCFG, 16, 21, init_seed)
    assert all(np.array_equal(a.data, b.data)
               for a, b in zip(res.params.named_params(), fresh.named_params()))
    losses = {round(h["train_loss"], 12) for h in res.history}
    val = {h["val_loss"] for h in res.history}
    assert len(losses) == 1 and len(val) == 1


def test_training_deterministic(tiny_cohort, tiny_graphs):
    _, parc = tiny_cohort
    tcfg = TrainConfig(learning_rate=3e-3, epochs=3, batch_size=4, seed=1)
    a = train_model(tiny_graphs[:8], parc, 2, GCFG, MCFG, tcfg, val_graphs=tiny_graphs[8:12])
    b = train_model(tiny_graphs[:8], parc, 2, GCFG, MCFG, tcfg, val_graphs=tiny_graphs[8:12])
    assert a.history == b.history
    assert all(x.data.tobytes() == y.data.tobytes()
               for x, y in zip(a.params.named_params(), b.params.named_params()))


def test_retained_checkpoint_not_worse_than_start(tiny_cohort, tiny_graphs):
    _, parc = tiny_cohort
    tcfg = TrainConfig(learning_rate=1e-2, epochs=6, batch_size=4, patience=2)
    res = train_model(tiny_graphs[:16], parc, 2, GCFG, MCFG, tcfg, val_graphs=tiny_graphs[16:])
    best = res.history[res.best_epoch]["val_loss"]
    assert best <= res.history[0]["val_loss"]
    assert best == min(h["val_loss"] for h in res.history)


def test_empty_training_set(tiny_cohort):
    with pytest.raises(ConfigError):
        train_model([], tiny_cohort[1], 2, GCFG, MCFG, TrainConfig())


def test_cross_validate_smoke(tiny_cohort, fast_tcfg):
    scans, parc = tiny_cohort
    res = cross_validate(scans, parc, 2, GCFG, MCFG, fast_tcfg)
    assert len(res.splits) == 2 and len(res.instance_labels) == 21
    for s in res.splits:
        assert set(s.plan.train_subjects).isdisjoint(s.plan.val_subjects)
        assert 0.0 <= s.auc <= 1.0
        assert {r.subject_id for r in s.reports} == set(s.plan.val_subjects)
        for r in s.reports:
            assert abs(sum(r.attention) - 1.0) < 1e-12
    assert res.n_params == count_parameters(res.splits[0].params)
