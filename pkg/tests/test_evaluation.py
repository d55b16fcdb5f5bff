import json
from pathlib import Path

import numpy as np
import pytest

from kinform.data import TRAINED_CLASSES, DatasetError, KinshipClass, PairSample, SyntheticConfig, generate_synthetic
from kinform.evaluation import (
    ABLATION_ORDER,
    ARM_NAMES,
    ARMS,
    MAIN_ORDER,
    EvalReport,
    alpha_sweep,
    config_diff,
    evaluate,
    load_report,
    make_folds,
    mean_report,
    render_table,
    reports_to_csv,
    run_ablation,
)
from kinform.evaluation.harness import arm, n_workers
from kinform.training import ConfigError, TrainConfig, train

FIXTURE = Path(__file__).parent / "fixtures" / "published_ours.json"


class ScoreTable:
    """Stand-in model that returns fixed scores."""

    def __init__(self, scores, config=None):
        self.scores = np.asarray(scores, dtype=float)
        self.config = (config or TrainConfig()).resolved()

    def score_pairs(self, pairs, images):
        return self.scores

    def decision_thresholds(self, pairs, default):
        return np.full(len(pairs), default)


def pairs_of(kin, labels):
    return [PairSample(f"a{i}", f"b{i}", kin, int(y)) for i, y in enumerate(labels)]


# -- folds --------------------------------------------------------------------

def test_ten_families_five_folds(tiny_families):
    split = make_folds(tiny_families, 5, seed=1)
    assert [len(f) for f in split.folds] == [2] * 5


@pytest.mark.parametrize("k", [2, 3, 5, 7])
def test_folds_partition(small_dataset, k):
    split = make_folds(small_dataset, k, seed=4)
    flat = [f for fold in split.folds for f in fold]
    assert sorted(flat) == sorted(small_dataset.family_ids)
    sizes = [len(f) for f in split.folds]
    assert max(sizes) - min(sizes) <= 1
    for fam in small_dataset.family_ids:
        assert sum(fam in fold for fold in split.folds) == 1


def test_folds_deterministic(small_dataset):
    assert make_folds(small_dataset, 5, 9).to_bytes() == make_folds(small_dataset, 5, 9).to_bytes()
    assert make_folds(small_dataset, 5, 9).digest() != make_folds(small_dataset, 5, 10).digest()


def test_folds_errors(tiny_families):
    with pytest.raises(DatasetError):
        make_folds(tiny_families, 11)
    with pytest.raises(ValueError):
        make_folds(tiny_families, 1)


def test_split_is_family_disjoint(small_dataset):
    split = make_folds(small_dataset, 5, 0)
    train_ds, test_ds = split.split(small_dataset, 2)
    assert not set(train_ds.family_ids) & set(test_ds.family_ids)
    assert len(train_ds.families) + len(test_ds.families) == len(small_dataset.families)
    with pytest.raises(IndexError):
        split.split(small_dataset, 5)


# -- evaluate -----------------------------------------------------------------

def test_oracle_scores_perfect():
    labels = [1, 0, 1, 0, 1, 1, 0, 0]
    rep = evaluate(ScoreTable(np.array(labels, float)), pairs_of(KinshipClass.FS, labels), {})
    assert rep.accuracy == {"FS": 100.0} and rep.counts == {"FS": 8}


def test_constant_half_scores_give_positive_fraction():
    labels = [1, 0] * 5 + [1, 1]
    rep = evaluate(ScoreTable(np.full(12, 0.5)), pairs_of(KinshipClass.MD, labels), {})
    assert rep.accuracy["MD"] == pytest.approx(100 * 7 / 12)
    balanced = evaluate(ScoreTable(np.full(10, 0.5)), pairs_of(KinshipClass.MD, [1, 0] * 5), {})
    assert balanced.accuracy["MD"] == 50.0


def test_threshold_is_inclusive_and_reported():
    rep = evaluate(ScoreTable([0.7, 0.69]), pairs_of(KinshipClass.BB, [1, 0]), {}, threshold=0.7)
    assert rep.accuracy["BB"] == 100.0 and rep.threshold == "0.7"


def test_classes_without_head_are_skipped(small_dataset):
    cfg = TrainConfig(lr=0.01, epochs=1, classes=("FS", "MD"), seed=2)
    run = train(small_dataset, cfg)
    pairs = [p for p in __import__("kinform.data", fromlist=["balanced_pairs"]).balanced_pairs(
        small_dataset, TRAINED_CLASSES, 0) if p.kin in (KinshipClass.FS, KinshipClass.BB)]
    rep = evaluate(run, pairs, small_dataset.images)
    assert set(rep.accuracy) == {"FS"}
    assert rep.skipped == {"BB": sum(p.kin is KinshipClass.BB for p in pairs)}
    assert "skipped (no head) BB=" in render_table([rep])


def test_evaluation_is_pure(small_dataset):
    from kinform.data import balanced_pairs

    run = train(small_dataset, TrainConfig(lr=0.01, epochs=1, seed=3))
    pairs = balanced_pairs(small_dataset, TRAINED_CLASSES, 1)
    a = evaluate(run.checkpoint, pairs, small_dataset.images)
    b = evaluate(run.checkpoint, pairs, small_dataset.images)
    assert a.to_dict() == b.to_dict()
    assert a.config_digest == run.model.config.digest() and a.seed == 3


# -- reports ------------------------------------------------------------------

def test_published_fixture_row():
    rep = load_report(FIXTURE)
    assert rep.row(MAIN_ORDER, 1) == "85.9 86.3 78.0 77.4 74.9 76.9 75.6 | 79.6"


def test_published_fixture_table():
    text = render_table([load_report(FIXTURE)], MAIN_ORDER, footer=False)
    head, row = text.splitlines()
    assert head.split() == ["Method", "B-B", "S-S", "SIBS", "F-D", "F-S", "M-D", "M-S", "Avg."]
    assert row.split() == ["Ours", "85.9", "86.3", "78.0", "77.4", "74.9", "76.9", "75.6", "79.6"]


def test_unweighted_average_without_stored_value():
    data = json.loads(FIXTURE.read_text())
    data["stored_average"] = None
    rep = EvalReport.from_dict(data)
    assert rep.average == pytest.approx(555.0 / 7)


def test_ablation_column_order():
    rep = load_report(FIXTURE)
    assert rep.row(ABLATION_ORDER, 2).startswith("85.90 86.30 78.00 74.90 77.40 75.60 76.90")


def test_mean_report_averages_folds():
    a = EvalReport({"FS": 60.0, "MD": 80.0}, {"FS": 10, "MD": 10})
    b = EvalReport({"FS": 70.0, "MD": 90.0}, {"FS": 12, "MD": 8}, skipped={"BB": 3})
    m = mean_report([a, b], "avg")
    assert m.accuracy == {"MD": 85.0, "FS": 65.0} or m.accuracy == {"FS": 65.0, "MD": 85.0}
    assert m.counts == {"FS": 22, "MD": 18} and m.skipped == {"BB": 3}
    assert m.average == 75.0
    with pytest.raises(ValueError):
        mean_report([])


def test_csv_and_json_round_trip(tmp_path):
    rep = load_report(FIXTURE)
    csv_text = reports_to_csv([rep])
    assert csv_text.splitlines()[0].startswith("method,BB,SS,SIBS,FD,FS,MD,MS,average")
    assert EvalReport.from_dict(rep.to_dict()) == rep


# -- ablation plumbing --------------------------------------------------------

def test_arms_differ_by_one_key():
    base = TrainConfig().resolved()
    assert len(ARMS) == 7 and ARM_NAMES[-1] == "full"
    for a in ARMS:
        diff = config_diff(base, a.apply(base))
        assert len(diff) == (0 if a.name == "full" else 1), a.name


def test_unknown_arm():
    with pytest.raises(ConfigError):
        arm("no-such-arm")


def test_ablation_rejects_restricted(small_dataset):
    with pytest.raises(ConfigError):
        run_ablation(small_dataset, TrainConfig(protocol="restricted"))


def test_thread_setting(monkeypatch):
    monkeypatch.setenv("KINFORM_THREADS", "4")
    assert n_workers(2) == 2 and n_workers(9) == 4
    monkeypatch.setenv("KINFORM_THREADS", "x")
    with pytest.raises(ConfigError):
        n_workers(2)


@pytest.fixture(scope="module")
def small_ablation():
    ds = generate_synthetic(SyntheticConfig(n_families=25), 8)
    base = TrainConfig(lr=0.01, epochs=2, seed=8)
    return run_ablation(ds, base, arms=["embedding-only", "full"], folds=[0])


def test_small_ablation_rows(small_ablation):
    assert [n for n, _, _ in small_ablation.rows] == ["embedding-only", "full"]
    for _, test, train_rep in small_ablation.rows:
        assert set(test.accuracy) == {k.tag for k in TRAINED_CLASSES}
        assert test.fold is None and train_rep.accuracy
    assert small_ablation.report("embedding-only").threshold == "calibrated-cosine"
    assert small_ablation.gap("full") == pytest.approx(
        small_ablation.rows[1][2].average - small_ablation.rows[1][1].average)


def test_alpha_sweep_rows():
    ds = generate_synthetic(SyntheticConfig(n_families=15), 2)
    sweep = alpha_sweep(ds, [0.5, 1.0, 2.0], TrainConfig(lr=0.01, epochs=1, seed=2), k=3, folds=[0])
    assert [a for a, _ in sweep.rows] == [0.5, 1.0, 2.0]
    assert sweep.spread() == pytest.approx(max(r.average for _, r in sweep.rows) - min(r.average for _, r in sweep.rows))
    text = sweep.render()
    assert text.splitlines()[0] == "alpha  average" and len(text.splitlines()) == 5
