import json

import numpy as np
import pytest
from sklearn.metrics import cohen_kappa_score, f1_score, precision_score, recall_score

from oracles import brute_force_metrics, matrix_from_rates, published_rows
from shiftcd.errors import DimensionError
from shiftcd.metrics import (
    FIELDS,
    ConfusionMatrix,
    EmptyEvaluationError,
    compute_metrics,
    confusion,
    f1_from,
    format_table,
)


def test_confusion_hand_counted():
    pred = np.array([[1, 0], [0, 1]])
    ref = np.array([[1, 0], [1, 1]])
    assert confusion(pred, ref) == ConfusionMatrix(tp=2, fp=0, fn=1, tn=1)


def test_confusion_identity_and_inverse():
    rng = np.random.default_rng(0)
    ref = rng.integers(0, 2, (20, 30))
    same = confusion(ref, ref)
    assert same.fp == 0 and same.fn == 0
    inv = confusion(1 - ref, ref)
    assert inv.tp == 0 and inv.tn == 0


def test_confusion_mask_and_shape():
    pred = np.ones((3, 3))
    ref = np.zeros((3, 3))
    mask = np.zeros((3, 3), bool)
    mask[0] = True
    assert confusion(pred, ref, mask).total == 3
    with pytest.raises(DimensionError):
        confusion(pred, ref[:2])
    with pytest.raises(DimensionError):
        confusion(pred, ref, mask[:2])


def test_f1_reproduces_published_value():
    assert abs(f1_from(50.21, 59.10) - 54.30) <= 0.01


def test_perfect_prediction():
    rep = compute_metrics(ConfusionMatrix(tp=10, fp=0, fn=0, tn=90))
    assert rep.percent("oa") == 100.0
    assert rep.percent("kappa") == 100.0
    assert rep.mdr == 0.0 and rep.far == 0.0


@pytest.mark.parametrize("seed", range(25))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, 60, 4)
    rep = compute_metrics(ConfusionMatrix(*map(int, cells)))
    expect = brute_force_metrics(*map(int, cells))
    for key in FIELDS:
        got = rep.percent(key)
        if expect[key] is None:
            assert got is None, key
        else:
            assert got == pytest.approx(expect[key], abs=1e-9), key


def test_matches_sklearn():
    rng = np.random.default_rng(3)
    ref = rng.integers(0, 2, 500)
    pred = np.where(rng.random(500) < 0.8, ref, 1 - ref)
    rep = compute_metrics(confusion(pred, ref))
    assert rep.kappa == pytest.approx(cohen_kappa_score(ref, pred))
    assert rep.f1 == pytest.approx(f1_score(ref, pred))
    assert rep.precision_c == pytest.approx(precision_score(ref, pred))
    assert rep.recall_u == pytest.approx(recall_score(ref, pred, pos_label=0))


def test_undefined_metrics_are_none_not_zero():
    rep = compute_metrics(ConfusionMatrix(tp=0, fp=0, fn=0, tn=50))
    assert rep.precision_c is None and rep.recall_c is None and rep.f1 is None and rep.mdr is None
    assert rep.recall_u == 1.0
    data = json.loads(rep.to_json())
    assert data["percent"]["precision_c"] is None
    assert data["counts"] == {"tp": 0, "fp": 0, "fn": 0, "tn": 50}


def test_empty_evaluation():
    with pytest.raises(EmptyEvaluationError):
        compute_metrics(ConfusionMatrix(0, 0, 0, 0))


def test_label_swap_symmetry():
    cm = ConfusionMatrix(tp=30, fp=7, fn=12, tn=151)
    a, b = compute_metrics(cm), compute_metrics(cm.swapped())
    assert (a.precision_c, a.recall_c) == (b.precision_u, b.recall_u)
    assert (a.precision_u, a.recall_u) == (b.precision_c, b.recall_c)
    assert a.oa == b.oa
    assert a.kappa == pytest.approx(b.kappa, abs=1e-15)


def test_kappa_100_only_for_diagonal_with_both_classes():
    assert compute_metrics(ConfusionMatrix(5, 0, 0, 5)).kappa == 1.0
    assert compute_metrics(ConfusionMatrix(5, 1, 0, 5)).kappa < 1.0
    # one class only: chance agreement is 1, kappa undefined
    assert compute_metrics(ConfusionMatrix(0, 0, 0, 5)).kappa is None


def test_complementarity_on_reconstructed_published_rows():
    for row in published_rows():
        cm = ConfusionMatrix(*matrix_from_rates(row["recall_c"], row["precision_c"], row["recall_u"]))
        rep = compute_metrics(cm)
        assert abs(rep.percent("mdr") + rep.percent("recall_c") - 100) <= 0.01
        assert abs(rep.percent("far") + rep.percent("recall_u") - 100) <= 0.01
        assert abs(rep.percent("recall_c") - row["recall_c"]) < 1e-6
        assert abs(rep.percent("precision_c") - row["precision_c"]) < 1e-6


def test_printed_f1_consistent_with_precision_and_recall():
    # in two rows the printed recall is the slipped column; 100 - MDR reproduces the printed F1 there
    slipped_recall = {(1, "Code-Aligned AE"), (2, "IR-MAD")}
    for row in published_rows():
        recall = 100 - row["mdr"] if (row["table"], row["method"]) in slipped_recall else row["recall_c"]
        # inputs are rounded to 0.005, which moves F1 by up to about 0.011
        assert abs(f1_from(row["precision_c"], recall) - row["f1"]) <= 0.015, row["method"]


def test_printed_columns_erratum_rows():
    # three printed rows break MDR + recall = 100 or FAR + recall_u = 100 by a transcription slip
    bad = []
    for row in published_rows():
        if abs(row["mdr"] + row["recall_c"] - 100) > 0.01 or abs(row["far"] + row["recall_u"] - 100) > 0.01:
            bad.append((row["table"], row["method"]))
    assert bad == [(1, "Code-Aligned AE"), (2, "IR-MAD"), (3, "X-Net")]


def test_table_format_two_decimals():
    rep = compute_metrics(ConfusionMatrix(tp=2, fp=0, fn=1, tn=1))
    text = format_table({"toy": rep})
    header, line = text.splitlines()
    assert header.split()[:4] == ["Method", "OA", "Kappa", "F1"]
    assert "75.00" in line and "66.67" in line
    none_row = format_table({"x": compute_metrics(ConfusionMatrix(0, 0, 0, 3))}).splitlines()[1]
    assert " - " in none_row + " "
