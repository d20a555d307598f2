import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from core.errors import GeometryError, NoMaskedPatchesWarning
from core.evalmetrics import (
    MetricsReport,
    aggregate_seeds,
    confusion,
    evaluate_segmentation,
    mean_accuracy,
    miou,
    per_class_f1,
    per_class_iou,
    reconstruction_sweep,
)
from core.exporter import table_rows, write_sweep_json
from core.tensorstore import IGNORE, read_tensor
from core.trainer import build_model


def test_confusion_counts_and_skips_ignore():
    truth = np.array([[0, 0, 1], [1, IGNORE, 2]])
    pred = np.array([[0, 1, 1], [2, 0, 2]])
    cm = confusion(pred, truth, 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 1], [0, 0, 1]]
    assert confusion(pred, np.full((2, 3), IGNORE), 3).sum() == 0


def test_confusion_validates_inputs():
    with pytest.raises(GeometryError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)), 2)
    with pytest.raises(GeometryError, match="< 2"):
        confusion(np.array([0, 2]), np.array([0, 1]), 2)


def test_hand_computed_f1_and_iou():
    cm = np.array([[8, 2], [2, 0]])
    assert per_class_f1(cm)[0] == pytest.approx(0.8)
    assert per_class_iou(cm)[0] == pytest.approx(2 / 3)


def test_perfect_prediction():
    truth = np.array([0, 1, 2, 2])
    cm = confusion(truth, truth, 3)
    assert miou(cm) == 1.0 and mean_accuracy(cm) == 1.0
    assert per_class_f1(cm).tolist() == [1.0, 1.0, 1.0]


def test_absent_class_scores_zero_and_is_left_out_of_accuracy():
    cm = np.array([[3, 1, 0], [0, 4, 0], [0, 0, 0]])
    assert per_class_f1(cm)[2] == 0.0
    assert mean_accuracy(cm) == pytest.approx((0.75 + 1.0) / 2)
    assert mean_accuracy(np.zeros((3, 3))) == 0.0
    # the absent class still counts, as a zero, in the F1 and IoU means
    assert miou(cm) == pytest.approx((0.75 + 0.8 + 0.0) / 3)
    assert MetricsReport.from_confusion(cm).mf1 == pytest.approx((6 / 7 + 8 / 9 + 0.0) / 3)


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.int64, (4, 4), elements=st.integers(0, 50)))
def test_f1_is_a_function_of_iou(cm):
    f1, iou = per_class_f1(cm), per_class_iou(cm)
    np.testing.assert_allclose(f1, 2 * iou / (1 + iou), atol=1e-12)
    assert ((0 <= f1) & (f1 <= 1)).all()
    assert 0.0 <= miou(cm) <= 1.0 and 0.0 <= mean_accuracy(cm) <= 1.0


@given(st.lists(st.integers(0, 2), min_size=2, max_size=40), st.integers(1, 39))
def test_confusion_adds_over_splits(labels, cut):
    truth = np.array(labels)
    pred = np.roll(truth, 1)
    cut = min(cut, len(labels) - 1)
    whole = confusion(pred, truth, 3)
    parts = confusion(pred[:cut], truth[:cut], 3) + confusion(pred[cut:], truth[cut:], 3)
    assert (whole == parts).all()


def _report(m, seed):
    return MetricsReport(per_class_f1=[m, m], ma=m, miou=m, mf1=m, seeds=[seed])


def test_aggregate_mean_and_population_std():
    agg = aggregate_seeds([_report(0.3, 2), _report(0.5, 1)])
    assert agg.miou == pytest.approx(0.4) and agg.miou_std == pytest.approx(0.1)
    assert agg.per_class_f1 == pytest.approx([0.4, 0.4])
    assert agg.seeds == [1, 2]


def test_aggregate_single_seed_and_order():
    single = aggregate_seeds([_report(0.7, 0)])
    assert single.miou == 0.7 and single.miou_std == 0.0
    a = aggregate_seeds([_report(0.1, 0), _report(0.6, 1), _report(0.2, 2)])
    b = aggregate_seeds([_report(0.2, 2), _report(0.1, 0), _report(0.6, 1)])
    assert a.miou == pytest.approx(b.miou) and a.miou_std == pytest.approx(b.miou_std)


def test_aggregate_rejects_bad_input():
    with pytest.raises(ValueError):
        aggregate_seeds([])
    odd = MetricsReport(per_class_f1=[0.1, 0.2, 0.3], ma=0, miou=0, mf1=0)
    with pytest.raises(ValueError, match="inconsistent class sets"):
        aggregate_seeds([_report(0.3, 0), odd])


def test_report_dict_round_trip_and_table():
    rep = MetricsReport.from_confusion(np.array([[8, 2], [2, 8]]), seed=4)
    assert MetricsReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep
    rows = table_rows({"L_Seg": rep.to_dict()})
    assert rows[0] == ["row", "L_Seg"]
    assert rows[1] == ["class 0", "0.8000"]
    assert [r[0] for r in rows[3:]] == ["MA (Avg)", "MA (Std)", "mIoU (Avg)", "mIoU (Std)", "mF1 (Avg)", "mF1 (Std)"]


def test_segmentation_evaluation_respects_pixel_masks(tiny_pair, tiny_model_cfg):
    model = build_model(tiny_pair.source, tiny_pair.target, tiny_model_cfg, seed=0)
    none = [np.zeros((32, 32), dtype=bool) for _ in range(len(tiny_pair.target))]
    report, cm = evaluate_segmentation(model, tiny_pair.target, none)
    assert cm.sum() == 0 and report.miou == 0.0
    report, cm = evaluate_segmentation(model, tiny_pair.target, seed=3)
    assert cm.sum() == 2 * 32 * 32
    assert report.seeds == [3]
    assert model.training


def test_reconstruction_sweep(tiny_pair, tiny_model_cfg, tmp_path):
    model = build_model(tiny_pair.source, tiny_pair.target, tiny_model_cfg, seed=0)
    with pytest.warns(NoMaskedPatchesWarning):
        records = reconstruction_sweep(model, tiny_pair.source, tiny_pair.target,
                                       ratios=(0.0, 0.5, 1.0), seed=0, out_dir=tmp_path)
    assert [r.ratio for r in records] == [0.0, 0.5, 1.0]
    assert records[0].mse is None and records[0].masked_pixels == 0
    assert records[1].masked_pixels == 2 * 8 * 64
    assert records[2].masked_pixels == 2 * 32 * 32
    assert all(r.mse is not None and r.mse >= 0 for r in records[1:])
    assert set(records[2].spectral) == {"0", "1", "2"}
    assert len(records[2].spectral["0"]["recon_mean"]) == 5
    assert read_tensor(tmp_path / records[1].tensors[0]).shape == (5, 32, 32)
    write_sweep_json(tmp_path / "sweep.json", records)
    data = json.loads((tmp_path / "sweep.json").read_text())
    assert len(data["records"]) == 3 and data["records"][0]["mse"] is None
