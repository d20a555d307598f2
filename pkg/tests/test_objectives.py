import math

import pytest
import torch

from core.errors import DivergenceError, EmptySupervisionError, NoMaskedPatchesWarning
from core.objectives import LossWeights, da_loss, mae_loss, seg_loss, total_loss
from core.patchseq import MaskPlan, PatchGrid
from core.tensorstore import IGNORE


def test_entropy_extremes():
    uniform = torch.full((4, 3, 3), 0.25, dtype=torch.float64)
    assert abs(float(da_loss(uniform)) - 1.0) < 1e-9
    onehot = torch.zeros(4, 3, 3, dtype=torch.float64)
    onehot[2] = 1.0
    assert abs(float(da_loss(onehot))) < 1e-9


def test_entropy_needs_two_classes():
    with pytest.raises(Exception, match="2 classes"):
        da_loss(torch.ones(1, 2, 2))


def test_single_pixel_cross_entropy_is_ln2():
    pred = torch.tensor([[[0.5]], [[0.5]]], dtype=torch.float64)
    loss = seg_loss(pred, torch.tensor([[0]]))
    assert abs(float(loss) - math.log(2)) < 1e-9


def test_cross_entropy_skips_ignored_pixels():
    pred = torch.tensor([[[0.9, 0.2]], [[0.1, 0.8]]], dtype=torch.float64)
    loss = seg_loss(pred, torch.tensor([[0, IGNORE]]))
    assert abs(float(loss) + math.log(0.9)) < 1e-12


def test_empty_supervision():
    with pytest.raises(EmptySupervisionError, match="empty supervision"):
        seg_loss(torch.full((2, 2, 2), 0.5), torch.full((2, 2), IGNORE))


def test_reconstruction_perfect_and_hand_value():
    grid = PatchGrid(1, 2, 2)
    plan = MaskPlan(0.25, (0,), (1, 2, 3), 0)
    x = torch.rand(2, 2, 2, dtype=torch.float64)
    assert float(mae_loss(x, x, plan, grid)) == 0.0
    assert abs(float(mae_loss(torch.zeros(2, 2, 2), torch.ones(2, 2, 2), plan, grid)) - 1.0) < 1e-12


def test_reconstruction_ignores_unmasked_patches():
    grid = PatchGrid(1, 1, 2)
    plan = MaskPlan(0.5, (1,), (0,), 0)
    recon = torch.tensor([[[5.0, 1.0]]])
    assert float(mae_loss(recon, torch.tensor([[[0.0, 1.0]]]), plan, grid)) == 0.0


def test_no_masked_patches_warns():
    grid = PatchGrid(1, 1, 2)
    plan = MaskPlan(0.0, (), (0, 1), 0)
    with pytest.warns(NoMaskedPatchesWarning):
        assert float(mae_loss(torch.zeros(1, 1, 2), torch.ones(1, 1, 2), plan, grid)) == 0.0


def test_total_is_weighted_sum():
    parts = {k: torch.tensor(v, dtype=torch.float64) for k, v in (("seg", 0.7), ("da", 0.4), ("mae", 0.2))}
    out = total_loss(parts, LossWeights(lambda_da=0.5, lambda_mae=2.0), counts={"source": 3}, step=4)
    expected = 0.7 + 0.5 * 0.4 + 2.0 * 0.2
    assert abs(out.total - expected) <= 1e-9 * expected
    assert out.tensor is not None
    rec = out.to_record(step=4)
    assert rec["step"] == 4 and rec["counts"] == {"source": 3} and "tensor" not in rec


def test_missing_parts_count_as_zero():
    out = total_loss({"seg": torch.tensor(1.5)}, LossWeights())
    assert out.da == 0.0 and out.mae == 0.0 and out.total == pytest.approx(1.5)


def test_divergence_names_term_and_step():
    with pytest.raises(DivergenceError) as exc:
        total_loss({"seg": torch.tensor(1.0), "da": torch.tensor(float("nan"))}, LossWeights(), step=12)
    assert exc.value.term == "da" and exc.value.step == 12
    assert "step 12" in str(exc.value)


def test_weights_must_be_non_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_da=-1.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_mae=float("inf"))


def test_two_class_entropy_hand_value():
    pred = torch.tensor([[[0.9]], [[0.1]]], dtype=torch.float64)
    assert float(da_loss(pred)) == pytest.approx(0.46900, abs=5e-6)


def test_two_pixel_cross_entropy_is_the_mean():
    pred = torch.tensor([[[1.0, 0.75]], [[0.0, 0.25]]], dtype=torch.float64)
    loss = seg_loss(pred, torch.tensor([[0, 1]]))
    assert abs(float(loss) - math.log(4) / 2) < 1e-9


def test_single_masked_pixel_error():
    grid = PatchGrid(1, 1, 2)
    plan = MaskPlan(0.5, (0,), (1,), 0)
    target = torch.zeros(2, 1, 2, dtype=torch.float64)
    recon = target.clone()
    recon[:, 0, 0] = torch.tensor([3.0, 4.0], dtype=torch.float64)
    recon[:, 0, 1] = 9.0
    assert float(mae_loss(recon, target, plan, grid)) == pytest.approx(12.5, abs=1e-12)


def test_pixel_losses_ignore_order_and_duplication():
    gen = torch.Generator().manual_seed(3)
    probs = torch.rand(3, 1, 6, generator=gen, dtype=torch.float64)
    probs = probs / probs.sum(dim=0, keepdim=True)
    labels = torch.tensor([[0, 1, 2, 2, IGNORE, 1]])
    perm = torch.randperm(6, generator=gen)
    base = float(seg_loss(probs, labels))
    assert float(seg_loss(probs[:, :, perm], labels[:, perm])) == pytest.approx(base, abs=1e-12)
    doubled = float(seg_loss(torch.cat([probs, probs], dim=2), torch.cat([labels, labels], dim=1)))
    assert doubled == pytest.approx(base, abs=1e-12)

    # every patch masked, so pixels can be permuted freely
    grid = PatchGrid(1, 1, 6)
    plan = MaskPlan(1.0, tuple(range(6)), (), 0)
    recon = torch.rand(2, 1, 6, generator=gen, dtype=torch.float64)
    target = torch.rand(2, 1, 6, generator=gen, dtype=torch.float64)
    base = float(mae_loss(recon, target, plan, grid))
    assert float(mae_loss(recon[:, :, perm], target[:, :, perm], plan, grid)) == pytest.approx(base, abs=1e-12)
    grid2 = PatchGrid(1, 1, 12)
    plan2 = MaskPlan(1.0, tuple(range(12)), (), 0)
    doubled = float(mae_loss(torch.cat([recon, recon], dim=2), torch.cat([target, target], dim=2), plan2, grid2))
    assert doubled == pytest.approx(base, abs=1e-12)
