import math

import pytest
import torch
import torch.nn.functional as F

from carotidseg.losses import focal_loss, prompt_loss, seg_loss, soft_dice_loss


def test_perfect_logits_give_near_zero_loss():
    target = torch.randint(0, 3, (1, 4, 4, 4))
    logits = F.one_hot(target, 3).movedim(-1, 1).float() * 40.0
    assert float(seg_loss(logits, target)) < 1e-3


def test_uniform_logits_ce_is_log3():
    target = torch.randint(0, 3, (2, 3, 3, 3))
    _, parts = seg_loss(torch.zeros(2, 3, 3, 3, 3), target, return_components=True)
    assert parts["ce"] == pytest.approx(math.log(3), abs=1e-6)


def test_loss_weights():
    torch.manual_seed(0)
    logits = torch.randn(1, 3, 4, 4, 4)
    target = torch.randint(0, 3, (1, 4, 4, 4))
    _, p = seg_loss(logits, target, return_components=True)
    assert float(seg_loss(logits, target, 2.0, 0.5)) == pytest.approx(2 * p["ce"] + 0.5 * p["dice"], rel=1e-6)


def test_soft_dice_hand_value():
    probs = torch.tensor([[[0.5, 0.5]], [[0.5, 0.5]]]).reshape(1, 2, 2)
    onehot = torch.tensor([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 2)
    # per class: 2*0.5 / (1 + 1) = 0.5
    assert float(soft_dice_loss(probs, onehot, eps=0.0)) == pytest.approx(0.5)


def test_focal_gamma_zero_is_bce():
    torch.manual_seed(1)
    logits = torch.randn(2, 1, 5, 5)
    target = (torch.rand(2, 1, 5, 5) > 0.5).float()
    assert float(focal_loss(logits, target, 0.0)) == pytest.approx(
        float(F.binary_cross_entropy_with_logits(logits, target)), rel=1e-6)
    assert float(focal_loss(logits, target, 2.0)) < float(focal_loss(logits, target, 0.0))


def test_prompt_loss_perfect_prediction():
    target = torch.zeros(1, 1, 6, 6)
    target[..., 2:4, 2:4] = 1
    logits = (target * 2 - 1) * 30
    total, parts = prompt_loss(logits, target, torch.ones(1), return_components=True)
    assert all(v < 1e-6 for v in parts.values())
    assert float(total) < 1e-5


def test_prompt_loss_weights_20_1_1():
    torch.manual_seed(2)
    logits = torch.randn(2, 1, 6, 6)
    target = (torch.rand(2, 1, 6, 6) > 0.5).float()
    iou = torch.tensor([0.3, 0.9])
    total, p = prompt_loss(logits, target, iou, return_components=True)
    assert float(total) == pytest.approx(20 * p["focal"] + p["dice"] + p["iou"], rel=1e-6)
    # doubling one weight raises the loss by exactly that term
    bumped = prompt_loss(logits, target, iou, weights=(40.0, 1.0, 1.0))
    assert float(bumped - total) == pytest.approx(20 * p["focal"], rel=1e-5)
