import pytest
import torch

import vicinity.vvt.gradcheck as lib_gradcheck
from vicinity.vvt.attention import AttentionMode, PositionGrid

LINEAR_MODES = [AttentionMode.VICINITY_2D, AttentionMode.LOCALITY_1D, AttentionMode.NO_LOCALITY]


def test_vicinity_4x4():
    report = lib_gradcheck.check_linear_attention(PositionGrid(4, 4), AttentionMode.VICINITY_2D, dim=4, seed=0)
    assert report.max_rel_error <= 1e-6
    assert set(report.errors) == {"Q", "K", "V"}


@pytest.mark.parametrize("mode", LINEAR_MODES)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_linear_modes(mode, seed):
    report = lib_gradcheck.check_linear_attention(PositionGrid(3, 4), mode, dim=4, seed=seed)
    assert report.passed, report


def test_softmax():
    report = lib_gradcheck.check_softmax_attention(tokens=8, dim=4, seed=0)
    assert report.max_rel_error <= 1e-6


def test_corrupted_backward_is_caught():
    report = lib_gradcheck.check_linear_attention(PositionGrid(4, 4), AttentionMode.VICINITY_2D, seed=0, corrupted=True)
    assert not report.passed
    # only the key gradient is wrong
    assert report.errors["K"] > report.tol
    assert report.errors["Q"] <= report.tol
    assert report.errors["V"] <= report.tol


def test_kink_resampling():
    q = torch.zeros((1, 4, 2), dtype=torch.float64)
    k = torch.ones((1, 4, 2), dtype=torch.float64)
    report = lib_gradcheck.grad_check(
        lambda a, b: torch.relu(a) * b,
        [q, k],
        kink_probe=lambda a, b: (a,)
    )
    assert report.resamples >= 1
    assert report.passed


def test_parameters_are_checked():
    weight = torch.randn((3, 3), dtype=torch.float64, requires_grad=True)
    x = torch.randn((2, 3), dtype=torch.float64)
    report = lib_gradcheck.grad_check(lambda t: torch.tanh(t @ weight), [x], params=[("weight", weight)])
    assert set(report.errors) == {"input0", "weight"}
    assert report.passed


def test_max_entries():
    x = torch.randn((10, 10), dtype=torch.float64)
    report = lib_gradcheck.grad_check(torch.sin, [x], max_entries=5)
    assert report.passed
