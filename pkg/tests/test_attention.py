import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

import vicinity.vvt.attention as lib_attention
from vicinity.vvt.attention import AttentionMode, PositionGrid, TokenGrid
from vicinity.vvt.error import GridError, UnsupportedModeError, CapacityError

LINEAR_MODES = [AttentionMode.VICINITY_2D, AttentionMode.LOCALITY_1D, AttentionMode.NO_LOCALITY]


def random_qkv(grid: PositionGrid, dim: int = 4, value_dim: int = 4, seed: int = 0, batch: int = 1):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn((batch, grid.size, dim), dtype=torch.float64, generator=g)
    k = torch.randn((batch, grid.size, dim), dtype=torch.float64, generator=g)
    v = torch.randn((batch, grid.size, value_dim), dtype=torch.float64, generator=g)
    return q, k, v


def test_mode_parsing():
    assert AttentionMode("vicinity2d") is AttentionMode.VICINITY_2D
    assert AttentionMode("Vicinity2D") is AttentionMode.VICINITY_2D
    assert AttentionMode("2d") is AttentionMode.VICINITY_2D
    assert AttentionMode("1d") is AttentionMode.LOCALITY_1D
    assert AttentionMode("none") is AttentionMode.NO_LOCALITY
    assert AttentionMode("softmax") is AttentionMode.SOFTMAX_ORACLE
    with pytest.raises(ValueError):
        AttentionMode("cosformer")
    assert not AttentionMode.SOFTMAX_ORACLE.is_linear
    assert [m.expansion for m in LINEAR_MODES] == [4, 2, 1]


def test_flatten_index():
    grid = PositionGrid(2, 2)
    assert lib_attention.flatten_index(1, 1, grid) == 3
    assert lib_attention.flatten_index(0, 0, grid) == 0

    grid = PositionGrid(3, 5)
    for i in range(grid.size):
        u, r = lib_attention.unflatten_index(i, grid)
        assert lib_attention.flatten_index(u, r, grid) == i

    with pytest.raises(GridError):
        lib_attention.flatten_index(2, 0, PositionGrid(2, 2))
    with pytest.raises(GridError):
        lib_attention.unflatten_index(4, PositionGrid(2, 2))


def test_grid_validation():
    with pytest.raises(GridError):
        PositionGrid(0, 4)
    with pytest.raises(GridError):
        TokenGrid(torch.zeros(1, 5, 3), PositionGrid(2, 2))
    with pytest.raises(GridError):
        TokenGrid(torch.full((1, 4, 3), float("nan")), PositionGrid(2, 2))

    x = torch.arange(24, dtype=torch.float32).reshape(1, 2, 3, 4)
    tokens = TokenGrid.from_map(x)
    assert tokens.grid == PositionGrid(3, 4)
    assert tokens.channels == 2
    assert torch.equal(tokens.to_map(), x)


def test_angle_encode():
    codes = lib_attention.angle_encode(PositionGrid(2, 2))
    assert codes.a[3].item() == pytest.approx(math.pi / 4)
    assert codes.b[3].item() == pytest.approx(math.pi / 4)

    codes = lib_attention.angle_encode(PositionGrid(1, 1))
    assert codes.a[0].item() == 0.0
    assert codes.b[0].item() == 0.0

    # single row: all row angles are zero
    codes = lib_attention.angle_encode(PositionGrid(1, 4))
    assert torch.all(codes.a == 0)
    assert codes.b[3].item() == pytest.approx(3 * math.pi / 8)

    codes = lib_attention.angle_encode(PositionGrid(7, 9))
    assert torch.all(codes.a >= 0) and torch.all(codes.a < math.pi / 2)
    assert torch.all(codes.b >= 0) and torch.all(codes.b < math.pi / 2)


def test_reweight_factor():
    grid = PositionGrid(1, 2)
    assert lib_attention.reweight_factor(0, 0, grid) == pytest.approx(2.0)
    assert lib_attention.reweight_factor(0, 1, grid) == pytest.approx(1 + math.cos(math.pi / 4))

    grid = PositionGrid(5, 6)
    for i in range(grid.size):
        assert lib_attention.reweight_factor(i, i, grid) == pytest.approx(2.0)
        for j in range(grid.size):
            w = lib_attention.reweight_factor(i, j, grid)
            assert 0.0 <= w <= 2.0
            assert w == pytest.approx(lib_attention.reweight_factor(j, i, grid))


def test_locality_matrix_matches_scalar_weights():
    grid = PositionGrid(3, 4)
    for mode in LINEAR_MODES:
        w = lib_attention.locality_matrix(grid, mode)
        for i in range(grid.size):
            for j in range(grid.size):
                assert w[i, j].item() == pytest.approx(lib_attention.locality_weight(i, j, grid, mode), abs=1e-12)
    with pytest.raises(UnsupportedModeError):
        lib_attention.locality_weight(0, 0, grid, AttentionMode.SOFTMAX_ORACLE)


def test_expand_single_token():
    x = torch.tensor([[1.0, 2.0]], dtype=torch.float64)
    angles = lib_attention.angle_encode(PositionGrid(1, 1))
    expanded = lib_attention.expand_with_angles(x, angles, AttentionMode.VICINITY_2D)
    assert expanded.tolist() == [[1.0, 2.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0]]


def test_expand_inner_product_is_position_weight():
    grid = PositionGrid(3, 3)
    angles = lib_attention.angle_encode(grid)
    x = torch.rand((grid.size, 5), dtype=torch.float64)
    for mode in LINEAR_MODES:
        e = lib_attention.expand_with_angles(x, angles, mode)
        assert e.shape == (grid.size, 5 * mode.expansion)
        expected = (x @ x.T) * lib_attention.locality_matrix(grid, mode)
        assert torch.allclose(e @ e.T, expected, atol=1e-12)


def test_expand_modes():
    angles = lib_attention.angle_encode(PositionGrid(2, 2))
    x = torch.rand((4, 3), dtype=torch.float64)
    assert lib_attention.expand_with_angles(x, angles, AttentionMode.NO_LOCALITY) is x
    with pytest.raises(UnsupportedModeError):
        lib_attention.expand_with_angles(x, angles, AttentionMode.SOFTMAX_ORACLE)
    with pytest.raises(GridError):
        lib_attention.expand_with_angles(torch.rand(5, 3), angles, AttentionMode.VICINITY_2D)


@pytest.mark.parametrize("mode", [AttentionMode.VICINITY_2D, AttentionMode.LOCALITY_1D, AttentionMode.NO_LOCALITY])
def test_linear_attention_is_bitwise_repeatable(mode):
    g = torch.Generator().manual_seed(11)
    grid = PositionGrid(8, 8)
    q, k, v = (torch.randn((2, 3, grid.size, 8), generator=g) for _ in range(3))
    first = lib_attention.linear_attention(q, k, v, grid, mode)
    for _ in range(3):
        assert torch.equal(lib_attention.linear_attention(q, k, v, grid, mode), first)


def test_single_token_returns_value():
    grid = PositionGrid(1, 1)
    q = torch.rand((1, 1, 4), dtype=torch.float64) + 0.1
    k = torch.rand((1, 1, 4), dtype=torch.float64) + 0.1
    v = torch.randn((1, 1, 6), dtype=torch.float64)
    for mode in LINEAR_MODES:
        out = lib_attention.linear_attention(q, k, v, grid, mode)
        assert torch.allclose(out, v, atol=1e-12)


@pytest.mark.parametrize("mode", LINEAR_MODES)
def test_matches_quadratic_oracle(mode):
    grid = PositionGrid(8, 8)
    q, k, v = random_qkv(grid, dim=8, value_dim=8, seed=3, batch=2)
    fast = lib_attention.linear_attention(q, k, v, grid, mode)
    slow = lib_attention.quadratic_oracle(q, k, v, grid, mode)
    assert (fast - slow).abs().max().item() <= 1e-10


def test_no_locality_on_rectangular_grid():
    grid = PositionGrid(4, 8)
    q, k, v = random_qkv(grid, seed=11)
    fast = lib_attention.linear_attention(q, k, v, grid, AttentionMode.NO_LOCALITY)
    slow = lib_attention.quadratic_oracle(q, k, v, grid, AttentionMode.NO_LOCALITY)
    assert (fast - slow).abs().max().item() <= 1e-10


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 6),
    m=st.integers(1, 6),
    dim=st.integers(1, 5),
    mode=st.sampled_from(LINEAR_MODES),
    seed=st.integers(0, 2 ** 16)
)
def test_oracle_equivalence_property(n, m, dim, mode, seed):
    grid = PositionGrid(n, m)
    q, k, v = random_qkv(grid, dim=dim, value_dim=3, seed=seed)
    fast = lib_attention.linear_attention(q, k, v, grid, mode)
    slow = lib_attention.quadratic_oracle(q, k, v, grid, mode)
    assert (fast - slow).abs().max().item() <= 1e-10


def test_zero_queries_give_zero_output():
    grid = PositionGrid(3, 3)
    _, k, v = random_qkv(grid)
    q = torch.zeros_like(k)
    for mode in LINEAR_MODES:
        out = lib_attention.linear_attention(q, k, v, grid, mode)
        assert torch.all(out == 0)


def test_weights_are_row_stochastic():
    grid = PositionGrid(4, 4)
    q, k, _ = random_qkv(grid, seed=5)
    for mode in LINEAR_MODES:
        w = lib_attention.oracle_weights(q, k, grid, mode)
        assert torch.all(w >= 0)
        sums = w.sum(-1)
        live = sums > 0.5
        assert torch.allclose(sums[live], torch.ones_like(sums[live]), atol=1e-12)


def test_vicinity_prefers_neighbours():
    grid = PositionGrid(4, 4)
    ones = torch.ones((1, grid.size, 2), dtype=torch.float64)
    w = lib_attention.oracle_weights(ones, ones, grid, AttentionMode.VICINITY_2D)
    assert w[0, 0, 1] > w[0, 0, 3]
    # every row peaks on its own token
    assert torch.equal(w[0].argmax(-1), torch.arange(grid.size))


def test_softmax_attention():
    v = torch.randn((1, 1, 3), dtype=torch.float64)
    q = torch.randn((1, 1, 4), dtype=torch.float64)
    assert torch.allclose(lib_attention.softmax_attention(q, q, v), v)

    grid = PositionGrid(2, 4)
    _, k, v = random_qkv(grid, seed=2)
    q = torch.zeros_like(k)
    out = lib_attention.softmax_attention(q, k, v)
    assert torch.allclose(out, v.mean(-2, keepdim=True).expand_as(v), atol=1e-12)

    q, k, _ = random_qkv(grid, seed=4)
    sums = lib_attention.softmax_weights(q, k).sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-12)


def test_attend_dispatch():
    grid = PositionGrid(3, 3)
    q, k, v = random_qkv(grid, seed=8)
    fast = lib_attention.attend(q, k, v, grid, AttentionMode.VICINITY_2D)
    slow = lib_attention.attend(q, k, v, grid, AttentionMode.VICINITY_2D, use_oracle=True)
    assert torch.allclose(fast, slow, atol=1e-10)
    soft = lib_attention.attend(q, k, v, grid, AttentionMode.SOFTMAX_ORACLE)
    assert torch.allclose(soft, lib_attention.softmax_attention(q, k, v))


def test_input_errors():
    grid = PositionGrid(2, 2)
    q, k, v = random_qkv(grid)
    with pytest.raises(UnsupportedModeError):
        lib_attention.linear_attention(q, k, v, grid, AttentionMode.SOFTMAX_ORACLE)
    with pytest.raises(GridError):
        lib_attention.linear_attention(q, k[..., :3], v, grid)
    with pytest.raises(GridError):
        lib_attention.linear_attention(q, k, v[:, :3], grid)
    with pytest.raises(GridError):
        lib_attention.linear_attention(q, k, v, PositionGrid(1, 3))
    with pytest.raises(GridError):
        lib_attention.linear_attention(q, k, v, grid, eps=0.0)
    bad = q.clone()
    bad[0, 0, 0] = float("inf")
    with pytest.raises(GridError):
        lib_attention.linear_attention(bad, k, v, grid)


def test_explicit_matrix_capacity():
    grid = PositionGrid(1, lib_attention.MAX_EXPLICIT_TOKENS + 1)
    q = torch.ones((1, grid.size, 1), dtype=torch.float64)
    with pytest.raises(CapacityError):
        lib_attention.quadratic_oracle(q, q, q, grid)
    with pytest.raises(CapacityError):
        lib_attention.softmax_attention(q, q, q)
    # the linear path has no cap
    out = lib_attention.linear_attention(q, q, q, grid, AttentionMode.NO_LOCALITY)
    assert torch.allclose(out, torch.ones_like(out))
