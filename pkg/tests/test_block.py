import pytest
import torch
import torch.nn as nn

import vicinity.vvt.block as lib_block
from vicinity.vvt.attention import AttentionMode, PositionGrid, TokenGrid, linear_attention, quadratic_oracle
from vicinity.vvt.config import BlockConfig
from vicinity.vvt.error import ConfigError, GridError
from vicinity.vvt.verify import GRAD_SEEDS, check_block


@pytest.fixture
def grid():
    return PositionGrid(4, 4)


@pytest.fixture
def tokens(grid):
    g = torch.Generator().manual_seed(0)
    return TokenGrid(torch.randn((2, grid.size, 8), dtype=torch.float64, generator=g), grid)


def make_block(**kwargs) -> lib_block.VicinityBlock:
    torch.manual_seed(0)
    options = dict(dim=8, heads=2, fr_ratio=2, expansion=2)
    options.update(kwargs)
    return lib_block.VicinityBlock(BlockConfig(**options)).double()


def zero_(*modules: nn.Module):
    with torch.no_grad():
        for m in modules:
            for p in m.parameters():
                p.zero_()


def test_fra_widths(tokens):
    q, k, v = lib_block.fra_project(tokens, make_block(fr_ratio=2, heads=1))
    assert q.shape == k.shape == v.shape == (2, 16, 4)
    q, _, _ = lib_block.fra_project(tokens, make_block(fr_ratio=1, heads=1))
    assert q.shape == (2, 16, 8)


def test_fra_zero_weights(tokens):
    block = make_block()
    zero_(block.attn.q, block.attn.k, block.attn.v)
    for t in lib_block.fra_project(tokens, block):
        assert torch.all(t == 0)


def test_fra_channel_mismatch(grid):
    with pytest.raises(GridError):
        lib_block.fra_project(TokenGrid(torch.zeros((1, grid.size, 6), dtype=torch.float64), grid), make_block())
    with pytest.raises(GridError):
        make_block()(torch.zeros((1, grid.size, 6), dtype=torch.float64), grid)


def test_expanded_head_width():
    # C=8, R=2, H=2: each head's Q' has 4 * 2 columns, 2C in total across heads
    config = BlockConfig(dim=8, heads=2, fr_ratio=2)
    assert lib_block.expanded_head_width(config) == 8
    assert lib_block.expanded_head_width(config) * config.heads == 2 * config.dim
    assert lib_block.expanded_head_width(BlockConfig(dim=8, mode=AttentionMode.NO_LOCALITY)) == 4


def test_single_head_is_plain_linear_attention(tokens):
    block = make_block(heads=1)
    q, k, v = lib_block.fra_project(tokens, block)
    expected = block.attn.proj(linear_attention(q, k, v, tokens.grid, AttentionMode.VICINITY_2D))
    actual = lib_block.multi_head_vicinity(q, k, v, tokens.grid, block)
    assert torch.allclose(actual, expected, atol=1e-12)


def test_multi_head_matches_oracle(tokens):
    block = make_block(heads=2)
    q, k, v = lib_block.fra_project(tokens, block)
    fast = lib_block.multi_head_vicinity(q, k, v, tokens.grid, block)
    slow = lib_block.multi_head_vicinity(q, k, v, tokens.grid, block, use_oracle=True)
    assert (fast - slow).abs().max().item() <= 1e-10

    # per-head split by hand
    heads = []
    for h in range(2):
        cols = slice(2 * h, 2 * h + 2)
        heads.append(quadratic_oracle(q[..., cols], k[..., cols], v[..., cols], tokens.grid))
    assert torch.allclose(fast, block.attn.proj(torch.cat(heads, dim=-1)), atol=1e-10)


def test_fpc_pools_constant_rows():
    fpc = lib_block.FeaturePreservingConnection(4, act_layer=nn.Identity).double()
    with torch.no_grad():
        for fc in (fpc.fc1, fpc.fc2):
            fc.weight.copy_(torch.eye(4, dtype=torch.float64))
            fc.bias.zero_()
    row = torch.tensor([1.0, -2.0, 3.0, 0.5], dtype=torch.float64)
    x = row.expand(1, 9, 4)
    out = fpc(x)
    assert out.shape == x.shape
    assert torch.allclose(out, x)


def test_fpc_is_global(tokens):
    block = make_block()
    out = lib_block.fpc_forward(tokens.data, block)
    # the same vector on every token
    assert torch.allclose(out, out[:, :1].expand_as(out))
    assert torch.all(lib_block.fpc_forward(tokens.data, make_block(fpc=False)) == 0)


def test_zero_branches_give_identity(tokens):
    block = make_block()
    zero_(block.attn.proj, block.fpc.fc2, block.ffn.fc2)
    out = lib_block.block_forward(tokens, block)
    assert torch.equal(out.data, tokens.data)
    assert out.grid == tokens.grid


def test_block_without_fpc(tokens):
    block = make_block(fpc=False)
    assert block.fpc is None
    zero_(block.ffn.fc2)
    h = TokenGrid(block.norm1(tokens.data), tokens.grid)
    q, k, v = lib_block.fra_project(h, block)
    expected = tokens.data + lib_block.multi_head_vicinity(q, k, v, tokens.grid, block)
    assert torch.allclose(lib_block.block_forward(tokens, block).data, expected, atol=1e-12)


def test_block_matches_oracle_path(tokens):
    for mode in (AttentionMode.VICINITY_2D, AttentionMode.LOCALITY_1D, AttentionMode.NO_LOCALITY):
        block = make_block(mode=mode)
        with torch.no_grad():
            fast = block(tokens.data, tokens.grid)
            slow = block(tokens.data, tokens.grid, use_oracle=True)
        assert (fast - slow).abs().max().item() <= 1e-10


def test_modes_share_parameter_shapes():
    shapes = None
    for mode in AttentionMode:
        current = {n: p.shape for n, p in make_block(mode=mode).named_parameters()}
        assert shapes is None or current == shapes
        shapes = current


def test_softmax_block_runs(tokens):
    out = lib_block.block_forward(tokens, make_block(mode=AttentionMode.SOFTMAX_ORACLE))
    assert out.data.shape == tokens.data.shape


def test_post_norm_and_dwconv(tokens):
    block = make_block(post_norm=True, ffn_dwconv=True)
    assert block.ffn.dwconv is not None
    out = lib_block.block_forward(tokens, block)
    assert out.data.shape == tokens.data.shape
    # post-norm output rows are normalized
    assert torch.allclose(out.data.mean(-1), torch.zeros(2, 16, dtype=torch.float64), atol=1e-10)


def test_init_weights():
    torch.manual_seed(0)
    block = lib_block.VicinityBlock(BlockConfig(dim=256, heads=1, fr_ratio=1, expansion=4))
    w = block.ffn.fc1.weight
    assert 0.018 < w.std().item() < 0.022
    assert torch.all(block.ffn.fc1.bias == 0)
    assert torch.all(block.norm1.weight == 1)
    assert torch.all(block.norm1.bias == 0)


def test_invalid_config():
    with pytest.raises(ConfigError):
        lib_block.VicinityBlock(BlockConfig(dim=10, heads=3))
    with pytest.raises(ConfigError):
        lib_block.VicinityBlock(BlockConfig(dim=8, fr_ratio=0))
    with pytest.raises(ConfigError):
        lib_block.VicinityBlock(BlockConfig(dim=8, eps=0.0))


@pytest.mark.parametrize("seed", GRAD_SEEDS)
def test_block_gradients(seed):
    report = check_block(seed)
    assert report.passed, report.errors
