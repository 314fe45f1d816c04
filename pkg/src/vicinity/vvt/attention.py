# SPDX-License-Identifier: MIT
# Copyright (C) 2026 VVT Contributors

"""
Vicinity attention: a ReLU-kernel linear attention whose similarity is re-weighted by
cos(a_i - a_j) + cos(b_i - b_j), where (a, b) encode the row and column of each token
on the 2D grid it was flattened from. The re-weighting decomposes into four
position-scaled copies of the kernel features, so the key/value summary can be formed
first and no N x N matrix is ever built.

All tensor ops accept leading batch dimensions: (..., N, d). Heads are folded into the batch.

Reduction order: K'^T V is one matmul over the token axis j and sum_j K'_j one sum(-2), so the
order in which the j terms are added is the one torch's CPU kernels use for that shape (blocked,
not strictly j = 0, 1, ..., N-1). It does not change between calls, so a fixed input, dtype and
thread count gives bitwise identical results. Floating-point results can differ from a strictly
sequential accumulation by rounding only.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Final, Optional, Tuple

import torch
import torch.nn.functional as F
from einops import rearrange

from .error import GridError, UnsupportedModeError, CapacityError

# Denominator clamp. Keeps the op total when ReLU(Q_i) is all zero.
EPS: Final[float] = 1e-6

# Largest N for which an explicit N x N matrix is materialized.
MAX_EXPLICIT_TOKENS: Final[int] = 4096


class AttentionMode(str, Enum):
    VICINITY_2D = "vicinity2d"
    LOCALITY_1D = "1dlocality"
    NO_LOCALITY = "nolocality"
    SOFTMAX_ORACLE = "softmax"

    @classmethod
    def _missing_(cls, value):
        if not isinstance(value, str):
            return None
        key = value.lower().replace("-", "").replace("_", "")
        for member in cls:
            if member.value == key:
                return member
        aliases = {
            "2d": cls.VICINITY_2D,
            "vicinity": cls.VICINITY_2D,
            "1d": cls.LOCALITY_1D,
            "locality1d": cls.LOCALITY_1D,
            "none": cls.NO_LOCALITY,
            "softmaxoracle": cls.SOFTMAX_ORACLE,
        }
        return aliases.get(key)

    @property
    def is_linear(self) -> bool:
        return self is not AttentionMode.SOFTMAX_ORACLE

    @property
    def expansion(self) -> int:
        """ How many position-scaled copies of the kernel features each query and key becomes """
        return {"vicinity2d": 4, "1dlocality": 2}.get(self.value, 1)


@dataclass(frozen=True)
class PositionGrid:
    """ n rows (feature map height) by m columns (width). Flat index i = u * m + r. """
    n: int
    m: int

    def __post_init__(self):
        if not isinstance(self.n, int) or not isinstance(self.m, int) or self.n < 1 or self.m < 1:
            raise GridError("PositionGrid: rows and columns must be integers >= 1, got %r x %r" % (self.n, self.m))

    @property
    def size(self) -> int:
        return self.n * self.m


@dataclass(frozen=True)
class AngleCodes:
    """ Per-token row angle a and column angle b, both in radians and in [0, pi/2). """
    a: torch.Tensor
    b: torch.Tensor
    grid: PositionGrid


@dataclass
class TokenGrid:
    """ A batch of token sequences, shape (batch, N, d), with the grid they were flattened from. """
    data: torch.Tensor
    grid: PositionGrid

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.data.dim() != 3:
            raise GridError("TokenGrid: expected data of shape (batch, N, d), got %s" % (tuple(self.data.shape),))
        if self.data.shape[1] != self.grid.size:
            raise GridError("TokenGrid: sequence length %d does not match grid %dx%d" % (self.data.shape[1], self.grid.n, self.grid.m))
        if not torch.isfinite(self.data).all():
            raise GridError("TokenGrid: data contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    def to_map(self) -> torch.Tensor:
        """ Reshape back to (batch, d, n, m) """
        return rearrange(self.data, 'b (n m) d -> b d n m', n=self.grid.n, m=self.grid.m)

    @classmethod
    def from_map(cls, x: torch.Tensor) -> 'TokenGrid':
        """ Flatten a (batch, d, n, m) feature map row-major into a TokenGrid """
        _, _, n, m = x.shape
        return cls(rearrange(x, 'b d n m -> b (n m) d'), PositionGrid(n, m))


def flatten_index(u: int, r: int, grid: PositionGrid) -> int:
    if not (0 <= u < grid.n and 0 <= r < grid.m):
        raise GridError("flatten_index: (%d, %d) is outside grid %dx%d" % (u, r, grid.n, grid.m))
    return u * grid.m + r


def unflatten_index(i: int, grid: PositionGrid) -> Tuple[int, int]:
    if not 0 <= i < grid.size:
        raise GridError("unflatten_index: %d is outside grid %dx%d" % (i, grid.n, grid.m))
    return i // grid.m, i % grid.m


def angle_encode(grid: PositionGrid, dtype: torch.dtype = torch.float64, device: Optional[torch.device] = None) -> AngleCodes:
    """
    a_i = pi * u_i / (2n), b_i = pi * r_i / (2m) for every flat index i.
    The column angle uses the key's own column r_j on the key side.
    """
    i = torch.arange(grid.size, device=device)
    u = torch.div(i, grid.m, rounding_mode='floor').to(dtype)
    r = (i % grid.m).to(dtype)
    return AngleCodes(
        a=math.pi * u / (2 * grid.n),
        b=math.pi * r / (2 * grid.m),
        grid=grid
    )


def _angle(index: int, count: int) -> float:
    return math.pi * index / (2 * count)


def reweight_factor(i: int, j: int, grid: PositionGrid) -> float:
    """ cos(a_i - a_j) + cos(b_i - b_j). Lies in [0, 2], equals 2 on the diagonal. """
    ui, ri = unflatten_index(i, grid)
    uj, rj = unflatten_index(j, grid)
    return math.cos(_angle(ui, grid.n) - _angle(uj, grid.n)) + math.cos(_angle(ri, grid.m) - _angle(rj, grid.m))


def locality_weight(i: int, j: int, grid: PositionGrid, mode: AttentionMode) -> float:
    """ The position weight w(i, j) applied by each re-weighting mode. """
    if mode is AttentionMode.VICINITY_2D:
        return reweight_factor(i, j, grid)
    if mode is AttentionMode.LOCALITY_1D:
        unflatten_index(i, grid)
        unflatten_index(j, grid)
        return math.cos(_angle(i, grid.size) - _angle(j, grid.size))
    if mode is AttentionMode.NO_LOCALITY:
        return 1.0
    raise UnsupportedModeError("locality_weight: %s has no position weight" % mode.value)


def position_weights(angles: AngleCodes, mode: AttentionMode) -> torch.Tensor:
    """
    Per-token scale factors of the feature expansion, shape (T, N):
    Vicinity2D -> [cos a, sin a, cos b, sin b]; Locality1D -> [cos c, sin c] with c_i = pi*i/(2N);
    NoLocality -> [1].
    """
    if mode is AttentionMode.VICINITY_2D:
        return torch.stack([torch.cos(angles.a), torch.sin(angles.a), torch.cos(angles.b), torch.sin(angles.b)])
    if mode is AttentionMode.LOCALITY_1D:
        count = angles.grid.size
        c = math.pi * torch.arange(count, dtype=angles.a.dtype, device=angles.a.device) / (2 * count)
        return torch.stack([torch.cos(c), torch.sin(c)])
    if mode is AttentionMode.NO_LOCALITY:
        return torch.ones((1, angles.grid.size), dtype=angles.a.dtype, device=angles.a.device)
    raise UnsupportedModeError("%s does not use the feature expansion" % mode.value)


def _expand(x: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # (..., N, d) x (T, N) -> (..., N, T*d)
    return rearrange(weights.unsqueeze(-1) * x.unsqueeze(-3), '... t n d -> ... n (t d)')


def _collapse(g: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # adjoint of _expand: (..., N, T*d) -> (..., N, d)
    g = rearrange(g, '... n (t d) -> ... t n d', t=weights.shape[0])
    return (weights.unsqueeze(-1) * g).sum(-3)


def expand_with_angles(x: torch.Tensor, angles: AngleCodes, mode: AttentionMode) -> torch.Tensor:
    """
    Expand kernel features (already passed through ReLU) with the position factors.

    :param x: Features of shape (..., N, d)
    :param angles: Angle codes of the grid the N tokens come from
    :param mode: Vicinity2D (d' = 4d), Locality1D (d' = 2d) or NoLocality (d' = d, x returned as is)
    """
    if x.shape[-2] != angles.grid.size:
        raise GridError("expand_with_angles: %d tokens for a grid of %d" % (x.shape[-2], angles.grid.size))
    if mode is AttentionMode.NO_LOCALITY:
        return x
    return _expand(x, position_weights(angles, mode).to(x.dtype))


def _check_qkv(what: str, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, grid: Optional[PositionGrid]):
    if q.dim() < 2 or q.shape != k.shape:
        raise GridError("%s: Q %s and K %s must share shape (..., N, d)" % (what, tuple(q.shape), tuple(k.shape)))
    if v.shape[:-1] != q.shape[:-1]:
        raise GridError("%s: V %s does not match Q %s outside the last axis" % (what, tuple(v.shape), tuple(q.shape)))
    if grid is not None and q.shape[-2] != grid.size:
        raise GridError("%s: %d tokens for grid %dx%d" % (what, q.shape[-2], grid.n, grid.m))
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if not torch.isfinite(t).all():
            raise GridError("%s: %s contains non-finite entries" % (what, name))


def linear_attention_backward(saved: Tuple[torch.Tensor, ...], grad_out: torch.Tensor, eps: float,
                              keep_normalizer_term: bool = True) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Hand-derived gradients of the reordered contraction with respect to Q, K and V.
    Only (d' x dv) summaries and per-token vectors are formed.

    keep_normalizer_term=False drops the key-side gradient of the normalizer sum_j K'_j.
    It exists only so gradient checks can prove they catch a broken backward.
    """
    q, k, v, weights, qe, ke, kv, z, den_raw, out = saved
    den = den_raw.clamp_min(eps)

    d_num = grad_out / den.unsqueeze(-1)
    d_den = -(grad_out * out).sum(-1) / den
    d_den_raw = d_den * (den_raw > eps).to(den.dtype)

    d_qe = d_num @ kv.transpose(-2, -1) + d_den_raw.unsqueeze(-1) * z.unsqueeze(-2)
    d_kv = qe.transpose(-2, -1) @ d_num
    d_ke = v @ d_kv.transpose(-2, -1)
    if keep_normalizer_term:
        d_z = (qe * d_den_raw.unsqueeze(-1)).sum(-2)
        d_ke = d_ke + d_z.unsqueeze(-2)
    d_v = ke @ d_kv

    d_q = _collapse(d_qe, weights) * (q > 0).to(q.dtype)
    d_k = _collapse(d_ke, weights) * (k > 0).to(k.dtype)
    return d_q, d_k, d_v


class LinearAttentionFunction(torch.autograd.Function):
    """ O_i = Q'_i (K'^T V) / max(Q'_i . sum_j K'_j, eps) with Q' = expand(ReLU(Q)), K' = expand(ReLU(K)) """

    @staticmethod
    def forward(ctx, q, k, v, weights, eps):
        qe = _expand(F.relu(q), weights)
        ke = _expand(F.relu(k), weights)
        kv = ke.transpose(-2, -1) @ v
        z = ke.sum(-2)
        num = qe @ kv
        den_raw = (qe * z.unsqueeze(-2)).sum(-1)
        out = num / den_raw.clamp_min(eps).unsqueeze(-1)
        ctx.save_for_backward(q, k, v, weights, qe, ke, kv, z, den_raw, out)
        ctx.eps = eps
        return out

    @staticmethod
    def backward(ctx, grad_out):
        d_q, d_k, d_v = linear_attention_backward(ctx.saved_tensors, grad_out, ctx.eps)
        return d_q, d_k, d_v, None, None


def linear_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, grid: PositionGrid,
                     mode: AttentionMode = AttentionMode.VICINITY_2D, eps: float = EPS) -> torch.Tensor:
    """
    Linear-complexity attention over a token grid.

    :param q: Queries (..., N, d)
    :param k: Keys (..., N, d)
    :param v: Values (..., N, dv)
    :param grid: The grid the N tokens were flattened from
    :param mode: Any mode except SoftmaxOracle
    :param eps: Denominator clamp, must be > 0
    """
    if not mode.is_linear:
        raise UnsupportedModeError("linear_attention: %s is not a linear mode, use softmax_attention()" % mode.value)
    if eps <= 0:
        raise GridError("linear_attention: eps must be > 0")
    _check_qkv("linear_attention", q, k, v, grid)
    weights = position_weights(angle_encode(grid, dtype=q.dtype, device=q.device), mode)
    return LinearAttentionFunction.apply(q, k, v, weights, eps)


def _check_capacity(what: str, count: int):
    if count > MAX_EXPLICIT_TOKENS:
        raise CapacityError("%s: refusing to build a %d x %d matrix (limit is N <= %d)" % (what, count, count, MAX_EXPLICIT_TOKENS))


def locality_matrix(grid: PositionGrid, mode: AttentionMode, dtype: torch.dtype = torch.float64,
                    device: Optional[torch.device] = None) -> torch.Tensor:
    """ Explicit w(i, j) for all token pairs, computed from angle differences (not from the decomposition). """
    _check_capacity("locality_matrix", grid.size)
    angles = angle_encode(grid, dtype=dtype, device=device)
    if mode is AttentionMode.VICINITY_2D:
        return torch.cos(angles.a[:, None] - angles.a[None, :]) + torch.cos(angles.b[:, None] - angles.b[None, :])
    if mode is AttentionMode.LOCALITY_1D:
        c = math.pi * torch.arange(grid.size, dtype=dtype, device=device) / (2 * grid.size)
        return torch.cos(c[:, None] - c[None, :])
    if mode is AttentionMode.NO_LOCALITY:
        return torch.ones((grid.size, grid.size), dtype=dtype, device=device)
    raise UnsupportedModeError("locality_matrix: %s has no position weight" % mode.value)


def softmax_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    _check_capacity("softmax_weights", q.shape[-2])
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1)


def oracle_weights(q: torch.Tensor, k: torch.Tensor, grid: PositionGrid,
                   mode: AttentionMode = AttentionMode.VICINITY_2D, eps: float = EPS) -> torch.Tensor:
    """
    Row-normalized explicit attention matrix, shape (..., N, N).
    S_ij = ReLU(Q_i) . ReLU(K_j) * w(i, j), each row divided by max(sum_j S_ij, eps).
    SoftmaxOracle returns the scaled softmax matrix.
    """
    _check_capacity("oracle_weights", q.shape[-2])
    if mode is AttentionMode.SOFTMAX_ORACLE:
        return softmax_weights(q, k)
    if q.shape[-2] != grid.size:
        raise GridError("oracle_weights: %d tokens for grid %dx%d" % (q.shape[-2], grid.n, grid.m))
    s = (F.relu(q) @ F.relu(k).transpose(-2, -1)) * locality_matrix(grid, mode, dtype=q.dtype, device=q.device)
    return s / s.sum(-1, keepdim=True).clamp_min(eps)


def quadratic_oracle(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, grid: PositionGrid,
                     mode: AttentionMode = AttentionMode.VICINITY_2D, eps: float = EPS) -> torch.Tensor:
    """ Explicit N x N version of linear_attention(); used to check it. N is capped at 4096. """
    _check_capacity("quadratic_oracle", q.shape[-2])
    _check_qkv("quadratic_oracle", q, k, v, None if mode is AttentionMode.SOFTMAX_ORACLE else grid)
    return oracle_weights(q, k, grid, mode, eps) @ v


def softmax_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """ Standard scaled dot-product attention, softmax(Q K^T / sqrt(d)) V. N is capped at 4096. """
    _check_capacity("softmax_attention", q.shape[-2])
    _check_qkv("softmax_attention", q, k, v, None)
    return softmax_weights(q, k) @ v


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, grid: PositionGrid, mode: AttentionMode,
           eps: float = EPS, use_oracle: bool = False) -> torch.Tensor:
    """ Dispatch on the mode. use_oracle routes linear modes through the explicit N x N path. """
    if mode is AttentionMode.SOFTMAX_ORACLE:
        return softmax_attention(q, k, v)
    if use_oracle:
        return quadratic_oracle(q, k, v, grid, mode, eps)
    return linear_attention(q, k, v, grid, mode, eps)
