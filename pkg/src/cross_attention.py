"""
Bidirectional visual-thermal cross-attention with query exchange.

Visual queries attend over thermal keys/values and thermal queries attend
over visual keys/values. Feature maps are Bxdxhxw tensors flattened
row-major to B x (h*w) x d sequences; attention maps are row-stochastic
B x N x M tensors averaged over heads.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.errors import ConfigurationError, NumericError, ShapeError, ValidationError


class Modality(str, Enum):
    RGB = 'RGB'
    IR = 'IR'


@dataclass
class FeatureMap:
    """Spatial grid of d-dimensional features for one modality (B x d x h x w)."""

    values: torch.Tensor
    modality: Modality

    def __post_init__(self):
        if self.values.dim() == 3:
            self.values = self.values.unsqueeze(0)
        if self.values.dim() != 4:
            raise ShapeError(f"FeatureMap needs B x d x h x w values, got shape {tuple(self.values.shape)}")
        if min(self.values.shape[1:]) < 1:
            raise ShapeError(f"FeatureMap has an empty dimension: {tuple(self.values.shape)}")

    @property
    def depth(self) -> int:
        return self.values.shape[1]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]


def sinusoidal_position_encoding(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """
    2-D sine/cosine encoding of a row-major h x w grid, shape (h*w) x dim.

    The first half of the channels encodes the row, the second half the column.
    """
    if dim % 4 != 0:
        raise ConfigurationError(f"Positional encoding needs a dimension divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    rows = torch.arange(h, dtype=torch.float64)[:, None] * freqs
    cols = torch.arange(w, dtype=torch.float64)[:, None] * freqs
    row_enc = torch.cat([rows.sin(), rows.cos()], dim=1)
    col_enc = torch.cat([cols.sin(), cols.cos()], dim=1)
    grid = torch.cat([
        row_enc[:, None, :].expand(h, w, 2 * quarter),
        col_enc[None, :, :].expand(h, w, 2 * quarter),
    ], dim=2)
    return grid.reshape(h * w, dim).to(dtype)


class AttentionParams(nn.Module):
    """Q/K/V projections (in_dim -> d_model) and output projection (d_model -> in_dim) of one modality."""

    def __init__(self, in_dim: int, d_model: int = 64, n_heads: int = 4,
                 bias: bool = True, positional_encoding: bool = False):
        super().__init__()
        if d_model % n_heads != 0:
            raise ConfigurationError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        if positional_encoding and in_dim % 4 != 0:
            raise ConfigurationError(f"Positional encoding needs a feature depth divisible by 4, got {in_dim}")
        self.in_dim = in_dim
        self.d_model = d_model
        self.n_heads = n_heads
        self.positional_encoding = positional_encoding
        self.q_proj = nn.Linear(in_dim, d_model, bias=bias)
        self.k_proj = nn.Linear(in_dim, d_model, bias=bias)
        self.v_proj = nn.Linear(in_dim, d_model, bias=bias)
        self.out_proj = nn.Linear(d_model, in_dim, bias=bias)


def flatten_grid(values: torch.Tensor) -> torch.Tensor:
    """B x d x h x w -> B x (h*w) x d, row-major positions."""
    return values.flatten(2).transpose(1, 2)


def unflatten_grid(sequence: torch.Tensor, grid: Tuple[int, int]) -> torch.Tensor:
    """B x (h*w) x d -> B x d x h x w."""
    b, n, d = sequence.shape
    h, w = grid
    if n != h * w:
        raise ShapeError(f"Cannot reshape {n} positions onto a {h}x{w} grid")
    return sequence.transpose(1, 2).reshape(b, d, h, w)


def project_qkv(features: FeatureMap, params: AttentionParams) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Flatten a feature map and apply the Q, K and V projections per position.

    Returns:
        (Q, K, V), each B x N x d_model with N = h * w
    """
    if features.depth != params.in_dim:
        raise ShapeError(
            f"Feature depth {features.depth} does not match attention input dimension {params.in_dim}"
        )
    sequence = flatten_grid(features.values)
    if params.positional_encoding:
        h, w = features.grid
        sequence = sequence + sinusoidal_position_encoding(h, w, params.in_dim, sequence.dtype).to(sequence.device)
    return params.q_proj(sequence), params.k_proj(sequence), params.v_proj(sequence)


def scaled_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, n_heads: int = 1,
                     out_proj: Optional[nn.Module] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Multi-head scaled dot-product attention.

    Args:
        q: N x d_model (or B x N x d_model) queries
        k, v: M x d_model (or B x M x d_model) keys and values
        n_heads: Heads the model dimension is split into
        out_proj: Optional projection applied to the concatenated heads

    Returns:
        (attended N x d_out, attention map N x M averaged over heads)
    """
    unbatched = q.dim() == 2
    if unbatched:
        q, k, v = q.unsqueeze(0), k.unsqueeze(0), v.unsqueeze(0)
    if not (q.shape[-1] == k.shape[-1] == v.shape[-1]):
        raise ShapeError(f"Q, K, V model dimensions differ: {q.shape[-1]}, {k.shape[-1]}, {v.shape[-1]}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"K has {k.shape[1]} positions but V has {v.shape[1]}")
    d_model = q.shape[-1]
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model {d_model} is not divisible by n_heads {n_heads}")

    b, n, _ = q.shape
    m = k.shape[1]
    d_k = d_model // n_heads
    qh = q.reshape(b, n, n_heads, d_k).transpose(1, 2)
    kh = k.reshape(b, m, n_heads, d_k).transpose(1, 2)
    vh = v.reshape(b, m, n_heads, d_k).transpose(1, 2)

    logits = qh @ kh.transpose(-2, -1) / math.sqrt(d_k)
    if not torch.isfinite(logits).all():
        raise NumericError("Non-finite attention logits")
    weights = F.softmax(logits, dim=-1)

    attended = (weights @ vh).transpose(1, 2).reshape(b, n, d_model)
    if out_proj is not None:
        attended = out_proj(attended)
    attention_map = weights.mean(dim=1)

    if unbatched:
        return attended[0], attention_map[0]
    return attended, attention_map


def exchange_queries(feat_rgb: FeatureMap, feat_ir: FeatureMap, params_rgb: AttentionParams,
                     params_ir: AttentionParams) -> Tuple[FeatureMap, FeatureMap, Tuple[torch.Tensor, torch.Tensor]]:
    """
    Cross-attention with exchanged queries.

    attended_ir: visual queries over thermal keys/values, on the visual grid.
    attended_rgb: thermal queries over visual keys/values, on the thermal grid.
    Spatial sizes of the two inputs may differ.

    Returns:
        (attended_rgb, attended_ir, (map_rgb_to_ir N_rgb x N_ir, map_ir_to_rgb N_ir x N_rgb))
    """
    if params_rgb.n_heads != params_ir.n_heads or params_rgb.d_model != params_ir.d_model:
        raise ShapeError(
            f"Attention parameters disagree: {params_rgb.n_heads} heads / d_model {params_rgb.d_model} "
            f"vs {params_ir.n_heads} heads / d_model {params_ir.d_model}"
        )
    q_rgb, k_rgb, v_rgb = project_qkv(feat_rgb, params_rgb)
    q_ir, k_ir, v_ir = project_qkv(feat_ir, params_ir)

    seq_ir, map_rgb_to_ir = scaled_attention(q_rgb, k_ir, v_ir, params_ir.n_heads, params_ir.out_proj)
    seq_rgb, map_ir_to_rgb = scaled_attention(q_ir, k_rgb, v_rgb, params_rgb.n_heads, params_rgb.out_proj)

    attended_ir = FeatureMap(unflatten_grid(seq_ir, feat_rgb.grid), Modality.IR)
    attended_rgb = FeatureMap(unflatten_grid(seq_rgb, feat_ir.grid), Modality.RGB)
    return attended_rgb, attended_ir, (map_rgb_to_ir, map_ir_to_rgb)


def attention_heatmap(attention_map: Union[torch.Tensor, np.ndarray], key_grid: Tuple[int, int],
                      focus_query: Optional[Union[int, Sequence[int]]] = None,
                      query_grid: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Render one attention map row (or the mean over rows) on the key grid.

    Args:
        attention_map: N x M map (a leading batch dimension of 1 is allowed)
        key_grid: (h, w) of the key positions, h * w == M
        focus_query: Flat query index or (row, col) on query_grid; None averages all rows
        query_grid: (h, w) of the query positions, needed for (row, col) focus

    Returns:
        h x w x 1 float32 array min-max normalised to [0, 1]; a constant map gives 0.5 everywhere
    """
    weights = attention_map.detach().cpu().numpy() if isinstance(attention_map, torch.Tensor) else np.asarray(attention_map)
    if weights.ndim == 3 and weights.shape[0] == 1:
        weights = weights[0]
    if weights.ndim != 2:
        raise ShapeError(f"Attention map must be N x M, got shape {weights.shape}")
    n, m = weights.shape
    h, w = key_grid
    if h * w != m:
        raise ShapeError(f"Key grid {h}x{w} does not match {m} key positions")

    if focus_query is None:
        row = weights.mean(axis=0)
    else:
        if isinstance(focus_query, (tuple, list)):
            if query_grid is None:
                raise ValidationError("A (row, col) focus query needs query_grid")
            qr, qc = focus_query
            if not (0 <= qr < query_grid[0] and 0 <= qc < query_grid[1]):
                raise ValidationError(f"Focus query {tuple(focus_query)} outside the {query_grid} grid")
            index = qr * query_grid[1] + qc
        else:
            index = int(focus_query)
        if not 0 <= index < n:
            raise ValidationError(f"Focus query {index} outside {n} query positions")
        row = weights[index]

    row = row.astype(np.float64).reshape(h, w)
    lo, hi = row.min(), row.max()
    if hi - lo < 1e-12:
        heat = np.full((h, w), 0.5)
    else:
        heat = (row - lo) / (hi - lo)
    return heat[..., None].astype(np.float32)


class IdentityExchange(nn.Module):
    """Parameter-free stand-in for the exchange: features pass through, no maps."""

    def forward(self, feat_rgb: FeatureMap, feat_ir: FeatureMap) -> Tuple[FeatureMap, FeatureMap, None]:
        return feat_rgb, feat_ir, None
