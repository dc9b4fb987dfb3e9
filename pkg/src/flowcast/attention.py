"""Multi-head attention over partition subsets, with the post-norm module.

Attention is dense within each subset: every element attends to every
other element of its subset, and subsets never exchange information
inside a single module. A module is attention plus residual, layer norm,
a position-wise feed-forward expansion, another residual, and a second
layer norm. A block runs one module on the primary partition and a second
module, with its own parameters, on the shifted partition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .optim import glorot_uniform, ones_param, zeros_param
from .partition import PartitionScheme
from .tensor import (
    Param,
    Tensor,
    add,
    concat,
    gather_rows,
    layer_norm,
    matmul,
    relu,
    reshape,
    scale,
    scatter_rows,
    softmax_rows,
    transpose,
)

FFN_EXPANSION = 4


@dataclass
class HeadParams:
    """Per-head maps: value has no bias, query and key carry biases."""

    w_value: Param
    w_query: Param
    b_query: Param
    w_key: Param
    b_key: Param


@dataclass
class AttentionParams:
    heads: list[HeadParams]
    w_out: Param

    @property
    def head_dim(self) -> int:
        return self.heads[0].w_value.shape[1]

    def params(self) -> list[Param]:
        out: list[Param] = []
        for h in self.heads:
            out.extend([h.w_value, h.w_query, h.b_query, h.w_key, h.b_key])
        out.append(self.w_out)
        return out


@dataclass
class ModuleParams:
    attention: AttentionParams
    w_ffn1: Param
    b_ffn1: Param
    w_ffn2: Param
    b_ffn2: Param
    norm1_gain: Param
    norm1_bias: Param
    norm2_gain: Param
    norm2_bias: Param

    def params(self) -> list[Param]:
        return self.attention.params() + [
            self.w_ffn1,
            self.b_ffn1,
            self.w_ffn2,
            self.b_ffn2,
            self.norm1_gain,
            self.norm1_bias,
            self.norm2_gain,
            self.norm2_bias,
        ]


@dataclass
class BlockParams:
    module_one: ModuleParams
    module_two: ModuleParams

    def params(self) -> list[Param]:
        return self.module_one.params() + self.module_two.params()


def init_attention_params(
    rng: np.random.Generator, dim: int, n_heads: int, prefix: str
) -> AttentionParams:
    if dim % n_heads != 0:
        raise ContractError(f"width {dim} is not divisible by {n_heads} heads")
    head_dim = dim // n_heads
    heads = []
    for h in range(n_heads):
        tag = f"{prefix}.head{h}"
        heads.append(
            HeadParams(
                w_value=glorot_uniform(rng, (dim, head_dim), f"{tag}.w_value"),
                w_query=glorot_uniform(rng, (dim, head_dim), f"{tag}.w_query"),
                b_query=zeros_param((head_dim,), f"{tag}.b_query"),
                w_key=glorot_uniform(rng, (dim, head_dim), f"{tag}.w_key"),
                b_key=zeros_param((head_dim,), f"{tag}.b_key"),
            )
        )
    return AttentionParams(
        heads=heads, w_out=glorot_uniform(rng, (dim, dim), f"{prefix}.w_out")
    )


def init_module_params(
    rng: np.random.Generator, dim: int, n_heads: int, prefix: str
) -> ModuleParams:
    hidden = FFN_EXPANSION * dim
    return ModuleParams(
        attention=init_attention_params(rng, dim, n_heads, f"{prefix}.att"),
        w_ffn1=glorot_uniform(rng, (dim, hidden), f"{prefix}.ffn.w1"),
        b_ffn1=zeros_param((hidden,), f"{prefix}.ffn.b1"),
        w_ffn2=glorot_uniform(rng, (hidden, dim), f"{prefix}.ffn.w2"),
        b_ffn2=zeros_param((dim,), f"{prefix}.ffn.b2"),
        norm1_gain=ones_param((dim,), f"{prefix}.norm1.gain"),
        norm1_bias=zeros_param((dim,), f"{prefix}.norm1.bias"),
        norm2_gain=ones_param((dim,), f"{prefix}.norm2.gain"),
        norm2_bias=zeros_param((dim,), f"{prefix}.norm2.bias"),
    )


def init_block_params(
    rng: np.random.Generator, dim: int, n_heads: int, prefix: str
) -> BlockParams:
    return BlockParams(
        module_one=init_module_params(rng, dim, n_heads, f"{prefix}.mod1"),
        module_two=init_module_params(rng, dim, n_heads, f"{prefix}.mod2"),
    )


@dataclass
class AlphaCapture:
    """Collects attention weights per subset during one module application.

    by_subset maps subset id to the list of per-head weight arrays, each
    shaped (..., m, m) over the subset's m elements.
    """

    by_subset: dict[int, list[np.ndarray]] = field(default_factory=dict)

    def record(self, subset_id: int, alphas: list[np.ndarray]) -> None:
        self.by_subset[subset_id] = alphas

    def mean_row(self, subset_id: int, position: int) -> np.ndarray:
        """Head-averaged attention row for one query position."""
        heads = self.by_subset[subset_id]
        stacked = np.stack([a[..., position, :] for a in heads], axis=0)
        return stacked.mean(axis=0)


def subset_attention(
    elements: Tensor,
    params: AttentionParams,
    capture: list[np.ndarray] | None = None,
) -> Tensor:
    """Dense multi-head attention over one subset; shape (..., m, D) kept.

    Scores are scaled dot products of the query and key maps, softmaxed
    per query row over the subset, and used to mix the value map. Head
    outputs are concatenated and passed through the output matrix.
    """
    if elements.ndim < 2:
        raise ContractError(f"subset needs shape (..., m, D), got {elements.shape}")
    if elements.shape[-2] < 1:
        raise ContractError("subset attention needs at least one element")
    head_dim = params.head_dim
    inv_scale = 1.0 / np.sqrt(float(head_dim))

    head_outputs = []
    for head in params.heads:
        queries = add(matmul(elements, head.w_query), head.b_query)
        keys = add(matmul(elements, head.w_key), head.b_key)
        values = matmul(elements, head.w_value)
        axes = tuple(range(queries.ndim - 2)) + (queries.ndim - 1, queries.ndim - 2)
        scores = scale(matmul(queries, transpose(keys, axes)), inv_scale)
        alphas = softmax_rows(scores)
        if capture is not None:
            capture.append(alphas.data.copy())
        head_outputs.append(matmul(alphas, values))
    return matmul(concat(head_outputs, axis=-1), params.w_out)


def _flatten_elements(x: Tensor) -> Tensor:
    """(…, N, T, D) to (…, N*T, D) in time-major element order."""
    n, t, d = x.shape[-3], x.shape[-2], x.shape[-1]
    axes = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    return reshape(transpose(x, axes), x.shape[:-3] + (t * n, d))


def _unflatten_elements(x: Tensor, n: int, t: int) -> Tensor:
    d = x.shape[-1]
    y = reshape(x, x.shape[:-2] + (t, n, d))
    axes = tuple(range(y.ndim - 3)) + (y.ndim - 2, y.ndim - 3, y.ndim - 1)
    return transpose(y, axes)


def apply_module(
    x: Tensor,
    scheme: PartitionScheme,
    params: ModuleParams,
    capture: AlphaCapture | None = None,
) -> Tensor:
    """One attention module over a partition; shape (..., N, T, D) kept.

    Per subset, elements are gathered in ascending flat order, attended,
    and scattered back to their positions; the merged result then goes
    through residual + norm, feed-forward, residual + norm.
    """
    n, t = x.shape[-3], x.shape[-2]
    if n * t != scheme.n_elements:
        raise ContractError(
            f"partition covers {scheme.n_elements} elements but input has {n * t}"
        )
    flat = _flatten_elements(x)

    merged: Tensor | None = None
    for subset_id, indices in enumerate(scheme.subsets):
        sink: list[np.ndarray] | None = [] if capture is not None else None
        attended = subset_attention(gather_rows(flat, indices), params.attention, sink)
        if capture is not None:
            capture.record(subset_id, sink)
        placed = scatter_rows(attended, indices, scheme.n_elements)
        merged = placed if merged is None else add(merged, placed)

    y = layer_norm(add(merged, flat), params.norm1_gain, params.norm1_bias)
    hidden = relu(add(matmul(y, params.w_ffn1), params.b_ffn1))
    ffn = add(matmul(hidden, params.w_ffn2), params.b_ffn2)
    z = layer_norm(add(ffn, y), params.norm2_gain, params.norm2_bias)
    return _unflatten_elements(z, n, t)


def apply_block(
    x: Tensor,
    p1: PartitionScheme,
    p2: PartitionScheme,
    params: BlockParams,
    capture_one: AlphaCapture | None = None,
    capture_two: AlphaCapture | None = None,
) -> Tensor:
    """Primary-partition module followed by the shifted-partition module."""
    x = apply_module(x, p1, params.module_one, capture_one)
    return apply_module(x, p2, params.module_two, capture_two)
