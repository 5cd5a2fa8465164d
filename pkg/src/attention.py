"""
Scaled dot-product multi-head self-attention with introspection.

Rows of the logit matrix B and the weight matrix A index queries, columns
index keys: B[j][i] is the scaled dot product of query j with key i.

Also implements the product-rule split of the head gradient into the path
through the attention weights and the path through the values.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import IndexRangeError, ShapeError
from src.tensor import (
    Tape, Tensor, add, as_tensor, concat, detach, matmul, mul, scale, softmax_lastdim,
    sum_, transpose,
)

logger = logging.getLogger(__name__)

RATIO_EPS = 1e-12


@dataclass
class AttentionParams:
    """Per-head query/key/value projections plus the shared output projection."""
    w_q: List[Tensor]
    w_k: List[Tensor]
    w_v: List[Tensor]
    w_o: Tensor
    b_q: Optional[List[Tensor]] = None
    b_k: Optional[List[Tensor]] = None
    b_v: Optional[List[Tensor]] = None
    b_o: Optional[Tensor] = None

    def __post_init__(self):
        self.validate()

    @property
    def num_heads(self) -> int:
        return len(self.w_q)

    @property
    def d_model(self) -> int:
        return self.w_q[0].shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q[0].shape[1]

    @property
    def d_v(self) -> int:
        return self.w_v[0].shape[1]

    def validate(self):
        heads = len(self.w_q)
        if heads == 0 or len(self.w_k) != heads or len(self.w_v) != heads:
            raise ShapeError("attention params need the same non-zero number of W_Q, W_K, W_V heads")
        qk_shape = self.w_q[0].shape
        v_shape = self.w_v[0].shape
        for h in range(heads):
            if self.w_q[h].shape != qk_shape or self.w_k[h].shape != qk_shape:
                raise ShapeError(f"head {h}: W_Q {self.w_q[h].shape} / W_K {self.w_k[h].shape} differ from {qk_shape}")
            if self.w_v[h].shape != v_shape:
                raise ShapeError(f"head {h}: W_V {self.w_v[h].shape} differs from {v_shape}")
        if self.w_o.shape[0] != heads * v_shape[1]:
            raise ShapeError(f"W_O first dimension {self.w_o.shape[0]} != heads*d_v = {heads * v_shape[1]}")
        for name, biases, width in (("b_q", self.b_q, qk_shape[1]), ("b_k", self.b_k, qk_shape[1]),
                                    ("b_v", self.b_v, v_shape[1])):
            if biases is not None and (len(biases) != heads or any(b.shape != (width,) for b in biases)):
                raise ShapeError(f"{name} must hold {heads} vectors of width {width}")

    def detached(self) -> "AttentionParams":
        """Same values as constants (no tape membership)."""
        def _d(items):
            return None if items is None else [detach(t) for t in items]

        return AttentionParams(
            w_q=_d(self.w_q), w_k=_d(self.w_k), w_v=_d(self.w_v), w_o=detach(self.w_o),
            b_q=_d(self.b_q), b_k=_d(self.b_k), b_v=_d(self.b_v),
            b_o=None if self.b_o is None else detach(self.b_o),
        )

    @classmethod
    def from_arrays(cls, w_q, w_k, w_v, w_o, b_q=None, b_k=None, b_v=None, b_o=None) -> "AttentionParams":
        """Build from stacked numpy arrays shaped (H, d_model, d_k) etc."""
        def _heads(arr):
            return None if arr is None else [Tensor(a) for a in np.asarray(arr, dtype=np.float64)]

        return cls(
            w_q=_heads(w_q), w_k=_heads(w_k), w_v=_heads(w_v), w_o=Tensor(w_o),
            b_q=_heads(b_q), b_k=_heads(b_k), b_v=_heads(b_v),
            b_o=None if b_o is None else Tensor(b_o),
        )


@dataclass
class HeadTrace:
    """Projected queries/keys, pre-softmax logits and post-softmax weights of one head."""
    p_q: Tensor
    p_k: Tensor
    logits: Tensor
    weights: Tensor

    @property
    def d_k(self) -> int:
        return self.p_q.shape[-1]

    @property
    def num_tokens(self) -> int:
        return self.logits.shape[-1]


@dataclass
class AttentionTrace:
    """Every head of one layer, plus the tokens that entered the attention block."""
    layer: int
    heads: List[HeadTrace] = field(default_factory=list)
    inputs: Optional[Tensor] = None

    def to_dict(self) -> Dict:
        """Shapes and row-major values, for trace export."""
        return {
            "layer": self.layer,
            "heads": [
                {
                    "head": h,
                    **{
                        name: {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                        for name, t in (("P_Q", head.p_q), ("P_K", head.p_k), ("B", head.logits), ("A", head.weights))
                    },
                }
                for h, head in enumerate(self.heads)
            ],
        }


def traces_to_dict(traces: Sequence[AttentionTrace]) -> Dict:
    """One forward pass, every layer and head."""
    return {"layers": [trace.to_dict() for trace in traces]}


def export_traces(traces: Sequence[AttentionTrace], path: Union[str, Path]) -> Path:
    """Write P_Q, P_K, B and A of every layer and head as JSON."""
    if not traces:
        raise ShapeError("no attention traces to export")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(traces_to_dict(traces), sort_keys=True, indent=2) + "\n"
    path.write_text(text, encoding="utf-8", newline="\n")
    logger.info(f"📁 exported attention traces of {len(traces)} layers: {path}")
    return path


# ============================================================================
# FORWARD
# ============================================================================

def _check_head(params: AttentionParams, h: int):
    if not 0 <= h < params.num_heads:
        raise IndexRangeError(f"head index {h} out of range for {params.num_heads} heads")


def _check_tokens(X: Tensor, params: AttentionParams):
    if X.ndim < 2 or X.shape[-2] < 1:
        raise ShapeError(f"attention needs at least one token, got shape {X.shape}")
    if X.shape[-1] != params.d_model:
        raise ShapeError(f"tokens of width {X.shape[-1]} do not match d_model {params.d_model}")


def _affine(X: Tensor, weight: Tensor, biases: Optional[List[Tensor]], h: int) -> Tensor:
    out = matmul(X, weight)
    if biases is not None:
        out = add(out, biases[h])
    return out


def project_queries_keys(X, params: AttentionParams, h: int,
                         key_override: Optional[Tuple[int, np.ndarray]] = None) -> Tuple[Tensor, Tensor]:
    """
    P_Q = X W_Q^h (+ b_Q^h), P_K = X W_K^h (+ b_K^h).

    key_override = (token, clean_keys) replaces row `token` of P_K with the
    same row of clean_keys; all other rows are untouched.
    """
    X = as_tensor(X)
    _check_head(params, h)
    _check_tokens(X, params)
    p_q = _affine(X, params.w_q[h], params.b_q, h)
    p_k = _affine(X, params.w_k[h], params.b_k, h)
    if key_override is not None:
        token, clean_keys = key_override
        if not 0 <= token < p_k.shape[-2]:
            raise IndexRangeError(f"key token {token} out of range for {p_k.shape[-2]} tokens")
        keep = np.ones((p_k.shape[-2], 1))
        keep[token] = 0.0
        replacement = np.asarray(clean_keys, dtype=np.float64) * (1.0 - keep)
        p_k = add(mul(p_k, keep), replacement)
    return p_q, p_k


def scaled_logits(p_q: Tensor, p_k: Tensor) -> Tensor:
    """B = P_Q P_K^T / sqrt(d_k)."""
    return scale(matmul(p_q, transpose(p_k)), 1.0 / math.sqrt(p_q.shape[-1]))


def attention_logits(X, params: AttentionParams, h: int) -> Tensor:
    """Pre-softmax logits B of head h; B[j][i] pairs query j with key i."""
    p_q, p_k = project_queries_keys(X, params, h)
    return scaled_logits(p_q, p_k)


def self_attention_head(
    X,
    params: AttentionParams,
    h: int,
    detach_weights: bool = False,
    detach_values: bool = False,
    key_override: Optional[Tuple[int, np.ndarray]] = None
) -> Tuple[Tensor, HeadTrace]:
    """
    softmax(B) X W_V^h for one head.

    Args:
        X: tokens (n, d_model), optionally with leading batch dims
        params: attention parameters
        h: head index
        detach_weights: treat A as a constant (values path only)
        detach_values: treat X W_V as a constant (attention path only)
        key_override: (token, clean P_K) row replacement

    Returns:
        (output (n, d_v), HeadTrace)
    """
    X = as_tensor(X)
    p_q, p_k = project_queries_keys(X, params, h, key_override)
    logits = scaled_logits(p_q, p_k)
    weights = softmax_lastdim(logits)
    values = _affine(X, params.w_v[h], params.b_v, h)

    mix_weights = detach(weights) if detach_weights else weights
    mix_values = detach(values) if detach_values else values
    output = matmul(mix_weights, mix_values)
    return output, HeadTrace(p_q=p_q, p_k=p_k, logits=logits, weights=weights)


def multi_head_self_attention(
    X,
    params: AttentionParams,
    layer: int = 0,
    key_overrides: Optional[Dict[int, np.ndarray]] = None,
    key_token: Optional[int] = None
) -> Tuple[Tensor, AttentionTrace]:
    """
    Concatenate every head's output and project with W_O.

    key_overrides maps head index -> clean P_K for that head; row key_token
    of each listed head's keys is replaced before the logits are formed.
    """
    X = as_tensor(X)
    trace = AttentionTrace(layer=layer, inputs=X)
    outputs = []
    for h in range(params.num_heads):
        override = None
        if key_overrides is not None and h in key_overrides:
            override = (key_token, key_overrides[h])
        out, head_trace = self_attention_head(X, params, h, key_override=override)
        outputs.append(out)
        trace.heads.append(head_trace)

    merged = concat(outputs, axis=-1) if len(outputs) > 1 else outputs[0]
    result = matmul(merged, params.w_o)
    if params.b_o is not None:
        result = add(result, params.b_o)
    return result, trace


def attention_drawn(traces: Sequence[AttentionTrace], token: int, layer: int = -1) -> float:
    """Mean attention weight to key `token` over heads and queries of one layer."""
    trace = traces[layer]
    columns = [head.weights.data[..., :, token] for head in trace.heads]
    return float(np.mean(columns))


# ============================================================================
# GRADIENT PATHS
# ============================================================================

def _contracted_gradient(X: np.ndarray, params: AttentionParams, h: int, cotangent: np.ndarray,
                         detach_weights: bool, detach_values: bool) -> np.ndarray:
    tape = Tape()
    x = tape.leaf(X, "tokens")
    out, _ = self_attention_head(x, params, h, detach_weights=detach_weights, detach_values=detach_values)
    if out.shape != cotangent.shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} does not match head output {out.shape}")
    contraction = sum_(mul(out, cotangent))
    return tape.backward(contraction)[x].data


def gradient_path_decomposition(X, params: AttentionParams, h: int, cotangent) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split d<cotangent, SelfAH_h(X)>/dX into its two product-rule terms.

    Returns:
        (g_attn, g_val): g_attn holds the values path X W_V constant,
        g_val holds the attention weights A constant; they sum to the full
        gradient.
    """
    X = np.asarray(as_tensor(X).data, dtype=np.float64)
    cotangent = np.asarray(as_tensor(cotangent).data, dtype=np.float64)
    _check_head(params, h)
    frozen = params.detached()
    g_attn = _contracted_gradient(X, frozen, h, cotangent, detach_weights=False, detach_values=True)
    g_val = _contracted_gradient(X, frozen, h, cotangent, detach_weights=True, detach_values=False)
    return g_attn, g_val


@dataclass
class RatioStats:
    """Median |g_attn / g_val| of one layer; median is None when every entry was excluded."""
    layer: int
    median: Optional[float]
    excluded: int
    total: int


def layer_gradient_ratio(X, params: AttentionParams, layer: int = 0) -> RatioStats:
    """Element-wise |g_attn / g_val| median over all heads with an all-ones cotangent."""
    X = np.asarray(as_tensor(X).data, dtype=np.float64)
    ratios = []
    excluded = 0
    total = 0
    for h in range(params.num_heads):
        ones = np.ones(X.shape[:-1] + (params.d_v,))
        g_attn, g_val = gradient_path_decomposition(X, params, h, ones)
        usable = np.abs(g_val) > RATIO_EPS
        ratios.append(np.abs(g_attn[usable] / g_val[usable]))
        excluded += int(usable.size - usable.sum())
        total += int(usable.size)

    values = np.concatenate(ratios)
    if values.size == 0:
        logger.warning(f"layer {layer}: every values-path gradient entry is below {RATIO_EPS}, ratio undefined")
        return RatioStats(layer=layer, median=None, excluded=excluded, total=total)
    return RatioStats(layer=layer, median=float(np.median(values)), excluded=excluded, total=total)


def gradient_ratio_median(model, image) -> List[RatioStats]:
    """
    Per-layer median gradient-path ratio of a model on one image.

    Each layer is analysed locally: its attention input is taken from a
    clean forward pass and the head contraction uses an all-ones cotangent.
    """
    from src.vit import forward

    _, traces = forward(model, image)
    stats = []
    for trace in traces:
        params = model.attention_params(trace.layer)
        stats.append(layer_gradient_ratio(trace.inputs.data, params, layer=trace.layer))
    return stats
