"""
Attack objectives computed from attention traces.

kq / kq_star act on the pre-softmax logits B and push queries towards the
patch key i★; patch_fool acts on the post-softmax weights A; ce is the
usual classification loss. Every term is arranged so that the attack
ascends the returned value.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from src.attention import AttentionTrace, HeadTrace, scaled_logits
from src.exceptions import ConfigError, DegenerateInputError, IndexRangeError, ShapeError
from src.tensor import (
    Tensor, add, as_tensor, div, getitem, logsumexp_lastdim, max_lastdim, mean, mul, reshape,
    scale, sqrt, stack, sub, sum_,
)

logger = logging.getLogger(__name__)

TERMS = ("ce", "kq", "kq_star", "patch_fool")
KEY_TERMS = ("kq", "kq_star", "patch_fool")
CE_MODES = ("untargeted_maximize", "targeted_minimize")
AGGREGATIONS = ("smax", "mean", "max")

_NORM_EPS = 1e-24
_DEGENERATE_ROW_NORM = 1e-12


@dataclass
class LossConfig:
    """
    Which terms make up the attack objective and how they are reduced.

    target_key None means "the token under the patch"; the attack fills it
    in from the patch location. layer_selector None means all layers.
    """
    terms: List[str] = field(default_factory=lambda: ["ce"])
    ce_mode: str = "untargeted_maximize"
    target_class: Optional[int] = None
    target_key: Optional[int] = None
    target_query: int = 0
    layer_selector: Optional[int] = None
    head_aggregation: str = "smax"
    layer_aggregation: str = "smax"
    normalize: bool = True
    weights: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.terms = list(dict.fromkeys(self.terms))
        if not self.terms:
            raise ConfigError("at least one loss term must be enabled")
        unknown = [t for t in self.terms if t not in TERMS]
        if unknown:
            raise ConfigError(f"unknown loss terms {unknown}, expected a subset of {TERMS}")
        if self.ce_mode not in CE_MODES:
            raise ConfigError(f"ce_mode must be one of {CE_MODES}, got {self.ce_mode!r}")
        if self.ce_mode == "targeted_minimize" and self.target_class is None:
            raise ConfigError("targeted mode needs target_class")
        for name in ("head_aggregation", "layer_aggregation"):
            if getattr(self, name) not in AGGREGATIONS:
                raise ConfigError(f"{name} must be one of {AGGREGATIONS}, got {getattr(self, name)!r}")
        bad_weights = set(self.weights) - set(TERMS)
        if bad_weights:
            raise ConfigError(f"weights given for unknown terms {sorted(bad_weights)}")
        if self.target_query < 0 or (self.target_key is not None and self.target_key < 0):
            raise ConfigError("target token indices must be >= 0")

    @property
    def targeted(self) -> bool:
        return self.ce_mode == "targeted_minimize"

    @property
    def needs_target_key(self) -> bool:
        return any(term in KEY_TERMS for term in self.terms)

    def weight(self, term: str) -> float:
        return float(self.weights.get(term, 1.0))

    def with_target_key(self, token: int) -> "LossConfig":
        data = asdict(self)
        data["target_key"] = token
        return LossConfig(**data)

    def to_dict(self) -> Dict:
        return asdict(self)


# ============================================================================
# NORMALIZATION AND PER-HEAD TERMS
# ============================================================================

def l12_normalize(P) -> Tensor:
    """
    P divided by its mean row l2 norm, so the output has mean row norm 1.

    Raises DegenerateInputError when every row is (numerically) zero.
    """
    P = as_tensor(P)
    if P.ndim < 2:
        raise ShapeError(f"l12_normalize needs a (tokens, features) matrix, got shape {P.shape}")
    if np.all(np.linalg.norm(P.data, axis=-1) <= _DEGENERATE_ROW_NORM):
        raise DegenerateInputError("every row has zero norm, l1,2 normalization is undefined")
    row_norms = sqrt(add(sum_(mul(P, P), axis=-1), _NORM_EPS))
    scale_factor = mean(row_norms, axis=-1, keepdims=True)
    return div(P, reshape(scale_factor, scale_factor.shape + (1,)))


def head_logits(head: HeadTrace, normalize: bool) -> Tensor:
    """B of one head, recomputed from l1,2-normalized projections when asked."""
    if not normalize:
        return head.logits
    return scaled_logits(l12_normalize(head.p_q), l12_normalize(head.p_k))


def _check_token(index: int, count: int, what: str):
    if not 0 <= index < count:
        raise IndexRangeError(f"{what} {index} out of range for {count} tokens")


def loss_kq_head_layer(head: HeadTrace, target_key: int, normalize: bool = True) -> Tensor:
    """Mean over queries of B[j][target_key]."""
    _check_token(target_key, head.num_tokens, "target key")
    logits = head_logits(head, normalize)
    return mean(getitem(logits, (Ellipsis, slice(None), target_key)))


def loss_kq_star_head_layer(head: HeadTrace, target_key: int, target_query: int = 0,
                            normalize: bool = True) -> Tensor:
    """The single logit B[target_query][target_key]."""
    _check_token(target_key, head.num_tokens, "target key")
    _check_token(target_query, head.num_tokens, "target query")
    logits = head_logits(head, normalize)
    return mean(getitem(logits, (Ellipsis, target_query, target_key)))


def aggregate(values: Sequence[Tensor], mode: str) -> Tensor:
    """smax (log-sum-exp), mean or hard max of scalar tensors."""
    if not values:
        raise ShapeError("cannot aggregate an empty list of losses")
    if mode not in AGGREGATIONS:
        raise ConfigError(f"unknown aggregation {mode!r}")
    stacked = stack([as_tensor(v) for v in values])
    if mode == "smax":
        return logsumexp_lastdim(stacked)
    if mode == "max":
        return max_lastdim(stacked)
    return mean(stacked)


# ============================================================================
# TRACE-LEVEL TERMS
# ============================================================================

def _selected_layers(traces: Sequence[AttentionTrace], selector: Optional[int]) -> List[AttentionTrace]:
    if not traces:
        raise ShapeError("no attention traces to compute a loss from")
    if selector is None:
        return list(traces)
    if not 0 <= selector < len(traces):
        raise IndexRangeError(f"layer selector {selector} out of range for {len(traces)} layers")
    return [traces[selector]]


def _require_target_key(config: LossConfig) -> int:
    if config.target_key is None:
        raise ConfigError("target_key must be set (or derived from the patch location) before computing kq losses")
    return config.target_key


def loss_kq(traces: Sequence[AttentionTrace], config: LossConfig, star: bool = False) -> Tensor:
    """
    Head aggregation inside each layer, then layer aggregation.

    With a single-layer selector the layer aggregation is skipped.
    """
    target_key = _require_target_key(config)
    layers = _selected_layers(traces, config.layer_selector)
    per_layer = []
    for trace in layers:
        if star:
            values = [loss_kq_star_head_layer(h, target_key, config.target_query, config.normalize)
                      for h in trace.heads]
        else:
            values = [loss_kq_head_layer(h, target_key, config.normalize) for h in trace.heads]
        per_layer.append(aggregate(values, config.head_aggregation))
    if config.layer_selector is not None:
        return per_layer[0]
    return aggregate(per_layer, config.layer_aggregation)


def loss_kq_star(traces: Sequence[AttentionTrace], config: LossConfig) -> Tensor:
    return loss_kq(traces, config, star=True)


def loss_patch_fool(traces: Sequence[AttentionTrace], target_key: int) -> Tensor:
    """Mean attention weight A[j][target_key] over layers, heads and queries."""
    if not traces:
        raise ShapeError("no attention traces to compute a loss from")
    columns = []
    for trace in traces:
        for head in trace.heads:
            _check_token(target_key, head.num_tokens, "target key")
            columns.append(mean(getitem(head.weights, (Ellipsis, slice(None), target_key))))
    return mean(stack(columns))


def cross_entropy(logits, labels: Union[int, np.ndarray, Sequence[int]]) -> Tensor:
    """Mean cross-entropy of (C,) or (B, C) logits against integer labels."""
    logits = as_tensor(logits)
    num_classes = logits.shape[-1]
    if logits.ndim == 1:
        label = int(labels)
        if not 0 <= label < num_classes:
            raise IndexRangeError(f"label {label} out of range for {num_classes} classes")
        return sub(logsumexp_lastdim(logits), getitem(logits, label))

    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or len(labels) != logits.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {len(labels)} labels")
    if np.any((labels < 0) | (labels >= num_classes)):
        raise IndexRangeError(f"labels out of range for {num_classes} classes")
    picked = getitem(logits, (np.arange(len(labels)), labels))
    return mean(sub(logsumexp_lastdim(logits), picked))


def loss_terms(logits, traces: Sequence[AttentionTrace], label_or_target: int,
               config: LossConfig) -> Dict[str, Tensor]:
    """Every enabled term, already signed for ascent but not weighted."""
    terms: Dict[str, Tensor] = {}
    for term in config.terms:
        if term == "ce":
            ce = cross_entropy(logits, label_or_target)
            terms[term] = scale(ce, -1.0) if config.targeted else ce
        elif term == "kq":
            terms[term] = loss_kq(traces, config)
        elif term == "kq_star":
            terms[term] = loss_kq_star(traces, config)
        elif term == "patch_fool":
            terms[term] = loss_patch_fool(traces, _require_target_key(config))
    return terms


def total_loss(logits, traces: Sequence[AttentionTrace], label_or_target: int, config: LossConfig) -> Tensor:
    """
    Weighted sum of the enabled terms.

    Untargeted: +CE(label). Targeted: -CE(target). kq, kq_star and
    patch_fool always enter with a positive sign.
    """
    return combine_terms(loss_terms(logits, traces, label_or_target, config), config)


def combine_terms(terms: Dict[str, Tensor], config: LossConfig) -> Tensor:
    total = None
    for name, value in terms.items():
        weighted = scale(value, config.weight(name))
        total = weighted if total is None else add(total, weighted)
    return total


