"""
Toy pre-norm vision transformer.

Token layout: index 0 is the class token, image patch at grid position
(row, col) becomes token 1 + row * grid_size + col. Patches are flattened
channel-major (C, p, p) before the linear projection.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from src.attention import AttentionParams, AttentionTrace, multi_head_self_attention
from src.exceptions import ConfigError, IndexRangeError, ShapeError
from src.tensor import (
    Tape, Tensor, add, as_tensor, concat, gelu, getitem, layernorm, matmul, permute, reshape,
)

logger = logging.getLogger(__name__)


@dataclass
class ViTConfig:
    """Architecture of the toy classifier."""
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    d_model: int = 64
    depth: int = 4
    heads: int = 4
    mlp_hidden: int = 128
    num_classes: int = 4
    layernorm_eps: float = 1e-5
    qkv_bias: bool = True

    def __post_init__(self):
        positive = ("image_size", "channels", "patch_size", "d_model", "depth", "heads", "mlp_hidden", "num_classes")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"vit.{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not a multiple of patch_size {self.patch_size}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.layernorm_eps <= 0:
            raise ConfigError("layernorm_eps must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.image_size, self.image_size)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ViTConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown vit config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainingInfo:
    """Provenance stored alongside the weights."""
    seed: int
    train_accuracy: Optional[float] = None
    val_accuracy: Optional[float] = None
    epochs: int = 0
    lr: float = 0.0
    final_loss: Optional[float] = None
    dataset: Optional[Dict] = None


def parameter_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape of every trainable array, in canonical order."""
    d, dk = config.d_model, config.head_dim
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (config.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (config.seq_len, d),
    }
    for l in range(config.depth):
        prefix = f"layers.{l}"
        shapes[f"{prefix}.ln1.gamma"] = (d,)
        shapes[f"{prefix}.ln1.beta"] = (d,)
        for h in range(config.heads):
            for proj in ("q", "k", "v"):
                shapes[f"{prefix}.attn.heads.{h}.w_{proj}"] = (d, dk)
                if config.qkv_bias:
                    shapes[f"{prefix}.attn.heads.{h}.b_{proj}"] = (dk,)
        shapes[f"{prefix}.attn.w_o"] = (config.heads * dk, d)
        shapes[f"{prefix}.attn.b_o"] = (d,)
        shapes[f"{prefix}.ln2.gamma"] = (d,)
        shapes[f"{prefix}.ln2.beta"] = (d,)
        shapes[f"{prefix}.mlp.w1"] = (d, config.mlp_hidden)
        shapes[f"{prefix}.mlp.b1"] = (config.mlp_hidden,)
        shapes[f"{prefix}.mlp.w2"] = (config.mlp_hidden, d)
        shapes[f"{prefix}.mlp.b2"] = (d,)
    shapes["ln_f.gamma"] = (d,)
    shapes["ln_f.beta"] = (d,)
    shapes["head.weight"] = (d, config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def _init_array(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith((".beta", ".bias")) or ".b_" in name or name.endswith((".b1", ".b2")):
        return np.zeros(shape)
    if name in ("cls_token", "pos_embed"):
        return rng.normal(0.0, 0.02, size=shape)
    # weight matrices: fan-in scaled normal
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)


class ViTModel:
    """Weights of the toy ViT as named float64 arrays."""

    def __init__(self, config: ViTConfig, params: Dict[str, np.ndarray], info: Optional[TrainingInfo] = None):
        expected = parameter_shapes(config)
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        if missing or extra:
            raise ShapeError(f"parameter names differ from config: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tuple(params[name].shape)}")
        self.config = config
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in expected}
        self.info = info

    @classmethod
    def initialize(cls, config: ViTConfig, seed: int) -> "ViTModel":
        rng = np.random.default_rng(seed)
        params = {name: _init_array(name, shape, rng) for name, shape in parameter_shapes(config).items()}
        return cls(config, params, TrainingInfo(seed=seed))

    def copy(self) -> "ViTModel":
        return ViTModel(self.config, {k: v.copy() for k, v in self.params.items()}, copy.deepcopy(self.info))

    def tensors(self, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
        """Parameters as tape leaves (for training) or as constants."""
        if tape is None:
            return {name: Tensor(value) for name, value in self.params.items()}
        return {name: tape.leaf(value, name) for name, value in self.params.items()}

    def attention_params(self, layer: int, tensors: Optional[Mapping[str, Tensor]] = None) -> AttentionParams:
        if not 0 <= layer < self.config.depth:
            raise IndexRangeError(f"layer {layer} out of range for depth {self.config.depth}")
        tensors = tensors if tensors is not None else self.tensors()
        prefix = f"layers.{layer}.attn"
        heads = range(self.config.heads)

        def _collect(kind: str) -> Optional[List[Tensor]]:
            names = [f"{prefix}.heads.{h}.{kind}" for h in heads]
            if names[0] not in tensors:
                return None
            return [tensors[n] for n in names]

        return AttentionParams(
            w_q=_collect("w_q"), w_k=_collect("w_k"), w_v=_collect("w_v"),
            w_o=tensors[f"{prefix}.w_o"],
            b_q=_collect("b_q"), b_k=_collect("b_k"), b_v=_collect("b_v"),
            b_o=tensors[f"{prefix}.b_o"],
        )


# ============================================================================
# FORWARD
# ============================================================================

def patchify(image: Tensor, config: ViTConfig) -> Tensor:
    """(..., C, H, W) -> (..., n, C*p*p) in token order."""
    image = as_tensor(image)
    if image.shape[-3:] != config.image_shape:
        raise ShapeError(f"image shape {image.shape} does not match config {config.image_shape}")
    lead = image.shape[:-3]
    k = len(lead)
    g, p, c = config.grid_size, config.patch_size, config.channels
    x = reshape(image, lead + (c, g, p, g, p))
    x = permute(x, tuple(range(k)) + (k + 1, k + 3, k, k + 2, k + 4))
    return reshape(x, lead + (config.num_patches, config.patch_dim))


def patch_embed(image, model: ViTModel, params: Optional[Mapping[str, Tensor]] = None) -> Tensor:
    """
    Linear patch projection, class token prepended at index 0, positional
    embedding added. Returns (..., n+1, d_model).
    """
    config = model.config
    params = params if params is not None else model.tensors()
    patches = patchify(image, config)
    tokens = add(matmul(patches, params["patch_embed.weight"]), params["patch_embed.bias"])
    lead = tokens.shape[:-2]
    cls_rows = add(np.zeros(lead + (1, config.d_model)), reshape(params["cls_token"], (1, config.d_model)))
    sequence = concat([cls_rows, tokens], axis=-2)
    return add(sequence, params["pos_embed"])


def forward(
    model: ViTModel,
    image,
    params: Optional[Mapping[str, Tensor]] = None,
    key_overrides: Optional[Dict[int, Dict[int, np.ndarray]]] = None,
    key_token: Optional[int] = None
) -> Tuple[Tensor, List[AttentionTrace]]:
    """
    Classify one image (C, H, W) or a batch (B, C, H, W).

    Args:
        model: weights and config
        image: pixels, Tensor or array
        params: parameter tensors (tape leaves when training); constants by default
        key_overrides: layer -> head -> clean P_K used to replace row key_token
        key_token: token whose key is replaced

    Returns:
        (logits (..., num_classes), one AttentionTrace per layer)
    """
    config = model.config
    params = params if params is not None else model.tensors()
    x = patch_embed(image, model, params)
    traces: List[AttentionTrace] = []

    for l in range(config.depth):
        prefix = f"layers.{l}"
        h = layernorm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"], config.layernorm_eps)
        overrides = key_overrides.get(l) if key_overrides else None
        attn_out, trace = multi_head_self_attention(
            h, model.attention_params(l, params), layer=l, key_overrides=overrides, key_token=key_token
        )
        traces.append(trace)
        x = add(x, attn_out)

        h = layernorm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"], config.layernorm_eps)
        hidden = gelu(add(matmul(h, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"]))
        x = add(x, add(matmul(hidden, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"]))

    x = layernorm(x, params["ln_f.gamma"], params["ln_f.beta"], config.layernorm_eps)
    cls_final = getitem(x, (Ellipsis, 0, slice(None)))
    logits = add(matmul(reshape(cls_final, cls_final.shape[:-1] + (1, config.d_model)), params["head.weight"]),
                 params["head.bias"])
    logits = reshape(logits, logits.shape[:-2] + (config.num_classes,))
    return logits, traces


def predict(model: ViTModel, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Argmax class for a batch of images (no tape)."""
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    preds = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(model, images[start:start + batch_size])
        preds.append(np.argmax(logits.data, axis=-1))
    result = np.concatenate(preds).astype(int)
    return result[0] if single else result
