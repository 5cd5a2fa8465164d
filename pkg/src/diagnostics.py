"""
Model-level vulnerability indicators.

- Largest singular value of W_Q^h (W_K^h)^T per layer and head
- Gradient-path ratio medians across images
- Adversarial key replacement (clean key surgery)
- Projected query/key export with a 2-D principal-component view
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.decomposition import PCA

from src.attack import PatchSpec, apply_patch, patch_token_index
from src.attention import AttentionTrace, attention_drawn, gradient_ratio_median
from src.exceptions import IndexRangeError, PatchPlacementError, ShapeError
from src.losses import LossConfig
from src.metrics import mean_and_stderr
from src.vit import ViTModel, forward

logger = logging.getLogger(__name__)


def largest_singular_value(M, seed: int = 0, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    """
    sigma_max(M) by power iteration on M^T M.

    Stops when successive eigenvalue estimates differ by less than tol
    relatively; a zero matrix returns 0 without iterating.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"singular values need a matrix, got shape {M.shape}")
    if not np.any(M):
        return 0.0

    gram = M.T @ M
    rng = np.random.default_rng(seed)
    x = rng.normal(size=gram.shape[0])
    x /= np.linalg.norm(x)

    estimate = 0.0
    for _ in range(max_iter):
        y = gram @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0.0:
            # start vector in the null space
            x = rng.normal(size=gram.shape[0])
            x /= np.linalg.norm(x)
            continue
        new_estimate = float(x @ y)
        x = y / y_norm
        if abs(new_estimate - estimate) <= tol * abs(new_estimate):
            estimate = new_estimate
            break
        estimate = new_estimate
    else:
        logger.warning(f"power iteration did not converge in {max_iter} steps")

    # Rayleigh quotient of the converged vector
    estimate = float(x @ gram @ x)
    return float(np.sqrt(max(estimate, 0.0)))


def _layer_sigmas(model: ViTModel) -> Dict[tuple, float]:
    sigmas = {}
    for layer in range(model.config.depth):
        params = model.attention_params(layer)
        for head in range(params.num_heads):
            product = params.w_q[head].data @ params.w_k[head].data.T
            sigmas[(layer, head)] = largest_singular_value(product)
    return sigmas


def singular_value_report(model: ViTModel, init_model: Optional[ViTModel] = None) -> pd.DataFrame:
    """
    sigma_max(W_Q^h (W_K^h)^T) for every layer and head, plus a per-layer
    "max" row. With init_model the initialization values sit alongside.
    """
    trained = _layer_sigmas(model)
    initial = _layer_sigmas(init_model) if init_model is not None else None
    if initial is not None and set(initial) != set(trained):
        raise ShapeError("init and trained models have different layer/head layouts")

    rows = []
    for layer in range(model.config.depth):
        heads = [h for (l, h) in trained if l == layer]
        for head in heads:
            row = {"layer": layer, "head": str(head), "sigma_max": trained[(layer, head)]}
            if initial is not None:
                row["sigma_max_init"] = initial[(layer, head)]
            rows.append(row)
        row = {"layer": layer, "head": "max", "sigma_max": max(trained[(layer, h)] for h in heads)}
        if initial is not None:
            row["sigma_max_init"] = max(initial[(layer, h)] for h in heads)
        rows.append(row)
    return pd.DataFrame(rows)


def gradient_ratio_report(model: ViTModel, images: Sequence[np.ndarray]) -> pd.DataFrame:
    """Per layer: mean and standard error of the per-image ratio medians."""
    if len(images) == 0:
        raise ShapeError("gradient ratio report needs at least one image")
    per_layer: Dict[int, List[float]] = {}
    excluded: Dict[int, int] = {}
    total: Dict[int, int] = {}
    for image in images:
        for stats in gradient_ratio_median(model, image):
            if stats.median is not None:
                per_layer.setdefault(stats.layer, []).append(stats.median)
            excluded[stats.layer] = excluded.get(stats.layer, 0) + stats.excluded
            total[stats.layer] = total.get(stats.layer, 0) + stats.total

    rows = []
    for layer in range(model.config.depth):
        values = per_layer.get(layer, [])
        mean, stderr = mean_and_stderr(values)
        rows.append({
            "layer": layer,
            "images": len(values),
            "ratio_median_mean": mean,
            "ratio_median_stderr": 0.0 if stderr is None else stderr,
            "excluded": excluded.get(layer, 0),
            "total": total.get(layer, 0),
        })
    return pd.DataFrame(rows)


@dataclass
class KeyReplacementRecord:
    attn_clean: float
    attn_adv: float
    attn_replaced: float

    def to_dict(self) -> Dict:
        return asdict(self)


def key_replacement_ablation(
    model: ViTModel,
    image: np.ndarray,
    patch: PatchSpec,
    loss_config: Optional[LossConfig] = None,
    layers: Optional[Sequence[int]] = None
) -> KeyReplacementRecord:
    """
    Attention drawn by the patch token in three passes: clean, patched, and
    patched with the patch token's key row restored from the clean pass.

    Args:
        model: classifier
        image: clean image
        patch: optimized patch (must sit on one token)
        loss_config: target_key overrides the token derived from the patch
        layers: layers whose keys are restored (all by default)
    """
    config = model.config
    if patch.size != (config.patch_size, config.patch_size):
        raise PatchPlacementError(
            f"key replacement needs a single-token patch of {config.patch_size}x{config.patch_size}, got {patch.size}"
        )
    token = patch_token_index(config, patch.location)
    if loss_config is not None and loss_config.target_key is not None:
        token = loss_config.target_key
    layers = list(range(config.depth)) if layers is None else list(layers)
    for layer in layers:
        if not 0 <= layer < config.depth:
            raise IndexRangeError(f"layer {layer} out of range for depth {config.depth}")

    _, clean_traces = forward(model, image)
    patched = apply_patch(image, patch.pixels, patch.location)
    _, adv_traces = forward(model, patched)

    overrides = {
        layer: {h: head.p_k.data for h, head in enumerate(clean_traces[layer].heads)}
        for layer in layers
    }
    _, replaced_traces = forward(model, patched, key_overrides=overrides, key_token=token)

    return KeyReplacementRecord(
        attn_clean=attention_drawn(clean_traces, token),
        attn_adv=attention_drawn(adv_traces, token),
        attn_replaced=attention_drawn(replaced_traces, token),
    )


def _matrix(values: np.ndarray) -> Dict:
    return {"shape": list(values.shape), "values": values.tolist()}


def projected_tokens(traces: Sequence[AttentionTrace], layer: int, head: int,
                     target_key: Optional[int] = None, components: int = 2) -> Dict:
    """Raw P_Q / P_K of one head, a PCA view of both, and the final-layer column of target_key."""
    if not 0 <= layer < len(traces):
        raise IndexRangeError(f"layer {layer} out of range for {len(traces)} traces")
    if not 0 <= head < len(traces[layer].heads):
        raise IndexRangeError(f"head {head} out of range for {len(traces[layer].heads)} heads")
    entry = traces[layer].heads[head]
    p_q, p_k = entry.p_q.data, entry.p_k.data
    if p_q.ndim != 2:
        raise ShapeError(f"token export works on a single image, got P_Q of shape {p_q.shape}")

    union = np.concatenate([p_k, p_q])
    n_components = min(components, union.shape[0], union.shape[1])
    pca = PCA(n_components=n_components, svd_solver="full").fit(union)
    payload = {
        "layer": layer,
        "head": head,
        "tokens": int(p_q.shape[0]),
        "queries": _matrix(p_q),
        "keys": _matrix(p_k),
        "pca": {
            "explained_variance_ratio": pca.explained_variance_ratio_.tolist(),
            "queries": _matrix(pca.transform(p_q)),
            "keys": _matrix(pca.transform(p_k)),
        },
    }
    if target_key is not None:
        final = traces[-1]
        column = np.mean([h.weights.data[:, target_key] for h in final.heads], axis=0)
        payload["target_key"] = int(target_key)
        payload["final_layer_attention_to_target"] = column.tolist()
    return payload


def export_projected_tokens(traces: Sequence[AttentionTrace], layer: int, head: int,
                            path: Union[str, Path], target_key: Optional[int] = None) -> Path:
    """Write projected_tokens() as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = projected_tokens(traces, layer, head, target_key)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8", newline="\n")
    logger.info(f"📁 exported projected tokens of layer {layer} head {head}: {path}")
    return path
