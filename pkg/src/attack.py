"""
Single-patch, fixed-location PGD attack on the toy ViT.

Features:
- Patch application that overwrites one box of the image (differentiable in the patch only)
- Signed-gradient ascent with [0, 1] projection after every step
- Normalized momentum and cosine step-size decay
- Robust accuracy / targeted success evaluation with per-image records
- Ablation sweep over loss variants, patch locations and patch sizes
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.attention import attention_drawn
from src.dataset import SyntheticDataset
from src.exceptions import AttackError, ConfigError, PatchPlacementError, UsageError
from src.logging_config import get_attack_logger, log_execution_time
from src.losses import AGGREGATIONS, LossConfig, combine_terms, loss_terms
from src.metrics import AttackMetrics
from src.seeding import stream
from src.tensor import Tape, Tensor, add, as_tensor, mul, pad_block
from src.vit import ViTConfig, ViTModel, forward

logger = logging.getLogger(__name__)

Location = Tuple[int, int]


@dataclass
class PatchSpec:
    """Patch pixels (C, p_h, p_w) anchored at a top-left pixel location (row, col)."""
    pixels: np.ndarray
    location: Location

    @property
    def size(self) -> Tuple[int, int]:
        return (self.pixels.shape[-2], self.pixels.shape[-1])


@dataclass
class AttackConfig:
    iterations: int = 250
    step_size: float = 8 / 255
    momentum: float = 0.9
    use_momentum: bool = True
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.step_size < 0:
            raise ConfigError(f"step_size must be >= 0, got {self.step_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AttackTemplate:
    """What to run on every image: the attack config plus patch placement in pixels."""
    attack: AttackConfig
    location: Location
    size: Tuple[int, int]

    def __post_init__(self):
        if self.size[0] < 1 or self.size[1] < 1:
            raise ConfigError(f"patch size must be at least 1x1, got {self.size[0]}x{self.size[1]}")


@dataclass
class IterationRecord:
    iteration: int
    step_size: float
    total: float
    terms: Dict[str, float]


# ============================================================================
# PATCH PLACEMENT
# ============================================================================

def check_placement(image_shape: Sequence[int], size: Tuple[int, int], location: Location):
    height, width = image_shape[-2], image_shape[-1]
    row, col = location
    if row < 0 or col < 0 or row + size[0] > height or col + size[1] > width:
        raise PatchPlacementError(
            f"patch {size[0]}x{size[1]} at {tuple(location)} does not fit in a {height}x{width} image"
        )


def patch_mask(image_shape: Sequence[int], size: Tuple[int, int], location: Location) -> np.ndarray:
    """1 outside the patch box, 0 inside."""
    check_placement(image_shape, size, location)
    mask = np.ones(tuple(image_shape))
    row, col = location
    mask[..., row:row + size[0], col:col + size[1]] = 0.0
    return mask


def apply_patch(image, pixels, location: Location) -> Tensor:
    """Overwrite the box anchored at `location` with `pixels`."""
    image = np.asarray(as_tensor(image).data)
    pixels = as_tensor(pixels)
    if pixels.ndim != image.ndim or pixels.shape[:-2] != image.shape[:-2]:
        raise PatchPlacementError(f"patch shape {pixels.shape} does not match image shape {image.shape}")
    size = (pixels.shape[-2], pixels.shape[-1])
    mask = patch_mask(image.shape, size, location)
    return add(mul(image, mask), pad_block(pixels, image.shape, location))


def token_patch_location(config: ViTConfig, grid_row: int, grid_col: int) -> Location:
    """Top-left pixel of the image patch that becomes token 1 + grid_row * g + grid_col."""
    g = config.grid_size
    if not (0 <= grid_row < g and 0 <= grid_col < g):
        raise PatchPlacementError(f"grid position ({grid_row}, {grid_col}) outside the {g}x{g} token grid")
    return (grid_row * config.patch_size, grid_col * config.patch_size)


def patch_token_index(config: ViTConfig, location: Location) -> int:
    """Token index of the image patch whose top-left pixel is `location`."""
    p = config.patch_size
    row, col = location
    if row % p or col % p:
        raise PatchPlacementError(f"patch at {tuple(location)} is not aligned to the {p}-pixel token grid")
    grid_row, grid_col = row // p, col // p
    if not (0 <= grid_row < config.grid_size and 0 <= grid_col < config.grid_size):
        raise PatchPlacementError(f"patch at {tuple(location)} lies outside the image")
    return 1 + grid_row * config.grid_size + grid_col


# ============================================================================
# PGD
# ============================================================================

def cosine_step(step_size: float, t: int, iterations: int) -> float:
    """step_size * (1 + cos(pi t / N)) / 2."""
    if not 0 <= t <= iterations:
        raise UsageError(f"iteration {t} outside [0, {iterations}]")
    return step_size * 0.5 * (1.0 + math.cos(math.pi * t / iterations))


def resolve_loss_config(model: ViTModel, location: Location, loss: LossConfig) -> LossConfig:
    """Fill in the target key from the patch location when a term needs it and it was left open."""
    if loss.target_key is not None or not loss.needs_target_key:
        return loss
    return loss.with_target_key(patch_token_index(model.config, location))


def tracked_token(model: ViTModel, location: Location, loss: LossConfig) -> Optional[int]:
    """Key whose attention is recorded: target_key, else the token under an aligned patch, else None."""
    if loss.target_key is not None:
        return loss.target_key
    try:
        return patch_token_index(model.config, location)
    except PatchPlacementError:
        return None


def initial_patch(config: AttackConfig, image_id: int, shape: Tuple[int, ...]) -> np.ndarray:
    return stream(config.seed, "patch-init", image_id).uniform(0.0, 1.0, size=shape)


def pgd_attack(
    model: ViTModel,
    image: np.ndarray,
    label_or_target: int,
    location: Location,
    size: Tuple[int, int],
    config: AttackConfig,
    image_id: int = 0
) -> Tuple[PatchSpec, List[IterationRecord]]:
    """
    Optimize one patch for one image.

    Args:
        model: frozen classifier
        image: clean image (C, H, W) in [0, 1]
        label_or_target: ground-truth label (untargeted) or target class (targeted)
        location: top-left pixel of the patch
        size: (p_h, p_w)
        config: PGD settings and loss
        image_id: selects the patch initialization sub-stream

    Returns:
        (final patch, one IterationRecord per iteration)

    Raises:
        AttackError: the loss became non-finite
    """
    image = np.asarray(image, dtype=np.float64)
    check_placement(image.shape, size, location)
    loss_config = resolve_loss_config(model, location, config.loss)
    attack_logger = get_attack_logger()

    pixels = initial_patch(config, image_id, image.shape[:-2] + tuple(size))
    velocity = np.zeros_like(pixels)
    history: List[IterationRecord] = []

    for t in range(config.iterations):
        tape = Tape()
        leaf = tape.leaf(pixels, "patch")
        logits, traces = forward(model, apply_patch(image, leaf, location))
        terms = loss_terms(logits, traces, label_or_target, loss_config)
        total = combine_terms(terms, loss_config)
        value = total.item()
        if not np.isfinite(value):
            raise AttackError(f"loss became {value} on image {image_id}", t)

        grad = tape.backward(total)[leaf].data
        step = cosine_step(config.step_size, t, config.iterations)
        term_values = {name: term.item() for name, term in terms.items()}
        history.append(IterationRecord(iteration=t, step_size=step, total=value, terms=term_values))
        attack_logger.log_iteration(t, step, value, term_values)

        if config.use_momentum:
            norm = float(np.linalg.norm(grad))
            velocity = config.momentum * velocity
            if norm > 0.0:
                velocity = velocity + (1.0 - config.momentum) * grad / norm
            direction = velocity
        else:
            direction = grad
        pixels = np.clip(pixels + step * np.sign(direction), 0.0, 1.0)

    return PatchSpec(pixels=pixels, location=tuple(location)), history


# ============================================================================
# EVALUATION
# ============================================================================

@dataclass
class ImageRecord:
    image_id: int
    label: int
    target: Optional[int]
    clean_pred: int
    attacked_pred: int
    success: bool
    excluded: bool
    final_loss: float
    attn_clean: Optional[float]
    attn_attacked: Optional[float]
    terms: Dict[str, float] = field(default_factory=dict)

    def to_row(self) -> Dict:
        row = {k: v for k, v in asdict(self).items() if k != "terms"}
        row["target"] = -1 if self.target is None else self.target
        for name, value in self.terms.items():
            row[f"final_{name}"] = value
        return row


def attack_image(model: ViTModel, image: np.ndarray, label: int, image_id: int,
                 template: AttackTemplate) -> ImageRecord:
    """Clean pass, PGD, attacked pass for one image."""
    config = template.attack
    loss_config = resolve_loss_config(model, template.location, config.loss)
    token = tracked_token(model, template.location, loss_config)
    target = loss_config.target_class if loss_config.targeted else None
    goal = target if target is not None else label

    clean_logits, clean_traces = forward(model, image)
    clean_pred = int(np.argmax(clean_logits.data))
    excluded = target is not None and label == target

    patch, _ = pgd_attack(model, image, goal, template.location, template.size, config, image_id=image_id)
    attacked = apply_patch(image, patch.pixels, patch.location)
    logits, traces = forward(model, attacked)
    terms = loss_terms(logits, traces, goal, loss_config)
    final_loss = combine_terms(terms, loss_config).item()
    attacked_pred = int(np.argmax(logits.data))

    if target is not None:
        success = (not excluded) and attacked_pred == target
    else:
        success = clean_pred == label and attacked_pred != label

    record = ImageRecord(
        image_id=image_id,
        label=int(label),
        target=target,
        clean_pred=clean_pred,
        attacked_pred=attacked_pred,
        success=bool(success),
        excluded=bool(excluded),
        final_loss=final_loss,
        attn_clean=None if token is None else attention_drawn(clean_traces, token),
        attn_attacked=None if token is None else attention_drawn(traces, token),
        terms={name: term.item() for name, term in terms.items()},
    )
    get_attack_logger().log_image(image_id, record.label, clean_pred, attacked_pred, record.success, final_loss)
    return record


@log_execution_time(label="robust accuracy")
def evaluate_robust_accuracy(
    model: ViTModel,
    dataset: SyntheticDataset,
    template: AttackTemplate,
    threads: int = 1,
    limit: Optional[int] = None
) -> AttackMetrics:
    """
    Attack every image independently (fresh initial patch per image).

    Records are sorted by image id, so the result does not depend on the
    number of workers.
    """
    count = len(dataset) if limit is None else min(limit, len(dataset))
    logger.info(f"🎯 attacking {count} images with {template.attack.iterations} PGD steps, "
                f"terms={template.attack.loss.terms}, threads={threads}")

    records = Parallel(n_jobs=threads)(
        delayed(attack_image)(model, dataset.images[i], int(dataset.labels[i]), i, template)
        for i in range(count)
    )
    metrics = AttackMetrics(targeted=template.attack.loss.targeted)
    for record in sorted(records, key=lambda r: r.image_id):
        metrics.track(record)
    logger.info(metrics.get_report())
    return metrics


# ============================================================================
# ABLATION
# ============================================================================

def ablation_variant(name: str, base: AttackConfig) -> AttackConfig:
    """
    Named modification of an attack config.

    baseline, agg:<head>/<layer>, normalize:off, normalize:on, layer:<l>,
    layer:all, momentum:off, terms:<t1>+<t2>
    """
    loss = base.loss
    if name == "baseline":
        return base
    kind, _, arg = name.partition(":")
    if kind == "agg":
        head, _, layer = arg.partition("/")
        if head not in AGGREGATIONS or layer not in AGGREGATIONS:
            raise ConfigError(f"ablation variant {name!r}: aggregations must be in {AGGREGATIONS}")
        return replace(base, loss=replace(loss, head_aggregation=head, layer_aggregation=layer))
    if kind == "normalize" and arg in ("on", "off"):
        return replace(base, loss=replace(loss, normalize=arg == "on"))
    if kind == "layer":
        if arg == "all":
            return replace(base, loss=replace(loss, layer_selector=None))
        try:
            return replace(base, loss=replace(loss, layer_selector=int(arg)))
        except ValueError:
            raise ConfigError(f"ablation variant {name!r}: layer must be an integer or 'all'") from None
    if kind == "momentum" and arg in ("on", "off"):
        return replace(base, use_momentum=arg == "on")
    if kind == "terms" and arg:
        return replace(base, loss=replace(loss, terms=arg.split("+")))
    raise ConfigError(f"unknown ablation variant {name!r}")


def check_ablation_grid(
    model_config: ViTConfig,
    template: AttackTemplate,
    variants: Sequence[str],
    locations: Optional[Sequence[Tuple[int, int]]] = None,
    sizes: Optional[Sequence[int]] = None
) -> List[Tuple[str, AttackConfig, Location, Tuple[int, int]]]:
    """
    Every (variant, placement, size) cell of an ablation, checked against the model.

    Raises ConfigError for an unknown variant, a layer beyond the model depth,
    a grid position off the token grid or a patch that does not fit.
    """
    g, p = model_config.grid_size, model_config.patch_size
    if locations is None:
        placements = [tuple(template.location)]
    else:
        off_grid = [(r, c) for r, c in locations if not (0 <= r < g and 0 <= c < g)]
        if off_grid:
            raise ConfigError(f"ablation locations {off_grid} outside the {g}x{g} token grid")
        placements = [token_patch_location(model_config, r, c) for r, c in locations]
    if sizes is not None and any(k < 1 for k in sizes):
        raise ConfigError(f"ablation sizes must be >= 1 token, got {list(sizes)}")
    edge_sizes = [tuple(template.size)] if sizes is None else [(k * p, k * p) for k in sizes]

    variant_configs = [(name, ablation_variant(name, template.attack)) for name in variants]
    for name, attack in variant_configs:
        selector = attack.loss.layer_selector
        if selector is not None and not 0 <= selector < model_config.depth:
            raise ConfigError(f"ablation variant {name!r}: layer {selector} beyond depth {model_config.depth}")

    cells = []
    for (name, attack), location, size in itertools.product(variant_configs, placements, edge_sizes):
        try:
            check_placement(model_config.image_shape, size, location)
        except PatchPlacementError as e:
            raise ConfigError(f"ablation cell {name!r}: {e}") from None
        cells.append((name, attack, location, size))
    return cells


@log_execution_time(label="attack ablation")
def run_attack_ablation(
    model: ViTModel,
    dataset: SyntheticDataset,
    template: AttackTemplate,
    variants: Sequence[str] = ("baseline",),
    locations: Optional[Sequence[Tuple[int, int]]] = None,
    sizes: Optional[Sequence[int]] = None,
    threads: int = 1,
    limit: Optional[int] = None
) -> pd.DataFrame:
    """
    Robust accuracy for every (variant, grid location, size) combination.

    locations are token-grid positions; sizes are patch edge lengths in
    tokens. Either left as None keeps the template placement.
    """
    cells = check_ablation_grid(model.config, template, variants, locations, sizes)
    logger.info(f"🧪 ablation: {len(cells)} cells")

    rows = []
    for name, attack, location, size in cells:
        # the patch token moves with the location unless the variant pins it
        cell = AttackTemplate(attack=attack, location=location, size=size)
        metrics = evaluate_robust_accuracy(model, dataset, cell, threads=threads, limit=limit)
        summary = metrics.get_summary()
        rows.append({
            "variant": name,
            "row": location[0],
            "col": location[1],
            "patch_h": size[0],
            "patch_w": size[1],
            "images": summary["images"],
            "clean_accuracy": summary["clean_accuracy"],
            "robust_accuracy": summary["robust_accuracy"],
            "success_rate": summary["success_rate"],
            "attn_clean": summary["mean_attn_clean"],
            "attn_attacked": summary["mean_attn_attacked"],
        })
    return pd.DataFrame(rows)
