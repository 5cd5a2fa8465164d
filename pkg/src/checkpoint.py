"""
Checkpoint files for the toy ViT.

JSON text: {version, config, params: [{name, shape, values}], seed, metrics,
dataset}. Values are row-major decimals written with Python's shortest
round-trip float repr, so save -> load -> save is byte-identical.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np

from src.exceptions import CheckpointError, ConfigError, ShapeError
from src.vit import TrainingInfo, ViTConfig, ViTModel

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def checkpoint_dict(model: ViTModel) -> Dict:
    info = model.info or TrainingInfo(seed=0)
    return {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": [
            {"name": name, "shape": list(value.shape), "values": value.reshape(-1).tolist()}
            for name, value in model.params.items()
        ],
        "seed": info.seed,
        "metrics": {
            "train_accuracy": info.train_accuracy,
            "val_accuracy": info.val_accuracy,
            "final_loss": info.final_loss,
            "epochs": info.epochs,
            "lr": info.lr,
        },
        "dataset": info.dataset,
    }


def save_checkpoint(model: ViTModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(checkpoint_dict(model), sort_keys=True, separators=(",", ":"))
    path.write_text(text + "\n", encoding="utf-8")
    logger.info(f"💾 checkpoint saved: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> ViTModel:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: missing file, malformed content or unsupported version
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from None

    if not isinstance(data, dict) or "version" not in data:
        raise CheckpointError(f"malformed checkpoint {path}: no version field")
    if data["version"] != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {data['version']} is not supported (expected {FORMAT_VERSION})")

    try:
        config = ViTConfig.from_dict(data["config"])
        params = {}
        for entry in data["params"]:
            shape = tuple(int(s) for s in entry["shape"])
            params[entry["name"]] = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
        metrics = data.get("metrics") or {}
        info = TrainingInfo(
            seed=int(data["seed"]),
            train_accuracy=metrics.get("train_accuracy"),
            val_accuracy=metrics.get("val_accuracy"),
            epochs=int(metrics.get("epochs", 0)),
            lr=float(metrics.get("lr", 0.0)),
            final_loss=metrics.get("final_loss"),
            dataset=data.get("dataset"),
        )
        model = ViTModel(config, params, info)
    except (KeyError, TypeError, ValueError, ConfigError, ShapeError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from None

    logger.info(f"📂 checkpoint loaded: {path} (depth={config.depth}, seed={info.seed})")
    return model