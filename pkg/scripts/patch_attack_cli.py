#!/usr/bin/env python3
"""
Patch Attack CLI - experiment runner for the attention patch lab

Commands:
  train       - Train the toy ViT, write checkpoint + init checkpoint + metrics
  attack      - PGD patch attack on the test split, per-image CSV + summary
  controlled  - Controlled single-head sweep (eps*, monotonicity, silhouette)
  diagnose    - Singular values, gradient ratios, token + trace export, key replacement

Examples:
  ./patch_attack_cli.py train --config configs/train.ini --out results/train
  ./patch_attack_cli.py attack --config configs/attack.ini --seed 3 --threads 4

Exit codes: 0 all artifacts written, 1 run failed, 2 invalid configuration.
"""

import argparse
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

# project root on the path
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.attack import (
    AttackTemplate, PatchSpec, apply_patch, check_ablation_grid, check_placement, evaluate_robust_accuracy, pgd_attack,
    resolve_loss_config, run_attack_ablation, token_patch_location, tracked_token,
)
from src.attention import export_traces
from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import Config
from src.controlled import controlled_sweep, monotonicity_report, silhouette_sweep
from src.dataset import DatasetSpec, SyntheticDataset, generate_synthetic_dataset
from src.diagnostics import (
    export_projected_tokens, gradient_ratio_report, key_replacement_ablation, singular_value_report,
)
from src.exceptions import CheckpointError, ConfigError, LabError, PatchPlacementError
from src.experiment import ExperimentWriter
from src.logging_config import RunContext, configure_from_env, get_logger
from src.run_config import COMMANDS, RunConfig, load_run_config
from src.training import initial_model, train_toy
from src.vit import ViTModel, forward

logger = get_logger("patchlab.cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def held_out_split(model: ViTModel, count: Optional[int] = None) -> SyntheticDataset:
    """Regenerate the held-out split recorded in the checkpoint."""
    provenance = model.info.dataset if model.info else None
    if not provenance or "test" not in provenance:
        raise CheckpointError("checkpoint carries no dataset provenance, cannot regenerate the test split")
    spec = DatasetSpec(**provenance["test"])
    dataset = generate_synthetic_dataset(spec, int(provenance["seed"]), split="test")
    return dataset if count is None else dataset.subset(count)


class PatchAttackCLI:
    """One method per subcommand; each returns the output directory."""

    def __init__(self, config: RunConfig, out_dir: Optional[str] = None):
        self.config = config
        self.seed = config.run.seed
        self.threads = Config.get_effective_threads(config.run.threads)
        self.writer = ExperimentWriter(out_dir or Path(config.run.output_dir) / config.command)

    def _banner(self, title: str):
        print(f"\n{'=' * 80}")
        print(title)
        print(f"{'=' * 80}")

    def _template(self, model: ViTModel) -> AttackTemplate:
        """Attack template; indices that only the loaded model can bound are checked here."""
        settings, loss, vit = self.config.attack, self.config.loss, model.config
        if loss.targeted and not 0 <= loss.target_class < vit.num_classes:
            raise ConfigError(f"target_class {loss.target_class} out of range for {vit.num_classes} classes")
        if loss.layer_selector is not None and not 0 <= loss.layer_selector < vit.depth:
            raise ConfigError(f"layer_selector {loss.layer_selector} out of range for depth {vit.depth}")
        for name in ("target_key", "target_query"):
            index = getattr(loss, name)
            if index is not None and index >= vit.seq_len:
                raise ConfigError(f"{name} {index} out of range for {vit.seq_len} tokens")
        edge = settings.patch_tokens * vit.patch_size
        try:
            location = token_patch_location(vit, settings.patch_row, settings.patch_col)
            check_placement(vit.image_shape, (edge, edge), location)
        except PatchPlacementError as e:
            raise ConfigError(f"[attack] patch placement: {e}") from None
        return AttackTemplate(attack=settings.attack_config(loss, self.seed), location=location, size=(edge, edge))

    def _check_diagnose(self, model: ViTModel):
        settings, vit = self.config.diagnose, model.config
        if not 0 <= settings.export_layer < vit.depth:
            raise ConfigError(f"export_layer {settings.export_layer} out of range for depth {vit.depth}")
        if not 0 <= settings.export_head < vit.heads:
            raise ConfigError(f"export_head {settings.export_head} out of range for {vit.heads} heads")
        if "key_replacement" in settings.reports and self.config.attack.patch_tokens != 1:
            raise ConfigError("key_replacement needs a single-token patch (patch_tokens = 1)")

    # === TRAIN ===
    def cmd_train(self) -> Path:
        """Command: train the toy ViT"""
        self._banner("🧠 TRAIN TOY ViT")
        vit, data, train = self.config.vit, self.config.dataset, self.config.train
        train_spec, test_spec = data.spec(vit, "train"), data.spec(vit, "test")

        dataset = generate_synthetic_dataset(train_spec, self.seed, "train")
        val = generate_synthetic_dataset(test_spec, self.seed, "val")
        provenance = {"seed": self.seed, "train": train_spec.to_dict(), "test": test_spec.to_dict()}

        init = initial_model(vit, self.seed)
        init.info.seed = self.seed
        init.info.dataset = provenance
        model = train_toy(vit, dataset, train.epochs, train.lr, self.seed,
                          batch_size=train.batch_size, val_dataset=val)
        model.info.dataset = provenance

        self.writer.write_config(self.config)
        save_checkpoint(init, self.writer.path("checkpoint_init.json"))
        save_checkpoint(model, self.writer.path("checkpoint.json"))
        self.writer.write_json("metrics.json", {
            "train_accuracy": model.info.train_accuracy,
            "val_accuracy": model.info.val_accuracy,
            "final_loss": model.info.final_loss,
            "epochs": train.epochs,
            "lr": train.lr,
            "seed": self.seed,
        })
        self.writer.finalize()

        print(f"✅ train accuracy: {model.info.train_accuracy:.3f}   val accuracy: {model.info.val_accuracy:.3f}")
        return self.writer.out_dir

    # === ATTACK ===
    def cmd_attack(self) -> Path:
        """Command: robust accuracy under the PGD patch attack"""
        self._banner("🎯 PATCH ATTACK")
        settings, ablation = self.config.attack, self.config.ablation
        model = load_checkpoint(settings.checkpoint)
        template = self._template(model)
        if ablation.enabled:
            check_ablation_grid(model.config, template, ablation.variants, ablation.locations, ablation.sizes)
        dataset = held_out_split(model, settings.num_images)

        metrics = evaluate_robust_accuracy(model, dataset, template, threads=self.threads)
        summary = metrics.get_summary()

        self.writer.write_config(self.config)
        self.writer.write_csv("attack_records.csv", metrics.to_frame())
        self.writer.write_json("summary.json", {
            "summary": summary,
            "attack": template.attack.to_dict(),
            "patch": {"location": list(template.location), "size": list(template.size),
                      "target_key": tracked_token(model, template.location, template.attack.loss)},
            "checkpoint": settings.checkpoint,
        })
        if ablation.enabled:
            table = run_attack_ablation(model, dataset, template, variants=ablation.variants,
                                        locations=ablation.locations, sizes=ablation.sizes,
                                        threads=self.threads, limit=ablation.num_images)
            self.writer.write_csv("ablation.csv", table)
        self.writer.finalize()

        print(metrics.get_report())
        return self.writer.out_dir

    # === CONTROLLED ===
    def cmd_controlled(self) -> Path:
        """Command: controlled single-head sweep"""
        self._banner("🔬 CONTROLLED SETTING")
        settings = self.config.controlled
        grid = settings.grid(self.seed)

        table = controlled_sweep(grid, threads=self.threads)
        report = monotonicity_report(table, slack=settings.slack)

        self.writer.write_config(self.config)
        self.writer.write_csv("sweep.csv", table)
        self.writer.write_csv("monotonicity.csv", report)
        if settings.silhouette:
            self.writer.write_csv("silhouette.csv", silhouette_sweep(grid, threads=self.threads))
        self.writer.finalize()

        held = int(report["holds"].sum()) if len(report) else 0
        print(f"✅ {len(table)} sweep rows, monotonicity holds for {held}/{len(report)} comparisons")
        return self.writer.out_dir

    # === DIAGNOSE ===
    def cmd_diagnose(self) -> Path:
        """Command: model-level vulnerability reports"""
        self._banner("🩺 DIAGNOSTICS")
        settings = self.config.diagnose
        model = load_checkpoint(settings.checkpoint)
        init_model = load_checkpoint(settings.init_checkpoint) if settings.compare_init else None
        self._check_diagnose(model)
        dataset = held_out_split(model, settings.num_images)
        needs_patch = {"token_export", "traces", "key_replacement"} & set(settings.reports)
        template = self._template(model) if needs_patch else None
        patches: Dict[int, PatchSpec] = {}

        def patch_for(index: int) -> PatchSpec:
            if index not in patches:
                loss = resolve_loss_config(model, template.location, template.attack.loss)
                goal = loss.target_class if loss.targeted else int(dataset.labels[index])
                patch, _ = pgd_attack(model, dataset.images[index], goal, template.location, template.size,
                                      template.attack, image_id=index)
                patches[index] = patch
            return patches[index]

        self.writer.write_config(self.config)
        if "singular_values" in settings.reports:
            self.writer.write_csv("singular_values.csv", singular_value_report(model, init_model))
        if "gradient_ratio" in settings.reports:
            self.writer.write_csv("gradient_ratio.csv", gradient_ratio_report(model, list(dataset.images)))
        if {"token_export", "traces"} & set(settings.reports):
            patch = patch_for(0)
            token = tracked_token(model, template.location, template.attack.loss)
            passes = {
                "clean": forward(model, dataset.images[0])[1],
                "patched": forward(model, apply_patch(dataset.images[0], patch.pixels, patch.location))[1],
            }
            for name, traces in passes.items():
                if "token_export" in settings.reports:
                    export_projected_tokens(traces, settings.export_layer, settings.export_head,
                                            self.writer.path(f"tokens_{name}.json"), token)
                if "traces" in settings.reports:
                    export_traces(traces, self.writer.path(f"traces_{name}.json"))
        if "key_replacement" in settings.reports:
            rows: List[Dict] = []
            for index in range(len(dataset)):
                record = key_replacement_ablation(model, dataset.images[index], patch_for(index),
                                                  template.attack.loss)
                rows.append({"image_id": index, **record.to_dict()})
            self.writer.write_csv("key_replacement.csv", pd.DataFrame(rows))
        self.writer.finalize()

        print(f"✅ reports written to {self.writer.out_dir}: {', '.join(settings.reports)}")
        return self.writer.out_dir

    def run(self) -> Path:
        handlers = {
            "train": self.cmd_train,
            "attack": self.cmd_attack,
            "controlled": self.cmd_controlled,
            "diagnose": self.cmd_diagnose,
        }
        with RunContext(stage=self.config.command):
            try:
                return handlers[self.config.command]()
            except Exception:
                self.writer.discard()
                raise


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Attention patch lab", formatter_class=argparse.RawDescriptionHelpFormatter)
    subparsers = parser.add_subparsers(dest="command", help="Commands")
    helps = {
        "train": "Train the toy ViT",
        "attack": "PGD patch attack and robust accuracy",
        "controlled": "Controlled single-head sweep",
        "diagnose": "Singular values, gradient ratios, token and trace export, key replacement",
    }
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=helps[command])
        sub.add_argument("--config", default=f"configs/{command}.ini", help="INI run config")
        sub.add_argument("--out", help="output directory (default: <output_dir>/<command>)")
        sub.add_argument("--seed", type=int, help="global seed, overrides [run] seed")
        sub.add_argument("--threads", type=int, help="workers for independent trials")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG

    configure_from_env()
    Config.validate()
    try:
        config = load_run_config(args.config, args.command).with_overrides(
            seed=args.seed, threads=args.threads
        )
        cli = PatchAttackCLI(config, out_dir=args.out)
        cli.run()
    except ConfigError as e:
        logger.error(f"❌ invalid configuration: {e}")
        print(f"❌ invalid configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LabError as e:
        logger.error(f"❌ {args.command} failed: {e}", exc_info=True)
        print(f"❌ {args.command} failed: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
