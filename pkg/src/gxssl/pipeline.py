"""Manifest-level orchestration shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .config import ConfigError, ExperimentConfig, resolve_config
from .core import DatasetManifest, ValidationError, load_checkpoint
from .dataset import load_patch_bank
from .evaluate import (
    FEWSHOT_GRID,
    INIT_MODES,
    FinetuneConfig,
    build_finetune_sets,
    evaluate_bank,
    finetune,
    load_test_bank,
    save_classifier,
)
from .patcher import TilingSpec
from .ssl import EncoderConfig, pretrain
from .augment import AugmentConfig

logger = logging.getLogger(__name__)

SUMMARY_HEADER = ("seed", "labeled_patients", "init", "sen", "spe", "hm")


def run_pretrain(manifest: DatasetManifest, config: ExperimentConfig, out_dir: str | os.PathLike,
                 deterministic: bool = False, on_step=None):
    # Only pixels are handed to the trainer; the records' labels stay here.
    _, patches = load_patch_bank(manifest)
    extra = {"tiling": dataclasses.asdict(config.tiling)}
    return pretrain(patches, config.encoder, config.mlp, config.augment, config.hyper, config.seed,
                    out_dir=out_dir, deterministic=deterministic, on_step=on_step, extra_meta=extra)


def _labelled(manifest: DatasetManifest, patient_ids) -> tuple[np.ndarray, np.ndarray]:
    records, patches = load_patch_bank(manifest, patient_ids)
    return patches, np.array([int(r.label) for r in records], dtype=np.int64)


def _ssl_source(ckpt: str | os.PathLike | None, config: ExperimentConfig):
    """(params or None, encoder config, augment config) for a fine-tune initialisation."""
    if ckpt is None:
        return None, config.encoder, config.augment
    params, meta = load_checkpoint(ckpt)
    cfg = meta["config"]
    return params, EncoderConfig(**cfg["encoder"]), AugmentConfig(**cfg["augment"])


def run_finetune(ckpt: str | os.PathLike | None, pool: DatasetManifest, labeled_patients: int, seed: int,
                 config: ExperimentConfig, out_dir: str | os.PathLike | None = None,
                 deterministic: bool = False, sets=None, val_data=None, ssl_source=None):
    """Fine-tune on the ``labeled_patients`` few-shot set drawn from ``pool`` with ``seed``.

    ``ckpt=None`` trains from scratch.
    """
    init = "scratch" if ckpt is None else "ssl_checkpoint"
    ft_cfg = dataclasses.replace(config.finetune, labeled_patients=labeled_patients, init=init)
    sets = sets or build_finetune_sets(pool, seed, grid=(labeled_patients,))
    if labeled_patients not in sets.fewshot:
        raise ValidationError(f"no few-shot set of size {labeled_patients}")
    params, encoder_cfg, augment_cfg = ssl_source or _ssl_source(ckpt, config)
    x_train, y_train = _labelled(pool, sets.fewshot[labeled_patients].patient_ids)
    x_val, y_val = val_data if val_data is not None else _labelled(pool, sets.val.patient_ids)
    result = finetune(x_train, y_train, x_val, y_val, encoder_cfg, augment_cfg, ft_cfg, seed,
                      ssl_params=params, deterministic=deterministic)
    if out_dir is not None:
        meta = {
            "seed": seed,
            "init_checkpoint": None if ckpt is None else str(ckpt),
            "tiling": dataclasses.asdict(config.tiling),
            "fewshot_patients": sets.fewshot[labeled_patients].patient_ids,
            "val_patients": sets.val.patient_ids,
        }
        save_classifier(result, augment_cfg, ft_cfg, meta, out_dir)
    return result, augment_cfg


# --------------------------------------------------------------------------
# Sweep
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPlan:
    name: str = "sweep"
    seeds: tuple[int, ...] = (0, 1, 2)
    fewshot_grid: tuple[int, ...] = FEWSHOT_GRID
    init_modes: tuple[str, ...] = INIT_MODES
    pool_manifest: str | None = None
    test_manifest: str | None = None
    ssl_checkpoint: str | None = None
    sigma: float = 0.5
    config: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "fewshot_grid", tuple(self.fewshot_grid))
        object.__setattr__(self, "init_modes", tuple(self.init_modes))
        if not self.seeds:
            raise ValidationError("plan needs at least one seed")
        if not self.fewshot_grid or any(k <= 0 or k % 2 for k in self.fewshot_grid):
            raise ValidationError(f"fewshot grid values must be positive and even, got {self.fewshot_grid}")
        bad = [m for m in self.init_modes if m not in INIT_MODES]
        if bad or not self.init_modes:
            raise ValidationError(f"init modes must be drawn from {INIT_MODES}, got {self.init_modes}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentPlan":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan key(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class SweepResult:
    rows: list[dict]
    failures: list[dict]
    medians: dict[str, dict[int, float]]


def median_hm(rows: list[dict], init_modes, grid) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {}
    for init in init_modes:
        out[init] = {}
        for k in grid:
            vals = [r["hm"] for r in rows if r["init"] == init and r["labeled_patients"] == k]
            if vals:
                out[init][k] = statistics.median(vals)
    return out


def plot_hm_curve(medians: dict[str, dict[int, float]], out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for init, curve in medians.items():
        ks = sorted(curve)
        ax.plot(ks, [curve[k] for k in ks], marker="o", label=init)
    ax.set_xlabel("labeled patients")
    ax.set_ylabel("median HM over seeds")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    paths = [out_dir / "hm_curve.svg", out_dir / "hm_curve.png"]
    for p in paths:
        fig.savefig(p, dpi=120)
    plt.close(fig)
    return paths


def run_sweep(plan: ExperimentPlan, out_dir: str | os.PathLike, config: ExperimentConfig | None = None,
              pool: DatasetManifest | None = None, test: DatasetManifest | None = None,
              deterministic: bool = False) -> SweepResult:
    """Fine-tune and evaluate every (seed, few-shot size, init) cell; write summary.csv and plots.

    A failing cell is logged, recorded in failures.json and skipped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = config or resolve_config(plan.config)
    pool = pool or DatasetManifest.load(plan.pool_manifest)
    test = test or DatasetManifest.load(plan.test_manifest)
    if "ssl_checkpoint" in plan.init_modes and not (plan.ssl_checkpoint and Path(plan.ssl_checkpoint).exists()):
        raise ValidationError(f"plan includes ssl_checkpoint but checkpoint {plan.ssl_checkpoint!r} does not exist")

    sources = {}
    if "ssl_checkpoint" in plan.init_modes:
        sources["ssl_checkpoint"] = _ssl_source(plan.ssl_checkpoint, config)
    if "scratch" in plan.init_modes:
        sources["scratch"] = _ssl_source(None, config)
    tiling = TilingSpec(**load_checkpoint(plan.ssl_checkpoint)[1].get("tiling", dataclasses.asdict(config.tiling))) \
        if "ssl_checkpoint" in sources else config.tiling
    test_patches, truths = load_test_bank(test, tiling)

    rows, failures = [], []
    for seed in plan.seeds:
        sets = build_finetune_sets(pool, seed, grid=plan.fewshot_grid)
        val_data = _labelled(pool, sets.val.patient_ids)
        for k in plan.fewshot_grid:
            for init in plan.init_modes:
                cell = out_dir / "cells" / f"seed{seed}_k{k}_{init}"
                try:
                    ckpt = plan.ssl_checkpoint if init == "ssl_checkpoint" else None
                    result, augment_cfg = run_finetune(ckpt, pool, k, seed, config, cell / "model", deterministic,
                                                       sets=sets, val_data=val_data, ssl_source=sources[init])
                    report = evaluate_bank(result.model, augment_cfg, test_patches, truths, plan.sigma)
                    report.save(cell / "report.json")
                    rows.append({"seed": seed, "labeled_patients": k, "init": init,
                                 "sen": report.sen, "spe": report.spe, "hm": report.hm})
                    logger.info("cell seed=%d k=%d init=%s: HM %.3f", seed, k, init, report.hm)
                except Exception as e:  # noqa: BLE001 - a failed cell is recorded, not fatal
                    logger.exception("cell seed=%d k=%d init=%s failed", seed, k, init)
                    failures.append({"seed": seed, "labeled_patients": k, "init": init, "error": repr(e)})

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_HEADER)
        w.writeheader()
        w.writerows(rows)
    (out_dir / "failures.json").write_text(json.dumps(failures, indent=1), encoding="utf-8")
    medians = median_hm(rows, plan.init_modes, plan.fewshot_grid)
    (out_dir / "medians.json").write_text(
        json.dumps({init: {str(k): v for k, v in c.items()} for init, c in medians.items()}, indent=1), encoding="utf-8")
    if rows:
        plot_hm_curve(medians, out_dir)
    return SweepResult(rows, failures, medians)
