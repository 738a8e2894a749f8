"""Few-label fine-tuning, patient-level ratio decisions and Sen/Spe/HM metrics."""

from __future__ import annotations

import copy
import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .augment import AugmentConfig, eval_transform
from .core import (
    DatasetManifest,
    NumericError,
    PatchLabel,
    PatientLabel,
    ValidationError,
    load_checkpoint,
    load_gray_image,
    save_checkpoint,
)
from .patcher import TilingSpec, extract_test_patches
from .ssl import (
    EncoderConfig,
    MomentumSGD,
    _fan_in_uniform_,
    build_encoder,
    load_module_params,
    set_deterministic,
)

logger = logging.getLogger(__name__)

FEWSHOT_GRID = (10, 20, 30, 40)
INIT_MODES = ("ssl_checkpoint", "scratch")


@dataclass(frozen=True)
class FinetuneConfig:
    labeled_patients: int = 10
    epochs: int = 40
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 0.0004
    batch_size: int = 64
    init: str = "ssl_checkpoint"

    def __post_init__(self):
        if self.labeled_patients < 2 or self.labeled_patients % 2:
            raise ValidationError(f"labeled_patients must be even and >= 2, got {self.labeled_patients}")
        if self.init not in INIT_MODES:
            raise ValidationError(f"init must be one of {INIT_MODES}, got {self.init!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValidationError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")


@dataclass(frozen=True)
class PatientPrediction:
    patient_id: str
    count_O: int
    count_N: int
    count_P: int
    ratio: float | None
    y: int

    def to_dict(self, truth: int | None = None) -> dict:
        d = asdict(self)
        if truth is not None:
            d["truth"] = int(truth)
        return d


@dataclass
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    sen: float
    spe: float
    hm: float
    sigma: float
    per_patient: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------

@dataclass
class FinetuneSets:
    train: DatasetManifest
    val: DatasetManifest
    fewshot: dict[int, DatasetManifest]


def build_finetune_sets(pool: DatasetManifest, seed: int, n_train: int = 120, n_val: int = 80,
                        grid: Sequence[int] = FEWSHOT_GRID) -> FinetuneSets:
    """Stratified train/val split of the pool plus nested, balanced few-shot subsets of train."""
    if n_train % 2 or n_val % 2:
        raise ValidationError("n_train and n_val must be even for a half/half class split")
    rng = np.random.default_rng([seed, 0x5E7])
    by_class = {}
    for label in (PatientLabel.POSITIVE, PatientLabel.NEGATIVE):
        ids = sorted(p.patient_id for p in pool.patients if p.patient_label is label)
        need = (n_train + n_val) // 2
        if len(ids) < need:
            raise ValidationError(f"pool has {len(ids)} {label.name.lower()} patients, need {need}")
        by_class[label] = [ids[i] for i in rng.permutation(len(ids))]
    half_train = n_train // 2
    train_pos, train_neg = by_class[PatientLabel.POSITIVE][:half_train], by_class[PatientLabel.NEGATIVE][:half_train]
    val_ids = (by_class[PatientLabel.POSITIVE][half_train:half_train + n_val // 2]
               + by_class[PatientLabel.NEGATIVE][half_train:half_train + n_val // 2])
    fewshot = {}
    for k in grid:
        if k % 2 or k < 2 or k > n_train:
            raise ValidationError(f"few-shot size {k} must be even and within the {n_train}-patient train split")
        # Prefixes of one fixed shuffle give nested sets.
        fewshot[k] = pool.subset(train_pos[:k // 2] + train_neg[:k // 2], "finetune_train")
    return FinetuneSets(pool.subset(train_pos + train_neg, "finetune_train"), pool.subset(val_ids, "finetune_val"), fewshot)


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class PatchClassifier(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig):
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.f_theta = build_encoder(encoder_cfg)
        self.head = nn.Linear(encoder_cfg.feature_dim, len(PatchLabel))

    def forward(self, x):
        return self.head(self.f_theta(x))

    def named_checkpoint_tensors(self):
        return [(f"{prefix}.{n}", t) for prefix in ("f_theta", "head") for n, t in getattr(self, prefix).state_dict().items()]


def init_classifier(encoder_cfg: EncoderConfig, seed: int, ssl_params: dict[str, np.ndarray] | None = None) -> PatchClassifier:
    torch.manual_seed(seed)
    model = PatchClassifier(encoder_cfg)
    _fan_in_uniform_(model)
    if ssl_params is not None:
        load_module_params(model.f_theta, ssl_params, "f_theta")
    return model


def _labels_array(labels: Iterable) -> np.ndarray:
    return np.array([int(l) for l in labels], dtype=np.int64)


@torch.no_grad()
def predict_logits(model: PatchClassifier, views: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(views), batch_size):
        out.append(model(torch.from_numpy(views[i:i + batch_size])).numpy())
    return np.concatenate(out) if out else np.zeros((0, len(PatchLabel)), dtype=np.float32)


def predict_patches(model: PatchClassifier, patches: np.ndarray, augment_cfg: AugmentConfig,
                    batch_size: int = 512) -> np.ndarray:
    """Predicted class index per patch (0=O, 1=N, 2=P); ties go to the lowest index."""
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 3:
        raise ValidationError(f"expected (N, S, S) patches, got shape {patches.shape}")
    views = eval_transform(patches, augment_cfg)[:, None]
    return np.argmax(predict_logits(model, views, batch_size), axis=1)


def _accuracy(model: PatchClassifier, views: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float((np.argmax(predict_logits(model, views), axis=1) == labels).mean())


@dataclass
class FinetuneResult:
    model: PatchClassifier
    best_epoch: int
    val_accuracy_history: list[float]
    train_loss_history: list[float]


def finetune(
    train_patches: np.ndarray,
    train_labels: Sequence,
    val_patches: np.ndarray,
    val_labels: Sequence,
    encoder_cfg: EncoderConfig,
    augment_cfg: AugmentConfig,
    cfg: FinetuneConfig,
    seed: int,
    ssl_params: dict[str, np.ndarray] | None = None,
    deterministic: bool = False,
) -> FinetuneResult:
    """Full-network fine-tune of encoder + linear head with cross-entropy over {O, N, P}.

    Returns the epoch with the best validation patch accuracy, earliest on
    ties. With zero epochs the initialisation itself is returned.
    """
    if deterministic:
        set_deterministic(True)
    if len(train_patches) == 0:
        raise ValidationError("empty few-shot training set")
    if cfg.init == "ssl_checkpoint" and ssl_params is None:
        raise ValidationError("init=ssl_checkpoint needs checkpoint parameters")
    model = init_classifier(encoder_cfg, seed, ssl_params if cfg.init == "ssl_checkpoint" else None)
    x_train = eval_transform(train_patches, augment_cfg)[:, None]
    y_train = torch.from_numpy(_labels_array(train_labels))
    x_val = eval_transform(val_patches, augment_cfg)[:, None]
    y_val = _labels_array(val_labels)

    opt = MomentumSGD(list(model.named_parameters()), cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    loss_fn = nn.CrossEntropyLoss()
    best_state = copy.deepcopy(model.state_dict())
    best_acc, best_epoch = -1.0, 0
    val_hist, loss_hist = [], []
    n = len(x_train)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5
        total = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2 and batches:
                continue  # a singleton trailing batch cannot be batch-normalised
            xb = x_train[idx].copy()
            fb = flips[idx]
            xb[fb] = xb[fb][..., ::-1]
            logits = model(torch.from_numpy(xb))
            loss = loss_fn(logits, y_train[idx])
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            batches += 1
        loss_hist.append(total / max(batches, 1))
        acc = _accuracy(model, x_val, y_val)
        val_hist.append(acc)
        logger.info("finetune epoch %d loss %.4f val acc %.4f", epoch, loss_hist[-1], acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return FinetuneResult(model, best_epoch, val_hist, loss_hist)


def select_best_epoch(val_accuracy_history: Sequence[float]) -> int:
    """1-based epoch of the maximum accuracy, earliest on ties (0 when empty)."""
    if not val_accuracy_history:
        return 0
    return int(np.argmax(np.asarray(val_accuracy_history))) + 1


def save_classifier(result: FinetuneResult, augment_cfg: AugmentConfig, cfg: FinetuneConfig, meta: dict,
                    out_dir: str | os.PathLike) -> Path:
    full = {
        "kind": "classifier",
        "config": {"encoder": asdict(result.model.encoder_cfg), "augment": asdict(augment_cfg), "finetune": asdict(cfg)},
        "epoch": result.best_epoch,
        "loss_history": result.train_loss_history,
        "val_accuracy_history": result.val_accuracy_history,
        **meta,
    }
    return save_checkpoint(result.model.named_checkpoint_tensors(), full, out_dir)


def load_classifier(directory: str | os.PathLike) -> tuple[PatchClassifier, AugmentConfig, dict]:
    params, meta = load_checkpoint(directory)
    if meta.get("kind") != "classifier":
        raise ValidationError(f"{directory} is not a fine-tuned classifier checkpoint")
    cfg = meta["config"]
    model = PatchClassifier(EncoderConfig(**cfg["encoder"]))
    load_module_params(model.f_theta, params, "f_theta")
    load_module_params(model.head, params, "head")
    model.eval()
    return model, AugmentConfig(**cfg["augment"]), meta


# --------------------------------------------------------------------------
# Patient-level decision and metrics
# --------------------------------------------------------------------------

def classify_patient(patient_id: str, predictions: Sequence, sigma: float = 0.5) -> PatientPrediction:
    """Count predicted labels and decide positive iff P / (N + P) >= sigma.

    Outside-stomach predictions are ignored. With no N or P predictions the
    ratio is None and the decision is negative.
    """
    if len(predictions) == 0:
        raise ValidationError(f"patient {patient_id}: no patch predictions")
    counts = Counter(PatchLabel(int(p)) for p in predictions)
    o, n, p = counts[PatchLabel.O], counts[PatchLabel.N], counts[PatchLabel.P]
    if n + p == 0:
        logger.warning("patient %s: every patch predicted outside the stomach; deciding negative", patient_id)
        return PatientPrediction(patient_id, o, n, p, None, 0)
    ratio = p / (n + p)
    return PatientPrediction(patient_id, o, n, p, ratio, int(ratio >= sigma))


def harmonic_mean(sen: float, spe: float) -> float:
    return 0.0 if sen + spe == 0 else 2 * sen * spe / (sen + spe)


def compute_metrics(pairs: Sequence[tuple[int, int]], sigma: float = 0.5,
                    per_patient: Sequence[dict] = ()) -> MetricsReport:
    """Confusion counts over (truth, decision) pairs plus Sen, Spe and their harmonic mean."""
    if len(pairs) == 0:
        raise ValidationError("need at least one patient")
    tp = tn = fp = fn = 0
    for truth, y in pairs:
        truth, y = int(truth), int(y)
        if truth not in (0, 1) or y not in (0, 1):
            raise ValidationError(f"truth and decision must be 0/1, got ({truth}, {y})")
        if truth and y:
            tp += 1
        elif truth:
            fn += 1
        elif y:
            fp += 1
        else:
            tn += 1
    sen = tp / (tp + fn) if tp + fn else 0.0
    spe = tn / (tn + fp) if tn + fp else 0.0
    return MetricsReport(tp, tn, fp, fn, sen, spe, harmonic_mean(sen, spe), sigma, list(per_patient))


def evaluate_predictions(per_patient_predictions: dict[str, Sequence], truths: dict[str, int],
                         sigma: float = 0.5) -> MetricsReport:
    rows, pairs = [], []
    for pid, preds in per_patient_predictions.items():
        pp = classify_patient(pid, preds, sigma)
        rows.append(pp.to_dict(truths[pid]))
        pairs.append((truths[pid], pp.y))
    return compute_metrics(pairs, sigma, rows)


def load_test_bank(test_manifest: DatasetManifest, spec: TilingSpec) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    """Every grid patch of every test image, keyed by patient, plus ground-truth labels."""
    patches, truths = {}, {}
    for p in test_manifest.patients:
        image = load_gray_image(test_manifest.resolve(p.image))
        records = extract_test_patches(image, spec, p.patient_id, p.patient_label)
        patches[p.patient_id] = np.stack([r.pixels for r in records])
        truths[p.patient_id] = int(p.patient_label)
    return patches, truths


def evaluate_bank(model: PatchClassifier, augment_cfg: AugmentConfig, patches: dict[str, np.ndarray],
                  truths: dict[str, int], sigma: float = 0.5) -> MetricsReport:
    preds = {pid: predict_patches(model, x, augment_cfg) for pid, x in patches.items()}
    return evaluate_predictions(preds, truths, sigma)


def evaluate_cohort(model: PatchClassifier | str | os.PathLike, test_manifest: DatasetManifest,
                    spec: TilingSpec, sigma: float = 0.5, augment_cfg: AugmentConfig | None = None,
                    report_path: str | os.PathLike | None = None) -> MetricsReport:
    """Tile every test image, predict every patch, decide per patient, score the cohort."""
    if not isinstance(model, PatchClassifier):
        model, augment_cfg, _ = load_classifier(model)
    if augment_cfg is None:
        raise ValidationError("augment_cfg required when passing a model object")
    patches, truths = load_test_bank(test_manifest, spec)
    report = evaluate_bank(model, augment_cfg, patches, truths, sigma)
    if report_path is not None:
        report.save(report_path)
    return report
