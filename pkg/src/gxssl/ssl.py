"""Teacher-student self-supervised trainer.

The student is encoder f -> projector g -> predictor p; the teacher is
encoder f -> projector g with weights that follow the student by an
exponential moving average and never receive gradients. The objective is

    L = ||q1^ - q2^||^2 + ||q2^ - z2'^||^2

with q = student(v), z' = teacher(v) and ^ denoting L2 normalisation.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, make_views
from .core import NumericError, ValidationError, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
FEATURE_DIMS = {"small_conv": 256, "resnet50": 2048}


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "resnet50"
    feature_dim: int | None = None
    channels: tuple[int, ...] = (32, 64, 128, 256)

    def __post_init__(self):
        if self.kind not in FEATURE_DIMS:
            raise ValidationError(f"encoder kind must be one of {sorted(FEATURE_DIMS)}, got {self.kind!r}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind == "small_conv" and not self.channels:
            raise ValidationError("small_conv needs at least one block")
        natural = self.channels[-1] if self.kind == "small_conv" else FEATURE_DIMS["resnet50"]
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", natural)
        elif self.feature_dim != natural:
            raise ValidationError(f"feature_dim {self.feature_dim} does not match {self.kind} ({natural})")


@dataclass(frozen=True)
class MlpConfig:
    hidden_size: int = 4096
    output_size: int = 256

    def __post_init__(self):
        if self.hidden_size < 1 or self.output_size < 1:
            raise ValidationError("hidden_size and output_size must be >= 1")


@dataclass(frozen=True)
class SslHyperparams:
    epochs: int = 80
    batch_size: int = 256
    learning_rate: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0004
    tau: float = 0.996
    symmetrize: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError(f"tau must lie in [0, 1], got {self.tau}")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.momentum < 1.0 or self.weight_decay < 0:
            raise ValidationError("momentum must lie in [0, 1) and weight_decay >= 0")


@dataclass
class SslStepReport:
    step: int
    loss_cross_view: float
    loss_cross_model: float
    loss_total: float
    embedding_std: float


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

def _fan_in_uniform_(module: nn.Module) -> None:
    """Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)), biases 0, BN scale 1 / shift 0."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = math.sqrt(3.0 / fan_in)
            nn.init.uniform_(m.weight, -bound, bound)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class SmallConvEncoder(nn.Module):
    def __init__(self, channels: Sequence[int] = (32, 64, 128, 256), in_channels: int = 1):
        super().__init__()
        layers = []
        prev = in_channels
        for c in channels:
            layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(c), nn.ReLU(inplace=True)]
            prev = c
        self.features = nn.Sequential(*layers)
        self.out_dim = prev

    def forward(self, x):
        return self.features(x).mean(dim=(2, 3))


class ResNet50Encoder(nn.Module):
    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        self.net = resnet50(weights=None)
        self.net.fc = nn.Identity()
        self.out_dim = 2048

    def forward(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return self.net(x)


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.kind == "small_conv":
        return SmallConvEncoder(cfg.channels)
    return ResNet50Encoder()


def build_mlp(in_dim: int, cfg: MlpConfig) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, cfg.hidden_size),
        nn.BatchNorm1d(cfg.hidden_size),
        nn.ReLU(inplace=True),
        nn.Linear(cfg.hidden_size, cfg.output_size),
    )


def _check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activation in {where}")
    return x


class TeacherStudent(nn.Module):
    """Holds student (f_theta, g_theta, p_theta) and teacher (f_psi, g_psi)."""

    def __init__(self, encoder_cfg: EncoderConfig, mlp_cfg: MlpConfig):
        super().__init__()
        self.encoder_cfg = encoder_cfg
        self.mlp_cfg = mlp_cfg
        self.f_theta = build_encoder(encoder_cfg)
        self.g_theta = build_mlp(encoder_cfg.feature_dim, mlp_cfg)
        # Predictor maps projection -> projection so both losses compare like-sized vectors.
        self.p_theta = build_mlp(mlp_cfg.output_size, MlpConfig(mlp_cfg.hidden_size, mlp_cfg.output_size))
        for m in (self.f_theta, self.g_theta, self.p_theta):
            _fan_in_uniform_(m)
        self.f_psi = copy.deepcopy(self.f_theta)
        self.g_psi = copy.deepcopy(self.g_theta)
        for p in self.teacher_parameters():
            p.requires_grad_(False)

    def student_parameters(self):
        for m in (self.f_theta, self.g_theta, self.p_theta):
            yield from m.parameters()

    def teacher_parameters(self):
        for m in (self.f_psi, self.g_psi):
            yield from m.parameters()

    def ema_pairs(self):
        """(teacher, student) parameter pairs over encoder and projector."""
        return list(zip(self.teacher_parameters(), list(self.f_theta.parameters()) + list(self.g_theta.parameters())))

    def forward_student(self, views: torch.Tensor) -> torch.Tensor:
        h = _check_finite(self.f_theta(views), "f_theta")
        z = _check_finite(self.g_theta(h), "g_theta")
        return _check_finite(self.p_theta(z), "p_theta")

    def student_projection(self, views: torch.Tensor) -> torch.Tensor:
        return self.g_theta(self.f_theta(views))

    def forward_teacher(self, views: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            h = _check_finite(self.f_psi(views), "f_psi")
            return _check_finite(self.g_psi(h), "g_psi")

    def named_checkpoint_tensors(self):
        """Ordered (name, tensor) pairs: parameters and BN buffers, student first."""
        out = []
        for prefix in ("f_theta", "g_theta", "p_theta", "f_psi", "g_psi"):
            for name, t in getattr(self, prefix).state_dict().items():
                out.append((f"{prefix}.{name}", t))
        return out

    def load_checkpoint_tensors(self, params: dict[str, np.ndarray]) -> None:
        for prefix in ("f_theta", "g_theta", "p_theta", "f_psi", "g_psi"):
            load_module_params(getattr(self, prefix), params, prefix)


def load_module_params(module: nn.Module, params: dict[str, np.ndarray], prefix: str) -> None:
    state = module.state_dict()
    new = {}
    for name, t in state.items():
        key = f"{prefix}.{name}"
        if key not in params:
            raise ValidationError(f"checkpoint lacks {key}")
        arr = params[key]
        if tuple(arr.shape) != tuple(t.shape):
            raise ValidationError(f"{key}: checkpoint shape {arr.shape} != model shape {tuple(t.shape)}")
        new[name] = torch.from_numpy(np.asarray(arr)).to(t.dtype)
    module.load_state_dict(new)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def normalized_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-row ||a/|a| - b/|b|||^2 = 2 - 2 cos(a, b), with eps added to each norm."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    if (na < NORM_EPS).any() or (nb < NORM_EPS).any():
        logger.warning("feature norm below %g: representation may have collapsed", NORM_EPS)
    cos = (a * b).sum(dim=-1) / ((na + NORM_EPS) * (nb + NORM_EPS))
    return 2.0 - 2.0 * cos


def cross_view_loss(q1: torch.Tensor, q2: torch.Tensor) -> torch.Tensor:
    """Distance between the student's features of two views; gradient reaches both."""
    return normalized_distance(q1, q2)


def cross_model_loss(q2: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """Distance between student and teacher features of the same view; teacher side is constant."""
    return normalized_distance(q2, z2.detach())


def embedding_std(q: torch.Tensor) -> float:
    if q.shape[0] < 2:
        return 0.0
    qn = F.normalize(q.detach(), dim=-1)
    return float(qn.std(dim=0).mean())


def total_loss(model: TeacherStudent, v1: torch.Tensor, v2: torch.Tensor, step: int = 0,
               symmetrize: bool = False) -> tuple[torch.Tensor, SslStepReport]:
    if v1.shape[0] == 0:
        raise ValidationError("empty batch")
    q1 = model.forward_student(v1)
    q2 = model.forward_student(v2)
    z2 = model.forward_teacher(v2)
    cv = cross_view_loss(q1, q2).mean()
    cm = cross_model_loss(q2, z2).mean()
    if symmetrize:
        z1 = model.forward_teacher(v1)
        cm = 0.5 * (cm + cross_model_loss(q1, z1).mean())
    loss = cv + cm
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at step {step}: cross_view={float(cv)}, cross_model={float(cm)}")
    report = SslStepReport(step, cv.item(), cm.item(), loss.item(), embedding_std(q1))
    return loss, report


# --------------------------------------------------------------------------
# Optimisation
# --------------------------------------------------------------------------

def decays(name: str, param: torch.Tensor) -> bool:
    """Weight decay applies to conv/linear weights only (not biases or BN affine)."""
    return param.ndim > 1


@torch.no_grad()
def student_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None],
                 buffers: list[torch.Tensor | None], lr: float, momentum: float,
                 weight_decay: float, decay_flags: Sequence[bool]) -> None:
    """In-place SGD with momentum:  buf <- m*buf + (g + wd*theta);  theta <- theta - lr*buf.

    All gradients are checked before any parameter is touched, so a
    non-finite gradient leaves the state unchanged.
    """
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise NumericError("non-finite gradient; step aborted with parameters unchanged")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if p.shape != g.shape:
            raise ValidationError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        d = g + weight_decay * p if decay_flags[i] and weight_decay else g.clone()
        if buffers[i] is None:
            buffers[i] = d
        else:
            buffers[i].mul_(momentum).add_(d)
        p.sub_(lr * buffers[i])


class MomentumSGD:
    """Bookkeeping around :func:`student_step` for a fixed parameter list."""

    def __init__(self, named_params: Iterable[tuple[str, torch.Tensor]], lr: float, momentum: float, weight_decay: float):
        named = list(named_params)
        self.params = [p for _, p in named]
        self.decay_flags = [decays(n, p) for n, p in named]
        self.buffers: list[torch.Tensor | None] = [None] * len(self.params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        student_step(self.params, [p.grad for p in self.params], self.buffers, self.lr,
                     self.momentum, self.weight_decay, self.decay_flags)


@torch.no_grad()
def ema_update(teacher: Sequence[torch.Tensor], student: Sequence[torch.Tensor], tau: float) -> None:
    """psi <- tau*psi + (1 - tau)*theta, elementwise and in place."""
    teacher, student = list(teacher), list(student)
    if len(teacher) != len(student):
        raise ValidationError(f"teacher has {len(teacher)} tensors, student subset has {len(student)}")
    for t, s in zip(teacher, student):
        if t.shape != s.shape:
            raise ValidationError(f"teacher shape {tuple(t.shape)} != student shape {tuple(s.shape)}")
    for t, s in zip(teacher, student):
        # float64 accumulation, one rounding back to the teacher dtype
        t.copy_(t.double().mul_(tau).add_(s.double(), alpha=1.0 - tau))


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------

def set_deterministic(enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    torch.set_num_threads(1)


def make_batch_views(patches: np.ndarray, idx: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig):
    v1 = np.empty((len(idx), 1, cfg.view_size, cfg.view_size), dtype=np.float32)
    v2 = np.empty_like(v1)
    for j, i in enumerate(idx):
        pair = make_views(patches[i], rng, cfg)
        v1[j, 0], v2[j, 0] = pair.v1, pair.v2
    return torch.from_numpy(v1), torch.from_numpy(v2)


def steps_per_epoch(n: int, batch_size: int) -> int:
    # Trailing partial batch dropped; a dataset smaller than one batch is a single batch.
    return max(1, n // batch_size)


LOSS_COLUMNS = ("step", "loss_cross_view", "loss_cross_model", "loss_total", "embedding_std")


def pretrain(
    patches: np.ndarray,
    encoder_cfg: EncoderConfig,
    mlp_cfg: MlpConfig,
    augment_cfg: AugmentConfig,
    hyper: SslHyperparams,
    seed: int,
    out_dir: str | os.PathLike | None = None,
    deterministic: bool = False,
    on_step: Callable[[SslStepReport], None] | None = None,
    extra_meta: dict | None = None,
) -> tuple[TeacherStudent, list[SslStepReport]]:
    """Self-supervised pretraining over an (N, S, S) patch stack.

    Only pixels are consumed; patch labels never reach this function.
    Per step: views -> loss -> backward -> student SGD step -> teacher EMA.
    """
    if deterministic:
        set_deterministic(True)
    patches = np.asarray(patches, dtype=np.float32)
    if patches.ndim != 3 or len(patches) == 0:
        raise ValidationError(f"expected a non-empty (N, S, S) patch stack, got shape {patches.shape}")

    torch.manual_seed(seed)
    model = TeacherStudent(encoder_cfg, mlp_cfg)
    model.train()
    named = [(n, p) for n, p in model.named_parameters() if n.split(".")[0] in ("f_theta", "g_theta", "p_theta")]
    opt = MomentumSGD(named, hyper.learning_rate, hyper.momentum, hyper.weight_decay)
    ema_pairs = model.ema_pairs()
    teacher_params = [t for t, _ in ema_pairs]
    student_subset = [s for _, s in ema_pairs]

    n = len(patches)
    n_steps = steps_per_epoch(n, hyper.batch_size)
    history: list[SslStepReport] = []
    epoch_means = []
    step = 0
    for epoch in range(hyper.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        epoch_loss = 0.0
        for b in range(n_steps):
            idx = order[b * hyper.batch_size:(b + 1) * hyper.batch_size]
            v1, v2 = make_batch_views(patches, idx, np.random.default_rng([seed, epoch, b]), augment_cfg)
            loss, report = total_loss(model, v1, v2, step, hyper.symmetrize)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update(teacher_params, student_subset, hyper.tau)
            history.append(report)
            epoch_loss += report.loss_total
            if on_step is not None:
                on_step(report)
            step += 1
        epoch_means.append(epoch_loss / n_steps)
        logger.info("epoch %d/%d mean loss %.4f emb_std %.4f", epoch + 1, hyper.epochs, epoch_means[-1],
                    history[-1].embedding_std)

    if out_dir is not None:
        meta = {
            "kind": "ssl",
            "config": {
                "encoder": asdict(encoder_cfg),
                "mlp": asdict(mlp_cfg),
                "augment": asdict(augment_cfg),
                "hyper": asdict(hyper),
                "seed": seed,
            },
            "epoch": hyper.epochs,
            "steps": step,
            "loss_history": epoch_means,
            "val_accuracy_history": [],
            "rng": {"torch_seed": seed, "numpy_seed_scheme": "[seed, epoch] order, [seed, epoch, batch] views"},
            "n_patches": n,
        }
        if extra_meta:
            meta.update(extra_meta)
        save_ssl_checkpoint(model, meta, out_dir, history)
    return model, history


def save_ssl_checkpoint(model: TeacherStudent, meta: dict, out_dir, history: Sequence[SslStepReport] = ()) -> Path:
    out_dir = save_checkpoint(model.named_checkpoint_tensors(), meta, out_dir)
    write_losses_csv(history, out_dir / "losses.csv")
    return out_dir


def write_losses_csv(history: Sequence[SslStepReport], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in history:
            w.writerow([r.step, repr(r.loss_cross_view), repr(r.loss_cross_model), repr(r.loss_total), repr(r.embedding_std)])


def load_ssl_checkpoint(directory) -> tuple[TeacherStudent, dict]:
    params, meta = load_checkpoint(directory)
    cfg = meta["config"]
    model = TeacherStudent(EncoderConfig(**cfg["encoder"]), MlpConfig(**cfg["mlp"]))
    model.load_checkpoint_tensors(params)
    return model, meta


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    passed: bool
    tolerance: float
    h: float
    n_checked: int
    max_rel_error: float
    worst: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)
    teacher_max_abs_grad: float = 0.0
    convergence_ratio: float | None = None

    def summary(self) -> str:
        lines = [
            f"gradient check {'PASSED' if self.passed else 'FAILED'}: {self.n_checked} coordinates, "
            f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g}, h={self.h:g})",
            f"teacher max |grad| = {self.teacher_max_abs_grad:g}",
        ]
        if self.convergence_ratio is not None:
            lines.append(f"error ratio at 2h vs h: {self.convergence_ratio:.2f}")
        for name, coord, a, nmr, err in self.worst[:5]:
            lines.append(f"  {name}{list(coord)}: analytic {a:.6e} numeric {nmr:.6e} rel {err:.2e}")
        return "\n".join(lines)


def tiny_model(seed: int = 0) -> TeacherStudent:
    """Two-block small_conv, projection 8, float64; teacher perturbed away from the student."""
    torch.manual_seed(seed)
    model = TeacherStudent(EncoderConfig("small_conv", channels=(4, 8)), MlpConfig(hidden_size=16, output_size=8)).double()
    with torch.no_grad():
        for t in model.teacher_parameters():
            t.add_(0.05 * torch.randn_like(t))
    return model


# Gradients that are exactly zero analytically (e.g. biases feeding batch norm)
# come back from a central difference as pure roundoff, ~eps*|L|/h ~ 1e-11.
REL_ERROR_FLOOR = 1e-6


def _rel_error(a: float, n: float, floor: float = REL_ERROR_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_check(
    tolerance: float = 1e-4,
    n_coords: int = 200,
    h: float = 1e-5,
    batch_size: int = 4,
    seed: int = 0,
    model: TeacherStudent | None = None,
    views: tuple[torch.Tensor, torch.Tensor] | None = None,
    convergence_h: float | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of the total loss with central differences.

    Teacher parameters are made differentiable for the duration of the
    check so that any gradient leaking through the stop-gradient would be
    recorded; they must come back exactly zero (or None).
    """
    model = model if model is not None else tiny_model(seed)
    model.train()
    gen = torch.Generator().manual_seed(seed + 1)
    if views is None:
        shape = (batch_size, 1, 16, 16)
        views = (torch.randn(shape, generator=gen, dtype=torch.float64),
                 torch.randn(shape, generator=gen, dtype=torch.float64))
    v1, v2 = views

    teacher = list(model.teacher_parameters())
    for t in teacher:
        t.requires_grad_(True)
        t.grad = None
    student = [(n, p) for n, p in model.named_parameters() if n.split(".")[0] in ("f_theta", "g_theta", "p_theta")]
    for _, p in student:
        p.grad = None
    try:
        loss, _ = total_loss(model, v1, v2)
        loss.backward()
        teacher_max = max((float(t.grad.abs().max()) if t.grad is not None else 0.0) for t in teacher)
    finally:
        for t in teacher:
            t.requires_grad_(False)
            t.grad = None

    def loss_value() -> float:
        with torch.no_grad():
            return float(total_loss(model, v1, v2)[0])

    # Uniform over all student scalars.
    sizes = np.array([p.numel() for _, p in student])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)

    def central(p: torch.Tensor, idx, step: float) -> float:
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + step
            up = loss_value()
            p[idx] = orig - step
            down = loss_value()
            p[idx] = orig
        return (up - down) / (2 * step)

    results = []
    conv_ratios = []
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right"))
        local = int(f - (bounds[k - 1] if k else 0))
        name, p = student[k]
        idx = np.unravel_index(local, tuple(p.shape))
        analytic = float(p.grad[idx])
        numeric = central(p, idx, h)
        results.append((name, tuple(int(i) for i in idx), analytic, numeric, _rel_error(analytic, numeric)))
        if convergence_h is not None:
            e1 = abs(central(p, idx, convergence_h) - analytic)
            e2 = abs(central(p, idx, 2 * convergence_h) - analytic)
            if e1 > 1e-10 * max(abs(analytic), 1e-8) and e1 > 0:
                conv_ratios.append(e2 / e1)
    for _, p in student:
        p.grad = None

    results.sort(key=lambda r: -r[4])
    max_err = results[0][4] if results else 0.0
    return GradCheckReport(
        passed=max_err < tolerance and teacher_max == 0.0,
        tolerance=tolerance,
        h=h,
        n_checked=len(results),
        max_rel_error=max_err,
        worst=[r for r in results if r[4] >= tolerance] or results[:5],
        teacher_max_abs_grad=teacher_max,
        convergence_ratio=float(np.median(conv_ratios)) if conv_ratios else None,
    )
