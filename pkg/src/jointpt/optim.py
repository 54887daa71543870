"""AdamW, weight EMA, the warmup/cosine/LLRD/plateau schedule, early stopping, PCGrad."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, OptError

# LLRD initial factors by depth: embedding first, then blocks in order
LLRD_SMALL = (0.30, (0.35, 0.40, 0.55, 0.625))
LLRD_LARGE = (0.30, (0.55, 0.40, 0.30, 0.40, 0.55, 0.625))


def remap_llrd(num_blocks: int, source=LLRD_SMALL, heads: float = 1.0) -> Dict[str, float]:
    """Layer-group factors for ``num_blocks`` blocks, interpolated on relative depth."""
    emb, blocks = source
    k_src = len(blocks)
    xp = np.arange(0, k_src + 1) / k_src
    fp = np.array((emb,) + tuple(blocks))
    out = {"embedding": float(emb), "heads": float(heads)}
    for k in range(1, num_blocks + 1):
        if num_blocks == k_src:
            out[f"block_{k}"] = float(blocks[k - 1])
        else:
            out[f"block_{k}"] = float(np.interp(k / num_blocks, xp, fp))
    return out


@dataclass(frozen=True)
class SchedulerConfig:
    """Phase lengths are in ``*_unit`` (epochs or steps); epochs need steps_per_epoch."""

    base_lr: float = 8e-5
    warmup: float = 5.0
    warmup_unit: str = "epochs"
    warmup_factor: float = 0.1
    cos_duration: float = 32.0
    cos_unit: str = "epochs"
    cos_final_factor: float = 0.1
    rlp_enabled: bool = True
    rlp_patience: int = 5
    rlp_factor: float = 0.1
    llrd: Mapping[str, float] = field(default_factory=dict)
    steps_per_epoch: int = 1

    def __post_init__(self):
        for name in ("warmup_factor", "cos_final_factor", "rlp_factor"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"scheduler.{name} must lie in (0, 1]")
        for g, d in dict(self.llrd).items():
            if not 0.0 < d <= 1.0:
                raise ConfigError(f"LLRD factor for {g!r} must lie in (0, 1]")
        for name in ("warmup_unit", "cos_unit"):
            if getattr(self, name) not in ("epochs", "steps"):
                raise ConfigError(f"scheduler.{name} must be 'epochs' or 'steps'")
        if self.steps_per_epoch < 1:
            raise ConfigError("scheduler.steps_per_epoch must be >= 1")
        if self.warmup < 0 or self.cos_duration < 0:
            raise ConfigError("phase durations must be >= 0")
        object.__setattr__(self, "llrd", dict(self.llrd))

    def _steps(self, value, unit) -> float:
        return float(value) * (self.steps_per_epoch if unit == "epochs" else 1)

    @property
    def warmup_steps(self) -> float:
        return self._steps(self.warmup, self.warmup_unit)

    @property
    def cos_steps(self) -> float:
        return self._steps(self.cos_duration, self.cos_unit)

    @property
    def rlp_start_step(self) -> float:
        return self.warmup_steps + self.cos_steps

    def factor(self, group: str) -> float:
        return float(self.llrd.get(group, 1.0))

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PlateauState:
    best: float = math.inf
    bad_epochs: int = 0
    factor: float = 1.0
    num_cuts: int = 0


def lr_at(step: int, layer_group: str, config: SchedulerConfig, rlp: Optional[PlateauState] = None) -> float:
    """Learning rate for ``layer_group`` at optimizer step ``step`` (0-based).

    Warmup rises linearly from f_w*a*D to a*D, cosine falls from a*D to f_c*a
    (the same endpoint for every group), and the plateau phase holds f_c*a
    times the accumulated plateau cuts.
    """
    a = config.base_lr
    d = config.factor(layer_group)
    w = config.warmup_steps
    c = config.cos_steps
    if step < w:
        frac = step / w
        return a * d * (config.warmup_factor + (1.0 - config.warmup_factor) * frac)
    if step < w + c:
        t = (step - w) / c
        final = config.cos_final_factor * a
        return final + (a * d - final) * 0.5 * (1.0 + math.cos(math.pi * t))
    factor = rlp.factor if (rlp is not None and config.rlp_enabled) else 1.0
    return config.cos_final_factor * a * factor


def rlp_observe(val_metric: float, state: PlateauState, config: SchedulerConfig) -> PlateauState:
    """Strict-improvement plateau tracking; cut by f_p after N_p bad epochs in a row."""
    if val_metric < state.best:
        return replace(state, best=float(val_metric), bad_epochs=0)
    bad = state.bad_epochs + 1
    if bad >= config.rlp_patience:
        return replace(state, bad_epochs=0, factor=state.factor * config.rlp_factor, num_cuts=state.num_cuts + 1)
    return replace(state, bad_epochs=bad)


@dataclass(frozen=True)
class EarlyStopConfig:
    patience: int = 50
    max_epochs: int = 500
    min_lr: float = 1e-8
    max_wallclock_s: Optional[float] = None


@dataclass(frozen=True)
class EarlyStopState:
    best: float = math.inf
    best_epoch: int = 0
    bad_epochs: int = 0


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str = ""


def early_stop_observe(state: EarlyStopState, epoch: int, val_metric: float) -> EarlyStopState:
    if val_metric < state.best:
        return EarlyStopState(float(val_metric), epoch, 0)
    return replace(state, bad_epochs=state.bad_epochs + 1)


def early_stop(state: EarlyStopState, epoch: int, lr: float, config: EarlyStopConfig, elapsed_s: float = 0.0) -> StopDecision:
    """``epoch`` counts completed epochs (1-based); call after :func:`early_stop_observe`."""
    if state.bad_epochs >= config.patience:
        return StopDecision(True, f"no improvement for {state.bad_epochs} epochs")
    if epoch >= config.max_epochs:
        return StopDecision(True, f"reached max epochs {config.max_epochs}")
    if lr < config.min_lr:
        return StopDecision(True, f"learning rate {lr:.3g} below {config.min_lr:.3g}")
    if config.max_wallclock_s is not None and elapsed_s >= config.max_wallclock_s:
        return StopDecision(True, "wall-clock limit")
    return StopDecision(False)


class AdamW:
    """Decoupled-weight-decay Adam with bias correction and per-group learning rates."""

    def __init__(self, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.1, clip_grad_norm: Optional[float] = None):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_grad_norm = clip_grad_norm
        self.step_count = 0
        self.exp_avg: Dict[str, torch.Tensor] = {}
        self.exp_avg_sq: Dict[str, torch.Tensor] = {}

    def step(self, params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], lr: Mapping[str, float], groups: Mapping[str, str]):
        for name, g in grads.items():
            if not bool(torch.isfinite(g).all()):
                raise OptError(f"non-finite gradient in parameter group {groups[name]!r} ({name})")
        scale = 1.0
        if self.clip_grad_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > self.clip_grad_norm:
                scale = self.clip_grad_norm / total
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        with torch.no_grad():
            for name, p in params.items():
                g = grads.get(name)
                if g is None:
                    g = torch.zeros_like(p)
                if scale != 1.0:
                    g = g * scale
                m = self.exp_avg.get(name)
                if m is None:
                    m = self.exp_avg[name] = torch.zeros_like(p)
                    self.exp_avg_sq[name] = torch.zeros_like(p)
                v = self.exp_avg_sq[name]
                m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                step_lr = lr[groups[name]]
                p.mul_(1.0 - step_lr * self.weight_decay)
                denom = (v / bc2).sqrt_().add_(self.eps)
                p.addcdiv_(m, denom, value=-step_lr / bc1)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "exp_avg": dict(self.exp_avg),
            "exp_avg_sq": dict(self.exp_avg_sq),
            "hyper": {"betas": [self.beta1, self.beta2], "eps": self.eps, "weight_decay": self.weight_decay, "clip_grad_norm": self.clip_grad_norm},
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        self.exp_avg = {k: v.clone() for k, v in state["exp_avg"].items()}
        self.exp_avg_sq = {k: v.clone() for k, v in state["exp_avg_sq"].items()}


def adamw_step(params, grads, state: AdamW, lr_per_group, groups):
    state.step(params, grads, lr_per_group, groups)
    return params, state


class EMA:
    """Shadow copy updated as shadow <- d*shadow + (1-d)*params."""

    def __init__(self, params: Mapping[str, torch.Tensor], decay: float = 0.99):
        if not 0.0 <= decay < 1.0:
            raise ConfigError("EMA decay must lie in [0, 1)")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in params.items()}

    def update(self, params: Mapping[str, torch.Tensor]):
        d = self.decay
        with torch.no_grad():
            for k, v in params.items():
                s = self.shadow.get(k)
                if s is None:
                    self.shadow[k] = v.detach().clone()
                else:
                    s.mul_(d).add_(v.detach(), alpha=1.0 - d)


def ema_update(state: EMA, params) -> EMA:
    state.update(params)
    return state


def pcgrad(task_grads: Sequence, rng: np.random.Generator, reduce: bool = True):
    """Project away conflicting components pairwise and sum the results.

    Each task's gradient is projected against the original gradients of the
    other tasks, visited in a random order drawn from ``rng``. With
    ``reduce=False`` the projected per-task gradients are returned instead.
    """
    grads = [torch.as_tensor(g, dtype=torch.float64).reshape(-1) for g in task_grads]
    if len(grads) < 2:
        raise ConfigError("pcgrad needs at least two task gradients")
    sq = [float(g @ g) for g in grads]
    parts = []
    for i, g in enumerate(grads):
        gi = g.clone()
        others = [j for j in range(len(grads)) if j != i]
        for j in (others[k] for k in rng.permutation(len(others))):
            if sq[j] == 0.0:
                continue
            dot = float(gi @ grads[j])
            if dot < 0.0:
                gi = gi - (dot / sq[j]) * grads[j]
        parts.append(gi)
    if not reduce:
        return parts
    return torch.stack(parts).sum(0)


# Named schedules; durations in the units given, LLRD table named by ``llrd``.
SCHEDULER_PRESETS = {
    "pretrain-default": dict(
        base_lr=2e-4, warmup=2000, warmup_unit="steps", warmup_factor=0.2,
        cos_duration=2, cos_unit="epochs", cos_final_factor=0.1, rlp_enabled=False, llrd="none",
    ),
    "finetune-default": dict(
        base_lr=8e-5, warmup=5, warmup_unit="epochs", warmup_factor=0.1,
        cos_duration=32, cos_unit="epochs", cos_final_factor=0.1,
        rlp_enabled=True, rlp_patience=5, rlp_factor=0.1, llrd="large",
    ),
    "finetune-rmd17": dict(
        base_lr=8e-5, warmup=5, warmup_unit="epochs", warmup_factor=0.1,
        cos_duration=128, cos_unit="epochs", cos_final_factor=0.01,
        rlp_enabled=True, rlp_patience=5, rlp_factor=0.1, llrd="large",
    ),
    "scratch-baseline": dict(
        base_lr=1e-4, warmup=0, warmup_unit="epochs", warmup_factor=1.0,
        cos_duration=0, cos_unit="epochs", cos_final_factor=1.0,
        rlp_enabled=True, rlp_patience=3, rlp_factor=0.8, llrd="none",
    ),
}

OPTIMIZER_PRESETS = {
    "pretrain-default": dict(betas=(0.9, 0.95), weight_decay=0.1, ema_decay=0.99),
    "finetune-default": dict(betas=(0.9, 0.95), weight_decay=0.1, ema_decay=0.99),
    "finetune-rmd17": dict(betas=(0.9, 0.95), weight_decay=0.1, ema_decay=0.99),
    "scratch-baseline": dict(betas=(0.9, 0.95), weight_decay=0.01, ema_decay=0.99),
}

LLRD_TABLES = {"small": LLRD_SMALL, "large": LLRD_LARGE}


def make_scheduler(settings: Mapping, steps_per_epoch: int, num_blocks: int) -> SchedulerConfig:
    """SchedulerConfig from a flat settings mapping (preset dicts or run configs)."""
    s = dict(settings)
    table = s.pop("llrd", "none")
    if table == "none":
        llrd = {}
    elif table in LLRD_TABLES:
        llrd = remap_llrd(num_blocks, LLRD_TABLES[table])
    else:
        raise ConfigError(f"unknown LLRD table {table!r}")
    return SchedulerConfig(llrd=llrd, steps_per_epoch=steps_per_epoch, **s)


def scheduler_preset(name: str, steps_per_epoch: int, num_blocks: int = 6) -> SchedulerConfig:
    if name not in SCHEDULER_PRESETS:
        raise ConfigError(f"unknown scheduler preset {name!r}")
    return make_scheduler(SCHEDULER_PRESETS[name], steps_per_epoch, num_blocks)
