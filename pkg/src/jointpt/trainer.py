"""Pretraining over mixed datasets and fine-tuning with fresh heads.

Everything the loop needs to continue bit-identically (weights, optimizer
moments, EMA shadow, sampler cursor, RNG states, plateau and early-stop
counters) round-trips through :mod:`jointpt.checkpoint`.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, load_params, param_arrays, save_checkpoint
from .config import DataSource, RunConfig
from .core import collate
from .errors import ConfigError, NonFiniteError
from .graphbuild import build_radius_graph
from .ingest import Dataset, SplitSpec, filter_min_atoms, generate_synthetic, load_dataset, split, synthetic_domain
from .loss import THRESHOLD_PRESETS, LossWeights, ThresholdSpec, naive_loss, scalar_mae, swl_loss, threshold_wrap
from .model import HeadSpec, Model, ModelInput, swap_heads
from .optim import (
    EMA,
    AdamW,
    EarlyStopConfig,
    EarlyStopState,
    PlateauState,
    early_stop,
    early_stop_observe,
    lr_at,
    make_scheduler,
    pcgrad,
    rlp_observe,
)
from .reference import (
    NormStats,
    ReferenceModel,
    fit_linear_reference,
    fit_norm_stats,
    fit_scalar_target_reference,
    normalize_labels,
    normalize_scalar,
)
from .sampler import MixedSampler, MixSpec

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "epoch", "dataset_id", "split", "metric", "value")


# -- data preparation --------------------------------------------------------


@dataclass
class Example:
    system: object
    graph: object
    energy: Optional[float]
    forces: Optional[np.ndarray]
    scalars: Dict[str, float]


@dataclass
class PreparedDataset:
    source: DataSource
    train: Dataset
    val: Dataset
    test: Dataset
    reference: Optional[ReferenceModel]
    stats: NormStats
    scalar_refs: Dict[str, tuple]
    lambda_E: float
    lambda_F: float
    energy_margin: Optional[float] = None
    force_margin: Optional[float] = None
    _examples: Dict[str, list] = field(default_factory=dict, repr=False)

    @property
    def id(self) -> str:
        return self.source.id

    @property
    def has_energy(self) -> bool:
        return "energy" in self.source.targets

    @property
    def has_forces(self) -> bool:
        return "forces" in self.source.targets

    @property
    def scalar_targets(self):
        return self.source.scalar_targets

    def split_data(self, name: str) -> Dataset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    def examples(self, name: str, cutoff: float, max_neighbors: int) -> list:
        """Graphs and normalized labels per system, built once per split."""
        key = f"{name}:{cutoff}:{max_neighbors}"
        if key not in self._examples:
            self._examples[key] = [self.example(s, cutoff, max_neighbors) for s in self.split_data(name)]
        return self._examples[key]

    def example(self, system, cutoff, max_neighbors) -> Example:
        graph = build_radius_graph(system, cutoff=cutoff, max_neighbors=max_neighbors)
        e = f = None
        if self.has_energy:
            e, f = normalize_labels(system, self.reference, self.stats)
            if not self.has_forces:
                f = None
        scalars = {}
        for name in self.scalar_targets:
            model, stats = self.scalar_refs[name]
            scalars[name] = normalize_scalar(system, name, model, stats)
        return Example(system, graph, e, f, scalars)

    def state_json(self) -> dict:
        return {
            "id": self.id,
            "reference": self.reference.to_json() if self.reference else None,
            "stats": self.stats.to_json(),
            "scalar_refs": {
                k: {"model": m.to_json() if m else None, "stats": s.to_json()} for k, (m, s) in self.scalar_refs.items()
            },
            "lambda_E": self.lambda_E,
            "lambda_F": self.lambda_F,
        }


def load_source(src: DataSource) -> Dataset:
    if src.path:
        ds = load_dataset(src.path)
    else:
        ds = generate_synthetic(synthetic_domain(src.synthetic, src.count), src.gen_seed)
    ds = ds.subset(range(len(ds)), dataset_id=src.id)
    if src.min_atoms:
        ds = filter_min_atoms(ds, src.min_atoms)
    return ds


def prepare_dataset(src: DataSource, dataset: Optional[Dataset] = None) -> PreparedDataset:
    """Split, then fit referencing and normalization on the train split only."""
    ds = load_source(src) if dataset is None else dataset
    train, val, test = split(ds, SplitSpec(src.split, src.split_seed, src.split_mode))
    if src.max_train and len(train) > src.max_train:
        train = train.subset(range(src.max_train))
    reference, stats = None, NormStats()
    if "energy" in src.targets:
        reference = fit_linear_reference(train)
        stats = fit_norm_stats(train, reference)
    scalar_refs = {
        name: fit_scalar_target_reference(train, name, src.atomwise_scalars) for name in src.scalar_targets
    }
    em, fm = src.energy_margin, src.force_margin
    if src.threshold:
        if src.threshold not in THRESHOLD_PRESETS:
            raise ConfigError(f"dataset {src.id!r}: unknown threshold preset {src.threshold!r}")
        pe, pf = THRESHOLD_PRESETS[src.threshold]
        em = pe if em is None else em
        fm = pf if fm is None else fm
    return PreparedDataset(
        source=src,
        train=train,
        val=val,
        test=test,
        reference=reference,
        stats=stats,
        scalar_refs=scalar_refs,
        lambda_E=1.0 if src.lambda_E is None else src.lambda_E,
        lambda_F=train.meta.mean_atoms if src.lambda_F is None else src.lambda_F,
        energy_margin=em,
        force_margin=fm,
    )


def heads_for(prepared: Sequence[PreparedDataset], force_mode: str) -> List[HeadSpec]:
    heads = []
    for p in prepared:
        if p.has_energy:
            heads.append(HeadSpec(p.id, "energy"))
        if p.has_forces and force_mode == "direct":
            heads.append(HeadSpec(p.id, "direct_force"))
        for name in p.scalar_targets:
            heads.append(HeadSpec(p.id, "scalar", name, p.source.scalar_pooling))
    return heads


# -- batches and predictions -------------------------------------------------


@dataclass
class BatchTargets:
    energy: torch.Tensor
    forces: torch.Tensor
    scalars: Dict[str, torch.Tensor]


def assemble(examples: Sequence[Example], dataset_idx: Sequence[int], dataset_names: Sequence[str]):
    batch = collate([ex.system for ex in examples], list(dataset_idx))
    inp = ModelInput.from_batch(batch, [ex.graph for ex in examples], tuple(dataset_names))
    b, n = batch.num_systems, batch.num_nodes
    energy = torch.tensor([0.0 if ex.energy is None else ex.energy for ex in examples], dtype=torch.float64)
    forces = torch.zeros((n, 3), dtype=torch.float64)
    offsets = batch.node_offsets
    for k, ex in enumerate(examples):
        if ex.forces is not None:
            forces[offsets[k] : offsets[k] + len(ex.forces)] = torch.from_numpy(np.array(ex.forces))
    names = sorted({name for ex in examples for name in ex.scalars})
    scalars = {name: torch.tensor([ex.scalars.get(name, 0.0) for ex in examples], dtype=torch.float64) for name in names}
    return inp, BatchTargets(energy, forces, scalars)


def force_scale(prepared: Sequence[PreparedDataset], inp: ModelInput) -> torch.Tensor:
    """Per-node factor turning -d(e_norm)/dR into normalized force units."""
    ratio = np.array([p.stats.energy_std / p.stats.force_rms for p in prepared])
    return torch.from_numpy(ratio[inp.dataset_idx[inp.batch_idx.numpy()]]).unsqueeze(-1)


def forward(model: Model, prepared, inp, force_mode: str, training: bool, generator=None):
    need_forces = any(p.has_forces for p in prepared)
    mode = force_mode if need_forces else "none"
    scalar_names = sorted({s for p in prepared for s in p.scalar_targets})
    energy, forces, scalars, _ = model.predict_multi(inp, training, generator, mode, scalar_names)
    if mode == "gradient":
        forces = forces * force_scale(prepared, inp)
    return energy, forces, scalars


@dataclass
class SplitPredictions:
    """Normalized per-system predictions and targets for one dataset split."""

    dataset_id: str
    systems: list
    energy_pred: np.ndarray
    energy_tgt: np.ndarray
    forces_pred: list
    forces_tgt: list
    scalars_pred: Dict[str, np.ndarray]
    scalars_tgt: Dict[str, np.ndarray]


def predict_split(model: Model, prep: PreparedDataset, split_name: str, force_mode: str, batch_size: int = 32) -> SplitPredictions:
    cfg = model.config
    examples = prep.examples(split_name, cfg.rbf_cutoff, cfg.max_neighbors)
    e_pred, f_pred, s_pred = [], [], {n: [] for n in prep.scalar_targets}
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        inp, _ = assemble(chunk, [0] * len(chunk), [prep.id])
        energy, forces, scalars = forward(model, [prep], inp, force_mode, training=False)
        e_pred.append(energy.detach().numpy())
        f = forces.detach().numpy()
        off = 0
        for ex in chunk:
            n = ex.system.num_atoms
            f_pred.append(f[off : off + n].copy())
            off += n
        for name in prep.scalar_targets:
            s_pred[name].append(scalars[name].detach().numpy())
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    return SplitPredictions(
        dataset_id=prep.id,
        systems=[ex.system for ex in examples],
        energy_pred=cat(e_pred),
        energy_tgt=np.array([np.nan if ex.energy is None else ex.energy for ex in examples]),
        forces_pred=f_pred,
        forces_tgt=[ex.forces for ex in examples],
        scalars_pred={k: cat(v) for k, v in s_pred.items()},
        scalars_tgt={k: np.array([ex.scalars[k] for ex in examples]) for k in prep.scalar_targets},
    )


def split_loss(pred: SplitPredictions, prep: PreparedDataset, energy_distance: str = "l1") -> float:
    """Normalized structure-wise loss over a whole split (batch-size independent)."""
    total = 0.0
    if prep.has_energy and len(pred.energy_pred):
        d = pred.energy_pred - pred.energy_tgt
        total += prep.lambda_E * float(np.mean(np.abs(d) if energy_distance == "l1" else d * d))
    if prep.has_forces and pred.forces_pred:
        per_sys = [np.linalg.norm(p - t, axis=1).mean() for p, t in zip(pred.forces_pred, pred.forces_tgt)]
        total += prep.lambda_F * float(np.mean(per_sys))
    for name in prep.scalar_targets:
        total += float(np.mean(np.abs(pred.scalars_pred[name] - pred.scalars_tgt[name])))
    return total


# -- metrics log -------------------------------------------------------------


class MetricsLog:
    """Append-only CSV of (step, epoch, dataset_id, split, metric, value)."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.rows: list = []
        if path and not os.path.exists(path):
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_FIELDS)

    def add(self, step, epoch, dataset_id, split_name, metric, value):
        row = (int(step), int(epoch), dataset_id, split_name, metric, float(value))
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row[:5] + (repr(row[5]),))


# -- the loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    steps: int
    epochs: int
    stop_reason: str
    best_val: float
    best_epoch: int
    train_losses: list


class Trainer:
    def __init__(
        self,
        config: RunConfig,
        prepared: Optional[Sequence[PreparedDataset]] = None,
        init: Optional[Checkpoint] = None,
        metrics_path: Optional[str] = None,
        checkpoint_dir: Optional[str] = None,
    ):
        self.config = config
        self.prepared = list(prepared) if prepared is not None else [prepare_dataset(s) for s in config.datasets]
        if [p.id for p in self.prepared] != [s.id for s in config.datasets]:
            raise ConfigError("prepared datasets do not match the run configuration")
        self.ids = [p.id for p in self.prepared]
        self.metrics = MetricsLog(metrics_path)
        self.checkpoint_dir = checkpoint_dir
        self.last_checkpoint: Optional[str] = None
        self.model = self._build_model(init)
        cfg = config
        self.names = [n for n, _ in self.model.named_parameters()]
        self.group_of = {n: self.model.layer_group(n) for n in self.names}
        self.mix = MixSpec(
            tuple(len(p.train) for p in self.prepared),
            cfg.mix.temperature,
            cfg.mix.batch_size,
            cfg.seed,
            cfg.mix.mode,
        )
        self.sampler = MixedSampler(self.mix)
        self.steps_per_epoch = self.mix.steps_per_epoch
        self.schedule = make_scheduler(asdict(cfg.schedule), self.steps_per_epoch, cfg.model.num_blocks)
        o = cfg.optim
        self.opt = AdamW(tuple(o.betas), o.eps, o.weight_decay, o.clip_grad_norm or None)
        self.ema = EMA(dict(self.model.named_parameters()), o.ema_decay)
        self.stop_cfg = EarlyStopConfig(**asdict(cfg.early_stop))
        self.generator = torch.Generator().manual_seed(int(cfg.seed) + 1)
        self.np_rng = np.random.default_rng([cfg.seed, 7])
        self.step = 0
        self.epoch = 0
        self.rlp = PlateauState()
        self.es = EarlyStopState()
        self.best_val = math.inf
        self.best_epoch = 0
        self.best_params: Optional[Dict[str, np.ndarray]] = None
        self.train_losses: list = []
        self.stop_reason = ""
        self.weights = {
            p.id: LossWeights((p.lambda_E,), (p.lambda_F,), (p.id,)) for p in self.prepared
        }
        self.loss_fn = swl_loss if cfg.loss.reduction == "swl" else naive_loss
        self.thresholds = {}
        if cfg.loss.threshold:
            for p in self.prepared:
                if p.has_energy and (p.energy_margin is None or (p.has_forces and p.force_margin is None)):
                    raise ConfigError(f"threshold loss enabled but dataset {p.id!r} has no margins")
                spec = ThresholdSpec({p.id: p.energy_margin or 0.0}, {p.id: p.force_margin or 0.0}, (p.id,))
                self.thresholds[p.id] = threshold_wrap(self.loss_fn, spec)

    # -- setup --

    def _build_model(self, init: Optional[Checkpoint]) -> Model:
        cfg = self.config
        heads = heads_for(self.prepared, cfg.force_mode)
        if cfg.mode == "finetune":
            if init is None:
                if not cfg.init_checkpoint:
                    raise ConfigError("finetune mode needs init_checkpoint")
                init = load_checkpoint(cfg.init_checkpoint)
            if init.model_config().architecture() != cfg.model.architecture():
                raise ConfigError("checkpoint model architecture differs from the run's model config")
            model = Model(cfg.model, init.head_specs(), seed=0)
            load_params(model, init.tensors, "ema/" if cfg.eval_with_ema and "ema/embedding.weight" in init.tensors else "param/")
            return swap_heads(model, heads, cfg.seed)
        return Model(cfg.model, heads, seed=cfg.seed)

    # -- one optimizer step --

    def _present(self, dataset_idx: np.ndarray):
        return [int(d) for d in np.unique(dataset_idx)]

    def batch_losses(self, inp, tgt, energy, forces, scalars, training: bool) -> Dict[int, torch.Tensor]:
        cfg = self.config
        out = {}
        node_ds = inp.dataset_idx[inp.batch_idx.numpy()]
        for d in self._present(inp.dataset_idx):
            p = self.prepared[d]
            sel = np.flatnonzero(inp.dataset_idx == d)
            nodes = np.flatnonzero(node_ds == d)
            sel_t, nodes_t = torch.from_numpy(sel), torch.from_numpy(nodes)
            local = np.searchsorted(sel, inp.batch_idx.numpy()[nodes])
            zeros = np.zeros(len(sel), dtype=np.int64)
            total = energy.new_zeros(())
            if p.has_energy:
                ep, et = energy[sel_t], tgt.energy[sel_t]
                if p.has_forces:
                    fn = self.thresholds.get(p.id, self.loss_fn) if training else self.loss_fn
                    kw = {"energy_distance": cfg.loss.energy_distance}
                    if training and p.id in self.thresholds:
                        kw.update(energy_unit=[p.stats.energy_std], force_unit=[p.stats.force_rms])
                    total = total + fn(ep, forces[nodes_t], et, tgt.forces[nodes_t], local, zeros, self.weights[p.id], **kw)
                else:
                    diff = ep - et
                    dist = diff.abs() if cfg.loss.energy_distance == "l1" else diff * diff
                    total = total + p.lambda_E * dist.mean()
            for name in p.scalar_targets:
                total = total + scalar_mae(scalars[name][sel_t], tgt.scalars[name][sel_t])
            out[d] = total
        return out

    def train_step(self) -> float:
        cfg = self.config
        picks = self.sampler.next_indices()
        examples = [
            self.prepared[d].examples("train", cfg.model.rbf_cutoff, cfg.model.max_neighbors)[i] for d, i in picks
        ]
        inp, tgt = assemble(examples, [d for d, _ in picks], self.ids)
        energy, forces, scalars = forward(self.model, self.prepared, inp, cfg.force_mode, True, self.generator)
        parts = self.batch_losses(inp, tgt, energy, forces, scalars, training=True)
        total = sum(parts.values())
        value = float(total.detach())
        if not math.isfinite(value):
            raise NonFiniteError(
                f"non-finite training loss at step {self.step}; last good checkpoint: {self.last_checkpoint or 'none'}"
            )
        params = dict(self.model.named_parameters())
        plist = [params[n] for n in self.names]
        if cfg.loss.pcgrad and len(parts) > 1:
            flat = [torch.cat([g.reshape(-1) for g in ad.backward(parts[d], plist)]) for d in sorted(parts)]
            combined = pcgrad(flat, self.np_rng)
            grads, off = {}, 0
            for n, p in zip(self.names, plist):
                grads[n] = combined[off : off + p.numel()].reshape(p.shape)
                off += p.numel()
        else:
            grads = dict(zip(self.names, ad.backward(total, plist)))
        lrs = {g: lr_at(self.step, g, self.schedule, self.rlp) for g in self.model.layer_groups()}
        self.opt.step(params, grads, lrs, self.group_of)
        self.ema.update(params)
        self.step += 1
        self.train_losses.append(value)
        self.metrics.add(self.step, self.epoch, "*", "train", "loss", value)
        return value

    # -- validation --

    def eval_params(self) -> Dict[str, torch.Tensor]:
        if self.config.eval_with_ema:
            return self.ema.shadow
        return {n: p.detach() for n, p in self.model.named_parameters()}

    def eval_model(self) -> Model:
        """A copy of the model carrying the evaluation weights."""
        m = Model(self.config.model, list(self.model.head_specs.values()), seed=0)
        with torch.no_grad():
            src = self.eval_params()
            for n, p in m.named_parameters():
                p.copy_(src[n])
        return m

    def validate(self) -> float:
        model = self.eval_model()
        total = 0.0
        for p in self.prepared:
            if len(p.val) == 0:
                continue
            pred = predict_split(model, p, "val", self.config.force_mode, self.config.eval_batch_size)
            loss = split_loss(pred, p, self.config.loss.energy_distance)
            total += loss
            self.metrics.add(self.step, self.epoch, p.id, "val", "loss", loss)
            if p.has_forces:
                fmae = float(np.mean(np.abs(np.concatenate(pred.forces_pred) - np.concatenate(pred.forces_tgt))))
                self.metrics.add(self.step, self.epoch, p.id, "val", "force_mae_norm", fmae)
        return total

    def end_epoch(self, elapsed: float):
        self.epoch += 1
        val = self.validate()
        if val < self.best_val:
            self.best_val, self.best_epoch = val, self.epoch
            self.best_params = {n: t.detach().numpy().copy() for n, t in self.eval_params().items()}
        if self.schedule.rlp_enabled and self.step >= self.schedule.rlp_start_step:
            self.rlp = rlp_observe(val, self.rlp, self.schedule)
        if self.config.mode == "pretrain":
            if self.epoch >= self.config.epochs:
                self.stop_reason = f"completed {self.epoch} epochs"
            return
        self.es = early_stop_observe(self.es, self.epoch, val)
        lr = max(lr_at(self.step, g, self.schedule, self.rlp) for g in self.model.layer_groups())
        decision = early_stop(self.es, self.epoch, lr, self.stop_cfg, elapsed)
        if decision.stop:
            self.stop_reason = decision.reason

    def run(self, max_steps: Optional[int] = None) -> TrainResult:
        cap = max_steps if max_steps is not None else (self.config.max_steps or None)
        every = self.config.checkpoint_every
        t0 = time.monotonic()
        reason = ""
        while not self.stop_reason:
            if cap is not None and self.step >= cap:
                # a step cap is not part of the run's state, so a resumed run may continue past it
                reason = f"reached step cap {cap}"
                break
            self.train_step()
            if self.step % self.steps_per_epoch == 0:
                self.end_epoch(time.monotonic() - t0)
            if every and self.step % every == 0 and self.checkpoint_dir:
                self.save(os.path.join(self.checkpoint_dir, "last.ckpt"))
        ckpt = self.snapshot()
        if self.checkpoint_dir:
            self.save(os.path.join(self.checkpoint_dir, "final.ckpt"), ckpt)
        return TrainResult(ckpt, self.step, self.epoch, self.stop_reason or reason, self.best_val, self.best_epoch, list(self.train_losses))

    # -- checkpoints --

    def snapshot(self) -> Checkpoint:
        named = list(self.model.named_parameters())
        tensors = {}
        tensors.update(param_arrays(named, "param/"))
        tensors.update(param_arrays(self.ema.shadow.items(), "ema/"))
        tensors.update(param_arrays(self.opt.exp_avg.items(), "adam_m/"))
        tensors.update(param_arrays(self.opt.exp_avg_sq.items(), "adam_v/"))
        if self.best_params is not None:
            tensors.update({"best/" + k: v.astype("<f8") for k, v in self.best_params.items()})
        tensors["rng/torch"] = self.generator.get_state().numpy().copy()
        manifest = {
            "kind": "training_state",
            "config": self.config.to_json(),
            "config_hash": self.config.config_hash(),
            "model_config": self.config.model.to_json(),
            "heads": [h.to_json() for h in self.model.head_specs.values()],
            "datasets": [p.state_json() for p in self.prepared],
            "step": self.step,
            "epoch": self.epoch,
            "adam_step": self.opt.step_count,
            "rlp": asdict(self.rlp),
            "early_stop": asdict(self.es),
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "stop_reason": self.stop_reason,
            "sampler": self.sampler.state_dict(),
            "rng_numpy": self.np_rng.bit_generator.state,
            "train_losses": list(self.train_losses),
        }
        return Checkpoint(manifest, tensors)

    def save(self, path: str, ckpt: Optional[Checkpoint] = None) -> str:
        save_checkpoint(ckpt or self.snapshot(), path)
        self.last_checkpoint = path
        return path

    def restore(self, ckpt: Checkpoint):
        """Continue from a training-state checkpoint of the same run configuration."""
        from .errors import CheckpointError

        m = ckpt.manifest
        if m.get("kind") != "training_state":
            raise CheckpointError("checkpoint does not carry training state")
        if ckpt.model_config().architecture() != self.config.model.architecture():
            raise ConfigError("checkpoint model architecture differs from the run's model config")
        if m["config_hash"] != self.config.config_hash():
            raise CheckpointError("checkpoint was written by a different run configuration")
        load_params(self.model, ckpt.tensors, "param/")
        t = ckpt.tensors
        self.ema.shadow = {n: torch.from_numpy(t["ema/" + n].copy()) for n in self.names}
        self.opt.load_state_dict(
            {
                "step_count": m["adam_step"],
                "exp_avg": {n: torch.from_numpy(t["adam_m/" + n].copy()) for n in self.names if "adam_m/" + n in t},
                "exp_avg_sq": {n: torch.from_numpy(t["adam_v/" + n].copy()) for n in self.names if "adam_v/" + n in t},
            }
        )
        self.best_params = {n: t["best/" + n].copy() for n in self.names} if "best/" + self.names[0] in t else None
        self.generator.set_state(torch.from_numpy(t["rng/torch"].copy()))
        self.np_rng.bit_generator.state = m["rng_numpy"]
        self.sampler.load_state_dict(m["sampler"])
        self.step, self.epoch = int(m["step"]), int(m["epoch"])
        self.rlp = PlateauState(**m["rlp"])
        self.es = EarlyStopState(**m["early_stop"])
        self.best_val, self.best_epoch = float(m["best_val"]), int(m["best_epoch"])
        self.stop_reason = m["stop_reason"]
        self.train_losses = list(m["train_losses"])

    def best_model(self) -> Model:
        """Evaluation weights from the best validation epoch (current weights if none)."""
        m = self.eval_model()
        if self.best_params is not None:
            with torch.no_grad():
                for n, p in m.named_parameters():
                    p.copy_(torch.from_numpy(self.best_params[n]))
        return m


# -- entry points ------------------------------------------------------------


def _dirs(out_dir):
    if not out_dir:
        return None, None
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, "metrics.csv"), out_dir


def pretrain(config: RunConfig, prepared=None, out_dir: Optional[str] = None, resume: Optional[str] = None) -> TrainResult:
    if config.mode != "pretrain":
        raise ConfigError(f"pretrain() needs mode 'pretrain', got {config.mode!r}")
    metrics, ckdir = _dirs(out_dir)
    trainer = Trainer(config, prepared, metrics_path=metrics, checkpoint_dir=ckdir)
    if resume:
        trainer.restore(load_checkpoint(resume))
    return trainer.run()


def finetune(checkpoint, config: RunConfig, prepared=None, out_dir: Optional[str] = None) -> "tuple[TrainResult, Trainer]":
    """Swap heads on a pretrained backbone and train the whole model.

    ``checkpoint`` may be a path or a loaded :class:`Checkpoint`; mode
    'scratch' ignores it and starts from random weights.
    """
    if config.mode not in ("finetune", "scratch"):
        raise ConfigError(f"finetune() needs mode 'finetune' or 'scratch', got {config.mode!r}")
    init = None
    if config.mode == "finetune":
        if checkpoint is None:
            checkpoint = config.init_checkpoint or None
        if checkpoint is None:
            raise ConfigError("fine-tuning needs a pretrained checkpoint (init_checkpoint)")
        init = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, os.PathLike)) else checkpoint
    metrics, ckdir = _dirs(out_dir)
    trainer = Trainer(config, prepared, init=init, metrics_path=metrics, checkpoint_dir=ckdir)
    return trainer.run(), trainer
