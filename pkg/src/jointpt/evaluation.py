"""Physical-unit metrics, relative-improvement tables and embedding exports."""

from __future__ import annotations

import csv
import io
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import EmbeddingError, LabelError, MetricError
from .model import Model, mean_embeddings
from .reference import NormStats, ReferenceModel, denormalize_scalar
from .trainer import PreparedDataset, assemble, predict_split, prepare_dataset
from .config import DataSource


@dataclass(frozen=True)
class MetricRow:
    dataset_id: str
    split: str
    target: str
    mae: float
    rmse: float
    count: int
    unit: str


@dataclass
class EvalReport:
    rows: List[MetricRow] = field(default_factory=list)
    runtime_s: float = 0.0

    def get(self, dataset_id: str, target: str, split: Optional[str] = None) -> MetricRow:
        for r in self.rows:
            if r.dataset_id == dataset_id and r.target == target and (split is None or r.split == split):
                return r
        raise KeyError(f"no metric for {dataset_id}/{target}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["dataset_id", "split", "target", "mae", "rmse", "count", "unit"])
        for r in self.rows:
            w.writerow([r.dataset_id, r.split, r.target, repr(r.mae), repr(r.rmse), r.count, r.unit])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(r) for r in self.rows], "runtime_s": self.runtime_s}, indent=2)


def _mae_rmse(err: np.ndarray):
    err = np.asarray(err, dtype=np.float64).reshape(-1)
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def _check_labels(prep: PreparedDataset, split: str, targets):
    systems = prep.split_data(split).systems
    for t in targets:
        for s in systems:
            missing = (
                (t == "energy" and s.energy is None)
                or (t == "forces" and s.forces is None)
                or (t not in ("energy", "forces") and t not in s.scalars)
            )
            if missing:
                raise LabelError(f"{s.id}: no {t!r} label for evaluation")


def evaluate(
    model: Model,
    prep: PreparedDataset,
    split: str = "test",
    targets: Optional[Sequence[str]] = None,
    force_mode: str = "direct",
    batch_size: int = 32,
) -> EvalReport:
    """MAE/RMSE of denormalized predictions (eV, eV/Å, target units)."""
    t0 = time.perf_counter()
    targets = tuple(prep.source.targets if targets is None else targets)
    unknown = [t for t in targets if t not in prep.source.targets]
    if unknown:
        raise LabelError(f"dataset {prep.id!r} was not trained on {unknown}")
    _check_labels(prep, split, targets)
    pred = predict_split(model, prep, split, force_mode, batch_size)
    report = EvalReport()
    n = len(pred.systems)
    if "energy" in targets:
        # e_pred - e_tgt in normalized units; referencing cancels in the difference
        err = (pred.energy_pred - pred.energy_tgt) * prep.stats.energy_std
        report.rows.append(MetricRow(prep.id, split, "energy", *_mae_rmse(err), n, "eV"))
    if "forces" in targets:
        err = np.concatenate([p - t for p, t in zip(pred.forces_pred, pred.forces_tgt)]) * prep.stats.force_rms
        report.rows.append(MetricRow(prep.id, split, "forces", *_mae_rmse(err), n, "eV/Å"))
    for name in targets:
        if name in ("energy", "forces"):
            continue
        model_ref, stats = prep.scalar_refs[name]
        phys = np.array(
            [denormalize_scalar(v, s, model_ref, stats) for v, s in zip(pred.scalars_pred[name], pred.systems)]
        )
        truth = np.array([s.scalars[name] for s in pred.systems])
        report.rows.append(MetricRow(prep.id, split, name, *_mae_rmse(phys - truth), n, ""))
    report.runtime_s = time.perf_counter() - t0
    return report


def restore_prepared(ckpt: Checkpoint) -> List[PreparedDataset]:
    """Rebuild the run's datasets and attach the statistics stored in ``ckpt``."""
    from .config import from_dict, RunConfig

    cfg = from_dict(RunConfig, ckpt.manifest["config"])
    stored = {d["id"]: d for d in ckpt.manifest["datasets"]}
    out = []
    for src in cfg.datasets:
        prep = prepare_dataset(src)
        st = stored[src.id]
        prep.reference = ReferenceModel.from_json(st["reference"]) if st["reference"] else None
        prep.stats = NormStats.from_json(st["stats"])
        prep.scalar_refs = {
            k: (ReferenceModel.from_json(v["model"]) if v["model"] else None, NormStats.from_json(v["stats"]))
            for k, v in st["scalar_refs"].items()
        }
        prep._examples.clear()
        out.append(prep)
    return out


def evaluate_checkpoint(ckpt: Checkpoint, split: str = "test", targets=None, use_ema: bool = True, batch_size: int = 32) -> EvalReport:
    force_mode = ckpt.manifest["config"]["force_mode"]
    prefix = "best/" if any(k.startswith("best/") for k in ckpt.tensors) else ("ema/" if use_ema else "param/")
    model = ckpt.build_model(prefix)
    report = EvalReport()
    t0 = time.perf_counter()
    for prep in restore_prepared(ckpt):
        if len(prep.split_data(split)) == 0:
            continue
        report.rows.extend(evaluate(model, prep, split, targets, force_mode, batch_size).rows)
    report.runtime_s = time.perf_counter() - t0
    return report


# -- relative improvement ----------------------------------------------------


def relative_improvement(base: float, new: float) -> float:
    """100 * (base - new) / base; positive when ``new`` has lower error."""
    if not base > 0:
        raise MetricError(f"relative improvement needs a positive baseline, got {base!r}")
    return 100.0 * (base - new) / base


def mean_relative_improvement(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise MetricError("mean relative improvement of an empty set")
    return float(np.mean([relative_improvement(b, n) for b, n in pairs]))


def ablation_table(results: Dict[str, Dict[str, float]], baseline: str, digits: int = 3) -> str:
    """Markdown table: one row per method, one column per task, plus mean RI vs ``baseline``."""
    if baseline not in results:
        raise MetricError(f"baseline {baseline!r} missing from results")
    tasks = list(results[baseline])
    lines = ["| Method | " + " | ".join(tasks) + " | Mean RI (%) |", "|" + "---|" * (len(tasks) + 2)]
    for method, metrics in results.items():
        cells = [f"{metrics[t]:.{digits}g}" for t in tasks]
        if method == baseline:
            ri = "-"
        else:
            ri = f"{mean_relative_improvement([(results[baseline][t], metrics[t]) for t in tasks]):.1f}"
        lines.append(f"| {method} | " + " | ".join(cells) + f" | {ri} |")
    return "\n".join(lines) + "\n"


# -- embeddings ----------------------------------------------------------------


def export_embeddings(model: Model, prep: PreparedDataset, split: str = "test", sample_count: int = 100, seed: int = 0) -> List[dict]:
    """Per-system mean node/edge embeddings for external projection tools."""
    systems = prep.split_data(split)
    n = len(systems)
    rng = np.random.default_rng(seed)
    idx = np.arange(n) if sample_count >= n else np.sort(rng.choice(n, size=sample_count, replace=False))
    examples = prep.examples(split, model.config.rbf_cutoff, model.config.max_neighbors)
    rows = []
    for i in idx:
        ex = examples[int(i)]
        inp, _ = assemble([ex], [0], [prep.id])
        with torch.no_grad():
            emb = model.encode(inp)
            try:
                h, m = mean_embeddings(emb, inp)
            except EmbeddingError:
                warnings.warn(f"{ex.system.id}: no edges; skipped in embedding export", stacklevel=2)
                continue
        rows.append({"system_id": ex.system.id, "dataset_id": prep.id, "h": h[0].numpy().copy(), "m": m[0].numpy().copy()})
    return rows


def embeddings_to_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    if rows:
        a, e = len(rows[0]["h"]), len(rows[0]["m"])
        w.writerow(["system_id", "dataset_id"] + [f"h{k}" for k in range(a)] + [f"m{k}" for k in range(e)])
    for r in rows:
        w.writerow([r["system_id"], r["dataset_id"]] + [repr(float(x)) for x in r["h"]] + [repr(float(x)) for x in r["m"]])
    return buf.getvalue()
