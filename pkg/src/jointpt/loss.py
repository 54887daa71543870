"""Energy/force training losses.

``swl_loss`` averages each structure's per-atom force errors before averaging
over structures; ``naive_loss`` is the atom-level mean used as the ablation
baseline. Both take targets in normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import torch

from . import autodiff as ad
from .core import DatasetMeta
from .errors import ConfigError, ShapeError, WeightError

# energy / force margins (eV, eV/Å)
THRESHOLD_PRESETS = {
    "ani1x": (0.043, 0.01),
    "transition1x": (0.043, 0.01),
    "oc20": (0.1, 0.03),
    "oc22": (0.1, 0.03),
    "small_molecule": (0.043, 0.01),
    "catalysis": (0.1, 0.03),
}


@dataclass(frozen=True)
class LossWeights:
    """Per-dataset coefficients, indexed by the batch's dataset index."""

    lambda_E: tuple
    lambda_F: tuple
    dataset_ids: tuple = ()
    global_lambda_E: Optional[float] = None
    global_lambda_F: Optional[float] = None

    def __post_init__(self):
        le = tuple(float(x) for x in self.lambda_E)
        lf = tuple(float(x) for x in self.lambda_F)
        if len(le) != len(lf):
            raise WeightError("lambda_E and lambda_F must have one entry per dataset")
        if any(x <= 0 for x in le + lf):
            raise WeightError("loss coefficients must be positive")
        object.__setattr__(self, "lambda_E", le)
        object.__setattr__(self, "lambda_F", lf)
        object.__setattr__(self, "dataset_ids", tuple(self.dataset_ids))

    @property
    def num_datasets(self) -> int:
        return len(self.lambda_E)

    def per_system(self, dataset_idx):
        idx = np.asarray(dataset_idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_datasets):
            raise WeightError(f"dataset index out of range for {self.num_datasets} weighted datasets")
        le = torch.tensor(self.lambda_E, dtype=torch.float64)[torch.as_tensor(idx)]
        lf = torch.tensor(self.lambda_F, dtype=torch.float64)[torch.as_tensor(idx)]
        return le, lf

    def globals(self):
        ge = self.global_lambda_E if self.global_lambda_E is not None else float(np.mean(self.lambda_E))
        gf = self.global_lambda_F if self.global_lambda_F is not None else float(np.mean(self.lambda_F))
        return ge, gf


def default_weights(metas: Sequence[DatasetMeta]) -> LossWeights:
    """lambda_E = 1 and lambda_F = mean atoms per system of each training split."""
    return LossWeights(
        lambda_E=tuple(1.0 for _ in metas),
        lambda_F=tuple(float(m.mean_atoms) for m in metas),
        dataset_ids=tuple(m.dataset_id for m in metas),
    )


def scalar_mae(pred, tgt):
    if pred.shape != tgt.shape:
        raise ShapeError(f"scalar_mae: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    return (pred - tgt).abs().mean()


def vector_l2(pred, tgt):
    if pred.shape != tgt.shape:
        raise ShapeError(f"vector_l2: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    return ad.norm_rows(pred - tgt)


def _energy_distance(diff, kind):
    if kind == "l1":
        return diff.abs()
    if kind == "squared":
        return diff * diff
    raise ConfigError(f"unknown energy distance {kind!r}")


def _check(E_pred, F_pred, E_tgt, F_tgt, batch_idx, dataset_idx):
    if E_pred.shape != E_tgt.shape or F_pred.shape != F_tgt.shape:
        raise ShapeError(
            f"prediction/target shapes differ: E {tuple(E_pred.shape)}/{tuple(E_tgt.shape)}, "
            f"F {tuple(F_pred.shape)}/{tuple(F_tgt.shape)}"
        )
    if len(batch_idx) != F_pred.shape[0] or len(dataset_idx) != E_pred.shape[0]:
        raise ShapeError("batch_idx/dataset_idx do not match prediction shapes")


def _as_index(x):
    return torch.as_tensor(np.asarray(x, dtype=np.int64))


def swl_loss(
    E_pred,
    F_pred,
    E_tgt,
    F_tgt,
    batch_idx,
    dataset_idx,
    weights: LossWeights,
    energy_distance: str = "l1",
    energy_mask=None,
    force_mask=None,
):
    """Structure-wise reduction:

    (1/B) sum_b lE[W_b] d(E_b) + (1/B) sum_b lF[W_b] (1/N_b) sum_i |dF_bi|_2
    """
    _check(E_pred, F_pred, E_tgt, F_tgt, batch_idx, dataset_idx)
    bidx = _as_index(batch_idx)
    b = E_pred.shape[0]
    le, lf = weights.per_system(dataset_idx)
    e_term = _energy_distance(E_pred - E_tgt, energy_distance)
    f_atom = vector_l2(F_pred, F_tgt)
    if energy_mask is not None:
        e_term = e_term * torch.as_tensor(energy_mask, dtype=torch.float64)
    if force_mask is not None:
        f_atom = f_atom * torch.as_tensor(force_mask, dtype=torch.float64)
    counts = torch.bincount(bidx, minlength=b).to(torch.float64)
    f_sys = ad.scatter_add_rows(f_atom, bidx, b) / counts.clamp(min=1.0)
    return (le * e_term).mean() + (lf * f_sys).mean()


def naive_loss(
    E_pred,
    F_pred,
    E_tgt,
    F_tgt,
    batch_idx,
    dataset_idx,
    weights: LossWeights,
    energy_distance: str = "l1",
    energy_mask=None,
    force_mask=None,
):
    """Atom-level reduction with one global coefficient per term.

    lE (1/B) sum_b d(E_b) + lF (1/sum_b N_b) sum_{b,i} |dF_bi|_2
    """
    _check(E_pred, F_pred, E_tgt, F_tgt, batch_idx, dataset_idx)
    weights.per_system(dataset_idx)  # validates indices
    ge, gf = weights.globals()
    e_term = _energy_distance(E_pred - E_tgt, energy_distance)
    f_atom = vector_l2(F_pred, F_tgt)
    if energy_mask is not None:
        e_term = e_term * torch.as_tensor(energy_mask, dtype=torch.float64)
    if force_mask is not None:
        f_atom = f_atom * torch.as_tensor(force_mask, dtype=torch.float64)
    return ge * e_term.mean() + gf * f_atom.mean()


@dataclass(frozen=True)
class ThresholdSpec:
    """Margins per dataset id (eV and eV/Å); the gating metric is the absolute error."""

    energy_margin: Mapping[str, float] = field(default_factory=dict)
    force_margin: Mapping[str, float] = field(default_factory=dict)
    dataset_ids: tuple = ()

    def __post_init__(self):
        for name in ("energy_margin", "force_margin"):
            vals = dict(getattr(self, name))
            if any(v < 0 for v in vals.values()):
                raise ConfigError("threshold margins must be >= 0")
            object.__setattr__(self, name, vals)
        object.__setattr__(self, "dataset_ids", tuple(self.dataset_ids))

    @classmethod
    def from_presets(cls, mapping: Mapping[str, str], dataset_ids: Sequence[str]) -> "ThresholdSpec":
        """``mapping`` sends dataset id -> preset name (see THRESHOLD_PRESETS)."""
        em, fm = {}, {}
        for did, preset in mapping.items():
            if preset not in THRESHOLD_PRESETS:
                raise ConfigError(f"unknown threshold preset {preset!r}")
            em[did], fm[did] = THRESHOLD_PRESETS[preset]
        return cls(em, fm, tuple(dataset_ids))

    def margins(self, dataset_idx):
        em, fm = [], []
        for k in np.asarray(dataset_idx, dtype=np.int64):
            if k < 0 or k >= len(self.dataset_ids):
                raise ConfigError(f"dataset index {k} has no threshold entry")
            did = self.dataset_ids[k]
            if did not in self.energy_margin or did not in self.force_margin:
                raise ConfigError(f"no threshold margins configured for dataset {did!r}")
            em.append(self.energy_margin[did])
            fm.append(self.force_margin[did])
        return np.array(em), np.array(fm)


def threshold_masks(E_pred, F_pred, E_tgt, F_tgt, batch_idx, dataset_idx, spec, energy_unit=None, force_unit=None):
    """Boolean gates: True where the physical-unit error reaches the margin.

    ``energy_unit``/``force_unit`` are per-dataset factors turning normalized
    errors back into eV and eV/Å (1 when inputs are already physical).
    """
    ds = np.asarray(dataset_idx, dtype=np.int64)
    bidx = np.asarray(batch_idx, dtype=np.int64)
    em, fm = spec.margins(ds)
    eu = np.ones(len(ds)) if energy_unit is None else np.asarray(energy_unit, dtype=np.float64)[ds]
    fu = np.ones(len(ds)) if force_unit is None else np.asarray(force_unit, dtype=np.float64)[ds]
    with torch.no_grad():
        e_err = (E_pred - E_tgt).abs().numpy() * eu
        f_err = torch.linalg.vector_norm(F_pred - F_tgt, dim=1).numpy() * fu[bidx]
    return e_err >= em, f_err >= fm[bidx]


def threshold_wrap(loss_fn: Callable, spec: ThresholdSpec) -> Callable:
    """Gate ``loss_fn`` so contributions inside the margins count as zero."""

    def wrapped(E_pred, F_pred, E_tgt, F_tgt, batch_idx, dataset_idx, weights, energy_unit=None, force_unit=None, **kw):
        emask, fmask = threshold_masks(
            E_pred, F_pred, E_tgt, F_tgt, batch_idx, dataset_idx, spec, energy_unit, force_unit
        )
        return loss_fn(
            E_pred, F_pred, E_tgt, F_tgt, batch_idx, dataset_idx, weights,
            energy_mask=emask, force_mask=fmask, **kw,
        )

    wrapped.__name__ = f"threshold_{getattr(loss_fn, '__name__', 'loss')}"
    return wrapped


def per_system_force_contributions(F_pred, F_tgt, batch_idx, dataset_idx, weights, reduction: str):
    """Each system's share of the force term, before the batch sum.

    Used to study how reductions weight small vs. large structures.
    """
    bidx = _as_index(batch_idx)
    b = len(dataset_idx)
    f_atom = vector_l2(F_pred, F_tgt)
    per_sys = ad.scatter_add_rows(f_atom, bidx, b)
    if reduction == "swl":
        _, lf = weights.per_system(dataset_idx)
        counts = torch.bincount(bidx, minlength=b).to(torch.float64)
        return lf * per_sys / counts / b
    if reduction == "naive":
        _, gf = weights.globals()
        return gf * per_sys / f_atom.shape[0]
    raise ConfigError(f"unknown reduction {reduction!r}")
