"""Per-element linear energy references and Gaussian normalization statistics.

Every fit here uses the training split only; fitted objects are frozen.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import AtomicSystem, composition_vector
from .errors import FitError, LabelError, StateError

STD_FLOOR = 1e-8
TIKHONOV = 1e-10


class MissingReferenceWarning(UserWarning):
    pass


class DegenerateStatsWarning(UserWarning):
    pass


_warned_missing: set = set()


@dataclass(frozen=True)
class ReferenceModel:
    coefficients: Mapping[int, float]
    fitted_on: str = ""
    residual_rms: float = 0.0

    def __post_init__(self):
        coeffs = {int(z): float(c) for z, c in dict(self.coefficients).items()}
        object.__setattr__(self, "coefficients", MappingProxyType(coeffs))

    def offset(self, system: AtomicSystem) -> float:
        """Composition baseline sum_z c_z n_z; unknown elements count as 0."""
        total = 0.0
        for z, n in composition_vector(system).items:
            c = self.coefficients.get(z)
            if c is None:
                key = (self.fitted_on, z)
                if key not in _warned_missing:
                    _warned_missing.add(key)
                    warnings.warn(
                        f"element Z={z} has no reference coefficient in {self.fitted_on!r}; using 0",
                        MissingReferenceWarning,
                        stacklevel=3,
                    )
                continue
            total += c * n
        return total

    def to_json(self) -> dict:
        return {
            "coefficients": {str(z): c for z, c in sorted(self.coefficients.items())},
            "fitted_on": self.fitted_on,
            "residual_rms": self.residual_rms,
        }

    @classmethod
    def from_json(cls, obj) -> "ReferenceModel":
        return cls({int(z): c for z, c in obj["coefficients"].items()}, obj["fitted_on"], obj["residual_rms"])


@dataclass(frozen=True)
class NormStats:
    energy_mean: float = 0.0
    energy_std: float = 1.0
    force_rms: float = 1.0

    def to_json(self) -> dict:
        return {"energy_mean": self.energy_mean, "energy_std": self.energy_std, "force_rms": self.force_rms}

    @classmethod
    def from_json(cls, obj) -> "NormStats":
        return cls(obj["energy_mean"], obj["energy_std"], obj["force_rms"])


def _composition_matrix(systems: Sequence[AtomicSystem]):
    comps = [composition_vector(s).counts for s in systems]
    elements = sorted({z for c in comps for z in c})
    col = {z: k for k, z in enumerate(elements)}
    a = np.zeros((len(systems), len(elements)))
    for i, c in enumerate(comps):
        for z, n in c.items():
            a[i, col[z]] = n
    return a, elements


def _fit_linear(systems, values, name) -> ReferenceModel:
    a, elements = _composition_matrix(systems)
    b = np.asarray(values, dtype=np.float64)
    # damped normal equations; rank-deficient compositions stay solvable
    ata = a.T @ a + TIKHONOV * np.eye(len(elements))
    coef = np.linalg.solve(ata, a.T @ b)
    resid = b - a @ coef
    return ReferenceModel(
        dict(zip(elements, coef.tolist())),
        fitted_on=name,
        residual_rms=float(np.sqrt(np.mean(resid**2))),
    )


def fit_linear_reference(train) -> ReferenceModel:
    labeled = [s for s in train.systems if s.energy is not None]
    if not labeled:
        raise FitError(f"{train.dataset_id}: no energy-labeled systems to fit a reference on")
    if len(labeled) != len(train.systems):
        raise FitError(f"{train.dataset_id}: every training system needs an energy label")
    return _fit_linear(labeled, [s.energy for s in labeled], train.dataset_id)


def reference_energy(system: AtomicSystem, model: ReferenceModel) -> float:
    if system.energy is None:
        raise LabelError(f"{system.id}: missing energy label")
    return system.energy - model.offset(system)


def _floored(value, what):
    if value < STD_FLOOR:
        warnings.warn(f"{what} is degenerate ({value:.3g}); flooring to {STD_FLOOR}", DegenerateStatsWarning, stacklevel=3)
        return STD_FLOOR
    return float(value)


def fit_norm_stats(train, model: Optional[ReferenceModel] = None) -> NormStats:
    """Population mean/std of (referenced) energies and pooled RMS force component.

    Pass the fitted ``model`` to reference raw energies on the fly; without it
    the stored energies are taken as already referenced.
    """
    systems = list(train.systems)
    if not systems:
        raise FitError("cannot fit normalization statistics on an empty dataset")
    mean, std = 0.0, 1.0
    if any(s.energy is not None for s in systems):
        if model is None:
            e = np.array([s.energy for s in systems], dtype=np.float64)
        else:
            e = np.array([reference_energy(s, model) for s in systems])
        mean = float(e.mean())
        std = _floored(float(e.std()), "energy std")
    rms = 1.0
    forces = [s.forces for s in systems if s.forces is not None]
    if forces:
        f = np.concatenate(forces)
        rms = _floored(float(np.sqrt(np.mean(f * f))), "force RMS")
    return NormStats(mean, std, rms)


def normalize_labels(system: AtomicSystem, model: Optional[ReferenceModel], stats: Optional[NormStats]):
    if model is None or stats is None:
        raise StateError("normalization needs a fitted reference model and stats")
    e_norm = None
    if system.energy is not None:
        e_norm = (reference_energy(system, model) - stats.energy_mean) / stats.energy_std
    f_norm = None if system.forces is None else system.forces / stats.force_rms
    return e_norm, f_norm


def denormalize_prediction(e_norm, f_norm, model, stats, system: AtomicSystem):
    """Exact inverse of :func:`normalize_labels`, re-adding the composition baseline."""
    if model is None or stats is None:
        raise StateError("denormalization needs a fitted reference model and stats")
    energy = None
    if e_norm is not None:
        energy = e_norm * stats.energy_std + stats.energy_mean + model.offset(system)
    forces = None if f_norm is None else np.asarray(f_norm) * stats.force_rms
    return energy, forces


def fit_scalar_target_reference(train, target: str, atomwise: bool):
    systems = list(train.systems)
    if not systems:
        raise FitError("cannot fit a target reference on an empty dataset")
    missing = [s.id for s in systems if target not in s.scalars]
    if missing:
        raise LabelError(f"target {target!r} missing on {len(missing)} systems (first: {missing[0]})")
    values = np.array([s.scalars[target] for s in systems])
    model = None
    if atomwise:
        model = _fit_linear(systems, values, f"{train.dataset_id}:{target}")
        values = values - np.array([model.offset(s) for s in systems])
    stats = NormStats(float(values.mean()), _floored(float(values.std()), f"{target} std"), 1.0)
    return model, stats


def normalize_scalar(system, target, model, stats) -> float:
    if stats is None:
        raise StateError("scalar normalization needs fitted stats")
    if target not in system.scalars:
        raise LabelError(f"{system.id}: missing target {target!r}")
    v = system.scalars[target] - (model.offset(system) if model is not None else 0.0)
    return (v - stats.energy_mean) / stats.energy_std


def denormalize_scalar(value, system, model, stats) -> float:
    if stats is None:
        raise StateError("scalar denormalization needs fitted stats")
    out = value * stats.energy_std + stats.energy_mean
    return out + (model.offset(system) if model is not None else 0.0)
