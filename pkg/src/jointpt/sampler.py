"""Temperature-based multi-dataset batch construction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .core import Batch, collate
from .errors import SamplerError


def mixture_probabilities(sizes: Sequence[int], temperature: float) -> np.ndarray:
    """p_i proportional to (|D_i| / sum_j |D_j|)^(1/T); T = inf gives uniform."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise SamplerError("dataset sizes must be positive")
    if temperature < 1.0:
        raise SamplerError("temperature must be >= 1 (or inf)")
    if math.isinf(temperature):
        return np.full(sizes.size, 1.0 / sizes.size)
    w = (sizes / sizes.sum()) ** (1.0 / temperature)
    return w / w.sum()


@dataclass(frozen=True)
class MixSpec:
    sizes: tuple
    temperature: float = 2.0
    batch_size: int = 16
    seed: int = 0
    mode: str = "per_slot"  # or "homogeneous"

    def __post_init__(self):
        if any(s <= 0 for s in self.sizes):
            raise SamplerError("every dataset needs at least one example")
        if self.batch_size < 1:
            raise SamplerError("batch_size must be >= 1")
        if self.mode not in ("per_slot", "homogeneous"):
            raise SamplerError(f"unknown mixing mode {self.mode!r}")

    @property
    def steps_per_epoch(self) -> int:
        """One mixture epoch draws sum |D_i| examples."""
        return max(1, math.ceil(sum(self.sizes) / self.batch_size))


class MixedSampler:
    """Draw a dataset per batch slot, then the next example of its shuffled cyclic stream.

    Each dataset's stream is a fresh permutation per pass, seeded by
    (seed, dataset, pass), so no example repeats within a pass.
    """

    def __init__(self, spec: MixSpec):
        self.spec = spec
        self.probs = mixture_probabilities(spec.sizes, spec.temperature)
        self.rng = np.random.default_rng([spec.seed, 0x5A3])
        self.position = [0] * len(spec.sizes)
        self.cycle = [0] * len(spec.sizes)
        self._perms = [self._perm(d, 0) for d in range(len(spec.sizes))]

    def _perm(self, d: int, cycle: int) -> np.ndarray:
        return np.random.default_rng([self.spec.seed, d, cycle]).permutation(self.spec.sizes[d])

    def _take(self, d: int) -> int:
        if self.position[d] >= self.spec.sizes[d]:
            self.cycle[d] += 1
            self.position[d] = 0
            self._perms[d] = self._perm(d, self.cycle[d])
        idx = int(self._perms[d][self.position[d]])
        self.position[d] += 1
        return idx

    def next_indices(self) -> List[tuple]:
        """(dataset index, example index) for each slot of the next batch."""
        n = len(self.spec.sizes)
        if self.spec.mode == "homogeneous":
            d = int(self.rng.choice(n, p=self.probs))
            picks = [d] * self.spec.batch_size
        else:
            picks = self.rng.choice(n, size=self.spec.batch_size, p=self.probs).tolist()
        return [(int(d), self._take(int(d))) for d in picks]

    def next_batch(self, datasets: Sequence) -> Batch:
        if len(datasets) != len(self.spec.sizes):
            raise SamplerError("dataset list does not match the mix specification")
        for ds, size in zip(datasets, self.spec.sizes):
            if len(ds) == 0:
                raise SamplerError("cannot sample from an empty dataset")
            if len(ds) != size:
                raise SamplerError("dataset size changed since the sampler was built")
        picks = self.next_indices()
        return collate([datasets[d][i] for d, i in picks], [d for d, _ in picks])

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "position": list(self.position),
            "cycle": list(self.cycle),
        }

    def load_state_dict(self, state: dict):
        self.rng.bit_generator.state = state["rng"]
        self.position = [int(p) for p in state["position"]]
        self.cycle = [int(c) for c in state["cycle"]]
        self._perms = [self._perm(d, c) for d, c in enumerate(self.cycle)]
