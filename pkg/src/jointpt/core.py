"""Domain types shared by every other module.

Positions and labels are stored as read-only float64 arrays; element identity
is the atomic number alone.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidBatch, InvalidSystem

MAX_Z = 118

ELEMENT_SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I "
    "Xe Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt "
    "Au Hg Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr "
    "Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl Mc Lv Ts Og"
).split()


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class AtomicSystem:
    """One structure: atomic numbers, Cartesian positions (Å) and labels.

    ``cell`` holds lattice vectors as rows and must be given exactly when at
    least one ``pbc`` flag is set. ``energy`` is in eV, ``forces`` in eV/Å.
    """

    id: str
    atomic_numbers: np.ndarray
    positions: np.ndarray
    cell: Optional[np.ndarray] = None
    pbc: tuple = (False, False, False)
    energy: Optional[float] = None
    forces: Optional[np.ndarray] = None
    scalars: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        z = np.asarray(self.atomic_numbers)
        if z.ndim != 1 or z.size < 1:
            raise InvalidSystem(f"{self.id}: atomic_numbers must be a non-empty 1-d sequence")
        if not np.issubdtype(z.dtype, np.integer):
            if not np.all(np.equal(np.mod(z, 1), 0)):
                raise InvalidSystem(f"{self.id}: atomic numbers must be integers")
        z = _frozen(z, np.int64)
        if z.min() < 1 or z.max() > MAX_Z:
            raise InvalidSystem(f"{self.id}: atomic numbers must lie in [1, {MAX_Z}]")
        n = z.size

        pos = _frozen(self.positions)
        if pos.shape != (n, 3):
            raise InvalidSystem(f"{self.id}: positions shape {pos.shape} != ({n}, 3)")
        if not np.all(np.isfinite(pos)):
            raise InvalidSystem(f"{self.id}: non-finite positions")

        pbc = tuple(bool(b) for b in self.pbc)
        if len(pbc) != 3:
            raise InvalidSystem(f"{self.id}: pbc needs three flags")
        cell = None
        if self.cell is not None:
            cell = _frozen(self.cell)
            if cell.shape != (3, 3) or not np.all(np.isfinite(cell)):
                raise InvalidSystem(f"{self.id}: cell must be a finite 3x3 matrix")
            if abs(np.linalg.det(cell)) < 1e-12:
                raise InvalidSystem(f"{self.id}: cell rows are linearly dependent")
        if any(pbc) != (cell is not None):
            raise InvalidSystem(f"{self.id}: cell must be present iff any pbc flag is set")

        energy = None
        if self.energy is not None:
            energy = float(self.energy)
            if not np.isfinite(energy):
                raise InvalidSystem(f"{self.id}: non-finite energy")

        forces = None
        if self.forces is not None:
            forces = _frozen(self.forces)
            if forces.shape != (n, 3):
                raise InvalidSystem(f"{self.id}: forces shape {forces.shape} != ({n}, 3)")
            if not np.all(np.isfinite(forces)):
                raise InvalidSystem(f"{self.id}: non-finite forces")

        scalars = {}
        for k, v in dict(self.scalars).items():
            v = float(v)
            if not np.isfinite(v):
                raise InvalidSystem(f"{self.id}: non-finite scalar {k!r}")
            scalars[str(k)] = v

        object.__setattr__(self, "atomic_numbers", z)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "pbc", pbc)
        object.__setattr__(self, "energy", energy)
        object.__setattr__(self, "forces", forces)
        object.__setattr__(self, "scalars", MappingProxyType(scalars))

    @property
    def num_atoms(self) -> int:
        return int(self.atomic_numbers.size)

    @property
    def periodic(self) -> bool:
        return any(self.pbc)

    def replace(self, **changes) -> "AtomicSystem":
        kw = dict(
            id=self.id,
            atomic_numbers=self.atomic_numbers,
            positions=self.positions,
            cell=self.cell,
            pbc=self.pbc,
            energy=self.energy,
            forces=self.forces,
            scalars=dict(self.scalars),
        )
        kw.update(changes)
        return AtomicSystem(**kw)

    def equals(self, other: "AtomicSystem") -> bool:
        """Bit-exact comparison of all fields."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.id == other.id
            and same(self.atomic_numbers, other.atomic_numbers)
            and same(self.positions, other.positions)
            and same(self.cell, other.cell)
            and self.pbc == other.pbc
            and (self.energy == other.energy or (self.energy is None and other.energy is None))
            and same(self.forces, other.forces)
            and dict(self.scalars) == dict(other.scalars)
        )


@dataclass(frozen=True)
class DatasetMeta:
    dataset_id: str
    size: int = 0
    mean_atoms: float = 0.0
    ref_coeffs: Mapping[int, float] = field(default_factory=dict)
    energy_mean: float = 0.0
    energy_std: float = 1.0
    force_rms: float = 1.0
    lambda_E: float = 1.0
    lambda_F: float = 1.0
    energy_margin: Optional[float] = None
    force_margin: Optional[float] = None


@dataclass(frozen=True)
class CompositionVector:
    """Element multiset of a system, hashable so it can key sets and dicts."""

    items: tuple  # sorted ((z, count), ...)

    @property
    def counts(self) -> dict:
        return dict(self.items)

    @property
    def num_atoms(self) -> int:
        return sum(c for _, c in self.items)

    def formula(self) -> str:
        return "".join(
            f"{ELEMENT_SYMBOLS[z - 1]}{c if c > 1 else ''}" for z, c in self.items
        )

    def __str__(self):
        return self.formula()


def composition_vector(system: AtomicSystem) -> CompositionVector:
    counts = Counter(int(z) for z in system.atomic_numbers)
    return CompositionVector(tuple(sorted(counts.items())))


@dataclass(frozen=True, eq=False)
class Batch:
    systems: tuple
    batch_idx: np.ndarray
    dataset_idx: np.ndarray
    atom_counts: np.ndarray

    @property
    def num_systems(self) -> int:
        return len(self.systems)

    @property
    def num_nodes(self) -> int:
        return int(self.batch_idx.size)

    @property
    def node_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.atom_counts)[:-1]]).astype(np.int64)

    def atomic_numbers(self) -> np.ndarray:
        return np.concatenate([s.atomic_numbers for s in self.systems])

    def positions(self) -> np.ndarray:
        return np.concatenate([s.positions for s in self.systems])


def collate(systems: Sequence[AtomicSystem], dataset_ids: Sequence[int]) -> Batch:
    systems = tuple(systems)
    if not systems:
        raise InvalidBatch("cannot collate an empty list of systems")
    dataset_ids = np.asarray(dataset_ids, dtype=np.int64)
    if dataset_ids.shape != (len(systems),):
        raise InvalidBatch(
            f"need one dataset index per system ({len(systems)}), got shape {dataset_ids.shape}"
        )
    counts = np.array([s.num_atoms for s in systems], dtype=np.int64)
    batch_idx = np.repeat(np.arange(len(systems), dtype=np.int64), counts)
    for arr in (batch_idx, dataset_ids, counts):
        arr.flags.writeable = False
    return Batch(systems, batch_idx, dataset_ids, counts)


def split_batch(batch: Batch, positions: Optional[np.ndarray] = None) -> list:
    """Inverse of :func:`collate`, rebuilt from the concatenated node arrays.

    ``positions`` optionally substitutes new concatenated coordinates.
    """
    z = batch.atomic_numbers()
    pos = batch.positions() if positions is None else np.asarray(positions, dtype=np.float64)
    if pos.shape != (batch.num_nodes, 3):
        raise InvalidBatch(f"positions shape {pos.shape} != ({batch.num_nodes}, 3)")
    out = []
    for s, off, n in zip(batch.systems, batch.node_offsets, batch.atom_counts):
        sl = slice(int(off), int(off + n))
        out.append(s.replace(atomic_numbers=z[sl], positions=pos[sl]))
    return out
