"""Dataset files, splits, composition overlap and synthetic Lennard-Jones corpora."""

from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from .core import AtomicSystem, CompositionVector, DatasetMeta, composition_vector
from .errors import GenerationError, InvalidSystem, ParseError, SplitError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_RECORD_KEYS = {"id", "numbers", "positions", "cell", "pbc", "energy", "forces", "scalars"}


@dataclass(frozen=True)
class LabelSchema:
    energy: bool = True
    forces: bool = True
    scalars: tuple = ()

    def to_json(self) -> dict:
        return {"energy": self.energy, "forces": self.forces, "scalars": list(self.scalars)}

    @classmethod
    def from_json(cls, obj) -> "LabelSchema":
        if not isinstance(obj, dict) or set(obj) - {"energy", "forces", "scalars"}:
            raise ValueError(f"bad label_schema {obj!r}")
        return cls(
            energy=bool(obj.get("energy", False)),
            forces=bool(obj.get("forces", False)),
            scalars=tuple(str(s) for s in obj.get("scalars", ())),
        )

    @classmethod
    def infer(cls, systems: Sequence[AtomicSystem]) -> "LabelSchema":
        if not systems:
            return cls()
        s0 = systems[0]
        return cls(s0.energy is not None, s0.forces is not None, tuple(sorted(s0.scalars)))

    def check(self, system: AtomicSystem) -> Optional[str]:
        if self.energy != (system.energy is not None):
            return "energy label does not match schema"
        if self.forces != (system.forces is not None):
            return "forces label does not match schema"
        if set(self.scalars) != set(system.scalars):
            return f"scalar labels {sorted(system.scalars)} != schema {list(self.scalars)}"
        return None


@dataclass(frozen=True, eq=False)
class Dataset:
    meta: DatasetMeta
    systems: tuple
    label_schema: LabelSchema = field(default_factory=LabelSchema)

    def __post_init__(self):
        object.__setattr__(self, "systems", tuple(self.systems))
        if self.meta.size != len(self.systems):
            object.__setattr__(self, "meta", replace(self.meta, size=len(self.systems)))

    @classmethod
    def from_systems(cls, dataset_id: str, systems: Sequence[AtomicSystem], schema=None):
        systems = tuple(systems)
        schema = schema or LabelSchema.infer(systems)
        return cls(_basic_meta(dataset_id, systems), systems, schema)

    @property
    def dataset_id(self) -> str:
        return self.meta.dataset_id

    def __len__(self):
        return len(self.systems)

    def __iter__(self):
        return iter(self.systems)

    def __getitem__(self, i):
        return self.systems[i]

    def subset(self, indices: Iterable[int], dataset_id: Optional[str] = None) -> "Dataset":
        systems = tuple(self.systems[int(i)] for i in indices)
        return Dataset(
            _basic_meta(dataset_id or self.dataset_id, systems), systems, self.label_schema
        )


def _basic_meta(dataset_id, systems) -> DatasetMeta:
    mean_atoms = float(np.mean([s.num_atoms for s in systems])) if systems else 0.0
    return DatasetMeta(dataset_id=dataset_id, size=len(systems), mean_atoms=mean_atoms)


# -- file format -------------------------------------------------------------


def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be written")
    return format(float(x), ".17g")


def _fmt_vec(v) -> str:
    return "[" + ",".join(_fmt(x) for x in v) + "]"


def _fmt_mat(m) -> str:
    return "[" + ",".join(_fmt_vec(row) for row in m) + "]"


def format_record(system: AtomicSystem) -> str:
    parts = [
        f'"id":{json.dumps(system.id)}',
        '"numbers":[' + ",".join(str(int(z)) for z in system.atomic_numbers) + "]",
        f'"positions":{_fmt_mat(system.positions)}',
    ]
    if system.cell is not None:
        parts.append(f'"cell":{_fmt_mat(system.cell)}')
        parts.append('"pbc":[' + ",".join("true" if b else "false" for b in system.pbc) + "]")
    if system.energy is not None:
        parts.append(f'"energy":{_fmt(system.energy)}')
    if system.forces is not None:
        parts.append(f'"forces":{_fmt_mat(system.forces)}')
    if system.scalars:
        inner = ",".join(f"{json.dumps(k)}:{_fmt(v)}" for k, v in sorted(system.scalars.items()))
        parts.append('"scalars":{' + inner + "}")
    return "{" + ",".join(parts) + "}"


def write_dataset(dataset: Dataset, stream: Union[IO[str], IO[bytes], str]) -> None:
    """Write ``dataset`` as JSON Lines (header line first)."""
    header = {
        "format_version": FORMAT_VERSION,
        "dataset_id": dataset.dataset_id,
        "label_schema": dataset.label_schema.to_json(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(format_record(s) for s in dataset.systems)
    text = "\n".join(lines) + "\n"
    if isinstance(stream, str):
        with open(stream, "w", encoding="utf-8") as fh:
            fh.write(text)
    elif isinstance(stream, io.TextIOBase):
        stream.write(text)
    else:
        stream.write(text.encode("utf-8"))


def dataset_to_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    write_dataset(dataset, buf)
    return buf.getvalue()


def _as_matrix(value, rows, lineno, name):
    arr = np.asarray(value, dtype=np.float64)
    if rows is not None and arr.shape != (rows, 3):
        raise ParseError(f"{name} has shape {arr.shape}, expected ({rows}, 3)", lineno)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ParseError(f"{name} must be a list of 3-vectors", lineno)
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"non-finite number in {name}", lineno)
    return arr


def _reject_constant(token):
    raise ValueError(f"non-finite literal {token}")


def parse_dataset(stream: Union[IO[bytes], IO[str], bytes, str]) -> Dataset:
    """Parse a JSON Lines dataset.

    ``stream`` may be a binary/text file object, raw bytes, or a path.
    Errors carry the 1-based line number of the offending record.
    """
    if isinstance(stream, (bytes, bytearray)):
        text = bytes(stream).decode("utf-8")
    elif isinstance(stream, str):
        with open(stream, "rb") as fh:
            text = fh.read().decode("utf-8")
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, (bytes, bytearray)) else raw

    lines = text.splitlines()
    if not lines:
        raise ParseError("empty stream: missing header", 1)
    try:
        header = json.loads(lines[0], parse_constant=_reject_constant)
    except ValueError as exc:
        raise ParseError(f"bad header: {exc}", 1) from None
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported header {header!r}", 1)
    try:
        dataset_id = str(header["dataset_id"])
        schema = LabelSchema.from_json(header["label_schema"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"bad header: {exc}", 1) from None

    systems = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line, parse_constant=_reject_constant)
        except ValueError as exc:
            raise ParseError(f"invalid JSON: {exc}", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("record must be an object", lineno)
        unknown = set(rec) - _RECORD_KEYS
        if unknown:
            raise ParseError(f"unknown keys {sorted(unknown)}", lineno)
        try:
            numbers = rec["numbers"]
            n = len(numbers)
            positions = _as_matrix(rec["positions"], n, lineno, "positions")
            cell = rec.get("cell")
            if cell is not None:
                cell = _as_matrix(cell, 3, lineno, "cell")
            pbc = tuple(rec.get("pbc", (cell is not None,) * 3))
            forces = rec.get("forces")
            if forces is not None:
                forces = _as_matrix(forces, n, lineno, "forces")
            energy = rec.get("energy")
            if energy is not None and not isinstance(energy, (int, float)):
                raise ParseError("energy must be a number", lineno)
            system = AtomicSystem(
                id=str(rec["id"]),
                atomic_numbers=numbers,
                positions=positions,
                cell=cell,
                pbc=pbc,
                energy=energy,
                forces=forces,
                scalars=rec.get("scalars", {}),
            )
        except KeyError as exc:
            raise ParseError(f"missing field {exc}", lineno) from None
        except (InvalidSystem, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(str(exc), lineno) from None
        problem = schema.check(system)
        if problem:
            raise ParseError(f"schema mismatch: {problem}", lineno)
        systems.append(system)

    ids = [s.id for s in systems]
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate system ids")
    return Dataset(_basic_meta(dataset_id, systems), tuple(systems), schema)


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh)


def filter_min_atoms(dataset: Dataset, min_atoms: int) -> Dataset:
    keep = [i for i, s in enumerate(dataset.systems) if s.num_atoms >= min_atoms]
    return dataset.subset(keep)


# -- splits and overlap ------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    mode: str = "random"  # or "composition_disjoint"

    def __post_init__(self):
        fr = tuple(float(f) for f in self.fractions)
        if len(fr) != 3 or any(not 0.0 < f < 1.0 for f in fr):
            raise SplitError(f"split fractions must be three values in (0, 1), got {fr}")
        if abs(sum(fr) - 1.0) > 1e-12:
            raise SplitError(f"split fractions sum to {sum(fr)!r}, not 1")
        if self.mode not in ("random", "composition_disjoint"):
            raise SplitError(f"unknown split mode {self.mode!r}")
        object.__setattr__(self, "fractions", fr)


def _split_targets(n, fractions):
    n_train = math.floor(fractions[0] * n)
    n_val = math.floor(fractions[1] * n)
    return n_train, n_val


def split(dataset: Dataset, spec: SplitSpec):
    """Partition into (train, val, test); deterministic for a fixed seed."""
    n = len(dataset)
    if n == 0:
        raise SplitError("cannot split an empty dataset")
    rng = np.random.default_rng(spec.seed)
    n_train, n_val = _split_targets(n, spec.fractions)
    did = dataset.dataset_id

    if spec.mode == "random":
        order = rng.permutation(n)
        parts = [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]
    else:
        groups = {}
        for i, s in enumerate(dataset.systems):
            groups.setdefault(composition_vector(s), []).append(i)
        keys = sorted(groups, key=lambda c: c.items)
        if len(keys) < 3:
            raise SplitError(
                f"composition-disjoint split needs >= 3 distinct compositions, found {len(keys)}"
            )
        keys = [keys[i] for i in rng.permutation(len(keys))]
        assign = [[], [], []]
        sizes = [0, 0, 0]
        for key in keys:
            if sizes[0] < n_train:
                k = 0
            elif sizes[1] < n_val:
                k = 1
            else:
                k = 2
            assign[k].append(key)
            sizes[k] += len(groups[key])
        # every partition needs at least one group
        for empty in (2, 1, 0):
            if not assign[empty]:
                donor = max(range(3), key=lambda k: len(assign[k]))
                if len(assign[donor]) < 2:
                    raise SplitError("too few distinct compositions for a disjoint split")
                assign[empty].append(assign[donor].pop())
        parts = [sorted(i for key in part for i in groups[key]) for part in assign]

    return tuple(dataset.subset(p, did) for p in parts)


def overlap_partition(probe: Dataset, reference: Dataset):
    """Split ``probe`` by whether each system's composition occurs in ``reference``."""
    seen = {composition_vector(s) for s in reference.systems}
    hit, miss = [], []
    for i, s in enumerate(probe.systems):
        (hit if composition_vector(s) in seen else miss).append(i)
    return probe.subset(hit), probe.subset(miss)


# -- synthetic Lennard-Jones domains ----------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for a synthetic corpus under a force-shifted Lennard-Jones potential.

    ``element_sigma`` / ``element_epsilon`` scale the pair parameters per element
    (arithmetic mean for sigma, geometric mean for epsilon). ``atom_energies``
    adds a constant per-element offset, standing in for a DFT reference level.
    """

    name: str
    elements: tuple = (1,)
    n_min: int = 4
    n_max: int = 12
    box: float = 6.0
    count: int = 100
    epsilon: float = 1.0
    sigma: float = 1.0
    cutoff: float = 3.0
    element_sigma: dict = field(default_factory=dict)
    element_epsilon: dict = field(default_factory=dict)
    atom_energies: dict = field(default_factory=dict)
    min_dist_factor: float = 0.5
    periodic: bool = False
    scalar_targets: tuple = ()  # any of "atom_count_h", "mean_pair_distance"

    def pair_params(self, z: np.ndarray):
        s = np.array([self.element_sigma.get(int(a), 1.0) for a in z])
        e = np.array([self.element_epsilon.get(int(a), 1.0) for a in z])
        sig = self.sigma * 0.5 * (s[:, None] + s[None, :])
        eps = self.epsilon * np.sqrt(e[:, None] * e[None, :])
        return sig, eps


def lj_pair(r, epsilon, sigma, cutoff):
    """Force-shifted LJ pair energy and dV/dr; both vanish at the cutoff."""
    r = np.asarray(r, dtype=np.float64)

    def v(x):
        sr6 = (sigma / x) ** 6
        return 4.0 * epsilon * (sr6 * sr6 - sr6)

    def dv(x):
        sr6 = (sigma / x) ** 6
        return 4.0 * epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / x

    inside = r < cutoff
    rs = np.where(inside, r, cutoff)
    energy = v(rs) - v(cutoff) - (rs - cutoff) * dv(cutoff)
    deriv = dv(rs) - dv(cutoff)
    return np.where(inside, energy, 0.0), np.where(inside, deriv, 0.0)


def lj_energy_forces(spec: DomainSpec, z, positions, cell=None):
    """Analytic energy (eV) and forces (eV/Å) of one configuration."""
    from .graphbuild import build_radius_graph

    z = np.asarray(z)
    positions = np.asarray(positions, dtype=np.float64)
    system = AtomicSystem(
        "tmp", z, positions, cell=cell, pbc=(cell is not None,) * 3
    )
    energy = float(sum(spec.atom_energies.get(int(a), 0.0) for a in z))
    forces = np.zeros_like(positions)
    if system.num_atoms < 2 and cell is None:
        return energy, forces
    g = build_radius_graph(system, spec.cutoff, max_neighbors=None)
    sig, eps = spec.pair_params(z)
    e_pair, de = lj_pair(g.edge_dist, eps[g.edge_src, g.edge_dst], sig[g.edge_src, g.edge_dst], spec.cutoff)
    energy += 0.5 * float(np.sum(e_pair))
    # -dV/dR_src = V'(r) * (R_dst + shift - R_src) / r
    np.add.at(forces, g.edge_src, de[:, None] * g.edge_unit)
    return energy, forces


def _scalar_labels(spec, z, positions):
    out = {}
    for name in spec.scalar_targets:
        if name == "atom_count_h":
            out[name] = 2.0 * float(np.sum(z == 1))
        elif name == "mean_pair_distance":
            d = np.linalg.norm(positions[:, None] - positions[None, :], axis=-1)
            iu = np.triu_indices(len(z), 1)
            out[name] = float(d[iu].mean()) if iu[0].size else 0.0
        else:
            raise GenerationError(f"unknown synthetic scalar target {name!r}")
    return out


def generate_synthetic(spec: DomainSpec, seed: int) -> Dataset:
    """Generate ``spec.count`` random configurations with exact LJ labels."""
    if spec.n_min < 1 or spec.n_max < spec.n_min:
        raise GenerationError(f"bad size range [{spec.n_min}, {spec.n_max}]")
    rng = np.random.default_rng(seed)
    cell = np.eye(3) * spec.box if spec.periodic else None
    systems = []
    for k in range(spec.count):
        n = int(rng.integers(spec.n_min, spec.n_max + 1))
        z = rng.choice(np.asarray(spec.elements, dtype=np.int64), size=n)
        sig, _ = spec.pair_params(z)
        pos = np.zeros((n, 3))
        for i in range(n):
            for _attempt in range(1000):
                trial = rng.uniform(0.0, spec.box, size=3)
                if i == 0:
                    break
                delta = pos[:i] - trial
                if spec.periodic:
                    delta -= spec.box * np.round(delta / spec.box)
                dist = np.linalg.norm(delta, axis=1)
                if np.all(dist >= spec.min_dist_factor * sig[i, :i]):
                    break
            else:
                raise GenerationError(
                    f"{spec.name}: could not place atom {i} of system {k} after 1000 attempts"
                )
            pos[i] = trial
        energy, forces = lj_energy_forces(spec, z, pos, cell)
        systems.append(
            AtomicSystem(
                id=f"{spec.name}-{k:06d}",
                atomic_numbers=z,
                positions=pos,
                cell=cell,
                pbc=(spec.periodic,) * 3,
                energy=energy,
                forces=forces,
                scalars=_scalar_labels(spec, z, pos),
            )
        )
    schema = LabelSchema(True, True, tuple(sorted(spec.scalar_targets)))
    return Dataset(_basic_meta(spec.name, systems), tuple(systems), schema)


def lj_minimum_distance(epsilon: float, sigma: float, cutoff: float) -> float:
    """Separation where the force-shifted pair force vanishes."""
    from scipy.optimize import brentq

    return brentq(lambda r: lj_pair(r, epsilon, sigma, cutoff)[1], 0.9 * sigma, cutoff * (1 - 1e-9))


# Bundled domains: shared element set, different well depths and size ranges.
SYNTHETIC_DOMAINS = {
    "lj-a": DomainSpec(
        name="lj-a", elements=(1, 6), n_min=4, n_max=10, box=3.0, count=5000,
        epsilon=1.0, sigma=1.0, cutoff=3.0,
        element_sigma={1: 0.9, 6: 1.1}, element_epsilon={1: 0.8, 6: 1.2},
        atom_energies={1: -0.5, 6: -2.0}, min_dist_factor=0.95,
    ),
    "lj-b": DomainSpec(
        name="lj-b", elements=(6, 8), n_min=6, n_max=14, box=3.4, count=5000,
        epsilon=2.0, sigma=1.0, cutoff=3.0,
        element_sigma={6: 1.1, 8: 1.0}, element_epsilon={6: 1.2, 8: 1.0},
        atom_energies={6: -2.0, 8: -3.0}, min_dist_factor=0.95,
    ),
    "lj-c": DomainSpec(
        name="lj-c", elements=(1, 6, 8), n_min=5, n_max=12, box=3.2, count=1000,
        epsilon=1.5, sigma=1.0, cutoff=3.0,
        element_sigma={1: 0.9, 6: 1.1, 8: 1.0}, element_epsilon={1: 0.8, 6: 1.2, 8: 1.0},
        atom_energies={1: -0.5, 6: -2.0, 8: -3.0}, min_dist_factor=0.95,
        scalar_targets=("atom_count_h", "mean_pair_distance"),
    ),
}


def synthetic_domain(name: str, count: int = 0) -> DomainSpec:
    if name not in SYNTHETIC_DOMAINS:
        raise GenerationError(f"unknown synthetic domain {name!r}; known: {sorted(SYNTHETIC_DOMAINS)}")
    spec = SYNTHETIC_DOMAINS[name]
    return replace(spec, count=count) if count else spec
