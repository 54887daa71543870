"""Compact pair-distance message-passing model with per-dataset prediction heads.

Energies are pooled node MLP outputs, ``E = sum_i MLP(h_i)``; direct forces
sum scalar edge weights times edge unit vectors, ``F_i = sum_j MLP(m_ij) r_ij``
over edges whose destination is ``i``. Messages carry a cosine envelope, so
energies are C1 at the cutoff and gradient forces are smooth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .core import Batch, MAX_Z
from .errors import CapabilityError, ConfigError, EmbeddingError, HeadError
from .graphbuild import BatchedGraph, Graph, merge_graphs

HEAD_KINDS = ("energy", "direct_force", "scalar")
POOLINGS = ("sum", "mean", "max")


@dataclass(frozen=True)
class ModelConfig:
    atom_embed_dim: int = 64
    edge_embed_dim: int = 64
    num_blocks: int = 3
    rbf_count: int = 32
    rbf_cutoff: float = 12.0
    max_neighbors: int = 30
    dropout_p: float = 0.0
    edge_dropout_p: float = 0.0
    second_order: bool = True

    def __post_init__(self):
        for name in ("atom_embed_dim", "edge_embed_dim", "num_blocks", "rbf_count", "max_neighbors"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.rbf_cutoff <= 0:
            raise ConfigError("model.rbf_cutoff must be positive")
        for name in ("dropout_p", "edge_dropout_p"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"model.{name} must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    def architecture(self) -> dict:
        """Fields that determine parameter shapes and the forward function."""
        return {k: v for k, v in asdict(self).items() if k not in ("dropout_p", "edge_dropout_p", "second_order")}


@dataclass(frozen=True)
class HeadSpec:
    dataset_id: str
    kind: str  # energy | direct_force | scalar
    name: str = ""  # scalar target name
    pooling: str = "sum"

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.kind == "scalar" and not self.name:
            raise ConfigError("scalar heads need a target name")

    @property
    def key(self) -> str:
        return f"{self.dataset_id}|{self.kind}|{self.name}"

    def to_json(self) -> dict:
        return asdict(self)


def param_count(config: ModelConfig, heads: Sequence[HeadSpec] = ()) -> int:
    a, e, r = config.atom_embed_dim, config.edge_embed_dim, config.rbf_count
    n = MAX_Z * a + (r * e + e)
    per_block = ((2 * a + r + e) * e + e) + (e * e + e) + (e * a + a) + 2 * (a * a + a)
    n += config.num_blocks * per_block
    for h in heads:
        width = e if h.kind == "direct_force" else a
        n += width * width + width + width + 1
    return n


def _xavier_(weight: torch.Tensor, gen: torch.Generator):
    fan_out, fan_in = weight.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.copy_(torch.rand(weight.shape, generator=gen, dtype=weight.dtype) * 2 * bound - bound)


def _linear(n_in, n_out, gen):
    lin = nn.Linear(n_in, n_out, dtype=torch.float64)
    _xavier_(lin.weight, gen)
    nn.init.zeros_(lin.bias)
    return lin


def dropout(x: torch.Tensor, p: float, gen: Optional[torch.Generator], training: bool) -> torch.Tensor:
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def edge_dropout_mask(num_edges: int, p: float, gen: Optional[torch.Generator]) -> torch.Tensor:
    return torch.rand(num_edges, generator=gen, dtype=torch.float64) >= p


def edge_dropout(x: torch.Tensor, p: float, gen: Optional[torch.Generator] = None, training: bool = True):
    """Zero whole edge rows with probability ``p``; survivors scaled by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    keep = edge_dropout_mask(x.shape[0], p, gen)
    shape = (-1,) + (1,) * (x.dim() - 1)
    return x * keep.to(x.dtype).reshape(shape) / (1.0 - p)


class Block(nn.Module):
    def __init__(self, a, e, r, gen):
        super().__init__()
        self.edge_in = _linear(2 * a + r + e, e, gen)
        self.edge_out = _linear(e, e, gen)
        self.message = _linear(e, a, gen)
        self.atom_in = _linear(a, a, gen)
        self.atom_out = _linear(a, a, gen)


class HeadMLP(nn.Module):
    def __init__(self, width, gen):
        super().__init__()
        self.hidden = _linear(width, width, gen)
        self.out = _linear(width, 1, gen)

    def forward(self, x):
        return ad.matmul(ad.silu(self.hidden(x)), self.out.weight.T).squeeze(-1) + self.out.bias


@dataclass
class ModelInput:
    """Tensors for one collated batch and its merged graph."""

    atomic_numbers: torch.Tensor
    positions: torch.Tensor
    graph: BatchedGraph
    batch_idx: torch.Tensor
    atom_counts: torch.Tensor
    dataset_idx: np.ndarray
    dataset_ids: tuple  # dataset id string per system

    @property
    def num_nodes(self) -> int:
        return int(self.atomic_numbers.shape[0])

    @property
    def num_systems(self) -> int:
        return int(self.atom_counts.shape[0])

    @classmethod
    def from_batch(cls, batch: Batch, graphs: Sequence[Graph], dataset_names: Sequence[str] = ()):
        graph = merge_graphs(graphs, batch.node_offsets)
        names = tuple(dataset_names[int(d)] for d in batch.dataset_idx) if dataset_names else ()
        return cls(
            atomic_numbers=torch.tensor(np.array(batch.atomic_numbers()), dtype=torch.int64),
            positions=torch.tensor(np.array(batch.positions()), dtype=torch.float64),
            graph=graph,
            batch_idx=torch.tensor(np.array(batch.batch_idx), dtype=torch.int64),
            atom_counts=torch.tensor(np.array(batch.atom_counts), dtype=torch.int64),
            dataset_idx=np.asarray(batch.dataset_idx),
            dataset_ids=names,
        )


@dataclass
class Embeddings:
    h: torch.Tensor
    m: torch.Tensor
    edge_src: torch.Tensor
    edge_dst: torch.Tensor
    edge_unit: torch.Tensor
    edge_dist: torch.Tensor
    edge_scale: float
    edge_system: torch.Tensor


class Model(nn.Module):
    def __init__(self, config: ModelConfig, heads: Sequence[HeadSpec] = (), seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(int(seed))
        a, e, r = config.atom_embed_dim, config.edge_embed_dim, config.rbf_count
        self.embedding = nn.Embedding(MAX_Z, a, dtype=torch.float64)
        with torch.no_grad():
            self.embedding.weight.copy_(
                (torch.rand((MAX_Z, a), generator=gen, dtype=torch.float64) * 2 - 1) * math.sqrt(3.0)
            )
        self.edge_embed = _linear(r, e, gen)
        self.blocks = nn.ModuleList(Block(a, e, r, gen) for _ in range(config.num_blocks))
        self.heads = nn.ModuleDict()
        self.head_specs: Dict[str, HeadSpec] = {}
        for spec in heads:
            self.add_head(spec, gen)
        centers = torch.linspace(0.0, config.rbf_cutoff, r, dtype=torch.float64)
        self.register_buffer("rbf_centers", centers, persistent=False)
        self.rbf_width = config.rbf_cutoff / (r - 1) if r > 1 else config.rbf_cutoff

    # -- heads ---------------------------------------------------------------

    def add_head(self, spec: HeadSpec, gen: torch.Generator):
        if spec.key in self.heads:
            raise HeadError(f"duplicate head {spec.key}")
        width = self.config.edge_embed_dim if spec.kind == "direct_force" else self.config.atom_embed_dim
        self.heads[spec.key] = HeadMLP(width, gen)
        self.head_specs[spec.key] = spec

    def head(self, dataset_id: str, kind: str, name: str = "") -> HeadSpec:
        key = f"{dataset_id}|{kind}|{name}"
        if key not in self.head_specs:
            raise HeadError(f"no {kind} head for dataset {dataset_id!r}")
        return self.head_specs[key]

    def backbone_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("heads.")]

    def layer_group(self, param_name: str) -> str:
        if param_name.startswith("heads."):
            return "heads"
        if param_name.startswith("blocks."):
            return f"block_{int(param_name.split('.')[1]) + 1}"
        return "embedding"

    def layer_groups(self) -> List[str]:
        return ["embedding"] + [f"block_{k + 1}" for k in range(self.config.num_blocks)] + ["heads"]

    # -- backbone ------------------------------------------------------------

    def encode(
        self,
        inp: ModelInput,
        training: bool = False,
        generator: Optional[torch.Generator] = None,
        positions: Optional[torch.Tensor] = None,
    ) -> Embeddings:
        cfg = self.config
        g = inp.graph
        if abs(g.cutoff - cfg.rbf_cutoff) > 1e-12:
            raise ConfigError(f"graph cutoff {g.cutoff} != model rbf_cutoff {cfg.rbf_cutoff}")
        pos = inp.positions if positions is None else positions
        src = torch.as_tensor(g.edge_src)
        dst = torch.as_tensor(g.edge_dst)
        offset = torch.as_tensor(g.offset_vec, dtype=torch.float64)
        edge_system = torch.as_tensor(g.edge_system)
        scale = 1.0
        if training and cfg.edge_dropout_p > 0.0:
            keep = edge_dropout_mask(src.shape[0], cfg.edge_dropout_p, generator)
            src, dst, offset, edge_system = src[keep], dst[keep], offset[keep], edge_system[keep]
            scale = 1.0 / (1.0 - cfg.edge_dropout_p)

        vec = ad.add(ad.sub(ad.gather_rows(pos, dst), ad.gather_rows(pos, src)), offset)
        dist = ad.norm_rows(vec)
        unit = vec / dist.unsqueeze(-1)
        rbf = ad.exp(-0.5 * ad.square((dist.unsqueeze(-1) - self.rbf_centers) / self.rbf_width))
        inside = dist < cfg.rbf_cutoff
        env = torch.where(
            inside, 0.5 * (torch.cos(math.pi * dist / cfg.rbf_cutoff) + 1.0), torch.zeros_like(dist)
        )
        edge_weight = (env * scale).unsqueeze(-1)

        n = inp.num_nodes
        h = self.embedding(inp.atomic_numbers - 1)
        m = self.edge_embed(rbf)
        for block in self.blocks:
            x = ad.concat([ad.gather_rows(h, src), ad.gather_rows(h, dst), rbf, m], axis=1)
            m = ad.add(m, block.edge_out(ad.silu(block.edge_in(x))))
            msg = ad.mul(block.message(m), edge_weight)
            agg = ad.scatter_add_rows(msg, dst, n)
            hidden = dropout(ad.silu(block.atom_in(agg)), cfg.dropout_p, generator, training)
            h = ad.add(h, block.atom_out(hidden))
        return Embeddings(h, m, src, dst, unit, dist, scale, edge_system)

    # -- heads ---------------------------------------------------------------

    @staticmethod
    def _pool(values, sys_idx, num_systems, counts, pooling: str):
        if pooling == "sum":
            return ad.scatter_add_rows(values, sys_idx, num_systems)
        if pooling == "mean":
            return ad.scatter_add_rows(values, sys_idx, num_systems) / counts.to(values.dtype).clamp(min=1)
        # systems receiving no values keep 0
        out = values.new_zeros(num_systems)
        return out.scatter_reduce(0, sys_idx, values, reduce="amax", include_self=False)

    def predict_energy(self, emb: Embeddings, inp: ModelInput, head: HeadSpec) -> torch.Tensor:
        """Per-system pooled node-MLP output in normalized units, shape (B,)."""
        if head.key not in self.heads or head.kind == "direct_force":
            raise HeadError(f"no energy/scalar head {head.key}")
        return self._pool(self.heads[head.key](emb.h), inp.batch_idx, inp.num_systems, inp.atom_counts, head.pooling)

    def predict_forces_direct(self, emb: Embeddings, inp: ModelInput, head: HeadSpec) -> torch.Tensor:
        if head.key not in self.heads or head.kind != "direct_force":
            raise HeadError(f"no direct-force head {head.key}")
        w = self.heads[head.key](emb.m) * emb.edge_scale
        return ad.scatter_add_rows(ad.mul(w.unsqueeze(-1), emb.edge_unit), emb.edge_dst, inp.num_nodes)

    def predict_forces_gradient(
        self,
        inp: ModelInput,
        head: HeadSpec,
        training: bool = False,
        generator: Optional[torch.Generator] = None,
    ):
        """Energy and -dE/dR (normalized energy units per Å), kept differentiable."""
        if not self.config.second_order:
            raise CapabilityError("gradient forces need second-order autodiff (model.second_order)")
        with ad.Tape():
            pos = inp.positions.detach().clone().requires_grad_(True)
            emb = self.encode(inp, training, generator, positions=pos)
            energy = self.predict_energy(emb, inp, head)
            forces = -ad.grad_as_graph(energy.sum(), pos)
        return energy, forces, emb

    # -- multi-dataset helpers ----------------------------------------------

    def predict_multi(
        self,
        inp: ModelInput,
        training: bool = False,
        generator: Optional[torch.Generator] = None,
        force_mode: str = "direct",
        scalar_targets: Sequence[str] = (),
    ):
        """Route every system through the heads of its own dataset.

        Returns ``(energy, forces, scalars, embeddings)``: energy (B,), forces
        (N, 3), scalars name -> (B,). Systems whose dataset lacks a head get 0.
        """
        if force_mode not in ("direct", "gradient", "none"):
            raise ConfigError(f"unknown force mode {force_mode!r}")
        pos = inp.positions
        if force_mode == "gradient":
            if not self.config.second_order:
                raise CapabilityError("gradient forces need second-order autodiff")
            pos = inp.positions.detach().clone().requires_grad_(True)
        emb = self.encode(inp, training, generator, positions=pos)
        b, n = inp.num_systems, inp.num_nodes
        sys_ds = np.array(inp.dataset_ids)
        node_ds = sys_ds[inp.batch_idx.numpy()]
        edge_ds = sys_ds[emb.edge_system.numpy()]
        energy = torch.zeros(b, dtype=torch.float64)
        forces = torch.zeros((n, 3), dtype=torch.float64)
        scalars = {name: torch.zeros(b, dtype=torch.float64) for name in scalar_targets}

        def pooled_head(key, node_idx):
            spec = self.head_specs[key]
            values = self.heads[key](ad.gather_rows(emb.h, node_idx))
            return self._pool(values, inp.batch_idx[node_idx], b, inp.atom_counts, spec.pooling)

        for d in sorted(set(inp.dataset_ids)):
            node_idx = torch.as_tensor(np.flatnonzero(node_ds == d))
            key = f"{d}|energy|"
            if key in self.heads:
                energy = ad.add(energy, pooled_head(key, node_idx))
            for name in scalar_targets:
                key = f"{d}|scalar|{name}"
                if key in self.heads:
                    scalars[name] = ad.add(scalars[name], pooled_head(key, node_idx))
            key = f"{d}|direct_force|"
            if force_mode == "direct" and key in self.heads:
                edge_idx = torch.as_tensor(np.flatnonzero(edge_ds == d))
                w = self.heads[key](ad.gather_rows(emb.m, edge_idx)) * emb.edge_scale
                contrib = ad.mul(w.unsqueeze(-1), ad.gather_rows(emb.edge_unit, edge_idx))
                forces = ad.add(forces, ad.scatter_add_rows(contrib, emb.edge_dst[edge_idx], n))
        if force_mode == "gradient":
            forces = -ad.grad_as_graph(energy.sum(), pos)
        return energy, forces, scalars, emb


def init_model(config: ModelConfig, heads: Sequence[HeadSpec] = (), seed: int = 0) -> Model:
    return Model(config, heads, seed)


def swap_heads(model: Model, new_heads: Sequence[HeadSpec], seed: int) -> Model:
    """Drop every head and attach freshly initialized ones; backbone untouched."""
    gen = torch.Generator().manual_seed(int(seed))
    for key in list(model.heads.keys()):
        del model.heads[key]
    model.head_specs.clear()
    for spec in new_heads:
        model.add_head(spec, gen)
    return model


def mean_embeddings(emb: Embeddings, inp: ModelInput):
    """Per-system averages of node and edge embeddings."""
    b = inp.num_systems
    counts = torch.bincount(emb.edge_system, minlength=b) if emb.edge_system.numel() else torch.zeros(b, dtype=torch.int64)
    empty = (counts == 0).nonzero().flatten().tolist()
    if empty:
        raise EmbeddingError(f"systems {empty} have no edges; edge mean undefined")
    h_mean = ad.scatter_add_rows(emb.h, inp.batch_idx, b) / inp.atom_counts.to(emb.h.dtype).unsqueeze(-1)
    m_mean = ad.scatter_add_rows(emb.m, emb.edge_system, b) / counts.to(emb.m.dtype).unsqueeze(-1)
    return h_mean, m_mean


def backbone_checksum(model: Model) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name, p in model.backbone_parameters():
        digest.update(name.encode())
        digest.update(p.detach().numpy().tobytes())
    return digest.hexdigest()
