import os

import numpy as np
import pytest
import torch

from jointpt.core import AtomicSystem
from jointpt.ingest import load_dataset
from jointpt.model import ModelConfig

DATA = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")
DATA_FILES = ("lj_a_mini.jsonl", "lj_b_mini.jsonl", "lj_c_mini.jsonl", "periodic_mini.jsonl")


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def data_path(name):
    return os.path.join(DATA, name)


@pytest.fixture(autouse=True)
def _single_thread():
    # bit-exact comparisons assume one intra-op thread
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mini_a():
    return load_dataset(data_path("lj_a_mini.jsonl"))


@pytest.fixture(scope="session")
def mini_c():
    return load_dataset(data_path("lj_c_mini.jsonl"))


@pytest.fixture(scope="session")
def mini_periodic():
    return load_dataset(data_path("periodic_mini.jsonl"))


@pytest.fixture
def tiny_config():
    return ModelConfig(atom_embed_dim=8, edge_embed_dim=8, num_blocks=2, rbf_count=6, rbf_cutoff=3.0, max_neighbors=30)


def random_molecule(rng, n=None, elements=(1, 6, 8), spread=1.6, min_dist=0.8, sid="mol"):
    """Random non-periodic cluster with pairwise distances above ``min_dist``."""
    n = n or int(rng.integers(3, 8))
    pos = []
    while len(pos) < n:
        p = rng.uniform(-spread, spread, 3)
        if all(np.linalg.norm(p - q) >= min_dist for q in pos):
            pos.append(p)
    z = rng.choice(np.asarray(elements), size=n)
    return AtomicSystem(sid, z, np.array(pos))


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


TINY_MODEL = dict(atom_embed_dim=8, edge_embed_dim=8, num_blocks=2, rbf_count=6, rbf_cutoff=3.0, max_neighbors=30)


def run_dict(mode="pretrain", files=("lj_a_mini.jsonl",), **top):
    """Plain-data run config over the bundled mini corpora with a tiny model."""
    datasets = [{"id": f[:-6].replace("_", "-"), "path": data_path(f)} for f in files]
    data = {
        "mode": mode,
        "datasets": datasets,
        "model": dict(TINY_MODEL),
        "schedule": {"base_lr": 1e-3, "warmup": 20.0, "warmup_unit": "steps", "cos_duration": 4.0, "llrd": "none"},
        "mix": {"batch_size": 8},
        "epochs": 2,
    }
    data.update(top)
    return data


def run_config(mode="pretrain", files=("lj_a_mini.jsonl",), overrides=(), **top):
    from jointpt.config import build_config

    return build_config(run_dict(mode, files, **top), overrides)
