import numpy as np
import pytest
import torch

from jointpt import autodiff as ad
from jointpt.core import AtomicSystem, collate
from jointpt.errors import CapabilityError, ConfigError, EmbeddingError, HeadError
from jointpt.graphbuild import build_radius_graph
from jointpt.model import (
    HeadSpec,
    Model,
    ModelConfig,
    ModelInput,
    backbone_checksum,
    edge_dropout,
    init_model,
    mean_embeddings,
    param_count,
    swap_heads,
)

from conftest import random_molecule, random_rotation

E = HeadSpec("a", "energy")
F = HeadSpec("a", "direct_force")


def make_input(systems, cutoff=3.0, names=("a",), ds=None, max_neighbors=30):
    ds = [0] * len(systems) if ds is None else ds
    graphs = [build_radius_graph(s, cutoff, max_neighbors) for s in systems]
    return ModelInput.from_batch(collate(systems, ds), graphs, names)


def energy_of(model, inp, head=E):
    with torch.no_grad():
        return model.predict_energy(model.encode(inp), inp, head)


@pytest.fixture
def model(tiny_config):
    return Model(tiny_config, [E, F], seed=3)


def test_init_determinism(tiny_config):
    a, b, c = Model(tiny_config, [E], 1), Model(tiny_config, [E], 1), Model(tiny_config, [E], 2)
    for (n, p), (_, q), (_, r) in zip(a.named_parameters(), b.named_parameters(), c.named_parameters()):
        assert torch.equal(p, q)
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_param_count(tiny_config):
    heads = [E, F, HeadSpec("a", "scalar", "gap")]
    m = init_model(tiny_config, heads, 0)
    assert sum(p.numel() for p in m.parameters()) == param_count(tiny_config, heads)
    cfg = ModelConfig(atom_embed_dim=5, edge_embed_dim=7, num_blocks=4, rbf_count=3, rbf_cutoff=2.0)
    assert sum(p.numel() for p in Model(cfg, [E, F]).parameters()) == param_count(cfg, [E, F])


def test_translation_rotation_permutation(model, rng):
    s = random_molecule(rng, n=7)
    inp = make_input([s])
    with torch.no_grad():
        emb = model.encode(inp)
    e0 = float(model.predict_energy(emb, inp, E)[0].detach())

    moved = make_input([s.replace(positions=s.positions + [3.3, -1.2, 7.0])])
    with torch.no_grad():
        h1 = model.encode(moved).h
    assert torch.max(torch.abs(h1 - emb.h)) < 1e-12
    assert abs(float(energy_of(model, moved)[0]) - e0) < 1e-12

    rot = random_rotation(rng)
    rotated = make_input([s.replace(positions=s.positions @ rot.T)])
    with torch.no_grad():
        h2 = model.encode(rotated).h
    assert torch.max(torch.abs(h2 - emb.h)) < 1e-10
    assert abs(float(energy_of(model, rotated)[0]) - e0) < 1e-10

    perm = rng.permutation(s.num_atoms)
    permuted = make_input([s.replace(atomic_numbers=s.atomic_numbers[perm], positions=s.positions[perm])])
    with torch.no_grad():
        h3 = model.encode(permuted).h
    assert torch.max(torch.abs(h3 - emb.h[perm])) < 1e-12
    assert abs(float(energy_of(model, permuted)[0]) - e0) < 1e-12


def test_zero_final_layer_pooling(tiny_config, rng):
    heads = [E, HeadSpec("a", "scalar", "m", "mean")]
    m = Model(tiny_config, heads, 0)
    for spec in heads:
        with torch.no_grad():
            m.heads[spec.key].out.weight.zero_()
            m.heads[spec.key].out.bias.fill_(0.25)
    s = random_molecule(rng, n=5)
    inp = make_input([s])
    with torch.no_grad():
        emb = m.encode(inp)
        assert float(m.predict_energy(emb, inp, heads[0])[0]) == pytest.approx(0.25 * 5, abs=1e-15)
        assert float(m.predict_energy(emb, inp, heads[1])[0]) == pytest.approx(0.25, abs=1e-15)


def test_extensive_copies(model, rng):
    s = random_molecule(rng, n=5)
    far = s.positions + [50.0, 0, 0]
    pair = AtomicSystem("two", np.concatenate([s.atomic_numbers] * 2), np.concatenate([s.positions, far]))
    e1 = float(energy_of(model, make_input([s]))[0])
    e2 = float(energy_of(model, make_input([pair]))[0])
    assert abs(e2 - 2 * e1) < 1e-12


def test_mean_sum_ratio(tiny_config, rng):
    heads = [E, HeadSpec("a", "scalar", "x", "mean")]
    m = Model(tiny_config, heads, 0)
    with torch.no_grad():
        m.heads[heads[1].key].load_state_dict(m.heads[E.key].state_dict())
    s = random_molecule(rng, n=6, elements=(6,))
    inp = make_input([s])
    with torch.no_grad():
        emb = m.encode(inp)
        total = m.predict_energy(emb, inp, heads[0])
        mean = m.predict_energy(emb, inp, heads[1])
    assert abs(float(total[0]) - 6 * float(mean[0])) < 1e-12


def test_unknown_head(model, rng):
    inp = make_input([random_molecule(rng)])
    emb = model.encode(inp)
    with pytest.raises(HeadError):
        model.predict_energy(emb, inp, HeadSpec("b", "energy"))
    with pytest.raises(HeadError):
        model.predict_forces_direct(emb, inp, E)
    with pytest.raises(HeadError):
        model.head("b", "energy")


def test_direct_forces_equivariant(model, rng):
    s = random_molecule(rng, n=6)
    rot = random_rotation(rng)
    with torch.no_grad():
        inp = make_input([s])
        f0 = model.predict_forces_direct(model.encode(inp), inp, F)
        inp_r = make_input([s.replace(positions=s.positions @ rot.T)])
        f1 = model.predict_forces_direct(model.encode(inp_r), inp_r, F)
    assert torch.max(torch.abs(f0 @ torch.from_numpy(rot).T - f1)) < 1e-10


def test_pair_forces_antisymmetric(model):
    s = AtomicSystem("pair", [6, 6], [[0, 0, 0], [0.4, 1.0, -0.3]])
    with torch.no_grad():
        inp = make_input([s])
        emb = model.encode(inp)
        f = model.predict_forces_direct(emb, inp, F)
    assert torch.max(torch.abs(emb.m[0] - emb.m[1])) < 1e-14
    assert torch.max(torch.abs(f[0] + f[1])) < 1e-14


def test_zero_force_head(model, rng):
    with torch.no_grad():
        for p in model.heads[F.key].out.parameters():
            p.zero_()
        inp = make_input([random_molecule(rng)])
        assert torch.all(model.predict_forces_direct(model.encode(inp), inp, F) == 0)


def test_gradient_forces(model, rng):
    for k in range(3):
        s = random_molecule(rng, n=5)
        inp = make_input([s])
        _, forces, _ = model.predict_forces_gradient(inp, E)

        def energy(pos):
            with torch.no_grad():
                return float(model.predict_energy(model.encode(inp, positions=torch.from_numpy(pos)), inp, E)[0])

        fd = -ad.finite_difference_grad(energy, s.positions.copy(), 1e-4)
        f = forces.detach().numpy()
        assert np.abs(f - fd).max() / np.abs(fd).max() < 1e-4
        assert np.abs(f.sum(axis=0)).max() < 1e-8
        moved = make_input([s.replace(positions=s.positions + [0.7, -0.2, 1.1])])
        _, f2, _ = model.predict_forces_gradient(moved, E)
        assert torch.max(torch.abs(f2 - forces)) < 1e-12


def test_gradient_forces_trainable(model, rng):
    inp = make_input([random_molecule(rng)])
    _, forces, _ = model.predict_forces_gradient(inp, E)
    params = [model.heads[E.key].hidden.weight]
    (g,) = ad.backward((forces**2).sum(), params)
    assert torch.any(g != 0)


def test_capability_error(rng):
    cfg = ModelConfig(atom_embed_dim=4, edge_embed_dim=4, num_blocks=1, rbf_count=4, rbf_cutoff=3.0, second_order=False)
    m = Model(cfg, [E])
    with pytest.raises(CapabilityError):
        m.predict_forces_gradient(make_input([random_molecule(rng)]), E)


def test_cutoff_mismatch(model, rng):
    with pytest.raises(ConfigError):
        model.encode(make_input([random_molecule(rng)], cutoff=2.5))


def test_edge_dropout():
    x = torch.ones(200, 4, dtype=torch.float64)
    assert torch.equal(edge_dropout(x, 0.0), x)
    assert torch.equal(edge_dropout(x, 0.5, training=False), x)
    gen = torch.Generator().manual_seed(0)
    acc = torch.zeros(200, dtype=torch.float64)
    draws = 100_000
    y = torch.ones(200, 1, dtype=torch.float64)
    for _ in range(draws // 1000):
        batch = torch.stack([edge_dropout(y, 0.3, gen)[:, 0] for _ in range(1000)])
        acc += batch.sum(0)
    mean = acc / draws
    assert torch.max(torch.abs(mean - 1.0)) < 0.01


def test_dropout_only_in_training(rng):
    cfg = ModelConfig(atom_embed_dim=8, edge_embed_dim=8, num_blocks=2, rbf_count=6, rbf_cutoff=3.0, dropout_p=0.3, edge_dropout_p=0.3)
    m = Model(cfg, [E])
    inp = make_input([random_molecule(rng, n=6)])
    with torch.no_grad():
        a = m.encode(inp).h
        b = m.encode(inp).h
        c = m.encode(inp, training=True, generator=torch.Generator().manual_seed(1)).h
    assert torch.equal(a, b) and not torch.equal(a, c)


def test_swap_heads(model, rng):
    before = backbone_checksum(model)
    new = [HeadSpec("c", "energy"), HeadSpec("c", "scalar", "gap")]
    swap_heads(model, new, seed=5)
    assert backbone_checksum(model) == before
    assert sorted(model.head_specs) == sorted(h.key for h in new)
    heads1 = {k: v.clone() for k, v in model.heads.state_dict().items()}
    swap_heads(model, new, seed=5)
    for k, v in model.heads.state_dict().items():
        assert torch.equal(v, heads1[k])
    with torch.no_grad():
        model.heads[new[0].key].out.weight.zero_()
    inp = make_input([random_molecule(rng, n=4)], names=("c",))
    bias = float(model.heads[new[0].key].out.bias.detach())
    assert float(energy_of(model, inp, new[0])[0]) == pytest.approx(4 * bias, abs=1e-15)


def test_swap_preserves_backbone_outputs(model, rng):
    inp = make_input([random_molecule(rng, n=6)])
    e0 = energy_of(model, inp)
    saved = {k: v.clone() for k, v in model.heads.state_dict().items()}
    swap_heads(model, [HeadSpec("c", "energy")], seed=1)
    swap_heads(model, [E, F], seed=99)
    model.heads.load_state_dict(saved)
    assert torch.max(torch.abs(energy_of(model, inp) - e0)) < 1e-12


def test_mean_embeddings(model, rng):
    systems = [random_molecule(rng, n=int(n)) for n in (3, 5, 4)]
    inp = make_input(systems)
    with torch.no_grad():
        emb = model.encode(inp)
        h, m = mean_embeddings(emb, inp)
    off = 0
    for b, s in enumerate(systems):
        rows = emb.h[off : off + s.num_atoms]
        assert torch.max(torch.abs(h[b] - rows.mean(0))) < 1e-12
        edges = emb.m[emb.edge_system == b]
        assert torch.max(torch.abs(m[b] - edges.mean(0))) < 1e-12
        off += s.num_atoms
    same = AtomicSystem("same", [6, 6], [[0, 0, 0], [1.2, 0, 0]])
    inp = make_input([same])
    with torch.no_grad():
        emb = model.encode(inp)
        h, m = mean_embeddings(emb, inp)
    assert torch.max(torch.abs(h[0] - emb.h[0])) < 1e-14
    isolated = AtomicSystem("iso", [6, 6], [[0, 0, 0], [9.0, 0, 0]])
    inp = make_input([isolated])
    with pytest.raises(EmbeddingError):
        mean_embeddings(model.encode(inp), inp)


def test_batch_independence_and_locality(model, rng):
    systems = [random_molecule(rng, n=5, sid=f"s{k}") for k in range(4)]
    alone = [float(energy_of(model, make_input([s]))[0]) for s in systems]
    together = energy_of(model, make_input(systems)).tolist()
    assert np.max(np.abs(np.array(alone) - together)) < 1e-12
    moved = systems[:3] + [systems[3].replace(positions=systems[3].positions + 0.37)]
    again = energy_of(model, make_input(moved)).tolist()
    assert again[:3] == together[:3]


def test_head_isolation(tiny_config, rng):
    heads = [HeadSpec("a", "energy"), HeadSpec("a", "direct_force"), HeadSpec("b", "energy"), HeadSpec("b", "direct_force")]
    m = Model(tiny_config, heads, 0)
    systems = [random_molecule(rng, n=4, sid=f"s{k}") for k in range(4)]
    inp = make_input(systems, names=("a", "b"), ds=[0, 1, 0, 1])
    energy, forces, _, _ = m.predict_multi(inp, force_mode="direct")
    a_nodes = torch.from_numpy(np.flatnonzero(np.isin(inp.batch_idx.numpy(), [0, 2])))
    loss_a = energy[[0, 2]].abs().sum() + forces[a_nodes].abs().sum()
    b_params = [p for n, p in m.named_parameters() if n.startswith("heads.b|")]
    a_params = [p for n, p in m.named_parameters() if n.startswith("heads.a|")]
    assert all(torch.all(g == 0) for g in ad.backward(loss_a, b_params))
    assert any(torch.any(g != 0) for g in ad.backward(loss_a, a_params))


def test_predict_multi_matches_single_head(model, rng):
    s = random_molecule(rng, n=5)
    inp = make_input([s])
    energy, forces, _, emb = model.predict_multi(inp, force_mode="direct")
    assert torch.max(torch.abs(energy - model.predict_energy(emb, inp, E))) < 1e-14
    assert torch.max(torch.abs(forces - model.predict_forces_direct(emb, inp, F))) < 1e-14
    _, gforces, _ = model.predict_forces_gradient(inp, E)
    _, mforces, _, _ = model.predict_multi(inp, force_mode="gradient")
    assert torch.max(torch.abs(gforces - mforces)) < 1e-14
