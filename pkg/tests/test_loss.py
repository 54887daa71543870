import numpy as np
import pytest
import torch

from jointpt import autodiff as ad
from jointpt.core import DatasetMeta
from jointpt.errors import ConfigError, ShapeError, WeightError
from jointpt.loss import (
    THRESHOLD_PRESETS,
    LossWeights,
    ThresholdSpec,
    default_weights,
    naive_loss,
    per_system_force_contributions,
    scalar_mae,
    swl_loss,
    threshold_wrap,
    vector_l2,
)


def t(x):
    return torch.tensor(np.asarray(x, dtype=np.float64))


def hand_case():
    """System A has one atom, system B three; force errors along x."""
    E_tgt = t([0.0, 0.0])
    E_pred = t([0.5, -0.1])
    F_tgt = torch.zeros(4, 3, dtype=torch.float64)
    F_pred = t([[1.0, 0, 0], [0, 2.0, 0], [0, 0, -2.0], [2.0, 0, 0]])
    return E_pred, F_pred, E_tgt, F_tgt, [0, 1, 1, 1], [0, 0]


def random_batch(rng, sizes, num_datasets=2):
    bidx = np.repeat(np.arange(len(sizes)), sizes)
    ds = rng.integers(0, num_datasets, len(sizes))
    n = int(sum(sizes))
    return (
        t(rng.normal(size=len(sizes))),
        t(rng.normal(size=(n, 3))),
        t(rng.normal(size=len(sizes))),
        t(rng.normal(size=(n, 3))),
        bidx,
        ds,
    )


W2 = LossWeights((1.0, 0.5), (2.0, 7.0), ("a", "b"))


def test_swl_hand_case():
    w = LossWeights((1.0,), (2.0,))
    assert float(swl_loss(*hand_case(), w)) == pytest.approx(3.3, abs=1e-14)


def test_naive_hand_case():
    w = LossWeights((1.0,), (2.0,))
    E_pred, F_pred, E_tgt, F_tgt, b, d = hand_case()
    total = float(naive_loss(E_pred, F_pred, E_tgt, F_tgt, b, d, w))
    assert total - 0.3 == pytest.approx(3.5, abs=1e-14)


def test_zero_when_exact(rng):
    E, F, _, _, b, d = random_batch(rng, [3, 5])
    assert float(swl_loss(E, F, E, F, b, d, W2)) == 0.0
    assert float(naive_loss(E, F, E, F, b, d, W2)) == 0.0


def test_equal_sizes_match_naive(rng):
    w = LossWeights((1.3,), (4.0,))
    for _ in range(5):
        E, F, Et, Ft, b, _ = random_batch(rng, [4, 4, 4])
        d = [0, 0, 0]
        assert abs(float(swl_loss(E, F, Et, Ft, b, d, w)) - float(naive_loss(E, F, Et, Ft, b, d, w))) < 1e-14


def test_single_system_match():
    w = LossWeights((1.0,), (3.0,))
    E_pred, F_pred, E_tgt, F_tgt, _, _ = hand_case()
    args = (E_pred[:1], F_pred, E_tgt[:1], F_tgt, [0, 0, 0, 0], [0])
    assert float(swl_loss(*args, w)) == pytest.approx(float(naive_loss(*args, w)), abs=1e-14)


def test_swl_brute_force(rng):
    for _ in range(10):
        sizes = rng.integers(1, 6, 4)
        E, F, Et, Ft, b, d = random_batch(rng, sizes)
        expect = 0.0
        for k in range(len(sizes)):
            rows = b == k
            err = np.linalg.norm((F - Ft).numpy()[rows], axis=1).mean()
            expect += W2.lambda_E[d[k]] * abs(float(E[k] - Et[k])) + W2.lambda_F[d[k]] * err
        assert float(swl_loss(E, F, Et, Ft, b, d, W2)) == pytest.approx(expect / len(sizes), abs=1e-13)


def test_squared_energy_distance():
    w = LossWeights((1.0,), (2.0,))
    total = float(swl_loss(*hand_case(), w, energy_distance="squared"))
    assert total == pytest.approx((0.25 + 0.01) / 2 + 3.0, abs=1e-14)
    with pytest.raises(ConfigError):
        swl_loss(*hand_case(), w, energy_distance="huber")


def test_swl_balance_property():
    w = LossWeights((1.0, 1.0), (4.0, 40.0))
    sizes = [4, 40]
    bidx = np.repeat([0, 1], sizes)
    F_pred = torch.zeros(44, 3, dtype=torch.float64)
    F_pred[:, 0] = 0.3
    F_tgt = torch.zeros_like(F_pred)
    swl = per_system_force_contributions(F_pred, F_tgt, bidx, [0, 1], w, "swl")
    assert float(swl[1] / swl[0]) == pytest.approx(40.0 / 4.0, abs=1e-12)
    same = LossWeights((1.0,), (1.0,))
    swl_eq = per_system_force_contributions(F_pred, F_tgt, bidx, [0, 0], same, "swl")
    naive = per_system_force_contributions(F_pred, F_tgt, bidx, [0, 0], same, "naive")
    assert float(swl_eq[1] / swl_eq[0]) == pytest.approx(1.0, abs=1e-12)
    assert float(naive[1] / naive[0]) == pytest.approx(10.0, abs=1e-12)
    share = float(naive[1] / naive.sum())
    assert share == pytest.approx(40 / 44, abs=1e-12)
    with pytest.raises(ConfigError):
        per_system_force_contributions(F_pred, F_tgt, bidx, [0, 1], w, "mean")


def test_bad_dataset_index(rng):
    E, F, Et, Ft, b, _ = random_batch(rng, [2, 2])
    with pytest.raises(WeightError):
        swl_loss(E, F, Et, Ft, b, [0, 2], W2)
    with pytest.raises(WeightError):
        naive_loss(E, F, Et, Ft, b, [-1, 0], W2)


def test_weight_validation():
    with pytest.raises(WeightError):
        LossWeights((1.0, 1.0), (1.0,))
    with pytest.raises(WeightError):
        LossWeights((0.0,), (1.0,))


def test_shape_errors(rng):
    E, F, Et, Ft, b, d = random_batch(rng, [2, 3])
    with pytest.raises(ShapeError):
        swl_loss(E, F[:-1], Et, Ft, b, d, W2)
    with pytest.raises(ShapeError):
        vector_l2(F, F[:, :2])
    with pytest.raises(ShapeError):
        scalar_mae(E, E[:1])


def test_default_weights():
    w = default_weights([DatasetMeta("t1x", mean_atoms=14.0), DatasetMeta("oc22", mean_atoms=80.0), DatasetMeta("h", mean_atoms=1.0)])
    assert w.lambda_E == (1.0, 1.0, 1.0)
    assert w.lambda_F == (14.0, 80.0, 1.0)
    assert w.dataset_ids == ("t1x", "oc22", "h")


def test_scalar_and_vector_metrics(rng):
    assert float(vector_l2(t([[3.0, 4.0]]), t([[0.0, 0.0]]))[0]) == 5.0
    x = t(rng.normal(size=(20, 3)))
    assert torch.all(vector_l2(x, x) == 0)
    y = t(rng.normal(size=(20, 3)))
    brute = [np.sqrt(sum((a - c) ** 2 for a, c in zip(r, s))) for r, s in zip(x.tolist(), y.tolist())]
    assert np.max(np.abs(vector_l2(x, y).numpy() - brute)) < 1e-14
    p, q = t(rng.normal(size=30)), t(rng.normal(size=30))
    assert abs(float(scalar_mae(p, q)) - np.mean(np.abs(p.numpy() - q.numpy()))) < 1e-14
    assert float(scalar_mae(p, p)) == 0.0


def test_swl_differentiable(rng):
    E, F, Et, Ft, b, d = random_batch(rng, [2, 4, 3])
    F = F.clone().requires_grad_(True)
    E = E.clone().requires_grad_(True)
    gE, gF = ad.backward(swl_loss(E, F, Et, Ft, b, d, W2), [E, F])

    def f_of(xf):
        with torch.no_grad():
            return float(swl_loss(E, torch.from_numpy(xf), Et, Ft, b, d, W2))

    def e_of(xe):
        with torch.no_grad():
            return float(swl_loss(torch.from_numpy(xe), F, Et, Ft, b, d, W2))

    fdF = ad.finite_difference_grad(f_of, F.detach().numpy().copy(), 1e-6)
    fdE = ad.finite_difference_grad(e_of, E.detach().numpy().copy(), 1e-6)
    assert ad.max_relative_error(gF.numpy(), fdF) < 1e-6
    assert ad.max_relative_error(gE.numpy(), fdE) < 1e-6


# -- threshold gating ------------------------------------------------------------


def gate_spec(em, fm, ids=("a",)):
    return ThresholdSpec({i: em for i in ids}, {i: fm for i in ids}, ids)


def test_threshold_energy_margin():
    w = LossWeights((1.0,), (1.0,))
    spec = ThresholdSpec.from_presets({"a": "ani1x"}, ("a",))
    assert spec.energy_margin["a"] == 0.043 and spec.force_margin["a"] == 0.01
    gated = threshold_wrap(swl_loss, spec)
    F = torch.zeros(1, 3, dtype=torch.float64)
    small = float(gated(t([0.02]), F, t([0.0]), F, [0], [0], w))
    assert small == 0.0
    big = float(gated(t([0.05]), F, t([0.0]), F, [0], [0], w))
    assert big == pytest.approx(float(swl_loss(t([0.05]), F, t([0.0]), F, [0], [0], w)), abs=1e-15)
    assert big == pytest.approx(0.05, abs=1e-15)


def test_threshold_physical_units():
    w = LossWeights((1.0,), (1.0,))
    gated = threshold_wrap(swl_loss, gate_spec(0.043, 0.01))
    F = torch.zeros(1, 3, dtype=torch.float64)
    # 0.02 normalized units at energy_std 2.5 is 0.05 eV, above the margin
    val = float(gated(t([0.02]), F, t([0.0]), F, [0], [0], w, energy_unit=[2.5], force_unit=[1.0]))
    assert val == pytest.approx(0.02, abs=1e-15)


def test_threshold_force_gate_per_atom():
    w = LossWeights((1.0,), (1.0,))
    gated = threshold_wrap(swl_loss, gate_spec(0.1, 0.03))
    Fp = t([[0.02, 0, 0], [0.5, 0, 0]])
    Fz = torch.zeros(2, 3, dtype=torch.float64)
    val = float(gated(t([0.0]), Fp, t([0.0]), Fz, [0, 0], [0], w))
    assert val == pytest.approx(0.5 / 2, abs=1e-15)


def test_threshold_zero_margins_identity(rng):
    spec = gate_spec(0.0, 0.0, ("a", "b"))
    for fn in (swl_loss, naive_loss):
        gated = threshold_wrap(fn, spec)
        for _ in range(20):
            batch = random_batch(rng, rng.integers(1, 5, 3))
            assert float(gated(*batch, W2)) == float(fn(*batch, W2))


def test_threshold_monotone(rng):
    for _ in range(100):
        batch = random_batch(rng, rng.integers(1, 6, 4))
        prev = np.inf
        for m in (0.0, 0.2, 0.5, 1.0, 2.0, 5.0, 100.0):
            val = float(threshold_wrap(swl_loss, gate_spec(m, m, ("a", "b")))(*batch, W2))
            assert val <= prev
            prev = val
        assert prev == 0.0


def test_threshold_missing_margin(rng):
    spec = ThresholdSpec({"a": 0.1}, {"a": 0.1}, ("a", "b"))
    batch = random_batch(rng, [2, 2])
    with pytest.raises(ConfigError):
        threshold_wrap(swl_loss, spec)(*batch[:5], [0, 1], W2)
    with pytest.raises(ConfigError):
        ThresholdSpec({"a": -0.1}, {"a": 0.1})
    with pytest.raises(ConfigError):
        ThresholdSpec.from_presets({"a": "qm9"}, ("a",))


def test_threshold_presets():
    assert THRESHOLD_PRESETS["ani1x"] == (0.043, 0.01)
    assert THRESHOLD_PRESETS["oc20"] == (0.1, 0.03)
