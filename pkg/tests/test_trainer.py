import dataclasses
import os

import numpy as np
import pytest
import torch

import jointpt.trainer as trainer_mod
from jointpt.checkpoint import load_checkpoint
from jointpt.errors import ConfigError, NonFiniteError
from jointpt.model import backbone_checksum
from jointpt.trainer import Trainer, finetune, prepare_dataset, pretrain

from conftest import run_config

TWO = ("lj_a_mini.jsonl", "lj_b_mini.jsonl")


@pytest.fixture(scope="module")
def base_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    res = pretrain(run_config(files=TWO, epochs=1), out_dir=str(out))
    return res.checkpoint, str(out / "final.ckpt")


def test_fixed_seed_bit_identical():
    cfg = run_config(files=TWO, max_steps=25)
    a, b = Trainer(cfg), Trainer(cfg)
    la, lb = a.run().train_losses, b.run().train_losses
    assert la == lb
    for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert torch.equal(p, q)
    c = Trainer(run_config(files=TWO, max_steps=25, seed=1)).run().train_losses
    assert c != la


def test_resume_bit_identical(tmp_path):
    cfg = run_config(files=TWO, epochs=3)
    full = Trainer(cfg)
    full.run()
    part = Trainer(cfg)
    part.run(max_steps=17)
    path = part.save(str(tmp_path / "mid.ckpt"))
    resumed = Trainer(cfg)
    resumed.restore(load_checkpoint(path))
    resumed.run()
    assert resumed.train_losses == full.train_losses
    assert resumed.step == full.step and resumed.best_val == full.best_val
    for (_, p), (_, q) in zip(resumed.model.named_parameters(), full.model.named_parameters()):
        assert torch.equal(p, q)
    for k in full.ema.shadow:
        assert torch.equal(resumed.ema.shadow[k], full.ema.shadow[k])


def test_pretrain_outputs(tmp_path):
    res = pretrain(run_config(files=TWO, epochs=1), out_dir=str(tmp_path))
    assert res.stop_reason == "completed 1 epochs"
    assert os.path.exists(tmp_path / "final.ckpt")
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,epoch,dataset_id,split,metric,value"
    m = res.checkpoint.manifest
    assert [h["dataset_id"] for h in m["heads"]] == ["lj-a-mini", "lj-a-mini", "lj-b-mini", "lj-b-mini"]


def test_pretrain_reduces_force_error():
    cfg = run_config(files=TWO, epochs=12, schedule={"base_lr": 3e-3, "warmup": 10.0, "warmup_unit": "steps", "cos_duration": 12.0, "llrd": "none"})
    t = Trainer(cfg)
    t.validate()
    start = {r[2]: r[5] for r in t.metrics.rows if r[4] == "force_mae_norm"}
    t.run()
    last_epoch = t.epoch
    end = {r[2]: r[5] for r in t.metrics.rows if r[4] == "force_mae_norm" and r[1] == last_epoch}
    for ds, v in start.items():
        assert end[ds] <= 0.5 * v, (ds, v, end[ds])


def test_single_dataset_temperature_irrelevant():
    runs = [Trainer(run_config(max_steps=15, mix={"batch_size": 8, "temperature": t})).run().train_losses for t in (1.0, 2.0, 50.0)]
    assert runs[0] == runs[1] == runs[2]


def test_llrd_off_is_uniform(base_ckpt):
    ckpt, _ = base_ckpt
    cfg = run_config("finetune", files=("lj_c_mini.jsonl",), max_steps=12, force_mode="direct")
    plain = Trainer(cfg, init=ckpt)
    ones = Trainer(cfg, init=ckpt)
    ones.schedule = dataclasses.replace(ones.schedule, llrd={g: 1.0 for g in ones.model.layer_groups()})
    assert plain.run().train_losses == ones.run().train_losses


def test_finetune_swaps_heads(base_ckpt):
    ckpt, path = base_ckpt
    cfg = run_config("finetune", files=("lj_c_mini.jsonl",), force_mode="direct", early_stop={"max_epochs": 1})
    t = Trainer(cfg, init=ckpt)
    assert sorted(t.model.head_specs) == ["lj-c-mini|direct_force|", "lj-c-mini|energy|"]
    ema = ckpt.build_model("ema/")
    assert backbone_checksum(t.model) == backbone_checksum(ema)
    res, tr = finetune(path, cfg)
    assert res.stop_reason.startswith("reached max epochs")
    assert res.epochs == 1


def test_scalar_only_finetune(base_ckpt):
    ckpt, _ = base_ckpt
    cfg = run_config(
        "finetune", files=("lj_c_mini.jsonl",), max_steps=10,
        datasets=[{"id": "c", "path": os.path.join(os.path.dirname(__file__), "data", "lj_c_mini.jsonl"), "targets": ["mean_pair_distance"]}],
    )
    t = Trainer(cfg, init=ckpt)
    assert [h.kind for h in t.model.head_specs.values()] == ["scalar"]
    losses = t.run().train_losses
    assert len(losses) == 10 and all(np.isfinite(losses))


def test_gradient_mode_steps(base_ckpt):
    ckpt, _ = base_ckpt
    cfg = run_config("finetune", files=("lj_c_mini.jsonl",), max_steps=4, force_mode="gradient")
    t = Trainer(cfg, init=ckpt)
    assert all(h.kind != "direct_force" for h in t.model.head_specs.values())
    assert all(np.isfinite(t.run().train_losses))


def test_finetune_needs_checkpoint():
    cfg = run_config("finetune", files=("lj_c_mini.jsonl",))
    with pytest.raises(ConfigError):
        finetune(None, cfg)
    with pytest.raises(ConfigError):
        pretrain(cfg)


def test_scratch_ignores_checkpoint():
    cfg = run_config("scratch", files=("lj_c_mini.jsonl",), max_steps=3)
    res, t = finetune(None, cfg)
    assert res.steps == 3


def test_threshold_requires_margins():
    with pytest.raises(ConfigError):
        Trainer(run_config(loss={"threshold": True}))
    cfg = run_config(max_steps=5, loss={"threshold": True}, overrides=["datasets.0.threshold=ani1x"])
    assert all(np.isfinite(Trainer(cfg).run().train_losses))


def test_pcgrad_and_naive_runs():
    for loss in ({"pcgrad": True}, {"reduction": "naive"}, {"energy_distance": "squared"}):
        losses = Trainer(run_config(files=TWO, max_steps=5, loss=loss)).run().train_losses
        assert len(losses) == 5 and all(np.isfinite(losses))


def test_nonfinite_loss_aborts(monkeypatch):
    real = trainer_mod.forward

    def poisoned(*args, **kw):
        e, f, s = real(*args, **kw)
        return e * float("nan"), f, s

    monkeypatch.setattr(trainer_mod, "forward", poisoned)
    with pytest.raises(NonFiniteError, match="last good checkpoint"):
        Trainer(run_config(max_steps=3)).run()


def test_prepare_fits_on_train_only():
    cfg = run_config()
    prep = prepare_dataset(cfg.datasets[0])
    from jointpt.reference import fit_linear_reference

    again = fit_linear_reference(prep.train)
    assert again.coefficients == prep.reference.coefficients
    assert prep.lambda_F == pytest.approx(prep.train.meta.mean_atoms)
