"""``jointpt`` command line: pretrain, finetune, eval, stats, check-grad, gen-synthetic.

Exit status is 0 on success, 1 for invalid input (config, data, checkpoint,
or a failed gradient check) and 2 for runtime faults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import subprocess
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import RunConfig, config_to_toml, load_config
from .errors import (
    CheckpointError,
    ConfigError,
    GenerationError,
    HeadError,
    JointPTError,
    LabelError,
    ParseError,
    SplitError,
    WeightError,
)

OUTPUT_ROOT_ENV = "JOINTPT_OUTPUT_ROOT"
VALIDATION_ERRORS = (ConfigError, ParseError, SplitError, LabelError, CheckpointError, HeadError, WeightError, GenerationError, FileNotFoundError)

log = logging.getLogger("jointpt")


class CheckFailed(Exception):
    pass


def git_describe(path: Optional[str] = None) -> str:
    path = path or os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=path, capture_output=True, text=True, timeout=10, check=True,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def output_dir(config: RunConfig, override: Optional[str]) -> str:
    out = override or config.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(out):
        out = os.path.join(root, out)
    os.makedirs(out, exist_ok=True)
    return out


def write_provenance(out: str, config: RunConfig, command: str):
    import torch

    with open(os.path.join(out, "config.toml"), "w", encoding="utf-8") as fh:
        fh.write(config_to_toml(config))
    info = {
        "command": command,
        "config_hash": config.config_hash(),
        "git_describe": git_describe(),
        "package_version": __version__,
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    with open(os.path.join(out, "provenance.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(args) -> RunConfig:
    return load_config(args.config, args.set or ())


# -- commands ------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .trainer import pretrain

    cfg = _load(args)
    if cfg.mode != "pretrain":
        raise ConfigError(f"config mode is {cfg.mode!r}; use the finetune command")
    out = output_dir(cfg, args.out)
    write_provenance(out, cfg, "pretrain")
    res = pretrain(cfg, out_dir=out, resume=args.resume)
    print(f"pretrain: {res.steps} steps, {res.epochs} epochs ({res.stop_reason}); checkpoint {os.path.join(out, 'final.ckpt')}")
    return 0


def cmd_finetune(args) -> int:
    from dataclasses import replace

    from .evaluation import evaluate
    from .trainer import finetune

    cfg = _load(args)
    if args.init:
        cfg = replace(cfg, init_checkpoint=args.init)
    if cfg.mode not in ("finetune", "scratch"):
        raise ConfigError(f"config mode is {cfg.mode!r}; use the pretrain command")
    out = output_dir(cfg, args.out)
    write_provenance(out, cfg, "finetune")
    res, trainer = finetune(cfg.init_checkpoint or None, cfg, out_dir=out)
    model = trainer.best_model()
    rows = []
    for prep in trainer.prepared:
        rows.extend(evaluate(model, prep, "test", force_mode=cfg.force_mode, batch_size=cfg.eval_batch_size).rows)
    from .evaluation import EvalReport

    report = EvalReport(rows)
    with open(os.path.join(out, "test_metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.to_csv())
    print(f"{cfg.mode}: {res.steps} steps, {res.epochs} epochs ({res.stop_reason}); best epoch {res.best_epoch}")
    sys.stdout.write(report.to_csv())
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import ablation_table, embeddings_to_csv, evaluate_checkpoint, export_embeddings, restore_prepared

    if args.ablation:
        with open(args.ablation, encoding="utf-8") as fh:
            results = json.load(fh)
        sys.stdout.write(ablation_table(results, args.baseline))
        return 0
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint (or --ablation)")
    ckpt = load_checkpoint(args.checkpoint)
    report = evaluate_checkpoint(ckpt, args.split, use_ema=not args.raw_weights)
    sys.stdout.write(report.to_csv())
    if args.out:
        from .config import from_dict

        os.makedirs(args.out, exist_ok=True)
        write_provenance(args.out, from_dict(RunConfig, ckpt.manifest["config"]), "eval")
        with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    if args.embeddings:
        model = ckpt.build_model("ema/" if not args.raw_weights else "param/")
        rows = []
        for prep in restore_prepared(ckpt):
            rows.extend(export_embeddings(model, prep, args.split, args.sample_count, args.seed))
        with open(args.embeddings, "w", encoding="utf-8") as fh:
            fh.write(embeddings_to_csv(rows))
    return 0


def cmd_stats(args) -> int:
    from .sampler import MixedSampler, MixSpec, mixture_probabilities
    from .trainer import prepare_dataset

    cfg = _load(args)
    preps = [prepare_dataset(s) for s in cfg.datasets]
    for p in preps:
        print(f"[{p.id}] train/val/test = {len(p.train)}/{len(p.val)}/{len(p.test)}  <N> = {p.train.meta.mean_atoms:.3f}")
        print(f"  lambda_E = {p.lambda_E:g}  lambda_F = {p.lambda_F:g}")
        if p.reference is not None:
            coeffs = ", ".join(f"Z={z}: {c:.6g}" for z, c in sorted(p.reference.coefficients.items()))
            print(f"  reference: {coeffs}  (residual RMS {p.reference.residual_rms:.4g} eV)")
        s = p.stats
        print(f"  energy mean {s.energy_mean:.6g}  std {s.energy_std:.6g}  force RMS {s.force_rms:.6g}")
        for name, (m, st) in p.scalar_refs.items():
            print(f"  target {name}: mean {st.energy_mean:.6g}  std {st.energy_std:.6g}")
    sizes = tuple(len(p.train) for p in preps)
    probs = mixture_probabilities(sizes, cfg.mix.temperature)
    sampler = MixedSampler(MixSpec(sizes, cfg.mix.temperature, cfg.mix.batch_size, cfg.seed, cfg.mix.mode))
    counts = np.zeros(len(sizes))
    draws = 0
    while draws < args.draws:
        for d, _ in sampler.next_indices():
            counts[d] += 1
        draws += cfg.mix.batch_size
    print(f"\nmixing at T = {cfg.mix.temperature:g} ({draws} draws)")
    print(f"{'dataset':<16}{'size':>10}{'expected':>12}{'empirical':>12}")
    for p, n, q, c in zip(preps, sizes, probs, counts):
        print(f"{p.id:<16}{n:>10}{q:>12.4f}{c / draws:>12.4f}")
    return 0


def force_gradient_check(model, prep, num_systems: int = 5, h: float = 1e-4, split_name: str = "train"):
    """Max norm-wise relative error of gradient forces against central differences."""
    import torch

    from .trainer import assemble

    head = model.head(prep.id, "energy")
    examples = prep.examples(split_name, model.config.rbf_cutoff, model.config.max_neighbors)[:num_systems]
    worst = 0.0
    for ex in examples:
        inp, _ = assemble([ex], [0], [prep.id])
        _, forces, _ = model.predict_forces_gradient(inp, head)
        forces = forces.detach().numpy()

        def energy(pos):
            with torch.no_grad():
                emb = model.encode(inp, positions=torch.from_numpy(pos))
                return float(model.predict_energy(emb, inp, head)[0])

        from .autodiff import finite_difference_grad

        fd = -finite_difference_grad(energy, inp.positions.numpy().copy(), h)
        scale = max(float(np.abs(fd).max()), 1e-12)
        worst = max(worst, float(np.abs(forces - fd).max()) / scale)
    return worst


def cmd_check_grad(args) -> int:
    from .checkpoint import load_checkpoint
    from .model import Model
    from .trainer import heads_for, prepare_dataset

    cfg = _load(args)
    preps = [prepare_dataset(s) for s in cfg.datasets[:1]]
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).build_model("param/")
    else:
        model = Model(cfg.model, heads_for(preps, "gradient"), seed=cfg.seed)
    err = force_gradient_check(model, preps[0], args.systems, args.h)
    print(f"max relative force-gradient error: {err:.3e} (tolerance {args.tol:g})")
    if err > args.tol:
        raise CheckFailed(f"gradient check failed: {err:.3e} > {args.tol:g}")
    return 0


def cmd_gen_synthetic(args) -> int:
    from .ingest import generate_synthetic, synthetic_domain, write_dataset

    ds = generate_synthetic(synthetic_domain(args.domain, args.count), args.seed)
    os.makedirs(os.path.dirname(os.path.abspath(args.output)), exist_ok=True)
    write_dataset(ds, args.output)
    print(f"wrote {len(ds)} systems of {args.domain} to {args.output}")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointpt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="TOML run config or bundled preset name")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        return p

    p = with_config(sub.add_parser("pretrain", help="multi-dataset pretraining"))
    p.add_argument("--out")
    p.add_argument("--resume", help="training-state checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("finetune", help="fine-tune (or train from scratch) on downstream data"))
    p.add_argument("--out")
    p.add_argument("--init", help="pretrained checkpoint (overrides init_checkpoint)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="physical-unit metrics of a checkpoint, or an ablation table")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA weights")
    p.add_argument("--embeddings", help="write mean node/edge embeddings to this CSV")
    p.add_argument("--sample-count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", help="JSON {method: {task: error}} to tabulate")
    p.add_argument("--baseline", default="scratch")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("stats", help="referencing, normalization and mixing statistics"))
    p.add_argument("--draws", type=int, default=100_000)
    p.set_defaults(func=cmd_stats)

    p = with_config(sub.add_parser("check-grad", help="finite-difference check of gradient forces"))
    p.add_argument("--checkpoint")
    p.add_argument("--systems", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("gen-synthetic", help="write a synthetic Lennard-Jones corpus as JSONL")
    p.add_argument("--domain", required=True)
    p.add_argument("--count", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_gen_synthetic)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors count as invalid input
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (JointPTError, Exception) as exc:  # runtime fault
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
