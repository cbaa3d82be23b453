"""Command-line entry point: reproducible runs emitting JSON reports.

Every command echoes its full configuration in the report; re-running from
that echo reproduces the results bit-identically. Exit codes: 0 success,
1 domain error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import SyntheticSpec, generate_synthetic, ingest_manifest, write_manifest
from .errors import ConfigError, MGLLError
from .fixtures import random_batch
from .gradients import LOSS_SELECTORS, finite_difference_check
from .losses import LossConfig, build_batch, clip_loss, mgll_loss, pointwise_loss, smooth_kl_loss, soft_clip_loss
from .metrics import ScoredLabels, evaluate
from .numerics import read_mgem, row_normalize
from .trainer import LADDERS, DescentConfig, ablation_run, descend

log = logging.getLogger(__name__)


def _loss_config_from_args(args) -> LossConfig:
    cfg = LossConfig(
        tau=args.tau,
        alpha1=args.alpha1,
        alpha2=args.alpha2,
        alpha3=args.alpha3,
        weights_mode=args.weights_mode,
        kl_grad_mode={"exact": "exact", "approx": "approximate"}[args.kl_grad],
        pointwise_tau=args.pointwise_tau,
    )
    try:
        cfg.validate()
    except MGLLError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _add_loss_flags(sub) -> None:
    sub.add_argument("--tau", type=float, default=0.07)
    sub.add_argument("--alpha1", type=float, default=0.5)
    sub.add_argument("--alpha2", type=float, default=1.0)
    sub.add_argument("--alpha3", type=float, default=1.0)
    sub.add_argument("--weights-mode", choices=("uniform", "cooccurrence"),
                     default="uniform")
    sub.add_argument("--kl-grad", choices=("exact", "approx"), default="exact")
    sub.add_argument("--pointwise-tau", type=float, default=None)


def _loss_flag_config(args) -> dict:
    return {
        "tau": args.tau,
        "alpha1": args.alpha1,
        "alpha2": args.alpha2,
        "alpha3": args.alpha3,
        "weights_mode": args.weights_mode,
        "kl_grad": args.kl_grad,
        "pointwise_tau": args.pointwise_tau,
    }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


# --- subcommand handlers ------------------------------------------------------


def _cmd_gen_synth(args):
    spec = SyntheticSpec(
        seed=args.seed,
        n_samples=args.n_samples,
        dim=args.dim,
        coarse_labels=args.coarse_labels,
        fine_per_coarse=args.fine_per_coarse,
        labels_per_sample=args.labels_per_sample,
        noise_sigma=args.noise_sigma,
    )
    manifest = generate_synthetic(spec)
    out_dir = Path(args.out_dir)
    manifest_path = write_manifest(manifest, out_dir)
    emb_dir = out_dir / "embeddings"
    emb_files = sorted(emb_dir.glob("*.mgem"))
    combined = hashlib.sha256()
    for f in emb_files:
        combined.update(f.name.encode())
        combined.update(f.read_bytes())
    config = {
        "seed": args.seed,
        "n_samples": args.n_samples,
        "dim": args.dim,
        "coarse_labels": args.coarse_labels,
        "fine_per_coarse": args.fine_per_coarse,
        "labels_per_sample": args.labels_per_sample,
        "noise_sigma": args.noise_sigma,
        "out_dir": str(out_dir),
    }
    results = {
        "manifest": str(manifest_path),
        "n_embedding_files": len(emb_files),
        "manifest_sha256": _sha256(manifest_path),
        "embeddings_sha256": combined.hexdigest(),
    }
    return config, results


def _cmd_loss_eval(args):
    cfg = _loss_config_from_args(args)
    manifest = ingest_manifest(args.manifest)
    batch = build_batch(manifest, cfg)
    if args.losses == "auto":
        wanted = ["clip", "soft_clip", "pointwise"]
        if batch.n_levels >= 2:
            wanted.append("smooth_kl")
        wanted.append("mgll")
    else:
        wanted = [w.strip() for w in args.losses.split(",") if w.strip()]
    level = args.level
    values = {}
    for which in wanted:
        if which == "clip":
            values[which] = clip_loss(batch, level, cfg).value
        elif which == "soft_clip":
            values[which] = float(
                np.mean([soft_clip_loss(batch, g, cfg).value for g in range(batch.n_levels)])
            )
        elif which == "pointwise":
            values[which] = float(
                np.mean([pointwise_loss(batch, g, cfg).value for g in range(batch.n_levels)])
            )
        elif which == "smooth_kl":
            values[which] = smooth_kl_loss(batch, cfg).value
        elif which == "mgll":
            values[which] = mgll_loss(batch, cfg).value
        else:
            raise ConfigError(f"unknown loss {which!r}; choose from {LOSS_SELECTORS}")
    for name, value in values.items():
        print(f"{name} = {value:.12g}")
    config = {"manifest": str(args.manifest), "losses": args.losses, "level": args.level}
    config.update(_loss_flag_config(args))
    return config, {"losses": values}


def _cmd_gradcheck(args):
    cfg = _loss_config_from_args(args)
    batch = random_batch(
        args.seed,
        n_samples=args.n_samples,
        dim=args.dim,
        texts_per_level=tuple([args.texts_per_level] * args.levels),
        max_labels=args.max_labels,
    )
    report = finite_difference_check(
        batch, cfg, args.loss,
        step=args.step, probes=args.probes, seed=args.seed,
        precision=args.precision,
    )
    config = {
        "loss": args.loss,
        "seed": args.seed,
        "n_samples": args.n_samples,
        "dim": args.dim,
        "levels": args.levels,
        "texts_per_level": args.texts_per_level,
        "max_labels": args.max_labels,
        "step": args.step,
        "probes": args.probes,
        "precision": args.precision,
    }
    config.update(_loss_flag_config(args))
    return config, report.to_dict()


def _cmd_train(args):
    cfg = _loss_config_from_args(args)
    manifest = ingest_manifest(args.manifest)
    batch = build_batch(manifest, cfg)
    if args.init == "random":
        if args.seed is None:
            raise ConfigError("--init random requires --seed")
        rng = np.random.default_rng(args.seed)
        batch = batch.with_arrays(
            row_normalize(rng.standard_normal(batch.images.shape)),
            [lvl.texts for lvl in batch.levels],
        )
    dcfg = DescentConfig(
        step_size=args.step_size,
        max_iters=args.max_iters,
        tolerance=args.tolerance,
        renormalize=not args.no_renormalize,
        seed=args.seed or 0,
    )
    traj = descend(
        batch, cfg, dcfg, args.loss,
        train_images=True, train_texts=args.train_texts,
        level=args.level,
    )
    print(f"final_loss = {traj.losses[-1]:.12g}")
    config = {
        "manifest": str(args.manifest),
        "loss": args.loss,
        "step_size": args.step_size,
        "max_iters": args.max_iters,
        "tolerance": args.tolerance,
        "init": args.init,
        "seed": args.seed,
        "level": args.level,
        "train_texts": args.train_texts,
        "no_renormalize": args.no_renormalize,
    }
    config.update(_loss_flag_config(args))
    results = {
        "initial_loss": traj.losses[0],
        "final_loss": traj.losses[-1],
        "iterations": traj.iterations,
        "converged": traj.converged,
    }
    return config, results


def _ablate_one_seed(packed):
    manifest_path, ladder, loss_flags, dcfg_dict, split_seed, train_fraction = packed
    manifest = ingest_manifest(manifest_path)
    cfg = LossConfig(
        tau=loss_flags["tau"],
        alpha1=loss_flags["alpha1"],
        alpha2=loss_flags["alpha2"],
        alpha3=loss_flags["alpha3"],
        weights_mode=loss_flags["weights_mode"],
        kl_grad_mode={"exact": "exact", "approx": "approximate"}[loss_flags["kl_grad"]],
        pointwise_tau=loss_flags["pointwise_tau"],
    )
    variants = LADDERS[ladder](cfg)
    dcfg = DescentConfig(**dcfg_dict)
    return ablation_run(
        manifest, variants, dcfg, split_seed, train_fraction=train_fraction
    )


def render_table(rows: list[dict]) -> str:
    """Aligned-column text rendering of ablation rows."""
    if not rows:
        return "(no rows)"
    headers = ["variant", "seed", "auc", "map", "acc", "final_loss", "iters"]
    cells = [
        [
            r["variant"],
            str(r["split_seed"]),
            f"{r['auc']:.4f}",
            f"{r['map']:.4f}",
            f"{r['acc']:.4f}",
            f"{r['final_loss']:.6g}",
            str(r["iterations"]),
        ]
        for r in rows
    ]
    widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(headers)]
    def fmt(row):
        return "  ".join(s.ljust(w) for s, w in zip(row, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(c) for c in cells)
    return "\n".join(lines)


def _cmd_ablate(args):
    dcfg_dict = {
        "step_size": args.step_size,
        "max_iters": args.max_iters,
        "tolerance": args.tolerance,
        "renormalize": True,
        "seed": args.seed,
    }
    loss_flags = _loss_flag_config(args)
    seeds = [args.seed + i for i in range(args.seeds)]
    packed = [
        (str(args.manifest), args.ladder, loss_flags, dcfg_dict, s, args.train_fraction)
        for s in seeds
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            per_seed = list(pool.map(_ablate_one_seed, packed))
    else:
        per_seed = [_ablate_one_seed(p) for p in packed]
    rows = [row for batch_rows in per_seed for row in batch_rows]
    print(render_table(rows))
    config = {
        "manifest": str(args.manifest),
        "ladder": args.ladder,
        "seed": args.seed,
        "seeds": args.seeds,
        "step_size": args.step_size,
        "max_iters": args.max_iters,
        "tolerance": args.tolerance,
        "train_fraction": args.train_fraction,
        "jobs": args.jobs,
    }
    config.update(loss_flags)
    return config, {"rows": rows}


def _cmd_metrics(args):
    scores = read_mgem(args.scores)
    truth = read_mgem(args.truth)
    report = evaluate(ScoredLabels(scores=scores, truth=truth), threshold=args.threshold)
    print(f"auc = {report.auc:.12g}")
    print(f"map = {report.map:.12g}")
    print(f"acc = {report.acc:.12g}")
    config = {
        "scores": str(args.scores),
        "truth": str(args.truth),
        "threshold": args.threshold,
    }
    return config, report.to_dict()


# --- parser / dispatch -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgll",
        description="Multi-granular multi-label contrastive objectives at desk scale",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-synth", help="generate a synthetic two-level corpus")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n-samples", type=int, default=2000)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--coarse-labels", type=int, default=8)
    g.add_argument("--fine-per-coarse", type=int, default=3)
    g.add_argument("--labels-per-sample", type=int, default=3)
    g.add_argument("--noise-sigma", type=float, default=0.3)
    g.set_defaults(handler=_cmd_gen_synth)

    le = subs.add_parser("loss-eval", help="evaluate losses on a manifest")
    le.add_argument("--manifest", required=True)
    le.add_argument("--losses", default="auto",
                    help="comma list of losses, or 'auto' for all applicable")
    le.add_argument("--level", type=int, default=0,
                    help="designated level for the clip baseline")
    _add_loss_flags(le)
    le.set_defaults(handler=_cmd_loss_eval)

    gc = subs.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--loss", choices=LOSS_SELECTORS, required=True)
    gc.add_argument("--seed", type=int, required=True)
    gc.add_argument("--n-samples", type=int, default=8)
    gc.add_argument("--dim", type=int, default=16)
    gc.add_argument("--levels", type=int, default=2)
    gc.add_argument("--texts-per-level", type=int, default=6)
    gc.add_argument("--max-labels", type=int, default=2)
    gc.add_argument("--step", type=float, default=1e-6)
    gc.add_argument("--probes", type=int, default=64)
    gc.add_argument("--precision", choices=("longdouble", "mpmath"),
                    default="longdouble")
    _add_loss_flags(gc)
    gc.set_defaults(handler=_cmd_gradcheck)

    tr = subs.add_parser("train", help="projected gradient descent on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--loss", choices=LOSS_SELECTORS, required=True)
    tr.add_argument("--step-size", type=float, default=0.5)
    tr.add_argument("--max-iters", type=int, default=200)
    tr.add_argument("--tolerance", type=float, default=1e-10)
    tr.add_argument("--init", choices=("manifest", "random"), default="manifest")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--level", type=int, default=None)
    tr.add_argument("--train-texts", action="store_true")
    tr.add_argument("--no-renormalize", action="store_true")
    _add_loss_flags(tr)
    tr.set_defaults(handler=_cmd_train)

    ab = subs.add_parser("ablate", help="train and score ladder variants")
    ab.add_argument("--manifest", required=True)
    ab.add_argument("--ladder", choices=sorted(LADDERS), default="paper")
    ab.add_argument("--seed", type=int, required=True,
                    help="base split seed; seed+i is used for run i")
    ab.add_argument("--seeds", type=int, default=1)
    ab.add_argument("--step-size", type=float, default=2.0)
    ab.add_argument("--max-iters", type=int, default=300)
    ab.add_argument("--tolerance", type=float, default=1e-10)
    ab.add_argument("--train-fraction", type=float, default=0.8)
    ab.add_argument("--jobs", type=int, default=1)
    _add_loss_flags(ab)
    ab.set_defaults(handler=_cmd_ablate)

    me = subs.add_parser("metrics", help="score a saved score/truth matrix pair")
    me.add_argument("--scores", required=True)
    me.add_argument("--truth", required=True)
    me.add_argument("--threshold", type=float, default=0.5)
    me.set_defaults(handler=_cmd_metrics)

    for sub in (g, le, gc, tr, ab, me):
        sub.add_argument("--out", default=None, help="write the JSON report here")
    return parser


def rebuild_argv(report: dict) -> list[str]:
    """Reconstruct the argv that reproduces a report's run from its config echo."""
    argv = [report["command"]]
    for key, value in report["config"].items():
        flag = "--" + key.replace("_", "-")
        if value is None:
            continue
        if isinstance(value, bool):
            if value:
                argv.append(flag)
            continue
        argv.extend([flag, str(value)])
    return argv


def main(argv=None) -> int:
    level_name = os.environ.get("MGLL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level_name, logging.WARNING))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    started = time.time()
    try:
        config, results = args.handler(args)
    except ConfigError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except MGLLError as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    report = {
        "command": args.command,
        "config": config,
        "results": results,
        "wall_clock_s": time.time() - started,
        "version": __version__,
    }
    payload = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(payload + "\n")
    else:
        print(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
