"""Command line entry points.

Subcommands cover the full workflow: synthesize the two-domain benchmark,
train the adaptation model, self-train on pseudo-labels, score checkpoints,
render clouds to images, export embeddings, and audit gradients.

Exit codes: 0 success, 1 violated precondition or diverged training (the
message names what was violated), 2 filesystem problems.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import evaluate as ev
from . import tensor as tt
from .datagen import SHAPE_CLASSES, DomainSpec, generate_benchmark, save_benchmark
from .errors import ContractError, DivergenceError
from .models import build_models, load_checkpoint, save_checkpoint
from .pointcloud import load_dataset, load_xyz
from .render import CameraRig, render_multiview, write_pgm
from .trainer import TrainConfig, TrainState, fit, spst_finetune

NUM_CLASSES = len(SHAPE_CLASSES)

_OVERRIDES = (
    ("seed", "seed"),
    ("solver", "solver"),
    ("epochs", "epochs"),
    ("views", "m_views"),
    ("image_size", "image_size"),
    ("spst_threshold", "spst_threshold"),
)


def _config_from(args):
    """Layered configuration: defaults, then file, then explicit flags."""
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    updates = {}
    for flag, field in _OVERRIDES:
        value = getattr(args, flag, None)
        if value is not None:
            updates[field] = value
    return cfg.replace(**updates) if updates else cfg


def _write_run_manifest(out_dir, command, cfg):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
    }
    path = os.path.join(out_dir, "run.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _domain_specs(cfg):
    source = DomainSpec(cfg.source_noise, cfg.source_crop, cfg.source_density, cfg.source_bias)
    target = DomainSpec(cfg.target_noise, cfg.target_crop, cfg.target_density, cfg.target_bias)
    return source, target


def _load_pair(manifest, split, seal_target=True):
    source = load_dataset(manifest, NUM_CLASSES, domain="source", split=split)
    target = load_dataset(manifest, NUM_CLASSES, domain="target", split=split,
                          seal_labels=seal_target)
    return source, target


def _bundle_from_checkpoint(cfg, path):
    bundle = build_models(
        NUM_CLASSES,
        emb_dim=cfg.emb_dim,
        proj_dim=cfg.proj_dim,
        image_size=cfg.image_size,
        clf_hidden=cfg.clf_hidden,
        conv_channels=cfg.conv_channels,
        dropout_rate=cfg.dropout_rate,
        seed=cfg.seed,
    )
    bundle.load_state_arrays(load_checkpoint(path))
    return bundle


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args):
    cfg = _config_from(args)
    spec_s, spec_t = _domain_specs(cfg)
    bench = generate_benchmark(spec_s, spec_t, cfg.per_class_train, cfg.per_class_test, cfg.seed)
    manifest = save_benchmark(bench, args.out)
    _write_run_manifest(args.out, "gen-data", cfg)
    n = sum(len(ds) for ds in bench.values() if ds is not None)
    print(f"wrote {n} clouds across {NUM_CLASSES} classes to {manifest}")
    return 0


def _cmd_train(args):
    cfg = _config_from(args)
    source, target = _load_pair(args.data, "train")
    state = fit(source, target, cfg, out_dir=args.out)
    _write_run_manifest(args.out, "train", cfg)
    print(
        f"trained {cfg.epochs} epochs; best source-val accuracy "
        f"{state.best_val_accuracy:.4f} at epoch {state.best_epoch}"
    )
    print(f"checkpoints: {state.checkpoint_paths['best']}, {state.checkpoint_paths['final']}")
    return 0


def _cmd_spst(args):
    cfg = _config_from(args)
    source, target = _load_pair(args.data, "train")
    bundle = _bundle_from_checkpoint(cfg, args.checkpoint)
    state = TrainState(bundle=bundle, config=cfg)
    out = spst_finetune(state, source, target, cfg, out_dir=args.out)
    _write_run_manifest(args.out, "spst", cfg)
    print(
        f"self-training done after {cfg.spst_rounds} rounds; best source-val "
        f"accuracy {out.best_val_accuracy:.4f}"
    )
    print(f"checkpoint: {out.checkpoint_paths['spst']}")
    return 0


def _cmd_eval(args):
    cfg = _config_from(args)
    bundle = _bundle_from_checkpoint(cfg, args.checkpoint)
    split = args.split
    source, target = _load_pair(args.data, split)
    reports = [
        (f"source_{split}", ev.evaluate(bundle, source)),
        (f"target_{split}", ev.evaluate(bundle, target)),
    ]
    mmd = ev.classwise_mmd(bundle, source, target)
    ev.write_report(args.out, reports, mmd)
    _write_run_manifest(args.out, "eval", cfg)
    for name, rep in reports:
        print(f"{name} accuracy: {rep.accuracy:.4f}")
    print(f"mean same-class mmd: {float(np.nanmean(np.diag(mmd))):.6f}")
    return 0


def _cmd_render(args):
    cfg = _config_from(args)
    cloud = load_xyz(args.input)
    rig = CameraRig(num_views=cfg.m_views)
    stack = render_multiview(cloud, rig, cfg.render_params())
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    for i in range(stack.images.shape[0]):
        write_pgm(stack.images[i], os.path.join(args.out, f"{stem}_view{i:02d}.pgm"))
    print(f"wrote {stack.images.shape[0]} views to {args.out}")
    return 0


def _cmd_export_emb(args):
    cfg = _config_from(args)
    bundle = _bundle_from_checkpoint(cfg, args.checkpoint)
    source, target = _load_pair(args.data, args.split)
    ev.export_embeddings(bundle, [("source", source), ("target", target)], args.out)
    print(f"wrote embeddings for {len(source) + len(target)} clouds to {args.out}")
    return 0


def _cmd_grad_check(args):
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    worst = 0.0
    failures = []
    for kind in sorted(tt.OP_KINDS):
        err = tt.op_gradient_probe(kind, rng)
        worst = max(worst, err)
        status = "ok" if err <= 1e-4 else "FAIL"
        if status == "FAIL":
            failures.append(kind)
        print(f"{kind:28s} max_rel_err {err:.3e}  {status}")
    print(f"worst relative error: {worst:.3e}")
    if failures:
        print("failed: " + ", ".join(failures))
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(p, out_required=True):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int, help="override the config seed")
    if out_required:
        p.add_argument("--out", required=True, help="output directory")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="cotda",
        description="Cross-modal contrastive learning with transport-aligned "
        "adaptation for 3D point cloud classification.",
    )
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize the two-domain benchmark")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the adaptation model")
    _add_common(p)
    p.add_argument("--data", required=True, help="benchmark manifest csv")
    p.add_argument("--solver", choices=("auto", "exact", "sinkhorn"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--views", type=int, help="number of rendered views per cloud")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("spst", help="pseudo-label self-training from a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--spst-threshold", dest="spst_threshold", type=float)
    p.set_defaults(func=_cmd_spst)

    p = sub.add_parser("eval", help="score a checkpoint on both domains")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("render", help="render one cloud to PGM views")
    _add_common(p)
    p.add_argument("--input", required=True, help="xyz point cloud file")
    p.add_argument("--views", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("export-emb", help="dump global features as csv")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", required=True, help="output csv path")
    p.set_defaults(func=_cmd_export_emb)

    p = sub.add_parser("grad-check", help="finite-difference audit of every op")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_grad_check)

    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as err:
        print(f"error: training diverged: {err}", file=sys.stderr)
        if err.checkpoint_path:
            print(f"last usable checkpoint: {err.checkpoint_path}", file=sys.stderr)
        return 1
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
