"""Command-line front end: ``skelgar <subcommand> ...``.

Exit codes: 0 ok, 1 config/usage, 2 I/O or malformed data, 3 numerical
failure, 4 gradient-check failure.  Every successful run ends with a
machine-parsable ``RESULT key=value ...`` line on standard output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__, nn
from .config import ConfigError, ablation_configs, build_train_config, load_config
from .dataset import DatasetError, generate_synthetic, load_dataset, split_dataset, write_dataset
from .evaluate import evaluate, format_table, mean_by, run_ablation_suite, sweep_k, write_confusion_csv
from .model import model_summary
from .pseudo import (PseudoLabelError, actor_ids, assign_pseudolabels, cluster_features,
                     read_assignments, read_feature_file, stand_in_features, write_assignments)
from .streams import assemble_streams, dump_streams, horizontal_flip
from .train import NumericalError, train, write_history_csv

log = logging.getLogger("skelgar")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def result_line(**kv):
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v).replace(" ", "_")
    print("RESULT " + " ".join(f"{k}={fmt(v)}" for k, v in kv.items()))


# ---------------------------------------------------------------------------
# shared helpers

def _run_config(args):
    run = load_config(args.config)
    over = {}
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    for name in ("epochs", "mode", "label_source"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "no_gd", False):
        over["use_gd"] = False
    if over:
        run = replace(run, train=build_train_config(over, run.train))
    if getattr(args, "k", None) is not None:
        try:
            run = replace(run, pseudo=replace(run.pseudo, k=args.k))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return run


def _train_val(args, run):
    """(train, val) from --data / --val, splitting --data when --val is absent."""
    ds = load_dataset(args.data)
    if getattr(args, "val", None):
        return ds, load_dataset(args.val)
    exp = run.experiment
    return split_dataset(ds, exp.train_fraction, exp.split_seed)


def _with_assignments(train_ds, path, k):
    ids, assign = read_assignments(path)
    keep = {c.clip_id for c in train_ds.clips}
    sel = [i for i, (cid, _) in enumerate(ids) if cid in keep]
    k_found = int(assign.max()) + 1 if len(assign) else 0
    return assign_pseudolabels(train_ds, [ids[i] for i in sel], assign[sel], max(k, k_found))


def _parse_int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args):
    run = _run_config(args)
    syn = run.synthetic
    if args.seed is not None:
        syn = replace(syn, seed=args.seed)
    ds = generate_synthetic(syn)
    write_dataset(ds, args.out)
    counts = np.bincount(ds.group_labels(), minlength=ds.n_groups) if len(ds) else []
    print(f"wrote {len(ds)} clips to {args.out}")
    print(f"group classes ({ds.n_groups}): " + ", ".join(
        f"{n}={c}" for n, c in zip(ds.group_classes, counts)))
    print(f"action classes: {ds.n_actions}; K={ds.n_actors} T={ds.n_frames} N={ds.layout.n_joints}")
    result_line(clips=len(ds), groups=ds.n_groups, actions=ds.n_actions, K=ds.n_actors,
                T=ds.n_frames, N=ds.layout.n_joints)
    return EXIT_OK


def cmd_convert(args):
    ds = load_dataset(args.data, n_actors=args.actors, n_frames=args.frames)
    write_dataset(ds, args.out)
    print(f"converted {len(ds)} clips into {args.out}")
    result_line(clips=len(ds), K=ds.n_actors, T=ds.n_frames, N=ds.layout.n_joints)
    return EXIT_OK


def cmd_train(args):
    run = _run_config(args)
    cfg = run.train
    train_ds, val_ds = _train_val(args, run)
    if cfg.label_source == "pseudo":
        if not args.assignments:
            raise UsageError("label_source 'pseudo' needs --assignments (see 'skelgar pseudolabel')")
        train_ds = _with_assignments(train_ds, args.assignments, run.pseudo.k)
    mc = run.model_config(train_ds)
    os.makedirs(args.out, exist_ok=True)
    result = train(train_ds, val_ds, mc, cfg, checkpoint_path=os.path.join(args.out, "checkpoint.bin"))
    nn.save_checkpoint(os.path.join(args.out, "final.bin"), result.params)
    write_history_csv(os.path.join(args.out, "history.csv"), result.history)
    with open(os.path.join(args.out, "model_summary.txt"), "w") as fh:
        fh.write(model_summary(mc))
    last = result.history[-1]
    val = last["val_acc_group"]
    print(f"trained {len(result.history)} epochs ({cfg.mode}); final train acc "
          f"{last['train_acc_group']:.4f}; final val acc " + ("n/a" if val is None else f"{val:.4f}"))
    result_line(epochs=len(result.history), mode=cfg.mode, final_train_acc=last["train_acc_group"],
                final_val_acc="nan" if val is None else val, best_epoch=result.best_epoch)
    return EXIT_OK


def _model_cfg_for_checkpoint(run, ds, params):
    if "indiv.w" not in params:
        raise DatasetError("checkpoint has no 'indiv.w' tensor")
    mc = run.model_config(ds, A=params["indiv.w"].shape[1])
    expected = {f"{name}.{s}": (shape if s == "w" else shape[-1:])
                for name, shape in mc.geometry() for s in ("w", "b")}
    for k, shape in expected.items():
        if k not in params or params[k].shape != tuple(shape):
            raise ConfigError(f"checkpoint tensor {k} does not match the model built from config and data")
    return mc


def cmd_eval(args):
    run = _run_config(args)
    ds = load_dataset(args.data)
    params = nn.load_checkpoint(args.checkpoint)
    mc = _model_cfg_for_checkpoint(run, ds, params)
    rep = evaluate(params, ds, mc, use_gd=run.train.use_gd)
    print(f"clips: {len(ds)}  {rep.summary()}")
    for name, r in zip(ds.group_classes, rep.per_class_recall):
        print(f"  recall {name}: {r:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_confusion_csv(os.path.join(args.out, "confusion.csv"), rep, ds.group_classes)
        with open(os.path.join(args.out, "report.json"), "w") as fh:
            json.dump({"group_accuracy": rep.group_accuracy,
                       "individual_accuracy": rep.individual_accuracy,
                       "per_class_recall": [None if np.isnan(v) else float(v) for v in rep.per_class_recall],
                       "confusion": rep.confusion.tolist()}, fh, indent=1)
            fh.write("\n")
    result_line(clips=len(ds), group_acc=rep.group_accuracy,
                indiv_acc="nan" if rep.individual_accuracy is None else rep.individual_accuracy)
    return EXIT_OK


def cmd_pseudolabel(args):
    run = _run_config(args)
    train_ds, _ = _train_val(args, run)
    if args.stand_in:
        feats = stand_in_features(train_ds)
    else:
        feats = read_feature_file(args.features, train_ds)
        have = set(feats.ids)
        missing = [i for i in actor_ids(train_ds) if i not in have]
        if missing:
            shown = ", ".join(f"{c}:{a}" for c, a in missing[:20])
            more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
            raise PseudoLabelError(f"feature file misses {len(missing)} actor(s): {shown}{more}")
        keep = {c.clip_id for c in train_ds.clips}
        sel = [i for i, (cid, _) in enumerate(feats.ids) if cid in keep]
        feats = type(feats)(feats.rows[sel], [feats.ids[i] for i in sel])
    if run.pseudo.k > len(feats):
        raise PseudoLabelError(f"k={run.pseudo.k} exceeds the number of actors ({len(feats)})")
    res = cluster_features(feats, run.pseudo)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_assignments(args.out, feats.ids, res.assignments)
    sizes = np.bincount(res.assignments, minlength=run.pseudo.k)
    print(f"clustered {len(feats)} actors (dim {feats.dim}) into k={run.pseudo.k} clusters; "
          f"inertia {res.inertia:.6g}")
    top = max(int(sizes.max()), 1)
    for j, s in enumerate(sizes):
        print(f"  cluster {j:3d} {int(s):6d} " + "#" * int(round(40 * s / top)))
    result_line(actors=len(feats), k=run.pseudo.k, nonempty=int(np.sum(sizes > 0)), inertia=res.inertia)
    return EXIT_OK


def cmd_sweep_k(args):
    run = _run_config(args)
    train_ds, val_ds = _train_val(args, run)
    A = train_ds.n_actions
    ks = _parse_int_list(args.ks) if args.ks else (list(run.experiment.ks) or [A, 2 * A, 4 * A])
    seeds = _parse_int_list(args.seeds) if args.seeds else list(run.experiment.seeds)
    rows = sweep_k(train_ds, val_ds, ks, run.model_config(train_ds), run.train, run.pseudo,
                   seeds=seeds, out_dir=args.out)
    curve = mean_by(rows, "k")
    for k, m, s in curve:
        print(f"k={k:4d}  val_acc {m:.4f} ± {s:.4f}")
    best = max(curve, key=lambda c: c[1])
    result_line(points=len(curve), best_k=best[0], best_acc=best[1])
    return EXIT_OK


def cmd_ablate(args):
    run = _run_config(args)
    train_ds, val_ds = _train_val(args, run)
    seeds = _parse_int_list(args.seeds) if args.seeds else list(run.experiment.seeds)
    rows = run_ablation_suite(train_ds, val_ds, ablation_configs(run), run.model_config(train_ds),
                              seeds=seeds, pseudo_cfg=run.pseudo, out_dir=args.out)
    print(format_table(rows), end="")
    result_line(rows=len(mean_by(rows, "name")), runs=len(rows))
    return EXIT_OK


def cmd_gradcheck(args):
    from . import gradcheck
    checks = gradcheck.run_all(seed=args.seed or 0, constant=args.constant,
                               sign_bug_layer=args.inject_sign_bug)
    worst = max(checks, key=lambda c: c.max_error)
    for c in checks:
        print(f"{c.name:24s} max_rel_err={c.max_error:.3e} checked={c.n_checked} "
              f"{'ok' if c.ok else 'FAIL'}")
    failed = [c.name for c in checks if not c.ok]
    result_line(layers=len(checks), max_rel_err=worst.max_error,
                failed=",".join(failed) if failed else "none")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_flip_dump(args):
    ds = load_dataset(args.data)
    clips = ds.clips
    if args.clip:
        by_id = {c.clip_id: c for c in ds.clips}
        unknown = [c for c in args.clip if c not in by_id]
        if unknown:
            raise UsageError(f"unknown clip id(s): {', '.join(unknown)}")
        clips = [by_id[c] for c in args.clip]
    os.makedirs(args.out, exist_ok=True)
    for clip in clips:
        base = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in clip.clip_id)
        dump_streams(os.path.join(args.out, f"{base}.streams.bin"), assemble_streams(clip, ds.layout))
        flipped = horizontal_flip(clip, ds.layout, ds.label_flip_map)
        dump_streams(os.path.join(args.out, f"{base}.flipped.streams.bin"),
                     assemble_streams(flipped, ds.layout))
    print(f"dumped streams of {len(clips)} clip(s) and their flips to {args.out}")
    result_line(clips=len(clips), files=2 * len(clips))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def build_parser():
    p = argparse.ArgumentParser(prog="skelgar", description="Skeleton-based group activity recognition.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True, out_help="output directory"):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="override the training seed")
        sp.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory, manifest or clip file")
        if out:
            sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("generate", help="write a synthetic dataset")
    common(sp, data=False)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("convert", help="load any supported clip input and rewrite it as a dataset directory")
    common(sp)
    sp.add_argument("--actors", type=int, help="pad clips to this many actors")
    sp.add_argument("--frames", type=int, help="center-crop clips to this many frames")
    sp.set_defaults(func=cmd_convert)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--val", help="validation dataset (default: split --data)")
    sp.add_argument("--assignments", help="pseudo-label assignment file")
    sp.add_argument("--mode", choices=["end_to_end", "two_stage", "group_only"])
    sp.add_argument("--label-source", dest="label_source", choices=["ground_truth", "pseudo", "none"])
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--no-gd", action="store_true", help="zero the pivot-difference stream")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", help="directory for confusion.csv and report.json")
    sp.add_argument("--no-gd", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("pseudolabel", help="cluster per-actor features into pseudo action labels")
    common(sp, out_help="assignment file to write")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--features", help="feature file (text or binary tensor record)")
    src.add_argument("--stand-in", action="store_true", help="use the built-in hand-crafted descriptor")
    sp.add_argument("--val", help="if given, --data is used whole instead of split")
    sp.add_argument("--k", type=int, help="number of clusters")
    sp.set_defaults(func=cmd_pseudolabel)

    sp = sub.add_parser("sweep-k", help="validation accuracy versus cluster count")
    common(sp)
    sp.add_argument("--val")
    sp.add_argument("--ks", help="comma-separated cluster counts (default A,2A,4A)")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_sweep_k)

    sp = sub.add_parser("ablate", help="run the ablation table")
    common(sp)
    sp.add_argument("--val")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer and a tiny model")
    common(sp, data=False, out=False)
    sp.add_argument("--constant", action="store_true", help="check an all-zero (constant-output) model")
    sp.add_argument("--inject-sign-bug", metavar="LAYER", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("flip-dump", help="dump stream tensors of clips and their horizontal flips")
    common(sp)
    sp.add_argument("--clip", action="append", help="clip id (repeatable; default all)")
    sp.set_defaults(func=cmd_flip_dump)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, UsageError, PseudoLabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation failures (e.g. mode/label mismatch against the data)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
