"""Accuracy metrics, confusion matrices, the cluster-count sweep and the ablation runner.

CSV schemas::

    sweep      k,seed,val_acc
    ablation   name,seed,val_acc
    confusion  header "true\\pred,<class names...>", then one row per true class
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from .model import GroupActivityNet
from .pseudo import pseudo_label_dataset
from .streams import dataset_streams
from .dataset import stack_clips
from .train import predict_logits, train

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    group_accuracy: float
    individual_accuracy: float | None
    confusion: np.ndarray  # (G, G) counts, rows = true class, cols = predicted
    per_class_recall: np.ndarray  # (G,), nan for classes without support

    def summary(self):
        ind = "n/a" if self.individual_accuracy is None else f"{self.individual_accuracy:.4f}"
        return f"group_acc={self.group_accuracy:.4f} indiv_acc={ind}"


def report_from_logits(group_logits, y_group, n_groups, indiv_logits=None, y_indiv=None, mask=None):
    """Build an EvalReport from raw logits; argmax ties go to the lowest class id."""
    group_logits = np.asarray(group_logits)
    y_group = np.asarray(y_group, dtype=np.int64)
    if len(y_group) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    pred = np.argmax(group_logits, axis=1)  # first maximum = lowest id
    conf = np.zeros((n_groups, n_groups), dtype=np.int64)
    np.add.at(conf, (y_group, pred), 1)
    support = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(conf) / np.maximum(support, 1), np.nan)
    acc = float(np.trace(conf) / conf.sum())
    ind = None
    if indiv_logits is not None and y_indiv is not None:
        use = (np.asarray(y_indiv) >= 0) & (np.ones_like(y_indiv, bool) if mask is None else mask)
        if use.any():
            ind = float(np.mean(np.argmax(indiv_logits, axis=-1)[use] == np.asarray(y_indiv)[use]))
    return EvalReport(acc, ind, conf, recall)


def evaluate(params, ds, model_cfg, use_gd=True, batch=256):
    """Evaluate ``params`` on every clip of ``ds``.

    Individual accuracy is reported only when the dataset carries real (not
    pseudo) action labels from the same label space as the model's head.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    geo = (ds.n_actors, ds.n_frames, ds.layout.n_joints)
    if geo != (model_cfg.K, model_cfg.T, model_cfg.N) or ds.n_groups != model_cfg.G:
        raise ValueError(f"dataset geometry K,T,N={geo}, G={ds.n_groups} does not match the model")
    x, _ = dataset_streams(ds, use_gd=use_gd)
    _, mask, yg, yi = stack_clips(ds)
    net = GroupActivityNet(model_cfg)
    params = {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}
    g, i = predict_logits(net, params, x.astype(np.float32), mask, batch=batch)
    real = ds.has_action_labels and not ds.pseudo_labeled and ds.n_actions == model_cfg.A
    return report_from_logits(g, yg, model_cfg.G, i if real else None, yi if real else None, mask)


def write_confusion_csv(path, report, class_names):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, report.confusion):
            w.writerow([name] + [int(v) for v in row])


# ---------------------------------------------------------------------------
# experiment runners

def run_one(train_ds, val_ds, model_cfg, train_cfg, pseudo_cfg=None):
    """Train once and return the validation group accuracy of the final parameters.

    With ``label_source == "pseudo"`` and a ground-truth ``train_ds`` the pseudo
    pipeline is run first (k from ``pseudo_cfg``) and the model's A becomes k.
    """
    ds = train_ds
    if train_cfg.label_source == "pseudo" and not train_ds.pseudo_labeled:
        if pseudo_cfg is None:
            raise ValueError("pseudo label source needs a PseudoConfig")
        ds, _ = pseudo_label_dataset(train_ds, pseudo_cfg)
    mc = replace(model_cfg, A=ds.n_actions) if ds.has_action_labels else model_cfg
    result = train(ds, val_ds, mc, train_cfg)
    return evaluate(result.params, val_ds, mc, use_gd=train_cfg.use_gd).group_accuracy


def sweep_k(train_ds, val_ds, ks, model_cfg, train_cfg, pseudo_cfg, seeds=None, out_dir=None):
    """Validation accuracy after pseudo-label training for each cluster count k.

    Returns rows ``{"k", "seed", "val_acc"}`` in (k, seed) order.  Each row
    re-clusters with ``seed`` and trains with ``seed``.
    """
    ks = list(ks)
    if not ks or any(int(k) < 1 for k in ks):
        raise ValueError("ks must be a non-empty list of integers >= 1")
    seeds = [train_cfg.seed] if seeds is None else list(seeds)
    rows = []
    for k in ks:
        for seed in seeds:
            acc = run_one(train_ds, val_ds, model_cfg,
                          replace(train_cfg, label_source="pseudo", seed=seed),
                          replace(pseudo_cfg, k=int(k), seed=seed))
            log.info("sweep k=%d seed=%d val_acc=%.4f", k, seed, acc)
            rows.append({"k": int(k), "seed": int(seed), "val_acc": acc})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_rows_csv(os.path.join(out_dir, "sweep_k.csv"), rows, ["k", "seed", "val_acc"])
        curve = mean_by(rows, "k")
        write_line_svg(os.path.join(out_dir, "sweep_k.svg"), [c[0] for c in curve],
                       [c[1] for c in curve], xlabel="k (clusters)", ylabel="val group accuracy")
    return rows


def run_ablation_suite(train_ds, val_ds, configs, model_cfg, seeds=(0,), pseudo_cfg=None, out_dir=None):
    """One train+eval per (named config, seed); rows ``{"name", "seed", "val_acc"}``."""
    rows = []
    for name, cfg in configs:
        for seed in seeds:
            pc = replace(pseudo_cfg, seed=seed) if pseudo_cfg is not None else None
            acc = run_one(train_ds, val_ds, model_cfg, replace(cfg, seed=seed), pc)
            log.info("ablation %s seed=%d val_acc=%.4f", name, seed, acc)
            rows.append({"name": name, "seed": int(seed), "val_acc": acc})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_rows_csv(os.path.join(out_dir, "ablation.csv"), rows, ["name", "seed", "val_acc"])
        with open(os.path.join(out_dir, "ablation.txt"), "w") as fh:
            fh.write(format_table(rows))
    return rows


# ---------------------------------------------------------------------------
# output helpers

def mean_by(rows, key):
    """[(key value, mean val_acc, std val_acc)] in first-appearance order."""
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r["val_acc"])
    return [(k, float(np.mean(v)), float(np.std(v))) for k, v in groups.items()]


def format_table(rows):
    """Plain-text table: method name, mean ± std accuracy (%) over seeds, seed count."""
    stats = mean_by(rows, "name")
    width = max([len("Method")] + [len(str(n)) for n, _, _ in stats])
    lines = [f"{'Method':<{width}}  Accuracy (%)     seeds", "-" * (width + 25)]
    counts = {}
    for r in rows:
        counts[r["name"]] = counts.get(r["name"], 0) + 1
    for name, m, s in stats:
        lines.append(f"{name:<{width}}  {100 * m:6.2f} ± {100 * s:5.2f}  {counts[name]:5d}")
    return "\n".join(lines) + "\n"


def write_rows_csv(path, rows, cols):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def write_line_svg(path, xs, ys, xlabel="", ylabel="", width=480, height=320):
    """Self-contained SVG line plot with markers and axis ticks."""
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    ml, mr, mt, mb = 60, 20, 20, 50
    pw, ph = width - ml - mr, height - mt - mb
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    y0, y1 = 0.0, 1.0

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + (1 - (y - y0) / (y1 - y0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>']
    for t in np.linspace(0, 1, 6):
        parts.append(f'<text x="{ml - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.1f}</text>')
        parts.append(f'<line x1="{ml}" y1="{py(t):.1f}" x2="{ml + pw}" y2="{py(t):.1f}" stroke="#ddd"/>')
    for x in xs:
        parts.append(f'<text x="{px(x):.1f}" y="{mt + ph + 16}" text-anchor="middle">{x:g}</text>')
    if xs:
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{px(x):.1f}" cy="{py(y):.1f}" r="3.5" fill="#1f77b4"/>')
    parts.append(f'<text x="{ml + pw / 2}" y="{height - 10}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {mt + ph / 2})">{ylabel}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
