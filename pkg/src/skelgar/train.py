"""Adam, the step learning-rate schedule and the three training regimes."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dataset import stack_clips
from .model import GroupActivityNet, init_model, param_group, total_loss
from .streams import dataset_streams

log = logging.getLogger(__name__)

MODES = ("end_to_end", "two_stage", "group_only")
LABEL_SOURCES = ("ground_truth", "pseudo", "none")
# samples per gradient chunk; fixed so results do not depend on the thread count
CHUNK = 32


class NumericalError(FloatingPointError):
    def __init__(self, msg, epoch=None, batch=None):
        super().__init__(msg)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class AdamHyper:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lr0: float = 0.001

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_init(params):
    return AdamState(0, {k: np.zeros_like(p) for k, p in params.items()},
                     {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params, grads, state, hyper, lr):
    """One bias-corrected Adam update; returns new (params, state).

    Parameters without an entry in ``grads`` are left untouched, moments included.
    """
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ValueError(f"gradient {k!r} has shape {g.shape}, parameter has {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in {k!r}")
    t = state.step + 1
    b1, b2, eps = hyper.beta1, hyper.beta2, hyper.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = dict(params), dict(state.m), dict(state.v)
    for k, g in grads.items():
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p[k] = (params[k] - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(params[k].dtype)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(t, new_m, new_v)


def lr_schedule(epoch, lr0, step_epochs=30, factor=10):
    """lr0 divided by ``factor`` once every ``step_epochs`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return lr0 / factor ** (epoch // step_epochs)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    hyper: AdamHyper = AdamHyper()
    lam: float = 0.7
    mode: str = "end_to_end"
    use_gd: bool = True
    augment: bool = False
    label_source: str = "ground_truth"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"label_source must be one of {LABEL_SOURCES}")
        if self.label_source == "none" and self.mode != "group_only":
            raise ValueError("label_source 'none' requires mode 'group_only'")
        if self.epochs < 1 or self.batch_size < 1 or self.threads < 1:
            raise ValueError("epochs, batch_size and threads must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def effective_lambda(self):
        return 0.0 if self.mode == "group_only" else self.lam


@dataclass
class TrainResult:
    params: dict
    history: list  # one dict per epoch
    best_params: dict
    best_epoch: int


class _Arrays:
    """Precomputed float32 streams and labels for one dataset."""

    def __init__(self, ds, use_gd, flip=False):
        x, _ = dataset_streams(ds, use_gd=use_gd, flip=flip)
        self.x = x.astype(np.float32)
        _, self.mask, self.yg, self.yi = stack_clips(ds)
        if flip and ds.label_flip_map:
            from .streams import horizontal_flip
            flipped = [horizontal_flip(c, ds.layout, ds.label_flip_map) for c in ds.clips]
            self.yg = np.array([c.group_label for c in flipped], dtype=np.int64)
            self.yi = np.array([c.action_labels if c.action_labels is not None
                                else np.full(ds.n_actors, -1) for c in flipped], dtype=np.int64)


def _check_inputs(train_ds, model_cfg, cfg):
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    geo = (train_ds.n_actors, train_ds.n_frames, train_ds.layout.n_joints)
    if geo != (model_cfg.K, model_cfg.T, model_cfg.N):
        raise ValueError(f"dataset geometry K,T,N={geo} does not match model "
                         f"{(model_cfg.K, model_cfg.T, model_cfg.N)}")
    if train_ds.n_groups != model_cfg.G:
        raise ValueError(f"dataset has {train_ds.n_groups} group classes, model G={model_cfg.G}")
    pseudo = getattr(train_ds, "pseudo_labeled", False)
    if cfg.label_source == "pseudo" and not pseudo:
        raise ValueError("label_source 'pseudo' needs a dataset with assigned pseudo labels")
    if cfg.label_source == "ground_truth" and pseudo:
        raise ValueError("dataset carries pseudo labels but label_source is 'ground_truth'")
    if cfg.mode != "group_only":
        if not train_ds.has_action_labels:
            raise ValueError(f"mode {cfg.mode!r} needs individual labels but the dataset has none")
        if train_ds.n_actions != model_cfg.A:
            raise ValueError(f"dataset has {train_ds.n_actions} action classes, model A={model_cfg.A}")


def _chunks(idx):
    return [idx[i:i + CHUNK] for i in range(0, len(idx), CHUNK)]


def _batch_grads(net, params, data, w_group, lam, use_indiv, skip_branches, pool):
    """Mean-loss gradients over a batch given as a list of (arrays, indices) parts."""
    items = []
    for part, (arr, idx) in enumerate(data):
        for c in _chunks(idx):
            items.append((part, arr, c))
    total = sum(len(c) for _, _, c in items)

    def work(item):
        part, arr, c = item
        out = net.forward(params, arr.x[c], arr.mask[c])
        parts, d_i, d_g = total_loss(out, arr.yg[c], arr.yi[c] if use_indiv else None,
                                     lam, arr.mask[c], w_group=w_group)
        scale = len(c) / total
        g = net.backward(params, out, d_i * scale, d_g * scale, skip_branches=skip_branches)
        pred_g = np.argmax(out.group_logits, axis=1)
        correct_g = int(np.sum(pred_g == arr.yg[c]))
        pred_i = np.argmax(out.individual_logits, axis=2)
        use = arr.mask[c] & (arr.yi[c] >= 0)
        correct_i = int(np.sum((pred_i == arr.yi[c]) & use))
        return part, g, parts, len(c), correct_g, correct_i, int(use.sum())

    results = list(pool.map(work, items)) if pool else [work(it) for it in items]
    grads = None
    # loss sums and sample count over every sample; accuracy tallies over part 0
    stats = np.zeros(7)
    for part, g, parts, n, cg, ci, ni in results:
        if grads is None:
            grads = {k: v.copy() for k, v in g.items()}
        else:
            for k in grads:
                grads[k] += g[k]
        stats[:3] += (parts.group * n, parts.individual * n, n)
        if part == 0:
            stats[3:] += (cg, ci, ni, n)
    return grads, stats


def predict_logits(net, params, x, mask, batch=256):
    """Group and individual logits for arrays x (n, 3, K, T, N, 3); float64 output."""
    gl, il = [], []
    for i in range(0, len(x), batch):
        out = net.forward(params, x[i:i + batch], mask[i:i + batch])
        gl.append(out.group_logits.astype(np.float64))
        il.append(out.individual_logits.astype(np.float64))
    n_g, n_a = net.cfg.G, net.cfg.A
    if not gl:
        return np.zeros((0, n_g)), np.zeros((0, net.cfg.K, n_a))
    return np.concatenate(gl), np.concatenate(il)


def _accuracy(net, params, arr):
    if arr is None or len(arr.yg) == 0:
        return None
    g, _ = predict_logits(net, params, arr.x, arr.mask)
    return float(np.mean(np.argmax(g, axis=1) == arr.yg))


def train(train_ds, val_ds, model_cfg, cfg, checkpoint_path=None, init_params=None):
    """Train from scratch (or from ``init_params``) and return a TrainResult.

    The history has one row per epoch with keys epoch, stage, lr, L_G, L_I
    (None in group_only mode), train_acc_group, train_acc_indiv, val_acc_group.
    Training accuracies are tallied on un-augmented samples as they pass
    through the network during the epoch.
    """
    _check_inputs(train_ds, model_cfg, cfg)
    net = GroupActivityNet(model_cfg)
    params = init_params if init_params is not None else init_model(model_cfg, cfg.seed)
    params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
    tr = _Arrays(train_ds, cfg.use_gd)
    tr_flip = _Arrays(train_ds, cfg.use_gd, flip=True) if cfg.augment else None
    va = _Arrays(val_ds, cfg.use_gd) if val_ds is not None and len(val_ds) else None

    if cfg.mode == "two_stage":
        n1 = max(1, cfg.epochs // 2)
        stages = [("action", n1, 0.0, 1.0, {"branches", "fusion", "indiv"}),
                  ("group", cfg.epochs - n1, 1.0, 0.0, {"fusion", "group"})]
    elif cfg.mode == "group_only":
        stages = [("joint", cfg.epochs, 1.0, 0.0, {"branches", "fusion", "group"})]
    else:
        stages = [("joint", cfg.epochs, 1.0, cfg.lam, {"branches", "fusion", "indiv", "group"})]

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    history, best_acc, best_epoch, best_params = [], -1.0, -1, params
    epoch = 0
    try:
        for stage, n_epochs, w_group, lam, trainable in stages:
            state = adam_init(params)
            use_indiv = lam > 0
            skip_branches = "branches" not in trainable
            for _ in range(n_epochs):
                lr = lr_schedule(epoch, cfg.hyper.lr0)
                rng = np.random.default_rng([cfg.seed, epoch])
                order = rng.permutation(len(tr.yg))
                sums = np.zeros(7)
                for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                    idx = order[start:start + cfg.batch_size]
                    data = [(tr, idx)] + ([(tr_flip, idx)] if tr_flip is not None else [])
                    grads, stats = _batch_grads(net, params, data, w_group, lam, use_indiv,
                                                skip_branches, pool)
                    if not np.isfinite(stats[0]) or not np.isfinite(stats[1]):
                        raise NumericalError(f"non-finite loss at epoch {epoch} batch {b}", epoch, b)
                    grads = {k: v for k, v in grads.items() if param_group(k) in trainable}
                    try:
                        params, state = adam_step(params, grads, state, cfg.hyper, lr)
                    except NumericalError as exc:
                        raise NumericalError(f"{exc} at epoch {epoch} batch {b}", epoch, b) from None
                    sums += stats
                n = sums[2]
                row = {
                    "epoch": epoch,
                    "stage": stage,
                    "lr": lr,
                    "L_G": sums[0] / n,
                    "L_I": sums[1] / n if use_indiv else None,
                    "train_acc_group": sums[3] / sums[6],
                    "train_acc_indiv": (sums[4] / sums[5]) if sums[5] and use_indiv else None,
                    "val_acc_group": _accuracy(net, params, va),
                }
                history.append(row)
                log.info("epoch %d %s lr=%.2g L_G=%.4f L_I=%s acc=%.3f val=%s", epoch, stage, lr,
                         row["L_G"], row["L_I"], row["train_acc_group"], row["val_acc_group"])
                score = row["val_acc_group"] if va is not None else row["train_acc_group"]
                if stage != "action" and score > best_acc:
                    best_acc, best_epoch, best_params = score, epoch, params
                    if checkpoint_path is not None:
                        nn.save_checkpoint(checkpoint_path, params)
                epoch += 1
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(params, history, best_params, best_epoch)


def write_history_csv(path, history):
    """CSV with epoch, lr, L_G, [L_I,] train_acc_group, train_acc_indiv, val_acc_group."""
    with_li = any(r.get("L_I") is not None for r in history)
    cols = ["epoch", "lr", "L_G"] + (["L_I"] if with_li else []) + \
        ["train_acc_group", "train_acc_indiv", "val_acc_group"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in history:
            w.writerow(["" if r.get(c) is None else (repr(float(r[c])) if c != "epoch" else r[c])
                        for c in cols])
