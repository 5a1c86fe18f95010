"""Three-branch skeleton network with actor max-pooling and two classification heads.

Per actor and per stream (pose, motion, pivot differences) a branch applies

    1x1 conv -> ReLU -> temporal kx1 conv -> ReLU -> joints moved to channels
    -> 3x3/2 conv -> ReLU -> 3x3/2 conv -> ReLU -> flatten

The three flattened vectors are concatenated and passed through two shared
1x1 convolutions (equivalently, per-actor linear layers) with ReLU, giving F
features per actor.  The individual head is an affine map on each actor's
features; the group head is an affine map on their masked max over actors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

STREAMS = ("gs", "gm", "gd")


@dataclass(frozen=True)
class ModelConfig:
    K: int = 6
    T: int = 10
    N: int = 25
    branch: tuple = (32, 16, 32, 64)
    temporal_kernel: int = 3
    fusion_hidden: int = 256
    F: int = 256
    A: int = 4
    G: int = 4
    lam: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "branch", tuple(int(c) for c in self.branch))
        if len(self.branch) != 4 or min(self.branch) < 1:
            raise ValueError("branch must list 4 positive channel counts")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError("temporal_kernel must be odd and positive")
        for name in ("K", "T", "N", "fusion_hidden", "F"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.A < 2 or self.G < 2:
            raise ValueError("A and G must be >= 2")

    @property
    def branch_out_shape(self):
        h = nn.conv_output_size(self.T, 3, 2, "same")
        h = nn.conv_output_size(h, 3, 2, "same")
        w = nn.conv_output_size(self.branch[1], 3, 2, "same")
        w = nn.conv_output_size(w, 3, 2, "same")
        return h, w, self.branch[3]

    @property
    def branch_dim(self):
        return int(np.prod(self.branch_out_shape))

    def geometry(self):
        c1, c2, c3, c4 = self.branch
        geo = []
        for s in STREAMS:
            geo += [(f"{s}.conv1", (1, 1, 3, c1)),
                    (f"{s}.conv2", (self.temporal_kernel, 1, c1, c2)),
                    (f"{s}.conv3", (3, 3, self.N, c3)),
                    (f"{s}.conv4", (3, 3, c3, c4))]
        geo += [("fuse1", (3 * self.branch_dim, self.fusion_hidden)),
                ("fuse2", (self.fusion_hidden, self.F)),
                ("indiv", (self.F, self.A)),
                ("group", (self.F, self.G))]
        return geo


# parameter groups used by training modes
def param_group(name):
    head = name.split(".")[0]
    if head in STREAMS:
        return "branches"
    if head in ("fuse1", "fuse2"):
        return "fusion"
    return head  # "indiv" or "group"


HEAD_STD = 1e-3


def init_model(cfg, seed, dtype=np.float32, head_std=HEAD_STD):
    """He init everywhere except the two classifier heads, which start at
    ``head_std`` so the initial softmax is near-uniform (loss close to ln G)."""
    params = nn.init_params(cfg.geometry(), seed, dtype=dtype)
    if head_std is not None:
        rng = np.random.default_rng([seed, 1])
        for name in ("indiv.w", "group.w"):
            params[name] = (rng.standard_normal(params[name].shape) * head_std).astype(dtype)
    return params


@dataclass
class ActorFeatures:
    features: np.ndarray  # (B, K, F); transpose of the F x K matrix per clip
    mask: np.ndarray  # (B, K)


@dataclass
class ModelOutputs:
    individual_logits: np.ndarray  # (B, K, A)
    group_logits: np.ndarray  # (B, G)
    actor_features: ActorFeatures
    cache: dict = field(default=None, repr=False)


def _as_batch(streams, mask):
    """Accept a StreamTensors or an array (B, 3, K, T, N, 3)."""
    if hasattr(streams, "gs"):
        x = np.stack([streams.gs, streams.gm, streams.gd])[None]
    else:
        x = np.asarray(streams)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None]
    return x, mask


def branch_forward(params, x, stream):
    """One branch on x (B*K, T, N, 3); returns (flat (B*K, D), caches)."""
    p = lambda n: (params[f"{stream}.{n}.w"], params[f"{stream}.{n}.b"])
    h, c1 = nn.conv2d_forward(x, *p("conv1"))
    h, r1 = nn.relu_forward(h)
    h, c2 = nn.conv2d_forward(h, *p("conv2"), stride=1, padding="same")
    h, r2 = nn.relu_forward(h)
    h = h.transpose(0, 1, 3, 2)  # (BK, T, C2, N): joints become channels
    h, c3 = nn.conv2d_forward(np.ascontiguousarray(h), *p("conv3"), stride=2, padding="same")
    h, r3 = nn.relu_forward(h)
    h, c4 = nn.conv2d_forward(h, *p("conv4"), stride=2, padding="same")
    h, r4 = nn.relu_forward(h)
    return h.reshape(h.shape[0], -1), (c1, r1, c2, r2, c3, r3, c4, r4, h.shape)


def branch_backward(dflat, caches, stream, grads):
    c1, r1, c2, r2, c3, r3, c4, r4, shape = caches
    d = dflat.reshape(shape)
    d = nn.relu_backward(d, r4)
    d, grads[f"{stream}.conv4.w"], grads[f"{stream}.conv4.b"] = nn.conv2d_backward(d, c4)
    d = nn.relu_backward(d, r3)
    d, grads[f"{stream}.conv3.w"], grads[f"{stream}.conv3.b"] = nn.conv2d_backward(d, c3)
    d = np.ascontiguousarray(d.transpose(0, 1, 3, 2))
    d = nn.relu_backward(d, r2)
    d, grads[f"{stream}.conv2.w"], grads[f"{stream}.conv2.b"] = nn.conv2d_backward(d, c2)
    d = nn.relu_backward(d, r1)
    _, grads[f"{stream}.conv1.w"], grads[f"{stream}.conv1.b"] = nn.conv2d_backward(d, c1)


class GroupActivityNet:
    """Forward/backward for one ModelConfig; parameters are passed in explicitly."""

    def __init__(self, cfg):
        self.cfg = cfg

    def encode(self, params, x):
        """Branch outputs concatenated per actor: (B, K, 3 * branch_dim)."""
        B, S, K, T, N, C = x.shape
        if (S, K, T, N, C) != (3, self.cfg.K, self.cfg.T, self.cfg.N, 3):
            raise ValueError(f"streams have shape {x.shape[1:]}, model expects "
                             f"(3, {self.cfg.K}, {self.cfg.T}, {self.cfg.N}, 3)")
        dtype = params["fuse1.w"].dtype
        flats, caches = [], []
        for s, name in enumerate(STREAMS):
            xs = np.ascontiguousarray(x[:, s], dtype=dtype).reshape(B * K, T, N, 3)
            f, c = branch_forward(params, xs, name)
            flats.append(f)
            caches.append(c)
        return np.concatenate(flats, axis=1).reshape(B, K, -1), caches

    def head_forward(self, params, enc, mask):
        """Fusion, pooling and both heads on encoded actors (B, K, 3 * branch_dim)."""
        h, l1 = nn.linear_forward(enc, params["fuse1.w"], params["fuse1.b"])
        h, q1 = nn.relu_forward(h)
        h, l2 = nn.linear_forward(h, params["fuse2.w"], params["fuse2.b"])
        feat, q2 = nn.relu_forward(h)
        indiv, li = nn.linear_forward(feat, params["indiv.w"], params["indiv.b"])
        pooled, pc = nn.masked_max_forward(feat, mask)
        group, lg = nn.linear_forward(pooled, params["group.w"], params["group.b"])
        cache = {"l1": l1, "q1": q1, "l2": l2, "q2": q2, "li": li, "pool": pc, "lg": lg}
        return ModelOutputs(indiv, group, ActorFeatures(feat, mask), cache)

    def forward(self, params, streams, mask):
        x, mask = _as_batch(streams, mask)
        if mask.shape != (x.shape[0], self.cfg.K):
            raise ValueError(f"mask shape {mask.shape} does not match batch {x.shape[0]} x K={self.cfg.K}")
        if not mask.any(axis=1).all():
            raise ValueError("all actors masked out in at least one clip")
        enc, bcache = self.encode(params, x)
        out = self.head_forward(params, enc, mask)
        out.cache["branches"] = bcache
        return out

    def head_backward(self, params, cache, d_indiv, d_group, grads, need_input_grad=True):
        d_pooled, grads["group.w"], grads["group.b"] = nn.linear_backward(d_group, cache["lg"])
        d_feat = nn.masked_max_backward(d_pooled, cache["pool"])
        d_f2, grads["indiv.w"], grads["indiv.b"] = nn.linear_backward(d_indiv, cache["li"])
        d_feat = d_feat + d_f2
        d = nn.relu_backward(d_feat, cache["q2"])
        d, grads["fuse2.w"], grads["fuse2.b"] = nn.linear_backward(d, cache["l2"])
        d = nn.relu_backward(d, cache["q1"])
        d_enc, grads["fuse1.w"], grads["fuse1.b"] = nn.linear_backward(d, cache["l1"])
        return d_enc if need_input_grad else None

    def backward(self, params, outputs, d_indiv, d_group, skip_branches=False):
        """Gradients of a scalar whose logit gradients are ``d_indiv`` and ``d_group``."""
        grads = {}
        d_enc = self.head_backward(params, outputs.cache, d_indiv, d_group, grads,
                                   need_input_grad=not skip_branches)
        if not skip_branches:
            B, K, _ = d_enc.shape
            d_enc = d_enc.reshape(B * K, 3, -1)
            for s, name in enumerate(STREAMS):
                branch_backward(d_enc[:, s], outputs.cache["branches"][s], name, grads)
        return {k: grads[k] for k in params if k in grads}


@dataclass
class LossParts:
    total: float
    group: float  # mean L_G over the batch
    individual: float  # batch mean of per-clip L_I (clips without labels count as 0)
    n_indiv_clips: int


def total_loss(outputs, y_group, y_individual, lam, mask, w_group=1.0):
    """Batch-mean of L_G + lam * L_I and its gradients w.r.t. both logit sets.

    L_I for a clip is the mean cross-entropy over its masked-in actors with a
    label >= 0; clips without such actors contribute no individual term.
    ``y_individual`` may be None (no individual supervision at all).
    Returns (LossParts, d_individual_logits, d_group_logits).
    """
    B = outputs.group_logits.shape[0]
    y_group = np.asarray(y_group).reshape(B)
    lg, dg = nn.softmax_cross_entropy(outputs.group_logits, y_group)
    d_group = w_group * dg / B
    d_indiv = np.zeros_like(outputs.individual_logits)
    n_clips = 0
    li_per_clip = np.zeros(B)
    if y_individual is not None:
        y = np.asarray(y_individual).reshape(B, -1)
        mask = np.asarray(mask, dtype=bool).reshape(B, -1)
        use = mask & (y >= 0)
        counts = use.sum(axis=1)
        if use.any():
            li, di = nn.softmax_cross_entropy(outputs.individual_logits, np.where(use, y, 0))
            li = np.where(use, li, 0.0)
            has = counts > 0
            li_per_clip[has] = li[has].sum(axis=1) / counts[has]
            n_clips = int(has.sum())
            scale = np.where(has, 1.0 / np.maximum(counts, 1), 0.0)
            d_indiv = lam * di * (use * scale[:, None])[..., None] / B
    group_mean = float(np.mean(lg))
    indiv_mean = float(np.mean(li_per_clip))
    total = float(np.mean(w_group * lg + lam * li_per_clip))
    return LossParts(total, group_mean, indiv_mean, n_clips), d_indiv.astype(outputs.individual_logits.dtype), \
        d_group.astype(outputs.group_logits.dtype)


def gate_signature(outputs):
    """Hashable digest of every ReLU gate and max-pool choice in a forward pass."""
    import hashlib
    h = hashlib.sha1()
    c = outputs.cache
    for branch in c.get("branches", ()):
        for item in branch:
            if isinstance(item, np.ndarray) and item.dtype == bool:
                h.update(np.packbits(item).tobytes())
    for key in ("q1", "q2"):
        h.update(np.packbits(c[key]).tobytes())
    h.update(np.ascontiguousarray(c["pool"][1]).tobytes())
    return h.hexdigest()


def model_summary(cfg):
    """Text table of layer names, weight shapes and parameter counts."""
    lines = [f"{'layer':<12} {'weight shape':<22} {'params':>10}"]
    total = 0
    for name, shape in cfg.geometry():
        n = int(np.prod(shape)) + shape[-1]
        total += n
        lines.append(f"{name:<12} {'x'.join(map(str, shape)):<22} {n:>10}")
    lines.append(f"{'total':<12} {'':<22} {total:>10}")
    return "\n".join(lines)
