"""Small dense-tensor layers with analytic backward passes.

Layers are plain functions: ``*_forward`` returns ``(out, cache)`` and
``*_backward`` consumes that cache.  Images are channels-last, ``(B, H, W, C)``,
and convolution kernels are ``(kh, kw, C_in, C_out)``.

Parameters live in an ordered ``dict`` of name -> array; gradients use the
same keys.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_MAGIC = b"SKGRCKPT"
CHECKPOINT_VERSION = 1


def conv_output_size(size, k, stride, padding):
    pad = (k - 1) // 2 if padding == "same" else 0
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride=1, padding="valid"):
    """Cross-correlation of ``x`` (B, H, W, C_in) with ``w`` (kh, kw, C_in, C_out).

    ``padding="same"`` zero-pads (k - 1) // 2 on both sides of each spatial axis,
    so odd kernels at stride 1 keep H and W.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (B, H, W, C) input, got shape {x.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ValueError(f"input has {x.shape[3]} channels, kernel expects {cin}")
    if b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if padding not in ("same", "valid"):
        raise ValueError(f"unknown padding {padding!r}")
    B, H, W, _ = x.shape
    ph = (kh - 1) // 2 if padding == "same" else 0
    pw = (kw - 1) // 2 if padding == "same" else 0
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if Hp < kh or Wp < kw:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {H}x{W} with {padding} padding")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if kh == 1 and kw == 1 and stride == 1:
        cols = x.reshape(B * H * W, cin)
        out = cols @ w[0, 0] + b
        return out.reshape(B, Ho, Wo, cout), (x.shape, cols, w, stride, (ph, pw))
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.reshape(B * Ho * Wo, cin * kh * kw)  # copies; feature order (C, kh, kw)
    wmat = w.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    out = cols @ wmat + b
    return out.reshape(B, Ho, Wo, cout), (x.shape, cols, w, stride, (ph, pw))


def conv2d_backward(dout, cache):
    x_shape, cols, w, stride, (ph, pw) = cache
    kh, kw, cin, cout = w.shape
    B, H, W, _ = x_shape
    _, Ho, Wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    db = d2.sum(axis=0)
    if kh == 1 and kw == 1 and stride == 1:
        dw = (cols.T @ d2).reshape(1, 1, cin, cout)
        dx = (d2 @ w[0, 0].T).reshape(x_shape)
        return dx, dw, db
    wmat = w.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    dw = (cols.T @ d2).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
    dcols = (d2 @ wmat.T).reshape(B, Ho, Wo, cin, kh, kw)
    dxp = np.zeros((B, H + 2 * ph, W + 2 * pw, cin), dtype=dout.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + hs:stride, j:j + ws:stride, :] += dcols[..., i, j]
    dx = dxp[:, ph:ph + H, pw:pw + W, :]
    return np.ascontiguousarray(dx), dw, db


def linear_forward(x, w, b):
    """y = x @ w + b over the last axis; ``w`` is (D_in, D_out)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"input dim {x.shape[-1]} does not match weight {w.shape}")
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    x2 = x.reshape(-1, w.shape[0])
    d2 = dout.reshape(-1, w.shape[1])
    return dout @ w.T, x2.T @ d2, d2.sum(axis=0)


def relu_forward(x):
    out = np.maximum(x, 0)
    return out, x > 0


def relu_backward(dout, cache):
    # subgradient at exactly 0 is 0
    return dout * cache


def masked_max_forward(h, mask):
    """Max over axis 1 of ``h`` (B, K, F) restricted to ``mask`` (B, K).

    Ties go to the lowest actor index.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise ValueError("every sample needs at least one masked-in actor")
    masked = np.where(mask[:, :, None], h, -np.inf)
    idx = np.argmax(masked, axis=1)  # (B, F), first occurrence on ties
    out = np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0, :]
    return out, (h.shape, idx)


def masked_max_backward(dout, cache):
    shape, idx = cache
    dh = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dh, idx[:, None, :], dout[:, None, :], axis=1)
    return dh


def softmax_cross_entropy(logits, target):
    """Cross-entropy of softmax(logits) against integer targets.

    Works on a single vector (C,) with an int target, or on (..., C) with an
    integer array of targets.  Returns (loss, d loss / d logits) per sample;
    nothing is averaged.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    C = logits.shape[-1]
    if C < 2:
        raise ValueError("softmax cross-entropy needs at least 2 classes")
    if np.any((target < 0) | (target >= C)):
        raise ValueError(f"target out of range [0, {C})")
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    loss = -np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    grad = e / s
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    grad = grad - onehot
    if loss.ndim == 0:
        loss = float(loss)
    return loss, grad


def layer_backward(kind, upstream_grad, cache):
    """Dispatch to the backward pass of ``kind``; returns (input_grad, param_grads dict)."""
    if cache is None:
        raise ValueError(f"{kind}: no cached forward activations")
    if kind == "conv2d":
        dx, dw, db = conv2d_backward(upstream_grad, cache)
        return dx, {"w": dw, "b": db}
    if kind == "linear":
        dx, dw, db = linear_backward(upstream_grad, cache)
        return dx, {"w": dw, "b": db}
    if kind == "relu":
        return relu_backward(upstream_grad, cache), {}
    if kind == "masked_max":
        return masked_max_backward(upstream_grad, cache), {}
    raise ValueError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# parameters

def init_params(geometry, seed, dtype=np.float64):
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases.

    ``geometry`` is a sequence of (layer_name, weight_shape); fan-in is the
    product of all but the last weight dimension.  Returns ``{name.w, name.b}``.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in geometry:
        shape = tuple(int(s) for s in shape)
        fan_in = int(np.prod(shape[:-1]))
        std = np.sqrt(2.0 / fan_in)
        params[f"{name}.w"] = (rng.standard_normal(shape) * std).astype(dtype)
        params[f"{name}.b"] = np.zeros(shape[-1], dtype=dtype)
    return params


def param_count(params):
    return int(sum(p.size for p in params.values()))


def save_checkpoint(path, params):
    """Binary checkpoint, all integers little-endian uint32::

        magic "SKGRCKPT" | version | tensor count
        per tensor: name length | name (utf-8) | ndim | dims... | float32 data (row-major)
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        size = 4 * int(np.prod(shape))
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        params[name] = np.frombuffer(data, "<f4", int(np.prod(shape)), pos).reshape(shape).astype(np.float32)
        pos += size
    return params


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckResult:
    max_error: float
    per_param: dict  # name -> max relative error over checked entries
    n_checked: int
    n_refined: int = 0  # entries whose step was shrunk because a kink lay within +-step


def relative_error(a, n):
    """|a - n| / max(|a|, |n|, 1e-12)."""
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)


def grad_check(fn, params, step=1e-4, max_checks=10_000, seed=0, loss_fn=None, min_step=1e-8):
    """Compare analytic gradients with central differences.

    ``fn(params) -> (loss, grads)`` must be deterministic; ``params`` should be
    float64.  Every entry is checked unless there are more than ``max_checks``,
    in which case a seeded uniform subsample is used.

    ``loss_fn(params) -> (loss, signature)`` is an optional cheaper loss-only
    evaluation.  ``signature`` identifies the active piece of a piecewise
    function (ReLU gates, argmax choices); when it differs at params +- step
    from the base point, the difference quotient straddles a kink and the step
    is divided by 10 for that entry until both sides match or ``min_step`` is
    reached.
    """
    loss, grads = fn(params)
    if loss_fn is None:
        loss_fn = lambda p: (fn(p)[0], None)
    _, base_sig = loss_fn(params)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss at the base point")
    names = list(params)
    sizes = [params[k].size for k in names]
    total = int(sum(sizes))
    if total > max_checks:
        rng = np.random.default_rng(seed)
        flat = np.sort(rng.choice(total, size=max_checks, replace=False))
    else:
        flat = np.arange(total)
    offsets = np.cumsum([0] + sizes)
    per = {k: 0.0 for k in names}
    refined = 0
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    for g in flat:
        t = int(np.searchsorted(offsets, g, side="right") - 1)
        name = names[t]
        idx = np.unravel_index(int(g - offsets[t]), params[name].shape)
        orig = work[name][idx]
        h = step
        while True:
            work[name][idx] = orig + h
            lp, sp = loss_fn(work)
            work[name][idx] = orig - h
            lm, sm = loss_fn(work)
            work[name][idx] = orig
            if base_sig is None or (sp == base_sig and sm == base_sig) or h / 10 < min_step:
                break
            h /= 10
        refined += h != step
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"non-finite loss while perturbing {name}{idx}")
        num = (lp - lm) / (2 * h)
        ana = float(grads[name][idx])
        if not np.isfinite(ana):
            raise FloatingPointError(f"non-finite analytic gradient at {name}{idx}")
        per[name] = max(per[name], float(relative_error(ana, num)))
    return GradCheckResult(max(per.values(), default=0.0), per, len(flat), refined)
