import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skelgar import nn
from skelgar.gradcheck import layer_checks


# --- conv2d ----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10**6))
def test_conv_identity_kernel(B, H, W, C, seed):
    x = np.random.default_rng(seed).normal(size=(B, H, W, C))
    w = np.eye(C).reshape(1, 1, C, C)
    out, _ = nn.conv2d_forward(x, w, np.zeros(C))
    np.testing.assert_array_equal(out, x)


def test_conv_window_sums():
    x = np.arange(1.0, 17.0).reshape(1, 4, 4, 1)
    out, _ = nn.conv2d_forward(x, np.ones((3, 3, 1, 1)), np.zeros(1))
    assert out.shape == (1, 2, 2, 1)
    assert out[0, 0, 0, 0] == 54
    # brute-force oracle
    ref = [[x[0, i:i + 3, j:j + 3, 0].sum() for j in range(2)] for i in range(2)]
    np.testing.assert_array_equal(out[0, :, :, 0], ref)


def test_conv_stride2_valid_shape():
    out, _ = nn.conv2d_forward(np.ones((1, 4, 4, 2)), np.ones((3, 3, 2, 5)), np.zeros(5), stride=2)
    assert out.shape == (1, 1, 1, 5)


def test_conv_same_padding_keeps_size():
    out, _ = nn.conv2d_forward(np.ones((2, 5, 7, 3)), np.ones((3, 3, 3, 4)), np.zeros(4), padding="same")
    assert out.shape == (2, 5, 7, 4)
    # corner window sees 4 of 9 taps times 3 channels
    assert out[0, 0, 0, 0] == 12


def test_conv_matches_bruteforce_strided():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(1, 6, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    out, _ = nn.conv2d_forward(x, w, b, stride=2, padding="same")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            win = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            np.testing.assert_allclose(out[0, i, j], np.einsum("hwc,hwco->o", win, w) + b)


@pytest.mark.parametrize("xs,ws,bs,kw", [
    ((1, 4, 4, 3), (3, 3, 2, 1), (1,), {}),
    ((1, 4, 4, 1), (3, 3, 1, 2), (1,), {}),
    ((1, 2, 2, 1), (3, 3, 1, 1), (1,), {}),
    ((1, 4, 4, 1), (3, 3, 1, 1), (1,), {"stride": 0}),
    ((1, 4, 4, 1), (3, 3, 1, 1), (1,), {"padding": "full"}),
    ((4, 4, 1), (3, 3, 1, 1), (1,), {}),
])
def test_conv_shape_errors(xs, ws, bs, kw):
    with pytest.raises(ValueError):
        nn.conv2d_forward(np.ones(xs), np.ones(ws), np.zeros(bs), **kw)


# --- backward ---------------------------------------------------------------

def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 4, 3))
    out, cache = nn.conv2d_forward(x, rng.normal(size=(3, 3, 3, 2)), rng.normal(size=2), stride=2,
                                   padding="same")
    dx, pg = nn.layer_backward("conv2d", np.zeros_like(out), cache)
    assert not np.any(dx) and not any(np.any(g) for g in pg.values())
    out, cache = nn.linear_forward(x[..., 0], rng.normal(size=(4, 3)), np.zeros(3))
    dx, pg = nn.layer_backward("linear", np.zeros_like(out), cache)
    assert not np.any(dx) and not any(np.any(g) for g in pg.values())


def test_relu_negative_and_zero_block_gradient():
    _, cache = nn.relu_forward(np.array([-2.0, 0.0, 3.0]))
    dx, _ = nn.layer_backward("relu", np.ones(3), cache)
    np.testing.assert_array_equal(dx, [0, 0, 1])


def test_layer_backward_errors():
    with pytest.raises(ValueError, match="cache"):
        nn.layer_backward("conv2d", np.ones(2), None)
    with pytest.raises(ValueError, match="unknown"):
        nn.layer_backward("pool3d", np.ones(2), (1,))


def test_linear_grad_central_difference():
    rng = np.random.default_rng(11)
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    r = rng.normal(size=(3, 2))
    _, cache = nn.linear_forward(x, w, b)
    dx, dw, db = nn.linear_backward(r, cache)
    h = 1e-5

    def f(x_, w_, b_):
        return float(np.sum(nn.linear_forward(x_, w_, b_)[0] * r))

    for arr, grad, pos in ((x, dx, 0), (w, dw, 1), (b, db, 2)):
        for idx in np.ndindex(arr.shape):
            args = [x.copy(), w.copy(), b.copy()]
            args[pos][idx] += h
            lp = f(*args)
            args[pos][idx] -= 2 * h
            lm = f(*args)
            num = (lp - lm) / (2 * h)
            assert nn.relative_error(grad[idx], num) < 1e-8


def test_maxpool_routes_to_argmax_only():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(3, 5, 6))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    out, cache = nn.masked_max_forward(h, mask)
    d = rng.normal(size=out.shape)
    dh = nn.masked_max_backward(d, cache)
    assert not np.any(dh[~mask])
    np.testing.assert_allclose(dh.sum(axis=1), d)
    assert np.count_nonzero(dh) == d.size
    ref = np.where(mask[:, :, None], h, -np.inf).max(axis=1)
    np.testing.assert_array_equal(out, ref)


def test_maxpool_tie_lowest_index():
    h = np.ones((1, 3, 2))
    _, cache = nn.masked_max_forward(h, np.array([[False, True, True]]))
    dh = nn.masked_max_backward(np.ones((1, 2)), cache)
    np.testing.assert_array_equal(dh[0, :, 0], [0, 1, 0])


def test_maxpool_all_masked_errors():
    with pytest.raises(ValueError):
        nn.masked_max_forward(np.ones((1, 2, 2)), np.zeros((1, 2), bool))


# --- softmax cross-entropy --------------------------------------------------

@pytest.mark.parametrize("G", [2, 4, 9])
def test_ce_uniform_is_log_g(G):
    loss, _ = nn.softmax_cross_entropy(np.zeros(G), 1)
    assert loss == pytest.approx(np.log(G), abs=1e-12)


def test_ce_confident():
    loss, grad = nn.softmax_cross_entropy(np.array([10.0, -10.0]), 0)
    assert loss < 1e-8
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    np.testing.assert_allclose(grad, [-2.06e-9, 2.06e-9], rtol=1e-2)


def test_ce_no_overflow():
    loss, grad = nn.softmax_cross_entropy(np.array([1000.0, 0.0]), 1)
    assert np.isfinite(loss) and loss == pytest.approx(1000.0)
    assert np.all(np.isfinite(grad))


def test_ce_errors():
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros(3), 3)
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros(3), -1)
    with pytest.raises(ValueError):
        nn.softmax_cross_entropy(np.zeros(1), 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1), st.floats(0.01, 500))
def test_ce_grad_sums_to_zero(C, seed, scale):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, C)) * scale
    _, grad = nn.softmax_cross_entropy(logits, rng.integers(C, size=4))
    assert np.abs(grad.sum(axis=-1)).max() <= 1e-12


# --- init and checkpoints ---------------------------------------------------

def test_init_deterministic_and_zero_bias():
    geo = [("a", (3, 3, 16, 32)), ("b", (32, 4))]
    p1, p2 = nn.init_params(geo, 7), nn.init_params(geo, 7)
    assert all(np.array_equal(p1[k], p2[k]) for k in p1)
    assert not np.any(p1["a.b"]) and not np.any(p1["b.b"])
    assert not np.array_equal(p1["a.w"], nn.init_params(geo, 8)["a.w"])


def test_init_std():
    w = nn.init_params([("c", (3, 3, 16, 32))], 0)["c.w"]
    assert w.size == 4608
    assert abs(w.std() / np.sqrt(2 / 144) - 1) < 0.1


def test_checkpoint_round_trip(tmp_path):
    p = nn.init_params([("c", (3, 1, 2, 4)), ("fc", (5, 3))], 1, dtype=np.float32)
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, p)
    back = nn.load_checkpoint(path)
    assert list(back) == list(p)
    assert all(back[k].tobytes() == p[k].tobytes() for k in p)
    raw = path.read_bytes()
    assert raw[:8] == nn.CHECKPOINT_MAGIC


def test_checkpoint_rejects_bad_files(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"NOTACKPT" + bytes(8))
    with pytest.raises(ValueError, match="magic"):
        nn.load_checkpoint(p)
    good = tmp_path / "good"
    nn.save_checkpoint(good, {"w": np.ones((4, 4), np.float32)})
    p.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(ValueError, match="truncated"):
        nn.load_checkpoint(p)


# --- grad_check ---------------------------------------------------------------

def test_grad_check_linear_tight():
    rng = np.random.default_rng(2)
    x, r = rng.normal(size=(3, 4)), rng.normal(size=(3, 2))

    def fn(p):
        out, cache = nn.linear_forward(x, p["w"], p["b"])
        _, dw, db = nn.linear_backward(r, cache)
        return float(np.sum(out * r)), {"w": dw, "b": db}

    res = nn.grad_check(fn, {"w": rng.normal(size=(4, 2)), "b": rng.normal(size=2)})
    assert res.max_error < 1e-8 and res.n_checked == 10


def test_grad_check_constant_function():
    res = nn.grad_check(lambda p: (3.0, {"w": np.zeros(4)}), {"w": np.ones(4)})
    assert res.max_error == 0.0


def test_grad_check_subsamples_large():
    res = nn.grad_check(lambda p: (float(p["w"].sum()), {"w": np.ones(50)}), {"w": np.zeros(50)},
                        max_checks=7)
    assert res.n_checked == 7 and res.max_error < 1e-8


def test_grad_check_detects_wrong_gradient():
    res = nn.grad_check(lambda p: (float((p["w"] ** 2).sum()), {"w": p["w"]}), {"w": np.ones(3)})
    assert res.max_error > 0.4


def test_grad_check_non_finite():
    with pytest.raises(FloatingPointError):
        nn.grad_check(lambda p: (float("nan"), {"w": np.zeros(1)}), {"w": np.zeros(1)})


def test_relative_error_floor():
    assert nn.relative_error(0.0, 0.0) == 0.0
    assert nn.relative_error(1e-13, 0.0) == pytest.approx(0.1)


@pytest.mark.parametrize("seed", range(20))
def test_every_layer_passes_grad_check(seed):
    for chk in layer_checks(seed):
        assert chk.ok, (chk.name, chk.max_error)


def test_layer_sign_bug_detected():
    res = {c.name: c for c in layer_checks(0, sign_bug_layer="conv2d_same")}
    assert not res["conv2d_same"].ok
    assert res["linear"].ok
