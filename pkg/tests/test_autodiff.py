import numpy as np
import pytest

from localdeblur.autodiff import AdamW, ShapeError, Tensor, load_checkpoint, save_checkpoint


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar-valued f at x (float64)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
        it.iternext()
    return g


def check_grad(build, x, seed_note="", tol=1e-4):
    """build(tensor) -> scalar Tensor; compares backward vs finite differences."""
    t = Tensor(x, requires_grad=True, dtype=np.float64)
    out = build(t)
    out.backward()

    def f(xv):
        return float(build(Tensor(xv, dtype=np.float64)).data)

    num = numeric_grad(f, x)
    denom = np.maximum(np.abs(num), 1.0)
    err = np.max(np.abs(t.grad - num) / denom)
    assert err < tol, f"grad mismatch {err} {seed_note}"


# -- forward values ---------------------------------------------------------

def test_softmax_uniform():
    out = Tensor(np.zeros(4)).softmax(axis=0)
    assert np.allclose(out.data, 0.25)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = Tensor(rng.normal(size=(5, 7))).softmax(axis=1)
    assert np.allclose(out.data.sum(axis=1), 1.0, atol=1e-6)


def test_maxpool_forward_backward_routing():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    out = x.maxpool2d()
    assert out.data.item() == 4.0
    out.backward()
    assert np.array_equal(x.grad[0, 0], [[0, 0], [0, 1]])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


def test_no_grad_into_frozen_tensor():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=False)
    (a * b).sum().backward()
    assert b.grad is None
    assert a.grad is not None


# -- finite-difference checks over many seeds -------------------------------

OPS = {
    "add": lambda t, r: (t + Tensor(r.normal(size=t.shape), dtype=np.float64)).sum(),
    "mul": lambda t, r: (t * Tensor(r.normal(size=t.shape), dtype=np.float64)).sum(),
    "matmul": lambda t, r: (t @ Tensor(r.normal(size=(t.shape[1], 3)), dtype=np.float64)).sum(),
    "relu": lambda t, r: t.relu().sum(),
    "exp": lambda t, r: t.exp().sum(),
    "log": lambda t, r: (t * t + 1.0).log().sum(),
    "softmax": lambda t, r: (t.softmax(axis=1) * Tensor(r.normal(size=t.shape), dtype=np.float64)).sum(),
    "mean": lambda t, r: (t * t).mean(),
    "sum_axis": lambda t, r: (t.sum(axis=0) * Tensor(r.normal(size=(t.shape[1],)), dtype=np.float64)).sum(),
    "concat": lambda t, r: Tensor.concat([t, t * 2.0], axis=0).sum(),
    "clip": lambda t, r: (t.clip(-0.5, 0.5) * Tensor(r.normal(size=t.shape), dtype=np.float64)).sum(),
    "mask_mul": lambda t, r: (t * Tensor((r.random(t.shape) > 0.5).astype(np.float64), dtype=np.float64)).sum(),
    "getitem": lambda t, r: t[1:, :2].sum(),
    "transpose": lambda t, r: (t.transpose() @ t).sum(),
    "reshape": lambda t, r: (t.reshape(-1) * Tensor(r.normal(size=t.size if hasattr(t, "size") else t.data.size), dtype=np.float64)).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_grads(name):
    for seed in range(10):
        x = np.random.default_rng(1000 + seed).normal(size=(4, 5))
        check_grad(lambda t: OPS[name](t, np.random.default_rng(2000 + seed)), x, name)


@pytest.mark.parametrize("seed", range(10))
def test_conv2d_grad_input_and_weight(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))

    check_grad(lambda t: t.conv2d(Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64)).sum(), x, "conv/x")
    xt = Tensor(x, dtype=np.float64)
    check_grad(lambda t: xt.conv2d(t, Tensor(b, dtype=np.float64)).sum(), w, "conv/w")
    check_grad(lambda t: xt.conv2d(Tensor(w, dtype=np.float64), t).sum(), b, "conv/b")


@pytest.mark.parametrize("seed", range(10))
def test_maxpool_upsample_grads(seed):
    rng = np.random.default_rng(seed + 50)
    x = rng.normal(size=(1, 2, 4, 4))
    coef = rng.normal(size=(1, 2, 2, 2))
    check_grad(lambda t: (t.maxpool2d() * Tensor(coef, dtype=np.float64)).sum(), x, "maxpool")
    coef2 = rng.normal(size=(1, 2, 8, 8))
    check_grad(lambda t: (t.upsample2() * Tensor(coef2, dtype=np.float64)).sum(), x, "upsample")


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 2, 4, 4))).conv2d(Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 2, 4, 4))).conv2d(Tensor(np.zeros((3, 2, 5, 5))))


# -- AdamW ------------------------------------------------------------------

def test_adamw_zero_grad_zero_decay_no_change():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.zeros_like(p.data)
    before = p.data.copy()
    opt.step()
    assert np.array_equal(p.data, before)


def test_adamw_first_step_closed_form():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    # bias-corrected m_hat / sqrt(v_hat) == 1 on the first step
    assert p.data[0] == pytest.approx(-0.1, rel=1e-4)


def test_adamw_converges_on_quadratic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    prev = abs(float(p.data[0]))
    for _ in range(100):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step()
    assert abs(float(p.data[0])) < 0.5 < prev + 1e-9


def test_adamw_nan_grad_aborts():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p])
    p.grad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(FloatingPointError):
        opt.step()


def test_training_determinism():
    def run():
        rng = np.random.default_rng(7)
        p = Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
        opt = AdamW([p], lr=1e-2)
        for _ in range(20):
            opt.zero_grad()
            x = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
            ((p @ x) * (p @ x)).mean().backward()
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())


# -- checkpoint -------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    params = {
        "conv1_w": Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32)),
        "fc_b": Tensor(rng.normal(size=(2,)).astype(np.float32)),
    }
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert set(back) == set(params)
    for k in params:
        assert np.array_equal(back[k], params[k].data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(path)
