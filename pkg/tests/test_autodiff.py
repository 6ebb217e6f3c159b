import math

import numpy as np
import pytest

from sttrack import autodiff as ad
from sttrack.autodiff import AdamW, AdamWConfig, Tensor


def check_grad(build, params, h=1e-5, tol=1e-4):
    """Central finite differences against the reverse-mode gradients."""
    out = build()
    out.backward()
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = build().item()
            flat[i] = orig - h
            lo = build().item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * h)
        fd = fd.reshape(p.shape)
        a = analytic[name]
        err = np.abs(a - fd) / np.maximum(np.abs(a) + np.abs(fd), 1e-3)
        assert err.max() <= tol, f"{name}: max rel err {err.max():.2e}"


def scalarize(out, seed=0):
    """Project a tensor output to a scalar with a fixed random readout."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(0, 1, out.shape))
    return ad.sum_(ad.mul(out, w))


# --- forward values ----------------------------------------------------------


def test_sigmoid_at_zero():
    assert ad.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)


def test_sigmoid_extreme_inputs_stable():
    out = ad.sigmoid(Tensor([-1000.0, 1000.0]))
    assert out.data == pytest.approx([0.0, 1.0], abs=1e-12)


def test_softmax_uniform():
    out = ad.softmax(Tensor([1.0, 1.0, 1.0, 1.0]))
    assert out.data == pytest.approx([0.25] * 4)


def test_softplus_at_zero():
    assert ad.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2.0))


def test_layer_norm_standardizes():
    x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]))
    out = ad.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=0.0)
    assert out.data.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.data.std() == pytest.approx(1.0, abs=1e-9)


def test_forward_deterministic():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, (3, 5))
    w = rng.normal(0, 1, (5, 4))

    def run():
        return ad.softmax(ad.matmul(Tensor(x), Tensor(w)), axis=-1).data.tobytes()

    assert run() == run()


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(7,\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(7)))


# --- gradient checks ---------------------------------------------------------


def rand_param(rng, shape, avoid_kink=False, positive=False):
    data = rng.normal(0, 1, shape)
    if avoid_kink:
        data = np.where(np.abs(data) < 0.05, 0.3, data)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def test_grad_elementwise_ops():
    rng = np.random.default_rng(1)
    a = rand_param(rng, (3, 4))
    b = rand_param(rng, (3, 4))
    c = rand_param(rng, (4,))  # broadcast operand
    check_grad(
        lambda: scalarize(ad.add(ad.mul(a, b), ad.sub(ad.mul(a, c), b))),
        {"a": a, "b": b, "c": c},
    )


def test_grad_div():
    rng = np.random.default_rng(2)
    a = rand_param(rng, (2, 5))
    b = rand_param(rng, (2, 5), positive=True)
    check_grad(lambda: scalarize(ad.div(a, b)), {"a": a, "b": b})


def test_grad_matmul_batched():
    rng = np.random.default_rng(3)
    a = rand_param(rng, (2, 3, 4))
    b = rand_param(rng, (2, 4, 5))
    w = rand_param(rng, (5, 2))  # broadcast against batch
    check_grad(
        lambda: scalarize(ad.matmul(ad.matmul(a, b), w)), {"a": a, "b": b, "w": w}
    )


def test_grad_unary_chain():
    rng = np.random.default_rng(4)
    x = rand_param(rng, (4, 3), avoid_kink=True)
    y = rand_param(rng, (4, 3), positive=True)

    def build():
        out = ad.relu(x)
        out = ad.add(out, ad.sigmoid(x))
        out = ad.add(out, ad.log(y))
        out = ad.add(out, ad.sqrt(y))
        out = ad.add(out, ad.exp(ad.mul(x, Tensor(0.3))))
        out = ad.add(out, ad.softplus(x))
        out = ad.add(out, ad.abs_(x))
        return scalarize(out)

    check_grad(build, {"x": x, "y": y})


def test_grad_reductions_and_shapes():
    rng = np.random.default_rng(5)
    x = rand_param(rng, (3, 4, 5))

    def build():
        a = ad.sum_(x, axis=1)
        b = ad.mean(x, axis=-1)
        c = ad.transpose(x, (1, 0, 2))
        d = ad.reshape(x, (12, 5))
        out = ad.sum_(a) + ad.sum_(b) + scalarize(c, 1) + scalarize(d, 2)
        return out

    check_grad(build, {"x": x})


def test_grad_concat_slice():
    rng = np.random.default_rng(6)
    a = rand_param(rng, (2, 3))
    b = rand_param(rng, (2, 4))

    def build():
        joined = ad.concat([a, b], axis=1)
        part = joined[:, 1:6]
        return scalarize(part)

    check_grad(build, {"a": a, "b": b})


def test_grad_softmax_layernorm():
    rng = np.random.default_rng(7)
    x = rand_param(rng, (3, 6))
    g = rand_param(rng, (6,))
    b = rand_param(rng, (6,))

    def build():
        return scalarize(ad.softmax(ad.layer_norm(x, g, b), axis=-1))

    check_grad(build, {"x": x, "g": g, "b": b})


# --- attention ---------------------------------------------------------------


def test_attention_single_matching_key_returns_value():
    q = Tensor(np.array([[1.0, 2.0, 3.0]]))
    k = Tensor(np.array([[1.0, 2.0, 3.0]]))
    v = Tensor(np.array([[7.0, -4.0]]))
    out = ad.attention(q, k, v)
    assert out.data[0] == pytest.approx([7.0, -4.0])


def test_attention_saturates_to_best_value():
    d = 4
    scale = 20.0 * math.sqrt(d)  # logit gap of 20 after 1/sqrt(d)
    q = Tensor(np.array([[scale, 0.0, 0.0, 0.0]]))
    k = Tensor(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    v = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = ad.attention(q, k, v)
    assert out.data[0] == pytest.approx([1.0, 0.0], abs=1e-3)


def test_attention_rows_sum_to_one_over_unmasked():
    rng = np.random.default_rng(8)
    q = Tensor(rng.normal(0, 1, (2, 3, 4)))
    k = Tensor(rng.normal(0, 1, (2, 5, 4)))
    mask = np.ones((2, 1, 5), dtype=bool)
    mask[0, 0, 3:] = False
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1)))
    scores = ad.add(scores, Tensor(np.where(mask, 0.0, -1e30)))
    w = ad.softmax(scores, axis=-1)
    sums = w.data.sum(axis=-1)
    assert sums == pytest.approx(np.ones((2, 3)), abs=1e-6)
    assert w.data[0, :, 3:].max() == 0.0


def test_attention_all_masked_rows_output_zeros():
    rng = np.random.default_rng(9)
    q = Tensor(rng.normal(0, 1, (2, 4)))
    k = Tensor(rng.normal(0, 1, (3, 4)))
    v = Tensor(rng.normal(0, 1, (3, 2)))
    mask = np.zeros((2, 3), dtype=bool)
    mask[0, :] = True  # row 1 has no valid keys
    out = ad.attention(q, k, v, key_mask=mask)
    assert np.all(out.data[1] == 0.0)
    assert np.any(out.data[0] != 0.0)


def test_attention_gradients():
    rng = np.random.default_rng(10)
    q = rand_param(rng, (2, 3, 4))
    k = rand_param(rng, (2, 5, 4))
    v = rand_param(rng, (2, 5, 3))
    mask = rng.random((2, 1, 5)) > 0.3
    mask[:, :, 0] = True  # keep every row alive

    def build():
        return scalarize(ad.attention(q, k, v, key_mask=mask))

    check_grad(build, {"q": q, "k": k, "v": v})


# --- optimizer ---------------------------------------------------------------


def test_adamw_zero_grad_no_decay_is_identity():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = AdamW({"p": p}, AdamWConfig(learning_rate=1e-3, weight_decay=0.0))
    opt.step(1)
    assert p.data == pytest.approx([1.0, -2.0])


def test_adamw_zero_grad_decay_scales_params():
    lr = 1e-3
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    opt = AdamW({"p": p}, AdamWConfig(learning_rate=lr, weight_decay=0.03))
    opt.step(1)
    assert p.data == pytest.approx(np.array([1.0, -2.0]) * (1 - lr * 0.03))


def test_adamw_descends_quadratic_bowl():
    target = np.array([3.0, -1.0, 0.5])
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = AdamW({"p": p}, AdamWConfig(learning_rate=0.05, weight_decay=0.0))

    def loss_value():
        return float(((p.data - target) ** 2).sum())

    start = loss_value()
    for step in range(1, 200):
        diff = ad.sub(p, Tensor(target))
        loss = ad.sum_(ad.mul(diff, diff))
        loss.backward()
        opt.step(step)
    assert loss_value() < start
    assert p.data == pytest.approx(target, abs=0.05)


def test_lr_schedule_warmup_then_linear_decay():
    cfg = AdamWConfig(
        learning_rate=1e-3, warmup_steps=10, total_steps=110, final_lr_fraction=0.5
    )
    assert cfg.lr_at(1) == pytest.approx(1e-4)
    assert cfg.lr_at(10) == pytest.approx(1e-3)
    assert cfg.lr_at(60) == pytest.approx(1e-3 * 0.75)
    assert cfg.lr_at(110) == pytest.approx(5e-4)
    assert cfg.lr_at(500) == pytest.approx(5e-4)


def test_adamw_config_validation():
    with pytest.raises(ValueError):
        AdamWConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        AdamWConfig(weight_decay=-1.0)


# --- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    params = {
        "enc.w": Tensor(rng.normal(0, 1, (4, 7)), requires_grad=True),
        "enc.b": Tensor(rng.normal(0, 1, (7,)), requires_grad=True),
        "head.w": Tensor(rng.normal(0, 1, (2, 3, 4)), requires_grad=True),
    }
    meta = {"d_q": 4, "note": "round-trip"}
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, params, meta)
    arrays, loaded_meta = ad.load_checkpoint(path)
    assert loaded_meta == meta
    assert set(arrays) == set(params)
    for name, p in params.items():
        assert arrays[name].shape == p.shape
        assert arrays[name] == pytest.approx(p.data.astype(np.float32), abs=0)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        ad.load_checkpoint(path)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(x, x)
    assert not out.requires_grad
    assert out._parents == ()
