import numpy as np
import pytest

from seddlab import engine as E
from seddlab.engine.gradcheck import check_gradients, max_relative_error


def randt(rng, shape, **kw):
    return E.Tensor(rng.normal(size=shape), dtype=np.float64, **kw)


def test_softmax_symmetry():
    out = E.softmax(E.Tensor(np.zeros((1, 4), dtype=np.float32)))
    np.testing.assert_allclose(out.data, 0.25)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = E.softmax(E.Tensor(rng.normal(size=(8, 16, 11)).astype(np.float32)))
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_log_exp_inverse():
    x = np.linspace(-5, 5, 101).astype(np.float32)
    out = E.log(E.exp(E.Tensor(x)))
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_matmul_identity():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(3, 3)).astype(np.float32)
    out = E.matmul(E.Tensor(np.eye(3, dtype=np.float32)), E.Tensor(a))
    np.testing.assert_allclose(out.data, a, rtol=1e-6)


def test_shape_mismatch_reports_primitive_and_shapes():
    with pytest.raises(E.EngineError, match=r"add.*\(2, 3\).*\(4,\)"):
        E.add(E.Tensor(np.zeros((2, 3))), E.Tensor(np.zeros(4)))


def test_backward_square():
    x = E.parameter(3.0, dtype=np.float64)
    with E.record() as tape:
        loss = E.mul(x, x)
    (g,) = tape.backward(loss, params=[x])
    assert g == pytest.approx(6.0)


def test_backward_requires_scalar_loss():
    x = E.parameter(np.ones(3))
    with E.record() as tape:
        y = E.mul(x, x)
    with pytest.raises(E.EngineError, match="scalar"):
        tape.backward(y, params=[x])


def test_softmax_sum_has_zero_gradient():
    rng = np.random.default_rng(2)
    x = E.parameter(rng.normal(size=6), dtype=np.float64)
    with E.record() as tape:
        loss = E.tsum(E.softmax(x))
    (g,) = tape.backward(loss, params=[x])
    np.testing.assert_allclose(g, 0.0, atol=1e-6)


def test_unused_parameter_gets_zero_gradient():
    x = E.parameter(2.0, dtype=np.float64)
    unused = E.parameter(np.ones((2, 2)))
    with E.record() as tape:
        loss = E.mul(x, x)
    grads = tape.backward(loss, params=[x, unused])
    np.testing.assert_array_equal(grads[1], 0.0)


def test_backward_deterministic_bitwise():
    rng = np.random.default_rng(3)
    w = E.parameter(rng.normal(size=(5, 5)).astype(np.float32))
    x = E.Tensor(rng.normal(size=(4, 5)).astype(np.float32))

    def run():
        with E.record() as tape:
            loss = E.tsum(E.softmax(E.matmul(x, w)))
        return tape.backward(loss, params=[w])[0]

    a, b = run(), run()
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_primitive_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = randt(rng, (3, 4), requires_grad=True)
    b = randt(rng, (3, 4), requires_grad=True)
    w = randt(rng, (4, 5), requires_grad=True)
    table = randt(rng, (6, 4), requires_grad=True)
    emb_mult = randt(rng, (3, 4))
    ids = rng.integers(0, 6, size=(3,))
    mask = rng.random((3, 5)) < 0.3
    cos = np.cos(rng.normal(size=(3, 2)))
    sin = np.sin(rng.normal(size=(3, 2)))

    cases = {
        "add": lambda: E.tsum(E.mul(E.add(a, b), a)),
        "sub": lambda: E.tsum(E.mul(E.sub(a, b), b)),
        "mul": lambda: E.tsum(E.mul(a, b)),
        "scale": lambda: E.tsum(E.scale(a, 1.7)),
        "matmul": lambda: E.tsum(E.mul(E.matmul(a, w), E.matmul(a, w))),
        "exp": lambda: E.tsum(E.exp(E.scale(a, 0.5))),
        "log": lambda: E.tsum(E.log(E.exp(a))),
        "gelu": lambda: E.tsum(E.gelu(a)),
        "softmax": lambda: E.tsum(E.mul(E.softmax(a), b)),
        "log_softmax": lambda: E.tsum(E.mul(E.log_softmax(a), b)),
        "layer_norm": lambda: E.tsum(E.mul(E.layer_norm(a), b)),
        "embedding": lambda: E.tsum(E.mul(E.embedding(table, ids), emb_mult)),
        "masked_fill": lambda: E.tsum(E.mul(E.masked_fill(E.matmul(a, w), mask, -2.0), E.matmul(b, w))),
        "reshape": lambda: E.tsum(E.mul(E.reshape(a, (2, 6)), E.reshape(b, (2, 6)))),
        "transpose": lambda: E.tsum(E.mul(E.transpose(a, (1, 0)), E.transpose(b, (1, 0)))),
        "take_last": lambda: E.tsum(E.take_last(a, ids[:3] % 4)),
        "rope": lambda: E.tsum(E.mul(E.rope(a, cos, sin), b)),
        "mean": lambda: E.tmean(E.mul(a, a)),
        "sum_axis": lambda: E.tsum(E.mul(E.tsum(a, axis=0), E.tsum(b, axis=0))),
    }
    for name, f in cases.items():
        err = check_gradients(f, [t for t in (a, b, w, table) if t.requires_grad])
        assert err < 1e-4, f"{name}: rel err {err}"


def test_modulate_gradients():
    rng = np.random.default_rng(11)
    x = randt(rng, (2, 3, 4), requires_grad=True)
    s = randt(rng, (2, 4), requires_grad=True)
    h = randt(rng, (2, 4), requires_grad=True)
    err = check_gradients(lambda: E.tsum(E.mul(E.modulate(x, s, h), x)), [x, s, h])
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    w1 = randt(rng, (4, 8), requires_grad=True)
    b1 = randt(rng, (8,), requires_grad=True)
    w2 = randt(rng, (8, 3), requires_grad=True)
    b2 = randt(rng, (3,), requires_grad=True)
    x = randt(rng, (5, 4))
    targets = rng.integers(0, 3, size=(5,))

    def f():
        h = E.gelu(E.add(E.matmul(x, w1), b1))
        logits = E.add(E.matmul(h, w2), b2)
        return E.scale(E.tmean(E.take_last(E.log_softmax(logits), targets)), -1.0)

    err = check_gradients(f, [w1, b1, w2, b2])
    assert err < 1e-4


def test_leading_batch_broadcast_only():
    big = E.Tensor(np.zeros((2, 3, 4)))
    ok = E.add(big, E.Tensor(np.zeros(4)))
    assert ok.shape == (2, 3, 4)
    with pytest.raises(E.EngineError):
        E.add(big, E.Tensor(np.zeros((2, 1, 4))))


class TestOptimizer:
    def _param(self, value):
        return E.parameter(np.asarray(value, dtype=np.float32))

    def test_zero_grad_no_decay_leaves_params(self):
        p = self._param([1.0, -2.0])
        state = E.OptimState([p], lr=0.1)
        E.optimizer_step([p], [np.zeros(2, dtype=np.float32)], state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_decoupled_decay_only(self):
        p = self._param([1.0, -2.0])
        state = E.OptimState([p], lr=0.1, weight_decay=0.5)
        E.optimizer_step([p], [np.zeros(2, dtype=np.float32)], state)
        np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.5), rtol=1e-6)

    def test_first_step_is_signed_unit_update(self):
        p = self._param([0.0])
        state = E.OptimState([p], lr=0.01)
        E.optimizer_step([p], [np.array([0.3], dtype=np.float32)], state)
        np.testing.assert_allclose(p.data, [-0.01 * 0.3 / (0.3 + 1e-8)], rtol=1e-5)

    def test_shape_mismatch_raises(self):
        p = self._param([1.0])
        state = E.OptimState([p], lr=0.1)
        with pytest.raises(ValueError, match="shape"):
            E.optimizer_step([p], [np.zeros(3, dtype=np.float32)], state)


def test_clip_global_norm():
    grads = [np.ones(4) * 3.0, np.ones(2) * 4.0]
    clipped, norm = E.clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(np.sqrt(36 + 32))
    assert E.global_grad_norm(clipped) == pytest.approx(1.0)


def test_max_relative_error_scale():
    assert max_relative_error(np.array([1.0]), np.array([1.0])) == 0.0
