#!/usr/bin/env python3
"""
Test xDiff NN engine - activations, backprop, Adam, embeddings and checkpoint files
"""

import numpy as np
import pytest

from xdiff_core import ShapeError
from xdiff_nn import (Adam, Mlp, gradient_check, load_arrays, mish, mlp, opt_step, save_arrays, softplus,
                      timestep_embedding)


def test_activations():
    assert mish(0.0) == 0.0
    assert mish(1.0) == pytest.approx(0.865098, abs=1e-6)
    assert softplus(1000.0) == pytest.approx(1000.0)
    assert np.isfinite(mish(np.array([-1000.0, 1000.0]))).all()


def test_mlp_shapes_and_checks():
    rng = np.random.default_rng(0)
    net = mlp(6, 3, 16, 4, rng)
    assert net.sizes == (6, 16, 16, 16, 3)
    assert net.activations == ("mish", "mish", "mish", "identity")
    assert len(net.params()) == 8
    out, cache = net.forward(np.zeros((5, 6)))
    assert out.shape == (5, 3) and out.dtype == np.float32
    assert len(cache) == 4
    assert net.predict(np.zeros(6)).shape == (3,)
    with pytest.raises(ShapeError):
        net.forward(np.zeros(6))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 5)))
    with pytest.raises(ValueError):
        Mlp([2, 2], ["relu"], rng)


def test_zero_last_layer_outputs_zero():
    net = mlp(4, 2, 8, 3, np.random.default_rng(1), zero_last=True)
    assert np.all(net.predict(np.ones((3, 4))) == 0.0)


def test_copy_is_independent():
    net = mlp(4, 2, 8, 3, np.random.default_rng(1))
    clone = net.copy()
    clone.weights[0][...] = 0.0
    assert not np.all(net.weights[0] == 0.0)
    wide = net.astype(np.float64)
    assert wide.weights[0].dtype == np.float64
    with pytest.raises(ShapeError):
        net.set_params(net.params()[:-1])


@pytest.mark.parametrize("output_activation", ["identity", "tanh"])
def test_backward_matches_finite_differences(output_activation):
    rng = np.random.default_rng(2)
    net = mlp(5, 3, 8, 3, rng, output_activation=output_activation, dtype=np.float64)
    x = rng.standard_normal((4, 5))
    target = rng.standard_normal((4, 3))

    def loss():
        return float(np.sum((net.forward(x)[0] - target) ** 2))
    out, cache = net.forward(x)
    grads, grad_in = net.backward(cache, 2 * (out - target))
    assert gradient_check(loss, net.params(), grads) < 1e-5
    assert grad_in.shape == x.shape


def test_adam_minimises_a_quadratic():
    p = [np.array([10.0, -4.0])]
    opt = Adam(p, lr=0.1)
    for _ in range(2000):
        opt_step(opt, p, [2.0 * (p[0] - 3.0)])
    assert np.allclose(p[0], 3.0, atol=0.05)
    assert opt.t == 2000


def test_adam_state_round_trip():
    p = [np.ones((2, 2)), np.zeros(3)]
    opt = Adam(p)
    opt.step(p, [np.full((2, 2), 0.5), np.ones(3)])
    other = Adam(p)
    other.load_state_arrays(opt.state_arrays(), opt.t)
    assert other.t == 1
    for a, b in zip(opt.state_arrays(), other.state_arrays()):
        assert np.array_equal(a, b)
    with pytest.raises(ShapeError):
        opt.step(p, [np.zeros((2, 2))])


def test_zero_gradient_leaves_parameters_unchanged():
    p = [np.array([1.5, -2.0, 0.0]), np.ones((2, 2))]
    before = [x.copy() for x in p]
    opt = Adam(p, lr=0.1)
    for _ in range(5):
        opt_step(opt, p, [np.zeros(3), np.zeros((2, 2))])
    for a, b in zip(p, before):
        assert np.array_equal(a, b)


def test_constant_gradient_steps_by_lr_times_sign():
    g = np.array([0.3, -7.0, 1e-3])
    p = [np.zeros(3)]
    opt = Adam(p, lr=0.01)
    for _ in range(50):
        previous = p[0].copy()
        opt_step(opt, p, [g])
        assert np.allclose(p[0] - previous, -0.01 * np.sign(g), rtol=1e-4)


def test_timestep_embedding():
    emb = timestep_embedding(0, 4)
    assert np.allclose(emb, [0.0, 1.0, 0.0, 1.0])
    batch = timestep_embedding(np.array([1, 2, 3]), 16)
    assert batch.shape == (3, 16)
    assert not np.allclose(batch[0], batch[1])
    assert np.allclose(batch[:, 0::2] ** 2 + batch[:, 1::2] ** 2, 1.0)
    with pytest.raises(ValueError):
        timestep_embedding(1, 5)


def test_checkpoint_file(tmp_path):
    arrays = [np.arange(6, dtype=np.float32).reshape(2, 3), np.array([1.5, -2.0], dtype=np.float32)]
    path = tmp_path / "weights.bin"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert [a.shape for a in loaded] == [(2, 3), (2,)]
    assert all(np.array_equal(a, b) for a, b in zip(arrays, loaded))
    assert path.read_bytes()[:4] == b"XDFC"

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(ShapeError):
        load_arrays(bad)
