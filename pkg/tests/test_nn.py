import numpy as np
import pytest

from pcmp.nn import (
    Adam,
    PointBatch,
    PointNet,
    dump_weights,
    load_weights,
    log_softmax,
    segment_max,
    softmax,
)


def test_segment_max_first_argmax():
    a = np.array([[1.0, 5.0], [3.0, 5.0], [2.0, 0.0], [7.0, -1.0], [7.0, -2.0]])
    m, arg = segment_max(a, np.array([0, 3]))
    assert m.tolist() == [[3.0, 5.0], [7.0, -1.0]]
    assert arg.tolist() == [[1, 0], [3, 3]]


def test_softmax_helpers():
    z = np.array([[1000.0, 1001.0, 999.0]])
    assert np.isclose(softmax(z).sum(), 1.0)
    assert np.allclose(np.exp(log_softmax(z)), softmax(z))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = PointNet((3, 8, 16), (16, 8, 4), seed=1)
    batch = PointBatch.from_clouds([rng.random((5, 3)), rng.random((7, 3))])
    w = rng.normal(size=(2, 4))

    def loss():
        return float((net.logits(batch) * w).sum())

    _, cache = net.forward(batch)
    grads = net.backward(cache, w)
    h = 1e-6
    for p, g in zip(net.params, grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss()
            p[idx] = old - h
            down = loss()
            p[idx] = old
            assert abs((up - down) / (2 * h) - g[idx]) < 1e-5


def test_checkpoint_round_trip():
    net = PointNet((3, 4, 6), (6, 5, 2), seed=3)
    back, k = load_weights(dump_weights(net, b"TEST", 2), b"TEST")
    assert k == 2 and back.digest() == net.digest()
    with pytest.raises(ValueError):
        load_weights(dump_weights(net, b"TEST", 2), b"NOPE")
    with pytest.raises(ValueError):
        load_weights(dump_weights(net, b"TEST", 2) + b"x", b"TEST")


def test_adam_minimizes_quadratic():
    x = np.array([3.0, -2.0])
    opt = Adam([x], lr=0.1)
    for _ in range(500):
        opt.step([2 * x])
    assert np.abs(x).max() < 1e-2


def test_float32_pass_tracks_float64():
    rng = np.random.default_rng(2)
    net = PointNet((3, 16, 32), (32, 8, 3), seed=0)
    clouds = [rng.random((20, 3)) for _ in range(3)]
    ref = net.logits(PointBatch.from_clouds(clouds))
    net32 = net.copy()
    net32.params = [p.astype(np.float32) for p in net.params]
    out = net32.logits(PointBatch.from_clouds(clouds, dtype=np.float32))
    assert out.dtype == np.float32 and np.allclose(out, ref, atol=1e-4)
