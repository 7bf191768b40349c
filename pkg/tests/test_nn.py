import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxdqn import _pycore, nn

BACKENDS = [_pycore]
try:
    from taxdqn import _core
    BACKENDS.append(_core)
except ImportError:  # extension not built
    pass


def small_net(seed, n_in=4, trunk=(8,), heads=(3, 2)):
    spec = nn.NetworkSpec(n_in, trunk, heads)
    return nn.Network.init(spec, np.random.default_rng(seed))


def test_spec_layout_is_contiguous():
    spec = nn.NetworkSpec(21, (64, 64, 64))
    end = 0
    for w, b, i, o in spec.layout():
        assert w == end and b == w + i * o
        end = b + o
    assert end == spec.n_params


def test_spec_validation():
    with pytest.raises(ValueError):
        nn.NetworkSpec(21, (), (101, 2))
    with pytest.raises(ValueError):
        nn.NetworkSpec(21, (8,), (101,))


def test_zero_network_outputs_zero():
    net = nn.Network(nn.NetworkSpec(21, (16, 16)))
    q1, q2, _ = net.forward(np.ones(21))
    assert q1.shape == (101,) and q2.shape == (2,)
    assert not q1.any() and not q2.any()


def test_hand_computed_net():
    net = nn.Network(nn.NetworkSpec(1, (1,), (1, 1)))
    for w, _, _, _ in net.layout:
        net.flat[w] = 1.0
    q1, q2, _ = net.forward(np.array([2.0]))
    assert q1[0] == 2.0 and q2[0] == 2.0
    q1, q2, _ = net.forward(np.array([-3.0]))
    assert q1[0] == 0.0 and q2[0] == 0.0


def test_forward_rejects_wrong_dim():
    net = small_net(0)
    with pytest.raises(ValueError):
        net.forward(np.zeros(5))


def test_glorot_bounds_and_zero_bias():
    net = small_net(1, 21, (64, 64), (101, 2))
    for (W, b), (_, _, i, o) in zip(net.layers(), net.layout):
        assert np.abs(W).max() <= np.sqrt(6 / (i + o))
        assert not b.any()


def random_net(seed):
    """Small net with random biases too, so no unit sits exactly on a ReLU kink."""
    rng = np.random.default_rng(seed)
    net = small_net(seed, trunk=tuple(rng.integers(3, 9, rng.integers(1, 4))))
    for _, b, _, o in net.layout:
        net.flat[b:b + o] = rng.normal(scale=0.5, size=o)
    return net, rng


@pytest.mark.parametrize("seed", range(20))
def test_gradient_check_random_nets(seed):
    net, rng = random_net(seed)
    X = rng.normal(size=(5, 4))
    err = nn.gradient_check(net, X, rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
    assert err < 1e-4


def test_backward_linearity():
    net = small_net(3)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 4))
    _, _, cache = net.forward(X)
    g1, g2 = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))
    assert not net.backward(cache, 0 * g1, 0 * g2).any()
    assert np.allclose(net.backward(cache, 3 * g1, 3 * g2), 3 * net.backward(cache, g1, g2))


def test_backward_shape_mismatch():
    net = small_net(4)
    _, _, cache = net.forward(np.zeros((2, 4)))
    with pytest.raises(ValueError):
        net.backward(cache, np.zeros((2, 4)), np.zeros((2, 2)))


def test_adam_first_step():
    net = nn.Network(nn.NetworkSpec(1, (1,), (1, 1)))
    adam = nn.AdamState.zeros(net.spec.n_params)
    g = np.zeros(net.spec.n_params)
    g[0] = 1.0
    nn.adam_step(net, adam, g)
    assert net.flat[0] == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert adam.t == 1
    assert not net.flat[1:].any()


def test_adam_zero_gradient_noop():
    net = small_net(5)
    before = net.flat.copy()
    adam = nn.AdamState.zeros(net.spec.n_params)
    nn.adam_step(net, adam, np.zeros_like(net.flat))
    assert np.array_equal(net.flat, before) and adam.t == 1


@given(st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3))
def test_adam_moves_against_gradient(g):
    net = nn.Network(nn.NetworkSpec(1, (1,), (1, 1)))
    adam = nn.AdamState.zeros(net.spec.n_params)
    grads = np.full(net.spec.n_params, g)
    xs = [net.flat[0]]
    for _ in range(2):
        nn.adam_step(net, adam, grads)
        xs.append(net.flat[0])
    assert np.sign(xs[1] - xs[0]) == -np.sign(g) and np.sign(xs[2] - xs[1]) == -np.sign(g)


def test_adam_rejects_non_finite():
    net = small_net(6)
    g = np.zeros_like(net.flat)
    g[0] = np.nan
    with pytest.raises(FloatingPointError):
        nn.adam_step(net, nn.AdamState.zeros(net.spec.n_params), g)


def test_clone_independence():
    net = small_net(7)
    c = nn.clone_params(net)
    assert np.array_equal(c.flat, net.flat)
    net.flat += 1.0
    assert not np.array_equal(c.flat, net.flat)
    c.copy_from(net)
    x = np.ones(4)
    assert np.array_equal(c.forward(x)[0], net.forward(x)[0])


def test_checkpoint_roundtrip(tmp_path):
    net = small_net(8, 21, (16, 16), (101, 2))
    adam = nn.AdamState.zeros(net.spec.n_params)
    adam.m[:] = 0.5
    adam.t = 7
    path = nn.save(tmp_path / "c.npz", net, adam, cfg_hash="abc")
    net2, adam2, header = nn.load(path)
    assert np.array_equal(net2.flat, net.flat)
    assert np.array_equal(adam2.m, adam.m) and adam2.t == 7
    assert header["config_hash"] == "abc"
    x = np.linspace(-0.5, 0.5, 21)
    assert np.array_equal(net2.forward(x)[0], net.forward(x)[0])


def test_checkpoint_dimension_error(tmp_path):
    path = nn.save(tmp_path / "c.npz", small_net(9, 21, (8,), (101, 2)))
    with pytest.raises(nn.CheckpointError, match="22"):
        nn.load(path, expect_input_dim=22)


def test_checkpoint_corrupted_shape_header(tmp_path):
    import json
    path = nn.save(tmp_path / "c.npz", small_net(10))
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        params = z["params"]
    header["shapes"][0] = [5, 8]
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), params=params)
    with pytest.raises(nn.CheckpointError):
        nn.load(path)


def test_checkpoint_version_error(tmp_path):
    import json
    path = nn.save(tmp_path / "c.npz", small_net(11))
    with np.load(path) as z:
        header = json.loads(str(z["header"]))
        params = z["params"]
    header["format_version"] = 99
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), params=params)
    with pytest.raises(nn.CheckpointError, match="version"):
        nn.load(path)


def test_config_hash_stable():
    assert nn.config_hash({"a": 1, "b": [1, 2]}) == nn.config_hash({"b": [1, 2], "a": 1})
    assert nn.config_hash({"a": 1}) != nn.config_hash({"a": 2})


# --- kernel backends ---------------------------------------------------------------

def _batch(rng, n, dim):
    return (rng.random((n, dim)) - 0.5, rng.integers(0, 101, n), rng.integers(0, 2, n),
            rng.normal(size=n), rng.random((n, dim)) - 0.5, rng.random(n) < 0.5)


def test_backend_selection(monkeypatch):
    assert nn.get_backend("numpy") is _pycore
    with pytest.raises(ValueError):
        nn.get_backend("fortran")
    assert nn.backend in BACKENDS


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
@pytest.mark.parametrize("batch", [1, 7, 100])
def test_compiled_kernels_agree(batch):
    rng = np.random.default_rng(batch)
    net = small_net(batch, 21, (64, 64, 64), (101, 2))
    tgt = small_net(batch + 1, 21, (64, 64, 64), (101, 2))
    obs, a1, a2, util, nobs, noff = _batch(rng, batch, 21)
    outs = []
    for k in BACKENDS:
        q1, q2, acts = k.forward(net.flat, net.layout, obs)
        y1, y2 = k.ddqn_targets(net.flat, tgt.flat, net.layout, util, nobs, noff, 0.97)
        outs.append((q1.copy(), q2.copy(), y1, y2))
    for a, b in zip(*outs):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
    g1, g2 = np.random.default_rng(0).normal(size=(batch, 101)), np.random.default_rng(1).normal(size=(batch, 2))
    grads = []
    for k in BACKENDS:
        _, _, acts = _pycore.forward(net.flat, net.layout, obs)
        grads.append(k.backward(net.flat, net.layout, acts, g1, g2, np.empty_like(net.flat)).copy())
    assert np.allclose(grads[0], grads[1], rtol=1e-10, atol=1e-12)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
def test_compiled_train_step_and_greedy_agree():
    rng = np.random.default_rng(42)
    base = small_net(42, 22, (32, 32), (101, 2))
    tgt = small_net(43, 22, (32, 32), (101, 2))
    obs, a1, a2, util, nobs, noff = _batch(rng, 100, 22)
    results = []
    for k in BACKENDS:
        flat = base.flat.copy()
        m, v = np.zeros_like(flat), np.zeros_like(flat)
        t = 0
        losses = []
        for _ in range(5):
            loss, t = k.train_step(flat, tgt.flat, np.empty_like(flat), m, v, t, 1e-3, 0.9, 0.999,
                                   1e-8, base.layout, obs, a1, a2, util, nobs, noff, 0.97)
            losses.append(loss)
        results.append((flat, losses, t))
    assert np.allclose(results[0][0], results[1][0], rtol=1e-9, atol=1e-12)
    assert np.allclose(results[0][1], results[1][1], rtol=1e-10)
    assert results[0][2] == results[1][2] == 5
    for i in range(20):
        x = obs[i]
        assert _pycore.greedy(base.flat, base.layout, x, bool(noff[i])) == \
            _core.greedy(base.flat, base.layout, x, bool(noff[i]))


@pytest.mark.parametrize("k", BACKENDS, ids=lambda k: k.NAME)
@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_step_rejects_non_finite(k):
    net = small_net(12, 21, (8,), (101, 2))
    rng = np.random.default_rng(0)
    obs, a1, a2, util, nobs, noff = _batch(rng, 4, 21)
    util[0] = np.inf
    flat = net.flat.copy()
    with pytest.raises(FloatingPointError):
        k.train_step(flat, net.flat, np.empty_like(flat), np.zeros_like(flat), np.zeros_like(flat), 0,
                     1e-4, 0.9, 0.999, 1e-8, net.layout, obs, a1, a2, util, nobs, noff, 0.97)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_train_step_deterministic(seed):
    rng = np.random.default_rng(seed)
    net = small_net(seed, 21, (16,), (101, 2))
    obs, a1, a2, util, nobs, noff = _batch(rng, 10, 21)
    outs = []
    for _ in range(2):
        flat = net.flat.copy()
        loss, _ = nn.backend.train_step(flat, net.flat, np.empty_like(flat), np.zeros_like(flat),
                                        np.zeros_like(flat), 0, 1e-4, 0.9, 0.999, 1e-8, net.layout,
                                        obs, a1, a2, util, nobs, noff, 0.5)
        outs.append((loss, flat))
    assert outs[0][0] == outs[1][0] and np.array_equal(outs[0][1], outs[1][1])
    assert outs[0][0] >= 0
