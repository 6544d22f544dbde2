import numpy as np
import pytest
from hypothesis import given, strategies as st

from voltmesh.nn import MLP, Adam, ShapeError, TrainingDivergence, load_networks, save_networks


def fd_grad(f, theta, h=1e-6):
    """Central differences of ``f`` w.r.t. every entry of ``theta`` (perturbed in place)."""
    theta = theta.reshape(-1)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + h
        up = f()
        theta[i] = old - h
        dn = f()
        theta[i] = old
        g[i] = (up - dn) / (2 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


@pytest.mark.parametrize("noisy", [False, True])
@pytest.mark.parametrize("acts", [("relu", "tanh"), ("tanh", "identity")])
def test_mlp_param_and_input_gradients(noisy, acts):
    rng = np.random.default_rng(0)
    net = MLP([5, 16, 16, 3], acts[0], acts[1], noisy=noisy, rng=rng, sigma0=0.3)
    net.sample_noise(rng)
    x = rng.normal(size=(7, 5))
    w = rng.normal(size=(7, 3))

    def loss():
        return float(np.sum(w * net.forward(x)))

    loss()
    net.zero_grad()
    gx = net.backward(w)
    analytic = net.flat_grad()
    assert rel_err(analytic, fd_grad(loss, net.theta)) <= 1e-4
    gx_fd = fd_grad(lambda: float(np.sum(w * net.forward(x))), x)
    assert rel_err(gx.ravel(), gx_fd) <= 1e-4


def test_zero_noise_equals_plain_network():
    rng = np.random.default_rng(1)
    noisy = MLP([6, 32, 3], "relu", "tanh", noisy=True, rng=rng)
    plain = MLP([6, 32, 3], "relu", "tanh", rng=rng)
    for lp, ln in zip(plain.layers, noisy.layers):
        lp.w[...] = ln.nu_w
        lp.b[...] = ln.nu_b
    x = rng.normal(size=(10, 6))
    noisy.sample_noise(rng)
    for l in noisy.layers:
        l.sigma_w[...] = 0.0
        l.sigma_b[...] = 0.0
    assert np.max(np.abs(noisy.forward(x) - plain.forward(x))) <= 1e-12
    noisy.clear_noise()
    assert np.max(np.abs(noisy.forward(x) - plain.forward(x))) <= 1e-12


def test_noise_changes_output_only_after_sampling():
    rng = np.random.default_rng(2)
    net = MLP([4, 8, 2], noisy=True, rng=rng, sigma0=0.5)
    x = np.ones(4)
    y0 = net.forward(x)
    assert np.array_equal(y0, net.forward(x))
    net.sample_noise(rng)
    assert not np.allclose(y0, net.forward(x))


def test_shape_checks():
    net = MLP([3, 4, 1], rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net.forward(np.ones(4))
    with pytest.raises(ShapeError):
        net.set_flat(np.ones(3))
    with pytest.raises(ValueError):
        MLP([3, 1], hidden_act="gelu")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    nets = {"a": MLP([3, 5, 2], "relu", "tanh", noisy=True, rng=rng), "b": MLP([2, 4, 1], "tanh", rng=rng)}
    save_networks(tmp_path / "c.npz", nets, {"k": 1})
    back, meta = load_networks(tmp_path / "c.npz")
    assert meta == {"k": 1}
    x = rng.normal(size=(4, 3))
    assert np.array_equal(back["a"].forward(x), nets["a"].forward(x))
    assert back["b"].acts == nets["b"].acts
    np.savez(tmp_path / "bad.npz", x=np.ones(2))
    with pytest.raises(ValueError, match="not a"):
        load_networks(tmp_path / "bad.npz")


def test_adam_matches_reference_update():
    p = np.array([1.0, -2.0])
    opt = Adam([p], lr=0.1)
    g = np.array([0.5, -1.0])
    opt.step([g])
    # first step: m_hat = g, v_hat = g^2 -> step = lr * sign(g) (up to eps)
    assert p == pytest.approx([0.9, -1.9], abs=1e-6)
    with pytest.raises(TrainingDivergence):
        opt.step([np.array([np.nan, 0.0])])


@given(st.integers(1, 5), st.integers(1, 9))
def test_copy_is_independent(n_in, width):
    net = MLP([n_in, width, 2], rng=np.random.default_rng(n_in))
    c = net.copy()
    c.theta += 1.0
    assert not np.allclose(c.theta, net.theta)
    assert c.layers[0].w.base is not None and np.shares_memory(c.layers[0].w, c.theta)
