"""Small dense networks with hand-written reverse mode.

Layers compute ``y = x @ W + b`` on row batches. A noisy layer uses
``W = nu_w + sigma_w * eps_w`` and ``b = nu_b + sigma_b * eps_b``; the noise
``eps`` only changes on ``sample_noise``/``clear_noise`` so gradients are
taken with the noise frozen.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

CHECKPOINT_FORMAT = "voltmesh-nn"
CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


class Dense:
    kind = "dense"
    param_names = ("w", "b")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.b = rng.uniform(-bound, bound, size=n_out)
        self.grads = {k: np.zeros_like(getattr(self, k)) for k in self.param_names}
        self._x = None

    @property
    def shape(self):
        return self.w.shape

    def weight(self):
        return self.w, self.b

    def forward(self, x):
        self._x = x
        w, b = self.weight()
        self._w = w
        return x @ w + b

    def backward(self, dy):
        x = self._x
        np.matmul(x.T, dy, out=self.grads["w"])
        np.sum(dy, axis=0, out=self.grads["b"])
        return dy @ self._w.T


class NoisyDense(Dense):
    kind = "noisy"
    param_names = ("nu_w", "sigma_w", "nu_b", "sigma_b")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, sigma0: float = 0.017):
        bound = 1.0 / np.sqrt(n_in)
        self.nu_w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.nu_b = rng.uniform(-bound, bound, size=n_out)
        self.sigma_w = np.full((n_in, n_out), sigma0)
        self.sigma_b = np.full(n_out, sigma0)
        self.eps_w = np.zeros((n_in, n_out))
        self.eps_b = np.zeros(n_out)
        self.grads = {k: np.zeros_like(getattr(self, k)) for k in self.param_names}
        self._x = None

    @property
    def shape(self):
        return self.nu_w.shape

    def backward(self, dy):
        x = self._x
        gw, gb = self.grads["nu_w"], self.grads["nu_b"]
        np.matmul(x.T, dy, out=gw)
        np.sum(dy, axis=0, out=gb)
        np.multiply(gw, self.eps_w, out=self.grads["sigma_w"])
        np.multiply(gb, self.eps_b, out=self.grads["sigma_b"])
        return dy @ self._w.T

    def sample_noise(self, rng: np.random.Generator):
        self.eps_w = rng.standard_normal(self.nu_w.shape)
        self.eps_b = rng.standard_normal(self.nu_b.shape)

    def clear_noise(self):
        self.eps_w = np.zeros_like(self.nu_w)
        self.eps_b = np.zeros_like(self.nu_b)

    def weight(self):
        if not self.eps_b.any() and not self.eps_w.any():
            return self.nu_w, self.nu_b
        return self.nu_w + self.sigma_w * self.eps_w, self.nu_b + self.sigma_b * self.eps_b


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a, dy):
    if name == "relu":
        return dy * (z > 0)
    if name == "tanh":
        return dy * (1.0 - a * a)
    return dy


class MLP:
    """Feed-forward stack; doubles as the noisy network when ``noisy=True``.

    ``forward`` caches what ``backward`` needs. ``backward`` stores parameter
    gradients on each layer and returns the gradient w.r.t. the input.
    """

    def __init__(self, sizes: Sequence[int], hidden_act: str = "relu", out_act: str = "identity",
                 noisy: bool = False, rng: Optional[np.random.Generator] = None, sigma0: float = 0.017):
        if len(sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        for a in (hidden_act, out_act):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        rng = rng if rng is not None else np.random.default_rng()
        self.sizes = list(sizes)
        self.noisy = noisy
        self.sigma0 = sigma0
        self.acts = [hidden_act] * (len(sizes) - 2) + [out_act]
        if noisy:
            self.layers = [NoisyDense(i, o, rng, sigma0) for i, o in zip(sizes[:-1], sizes[1:])]
        else:
            self.layers = [Dense(i, o, rng) for i, o in zip(sizes[:-1], sizes[1:])]
        self._cache = None
        self._bind(np.concatenate([getattr(l, k).ravel() for l in self.layers for k in l.param_names]))

    def _bind(self, theta):
        """Make every layer parameter (and gradient) a view into one flat vector."""
        self.theta = theta
        self.grad = np.zeros_like(theta)
        k = 0
        for layer in self.layers:
            for name in layer.param_names:
                shape = getattr(layer, name).shape
                size = int(np.prod(shape))
                setattr(layer, name, theta[k:k + size].reshape(shape))
                layer.grads[name] = self.grad[k:k + size].reshape(shape)
                k += size

    @property
    def n_in(self):
        return self.sizes[0]

    @property
    def n_out(self):
        return self.sizes[-1]

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"input width {x.shape[-1]} != {self.n_in}")
        cache = []
        h = x
        for layer, act in zip(self.layers, self.acts):
            z = layer.forward(h)
            h = _act(act, z)
            cache.append((z, h))
        self._cache = (cache, single)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_out):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cache, single = self._cache
        g = np.asarray(grad_out, dtype=float)
        if single:
            g = g[None, :]
        for layer, act, (z, a) in zip(reversed(self.layers), reversed(self.acts), reversed(cache)):
            g = layer.backward(_act_grad(act, z, a, g))
        return g[0] if single else g

    # -- parameter access -----------------------------------------------------

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for k in layer.param_names:
                yield f"layer{i}.{k}", layer, k

    def params(self):
        return [self.theta]

    def grads(self):
        return [self.grad]

    def param_arrays(self):
        return [getattr(layer, k) for _, layer, k in self.named_params()]

    def n_params(self) -> int:
        return int(self.theta.size)

    def get_flat(self) -> np.ndarray:
        return self.theta.copy()

    def set_flat(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params():
            raise ShapeError(f"expected {self.n_params()} parameters, got {theta.size}")
        self.theta[...] = theta.ravel()

    def flat_grad(self) -> np.ndarray:
        return self.grad.copy()

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes, other.noisy, other.sigma0 = list(self.sizes), self.noisy, self.sigma0
        other.acts = list(self.acts)
        other.layers = []
        for layer in self.layers:
            clone = layer.__class__.__new__(layer.__class__)
            clone.__dict__ = {k: (v.copy() if isinstance(v, np.ndarray) else v)
                              for k, v in layer.__dict__.items() if k not in ("grads", "_x", "_w")}
            clone.grads = {}
            clone._x = None
            other.layers.append(clone)
        other._cache = None
        other._bind(self.theta.copy())
        return other

    # -- noise ----------------------------------------------------------------

    def sample_noise(self, rng: np.random.Generator):
        for layer in self.layers:
            if isinstance(layer, NoisyDense):
                layer.sample_noise(rng)

    def clear_noise(self):
        for layer in self.layers:
            if isinstance(layer, NoisyDense):
                layer.clear_noise()

    # -- checkpoints ----------------------------------------------------------

    def spec(self) -> dict:
        return {"sizes": self.sizes, "acts": self.acts, "noisy": self.noisy, "sigma0": self.sigma0}

    def state_dict(self) -> dict:
        return {name: getattr(layer, k).copy() for name, layer, k in self.named_params()}

    def load_state_dict(self, state: dict):
        for name, layer, k in self.named_params():
            arr = np.asarray(state[name], dtype=float)
            if arr.shape != getattr(layer, k).shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {getattr(layer, k).shape}")
            getattr(layer, k)[...] = arr


def sample_noise(net: MLP, rng: np.random.Generator):
    net.sample_noise(rng)


def clear_noise(net: MLP):
    net.clear_noise()


def save_networks(path, nets: dict, meta: Optional[dict] = None) -> Path:
    """Write named networks to one ``.npz``; headers carry format and version."""
    arrays = {}
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "nets": {}, "meta": meta or {}}
    for key, net in nets.items():
        header["nets"][key] = net.spec()
        for name, arr in net.state_dict().items():
            arrays[f"{key}/{name}"] = arr
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    p = Path(path)
    with open(p, "wb") as fh:
        np.savez(fh, **arrays)
    return p


def load_networks(path):
    """Inverse of ``save_networks``: returns ``(nets, meta)``."""
    with np.load(path) as data:
        if "__header__" not in data:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        nets = {}
        for key, spec in header["nets"].items():
            net = MLP(spec["sizes"], spec["acts"][0] if len(spec["acts"]) > 1 else "relu", spec["acts"][-1],
                      noisy=spec["noisy"], rng=np.random.default_rng(0), sigma0=spec["sigma0"])
            net.acts = list(spec["acts"])
            net.load_state_dict({k.split("/", 1)[1]: data[k] for k in data.files if k.startswith(key + "/")})
            nets[key] = net
    return nets, header["meta"]


class Adam:
    """Adaptive-moment optimizer updating parameter arrays in place."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads, context: str = ""):
        grads = list(grads)
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise TrainingDivergence(f"non-finite gradient at Adam step {self.t + 1} {context}".strip())
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state: Optional[Adam] = None, lr: float = 1e-3) -> Adam:
    """Functional wrapper: one Adam step, creating the state on first use."""
    if state is None:
        state = Adam(params, lr=lr)
    state.lr = lr
    state.step(grads)
    return state
