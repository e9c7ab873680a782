"""Policy networks producing normalized hyperparameters in (0, 1).

A small MLP (two ReLU hidden layers, sigmoid output) maps an observation
to normalized hyperparameters; an affine map then places them inside
configured bounds.  Every linear layer is spectrally normalized: the
effective weight is the raw weight divided by its largest singular
value, estimated with a persistent power-iteration pair that is treated
as constant during differentiation (so backprop and finite differences
agree exactly).

Forward, backprop, and Adam are hand-rolled on numpy; networks are plain
value objects that round-trip bit-exactly through JSON checkpoints.
"""

import json
from dataclasses import dataclass, field

import numpy as np


def _power_iteration(w, u, iters=1):
    for _ in range(iters):
        v = w.T @ u
        v = v / max(np.linalg.norm(v), 1e-12)
        u = w @ v
        u = u / max(np.linalg.norm(u), 1e-12)
    sigma = float(u @ w @ v)
    return u, v, max(sigma, 1e-12)


@dataclass
class Layer:
    w: np.ndarray
    b: np.ndarray
    u: np.ndarray  # persistent power-iteration vector, length = rows of w

    def effective(self):
        # sigma from the stored u without refreshing it
        v = self.w.T @ self.u
        v = v / max(np.linalg.norm(v), 1e-12)
        sigma = max(float(self.u @ self.w @ v), 1e-12)
        return self.w / sigma, sigma, v

    def refresh(self, iters=1):
        self.u, _, _ = _power_iteration(self.w, self.u, iters)

    def refresh_until(self, tol=1e-9, max_iters=200):
        """Iterate the spectral estimate to a fixed point.

        Used after parameter updates: a single step can lag a fast-moving
        top singular pair enough to break the normalization bound."""
        prev = -np.inf
        for _ in range(max_iters):
            self.u, _, sigma = _power_iteration(self.w, self.u, 1)
            if abs(sigma - prev) < tol * max(1.0, sigma):
                break
            prev = sigma


@dataclass
class PolicyNet:
    layers: list
    sizes: list

    @classmethod
    def create(cls, n_in, n_out, hidden=30, init_scale=0.1, out_bias=0.0,
               seed=0):
        rng = np.random.default_rng(seed)
        sizes = [n_in, hidden, hidden, n_out]
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            w = rng.normal(size=(b, a)) * init_scale
            bias = np.zeros(b)
            u = rng.normal(size=b)
            u /= np.linalg.norm(u)
            layer = Layer(w, bias, u)
            layer.refresh_until()
            layers.append(layer)
        layers[-1].b[:] = out_bias
        return cls(layers, sizes)

    @property
    def n_out(self):
        return self.sizes[-1]

    def parameter_vector(self):
        return np.concatenate([np.r_[l.w.ravel(), l.b] for l in self.layers])

    def set_parameter_vector(self, vec):
        off = 0
        for l in self.layers:
            n = l.w.size
            l.w = vec[off:off + n].reshape(l.w.shape).copy()
            off += n
            l.b = vec[off:off + len(l.b)].copy()
            off += len(l.b)


def forward(net, obs, train=False):
    """Evaluate the net; returns (theta_normalized, cache for backprop).

    With train=True each layer's power-iteration vector is refreshed once
    before use, the standard per-step spectral update.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (net.sizes[0],):
        raise ValueError(f"observation must have dim {net.sizes[0]}")
    cache = {"inputs": [], "preacts": [], "effs": [], "sigmas": [], "vs": []}
    h = obs
    for idx, layer in enumerate(net.layers):
        if train:
            layer.refresh(iters=1)
        w_eff, sigma, v = layer.effective()
        cache["inputs"].append(h)
        z = w_eff @ h + layer.b
        cache["preacts"].append(z)
        cache["effs"].append(w_eff)
        cache["sigmas"].append(sigma)
        cache["vs"].append(v)
        if idx < len(net.layers) - 1:
            h = np.maximum(z, 0.0)
        else:
            h = 1.0 / (1.0 + np.exp(-z))
    return h, cache


def backprop(net, cache, d_theta):
    """Gradient of d_theta . Theta w.r.t. the raw parameter vector."""
    grads = []
    out = 1.0 / (1.0 + np.exp(-cache["preacts"][-1]))
    delta = np.asarray(d_theta, dtype=float) * out * (1.0 - out)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        if idx < len(net.layers) - 1:
            delta = delta * (cache["preacts"][idx] > 0)
        dw_eff = np.outer(delta, cache["inputs"][idx])
        sigma, v = cache["sigmas"][idx], cache["vs"][idx]
        w_eff = cache["effs"][idx]
        # d(w/sigma)/dw with sigma = u^T w v and u, v held constant
        dw = dw_eff / sigma - (np.sum(dw_eff * w_eff) / sigma) \
            * np.outer(layer.u, v)
        grads.append((dw, delta.copy()))
        delta = w_eff.T @ delta
    grads = grads[::-1]
    return np.concatenate([np.r_[dw.ravel(), db] for dw, db in grads])


def jacobian(net, obs):
    """Full d Theta / d parameters, one backprop row per output."""
    theta, cache = forward(net, obs)
    rows = []
    for j in range(net.n_out):
        seed = np.zeros(net.n_out)
        seed[j] = 1.0
        rows.append(backprop(net, cache, seed))
    return theta, np.stack(rows)


@dataclass
class HyperBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if not np.all(self.lo < self.hi):
            raise ValueError("bounds must satisfy lo < hi componentwise")


def to_hyperparameters(theta_norm, bounds):
    """Affine placement into [lo, hi]; returns (theta, diagonal jacobian)."""
    theta_norm = np.asarray(theta_norm, dtype=float)
    span = bounds.hi - bounds.lo
    return bounds.lo + span * theta_norm, span


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    t: int = 0
    skipped: int = 0


def apply_gradient(net, adam, grad):
    """One Adam step on the raw parameters; non-finite gradients are
    skipped (counted, parameters untouched).  The spectral estimate is
    refreshed once per layer after the update."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        adam.skipped += 1
        return net
    params = net.parameter_vector()
    if adam.m is None:
        adam.m = np.zeros_like(params)
        adam.v = np.zeros_like(params)
    adam.t += 1
    adam.m = adam.beta1 * adam.m + (1 - adam.beta1) * grad
    adam.v = adam.beta2 * adam.v + (1 - adam.beta2) * grad * grad
    m_hat = adam.m / (1 - adam.beta1 ** adam.t)
    v_hat = adam.v / (1 - adam.beta2 ** adam.t)
    params = params - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps)
    net.set_parameter_vector(params)
    for layer in net.layers:
        layer.refresh_until()
    return net


# ---------------------------------------------------------------------------
# Checkpoints: bit-exact JSON round trip.

def net_to_dict(net, adam=None):
    out = {
        "architecture": list(net.sizes),
        "layers": [{"w": l.w.tolist(), "b": l.b.tolist(), "u": l.u.tolist()}
                   for l in net.layers],
    }
    if adam is not None:
        out["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "t": adam.t, "skipped": adam.skipped,
            "m": None if adam.m is None else adam.m.tolist(),
            "v": None if adam.v is None else adam.v.tolist(),
        }
    return out


def net_from_dict(d):
    layers = [Layer(np.array(l["w"], dtype=float), np.array(l["b"], dtype=float),
                    np.array(l["u"], dtype=float)) for l in d["layers"]]
    net = PolicyNet(layers, list(d["architecture"]))
    adam = None
    if "adam" in d:
        a = d["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                         eps=a["eps"], t=a["t"], skipped=a["skipped"],
                         m=None if a["m"] is None else np.array(a["m"]),
                         v=None if a["v"] is None else np.array(a["v"]))
    return net, adam


def save_checkpoint(path, nets, adams=None, meta=None):
    payload = {"meta": meta or {}}
    payload["nets"] = {name: net_to_dict(net, (adams or {}).get(name))
                       for name, net in nets.items()}
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path):
    with open(path) as f:
        payload = json.load(f)
    nets, adams = {}, {}
    for name, d in payload["nets"].items():
        net, adam = net_from_dict(d)
        nets[name] = net
        if adam is not None:
            adams[name] = adam
    return nets, adams, payload.get("meta", {})
