"""Small fully-connected networks with hand-written reverse-mode gradients.

Parameters live in one flat vector.  Layout, per layer in order: the weight
matrix (n_out x n_in, row-major) followed by the bias vector (n_out).

Inputs are standardized as ``(x - in_shift) / in_scale`` before the first
layer and outputs are mapped through ``out_shift + out_scale * head(z)``.
Both affine maps are fixed (not trained) and travel with the checkpoint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HEADS = ("linear", "softplus")
_MAGIC = b"MLPCKPT1\n"


class ShapeError(ValueError):
    pass


def n_params(layer_sizes) -> int:
    return sum(o * i + o for i, o in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True)
class Mlp:
    layer_sizes: tuple
    params: np.ndarray
    activation: str = "tanh"
    head: str = "linear"
    in_shift: np.ndarray = None
    in_scale: np.ndarray = None
    out_shift: np.ndarray = None
    out_scale: np.ndarray = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown output head {self.head!r}")
        params = np.asarray(self.params, dtype=float)
        if params.shape != (n_params(sizes),):
            raise ShapeError(
                f"expected {n_params(sizes)} parameters, got {params.shape}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "params", params)
        defaults = {"in_shift": (sizes[0], 0.0), "in_scale": (sizes[0], 1.0),
                    "out_shift": (sizes[-1], 0.0), "out_scale": (sizes[-1], 1.0)}
        for name, (size, fill) in defaults.items():
            value = getattr(self, name)
            value = np.full(size, fill) if value is None else np.asarray(value, float)
            if value.shape != (size,):
                raise ShapeError(f"{name} must have shape ({size},)")
            object.__setattr__(self, name, value)

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    @property
    def size(self) -> int:
        return self.params.size

    def with_params(self, params) -> "Mlp":
        return replace(self, params=np.asarray(params, float))

    def layers(self, params=None):
        """Views ``(W, b)`` into the flat parameter vector."""
        theta = self.params if params is None else params
        out, pos = [], 0
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = theta[pos:pos + n_out * n_in].reshape(n_out, n_in)
            pos += n_out * n_in
            out.append((W, theta[pos:pos + n_out]))
            pos += n_out
        return out

    def __call__(self, x):
        return mlp_forward(self, x)


def init_params(layer_sizes, activation="tanh", seed=0) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    if activation != "tanh":
        raise ValueError(f"unsupported activation {activation!r}")
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-bound, bound, size=n_out * n_in))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks)


def make_mlp(layer_sizes, head="linear", seed=0, **scaling) -> Mlp:
    return Mlp(tuple(layer_sizes), init_params(layer_sizes, seed=seed),
               head=head, **scaling)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_input(net, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (net.n_in,):
        raise ShapeError(f"input has trailing dim {x.shape[-1:]}, net expects {net.n_in}")
    return x


# --------------------------------------------------------------------------
# primal pass


def forward(net: Mlp, x):
    """Batched forward pass.  Returns ``(y, cache)``; x has shape (..., n_in)."""
    x = _check_input(net, x)
    a = (x - net.in_shift) / net.in_scale
    acts = [a]
    layers = net.layers()
    for W, b in layers[:-1]:
        a = np.tanh(a @ W.T + b)
        acts.append(a)
    W, b = layers[-1]
    z = a @ W.T + b
    if net.head == "softplus":
        y = net.out_shift + net.out_scale * _softplus(z)
    else:
        y = net.out_shift + net.out_scale * z
    return y, (acts, z)


def backward(net: Mlp, cache, ybar):
    """Reverse pass of :func:`forward`.  Returns ``(theta_bar, x_bar)``."""
    acts, z = cache
    zbar = ybar * net.out_scale
    if net.head == "softplus":
        zbar = zbar * _sigmoid(z)
    grads = []
    layers = net.layers()
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        a_in = acts[idx]
        flat_a = a_in.reshape(-1, a_in.shape[-1])
        flat_z = zbar.reshape(-1, zbar.shape[-1])
        grads.append(flat_z.sum(axis=0))
        grads.append((flat_z.T @ flat_a).ravel())
        abar = zbar @ W
        if idx > 0:
            zbar = abar * (1.0 - a_in * a_in)
    theta_bar = np.concatenate(grads[::-1])
    return theta_bar, abar / net.in_scale


def mlp_forward(net: Mlp, x):
    return forward(net, x)[0]


def mlp_grad(net: Mlp, x, upstream):
    """Gradients of ``upstream . forward(x)`` w.r.t. parameters and input."""
    y, cache = forward(net, x)
    upstream = np.broadcast_to(np.asarray(upstream, float), y.shape)
    return backward(net, cache, upstream)


def input_jacobian(net: Mlp, x):
    """d out / d in at a single point, via one reverse pass per output."""
    x = _check_input(net, x)
    rows = [mlp_grad(net, x, np.eye(net.n_out)[j])[1] for j in range(net.n_out)]
    return np.stack(rows)


# --------------------------------------------------------------------------
# tangent (forward-mode) pass and its reverse, used by linearized propagation


def jvp(net: Mlp, x, xdot):
    """Value and directional derivatives.

    ``x`` has shape (..., n_in), ``xdot`` (..., k, n_in) holds k tangent
    directions.  Returns ``(y, ydot, cache)`` with ydot of shape (..., k, n_out).
    """
    x = _check_input(net, x)
    a = (x - net.in_shift) / net.in_scale
    adot = xdot / net.in_scale
    acts, dots, zdots = [a], [adot], [None]
    layers = net.layers()
    for W, b in layers[:-1]:
        a = np.tanh(a @ W.T + b)
        zd = adot @ W.T
        adot = zd * (1.0 - a * a)[..., None, :]
        acts.append(a)
        dots.append(adot)
        zdots.append(zd)
    W, b = layers[-1]
    z = a @ W.T + b
    zdot = adot @ W.T
    if net.head == "softplus":
        y = net.out_shift + net.out_scale * _softplus(z)
        ydot = net.out_scale * _sigmoid(z)[..., None, :] * zdot
    else:
        y = net.out_shift + net.out_scale * z
        ydot = net.out_scale * zdot
    return y, ydot, (acts, dots, zdots, z, zdot)


def jvp_backward(net: Mlp, cache, ybar, ydotbar):
    """Reverse pass of :func:`jvp`.  Returns ``(theta_bar, x_bar, xdot_bar)``."""
    acts, dots, zdots, z, zdot = cache
    if net.head == "softplus":
        s = _sigmoid(z)
        zbar = net.out_scale * (s * ybar
                                + s * (1.0 - s) * np.sum(zdot * ydotbar, axis=-2))
        zdotbar = net.out_scale * s[..., None, :] * ydotbar
    else:
        zbar = net.out_scale * ybar
        zdotbar = net.out_scale * ydotbar
    grads = []
    layers = net.layers()
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        a_in, adot_in = acts[idx], dots[idx]
        fz = zbar.reshape(-1, zbar.shape[-1])
        fzd = zdotbar.reshape(-1, zdotbar.shape[-1])
        grads.append(fz.sum(axis=0))
        gW = fz.T @ a_in.reshape(-1, a_in.shape[-1])
        gW += fzd.T @ adot_in.reshape(-1, adot_in.shape[-1])
        grads.append(gW.ravel())
        abar = zbar @ W
        adotbar = zdotbar @ W
        if idx > 0:
            # a = tanh(z), adot = (1 - a^2) zdot
            da = 1.0 - a_in * a_in
            zbar = da * abar - 2.0 * a_in * da * np.sum(zdots[idx] * adotbar, axis=-2)
            zdotbar = da[..., None, :] * adotbar
    theta_bar = np.concatenate(grads[::-1])
    return theta_bar, abar / net.in_scale, adotbar / net.in_scale


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Mlp, path) -> None:
    """Header line of JSON after a magic line, then little-endian float64 params."""
    header = {
        "layer_sizes": list(net.layer_sizes),
        "activation": net.activation,
        "head": net.head,
        "in_shift": net.in_shift.tolist(),
        "in_scale": net.in_scale.tolist(),
        "out_shift": net.out_shift.tolist(),
        "out_scale": net.out_scale.tolist(),
        "n_params": net.size,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(net.params.astype("<f8").tobytes())


def load_checkpoint(path) -> Mlp:
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a network checkpoint")
    end = blob.index(b"\n", len(_MAGIC))
    header = json.loads(blob[len(_MAGIC):end])
    params = np.frombuffer(blob[end + 1:], dtype="<f8").astype(float)
    if params.size != header["n_params"]:
        raise ValueError(f"{path}: truncated parameter block")
    return Mlp(tuple(header["layer_sizes"]), params,
               activation=header["activation"], head=header["head"],
               in_shift=header["in_shift"], in_scale=header["in_scale"],
               out_shift=header["out_shift"], out_scale=header["out_scale"])
