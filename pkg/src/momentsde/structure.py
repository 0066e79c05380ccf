"""Known SDE structure with embedded hidden-physics networks.

Every supported model has drift affine in the hidden drift term,

    f(x, u) = A x + c + B g1(features(x, u)),

and diagonal diffusion ``h(x, u)`` of one of three kinds:

``sqrt2g``        h_i = sqrt(2 max(g2_i, 0)) with g2 a network output
``proportional``  h_i = sigma_i x_i
``constant``      h_i = sigma_i

Networks see ``features(x, u) = [x[feature_idx], u]`` (the input only if
``use_input``).  Parameters of the drift and diffusion nets are concatenated
into one flat vector, drift first.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import neural
from .neural import Mlp
from .sde import SdeModel

DIFFUSION_KINDS = ("sqrt2g", "proportional", "constant")


@dataclass(frozen=True)
class Structure:
    name: str
    A: np.ndarray
    c: np.ndarray
    B: np.ndarray
    diffusion: str = "constant"
    sigma: Optional[np.ndarray] = None
    feature_idx: tuple = ()
    use_input: bool = False
    input_dim: int = 0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, float))
        d = A.shape[0]
        B = np.asarray(self.B, float).reshape(d, -1)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", np.asarray(self.c, float).reshape(d))
        object.__setattr__(self, "B", B)
        if self.diffusion not in DIFFUSION_KINDS:
            raise ValueError(f"unknown diffusion kind {self.diffusion!r}")
        if self.diffusion != "sqrt2g":
            object.__setattr__(self, "sigma", np.asarray(self.sigma, float).reshape(d))
        object.__setattr__(self, "feature_idx", tuple(int(i) for i in self.feature_idx))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.state_dim

    @property
    def drift_outputs(self) -> int:
        return self.B.shape[1]

    @property
    def diffusion_outputs(self) -> int:
        return self.state_dim if self.diffusion == "sqrt2g" else 0

    @property
    def n_features(self) -> int:
        return len(self.feature_idx) + (self.input_dim if self.use_input else 0)

    def features(self, x, u):
        x = np.asarray(x, float)
        parts = [x[..., list(self.feature_idx)]]
        if self.use_input:
            parts.append(np.broadcast_to(u, x.shape[:-1] + (self.input_dim,)))
        return np.concatenate(parts, axis=-1)

    def features_vjp(self, feat_bar, x_shape):
        x_bar = np.zeros(x_shape)
        x_bar[..., list(self.feature_idx)] += feat_bar[..., :len(self.feature_idx)]
        return x_bar

    def feature_tangent(self, xdot):
        """Tangents of the features for state tangents xdot (..., k, d)."""
        parts = [xdot[..., list(self.feature_idx)]]
        if self.use_input:
            parts.append(np.zeros(xdot.shape[:-1] + (self.input_dim,)))
        return np.concatenate(parts, axis=-1)

    def feature_tangent_vjp(self, fdot_bar, xdot_shape):
        xdot_bar = np.zeros(xdot_shape)
        xdot_bar[..., list(self.feature_idx)] += fdot_bar[..., :len(self.feature_idx)]
        return xdot_bar

    # -- plain evaluation with arbitrary hidden terms ----------------------

    def drift_from(self, x, g1):
        out = x @ self.A.T + self.c
        if self.drift_outputs:
            out = out + g1 @ self.B.T
        return out

    def diffusion_from(self, x, g2):
        """Diagonal of h as an array shaped like x."""
        if self.diffusion == "sqrt2g":
            return np.sqrt(2.0 * np.maximum(g2, 0.0))
        if self.diffusion == "proportional":
            return self.sigma * x
        return np.broadcast_to(self.sigma, np.shape(x)).copy()


@dataclass(frozen=True)
class HiddenNets:
    """Drift net g1 and diffusion net g2 (either may be absent)."""
    drift: Optional[Mlp] = None
    diffusion: Optional[Mlp] = None

    @property
    def n_drift(self) -> int:
        return 0 if self.drift is None else self.drift.size

    @property
    def n_params(self) -> int:
        return self.n_drift + (0 if self.diffusion is None else self.diffusion.size)

    @property
    def params(self) -> np.ndarray:
        parts = [n.params for n in (self.drift, self.diffusion) if n is not None]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_params(self, theta) -> "HiddenNets":
        theta = np.asarray(theta, float)
        drift, diff = self.drift, self.diffusion
        if drift is not None:
            drift = drift.with_params(theta[:self.n_drift])
        if diff is not None:
            diff = diff.with_params(theta[self.n_drift:])
        return HiddenNets(drift, diff)

    def replace(self, **kw) -> "HiddenNets":
        return replace(self, **kw)


def check_compatible(structure: Structure, nets: HiddenNets, need_diffusion=True) -> None:
    if structure.drift_outputs:
        if nets.drift is None:
            raise ValueError(f"{structure.name}: drift network required")
        if (nets.drift.n_in, nets.drift.n_out) != (structure.n_features, structure.drift_outputs):
            raise ValueError(f"{structure.name}: drift network has wrong signature")
    if need_diffusion and structure.diffusion == "sqrt2g":
        if nets.diffusion is None:
            raise ValueError(f"{structure.name}: diffusion network required")
        if (nets.diffusion.n_in, nets.diffusion.n_out) != (
                structure.n_features, structure.diffusion_outputs):
            raise ValueError(f"{structure.name}: diffusion network has wrong signature")


# --------------------------------------------------------------------------
# batched point evaluation with reverse pass


def eval_terms(structure: Structure, nets: HiddenNets, x, u, need_h=True):
    """Drift f and diffusion diagonal H at points x (..., d) with inputs u.

    ``u`` must broadcast against ``x.shape[:-1] + (input_dim,)``.
    Returns ``(f, H, cache)``; H is None when ``need_h`` is false.
    """
    feat = structure.features(x, u) if structure.n_features else None
    g1 = c1 = None
    if structure.drift_outputs:
        g1, c1 = neural.forward(nets.drift, feat)
    f = structure.drift_from(x, g1)
    H = g2 = c2 = None
    if need_h:
        if structure.diffusion == "sqrt2g":
            g2, c2 = neural.forward(nets.diffusion, feat)
        H = structure.diffusion_from(x, g2)
    return f, H, (x.shape, c1, c2, g2, H)


def terms_backward(structure: Structure, nets: HiddenNets, cache, f_bar, H_bar=None):
    """Returns ``(x_bar, theta_bar)`` for cotangents of f and H."""
    x_shape, c1, c2, g2, H = cache
    x_bar = f_bar @ structure.A
    theta_bar = np.zeros(nets.n_params)
    feat_bar = None
    if structure.drift_outputs:
        tb, fb = neural.backward(nets.drift, c1, f_bar @ structure.B)
        theta_bar[:nets.n_drift] = tb
        feat_bar = fb
    if H_bar is not None:
        if structure.diffusion == "sqrt2g":
            pos = g2 > 0
            g2_bar = np.where(pos, H_bar / np.where(pos, H, 1.0), 0.0)
            tb, fb = neural.backward(nets.diffusion, c2, g2_bar)
            theta_bar[nets.n_drift:] = tb
            feat_bar = fb if feat_bar is None else feat_bar + fb
        elif structure.diffusion == "proportional":
            x_bar = x_bar + H_bar * structure.sigma
    if feat_bar is not None:
        x_bar = x_bar + structure.features_vjp(feat_bar, x_shape)
    return x_bar, theta_bar


# --------------------------------------------------------------------------
# simulation model from a structure


def to_sde(structure: Structure, nets: HiddenNets, name=None, lower=None, upper=None,
           project=None) -> SdeModel:
    """Simulable SDE with the given (trained or true) hidden terms."""
    d = structure.state_dim

    def drift(x, u):
        return eval_terms(structure, nets, x, u, need_h=False)[0]

    def diffusion(x, u):
        H = eval_terms(structure, nets, x, u)[1]
        out = np.zeros(H.shape + (d,))
        idx = np.arange(d)
        out[..., idx, idx] = H
        return out

    return SdeModel(d, structure.input_dim, d, drift, diffusion,
                    name=name or structure.name, lower=lower, upper=upper, project=project)
