"""One-step moment propagation through a known structure with embedded nets.

Three propagators, all batched over records and all differentiable with
respect to the network parameters:

decoupled   sigma points of the augmented state [x, w] are integrated as
            independent ODEs  dY/dt = f(Y) + h(Y) * w  with the noise frozen
            over the interval; moments are recovered with the UT weights.
coupled     mean and covariance ODEs with sigma points re-formed from
            (m(t), P(t)) at every solver stage.
linearized  dm/dt = f(m),  dP/dt = J P + P J^T + diag(h(m)^2).

Noise enters with unit spectral density; all scaling lives in h.  The frozen
noise is drawn with covariance I/dt over an interval of length dt, so its
contribution to the covariance is h^2 dt, as for one Euler-Maruyama step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from . import neural
from .odeint import IntegrationError, SolverConfig, backprop_integrate, integrate
from .structure import HiddenNets, Structure, check_compatible, eval_terms, terms_backward
from .unscented import (PropagationError, UtParams, block_template, chol_backward,
                        chol_jitter, four_moment_template, safe_higher_moments, ut_template)

log = logging.getLogger(__name__)

PROPAGATORS = ("linearization", "ut2m", "ut4m")
KINDS = ("decoupled", "coupled", "linearized")
SYMMETRY_TOL = 1e-8


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _centre(Y, w):
    """Rows Y (B, S, d) about row 0: ``(D, dev, C)`` with dev = w.D and C = D - dev."""
    D = Y - Y[:, :1]
    dev = np.einsum("bs,bsd->bd", w, D)
    return D, dev, D - dev[:, None, :]


def _centre_backward(C_bar, w, dev_bar=None):
    """Cotangent of D given those of C (and optionally of dev)."""
    g = -C_bar.sum(axis=1)
    if dev_bar is not None:
        g = g + dev_bar
    return C_bar + w[:, :, None] * g[:, None, :]


def _wsum(X, w, F):
    """sum_s w_s X_s F_s^T for rows X, F (B, S, d)."""
    return np.einsum("bsi,bs,bsj->bij", X, w, F)


@dataclass
class Start:
    """Per-record starting moments and (for the decoupled scheme) sigma points."""
    mean: np.ndarray  # B x d
    cov: np.ndarray  # B x d x d
    u: np.ndarray  # B x p
    xi: Optional[np.ndarray] = None  # B x n x S unit points
    wm: Optional[np.ndarray] = None  # B x S
    wc: Optional[np.ndarray] = None  # B x S covariance weights
    points: Optional[np.ndarray] = None  # B x S x d (decoupled)
    noise: Optional[np.ndarray] = None  # B x S x q (decoupled)
    wmean: Optional[np.ndarray] = None  # B x S, noise columns folded into the centre

    def take(self, idx) -> "Start":
        kw = {}
        for f in fields(self):
            v = getattr(self, f.name)
            kw[f.name] = None if v is None else v[idx]
        return Start(**kw)

    @property
    def size(self) -> int:
        return self.mean.shape[0]


def _higher(skew, kurt, d, B):
    if skew is None or kurt is None:
        raise ValueError("ut4m needs per-record skew and kurtosis")
    skew = np.broadcast_to(np.asarray(skew, float), (B, d)).copy()
    kurt = np.broadcast_to(np.asarray(kurt, float), (B, d)).copy()
    # records with a zero-variance component carry (0, 0); give them Gaussian values
    degenerate = (skew == 0.0) & (kurt == 0.0)
    kurt[degenerate] = 3.0
    return safe_higher_moments(skew, kurt)


@dataclass(frozen=True)
class Propagator:
    kind: str = "decoupled"
    method: str = "ut2m"
    structure: Structure = None
    dt: float = 1.0
    solver: SolverConfig = SolverConfig()
    ut: UtParams = UtParams()
    mean_only: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown propagator kind {self.kind!r}")
        if self.method not in ("ut2m", "ut4m"):
            raise ValueError(f"unknown sigma-point method {self.method!r}")
        if self.dt < 0:
            raise ValueError("dt must be non-negative")

    # -- setup -------------------------------------------------------------

    def prepare(self, mean, cov, u=None, skew=None, kurt=None) -> Start:
        mean = np.atleast_2d(np.asarray(mean, float))
        B, d = mean.shape
        cov = np.asarray(cov, float).reshape(B, d, d)
        p = self.structure.input_dim
        u = np.zeros((B, p)) if u is None else np.asarray(u, float).reshape(B, p)
        start = Start(mean, cov, u)
        if self.kind == "linearized":
            return start
        if self.kind == "coupled":
            if self.method == "ut4m":
                t = four_moment_template(*_higher(skew, kurt, d, B))
            else:
                t = ut_template(d, self.ut)
            start.xi = np.broadcast_to(t.xi, (B,) + t.xi.shape[-2:])
            start.wm = np.broadcast_to(t.mean_weights, (B,) + t.mean_weights.shape[-1:])
            start.wc = np.broadcast_to(t.cov_weights, (B,) + t.cov_weights.shape[-1:])
            return start
        return self._prepare_decoupled(start, skew, kurt)

    def _prepare_decoupled(self, start: Start, skew, kurt) -> Start:
        B, d = start.mean.shape
        q = self.structure.noise_dim
        if self.method == "ut4m":
            t = block_template(four_moment_template(*_higher(skew, kurt, d, B)), q)
        else:
            t = ut_template(d + q, self.ut)
        xi = np.broadcast_to(t.xi, (B,) + t.xi.shape[-2:])
        wm = np.broadcast_to(t.mean_weights, (B,) + t.mean_weights.shape[-1:])
        wc = np.broadcast_to(t.cov_weights, (B,) + t.cov_weights.shape[-1:])
        S = xi.shape[-1]
        noise_cols = np.r_[1 + d:1 + d + q, 1 + 2 * d + q:S]
        L, _ = chol_jitter(start.cov)
        pts = start.mean[:, :, None] + L @ xi[:, :d, :]  # B x d x S
        scale = 1.0 / np.sqrt(self.dt) if self.dt > 0 else 0.0
        noise = xi[:, d:, :] * scale
        wmean = wm.copy()
        wmean[:, 0] += wm[:, noise_cols].sum(axis=1)
        wmean[:, noise_cols] = 0.0
        if self.mean_only:
            keep = np.setdiff1d(np.arange(S), noise_cols)
            pts, noise, wmean = pts[:, :, keep], noise[:, :, keep], wmean[:, keep]
            wm, wc, xi = wm[:, keep], wc[:, keep], xi[:, :, keep]
        start.xi, start.wm, start.wc = xi, wm, wc
        start.points = np.ascontiguousarray(_swap(pts))
        start.noise = np.ascontiguousarray(_swap(noise))
        start.wmean = wmean
        return start

    # -- forward / backward ------------------------------------------------

    def forward(self, nets: HiddenNets, start: Start):
        """Predicted ``(mean, cov, ctx)``; cov is None in mean-only mode."""
        check_compatible(self.structure, nets, need_diffusion=not self.mean_only)
        if self.dt == 0:
            cov = None if self.mean_only else start.cov.copy()
            return start.mean.copy(), cov, (None, None, nets.n_params)
        try:
            if self.kind == "decoupled":
                return self._forward_decoupled(nets, start)
            return self._forward_moments(nets, start)
        except IntegrationError as exc:
            raise PropagationError(f"{self.kind} propagation: {exc}") from None

    def backward(self, ctx, mean_bar, cov_bar=None):
        """Cotangent of the flat parameter vector of the nets used in forward."""
        rhs, tape, extra = ctx
        if rhs is None:
            return np.zeros(extra)
        B = mean_bar.shape[0]
        d = self.structure.state_dim
        if cov_bar is None:
            cov_bar = np.zeros((B, d, d))
        if self.kind == "decoupled":
            C, wm, wc, wmean = extra
            Cbar = wc[:, :, None] * (C @ (cov_bar + _swap(cov_bar)))
            Dbar = _centre_backward(Cbar, wm) + wmean[:, :, None] * mean_bar[:, None, :]
            Ybar = Dbar
            Ybar[:, 0] += mean_bar - Dbar.sum(axis=1)
            _, theta_bar = backprop_integrate(tape, rhs, Ybar)
            return theta_bar
        ybar = np.concatenate([mean_bar, cov_bar.reshape(B, d * d)], axis=1)
        _, theta_bar = backprop_integrate(tape, rhs, ybar)
        return theta_bar

    def _forward_decoupled(self, nets, start):
        rhs = _DecoupledRhs(self.structure, nets, start.u, start.noise, self.mean_only)
        Y, tape = integrate(rhs, start.points, self.dt, self.solver)
        # moments about the centre point, in factored form (see unscented.ut_moments)
        D, _, C = _centre(Y, start.wm)
        mean = Y[:, 0] + np.einsum("bs,bsd->bd", start.wmean, D)
        cov = None
        if not self.mean_only:
            cov = _wsum(C, start.wc, C)
            cov = 0.5 * (cov + _swap(cov))
        return mean, cov, (rhs, tape, (C, start.wm, start.wc, start.wmean))

    def _forward_moments(self, nets, start):
        B, d = start.mean.shape
        y0 = np.concatenate([start.mean, start.cov.reshape(B, d * d)], axis=1)
        if self.kind == "coupled":
            rhs = _CoupledRhs(self.structure, nets, start.u, start.xi, start.wm, start.wc)
        else:
            rhs = _LinearizedRhs(self.structure, nets, start.u, self.mean_only)
        y, tape = integrate(rhs, y0, self.dt, self.solver)
        mean = y[:, :d].copy()
        cov = y[:, d:].reshape(B, d, d)
        asym = np.max(np.abs(cov - _swap(cov))) if cov.size else 0.0
        if asym > SYMMETRY_TOL:
            log.warning("covariance asymmetry %.3g symmetrized", asym)
            cov = 0.5 * (cov + _swap(cov))
        return mean, (None if self.mean_only else cov.copy()), (rhs, tape, None)

    # -- convenience ---------------------------------------------------------

    def __call__(self, nets, mean, cov, u=None, skew=None, kurt=None):
        mean1 = np.atleast_1d(np.asarray(mean, float))
        single = mean1.ndim == 1
        m, P, _ = self.forward(nets, self.prepare(mean, cov, u, skew, kurt))
        if single:
            return m[0], (None if P is None else P[0])
        return m, P


# --------------------------------------------------------------------------
# right-hand sides


class _DecoupledRhs:
    """State Y (B, S, d); noise frozen per sigma point."""

    def __init__(self, structure, nets, u, noise, mean_only):
        self.structure, self.nets = structure, nets
        self.u = u[:, None, :]
        self.noise = noise
        self.need_h = not mean_only
        self.n_params = nets.n_params

    def forward(self, Y):
        f, H, cache = eval_terms(self.structure, self.nets, Y, self.u, need_h=self.need_h)
        if not self.need_h:
            return f, cache
        return f + H * self.noise, cache

    def backward(self, cache, ct):
        H_bar = ct * self.noise if self.need_h else None
        return terms_backward(self.structure, self.nets, cache, ct, H_bar)


class _CoupledRhs:
    """State [m, vec(P)] (B, d + d^2)."""

    def __init__(self, structure, nets, u, xi, wm, wc):
        self.structure, self.nets = structure, nets
        self.u = u[:, None, :]
        self.xiT = _swap(xi)  # B x S x n
        self.wm, self.wc = wm, wc
        self.d = structure.state_dim
        self.n_params = nets.n_params
        # H^2 is averaged about the centre point as well
        self.wq = wm.copy()
        self.wq[:, 0] += 1.0 - wm.sum(axis=1)

    def forward(self, y):
        d = self.d
        B = y.shape[0]
        m = y[:, :d]
        P = y[:, d:].reshape(B, d, d)
        L, eps = chol_jitter(P)
        Xc = self.xiT @ _swap(L)  # points minus the mean, B x S x d
        f, H, tc = eval_terms(self.structure, self.nets, m[:, None, :] + Xc, self.u)
        _, Xdev, Xd = _centre(Xc, self.wm)
        _, Fdev, Fd = _centre(f, self.wm)
        dm = f[:, 0] + Fdev
        A = _wsum(Xd, self.wc, Fd)
        dP = A + _swap(A)
        dP[:, np.arange(d), np.arange(d)] += np.einsum("bs,bsd->bd", self.wq, H * H)
        out = np.concatenate([dm, dP.reshape(B, d * d)], axis=1)
        return out, (L, eps, Xd, Fd, H, tc)

    def backward(self, cache, ct):
        L, eps, Xd, Fd, H, tc = cache
        d = self.d
        B = ct.shape[0]
        mb = ct[:, :d]
        Cb = ct[:, d:].reshape(B, d, d)
        sym = Cb + _swap(Cb)
        wc = self.wc[:, :, None]
        F_bar = _centre_backward(wc * (Xd @ sym), self.wm, mb)
        F_bar[:, 0] += mb - F_bar.sum(axis=1)
        Xc_bar = _centre_backward(wc * (Fd @ sym), self.wm)
        q_bar = np.diagonal(Cb, axis1=1, axis2=2)
        H_bar = 2.0 * self.wq[:, :, None] * H * q_bar[:, None, :]
        x_bar, theta_bar = terms_backward(self.structure, self.nets, tc, F_bar, H_bar)
        m_bar = x_bar.sum(axis=1)
        L_bar = np.tril(_swap(x_bar + Xc_bar) @ self.xiT)
        G = chol_backward(L, L_bar)
        if np.any(eps > 0):
            # jitter eps * trace(P)/d * I depends on P through the trace
            tr = np.trace(G, axis1=1, axis2=2)
            G = G + (eps * tr / d)[:, None, None] * np.eye(d)
        return np.concatenate([m_bar, G.reshape(B, d * d)], axis=1), theta_bar


class _LinearizedRhs:
    """State [m, vec(P)]; drift Jacobian applied through tangents of the net."""

    def __init__(self, structure, nets, u, mean_only=False):
        self.structure, self.nets = structure, nets
        self.u = u
        self.d = structure.state_dim
        self.need_h = not mean_only
        self.n_params = nets.n_params

    def forward(self, y):
        s, d = self.structure, self.d
        B = y.shape[0]
        m = y[:, :d]
        P = y[:, d:].reshape(B, d, d)
        f, H, tc = eval_terms(s, self.nets, m, self.u, need_h=self.need_h)
        xdot = _swap(P)  # row j = column j of P
        M = xdot @ s.A.T
        jc = None
        if s.drift_outputs:
            feat = s.features(m, self.u)
            _, g1dot, jc = neural.jvp(self.nets.drift, feat, s.feature_tangent(xdot))
            M = M + g1dot @ s.B.T
        dP = M + _swap(M)  # M holds (J P)^T
        if self.need_h:
            dP[:, np.arange(d), np.arange(d)] += H * H
        return np.concatenate([f, dP.reshape(B, d * d)], axis=1), (xdot.shape, H, tc, jc)

    def backward(self, cache, ct):
        s, d = self.structure, self.d
        xdot_shape, H, tc, jc = cache
        B = ct.shape[0]
        mb = ct[:, :d]
        Cb = ct[:, d:].reshape(B, d, d)
        M_bar = Cb + _swap(Cb)
        xdot_bar = M_bar @ s.A
        H_bar = 2.0 * H * np.diagonal(Cb, axis1=1, axis2=2) if self.need_h else None
        m_bar, theta_bar = terms_backward(s, self.nets, tc, mb, H_bar)
        if s.drift_outputs:
            tb, feat_bar, fdot_bar = neural.jvp_backward(
                self.nets.drift, jc, np.zeros((B, s.drift_outputs)), M_bar @ s.B)
            theta_bar[:self.nets.n_drift] += tb
            m_bar = m_bar + s.features_vjp(feat_bar, (B, d))
            xdot_bar = xdot_bar + s.feature_tangent_vjp(fdot_bar, xdot_shape)
        return np.concatenate([m_bar, _swap(xdot_bar).reshape(B, d * d)], axis=1), theta_bar


# --------------------------------------------------------------------------
# single-call wrappers


def propagate_decoupled(net_drift, net_diff, structure, mean, cov, u=None, dt=1.0,
                        solver=SolverConfig(), method="ut2m", ut=UtParams(), skew=None,
                        kurt=None, mean_only=False):
    prop = Propagator("decoupled", method, structure, dt, solver, ut, mean_only)
    return prop(HiddenNets(net_drift, net_diff), mean, cov, u, skew, kurt)


def propagate_coupled(nets: HiddenNets, structure, mean, cov, u=None, dt=1.0,
                      solver=SolverConfig(), method="ut2m", ut=UtParams(), skew=None, kurt=None):
    prop = Propagator("coupled", method, structure, dt, solver, ut)
    return prop(nets, mean, cov, u, skew, kurt)


def propagate_linearized(nets: HiddenNets, structure, mean, cov, u=None, dt=1.0,
                         solver=SolverConfig()):
    prop = Propagator("linearized", "ut2m", structure, dt, solver)
    return prop(nets, mean, cov, u)
