"""Moment-matching losses, Adam, and the training procedures.

Loss modes
----------
sequential_mean_then_cov
    stage 1 fits the drift net on one-step mean errors with the decoupled
    propagator (the predicted mean does not depend on the diffusion net);
    stage 2 freezes the drift net and fits the diffusion net on covariance
    errors.
joint_two_moment
    both nets at once on mean + weighted covariance errors, coupled propagator.
sir_mean_only
    a single drift net on the S and I mean errors.

Errors are measured on standardized state scales (per-component spread of
the training means) except in ``sir_mean_only``, which uses raw S, I errors.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import neural
from .moments import MomentDataset, Transitions, build_transitions, split_indices
from .odeint import SolverConfig
from .propagation import PROPAGATORS, Propagator
from .structure import HiddenNets, Structure
from .unscented import PropagationError, SingularCovarianceError, UtParams

log = logging.getLogger(__name__)

LOSS_MODES = ("sequential_mean_then_cov", "joint_two_moment", "sir_mean_only")
DIVERGENCE_LIMIT = 10


class ConfigError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    propagator: str = "ut2m"
    batch_size: int = 256
    learning_rate: float = 1e-3
    max_epochs: int = 500
    patience: int = 20
    split_seed: int = 0
    init_seed: int = 0
    # diffusion net seed; defaults to init_seed + 1
    diffusion_init_seed: Optional[int] = None
    loss_mode: str = "sequential_mean_then_cov"
    covariance_loss_weight: float = 1.0
    hidden: tuple = (64, 64)
    drift_head: str = "linear"
    diffusion_head: str = "softplus"
    solver: SolverConfig = SolverConfig()
    ut: UtParams = UtParams()

    def __post_init__(self):
        if self.propagator not in PROPAGATORS:
            raise ConfigError(f"propagator must be one of {PROPAGATORS}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def theta2_seed(self) -> int:
        return self.init_seed + 1 if self.diffusion_init_seed is None else self.diffusion_init_seed


@dataclass
class StageHistory:
    name: str
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    skipped_steps: int = 0

    def rows(self):
        return [(i + 1, t, v) for i, (t, v) in enumerate(zip(self.train_loss, self.val_loss))]


@dataclass
class TrainedModel:
    nets: HiddenNets
    structure: Structure
    config: TrainConfig
    history: list  # StageHistory per stage
    split: tuple  # train/val/test transition indices
    state_scale: np.ndarray

    def drift_params(self):
        return None if self.nets.drift is None else self.nets.drift.params


# --------------------------------------------------------------------------
# losses


def loss_two_moment(pred_mean, pred_cov, tgt_mean, tgt_cov, weight=1.0, scale=None):
    """Sum over transitions of |mu_hat - mu|^2 + weight |Sigma_hat - Sigma|^2.

    With ``scale`` (per component) errors are divided by it (covariance
    entries by scale_i scale_j) before squaring.
    """
    pred_mean = np.asarray(pred_mean, float)
    s = np.ones(pred_mean.shape[-1]) if scale is None else np.asarray(scale, float)
    em = (pred_mean - tgt_mean) / s
    total = np.sum(em * em)
    if weight:
        ec = (np.asarray(pred_cov, float) - tgt_cov) / np.multiply.outer(s, s)
        total += weight * np.sum(ec * ec)
    return float(total)


def loss_sir_mean(pred_mean, tgt_mean):
    """Sum of squared S- and I-mean errors; the R component is ignored."""
    e = np.asarray(pred_mean, float)[..., :2] - np.asarray(tgt_mean, float)[..., :2]
    return float(np.sum(e * e))


def _batch_loss(mode, pm, pc, tm, tc, weight, scale):
    """Per-transition mean loss and the cotangents of (pred_mean, pred_cov).

    Modes: ``two_moment`` (mean + weight * cov), ``cov_only`` (weight * cov),
    ``sir_mean_only``.
    """
    B = pm.shape[0]
    if mode == "sir_mean_only":
        e = np.zeros_like(pm)
        e[:, :2] = pm[:, :2] - tm[:, :2]
        return np.sum(e * e) / B, 2.0 * e / B, None
    loss = 0.0
    mean_bar = np.zeros_like(pm)
    if mode == "two_moment":
        s2 = scale * scale
        em = pm - tm
        loss = np.sum(em * em / s2)
        mean_bar = 2.0 * em / s2 / B
    cov_bar = None
    if weight and pc is not None:
        ss = np.multiply.outer(scale, scale) ** 2
        ec = pc - tc
        loss += weight * np.sum(ec * ec / ss)
        cov_bar = 2.0 * weight * ec / ss / B
    return loss / B, mean_bar, cov_bar


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    bad_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grads, state: AdamState, lr=1e-3):
    """Bias-corrected Adam update.  Returns ``(params, state, applied)``.

    A non-finite gradient leaves everything unchanged and counts towards the
    divergence breaker; ``DIVERGENCE_LIMIT`` consecutive ones raise.
    """
    grads = np.asarray(grads, float)
    if grads.shape != np.shape(params):
        raise ValueError("gradient and parameter vectors differ in length")
    if not np.all(np.isfinite(grads)):
        state.bad_steps += 1
        log.warning("non-finite gradient, update skipped (%d in a row)", state.bad_steps)
        if state.bad_steps >= DIVERGENCE_LIMIT:
            raise DivergenceError(f"{state.bad_steps} consecutive non-finite gradients")
        return params, state, False
    state.bad_steps = 0
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps), state, True


# --------------------------------------------------------------------------
# network setup


def _feature_stats(structure, ds, src, u):
    feat = structure.features(ds.mean[src], u)
    shift = feat.mean(axis=0)
    scale = feat.std(axis=0)
    return shift, np.where(scale > 0, scale, 1.0)


def estimate_output_scaling(structure: Structure, ds: MomentDataset, trans: Transitions):
    """Rough finite-difference magnitudes of the hidden terms on the data.

    Used only to set the fixed output affine maps of the nets so that
    initial outputs have the right order of magnitude.
    """
    m0, m1 = ds.mean[trans.src], ds.mean[trans.tgt]
    rate = (m1 - m0) / ds.dt - (m0 @ structure.A.T + structure.c)
    out = {}
    if structure.drift_outputs:
        g1 = np.linalg.lstsq(structure.B, rate.T, rcond=None)[0].T
        sd = g1.std(axis=0)
        out["drift"] = (g1.mean(axis=0), np.where(sd > 0, sd, 1.0))
    if structure.diffusion == "sqrt2g":
        v0 = np.diagonal(ds.cov[trans.src], axis1=1, axis2=2)
        v1 = np.diagonal(ds.cov[trans.tgt], axis1=1, axis2=2)
        g2 = (v1 - v0) / (2.0 * ds.dt)
        mag = np.mean(np.abs(g2), axis=0)
        out["diffusion"] = (g2.mean(axis=0), g2.std(axis=0), np.where(mag > 0, mag, 1.0))
    return out


def make_nets(structure: Structure, cfg: TrainConfig, ds: MomentDataset, trans: Transitions,
              with_diffusion=True) -> HiddenNets:
    u = ds.inputs[trans.group]
    shift, scale = _feature_stats(structure, ds, trans.src, u)
    est = estimate_output_scaling(structure, ds, trans)
    nf = structure.n_features
    drift = diff = None
    if structure.drift_outputs:
        o_shift, o_scale = est["drift"]
        sizes = (nf,) + cfg.hidden + (structure.drift_outputs,)
        drift = neural.make_mlp(sizes, head=cfg.drift_head, seed=cfg.init_seed, in_shift=shift,
                                in_scale=scale, out_shift=o_shift, out_scale=o_scale)
    if with_diffusion and structure.diffusion == "sqrt2g":
        mean, sd, mag = est["diffusion"]
        if cfg.diffusion_head == "softplus":
            o_shift, o_scale = np.zeros_like(mag), mag
        else:
            o_shift, o_scale = mean, np.where(sd > 0, sd, mag)
        sizes = (nf,) + cfg.hidden + (structure.diffusion_outputs,)
        diff = neural.make_mlp(sizes, head=cfg.diffusion_head, seed=cfg.theta2_seed,
                               in_shift=shift, in_scale=scale, out_shift=o_shift,
                               out_scale=o_scale)
    return HiddenNets(drift, diff)


# --------------------------------------------------------------------------
# training


@dataclass
class _Problem:
    prop: Propagator
    start: object  # propagation.Start over all transitions
    tgt_mean: np.ndarray
    tgt_cov: Optional[np.ndarray]
    mode: str
    weight: float
    scale: np.ndarray


def _make_problem(kind, method, structure, ds, trans, cfg, mean_only, mode, weight, scale):
    prop = Propagator(kind, method, structure, ds.dt, cfg.solver, cfg.ut, mean_only)
    src = trans.src
    start = prop.prepare(ds.mean[src], ds.cov[src], ds.inputs[trans.group],
                         None if ds.skew is None else ds.skew[src],
                         None if ds.kurt is None else ds.kurt[src])
    tc = None if mean_only else ds.cov[trans.tgt]
    return _Problem(prop, start, ds.mean[trans.tgt], tc, mode, weight, scale)


def _evaluate(problem: _Problem, nets, idx, chunk=4096):
    """Per-transition loss over ``idx`` (forward only)."""
    total = 0.0
    for a in range(0, idx.size, chunk):
        sel = idx[a:a + chunk]
        pm, pc, _ = problem.prop.forward(nets, problem.start.take(sel))
        tc = None if problem.tgt_cov is None else problem.tgt_cov[sel]
        loss, _, _ = _batch_loss(problem.mode, pm, pc, problem.tgt_mean[sel], tc,
                                 problem.weight, problem.scale)
        total += loss * sel.size
    return total / idx.size


def loss_and_grad(problem: _Problem, nets: HiddenNets, sel):
    """Mean per-transition loss on ``sel`` and its gradient w.r.t. all net params."""
    pm, pc, ctx = problem.prop.forward(nets, problem.start.take(sel))
    tc = None if problem.tgt_cov is None else problem.tgt_cov[sel]
    loss, mean_bar, cov_bar = _batch_loss(problem.mode, pm, pc, problem.tgt_mean[sel], tc,
                                          problem.weight, problem.scale)
    return loss, problem.prop.backward(ctx, mean_bar, cov_bar)


def _fit(problem, nets, trainable: slice, train_idx, val_idx, cfg, rng, name) -> tuple:
    """Adam over the ``trainable`` slice of the flat parameters, early stopping."""
    hist = StageHistory(name)
    theta = nets.params.copy()
    best = theta.copy()
    hist.initial_val_loss = hist.best_val_loss = _evaluate(problem, nets, val_idx)
    opt = AdamState.zeros(theta[trainable].size)
    B = min(cfg.batch_size, train_idx.size)
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train_idx)
        losses = []
        for a in range(0, order.size, B):
            sel = np.sort(order[a:a + B])
            try:
                loss, grad = loss_and_grad(problem, nets.with_params(theta), sel)
            except (PropagationError, SingularCovarianceError, FloatingPointError) as exc:
                log.warning("batch failed (%s); treated as a non-finite step", exc)
                loss, grad = np.nan, np.full(theta.size, np.nan)
            if not np.isfinite(loss):
                grad = np.full(theta.size, np.nan)
            new, opt, applied = adam_step(theta[trainable], grad[trainable], opt,
                                          cfg.learning_rate)
            if applied:
                theta[trainable] = new
                losses.append(loss)
            else:
                hist.skipped_steps += 1
        train_loss = float(np.mean(losses)) if losses else float("nan")
        try:
            val = _evaluate(problem, nets.with_params(theta), val_idx)
        except (PropagationError, SingularCovarianceError):
            val = float("nan")
        hist.train_loss.append(train_loss)
        hist.val_loss.append(val)
        if np.isfinite(val) and val < hist.best_val_loss:
            hist.best_val_loss, hist.best_epoch = val, epoch
            best = theta.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    log.info("%s: best val %.4g at epoch %d (initial %.4g)", name, hist.best_val_loss,
             hist.best_epoch, hist.initial_val_loss)
    return nets.with_params(best), hist


def state_scale(ds: MomentDataset, idx) -> np.ndarray:
    sd = ds.mean[idx].std(axis=0)
    return np.where(sd > 0, sd, 1.0)


def train(ds: MomentDataset, structure: Structure, cfg: TrainConfig = TrainConfig(),
          nets: Optional[HiddenNets] = None) -> TrainedModel:
    """Fit the hidden-physics nets of ``structure`` to the one-step moments in ``ds``."""
    trans = build_transitions(ds)
    if len(trans) < 3:
        raise ConfigError("not enough transitions to form train/validation/test splits")
    tr, va, te = split_indices(len(trans), cfg.split_seed)
    if tr.size == 0 or va.size == 0:
        raise ConfigError("empty training or validation split")
    if cfg.propagator == "ut4m" and ds.kurt is None:
        raise ConfigError("ut4m needs a moment dataset with skew and kurtosis (max_order 4)")
    train_trans = trans.subset(tr)
    scale = state_scale(ds, train_trans.src)
    sequential = cfg.loss_mode in ("sequential_mean_then_cov", "sir_mean_only")
    need_diff = cfg.loss_mode != "sir_mean_only"
    if nets is None:
        nets = make_nets(structure, cfg, ds, train_trans, with_diffusion=need_diff)
    method = "ut4m" if cfg.propagator == "ut4m" else "ut2m"
    lin = cfg.propagator == "linearization"
    history = []

    def shuffler(stage):
        return np.random.default_rng(np.random.SeedSequence([cfg.split_seed, stage]))

    if sequential:
        kind = "linearized" if lin else "decoupled"
        mode = "sir_mean_only" if cfg.loss_mode == "sir_mean_only" else "two_moment"
        drift_only = HiddenNets(nets.drift, None)
        prob = _make_problem(kind, method, structure, ds, trans, cfg, True, mode, 0.0, scale)
        n1 = drift_only.n_params
        fitted, h1 = _fit(prob, drift_only, slice(0, n1), tr, va, cfg, shuffler(1), "drift")
        history.append(h1)
        nets = HiddenNets(fitted.drift, nets.diffusion)
        if need_diff and nets.diffusion is not None:
            prob = _make_problem(kind, method, structure, ds, trans, cfg, False, "cov_only",
                                 cfg.covariance_loss_weight or 1.0, scale)
            nets, h2 = _fit(prob, nets, slice(nets.n_drift, nets.n_params), tr, va, cfg,
                            shuffler(2), "diffusion")
            history.append(h2)
    else:
        kind = "linearized" if lin else "coupled"
        prob = _make_problem(kind, method, structure, ds, trans, cfg, False, "two_moment",
                             cfg.covariance_loss_weight, scale)
        nets, h = _fit(prob, nets, slice(0, nets.n_params), tr, va, cfg, shuffler(1), "joint")
        history.append(h)
    return TrainedModel(nets, structure, cfg, history, (tr, va, te), scale)


def write_history(hist: StageHistory, path) -> None:
    rows = hist.rows()
    table = np.array(rows, float).reshape(-1, 3)
    np.savetxt(path, table, fmt=["%d", "%.17g", "%.17g"], delimiter=",",
               header="epoch,train_loss,val_loss", comments="")
