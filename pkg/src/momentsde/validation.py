"""Model quality: hidden-physics RMSE on a grid and the KDE/KL distribution check."""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import casestudies as cs
from . import neural
from .sde import SdeModel, simulate_ensemble
from .structure import HiddenNets

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-12
BANDWIDTH_FLOOR = 1e-6
KL_GRID_POINTS = 256
MIN_KDE_SAMPLES = 30


# --------------------------------------------------------------------------
# evaluation grids and RMSE


@dataclass(frozen=True)
class EvalGrid:
    """Uniform tensor grid over network features (C order)."""
    lower: np.ndarray
    upper: np.ndarray
    resolution: int = 100
    names: tuple = ()
    hull_lower: Optional[np.ndarray] = None  # bounding box of the training features
    hull_upper: Optional[np.ndarray] = None

    @property
    def axes(self) -> list:
        return [np.linspace(lo, hi, self.resolution) for lo, hi in zip(self.lower, self.upper)]

    @property
    def points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @property
    def extrapolated(self) -> np.ndarray:
        """Mask of grid points outside the training-data bounding box."""
        pts = self.points
        if self.hull_lower is None:
            return np.zeros(pts.shape[0], bool)
        return np.any((pts < self.hull_lower) | (pts > self.hull_upper), axis=-1)


def case_grid(case_id: str, resolution=None, hull=None) -> EvalGrid:
    setup = cs.case_setup(case_id)
    names = {"colloidal": ("x", "u"), "lotka_volterra": ("x1", "x2"), "sir": ("S", "I")}[case_id]
    lo, hi = (None, None) if hull is None else hull
    return EvalGrid(setup.eval_lower, setup.eval_upper, resolution or setup.eval_resolution,
                    names, lo, hi)


def feature_hull(structure, ds) -> tuple:
    """Bounding box of the network features over the dataset's mean states."""
    u = ds.inputs[ds.ic_index]
    feat = structure.features(ds.mean, u)
    return feat.min(axis=0), feat.max(axis=0)


def _named(prefix, arr) -> dict:
    arr = np.asarray(arr)
    if arr.ndim == 1 or arr.shape[-1] == 1:
        return {prefix: arr.reshape(-1)}
    return {f"{prefix}_{j + 1}": arr[:, j] for j in range(arr.shape[-1])}


def learned_outputs(learned, feat) -> dict:
    """Named hidden outputs of trained nets (or of plain callables) at features.

    ``learned`` is a :class:`HiddenNets` or a pair ``(g1, g2)`` of callables
    (either may be None); the SIR network output is named ``g``.
    """
    if isinstance(learned, HiddenNets):
        g1 = None if learned.drift is None else (lambda f: neural.mlp_forward(learned.drift, f))
        g2 = None if learned.diffusion is None else (
            lambda f: neural.mlp_forward(learned.diffusion, f))
    else:
        g1, g2 = learned
    out = {}
    if g1 is not None:
        out.update(_named("g1", g1(feat)))
    if g2 is not None:
        out.update(_named("g2", g2(feat)))
    return out


def truth_outputs(case_id: str, feat, effective=False) -> dict:
    g1, g2 = cs.true_hidden_callables(case_id)
    if case_id == "sir":
        return {"g": g1(feat).reshape(-1)}
    out = {**_named("g1", g1(feat)), **_named("g2", g2(feat))}
    if effective and case_id == "lotka_volterra":
        out = {k: (np.maximum(v, 0.0) if k.startswith("g2") else v) for k, v in out.items()}
    return out


def rmse_grid(learned, truth: cs.GroundTruthModel, grid: EvalGrid, effective=False) -> dict:
    """Root mean square error per hidden-physics output over the grid points.

    With ``effective`` the Lotka-Volterra diffusion target is the positive
    part of g2 (the part that enters the simulated dynamics).
    """
    feat = grid.points
    tru = truth_outputs(truth.id, feat, effective)
    got = learned_outputs(learned, feat)
    if truth.id == "sir" and "g" not in got and "g1" in got:
        got = {"g": got["g1"]}
    if set(got) != set(tru):
        raise ValueError(f"learned outputs {sorted(got)} do not match truth {sorted(tru)}")
    return {k: float(np.sqrt(np.mean((got[k] - tru[k]) ** 2))) for k in cs.hidden_output_names(
        truth.id)}


def write_grid_csv(path, grid: EvalGrid, truth_vals, learned_vals) -> None:
    """Columns ``<feature names>, truth, learned, abs_err``."""
    pts = grid.points
    table = np.column_stack([pts, truth_vals, learned_vals, np.abs(learned_vals - truth_vals)])
    header = ",".join(list(grid.names) + ["truth", "learned", "abs_err"])
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header=header, comments="")


def grid_report(learned, truth, grid: EvalGrid, out_dir, effective=False) -> dict:
    """Writes ``grid_<output>.csv`` files and returns the RMSE dict."""
    feat = grid.points
    tru = truth_outputs(truth.id, feat, effective)
    got = learned_outputs(learned, feat)
    if truth.id == "sir" and "g" not in got:
        got = {"g": got["g1"]}
    for name in cs.hidden_output_names(truth.id):
        write_grid_csv(f"{out_dir}/grid_{name}.csv", grid, tru[name], got[name])
    return rmse_grid(learned, truth, grid, effective)


# --------------------------------------------------------------------------
# kernel density estimates


@dataclass
class KdeEstimate:
    samples: np.ndarray  # N x d
    bandwidth: np.ndarray  # d
    axes: list  # one 1-D grid per dimension
    density: np.ndarray  # shape of the tensor grid

    @property
    def cell(self) -> float:
        return float(np.prod([a[1] - a[0] if a.size > 1 else 1.0 for a in self.axes]))

    def integral(self) -> float:
        return float(self.density.sum() * self.cell)


def silverman_bandwidth(samples, width=None) -> np.ndarray:
    """Per-dimension rule-of-thumb bandwidth (4/(d+2))^(1/(d+4)) sd n^(-1/(d+4)).

    A zero-variance dimension gets ``1e-6 * width``.
    """
    X = np.asarray(samples, float)
    X = X.reshape(X.shape[0], -1)
    n, d = X.shape
    sd = X.std(axis=0)
    h = (4.0 / (d + 2)) ** (1.0 / (d + 4)) * sd * n ** (-1.0 / (d + 4))
    if width is None:
        width = np.ptp(X, axis=0)
    width = np.where(np.asarray(width, float) > 0, width, 1.0)
    return np.maximum(h, BANDWIDTH_FLOOR * width)


def _kernel_matrix(axis, x, h, chunk):
    # Gaussian weights of grid nodes against samples, (G, n), built in chunks
    G = axis.size
    out = np.empty((G, x.size))
    for s in range(0, x.size, chunk):
        z = (axis[:, None] - x[None, s:s + chunk]) / h
        out[:, s:s + chunk] = np.exp(-0.5 * z * z)
    return out / (h * np.sqrt(2.0 * np.pi))


def kde(samples, axes: Sequence[np.ndarray], bandwidth=None, chunk=16384) -> KdeEstimate:
    """Product-Gaussian-kernel density on the tensor grid spanned by ``axes``.

    Exact sums over all samples; supports 1 or 2 dimensions.
    """
    X = np.asarray(samples, float)
    X = X.reshape(X.shape[0], -1)
    n, d = X.shape
    if n < MIN_KDE_SAMPLES:
        raise ValueError(f"kde needs at least {MIN_KDE_SAMPLES} samples, got {n}")
    if d not in (1, 2) or len(axes) != d:
        raise ValueError("kde supports 1-D or 2-D samples with one grid axis per dimension")
    axes = [np.asarray(a, float) for a in axes]
    if bandwidth is None:
        bandwidth = silverman_bandwidth(X, [a[-1] - a[0] for a in axes])
    bandwidth = np.asarray(bandwidth, float).reshape(d)
    if d == 1:
        dens = np.zeros(axes[0].size)
        for s in range(0, n, chunk):
            dens += _kernel_matrix(axes[0], X[s:s + chunk, 0], bandwidth[0], chunk).sum(axis=1)
    else:
        dens = np.zeros((axes[0].size, axes[1].size))
        for s in range(0, n, chunk):
            Kx = _kernel_matrix(axes[0], X[s:s + chunk, 0], bandwidth[0], chunk)
            Ky = _kernel_matrix(axes[1], X[s:s + chunk, 1], bandwidth[1], chunk)
            dens += Kx @ Ky.T
    return KdeEstimate(X, bandwidth, axes, dens / n)


def kl_grid(p_samples, q_samples, points=KL_GRID_POINTS):
    """KL(p || q) between two sample sets via KDEs on a shared grid.

    The grid spans the union of both sample ranges padded by three
    bandwidths.  Densities are floored at 1e-12 and renormalized on the grid
    before the quadrature, so the result is never negative.
    Returns ``(kl, kde_p, kde_q)``.
    """
    P = np.asarray(p_samples, float)
    Q = np.asarray(q_samples, float)
    P = P.reshape(P.shape[0], -1)
    Q = Q.reshape(Q.shape[0], -1)
    lo = np.minimum(P.min(axis=0), Q.min(axis=0))
    hi = np.maximum(P.max(axis=0), Q.max(axis=0))
    width = np.where(hi > lo, hi - lo, 1.0)
    hp = silverman_bandwidth(P, width)
    hq = silverman_bandwidth(Q, width)
    pad = 3.0 * np.maximum(hp, hq)
    axes = [np.linspace(a - p_, b + p_, points) for a, b, p_ in zip(lo, hi, pad)]
    kp = kde(P, axes, hp)
    kq = kde(Q, axes, hq)
    p = np.maximum(kp.density, DENSITY_FLOOR)
    q = np.maximum(kq.density, DENSITY_FLOOR)
    p = p / p.sum()
    q = q / q.sum()
    return float(np.sum(p * np.log(p / q))), kp, kq


@dataclass
class KlResult:
    total: float
    per_step: np.ndarray
    times: np.ndarray
    densities: list = field(default_factory=list)  # (k, KdeEstimate true, KdeEstimate learned)

    @property
    def mean_per_step(self) -> float:
        return float(self.total / self.per_step.size)


def kl_validation(true_model: SdeModel, learned: SdeModel, ic, u, dt, K_V, N, seed,
                  learned_seed=None, marginals=None, keep_densities=False,
                  record_every=1) -> KlResult:
    """Sum over k = 0..K_V of KL(true || learned) between simulated ensembles.

    Both ensembles start at ``ic``.  The learned model uses ``learned_seed``
    (default: the same seed).  States with more than two dimensions are
    compared through 1-D marginals (``marginals``, default the first two
    components); their KLs are added.
    """
    if K_V < 1:
        raise ValueError("K_V must be at least 1")
    lseed = seed if learned_seed is None else learned_seed
    a = simulate_ensemble(true_model, ic, u, dt, K_V, N, seed, record_every=record_every)
    b = simulate_ensemble(learned, ic, u, dt, K_V, N, lseed, record_every=record_every)
    d = a.states.shape[-1]
    if marginals is None:
        groups = [list(range(d))] if d <= 2 else [[0], [1]]
    else:
        groups = [[int(m)] for m in marginals]
    per_step = np.zeros(K_V + 1)
    dens = []
    Xa, Xb = a.valid_states, b.valid_states
    for k in range(K_V + 1):
        for g in groups:
            kl, kp, kq = kl_grid(Xa[:, k, g], Xb[:, k, g])
            per_step[k] += kl
            if keep_densities:
                dens.append((k, g, kp, kq))
    return KlResult(float(per_step.sum()), per_step, a.times, dens)


def write_kde_csv(path, result: KlResult) -> None:
    """Time evolution of 1-D densities: ``k,t,component,x,p_true,p_learned``."""
    rows = []
    for k, g, kp, kq in result.densities:
        if len(g) != 1:
            continue
        x = kp.axes[0]
        rows.append(np.column_stack([np.full(x.size, k), np.full(x.size, result.times[k]),
                                     np.full(x.size, g[0]), x, kp.density, kq.density]))
    if not rows:
        raise ValueError("no 1-D densities recorded (run kl_validation with keep_densities)")
    np.savetxt(path, np.vstack(rows), fmt=["%d", "%.17g", "%d", "%.17g", "%.17g", "%.17g"],
               delimiter=",", header="k,t,component,x,p_true,p_learned", comments="")


def write_summary(path, rmse: dict, kl: Optional[dict] = None, extra: Optional[dict] = None):
    """INI summary with sections [rmse], [kl] and [info]."""
    cp = configparser.ConfigParser()
    cp["rmse"] = {k: repr(float(v)) for k, v in rmse.items()}
    if kl:
        cp["kl"] = {k: repr(float(v)) for k, v in kl.items()}
    cp["info"] = {"rmse_points": "uniform evaluation grid over the network features"}
    if extra:
        cp["info"].update({k: str(v) for k, v in extra.items()})
    with open(path, "w") as fh:
        cp.write(fh)


def read_summary(path) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return {s: dict(cp[s]) for s in cp.sections()}
