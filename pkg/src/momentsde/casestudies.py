"""The three benchmark systems: ground truths, learning structures, run setups.

colloidal       dx = g1(x,u) dt + sqrt(2 g2(x,u)) dw,  K_b T = 1
lotka_volterra  competitive two-species model, diffusion sqrt(2 g2(x)_i)
sir             S, I, R compartments with unknown transmission rate g(S, I)
"""
from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .sde import DomainError, SdeModel
from .structure import Structure

CASE_IDS = ("colloidal", "lotka_volterra", "sir")


@dataclass(frozen=True)
class GroundTruthModel:
    id: str
    parameters: MappingProxyType

    @property
    def state_dim(self) -> int:
        return {"colloidal": 1, "lotka_volterra": 2, "sir": 3}[self.id]

    @property
    def input_dim(self) -> int:
        return 1 if self.id == "colloidal" else 0


def _check_case(case_id):
    if case_id not in CASE_IDS:
        raise ValueError(f"unknown case study {case_id!r}; expected one of {CASE_IDS}")


def ground_truth(case_id: str) -> GroundTruthModel:
    _check_case(case_id)
    if case_id == "colloidal":
        p = dict(kbt=1.0, g2_amp=4.5e-3, g2_base=0.5e-3, x_shift=2.1, u_gain=0.75, f_coef=10.0)
    elif case_id == "lotka_volterra":
        k1, k2 = 0.4, 0.5
        p = dict(k1=k1, k2=k2, x1_eq=(1 - k1) / (1 - k1 * k2), x2_eq=(1 - k2) / (1 - k1 * k2))
    else:
        p = dict(b=1.0, d=0.1, k=0.2, alpha=0.5, gamma=0.01, mu=0.05, delta=0.01, h=2.0,
                 sigma1=0.2, sigma2=0.2, sigma3=0.1)
    return GroundTruthModel(case_id, MappingProxyType(p))


# --------------------------------------------------------------------------
# hidden physics


def colloidal_hidden(p, x, u):
    r = x - p["x_shift"] - p["u_gain"] * u
    bump = p["g2_amp"] * np.exp(-r * r)
    g2 = bump + p["g2_base"]
    dg2 = -2.0 * r * bump
    dF = 2.0 * p["f_coef"] * p["kbt"] * r
    g1 = dg2 - dF * g2 / p["kbt"]
    return g1, g2


def lv_hidden(p, x1, x2):
    g1 = np.stack([x1 * (1 - x1 - p["k1"] * x2), x2 * (1 - x2 - p["k2"] * x1)], axis=-1)
    g2 = np.stack([x1 * (x2 - p["x2_eq"]), x2 * (x1 - p["x1_eq"])], axis=-1)
    return g1, g2


def sir_transmission(p, S, I):
    Sh = np.power(S, p["h"])
    return p["k"] * Sh * I / (Sh + p["alpha"] * np.power(I, p["h"]))


def ground_truth_eval(gt: GroundTruthModel, x, u=None):
    """Drift (N, d), diffusion (N, d, d) and hidden terms at states x (N, d).

    Hidden terms come back as a dict of (N, k) arrays: ``g1``, ``g2`` for the
    colloidal and Lotka-Volterra systems, ``g`` for SIR.  For Lotka-Volterra
    the returned g2 is the printed (signed) formula; the diffusion uses its
    positive part.
    """
    x = np.atleast_2d(np.asarray(x, float))
    if x.shape[-1] != gt.state_dim:
        raise DomainError(f"{gt.id}: state must have {gt.state_dim} components")
    setup = case_setup(gt.id)
    if not np.all(np.isfinite(x)) or np.any(x < setup.domain_lower) or np.any(x > setup.domain_upper):
        raise DomainError(f"{gt.id}: state outside the declared domain")
    p = gt.parameters
    if gt.id == "colloidal":
        uu = np.broadcast_to(np.asarray(0.0 if u is None else u, float).reshape(-1, 1), x.shape)
        g1, g2 = colloidal_hidden(p, x, uu)
        hidden = {"g1": g1, "g2": g2}
    elif gt.id == "lotka_volterra":
        g1, g2 = lv_hidden(p, x[:, 0], x[:, 1])
        hidden = {"g1": g1, "g2": g2}
    else:
        hidden = {"g": sir_transmission(p, x[:, 0], x[:, 1])[:, None]}
    drift, diffusion = ground_truth_eval_unchecked(gt, x, u)
    return drift, diffusion, hidden


def true_hidden_outputs(gt: GroundTruthModel, x, u=None, effective=False) -> dict:
    """Hidden terms flattened to named scalar outputs (``g1``, ``g2_1``, ...).

    With ``effective`` the Lotka-Volterra g2 is replaced by its positive part,
    the only part the simulated dynamics depend on.
    """
    _, _, hidden = ground_truth_eval(gt, x, u)
    out = {}
    for name, arr in hidden.items():
        if effective and gt.id == "lotka_volterra" and name == "g2":
            arr = np.maximum(arr, 0.0)
        if arr.shape[1] == 1:
            out[name] = arr[:, 0]
        else:
            for j in range(arr.shape[1]):
                out[f"{name}_{j + 1}"] = arr[:, j]
    return out


def hidden_output_names(case_id: str) -> list:
    _check_case(case_id)
    return {"colloidal": ["g1", "g2"],
            "lotka_volterra": ["g1_1", "g1_2", "g2_1", "g2_2"],
            "sir": ["g"]}[case_id]


def true_sde(gt: GroundTruthModel) -> SdeModel:
    """Simulable ground truth.

    Lotka-Volterra populations are absorbed at zero (the update is truncated
    at 0) and the clamp of a negative diffusion argument is counted as an
    event.
    """
    setup = case_setup(gt.id)
    d = gt.state_dim

    def drift(x, u):
        return ground_truth_eval_unchecked(gt, x, u)[0]

    def diffusion(x, u):
        return ground_truth_eval_unchecked(gt, x, u)[1]

    project = events = None
    if gt.id == "lotka_volterra":
        def project(x):
            return np.maximum(x, 0.0)

        def events(x, u):
            _, g2 = lv_hidden(gt.parameters, x[:, 0], x[:, 1])
            return {"clamp": g2 < 0}
    return SdeModel(d, gt.input_dim, d, drift, diffusion, name=gt.id,
                    lower=setup.domain_lower, upper=setup.domain_upper,
                    project=project, events=events)


def ground_truth_eval_unchecked(gt, x, u):
    # the simulator does its own domain bookkeeping
    with np.errstate(over="ignore", invalid="ignore"):
        p = gt.parameters
        d = gt.state_dim
        if gt.id == "colloidal":
            uu = np.asarray(0.0 if u is None else u, float)
            uu = uu.reshape(-1, 1) if uu.size > 1 else uu.reshape(1, 1)
            g1, g2 = colloidal_hidden(p, x, uu)
            drift, diag = g1, np.sqrt(2.0 * g2)
        elif gt.id == "lotka_volterra":
            drift, g2 = lv_hidden(p, x[:, 0], x[:, 1])
            diag = np.sqrt(2.0 * np.maximum(g2, 0.0))
        else:
            drift, diffusion, _ = _sir_terms(p, x)
            diag = diffusion
        out = np.zeros(x.shape + (d,))
        out[:, np.arange(d), np.arange(d)] = diag
        return drift, out


def _sir_terms(p, x):
    S, I, R = x[:, 0], x[:, 1], x[:, 2]
    g = sir_transmission(p, S, I)
    drift = np.stack([p["b"] - p["d"] * S - g + p["gamma"] * R,
                      g - (p["d"] + p["mu"] + p["delta"]) * I,
                      p["mu"] * I - (p["d"] + p["gamma"]) * R], axis=-1)
    return drift, x * np.array([p["sigma1"], p["sigma2"], p["sigma3"]]), g


# --------------------------------------------------------------------------
# learning structures


def learning_structure(case_id: str) -> Structure:
    gt = ground_truth(case_id)
    p = gt.parameters
    if case_id == "colloidal":
        return Structure("colloidal", A=[[0.0]], c=[0.0], B=[[1.0]], diffusion="sqrt2g",
                         feature_idx=(0,), use_input=True, input_dim=1)
    if case_id == "lotka_volterra":
        return Structure("lotka_volterra", A=np.zeros((2, 2)), c=np.zeros(2), B=np.eye(2),
                         diffusion="sqrt2g", feature_idx=(0, 1))
    A = np.array([[-p["d"], 0.0, p["gamma"]],
                  [0.0, -(p["d"] + p["mu"] + p["delta"]), 0.0],
                  [0.0, p["mu"], -(p["d"] + p["gamma"])]])
    return Structure("sir", A=A, c=[p["b"], 0.0, 0.0], B=[[-1.0], [1.0], [0.0]],
                     diffusion="proportional", sigma=[p["sigma1"], p["sigma2"], p["sigma3"]],
                     feature_idx=(0, 1))


def true_hidden_callables(case_id: str):
    """(g1, g2) as functions of network features, for truth-injection checks."""
    p = ground_truth(case_id).parameters
    if case_id == "colloidal":
        def g1(feat):
            return colloidal_hidden(p, feat[..., :1], feat[..., 1:2])[0]

        def g2(feat):
            return colloidal_hidden(p, feat[..., :1], feat[..., 1:2])[1]
        return g1, g2
    if case_id == "lotka_volterra":
        return (lambda f: lv_hidden(p, f[..., 0], f[..., 1])[0],
                lambda f: lv_hidden(p, f[..., 0], f[..., 1])[1])
    return (lambda f: sir_transmission(p, f[..., 0], f[..., 1])[..., None], None)


# --------------------------------------------------------------------------
# run setups


@dataclass(frozen=True)
class CaseSetup:
    case_id: str
    dt: float
    K: int
    ic_lower: np.ndarray
    ic_upper: np.ndarray
    ic_counts: tuple  # grid points per state axis, then per input axis
    input_lower: np.ndarray
    input_upper: np.ndarray
    domain_lower: np.ndarray
    domain_upper: np.ndarray
    eval_lower: np.ndarray  # over network features
    eval_upper: np.ndarray
    eval_resolution: int = 100
    diffusion_head: str = "softplus"
    drift_head: str = "linear"
    loss_mode: str = "sequential_mean_then_cov"

    @property
    def n_ics(self) -> int:
        return int(np.prod(self.ic_counts))


_IC_COUNTS = {
    ("colloidal", "desk"): (20, 10), ("colloidal", "paper"): (50, 40),
    ("lotka_volterra", "desk"): (20, 10), ("lotka_volterra", "paper"): (50, 40),
    ("sir", "desk"): (8, 5, 5), ("sir", "paper"): (20, 10, 10),
}


def case_setup(case_id: str, scale: str = "desk") -> CaseSetup:
    _check_case(case_id)
    if scale not in ("desk", "paper"):
        raise ValueError(f"unknown scale {scale!r}")
    counts = _IC_COUNTS[(case_id, scale)]
    a = np.asarray
    if case_id == "colloidal":
        return CaseSetup(case_id, 1.0, 50, a([0.5]), a([3.5]), counts, a([0.0]), a([1.0]),
                         a([-5.0]), a([10.0]), a([0.5, 0.0]), a([3.5, 1.0]))
    if case_id == "lotka_volterra":
        return CaseSetup(case_id, 0.2, 50, a([0.1, 0.1]), a([1.2, 1.2]), counts, a([]), a([]),
                         a([0.0, 0.0]), a([50.0, 50.0]), a([0.1, 0.1]), a([1.2, 1.2]),
                         diffusion_head="linear")
    return CaseSetup(case_id, 0.5, 50, a([0.5, 0.5, 0.0]), a([8.0, 6.0, 4.0]), counts, a([]),
                     a([]), a([0.0, 0.0, 0.0]), a([1e3, 1e3, 1e3]), a([0.5, 0.5]), a([8.0, 6.0]),
                     loss_mode="sir_mean_only")


def initial_conditions(setup: CaseSetup, counts=None):
    """Uniform tensor grid of (state, input) initial conditions.

    Returns ``(ics (G, d), inputs (G, p))`` in C order over the axes.
    """
    counts = setup.ic_counts if counts is None else tuple(counts)
    lo = np.concatenate([setup.ic_lower, setup.input_lower])
    hi = np.concatenate([setup.ic_upper, setup.input_upper])
    if len(counts) != lo.size:
        raise ValueError(f"need {lo.size} grid counts, got {len(counts)}")
    axes = [np.linspace(l, h, n) for l, h, n in zip(lo, hi, counts)]
    mesh = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    d = setup.ic_lower.size
    return mesh[:, :d].copy(), mesh[:, d:].copy()
