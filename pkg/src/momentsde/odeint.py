"""Fixed-step explicit integration with an exact reverse pass.

Gradients are those of the discrete solver map (discretize-then-optimize):
the forward call records every stage on a tape, and ``backprop_integrate``
walks the tape backwards.

A right-hand side is either a plain callable ``y -> dy/dt`` (forward only) or
an object with

    forward(y)          -> (dy, cache)
    backward(cache, ct) -> (ct_y, ct_theta)
    n_params            int

where ``ct_theta`` is the cotangent of the flat parameter vector the rhs
closes over.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

METHODS = ("euler", "rk4")


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    substeps: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown solver method {self.method!r}")
        if int(self.substeps) < 1:
            raise ValueError("substeps must be >= 1")
        object.__setattr__(self, "substeps", int(self.substeps))


@dataclass
class IntegrationTape:
    method: str
    step: float
    rhs: object
    states: list = field(default_factory=list)
    # per step: list of stage caches (1 for euler, 4 for rk4)
    caches: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1


def _eval(rhs, y):
    if hasattr(rhs, "forward"):
        return rhs.forward(y)
    return np.asarray(rhs(y), dtype=float), None


def _step(rhs, y, h, method):
    if method == "euler":
        k1, c1 = _eval(rhs, y)
        return y + h * k1, [c1]
    k1, c1 = _eval(rhs, y)
    k2, c2 = _eval(rhs, y + 0.5 * h * k1)
    k3, c3 = _eval(rhs, y + 0.5 * h * k2)
    k4, c4 = _eval(rhs, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4), [c1, c2, c3, c4]


def integrate(rhs, y0, horizon, cfg: SolverConfig = SolverConfig()):
    """Integrate ``dy/dt = rhs(y)`` over ``[0, horizon]``.  Returns ``(y1, tape)``."""
    y = np.array(y0, dtype=float)
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    h = float(horizon) / cfg.substeps
    tape = IntegrationTape(cfg.method, h, rhs, states=[y])
    if horizon == 0:
        return y.copy(), tape
    for j in range(cfg.substeps):
        y, caches = _step(rhs, y, h, cfg.method)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state after solver step {j}")
        tape.states.append(y)
        tape.caches.append(caches)
    return y, tape


def replay(tape: IntegrationTape):
    """Re-run the forward map from the tape's initial state."""
    y = tape.states[0]
    for _ in range(tape.n_steps):
        y, _ = _step(tape.rhs, y, tape.step, tape.method)
    return y


def backprop_integrate(tape: IntegrationTape, rhs, y1_bar):
    """Cotangents of the initial state and of the rhs parameters."""
    if rhs is not tape.rhs:
        raise ValueError("tape was recorded with a different right-hand side")
    if not hasattr(rhs, "backward"):
        raise ValueError("right-hand side does not expose gradients")
    h = tape.step
    ybar = np.array(y1_bar, dtype=float)
    theta_bar = np.zeros(rhs.n_params)
    for caches in reversed(tape.caches):
        if tape.method == "euler":
            gy, gt = rhs.backward(caches[0], h * ybar)
            ybar = ybar + gy
            theta_bar += gt
            continue
        c1, c2, c3, c4 = caches
        k4bar = (h / 6.0) * ybar
        k3bar = (h / 3.0) * ybar
        k2bar = (h / 3.0) * ybar
        k1bar = (h / 6.0) * ybar
        gy, gt = rhs.backward(c4, k4bar)
        ybar = ybar + gy
        theta_bar += gt
        k3bar = k3bar + h * gy
        gy, gt = rhs.backward(c3, k3bar)
        ybar = ybar + gy
        theta_bar += gt
        k2bar = k2bar + 0.5 * h * gy
        gy, gt = rhs.backward(c2, k2bar)
        ybar = ybar + gy
        theta_bar += gt
        k1bar = k1bar + 0.5 * h * gy
        gy, gt = rhs.backward(c1, k1bar)
        ybar = ybar + gy
        theta_bar += gt
    return ybar, theta_bar
