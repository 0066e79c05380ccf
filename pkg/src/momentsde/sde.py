"""SDE models and the Euler-Maruyama ensemble simulator.

Models are batched: ``drift(x, u)`` maps states of shape (N, d) and an input
vector (p,) to (N, d); ``diffusion(x, u)`` returns (N, d, q).

Noise is drawn from counter-based Philox streams keyed by
``(seed, stream, step)``; within a step, replicate ``n`` takes row ``n`` of
the draw.  An ensemble is therefore reproducible bit-for-bit no matter in
which order ensembles (streams) are simulated.
"""
from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

MAX_FLAGGED_FRACTION = 0.01


class DomainError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SdeModel:
    state_dim: int
    input_dim: int
    noise_dim: int
    drift: Callable
    diffusion: Callable
    name: str = "sde"
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    # applied to the state after every step (e.g. keeping populations >= 0)
    project: Optional[Callable] = None
    # x, u -> {event name: boolean array}; counted by simulate_ensemble
    events: Optional[Callable] = None

    def in_domain(self, x) -> np.ndarray:
        ok = np.all(np.isfinite(x), axis=-1)
        if self.lower is not None:
            ok &= np.all(x >= self.lower, axis=-1)
        if self.upper is not None:
            ok &= np.all(x <= self.upper, axis=-1)
        return ok


@dataclass
class TrajectoryEnsemble:
    initial_condition: np.ndarray
    input: np.ndarray
    dt: float
    times: np.ndarray
    states: np.ndarray  # N x (K+1) x d
    seed: int
    stream: int = 0
    flagged: np.ndarray = None
    event_rates: dict = field(default_factory=dict)

    @property
    def n_replicates(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def valid_states(self) -> np.ndarray:
        if self.flagged is None or not np.any(self.flagged):
            return self.states
        return self.states[~self.flagged]


def em_step(model: SdeModel, x, u, dt, dw):
    """One Euler-Maruyama update ``x + f dt + h dw`` (batched over leading axes)."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    dw = np.asarray(dw, float)
    if dt < 0:
        raise DomainError("dt must be non-negative")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u)) and np.all(np.isfinite(dw))):
        raise DomainError("non-finite state, input or noise increment")
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    dwb = np.atleast_2d(dw)
    if dwb.shape[-1] != model.noise_dim:
        raise DomainError(f"noise increment must have length {model.noise_dim}")
    H = model.diffusion(xb, u)
    out = xb + model.drift(xb, u) * dt + np.einsum("nij,nj->ni", H, dwb)
    return out[0] if single else out


def noise_stream(seed: int, stream: int, step: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(step)))
    return np.random.Generator(np.random.Philox(ss))


def simulate_ensemble(model: SdeModel, ic, u, dt, K, N, seed, stream=0,
                      record_every=1) -> TrajectoryEnsemble:
    """N Euler-Maruyama paths recorded at K+1 times spaced ``dt`` apart.

    Each sampling interval is split into ``record_every`` simulation steps.
    Replicates that leave the model's domain box are flagged; more than 1%
    flagged replicates is an error.
    """
    if K < 1 or N < 1:
        raise ValueError("need K >= 1 and N >= 1")
    ic = np.atleast_1d(np.asarray(ic, float))
    u = np.atleast_1d(np.asarray(u, float)) if model.input_dim else np.zeros(0)
    if ic.shape != (model.state_dim,):
        raise DomainError(f"initial condition must have length {model.state_dim}")
    if not model.in_domain(ic):
        raise DomainError(f"initial condition {ic} outside the model domain")
    h = dt / record_every
    sqrt_h = np.sqrt(h)
    x = np.tile(ic, (N, 1))
    states = np.empty((N, K + 1, model.state_dim))
    states[:, 0] = x
    flagged = np.zeros(N, bool)
    counts, total = {}, 0
    step = 0
    for k in range(1, K + 1):
        for _ in range(record_every):
            if model.events is not None:
                for name, hit in model.events(x, u).items():
                    counts[name] = counts.get(name, 0) + int(np.count_nonzero(hit))
                total += x.size
            dw = noise_stream(seed, stream, step).standard_normal((N, model.noise_dim))
            with np.errstate(over="ignore", invalid="ignore"):
                H = model.diffusion(x, u)
                x = x + model.drift(x, u) * h + np.einsum("nij,nj->ni", H, dw * sqrt_h)
                if model.project is not None:
                    x = model.project(x)
            bad = ~model.in_domain(x)
            if np.any(bad):
                flagged |= bad
                # park flagged replicates so they cannot overflow further
                x[bad] = ic
            step += 1
        states[:, k] = x
    n_bad = int(np.count_nonzero(flagged))
    if n_bad > MAX_FLAGGED_FRACTION * N:
        raise SimulationError(
            f"{n_bad}/{N} replicates left the domain of {model.name} from ic={ic.tolist()}")
    if n_bad:
        log.info("%d/%d replicates flagged (excluded from moments)", n_bad, N)
    rates = {name: c / total for name, c in counts.items()} if total else {}
    times = dt * np.arange(K + 1)
    return TrajectoryEnsemble(ic, u, float(dt), times, states, int(seed), int(stream),
                              flagged, rates)


# --------------------------------------------------------------------------
# trajectory files


def write_metadata(path, values: dict) -> None:
    cp = configparser.ConfigParser()
    cp["meta"] = {k: _fmt(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)


def read_metadata(path) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return dict(cp["meta"])


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(_fmt(x) for x in np.ravel(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def parse_floats(text: str) -> np.ndarray:
    text = text.strip()
    return np.array([float(t) for t in text.split(",")]) if text else np.zeros(0)


def write_trajectories(ens: TrajectoryEnsemble, path, model_id: str) -> None:
    """CSV ``run,k,t,x0..x{d-1}`` plus a ``<path>.meta`` key-value sidecar."""
    N, K1, d = ens.states.shape
    run = np.repeat(np.arange(N), K1)
    k = np.tile(np.arange(K1), N)
    t = np.tile(ens.times, N)
    table = np.column_stack([run, k, t, ens.states.reshape(-1, d)])
    header = ",".join(["run", "k", "t"] + [f"x{i}" for i in range(d)])
    fmt = ["%d", "%d", "%.17g"] + ["%.17g"] * d
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=header, comments="")
    write_metadata(str(path) + ".meta", {
        "model": model_id, "ic": ens.initial_condition, "u": ens.input,
        "dt": ens.dt, "N": N, "K": K1 - 1, "seed": ens.seed, "stream": ens.stream,
    })


def read_trajectories(path) -> TrajectoryEnsemble:
    meta = read_metadata(str(path) + ".meta")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    N, K = int(meta["n"]), int(meta["k"])
    d = table.shape[1] - 3
    states = table[:, 3:].reshape(N, K + 1, d)
    return TrajectoryEnsemble(parse_floats(meta["ic"]), parse_floats(meta["u"]),
                              float(meta["dt"]), table[:K + 1, 2].copy(), states,
                              int(meta["seed"]), int(meta["stream"]), np.zeros(N, bool))
