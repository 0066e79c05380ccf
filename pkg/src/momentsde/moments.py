"""Moment estimation from trajectory ensembles and one-step transition pairs.

A :class:`MomentDataset` stores records column-wise (one row per
initial-condition group and time index) so that mini-batches are plain
fancy-indexing.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sde import TrajectoryEnsemble, parse_floats, read_metadata, write_metadata


@dataclass(frozen=True)
class MomentRecord:
    ic_index: int
    k: int
    t: float
    mean: np.ndarray
    cov: np.ndarray
    skew: Optional[np.ndarray] = None
    kurt: Optional[np.ndarray] = None
    n_samples: int = 0
    degenerate: Optional[np.ndarray] = None


def estimate_moments(ens: TrajectoryEnsemble, max_order: int = 2, ic_index: int = 0) -> list:
    """Population (1/N) moments at every time index of ``ens``.

    Replicates flagged by the simulator are left out.  With ``max_order`` 3 or 4
    the per-component standardized skew and kurtosis are added; components
    with zero variance report 0 for both and are marked degenerate.
    """
    if max_order not in (2, 3, 4):
        raise ValueError("max_order must be 2, 3 or 4")
    X = ens.valid_states
    n = X.shape[0]
    if n < 2:
        raise ValueError("moment estimation needs at least 2 replicates")
    mean, cov, skew, kurt, degen = sample_moments(X, max_order)
    out = []
    for k in range(X.shape[1]):
        out.append(MomentRecord(
            ic_index, k, float(ens.times[k]), mean[k], cov[k],
            None if skew is None else skew[k], None if kurt is None else kurt[k],
            n, degen[k]))
    return out


def sample_moments(X, max_order=2):
    """Moments over axis 0 of X (N, ..., d).  Returns mean, cov, skew, kurt, degenerate."""
    X = np.asarray(X, float)
    n = X.shape[0]
    mean = X.mean(axis=0)
    D = X - mean
    cov = np.einsum("n...i,n...j->...ij", D, D) / n
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    var = np.diagonal(cov, axis1=-2, axis2=-1)
    degen = var <= 0.0
    skew = kurt = None
    if max_order >= 3:
        sd = np.sqrt(np.where(degen, 1.0, var))
        Z = D / sd
        skew = np.where(degen, 0.0, np.mean(Z ** 3, axis=0))
        if max_order >= 4:
            kurt = np.where(degen, 0.0, np.mean(Z ** 4, axis=0))
    return mean, cov, skew, kurt, degen


@dataclass
class MomentDataset:
    """Column-wise records plus per-group inputs and initial conditions."""
    ic_index: np.ndarray  # R
    k: np.ndarray  # R
    t: np.ndarray  # R
    mean: np.ndarray  # R x d
    cov: np.ndarray  # R x d x d
    n_samples: np.ndarray  # R
    inputs: np.ndarray  # G x p
    dt: float
    skew: Optional[np.ndarray] = None  # R x d
    kurt: Optional[np.ndarray] = None

    @property
    def n_records(self) -> int:
        return self.k.size

    @property
    def n_groups(self) -> int:
        return self.inputs.shape[0]

    @property
    def state_dim(self) -> int:
        return self.mean.shape[1]

    @property
    def max_order(self) -> int:
        return 4 if self.kurt is not None else 3 if self.skew is not None else 2

    def record(self, i) -> MomentRecord:
        return MomentRecord(
            int(self.ic_index[i]), int(self.k[i]), float(self.t[i]), self.mean[i], self.cov[i],
            None if self.skew is None else self.skew[i],
            None if self.kurt is None else self.kurt[i], int(self.n_samples[i]),
            np.diagonal(self.cov[i]) <= 0.0)

    @property
    def records(self) -> list:
        return [self.record(i) for i in range(self.n_records)]

    def check(self) -> None:
        for g in np.unique(self.ic_index):
            ks = self.k[self.ic_index == g]
            if not np.array_equal(ks, np.arange(ks.size)):
                raise ValueError(f"group {g}: time indices are not contiguous from 0")


def dataset_from_groups(groups, inputs, dt) -> MomentDataset:
    """Stack lists of MomentRecord (one list per initial condition)."""
    recs = [r for g in groups for r in g]
    if not recs:
        raise ValueError("no moment records")
    stack = lambda name: np.array([getattr(r, name) for r in recs])
    skew = stack("skew") if recs[0].skew is not None else None
    kurt = stack("kurt") if recs[0].kurt is not None else None
    inputs = np.asarray(inputs, float).reshape(len(groups), -1)
    ds = MomentDataset(stack("ic_index").astype(int), stack("k").astype(int), stack("t"),
                       stack("mean"), stack("cov"), stack("n_samples").astype(int),
                       inputs, float(dt), skew, kurt)
    ds.check()
    return ds


@dataclass(frozen=True)
class Transitions:
    """One-step pairs ``src[i] -> tgt[i]`` as record indices into a dataset."""
    src: np.ndarray
    tgt: np.ndarray
    group: np.ndarray

    def __len__(self) -> int:
        return self.src.size

    def subset(self, idx) -> "Transitions":
        return Transitions(self.src[idx], self.tgt[idx], self.group[idx])

    def pairs(self, ds: MomentDataset):
        for s, t, g in zip(self.src, self.tgt, self.group):
            yield ds.record(s), ds.record(t), ds.inputs[g]


def build_transitions(ds: MomentDataset) -> Transitions:
    """All (k-1 -> k) pairs within each group."""
    same = ds.ic_index[1:] == ds.ic_index[:-1]
    step = ds.k[1:] == ds.k[:-1] + 1
    src = np.flatnonzero(same & step)
    tgt = src + 1
    if np.any(np.bincount(ds.ic_index) < 2):
        raise ValueError("every group needs at least 2 records")
    return Transitions(src, tgt, ds.ic_index[src])


def split_indices(n: int, seed: int, fractions=(0.7, 0.15, 0.15)):
    """Seeded random partition of range(n) into train/validation/test."""
    if n < 3:
        raise ValueError("need at least 3 transitions to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = max(1, min(n_train, n - 2))
    n_val = max(1, min(n_val, n - n_train - 1))
    return (np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]),
            np.sort(perm[n_train + n_val:]))


# --------------------------------------------------------------------------
# moment files


def _columns(d, order):
    cols = ["ic_index", "k", "t"] + [f"mean_{i}" for i in range(d)]
    cols += [f"cov_{i}{j}" for i in range(d) for j in range(d)]
    if order >= 3:
        cols += [f"skew_{i}" for i in range(d)]
    if order >= 4:
        cols += [f"kurt_{i}" for i in range(d)]
    return cols + ["n"]


def write_moments(ds: MomentDataset, path, meta: Optional[dict] = None) -> None:
    """CSV ``ic_index,k,t,mean_*,cov_*,[skew_*,kurt_*,]n`` plus ``<path>.meta``."""
    d = ds.state_dim
    parts = [ds.ic_index[:, None], ds.k[:, None], ds.t[:, None], ds.mean,
             ds.cov.reshape(ds.n_records, -1)]
    if ds.skew is not None:
        parts.append(ds.skew)
    if ds.kurt is not None:
        parts.append(ds.kurt)
    parts.append(ds.n_samples[:, None])
    table = np.hstack(parts)
    cols = _columns(d, ds.max_order)
    fmt = ["%d", "%d"] + ["%.17g"] * (len(cols) - 3) + ["%d"]
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=",".join(cols), comments="")
    info = dict(meta or {})
    info.update(dt=ds.dt, state_dim=d, input_dim=ds.inputs.shape[1], n_groups=ds.n_groups,
                max_order=ds.max_order, inputs=ds.inputs)
    write_metadata(str(path) + ".meta", info)


def read_moments(path):
    """Returns ``(dataset, metadata dict)``."""
    meta = read_metadata(str(path) + ".meta")
    d, p = int(meta["state_dim"]), int(meta["input_dim"])
    order, G = int(meta["max_order"]), int(meta["n_groups"])
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header != _columns(d, order):
        raise ValueError(f"{path}: unexpected columns")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    R = table.shape[0]
    pos = 3
    mean = table[:, pos:pos + d]
    pos += d
    cov = table[:, pos:pos + d * d].reshape(R, d, d)
    pos += d * d
    skew = kurt = None
    if order >= 3:
        skew = table[:, pos:pos + d]
        pos += d
    if order >= 4:
        kurt = table[:, pos:pos + d]
    inputs = parse_floats(meta["inputs"]).reshape(G, p)
    ds = MomentDataset(table[:, 0].astype(int), table[:, 1].astype(int), table[:, 2].copy(),
                       mean.copy(), cov.copy(), table[:, -1].astype(int), inputs,
                       float(meta["dt"]), skew, kurt)
    ds.check()
    return ds, meta
