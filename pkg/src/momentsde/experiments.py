"""End-to-end helpers shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import casestudies as cs
from . import neural
from .config import RunConfig, save_config
from .moments import (MomentDataset, dataset_from_groups, estimate_moments, read_moments,
                      write_moments)
from .propagation import PROPAGATORS
from .sde import simulate_ensemble, write_metadata, write_trajectories
from .structure import HiddenNets, check_compatible, to_sde
from .training import TrainedModel, train, write_history
from .validation import (case_grid, feature_hull, grid_report, kl_validation, rmse_grid,
                         write_kde_csv, write_summary)

log = logging.getLogger(__name__)


@dataclass
class GeneratedData:
    dataset: MomentDataset
    ics: np.ndarray
    inputs: np.ndarray
    event_rates: dict
    flagged: int
    ensembles: Optional[list] = None


def generate_dataset(case_id: str, n_replicates: int, seed: int, scale="desk", counts=None,
                     K=None, dt=None, max_order=4, record_every=1,
                     keep_ensembles=False) -> GeneratedData:
    """Simulate one ensemble per initial condition of the case grid and estimate moments.

    Initial condition g uses noise stream g, so any subset of the grid is
    reproducible on its own.
    """
    if n_replicates < 2:
        raise ValueError("moment estimation needs at least 2 replicates")
    setup = cs.case_setup(case_id, scale)
    gt = cs.ground_truth(case_id)
    model = cs.true_sde(gt)
    ics, inputs = cs.initial_conditions(setup, counts)
    K = setup.K if K is None else int(K)
    dt = setup.dt if dt is None else float(dt)
    groups, kept = [], []
    events, flagged = {}, 0
    for g, (ic, u) in enumerate(zip(ics, inputs)):
        ens = simulate_ensemble(model, ic, u, dt, K, n_replicates, seed, stream=g,
                                record_every=record_every)
        groups.append(estimate_moments(ens, max_order, ic_index=g))
        for name, rate in ens.event_rates.items():
            events[name] = events.get(name, 0.0) + rate / len(ics)
        flagged += int(np.count_nonzero(ens.flagged))
        if keep_ensembles:
            kept.append(ens)
    ds = dataset_from_groups(groups, inputs, dt)
    return GeneratedData(ds, ics, inputs, events, flagged, kept if keep_ensembles else None)


# --------------------------------------------------------------------------
# pipeline stages operating on a run directory


def simulation_models(case_id: str, nets: HiddenNets):
    """(true, learned) simulable models sharing the case domain."""
    gt = cs.ground_truth(case_id)
    true = cs.true_sde(gt)
    learned = to_sde(cs.learning_structure(case_id), nets, name=f"{case_id}-learned",
                     lower=true.lower, upper=true.upper, project=true.project)
    return true, learned


def run_generate(cfg: RunConfig, out_dir) -> GeneratedData:
    """Simulate, estimate moments and write ``moments.csv`` (+ trajectories if enabled)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    d = cfg.data
    gen = generate_dataset(cfg.case_id, d.n_replicates, d.seed, cfg.scale, d.ic_counts, d.K,
                           d.dt, d.max_order, d.record_every, d.write_trajectories)
    meta = {"case_id": cfg.case_id, "seed": d.seed, "n_replicates": d.n_replicates,
            "flagged": gen.flagged, "numpy": np.__version__}
    meta.update({f"event_{k}": v for k, v in gen.event_rates.items()})
    write_moments(gen.dataset, out / "moments.csv", meta)
    if d.write_trajectories:
        (out / "trajectories").mkdir(exist_ok=True)
        for g, ens in enumerate(gen.ensembles):
            write_trajectories(ens, out / "trajectories" / f"ic_{g:04d}.csv", cfg.case_id)
        gen.ensembles = None
    return gen


def check_dataset(cfg: RunConfig, ds: MomentDataset, meta: Optional[dict] = None) -> None:
    gt = cs.ground_truth(cfg.case_id)
    if ds.state_dim != gt.state_dim or ds.inputs.shape[1] != gt.input_dim:
        raise ValueError(f"moment file dimensions do not match case {cfg.case_id}")
    if meta is not None and meta.get("case_id", cfg.case_id) != cfg.case_id:
        raise ValueError(f"moment file belongs to case {meta['case_id']}, not {cfg.case_id}")


def run_train(cfg: RunConfig, out_dir, ds: Optional[MomentDataset] = None) -> TrainedModel:
    """Train on ``moments.csv`` of the run directory; writes checkpoints and histories."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = None
    if ds is None:
        ds, meta = read_moments(out / "moments.csv")
    check_dataset(cfg, ds, meta)
    save_config(cfg, out / "config.ini")
    model = train(ds, cs.learning_structure(cfg.case_id), cfg.train)
    for name in ("drift", "diffusion"):
        net = getattr(model.nets, name)
        if net is not None:
            neural.save_checkpoint(net, out / f"{name}.ckpt")
    for i, hist in enumerate(model.history):
        write_history(hist, out / ("history.csv" if i == 0 else f"history_{hist.name}.csv"))
    info = {f"{h.name}_best_val_loss": h.best_val_loss for h in model.history}
    info.update({f"{h.name}_best_epoch": h.best_epoch for h in model.history})
    info.update({f"{h.name}_skipped_steps": h.skipped_steps for h in model.history})
    write_metadata(out / "train_summary.meta", info)
    return model


def load_nets(case_id: str, out_dir) -> HiddenNets:
    """Checkpoints of a run directory, checked against the case's structure."""
    out = Path(out_dir)
    nets = {}
    for name in ("drift", "diffusion"):
        p = out / f"{name}.ckpt"
        nets[name] = neural.load_checkpoint(p) if p.exists() else None
    hn = HiddenNets(**nets)
    structure = cs.learning_structure(case_id)
    if hn.drift is None:
        raise FileNotFoundError(f"no drift.ckpt in {out}")
    check_compatible(structure, hn, need_diffusion=structure.diffusion == "sqrt2g")
    return hn


def truth_callables(case_id: str):
    """Ground-truth hidden functions in place of trained nets (test hook)."""
    return cs.true_hidden_callables(case_id)


def run_evaluate(cfg: RunConfig, out_dir, nets=None, use_truth=False, with_kl=True) -> dict:
    """RMSE on the evaluation grid, grid CSVs, KL validation and optional KDE CSVs.

    Returns the summary dict (also written to ``report/summary.ini``).
    """
    out = Path(out_dir)
    rep = out / "report"
    rep.mkdir(parents=True, exist_ok=True)
    case = cfg.case_id
    gt = cs.ground_truth(case)
    if use_truth:
        learned = truth_callables(case)
    else:
        learned = load_nets(case, out) if nets is None else nets
    hull = None
    if (out / "moments.csv").exists():
        ds, _ = read_moments(out / "moments.csv")
        hull = feature_hull(cs.learning_structure(case), ds)
    grid = case_grid(case, cfg.eval.resolution, hull)
    rmse = grid_report(learned, gt, grid, rep)
    extra = {"grid_points": grid.points.shape[0],
             "extrapolated_points": int(np.count_nonzero(grid.extrapolated))}
    if case == "lotka_volterra":
        eff = rmse_grid(learned, gt, grid, effective=True)
        extra.update({f"rmse_effective_{k}": repr(v) for k, v in eff.items()})
    kl = None
    if with_kl:
        # the truth hook compares the true model with itself
        kl = run_kl(cfg, learned if isinstance(learned, HiddenNets) else None, rep)
    write_summary(rep / "summary.ini", rmse, kl, extra)
    return {"rmse": rmse, "kl": kl, **extra}


def run_kl(cfg: RunConfig, nets: Optional[HiddenNets], rep_dir) -> dict:
    """KL validation error of ``nets`` (None: the true model) plus a two-seed control."""
    ev = cfg.eval
    if nets is None:
        true = learned = cs.true_sde(cs.ground_truth(cfg.case_id))
    else:
        true, learned = simulation_models(cfg.case_id, nets)
    ic = np.asarray(ev.kl_ic, float)
    u = np.asarray(ev.kl_input, float)
    dt = cfg.data.dt
    res = kl_validation(true, learned, ic, u, dt, ev.K_V, ev.kl_replicates, ev.kl_seed,
                        keep_densities=ev.write_kde, record_every=cfg.data.record_every)
    ctrl = kl_validation(true, true, ic, u, dt, ev.K_V, ev.kl_replicates, ev.kl_seed,
                         learned_seed=ev.kl_seed + 1, record_every=cfg.data.record_every)
    table = np.column_stack([np.arange(ev.K_V + 1), res.times, res.per_step, ctrl.per_step])
    np.savetxt(Path(rep_dir) / "kl.csv", table, fmt=["%d", "%.17g", "%.17g", "%.17g"],
               delimiter=",", header="k,t,kl,kl_control", comments="")
    if ev.write_kde:
        write_kde_csv(Path(rep_dir) / "kde.csv", res)
    return {"validation_error": res.total, "control": ctrl.total,
            "ratio_to_control": res.total / ctrl.total if ctrl.total > 0 else float("inf")}


def reproduce(cfg: RunConfig, out_dir) -> dict:
    """generate -> train -> evaluate in one run directory."""
    gen = run_generate(cfg, out_dir)
    model = run_train(cfg, out_dir, gen.dataset)
    return run_evaluate(cfg, out_dir, model.nets)


# --------------------------------------------------------------------------
# sensitivity sweeps


SWEEPS = ("replicates", "datasize", "propagator", "sampling-time")


def sweep_settings(name: str, cfg: RunConfig) -> list:
    """(factor, run config) pairs for a sweep."""
    if name == "replicates":
        top = cfg.data.n_replicates
        vals = [n for n in (100, 1000, 10_000, 100_000) if n <= top]
        return [(n, cfg.replace("data", n_replicates=n)) for n in vals]
    if name == "datasize":
        return [(f, cfg) for f in (0.25, 0.5, 1.0)]
    if name == "propagator":
        return [(p, cfg.replace("train", propagator=p)) for p in PROPAGATORS]
    if name == "sampling-time":
        base = cfg.data.dt
        out = []
        for m in (1, 2, 3, 4):
            c = cfg.replace("data", dt=base * m, record_every=m)
            out.append((base * m, c.replace("train", propagator="ut4m")))
        return out
    raise ValueError(f"unknown sweep {name!r}; expected one of {SWEEPS}")


def subsample_groups(ds: MomentDataset, fraction: float, seed: int) -> MomentDataset:
    """Keep a seeded random subset of the initial-condition groups."""
    G = ds.n_groups
    n = max(2, int(round(fraction * G)))
    keep = np.sort(np.random.default_rng(seed).choice(G, size=min(n, G), replace=False))
    mask = np.isin(ds.ic_index, keep)
    remap = np.full(G, -1)
    remap[keep] = np.arange(keep.size)
    opt = lambda a: None if a is None else a[mask]
    return MomentDataset(remap[ds.ic_index[mask]], ds.k[mask], ds.t[mask], ds.mean[mask],
                         ds.cov[mask], ds.n_samples[mask], ds.inputs[keep], ds.dt,
                         opt(ds.skew), opt(ds.kurt))


def run_sweep(cfg: RunConfig, name: str, out_dir, settings=None) -> list:
    """Train and score one model per sweep setting; writes ``sweep_<name>.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.ini")
    settings = sweep_settings(name, cfg) if settings is None else settings
    gt = cs.ground_truth(cfg.case_id)
    structure = cs.learning_structure(cfg.case_id)
    grid = case_grid(cfg.case_id, cfg.eval.resolution)
    cache = {}
    rows = []
    for factor, c in settings:
        d = c.data
        key = (d.n_replicates, d.dt, d.record_every, d.seed)
        if key not in cache:
            cache.clear()
            cache[key] = generate_dataset(c.case_id, d.n_replicates, d.seed, c.scale,
                                          d.ic_counts, d.K, d.dt, d.max_order,
                                          d.record_every).dataset
        ds = cache[key]
        if name == "datasize":
            ds = subsample_groups(ds, factor, d.seed)
        model = train(ds, structure, c.train)
        rmse = rmse_grid(model.nets, gt, grid)
        row = {"factor": factor, "n_records": ds.n_records,
               "val_loss": model.history[-1].best_val_loss, **rmse}
        log.info("sweep %s %s: %s", name, factor, rmse)
        rows.append(row)
    cols = list(rows[0])
    with open(out / f"sweep_{name.replace('-', '_')}.csv", "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(_cell(r[c]) for c in cols) + "\n")
    return rows


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)
