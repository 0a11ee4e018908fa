"""Oracle-labelled transition datasets: generative, binned and agent rollouts.

All datasets store the action actually applied, i.e. after :func:`clamp_actions`.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import (
    ActionVector,
    GridCase,
    StateBounds,
    StateVector,
    build_admittance,
    clamp_actions,
    default_state_bounds,
    storage_power_limits,
    unpack_action,
    unpack_state,
)
from .powerflow import NonConvergence, PfConfig, transition_arrays

log = logging.getLogger(__name__)

MAX_DISCARD = 0.5
MANIFEST_VERSION = 1


class DatasetError(RuntimeError):
    """Generation could not produce a usable dataset."""


@dataclass(frozen=True)
class TransitionSample:
    state: StateVector
    action: ActionVector
    next_state: StateVector


@dataclass(frozen=True, eq=False)
class Dataset:
    """Packed transitions ``(states, actions) -> next_states`` for one case."""

    name: str
    case: GridCase
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    provenance: dict = field(default_factory=dict)
    discarded: int = 0

    def __post_init__(self):
        lay = self.case.layout
        n = len(self.states)
        if n == 0:
            raise ValueError(f"dataset {self.name!r} is empty")
        if self.states.shape != (n, lay.state_dim) or self.next_states.shape != (n, lay.state_dim):
            raise ValueError(f"dataset {self.name!r}: state arrays must be ({n}, {lay.state_dim})")
        if self.actions.shape != (n, lay.action_dim):
            raise ValueError(f"dataset {self.name!r}: action array must be ({n}, {lay.action_dim})")
        for a in (self.states, self.actions, self.next_states):
            a.setflags(write=False)

    def __len__(self):
        return len(self.states)

    def __getitem__(self, i) -> TransitionSample:
        return TransitionSample(unpack_state(self.states[i], self.case), unpack_action(self.actions[i], self.case),
                                unpack_state(self.next_states[i], self.case))

    @property
    def samples(self):
        return [self[i] for i in range(len(self))]

    @cached_property
    def inputs(self) -> np.ndarray:
        """``state ++ action`` rows, the regression input."""
        return np.hstack([self.states, self.actions])

    @cached_property
    def targets(self) -> np.ndarray:
        """Predicted part of the next state (loads excluded)."""
        return self.next_states[:, :self.case.layout.target_dim]

    def subset(self, idx, name=None) -> "Dataset":
        return Dataset(name or self.name, self.case, self.states[idx], self.actions[idx], self.next_states[idx],
                       dict(self.provenance), 0)

    def manifest(self) -> dict:
        return {"version": MANIFEST_VERSION, "name": self.name, "case_digest": self.case.digest(),
                "n_samples": len(self), "discarded": self.discarded, "provenance": self.provenance}


# --------------------------------------------------------------------------- labelling

def _label_chunk(args):
    case, states, actions, cfg = args
    Y = build_admittance(case)
    nxt = np.full(states.shape, np.nan)
    ok = np.zeros(len(states), dtype=bool)
    for i in range(len(states)):
        try:
            nxt[i] = transition_arrays(case, states[i], actions[i], cfg, Y=Y)[0]
            ok[i] = True
        except NonConvergence:
            pass
    return nxt, ok


def label_transitions(case: GridCase, states, actions, cfg: PfConfig | None = None, jobs: int = 1):
    """Oracle next states for every row; returns ``(next_states, converged_mask)``.

    Results do not depend on ``jobs``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if jobs <= 1 or len(states) < 2 * jobs:
        return _label_chunk((case, states, actions, cfg))
    cuts = np.array_split(np.arange(len(states)), jobs)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_label_chunk, [(case, states[c], actions[c], cfg) for c in cuts]))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _sample_box(case, lo, hi, n, seed, name, provenance, cfg, jobs) -> Dataset:
    """Uniform states in ``[lo, hi]`` and actions in the action box, oracle-labelled.

    Non-convergent draws are replaced until ``n`` samples exist; more than
    half of all draws failing aborts generation.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    a_lo, a_hi = case.action_bounds
    soc_sl = case.layout.state["des_soc"]
    got_s, got_a, got_n = [], [], []
    have, drawn, discarded = 0, 0, 0
    while have < n:
        m = n - have
        s = rng.uniform(lo, hi, (m, len(lo)))
        a = clamp_actions(case, rng.uniform(a_lo, a_hi, (m, len(a_lo))), s[:, soc_sl])
        nxt, ok = label_transitions(case, s, a, cfg, jobs)
        drawn += m
        discarded += int((~ok).sum())
        if discarded > MAX_DISCARD * drawn:
            raise DatasetError(f"{name}: {discarded} of {drawn} draws failed to converge; bounds are likely infeasible")
        got_s.append(s[ok])
        got_a.append(a[ok])
        got_n.append(nxt[ok])
        have += int(ok.sum())
    if discarded:
        log.info("%s: discarded %d non-convergent draws", name, discarded)
    return Dataset(name, case, np.concatenate(got_s), np.concatenate(got_a), np.concatenate(got_n),
                   provenance, discarded)


def generate_generative(case: GridCase, n: int, seed: int = 0, state_bounds: StateBounds | None = None,
                        cfg: PfConfig | None = None, jobs: int = 1) -> Dataset:
    """Samples spread uniformly over the whole state and action space."""
    sb = state_bounds or default_state_bounds(case)
    return _sample_box(case, sb.lo, sb.hi, n, seed, "generative",
                       {"kind": "generative", "seed": seed}, cfg, jobs)


# --------------------------------------------------------------------------- bins

@dataclass(frozen=True)
class BinPartition:
    """``k`` equal-width intervals over each binned state variable."""

    k: int
    bounds: StateBounds
    binned: tuple

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("bin count must be >= 1")

    @cached_property
    def edges(self) -> np.ndarray:
        """Shape (n_binned, k + 1); row ``v`` holds ``lo + n (hi - lo) / k``."""
        idx = list(self.binned)
        lo, hi = self.bounds.lo[idx], self.bounds.hi[idx]
        return lo[:, None] + np.arange(self.k + 1)[None, :] * (hi - lo)[:, None] / self.k

    def box(self, n_bin: int):
        """Full-width state box whose binned entries sit in interval ``n_bin``."""
        if not 0 <= n_bin < self.k:
            raise ValueError(f"bin {n_bin} outside 0..{self.k - 1}")
        lo, hi = self.bounds.lo.copy(), self.bounds.hi.copy()
        idx = list(self.binned)
        lo[idx] = self.edges[:, n_bin]
        hi[idx] = self.edges[:, n_bin + 1]
        return lo, hi

    def bin_of(self, states) -> np.ndarray:
        """Per-variable bin index, shape (n, n_binned); the top edge belongs to the last bin."""
        x = np.atleast_2d(states)[:, list(self.binned)]
        lo, hi = self.edges[:, 0], self.edges[:, -1]
        b = np.floor((x - lo) / (hi - lo) * self.k).astype(int)
        return np.clip(b, 0, self.k - 1)

    def contains(self, states, n_bin: int) -> np.ndarray:
        return np.all(self.bin_of(states) == n_bin, axis=1)


def binned_variables(case: GridCase) -> tuple:
    """Packed state indices that get binned: every state field except the loads."""
    return tuple(range(case.layout.state["load_p"].start))


def partition_bins(bounds: StateBounds, k: int = 8, binned=None) -> BinPartition:
    binned = tuple(range(len(bounds.lo))) if binned is None else tuple(int(i) for i in binned)
    return BinPartition(k, bounds, binned)


def generate_bin_dataset(case: GridCase, partition: BinPartition, n_bin: int, n: int, seed: int = 0,
                         cfg: PfConfig | None = None, jobs: int = 1) -> Dataset:
    """Samples whose binned state entries all lie in interval ``n_bin``."""
    lo, hi = partition.box(n_bin)
    return _sample_box(case, lo, hi, n, seed, f"bin{n_bin + 1}",
                       {"kind": "bin", "bin": n_bin, "k": partition.k, "seed": seed}, cfg, jobs)


# --------------------------------------------------------------------------- agents

@lru_cache(maxsize=None)
def _profiles():
    doc = json.loads(resources.files("pinngrid").joinpath("data/profiles.json").read_text())
    return np.array(doc["load"]), np.array(doc["generation"])


def daily_profiles(horizon: int = 96):
    """(load factor, generation availability) per step, cycling the shipped day."""
    load, gen = _profiles()
    t = np.arange(horizon) % len(load)
    return load[t], gen[t]


def initial_state(case: GridCase, load_factor: float) -> np.ndarray:
    """Flat voltages, idle devices, empty storage, loads at ``load_factor`` of peak."""
    lay = case.layout
    s = np.zeros(lay.state_dim)
    s[lay.state["v_mag"]] = 1.0
    s[lay.state["load_p"]] = [d.p_min * load_factor for d in case.loads]
    s[lay.state["load_q"]] = [d.q_min * load_factor for d in case.loads]
    return s


class RandomPolicy:
    """Uniform setpoints over the action box."""

    name = "random"

    def __init__(self, case: GridCase, rng):
        self.case, self.rng = case, rng

    def __call__(self, state, t, gen_avail):
        lo, hi = self.case.action_bounds
        return self.rng.uniform(lo, hi)


class ExpertPolicy:
    """Rule-based storage controller with curtailment-free generation.

    Storage below ``low`` of capacity charges at the largest feasible rate;
    above ``high`` it discharges to cover the net load; in between it absorbs
    the renewable surplus (or covers the deficit) without leaving the band.
    """

    name = "expert"

    def __init__(self, case: GridCase, low: float = 0.2, high: float = 0.8):
        self.case, self.low, self.high = case, low, high

    def __call__(self, state, t, gen_avail):
        case, lay = self.case, self.case.layout
        a = np.zeros(lay.action_dim)
        gen_p = np.array([d.p_max for d in case.generators]) * gen_avail
        a[lay.action["gen_p_set"]] = gen_p
        surplus = gen_p.sum() + state[lay.state["load_p"]].sum()
        soc = state[lay.state["des_soc"]]
        soc_max = np.array([d.soc_max for d in case.storage])
        eta_c = np.array([d.eff_charge for d in case.storage])
        eta_d = np.array([d.eff_discharge for d in case.storage])
        lim_lo, lim_hi = storage_power_limits(case, soc)
        share = surplus / max(len(case.storage), 1)
        # setpoints that land exactly on the band edges, pulled in by a hair
        band_hi = (self.high * soc_max - soc) / (eta_c * case.dt) * (1 - 1e-9)
        band_lo = -(soc - self.low * soc_max) * eta_d / case.dt * (1 - 1e-9)
        p = np.where(soc < self.low * soc_max, lim_hi,
                     np.where(soc > self.high * soc_max, np.minimum(-max(-surplus, 0.0) / max(len(soc), 1), 0.0),
                              np.clip(share, np.minimum(band_lo, 0.0), np.maximum(band_hi, 0.0))))
        a[lay.action["des_p_set"]] = np.clip(p, lim_lo, lim_hi)
        return a


def rollout(case: GridCase, policy, horizon: int = 96, noise: float = 0.0, rng=None,
            cfg: PfConfig | None = None):
    """One oracle episode; returns packed (states, actions, next_states).

    Loads follow the daily profile, scaled by ``1 + noise * N(0, 1)`` per step.
    A non-convergent step truncates the episode.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    lay = case.layout
    load_f, gen_f = daily_profiles(horizon + 1)
    load_f = np.clip(load_f * (1.0 + noise * rng.standard_normal(horizon + 1)), 0.0, 1.0)
    Y = build_admittance(case)
    p_min = np.array([d.p_min for d in case.loads])
    q_min = np.array([d.q_min for d in case.loads])
    s = initial_state(case, load_f[0])
    S, A, N = [], [], []
    for t in range(horizon):
        a = clamp_actions(case, policy(s, t, gen_f[t]), s[lay.state["des_soc"]])
        try:
            nxt = transition_arrays(case, s, a, cfg, Y=Y)[0]
        except NonConvergence:
            log.warning("%s rollout truncated at step %d: power flow diverged", policy.name, t)
            break
        S.append(s)
        A.append(a)
        N.append(nxt)
        s = nxt.copy()
        s[lay.state["load_p"]] = p_min * load_f[t + 1]
        s[lay.state["load_q"]] = q_min * load_f[t + 1]
    return np.array(S).reshape(-1, lay.state_dim), np.array(A).reshape(-1, lay.action_dim), \
        np.array(N).reshape(-1, lay.state_dim)


def make_policy(case: GridCase, name: str, rng):
    if name == "random":
        return RandomPolicy(case, rng)
    if name == "expert":
        return ExpertPolicy(case)
    raise ValueError(f"unknown policy {name!r}; use 'random' or 'expert'")


def generate_agent_dataset(case: GridCase, policy: str, episodes: int = 20, horizon: int = 96, seed: int = 0,
                           noise: float = 0.05, cfg: PfConfig | None = None) -> Dataset:
    """Concatenated rollouts under ``policy``; episodes differ by load noise and policy draws."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    seqs = np.random.SeedSequence(seed).spawn(episodes)
    parts = []
    for e, ss in enumerate(seqs):
        rng = np.random.default_rng(ss)
        parts.append(rollout(case, make_policy(case, policy, rng), horizon, noise, rng, cfg))
    S, A, N = (np.concatenate([p[i] for p in parts]) for i in range(3))
    return Dataset(f"agent-{policy}", case, S, A, N,
                   {"kind": "agent", "policy": policy, "episodes": episodes, "horizon": horizon,
                    "seed": seed, "noise": noise})


def merge(datasets, name: str) -> Dataset:
    first = datasets[0]
    return Dataset(name, first.case, np.concatenate([d.states for d in datasets]),
                   np.concatenate([d.actions for d in datasets]), np.concatenate([d.next_states for d in datasets]),
                   {"kind": "merged", "parts": [d.provenance for d in datasets]},
                   sum(d.discarded for d in datasets))


# --------------------------------------------------------------------------- persistence

def csv_header(case: GridCase) -> list:
    lay = case.layout
    return ([f"s_{n}" for n in lay.state_names] + [f"a_{n}" for n in lay.action_names]
            + [f"ns_{n}" for n in lay.state_names])


def write_dataset(ds: Dataset, path) -> Path:
    """CSV with one header row, plus ``<stem>.manifest.json`` beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = np.hstack([ds.states, ds.actions, ds.next_states])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(ds.case))
        w.writerows([[repr(float(v)) for v in row] for row in rows])
    path.with_suffix(".manifest.json").write_text(json.dumps(ds.manifest(), indent=2))
    return path


def read_dataset(path, case: GridCase, verify_frac: float = 0.01, seed: int = 0, tol: float = 1e-8) -> Dataset:
    """Inverse of :func:`write_dataset`; columns may appear in any order.

    A random ``verify_frac`` of rows is re-labelled by the oracle and must
    match within ``tol``.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    expect = csv_header(case)
    if sorted(header) != sorted(expect) or len(header) != len(expect):
        missing = sorted(set(expect) - set(header))
        extra = sorted(set(header) - set(expect))
        raise ValueError(f"{path}: header does not match the case (missing {missing[:5]}, unexpected {extra[:5]})")
    data = data.reshape(-1, len(header))[:, [header.index(c) for c in expect]]
    lay = case.layout
    sd, ad = lay.state_dim, lay.action_dim
    manifest_path = path.with_suffix(".manifest.json")
    meta = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if meta and meta.get("case_digest") != case.digest():
        raise ValueError(f"{path}: dataset was generated for a different case")
    ds = Dataset(meta.get("name", path.stem), case, data[:, :sd], data[:, sd:sd + ad], data[:, sd + ad:],
                 meta.get("provenance", {}), meta.get("discarded", 0))
    if verify_frac > 0:
        rng = np.random.default_rng(seed)
        k = max(1, int(round(verify_frac * len(ds))))
        idx = rng.choice(len(ds), size=min(k, len(ds)), replace=False)
        nxt, ok = label_transitions(case, ds.states[idx], ds.actions[idx])
        if not ok.all() or np.max(np.abs(nxt - ds.next_states[idx])) > tol:
            raise ValueError(f"{path}: stored transitions disagree with the power-flow oracle")
    return ds
