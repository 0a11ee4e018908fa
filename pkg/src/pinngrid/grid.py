"""Network case, state/action layout, device limits and the bus admittance matrix.

Sign convention: power injected into a bus is positive. Loads therefore carry
non-positive active power. A storage unit's setpoint is positive while
charging (power drawn from the grid), which is a *negative* bus injection.

Packed state order (fixed, used by every array-level API)::

    v_mag[0..n-1], v_ang[non-slack buses], gen_p, gen_q,
    des_soc, des_p, des_q, load_p, load_q

The slack angle is identically zero and is not packed. The first
``layout.target_dim`` entries (everything except loads) are the quantities a
surrogate predicts; loads are exogenous and copied through.

Packed action order::

    gen_p_set, gen_q_set, des_p_set, des_q_set
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

DEVICE_KINDS = ("slack", "generator", "load", "storage")


class CaseError(ValueError):
    """Raised when a case description is inconsistent."""


@dataclass(frozen=True)
class BusSpec:
    id: int
    base_kv: float
    v_min: float
    v_max: float
    is_slack: bool = False

    def __post_init__(self):
        if not 0.0 < self.v_min < self.v_max:
            raise CaseError(f"bus {self.id}: need 0 < v_min < v_max, got {self.v_min}, {self.v_max}")


@dataclass(frozen=True)
class BranchSpec:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_sh: float = 0.0
    rate: float = 0.0

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus} connects a bus to itself")
        if self.r == 0.0 and self.x == 0.0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus} has zero series impedance")
        if self.rate < 0:
            raise CaseError(f"branch {self.from_bus}-{self.to_bus} has negative rate")

    @property
    def y_series(self) -> complex:
        return 1.0 / complex(self.r, self.x)


@dataclass(frozen=True)
class DeviceSpec:
    id: int
    bus: int
    kind: str
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = 0.0
    q_max: float = 0.0
    soc_max: float = 0.0
    eff_charge: float = 1.0
    eff_discharge: float = 1.0

    def __post_init__(self):
        if self.kind not in DEVICE_KINDS:
            raise CaseError(f"device {self.id}: unknown kind {self.kind!r}")
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise CaseError(f"device {self.id}: inverted power bounds")
        if self.kind == "load" and self.p_max > 0:
            raise CaseError(f"device {self.id}: loads must have p_max <= 0")
        if self.kind == "storage":
            if self.soc_max <= 0:
                raise CaseError(f"device {self.id}: storage needs soc_max > 0")
            for eff in (self.eff_charge, self.eff_discharge):
                if not 0.0 < eff <= 1.0:
                    raise CaseError(f"device {self.id}: efficiency {eff} outside (0, 1]")


@dataclass(frozen=True)
class StateLayout:
    """Slices of every field inside the packed state and action vectors."""

    state: dict
    action: dict
    state_dim: int
    action_dim: int
    target_dim: int
    state_names: tuple
    action_names: tuple


@dataclass(frozen=True, eq=False)
class GridCase:
    base_mva: float
    buses: tuple
    branches: tuple
    devices: tuple
    dt: float = 0.25
    name: str = "case"

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "devices", tuple(self.devices))
        self.validate()

    def validate(self):
        n = len(self.buses)
        if n == 0:
            raise CaseError("case has no buses")
        if [b.id for b in self.buses] != list(range(n)):
            raise CaseError("bus ids must be 0..n-1 in order")
        slack = [b.id for b in self.buses if b.is_slack]
        if len(slack) != 1:
            raise CaseError(f"exactly one slack bus required, found {len(slack)}")
        for br in self.branches:
            for k in (br.from_bus, br.to_bus):
                if not 0 <= k < n:
                    raise CaseError(f"branch references unknown bus {k}")
        for d in self.devices:
            if not 0 <= d.bus < n:
                raise CaseError(f"device {d.id} references unknown bus {d.bus}")
        if self.dt <= 0 or self.base_mva <= 0:
            raise CaseError("dt and base_mva must be positive")
        unreachable = self.unreachable_buses()
        if unreachable:
            raise CaseError(f"network disconnected; unreachable from slack: {unreachable}")

    def unreachable_buses(self) -> list:
        adj = {i: set() for i in range(len(self.buses))}
        for br in self.branches:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
        seen = {self.slack_bus}
        queue = deque(seen)
        while queue:
            i = queue.popleft()
            for j in adj[i] - seen:
                seen.add(j)
                queue.append(j)
        return sorted(set(adj) - seen)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @cached_property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.is_slack)

    @cached_property
    def pq_buses(self) -> np.ndarray:
        return np.array([b.id for b in self.buses if not b.is_slack], dtype=int)

    def _of_kind(self, kind):
        return tuple(d for d in self.devices if d.kind == kind)

    @cached_property
    def generators(self) -> tuple:
        return self._of_kind("generator")

    @cached_property
    def loads(self) -> tuple:
        return self._of_kind("load")

    @cached_property
    def storage(self) -> tuple:
        return self._of_kind("storage")

    @cached_property
    def layout(self) -> StateLayout:
        n, g, s, l = self.n_bus, len(self.generators), len(self.storage), len(self.loads)
        sizes = [("v_mag", n), ("v_ang", n - 1), ("gen_p", g), ("gen_q", g),
                 ("des_soc", s), ("des_p", s), ("des_q", s), ("load_p", l), ("load_q", l)]
        state, names, pos = {}, [], 0
        for key, size in sizes:
            state[key] = slice(pos, pos + size)
            pos += size
        for i in range(n):
            names.append(f"v_mag_{i}")
        names += [f"v_ang_{i}" for i in self.pq_buses]
        names += [f"gen_p_{d.id}" for d in self.generators] + [f"gen_q_{d.id}" for d in self.generators]
        names += [f"des_soc_{d.id}" for d in self.storage] + [f"des_p_{d.id}" for d in self.storage]
        names += [f"des_q_{d.id}" for d in self.storage]
        names += [f"load_p_{d.id}" for d in self.loads] + [f"load_q_{d.id}" for d in self.loads]

        action, pos = {}, 0
        for key, size in [("gen_p_set", g), ("gen_q_set", g), ("des_p_set", s), ("des_q_set", s)]:
            action[key] = slice(pos, pos + size)
            pos += size
        anames = ([f"gen_p_set_{d.id}" for d in self.generators] + [f"gen_q_set_{d.id}" for d in self.generators]
                  + [f"des_p_set_{d.id}" for d in self.storage] + [f"des_q_set_{d.id}" for d in self.storage])
        return StateLayout(state=state, action=action, state_dim=len(names), action_dim=pos,
                           target_dim=state["load_p"].start, state_names=tuple(names),
                           action_names=tuple(anames))

    @cached_property
    def action_bounds(self) -> tuple:
        """Per-entry (lo, hi) arrays of the device setpoint boxes."""
        g, s = self.generators, self.storage
        lo = np.array([d.p_min for d in g] + [d.q_min for d in g] + [d.p_min for d in s] + [d.q_min for d in s])
        hi = np.array([d.p_max for d in g] + [d.q_max for d in g] + [d.p_max for d in s] + [d.q_max for d in s])
        return lo, hi

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "base_mva": self.base_mva,
            "dt": self.dt,
            "buses": [vars(b).copy() for b in self.buses],
            "branches": [vars(b).copy() for b in self.branches],
            "devices": [vars(d).copy() for d in self.devices],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def case_from_dict(doc: dict) -> GridCase:
    try:
        return GridCase(
            base_mva=float(doc["base_mva"]),
            dt=float(doc.get("dt", 0.25)),
            buses=[BusSpec(**b) for b in doc["buses"]],
            branches=[BranchSpec(**b) for b in doc["branches"]],
            devices=[DeviceSpec(**d) for d in doc["devices"]],
            name=doc.get("name", "case"),
        )
    except (KeyError, TypeError) as exc:
        raise CaseError(f"malformed case document: {exc}") from exc


def load_case(path) -> GridCase:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"case file not found: {path}")
    with open(path) as fh:
        return case_from_dict(json.load(fh))


def default_case_path() -> Path:
    return Path(__file__).parent / "data" / "anm6.json"


def load_default_case() -> GridCase:
    return load_case(default_case_path())


def build_admittance(case: GridCase) -> np.ndarray:
    """Complex bus admittance matrix with pi-model branches."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        i, j, y = br.from_bus, br.to_bus, br.y_series
        half = 0.5j * br.b_sh
        Y[i, i] += y + half
        Y[j, j] += y + half
        Y[i, j] -= y
        Y[j, i] -= y
    return Y


@dataclass(frozen=True, eq=False)
class StateVector:
    v_mag: np.ndarray
    v_ang: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    des_soc: np.ndarray
    des_p: np.ndarray
    des_q: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__dataclass_fields__)


@dataclass(frozen=True, eq=False)
class ActionVector:
    gen_p_set: np.ndarray
    gen_q_set: np.ndarray
    des_p_set: np.ndarray
    des_q_set: np.ndarray

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entry in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, ActionVector):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__dataclass_fields__)


@dataclass(frozen=True)
class StateBounds:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("bounds need lo < hi elementwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, x: np.ndarray) -> np.ndarray:
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)


def default_state_bounds(case: GridCase, angle_max: float = 0.1) -> StateBounds:
    """Sampling/binning range of every packed state entry.

    Voltages span the bus limits, angles ``[-angle_max, angle_max]`` rad,
    device quantities their setpoint boxes, SOC ``[0, soc_max]``.
    """
    lay = case.layout
    lo = np.empty(lay.state_dim)
    hi = np.empty(lay.state_dim)
    st = lay.state
    lo[st["v_mag"]] = [b.v_min for b in case.buses]
    hi[st["v_mag"]] = [b.v_max for b in case.buses]
    lo[st["v_ang"]], hi[st["v_ang"]] = -angle_max, angle_max
    g, s, l = case.generators, case.storage, case.loads
    for key, devs, lo_attr, hi_attr in [("gen_p", g, "p_min", "p_max"), ("gen_q", g, "q_min", "q_max"),
                                        ("des_p", s, "p_min", "p_max"), ("des_q", s, "q_min", "q_max"),
                                        ("load_p", l, "p_min", "p_max"), ("load_q", l, "q_min", "q_max")]:
        lo[st[key]] = [getattr(d, lo_attr) for d in devs]
        hi[st[key]] = [getattr(d, hi_attr) for d in devs]
    lo[st["des_soc"]] = 0.0
    hi[st["des_soc"]] = [d.soc_max for d in s]
    return StateBounds(lo, hi)


def pack_state(s: StateVector, case: GridCase) -> np.ndarray:
    _check_state_dims(s, case)
    return np.concatenate([s.v_mag, s.v_ang[case.pq_buses], s.gen_p, s.gen_q, s.des_soc, s.des_p,
                           s.des_q, s.load_p, s.load_q])


def unpack_state(v, case: GridCase) -> StateVector:
    v = np.asarray(v, dtype=float)
    lay = case.layout
    if v.shape != (lay.state_dim,):
        raise ValueError(f"state vector length {v.shape} does not match case ({lay.state_dim},)")
    st = lay.state
    ang = np.zeros(case.n_bus)
    ang[case.pq_buses] = v[st["v_ang"]]
    return StateVector(v_mag=v[st["v_mag"]], v_ang=ang, gen_p=v[st["gen_p"]], gen_q=v[st["gen_q"]],
                       des_soc=v[st["des_soc"]], des_p=v[st["des_p"]], des_q=v[st["des_q"]],
                       load_p=v[st["load_p"]], load_q=v[st["load_q"]])


def pack_action(a: ActionVector) -> np.ndarray:
    return np.concatenate([a.gen_p_set, a.gen_q_set, a.des_p_set, a.des_q_set])


def unpack_action(v, case: GridCase) -> ActionVector:
    v = np.asarray(v, dtype=float)
    lay = case.layout
    if v.shape != (lay.action_dim,):
        raise ValueError(f"action vector length {v.shape} does not match case ({lay.action_dim},)")
    return ActionVector(**{k: v[sl] for k, sl in lay.action.items()})


def _check_state_dims(s: StateVector, case: GridCase):
    expect = {"v_mag": case.n_bus, "v_ang": case.n_bus, "gen_p": len(case.generators),
              "gen_q": len(case.generators), "des_soc": len(case.storage), "des_p": len(case.storage),
              "des_q": len(case.storage), "load_p": len(case.loads), "load_q": len(case.loads)}
    for key, size in expect.items():
        if getattr(s, key).shape != (size,):
            raise ValueError(f"state field {key} has shape {getattr(s, key).shape}, case needs ({size},)")


def storage_power_limits(case: GridCase, soc: np.ndarray):
    """SOC-aware (lo, hi) setpoint limits for every storage unit.

    ``soc`` has shape (..., n_storage). Discharge is limited so the stored
    energy cannot drop below zero in one step, charge so it cannot exceed
    ``soc_max``.
    """
    st = case.storage
    p_min = np.array([d.p_min for d in st])
    p_max = np.array([d.p_max for d in st])
    soc_max = np.array([d.soc_max for d in st])
    eta_c = np.array([d.eff_charge for d in st])
    eta_d = np.array([d.eff_discharge for d in st])
    soc = np.clip(soc, 0.0, soc_max)
    lo = np.maximum(p_min, -soc * eta_d / case.dt)
    hi = np.minimum(p_max, (soc_max - soc) / (eta_c * case.dt))
    return lo, hi


def clamp_actions(case: GridCase, actions: np.ndarray, soc: np.ndarray) -> np.ndarray:
    """Array version of :func:`clamp_action` over a batch of packed actions."""
    actions = np.asarray(actions, dtype=float)
    lo, hi = case.action_bounds
    out = np.clip(actions, lo, hi)
    if case.storage:
        sl = case.layout.action["des_p_set"]
        s_lo, s_hi = storage_power_limits(case, np.asarray(soc, dtype=float))
        out[..., sl] = np.clip(out[..., sl], s_lo, s_hi)
    return out


def clamp_action(a: ActionVector, s: StateVector, case: GridCase) -> ActionVector:
    """Clip setpoints into device boxes, then apply the storage SOC limits."""
    out = clamp_actions(case, pack_action(a), s.des_soc)
    return unpack_action(out, case)


def soc_update(case: GridCase, soc: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Stored energy after one step at storage setpoint ``p`` (positive = charging)."""
    st = case.storage
    soc_max = np.array([d.soc_max for d in st])
    eta_c = np.array([d.eff_charge for d in st])
    eta_d = np.array([d.eff_discharge for d in st])
    delta = np.where(p > 0, eta_c * p * case.dt, p * case.dt / eta_d)
    return np.clip(soc + delta, 0.0, soc_max)


def bus_injections(case: GridCase, state: np.ndarray, applied: np.ndarray):
    """Per-bus net (P, Q) injections from packed state loads and a packed applied action.

    Works on single vectors or batches; the slack bus entry only holds whatever
    non-slack devices sit on it.
    """
    state = np.asarray(state, dtype=float)
    applied = np.asarray(applied, dtype=float)
    lay = case.layout
    batch = state.shape[:-1]
    P = np.zeros(batch + (case.n_bus,))
    Q = np.zeros(batch + (case.n_bus,))
    a = lay.action
    for k, d in enumerate(case.generators):
        P[..., d.bus] += applied[..., a["gen_p_set"].start + k]
        Q[..., d.bus] += applied[..., a["gen_q_set"].start + k]
    for k, d in enumerate(case.storage):
        P[..., d.bus] -= applied[..., a["des_p_set"].start + k]
        Q[..., d.bus] -= applied[..., a["des_q_set"].start + k]
    s = lay.state
    for k, d in enumerate(case.loads):
        P[..., d.bus] += state[..., s["load_p"].start + k]
        Q[..., d.bus] += state[..., s["load_q"].start + k]
    return P, Q
