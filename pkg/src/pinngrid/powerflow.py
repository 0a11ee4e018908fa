"""AC power flow (polar Newton-Raphson) and the one-step grid transition.

This is the ground-truth oracle: every dataset label and every "real"
transition in the experiments comes from :func:`step_transition`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    ActionVector,
    GridCase,
    StateVector,
    build_admittance,
    bus_injections,
    clamp_actions,
    pack_action,
    pack_state,
    soc_update,
    unpack_state,
)

SLACK_VM = 1.0


class NonConvergence(RuntimeError):
    """Newton iterations failed; ``residual`` is the last max mismatch (p.u.)."""

    def __init__(self, message, residual, iterations):
        super().__init__(f"{message} (max mismatch {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class PfConfig:
    tolerance: float = 1e-8
    max_iterations: int = 30
    init: str = "flat"

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.init not in ("flat", "warm"):
            raise ValueError(f"init must be 'flat' or 'warm', got {self.init!r}")


@dataclass(frozen=True)
class PfSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    slack_p: float
    slack_q: float
    iterations: int
    max_residual: float


def calc_injections(Y: np.ndarray, vm: np.ndarray, va: np.ndarray):
    """Bus (P, Q) implied by voltages: P_i = sum_j |V_i||V_j| (G cos + B sin)."""
    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    return S.real, S.imag


def _jacobian(Y, V, pq):
    Ibus = Y @ V
    diagV = np.diag(V)
    dS_dVa = 1j * diagV @ np.conj(np.diag(Ibus) - Y @ diagV)
    Vnorm = V / np.abs(V)
    dS_dVm = diagV @ np.conj(Y @ np.diag(Vnorm)) + np.conj(np.diag(Ibus)) @ np.diag(Vnorm)
    ix = np.ix_(pq, pq)
    return np.block([[dS_dVa[ix].real, dS_dVm[ix].real],
                     [dS_dVa[ix].imag, dS_dVm[ix].imag]])


def solve_power_flow(case: GridCase, p_inj, q_inj, cfg: PfConfig | None = None, *, Y=None, v0=None) -> PfSolution:
    """Solve for bus voltages given net injections at the non-slack buses.

    Entries of ``p_inj``/``q_inj`` at the slack bus are ignored; the slack
    absorbs whatever imbalance and losses remain. ``v0=(vm, va)`` seeds the
    iteration when ``cfg.init == "warm"``.

    Raises:
        NonConvergence: iteration budget exhausted, Jacobian singular, or the
            iterate left the finite range.
    """
    cfg = cfg or PfConfig()
    Y = build_admittance(case) if Y is None else Y
    n, pq, slack = case.n_bus, case.pq_buses, case.slack_bus
    p_inj = np.asarray(p_inj, dtype=float)
    q_inj = np.asarray(q_inj, dtype=float)
    if cfg.init == "warm" and v0 is not None:
        vm = np.array(v0[0], dtype=float)
        va = np.array(v0[1], dtype=float)
    else:
        vm, va = np.ones(n), np.zeros(n)
    vm[slack], va[slack] = SLACK_VM, 0.0
    npq = len(pq)

    def mismatch(vm, va):
        P, Q = calc_injections(Y, vm, va)
        return np.concatenate([P[pq] - p_inj[pq], Q[pq] - q_inj[pq]])

    f = mismatch(vm, va)
    resid = float(np.max(np.abs(f), initial=0.0))
    it = 0
    while resid > cfg.tolerance:
        if it >= cfg.max_iterations:
            raise NonConvergence("power flow did not converge", resid, it)
        V = vm * np.exp(1j * va)
        try:
            dx = np.linalg.solve(_jacobian(Y, V, pq), -f)
        except np.linalg.LinAlgError:
            raise NonConvergence("singular power-flow Jacobian", resid, it) from None
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        it += 1
        f = mismatch(vm, va)
        resid = float(np.max(np.abs(f)))
        if not np.isfinite(resid) or np.any(vm[pq] <= 0):
            raise NonConvergence("power-flow iterate diverged", float("inf") if not np.isfinite(resid) else resid, it)

    P, Q = calc_injections(Y, vm, va)
    return PfSolution(v_mag=vm, v_ang=va, slack_p=float(P[slack]), slack_q=float(Q[slack]),
                      iterations=it, max_residual=resid)


def branch_flows(case: GridCase, sol: PfSolution) -> np.ndarray:
    """Per-branch complex power leaving each end.

    Returns an array of shape (n_branch, 4) with columns
    ``P_from, Q_from, P_to, Q_to``; ``P_from + P_to`` is the branch loss.
    """
    V = sol.v_mag * np.exp(1j * sol.v_ang)
    out = np.zeros((len(case.branches), 4))
    for k, br in enumerate(case.branches):
        i, j, y = br.from_bus, br.to_bus, br.y_series
        ysh = 0.5j * br.b_sh
        s_ij = V[i] * np.conj((V[i] - V[j]) * y + V[i] * ysh)
        s_ji = V[j] * np.conj((V[j] - V[i]) * y + V[j] * ysh)
        out[k] = (s_ij.real, s_ij.imag, s_ji.real, s_ji.imag)
    return out


def transition_arrays(case: GridCase, state: np.ndarray, action: np.ndarray, cfg: PfConfig | None = None,
                      *, Y=None):
    """Packed-array transition: returns (next_state, PfSolution).

    Steps: clamp the action against the current SOC, advance the stored
    energy, apply setpoints, hold loads, solve the network.
    """
    lay = case.layout
    state = np.asarray(state, dtype=float)
    soc = state[lay.state["des_soc"]]
    applied = clamp_actions(case, action, soc)
    a = lay.action
    soc_next = soc_update(case, soc, applied[a["des_p_set"]])
    P, Q = bus_injections(case, state, applied)
    sol = solve_power_flow(case, P, Q, cfg, Y=Y)

    nxt = np.empty(lay.state_dim)
    st = lay.state
    nxt[st["v_mag"]] = sol.v_mag
    nxt[st["v_ang"]] = sol.v_ang[case.pq_buses]
    nxt[st["gen_p"]] = applied[a["gen_p_set"]]
    nxt[st["gen_q"]] = applied[a["gen_q_set"]]
    nxt[st["des_soc"]] = soc_next
    nxt[st["des_p"]] = applied[a["des_p_set"]]
    nxt[st["des_q"]] = applied[a["des_q_set"]]
    nxt[st["load_p"]] = state[st["load_p"]]
    nxt[st["load_q"]] = state[st["load_q"]]
    return nxt, sol


def step_transition(case: GridCase, s: StateVector, a: ActionVector, cfg: PfConfig | None = None) -> StateVector:
    nxt, _ = transition_arrays(case, pack_state(s, case), pack_action(a), cfg)
    return unpack_state(nxt, case)
