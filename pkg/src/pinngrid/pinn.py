"""Physics-loss-only surrogate of the one-step grid transition.

Three sub-networks share the normalised input ``pack(state) ++ pack(action)``:

* voltage net   -> |V| and angle at every non-slack bus
* generator net -> realised P, Q of the non-slack generators
* storage net   -> next SOC, realised P, Q of the storage units

The slack bus voltage is fixed (1.0 p.u., angle 0), SOC goes through a scaled
logistic onto ``[0, soc_max]`` and loads are copied from the input. Training
never sees a labelled transition: each step scores a fresh Sobol batch with
:func:`physics_loss`.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .grid import (
    ActionVector,
    GridCase,
    StateBounds,
    StateVector,
    build_admittance,
    clamp_actions,
    default_state_bounds,
    pack_action,
    pack_state,
    soc_update,
    unpack_state,
)
from .nn import Mlp, MlpSpec, Tensor, TrainConfig, concat, flat_parameters, run_training_loop, set_flat_parameters
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .powerflow import SLACK_VM
from .sobol import max_dimension, scaled_sobol

log = logging.getLogger(__name__)

MONITOR_SKIP = 2**30


@dataclass(frozen=True)
class PhysicsLossWeights:
    balance: float = 1.0
    flow: float = 1.0
    limits: float = 10.0
    soc: float = 10.0

    def __post_init__(self):
        vals = (self.balance, self.flow, self.limits, self.soc)
        if min(vals) < 0 or max(vals) <= 0:
            raise ValueError("loss weights must be >= 0 with at least one > 0")


@dataclass(frozen=True)
class LossBreakdown:
    balance: float
    flow: float
    limits: float
    soc: float
    total: float

    def as_dict(self):
        return asdict(self)


def input_bounds(case: GridCase, state_bounds: StateBounds | None = None):
    sb = state_bounds or default_state_bounds(case)
    a_lo, a_hi = case.action_bounds
    return np.concatenate([sb.lo, a_lo]), np.concatenate([sb.hi, a_hi])


def sobol_batch(case: GridCase, n: int, skip: int = 1, state_bounds: StateBounds | None = None):
    """``n`` Sobol points scaled onto the state ++ action box; returns (states, actions)."""
    lo, hi = input_bounds(case, state_bounds)
    if len(lo) > max_dimension():
        raise ValueError(f"input dimension {len(lo)} exceeds Sobol table ({max_dimension()})")
    pts = scaled_sobol(n, lo, hi, skip)
    sd = case.layout.state_dim
    return pts[:, :sd], pts[:, sd:]


def feature_indices(case: GridCase, inputs: str = "full") -> np.ndarray:
    """Columns of ``state ++ action`` the sub-networks read.

    ``"physics"`` keeps only what the transition depends on: stored energy,
    loads and setpoints. Previous voltages and device outputs are dropped.
    """
    lay = case.layout
    if inputs == "full":
        return np.arange(lay.state_dim + lay.action_dim)
    st = lay.state
    keep = [np.arange(st[k].start, st[k].stop) for k in ("des_soc", "load_p", "load_q")]
    keep.append(lay.state_dim + np.arange(lay.action_dim))
    return np.concatenate(keep)


@dataclass(frozen=True)
class PinnConfig:
    hidden: tuple = (64, 64, 64)
    residual_blocks: int = 1
    alpha: float = 0.01
    input_skip: bool = True
    cascade: bool = True
    soc_squash: str = "logistic"
    inputs: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.inputs not in ("full", "physics"):
            raise ValueError("inputs must be 'full' or 'physics'")
        if self.soc_squash not in ("logistic", "hard"):
            raise ValueError("soc_squash must be 'logistic' or 'hard'")

    def to_dict(self):
        return {"hidden": list(self.hidden), "residual_blocks": self.residual_blocks,
                "alpha": self.alpha, "input_skip": self.input_skip, "cascade": self.cascade,
                "soc_squash": self.soc_squash, "inputs": self.inputs, "seed": self.seed}


class PinnModel:
    def __init__(self, case: GridCase, config: PinnConfig = PinnConfig(), state_bounds: StateBounds | None = None):
        self.case = case
        self.config = config
        self.state_bounds = state_bounds or default_state_bounds(case)
        self.in_lo, self.in_hi = input_bounds(case, self.state_bounds)
        self._in_idx = feature_indices(case, config.inputs)
        n_in = len(self._in_idx)
        npq, g, s = len(case.pq_buses), len(case.generators), len(case.storage)
        rng = np.random.default_rng(config.seed)

        def spec(width, n_out):
            return MlpSpec((width, *config.hidden, n_out), config.alpha, config.residual_blocks, config.input_skip)

        # with cascade on, the voltage net also sees the predicted device injections
        v_in = n_in + (2 * g + 2 * s if config.cascade else 0)
        self.voltage_net = Mlp(spec(v_in, 2 * npq), rng, name="voltage")
        self.generator_net = Mlp(spec(n_in, 2 * g), rng, name="generator")
        self.storage_net = Mlp(spec(n_in, 3 * s), rng, name="storage")

        pq = case.pq_buses
        v_lo = np.array([case.buses[i].v_min for i in pq])
        v_hi = np.array([case.buses[i].v_max for i in pq])
        sl = case.layout.state["v_ang"]
        self._vm_scale = 0.5 * (v_hi - v_lo)
        self._va_scale = 0.5 * (self.state_bounds.hi[sl] - self.state_bounds.lo[sl])
        a_lo, a_hi = case.action_bounds
        self._a_mid, self._a_half = 0.5 * (a_lo + a_hi), 0.5 * (a_hi - a_lo)
        self._soc_max = np.array([d.soc_max for d in case.storage])

    @property
    def networks(self):
        return [self.voltage_net, self.generator_net, self.storage_net]

    def parameters(self):
        return [p for net in self.networks for p in net.parameters()]

    def normalise(self, states, actions):
        x = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        if x.shape[1] != len(self.in_lo):
            raise ValueError(f"input width {x.shape[1]} does not match model ({len(self.in_lo)})")
        return 2.0 * (x - self.in_lo) / (self.in_hi - self.in_lo) - 1.0

    def predict_tensors(self, states, actions) -> dict:
        """Differentiable predictions keyed by state field (slack entries included)."""
        case = self.case
        x = Tensor(self.normalise(states, actions)[:, self._in_idx])
        B, npq = x.shape[0], len(case.pq_buses)
        g, s = len(case.generators), len(case.storage)
        zg = self.generator_net(x)
        gen = self._a_mid[:2 * g] + zg * self._a_half[:2 * g]
        zs = self.storage_net(x)
        zv = self.voltage_net(concat([x, zg, zs[:, s:]], axis=1) if self.config.cascade else x)
        vm_pq = 1.0 + zv[:, :npq] * self._vm_scale
        va_pq = zv[:, npq:] * self._va_scale
        vm = _with_slack(vm_pq, case, SLACK_VM, B)
        va = _with_slack(va_pq, case, 0.0, B)
        if self.config.soc_squash == "logistic":
            soc = zs[:, :s].sigmoid() * self._soc_max
        else:
            soc = (zs[:, :s] * 0.5 + 0.5).clip(0.0, 1.0) * self._soc_max
        des = self._a_mid[2 * g:] + zs[:, s:] * self._a_half[2 * g:]
        return {"v_mag": vm, "v_ang": va, "gen_p": gen[:, :g], "gen_q": gen[:, g:],
                "des_soc": soc, "des_p": des[:, :s], "des_q": des[:, s:]}

    def predict_arrays(self, states, actions) -> np.ndarray:
        """Packed next states for a batch of packed (state, action) rows."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        pred = self.predict_tensors(states, actions)
        lay = self.case.layout
        out = np.empty((states.shape[0], lay.state_dim))
        st = lay.state
        out[:, st["v_mag"]] = pred["v_mag"].data
        out[:, st["v_ang"]] = pred["v_ang"].data[:, self.case.pq_buses]
        for key in ("gen_p", "gen_q", "des_soc", "des_p", "des_q"):
            out[:, st[key]] = pred[key].data
        out[:, st["load_p"]] = states[:, st["load_p"]]
        out[:, st["load_q"]] = states[:, st["load_q"]]
        return out

    def save(self, path, extra=None):
        spec = {"config": self.config.to_dict(), "case_digest": self.case.digest(),
                "state_bounds": {"lo": self.state_bounds.lo.tolist(), "hi": self.state_bounds.hi.tolist()}}
        return save_checkpoint(path, "pinn", spec, flat_parameters(self.parameters()), extra)

    @classmethod
    def load(cls, path, case: GridCase) -> "PinnModel":
        doc = load_checkpoint(path, kind="pinn")
        spec = doc["spec"]
        if spec["case_digest"] != case.digest():
            raise ValueError(f"{path}: checkpoint was trained on a different case")
        cfg = spec["config"]
        config = PinnConfig(hidden=tuple(cfg["hidden"]), residual_blocks=cfg["residual_blocks"],
                            alpha=cfg["alpha"], input_skip=cfg["input_skip"], cascade=cfg["cascade"],
                            soc_squash=cfg.get("soc_squash", "logistic"), inputs=cfg.get("inputs", "full"),
                            seed=cfg["seed"])
        bounds = StateBounds(np.array(spec["state_bounds"]["lo"]), np.array(spec["state_bounds"]["hi"]))
        model = cls(case, config, bounds)
        set_flat_parameters(model.parameters(), doc["params"])
        return model


def _with_slack(pq_values: Tensor, case: GridCase, slack_value: float, batch: int) -> Tensor:
    """Insert a constant slack column so columns line up with bus indices."""
    k = case.slack_bus
    const = Tensor(np.full((batch, 1), slack_value))
    parts = []
    if k > 0:
        parts.append(pq_values[:, :k])
    parts.append(const)
    if k < case.n_bus - 1:
        parts.append(pq_values[:, k:])
    return concat(parts, axis=1)


def predict_next_state(model: PinnModel, s: StateVector, a: ActionVector) -> StateVector:
    out = model.predict_arrays(pack_state(s, model.case)[None], pack_action(a)[None])
    return unpack_state(out[0], model.case)


class _Physics:
    """Constant matrices shared by every loss evaluation on one case."""

    def __init__(self, case: GridCase):
        self.case = case
        Y = build_admittance(case)
        self.GT = Y.real.T.copy()
        self.BT = Y.imag.T.copy()
        n = case.n_bus
        self.gen_inc = np.zeros((len(case.generators), n))
        for k, d in enumerate(case.generators):
            self.gen_inc[k, d.bus] = 1.0
        self.des_inc = np.zeros((len(case.storage), n))
        for k, d in enumerate(case.storage):
            self.des_inc[k, d.bus] = 1.0
        self.load_inc = np.zeros((len(case.loads), n))
        for k, d in enumerate(case.loads):
            self.load_inc[k, d.bus] = 1.0
        pq = case.pq_buses
        self.pq = pq
        self.v_lo = np.array([case.buses[i].v_min for i in pq])
        self.v_hi = np.array([case.buses[i].v_max for i in pq])
        g, s = case.generators, case.storage
        self.box = {
            "gen_p": (np.array([d.p_min for d in g]), np.array([d.p_max for d in g])),
            "gen_q": (np.array([d.q_min for d in g]), np.array([d.q_max for d in g])),
            "des_p": (np.array([d.p_min for d in s]), np.array([d.p_max for d in s])),
            "des_q": (np.array([d.q_min for d in s]), np.array([d.q_max for d in s])),
            "des_soc": (np.zeros(len(s)), np.array([d.soc_max for d in s])),
        }
        self.n_checks = len(pq) + 2 * len(g) + 3 * len(s)


_PHYSICS_CACHE = {}


def _physics(case):
    key = id(case)
    if key not in _PHYSICS_CACHE or _PHYSICS_CACHE[key].case is not case:
        _PHYSICS_CACHE[key] = _Physics(case)
    return _PHYSICS_CACHE[key]


def _hinge_sq(x: Tensor, lo, hi) -> Tensor:
    return ((x - hi).relu().square() + (lo - x).relu().square()).sum()


def physics_terms(case: GridCase, states, actions, pred: dict, weights: PhysicsLossWeights):
    """Physics loss of predictions ``pred`` (dict of Tensors keyed like :meth:`PinnModel.predict_tensors`).

    Returns ``(total Tensor, LossBreakdown)``. Targets that depend only on the
    inputs (clamped setpoints, SOC update) are constants; voltages enter only
    through the power-flow mismatch and the voltage bounds.
    """
    ph = _physics(case)
    lay = case.layout
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    B = states.shape[0]
    soc_now = states[:, lay.state["des_soc"]]
    applied = clamp_actions(case, actions, soc_now)
    a = lay.action
    soc_target = soc_update(case, soc_now, applied[:, a["des_p_set"]])

    vm, va = pred["v_mag"], pred["v_ang"]
    vr, vi = vm * va.cos(), vm * va.sin()
    ir = vr @ ph.GT - vi @ ph.BT
    ii = vr @ ph.BT + vi @ ph.GT
    p_calc = vr * ir + vi * ii
    q_calc = vi * ir - vr * ii
    load_p = states[:, lay.state["load_p"]] @ ph.load_inc
    load_q = states[:, lay.state["load_q"]] @ ph.load_inc
    p_inj = pred["gen_p"] @ ph.gen_inc - pred["des_p"] @ ph.des_inc + load_p
    q_inj = pred["gen_q"] @ ph.gen_inc - pred["des_q"] @ ph.des_inc + load_q
    dp = (p_inj - p_calc)[:, ph.pq]
    dq = (q_inj - q_calc)[:, ph.pq]
    flow = (dp.square().sum() + dq.square().sum()) * (1.0 / (2 * B * len(ph.pq)))

    setpoint = concat([pred["gen_p"], pred["gen_q"], pred["des_p"], pred["des_q"]], axis=1)
    balance = (setpoint - applied).square().mean()

    limits = _hinge_sq(vm[:, ph.pq], ph.v_lo, ph.v_hi)
    for key, (lo, hi) in ph.box.items():
        limits = limits + _hinge_sq(pred[key], lo, hi)
    limits = limits * (1.0 / (B * ph.n_checks))

    soc = (pred["des_soc"] - soc_target).square().mean()

    total = weights.balance * balance + weights.flow * flow + weights.limits * limits + weights.soc * soc
    parts = LossBreakdown(balance=float(balance.data), flow=float(flow.data), limits=float(limits.data),
                          soc=float(soc.data), total=float(total.data))
    for name, value in parts.as_dict().items():
        if not np.isfinite(value):
            raise FloatingPointError(f"physics loss term {name!r} is not finite")
    return total, parts


def prediction_from_packed(case: GridCase, next_states) -> dict:
    """Wrap packed next states as constant prediction tensors (for scoring oracle outputs)."""
    next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
    st = case.layout.state
    va = np.zeros((next_states.shape[0], case.n_bus))
    va[:, case.pq_buses] = next_states[:, st["v_ang"]]
    out = {"v_mag": Tensor(next_states[:, st["v_mag"]]), "v_ang": Tensor(va)}
    for key in ("gen_p", "gen_q", "des_soc", "des_p", "des_q"):
        out[key] = Tensor(next_states[:, st[key]])
    return out


def physics_loss(model: PinnModel, states, actions, case: GridCase | None = None,
                 weights: PhysicsLossWeights = PhysicsLossWeights()):
    case = case or model.case
    return physics_terms(case, states, actions, model.predict_tensors(states, actions), weights)


@dataclass
class PinnTrainResult:
    model: PinnModel
    history: list
    steps: int
    stopped_early: bool
    initial_monitor: float
    final_monitor: float


def train_pinn(case: GridCase, weights: PhysicsLossWeights = PhysicsLossWeights(),
               train_cfg: TrainConfig = TrainConfig(), model_cfg: PinnConfig | None = None,
               state_bounds: StateBounds | None = None, monitor_size: int = 1024) -> PinnTrainResult:
    """Fit a :class:`PinnModel` from the physics loss alone.

    Step ``k`` scores Sobol points ``1 + k*batch .. (k+1)*batch``; early stopping
    and the plateau schedule watch the loss on a fixed Sobol batch taken far
    down the sequence. No dataset argument exists by design.
    """
    model_cfg = model_cfg or PinnConfig(seed=train_cfg.seed)
    model = PinnModel(case, model_cfg, state_bounds)
    params = model.parameters()
    bs = train_cfg.batch_size
    mon_s, mon_a = sobol_batch(case, monitor_size, MONITOR_SKIP, model.state_bounds)

    def monitor():
        with_no_tape = physics_loss(model, mon_s, mon_a, case, weights)[1]
        return with_no_tape.total

    initial = monitor()

    def loss_fn(step):
        s, a = sobol_batch(case, bs, 1 + step * bs, model.state_bounds)
        total, parts = physics_loss(model, s, a, case, weights)
        return total, parts.as_dict()

    result = run_training_loop(params, loss_fn, train_cfg, monitor_fn=monitor)
    final = monitor()
    log.info("pinn trained %d steps, monitor %.3e -> %.3e", result.steps, initial, final)
    return PinnTrainResult(model=model, history=result.history, steps=result.steps,
                           stopped_early=result.stopped_early, initial_monitor=initial, final_monitor=final)


FEASIBILITY_SKIP = 2**29


def feasible_mask(case: GridCase, next_states, tol: float = 1e-3) -> np.ndarray:
    """Rows of packed next states that respect every voltage and device limit within ``tol``."""
    ph = _physics(case)
    st = case.layout.state
    x = np.atleast_2d(next_states)
    vm = x[:, st["v_mag"]][:, ph.pq]
    ok = np.all((vm >= ph.v_lo - tol) & (vm <= ph.v_hi + tol), axis=1)
    for key, (lo, hi) in ph.box.items():
        v = x[:, st[key]]
        ok &= np.all((v >= lo - tol) & (v <= hi + tol), axis=1)
    return ok


def feasibility_rate(model: PinnModel, n: int = 10_000, tol: float = 1e-3, skip: int = FEASIBILITY_SKIP) -> float:
    """Share of predictions on fresh Sobol inputs that satisfy all limits."""
    s, a = sobol_batch(model.case, n, skip, model.state_bounds)
    return float(feasible_mask(model.case, model.predict_arrays(s, a), tol).mean())
