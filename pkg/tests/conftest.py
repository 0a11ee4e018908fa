import numpy as np
import pytest

from pinngrid.grid import BranchSpec, BusSpec, DeviceSpec, GridCase, load_default_case


@pytest.fixture(scope="session")
def case():
    return load_default_case()


def two_bus(r=0.0, x=0.1, b_sh=0.0, load_p=0.5, load_q=0.0, storage=False):
    """Slack plus one PQ bus carrying a load (and optionally a storage unit)."""
    buses = [BusSpec(0, 33.0, 0.5, 1.5, is_slack=True), BusSpec(1, 33.0, 0.5, 1.5)]
    devices = [DeviceSpec(0, 0, "slack", -10, 10, -10, 10),
               DeviceSpec(1, 1, "load", -max(load_p, 1e-3), 0.0, -max(load_q, 1e-3), 0.0)]
    if storage:
        devices.append(DeviceSpec(2, 1, "storage", -1.0, 1.0, -1.0, 1.0, soc_max=1.0,
                                  eff_charge=0.9, eff_discharge=0.9))
    return GridCase(100.0, buses, [BranchSpec(0, 1, r, x, b_sh)], devices, dt=0.25, name="two-bus")


def bisect_two_bus(p_inj, q_inj, r=0.0, x=0.1, lo=0.3, hi=1.5, iters=200):
    """Independent oracle: high-voltage root of the scalar 2-bus equation.

    With V1 = 1 and series admittance y, the injection at bus 2 gives
    V2 = m^2 - w with w = S2 / conj(y), so m = |m^2 - w| fixes m = |V2|.
    """
    y = 1.0 / complex(r, x)
    w = complex(p_inj, q_inj) / np.conj(y)

    def f(m):
        return abs(m * m - w) - m

    assert f(hi) > 0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            hi = mid
        else:
            lo = mid
    m = 0.5 * (lo + hi)
    return m, float(np.angle(m * m - w))


def random_state_action(case, rng, n):
    from pinngrid.grid import default_state_bounds
    b = default_state_bounds(case)
    lo, hi = case.action_bounds
    S = b.lo + rng.random((n, len(b.lo))) * (b.hi - b.lo)
    A = lo + rng.random((n, len(lo))) * (hi - lo)
    return S, A


def small_config(out, seed=0, **overrides):
    """A run small enough for end-to-end plumbing tests (seconds, not minutes)."""
    from pinngrid.baselines import ForestConfig, GbtConfig
    from pinngrid.nn import TrainConfig
    from pinngrid.pipeline import DataSizes, RunConfig
    kw = dict(out=str(out), seed=seed,
              data=DataSizes(generative=400, per_bin=60, episodes=5, horizon=24),
              forest=ForestConfig(trees=4, max_depth=5, feature_frac=0.7),
              gbt=GbtConfig(rounds=4, shrinkage=0.3, max_depth=3),
              train=TrainConfig(max_steps=60, batch_size=64, lr=2e-3, check_every=20, patience=5))
    kw.update(overrides)
    return RunConfig(**kw)


@pytest.fixture(scope="session")
def study(tmp_path_factory):
    """The default-size study, run once per session: ``(config, StudyResult)``."""
    from pinngrid.pipeline import RunConfig, cmd_reproduce
    cfg = RunConfig(out=str(tmp_path_factory.mktemp("study")))
    return cfg, cmd_reproduce(cfg, save_models=True)


CRITERIA = {
    1: "power-flow oracle",
    2: "autodiff vs finite differences",
    3: "Sobol reference sequence",
    4: "physics loss zero on oracle transitions",
    5: "interpolation ordering",
    6: "cross-validation pattern",
    7: "episodic stability",
    8: "PINN feasibility",
    9: "reproduce determinism",
    10: "data-free PINN training",
}
_VERDICTS = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one sub-check of acceptance criterion ``n``."""
    def record(n, ok, detail=""):
        ok = bool(ok)
        prev_ok, prev_detail = _VERDICTS.get(n, (True, []))
        _VERDICTS[n] = (prev_ok and ok, prev_detail + [f"{'ok' if ok else 'MISS'}: {detail}"])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in _VERDICTS:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {title}")
            continue
        ok, details = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{'; '.join(details)}]")
