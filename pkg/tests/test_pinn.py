import json
from pathlib import Path

import numpy as np
import pytest

from pinngrid.grid import load_case, unpack_action, unpack_state
from pinngrid.nn import TrainConfig, flat_parameters
from pinngrid.pinn import (
    PhysicsLossWeights,
    PinnConfig,
    PinnModel,
    feasible_mask,
    feature_indices,
    physics_loss,
    physics_terms,
    predict_next_state,
    prediction_from_packed,
    sobol_batch,
    train_pinn,
)
from pinngrid.powerflow import transition_arrays

from conftest import random_state_action
from test_nn import fd_check


def oracle_pairs(case, n, seed=0):
    rng = np.random.default_rng(seed)
    S, A = random_state_action(case, rng, n)
    N = np.array([transition_arrays(case, s, a)[0] for s, a in zip(S, A)])
    return S, A, N


def test_output_dimension_and_load_passthrough(case):
    model = PinnModel(case)
    S, A = sobol_batch(case, 32)
    out = model.predict_arrays(S, A)
    lay = case.layout
    assert out.shape == (32, lay.state_dim)
    np.testing.assert_array_equal(out[:, lay.target_dim:], S[:, lay.target_dim:])
    np.testing.assert_array_equal(out[:, 0], 1.0)


@pytest.mark.parametrize("squash", ["logistic", "hard"])
def test_untrained_soc_within_bounds(case, squash):
    model = PinnModel(case, PinnConfig(soc_squash=squash, seed=3))
    for p in model.storage_net.parameters():
        p.data *= 50.0
    rng = np.random.default_rng(0)
    S, A = random_state_action(case, rng, 10_000)
    soc = model.predict_arrays(S, A)[:, case.layout.state["des_soc"]]
    assert soc.min() >= 0.0 and soc.max() <= case.storage[0].soc_max


def test_config_validation():
    with pytest.raises(ValueError):
        PinnConfig(soc_squash="tanh")
    with pytest.raises(ValueError):
        PinnConfig(inputs="some")
    with pytest.raises(ValueError):
        PhysicsLossWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        PhysicsLossWeights(-1, 1, 1, 1)


def test_physics_inputs_exclude_previous_outputs(case):
    idx = feature_indices(case, "physics")
    lay = case.layout
    st = lay.state
    assert len(idx) == 1 + 3 + 3 + lay.action_dim
    assert not set(idx) & set(range(st["v_mag"].start, st["des_soc"].start))
    model = PinnModel(case, PinnConfig(inputs="physics"))
    S, A = sobol_batch(case, 16)
    S2 = S.copy()
    S2[:, :st["des_soc"].start] = 0.0
    np.testing.assert_array_equal(model.predict_arrays(S, A), model.predict_arrays(S2, A))


def test_oracle_predictions_have_zero_physics_residual(case):
    S, A, N = oracle_pairs(case, 1000)
    _, parts = physics_terms(case, S, A, prediction_from_packed(case, N), PhysicsLossWeights())
    assert parts.balance < 1e-10
    assert parts.soc < 1e-10
    assert parts.flow < 1e-10
    ok = feasible_mask(case, N, tol=0.0)
    _, feas = physics_terms(case, S[ok], A[ok], prediction_from_packed(case, N[ok]), PhysicsLossWeights())
    assert ok.sum() > 100 and feas.limits == 0.0


def test_limit_violation_scaled_by_check_count(case):
    S, A, N = oracle_pairs(case, 200, seed=1)
    ok = np.flatnonzero(feasible_mask(case, N, tol=0.0))
    s, a, n = S[ok[:1]], A[ok[:1]], N[ok[:1]].copy()
    delta = 0.01
    k = case.layout.state["gen_p"].start
    n[0, k] = case.generators[0].p_max + delta
    _, parts = physics_terms(case, s, a, prediction_from_packed(case, n), PhysicsLossWeights())
    n_checks = len(case.pq_buses) + 2 * len(case.generators) + 3 * len(case.storage)
    assert parts.limits == pytest.approx(delta ** 2 / n_checks, rel=1e-12)


def test_only_limit_weight_on_feasible_prediction_is_zero(case):
    S, A, N = oracle_pairs(case, 100, seed=2)
    ok = feasible_mask(case, N, tol=0.0)
    _, parts = physics_terms(case, S[ok], A[ok], prediction_from_packed(case, N[ok]),
                             PhysicsLossWeights(0.0, 0.0, 1.0, 0.0))
    assert parts.total == 0.0


def test_physics_loss_gradient_matches_finite_differences(case):
    model = PinnModel(case, PinnConfig(hidden=(16, 16), seed=5))
    for p in model.parameters():
        p.data += 0.05 * np.random.default_rng(1).normal(size=p.data.shape)
    S, A = sobol_batch(case, 32, skip=100)
    fd_check(model.parameters(), lambda: physics_loss(model, S, A)[0], probes=20, seed=4)


def test_zero_steps_returns_initialisation(case):
    res = train_pinn(case, train_cfg=TrainConfig(max_steps=0))
    fresh = PinnModel(case, PinnConfig())
    assert np.array_equal(flat_parameters(res.model.parameters()), flat_parameters(fresh.parameters()))
    assert res.steps == 0 and res.history == []


def test_training_is_seed_deterministic(case):
    cfg = TrainConfig(max_steps=30, batch_size=32, check_every=10)
    a = train_pinn(case, train_cfg=cfg, model_cfg=PinnConfig(hidden=(16,), seed=1))
    b = train_pinn(case, train_cfg=cfg, model_cfg=PinnConfig(hidden=(16,), seed=1))
    assert np.array_equal(flat_parameters(a.model.parameters()), flat_parameters(b.model.parameters()))
    assert a.final_monitor < a.initial_monitor
    assert {"balance", "flow", "limits", "soc", "total", "lr", "monitor"} <= set(a.history[-1])


def test_checkpoint_roundtrip_and_case_guard(case, tmp_path):
    model = PinnModel(case, PinnConfig(hidden=(8, 8), cascade=True, soc_squash="hard", inputs="physics", seed=2))
    path = model.save(tmp_path / "p.json")
    again = PinnModel.load(path, case)
    S, A = sobol_batch(case, 64)
    assert np.array_equal(model.predict_arrays(S, A), again.predict_arrays(S, A))
    doc = case.to_dict()
    doc["branches"][0]["x"] *= 2
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="different case"):
        PinnModel.load(path, load_case(other))


def test_shape_mismatch_rejected(case):
    model = PinnModel(case)
    with pytest.raises(ValueError):
        model.predict_arrays(np.zeros((2, 23)), np.zeros((2, 6)))


def _trained(study):
    cfg, _ = study
    case = cfg.load_case()
    path = Path(cfg.out) / "models" / "pinn.json"
    return case, PinnModel.load(path, case), json.loads(path.read_text())["extra"]


def test_trained_monitor_below_one_percent_of_initial(study):
    _, _, extra = _trained(study)
    assert extra["final_monitor"] < 0.01 * extra["initial_monitor"]


def test_trained_flat_state_predicts_unit_voltage(study):
    case, model, _ = _trained(study)
    s = np.zeros(case.layout.state_dim)
    s[case.layout.state["v_mag"]] = 1.0
    nxt = predict_next_state(model, unpack_state(s, case), unpack_action(np.zeros(6), case))
    assert np.max(np.abs(nxt.v_mag - 1.0)) < 0.01
    assert nxt.load_p.tolist() == [0.0] * len(case.loads)


def test_trained_model_tracks_oracle(study):
    case, model, _ = _trained(study)
    S, A, N = oracle_pairs(case, 300, seed=9)
    err = model.predict_arrays(S, A)[:, :case.layout.target_dim] - N[:, :case.layout.target_dim]
    assert np.sqrt(np.mean(err ** 2)) < 5e-3
