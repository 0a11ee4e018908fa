import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pinngrid.nn import (
    Dense,
    EarlyStopping,
    LeakyReLU,
    Mlp,
    MlpSpec,
    PlateauScheduler,
    ResidualBlock,
    Tape,
    Tensor,
    TrainConfig,
    TrainingDiverged,
    adamw_init,
    adamw_step,
    backward,
    concat,
    flat_parameters,
    forward,
    grads_for,
    run_training_loop,
    set_flat_parameters,
)
from pinngrid.nn.checkpoint import load_checkpoint, save_checkpoint


def fd_check(params, scalar_fn, probes=20, h=1e-5, seed=0, rtol=1e-4):
    """Compare tape gradients with central differences at random parameter entries."""
    with Tape() as tape:
        out = scalar_fn()
    grads = grads_for(params, backward(tape, out))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        k = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[k].data.shape)
        old = params[k].data[idx]
        params[k].data[idx] = old + h
        up = float(scalar_fn().data)
        params[k].data[idx] = old - h
        down = float(scalar_fn().data)
        params[k].data[idx] = old
        fd = (up - down) / (2 * h)
        g = grads[k][idx]
        worst = max(worst, abs(g - fd) / (abs(g) + 1e-8))
    assert worst < rtol, f"worst relative gradient error {worst:.2e}"
    return worst


def test_square_gradient_at_three():
    w = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        y = w.square()
    assert backward(tape, y)[id(w)] == 6.0


def test_leaky_relu_values_and_gradient():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        y = LeakyReLU(0.01)(x)
        total = y.sum()
    assert y.data[0] == pytest.approx(-0.01)
    g = backward(tape, total)[id(x)]
    assert g[0] == 0.01 and g[1] == 1.0


def test_zero_weight_dense_outputs_bias():
    d = Dense(3, 2)
    d.weight.data[:] = 0.0
    d.bias.data[:] = [0.5, -2.0]
    np.testing.assert_array_equal(d(np.ones((4, 3))).data, np.tile([0.5, -2.0], (4, 1)))


def test_residual_block_with_zero_inner_is_identity():
    blk = ResidualBlock(4, rng=np.random.default_rng(0))
    blk.inner.weight.data[:] = 0.0
    blk.inner.bias.data[:] = 0.0
    blk.outer.bias.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(3, 4))
    np.testing.assert_array_equal(blk(x).data, x)


@pytest.mark.parametrize("kind", ["dense", "residual", "mlp", "mlp-skip"])
def test_layer_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 4))
    if kind == "dense":
        layer = Dense(4, 3, rng)
    elif kind == "residual":
        layer = ResidualBlock(4, 0.01, rng)
    else:
        layer = Mlp(MlpSpec((4, 8, 8, 3), residual_blocks=1, input_skip=kind == "mlp-skip"), rng)
    if kind == "mlp-skip":
        layer.skip.weight.data[:] = rng.normal(size=layer.skip.weight.data.shape)
    params = layer.parameters()
    target = rng.normal(size=layer(x).shape)
    fd_check(params, lambda: (layer(x) - target).square().mean())


def test_elementwise_ops_match_finite_differences():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.uniform(0.5, 2.0, size=(3,)), requires_grad=True)

    def f():
        u = concat([a.sin() * b, a.cos() / b, (a * 0.7).sigmoid(), (a ** 3.0), a.clip(-0.5, 0.5)], axis=1)
        v = (u @ Tensor(np.ones((15, 2)))).relu() + u[:, 2:4].leaky_relu(0.1)
        return (v.square().sum(axis=0)).mean() - (1.0 - a).sum()

    fd_check([a, b], f)


def test_input_gradient_of_mlp():
    rng = np.random.default_rng(11)
    net = Mlp(MlpSpec((3, 6, 2), residual_blocks=1), rng)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    fd_check([x], lambda: net(x).square().sum())


def test_backward_argument_errors():
    w = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(ValueError):
        backward(tape, y)
    with pytest.raises(ValueError):
        backward(None, y.sum())
    with pytest.raises(ValueError):
        backward(tape, Tensor(1.0))


def test_non_finite_forward_raises():
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        Tensor(np.array([0.0]), requires_grad=True) ** -1.0


def test_forward_records_tape():
    net = Mlp(MlpSpec((2, 3, 1)))
    out, tape = forward(net, np.ones((1, 2)))
    assert tape.nodes and out.shape == (1, 1)


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec((3,))
    with pytest.raises(ValueError):
        MlpSpec((3, 2), alpha=1.5)
    with pytest.raises(ValueError):
        Dense(3, 2)(np.ones((1, 4)))


def test_adamw_first_step_is_minus_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    st_ = adamw_init([p], lr=1e-3)
    adamw_step([p], [np.array([1.0])], st_)
    assert p.data[0] == pytest.approx(1.0 - 1e-3, abs=1e-10)


def test_adamw_decay_only_shrinks_exactly():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    st_ = adamw_init([p], lr=1e-3, weight_decay=0.01)
    adamw_step([p], [np.zeros(2)], st_)
    np.testing.assert_array_equal(p.data, np.array([2.0, -4.0]) * (1.0 - 1e-3 * 0.01))


def test_adamw_shape_checks():
    p = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step([p], [np.zeros(3)], adamw_init([p]))
    with pytest.raises(ValueError):
        adamw_step([p], [], adamw_init([p]))


def _line_fit(seed=0, steps=3000):
    rng = np.random.default_rng(seed)
    net = Dense(1, 1, rng)
    x = np.linspace(-1, 1, 64)[:, None]
    y = 2.0 * x
    cfg = TrainConfig(max_steps=steps, lr=0.05, weight_decay=0.0, check_every=50, patience=1000, lr_patience=5)
    res = run_training_loop(net.parameters(), lambda step: (net(x) - y).square().mean(), cfg)
    return net, res, x, y


def test_training_fits_a_line():
    net, res, x, y = _line_fit()
    assert float(((net(x).data - y) ** 2).mean()) < 1e-6
    assert res.history[-1]["step"] == res.steps


def test_training_is_deterministic():
    a, _, _, _ = _line_fit(3, 200)
    b, _, _, _ = _line_fit(3, 200)
    assert np.array_equal(flat_parameters(a.parameters()), flat_parameters(b.parameters()))


def test_zero_loss_stops_after_patience():
    p = Tensor(np.array([1.0]), requires_grad=True)
    cfg = TrainConfig(max_steps=1000, check_every=10, patience=3, weight_decay=0.0)
    res = run_training_loop([p], lambda step: (p * 0.0).sum(), cfg)
    assert res.stopped_early and res.steps == 40
    assert p.data[0] == 1.0


def test_plateau_halves_learning_rate():
    st_ = adamw_init([], lr=1.0)
    sched = PlateauScheduler(factor=0.5, patience=3)
    changes = [sched.update(v, st_) for v in [1.0, 1.0, 1.0, 1.0]]
    assert changes == [False, False, False, True] and st_.lr == 0.5
    stop = EarlyStopping(patience=2)
    assert [stop.update(v) for v in (1.0, 0.5, 0.6, 0.7)] == [False, False, False, True]


def test_divergence_names_the_term():
    p = Tensor(np.array([1.0]), requires_grad=True)

    def loss(step):
        return Tensor(float("nan")), {"flow": float("nan"), "soc": 0.0}

    with pytest.raises(TrainingDiverged, match="flow"):
        run_training_loop([p], loss, TrainConfig(max_steps=5))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_factor=1.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_parameter_flatten_roundtrip(seed):
    net = Mlp(MlpSpec((3, 5, 2), input_skip=True), np.random.default_rng(seed))
    flat = flat_parameters(net.parameters())
    other = Mlp(MlpSpec((3, 5, 2), input_skip=True), np.random.default_rng(seed + 1))
    set_flat_parameters(other.parameters(), flat)
    x = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_array_equal(net(x).data, other(x).data)


def test_input_skip_starts_at_zero():
    net = Mlp(MlpSpec((3, 5, 2), input_skip=True))
    assert np.all(net.skip.weight.data == 0) and np.all(net.skip.bias.data == 0)


def test_checkpoint_validation(tmp_path):
    path = save_checkpoint(tmp_path / "c.json", "mlp", {"w": 1}, [0.1, 1 / 3])
    doc = load_checkpoint(path, kind="mlp")
    assert doc["params"] == [0.1, 1 / 3]
    with pytest.raises(ValueError, match="expected"):
        load_checkpoint(path, kind="pinn")
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.json")
