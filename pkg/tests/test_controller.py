import json

import numpy as np
import pytest

from limitrain.controller import (
    HYDRAULIC_CONTROLLER,
    ControllerHyper,
    ControllerSpec,
    RolloutConfig,
    build_controller_structure,
    closed_loop_step,
    features,
    inverse_dynamics_control,
    inverse_dynamics_net,
    read_sidecar,
    rollout_loss,
    step_register,
    train_controller,
    widen,
    write_sidecar,
)
from limitrain.imitator import ImitatorSpec, construct_exact, init_imitator, linear_imitator
from limitrain.net import Layer, Mlp, NumericalError, init_mlp
from limitrain.plant import LinearDifferenceModel, StopLink


def test_inverse_example():
    model = LinearDifferenceModel(b=[0.0, 0.5], a=[-0.9])
    u = inverse_dynamics_control(model, 1.0, [0.0], [])
    assert u == 2.0
    assert step_register(model, [0.0], u)[0] == 1.0


def test_inverse_holds_equilibrium():
    model = LinearDifferenceModel(b=[0.0, 0.5, 0.2], a=[-0.6, 0.1])
    # static gain (b1 + b2) / (1 + a1 + a2) = 0.7 / 0.5; u* = 2 gives y* = 2.8
    u_eq, y_eq = 2.0, 2.8
    u = inverse_dynamics_control(model, y_eq, [y_eq, y_eq], [u_eq])
    assert u == pytest.approx(u_eq, abs=1e-14)


@pytest.mark.parametrize("b", [[0.0, 0.0, 1.0], [0.0], [1.0, 0.5]])
def test_inverse_needs_b1_and_strict_properness(b):
    with pytest.raises(ValueError):
        inverse_dynamics_control(LinearDifferenceModel(b=b, a=[-0.5]), 1.0, [0.0], [0.0])


def test_inverse_net_matches_law():
    rng = np.random.default_rng(0)
    model = LinearDifferenceModel(b=[0.0, 0.8, -0.3, 0.1], a=[-1.2, 0.5])
    spec = ControllerSpec(3, "delayed", (), ("identity",))
    net = inverse_dynamics_net(model)
    for _ in range(50):
        reg = rng.normal(size=spec.register_dim)
        r = rng.normal()
        law = inverse_dynamics_control(model, r, reg[:3], reg[3:])
        assert net(features(spec, reg, r))[0] == pytest.approx(law, abs=1e-12)


def test_inverse_closed_loop_tracks_exactly():
    model = LinearDifferenceModel(b=[0.0, 0.5, 0.25], a=[-0.5, 0.06])
    spec = ControllerSpec(2, "delayed", (), ("identity",))
    net = inverse_dynamics_net(model)
    reg = np.zeros(spec.register_dim)
    rng = np.random.default_rng(1)
    for r in rng.normal(size=200):
        _, reg = closed_loop_step(net, spec, model, r, reg)
        assert abs(reg[0] - r) <= 1e-12


def test_spec_dimensions():
    assert ControllerSpec(2, "delayed").input_dim == 4
    assert ControllerSpec(3, "tracking").input_dim == 4
    assert ControllerSpec(4, "state").input_dim == 4
    assert HYDRAULIC_CONTROLLER.dims() == [4, 24, 8, 1]
    assert HYDRAULIC_CONTROLLER.activations[1] == "leaky_relu"


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(n=0),
        dict(n=2, feedback="narx"),
        dict(n=2, hidden=(4,), activations=("identity",)),
        dict(n=2, hidden=(0,), activations=("relu", "identity")),
        dict(n=2, reg_index=2),
    ],
)
def test_spec_errors(kwargs):
    with pytest.raises(ValueError):
        ControllerSpec(**kwargs)


def test_structure_is_seeded():
    a = build_controller_structure(HYDRAULIC_CONTROLLER, seed=3)
    b = build_controller_structure(HYDRAULIC_CONTROLLER, seed=3)
    c = build_controller_structure(HYDRAULIC_CONTROLLER, seed=4)
    assert a.to_dict() == b.to_dict() != c.to_dict()
    assert a.dims == [4, 24, 8, 1]


def test_widen():
    spec = ControllerSpec(2, "delayed", (8, 6), ("relu", "relu", "identity"))
    assert widen(spec).hidden == (8, 12)
    bare = widen(ControllerSpec(2, "delayed", (), ("identity",)))
    assert bare.hidden == (2,) and len(bare.activations) == 2


def test_zero_controller_gives_zero_action():
    spec = ControllerSpec(2, "state", (5,), ("relu", "identity"))
    net = build_controller_structure(spec)
    for layer in net.layers:
        layer.weights[:] = 0.0
    plant = StopLink(dt=0.05)
    x = np.array([0.3, -0.2])
    for r in (0.0, 0.7, -2.0):
        u, nxt = closed_loop_step(net, spec, plant, r, x)
        assert u == 0.0
        assert np.array_equal(nxt, plant.step(x, 0.0))


def test_feature_width_errors():
    spec = ControllerSpec(2, "state")
    with pytest.raises(ValueError):
        features(spec, np.zeros(3), 0.0)
    wrong = init_mlp([3, 1], ["identity"], np.random.default_rng(0))
    with pytest.raises(ValueError):
        closed_loop_step(wrong, spec, StopLink(), 0.0, np.zeros(2))


def test_features_layouts():
    reg = np.array([1.0, 2.0, 3.0])
    assert features(ControllerSpec(3, "state", reg_index=1), reg, 0.5).tolist() == [1.0, 1.5, 3.0]
    assert features(ControllerSpec(3, "tracking"), reg, 0.5).tolist() == [1.0, 2.0, 3.0, 0.5]
    assert features(ControllerSpec(2, "delayed"), reg, 0.5).tolist() == [0.5, 1.0, 2.0, 3.0]


def test_eq2_preset_has_zero_loss_and_gradient():
    model = LinearDifferenceModel(b=[0.0, 0.5, 0.2], a=[-0.7, 0.1])
    spec = ControllerSpec(2, "delayed", (), ("identity",))
    imitator = linear_imitator(model).copy(frozen=True)
    ctrl = inverse_dynamics_net(model)
    rng = np.random.default_rng(0)
    s0, refs = RolloutConfig(horizon=20, batch=8, reference="random", r_low=-1, r_high=1, x0_low=[-1] * 3, x0_high=[1] * 3).sample(spec, rng)
    value, grads, _ = rollout_loss(ctrl, imitator, spec, s0, refs)
    assert value <= 1e-24
    assert max(float(np.max(np.abs(g))) for g in grads) <= 1e-12


def test_zero_horizon_rejected():
    spec = ControllerSpec(2, "state")
    ctrl = build_controller_structure(spec)
    imitator = construct_exact(StopLink()).copy(frozen=True)
    with pytest.raises(ValueError):
        rollout_loss(ctrl, imitator, spec, np.zeros((1, 2)), np.zeros((1, 0)))
    with pytest.raises(ValueError):
        RolloutConfig(horizon=0).validate(spec)


def _fd_check(ctrl, imitator, spec, s0, refs, loss, h=1e-6):
    _, grads, _ = rollout_loss(ctrl, imitator, spec, s0, refs, loss)
    worst = 0.0
    for p, g in zip(ctrl.params(), grads):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            up = rollout_loss(ctrl, imitator, spec, s0, refs, loss, grads=False)[0]
            p[idx] = orig - h
            down = rollout_loss(ctrl, imitator, spec, s0, refs, loss, grads=False)[0]
            p[idx] = orig
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-8)))
    return worst


def _smooth_imitator(n, rng):
    # leaky hidden layer keeps every path differentiable with nonzero slope
    net = init_mlp([n + 1, 6, n], ["leaky_relu", "identity"], rng, alpha=0.2)
    net.layers[1].weights *= 0.5
    return net.copy(frozen=True)


@pytest.mark.parametrize("horizon", [1, 5])
@pytest.mark.parametrize("feedback, loss", [("state", "output"), ("tracking", "state")])
def test_composed_gradient_matches_finite_differences(horizon, feedback, loss):
    rng = np.random.default_rng(horizon)
    worst = 0.0
    for _ in range(5):
        spec = ControllerSpec(2, feedback, (4,), ("leaky_relu", "identity"), alpha=0.1)
        ctrl = build_controller_structure(spec, seed=int(rng.integers(1000)))
        for layer in ctrl.layers:
            layer.biases = rng.normal(scale=0.2, size=layer.biases.shape)
        imitator = _smooth_imitator(2, rng)
        s0 = rng.normal(size=(3, 2))
        refs = rng.normal(size=(3, horizon))
        worst = max(worst, _fd_check(ctrl, imitator, spec, s0, refs, loss))
    assert worst <= 1e-5


@pytest.mark.parametrize("horizon", [1, 5])
def test_composed_gradient_delayed_layout(horizon):
    rng = np.random.default_rng(10 + horizon)
    spec = ControllerSpec(2, "delayed", (3,), ("leaky_relu", "identity"), alpha=0.1)
    ctrl = build_controller_structure(spec, seed=1)
    imitator = init_mlp([4, 5, 1], ["leaky_relu", "identity"], rng, alpha=0.2).copy(frozen=True)
    s0 = rng.normal(size=(2, 3))
    refs = rng.normal(size=(2, horizon))
    assert _fd_check(ctrl, imitator, spec, s0, refs, "output") <= 1e-5


def test_perturbing_a_weight_changes_the_loss():
    rng = np.random.default_rng(0)
    spec = ControllerSpec(2, "state", (4,), ("leaky_relu", "identity"))
    ctrl = build_controller_structure(spec, seed=2)
    imitator = construct_exact(StopLink(dt=0.05)).copy(frozen=True)
    s0, refs = rng.uniform(-0.5, 0.5, size=(4, 2)), np.full((4, 5), 0.3)
    before = rollout_loss(ctrl, imitator, spec, s0, refs, grads=False)[0]
    ctrl.layers[0].weights[0, 0] += 1e-3
    assert rollout_loss(ctrl, imitator, spec, s0, refs, grads=False)[0] != before


def test_training_keeps_imitator_bitwise_and_is_deterministic():
    spec = ControllerSpec(2, "state", (6,), ("leaky_relu", "identity"))
    imitator = construct_exact(StopLink(dt=0.05)).copy(frozen=True)
    snapshot = [p.copy() for p in imitator.params()]
    rollout = RolloutConfig(horizon=10, batch=4, r_low=-0.5, r_high=0.5)
    runs = []
    for _ in range(2):
        ctrl = build_controller_structure(spec, seed=1)
        history = train_controller(ctrl, imitator, spec, rollout, ControllerHyper(iterations=20, seed=3))
        runs.append((history, ctrl.to_dict()))
    assert runs[0] == runs[1]
    assert all(np.array_equal(a, b) for a, b in zip(snapshot, imitator.params()))


def test_unfrozen_imitator_rejected():
    spec = ControllerSpec(2, "state")
    imitator = init_imitator(ImitatorSpec(1, 1))
    with pytest.raises(ValueError):
        train_controller(build_controller_structure(spec), imitator, spec, RolloutConfig())


def test_divergence_aborts():
    spec = ControllerSpec(1, "state", (), ("identity",))
    ctrl = Mlp([Layer([[-1e150]], [0.0], "identity")])
    imitator = Mlp([Layer([[1.0, 1.0]], [0.0], "identity")]).copy(frozen=True)
    rollout = RolloutConfig(horizon=20, batch=1, x0_low=[1.0], x0_high=[1.0])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericalError):
            train_controller(ctrl, imitator, spec, rollout, ControllerHyper(iterations=2))


def test_linear_sanity_converges_to_inverse_law():
    model = LinearDifferenceModel(b=[0.0, 0.5], a=[-0.8])
    spec = ControllerSpec(1, "delayed", (), ("identity",))
    imitator = linear_imitator(model).copy(frozen=True)
    ctrl = build_controller_structure(spec, seed=0)
    rollout = RolloutConfig(horizon=5, batch=16, reference="random", r_low=-1, r_high=1, x0_low=[-1], x0_high=[1])
    train_controller(ctrl, imitator, spec, rollout, ControllerHyper(iterations=3000, lr=1e-2, lr_final=1e-4))
    law = inverse_dynamics_net(model)
    assert np.max(np.abs(ctrl.layers[0].weights - law.layers[0].weights)) <= 1e-2
    assert abs(ctrl.layers[0].biases[0]) <= 1e-2


def test_sidecar_round_trip(tmp_path):
    rollout = RolloutConfig(horizon=7, reference="sine", r_low=0.1, r_high=0.2, loss="state")
    write_sidecar(tmp_path / "c.meta.json", HYDRAULIC_CONTROLLER, rollout, seed=9)
    spec, back, extra = read_sidecar(tmp_path / "c.meta.json")
    assert spec == HYDRAULIC_CONTROLLER and back == rollout
    assert extra == {"kind": "controller", "seed": 9}
    json.load(open(tmp_path / "c.meta.json"))


@pytest.mark.parametrize("reference", ["constant", "random", "sine", "meander"])
def test_rollout_sampling_shapes_and_bounds(reference):
    spec = ControllerSpec(2, "delayed")
    cfg = RolloutConfig(horizon=12, batch=5, reference=reference, r_low=0.5, r_high=1.0, x0_low=[0, 0, 0], x0_high=[1, 1, 1])
    s0, refs = cfg.sample(spec, np.random.default_rng(0))
    assert s0.shape == (5, 3) and refs.shape == (5, 12)
    assert np.all((s0 >= 0) & (s0 <= 1))
    assert np.all(np.abs(refs) <= 1.0)
