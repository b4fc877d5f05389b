import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from limitrain.baseline import (
    LqrController,
    LqrError,
    LtiStateSpace,
    export_gain,
    linearize_hydraulic,
    load_gain,
    riccati_map,
    scaled,
    solve_lqr,
)
from limitrain.plant import HydraulicDrive, HydraulicParams

SCALE = np.array([0.3, 2.0e7, 50.0, 1.0])


def test_golden_ratio():
    sol = solve_lqr(LtiStateSpace([[1.0]], [[1.0]], 1.0), [[1.0]], [[1.0]])
    golden = (1.0 + math.sqrt(5.0)) / 2.0
    assert sol.P[0, 0] == pytest.approx(golden, abs=1e-9)
    # K = P / (1 + P) = 1 / golden
    assert sol.K[0, 0] == pytest.approx(1.0 / golden, abs=1e-9)


def test_no_actuation_gives_zero_gain():
    sol = solve_lqr(LtiStateSpace([[0.5]], [[0.0]], 1.0))
    assert sol.K[0, 0] == 0.0
    # P = 1 / (1 - 0.25)
    assert sol.P[0, 0] == pytest.approx(4.0 / 3.0, abs=1e-10)


@pytest.mark.parametrize("R", [[[0.0]], [[-1.0]]])
def test_r_must_be_positive(R):
    with pytest.raises(ValueError):
        solve_lqr(LtiStateSpace([[1.0]], [[1.0]], 1.0), R=R)


def test_q_must_be_psd():
    with pytest.raises(ValueError):
        solve_lqr(LtiStateSpace(np.eye(2), np.ones(2), 1.0), Q=np.diag([1.0, -1.0]))


def test_unstabilizable_system_fails():
    with pytest.raises(LqrError):
        solve_lqr(LtiStateSpace([[2.0]], [[0.0]], 1.0), max_iter=5000)


def test_shape_errors():
    with pytest.raises(ValueError):
        LtiStateSpace(np.eye(2), np.ones(3), 1.0)
    with pytest.raises(ValueError):
        solve_lqr(LtiStateSpace(np.eye(2), np.ones(2), 1.0), Q=np.eye(3))


@pytest.fixture(scope="module")
def hydraulic_lqr():
    sys = linearize_hydraulic()
    sol = solve_lqr(scaled(sys, SCALE))
    return sys, sol, sol.K / SCALE[None, :]


def test_hydraulic_riccati_residual(hydraulic_lqr):
    _, sol, _ = hydraulic_lqr
    assert sol.residual <= 1e-8
    assert np.max(np.abs(sol.P - sol.P.T)) <= 1e-12
    assert np.all(np.linalg.eigvalsh(sol.P) >= 0.0)


def test_hydraulic_closed_loop_contracts(hydraulic_lqr):
    sys, _, K = hydraulic_lqr
    acl = sys.A - sys.B @ K
    assert np.max(np.abs(np.linalg.eigvals(acl))) < 1.0
    x0 = np.array([0.0, 0.0, 50.0, 1.0])
    x = x0.copy()
    for _ in range(3000):
        x = acl @ x
    z = x / SCALE
    assert np.linalg.norm(z) <= 1e-6 * np.linalg.norm(x0 / SCALE)


def test_lyapunov_value_decreases(hydraulic_lqr):
    sys, sol, K = hydraulic_lqr
    ctrl = LqrController(K, reg_index=3)
    x = np.array([0.0, 0.0, 50.0, 1.0])
    values = []
    for _ in range(400):
        z = x / SCALE
        values.append(float(z @ sol.P @ z))
        x = sys.step(x, ctrl(x))
    assert all(b < a for a, b in zip(values, values[1:]) if a > 1e-20)


def test_linearization_matches_unbounded_plant():
    params = HydraulicParams(D1=1e30, D2=1e300)
    drive = HydraulicDrive(params)
    sys = linearize_hydraulic(params)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.normal(size=4) * SCALE
        u = rng.normal()
        ref = sys.step(x, u)
        assert np.all(np.abs(drive.step(x, u) - ref) <= 1e-12 * np.maximum(np.abs(ref), SCALE))


def test_scaling_is_a_similarity():
    sys = linearize_hydraulic()
    z_sys = scaled(sys, SCALE)
    x = np.array([0.1, 1e6, -3.0, 0.2])
    assert np.allclose(z_sys.step(x / SCALE, 0.4), sys.step(x, 0.4) / SCALE, rtol=1e-12, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.1, 2.0), st.floats(0.1, 10.0), st.floats(0.1, 10.0))
def test_scalar_riccati_fixed_point(a, b, q, r):
    sys = LtiStateSpace([[a]], [[b]], 1.0)
    sol = solve_lqr(sys, [[q]], [[r]])
    assert sol.residual <= 1e-8 * max(1.0, sol.P[0, 0])
    assert sol.P[0, 0] >= q - 1e-12
    assert abs(a - b * sol.K[0, 0]) < 1.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_cost_to_go_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(scale=0.6, size=(3, 3))
    B = rng.normal(size=(3, 1))
    sol = solve_lqr(LtiStateSpace(A, B, 0.1))
    np.testing.assert_allclose(sol.P, riccati_map(LtiStateSpace(A, B, 0.1), np.eye(3), np.eye(1), sol.P), atol=1e-8 * np.abs(sol.P).max())
    for x in rng.normal(size=(10, 3)):
        assert x @ sol.P @ x >= 0.0


def test_gain_export_round_trip(tmp_path, hydraulic_lqr):
    _, sol, _ = hydraulic_lqr
    export_gain(sol, tmp_path / "k.csv", tmp_path / "k.json")
    assert np.array_equal(load_gain(tmp_path / "k.csv"), sol.K)
    assert open(tmp_path / "k.csv").readline().strip() == "k0,k1,k2,k3"


def test_controller_reference_offset():
    ctrl = LqrController([[1.0, 2.0]], reg_index=1)
    assert ctrl(np.array([0.0, 3.0]), r=3.0) == 0.0
    assert ctrl(np.array([1.0, 0.0])) == -1.0
