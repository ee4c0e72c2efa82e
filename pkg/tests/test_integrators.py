import numpy as np
import pytest

from dhh import systems
from dhh.integrators import SCHEMES, STAGES, IntegrationError, RolloutSpec, rollout, step

SPRING = systems.make_system("mass_spring")
RHS = systems.vector_field(systems.TrueHamiltonian(SPRING))


def closed_form(t):
    return np.stack([np.cos(2 * t), -np.sin(2 * t)], axis=-1)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_field_keeps_state(scheme):
    s = np.array([0.3, -1.2])
    np.testing.assert_array_equal(step(scheme, lambda t, x: np.zeros_like(x), s, 0.0, 0.1), s)


def test_euler_single_step():
    np.testing.assert_allclose(step("euler", RHS, np.array([1.0, 0.0]), 0.0, 0.1), [1.0, -0.2])


def test_rk4_reaches_closed_form():
    traj = rollout("rk4", RHS, np.array([1.0, 0.0]), RolloutSpec(0.0, np.pi, 0.01, "rk4"))
    assert traj.times[-1] == np.pi
    assert abs(traj.states[-1, 0] - 1.0) < 1e-6


def test_single_step_rollout():
    s0 = np.array([1.0, 0.0])
    traj = rollout("euler", RHS, s0, RolloutSpec(0.0, 0.1, 0.1, "euler"))
    assert len(traj) == 2
    np.testing.assert_array_equal(traj.states[0], s0)


def test_rk4_energy_drift():
    traj = rollout("rk4", RHS, np.array([1.0, 0.0]), RolloutSpec(0.0, 10.0, 0.01, "rk4"))
    E = systems.hamiltonian_true(SPRING, traj.states)
    assert np.max(np.abs(E - E[0])) < 1e-6
    fine = rollout("rk4", RHS, np.array([1.0, 0.0]), RolloutSpec(0.0, 10.0, 1e-3, "rk4"))
    E = systems.hamiltonian_true(SPRING, fine.states)
    assert np.max(np.abs(E - E[0])) < 1e-6


def test_rk4_back_integration_returns_to_start():
    s0 = np.array([0.7, -0.4])
    fwd = rollout("rk4", RHS, s0, RolloutSpec(0.0, 5.0, 0.01, "rk4"))
    back = rollout("rk4", lambda t, s: -RHS(t, s), fwd.states[-1], RolloutSpec(0.0, 5.0, 0.01, "rk4"))
    np.testing.assert_allclose(back.states[-1], s0, atol=1e-6)


def convergence_ratios(scheme):
    errs = []
    for dt in (0.1, 0.05, 0.025):
        traj = rollout(scheme, RHS, np.array([1.0, 0.0]), RolloutSpec(0.0, 1.0, dt, scheme))
        errs.append(np.max(np.abs(traj.states - closed_form(traj.times))))
    return errs[0] / errs[1], errs[1] / errs[2]


@pytest.mark.parametrize("scheme,nominal", [("euler", 2.0), ("rk2", 4.0), ("rk4", 16.0)])
def test_convergence_order(scheme, nominal):
    for ratio in convergence_ratios(scheme):
        assert abs(ratio - nominal) / nominal < 0.25


@pytest.mark.parametrize("scheme", SCHEMES)
def test_rhs_call_count(scheme):
    calls = []

    def rhs(t, s):
        calls.append(t)
        return RHS(t, s)
    spec = RolloutSpec(0.0, 1.0, 0.1, scheme)
    rollout(scheme, rhs, np.array([1.0, 0.0]), spec)
    assert spec.n_steps == 10
    assert len(calls) == 10 * STAGES[scheme]


def test_non_finite_field_reports_time():
    def rhs(t, s):
        return s * (np.inf if t >= 0.3 else 1.0)
    with pytest.raises(IntegrationError) as info:
        rollout("euler", rhs, np.array([1.0]), RolloutSpec(0.0, 1.0, 0.1, "euler"))
    assert info.value.t == pytest.approx(0.3)


def test_rollout_spec_validation():
    with pytest.raises(ValueError):
        RolloutSpec(0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        RolloutSpec(1.0, 1.0, 0.1)
    assert RolloutSpec(0.0, 10.0, 1e-3).n_steps == 10000
    assert RolloutSpec(0.0, 1.0, 0.3).n_steps == 4
