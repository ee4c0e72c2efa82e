import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhh import nets, systems
from dhh.systems import PhaseState, hamilton_rhs, hamiltonian_true, make_system

SPRING = make_system("mass_spring")
PENDULUM = make_system("pendulum")
TWO = make_system("2_body")
THREE = make_system("3_body")


def test_default_parameters():
    assert (SPRING.m, SPRING.k, SPRING.d) == (0.5, 2.0, 1)
    assert (PENDULUM.l, PENDULUM.m, PENDULUM.g) == (1.0, 0.5, 3.0)
    assert (TWO.G, TWO.masses, TWO.d) == (1.0, (1.0, 1.0), 4)
    assert THREE.d == 6


def test_hamiltonian_values():
    assert hamiltonian_true(SPRING, PhaseState([0.0], [0.0])) == 0.0
    assert hamiltonian_true(SPRING, PhaseState([1.0], [0.0])) == pytest.approx(1.0)
    assert hamiltonian_true(PENDULUM, PhaseState([np.pi / 2], [1.0])) == pytest.approx(4.0)
    s = PhaseState([0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 0.0])
    assert hamiltonian_true(TWO, s) == pytest.approx(-1.0)


def test_coincident_bodies_raise():
    with pytest.raises(systems.SingularityError):
        hamiltonian_true(TWO, PhaseState([0.5, 0.5, 0.5, 0.5], [0.0] * 4))


def test_rhs_values():
    H = systems.TrueHamiltonian(SPRING)
    np.testing.assert_allclose(hamilton_rhs(H, PhaseState([1.0], [0.0])).flat(), [0.0, -2.0])
    np.testing.assert_array_equal(hamilton_rhs(H, np.zeros(2)), [0.0, 0.0])
    np.testing.assert_allclose(hamilton_rhs(systems.TrueHamiltonian(PENDULUM), np.array([0.0, 1.0])), [2.0, 0.0])


def test_learned_rhs_uses_network_gradient(exact_spring_hamiltonian):
    H = systems.LearnedHamiltonian(*exact_spring_hamiltonian)
    np.testing.assert_allclose(hamilton_rhs(H, np.array([1.0, 0.0])), [0.0, -2.0])
    assert H(np.array([1.0, 0.0])) == pytest.approx(1.0)


@pytest.mark.parametrize("spec", [SPRING, PENDULUM, TWO, THREE], ids=lambda s: s.name)
def test_analytic_partials_match_finite_differences(spec):
    rng = np.random.default_rng(0)
    for _ in range(20):
        if spec.kind == "n_body":
            s = systems.sample_initial_state(spec, rng).flat() + rng.normal(scale=0.05, size=2 * spec.d)
        else:
            s = rng.uniform(-1.5, 1.5, size=2)
        g = systems.hamiltonian_gradient(spec, s)
        h = 1e-6
        fd = np.array([(hamiltonian_true(spec, s + h * e) - hamiltonian_true(spec, s - h * e)) / (2 * h)
                       for e in np.eye(s.size)])
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(shift=st.tuples(st.floats(-5, 5), st.floats(-5, 5)), seed=st.integers(0, 1000))
def test_n_body_energy_is_translation_invariant(shift, seed):
    s = systems.sample_initial_state(THREE, np.random.default_rng(seed)).flat()
    moved = s.copy()
    moved[:6] += np.tile(shift, 3)
    assert hamiltonian_true(THREE, moved) == pytest.approx(hamiltonian_true(THREE, s), abs=1e-12)


def test_energy_is_conserved_along_own_field():
    rng = np.random.default_rng(5)
    probes = rng.uniform(-2, 2, size=(1000, 2))
    for H in (systems.TrueHamiltonian(SPRING), systems.TrueHamiltonian(PENDULUM),
              systems.LearnedHamiltonian(*_random_net(2, 0))):
        assert np.max(np.abs(systems.energy_rate(H, probes))) < 1e-10
    probes6 = rng.uniform(-2, 2, size=(200, 12))
    assert np.max(np.abs(systems.energy_rate(systems.LearnedHamiltonian(*_random_net(12, 1)), probes6))) < 1e-10


def _random_net(width, seed):
    cfg = nets.MlpConfig(width, 1, (16, 16))
    return nets.init_params(cfg, seed), cfg


def test_annulus_sampling():
    rng = np.random.default_rng(0)
    for spec in (SPRING, PENDULUM):
        r = [np.linalg.norm(systems.sample_initial_state(spec, rng).flat()) for _ in range(1000)]
        assert 0.5 <= min(r) and max(r) <= 1.5


def test_n_body_sampling_has_zero_total_momentum():
    rng = np.random.default_rng(1)
    for spec in (TWO, THREE):
        for _ in range(20):
            s = systems.sample_initial_state(spec, rng)
            mom = s.p.reshape(-1, 2)
            np.testing.assert_allclose(mom.sum(0), 0.0, atol=1e-12)
            pos = s.q.reshape(-1, 2)
            np.testing.assert_allclose(pos.mean(0), 0.0, atol=1e-12)
            np.testing.assert_allclose(np.linalg.norm(pos, axis=1), 1.0)


def test_sampling_is_deterministic():
    a = systems.sample_initial_state(THREE, np.random.default_rng(9))
    b = systems.sample_initial_state(THREE, np.random.default_rng(9))
    assert np.array_equal(a.flat(), b.flat())


def test_phase_state_validation():
    with pytest.raises(ValueError):
        PhaseState([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        PhaseState([np.nan], [1.0])
