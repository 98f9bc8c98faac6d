import numpy as np
import pytest

from bregmangrid import ConfigError, ControllerKind
from bregmangrid.config import GridState, check_laplacian
from bregmangrid.controllers import (
    dynamic_uq_field,
    frequency_field,
    secondary_field,
    voltage_field,
    voltage_field_jacobian,
)
from bregmangrid.errors import DomainError
from bregmangrid.power_flow import optimal_feedforward, reactive_power, solve_equilibrium

from conftest import config_for

KINDS = list(ControllerKind)


def test_conventional_droop_stationary_at_equilibrium_input(ring3):
    cfg = config_for(ring3, "ConventionalDroop", K_Q=[0.5, 1.0, 2.0])
    V, Q = np.array([1.0, 0.9, 1.1]), np.array([0.2, -0.1, 0.3])
    assert np.allclose(voltage_field(cfg, V, Q, cfg.K_Q * Q + V), 0.0)


def test_quadratic_droop_flat_point(ring3):
    cfg = config_for(ring3, "QuadraticDroop")
    assert np.allclose(voltage_field(cfg, np.ones(3), np.zeros(3), np.ones(3)), 0.0)


def test_earp_uniform_q(ring3):
    cfg = config_for(ring3, "EArp")
    V = np.array([1.0, 2.0, 0.5])
    u = np.array([0.1, -0.3, 0.2])
    assert np.allclose(voltage_field(cfg, V, np.full(3, 0.7), u), V * u)


def test_voltage_field_per_node(ring3):
    rng = np.random.default_rng(4)
    V, Q, u = rng.uniform(0.5, 1.5, 3), rng.normal(size=3), rng.normal(size=3)
    k = np.array([0.5, 1.0, 2.0])
    expected = {
        "ConventionalDroop": [-V[i] - k[i] * Q[i] + u[i] for i in range(3)],
        "QuadraticDroop": [-k[i] * Q[i] - V[i] * (V[i] - u[i]) for i in range(3)],
        "ReactiveCurrent": [-Q[i] / V[i] + u[i] for i in range(3)],
    }
    for kind, values in expected.items():
        cfg = config_for(ring3, kind, K_Q=k)
        assert np.allclose(voltage_field(cfg, V, Q, u), values)
    cfg = config_for(ring3, "EArp", K_Q=k)
    L = cfg.L_Q
    earp = [V[i] * (-k[i] * sum(L[i, j] * k[j] * Q[j] for j in range(3)) + u[i]) for i in range(3)]
    assert np.allclose(voltage_field(cfg, V, Q, u), earp)


@pytest.mark.parametrize("kind", KINDS)
def test_voltage_jacobian_finite_differences(ring3, kind):
    cfg = config_for(ring3, kind, K_Q=[0.5, 1.0, 2.0])
    rng = np.random.default_rng(6)
    V, Q, u = rng.uniform(0.5, 1.5, 3), rng.normal(size=3), rng.normal(size=3)
    dV, dQ = voltage_field_jacobian(cfg, V, Q, u)
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fdV = (voltage_field(cfg, V + e, Q, u) - voltage_field(cfg, V - e, Q, u)) / (2 * h)
        fdQ = (voltage_field(cfg, V, Q + e, u) - voltage_field(cfg, V, Q - e, u)) / (2 * h)
        assert np.allclose(dV[:, j], fdV, atol=1e-8)
        assert np.allclose(dQ[:, j], fdQ, atol=1e-8)


@pytest.mark.parametrize("kind", KINDS)
def test_voltage_field_rejects_nonpositive_v(ring3, kind):
    with pytest.raises(DomainError):
        voltage_field(config_for(ring3, kind), np.array([1.0, 0.0, 1.0]), np.zeros(3), np.zeros(3))


def test_frequency_field_balance(ring3):
    cfg = config_for(ring3, "ConventionalDroop", K_P=[1.0, 2.0, 4.0], omega_star=0.3)
    w = np.full(3, 0.3)
    assert np.allclose(frequency_field(cfg, w, cfg.P_star, np.zeros(3)), 0.0)
    u = np.array([0.2, -0.1, 0.4])
    assert np.allclose(frequency_field(cfg, w, cfg.P_star + u / cfg.K_P, u), 0.0)


def test_frequency_field_per_node(ring3):
    cfg = config_for(ring3, "ConventionalDroop", K_P=[1.0, 2.0, 4.0], omega_star=0.1)
    rng = np.random.default_rng(7)
    w, P, u = rng.normal(size=3), rng.normal(size=3), rng.normal(size=3)
    expected = [-(w[i] - 0.1) - cfg.K_P[i] * (P[i] - cfg.P_star[i]) + u[i] for i in range(3)]
    assert np.allclose(frequency_field(cfg, w, P, u), expected)


def test_secondary_field_steady_states(ring3):
    cfg = config_for(ring3, "ConventionalDroop", omega_star=0.2)
    w = np.full(3, 0.2)
    dxi, u = secondary_field(cfg, np.full(3, -0.7), w)
    assert np.allclose(dxi, 0.0) and np.allclose(u, -0.7)
    u_bar = optimal_feedforward(cfg.K_P, cfg.P_star)
    assert np.allclose(secondary_field(cfg, u_bar, w)[0], 0.0)


def test_secondary_field_sum(ring3):
    cfg = config_for(ring3, "ConventionalDroop", K_P=[1.0, 2.0, 4.0], omega_star=0.2)
    rng = np.random.default_rng(8)
    xi, w = rng.normal(size=3), rng.normal(size=3)
    dxi, _ = secondary_field(cfg, xi, w)
    assert dxi.sum() == pytest.approx(np.sum((0.2 - w) / cfg.K_P))


@pytest.mark.parametrize("kind", KINDS)
def test_dynamic_uq_vanishes_at_equilibrium(ring3, kind):
    cfg = config_for(ring3, kind, use_dynamic_uq=True)
    eq = solve_equilibrium(ring3, cfg)
    dlam, u = dynamic_uq_field(ring3, cfg, eq, eq.theta0, eq.V_bar, eq.lambda_bar(cfg))
    assert np.allclose(dlam, 0.0, atol=1e-10)
    assert np.allclose(u, eq.u_Q_bar)


def test_dynamic_uq_reduced_form(ring3):
    cfg = config_for(ring3, "ConventionalDroop", K_Q=[0.5, 1.0, 2.0], T_Q=[1.0, 2.0, 0.5],
                     use_dynamic_uq=True)
    eq = solve_equilibrium(ring3, cfg)
    rng = np.random.default_rng(9)
    for _ in range(5):
        theta = eq.theta0 + rng.normal(scale=0.1, size=3)
        V = eq.V_bar * rng.uniform(0.9, 1.1, 3)
        dlam, _ = dynamic_uq_field(ring3, cfg, eq, theta, V, np.zeros(3))
        Q = reactive_power(ring3, theta, V)
        du_reduced = -(cfg.K_Q * (Q - eq.Q_bar) + V - eq.V_bar) / V / cfg.T_Q
        assert np.allclose(cfg.K_lambda * dlam, du_reduced, atol=1e-12)


def test_config_validation(ring3):
    with pytest.raises(ConfigError):
        config_for(ring3, "EArp", T_Q=2.0)
    with pytest.raises(ConfigError):
        config_for(ring3, "ConventionalDroop", K_P=[1.0, -1.0, 1.0])
    with pytest.raises(ConfigError):
        config_for(ring3, "ConventionalDroop", phi_loss=2.0)
    with pytest.raises(ConfigError):
        config_for(ring3, "nonsense")
    with pytest.raises(ConfigError):
        config_for(ring3, "ConventionalDroop", K_Q=np.ones((3, 3)))
    assert config_for(ring3, "ConventionalDroop", K_Q=np.diag([1.0, 2.0, 3.0])).K_Q.tolist() == [1, 2, 3]


def test_laplacian_validation():
    with pytest.raises(ConfigError):
        check_laplacian(np.eye(3), 3)
    with pytest.raises(ConfigError):
        check_laplacian(np.zeros((3, 3)), 3)
    L = np.array([[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    with pytest.raises(ConfigError):
        check_laplacian(L, 3)


def test_config_is_immutable(ring3):
    cfg = config_for(ring3, "ConventionalDroop")
    with pytest.raises(Exception):
        cfg.K_P = np.ones(3)
    with pytest.raises(ValueError):
        cfg.K_P[0] = 3.0
    assert cfg.replace(omega_star=1.0).omega_star == 1.0


def test_grid_state_vector_round_trip():
    s = GridState(np.arange(3.0), np.ones(3), np.full(3, 2.0), np.zeros(3), np.ones(3) * 5)
    again = GridState.from_vector(s.to_vector(), 3)
    assert np.array_equal(again.to_vector(), s.to_vector())


def test_kind_parse_case_insensitive():
    assert ControllerKind.parse("earp") is ControllerKind.EARP
