import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from bregmangrid import ControllerConfig, NetworkTopology, SolverError
from bregmangrid.errors import DomainError
from bregmangrid.power_flow import (
    active_power,
    active_power_elementwise,
    equilibrium_from_operating_point,
    injections,
    inverse_lossy_transform,
    lossy_transform,
    optimal_feedforward,
    reactive_power,
    reactive_power_incidence,
    solve_equilibria,
    solve_equilibrium,
    steady_active_target,
    tree_feasibility_margin,
)
from bregmangrid.topology import loopy_laplacian

from conftest import config_for, random_network


def reactive_loop(top, theta, V):
    """Q_i = B̂_ii V_i² + Σ_j B_ij (V_i² - V_i V_j cos θ_ij), summed edge by edge."""
    Q = top.shunt_susceptance * V**2
    for (i, j), b in zip(top.edge_nodes, top.edge_susceptance):
        c = math.cos(theta[i] - theta[j])
        Q[i] += b * (V[i] ** 2 - V[i] * V[j] * c)
        Q[j] += b * (V[j] ** 2 - V[i] * V[j] * c)
    return Q


def active_loop(top, theta, V):
    P = np.zeros(top.n)
    for i in range(top.n):
        for j in range(top.n):
            b = top.susceptance_matrix[i, j]
            if b:
                P[i] += b * V[i] * V[j] * math.sin(theta[i] - theta[j])
    return P


def test_uniform_angles_carry_no_active_power(ring3):
    V = np.array([0.9, 1.1, 1.3])
    assert np.allclose(active_power(ring3, np.full(3, 0.4), V), 0.0)


def test_two_node_active_power():
    top = NetworkTopology(2, [(0, 1, 1.0)], [0.1, 0.1])
    assert np.allclose(active_power(top, [math.pi / 6, 0.0], [1.0, 1.0]), [0.5, -0.5])


def test_shunt_only_reactive_power():
    top = NetworkTopology(1, [], [2.0])
    assert reactive_power(top, [0.0], [3.0]) == pytest.approx([18.0])


def test_two_node_reactive_power():
    top = NetworkTopology(2, [(0, 1, 1.0)], [0.0, 0.0], allow_zero_shunts=True)
    assert np.allclose(reactive_power(top, [math.pi / 3, 0.0], [1.0, 1.0]), [0.5, 0.5])


def test_random_instance_matches_loops():
    rng = np.random.default_rng(5)
    for _ in range(10):
        top = random_network(rng, n=5)
        theta = rng.uniform(-1, 1, 5)
        V = rng.uniform(0.7, 1.3, 5)
        assert np.allclose(active_power(top, theta, V, validate=True), active_loop(top, theta, V),
                           rtol=0, atol=1e-12)
        assert np.allclose(reactive_power(top, theta, V, validate=True), reactive_loop(top, theta, V),
                           rtol=0, atol=1e-12)
        assert np.allclose(reactive_power_incidence(top, theta, V), reactive_loop(top, theta, V),
                           rtol=0, atol=1e-12)
        P, Q = injections(top, theta, V)
        assert np.allclose(P, active_loop(top, theta, V), atol=1e-12)
        assert np.allclose(Q, reactive_loop(top, theta, V), atol=1e-12)
        assert abs(P.sum()) < 1e-10


def test_injections_reject_nonpositive_voltage(ring3):
    with pytest.raises(DomainError):
        active_power(ring3, np.zeros(3), [1.0, -1.0, 1.0])
    with pytest.raises(DomainError):
        reactive_power(ring3, np.zeros(3), [1.0, 0.0, 1.0])


def test_element_wise_form_is_independent(ring3):
    rng = np.random.default_rng(0)
    theta, V = rng.normal(size=3), rng.uniform(0.5, 1.5, 3)
    assert np.allclose(active_power_elementwise(ring3, theta, V), active_loop(ring3, theta, V))


# -- lossy rotation ----------------------------------------------------------------

def test_lossless_angle_is_identity():
    P, Q = np.array([0.3, -0.3]), np.array([0.1, 0.2])
    Pl, Ql = lossy_transform(P, Q, math.pi / 2)
    assert np.array_equal(Pl, P) and np.array_equal(Ql, Q)
    Pb, Qb = inverse_lossy_transform(P, Q, math.pi / 2)
    assert np.array_equal(Pb, P) and np.array_equal(Qb, Q)


def test_resistive_angle_swaps():
    P, Q = np.array([0.3, -0.3]), np.array([0.1, 0.2])
    Pl, Ql = lossy_transform(P, Q, 0.0)
    assert np.allclose(Pl, Q) and np.allclose(Ql, -P)
    Pb, Qb = inverse_lossy_transform(P, Q, 0.0)
    assert np.allclose(Pb, -Q) and np.allclose(Qb, P)


@pytest.mark.parametrize("phi", [0.3, math.pi / 4])
def test_rotation_round_trip(phi):
    rng = np.random.default_rng(1)
    P, Q = rng.normal(size=6), rng.normal(size=6)
    Pb, Qb = inverse_lossy_transform(*lossy_transform(P, Q, phi), phi)
    assert np.allclose(Pb, P, atol=1e-12) and np.allclose(Qb, Q, atol=1e-12)


@pytest.mark.parametrize("phi", [-0.1, 2.0])
def test_rotation_domain(phi):
    with pytest.raises(DomainError):
        lossy_transform(np.zeros(2), np.zeros(2), phi)


# -- feedforward --------------------------------------------------------------------

def test_balanced_setpoints_need_no_input():
    assert np.allclose(optimal_feedforward(np.ones(3), [0.5, -0.2, -0.3]), 0.0)


def test_feedforward_two_node():
    assert np.allclose(optimal_feedforward(np.eye(2), [2.0, 0.0]), [-1.0, -1.0])


def test_feedforward_matches_constrained_minimiser():
    scipy_opt = pytest.importorskip("scipy.optimize")
    K = np.array([1.0, 2.0, 4.0])
    P_star = np.array([1.0, 1.0, 1.0])
    # steady state needs u = K(P - P*) with 1ᵀP = 0 and u uniform; substituting
    # P = P* + K⁻¹u, the feasible set is {u : 1ᵀK⁻¹u = -1ᵀP*}.
    cons = [{"type": "eq", "fun": lambda u: np.sum(u / K) + P_star.sum()}]
    res = scipy_opt.minimize(lambda u: 0.5 * np.sum(u**2 / K), np.zeros(3), constraints=cons,
                             method="SLSQP", options={"ftol": 1e-14})
    assert np.allclose(optimal_feedforward(K, P_star), res.x, atol=1e-6)


def test_steady_target_is_balanced():
    rng = np.random.default_rng(2)
    K, P_star = rng.uniform(0.5, 2, 5), rng.normal(size=5)
    target = steady_active_target(K, P_star)
    assert abs(target.sum()) < 1e-12
    assert np.allclose(K * (target - P_star), optimal_feedforward(K, P_star))


# -- equilibrium solver ---------------------------------------------------------------

def check_substitution(top, cfg, eq, tol=1e-9):
    P, Q = active_power(top, eq.theta0, eq.V_bar), reactive_power(top, eq.theta0, eq.V_bar)
    assert np.allclose(P, eq.P_bar, atol=tol) and np.allclose(Q, eq.Q_bar, atol=tol)
    freq = cfg.K_P * (cfg.P_star - P) + eq.u_P_bar
    assert np.max(np.abs(freq)) < tol
    from bregmangrid.controllers import voltage_field
    assert np.max(np.abs(voltage_field(cfg, eq.V_bar, Q, eq.u_Q_bar))) < tol
    assert eq.omega0 == cfg.omega_star
    assert np.allclose(eq.xi_bar, eq.u_P_bar)


def test_zero_flow_equilibrium(ring3):
    Q_flat = reactive_power(ring3, np.zeros(3), np.ones(3))
    cfg = ControllerConfig.for_network(ring3, "ConventionalDroop", u_Q_bar=Q_flat + 1.0)
    eq = solve_equilibrium(ring3, cfg)
    assert np.allclose(eq.V_bar, 1.0, atol=1e-10)
    assert np.allclose(eq.edge_angles, 0.0, atol=1e-10)


def test_two_node_reactive_current(pair):
    cfg = ControllerConfig.for_network(pair, "ReactiveCurrent", P_star=[0.2, -0.2], u_Q_bar=0.5)
    eq = solve_equilibrium(pair, cfg)
    check_substitution(pair, cfg, eq)


def test_quadratic_droop_closed_form(ring3):
    cfg = config_for(ring3, "QuadraticDroop", K_Q=[0.5, 1.0, 2.0], u_Q_bar=[1.0, 1.1, 0.9])
    eq = solve_equilibrium(ring3, cfg)
    A = loopy_laplacian(ring3, np.cos(eq.edge_angles))
    V_closed = np.linalg.solve(np.eye(3) + np.diag(cfg.K_Q) @ A, cfg.u_Q_bar)
    assert np.allclose(eq.V_bar, V_closed, atol=1e-10)


@pytest.mark.parametrize("kind", ["ConventionalDroop", "QuadraticDroop", "ReactiveCurrent", "EArp"])
def test_solver_residuals_by_substitution(mesh4, kind):
    cfg = config_for(mesh4, kind)
    eq = solve_equilibrium(mesh4, cfg)
    check_substitution(mesh4, cfg, eq)
    assert eq.in_security_region


def test_earp_level_is_respected(mesh4):
    cfg = config_for(mesh4, "EArp", K_Q=[1.0, 0.5, 2.0, 1.0])
    eq = solve_equilibrium(mesh4, cfg, earp_level=0.1)
    assert np.sum(np.log(eq.V_bar) / cfg.K_Q) == pytest.approx(0.1, abs=1e-10)
    kq = cfg.K_Q * eq.Q_bar
    assert np.ptp(kq) < 1e-9


def test_earp_with_drifting_input_has_no_equilibrium(mesh4):
    cfg = config_for(mesh4, "EArp", u_Q_bar=[0.1, 0.0, 0.0, 0.0])
    with pytest.raises(SolverError, match="drift"):
        solve_equilibrium(mesh4, cfg)


def test_infeasible_setpoint_raises(pair):
    # quadratic droop keeps V below ū_Q, so |P| <= B V₁V₂ < 5 is unreachable
    cfg = ControllerConfig.for_network(pair, "QuadraticDroop", P_star=[5.0, -5.0])
    with pytest.raises(SolverError) as info:
        solve_equilibrium(pair, cfg, restarts=3)
    assert info.value.residual is not None


def test_restarts_report_distinct_equilibria(ring3):
    cfg = config_for(ring3, "ConventionalDroop")
    found = solve_equilibria(ring3, cfg, always_restart=True, restarts=5)
    assert len(found) >= 1
    for a in range(len(found)):
        for b in range(a + 1, len(found)):
            assert not np.allclose(found[a].V_bar, found[b].V_bar, atol=1e-7)


def test_security_region_uses_wrapped_angles(pair):
    cfg = ControllerConfig.for_network(pair, "ReactiveCurrent")
    _, eq = equilibrium_from_operating_point(pair, cfg, [0.3 + 4 * math.pi, 0.0], [1.0, 1.0])
    assert eq.in_security_region


def test_tree_margin_examples():
    top = NetworkTopology(2, [(0, 1, 1.0)], [0.1, 0.1])
    assert tree_feasibility_margin(top, np.ones(2), np.ones(2), np.zeros(2)) == 0.0
    assert tree_feasibility_margin(top, np.ones(2), np.ones(2), [0.5, -0.5]) == pytest.approx(0.5)


def test_tree_margin_rejects_meshed(ring3):
    with pytest.raises(DomainError):
        tree_feasibility_margin(ring3, np.ones(3), np.ones(3), np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_tree_margin_bounds_edge_angles(seed):
    rng = np.random.default_rng(seed)
    top = random_network(rng, n=int(rng.integers(2, 7)), extra=0)
    P_star = rng.normal(scale=0.3, size=top.n)
    cfg = ControllerConfig.for_network(top, "QuadraticDroop", P_star=P_star, K_Q=0.2)
    # past the voltage-collapse fold there is no equilibrium to measure
    try:
        eq = solve_equilibrium(top, cfg)
    except SolverError:
        assume(False)
    margin = tree_feasibility_margin(top, eq.V_bar, cfg.K_P, P_star)
    if margin < 1:
        assert eq.residual_frequency < 1e-9
        assert np.all(np.abs(np.sin(eq.edge_angles)) <= margin + 1e-9)


def test_operating_point_construction(ring3):
    for kind in ("ConventionalDroop", "QuadraticDroop", "ReactiveCurrent", "EArp"):
        cfg = config_for(ring3, kind)
        cfg2, eq = equilibrium_from_operating_point(ring3, cfg, [0.4, 0.1, 0.0], [1.0, 1.05, 0.95])
        check_substitution(ring3, cfg2, eq)
        assert np.allclose(eq.u_P_bar, 0.0, atol=1e-12)


def test_equilibrium_dict(ring3):
    eq = solve_equilibrium(ring3, config_for(ring3, "ReactiveCurrent"))
    d = eq.to_dict()
    assert set(d) >= {"theta0", "V_bar", "u_P_bar", "P_bar", "Q_bar", "residual_frequency"}
