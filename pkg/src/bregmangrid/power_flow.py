"""Active/reactive power injections, the lossy-line rotation, optimal feedforward
input and the synchronous-equilibrium solver."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import LOSSLESS, ControllerKind
from .controllers import voltage_field, voltage_field_jacobian
from .errors import DomainError, SolverError, require_positive
from .topology import edge_gamma, from_phi, loopy_laplacian, to_phi, wrap_angle

log = logging.getLogger(__name__)

AGREEMENT_TOL = 1e-10


# -- injections -----------------------------------------------------------------

def active_power(topology, theta, V, *, validate=False):
    """P = D Γ(V) sin(Dᵀθ).

    With ``validate`` the element-wise sum Σ_j B_ij V_i V_j sin θ_ij is
    evaluated too and an AssertionError raised on disagreement.
    """
    V = require_positive(V)
    theta = np.asarray(theta, dtype=float)
    P = topology.incidence @ (edge_gamma(topology, V) * np.sin(topology.incidence.T @ theta))
    if validate:
        other = active_power_elementwise(topology, theta, V)
        assert np.max(np.abs(P - other), initial=0.0) <= AGREEMENT_TOL, "active power forms disagree"
    return P


def active_power_elementwise(topology, theta, V):
    """P_i = Σ_{j∈N_i} B_ij V_i V_j sin(θ_i - θ_j)."""
    V = require_positive(V)
    theta = np.asarray(theta, dtype=float)
    B = topology.susceptance_matrix
    diff = theta[:, None] - theta[None, :]
    return np.sum(B * np.outer(V, V) * np.sin(diff), axis=1)


def reactive_power(topology, theta, V, *, validate=False):
    """Q = [V] 𝒜(cos(Dᵀθ)) V.

    With ``validate`` the incidence form [V][A₀]V - |D|Γ(V)cos(Dᵀθ) is
    evaluated too and must agree.
    """
    V = require_positive(V)
    theta = np.asarray(theta, dtype=float)
    c = np.cos(topology.incidence.T @ theta)
    Q = V * (loopy_laplacian(topology, c) @ V)
    if validate:
        other = reactive_power_incidence(topology, theta, V)
        assert np.max(np.abs(Q - other), initial=0.0) <= AGREEMENT_TOL, "reactive power forms disagree"
    return Q


def reactive_power_incidence(topology, theta, V):
    V = require_positive(V)
    theta = np.asarray(theta, dtype=float)
    c = np.cos(topology.incidence.T @ theta)
    return topology.diag_term * V**2 - topology.abs_incidence @ (edge_gamma(topology, V) * c)


def injections(topology, theta, V):
    """(P, Q) in one pass; the inner loop of the simulator."""
    eta = topology.incidence.T @ theta
    g = edge_gamma(topology, V)
    P = topology.incidence @ (g * np.sin(eta))
    Q = topology.diag_term * V**2 - topology.abs_incidence @ (g * np.cos(eta))
    return P, Q


# -- lossy lines ----------------------------------------------------------------

def _rotation(phi_loss):
    phi_loss = float(phi_loss)
    if not (0.0 <= phi_loss <= LOSSLESS):
        raise DomainError(f"phi_loss must lie in [0, pi/2], got {phi_loss}")
    if phi_loss == LOSSLESS:
        # exact identity: cos(pi/2) evaluates to 6e-17 in floating point
        return 1.0, 0.0
    return math.sin(phi_loss), math.cos(phi_loss)


def lossy_transform(P, Q, phi_loss):
    """(Pℓ, Qℓ) = Φ(φ)(P, Q) per node, Φ = [[sin φ, cos φ], [-cos φ, sin φ]]."""
    s, c = _rotation(phi_loss)
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    return s * P + c * Q, -c * P + s * Q


def inverse_lossy_transform(P_ell, Q_ell, phi_loss):
    """Recover lossless (P, Q) = Φ(φ)ᵀ(Pℓ, Qℓ)."""
    s, c = _rotation(phi_loss)
    P_ell = np.asarray(P_ell, dtype=float)
    Q_ell = np.asarray(Q_ell, dtype=float)
    return s * P_ell - c * Q_ell, c * P_ell + s * Q_ell


# -- steady state -----------------------------------------------------------------

def optimal_feedforward(K_P, P_star):
    """ū_P = -𝟙 (𝟙ᵀP*) / (𝟙ᵀK_P⁻¹𝟙), the minimiser of ½ūᵀK_P⁻¹ū over feasible inputs."""
    K_P = _diagonal(K_P)
    P_star = np.asarray(P_star, dtype=float)
    return -np.full(P_star.size, P_star.sum() / np.sum(1.0 / K_P))


def steady_active_target(K_P, P_star):
    """(I - K_P⁻¹𝟙𝟙ᵀ/𝟙ᵀK_P⁻¹𝟙) P*, the steady injection under the optimal input."""
    K_P = _diagonal(K_P)
    P_star = np.asarray(P_star, dtype=float)
    return P_star - (1.0 / K_P) * P_star.sum() / np.sum(1.0 / K_P)


def _diagonal(K):
    K = np.asarray(K, dtype=float)
    return np.diag(K).copy() if K.ndim == 2 else K


def tree_feasibility_margin(topology, V_bar, K_P, P_star):
    """‖Γ(V̄)⁻¹ D† target‖∞ on a tree; a value below 1 certifies the angle equation."""
    if not topology.is_tree():
        raise DomainError("tree_feasibility_margin requires a tree (m = n - 1)")
    if topology.m == 0:
        return 0.0
    D = topology.incidence
    flows = np.linalg.solve(D.T @ D, D.T @ steady_active_target(K_P, P_star))
    return float(np.max(np.abs(flows / edge_gamma(topology, V_bar))))


@dataclass
class Equilibrium:
    """Synchronous solution: θ̄(t) = ω⁰t + θ⁰, ω̄ = ω⁰𝟙, V = V̄, plus inputs."""

    theta0: np.ndarray
    omega0: float
    V_bar: np.ndarray
    u_P_bar: np.ndarray
    u_Q_bar: np.ndarray
    P_bar: np.ndarray
    Q_bar: np.ndarray
    xi_bar: np.ndarray
    residual_frequency: float = 0.0
    residual_voltage: float = 0.0
    iterations: int = 0
    in_security_region: bool = True
    edge_angles: np.ndarray = field(default=None)

    def lambda_bar(self, config):
        """Steady λ of the dynamic u_Q extension. A constant voltage
        disturbance d shifts it so that R₂(V̄)(K_λλ̄ - ū_Q) = -d."""
        from .controllers import voltage_input_gain

        d = config.voltage_disturbance
        shift = np.linalg.solve(voltage_input_gain(config, self.V_bar), d)
        return (self.u_Q_bar - shift) / config.K_lambda

    def phi_bar(self):
        return to_phi(self.theta0)

    def to_dict(self):
        return {
            "theta0": self.theta0.tolist(),
            "omega0": float(self.omega0),
            "V_bar": self.V_bar.tolist(),
            "u_P_bar": self.u_P_bar.tolist(),
            "u_Q_bar": self.u_Q_bar.tolist(),
            "P_bar": self.P_bar.tolist(),
            "Q_bar": self.Q_bar.tolist(),
            "xi_bar": self.xi_bar.tolist(),
            "edge_angles": self.edge_angles.tolist(),
            "residual_frequency": float(self.residual_frequency),
            "residual_voltage": float(self.residual_voltage),
            "iterations": int(self.iterations),
            "in_security_region": bool(self.in_security_region),
        }


def _build_equilibrium(topology, config, theta0, V_bar, iterations=0):
    P_bar, Q_bar = active_power(topology, theta0, V_bar), reactive_power(topology, theta0, V_bar)
    u_P = optimal_feedforward(config.K_P, config.P_star)
    eta = topology.edge_angles(theta0)
    freq = config.K_P * (config.P_star - P_bar) + u_P
    volt = voltage_field(config, V_bar, Q_bar, config.u_Q_bar)
    return Equilibrium(
        theta0=np.asarray(theta0, dtype=float),
        omega0=config.omega_star,
        V_bar=np.asarray(V_bar, dtype=float),
        u_P_bar=u_P,
        u_Q_bar=config.u_Q_bar.copy(),
        P_bar=P_bar,
        Q_bar=Q_bar,
        xi_bar=u_P.copy(),
        residual_frequency=float(np.max(np.abs(freq), initial=0.0)),
        residual_voltage=float(np.max(np.abs(volt), initial=0.0)),
        iterations=iterations,
        in_security_region=bool(np.all(np.abs(wrap_angle(eta)) < math.pi / 2)),
        edge_angles=eta,
    )


def _residual_and_jacobian(topology, config, phi, V, target, earp_level):
    n = topology.n
    D1 = topology.reduced_incidence
    absD = topology.abs_incidence
    theta = from_phi(phi)
    eta = D1.T @ phi
    g = edge_gamma(topology, V)
    s, c = np.sin(eta), np.cos(eta)
    P, Q = injections(topology, theta, V)
    f = voltage_field(config, V, Q, config.u_Q_bar)
    r = [P[:-1] - target[:-1], f]

    dP_dphi = (D1 * (g * c)) @ D1.T
    dP_dV = (D1 * (g * s)) @ absD.T / V[None, :]
    dQ_dphi = (absD * (g * s)) @ D1.T
    dQ_dV = np.diag(loopy_laplacian(topology, c) @ V) + V[:, None] * loopy_laplacian(topology, c)
    dfdV, dfdQ = voltage_field_jacobian(config, V, Q, config.u_Q_bar)
    J = np.block([
        [dP_dphi, dP_dV],
        [dfdQ @ dQ_dphi, dfdV + dfdQ @ dQ_dV],
    ])
    if config.kind is ControllerKind.EARP:
        r.append(np.array([np.sum(np.log(V) / config.K_Q) - earp_level]))
        J = np.vstack([J, np.concatenate([np.zeros(n - 1), 1.0 / (config.K_Q * V)])])
    return np.concatenate(r), J


def _newton(topology, config, phi, V, target, earp_level, tol, max_iter):
    """Damped Newton on (φ, V). Returns (phi, V, iterations) or None."""
    n = topology.n
    for it in range(max_iter + 1):
        r, J = _residual_and_jacobian(topology, config, phi, V, target, earp_level)
        if not np.all(np.isfinite(r)):
            return None
        if np.max(np.abs(r)) < tol:
            return phi, V, it
        if it == max_iter:
            return None
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        alpha = 1.0
        while np.any(V + alpha * step[n - 1:] <= 0.0):
            alpha *= 0.5
            if alpha < 1e-8:
                return None
        phi = phi + alpha * step[:n - 1]
        V = V + alpha * step[n - 1:]
    return None


def solve_equilibria(topology, config, *, initial=None, tol=1e-10, max_iter=50, restarts=10,
                     seed=0, earp_level=0.0, always_restart=False):
    """All distinct equilibria found from the flat start (or ``initial``)
    and, if that fails or ``always_restart`` is set, from ``restarts`` random
    starts with V ∈ [0.8, 1.2]ⁿ and φ ∈ [-0.3, 0.3]ⁿ⁻¹.

    ``initial`` is an optional ``(theta, V)`` pair. ``earp_level`` fixes the
    conserved quantity 𝟙ᵀK_Q⁻¹ ln V̄ for the EArp controller, whose
    equilibria otherwise form a one-parameter family.
    """
    config.check_topology(topology)
    n = topology.n
    if config.kind is ControllerKind.EARP:
        drift = float(np.sum(config.u_Q_bar / config.K_Q))
        if abs(drift) > 1e-12:
            raise SolverError(
                f"EArp admits no equilibrium when 1ᵀK_Q⁻¹ū_Q != 0 (got {drift:.3e}); "
                "the conserved quantity would drift", residual=abs(drift))
    target = steady_active_target(config.K_P, config.P_star)

    starts = []
    if initial is not None:
        theta_i, V_i = initial
        starts.append((to_phi(theta_i), require_positive(np.array(V_i, dtype=float))))
    else:
        starts.append((np.zeros(n - 1), np.ones(n)))
    rng = np.random.default_rng(seed)
    random_starts = [(rng.uniform(-0.3, 0.3, n - 1), rng.uniform(0.8, 1.2, n)) for _ in range(restarts)]

    found = []

    def attempt(phi0, V0):
        out = _newton(topology, config, phi0, V0, target, earp_level, tol, max_iter)
        if out is None:
            return
        phi, V, it = out
        theta = from_phi(wrap_angle(phi))
        eta = topology.edge_angles(theta)
        for prev in found:
            if (np.allclose(V, prev.V_bar, atol=1e-7)
                    and np.allclose(np.angle(np.exp(1j * (eta - prev.edge_angles))), 0.0, atol=1e-7)):
                return
        eq = _build_equilibrium(topology, config, theta, V, iterations=it)
        if not eq.in_security_region:
            log.warning("equilibrium outside the security region |η| < π/2: max |η| = %.4f",
                        np.max(np.abs(wrap_angle(eta))))
        found.append(eq)

    attempt(*starts[0])
    if not found or always_restart:
        for phi0, V0 in random_starts:
            attempt(phi0, V0)
    return found


def solve_equilibrium(topology, config, **kwargs):
    """Solve the feasibility equations with ω⁰ = ω* and the optimal ū_P.

    Returns the first equilibrium found (flat start first). Raises
    SolverError when no start converges.
    """
    found = solve_equilibria(topology, config, **kwargs)
    if not found:
        target = steady_active_target(config.K_P, config.P_star)
        n = topology.n
        r, _ = _residual_and_jacobian(topology, config, np.zeros(n - 1), np.ones(n), target,
                                      kwargs.get("earp_level", 0.0))
        raise SolverError("equilibrium solver did not converge from any start",
                          residual=float(np.max(np.abs(r))))
    if len(found) > 1:
        log.info("found %d distinct equilibria; returning the first", len(found))
    return found[0]


def equilibrium_from_operating_point(topology, config, theta0, V_bar):
    """Turn a chosen operating point (θ⁰, V̄) into an equilibrium.

    P* is set to the resulting injections P̄ (so ū_P = 0) and ū_Q to the
    value that makes the voltage law stationary. Returns ``(config, eq)``.
    """
    theta0 = np.asarray(theta0, dtype=float)
    V_bar = require_positive(np.array(V_bar, dtype=float))
    P_bar = active_power(topology, theta0, V_bar)
    Q_bar = reactive_power(topology, theta0, V_bar)
    K = config.K_Q
    kind = config.kind
    if kind is ControllerKind.CONVENTIONAL_DROOP:
        u_Q = K * Q_bar + V_bar
    elif kind is ControllerKind.QUADRATIC_DROOP:
        u_Q = K * Q_bar / V_bar + V_bar
    elif kind is ControllerKind.REACTIVE_CURRENT:
        u_Q = Q_bar / V_bar
    else:
        u_Q = K * (config.L_Q @ (K * Q_bar))
    config = config.replace(P_star=P_bar - P_bar.mean(), u_Q_bar=u_Q)
    return config, _build_equilibrium(topology, config, theta0, V_bar)
