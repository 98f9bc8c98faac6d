"""Energy function U, controller-dependent shaping H, the Bregman storage 𝒮 and
its derivatives, and the auxiliary storages of the secondary controllers.

The Bregman construction cancels every term of S that is affine in the state,
so linear parts of H never influence 𝒮, its gradient or its Hessian.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ControllerKind
from .errors import ConfigError, require_positive
from .power_flow import injections
from .topology import edge_gamma, from_phi, loopy_laplacian

CD = ControllerKind.CONVENTIONAL_DROOP
QD = ControllerKind.QUADRATIC_DROOP
RC = ControllerKind.REACTIVE_CURRENT
EARP = ControllerKind.EARP


def energy_U(topology, config, theta, omega, V):
    """U = ½ωᵀK_P⁻¹T_Pω + ½Vᵀ𝒜(cos Dᵀθ)V (the second term is ½𝟙ᵀQ)."""
    V = require_positive(V)
    omega = np.asarray(omega, dtype=float)
    A = loopy_laplacian(topology, np.cos(topology.edge_angles(theta)))
    return 0.5 * omega @ (config.T_P / config.K_P * omega) + 0.5 * V @ A @ V


def _log_weight(config, equilibrium):
    """Coefficient of -ln V in H (None when H carries no logarithm)."""
    if config.kind is CD:
        if not np.all(equilibrium.u_Q_bar > 0):
            raise ConfigError("ConventionalDroop storage needs K_Q⁻¹ū_Q > 0 element-wise")
        return equilibrium.Q_bar + equilibrium.V_bar / config.K_Q
    if config.kind is EARP:
        return equilibrium.Q_bar
    return None


def shaping_H(config, V, equilibrium):
    """Controller-dependent shaping term H(V).

    ConventionalDroop  𝟙ᵀK_Q V - (Q̄ + K_Q⁻¹V̄)ᵀ ln V
    QuadraticDroop     ½VᵀK_Q⁻¹V
    ReactiveCurrent    0
    EArp               -Q̄ᵀ ln V
    """
    kind = config.kind
    if kind is RC:
        return 0.0
    if kind is QD:
        V = np.asarray(V, dtype=float)
        return 0.5 * np.sum(V**2 / config.K_Q)
    V = require_positive(V)
    c = _log_weight(config, equilibrium)
    value = -c @ np.log(V)
    if kind is CD:
        value += np.sum(config.K_Q * V)
    return float(value)


def shaping_H_grad(config, V, equilibrium):
    kind = config.kind
    V = np.asarray(V, dtype=float)
    if kind is RC:
        return np.zeros_like(V)
    if kind is QD:
        return V / config.K_Q
    V = require_positive(V)
    grad = -_log_weight(config, equilibrium) / V
    if kind is CD:
        grad = grad + config.K_Q
    return grad


def shaping_H_hess(config, V, equilibrium):
    """Diagonal h(V) of ∂²H/∂V².

    For ConventionalDroop this is [V]⁻²(Q̄ + K_Q⁻¹V̄): the 𝟙ᵀK_Q V term is
    linear and contributes nothing.
    """
    kind = config.kind
    V = np.asarray(V, dtype=float)
    if kind is RC:
        return np.zeros_like(V)
    if kind is QD:
        return 1.0 / config.K_Q
    V = require_positive(V)
    return _log_weight(config, equilibrium) / V**2


def _bregman_H(config, V, equilibrium):
    """H(V) - H(V̄) - ∇H(V̄)ᵀ(V - V̄), written to avoid cancellation."""
    kind = config.kind
    if kind is RC:
        return 0.0
    if kind is QD:
        return 0.5 * np.sum((V - equilibrium.V_bar) ** 2 / config.K_Q)
    x = V / equilibrium.V_bar
    return float(_log_weight(config, equilibrium) @ (x - 1.0 - np.log(x)))


def bregman_grad_V(config, equilibrium, V, Q):
    """∂𝒮/∂V = [V]⁻¹Q + ∇H(V) - [V̄]⁻¹Q̄ - ∇H(V̄)."""
    return (Q / V + shaping_H_grad(config, V, equilibrium)
            - equilibrium.Q_bar / equilibrium.V_bar - shaping_H_grad(config, equilibrium.V_bar, equilibrium))


def bregman_value(topology, config, equilibrium, theta, omega, V):
    """Scalar 𝒮(θ, ω, V) relative to ``equilibrium``."""
    V = require_positive(V)
    theta = np.asarray(theta, dtype=float)
    d_omega = np.asarray(omega, dtype=float) - equilibrium.omega0
    kinetic = 0.5 * d_omega @ (config.T_P / config.K_P * d_omega)

    eta = topology.edge_angles(theta)
    eta_bar = equilibrium.edge_angles
    Vb = equilibrium.V_bar
    A = loopy_laplacian(topology, np.cos(eta))
    A_bar = loopy_laplacian(topology, np.cos(eta_bar))
    flows_bar = edge_gamma(topology, Vb) * np.sin(eta_bar)
    potential = (0.5 * V @ A @ V - 0.5 * Vb @ A_bar @ Vb
                 - flows_bar @ (eta - eta_bar)
                 - (equilibrium.Q_bar / Vb) @ (V - Vb))
    return float(kinetic + potential + _bregman_H(config, V, equilibrium))


@dataclass
class StorageEvaluation:
    U_value: float
    H_value: float
    S_value: float
    bregman_value: float
    grad_theta: np.ndarray
    grad_omega: np.ndarray
    grad_V: np.ndarray
    C_value: float
    C_Q_value: float
    W: np.ndarray
    R: np.ndarray


def bregman_S(topology, config, state, equilibrium):
    """Full evaluation of the storage functions at a :class:`GridState`."""
    theta, omega, V = state.theta, state.omega, require_positive(state.V)
    P, Q = injections(topology, theta, V)
    U = energy_U(topology, config, theta, omega, V)
    H = shaping_H(config, V, equilibrium)
    W, R = supply_weights(config, V)
    return StorageEvaluation(
        U_value=float(U),
        H_value=float(H),
        S_value=float(U + H),
        bregman_value=bregman_value(topology, config, equilibrium, theta, omega, V),
        grad_theta=P - equilibrium.P_bar,
        grad_omega=config.T_P / config.K_P * (omega - equilibrium.omega0),
        grad_V=bregman_grad_V(config, equilibrium, V, Q),
        C_value=secondary_storage_C(state.xi, equilibrium.xi_bar),
        C_Q_value=dynamic_storage_CQ(config, state.lam, equilibrium.lambda_bar(config)),
        W=W,
        R=R,
    )


def bregman_grad_phi(topology, config, equilibrium, phi, omega, V):
    """∇𝒮 in (φ, ω, V) coordinates, concatenated."""
    V = require_positive(V)
    theta = from_phi(phi)
    P, Q = injections(topology, theta, V)
    return np.concatenate([
        (P - equilibrium.P_bar)[:-1],
        config.T_P / config.K_P * (np.asarray(omega) - equilibrium.omega0),
        bregman_grad_V(config, equilibrium, V, Q),
    ])


def secondary_storage_C(xi, xi_bar):
    """𝒞 = ½‖ξ - ξ̄‖²."""
    d = np.asarray(xi, dtype=float) - np.asarray(xi_bar, dtype=float)
    return 0.5 * float(d @ d)


def dynamic_storage_CQ(config, lam, lam_bar):
    """𝒞_Q = ½(λ - λ̄)ᵀK_λ(λ - λ̄)."""
    d = np.asarray(lam, dtype=float) - np.asarray(lam_bar, dtype=float)
    return 0.5 * float(d @ (config.K_lambda * d))


def hessian(topology, config, equilibrium, phi, V):
    """(φ, V) block of ∂²S/∂(φ, ω, V)², size (2n-1)×(2n-1).

    [[D₁Γ[cos η]D₁ᵀ,        D₁Γ[sin η]|D|ᵀ[V]⁻¹],
     [[V]⁻¹|D|Γ[sin η]D₁ᵀ,  𝒜(cos η) + [h(V)]  ]]   with η = D₁ᵀφ.
    """
    V = require_positive(V)
    D1 = topology.reduced_incidence
    eta = D1.T @ np.asarray(phi, dtype=float)
    g = edge_gamma(topology, V)
    top_left = (D1 * (g * np.cos(eta))) @ D1.T
    cross = (D1 * (g * np.sin(eta))) @ topology.abs_incidence.T / V[None, :]
    bottom = loopy_laplacian(topology, np.cos(eta)) + np.diag(shaping_H_hess(config, V, equilibrium))
    Hs = np.block([[top_left, cross], [cross.T, bottom]])
    return 0.5 * (Hs + Hs.T)


def full_hessian(topology, config, equilibrium, phi, V):
    """The three-block Hessian in (φ, ω, V) order, ω-block K_P⁻¹T_P."""
    n = topology.n
    Hs = hessian(topology, config, equilibrium, phi, V)
    out = np.zeros((3 * n - 1, 3 * n - 1))
    ip = slice(0, n - 1)
    iw = slice(n - 1, 2 * n - 1)
    iv = slice(2 * n - 1, 3 * n - 1)
    out[ip, ip] = Hs[:n - 1, :n - 1]
    out[ip, iv] = Hs[:n - 1, n - 1:]
    out[iv, ip] = Hs[n - 1:, :n - 1]
    out[iv, iv] = Hs[n - 1:, n - 1:]
    out[iw, iw] = np.diag(config.T_P / config.K_P)
    return out


def dissipation_matrices(config, V):
    """(X(V), Y(V)) with T_Q V̇ - f(V̄...) = -T_Q X ∂𝒮/∂V + T_Q Y (u_Q - ū_Q)."""
    V = np.asarray(V, dtype=float)
    kind = config.kind
    T, K = config.T_Q, config.K_Q
    if kind is CD:
        return np.diag(K * V / T), np.diag(1.0 / T)
    if kind is QD:
        return np.diag(K * V / T), np.diag(V / T)
    if kind is RC:
        return np.diag(1.0 / T), np.diag(1.0 / T)
    KLK = (K[:, None] * config.L_Q) * K[None, :]
    return V[:, None] * KLK * V[None, :], np.diag(V)


def supply_weights(config, V):
    """Block weights (W, R) of the supply rate s = -yᵀWy + yᵀRu, with
    outputs y = (K_P⁻¹ω, T_Q⁻¹∂S/∂V)."""
    V = np.asarray(V, dtype=float)
    n = V.size
    kind = config.kind
    if kind in (CD, QD):
        lower = np.diag(config.T_Q * config.K_Q * V)
    elif kind is RC:
        lower = np.diag(config.T_Q)
    else:
        K = config.K_Q
        lower = V[:, None] * ((K[:, None] * config.L_Q) * K[None, :]) * V[None, :]
    R2 = np.diag(V) if kind in (QD, EARP) else np.eye(n)
    zero = np.zeros((n, n))
    W = np.block([[np.diag(config.K_P), zero], [zero, lower]])
    R = np.block([[np.eye(n), zero], [zero, R2]])
    return W, R


def storage_rate(config, equilibrium, omega, V, grad_V, u_P, u_Q):
    """Right side of the dissipation equality for d𝒮/dt, -yᵀWy + yᵀR(u - ū)
    plus the contribution of any constant voltage disturbance."""
    d_omega = np.asarray(omega) - equilibrium.omega0
    y = np.concatenate([d_omega / config.K_P, grad_V / config.T_Q])
    du = np.concatenate([np.asarray(u_P) - equilibrium.u_P_bar, np.asarray(u_Q) - equilibrium.u_Q_bar])
    W, R = supply_weights(config, V)
    rate = -y @ W @ y + y @ R @ du
    return float(rate + (grad_V / config.T_Q) @ config.voltage_disturbance)
