"""Voltage controller laws, frequency/droop dynamics and the secondary controllers.

All diagonal matrices are passed around as vectors of their diagonals, so
``K_Q * Q`` is the product K_Q·Q.
"""
from __future__ import annotations

import numpy as np

from .config import ControllerKind
from .errors import require_positive

CD = ControllerKind.CONVENTIONAL_DROOP
QD = ControllerKind.QUADRATIC_DROOP
RC = ControllerKind.REACTIVE_CURRENT
EARP = ControllerKind.EARP


def voltage_field(config, V, Q, u_Q):
    """Right side f(V, Q, u_Q) of T_Q·V̇ for the configured controller kind.

    ConventionalDroop   -V - K_Q Q + u_Q
    QuadraticDroop      -K_Q Q - [V](V - u_Q)
    ReactiveCurrent     -[V]⁻¹Q + u_Q
    EArp                -[V] K_Q L_Q K_Q Q + [V] u_Q
    """
    V = require_positive(V)
    return _voltage_field(config, V, np.asarray(Q, dtype=float), np.asarray(u_Q, dtype=float))


def _voltage_field(config, V, Q, u_Q):
    K = config.K_Q
    kind = config.kind
    if kind is CD:
        return -V - K * Q + u_Q
    if kind is QD:
        return -K * Q - V * (V - u_Q)
    if kind is RC:
        return -Q / V + u_Q
    return V * (-K * (config.L_Q @ (K * Q)) + u_Q)


def voltage_field_jacobian(config, V, Q, u_Q):
    """Partial derivatives (∂f/∂V, ∂f/∂Q) of :func:`voltage_field`, both n×n."""
    V = require_positive(V)
    Q = np.asarray(Q, dtype=float)
    u_Q = np.asarray(u_Q, dtype=float)
    K = config.K_Q
    kind = config.kind
    if kind is CD:
        return -np.eye(V.size), -np.diag(K)
    if kind is QD:
        return -np.diag(2.0 * V - u_Q), -np.diag(K)
    if kind is RC:
        return np.diag(Q / V**2), -np.diag(1.0 / V)
    KLK = (K[:, None] * config.L_Q) * K[None, :]
    return np.diag(-KLK @ Q + u_Q), -V[:, None] * KLK


def voltage_input_gain(config, V):
    """R₂: how u_Q - ū_Q enters T_Q·V̇ (I for the droop/current laws with
    additive input, [V] for the quadratic droop and EArp)."""
    if config.kind in (QD, EARP):
        return np.diag(V)
    return np.eye(V.size)


def frequency_field(config, omega, P, u_P):
    """Right side of T_P·ω̇: -(ω - ω*) - K_P (P - P*) + u_P."""
    omega = np.asarray(omega, dtype=float)
    return -(omega - config.omega_star) - config.K_P * (np.asarray(P) - config.P_star) + np.asarray(u_P)


def secondary_field(config, xi, omega):
    """Distributed averaging controller ξ̇ = -L_P ξ + K_P⁻¹(ω* - ω), u_P = ξ.

    Returns ``(xi_dot, u_P)``.
    """
    xi = np.asarray(xi, dtype=float)
    xi_dot = -config.L_P @ xi + (config.omega_star - np.asarray(omega, dtype=float)) / config.K_P
    return xi_dot, xi.copy()


def dynamic_uq_field(topology, config, equilibrium, theta, V, lam):
    """Dynamic voltage-side input T_Q·λ̇ = -R₂ ∂𝒮/∂V, u_Q = K_λ λ.

    Returns ``(lam_dot, u_Q)``; ``lam_dot`` already includes the T_Q⁻¹ factor.
    """
    from .power_flow import reactive_power
    from .storage import bregman_grad_V

    V = require_positive(V)
    Q = reactive_power(topology, theta, V)
    grad_V = bregman_grad_V(config, equilibrium, V, Q)
    lam_dot = -(voltage_input_gain(config, V) @ grad_V) / config.T_Q
    return lam_dot, config.K_lambda * np.asarray(lam, dtype=float)
