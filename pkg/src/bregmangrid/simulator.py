"""Closed-loop integration with trace recording and online monitors."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ControllerKind, GridState
from .controllers import _voltage_field, voltage_input_gain
from .errors import ConfigError, DomainError, IntegrationError
from .power_flow import inverse_lossy_transform, lossy_transform
from .storage import (
    bregman_grad_V,
    bregman_value,
    dynamic_storage_CQ,
    secondary_storage_C,
    storage_rate,
)

log = logging.getLogger(__name__)

V_MIN = 1e-6
STEADY_THRESHOLD = 1e-8
STEADY_WINDOW = 1.0


def conserved_quantity(config, V):
    """𝟙ᵀK_Q⁻¹ ln V, constant along EArp trajectories."""
    return float(np.sum(np.log(V) / config.K_Q))


def equilibrium_state(config, equilibrium):
    """The closed-loop state sitting exactly on ``equilibrium`` at t = 0."""
    n = config.n
    return GridState(
        theta=equilibrium.theta0,
        omega=np.full(n, equilibrium.omega0),
        V=equilibrium.V_bar,
        xi=equilibrium.xi_bar,
        lam=equilibrium.lambda_bar(config),
    )


def perturbed_state(config, equilibrium, radius, seed):
    """Equilibrium state plus independent uniform noise in [-radius, radius]
    on every component of (θ, ω, V, ξ) and, when enabled, λ."""
    if radius < 0:
        raise ConfigError("perturbation radius must be >= 0")
    rng = np.random.default_rng(seed)
    x = equilibrium_state(config, equilibrium).to_vector()
    n = config.n
    width = 5 * n if config.use_dynamic_uq else 4 * n
    x[:width] += rng.uniform(-radius, radius, width)
    return GridState.from_vector(x, n)


class _Field:
    """Flat-vector right-hand side; the integrator's inner loop."""

    def __init__(self, topology, config, equilibrium):
        self.top = topology
        self.cfg = config
        self.eq = equilibrium
        self.n = topology.n
        self.lossy = not config.lossless
        self.D = np.array(topology.incidence)
        self.absD = np.array(topology.abs_incidence)
        self.Bii = np.array(topology.diag_term)
        self.i, self.j = topology.edge_nodes[:, 0].copy(), topology.edge_nodes[:, 1].copy()
        self.b = np.array(topology.edge_susceptance)

    def powers(self, theta, V):
        """(P, Q) as seen by the controllers and (Pℓ, Qℓ) at the terminals."""
        eta = theta @ self.D
        g = V[self.i] * V[self.j] * self.b
        P = self.D @ (g * np.sin(eta))
        Q = self.Bii * V * V - self.absD @ (g * np.cos(eta))
        if not self.lossy:
            return P, Q, P, Q
        Pl, Ql = lossy_transform(P, Q, self.cfg.phi_loss)
        Pc, Qc = inverse_lossy_transform(Pl, Ql, self.cfg.phi_loss)
        return Pc, Qc, Pl, Ql

    def inputs(self, V, Q, xi, lam):
        cfg, eq = self.cfg, self.eq
        u_P = xi if cfg.use_secondary else eq.u_P_bar
        if cfg.use_dynamic_uq:
            u_Q = cfg.K_lambda * lam
        else:
            u_Q = eq.u_Q_bar
        return u_P, u_Q

    def __call__(self, x):
        n, cfg, eq = self.n, self.cfg, self.eq
        theta, omega, V, xi, lam = x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:4 * n], x[4 * n:]
        P, Q, _, _ = self.powers(theta, V)
        u_P, u_Q = self.inputs(V, Q, xi, lam)
        omega_dot = (-(omega - cfg.omega_star) - cfg.K_P * (P - cfg.P_star) + u_P) / cfg.T_P
        V_dot = (_voltage_field(cfg, V, Q, u_Q) + cfg.voltage_disturbance) / cfg.T_Q
        if cfg.use_secondary:
            xi_dot = -cfg.L_P @ xi + (cfg.omega_star - omega) / cfg.K_P
        else:
            xi_dot = np.zeros(n)
        if cfg.use_dynamic_uq:
            g = bregman_grad_V(cfg, eq, V, Q)
            lam_dot = -(voltage_input_gain(cfg, V) @ g) / cfg.T_Q
        else:
            lam_dot = np.zeros(n)
        return np.concatenate([omega, omega_dot, V_dot, xi_dot, lam_dot])


def rhs(topology, config, equilibrium, state, t=0.0):
    """Time derivative of the closed loop at ``state`` (autonomous, ``t`` unused)."""
    if np.any(state.V <= 0):
        raise DomainError("voltage magnitudes must stay positive")
    return GridState.from_vector(_Field(topology, config, equilibrium)(state.to_vector()), topology.n)


@dataclass
class Trace:
    """Columnar record of a run. Row k holds sample k."""

    n: int
    lossy: bool
    dynamic_uq: bool
    t: np.ndarray
    theta: np.ndarray
    omega: np.ndarray
    V: np.ndarray
    xi: np.ndarray
    lam: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    P_ell: np.ndarray
    Q_ell: np.ndarray
    S: np.ndarray
    C: np.ndarray
    CQ: np.ndarray
    dLyap: np.ndarray
    conserved: np.ndarray
    steady_residual: np.ndarray
    status: str = "completed"
    message: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.t.shape[0]

    @property
    def lyapunov(self):
        return self.S + self.C + self.CQ

    def state(self, k=-1):
        return GridState(self.theta[k], self.omega[k], self.V[k], self.xi[k], self.lam[k])

    def columns(self):
        """Ordered (name, column) pairs for CSV output."""
        cols = [("t", self.t)]
        blocks = [("theta", self.theta), ("omega", self.omega), ("V", self.V), ("xi", self.xi)]
        if self.dynamic_uq:
            blocks.append(("lam", self.lam))
        blocks += [("P", self.P), ("Q", self.Q)]
        if self.lossy:
            blocks += [("Pl", self.P_ell), ("Ql", self.Q_ell)]
        for name, block in blocks:
            cols += [(f"{name}_{i + 1}", block[:, i]) for i in range(self.n)]
        cols += [("S", self.S), ("C", self.C), ("CQ", self.CQ), ("dLyap", self.dLyap),
                 ("conserved", self.conserved)]
        return cols


class _Recorder:
    def __init__(self, topology, config, equilibrium, field_):
        self.top, self.cfg, self.eq, self.f = topology, config, equilibrium, field_
        self.rows = {k: [] for k in ("t", "theta", "omega", "V", "xi", "lam", "P", "Q", "P_ell",
                                     "Q_ell", "S", "C", "CQ", "dLyap", "conserved", "steady")}
        self.lam_bar = equilibrium.lambda_bar(config)

    def record(self, t, x, dx):
        n, cfg, eq = self.f.n, self.cfg, self.eq
        theta, omega, V, xi, lam = x[:n], x[n:2 * n], x[2 * n:3 * n], x[3 * n:4 * n], x[4 * n:]
        P, Q, Pl, Ql = self.f.powers(theta, V)
        u_P, u_Q = self.f.inputs(V, Q, xi, lam)
        g = bregman_grad_V(cfg, eq, V, Q)
        rate = storage_rate(cfg, eq, omega, V, g, u_P, u_Q)
        xi_dot, lam_dot = dx[3 * n:4 * n], dx[4 * n:]
        rate += (xi - eq.xi_bar) @ xi_dot + (lam - self.lam_bar) @ (cfg.K_lambda * lam_dot)
        r = self.rows
        r["t"].append(t)
        for name, v in (("theta", theta), ("omega", omega), ("V", V), ("xi", xi), ("lam", lam),
                        ("P", P), ("Q", Q), ("P_ell", Pl), ("Q_ell", Ql)):
            r[name].append(np.array(v, dtype=float))
        r["S"].append(bregman_value(self.top, cfg, eq, theta, omega, V))
        r["C"].append(secondary_storage_C(xi, eq.xi_bar))
        r["CQ"].append(dynamic_storage_CQ(cfg, lam, self.lam_bar))
        r["dLyap"].append(rate)
        r["conserved"].append(conserved_quantity(cfg, V))
        r["steady"].append(float(max(np.max(np.abs(omega - cfg.omega_star)), np.max(np.abs(dx[n:])))))

    def trace(self, status="completed", message=""):
        r = self.rows
        arr = {k: np.array(v, dtype=float) for k, v in r.items()}
        return Trace(
            n=self.f.n, lossy=self.f.lossy, dynamic_uq=self.cfg.use_dynamic_uq,
            t=arr["t"], theta=arr["theta"], omega=arr["omega"], V=arr["V"], xi=arr["xi"],
            lam=arr["lam"], P=arr["P"], Q=arr["Q"], P_ell=arr["P_ell"], Q_ell=arr["Q_ell"],
            S=arr["S"], C=arr["C"], CQ=arr["CQ"], dLyap=arr["dLyap"], conserved=arr["conserved"],
            steady_residual=arr["steady"], status=status, message=message,
        )


def integrate(topology, config, equilibrium, initial_state, t_end, dt=1e-3, *, sample_every=10,
              v_min=V_MIN, final_only=False):
    """Classical fixed-step RK4 from ``initial_state`` over [0, t_end].

    Samples every ``sample_every`` steps plus the final step. If some
    voltage drops to ``v_min`` or below the run stops with
    ``status = "assumption_violation"``. A non-finite state raises
    IntegrationError carrying the trace so far. ``final_only`` skips the
    intermediate samples (used by convergence-order checks).
    """
    if not dt > 0:
        raise ConfigError("dt must be positive")
    if t_end < 0:
        raise ConfigError("t_end must be >= 0")
    if sample_every < 1:
        raise ConfigError("sample_every must be >= 1")
    config.check_topology(topology)
    if np.any(initial_state.V <= 0):
        raise DomainError("initial voltages must be positive")

    f = _Field(topology, config, equilibrium)
    rec = _Recorder(topology, config, equilibrium, f)
    steps = int(round(t_end / dt))
    x = initial_state.to_vector()
    k1 = f(x)
    rec.record(0.0, x, k1)
    half = 0.5 * dt
    sixth = dt / 6.0
    n = topology.n
    with np.errstate(all="ignore"):
        for step in range(1, steps + 1):
            k2 = f(x + half * k1)
            k3 = f(x + half * k2)
            k4 = f(x + dt * k3)
            x_new = x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            t = step * dt
            if not np.all(np.isfinite(x_new)):
                raise IntegrationError(f"non-finite state at t = {t:.6g}", rec.trace("diverged"))
            if np.min(x_new[2 * n:3 * n]) <= v_min:
                msg = f"voltage fell to v_min = {v_min:g} at t = {t:.6g}"
                log.warning(msg)
                return rec.trace("assumption_violation", msg)
            x = x_new
            k1 = f(x)
            if (not final_only and step % sample_every == 0) or step == steps:
                rec.record(t, x, k1)
    return rec.trace()


def deviation_norm(config, equilibrium, state):
    """‖(φ - φ̄, ω - ω*𝟙, V - V̄, ξ - ξ̄)‖₂, blind to uniform angle rotation."""
    theta = np.asarray(state.theta)
    phi = theta[:-1] - theta[-1]
    phi_bar = equilibrium.theta0[:-1] - equilibrium.theta0[-1]
    d = np.concatenate([phi - phi_bar, state.omega - equilibrium.omega0,
                        state.V - equilibrium.V_bar, state.xi - equilibrium.xi_bar])
    return float(np.linalg.norm(d))


# -- monitors ------------------------------------------------------------------------

@dataclass
class DissipationReport:
    max_abs_error: float
    max_rate: float
    max_increase: float
    derivative_ok: bool
    nonpositive_ok: bool
    monotone_ok: bool

    @property
    def passed(self):
        return self.derivative_ok and self.nonpositive_ok and self.monotone_ok

    def to_dict(self):
        return {k: getattr(self, k) for k in ("max_abs_error", "max_rate", "max_increase",
                                              "derivative_ok", "nonpositive_ok", "monotone_ok")} | {
            "passed": self.passed}


def dissipation_monitor(trace, *, rtol=1e-2, slack=1e-9, atol=1e-14):
    """Check the storage 𝒮 + 𝒞 + 𝒞_Q along ``trace``.

    (a) its numerical time derivative (central differences, one-sided at
    the ends) matches the analytic dissipation rate within
    ``rtol·max|rate|``, (b) the analytic rate is ≤ ``slack·L(0)`` and
    (c) consecutive samples never increase by more than ``slack·L(0)``.
    """
    L = trace.lyapunov
    if len(trace) < 2:
        return DissipationReport(0.0, float(np.max(trace.dLyap, initial=0.0)), 0.0, True,
                                 bool(np.all(trace.dLyap <= slack * max(L[0], 0.0) + atol)), True)
    num = np.gradient(L, trace.t, edge_order=2 if len(trace) > 2 else 1)
    err = np.abs(num - trace.dLyap)
    scale = max(float(np.max(np.abs(trace.dLyap))), 1e-300)
    bound = slack * max(float(L[0]), 0.0) + atol
    inc = float(np.max(np.diff(L)))
    return DissipationReport(
        max_abs_error=float(np.max(err)),
        max_rate=float(np.max(trace.dLyap)),
        max_increase=inc,
        derivative_ok=bool(np.max(err) <= rtol * scale + 1e-12),
        nonpositive_ok=bool(np.max(trace.dLyap) <= bound),
        monotone_ok=bool(inc <= bound),
    )


@dataclass
class ConservationReport:
    applicable: bool
    drift: float = 0.0

    def to_dict(self):
        if not self.applicable:
            return {"applicable": False, "result": "NotApplicable"}
        return {"applicable": True, "drift": self.drift}


def conservation_monitor(trace, config):
    """max_t |𝟙ᵀK_Q⁻¹ln V(t) - 𝟙ᵀK_Q⁻¹ln V(0)| for EArp; NotApplicable otherwise."""
    if config.kind is not ControllerKind.EARP:
        return ConservationReport(applicable=False)
    return ConservationReport(applicable=True,
                              drift=float(np.max(np.abs(trace.conserved - trace.conserved[0]))))


def _spread(x):
    return float(np.max(x) - np.min(x)) if x.size else 0.0


@dataclass
class SharingReport:
    steady: bool
    active: float
    reactive: float | None = None
    droop_ratio: float | None = None
    lossy_active: float | None = None
    lossy_reactive: float | None = None

    def to_dict(self):
        return dict(self.__dict__)


def sharing_monitor(trace, config, equilibrium=None):
    """Terminal power-sharing deviations (max pairwise differences).

    Droop gains enter the sharing identities as k = diag(K). ``steady``
    says whether the steady residual stayed below 1e-8 over the last
    simulated second; when it is False the numbers are only indicative.
    """
    window = trace.t >= trace.t[-1] - STEADY_WINDOW
    steady = bool(trace.t[-1] >= STEADY_WINDOW and np.all(trace.steady_residual[window] < STEADY_THRESHOLD))
    P, Q, V = trace.P[-1], trace.Q[-1], trace.V[-1]
    kP, kQ = config.K_P, config.K_Q
    rep = SharingReport(steady=steady, active=_spread(kP * P))
    if config.kind is ControllerKind.EARP:
        rep.reactive = _spread(kQ * Q)
    if config.kind is ControllerKind.CONVENTIONAL_DROOP and not config.use_dynamic_uq:
        u = config.u_Q_bar
        if np.all(u != 0):
            rep.droop_ratio = _spread((kQ * Q + V) / u)
    if trace.lossy:
        rep.lossy_active = _spread(kP * trace.P_ell[-1])
        if config.kind is ControllerKind.EARP:
            rep.lossy_reactive = _spread(kQ * trace.Q_ell[-1])
    return rep
