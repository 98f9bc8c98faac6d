"""Controller configuration and the closed-loop state container."""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

LOSSLESS = math.pi / 2


class ControllerKind(str, enum.Enum):
    CONVENTIONAL_DROOP = "ConventionalDroop"
    QUADRATIC_DROOP = "QuadraticDroop"
    REACTIVE_CURRENT = "ReactiveCurrent"
    EARP = "EArp"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for kind in cls:
            if value == kind.value or str(value).lower() == kind.value.lower():
                return kind
        raise ConfigError(f"unknown controller kind {value!r}; expected one of {[k.value for k in cls]}")


def _diag(value, n, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    elif a.ndim == 2:
        if a.shape != (n, n) or np.any(a - np.diag(np.diag(a))):
            raise ConfigError(f"{name} must be an n×n diagonal matrix")
        a = np.diag(a).copy()
    if a.shape != (n,):
        raise ConfigError(f"{name} must have {n} entries, got shape {a.shape}")
    if not np.all(np.isfinite(a) & (a > 0)):
        raise ConfigError(f"{name} must have strictly positive diagonal entries")
    a.setflags(write=False)
    return a


def _vec(value, n, name):
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        a = np.full(n, float(a))
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} must be a finite vector with {n} entries")
    a.setflags(write=False)
    return a


def check_laplacian(L, n, name="L"):
    L = np.array(L, dtype=float)
    if L.shape != (n, n):
        raise ConfigError(f"{name} must be {n}×{n}")
    if not np.allclose(L, L.T, atol=1e-12):
        raise ConfigError(f"{name} must be symmetric")
    if not np.allclose(L.sum(axis=1), 0.0, atol=1e-10):
        raise ConfigError(f"{name} must have zero row sums")
    if n > 1:
        eig = np.linalg.eigvalsh(L)
        if eig[0] < -1e-10 or eig[1] <= 1e-10:
            raise ConfigError(f"{name} must be positive semidefinite with a connected graph")
    L.setflags(write=False)
    return L


def laplacian_from_edges(n, edges):
    """Weighted Laplacian from ``(i, j, w)`` triples (0-based)."""
    L = np.zeros((n, n))
    for i, j, w in edges:
        i, j, w = int(i), int(j), float(w)
        if i == j or w <= 0:
            raise ConfigError(f"invalid communication edge ({i}, {j}, {w})")
        L[i, j] -= w
        L[j, i] -= w
        L[i, i] += w
        L[j, j] += w
    return L


@dataclass(frozen=True, eq=False)
class ControllerConfig:
    """Gains, setpoints and communication graphs of one closed-loop scenario.

    Diagonal matrices (T_P, T_Q, K_P, K_Q, K_lambda) are stored as vectors of
    their diagonals. ``phi_loss = pi/2`` is the lossless network.
    ``voltage_disturbance`` is a constant vector added to the right side of
    the voltage dynamics (zero unless a rejection experiment needs it).
    """

    kind: ControllerKind
    T_P: np.ndarray
    T_Q: np.ndarray
    K_P: np.ndarray
    K_Q: np.ndarray
    P_star: np.ndarray
    u_Q_bar: np.ndarray
    L_P: np.ndarray
    L_Q: np.ndarray
    K_lambda: np.ndarray
    omega_star: float = 0.0
    phi_loss: float = LOSSLESS
    use_secondary: bool = True
    use_dynamic_uq: bool = False
    voltage_disturbance: np.ndarray = field(default=None)

    def __post_init__(self):
        kind = ControllerKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        n = np.asarray(self.P_star).reshape(-1).shape[0]
        set_ = lambda name, v: object.__setattr__(self, name, v)  # noqa: E731
        for name in ("T_P", "T_Q", "K_P", "K_Q", "K_lambda"):
            set_(name, _diag(getattr(self, name), n, name))
        set_("P_star", _vec(self.P_star, n, "P_star"))
        set_("u_Q_bar", _vec(self.u_Q_bar, n, "u_Q_bar"))
        d = np.zeros(n) if self.voltage_disturbance is None else self.voltage_disturbance
        set_("voltage_disturbance", _vec(d, n, "voltage_disturbance"))
        set_("L_P", check_laplacian(self.L_P, n, "L_P"))
        set_("L_Q", check_laplacian(self.L_Q, n, "L_Q"))
        set_("omega_star", float(self.omega_star))
        set_("phi_loss", float(self.phi_loss))
        if not (0.0 <= self.phi_loss <= LOSSLESS):
            raise ConfigError(f"phi_loss must lie in [0, pi/2], got {self.phi_loss}")
        if kind is ControllerKind.EARP and not np.all(self.T_Q == 1.0):
            raise ConfigError("EArp requires T_Q = I")

    @property
    def n(self):
        return self.P_star.shape[0]

    @classmethod
    def for_network(cls, topology, kind, **overrides):
        """Defaults: unit gains and time constants, P* = 0, unit-weight
        electrical-graph Laplacians for L_P and L_Q, ū_Q = 1 (0 for EArp),
        K_lambda = K_Q."""
        kind = ControllerKind.parse(kind)
        n = topology.n
        L = topology.laplacian()
        base = dict(
            kind=kind,
            T_P=np.ones(n),
            T_Q=np.ones(n),
            K_P=np.ones(n),
            K_Q=np.ones(n),
            P_star=np.zeros(n),
            u_Q_bar=np.zeros(n) if kind is ControllerKind.EARP else np.ones(n),
            L_P=L,
            L_Q=L,
        )
        base.update(overrides)
        base.setdefault("K_lambda", base["K_Q"])
        return cls(**base)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def lossless(self):
        return self.phi_loss == LOSSLESS

    def check_topology(self, topology):
        if topology.n != self.n:
            raise ConfigError(f"configuration has {self.n} nodes, network has {topology.n}")


@dataclass
class GridState:
    """Closed-loop state (θ, ω, V, ξ, λ). ``lam`` is only integrated when the
    dynamic u_Q extension is enabled but is always carried."""

    theta: np.ndarray
    omega: np.ndarray
    V: np.ndarray
    xi: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        for name in ("theta", "omega", "V", "xi", "lam"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1).copy())

    @property
    def n(self):
        return self.theta.shape[0]

    def to_vector(self):
        return np.concatenate([self.theta, self.omega, self.V, self.xi, self.lam])

    @classmethod
    def from_vector(cls, x, n):
        x = np.asarray(x, dtype=float)
        return cls(*(x[k * n:(k + 1) * n] for k in range(5)))

    def copy(self):
        return GridState.from_vector(self.to_vector(), self.n)
