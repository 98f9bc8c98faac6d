"""Stability and instability certificates for a synchronous equilibrium.

* Gershgorin test: a node-wise sufficient condition for strict convexity of
  the Bregman storage (hence local asymptotic stability).
* Direct eigenvalue test on the (φ, V) Hessian.
* Cut-set test: a cut whose edges share no endpoints and carry large
  angles forces a negative Hessian eigenvalue, hence instability.
* Jacobian spectrum of the closed loop with u = ū, cross-checked against the
  factorization (𝒥 - ℛ)·Hessian.
"""
from __future__ import annotations

import enum
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ControllerKind
from .controllers import voltage_field_jacobian
from .storage import dissipation_matrices, full_hessian, hessian, shaping_H_hess
from .topology import edge_gamma, loopy_laplacian, wrap_angle

log = logging.getLogger(__name__)

SLACK = 1e-10
PD_THRESHOLD = 1e-10
UNSTABLE_REAL_PART = 1e-8
MAX_EXHAUSTIVE_EDGES = 20


class Verdict(str, enum.Enum):
    CONVEX = "ConvexCertified"
    UNSTABLE = "UnstableCertified"
    INCONCLUSIVE = "Inconclusive"


@dataclass
class GershgorinRow:
    node: int
    m_ii: float
    radius: float
    passed: bool


@dataclass
class GershgorinReport:
    rows: list
    passed: bool
    reason: str = ""


def gershgorin_convexity_check(topology, config, equilibrium):
    """Node-wise test m_ii > Σ_k B_iℓ sec(η̄_k), with

    m_ii = B̂_ii + Σ_{k~{i,ℓ}} B_iℓ (1 - (V̄_ℓ/V̄_i) sin²η̄_k / cos η̄_k) + h_i(V̄_i).

    Passing at every node implies the (φ, V) Hessian is positive definite.
    """
    eta = wrap_angle(equilibrium.edge_angles)
    V = equilibrium.V_bar
    if np.any(np.abs(eta) >= math.pi / 2):
        return GershgorinReport(rows=[], passed=False,
                                reason="precondition violated: equilibrium outside |η| < π/2")
    h = shaping_H_hess(config, V, equilibrium)
    B = topology.edge_susceptance
    ratio = np.sin(eta) ** 2 / np.cos(eta)
    sec = 1.0 / np.cos(eta)
    rows = []
    for i in range(topology.n):
        m_ii = topology.shunt_susceptance[i] + h[i]
        radius = 0.0
        for k, ell in topology.neighbors(i):
            m_ii += B[k] * (1.0 - V[ell] / V[i] * ratio[k])
            radius += B[k] * sec[k]
        rows.append(GershgorinRow(node=i, m_ii=float(m_ii), radius=float(radius),
                                  passed=bool(m_ii > radius + SLACK)))
    passed = all(r.passed for r in rows)
    return GershgorinReport(rows=rows, passed=passed,
                            reason="" if passed else "Gershgorin condition fails at some node")


def hessian_pd_check(topology, config, equilibrium):
    """Smallest eigenvalue of the (φ, V) Hessian and whether it exceeds 1e-10."""
    Hs = hessian(topology, config, equilibrium, equilibrium.phi_bar(), equilibrium.V_bar)
    lam_min = float(np.linalg.eigvalsh(Hs)[0])
    return lam_min, lam_min > PD_THRESHOLD


# -- cut-sets ---------------------------------------------------------------------

def _components(n, edge_nodes, removed):
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for k, (a, b) in enumerate(edge_nodes):
        if k in removed:
            continue
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[ra] = rb
    return [find(a) for a in range(n)]


def is_bond(topology, edges):
    """True when removing ``edges`` leaves exactly two components and every
    removed edge joins them (a minimal cut-set)."""
    edges = set(edges)
    if not edges:
        return False
    comp = _components(topology.n, topology.edge_nodes, edges)
    if len(set(comp)) != 2:
        return False
    return all(comp[a] != comp[b] for a, b in (topology.edge_nodes[k] for k in edges))


def _is_matching(topology, edges):
    nodes = topology.edge_nodes[list(edges)].ravel()
    return len(set(nodes.tolist())) == nodes.size


class CutsetList(list):
    """List of cut-sets (tuples of edge indices) with an ``exhaustive`` flag."""

    exhaustive = True


def enumerate_nonincident_cutsets(topology, *, max_exhaustive_edges=MAX_EXHAUSTIVE_EDGES,
                                  samples=2000, seed=0):
    """Minimal cut-sets whose edges are pairwise vertex-disjoint.

    Ordered by cardinality, lexicographic within. Exhaustive when
    ``m <= max_exhaustive_edges``; otherwise random node bipartitions are
    sampled and a warning is logged.
    """
    m = topology.m
    if m <= max_exhaustive_edges:
        found = []
        for r in range(1, topology.n // 2 + 1):
            for combo in itertools.combinations(range(m), r):
                if _is_matching(topology, combo) and is_bond(topology, combo):
                    found.append(combo)
        return CutsetList(found)

    log.warning("graph has %d edges; sampling cut-sets instead of enumerating", m)
    rng = np.random.default_rng(seed)
    found = set()
    for _ in range(samples):
        side = rng.integers(0, 2, topology.n).astype(bool)
        if side.all() or not side.any():
            continue
        cut = tuple(k for k, (a, b) in enumerate(topology.edge_nodes) if side[a] != side[b])
        if _is_matching(topology, cut) and is_bond(topology, cut):
            found.add(cut)
    out = CutsetList(sorted(found, key=lambda c: (len(c), c)))
    out.exhaustive = False
    return out


def cutset_side(topology, cut):
    """Indicator of one side of the bond ``cut`` (the side holding node 0)."""
    comp = _components(topology.n, topology.edge_nodes, set(cut))
    return np.array([c == comp[0] for c in comp], dtype=float)


# -- instability ---------------------------------------------------------------------

def m_matrix(topology, config, equilibrium):
    """Centre matrix M of the factorization Hessian = diag(D₁, I) M diag(D₁ᵀ, I)."""
    V = equilibrium.V_bar
    eta = equilibrium.edge_angles
    g = edge_gamma(topology, V)
    top_left = np.diag(g * np.cos(eta))
    top_right = (np.sin(eta) * g)[:, None] * topology.abs_incidence.T / V[None, :]
    bottom = loopy_laplacian(topology, np.cos(eta)) + np.diag(shaping_H_hess(config, V, equilibrium))
    return np.block([[top_left, top_right], [top_right.T, bottom]])


def beta(topology, config, equilibrium, k):
    """β_k = 2 max{(B_ii + h_i)V̄_i / (B_ij V̄_j), (B_jj + h_j)V̄_j / (B_ij V̄_i)}."""
    i, j = topology.edge_nodes[k]
    V = equilibrium.V_bar
    h = shaping_H_hess(config, V, equilibrium)
    Bd = topology.diag_term
    b = topology.edge_susceptance[k]
    return 2.0 * max((Bd[i] + h[i]) * V[i] / (b * V[j]), (Bd[j] + h[j]) * V[j] / (b * V[i]))


@dataclass
class CutsetWitness:
    edges: tuple
    sin2: list
    beta_cos: list
    test_vector_value: float
    m_min_eig: float
    reason: str = "cut-set with non-incident edges"


def cutset_test_vector(topology, config, equilibrium, cut):
    """Test vector v = (v¹, v²) with vᵀMv < 0 for a qualifying cut.

    v¹ = Dᵀx (±1 on the cut) for the side indicator x; on the endpoints of
    cut edge k, v²_i = V̄_i v¹_k v̄_k with v̄_k = -sin η̄_k / β_k.
    """
    V = equilibrium.V_bar
    eta = equilibrium.edge_angles
    v1 = topology.incidence.T @ cutset_side(topology, cut)
    v2 = np.zeros(topology.n)
    for k in cut:
        vbar = -math.sin(eta[k]) / beta(topology, config, equilibrium, k)
        for i in topology.edge_nodes[k]:
            v2[i] = V[i] * v1[k] * vbar
    return np.concatenate([v1, v2])


def instability_certificate(topology, config, equilibrium, cutsets=None):
    """First non-incident cut-set on which sin²η̄_k > β_k cos η̄_k for every
    edge, or None. Edges with |η̄_k| >= π/2 satisfy the inequality trivially."""
    eta = equilibrium.edge_angles
    if cutsets is None:
        cutsets = enumerate_nonincident_cutsets(topology)
    M = None
    for cut in cutsets:
        sin2 = [math.sin(eta[k]) ** 2 for k in cut]
        bc = [beta(topology, config, equilibrium, k) * math.cos(eta[k]) for k in cut]
        if all(s > b + SLACK for s, b in zip(sin2, bc)):
            if M is None:
                M = m_matrix(topology, config, equilibrium)
            v = cutset_test_vector(topology, config, equilibrium, cut)
            reason = "cut-set with non-incident edges"
            if any(abs(wrap_angle(eta[k])) >= math.pi / 2 for k in cut):
                reason += " (some cut edge outside the security region)"
            return CutsetWitness(edges=tuple(int(k) for k in cut), sin2=sin2, beta_cos=bc,
                                 test_vector_value=float(v @ M @ v),
                                 m_min_eig=float(np.linalg.eigvalsh(M)[0]), reason=reason)
    return None


# -- Jacobian --------------------------------------------------------------------------

INERTIA_KINDS = (ControllerKind.CONVENTIONAL_DROOP, ControllerKind.QUADRATIC_DROOP,
               ControllerKind.REACTIVE_CURRENT)


def closed_loop_jacobian(topology, config, equilibrium):
    """Jacobian of (φ̇, ω̇, V̇) at the equilibrium with u_P = ū_P, u_Q = ū_Q."""
    n = topology.n
    V = equilibrium.V_bar
    eta = equilibrium.edge_angles
    D, D1, absD = topology.incidence, topology.reduced_incidence, topology.abs_incidence
    g = edge_gamma(topology, V)
    s, c = np.sin(eta), np.cos(eta)
    dP_dphi = (D * (g * c)) @ D1.T
    dP_dV = (D * (g * s)) @ absD.T / V[None, :]
    dQ_dphi = (absD * (g * s)) @ D1.T
    A = loopy_laplacian(topology, c)
    dQ_dV = np.diag(A @ V) + V[:, None] * A
    dfdV, dfdQ = voltage_field_jacobian(config, V, equilibrium.Q_bar, equilibrium.u_Q_bar)
    TP = config.T_P[:, None]
    TQ = config.T_Q[:, None]
    KP = config.K_P[:, None]
    J = np.zeros((3 * n - 1, 3 * n - 1))
    ip, iw, iv = slice(0, n - 1), slice(n - 1, 2 * n - 1), slice(2 * n - 1, 3 * n - 1)
    J[ip, iw] = topology.e_matrix.T
    J[iw, ip] = -KP * dP_dphi / TP
    J[iw, iw] = -np.diag(1.0 / config.T_P)
    J[iw, iv] = -KP * dP_dV / TP
    J[iv, ip] = dfdQ @ dQ_dphi / TQ
    J[iv, iv] = (dfdV + dfdQ @ dQ_dV) / TQ
    return J


def port_hamiltonian_factors(topology, config, equilibrium):
    """(𝒥, ℛ) with 𝒥 skew-symmetric, ℛ symmetric PSD, and
    Jacobian = (𝒥 - ℛ)·Hessian at the equilibrium."""
    n = topology.n
    E = topology.e_matrix
    ip, iw, iv = slice(0, n - 1), slice(n - 1, 2 * n - 1), slice(2 * n - 1, 3 * n - 1)
    kp_over_tp = config.K_P / config.T_P
    Jm = np.zeros((3 * n - 1, 3 * n - 1))
    Jm[ip, iw] = E.T * kp_over_tp[None, :]
    Jm[iw, ip] = -kp_over_tp[:, None] * E
    Rm = np.zeros_like(Jm)
    Rm[iw, iw] = np.diag(config.K_P / config.T_P**2)
    X, _ = dissipation_matrices(config, equilibrium.V_bar)
    Rm[iv, iv] = X
    return Jm, Rm


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray
    max_real: float
    unstable: bool
    supported: bool
    factorization_residual: float
    note: str = ""


def jacobian_instability_check(topology, config, equilibrium):
    """Spectrum of the closed-loop Jacobian with u = ū.

    The instability claim backed by the Hessian inertia argument covers the
    ConventionalDroop, QuadraticDroop and ReactiveCurrent kinds. For EArp the
    spectrum is still computed but labelled informational.
    """
    J = closed_loop_jacobian(topology, config, equilibrium)
    Jm, Rm = port_hamiltonian_factors(topology, config, equilibrium)
    Hf = full_hessian(topology, config, equilibrium, equilibrium.phi_bar(), equilibrium.V_bar)
    residual = float(np.max(np.abs(J - (Jm - Rm) @ Hf)) / max(1.0, np.max(np.abs(J))))
    eig = np.linalg.eigvals(J)
    max_real = float(np.max(eig.real))
    supported = config.kind in INERTIA_KINDS
    return SpectrumReport(
        eigenvalues=eig[np.lexsort((eig.imag, eig.real))],
        max_real=max_real,
        unstable=max_real > UNSTABLE_REAL_PART,
        supported=supported,
        factorization_residual=residual,
        note="" if supported else "informational: the inertia argument does not cover this kind",
    )


# -- combined certificate -------------------------------------------------------------

@dataclass
class Certificate:
    verdict: Verdict
    gershgorin: GershgorinReport
    hessian_min_eig: float
    hessian_pd: bool
    cutset_witness: CutsetWitness | None
    spectrum: SpectrumReport | None
    notes: list = field(default_factory=list)

    def to_dict(self):
        w = self.cutset_witness
        sp = self.spectrum
        return {
            "verdict": self.verdict.value,
            "gershgorin": {
                "passed": self.gershgorin.passed,
                "reason": self.gershgorin.reason,
                "rows": [
                    {"node": r.node + 1, "m_ii": r.m_ii, "radius": r.radius, "passed": r.passed}
                    for r in self.gershgorin.rows
                ],
            },
            "hessian_min_eig": self.hessian_min_eig,
            "hessian_pd": self.hessian_pd,
            "cutset_witness": None if w is None else {
                "edges": [k + 1 for k in w.edges],
                "sin2": w.sin2,
                "beta_cos": w.beta_cos,
                "test_vector_value": w.test_vector_value,
                "m_min_eig": w.m_min_eig,
                "reason": w.reason,
            },
            "jacobian": None if sp is None else {
                "eigenvalues": [[float(z.real), float(z.imag)] for z in sp.eigenvalues],
                "max_real": sp.max_real,
                "unstable": sp.unstable,
                "supported": sp.supported,
                "factorization_residual": sp.factorization_residual,
                "note": sp.note,
            },
            "notes": list(self.notes),
        }


def certify(topology, config, equilibrium, cutsets=None):
    """Run every check and combine them into a single verdict.

    ConvexCertified needs the Gershgorin test; UnstableCertified needs a
    cut-set witness. Anything else is Inconclusive, with the eigenvalue
    evidence recorded in ``notes``.
    """
    gersh = gershgorin_convexity_check(topology, config, equilibrium)
    lam_min, pd = hessian_pd_check(topology, config, equilibrium)
    witness = instability_certificate(topology, config, equilibrium, cutsets)
    spectrum = jacobian_instability_check(topology, config, equilibrium)
    notes = []
    if gersh.passed:
        verdict = Verdict.CONVEX
        if not pd:
            notes.append("Gershgorin passed but the Hessian is not positive definite (numerical boundary)")
    elif witness is not None:
        verdict = Verdict.UNSTABLE
    else:
        verdict = Verdict.INCONCLUSIVE
        notes.append("Hessian positive definite by eigenvalues" if pd
                     else "Hessian has a non-positive eigenvalue")
    if not equilibrium.in_security_region:
        notes.append("equilibrium outside the security region |η| < π/2")
    return Certificate(verdict=verdict, gershgorin=gersh, hessian_min_eig=lam_min, hessian_pd=pd,
                       cutset_witness=witness, spectrum=spectrum, notes=notes)
