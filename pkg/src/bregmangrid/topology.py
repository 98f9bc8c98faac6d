"""Microgrid graph: incidence matrices, edge/shunt susceptances and the loopy Laplacian.

Nodes are 0-based internally. Node ``n - 1`` is the angle reference used by
:func:`to_phi`. Edges are stored sorted by ``(min endpoint, max endpoint)`` and
the incidence column of edge ``k ~ {i, j}`` (``i < j``) carries ``+1`` at ``i``
and ``-1`` at ``j``.
"""
from __future__ import annotations

import json
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import TopologyError, require_positive


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class NetworkTopology:
    """Immutable network-reduced microgrid graph.

    Parameters
    ----------
    n : int
        Number of nodes.
    edges : sequence of (i, j, b)
        0-based endpoints and the edge susceptance ``B_ij > 0``.
    shunt : sequence of float
        Per-node shunt susceptance ``B̂_ii >= 0``.
    allow_zero_shunts : bool
        The standing assumption requires at least one positive shunt. Pass
        True to build shunt-free graphs (plain weighted Laplacians).
    """

    def __init__(self, n, edges, shunt, *, allow_zero_shunts=False):
        n = int(n)
        if n < 1:
            raise TopologyError("a network needs at least one node")
        shunt = np.asarray(shunt, dtype=float).reshape(-1)
        if shunt.shape != (n,):
            raise TopologyError(f"expected {n} shunt values, got {shunt.shape[0]}")
        if np.any(~np.isfinite(shunt)) or np.any(shunt < 0):
            raise TopologyError("shunt susceptances must be finite and >= 0")
        if not allow_zero_shunts and not np.any(shunt > 0):
            raise TopologyError("at least one shunt susceptance must be positive")

        seen = {}
        for i, j, b in edges:
            i, j, b = int(i), int(j), float(b)
            if not (0 <= i < n and 0 <= j < n):
                raise TopologyError(f"edge ({i}, {j}) references an unknown node")
            if i == j:
                raise TopologyError(f"self-loop at node {i}")
            if not (np.isfinite(b) and b > 0):
                raise TopologyError(f"edge ({i}, {j}) needs a positive susceptance, got {b}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise TopologyError(f"duplicate edge {key}; pre-sum parallel susceptances")
            seen[key] = b
        keys = sorted(seen)

        self.n = n
        self.m = len(keys)
        self.edge_nodes = np.array(keys, dtype=int).reshape(self.m, 2)
        self.edge_nodes.setflags(write=False)
        self.edge_susceptance = _frozen([seen[k] for k in keys])
        self.shunt_susceptance = _frozen(shunt)

        D = np.zeros((n, self.m))
        D[self.edge_nodes[:, 0], np.arange(self.m)] = 1.0
        D[self.edge_nodes[:, 1], np.arange(self.m)] = -1.0
        self.incidence = _frozen(D)

        if n > 1:
            D1 = D[:-1]
            if np.linalg.matrix_rank(D1 @ D1.T) < n - 1:
                raise TopologyError("network graph is not connected")

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_dict(cls, data, **kwargs):
        """Build from the JSON network schema (1-based consecutive node ids)."""
        try:
            nodes = data["nodes"]
            ids = [int(node["id"]) for node in nodes]
            if sorted(ids) != list(range(1, len(ids) + 1)):
                raise TopologyError("node ids must be consecutive integers starting at 1")
            shunt = np.zeros(len(ids))
            for node in nodes:
                shunt[int(node["id"]) - 1] = float(node.get("shunt_b", 0.0))
            edges = [(int(e["from"]) - 1, int(e["to"]) - 1, float(e["b"])) for e in data.get("edges", [])]
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, TopologyError):
                raise
            raise TopologyError(f"malformed network description: {exc!r}") from exc
        return cls(len(ids), edges, shunt, **kwargs)

    @classmethod
    def from_json(cls, path, **kwargs):
        with open(Path(path), encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), **kwargs)

    def to_dict(self):
        return {
            "nodes": [{"id": i + 1, "shunt_b": float(b)} for i, b in enumerate(self.shunt_susceptance)],
            "edges": [
                {"from": int(i) + 1, "to": int(j) + 1, "b": float(b)}
                for (i, j), b in zip(self.edge_nodes, self.edge_susceptance)
            ],
        }

    # -- derived matrices -----------------------------------------------------

    @cached_property
    def reduced_incidence(self):
        """D₁: the incidence matrix without the reference row ``n - 1``."""
        return _frozen(self.incidence[:-1])

    @cached_property
    def abs_incidence(self):
        return _frozen(np.abs(self.incidence))

    @cached_property
    def diag_term(self):
        """B_ii = B̂_ii + Σ_{j∈N_i} B_ij."""
        return _frozen(self.shunt_susceptance + self.abs_incidence @ self.edge_susceptance)

    @cached_property
    def e_matrix(self):
        """E = [I_{n-1}; -1ᵀ], so that E·D₁ = D."""
        return _frozen(np.vstack([np.eye(self.n - 1), -np.ones((1, self.n - 1))]))

    @cached_property
    def susceptance_matrix(self):
        """Symmetric n×n matrix with B_ij off the diagonal (zero where no edge)."""
        B = np.zeros((self.n, self.n))
        i, j = self.edge_nodes[:, 0], self.edge_nodes[:, 1]
        B[i, j] = self.edge_susceptance
        B[j, i] = self.edge_susceptance
        return _frozen(B)

    def neighbors(self, i):
        """Pairs (edge index, other endpoint) incident to node ``i``."""
        out = []
        for k, (a, b) in enumerate(self.edge_nodes):
            if a == i:
                out.append((k, int(b)))
            elif b == i:
                out.append((k, int(a)))
        return out

    def is_tree(self):
        return self.m == self.n - 1

    def laplacian(self, weighted=False):
        """Graph Laplacian D·W·Dᵀ, unit weights unless ``weighted``."""
        w = self.edge_susceptance if weighted else np.ones(self.m)
        return (self.incidence * w) @ self.incidence.T

    def edge_angles(self, theta):
        """η = Dᵀθ."""
        return self.incidence.T @ np.asarray(theta, dtype=float)

    def __repr__(self):
        return f"NetworkTopology(n={self.n}, m={self.m})"


def absolute_incidence(topology):
    """|D|, the entry-wise absolute value of the incidence matrix."""
    return np.abs(topology.incidence)


def edge_gamma(topology, V):
    """Vector of γ_k(V) = V_i V_j B_ij."""
    V = require_positive(V)
    i, j = topology.edge_nodes[:, 0], topology.edge_nodes[:, 1]
    return V[i] * V[j] * topology.edge_susceptance


def gamma(topology, V):
    """Γ(V) = diag(γ_1(V), ..., γ_m(V))."""
    return np.diag(edge_gamma(topology, V))


def loopy_laplacian(topology, c):
    """𝒜(c): B_ii on the diagonal, -B_ij c_k at (i, j) for edge k ~ {i, j}."""
    c = np.asarray(c, dtype=float).reshape(-1)
    if c.shape != (topology.m,):
        raise ValueError(f"expected {topology.m} cosine values, got {c.shape[0]}")
    A = np.diag(topology.diag_term).copy()
    i, j = topology.edge_nodes[:, 0], topology.edge_nodes[:, 1]
    off = -topology.edge_susceptance * c
    A[i, j] = off
    A[j, i] = off
    return A


def wrap_angle(x):
    """Map angles to (-π, π]."""
    x = np.asarray(x, dtype=float)
    return np.pi - np.mod(np.pi - x, 2 * np.pi)


def to_phi(theta):
    """Relative angles φ_i = θ_i - θ_n, i = 1..n-1."""
    theta = np.asarray(theta, dtype=float)
    return theta[:-1] - theta[-1]


def from_phi(phi):
    """Angles with the reference node pinned at zero."""
    return np.append(np.asarray(phi, dtype=float), 0.0)
