"""P1 finite element assembly on triangle meshes."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _scatter(mesh, local: np.ndarray) -> sp.csr_matrix:
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def stiffness_matrix(mesh) -> sp.csr_matrix:
    """∫ ∇φ_i · ∇φ_j over the whole mesh (no boundary conditions applied)."""
    g = mesh.gradients
    local = np.einsum("tid,tjd->tij", g, g) * mesh.areas[:, None, None]
    return _scatter(mesh, local)


def mass_matrix(mesh) -> sp.csr_matrix:
    """Consistent P1 mass matrix ∫ φ_i φ_j."""
    base = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _scatter(mesh, mesh.areas[:, None, None] * base[None])


def weighted_mass(mesh, rule, density: np.ndarray) -> sp.csr_matrix:
    """Σ_q hw_q · density_q · φ_i(x_q) φ_j(x_q), i.e. ∫ h·density φ_i φ_j."""
    c = rule.hw * density
    contrib = c[:, None, None] * rule.bary[:, :, None] * rule.bary[:, None, :]
    idx = rule.tri[:, None] * 9 + np.arange(9)[None, :]
    local = np.bincount(idx.ravel(), weights=contrib.ravel(), minlength=9 * mesh.n_triangles)
    return _scatter(mesh, local.reshape(-1, 3, 3))


def weighted_load(mesh, rule, density: np.ndarray) -> np.ndarray:
    """Σ_q hw_q · density_q · φ_i(x_q), i.e. ∫ h·density φ_i."""
    c = rule.hw * density
    return np.bincount(
        mesh.triangles[rule.tri].ravel(), weights=(c[:, None] * rule.bary).ravel(),
        minlength=mesh.n_nodes,
    )


def at_points(mesh, rule, values: np.ndarray) -> np.ndarray:
    """P1 field ``values`` evaluated at the rule's quadrature points."""
    return (values[mesh.triangles[rule.tri]] * rule.bary).sum(axis=1)


def gradient(mesh, values: np.ndarray) -> np.ndarray:
    """Piecewise-constant gradient of a P1 field, shape (M, 2)."""
    return np.einsum("tk,tkd->td", values[mesh.triangles], mesh.gradients)


def energy(mesh, values: np.ndarray, mask: np.ndarray | None = None) -> float:
    """∫ |∇v|², optionally weighted per triangle by ``mask``."""
    g = gradient(mesh, values)
    e = (g**2).sum(axis=1) * mesh.areas
    if mask is not None:
        e = e * mask
    return float(e.sum())
