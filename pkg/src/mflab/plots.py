"""Static figures written to PNG files (Agg backend, no display needed)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path, description: str) -> None:
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None, "Description": description})
    plt.close(fig)


def _triangulation(mesh) -> mtri.Triangulation:
    return mtri.Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.triangles)


def plot_field(mesh, values, path, title: str = "", description: str = "", atoms=()) -> None:
    """Filled contour plot of a nodal field with optional atom markers."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 4.2))
        tc = ax.tricontourf(_triangulation(mesh), values, levels=24, cmap="viridis")
        fig.colorbar(tc, ax=ax, shrink=0.85)
        for a in atoms:
            ax.plot(a.x, a.y, marker="x", color="w" if a.alpha < 0 else "r", ms=6)
        ax.set_aspect("equal")
        ax.grid(False)
        ax.set_title(title)
        _save(fig, path, description)


def plot_eigenfunctions(mesh, vectors, nu_hat, path, description: str = "") -> None:
    """One panel per eigenfunction, zero level drawn in black."""
    k = vectors.shape[1]
    tri = _triangulation(mesh)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, k, figsize=(3.6 * k, 3.4), squeeze=False)
        for j, ax in enumerate(axes[0]):
            v = vectors[:, j]
            lim = float(np.abs(v).max()) or 1.0
            ax.tricontourf(tri, v, levels=np.linspace(-lim, lim, 25), cmap="RdBu_r")
            if v.min() < 0 < v.max():
                ax.tricontour(tri, v, levels=[0.0], colors="k", linewidths=0.8)
            ax.set_aspect("equal")
            ax.grid(False)
            ax.set_title(f"nu_hat = {nu_hat[j]:.4g}")
        _save(fig, path, description)


def plot_branch(branch, path, description: str = "") -> None:
    """max u and the shifted eigenvalues along a branch against ρ."""
    rows = np.array(
        [(s.rho, s.solution.max_u, s.nu1_hat, s.nu2_hat, s.constrained_nu_hat) for s in branch.samples]
    ).reshape(-1, 5)
    from .weights import thresholds

    t4, t8 = thresholds(branch.alpha)
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(8.4, 3.4))
        a1.plot(rows[:, 0], rows[:, 1], "o-", ms=3)
        a1.set_xlabel("rho")
        a1.set_ylabel("max u")
        for lab, col in (("nu1_hat", 2), ("nu2_hat", 3), ("constrained", 4)):
            a2.plot(rows[:, 0], rows[:, col], "o-", ms=3, label=lab)
        a2.axhline(0.0, color="k", lw=0.6)
        for t in (t4, t8):
            a1.axvline(t, color="0.5", ls=":")
            a2.axvline(t, color="0.5", ls=":")
        a2.set_xlabel("rho")
        a2.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path, description)


def plot_profile(profile, path, description: str = "") -> None:
    """Rearrangement functionals F, P and J against the mass variable s."""
    s = profile.mu
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10.0, 3.0))
        for ax, vals, lab in zip(axes, (profile.F, profile.P, profile.J), ("F", "P", "J")):
            ax.plot(s, vals, lw=1.2)
            ax.set_xlabel("s")
            ax.set_title(lab)
        fig.tight_layout()
        _save(fig, path, description)


def plot_radial(r, values, path, ylabel: str = "value", description: str = "") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.2))
        ax.plot(r, values, lw=1.2)
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_xlabel("r")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        _save(fig, path, description)
