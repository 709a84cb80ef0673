"""Ground-state transform: positive solutions, vector potentials and global assembly.

A positive solution of ``(-Delta + V + gamma^2) u = 0`` on a window gives the
vector potential ``A = grad u / u`` with ``V + gamma^2 = div A + |A|^2``.
Radial windows are solved in the reduced variable and reported as physical
radial profiles; ``A`` then has the single component ``u'/u`` and
``div A = A' + (d-1) A / r``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import (DomainSpec, Field, _laplacian_raw, alpha_d, build_operator,
                   centrifugal_diagonal, dirichlet_energy, integrate, restrict_operator)
from .spectra import count_below, lowest_eigenvalues


class GaugeError(RuntimeError):
    """Positive solution or gauge representation could not be certified."""


# -- windows as node masks ------------------------------------------------------------

def window_mask(domain: DomainSpec, window) -> np.ndarray:
    """Interior nodes of a window: a bool mask, an open index pair ``(lo, hi)``,
    or any object with ``interval`` (layers, gap layers) or ``mask(domain)``."""
    if window is None:
        return domain.active.copy()
    if hasattr(window, "mask") and callable(window.mask):
        m = window.mask(domain)
    elif hasattr(window, "interval"):
        lo, hi = window.interval
        idx = np.arange(domain.size)
        m = (idx > lo) & (idx < hi)
    elif isinstance(window, tuple) and len(window) == 2 and np.isscalar(window[0]):
        idx = np.arange(domain.size)
        m = (idx > window[0]) & (idx < window[1])
    else:
        m = np.asarray(window, dtype=bool).reshape(-1)
    return m & domain.active


def _erode(domain: DomainSpec, mask: np.ndarray, k: int) -> np.ndarray:
    """Nodes of ``mask`` whose ``k``-neighbourhood (per axis) lies in ``mask``."""
    if domain.kind == "rectangle":
        M = mask.reshape(domain.shape)
        out = M.copy()
        for s in range(1, k + 1):
            for ax in (0, 1):
                for sh in (s, -s):
                    shifted = np.roll(M, sh, axis=ax)
                    edge = [slice(None)] * 2
                    edge[ax] = slice(0, s) if sh > 0 else slice(-s, None)
                    shifted[tuple(edge)] = False
                    out &= shifted
        return out.ravel()
    out = mask.copy()
    for s in range(1, k + 1):
        left = np.concatenate([np.zeros(s, bool), mask[:-s]])
        right = np.concatenate([mask[s:], np.zeros(s, bool)])
        out &= left & right
    return out


def _neighbors(domain: DomainSpec, mask: np.ndarray) -> np.ndarray:
    """Nodes outside ``mask`` adjacent to it through the stencil."""
    A = _laplacian_raw(domain)
    touch = np.asarray(abs(A[mask]).sum(axis=0)).ravel() > 0
    return touch & ~mask


# -- positive solutions ------------------------------------------------------------------

def _reduction_power(domain: DomainSpec) -> np.ndarray:
    if domain.kind != "radial":
        return np.ones(domain.size)
    return domain.coords ** ((domain.dim - 1) / 2.0)


def positive_solution(V: Field, gamma2: float, window=None, boundary=1.0,
                      check: bool = True) -> Field:
    """Positive solution of ``(-Delta + V + gamma^2) u = 0`` inside ``window``.

    The boundary value (default 1, or a callable on coordinates) is imposed on
    the stencil neighbours of the window.  Nodes outside the window and its
    boundary carry the value 1.  The precondition ``H_+ + gamma^2 > 0`` on the
    window is checked by counting, and the result must be positive at every
    window node.
    """
    dom = V.domain
    inner = window_mask(dom, window)
    if not inner.any():
        raise ValueError("window has no interior node")
    if check:
        op = restrict_operator(build_operator(dom, V, +1), inner)
        c = count_below(op, -gamma2)
        if c.count:
            raise GaugeError(f"H_+ + gamma^2 has {c.count} nonpositive eigenvalues on the window")
    bnd = _neighbors(dom, inner)
    bvals = np.ones(dom.size)
    if callable(boundary):
        bvals = np.asarray(boundary(dom.coords), dtype=float).reshape(-1)
    else:
        bvals = bvals * float(boundary)
    scale = _reduction_power(dom)
    A = -_laplacian_raw(dom)
    diag = V.values + gamma2
    if dom.kind == "radial":
        diag = diag + centrifugal_diagonal(dom.coords, alpha_d(dom.dim), dom.h)
    A = (A + sp.diags(diag)).tocsr()
    ii = np.flatnonzero(inner)
    bb = np.flatnonzero(bnd)
    wb = bvals[bb] * scale[bb]
    rhs = -(A[ii][:, bb] @ wb)
    w = spla.spsolve(A[ii][:, ii].tocsc(), rhs)
    vals = np.ones(dom.size)
    vals[bb] = bvals[bb]
    with np.errstate(divide="ignore", invalid="ignore"):
        vals[ii] = w / scale[ii]
    if dom.kind == "radial" and dom.coords[0] == 0:
        # even extension through the origin
        vals[0] = (4.0 * vals[1] - vals[2]) / 3.0
    umin = float(np.min(vals[ii]))
    if not umin > 0 or not np.all(np.isfinite(vals)):
        k = int(ii[np.argmin(vals[ii])])
        raise GaugeError(f"solution is not positive: min u = {umin:.3g} at node {k}")
    return Field(dom, vals)


# -- vector potentials -----------------------------------------------------------------------

@dataclass(frozen=True)
class VectorField:
    """One component per axis (a single radial component on radial grids).

    ``mask`` marks the nodes where the field is defined.
    """

    domain: DomainSpec
    components: tuple
    mask: np.ndarray

    def __post_init__(self):
        comps = tuple(np.asarray(c, dtype=float).reshape(-1) for c in self.components)
        if any(c.size != self.domain.size for c in comps):
            raise ValueError("component size does not match the domain")
        if not all(np.all(np.isfinite(c)) for c in comps):
            raise ValueError("vector field values must be finite")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool).reshape(-1))

    @classmethod
    def zeros(cls, domain: DomainSpec, mask=None) -> "VectorField":
        k = 2 if domain.kind == "rectangle" else 1
        m = np.ones(domain.size, bool) if mask is None else mask
        return cls(domain, tuple(np.zeros(domain.size) for _ in range(k)), m)

    def norm2(self) -> Field:
        return Field(self.domain, sum(c**2 for c in self.components))

    def divergence(self) -> Field:
        return Field(self.domain, _divergence(self.domain, self.components))

    def scaled(self, f: np.ndarray) -> "VectorField":
        return VectorField(self.domain, tuple(f * c for c in self.components), self.mask)

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.domain, tuple(a + b for a, b in zip(self.components, other.components)),
                           self.mask | other.mask)

    def to_csv(self, path) -> None:
        dom = self.domain
        coords = dom.coords.reshape(dom.size, -1)
        with open(path, "w") as fh:
            fh.write(f"# vector domain={dom.kind} n={','.join(map(str, dom.n))} "
                     f"bc={','.join(dom.bc)} d={dom.dim}\n")
            for i in range(dom.size):
                cs = ",".join(f"{c:.17g}" for c in coords[i])
                vs = ",".join(f"{c[i]:.17g}" for c in self.components)
                fh.write(f"{i},{cs},{vs},{int(self.mask[i])}\n")


def _gradient(domain: DomainSpec, values: np.ndarray) -> tuple:
    if domain.kind == "rectangle":
        (ax, ay) = domain.axes
        F = values.reshape(domain.shape)
        gx, gy = np.gradient(F, ax.h, ay.h, edge_order=2)
        return gx.ravel(), gy.ravel()
    return (np.gradient(values, domain.axes[0].h, edge_order=2),)


def _divergence(domain: DomainSpec, comps) -> np.ndarray:
    if domain.kind == "rectangle":
        (ax, ay) = domain.axes
        ux = np.gradient(comps[0].reshape(domain.shape), ax.h, axis=0, edge_order=2)
        uy = np.gradient(comps[1].reshape(domain.shape), ay.h, axis=1, edge_order=2)
        return (ux + uy).ravel()
    a = comps[0]
    div = np.gradient(a, domain.axes[0].h, edge_order=2)
    if domain.kind == "radial":
        r = domain.coords
        with np.errstate(divide="ignore", invalid="ignore"):
            div = div + np.where(r > 0, (domain.dim - 1) * a / np.where(r > 0, r, 1.0),
                                 (domain.dim - 1) * div)
    return div


def _box_gradient(domain: DomainSpec, values: np.ndarray, mask: np.ndarray) -> tuple:
    """Gradient computed inside the bounding box(es) of ``mask`` only, zero elsewhere.

    Differencing never reaches across the window edge, so ``u`` outside the
    window does not leak into ``A``.
    """
    out = [np.zeros(domain.size) for _ in range(2 if domain.kind == "rectangle" else 1)]
    if domain.kind == "rectangle":
        M = mask.reshape(domain.shape)
        ix = np.flatnonzero(M.any(axis=1))
        iy = np.flatnonzero(M.any(axis=0))
        if ix.size == 0:
            return tuple(out)
        box = (slice(ix[0], ix[-1] + 1), slice(iy[0], iy[-1] + 1))
        F = values.reshape(domain.shape)[box]
        for ax, h in enumerate((domain.axes[0].h, domain.axes[1].h)):
            g = np.zeros(domain.shape)
            if F.shape[ax] >= 3:
                g[box] = np.gradient(F, h, axis=ax, edge_order=2)
            out[ax] = np.where(M, g, 0.0).ravel()
        return tuple(out)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return tuple(out)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    for seg in np.split(idx, breaks + 1):
        if seg.size >= 3:
            out[0][seg] = np.gradient(values[seg], domain.axes[0].h, edge_order=2)
    return tuple(out)


def vector_potential(u: Field, mask=None) -> VectorField:
    """``A = grad u / u`` by centred differences, one-sided at the window edges.

    ``mask`` (any window accepted by :func:`window_mask`, or a node mask) limits
    ``A`` to a window; it is zero outside.
    """
    vals = u.values
    if mask is None:
        m = np.ones(u.domain.size, bool)
    elif isinstance(mask, np.ndarray) and mask.dtype == bool:
        m = mask.reshape(-1)
    else:
        m = window_mask(u.domain, mask)
    if np.any(vals[m] <= 0):
        raise GaugeError("vector_potential needs u > 0 at every node")
    grads = _box_gradient(u.domain, vals, m) if mask is not None else _gradient(u.domain, vals)
    with np.errstate(divide="ignore", invalid="ignore"):
        comps = tuple(np.where(m, g / np.where(m, vals, 1.0), 0.0) for g in grads)
    return VectorField(u.domain, comps, m)


def gauge_residual(V: Field, gamma2: float, A: VectorField, margin: int = 2) -> float:
    """``max |V + gamma^2 - div A - |A|^2|`` over ``A``'s nodes at least ``margin`` nodes inside."""
    dom = V.domain
    if A.domain != dom:
        raise ValueError("A and V live on different grids")
    inner = _erode(dom, A.mask, margin)
    if dom.kind == "radial" and dom.coords[0] == 0:
        inner[:margin] = False
    if not inner.any():
        return 0.0
    res = V.values + gamma2 - A.divergence().values - A.norm2().values
    return float(np.max(np.abs(res[inner])))


def l3_check(A: VectorField, gamma: float, phi: Field, C: float = 4.0):
    """``int phi^2 |A|^2 <= C (gamma^2 int phi^2 + int |grad phi|^2)``; also reports the minimal C."""
    from .bounds import BoundReport, grid_digest

    if np.any(phi.values[~A.mask] != 0):
        raise ValueError("phi must vanish outside A's window")
    lhs = integrate(Field(phi.domain, phi.values**2 * A.norm2().values))
    base = gamma**2 * integrate(Field(phi.domain, phi.values**2)) + dirichlet_energy(phi)
    emp = lhs / base if base > 0 else 0.0
    return BoundReport.make("l3", lhs, C * base, float(C), grid_digest(phi.domain, phi),
                            slack=1e-12 * max(1.0, base), empirical_C=emp)


# -- global assembly -------------------------------------------------------------------------

@dataclass
class GaugeDecomposition:
    V0: Field
    A: VectorField
    W: Field
    V1: Field
    weighted_norm: float
    reconstruction_residual: float
    cross_term: float
    window_residuals: list = field(default_factory=list)
    levels: list = field(default_factory=list)

    def manifest(self) -> dict:
        return {"weighted_norm": self.weighted_norm,
                "reconstruction_residual": self.reconstruction_residual,
                "cross_term": self.cross_term, "window_residuals": self.window_residuals,
                "levels": self.levels}

    def dump(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.V0.to_csv(d / "V0.csv")
        self.W.to_csv(d / "W.csv")
        self.V1.to_csv(d / "V1.csv")
        self.A.to_csv(d / "A.csv")
        (d / "manifest.json").write_text(json.dumps(self.manifest(), sort_keys=True, indent=2))


def window_level(V: Field, window, level: float, margin: float) -> float:
    """``gamma^2 = max(level, margin - lowest(H_+ on window))``, strictly above the spectrum bottom."""
    dom = V.domain
    mask = window_mask(dom, window)
    lam = float(lowest_eigenvalues(restrict_operator(build_operator(dom, V, +1), mask), 1)[0])
    return max(level, margin - lam)


def window_potentials(V: Field, cov, margin: float | None = None) -> tuple:
    """Per-window positive solutions and vector potentials for a layer covering.

    Layer ``n`` uses ``gamma^2 >= eps_{j(n)}`` and gap layers ``gamma^2 >= 0``,
    each raised when needed so that ``H_+ + gamma^2`` stays positive definite
    by ``margin`` (default ``1e-3 (1 + ||V||_inf)``).
    """
    margin = 1e-3 * (1.0 + V.sup_norm()) if margin is None else margin
    levels_l, A_l, levels_g, A_g = [], [], [], []
    eps = {l.index: l.epsilon for l in cov.layers}
    for l in cov.layers:
        g2 = window_level(V, l, eps[l.parent], margin)
        u = positive_solution(V, g2, l)
        levels_l.append(g2)
        A_l.append(vector_potential(u, _closure(V.domain, l)))
    for g in cov.gaps:
        g2 = window_level(V, g, 0.0, margin)
        u = positive_solution(V, g2, g)
        levels_g.append(g2)
        A_g.append(vector_potential(u, _closure(V.domain, g)))
    return A_l, A_g, levels_l, levels_g


def _closure(domain: DomainSpec, s) -> np.ndarray:
    idx = np.arange(domain.size)
    return (idx >= s.lo) & (idx <= s.hi)


def assemble_global(V: Field, cov, pou, A_layers: list, A_gaps: list, levels_layers: list,
                    levels_gaps: list, window_tol: float | None = None) -> GaugeDecomposition:
    """``A = sum(phi_n A_n + psi_n tA_n)``, ``W = -sum gamma_n^2 phi_n - sum tgamma_m^2 psi_m``.

    ``V1`` is taken from the product-rule identity
    ``V1 = V + sum(A_n . grad phi_n + tA_n . grad psi_n) + |A|^2 - sum(phi_n |A_n|^2 + psi_n |tA_n|^2)``
    and ``V0 = V - V1 + W``.  The reconstruction residual compares ``V`` with
    ``V0 + div A + |A|^2`` where ``div A`` is differentiated directly, so it
    measures the discretization error of the whole pipeline.
    """
    dom = V.domain
    h = dom.h
    if window_tol is None:
        window_tol = 100.0 * h * (1.0 + V.sup_norm() + max(levels_layers + levels_gaps + [0.0]))
    residuals = []
    for A, g2 in zip(A_layers + A_gaps, levels_layers + levels_gaps):
        res = gauge_residual(V, g2, A)
        residuals.append(res)
        if res > window_tol:
            raise GaugeError(f"window gauge residual {res:.3g} exceeds {window_tol:.3g}")
    A = VectorField.zeros(dom)
    W = np.zeros(dom.size)
    cross = np.zeros(dom.size)
    own = np.zeros(dom.size)
    for f, An, g2 in zip(list(pou.phis) + list(pou.psis), A_layers + A_gaps,
                         levels_layers + levels_gaps):
        fv = f.values
        A = A + An.scaled(fv)
        W -= g2 * fv
        grads = _gradient(dom, fv)
        cross += sum(gc * ac for gc, ac in zip(grads, An.components))
        own += fv * An.norm2().values
    A = VectorField(dom, A.components, np.ones(dom.size, bool))
    a2 = A.norm2().values
    V1 = V.values + cross + a2 - own
    V0 = V.values - V1 + W
    recon = V.values - (V0 + A.divergence().values + a2)
    inner = _erode(dom, dom.active, 2)
    if dom.kind == "radial" and dom.coords[0] == 0:
        inner[:2] = False
    rr = float(np.max(np.abs(recon[inner]))) if inner.any() else 0.0
    wexp = 1 - dom.dim if dom.kind == "radial" else 0.0
    wn = integrate(Field(dom, np.abs(V0) + a2), wexp)
    ct = integrate(Field(dom, np.abs(V.values - V1)), wexp)
    return GaugeDecomposition(Field(dom, V0), A, Field(dom, W), Field(dom, V1), wn, rr, ct,
                              residuals, levels_layers + levels_gaps)


def gauge_pipeline(V: Field, tol: float | None = None) -> tuple:
    """Covering, partition, window potentials and assembly for a radial ``V``."""
    from .decompose import build_partition, greedy_cover

    dom = V.domain
    cov = greedy_cover(build_operator(dom, V, +1), build_operator(dom, V, -1), tol)
    pou = build_partition(cov)
    A_l, A_g, lev_l, lev_g = window_potentials(V, cov)
    dec = assemble_global(V, cov, pou, A_l, A_g, lev_l, lev_g)
    return cov, pou, dec
