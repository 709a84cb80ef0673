"""Structured grids, quadrature and finite-difference Schrödinger operators.

Three domain kinds are supported:

* ``interval``  -- ``[a, b]`` with a 3-point stencil,
* ``rectangle`` -- ``[a1, b1] x [a2, b2]`` with a 5-point stencil (row-major
  node ordering, x index slowest),
* ``radial``    -- ``[r_min, r_max]`` in dimension ``d``; operators act on the
  reduced function ``w = sqrt(c_d) r^{(d-1)/2} psi`` so that the s-channel of
  ``-Delta`` becomes ``-d^2/dr^2 + alpha_d / r^2``.

Every grid contains its boundary nodes.  Dirichlet boundary nodes carry the
value zero and are excluded from the operator's active node set; Neumann
boundary nodes are active and are closed with a mirror ghost node.  The
resulting non-symmetric stencil ``A`` is symmetrized as
``S = M^{1/2} A M^{-1/2}`` where ``M`` holds the trapezoid weights, so an
operator vector ``v`` and field values ``f`` are related by ``v = sqrt(m) f``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn

BOUNDARY_CONDITIONS = ("dirichlet", "neumann")
KINDS = ("interval", "rectangle", "radial")


def sphere_area(d: int) -> float:
    """Surface area ``c_d`` of the unit sphere in ``R^d`` (``c_1 = 2``)."""
    return 2.0 * math.pi ** (d / 2.0) / gamma_fn(d / 2.0)


def alpha_d(d: int) -> float:
    """Centrifugal coefficient of the s-channel after ``u -> r^{(d-1)/2} u``."""
    return (d - 1) * (d - 3) / 4.0


def channel_alpha(d: int, l: int) -> float:
    """Centrifugal coefficient of angular momentum channel ``l``."""
    return alpha_d(d) + l * (l + d - 2)


def channel_multiplicity(d: int, l: int) -> int:
    """Dimension of the spherical harmonics of degree ``l`` on ``S^{d-1}``."""
    if d == 2:
        return 1 if l == 0 else 2
    return math.comb(l + d - 1, d - 1) - (math.comb(l + d - 3, d - 1) if l >= 2 else 0)


@dataclass(frozen=True)
class _Axis:
    coords: np.ndarray
    h: float
    weights: np.ndarray
    active: np.ndarray
    second_diff: sp.csr_matrix  # raw ghost-mirror stencil of d^2/dx^2 over all nodes


def _make_axis(a: float, b: float, n: int, left: str, right: str) -> _Axis:
    x = np.linspace(a, b, n)
    h = (b - a) / (n - 1)
    w = np.full(n, h)
    w[0] = w[-1] = h / 2.0
    active = np.ones(n, dtype=bool)
    if left == "dirichlet":
        active[0] = False
    if right == "dirichlet":
        active[-1] = False
    main = np.full(n, -2.0)
    upper = np.ones(n - 1)
    lower = np.ones(n - 1)
    # mirror ghost nodes: u_{-1} = u_1, u_n = u_{n-2}
    if left == "neumann":
        upper[0] = 2.0
    if right == "neumann":
        lower[-1] = 2.0
    d2 = sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / h**2
    return _Axis(x, h, w, active, d2)


@dataclass(frozen=True)
class DomainSpec:
    """Structured domain with ``n`` nodes per axis (boundary nodes included).

    ``bounds`` is ``(a, b)`` for intervals and radial domains and
    ``(a1, b1, a2, b2)`` for rectangles.  ``bc`` lists one condition per
    boundary in the same order (left, right[, bottom, top]); a single string
    applies to every boundary.  ``dim`` is the physical dimension of a radial
    domain.
    """

    kind: str
    bounds: tuple
    n: tuple
    bc: tuple
    dim: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown domain kind {self.kind!r}")
        naxes = 2 if self.kind == "rectangle" else 1
        bounds = tuple(float(v) for v in self.bounds)
        if len(bounds) != 2 * naxes:
            raise ValueError(f"{self.kind} needs {2 * naxes} bounds, got {len(bounds)}")
        n = self.n
        n = (int(n),) * naxes if np.isscalar(n) else tuple(int(v) for v in n)
        if len(n) != naxes:
            raise ValueError("n must give one node count per axis")
        bc = self.bc
        bc = (bc,) * (2 * naxes) if isinstance(bc, str) else tuple(bc)
        if len(bc) != 2 * naxes or any(c not in BOUNDARY_CONDITIONS for c in bc):
            raise ValueError(f"bad boundary conditions {self.bc!r}")
        for k in range(naxes):
            if not bounds[2 * k] < bounds[2 * k + 1]:
                raise ValueError("bounds must satisfy a < b on every axis")
            if n[k] < 3:
                raise ValueError("need at least 3 nodes per axis")
        dim = int(self.dim)
        if self.kind == "radial":
            if bounds[0] < 0 or (bounds[0] == 0 and bc[0] != "dirichlet"):
                raise ValueError("radial domains need r_min > 0, or r_min = 0 with a Dirichlet end")
            if dim < 2:
                raise ValueError("radial domains need dimension d >= 2")
        else:
            dim = naxes
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "bc", bc)
        object.__setattr__(self, "dim", dim)

    # -- constructors -------------------------------------------------------
    @classmethod
    def interval(cls, a, b, n, bc="dirichlet") -> "DomainSpec":
        return cls("interval", (a, b), n, bc)

    @classmethod
    def rectangle(cls, a1, b1, a2, b2, n, bc="dirichlet") -> "DomainSpec":
        return cls("rectangle", (a1, b1, a2, b2), n, bc)

    @classmethod
    def radial(cls, r_min, r_max, n, d, bc="dirichlet") -> "DomainSpec":
        return cls("radial", (r_min, r_max), n, bc, d)

    @classmethod
    def ball(cls, r_max, n, d, bc="dirichlet") -> "DomainSpec":
        """Radial grid on ``[0, r_max]``; the reduced function vanishes at the origin."""
        bc = (bc, bc) if isinstance(bc, str) else tuple(bc)
        return cls("radial", (0.0, r_max), n, ("dirichlet", bc[1]), d)

    # -- geometry -------------------------------------------------------------
    @cached_property
    def axes(self) -> tuple:
        return tuple(
            _make_axis(self.bounds[2 * k], self.bounds[2 * k + 1], self.n[k],
                       self.bc[2 * k], self.bc[2 * k + 1])
            for k in range(len(self.n))
        )

    @property
    def shape(self) -> tuple:
        return self.n

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    @property
    def h(self) -> float:
        return max(ax.h for ax in self.axes)

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates: ``(size,)`` for 1D kinds, ``(size, 2)`` for rectangles."""
        if self.kind == "rectangle":
            X, Y = np.meshgrid(self.axes[0].coords, self.axes[1].coords, indexing="ij")
            return np.column_stack([X.ravel(), Y.ravel()])
        return self.axes[0].coords

    @cached_property
    def radius(self) -> np.ndarray:
        """``|x|`` at every node."""
        if self.kind == "rectangle":
            return np.hypot(self.coords[:, 0], self.coords[:, 1])
        return np.abs(self.coords)

    @cached_property
    def active(self) -> np.ndarray:
        """Nodes that are not Dirichlet boundary nodes."""
        if self.kind == "rectangle":
            return np.logical_and.outer(self.axes[0].active, self.axes[1].active).ravel()
        return self.axes[0].active.copy()

    @cached_property
    def mass(self) -> np.ndarray:
        """Trapezoid weights of the stencil (reduced variable for radial domains)."""
        if self.kind == "rectangle":
            return np.outer(self.axes[0].weights, self.axes[1].weights).ravel()
        return self.axes[0].weights.copy()

    @cached_property
    def _cell_edges(self) -> tuple:
        ax = self.axes[0]
        lo = np.maximum(ax.coords - ax.h / 2.0, self.bounds[0])
        hi = np.minimum(ax.coords + ax.h / 2.0, self.bounds[1])
        return lo, hi

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights (volume elements).  They sum to the domain volume."""
        if self.kind == "radial":
            lo, hi = self._cell_edges
            d = self.dim
            return sphere_area(d) / d * (hi**d - lo**d)
        return self.mass

    @property
    def volume(self) -> float:
        if self.kind == "radial":
            d = self.dim
            a, b = self.bounds
            return sphere_area(d) / d * (b**d - a**d)
        return float(np.prod([self.bounds[2 * k + 1] - self.bounds[2 * k] for k in range(len(self.n))]))

    def refined(self, factor: int = 2) -> "DomainSpec":
        """Same domain with the spacing divided by ``factor``."""
        n = tuple((m - 1) * factor + 1 for m in self.n)
        return DomainSpec(self.kind, self.bounds, n, self.bc, self.dim)

    def node_slice(self, lo: int, hi: int) -> "DomainSpec":
        """Sub-interval made of nodes ``lo..hi-1`` (1D kinds only, Dirichlet ends)."""
        if self.kind == "rectangle":
            raise ValueError("node_slice is defined for 1D domains")
        x = self.coords
        return DomainSpec(self.kind, (x[lo], x[hi - 1]), hi - lo, "dirichlet", self.dim)

    def node_box(self, ix: tuple, iy: tuple) -> "DomainSpec":
        """Sub-rectangle made of node index ranges ``ix`` and ``iy`` (half-open)."""
        x, y = self.axes[0].coords, self.axes[1].coords
        return DomainSpec("rectangle", (x[ix[0]], x[ix[1] - 1], y[iy[0]], y[iy[1] - 1]),
                          (ix[1] - ix[0], iy[1] - iy[0]), "dirichlet")

    def digest(self) -> str:
        return f"{self.kind}:{self.bounds}:{self.n}:{self.bc}:{self.dim}"


@dataclass(frozen=True)
class Field:
    """Real values sampled at the nodes of a domain."""

    domain: DomainSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.size != self.domain.size:
            raise ValueError(f"field has {v.size} values, domain has {self.domain.size} nodes")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def weights(self) -> np.ndarray:
        return self.domain.weights

    @classmethod
    def from_function(cls, domain: DomainSpec, fn: Callable) -> "Field":
        return cls(domain, fn(domain.coords))

    @classmethod
    def zeros(cls, domain: DomainSpec) -> "Field":
        return cls(domain, np.zeros(domain.size))

    def with_values(self, values) -> "Field":
        return Field(self.domain, values)

    def grid_values(self) -> np.ndarray:
        return self.values.reshape(self.domain.shape)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __add__(self, other: "Field") -> "Field":
        _check_same(self, other)
        return Field(self.domain, self.values + other.values)

    def __sub__(self, other: "Field") -> "Field":
        _check_same(self, other)
        return Field(self.domain, self.values - other.values)

    def __mul__(self, c) -> "Field":
        if isinstance(c, Field):
            _check_same(self, c)
            return Field(self.domain, self.values * c.values)
        return Field(self.domain, self.values * c)

    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return Field(self.domain, -self.values)

    # -- CSV ---------------------------------------------------------------
    def to_csv(self, path) -> None:
        dom = self.domain
        header = (f"# domain={dom.kind} n={','.join(map(str, dom.n))} bc={','.join(dom.bc)} "
                  f"d={dom.dim} bounds={','.join(repr(b) for b in dom.bounds)}")
        coords = dom.coords.reshape(dom.size, -1)
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(dom.size):
                cs = ",".join(f"{c:.17g}" for c in coords[i])
                fh.write(f"{i},{cs},{self.values[i]:.17g}\n")

    @classmethod
    def from_csv(cls, path) -> "Field":
        with open(path) as fh:
            header = fh.readline()
            rows = np.loadtxt(fh, delimiter=",", ndmin=2)
        meta = dict(tok.split("=", 1) for tok in header.lstrip("#").split())
        dom = DomainSpec(meta["domain"], tuple(float(b) for b in meta["bounds"].split(",")),
                         tuple(int(v) for v in meta["n"].split(",")),
                         tuple(meta["bc"].split(",")), int(meta.get("d", 1)))
        order = np.argsort(rows[:, 0], kind="stable")
        return cls(dom, rows[order, -1])


def _check_same(f: Field, g: Field) -> None:
    if f.domain != g.domain:
        raise ValueError("fields live on different domains")


def weighted_weights(dom: DomainSpec, weight: float | None = None) -> np.ndarray:
    """Per-node quadrature weights for ``int f |x|^w dx``.

    On radial domains the factor ``|x|^w`` is integrated exactly over each
    node's shell cell, so the rule stays exact for constants for every ``w``.
    A node at the origin gets an infinite weight when ``|x|^w`` is not
    integrable there (``w < 0`` on Cartesian grids, ``w <= -d`` on radial ones).
    """
    if not weight:
        return dom.weights
    w = float(weight)
    if dom.kind == "radial":
        lo, hi = dom._cell_edges
        d = dom.dim
        p = w + d
        with np.errstate(divide="ignore"):
            cell = np.log(hi / lo) if p == 0 else (hi**p - lo**p) / p
        out = sphere_area(d) * cell
        if p <= 0:
            out = np.where(lo == 0, np.inf, out)
        return out
    r = dom.radius
    with np.errstate(divide="ignore"):
        out = np.where(r > 0, r**w, 0.0) * dom.weights
    if w < 0:
        out = np.where(r == 0, np.inf, out)
    return out


def integrate(f: Field, weight: float | None = None) -> float:
    """Quadrature ``sum_i f_i |x_i|^w weight_i`` (see :func:`weighted_weights`).

    Raises when ``|x|^w`` is singular at a node where ``f`` does not vanish.
    """
    ww = weighted_weights(f.domain, weight)
    bad = ~np.isfinite(ww)
    if np.any(f.values[bad] != 0):
        raise ValueError("weight |x|^w is singular at a grid node where f is nonzero")
    return float(np.dot(f.values[~bad], ww[~bad]))


def dirichlet_energy(f: Field) -> float:
    """Forward-difference approximation of ``int |grad f|^2 dx``.

    For interval and rectangle domains this equals ``f^T M A f`` for the free
    Laplacian stencil, i.e. the operator's quadratic form.  On radial domains
    it is the physical energy of ``psi(r)`` with the surface factor
    ``c_d r^{d-1}`` taken at edge midpoints.
    """
    dom = f.domain
    if dom.kind == "rectangle":
        (ax, ay) = dom.axes
        F = f.grid_values()
        ex = (np.diff(F, axis=0) ** 2).sum(axis=0) / ax.h
        ey = (np.diff(F, axis=1) ** 2).sum(axis=1) / ay.h
        return float(np.dot(ex, ay.weights) + np.dot(ey, ax.weights))
    ax = dom.axes[0]
    df2 = np.diff(f.values) ** 2 / ax.h
    if dom.kind == "radial":
        mid = 0.5 * (ax.coords[1:] + ax.coords[:-1])
        return float(np.dot(df2, sphere_area(dom.dim) * mid ** (dom.dim - 1)))
    return float(df2.sum())


def _laplacian_raw(dom: DomainSpec) -> sp.csr_matrix:
    if dom.kind == "rectangle":
        ax, ay = dom.axes
        ix, iy = sp.identity(dom.n[0]), sp.identity(dom.n[1])
        return (sp.kron(ax.second_diff, iy) + sp.kron(ix, ay.second_diff)).tocsr()
    return dom.axes[0].second_diff


@dataclass(frozen=True)
class DiscreteOperator:
    """Symmetric matrix of ``-Delta + sign*V + centrifugal/r^2 + shift`` on active nodes."""

    domain: DomainSpec
    matrix: sp.csr_matrix
    laplacian: sp.csr_matrix
    potential: np.ndarray
    active: np.ndarray
    sqrt_mass: np.ndarray
    sign: int = -1
    shift: float = 0.0
    centrifugal: float | None = None

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def norm(self) -> float:
        """Max absolute row sum, an upper bound on the spectral norm."""
        return float(abs(self.matrix).sum(axis=1).max()) if self.size else 0.0

    @cached_property
    def gershgorin_lower(self) -> float:
        m = self.matrix
        diag = m.diagonal()
        off = np.asarray(abs(m).sum(axis=1)).ravel() - np.abs(diag)
        return float(np.min(diag - off))

    @cached_property
    def bandwidth(self) -> int:
        coo = self.matrix.tocoo()
        return int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0

    def to_vector(self, values) -> np.ndarray:
        """Field values (all nodes) to an operator vector."""
        if isinstance(values, Field):
            values = values.values
        return np.asarray(values, dtype=float)[self.active] * self.sqrt_mass

    def to_values(self, v: np.ndarray) -> np.ndarray:
        """Operator vector(s) to field values on all nodes (zero off the active set)."""
        v = np.asarray(v, dtype=float)
        out = np.zeros((self.domain.size,) + v.shape[1:])
        scale = self.sqrt_mass if v.ndim == 1 else self.sqrt_mass[:, None]
        out[self.active] = v / scale
        return out

    def to_field(self, v: np.ndarray) -> Field:
        return Field(self.domain, self.to_values(v))

    def quadratic_form(self, values) -> float:
        v = self.to_vector(values)
        return float(v @ (self.matrix @ v))

    def kinetic_form(self, values) -> float:
        v = self.to_vector(values)
        return float(v @ (self.laplacian @ v))

    def potential_form(self, values) -> float:
        v = self.to_vector(values)
        return float(np.dot(self.potential, v * v))

    def norm2(self, values) -> float:
        v = self.to_vector(values)
        return float(v @ v)

    def with_potential(self, V: Field, sign: int | None = None) -> "DiscreteOperator":
        """Same kinetic part and active set with a new potential."""
        if V.domain != self.domain:
            raise ValueError("potential lives on a different domain")
        s = self.sign if sign is None else sign
        pot = s * V.values[self.active]
        mat = (self.laplacian + sp.diags(pot + self.shift)).tocsr()
        return DiscreteOperator(self.domain, mat, self.laplacian, pot, self.active,
                                self.sqrt_mass, s, self.shift, self.centrifugal)


def centrifugal_diagonal(r: np.ndarray, alpha: float, h: float) -> np.ndarray:
    """Discrete ``alpha/r^2`` that the 3-point stencil reproduces exactly on ``r^q``.

    ``q = 1/2 + sqrt(alpha + 1/4)`` is the regular zero-energy solution of
    ``-w'' + alpha w / r^2 = 0``.  The coefficient is ``alpha/r^2 + O(h^2/r^4)``
    and keeps a discrete Hardy inequality, which the plain ``alpha/r^2`` loses
    near the origin when ``alpha < 0`` (d = 2).  Nodes whose left neighbour
    would fall below ``r = 0`` use ``alpha/r^2``.
    """
    r = np.asarray(r, dtype=float)
    if alpha < -0.25:
        raise ValueError("centrifugal coefficient must be >= -1/4")
    q = 0.5 + math.sqrt(alpha + 0.25)
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = alpha / r[pos] ** 2
    ok = r - h >= -1e-12 * h
    ok &= pos
    left = np.clip(r[ok] - h, 0.0, None)
    out[ok] = (left**q - 2 * r[ok] ** q + (r[ok] + h) ** q) / (h * h * r[ok] ** q)
    return out


def build_operator(spec: DomainSpec, V: Field | None = None, sign: int = -1,
                   centrifugal: float | None = None, shift: float = 0.0) -> DiscreteOperator:
    """Symmetric finite-difference matrix of ``-Delta + sign*V``.

    Radial domains get the centrifugal term ``alpha/r^2`` with ``alpha_d`` as
    default; passing ``centrifugal`` on other domains is an error.
    """
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    if V is None:
        V = Field.zeros(spec)
    if V.domain != spec:
        raise ValueError("potential is not sampled on this domain")
    if spec.kind != "radial":
        if centrifugal is not None:
            raise ValueError("centrifugal term requires a radial domain")
    elif centrifugal is None:
        centrifugal = alpha_d(spec.dim)
    active = spec.active
    sm = np.sqrt(spec.mass[active])
    raw = -_laplacian_raw(spec)[active][:, active]
    lap = sp.diags(sm) @ raw @ sp.diags(1.0 / sm)
    lap = lap.tocsr()
    # exact symmetry; the similarity transform is symmetric up to rounding
    lap = ((lap + lap.T) * 0.5).tocsr()
    if spec.kind == "radial" and centrifugal:
        cen = centrifugal_diagonal(spec.coords[active], centrifugal, spec.h)
        lap = (lap + sp.diags(cen)).tocsr()
    lap.sort_indices()
    pot = sign * V.values[active]
    mat = (lap + sp.diags(pot + shift)).tocsr()
    mat.sort_indices()
    return DiscreteOperator(spec, mat, lap, pot, active, sm, sign, float(shift), centrifugal)


def restrict_operator(op: DiscreteOperator, mask) -> DiscreteOperator:
    """Dirichlet restriction of ``op`` to the nodes selected by ``mask``.

    ``mask`` is a boolean array over all nodes or a predicate on coordinates.
    Nodes outside the mask are removed, i.e. clamped to zero.
    """
    if callable(mask):
        mask = mask(op.domain.coords)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != op.domain.size:
        raise ValueError("mask size does not match the domain")
    keep = mask[op.active]
    if not keep.any():
        raise ValueError("restriction mask selects no active node")
    idx = np.flatnonzero(keep)
    sub = lambda m: m[idx][:, idx].tocsr()
    active = op.active & mask
    return DiscreteOperator(op.domain, sub(op.matrix), sub(op.laplacian), op.potential[idx],
                            active, op.sqrt_mass[idx], op.sign, op.shift, op.centrifugal)


def reduce_radial(f: Field) -> np.ndarray:
    """Physical radial profile ``psi(r)`` to reduced values ``sqrt(c_d) r^{(d-1)/2} psi``."""
    dom = f.domain
    return np.sqrt(sphere_area(dom.dim)) * dom.coords ** ((dom.dim - 1) / 2.0) * f.values


def unreduce_radial(domain: DomainSpec, w: np.ndarray) -> Field:
    """Inverse of :func:`reduce_radial`.  A node at ``r = 0`` copies its neighbour."""
    r = domain.coords
    scale = np.sqrt(sphere_area(domain.dim)) * r ** ((domain.dim - 1) / 2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(scale > 0, np.asarray(w, dtype=float) / np.where(scale > 0, scale, 1.0), 0.0)
    if r[0] == 0:
        psi[0] = psi[1]
    return Field(domain, psi)
