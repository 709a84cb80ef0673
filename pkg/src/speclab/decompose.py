"""Cutoff profiles, localization, greedy coverings and partitions of unity.

Radial domains are handled in the reduced variable throughout: an
eigenfunction returned by :mod:`speclab.spectra` on a radial grid holds
``w = sqrt(c_d) r^{(d-1)/2} psi``, so ``sum w^2 * mass`` is the physical
``L^2`` norm.  Layers are open intervals ``(r[lo], r[hi])`` whose endpoints are
grid nodes; the Dirichlet restriction to a layer keeps its strictly interior
nodes, so widths, overlaps and distances are exact multiples of ``h``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import DiscreteOperator, DomainSpec, Field, build_operator, restrict_operator
from .spectra import ground_state, lowest_eigenvalues

log = logging.getLogger(__name__)


class LocalizationError(RuntimeError):
    """A verification eigensolve contradicts a localization guarantee."""


class CoveringError(RuntimeError):
    """A covering postcondition failed; ``window`` names the offending set."""

    def __init__(self, message: str, window=None):
        super().__init__(message if window is None else f"{message} (window {window})")
        self.window = window


# -- cutoff profiles ------------------------------------------------------------

@dataclass(frozen=True)
class CutoffProfile:
    """Piecewise-linear cutoff: 1 for ``|t| < L``, 0 for ``|t| >= 3L``, ``3/2 - |t|/(2L)`` between.

    ``center`` is a scalar for 1D profiles (applied to coordinates, or to the
    radius via :meth:`radial`) or a point for the 2D tensor version, which is
    the minimum of the two axis profiles.
    """

    center: float | tuple
    L: float

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError("L must be positive")
        c = self.center
        object.__setattr__(self, "center", tuple(float(v) for v in c) if np.ndim(c) else float(c))

    @staticmethod
    def _profile(t: np.ndarray, L: float) -> np.ndarray:
        return np.clip(1.5 - np.abs(t) / (2.0 * L), 0.0, 1.0)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if isinstance(self.center, tuple):
            x = x.reshape(-1, len(self.center))
            vals = [self._profile(x[:, k] - c, self.L) for k, c in enumerate(self.center)]
            return np.minimum.reduce(vals)
        return self._profile(x - self.center, self.L)

    def radial(self, r) -> np.ndarray:
        """Layer version ``phi(|x|)`` centred at radius ``center``."""
        return self._profile(np.asarray(r, dtype=float) - self.center, self.L)

    def on(self, domain: DomainSpec) -> Field:
        """Sample on a grid (radial grids use the radius)."""
        return Field(domain, self.radial(domain.coords) if domain.kind == "radial"
                     else self(domain.coords))

    @property
    def support_width(self) -> float:
        return 6.0 * self.L

    def gradient_energy(self) -> float:
        """Exact ``int |grad phi|^2`` on the line (1D) or the plane (2D)."""
        if isinstance(self.center, tuple):
            # slope 1/(2L) on the frame between the squares of half-width L and 3L
            return (36.0 - 4.0) * self.L**2 / (4.0 * self.L**2)
        return 2.0 * 2.0 * self.L / (4.0 * self.L**2)


def cutoff_profile(center, L: float) -> CutoffProfile:
    return CutoffProfile(center, L)


# -- IMS localization -------------------------------------------------------------

def _op_values(op: DiscreteOperator, psi) -> np.ndarray:
    return np.asarray(psi.values if isinstance(psi, Field) else psi, dtype=float)


def _edge_terms(dom: DomainSpec, phi: np.ndarray, u: np.ndarray):
    """Per-edge ``(dphi)^2 / h * weight`` and the left/right node values of ``u``."""
    if dom.kind == "rectangle":
        ax, ay = dom.axes
        P, U = phi.reshape(dom.shape), u.reshape(dom.shape)
        gx = np.diff(P, axis=0) ** 2 / ax.h * ay.weights[None, :]
        gy = np.diff(P, axis=1) ** 2 / ay.h * ax.weights[:, None]
        left = np.concatenate([U[:-1, :].ravel(), U[:, :-1].ravel()])
        right = np.concatenate([U[1:, :].ravel(), U[:, 1:].ravel()])
        return np.concatenate([gx.ravel(), gy.ravel()]), left, right
    h = dom.axes[0].h
    return np.diff(phi) ** 2 / h, u[:-1], u[1:]


@dataclass(frozen=True)
class IMSTerms:
    lhs: float          # quadratic form of phi*psi
    rhs: float          # sum |grad phi|^2 psi^2 (left-node rule) + lambda ||phi psi||^2
    rhs_exact: float    # discrete identity with psi_i psi_j on each edge
    norm2: float

    @property
    def residual(self) -> float:
        return abs(self.lhs - self.rhs)


def ims_terms(op: DiscreteOperator, lam: float, psi, phi, check: bool = True) -> IMSTerms:
    """Both sides of the localization identity for an eigenpair ``(lam, psi)``.

    ``psi`` is given in operator values (reduced on radial grids) and ``phi``
    is a :class:`CutoffProfile` or an array of node values.
    """
    dom = op.domain
    u = _op_values(op, psi)
    if check:
        v = op.to_vector(u)
        res = np.linalg.norm(op.matrix @ v - lam * v)
        if res > 1e-8 * max(1.0, op.norm) * max(np.linalg.norm(v), 1e-300):
            raise ValueError(f"(lambda, psi) is not an eigenpair: residual {res:.3g}")
    ph = phi.on(dom).values if isinstance(phi, CutoffProfile) else np.asarray(phi, dtype=float)
    prod = ph * u
    g, left, right = _edge_terms(dom, ph, u)
    n2 = op.norm2(prod)
    lhs = op.quadratic_form(prod)
    rhs = float(np.dot(g, left**2)) + lam * n2
    rhs_exact = float(np.dot(g, left * right)) + lam * n2
    return IMSTerms(lhs, rhs, rhs_exact, n2)


def ims_residual(V: Field, lam: float, psi, phi, sign: int = -1) -> float:
    """``|LHS - RHS|`` of the localization identity on ``V``'s grid."""
    op = build_operator(V.domain, V, sign)
    return ims_terms(op, lam, psi, phi).residual


# -- localization windows ---------------------------------------------------------

@dataclass(frozen=True)
class Window:
    """A localization window in node-index form.

    Layer windows are open intervals ``(r[lo], r[hi])`` (``index`` = (lo, hi));
    square windows are open boxes with centre node ``index`` = (i, j) and
    half-width ``half`` nodes on each axis.
    """

    kind: str
    index: tuple
    half: int = 0
    center: tuple = ()
    core_mass: float = 0.0
    eigenvalue: float = math.nan
    gamma: float = math.nan

    def mask(self, domain: DomainSpec) -> np.ndarray:
        if self.kind == "layer":
            idx = np.arange(domain.size)
            return (idx > self.index[0]) & (idx < self.index[1])
        nx, ny = domain.shape
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        m = (np.abs(i - self.index[0]) < self.half) & (np.abs(j - self.index[1]) < self.half)
        return m.ravel()

    def bounds(self, domain: DomainSpec) -> tuple:
        """Physical bounds: ``(r_lo, r_hi)`` or ``(x_lo, x_hi, y_lo, y_hi)``."""
        if self.kind == "layer":
            return tuple(_node_r(domain, k) for k in self.index)
        (ax, ay), (i, j) = domain.axes, self.index
        return (ax.coords[i] - self.half * ax.h, ax.coords[i] + self.half * ax.h,
                ay.coords[j] - self.half * ay.h, ay.coords[j] + self.half * ay.h)


def _node_r(domain: DomainSpec, k: int) -> float:
    """Coordinate of node ``k``, extended linearly to ghost indices."""
    a, h = domain.bounds[0], domain.axes[0].h
    return float(a + k * h)


def _components(mask: np.ndarray) -> list:
    """Maximal runs of ``True`` as open index intervals ``(lo, hi)``."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    dm = np.diff(m)
    starts = np.flatnonzero(dm == 1)
    ends = np.flatnonzero(dm == -1)
    return [(int(s) - 1, int(e)) for s, e in zip(starts, ends)]


def _restricted_lowest(op: DiscreteOperator, mask: np.ndarray) -> float:
    if not np.any(mask & op.active):
        return math.inf
    return float(lowest_eigenvalues(restrict_operator(op, mask), 1)[0])


def _layer_window(op, psi, gamma, region):
    dom = op.domain
    h = dom.axes[0].h
    mass = dom.mass * psi**2 * region
    r = dom.coords
    csum = np.concatenate([[0.0], np.cumsum(mass)])
    L = 1.0 / gamma
    lo = np.searchsorted(r, r - L, side="right")
    hi = np.searchsorted(r, r + L, side="left")
    core = csum[hi] - csum[lo]
    cand = np.flatnonzero(region)
    c = int(cand[np.argmax(core[cand])])
    comp = next((a, b) for a, b in _components(region) if a < c < b)
    half = max(1, int(round(3.0 * L / h)))
    width = min(2 * half, comp[1] - comp[0])
    lo_i = max(comp[0], c - half)
    hi_i = min(comp[1], lo_i + width)
    lo_i = hi_i - width
    return Window("layer", (lo_i, hi_i), 0, (float(r[c]),), float(core[c]))


def _square_window(op, psi, gamma, region):
    dom = op.domain
    ax, ay = dom.axes
    nx, ny = dom.shape
    P = (dom.mass * psi**2 * region).reshape(nx, ny)
    S = np.zeros((nx + 1, ny + 1))
    S[1:, 1:] = P.cumsum(0).cumsum(1)
    L = 2.0 / gamma
    # nodes with |i - ic| h < L
    m = max(0, int(math.ceil(L / ax.h - 1e-12)) - 1)
    i = np.arange(nx)
    j = np.arange(ny)
    i0, i1 = np.clip(i - m, 0, nx), np.clip(i + m + 1, 0, nx)
    j0, j1 = np.clip(j - m, 0, ny), np.clip(j + m + 1, 0, ny)
    core = (S[i1][:, j1] - S[i0][:, j1] - S[i1][:, j0] + S[i0][:, j0])
    cand = np.flatnonzero(region)
    flat = core.ravel()
    k = int(cand[np.argmax(flat[cand])])
    ic, jc = divmod(k, ny)
    half = max(1, int(round(3.0 * L / ax.h)))
    return Window("square", (ic, jc), half, (float(ax.coords[ic]), float(ay.coords[jc])),
                  float(flat[k]))


def core_masses(op: DiscreteOperator, psi, gamma: float, mode: str, region=None) -> np.ndarray:
    """Brute-force ``int_{core(x0)} |psi|^2`` for every grid centre (reference scan)."""
    dom = op.domain
    region = np.ones(dom.size, bool) if region is None else np.asarray(region, bool)
    w = dom.mass * _op_values(op, psi) ** 2 * region
    out = np.zeros(dom.size)
    if mode == "layer":
        r, L = dom.coords, 1.0 / gamma
        for c in range(dom.size):
            out[c] = w[np.abs(r - r[c]) < L].sum()
    else:
        X, L = dom.coords, 2.0 / gamma
        for c in range(dom.size):
            sel = np.all(np.abs(X - X[c]) < L - 1e-12 * L, axis=1)
            out[c] = w[sel].sum()
    return out


def localize(op: DiscreteOperator, psi, gamma: float, mode: str = "layer",
             region=None, verify: bool = True) -> Window:
    """Window carrying a definite share of ``psi`` (IMS localization).

    The core (``x0 + LQ`` with ``L = 2/gamma`` in square mode, the layer
    ``|r - c| < L`` with ``L = 1/gamma`` in layer mode) maximizes the mass of
    ``psi`` over grid centres inside ``region``.  The window has width
    ``6/gamma`` in layer mode (widened inside the component of ``region`` when
    clipped) and half-width ``6/gamma`` in square mode.  The restricted
    operator must have an eigenvalue ``<= -gamma^2/2 + 10 h``.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    dom = op.domain
    region = np.asarray(op.active if region is None else region, dtype=bool) & op.active
    if not region.any():
        raise ValueError("empty region")
    u = _op_values(op, psi)
    if mode == "layer":
        if dom.kind != "radial" and dom.kind != "interval":
            raise ValueError("layer mode needs a radial or interval grid")
        win = _layer_window(op, u, gamma, region)
    elif mode == "square":
        if dom.kind != "rectangle":
            raise ValueError("square mode needs a rectangle grid")
        if not math.isclose(dom.axes[0].h, dom.axes[1].h, rel_tol=1e-9):
            raise ValueError("square mode needs equal spacing on both axes")
        win = _square_window(op, u, gamma, region)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    lam = _restricted_lowest(op, win.mask(dom) & region)
    win = Window(win.kind, win.index, win.half, win.center, win.core_mass, lam, float(gamma))
    if verify and lam > -gamma**2 / 2.0 + 10.0 * dom.h:
        raise LocalizationError(
            f"restricted eigenvalue {lam:.6g} exceeds -gamma^2/2 + 10h = "
            f"{-gamma**2 / 2 + 10 * dom.h:.6g} for window {win.index}")
    return win


# -- greedy coverings by spherical layers -------------------------------------------

@dataclass
class Layer:
    """Open layer ``(r[lo], r[hi])`` with its core, level and parent link."""

    index: int
    lo: int
    hi: int
    core: tuple
    epsilon: float
    parent: int
    operator: str = "+"
    core_eigenvalue: float = math.nan
    pre_gap: tuple = ()

    @property
    def interval(self) -> tuple:
        return (self.lo, self.hi)


@dataclass
class GapLayer:
    """Gap layer ``(r[lo], r[hi])`` between neighbours ``n1`` and ``n2`` (``None`` at the edge).

    ``extent`` is the gap before trimming; both operators are nonnegative there.
    """

    index: int
    lo: int
    hi: int
    neighbors: tuple
    extent: tuple

    @property
    def interval(self) -> tuple:
        return (self.lo, self.hi)


@dataclass
class Covering:
    domain: DomainSpec
    layers: list
    gaps: list
    tol: float
    stop_reason: str
    checks: dict = field(default_factory=dict)

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([l.epsilon for l in self.layers])

    def r(self, k: int) -> float:
        return _node_r(self.domain, k)

    def sqrt_eps_sum(self) -> float:
        """``sum_{n >= 1} eps_n^{1/2}`` (the seed layer is excluded)."""
        return float(sum(math.sqrt(l.epsilon) for l in self.layers[1:]))

    def to_dict(self) -> dict:
        recs = []
        for l in self.layers:
            recs.append({"index": l.index, "kind": "layer", "window": [self.r(l.lo), self.r(l.hi)],
                         "core": [self.r(l.core[0]), self.r(l.core[1])], "epsilon": l.epsilon,
                         "parent": l.parent, "operator": l.operator,
                         "pre_gap": ([self.r(l.pre_gap[0]), self.r(l.pre_gap[1]), l.pre_gap[2]]
                                     if l.pre_gap else None)})
        for g in self.gaps:
            recs.append({"index": g.index, "kind": "gap", "window": [self.r(g.lo), self.r(g.hi)],
                         "extent": [self.r(g.extent[0]), self.r(g.extent[1])],
                         "neighbors": list(g.neighbors)})
        dom = self.domain
        return {"domain": {"kind": dom.kind, "bounds": list(dom.bounds), "n": list(dom.n),
                           "bc": list(dom.bc), "d": dom.dim},
                "tol": self.tol, "stop_reason": self.stop_reason, "records": recs}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Covering":
        dd = data["domain"]
        dom = DomainSpec(dd["kind"], tuple(dd["bounds"]), tuple(dd["n"]), tuple(dd["bc"]), dd["d"])
        a, h = dom.bounds[0], dom.axes[0].h
        k = lambda x: int(round((x - a) / h))
        layers, gaps = [], []
        for rec in data["records"]:
            lo, hi = (k(x) for x in rec["window"])
            if rec["kind"] == "layer":
                pg = rec.get("pre_gap")
                layers.append(Layer(rec["index"], lo, hi, tuple(k(x) for x in rec["core"]),
                                    rec["epsilon"], rec["parent"], rec.get("operator", "+"),
                                    pre_gap=(k(pg[0]), k(pg[1]), pg[2]) if pg else ()))
            else:
                nb = tuple(rec["neighbors"])
                gaps.append(GapLayer(rec["index"], lo, hi, nb, tuple(k(x) for x in rec["extent"])))
        layers.sort(key=lambda l: l.index)
        gaps.sort(key=lambda g: g.index)
        return cls(dom, layers, gaps, data["tol"], data["stop_reason"])


def _open_mask(n: int, lo: int, hi: int) -> np.ndarray:
    idx = np.arange(n)
    return (idx > lo) & (idx < hi)


def _closed_mask(n: int, lo: int, hi: int) -> np.ndarray:
    idx = np.arange(n)
    return (idx >= lo) & (idx <= hi)


def _meets(a: tuple, b: tuple) -> bool:
    return max(a[0], b[0]) < min(a[1], b[1])


def _dist(a: tuple, b: tuple) -> int:
    return max(a[0] - b[1], b[0] - a[1], 0)


def _edges(dom: DomainSpec) -> tuple:
    n = dom.size
    return (0 if dom.bc[0] == "dirichlet" else -1, n - 1 if dom.bc[1] == "dirichlet" else n)


def _parent(layers: list, k: int) -> int:
    iv = layers[k].interval
    return min(m.index for m in layers if m.index == k or _meets(m.interval, iv))


def _lowest_pm(ops: dict, mask: np.ndarray) -> tuple:
    vals = {s: _restricted_lowest(op, mask) for s, op in ops.items()}
    s = min(vals, key=vals.get)
    return vals[s], s, vals


def _left_neighbor(layers, a):
    cands = [l for l in layers if l.hi == a]
    return max(cands, key=lambda l: (l.lo, l.index)) if cands else None


def _right_neighbor(layers, b):
    cands = [l for l in layers if l.lo == b]
    return min(cands, key=lambda l: (l.hi, -l.index)) if cands else None


def _uncovered(layers, lo_edge, hi_edge) -> list:
    """Closed uncovered pieces ``[g0, g1]`` with ``g1 > g0`` (complement of open layers)."""
    ivs = sorted(l.interval for l in layers)
    out, pos = [], lo_edge
    for lo, hi in ivs:
        if lo > pos:
            out.append((pos, lo))
        pos = max(pos, hi)
    if hi_edge > pos:
        out.append((pos, hi_edge))
    return out


def _default_tol(ops) -> float:
    vmax = max(float(np.max(np.abs(op.potential))) if op.size else 0.0 for op in ops)
    return 1e-6 * vmax


def greedy_cover(op_plus: DiscreteOperator, op_minus: DiscreteOperator | None = None,
                 tol: float | None = None, max_layers: int = 200,
                 verify: bool = True) -> Covering:
    """Greedy covering of a radial grid by layers on which ``H_+`` and ``H_-`` are controlled.

    Starting from the seed ``Omega_0 = B_2`` (core ``B_1``), each step takes
    ``-eps_N`` = lowest eigenvalue of both operators on the uncovered set
    ``S``, localizes the corresponding ground state to a core layer of width
    ``6 eps_N^{-1/2}``, enlarges it by ``L = 6 eps_N^{-1/2}`` on both sides
    inside ``S`` and absorbs leftover pieces of ``S`` of width ``<= 3L``
    together with the neighbouring layer minus an ``L_pm/20`` margin around
    its core.  The loop stops when ``eps_N <= tol``.  Remaining gaps are then
    absorbed or turned into gap layers, and the postconditions are verified
    by eigensolves (see :func:`verify_covering`).
    """
    ops = {"+": op_plus} if op_minus is None else {"+": op_plus, "-": op_minus}
    dom = op_plus.domain
    if any(op.domain != dom for op in ops.values()):
        raise ValueError("H_+ and H_- must live on the same grid")
    if dom.kind != "radial":
        raise ValueError("layer coverings need a radial grid")
    h = dom.axes[0].h
    if dom.bounds[0] >= 1.0 or dom.bounds[1] <= 2.0:
        raise ValueError("the seed layer B_2 with core B_1 needs r_min < 1 < 2 < r_max")
    tol = _default_tol(ops.values()) if tol is None else float(tol)
    n = dom.size
    lo_edge, hi_edge = _edges(dom)
    k_of = lambda rho: int(round((rho - dom.bounds[0]) / h))
    vmax = max(float(np.max(np.abs(op.potential))) for op in ops.values())
    # 6 eps0^{-1/2} <= 1 keeps the seed core at distance >= L_0 from S
    eps0 = max(vmax + 1.0, 36.0)
    layers = [Layer(0, lo_edge, k_of(2.0), (lo_edge, k_of(1.0)), eps0, 0, "seed")]
    stop = "max_layers"
    for N in range(1, max_layers + 1):
        covered = np.zeros(n, bool)
        for l in layers:
            covered |= _closed_mask(n, l.lo, l.hi)
        S = ~covered & op_plus.active
        if not S.any():
            stop = "exhausted"
            break
        lam, which, _ = _lowest_pm(ops, S)
        eps = -lam
        if eps <= tol:
            stop = "floor"
            break
        op = ops[which]
        _, gs = ground_state(restrict_operator(op, S))
        gamma = math.sqrt(eps)
        win = localize(op, gs.values, gamma, "layer", region=S, verify=verify)
        c_lo, c_hi = win.index
        a, b = next((p, q) for p, q in _components(S) if p < c_lo + 1 < q)
        L = 6.0 / gamma
        Lk = int(round(L / h))
        lo, hi = max(a, c_lo - Lk), min(b, c_hi + Lk)
        if (c_lo - a) * h <= 3 * L:
            nb = _left_neighbor(layers, a)
            lo = a
            if nb is not None:
                m = int(math.ceil(6.0 / math.sqrt(nb.epsilon) / 20.0 / h))
                lo = min(a, max(nb.lo, nb.core[1] + m))
        if (b - c_hi) * h <= 3 * L:
            nb = _right_neighbor(layers, b)
            hi = b
            if nb is not None:
                m = int(math.ceil(6.0 / math.sqrt(nb.epsilon) / 20.0 / h))
                hi = max(b, min(nb.hi, nb.core[0] - m))
        layers.append(Layer(N, lo, hi, (c_lo, c_hi), eps, N, which, win.eigenvalue))
        layers[-1].parent = _parent(layers, N)
    for l in layers:
        l.pre_gap = (l.lo, l.hi, l.parent)
    gaps = _fill_gaps(layers, dom, h, lo_edge, hi_edge)
    for l in layers:
        l.parent = _parent(layers, l.index)
    cov = Covering(dom, layers, gaps, tol, stop)
    if verify:
        cov.checks = verify_covering(cov, op_plus, op_minus)
    return cov


def _fill_gaps(layers, dom, h, lo_edge, hi_edge) -> list:
    gaps = []
    unit = lambda l: max(1, int(math.ceil(1.0 / math.sqrt(l.epsilon) / h)))
    for g0, g1 in _uncovered(layers, lo_edge, hi_edge):
        left = _left_neighbor(layers, g0)
        right = _right_neighbor(layers, g1) if g1 < hi_edge else None
        if left is None:
            raise CoveringError("gap without a left neighbour", (g0, g1))
        t1 = unit(left)
        t2 = unit(right) if right is not None else 0
        if right is None:
            if g1 - g0 <= 6 * t1:
                left.hi = g1
            else:
                left.hi = g0 + 6 * t1
                gaps.append(GapLayer(len(gaps), g0 + t1, g1, (left.index, None), (g0, g1)))
            continue
        if g1 - g0 <= 6 * (t1 + t2):
            # close the gap with an overlap of at least 5.7 eps_k^{-1/2}, k = min(n1, n2)
            k = min(left.index, right.index)
            need = int(math.ceil(6.0 * (1 - 1 / 20) / math.sqrt(layers[k].epsilon) / h))
            extra = max(0, need - (g1 - g0))
            e1 = (extra + 1) // 2
            left.hi = min(g1 + e1, max(g1, right.core[0]))
            right.lo = max(g0 - (extra - e1), min(g0, left.core[1]))
            if left.hi - right.lo < need:
                left.hi = min(right.lo + need, max(g1, right.core[0]))
        else:
            left.hi = g0 + 6 * t1
            right.lo = g1 - 6 * t2
            gaps.append(GapLayer(len(gaps), g0 + t1, g1 - t2, (left.index, right.index), (g0, g1)))
    return gaps


def verify_covering(cov: Covering, op_plus: DiscreteOperator,
                    op_minus: DiscreteOperator | None = None, raise_on_fail: bool = True) -> dict:
    """Replay the covering postconditions with fresh eigensolves.

    Checks: both operators ``>= -tol`` off the layers; ``>= -eps_{j(n)} - tol``
    on every layer; ``>= -tol`` on every gap layer extended by its margins
    (its pre-trim extent); levels nonincreasing; cores disjoint; and the
    pre-gap distance ``dist(Omega_n, U_{m<j(n)} Omega_m) >= 3/(10 sqrt(eps_{j(n)})) - h``.
    Coverage by layers and gap layers is checked as well.
    """
    ops = {"+": op_plus} if op_minus is None else {"+": op_plus, "-": op_minus}
    dom = cov.domain
    if op_plus.domain != dom:
        raise ValueError("operator and covering live on different grids")
    n, h, tol = dom.size, dom.axes[0].h, cov.tol
    lo_edge, hi_edge = _edges(dom)
    layers, gaps = cov.layers, cov.gaps
    failures = []
    out = {}

    covered = np.zeros(n, bool)
    for l in layers:
        covered |= _closed_mask(n, l.lo, l.hi)
    rest = ~covered & op_plus.active
    lam = _lowest_pm(ops, rest)[0] if rest.any() else math.inf
    out["complement"] = {"lowest": lam, "holds": lam >= -tol}

    per_layer = []
    for l in layers:
        j = _parent(layers, l.index)
        lam = _lowest_pm(ops, _open_mask(n, l.lo, l.hi))[0]
        ok = lam >= -layers[j].epsilon - tol
        per_layer.append({"index": l.index, "parent": j, "lowest": lam, "holds": ok})
        if not ok:
            failures.append(("layer", l.index))
    out["layers"] = per_layer

    per_gap = []
    for g in gaps:
        lam = _lowest_pm(ops, _open_mask(n, *g.extent))[0]
        ok = lam >= -tol
        per_gap.append({"index": g.index, "lowest": lam, "holds": ok})
        if not ok:
            failures.append(("gap", g.index))
        nb = [l.index for l in layers if _meets(l.interval, g.interval)]
        expected = sorted(x for x in g.neighbors if x is not None)
        if sorted(nb) != expected:
            failures.append(("gap_neighbors", g.index))
    out["gaps"] = per_gap

    eps = cov.epsilons
    out["monotone"] = bool(np.all(np.diff(eps) <= 1e-12 * np.maximum(1.0, eps[:-1])))
    cores_ok = all(not _meets(a.core, b.core) for i, a in enumerate(layers) for b in layers[i + 1:])
    out["cores_disjoint"] = cores_ok

    dist_rows = []
    for l in layers[1:]:
        lo, hi, j = l.pre_gap if l.pre_gap else (l.lo, l.hi, _parent(layers, l.index))
        older = [m for m in layers if m.index < j]
        if not older:
            continue
        dmin = min(_dist((lo, hi), m.pre_gap[:2] if m.pre_gap else m.interval) for m in older) * h
        need = 3.0 / (10.0 * math.sqrt(layers[j].epsilon)) - h
        dist_rows.append({"index": l.index, "parent": j, "distance": dmin, "required": need,
                          "holds": dmin >= need - 1e-9 * h})
        if dmin < need - 1e-9 * h:
            failures.append(("distance", l.index))
    out["distance"] = dist_rows

    pieces = _uncovered(layers + [g for g in gaps], lo_edge, hi_edge)
    out["covers_domain"] = not pieces
    neighbours = [sum(_meets(a.interval, b.interval) for b in layers if b is not a) for a in layers]
    out["max_layer_neighbors"] = max(neighbours) if neighbours else 0

    if not out["complement"]["holds"]:
        failures.append(("complement", None))
    if not out["monotone"]:
        failures.append(("monotone", None))
    if not cores_ok:
        failures.append(("cores", None))
    if pieces:
        failures.append(("coverage", pieces[0]))
    out["failures"] = failures
    out["holds"] = not failures
    if failures and raise_on_fail:
        kind, where = failures[0]
        raise CoveringError(f"covering postcondition '{kind}' failed", where)
    return out


def eigen_sum_check(cov: Covering, op_plus: DiscreteOperator,
                    op_minus: DiscreteOperator | None = None) -> dict:
    """``sum eps_n^{1/2} <= sqrt 2 (sum |lambda(H_+)|^{1/2} + sum |lambda(H_-)|^{1/2}) + tol``."""
    from .spectra import eigs_below

    rhs = 0.0
    for op in ([op_plus] if op_minus is None else [op_plus, op_minus]):
        lam = eigs_below(op, 0.0).eigenvalues
        rhs += float(np.sum(np.sqrt(np.abs(lam))))
    lhs = cov.sqrt_eps_sum()
    bound = math.sqrt(2.0) * rhs + cov.tol
    return {"lhs": lhs, "rhs": bound, "holds": lhs <= bound}


# -- partitions of unity ------------------------------------------------------------

@dataclass
class PartitionOfUnity:
    """``phis`` per layer, ``psis`` per gap layer (layer mode) or ``psis`` and
    running maxima ``zetas`` (square mode)."""

    domain: DomainSpec
    phis: list
    psis: list
    zetas: list = field(default_factory=list)
    gradient_sum: float = 0.0
    sqrt_eps_sum: float = 0.0
    ratio: float = 0.0
    zeta_energies: list = field(default_factory=list)

    def total(self) -> np.ndarray:
        out = np.zeros(self.domain.size)
        for f in self.phis + self.psis:
            out += f.values
        return out


def _ramp_values(r, lo_r, hi_r, rising: bool):
    if hi_r <= lo_r:
        return (r >= hi_r).astype(float) if rising else (r < hi_r).astype(float)
    t = np.clip((r - lo_r) / (hi_r - lo_r), 0.0, 1.0)
    return t if rising else 1.0 - t


def build_partition(cov) -> PartitionOfUnity:
    """Partition of unity subordinate to a covering.

    Layer mode: sets (layers and gap layers) are chained by their left
    endpoints; on each overlap the two neighbours get complementary linear
    ramps whose slope is the inverse overlap width.  The report gives
    ``sum int |grad f|^2 |x|^{1-d} dx`` over all members and its ratio to
    ``sum_{n >= 0} eps_n^{1/2}`` (seed level included).  Square mode returns
    the cutoffs ``psi_n`` and their running maxima ``zeta_n``.
    """
    if isinstance(cov, SquareCovering):
        return _square_partition(cov)
    dom = cov.domain
    n, h = dom.size, dom.axes[0].h
    r = dom.coords
    members = [("layer", l) for l in cov.layers] + [("gap", g) for g in cov.gaps]
    members.sort(key=lambda m: (m[1].lo, m[1].hi))
    eps = {l.index: l.epsilon for l in cov.layers}
    for (ka, a), (kb, b) in zip(members, members[1:]):
        if b.hi <= a.hi:
            raise CoveringError("nested sets cannot be chained", (a.interval, b.interval))
        if b.lo > a.hi:
            raise CoveringError("sets leave an uncovered piece", (a.hi, b.lo))
        w = (a.hi - b.lo) * h
        if ka == "layer" and kb == "layer":
            k = min(a.index, b.index)
            need = 6.0 * (1 - 1 / 20) / math.sqrt(eps[k]) - 2 * h
        else:
            lay = a if ka == "layer" else b
            need = 5.0 / math.sqrt(lay.epsilon) - h
        if w < need:
            raise CoveringError(f"overlap {w:.4g} narrower than required {need:.4g}",
                                (a.interval, b.interval))
    for i in range(len(members) - 2):
        if members[i + 2][1].lo < members[i][1].hi:
            raise CoveringError("three sets overlap", members[i][1].interval)
    vals = []
    for i, (_, s) in enumerate(members):
        v = np.ones(n)
        if i > 0:
            prev = members[i - 1][1]
            v *= _ramp_values(r, _node_r(dom, s.lo), _node_r(dom, prev.hi), True)
        if i + 1 < len(members):
            nxt = members[i + 1][1]
            v *= _ramp_values(r, _node_r(dom, nxt.lo), _node_r(dom, s.hi), False)
        vals.append(v)
    from .grid import sphere_area
    c_d = sphere_area(dom.dim)
    grad = float(sum(np.sum(np.diff(v) ** 2) / h for v in vals) * c_d)
    phis, psis = [None] * len(cov.layers), [None] * len(cov.gaps)
    for (kind, s), v in zip(members, vals):
        (phis if kind == "layer" else psis)[s.index] = Field(dom, v)
    se = float(sum(math.sqrt(l.epsilon) for l in cov.layers))
    return PartitionOfUnity(dom, phis, psis, [], grad, se, grad / se if se else 0.0)


# -- square coverings and the planar certificate chain --------------------------------

@dataclass
class Square:
    index: int
    window: Window
    epsilon: float
    lowest_on_new: float = math.nan    # lowest eigenvalue on Omega_n minus earlier squares

    @property
    def center(self) -> tuple:
        return self.window.center

    def half_width(self, domain: DomainSpec) -> float:
        return self.window.half * domain.axes[0].h


@dataclass
class SquareCovering:
    domain: DomainSpec
    squares: list
    tol: float
    stop_reason: str
    n_negative: int = 0
    complement_lowest: float = math.inf

    @property
    def epsilons(self) -> np.ndarray:
        return np.array([s.epsilon for s in self.squares])

    def closed_mask(self, upto: int | None = None) -> np.ndarray:
        dom = self.domain
        nx, ny = dom.shape
        i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        m = np.zeros((nx, ny), bool)
        for s in self.squares[:upto]:
            (ic, jc), k = s.window.index, s.window.half
            m |= (np.abs(i - ic) <= k) & (np.abs(j - jc) <= k)
        return m.ravel()

    def to_dict(self) -> dict:
        dom = self.domain
        return {"domain": {"kind": dom.kind, "bounds": list(dom.bounds), "n": list(dom.n),
                           "bc": list(dom.bc)},
                "tol": self.tol, "stop_reason": self.stop_reason, "n_negative": self.n_negative,
                "records": [{"index": s.index, "kind": "square", "window": list(s.window.bounds(dom)),
                             "center": list(s.center), "epsilon": s.epsilon, "parent": s.index}
                            for s in self.squares]}


def greedy_squares(op: DiscreteOperator, tol: float | None = None,
                   max_squares: int = 50, verify: bool = True) -> SquareCovering:
    """Greedy squares ``Omega_n = x_n + 6 eps_n^{-1/2} Q`` for ``H`` on a planar grid.

    ``-eps_n`` is the lowest eigenvalue of ``H`` on the grid minus the closed
    earlier squares; the loop stops when ``eps_n <= tol`` (``"floor"``) or
    after ``max_squares``.  ``n_negative`` records the inertia count of ``H``
    so that the number of squares can be compared with it.
    """
    from .spectra import count_below

    dom = op.domain
    if dom.kind != "rectangle":
        raise ValueError("square coverings need a rectangle grid")
    tol = _default_tol([op]) if tol is None else float(tol)
    cov = SquareCovering(dom, [], tol, "max_squares", count_below(op, 0.0).count)
    for n in range(1, max_squares + 1):
        S = ~cov.closed_mask() & op.active
        if not S.any():
            cov.stop_reason = "exhausted"
            break
        lam = _restricted_lowest(op, S)
        if -lam <= tol:
            cov.stop_reason = "floor"
            cov.complement_lowest = lam
            break
        _, gs = ground_state(restrict_operator(op, S))
        win = localize(op, gs.values, math.sqrt(-lam), "square", region=S, verify=verify)
        sq = Square(n, win, -lam)
        sq.lowest_on_new = _restricted_lowest(op, win.mask(dom) & S)
        cov.squares.append(sq)
    if verify:
        eps = cov.epsilons
        if eps.size and np.any(np.diff(eps) > 1e-12 * eps[:-1]):
            raise CoveringError("levels are not nonincreasing")
        for s in cov.squares:
            if s.lowest_on_new < -s.epsilon - tol:
                raise CoveringError("H < -eps_n on the new part of a square", s.index)
    return cov


def _aux_grid(cov: SquareCovering, extra: list) -> DomainSpec:
    """Grid for the cutoff energies: covers every support, spacing <= L_min/10."""
    dom = cov.domain
    boxes = [(c[0] - w, c[0] + w, c[1] - w, c[1] + w) for c, w in extra]
    x0 = min([b[0] for b in boxes] + [dom.bounds[0]])
    x1 = max([b[1] for b in boxes] + [dom.bounds[1]])
    y0 = min([b[2] for b in boxes] + [dom.bounds[2]])
    y1 = max([b[3] for b in boxes] + [dom.bounds[3]])
    Lmin = min([s.half_width(dom) for s in cov.squares], default=1.0)
    h = min(dom.axes[0].h, Lmin / 10.0)
    span = max(x1 - x0, y1 - y0) + 4 * h
    m = int(math.ceil(span / h)) + 1
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    half = 0.5 * (m - 1) * h
    return DomainSpec.rectangle(cx - half, cx + half, cy - half, cy + half, m)


def _square_partition(cov: SquareCovering, aux: DomainSpec | None = None) -> PartitionOfUnity:
    from .grid import dirichlet_energy

    dom = cov.domain
    aux = aux or _aux_grid(cov, [(s.center, 3 * s.half_width(dom)) for s in cov.squares])
    psis, zetas, energies = [], [], []
    zeta = np.zeros(aux.size)
    for s in cov.squares:
        p = CutoffProfile(s.center, s.half_width(dom))(aux.coords)
        zeta = np.maximum(zeta, p)
        psis.append(Field(aux, p))
        zetas.append(Field(aux, zeta.copy()))
        energies.append(dirichlet_energy(zetas[-1]))
    return PartitionOfUnity(aux, [], psis, zetas, zeta_energies=energies)


class ChainError(CoveringError):
    """An inequality of the planar certificate chain failed beyond tolerance."""


@dataclass
class PlanarChainCertificate:
    covering: SquareCovering
    steps: list
    reports: list
    n_squares: int
    n_negative: int

    @property
    def holds(self) -> bool:
        return all(r.holds for r in self.reports)

    def to_dict(self) -> dict:
        return {"n_squares": self.n_squares, "n_negative": self.n_negative,
                "stop_reason": self.covering.stop_reason, "holds": self.holds,
                "steps": self.steps, "reports": [r.to_dict() for r in self.reports]}


def planar_chain_certificate(V: Field, tol: float | None = None, max_squares: int = 50,
                         strict: bool = True) -> PlanarChainCertificate:
    """Evaluate every inequality of the planar counting chain for ``-Delta - V``.

    Squares come from :func:`greedy_squares`.  With ``psi_n`` the cutoff of
    plateau half-width ``L_n`` around square ``n``, ``zeta_n`` their running
    maximum and ``tpsi_n = min(1 - zeta_{n-1}, psi_n`` dilated by 3 about
    ``x_n``), the chain checks per step

    * ``int V tpsi^2 <= eps_n int tpsi^2 + int |grad tpsi|^2`` (discrete forms),
    * ``int |grad tpsi|^2 <= int |grad zeta_{n-1}|^2 + int |grad psi_n(dilated)|^2``,
    * ``int |grad zeta_n|^2 <= 8 n``,
    * ``int_{supp psi_n \\ supp zeta_{n-1}} V <= 6^4 + 8 n``,

    then ``int_{supp zeta_M} V <= (6^4 + 4(M+1)) M`` and the tail
    ``int_{outside supp zeta_M} V <= 8(1 + M)`` through the cutoff family
    ``psi_R`` with ``3R`` equal to the box half-width.  Cutoff energies are
    computed on an auxiliary grid with spacing ``<= L_min/10``; the
    ``8n`` check allows a relative slack of ``5 h_aux / L_min``.
    """
    from .bounds import BoundReport, grid_digest
    from .grid import dirichlet_energy, integrate

    dom = V.domain
    if dom.kind != "rectangle":
        raise ValueError("the planar chain needs a rectangle grid")
    if np.any(V.values < 0):
        raise ValueError("the planar chain needs V >= 0")
    op = build_operator(dom, V, -1)
    cov = greedy_squares(op, tol, max_squares)
    M = len(cov.squares)
    X = dom.coords
    box_c = (0.5 * (dom.bounds[0] + dom.bounds[1]), 0.5 * (dom.bounds[2] + dom.bounds[3]))
    R = min(dom.bounds[1] - dom.bounds[0], dom.bounds[3] - dom.bounds[2]) / 6.0
    Ls = [s.half_width(dom) for s in cov.squares]
    aux = _aux_grid(cov, [(s.center, 9 * L) for s, L in zip(cov.squares, Ls)] + [(box_c, 3 * R)])
    Y = aux.coords
    h_aux = aux.axes[0].h
    slack = 5.0 * h_aux / min(Ls) if Ls else 0.0
    w = dom.weights
    digest = grid_digest(dom, V)
    energy = lambda vals: dirichlet_energy(Field(aux, vals))
    steps, reports, failures = [], [], []

    def record(rep):
        reports.append(rep)
        if not rep.holds:
            failures.append(rep.bound_id)

    zeta_a, zeta_o = np.zeros(aux.size), np.zeros(dom.size)
    e_zeta = 0.0
    per_step_total = 0.0
    for n, (s, L) in enumerate(zip(cov.squares, Ls), start=1):
        psi = CutoffProfile(s.center, L)
        dil = CutoffProfile(s.center, 3 * L)
        psi_a, dil_a = psi(Y), dil(Y)
        tpsi_a = np.minimum(1 - zeta_a, dil_a)
        psi_o, dil_o = psi(X), dil(X)
        tpsi_o = np.minimum(1 - zeta_o, dil_o)
        # Rayleigh step on the operator grid: H >= -eps_n off the earlier squares
        lhs = -op.potential_form(tpsi_o)
        rhs = s.epsilon * op.norm2(tpsi_o) + op.kinetic_form(tpsi_o)
        record(BoundReport.make(f"chain_rayleigh_{n}", lhs, rhs, s.epsilon, digest,
                                slack=1e-9 * max(1.0, abs(rhs))))
        region = (psi_o > 0) & (zeta_o == 0)
        v_region = float(np.dot(V.values[region], w[region]))
        record(BoundReport.make(f"chain_region_{n}", v_region, lhs, 1.0, digest,
                                slack=1e-9 * max(1.0, abs(lhs))))
        e_t, e_dil, e_psi = energy(tpsi_a), energy(dil_a), energy(psi_a)
        record(BoundReport.make(f"chain_gradient_{n}", e_t, e_zeta + e_dil, 1.0, digest,
                                slack=1e-9 * (1 + e_zeta + e_dil)))
        area = s.epsilon * float(np.dot(tpsi_a**2, aux.weights))
        zeta_a, zeta_o = np.maximum(zeta_a, psi_a), np.maximum(zeta_o, psi_o)
        e_new = energy(zeta_a)
        record(BoundReport.make(f"zeta_step_{n}", e_new, e_zeta + e_psi, 1.0, digest,
                                slack=1e-9 * (1 + e_zeta + e_psi)))
        e_zeta = e_new
        record(BoundReport.make(f"zeta_energy_{n}", e_zeta, 8 * n, 8, digest, slack=8 * n * slack))
        record(BoundReport.make(f"per_step_{n}", v_region, 6**4 + 8 * n, 6**4 + 8 * n, digest))
        per_step_total += v_region
        steps.append({"n": n, "epsilon": s.epsilon, "L": L, "L_nominal": 6 / math.sqrt(s.epsilon),
                      "center": list(s.center), "rayleigh_lhs": lhs, "rayleigh_rhs": rhs,
                      "region_integral": v_region, "grad_tilde": e_t, "grad_dilated": e_dil,
                      "grad_psi": e_psi, "grad_zeta": e_zeta, "area_term": area,
                      "area_bound_dilated": s.epsilon * (18 * L) ** 2,
                      "area_bound_stated": s.epsilon * (6 * L) ** 2,
                      "area_within_stated": area <= s.epsilon * (6 * L) ** 2})
    inside = zeta_o > 0
    total = float(np.dot(V.values[inside], w[inside]))
    record(BoundReport.make("chain_total", total, (6**4 + 4 * (M + 1)) * M, 6**4 + 4 * (M + 1),
                            digest, slack=1e-9 * max(1.0, total), per_step_sum=per_step_total))
    # tail through psi_R, 3R = box half-width
    psiR = CutoffProfile(box_c, R)
    tt_o = np.minimum(1 - zeta_o, psiR(X))
    floor = max(0.0, -cov.complement_lowest) if math.isfinite(cov.complement_lowest) else 0.0
    t_lhs = -op.potential_form(tt_o)
    t_rhs = floor * op.norm2(tt_o) + op.kinetic_form(tt_o)
    record(BoundReport.make("tail_rayleigh", t_lhs, t_rhs, 1.0, digest,
                            slack=1e-9 * max(1.0, abs(t_rhs))))
    tt_a = np.minimum(1 - zeta_a, psiR(Y))
    e_tail = energy(tt_a)
    outside = ~inside
    tail = float(np.dot(V.values[outside], w[outside]))
    v_beyond_R = float(np.dot(V.values[outside & (psiR(X) < 1)], w[outside & (psiR(X) < 1)]))
    record(BoundReport.make("tail", tail, 8 * (1 + M), 8, digest,
                            grad_tail=e_tail, grad_tail_bound=e_zeta + energy(psiR(Y)),
                            V_outside_plateau=v_beyond_R))
    record(BoundReport.make("gny_chain", integrate(V), (6**4 + 4 * (M + 1)) * M + 8 * (1 + M),
                            "chain", digest, n_negative=cov.n_negative))
    if failures and strict:
        raise ChainError(f"planar chain inequality failed: {failures[0]}")
    return PlanarChainCertificate(cov, steps, reports, M, cov.n_negative)
