"""Spectral measures, smoothed densities, entropy functionals and truncation families."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .bounds import BoundReport, split_count_check
from .grid import DiscreteOperator, DomainSpec, Field, build_operator, reduce_radial
from .spectra import _is_tridiagonal, count_below, eigs_below


# -- spectral measures -----------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralMeasure:
    """Atomic measure ``sum_k w_k delta_{lambda_k}`` with sorted atoms."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        if loc.shape != w.shape:
            raise ValueError("locations and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        order = np.argsort(loc, kind="stable")
        object.__setattr__(self, "locations", loc[order])
        object.__setattr__(self, "weights", w[order])

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    @property
    def atoms(self) -> list:
        return list(zip(self.locations.tolist(), self.weights.tolist()))

    def stieltjes(self, z: complex) -> complex:
        """``int dmu(t) / (t - z)``."""
        return complex(np.sum(self.weights / (self.locations - z)))

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.locations, self.weights]), delimiter=",",
                   header="lambda,weight", comments="", fmt="%.17g")


def full_spectrum(op: DiscreteOperator) -> tuple:
    """All eigenpairs of ``op`` (tridiagonal solver when the matrix allows it)."""
    M = op.matrix
    if _is_tridiagonal(M):
        lam, vecs = sla.eigh_tridiagonal(M.diagonal(), M.diagonal(1))
    else:
        lam, vecs = np.linalg.eigh(M.toarray())
    return lam, vecs


def shell_vector(domain: DomainSpec, inner: float = 1.0, outer: float = 2.0) -> Field:
    """Normalized radial bump ``sin^2`` supported in ``inner < r < outer``."""
    r = domain.radius if domain.kind != "radial" else domain.coords
    t = (r - inner) / (outer - inner)
    f = np.where((t > 0) & (t < 1), np.sin(np.pi * t) ** 2, 0.0)
    F = Field(domain, f)
    op = build_operator(domain)
    nrm = math.sqrt(op.norm2(_op_values(F)))
    if nrm == 0:
        raise ValueError("grid does not resolve the shell 1 < r < 2")
    return Field(domain, f / nrm)


def _op_values(f: Field) -> np.ndarray:
    return reduce_radial(f) if f.domain.kind == "radial" else f.values


def spectral_measure(op: DiscreteOperator, f: Field, shell_mode: bool = False,
                     spectrum: tuple | None = None) -> SpectralMeasure:
    """``w_k = <f, e_k>^2`` over the full eigendecomposition of ``op``.

    ``f`` is a physical profile on radial grids.  ``shell_mode`` requires
    ``f`` to be supported in ``1 < |x| < 2``.  A precomputed ``spectrum``
    from :func:`full_spectrum` may be passed to share work.
    """
    if f.domain != op.domain:
        raise ValueError("f and the operator live on different grids")
    if shell_mode:
        r = f.domain.coords if f.domain.kind == "radial" else f.domain.radius
        if np.any((f.values != 0) & ((r <= 1.0) | (r >= 2.0))):
            raise ValueError("f must be supported in 1 < |x| < 2")
    lam, vecs = full_spectrum(op) if spectrum is None else spectrum
    v = op.to_vector(_op_values(f))
    return SpectralMeasure(lam, (vecs.T @ v) ** 2)


def resolvent_form(op: DiscreteOperator, f: Field, z: complex) -> complex:
    """``<(H - z)^{-1} f, f>`` by a direct sparse solve."""
    v = op.to_vector(_op_values(f))
    M = (op.matrix.astype(complex) - z * sp.identity(op.size, format="csr")).tocsc()
    return complex(v @ spla.spsolve(M, v.astype(complex)))


def bounded_lipschitz(mu: SpectralMeasure, nu: SpectralMeasure) -> float:
    """``sup { int g d(mu - nu) : |g| <= 1, Lip(g) <= 1 }`` by linear programming."""
    pts = np.union1d(mu.locations, nu.locations)
    if pts.size == 0:
        return 0.0
    c = np.zeros(pts.size)
    np.add.at(c, np.searchsorted(pts, mu.locations), mu.weights)
    np.add.at(c, np.searchsorted(pts, nu.locations), -nu.weights)
    if pts.size == 1:
        return float(abs(c[0]))
    m = pts.size - 1
    D = sp.diags([np.ones(m), -np.ones(m)], [0, 1], shape=(m, pts.size))
    gaps = np.diff(pts)
    A = sp.vstack([D, -D]).tocsr()
    res = linprog(-c, A_ub=A, b_ub=np.concatenate([gaps, gaps]), bounds=(-1.0, 1.0),
                  method="highs")
    if res.status != 0:
        raise RuntimeError(f"bounded-Lipschitz LP failed: {res.message}")
    return max(0.0, float(-res.fun))


# -- smoothing and entropy -----------------------------------------------------------------

@dataclass(frozen=True)
class SmoothedDensity:
    bandwidth: float
    grid: np.ndarray
    values: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def to_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.grid, self.values]), delimiter=",",
                   header="lambda,density", comments="", fmt="%.17g")


def smooth_density(mu: SpectralMeasure, bandwidth: float, lam_max: float | None = None,
                   window: tuple | None = None, step: float | None = None) -> SmoothedDensity:
    """Gaussian-kernel smoothing of ``mu`` sampled on ``[0, lam_max]``.

    ``window`` restricts the sample grid to a subinterval (atoms farther than
    ``12 bandwidth`` from it are skipped); ``step`` defaults to ``bandwidth/8``.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    if lam_max is None:
        lam_max = float(mu.locations[-1]) if mu.locations.size else 1.0
    lo, hi = (0.0, lam_max) if window is None else (max(0.0, window[0]), min(lam_max, window[1]))
    step = bandwidth / 8.0 if step is None else step
    grid = np.linspace(lo, hi, max(3, int(math.ceil((hi - lo) / step)) + 1))
    vals = np.zeros_like(grid)
    norm = 1.0 / (bandwidth * math.sqrt(2 * math.pi))
    keep = (mu.weights > 0) & (mu.locations > lo - 12 * bandwidth) & (mu.locations < hi + 12 * bandwidth)
    loc_all, w_all = mu.locations[keep], mu.weights[keep]
    # only atoms within 12 bandwidths of a sample contribute
    for a in range(0, grid.size, 8192):
        g = grid[a:a + 8192]
        i0 = np.searchsorted(loc_all, g[0] - 12 * bandwidth)
        i1 = np.searchsorted(loc_all, g[-1] + 12 * bandwidth)
        for k in range(i0, i1, 256):
            z = (g[:, None] - loc_all[None, k:min(k + 256, i1)]) / bandwidth
            vals[a:a + 8192] += norm * (np.exp(-0.5 * z * z) @ w_all[k:min(k + 256, i1)])
    return SmoothedDensity(float(bandwidth), grid, vals)


@dataclass(frozen=True)
class TestFunction:
    """Continuous bump ``height (1 - s^2)^2`` on ``(a, b)``, ``s`` the rescaled offset from the midpoint."""

    a: float
    b: float
    height: float = 1.0

    __test__ = False

    def __post_init__(self):
        if not 0 < self.a < self.b:
            raise ValueError("test function support must lie in (0, inf) with a < b")
        if self.height <= 0:
            raise ValueError("height must be positive")

    @property
    def ident(self) -> str:
        return f"bump[{self.a:g},{self.b:g}]x{self.height:g}"

    def __call__(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        s = (2 * lam - self.a - self.b) / (self.b - self.a)
        return self.height * np.where(np.abs(s) < 1, (1 - s * s) ** 2, 0.0)


@dataclass
class EntropyReport:
    value: float
    test_function: str
    bandwidth: float
    rhs_budget: float = -math.inf
    finite: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def holds(self) -> bool:
        return self.value >= self.rhs_budget

    def to_dict(self) -> dict:
        val = self.value if math.isfinite(self.value) else "-inf"
        rhs = self.rhs_budget if math.isfinite(self.rhs_budget) else "-inf"
        return {"value": val, "test_function": self.test_function, "bandwidth": self.bandwidth,
                "rhs_budget": rhs, "finite": self.finite, "holds": self.holds, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def entropy(density: SmoothedDensity, phi: TestFunction, budget: float = -math.inf,
            min_nodes: int = 20) -> EntropyReport:
    """``int log(mu'/phi) phi dlambda`` by the trapezoid rule on the density grid.

    A node of ``supp phi`` where the density vanishes makes the value ``-inf``.
    """
    g = density.grid
    if phi.a < g[0] or phi.b > g[-1]:
        raise ValueError("test function support must lie inside the density window")
    p = phi(g)
    inside = p > 0
    if inside.sum() < min_nodes:
        raise ValueError("density grid does not resolve the test function")
    if np.any(density.values[inside] <= 0):
        return EntropyReport(-math.inf, phi.ident, density.bandwidth, budget, False)
    integrand = np.zeros_like(g)
    integrand[inside] = p[inside] * np.log(density.values[inside] / p[inside])
    return EntropyReport(float(np.trapezoid(integrand, g)), phi.ident, density.bandwidth, budget)


def entropy_budget(V: Field, C: float = 1.0) -> float:
    """``-C (sum sqrt|lambda_n(V)| + sum sqrt|lambda_n(-V)| + sqrt ||V||_inf + 1)``."""
    s = 0.0
    for sign in (1, -1):
        res = eigs_below(build_operator(V.domain, V, sign), 0.0)
        s += float(np.sum(np.sqrt(np.abs(res.eigenvalues))))
    return -C * (s + math.sqrt(V.sup_norm()) + 1.0)


# -- truncation ------------------------------------------------------------------------------

@dataclass
class Truncation:
    potential: Field
    count: int
    bound: int
    split: BoundReport
    gauge_count: int

    @property
    def holds(self) -> bool:
        return self.count <= self.bound


def truncate_potential(V0: Field, A, radius: float, eps: float) -> Truncation:
    """``[V0]_+ - chi [V0]_- + div A + |A|^2/(1-eps)`` with ``chi`` the ball of ``radius``.

    The count ``N`` is for ``-Delta + V``.  ``bound`` is ``N(-chi [V0]_- / eps)``;
    the splitting report also records the count of the gauge part
    ``([V0]_+ + div A + |A|^2/(1-eps)) / (1-eps)``, which vanishes whenever
    the discrete gauge form is nonnegative.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    dom = V0.domain
    if A.domain != dom:
        raise ValueError("V0 and A live on different grids")
    chi = (dom.radius < radius).astype(float)
    pos = np.maximum(V0.values, 0.0)
    neg = np.maximum(-V0.values, 0.0)
    W1 = Field(dom, -chi * neg)
    W2 = Field(dom, pos + A.divergence().values + A.norm2().values / (1.0 - eps))
    Vn = W1 + W2
    N = count_below(build_operator(dom, Vn, +1), 0.0).count
    rep = split_count_check(W1, W2, eps)
    return Truncation(Vn, N, rep.extra["N_first"], rep, rep.extra["N_second"])


# -- semicontinuity --------------------------------------------------------------------------

@dataclass
class SemicontinuityReport:
    distances: list
    entropies: list
    limit_entropy: float
    liminf: float
    limsup: float
    slack: float
    bandwidth: float
    test_function: str
    monotone_distances: bool

    @property
    def lower_holds(self) -> bool:
        return self.limit_entropy >= self.liminf - self.slack

    @property
    def upper_holds(self) -> bool:
        return self.limit_entropy <= self.limsup + self.slack

    def to_dict(self) -> dict:
        f = lambda x: x if math.isfinite(x) else "-inf"
        return {"d_BL": self.distances, "entropies": [f(e) for e in self.entropies],
                "limit_entropy": f(self.limit_entropy), "liminf": f(self.liminf),
                "limsup": f(self.limsup), "slack": self.slack, "bandwidth": self.bandwidth,
                "test_function": self.test_function,
                "monotone_distances": self.monotone_distances,
                "lower_holds": self.lower_holds, "upper_holds": self.upper_holds}


def semicontinuity_experiment(family: list, V: Field, f: Field, phi: TestFunction,
                              bandwidth: float, slack: float = 0.05, sign: int = 1,
                              tail: int | None = None) -> SemicontinuityReport:
    """Spectral measures of ``-Delta + sign V_n`` against the limit ``-Delta + sign V``.

    ``liminf``/``limsup`` are taken over the last ``tail`` members (default:
    the second half of the family).  Both semicontinuity directions are
    reported; ``monotone_distances`` records whether ``d_BL`` is nonincreasing
    up to ``1e-9``.
    """
    dom = V.domain

    def measure(W):
        op = build_operator(dom, W, sign)
        return spectral_measure(op, f)

    mu = measure(V)
    lam_max = float(mu.locations[-1])
    win = (phi.a, phi.b)
    dens = lambda m: smooth_density(m, bandwidth, lam_max, window=win)
    e_lim = entropy(dens(mu), phi).value
    dists, ents = [], []
    for W in family:
        m = measure(W)
        dists.append(bounded_lipschitz(m, mu))
        ents.append(entropy(dens(m), phi).value)
    k = max(1, len(family) // 2) if tail is None else tail
    tail_e = ents[-k:]
    mono = all(b <= a + 1e-9 for a, b in zip(dists, dists[1:]))
    return SemicontinuityReport(dists, ents, e_lim, min(tail_e), max(tail_e), slack,
                                bandwidth, phi.ident, mono)
