"""Potential generators, random lattice potentials and spherical averaging.

All generators return nonnegative profiles for attractive potentials; the
sign convention is chosen when the operator is built (``sign=-1`` gives
``-Delta - V``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .grid import DomainSpec, Field

ZERO_MEAN_DISTRIBUTIONS = ("rademacher", "uniform")


def _dist(x: np.ndarray, center) -> np.ndarray:
    """Distance of every node in ``x`` (``(n,)`` or ``(n, 2)``) to ``center``."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    if x.ndim == 1:
        return np.abs(x - c[0])
    if c.size == 1:
        c = np.repeat(c, x.shape[1])
    return np.sqrt(((x - c) ** 2).sum(axis=1))


def _points(domain: DomainSpec) -> np.ndarray:
    # radial fields are functions of r only; r plays the role of the coordinate
    return domain.coords


class PotentialSpec:
    """Base class.  Subclasses implement ``evaluate(points)``."""

    kind = "abstract"

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_domain(self, domain: DomainSpec) -> None:
        pass

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()})
        return d


@dataclass(frozen=True)
class Well(PotentialSpec):
    """``depth`` on ``|x - center| < radius``; nodes exactly on the edge get ``depth/2``."""

    depth: float
    radius: float
    center: tuple = (0.0,)
    kind = "well"

    def __post_init__(self):
        if self.depth < 0 or self.radius <= 0:
            raise ValueError("well needs depth >= 0 and radius > 0")

    def evaluate(self, x):
        r = _dist(x, self.center)
        edge = np.isclose(r, self.radius, rtol=0, atol=1e-12 * max(1.0, self.radius))
        return np.where(edge, 0.5 * self.depth, np.where(r < self.radius, self.depth, 0.0))


@dataclass(frozen=True)
class SmoothBump(PotentialSpec):
    """``height (1 - (|x-c|/width)^2)^order`` inside ``width``; C^{order-1}."""

    height: float
    width: float
    center: tuple = (0.0,)
    order: int = 3
    kind = "smooth_bump"

    def __post_init__(self):
        if self.height < 0 or self.width <= 0:
            raise ValueError("bump needs height >= 0 and width > 0")

    def evaluate(self, x):
        s = _dist(x, self.center) / self.width
        return self.height * np.where(s < 1.0, np.clip(1.0 - s * s, 0.0, None) ** self.order, 0.0)


@dataclass(frozen=True)
class Hardy(PotentialSpec):
    """``c / (1 + |x|^2)`` with ``c <= (d-2)^2/4``: no negative eigenvalues."""

    d: int
    c: float
    kind = "hardy"

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("the Hardy potential needs d >= 3")
        if self.c > (self.d - 2) ** 2 / 4.0 + 1e-15 or self.c < 0:
            raise ValueError("Hardy coupling must lie in [0, (d-2)^2/4]")

    def check_domain(self, domain):
        if domain.dim != self.d:
            raise ValueError(f"Hardy potential for d={self.d} sampled on a d={domain.dim} domain")

    def evaluate(self, x):
        r = _dist(x, 0.0)
        return self.c / (1.0 + r * r)


@dataclass(frozen=True)
class SparseBumps(PotentialSpec):
    """Sum of smooth bumps (shells on radial domains) with given centers."""

    heights: tuple
    widths: tuple
    centers: tuple
    order: int = 3
    kind = "sparse_bumps"

    def __post_init__(self):
        if not (len(self.heights) == len(self.widths) == len(self.centers)):
            raise ValueError("heights, widths and centers must have equal length")
        if any(w <= 0 for w in self.widths) or any(h < 0 for h in self.heights):
            raise ValueError("bumps need positive widths and nonnegative heights")

    def evaluate(self, x):
        out = np.zeros(x.shape[0])
        for h, w, c in zip(self.heights, self.widths, self.centers):
            out += SmoothBump(h, w, (c,), self.order).evaluate(x)
        return out


@dataclass(frozen=True)
class RandomLattice(PotentialSpec):
    """``V_omega(x) = sum_n omega_n v_n chi(x - n)`` over unit cells ``[n, n+1)^d``.

    ``v_n = amplitude (1 + |n|)^(-decay)``.  Each ``omega_n`` is drawn from a
    generator seeded by ``(seed, n)``, so a cell's value does not depend on the
    domain it is sampled on.
    """

    amplitude: float
    decay: float = 0.0
    distribution: str = "rademacher"
    bounds: tuple = (-1.0, 1.0)
    seed: int = 0
    kind = "random_lattice"

    def __post_init__(self):
        if self.distribution not in ZERO_MEAN_DISTRIBUTIONS:
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "uniform" and not math.isclose(self.bounds[0], -self.bounds[1]):
            raise ValueError("uniform distribution must be symmetric (zero mean)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def check_domain(self, domain):
        if domain.kind == "radial":
            raise ValueError("random lattice potentials need a Cartesian domain")

    def omega(self, cell: tuple) -> float:
        key = [int(self.seed) & 0xFFFFFFFF, int(self.seed) >> 32]
        key += [int(c) + 2**31 for c in cell]
        rng = np.random.default_rng(np.random.SeedSequence(key))
        if self.distribution == "rademacher":
            return 1.0 if rng.integers(0, 2) else -1.0
        lo, hi = self.bounds
        return float(rng.uniform(lo, hi))

    def amplitudes(self, cell: tuple) -> float:
        return self.amplitude * (1.0 + math.sqrt(sum(c * c for c in cell))) ** (-self.decay)

    def evaluate(self, x):
        pts = x.reshape(x.shape[0], -1)
        cells = np.floor(pts).astype(np.int64)
        uniq, inv = np.unique(cells, axis=0, return_inverse=True)
        vals = np.array([self.omega(tuple(c)) * self.amplitudes(tuple(c)) for c in uniq])
        return vals[inv.reshape(-1)]


@dataclass(frozen=True)
class Oscillatory(PotentialSpec):
    """``amplitude sin(k x_1) / (1 + (|x|/envelope)^2)``; radial domains use ``sin(k r)``."""

    amplitude: float
    wavevector: float
    envelope: float
    kind = "oscillatory"

    def evaluate(self, x):
        r = _dist(x, 0.0)
        x1 = x if x.ndim == 1 else x[:, 0]
        return self.amplitude * np.sin(self.wavevector * x1) / (1.0 + (r / self.envelope) ** 2)


POTENTIAL_KINDS = {cls.kind: cls for cls in
                   (Well, SmoothBump, Hardy, SparseBumps, RandomLattice, Oscillatory)}


def potential_from_dict(d: dict) -> PotentialSpec:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in POTENTIAL_KINDS:
        raise ValueError(f"unknown potential kind {kind!r}")
    d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    return POTENTIAL_KINDS[kind](**d)


def sample(spec: PotentialSpec | list, domain: DomainSpec) -> Field:
    """Sample a potential (or a list of potentials, summed) at the nodes."""
    specs = spec if isinstance(spec, (list, tuple)) else [spec]
    total = np.zeros(domain.size)
    for s in specs:
        s.check_domain(domain)
        total += s.evaluate(_points(domain))
    return Field(domain, total)


def random_lattice_realization(spec: RandomLattice, seed: int, domain: DomainSpec) -> Field:
    """``V_omega`` for one seed."""
    if not isinstance(spec, RandomLattice):
        raise ValueError("spec must be a random_lattice potential")
    return sample(RandomLattice(spec.amplitude, spec.decay, spec.distribution, spec.bounds, seed),
                  domain)


# -- spherical averages ------------------------------------------------------

def _sphere_nodes(d: int, m: int):
    """Midpoint-rule nodes and weights on ``S^{d-1}`` (weights sum to 1)."""
    if d == 2:
        th = (np.arange(m) + 0.5) * 2 * np.pi / m
        return np.column_stack([np.cos(th), np.sin(th)]), np.full(m, 1.0 / m)
    if d == 3:
        th = (np.arange(m) + 0.5) * np.pi / m
        ph = (np.arange(2 * m) + 0.5) * np.pi / m
        T, P = np.meshgrid(th, ph, indexing="ij")
        w = np.sin(T).ravel()
        pts = np.column_stack([(np.sin(T) * np.cos(P)).ravel(), (np.sin(T) * np.sin(P)).ravel(),
                               np.cos(T).ravel()])
        return pts, w / w.sum()
    raise ValueError("spherical averages are implemented for d = 2, 3")


def spherical_average(V, radial: DomainSpec, n_angles: int = 256) -> Field:
    """``Vbar(r) = (c_d r^{d-1})^{-1} int_{|x|=r} V dS`` at the radial nodes.

    ``V`` is either a 2D rectangle :class:`Field` (interpolated with bicubic
    splines) or a callable / :class:`PotentialSpec` taking ``(n, d)`` points.
    """
    if radial.kind != "radial":
        raise ValueError("target domain must be radial")
    d = radial.dim
    dirs, w = _sphere_nodes(d, n_angles)
    r = radial.coords
    pts = (r[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    if isinstance(V, Field):
        dom = V.domain
        if dom.kind != "rectangle" or d != 2:
            raise ValueError("field averaging needs a rectangle field and a d=2 radial domain")
        a1, b1, a2, b2 = dom.bounds
        if r.max() > min(-a1, b1, -a2, b2) + 1e-12:
            raise ValueError("radial range leaves the grid")
        spline = RectBivariateSpline(dom.axes[0].coords, dom.axes[1].coords, V.grid_values(),
                                     kx=3, ky=3)
        vals = spline.ev(pts[:, 0], pts[:, 1])
    else:
        fn = V.evaluate if isinstance(V, PotentialSpec) else V
        vals = np.asarray(fn(pts), dtype=float)
    return Field(radial, vals.reshape(r.size, -1) @ w)


# -- Molchanov-type sparse potentials -------------------------------------------

def molchanov_sparse(p_target: float, box_radius: float, width: float = 2.0,
                     coupling: float = 0.3, first_center: float = 5.0) -> SparseBumps:
    """Sparse shells with no bound state and divergent ``int V^p`` (d = 3).

    Shell ``k`` is centered at ``c_k`` with gaps ``10 k``, has width ``width``
    and height ``coupling / (c_k k^2)``, so ``int r V dr`` over shell ``k`` is
    ``coupling * width * (32/35) / k^2``.  With the defaults the total stays
    below ``0.3 * 2 * (32/35) * pi^2/6 < 1`` and the Bargmann bound
    ``N_l <= (2l+1)^{-1} int r V dr`` keeps every channel empty while
    ``int V^p dx`` over shell ``k`` grows like ``c_k^{2-p} k^{-2p}``, which
    diverges for ``p <= 5/4``.  Only shells that fit inside ``box_radius``
    are returned.
    """
    if not 0 < p_target <= 1.25:
        raise ValueError("this shell family diverges only for 0 < p <= 5/4")
    if box_radius <= 0:
        raise ValueError("box radius must be positive")
    heights, widths, centers = [], [], []
    c, k = first_center, 1
    while c + width <= box_radius:
        heights.append(coupling / (c * k * k))
        widths.append(width)
        centers.append(c)
        c += 10.0 * k
        k += 1
    return SparseBumps(tuple(heights), tuple(widths), tuple(centers))


def bargmann_sum(spec: SparseBumps) -> float:
    """``int_0^inf r V(r) dr`` for a shell family (closed form per bump)."""
    # int (1 - s^2)^3 ds over (-1, 1) = 32/35; int s (1-s^2)^3 ds = 0
    return float(sum(h * c * w * 32.0 / 35.0 for h, w, c in
                     zip(spec.heights, spec.widths, spec.centers)))


def binding_threshold(height: float = 1.0, d: int = 3, order: int = 3, h: float = 0.005,
                      tol: float = 1e-4) -> float:
    """Smallest width of a centered ``SmoothBump`` that binds in dimension ``d``.

    Found by bisection on the radial s-channel count on ``[h, 4 width]``.
    """
    from .grid import build_operator
    from .spectra import count_below

    def binds(w):
        n = int(round(4 * w / h)) + 1
        dom = DomainSpec.radial(h * 1e-3, 4 * w, n, d)
        V = sample(SmoothBump(height, w, (0.0,), order), dom)
        return count_below(build_operator(dom, V, -1), 0.0).count > 0

    lo, hi = 0.1, 1.0
    while binds(lo):
        lo /= 2
    while not binds(hi):
        hi *= 2
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if binds(mid) else (mid, hi)
    return 0.5 * (lo + hi)
