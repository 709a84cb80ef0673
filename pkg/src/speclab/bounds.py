"""Executable inequality certificates on discretized operators.

Each function evaluates both sides of one inequality and returns a
:class:`BoundReport`.  Where the underlying constant is not known the report
carries the empirical ratio instead of a hard-coded value.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import (DomainSpec, Field, build_operator, dirichlet_energy, integrate,
                   reduce_radial, restrict_operator, weighted_weights)
from .spectra import (CountCertificate, count_below, count_radial_channels, eigs_below,
                      neg_sum)


class PreconditionError(RuntimeError):
    """An eigensolve contradicts the precondition of a certificate."""


def grid_digest(domain: DomainSpec, *fields: Field) -> str:
    h = hashlib.sha256(domain.digest().encode())
    for f in fields:
        h.update(np.ascontiguousarray(f.values).tobytes())
    return h.hexdigest()[:16]


@dataclass
class BoundReport:
    bound_id: str
    lhs: float
    rhs: float
    constant_used: float | str
    holds: bool
    margin: float
    grid_digest: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def make(cls, bound_id, lhs, rhs, constant, digest="", slack=0.0, **extra) -> "BoundReport":
        lhs, rhs = float(lhs), float(rhs)
        return cls(bound_id, lhs, rhs, constant, bool(lhs <= rhs + slack), rhs - lhs, digest, extra)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extra"] = _jsonable(d["extra"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _count(N) -> int:
    return N.count if isinstance(N, CountCertificate) else int(N)


def clr_report(V: Field, d: int, N: CountCertificate | int | None = None,
               C: float | None = None) -> BoundReport:
    """``N <= C int V^{d/2}`` for ``-Delta - V`` (all angular channels on radial grids).

    Without ``C`` the report uses the observed ratio ``N / int V^{d/2}`` and
    labels the constant ``"empirical"``.
    """
    if d < 3:
        raise ValueError("the CLR bound is stated for d >= 3")
    if V.domain.dim != d:
        raise ValueError("field dimension does not match d")
    if np.any(V.values < 0):
        raise ValueError("CLR report needs V >= 0")
    if N is None:
        N = count_radial_channels(V) if V.domain.kind == "radial" else \
            count_below(build_operator(V.domain, V, -1), 0.0).count
    n = _count(N)
    integral = integrate(V.with_values(V.values ** (d / 2.0)))
    ratio = 0.0 if n == 0 else (math.inf if integral == 0 else n / integral)
    const = ratio if C is None else float(C)
    rhs = n if C is None else const * integral
    return BoundReport.make("clr", n, rhs, "empirical" if C is None else const,
                            grid_digest(V.domain, V), N=n, integral=integral, ratio=ratio)


def gny_certificate(V: Field) -> BoundReport:
    """``int V <= (6^4 + 12 + 4N) N`` for ``-Delta - V`` on a 2D grid.

    The chain form ``(6^4 + 4(N+1)) N + 8(1+N)`` is evaluated alongside.
    ``N`` is counted with the grid's own boundary conditions.  The count with
    the opposite condition on the outer edges is reported as well: Dirichlet
    and Neumann boxes bracket the whole-plane count from below and above.
    """
    dom = V.domain
    if dom.kind != "rectangle":
        raise ValueError("the GNY certificate needs a 2D rectangle field")
    if np.any(V.values < 0):
        raise ValueError("GNY certificate needs V >= 0")
    cert = count_below(build_operator(dom, V, -1), 0.0)
    N = cert.count
    lhs = integrate(V)
    rhs = (6**4 + 12 + 4 * N) * N
    chain = (6**4 + 4 * (N + 1)) * N + 8 * (1 + N)
    other_bc = "neumann" if dom.bc[0] == "dirichlet" else "dirichlet"
    other = DomainSpec(dom.kind, dom.bounds, dom.n, other_bc, dom.dim)
    n_other = count_below(build_operator(other, Field(other, V.values), -1), 0.0).count
    return BoundReport.make("gny", lhs, rhs, 6**4 + 12 + 4 * N, grid_digest(dom, V),
                            N=N, method=cert.method, rhs_chain=chain, holds_chain=lhs <= chain,
                            bc=dom.bc[0], N_other_bc=n_other)


def _shell_sums(V: Field, weight: float) -> tuple[list, bool]:
    dom = V.domain
    r = dom.coords
    w = weighted_weights(dom, weight)
    n_lo = int(math.floor(dom.bounds[0]))
    n_hi = int(math.ceil(dom.bounds[1]))
    sums = []
    for n in range(max(n_lo, 1), n_hi):
        sel = (r > n) & (r <= n + 1)
        sums.append(float(np.dot(V.values[sel], w[sel])))
    partial = not float(dom.bounds[1]).is_integer()
    return sums, partial


def dr_report(V: Field, p: float, lam0: float | None = None,
              C: float | None = None) -> BoundReport:
    """Weighted integrals of ``V`` against ``1 + sum |lambda_n|^p`` on ``|x| > 1``.

    ``V`` lives on a radial grid starting at ``r = 1`` with a Neumann
    condition there.  Eigenvalues are those of the s-channel operator
    ``-d^2/dr^2 + alpha_d/r^2 - V``.  For ``p <= 1/2`` the left side is
    ``int V^{1/2+p} |x|^{1-d} dx``; for ``p > 1/2`` it is the shell sum
    ``sum_n (int_{n<|x|<=n+1} V |x|^{1-d} dx)^{2p}``.  At ``p = 1/2`` both are
    computed and the first is the reported ``lhs``.
    """
    if p <= 0:
        raise ValueError("p must be positive")
    dom = V.domain
    if dom.kind != "radial" or not math.isclose(dom.bounds[0], 1.0) or dom.bc[0] != "neumann":
        raise ValueError("needs a radial field on r >= 1 with a Neumann condition at r = 1")
    if np.any(V.values < 0):
        raise ValueError("dr report needs V >= 0")
    d = dom.dim
    op = build_operator(dom, V, -1)
    res = eigs_below(op, 0.0)
    sum_p = neg_sum(res, p)
    if lam0 is None:
        lam0 = float(res.eigenvalues[0]) if len(res) else 0.0
    rhs_base = 1.0 + sum_p
    extra = {"p": p, "lambda0": lam0, "eigen_sum": sum_p, "N": len(res)}
    shells, partial = _shell_sums(V, 1 - d)
    shell_lhs = float(sum(s ** (2 * p) for s in shells))
    weighted = integrate(V.with_values(V.values ** (0.5 + p)), 1 - d)
    extra.update(shell_sum=shell_lhs, weighted_integral=weighted, partial_last_shell=partial)
    lhs = weighted if p <= 0.5 else shell_lhs
    ratio = lhs / rhs_base
    extra["ratio"] = ratio
    const = ratio if C is None else float(C)
    rhs = lhs if C is None else const * rhs_base
    bid = "dr_weighted" if p <= 0.5 else "dr_shells"
    return BoundReport.make(bid, lhs, rhs, "empirical" if C is None else const,
                            grid_digest(dom, V), **extra)


def hardy_ratio(u: Field, d: int | None = None) -> float:
    """``((d-2)^2/4) int u^2/|x|^2  /  int |grad u|^2`` for a radial profile ``u``."""
    dom = u.domain
    if dom.kind != "radial":
        raise ValueError("hardy_ratio needs a radial field")
    d = dom.dim if d is None else d
    if u.values[0] != 0 or u.values[-1] != 0:
        raise ValueError("u must vanish at both ends (support touches the origin side)")
    den = dirichlet_energy(u)
    if den == 0:
        return 0.0
    num = (d - 2) ** 2 / 4.0 * integrate(u.with_values(u.values**2), -2)
    return num / den


def _ramp(r, a, b):
    return np.clip((r - a) / (b - a), 0.0, 1.0)


def decay_test_function(dom: DomainSpec, eps: float, b_radius: float) -> np.ndarray:
    """``|x|^{-d/2+1-eps/2}`` cut off below ``B`` (ramp on ``[B, 2B]``) and at ``r_max``."""
    r = dom.coords
    r_max = dom.bounds[1]
    d = dom.dim
    cut = _ramp(r, b_radius, 2 * b_radius) * (1.0 - _ramp(r, 0.5 * r_max, r_max))
    power = np.where(r > 0, r, 1.0) ** (-d / 2.0 + 1.0 - eps / 2.0)
    return power * cut


def decay_certificate(V: Field, eps: float, b_radius: float, d: int | None = None) -> BoundReport:
    """``int V |phi|^2 <= int |grad phi|^2`` for the cut-off power ``phi``.

    The precondition ``H >= 0`` outside ``B`` is checked by counting the
    s-channel below 0; both sides are evaluated with the operator's own
    quadratic forms, so they hold exactly whenever the precondition passes.
    """
    dom = V.domain
    if dom.kind != "radial":
        raise ValueError("decay certificate needs a radial field")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = dom.dim if d is None else d
    op = build_operator(dom, V, -1)
    outside = dom.coords > b_radius
    c = count_below(restrict_operator(op, outside), 0.0)
    if c.count:
        raise PreconditionError(f"H has {c.count} negative eigenvalues outside B_{b_radius}")
    phi = Field(dom, decay_test_function(dom, eps, b_radius))
    w = reduce_radial(phi)
    lhs = -op.potential_form(w)
    rhs = op.kinetic_form(w)
    ext = dom.coords >= 1.0
    weighted = integrate(V.with_values(np.where(ext, V.values, 0.0)), -(d - 2 + eps))
    return BoundReport.make("decay", lhs, rhs, 1.0, grid_digest(dom, V), slack=1e-12 * abs(rhs),
                            eps=eps, B=b_radius, weighted_integral=weighted)


def split_count_check(W1: Field, W2: Field, eps: float) -> BoundReport:
    """``N(W1 + W2) <= N(W1/eps) + N(W2/(1-eps))`` for ``-Delta + W``."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if W1.domain != W2.domain:
        raise ValueError("W1 and W2 live on different grids")
    dom = W1.domain
    N = lambda W: count_below(build_operator(dom, W, +1), 0.0).count
    n12 = N(W1 + W2)
    n1 = N(W1 * (1.0 / eps))
    n2 = N(W2 * (1.0 / (1.0 - eps)))
    return BoundReport.make("splitting", n12, n1 + n2, 1.0, grid_digest(dom, W1, W2),
                            eps=eps, N_sum=n12, N_first=n1, N_second=n2)


def rayleigh_certificate(V: Field, gamma2: float, phi: Field, region) -> BoundReport:
    """``int V phi^2 <= gamma^2 int phi^2 + int |grad phi|^2`` on ``region``.

    ``H = -Delta - V`` restricted to ``region`` must satisfy ``H >= -gamma^2``
    (checked by counting).  ``phi`` is given in operator convention (reduced
    values on radial grids) and must vanish outside ``region``.
    """
    dom = V.domain
    region = np.asarray(region(dom.coords) if callable(region) else region, dtype=bool)
    if np.any(phi.values[~region] != 0):
        raise ValueError("phi must vanish outside the region")
    op = restrict_operator(build_operator(dom, V, -1), region)
    c = count_below(op, -gamma2)
    if c.count:
        raise PreconditionError(f"H has {c.count} eigenvalues below -gamma^2 = {-gamma2}")
    lhs = -op.potential_form(phi)
    rhs = gamma2 * op.norm2(phi) + op.kinetic_form(phi)
    return BoundReport.make("rayleigh", lhs, rhs, 1.0, grid_digest(dom, V, phi),
                            slack=1e-12 * max(abs(rhs), 1.0), gamma2=gamma2)


def empirical_constant(reports: list) -> float:
    """Largest observed ratio over a battery of reports."""
    return max((r.extra.get("ratio", 0.0) for r in reports), default=0.0)
