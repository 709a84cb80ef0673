"""Randomized invariants that every discretization in the package must keep."""
import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from speclab.bounds import split_count_check
from speclab.gauge import positive_solution
from speclab.grid import DomainSpec, Field, build_operator
from speclab.measure import bounded_lipschitz, shell_vector, smooth_density, spectral_measure
from speclab.potentials import SmoothBump, sample, spherical_average
from speclab.spectra import count_below, lowest_eigenvalues

FAST = settings(max_examples=25, deadline=None,
                suppress_health_check=[HealthCheck.function_scoped_fixture])

bumps = st.lists(st.tuples(st.floats(-4.0, 4.0), st.floats(0.5, 3.0), st.floats(-4.0, 4.0)),
                 min_size=1, max_size=3)


def bump_field(dom, spec):
    total = Field.zeros(dom)
    for height, width, centre in spec:
        c = (centre,) if dom.dim == 1 else (centre, -centre / 2)
        total = total + sample(SmoothBump(abs(height), width, c), dom) * np.sign(height)
    return total


@FAST
@given(spec=bumps, sign=st.sampled_from([-1, 1]),
       kind=st.sampled_from(["interval", "rectangle", "radial"]))
def test_operator_symmetric(spec, sign, kind):
    dom = {"interval": DomainSpec.interval(-6, 6, 61, ("dirichlet", "neumann")),
           "rectangle": DomainSpec.rectangle(-6, 6, -6, 6, 15, "neumann"),
           "radial": DomainSpec.radial(0.5, 6, 61, 3, ("neumann", "dirichlet"))}[kind]
    V = bump_field(dom, spec) if kind != "radial" else Field(dom, np.cos(dom.coords) * spec[0][0])
    A = build_operator(dom, V, sign).matrix
    assert abs(A - A.T).max() <= 1e-12 * abs(A).max()


@FAST
@given(spec=bumps, lam=st.floats(-3.0, 0.5))
def test_dirichlet_neumann_bracketing(spec, lam):
    counts = {}
    for bc in ("dirichlet", "neumann"):
        dom = DomainSpec.rectangle(-6, 6, -6, 6, 21, bc)
        counts[bc] = count_below(build_operator(dom, bump_field(dom, spec), +1), lam).count
    assert counts["dirichlet"] <= counts["neumann"]


@FAST
@given(spec=bumps, lams=st.lists(st.floats(-5.0, 2.0), min_size=2, max_size=6))
def test_count_monotone(spec, lams):
    dom = DomainSpec.interval(-10, 10, 201)
    op = build_operator(dom, bump_field(dom, spec), +1)
    counts = [count_below(op, lam).count for lam in sorted(lams)]
    assert counts == sorted(counts)
    dense = np.linalg.eigvalsh(op.matrix.toarray())
    assert counts[-1] == int(np.sum(dense < max(lams))) or \
        np.min(np.abs(dense - max(lams))) < 1e-8


@FAST
@given(spec=bumps, eps=st.floats(0.05, 0.95))
def test_splitting_inequality(spec, eps):
    dom = DomainSpec.interval(-10, 10, 201)
    half = len(spec) // 2 + 1
    W1, W2 = bump_field(dom, spec[:half]), bump_field(dom, spec[half:] or [(0.0, 1.0, 0.0)])
    assert split_count_check(W1, W2, eps).holds


@FAST
@given(spec=bumps, scale=st.floats(0.1, 5.0))
def test_spectral_mass_conserved(spec, scale):
    dom = DomainSpec.ball(8.0, 161, 3)
    V = Field(dom, bump_field(DomainSpec.interval(0, 8, 161), spec).values)
    mu = spectral_measure(build_operator(dom, V * scale, +1), shell_vector(dom), shell_mode=True)
    assert abs(mu.total_mass - 1.0) <= 1e-10
    dens = smooth_density(mu, 0.2)
    assert dens.mass <= mu.total_mass + 1e-8


@FAST
@given(spec=bumps, margin=st.floats(0.01, 2.0))
def test_positive_solution_positive(spec, margin):
    dom = DomainSpec.interval(-8, 8, 161)
    V = bump_field(dom, spec)
    g2 = max(0.0, -float(lowest_eigenvalues(build_operator(dom, V, +1))[0])) + margin
    u = positive_solution(V, g2)
    assert np.all(u.values > 0)


@FAST
@given(values=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=9, max_size=9))
def test_field_csv_round_trip(values, tmp_path_factory):
    dom = DomainSpec.rectangle(0, 1, 0, 2, 3)
    f = Field(dom, np.array(values))
    path = tmp_path_factory.mktemp("csv") / "f.csv"
    f.to_csv(path)
    back = Field.from_csv(path)
    assert back.domain == dom and np.array_equal(back.values, f.values)


@FAST
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), spec1=bumps, spec2=bumps)
def test_spherical_average_linear(a, b, spec1, spec2):
    rect = DomainSpec.rectangle(-6, 6, -6, 6, 41)
    rad = DomainSpec.radial(0.5, 5.0, 21, 2)
    f, g = bump_field(rect, spec1), bump_field(rect, spec2)
    lhs = spherical_average(f * a + g * b, rad, 64).values
    rhs = a * spherical_average(f, rad, 64).values + b * spherical_average(g, rad, 64).values
    assert np.allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


@FAST
@given(shift=st.floats(0.0, 5.0), w=st.floats(0.01, 3.0))
def test_bounded_lipschitz_atom_shift(shift, w):
    from speclab.measure import SpectralMeasure

    d = bounded_lipschitz(SpectralMeasure([1.0], [w]), SpectralMeasure([1.0 + shift], [w]))
    assert d == pytest.approx(min(shift, 2.0) * w, abs=1e-8)
