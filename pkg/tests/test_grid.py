import math

import numpy as np
import pytest

from speclab.grid import (DomainSpec, Field, alpha_d, build_operator, centrifugal_diagonal,
                          channel_alpha, channel_multiplicity, dirichlet_energy, integrate,
                          reduce_radial, restrict_operator, sphere_area, unreduce_radial)
from speclab.potentials import SmoothBump, Well, sample
from speclab.spectra import lowest_eigenvalues


def lowest(op, k=1):
    return np.linalg.eigvalsh(op.matrix.toarray())[:k]


class TestDomainSpec:
    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            DomainSpec.interval(1.0, 0.0, 10)
        with pytest.raises(ValueError):
            DomainSpec.interval(0.0, 1.0, 2)
        with pytest.raises(ValueError):
            DomainSpec.radial(0.0, 1.0, 10, 3, bc="neumann")
        with pytest.raises(ValueError):
            DomainSpec.radial(0.5, 1.0, 10, 1)
        with pytest.raises(ValueError):
            DomainSpec("interval", (0, 1), 10, "robin")

    def test_weights_sum_to_volume(self):
        cases = [
            (DomainSpec.interval(-2.0, 3.0, 17), 5.0),
            (DomainSpec.rectangle(0.0, 2.0, -1.0, 1.0, (9, 13)), 4.0),
            (DomainSpec.radial(1.0, 2.0, 41, 3), 4.0 / 3.0 * math.pi * 7.0),
            (DomainSpec.ball(2.0, 41, 2), math.pi * 4.0),
        ]
        for dom, vol in cases:
            assert np.all(dom.weights > 0)
            assert abs(dom.weights.sum() - vol) <= 1e-10 * vol

    def test_refined_keeps_nodes(self):
        dom = DomainSpec.interval(0.0, 1.0, 11)
        fine = dom.refined(2)
        assert fine.n == (21,)
        assert np.allclose(fine.coords[::2], dom.coords)

    def test_sphere_constants(self):
        assert math.isclose(sphere_area(2), 2 * math.pi)
        assert math.isclose(sphere_area(3), 4 * math.pi)
        assert alpha_d(3) == 0.0 and alpha_d(2) == -0.25
        assert channel_alpha(3, 1) == 2.0
        assert channel_multiplicity(3, 2) == 5 and channel_multiplicity(2, 1) == 2


class TestBuildOperator:
    def test_three_node_example(self):
        # three interior nodes, h = 1/4
        op = build_operator(DomainSpec.interval(0.0, 1.0, 5))
        assert lowest(op)[0] == pytest.approx(64 * math.sin(math.pi / 8) ** 2, rel=1e-12)
        assert lowest(op)[0] == pytest.approx(9.3726, abs=1e-4)

    @pytest.mark.parametrize("dom", [
        DomainSpec.interval(0.0, 2.0, 21, "neumann"),
        DomainSpec.rectangle(0.0, 1.0, 0.0, 2.0, (7, 9), "neumann"),
        DomainSpec.radial(1.0, 3.0, 21, 3, "neumann"),
    ])
    def test_neumann_kernel(self, dom):
        op = build_operator(dom)
        lam, vec = np.linalg.eigh(op.matrix.toarray())
        assert abs(lam[0]) < 1e-10
        # radial Neumann acts on the reduced function, which is constant here (d = 3)
        values = op.to_values(vec[:, 0])
        assert np.allclose(values, values[0])

    def test_symmetric_and_stencil(self):
        dom = DomainSpec.rectangle(-1.0, 1.0, -1.0, 1.0, (6, 7), ("dirichlet", "neumann",
                                                                 "neumann", "dirichlet"))
        V = sample(SmoothBump(2.0, 0.8, (0.2, 0.1)), dom)
        op = build_operator(dom, V, -1)
        M = op.matrix
        assert abs(M - M.T).max() == 0
        coo = M.tocoo()
        ny = int(dom.axes[1].active.sum())  # row-major over active nodes
        offsets = set(np.abs(coo.row - coo.col).tolist())
        assert offsets <= {0, 1, ny}
        op1 = build_operator(DomainSpec.radial(0.5, 3.0, 30, 3), None)
        assert op1.bandwidth == 1

    def test_errors(self):
        dom = DomainSpec.interval(0.0, 1.0, 11)
        other = DomainSpec.interval(0.0, 1.0, 12)
        with pytest.raises(ValueError):
            build_operator(dom, Field.zeros(other))
        with pytest.raises(ValueError):
            build_operator(dom, centrifugal=1.0)
        with pytest.raises(ValueError):
            build_operator(dom, sign=2)

    def test_square_well_oracle(self):
        dom = DomainSpec.interval(-20.0, 20.0, 40001)
        lam = lowest_eigenvalues(build_operator(dom, sample(Well(1.0, 1.0), dom), -1), 1)[0]
        assert abs(lam - (-0.4537531658603302)) < 2e-3

    def test_convergence_order(self):
        # smooth bump, error against a fine-grid reference
        errs, hs = [], []
        ref_dom = DomainSpec.interval(-10.0, 10.0, 16001)
        bump = SmoothBump(2.0, 2.0, order=4)
        ref = lowest_eigenvalues(build_operator(ref_dom, sample(bump, ref_dom), -1), 1)[0]
        for n in (201, 401, 801):
            dom = DomainSpec.interval(-10.0, 10.0, n)
            lam = lowest_eigenvalues(build_operator(dom, sample(bump, dom), -1), 1)[0]
            errs.append(abs(lam - ref))
            hs.append(dom.h)
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2

    @pytest.mark.parametrize("d,root", [(2, 2.404825557695773), (3, math.pi),
                                        (4, 3.831705970207512), (5, 4.493409457909064)])
    def test_ball_ground_state(self, d, root):
        # first zero of the Bessel function of order d/2 - 1 (frozen values)
        lam = lowest_eigenvalues(build_operator(DomainSpec.ball(1.0, 801, d)), 1)[0]
        assert lam == pytest.approx(root**2, rel=1e-4)


class TestCentrifugal:
    def test_exact_on_regular_solution(self):
        r = np.linspace(0.0, 2.0, 41)
        for alpha in (-0.25, 0.0, 2.0, 3.75):
            q = 0.5 + math.sqrt(alpha + 0.25)
            c = centrifugal_diagonal(r[1:-1], alpha, r[1])
            w = r**q
            lap = (w[:-2] - 2 * w[1:-1] + w[2:]) / r[1] ** 2
            assert np.allclose(-lap + c * w[1:-1], 0.0, atol=1e-9)

    def test_consistent_far_from_origin(self):
        r = np.linspace(5.0, 6.0, 11)
        c = centrifugal_diagonal(r, 2.0, 1e-3)
        assert np.allclose(c, 2.0 / r**2, rtol=1e-6)

    def test_rejects_subcritical(self):
        with pytest.raises(ValueError):
            centrifugal_diagonal(np.ones(3), -0.3, 0.1)


class TestRestrict:
    def test_full_mask_identity(self):
        dom = DomainSpec.interval(0.0, 1.0, 21)
        op = build_operator(dom)
        sub = restrict_operator(op, np.ones(dom.size, bool))
        assert (sub.matrix != op.matrix).nnz == 0

    def test_left_half_quadruples(self):
        dom = DomainSpec.interval(0.0, 1.0, 2001)
        op = build_operator(dom)
        sub = restrict_operator(op, lambda x: x < 0.5)
        ratio = lowest_eigenvalues(sub, 1)[0] / lowest_eigenvalues(op, 1)[0]
        assert ratio == pytest.approx(4.0, rel=1e-3)

    def test_well_restriction_close(self):
        dom = DomainSpec.interval(-20.0, 20.0, 8001)
        op = build_operator(dom, sample(Well(1.0, 1.0), dom), -1)
        a = lowest_eigenvalues(op, 1)[0]
        # the bound state decays like exp(-0.674|x|): clamping at |x| = 5 costs ~3e-3,
        # at |x| = 10 well below 1e-4
        b5 = lowest_eigenvalues(restrict_operator(op, lambda x: np.abs(x) < 5), 1)[0]
        b10 = lowest_eigenvalues(restrict_operator(op, lambda x: np.abs(x) < 10), 1)[0]
        assert a <= b10 <= b5
        assert 1e-3 < b5 - a < 5e-3
        assert b10 - a < 1e-4

    def test_empty_mask(self):
        op = build_operator(DomainSpec.interval(0.0, 1.0, 11))
        with pytest.raises(ValueError):
            restrict_operator(op, np.zeros(11, bool))

    def test_bracketing_random_masks(self):
        rng = np.random.default_rng(0)
        dom = DomainSpec.rectangle(-3.0, 3.0, -3.0, 3.0, 15)
        op = build_operator(dom, sample(SmoothBump(5.0, 2.0, (0.0, 0.0)), dom), -1)
        base = lowest(op)[0]
        for _ in range(100):
            mask = rng.random(dom.size) < rng.uniform(0.2, 0.9)
            if not (mask & dom.active).any():
                continue
            assert lowest(restrict_operator(op, mask))[0] >= base - 1e-8


class TestQuadrature:
    def test_volume_and_shell(self):
        dom = DomainSpec.interval(0.0, 1.0, 11)
        assert integrate(Field(dom, np.ones(dom.size))) == pytest.approx(1.0, rel=1e-14)
        shell = DomainSpec.radial(1.0, 2.0, 101, 3)
        val = integrate(Field(shell, np.ones(shell.size)), -2)
        assert val == pytest.approx(4 * math.pi, rel=1e-12)

    def test_origin_singularity(self):
        ball = DomainSpec.ball(1.0, 11, 3)
        with pytest.raises(ValueError):
            integrate(Field(ball, np.ones(ball.size)), -3)
        # integrable weight: exact cells
        val = integrate(Field(ball, np.ones(ball.size)), -2)
        assert val == pytest.approx(4 * math.pi, rel=1e-12)
        plane = DomainSpec.rectangle(-1.0, 1.0, -1.0, 1.0, 5)
        with pytest.raises(ValueError):
            integrate(Field(plane, np.ones(plane.size)), -1)

    def test_richardson_refinement(self):
        bump = SmoothBump(3.0, 2.0, (0.3, -0.2))
        vals = []
        for n in (81, 161):
            dom = DomainSpec.rectangle(-4.0, 4.0, -4.0, 4.0, n)
            vals.append(integrate(sample(bump, dom)))
        exact = 3.0 * math.pi * 4.0 / 4.0  # int (1-s^2)^3 over the disc = pi w^2 / 4
        assert abs(vals[1] - exact) / exact < 1e-3
        assert abs(vals[0] - vals[1]) / exact < 1e-3


class TestEnergy:
    def test_matches_operator_form(self):
        dom = DomainSpec.rectangle(0.0, 1.0, 0.0, 2.0, (9, 11))
        f = Field.from_function(dom, lambda x: np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1] / 2))
        op = build_operator(dom)
        assert dirichlet_energy(f) == pytest.approx(op.kinetic_form(f), rel=1e-10)
        dom1 = DomainSpec.interval(0.0, 1.0, 101)
        g = Field.from_function(dom1, lambda x: x * (1 - x) * np.exp(x))
        assert dirichlet_energy(g) == pytest.approx(build_operator(dom1).kinetic_form(g), rel=1e-10)

    def test_sine_energy(self):
        errs = []
        for n in (101, 201):
            dom = DomainSpec.interval(0.0, 1.0, n)
            f = Field.from_function(dom, lambda x: np.sin(np.pi * x))
            errs.append(abs(dirichlet_energy(f) - math.pi**2 / 2))
        assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)

    def test_cutoff_profile_energy(self):
        # plateau on |t|<1, ramps of slope 1/2 on 1<|t|<3
        dom = DomainSpec.interval(-4.0, 4.0, 801)
        f = Field.from_function(dom, lambda t: np.clip(1.5 - np.abs(t) / 2, 0.0, 1.0))
        assert dirichlet_energy(f) == pytest.approx(1.0, rel=1e-12)
        assert dirichlet_energy(Field.zeros(dom)) == 0.0


class TestFieldIO:
    def test_csv_round_trip(self, tmp_path):
        for dom in (DomainSpec.interval(0.0, 1.0, 7), DomainSpec.rectangle(0, 1, 0, 1, (3, 4)),
                    DomainSpec.radial(0.5, 2.0, 6, 4, "neumann")):
            f = Field(dom, np.random.default_rng(1).normal(size=dom.size) / 3.0)
            f.to_csv(tmp_path / "f.csv")
            g = Field.from_csv(tmp_path / "f.csv")
            assert g.domain == dom
            assert np.array_equal(g.values, f.values)
            head = (tmp_path / "f.csv").read_text().splitlines()[0]
            assert head.startswith("# domain=")

    def test_reduce_round_trip(self):
        dom = DomainSpec.radial(0.5, 3.0, 26, 3)
        f = Field(dom, np.cos(dom.coords))
        g = unreduce_radial(dom, reduce_radial(f))
        assert np.allclose(g.values, f.values, rtol=1e-14)

    def test_nonfinite_rejected(self):
        dom = DomainSpec.interval(0.0, 1.0, 5)
        with pytest.raises(ValueError):
            Field(dom, np.array([0, 1, np.nan, 0, 0.0]))
