import json
import math

import numpy as np
import pytest

from speclab.decompose import PartitionOfUnity, cutoff_profile
from speclab.gauge import (GaugeError, VectorField, assemble_global, gauge_pipeline,
                           gauge_residual, l3_check, positive_solution, vector_potential,
                           window_mask)
from speclab.grid import DomainSpec, Field, build_operator
from speclab.potentials import SmoothBump, Well, sample
from speclab.spectra import lowest_eigenvalues


def interval(n=401, L=5.0):
    return DomainSpec.interval(-L, L, n)


def two_wells(n=4001):
    dom = DomainSpec.ball(40.0, n, 3)
    V = Field(dom, sample(SmoothBump(2.0, 3.0, (12.0,)), dom).values
              - sample(SmoothBump(1.5, 2.5, (25.0,)), dom).values)
    return V


class TestWindowMask:
    def test_forms_agree(self):
        dom = interval(21)
        idx = np.arange(dom.size)
        expected = (idx > 3) & (idx < 9)
        assert np.array_equal(window_mask(dom, (3, 9)), expected)
        assert np.array_equal(window_mask(dom, expected), expected)

        class Layer:
            interval = (3, 9)

        assert np.array_equal(window_mask(dom, Layer()), expected)
        assert np.array_equal(window_mask(dom, None), dom.active)

    def test_inactive_nodes_dropped(self):
        dom = interval(21)
        m = window_mask(dom, np.ones(dom.size, bool))
        assert not m[0] and not m[-1]


class TestPositiveSolution:
    @pytest.mark.parametrize("dom", [DomainSpec.interval(-5, 5, 401),
                                     DomainSpec.rectangle(-2, 2, -2, 2, 21),
                                     DomainSpec.radial(1, 3, 41, 3)], ids=lambda d: d.kind)
    def test_free_harmonic_is_one(self, dom):
        u = positive_solution(Field.zeros(dom), 0.0)
        np.testing.assert_allclose(u.values, 1.0, atol=1e-12)

    def test_manufactured_exponential(self):
        errs = []
        for n in (101, 201, 401):
            dom = interval(n, 2.0)
            g2 = 0.5
            V = Field(dom, np.full(dom.size, 1.0 - g2))
            u = positive_solution(V, g2, boundary=lambda x: np.exp(x))
            errs.append(np.abs(u.values - np.exp(dom.coords)).max())
        assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5

    def test_well_discrete_residual(self):
        dom = interval(2001, 20.0)
        V = -sample(Well(1.0, 1.0), dom)
        lam0 = float(lowest_eigenvalues(build_operator(dom, V, +1))[0])
        g2 = abs(lam0) + 0.1
        u = positive_solution(V, g2)
        h = dom.h
        x = u.values
        res = (-x[:-2] + 2 * x[1:-1] - x[2:]) / h**2 + (V.values[1:-1] + g2) * x[1:-1]
        assert np.abs(res).max() < 1e-9 * (4 / h**2) * np.abs(x).max()
        assert x.min() > 0

    def test_precondition_and_positivity(self):
        dom = interval(2001, 20.0)
        V = -sample(Well(1.0, 1.0), dom)
        with pytest.raises(GaugeError):
            positive_solution(V, 0.1)
        with pytest.raises(GaugeError):
            positive_solution(V, 0.1, check=False)

    def test_scaling_leaves_vector_potential_unchanged(self):
        dom = DomainSpec.radial(1.0, 20.0, 1901, 3)
        V = -sample(SmoothBump(1.0, 3.0, (8.0,)), dom)
        g2 = max(0.0, -float(lowest_eigenvalues(build_operator(dom, V, +1))[0])) + 0.1
        a = vector_potential(positive_solution(V, g2, boundary=1.0))
        b = vector_potential(positive_solution(V, g2, boundary=3.0))
        np.testing.assert_allclose(a.components[0], b.components[0], atol=1e-12)


class TestVectorPotential:
    def test_constant(self):
        dom = DomainSpec.rectangle(-1, 1, -1, 1, 11)
        A = vector_potential(Field(dom, np.full(dom.size, 2.0)))
        assert all(np.all(c == 0) for c in A.components)

    def test_exponential(self):
        dom = DomainSpec.rectangle(-1, 1, -1, 1, 41)
        A = vector_potential(Field(dom, np.exp(dom.coords[:, 0])))
        assert np.abs(A.components[0] - 1).max() < 1e-2
        assert np.abs(A.components[1]).max() < 1e-12

    def test_exp_sin_second_order(self):
        errs = []
        for n in (101, 201, 401):
            dom = interval(n, 3.0)
            A = vector_potential(Field(dom, np.exp(np.sin(dom.coords))))
            errs.append(np.abs(A.components[0] - np.cos(dom.coords)).max())
        assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5

    def test_rejects_nonpositive(self):
        dom = interval(11)
        with pytest.raises(GaugeError):
            vector_potential(Field(dom, dom.coords))

    def test_window_does_not_leak(self):
        dom = interval(101)
        u = np.exp(dom.coords)
        u[dom.coords > 1.0] = 1e6   # garbage outside the window
        mask = np.abs(dom.coords) <= 1.0
        A = vector_potential(Field(dom, u), mask)
        assert np.abs(A.components[0][mask] - 1.0).max() < 1e-2
        assert np.all(A.components[0][~mask] == 0)


class TestGaugeResidual:
    def test_constant_potential_zero_field(self):
        dom = interval()
        g2 = 0.7
        assert gauge_residual(Field(dom, np.full(dom.size, -g2)), g2, VectorField.zeros(dom)) == 0

    def test_manufactured_second_order(self):
        errs = []
        for n in (101, 201, 401):
            dom = interval(n, 3.0)
            x = dom.coords
            A = vector_potential(Field(dom, np.exp(np.sin(x))))
            errs.append(gauge_residual(Field(dom, np.cos(x) ** 2 - np.sin(x)), 0.0, A))
        assert errs[0] / errs[1] > 3.5 and errs[1] / errs[2] > 3.5

    def test_well_window_pipeline(self):
        dom = DomainSpec.radial(1.0, 20.0, 3801, 3)
        V = -sample(SmoothBump(2.0, 3.0, (8.0,)), dom)
        lam0 = float(lowest_eigenvalues(build_operator(dom, V, +1))[0])
        g2 = max(0.0, -lam0) + 0.1
        A = vector_potential(positive_solution(V, g2))
        assert gauge_residual(V, g2, A) <= 50 * dom.h**2 * (V.sup_norm() + g2)

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            gauge_residual(Field.zeros(interval(11)), 0.0, VectorField.zeros(interval(13)))


class TestL3:
    def test_zero_cutoff_and_zero_field(self):
        dom = interval()
        A = VectorField.zeros(dom)
        assert l3_check(A, 1.0, Field.zeros(dom)).holds
        phi = Field(dom, np.maximum(0, 1 - dom.coords**2))
        rep = l3_check(A, 1.0, phi, C=0.0)
        assert rep.holds and rep.lhs == 0

    def test_well_layer_battery(self):
        dom = DomainSpec.interval(-20, 20, 2001)
        V = -sample(Well(1.0, 1.0), dom)
        lam0 = float(lowest_eigenvalues(build_operator(dom, V, +1))[0])
        g2 = abs(lam0) + 0.01
        A = vector_potential(positive_solution(V, g2))
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(20):
            phi = cutoff_profile(rng.uniform(-5, 5), rng.uniform(0.3, 3.0)).on(dom)
            rep = l3_check(A, math.sqrt(g2), phi, C=4.0)
            assert rep.holds
            worst = max(worst, rep.extra["empirical_C"])
        assert 0 < worst <= 4.0

    def test_phi_outside_window(self):
        dom = interval(21)
        A = VectorField.zeros(dom, mask=np.abs(dom.coords) < 1)
        with pytest.raises(ValueError):
            l3_check(A, 1.0, Field(dom, np.ones(dom.size)))


class TestAssembly:
    def test_single_window(self):
        dom = DomainSpec.radial(1.0, 20.0, 1901, 3)
        V = -sample(SmoothBump(2.0, 3.0, (8.0,)), dom)
        lam0 = float(lowest_eigenvalues(build_operator(dom, V, +1))[0])
        g2 = abs(lam0) + 0.1
        A1 = vector_potential(positive_solution(V, g2))
        pou = PartitionOfUnity(dom, [Field(dom, np.ones(dom.size))], [])
        dec = assemble_global(V, None, pou, [A1], [], [g2], [])
        np.testing.assert_allclose(dec.V0.values, -g2, atol=1e-9)
        np.testing.assert_allclose(dec.W.values, -g2)
        assert math.isfinite(dec.weighted_norm)

    def test_empty_covering(self):
        dom = DomainSpec.ball(40.0, 2001, 3)
        dec = assemble_global(Field.zeros(dom), None, PartitionOfUnity(dom, [], []), [], [], [], [])
        assert np.all(dec.V0.values == 0) and np.all(dec.A.components[0] == 0)
        assert dec.weighted_norm == 0

    def test_zero_potential_pipeline(self):
        # the seed layer around B_2 keeps its level eps_0, so A and V0 live there only
        dom = DomainSpec.ball(40.0, 2001, 3)
        cov, pou, dec = gauge_pipeline(Field.zeros(dom))
        outside = dom.coords > cov.r(cov.layers[0].hi)
        assert np.abs(dec.A.components[0][outside]).max() < 1e-12
        assert np.abs(dec.V0.values[outside]).max() < 1e-12
        assert dec.reconstruction_residual <= 100 * dom.h
        assert math.isfinite(dec.weighted_norm)

    def test_two_well_pipeline(self):
        V = two_wells()
        cov, pou, dec = gauge_pipeline(V)
        assert dec.reconstruction_residual <= 100 * V.domain.h
        assert math.isfinite(dec.weighted_norm) and math.isfinite(dec.cross_term)
        assert len(dec.window_residuals) == len(cov.layers) + len(cov.gaps)

    def test_window_tolerance_enforced(self):
        V = two_wells(2001)
        cov, pou, _ = gauge_pipeline(V)
        from speclab.gauge import window_potentials

        A_l, A_g, lev_l, lev_g = window_potentials(V, cov)
        with pytest.raises(GaugeError):
            assemble_global(V, cov, pou, A_l, A_g, lev_l, lev_g, window_tol=1e-12)

    def test_dump(self, tmp_path):
        V = two_wells(2001)
        _, _, dec = gauge_pipeline(V)
        dec.dump(tmp_path / "out")
        for name in ("V0.csv", "W.csv", "V1.csv", "A.csv", "manifest.json"):
            assert (tmp_path / "out" / name).is_file()
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["weighted_norm"] == pytest.approx(dec.weighted_norm)
        back = Field.from_csv(tmp_path / "out" / "V0.csv")
        np.testing.assert_array_equal(back.values, dec.V0.values)
