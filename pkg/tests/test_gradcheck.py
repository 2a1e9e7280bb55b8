import numpy as np

from csod.gradcheck import FD_STEP, compare, numerical_gradient, sampled_check, straddles_kink


def _stencil(fn, x, step=FD_STEP):
    return fn(x), fn(x + step), fn(x - step)


class TestCompare:
    def test_relative_and_floor(self):
        assert compare([1.0, 2.0], [1.0 + 5e-5, 2.0]).passed
        assert not compare([1.0], [1.001]).passed
        # tiny entries pass under the absolute floor regardless of relative error
        assert compare([1e-10], [5e-9]).passed

    def test_reports_worst_error(self):
        r = compare([1.0, 10.0], [1.0, 10.5], rtol=0.1)
        assert r.passed and abs(r.max_rel_error - 0.5 / 10.5) < 1e-15 and r.max_abs_error == 0.5


class TestNumericalGradient:
    def test_quadratic_exact(self):
        x = np.array([1.0, -2.0, 0.5])
        g = numerical_gradient(lambda: float(np.sum(x ** 2)), x)
        np.testing.assert_allclose(g, 2 * x, rtol=1e-9)
        np.testing.assert_array_equal(x, [1.0, -2.0, 0.5])  # restored after perturbation

    def test_subset_order(self):
        x = np.arange(4.0)
        g = numerical_gradient(lambda: float(np.sum(x ** 3)), x, indices=[3, 1])
        np.testing.assert_allclose(g, [27.0, 3.0], rtol=1e-8)


class TestKinks:
    def test_abs_at_kink(self):
        assert straddles_kink(*_stencil(abs, 2e-6))

    def test_relu_kink_inside_stencil(self):
        assert straddles_kink(*_stencil(lambda v: max(v, 0.0) * 3.0, -4e-6))

    def test_smooth_functions(self):
        for x in (-1.3, 0.2, 2.0):
            assert not straddles_kink(*_stencil(np.sin, x))
            assert not straddles_kink(*_stencil(lambda v: v ** 2 + 3 * v, x))

    def test_abs_away_from_kink(self):
        assert not straddles_kink(*_stencil(abs, 0.5))


class TestSampledCheck:
    def test_skips_kinks_and_passes(self):
        rng = np.random.default_rng(0)
        # entries of x sit within a step of the |.| kink on purpose
        x = np.array([1e-6, -3e-6, 0.7, -1.2, 2.0])
        grad = np.sign(x)
        result, analytic, skipped = sampled_check(lambda: float(np.abs(x).sum()), [(x, grad)], rng, 6)
        assert result.passed and len(analytic) == 6 and skipped > 0
        assert set(np.abs(analytic)) == {1.0}

    def test_wrong_gradient_fails(self):
        x = np.array([0.3, 0.8])
        result, _, _ = sampled_check(lambda: float(np.sum(x ** 2)), [(x, 3 * x)], np.random.default_rng(1), 4)
        assert not result.passed

    def test_too_few_checkable_entries_fails(self):
        x = np.array([1e-7])
        result, analytic, skipped = sampled_check(lambda: float(np.abs(x).sum()), [(x, np.ones(1))],
                                                  np.random.default_rng(2), 3, max_draws=10)
        assert not result.passed and not analytic and skipped == 10
