import csv

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from weakmeas.errors import DomainError
from weakmeas.twomeas import (
    WeakMeasSpec,
    outcome_operators,
    single_meas_fidelity,
    sweep,
    two_meas_fidelity_bruteforce,
    two_meas_fidelity_closed,
    weak_limit_fidelity,
    write_sweep_csv,
)

thetas = st.floats(-2 * np.pi, 2 * np.pi)


@st.composite
def specs(draw):
    r = draw(st.floats(0.1, 0.9))
    # keep R(1 +- eps) and the complementary outcome inside [0, 1]
    limit = min(0.9, (1 - r) / r)
    eps = draw(st.floats(-limit, limit))
    return WeakMeasSpec(r, eps)


def random_spec(g):
    r = g.uniform(0.1, 0.9)
    limit = min(0.9, (1 - r) / r)
    return WeakMeasSpec(r, g.uniform(-limit, limit))


class TestSpec:
    @pytest.mark.parametrize("r, eps", [(0.0, 0.1), (1.1, 0.0), (0.8, 0.5), (0.5, np.inf),
                                        (0.5, 1.2)])
    def test_invalid(self, r, eps):
        with pytest.raises(DomainError):
            WeakMeasSpec(r, eps)

    def test_complement(self):
        assert WeakMeasSpec(0.25, 0.4).complement() == pytest.approx((0.75, -0.4 / 3))
        assert WeakMeasSpec(1.0, 0.0).complement() is None
        assert len(WeakMeasSpec(1.0, 0.0).branches()) == 1

    @given(specs())
    def test_outcome_operators_complete(self, spec):
        ops = outcome_operators(spec, 0.7)
        total = sum(op.T @ op for op in ops)
        assert np.allclose(total, np.eye(2), atol=1e-12)
        assert all(np.allclose(op, op.T) for op in ops)


class TestClosedVsBruteForce:
    def test_thousand_random_draws(self):
        g = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            a, b, theta = random_spec(g), random_spec(g), g.uniform(0, 2 * np.pi)
            worst = max(worst, abs(two_meas_fidelity_closed(a, b, theta)
                                   - two_meas_fidelity_bruteforce(a, b, theta)))
        assert worst <= 1e-10

    @given(specs(), specs(), thetas)
    def test_property(self, a, b, theta):
        assert two_meas_fidelity_closed(a, b, theta) == pytest.approx(
            two_meas_fidelity_bruteforce(a, b, theta), abs=1e-10)

    @given(specs(), specs(), thetas)
    def test_symmetric_in_theta(self, a, b, theta):
        f = two_meas_fidelity_closed(a, b, theta)
        assert two_meas_fidelity_closed(a, b, -theta) == pytest.approx(f, abs=1e-14)
        assert two_meas_fidelity_closed(a, b, 2 * np.pi - theta) == pytest.approx(f, abs=1e-12)

    def test_projective_first_outcome_only(self):
        # R = 1: the complementary outcome never occurs
        a = WeakMeasSpec(1.0, 0.0)
        b = WeakMeasSpec(0.5, 0.3)
        for theta in (0.0, 0.8, 2.0):
            assert two_meas_fidelity_closed(a, b, theta) == pytest.approx(
                two_meas_fidelity_bruteforce(a, b, theta), abs=1e-12)

    def test_array_input(self):
        a = b = WeakMeasSpec(0.5, 0.2)
        grid = np.linspace(0, np.pi, 7)
        values = two_meas_fidelity_closed(a, b, grid)
        assert values.shape == (7,)
        assert np.allclose(values, [two_meas_fidelity_closed(a, b, t) for t in grid])


class TestPhysics:
    @pytest.mark.parametrize("eps", [0.01, 0.2, 0.6, 0.95])
    def test_maximum_at_right_angle(self, eps):
        spec = WeakMeasSpec(0.5, eps)
        grid = np.linspace(0, np.pi, 1801)
        values = two_meas_fidelity_closed(spec, spec, grid)
        assert abs(grid[np.argmax(values)] - np.pi / 2) <= grid[1] - grid[0]
        assert values.max() > values[0]

    def test_weak_limit(self):
        spec = WeakMeasSpec(0.5, 0.01)
        grid = np.linspace(0, 2 * np.pi, 721)
        exact = two_meas_fidelity_closed(spec, spec, grid)
        assert np.max(np.abs(exact - weak_limit_fidelity(0.01, grid))) < 1e-4

    def test_root_two_enhancement(self):
        eps = 1e-3
        spec = WeakMeasSpec(0.5, eps)
        aligned = two_meas_fidelity_closed(spec, spec, 0.0)
        crossed = two_meas_fidelity_closed(spec, spec, np.pi / 2)
        assert aligned == pytest.approx(eps, rel=1e-3)
        assert crossed == pytest.approx(np.sqrt(2) * eps, rel=1e-3)
        assert crossed / aligned - 1 == pytest.approx(np.sqrt(2) - 1, abs=1e-3)

    @given(specs(), thetas)
    def test_second_measurement_without_information(self, spec, theta):
        assume(spec.R > 0)
        blank = WeakMeasSpec(0.4, 0.0)
        expected = single_meas_fidelity(spec)
        assert two_meas_fidelity_closed(spec, blank, theta) == pytest.approx(expected, abs=1e-12)
        assert two_meas_fidelity_bruteforce(spec, blank, theta) == pytest.approx(expected,
                                                                                abs=1e-12)

    def test_single_measurement_value(self):
        spec = WeakMeasSpec(0.3, 0.5)
        assert single_meas_fidelity(spec) == pytest.approx(2 * 0.3 * 0.5)

    def test_projective_limit(self):
        spec = WeakMeasSpec(0.5, 1 - 1e-12)
        assert two_meas_fidelity_closed(spec, spec, 0.0) == pytest.approx(1.0, abs=1e-6)
        assert two_meas_fidelity_bruteforce(spec, spec, 0.0) == pytest.approx(1.0, abs=1e-6)


class TestSweep:
    def test_rows_and_csv(self, tmp_path):
        a, b = WeakMeasSpec(0.5, 0.3), WeakMeasSpec(0.4, -0.2)
        rows = sweep(a, b, np.linspace(0, np.pi, 5))
        assert rows.shape == (5, 3)
        assert np.allclose(rows[:, 1], rows[:, 2], atol=1e-12)
        write_sweep_csv(tmp_path / "s.csv", rows)
        with open(tmp_path / "s.csv", newline="") as fh:
            out = list(csv.reader(fh))
        assert out[0] == ["theta", "F_closed", "F_brute"] and len(out) == 6
        assert float(out[3][1]) == rows[2, 1]
