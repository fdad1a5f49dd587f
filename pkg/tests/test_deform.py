import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformex.deform import (
    Composite,
    Custom,
    DeformationError,
    JacobianSummary,
    Linear,
    PolarRep,
    Rect,
    Segment,
    Spiral,
    Tensorial,
    from_config,
    identity,
    image_area,
    image_length,
    image_perimeter,
    inverse,
    is_spiral,
    jacobian_summary,
    linear_spiral,
    parse_expression,
    rotation,
)


def fd_jacobian(theta, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        cols.append((theta.eval(x + e) - theta.eval(x - e)) / (2 * h))
    return np.stack(cols, -1)


def square():
    return Spiral(lambda r: r**2, None, lambda r: 2 * r, box_radius=2.0)


def log_spiral():
    return Spiral(lambda r: r**2, lambda r: np.log1p(r), lambda r: 2 * r, lambda r: 1 / (1 + r), box_radius=2.0)


def spiral_through_origin():
    # f'(0) > 0 keeps the Jacobian regular at the origin
    return Spiral(lambda r: r * (1 + r), np.sin, lambda r: 1 + 2 * r, np.cos, box_radius=2.0)


def cubic_tensorial():
    return Tensorial(lambda s: s**3 + s, lambda t: t, lambda s: 3 * s**2 + 1, lambda t: np.ones_like(t))


SAMPLE_THETAS = {
    "linear": lambda: Linear([[2.0, 1.0], [0.0, 1.0]]),
    "tensorial": cubic_tensorial,
    "spiral": log_spiral,
    "composite": lambda: Composite([log_spiral(), Linear([[1.0, 0.3], [0.0, 1.2]])]),
    "custom": lambda: Custom(lambda x: np.stack([x[:, 0] + 0.1 * x[:, 1] ** 2, x[:, 1]], -1)),
}


class TestEval:
    def test_examples(self):
        np.testing.assert_array_equal(identity().eval([3.0, 4.0]), [3.0, 4.0])
        np.testing.assert_allclose(Linear([[2, 1], [0, 1]]).eval([1.0, 1.0]), [3.0, 1.0])
        np.testing.assert_allclose(square().eval([2.0, 0.0]), [4.0, 0.0], atol=1e-14)

    def test_batch_shapes(self):
        theta = log_spiral()
        x = np.random.default_rng(0).normal(size=(3, 4, 2))
        assert theta.eval(x).shape == (3, 4, 2)
        assert theta.jacobian(x).shape == (3, 4, 2, 2)
        with pytest.raises(DeformationError):
            theta.eval(np.zeros(3))


class TestJacobian:
    def test_examples(self):
        m = np.array([[2.0, 1.0], [0.0, 1.0]])
        np.testing.assert_array_equal(Linear(m).jacobian([5.0, -2.0]), m)
        np.testing.assert_allclose(cubic_tensorial().jacobian([1.0, 0.0]), np.diag([4.0, 1.0]))
        # theta(x) = |x| x: radial stretch f'(1) = 2, tangential f(1)/1 = 1
        np.testing.assert_allclose(square().jacobian([1.0, 0.0]), np.diag([2.0, 1.0]), atol=1e-14)

    @pytest.mark.parametrize("name", list(SAMPLE_THETAS))
    def test_against_finite_differences(self, name):
        theta = SAMPLE_THETAS[name]()
        pts = np.random.default_rng(1).uniform(-1.5, 1.5, size=(20, 2))
        for p in pts:
            np.testing.assert_allclose(theta.jacobian(p), fd_jacobian(theta, p), atol=1e-6)

    def test_chain_rule(self):
        outer, inner = log_spiral(), cubic_tensorial()
        comp = outer @ inner
        for p in np.random.default_rng(2).uniform(-1, 1, size=(10, 2)):
            expect = outer.jacobian(inner.eval(p)) @ inner.jacobian(p)
            np.testing.assert_allclose(comp.jacobian(p), expect, atol=1e-10)
            np.testing.assert_allclose(comp.eval(p), outer.eval(inner.eval(p)), atol=1e-14)
            np.testing.assert_allclose(comp.jacobian(p), fd_jacobian(comp, p), atol=1e-7)

    def test_orientation_reversal_rejected(self):
        with pytest.raises(DeformationError):
            Linear([[1.0, 0.0], [0.0, -1.0]])
        with pytest.raises(DeformationError):
            Tensorial(lambda s: -s, lambda t: t)
        theta = Linear([[1.0, 0.0], [0.0, -1.0]], validate=False)
        with pytest.raises(DeformationError):
            theta.jacobian([0.5, 0.5])

    def test_origin_must_be_fixed(self):
        with pytest.raises(DeformationError):
            Custom(lambda x: x + 1.0)

    def test_spiral_profile_checks(self):
        with pytest.raises(DeformationError):
            Spiral(lambda r: 1 + r)  # does not vanish at 0
        with pytest.raises(DeformationError):
            Spiral(lambda r: r * np.exp(-r))  # not increasing
        with pytest.raises(DeformationError):
            Spiral(lambda r: np.arctan(r))  # bounded


class TestPolar:
    def test_identity(self):
        r, phi = np.array([0.5, 2.0]), np.array([0.3, 5.0])
        h1, h2 = PolarRep(identity()).hat(r, phi)
        np.testing.assert_allclose(h1, r)
        np.testing.assert_allclose(h2, phi)

    def test_linear_spiral(self):
        lam, alpha = 1.7, 0.4
        h1, h2 = linear_spiral(lam, alpha).polar().hat(2.0, np.array([0.1, 1.0, 3.0]))
        np.testing.assert_allclose(h1, lam * 2.0)
        np.testing.assert_allclose(h2, np.mod(np.array([0.1, 1.0, 3.0]) + alpha, 2 * math.pi))

    def test_stretch_is_not_radial(self):
        h1, _ = Linear(np.diag([2.0, 1.0])).polar().hat(1.0, np.array([0.0, math.pi / 2, 0.7]))
        np.testing.assert_allclose(h1, np.sqrt(4 * np.cos([0.0, math.pi / 2, 0.7]) ** 2
                                                + np.sin([0.0, math.pi / 2, 0.7]) ** 2))

    def test_round_trip(self):
        theta = Linear([[2.0, 1.0], [0.0, 1.0]])
        r = np.geomspace(0.1, 3, 7)[:, None]
        phi = np.linspace(0, 2 * math.pi, 11)[None, :]
        h1, h2 = theta.polar().hat(r, phi)
        x = np.stack(np.broadcast_arrays(r * np.cos(phi), r * np.sin(phi)), -1)
        back = np.stack([h1 * np.cos(h2), h1 * np.sin(h2)], -1)
        np.testing.assert_allclose(back, theta.eval(x), atol=1e-10)
        h1b, h2b = theta.polar().hat(r, phi + 2 * math.pi)
        np.testing.assert_allclose(h1b, h1, atol=1e-12)
        np.testing.assert_allclose(np.cos(h2b - h2), 1.0, atol=1e-12)

    def test_group_morphism(self):
        eta = Spiral(lambda r: r * (1 + r), lambda r: np.sin(r), lambda r: 1 + 2 * r, np.cos)
        theta = log_spiral()
        r = np.geomspace(0.05, 2, 9)[:, None]
        phi = np.linspace(0, 6, 13)[None, :]
        a1, a2 = (eta @ theta).polar().hat(r, phi)
        t1, t2 = theta.polar().hat(r, phi)
        b1, b2 = eta.polar().hat(t1, t2)
        np.testing.assert_allclose(a1, b1, rtol=1e-9)
        np.testing.assert_allclose(np.cos(a2 - b2), 1.0, atol=1e-9)

    def test_negative_radius_rejected(self):
        with pytest.raises(DeformationError):
            identity().polar().hat(-1.0, 0.0)


class TestIsSpiral:
    def test_examples(self):
        assert is_spiral(log_spiral(), 2.0)
        assert not is_spiral(Linear(np.diag([2.0, 1.0])), 1.0)
        assert is_spiral(linear_spiral(2.5, 1.1), 1.0)
        assert is_spiral(identity(), 1.0)

    def test_diagnostics(self):
        res = is_spiral(Linear(np.diag([2.0, 1.0])), 1.0)
        assert res.worst_range > 0.1 and res.worst_quantity in (1, 2, 3)
        assert res.max_distortion == pytest.approx(2.0)
        with pytest.raises(DeformationError):
            is_spiral(identity(), 1.0, tol=0.0)

    def test_spirals_form_a_group(self):
        a = log_spiral()
        b = Spiral(lambda r: r**3 + r, lambda r: r**2, lambda r: 3 * r**2 + 1, lambda r: 2 * r)
        assert is_spiral(a @ b, 1.5)
        assert is_spiral(b @ a @ linear_spiral(0.5, 2.0), 1.5)

    def test_non_spiral_tensorial(self):
        assert not is_spiral(cubic_tensorial(), 1.0)


class TestMeasures:
    def test_area_examples(self):
        assert image_area(identity(), Rect(2, 3)) == pytest.approx(6.0, rel=1e-12)
        m = np.array([[2.0, 1.0], [0.5, 1.5]])
        assert image_area(Linear(m), Rect(-1.5, 2.0)) == pytest.approx(3.0 * np.linalg.det(m), rel=1e-12)
        sq = Tensorial(lambda s: s * np.abs(s), lambda t: t, lambda s: 2 * np.abs(s), lambda t: np.ones_like(t),
                       validate=False)
        assert image_area(sq, Rect(1, 1)) == pytest.approx(1.0, rel=1e-9)

    def test_perimeter_examples(self):
        assert image_perimeter(identity(), Rect(2, 3)) == pytest.approx(10.0, rel=1e-12)
        assert image_perimeter(Linear(np.diag([2.0, 1.0])), Rect(1, 1)) == pytest.approx(6.0, rel=1e-12)
        theta = square()
        base = Rect(1, 1, 0.0, (1.0, 0.0))
        ref = image_perimeter(theta, base)
        for a in (0.3, 1.0, 2.5, 4.0):
            assert image_perimeter(theta, base.rotated(a)) == pytest.approx(ref, rel=1e-8)

    def test_length_examples(self):
        assert image_length(identity(), Segment((0, 0), (3, 0))) == pytest.approx(3.0)
        assert image_length(Linear([[2, 1], [0, 1]]), Segment.horizontal(1.0)) == pytest.approx(2.0)
        cube = Tensorial(lambda s: s**3 / 3, lambda t: t, lambda s: s**2, lambda t: np.ones_like(t), validate=False)
        assert image_length(cube, Segment((0, 0), (1, 0))) == pytest.approx(1 / 3, rel=1e-9)

    def test_segment_and_rect_conventions(self):
        with pytest.raises(DeformationError):
            Segment((1, 1), (1, 1))
        with pytest.raises(DeformationError):
            Rect(0, 1)
        r = Rect(-2.0, 1.0)
        assert r.x_range == (-2.0, 0.0) and r.area == 2.0
        assert Segment.horizontal(2.0, 0.5) == Segment((0, 0.5), (2.0, 0.5))
        assert Segment.vertical(2.0, 0.5) == Segment((0.5, 0), (0.5, 2.0))

    @pytest.mark.parametrize("name", list(SAMPLE_THETAS))
    def test_isoperimetric(self, name):
        theta = SAMPLE_THETAS[name]()
        for rect in (Rect(1, 0.5), Rect(-0.7, 1.2, 0.4, (0.2, -0.1))):
            a = image_area(theta, rect)
            p = image_perimeter(theta, rect)
            assert a > 0
            assert p**2 >= 4 * math.pi * a


class TestSummary:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
    def test_c_bounded_by_ab(self, x, y):
        for make in (spiral_through_origin, cubic_tensorial):
            js = jacobian_summary(make(), [x, y])
            assert js.a > 0 and js.b > 0
            assert 0 < js.c <= js.a * js.b * (1 + 1e-12)

    def test_from_matrix(self):
        js = JacobianSummary.from_matrix(np.array([[2.0, 1.0], [0.0, 1.0]]))
        assert (js.a, js.b, js.c) == pytest.approx((2.0, math.sqrt(2.0), 2.0))


class TestInverse:
    def test_round_trip(self):
        theta = Composite([log_spiral(), cubic_tensorial()])
        for p in np.random.default_rng(5).uniform(-1, 1, size=(10, 2)):
            np.testing.assert_allclose(inverse(theta, theta.eval(p)), p, atol=1e-10)


class TestExpressions:
    def test_parse(self):
        e = parse_expression("s^3/3 + exp(s) - pow(s, 2)", "s")
        assert e(1.0) == pytest.approx(1 / 3 + math.e - 1)
        assert e.derivative(1.0) == pytest.approx(1 + math.e - 2)
        r = parse_expression("r*(1 + log(1 + r))", "r")
        assert r(2.0) == pytest.approx(2 * (1 + math.log(3)))

    @pytest.mark.parametrize("text", ["__import__('os')", "s + q", "tan(s)", "s +", "lambda: 1"])
    def test_rejects(self, text):
        with pytest.raises(DeformationError):
            parse_expression(text, "s")

    def test_variable_checked(self):
        with pytest.raises(DeformationError):
            parse_expression("x", "x")


class TestFromConfig:
    def test_kinds(self):
        assert isinstance(from_config({"kind": "identity"}), Linear)
        lin = from_config({"kind": "linear", "matrix": [[2, 1], [0, 1]]})
        np.testing.assert_allclose(lin.jacobian([0, 0]), [[2, 1], [0, 1]])
        ls = from_config({"kind": "linear_spiral", "scale": 2.0, "angle": 0.5})
        np.testing.assert_allclose(ls.jacobian([0, 0]), 2 * rotation(0.5).jacobian([0, 0]))
        ten = from_config({"kind": "tensorial", "theta1": "s**3 + s", "theta2": "2*t"})
        np.testing.assert_allclose(ten.jacobian([1.0, 0.3]), np.diag([4.0, 2.0]))
        sp = from_config({"kind": "spiral", "f": "r**2", "g": "log(1 + r)"})
        assert is_spiral(sp, 1.0)
        comp = from_config({"kind": "composite", "parts": [{"kind": "linear", "matrix": [[2, 0], [0, 1]]},
                                                           {"kind": "linear", "matrix": [[1, 1], [0, 1]]}]})
        np.testing.assert_allclose(comp.jacobian([0, 0]), [[2, 2], [0, 1]])

    def test_errors(self):
        with pytest.raises(DeformationError):
            from_config({"matrix": [[1, 0], [0, 1]]})
        with pytest.raises(DeformationError):
            from_config({"kind": "mystery"})
