import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reactive_market.mccormick import (McCormickCell, build_mccormick, envelope_coefficients,
                                       envelope_range, envelope_violation)

finite = st.floats(-5, 5, allow_nan=False)


@st.composite
def box_and_point(draw):
    a, b, c, d = (draw(finite) for _ in range(4))
    xl, xu = sorted((a, b))
    yl, yu = sorted((c, d))
    tx, ty = draw(st.floats(0, 1)), draw(st.floats(0, 1))
    return xl, xu, yl, yu, xl + tx * (xu - xl), yl + ty * (yu - yl)


@settings(max_examples=300, deadline=None)
@given(box_and_point())
def test_product_satisfies_all_four_rows(s):
    xl, xu, yl, yu, x, y = s
    assert envelope_violation(x, y, x * y, xl, xu, yl, yu) <= 1e-9 * (1 + abs(x * y) + 25)


@settings(max_examples=200, deadline=None)
@given(box_and_point())
def test_range_brackets_product(s):
    xl, xu, yl, yu, x, y = s
    lo, hi = envelope_range(x, y, xl, xu, yl, yu)
    tol = 1e-9 * (1 + 25)
    assert lo - tol <= x * y <= hi + tol


def test_exact_at_box_corners():
    xl, xu, yl, yu = -1.0, 2.0, 0.5, 3.0
    for x in (xl, xu):
        for y in (yl, yu):
            lo, hi = envelope_range(x, y, xl, xu, yl, yu)
            assert lo == pytest.approx(x * y)
            assert hi == pytest.approx(x * y)


def test_gap_at_centre_is_quarter_area():
    # at the centre of the box the envelope admits x*y +- (dx * dy) / 4
    xl, xu, yl, yu = 0.0, 2.0, 1.0, 5.0
    lo, hi = envelope_range(1.0, 3.0, xl, xu, yl, yu)
    assert hi - 3.0 == pytest.approx(2.0)
    assert 3.0 - lo == pytest.approx(2.0)


def test_coefficients_layout():
    cx, cy, cw, rhs = envelope_coefficients(1.0, 2.0, 3.0, 4.0)
    np.testing.assert_allclose(cx, [3, 4, -3, -4])
    np.testing.assert_allclose(cy, [1, 2, -2, -1])
    np.testing.assert_allclose(cw, [-1, -1, 1, 1])
    np.testing.assert_allclose(rhs, [3, 8, -6, -4])


def test_build_rows_from_cell():
    cell = McCormickCell(w=2, x=0, y=1, xl=0.9, xu=1.1, yl=-0.2, yu=0.3)
    rows = build_mccormick(cell)
    assert len(rows) == 4
    x, y = 1.05, 0.1
    for coeffs, rhs in rows:
        assert coeffs[0] * x + coeffs[1] * y + coeffs[2] * (x * y) <= rhs + 1e-12


def test_square_term_merges_coefficients():
    cell = McCormickCell(w=1, x=0, y=0, xl=-1.0, xu=2.0, yl=-1.0, yu=2.0)
    for coeffs, _ in build_mccormick(cell):
        assert set(coeffs) == {0, 1}


@pytest.mark.parametrize("bounds", [(1.0, 0.0, 0.0, 1.0), (0.0, np.inf, 0.0, 1.0),
                                    (0.0, 1.0, np.nan, 1.0)])
def test_bad_cells_rejected(bounds):
    with pytest.raises(ValueError):
        McCormickCell(0, 1, 2, *bounds)


def test_degenerate_flag():
    assert McCormickCell(0, 1, 2, 1.0, 1.0, 0.0, 1.0).degenerate
    assert not McCormickCell(0, 1, 2, 0.0, 1.0, 0.0, 1.0).degenerate
