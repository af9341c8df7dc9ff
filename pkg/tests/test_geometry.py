import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anysat.geometry import (
    DivisibilityError,
    GeometryError,
    LayoutError,
    PosEncodingSpec,
    TileGeometry,
    ceil_half,
    grid_encoding,
    patch_grid,
    pos_encoding,
    subpatch_layout,
    token_counts,
)


def test_patch_counts():
    assert patch_grid(1280, 160).total == 64
    assert patch_grid(1280, 160).count_per_axis == 8
    assert patch_grid(60, 20).total == 9
    assert patch_grid(10, 10).total == 1


def test_indivisible_tile_rejected():
    with pytest.raises(DivisibilityError):
        TileGeometry(102.4, 10)
    with pytest.raises(GeometryError):
        TileGeometry(60, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.data())
def test_position_index_roundtrip(n, data):
    g = TileGeometry(10.0 * n, 10.0)
    i = data.draw(st.integers(0, n * n - 1))
    assert g.index(*g.position(i)) == i
    assert tuple(g.positions()[i]) == g.position(i)


def test_subpatch_layout_and_clamp():
    lay = subpatch_layout(40, 1.0, 4)
    assert (lay.pixels_per_patch, lay.count_per_axis, lay.delta_eff) == (40, 10, 4)
    clamped = subpatch_layout(10, 10.0, 2)  # one pixel per patch
    assert clamped.clamped and clamped.delta_eff == 1 and clamped.total == 1
    with pytest.raises(LayoutError):
        subpatch_layout(30, 1.0, 4)  # 30 px not divisible by 4
    with pytest.raises(LayoutError):
        subpatch_layout(10, 3.0, 1)


def test_token_counts_frozen_values():
    assert token_counts(1280, 160, 10.0, 1) == {
        "patches": 64,
        "subpatches_per_patch": 256,
        "pixels_per_axis": 128,
        "subpatch_side_m": 10.0,
    }
    assert token_counts(60, 20, 0.2, 10)["subpatches_per_patch"] == 100


def test_pos_encoding_values():
    spec = PosEncodingSpec(4, 1.0)
    # E=4: per axis, i=0 -> sin(x), i=1 -> sin(x / 10000**(1/4) + pi/2) = cos(x / 10)
    enc = pos_encoding(np.array(3.0), np.array(5.0), spec)
    np.testing.assert_allclose(enc, [np.sin(3.0), np.cos(0.3), np.sin(5.0), np.cos(0.5)], atol=1e-15)
    with pytest.raises(GeometryError):
        PosEncodingSpec(5, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 500.0), st.integers(0, 64), st.floats(0.1, 10.0))
def test_encoding_depends_on_ground_distance_only(g, pos, scale):
    a = pos_encoding(np.array(float(pos)), np.array(0.0), PosEncodingSpec(8, g))
    b = pos_encoding(np.array(pos * scale), np.array(0.0), PosEncodingSpec(8, g / scale))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_grid_encoding_is_cached_and_readonly():
    e = grid_encoding(3, 8, 10.0)
    assert e.shape == (9, 8)
    assert grid_encoding(3, 8, 10.0) is e
    with pytest.raises(ValueError):
        e[0, 0] = 1.0


@pytest.mark.parametrize("n,expected", [(1, 1), (2, 1), (3, 2), (10, 5), (61, 31)])
def test_ceil_half(n, expected):
    assert ceil_half(n) == expected
