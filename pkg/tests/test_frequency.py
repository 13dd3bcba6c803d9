import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dct2_definition
from tokd.errors import ConfigError
from tokd.frequency import HighPassSpec, dct2, frequency_transform, highpass_mask, idct2


def test_dct_constant_image_is_dc_only():
    x = np.full((4, 6), 2.5)
    X = dct2(x)
    assert abs(X[0, 0] - 2.5 * np.sqrt(24)) < 1e-12
    X[0, 0] = 0
    assert np.max(np.abs(X)) < 1e-12


def test_dct_zero_in_zero_out():
    assert np.array_equal(dct2(np.zeros((5, 5))), np.zeros((5, 5)))
    assert np.array_equal(idct2(np.zeros((5, 5))), np.zeros((5, 5)))


def test_dct_matches_definition_sum():
    x = np.random.default_rng(0).standard_normal((8, 8))
    assert np.max(np.abs(dct2(x) - dct2_definition(x))) < 1e-10


def test_dct_non_square_matches_definition():
    x = np.random.default_rng(1).standard_normal((5, 7))
    assert np.max(np.abs(dct2(x) - dct2_definition(x))) < 1e-10


def test_idct_of_dc_basis_is_ones():
    X = np.zeros((4, 5))
    X[0, 0] = np.sqrt(20)
    assert np.max(np.abs(idct2(X) - 1.0)) < 1e-12


def test_round_trip_and_parseval():
    x = np.random.default_rng(2).standard_normal((16, 16))
    assert np.max(np.abs(idct2(dct2(x)) - x)) < 1e-9
    assert abs(np.linalg.norm(dct2(x)) - np.linalg.norm(x)) < 1e-9


def test_mask_definition():
    m = highpass_mask(6, 9, 0.5)
    for u in range(6):
        for v in range(9):
            assert m[u, v] == (0.0 if u / 6 + v / 9 < 0.5 else 1.0)


def test_spec_validation():
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            HighPassSpec(bad)


def test_constant_image_filters_to_zero():
    x = np.full((3, 8, 8), 0.7)
    assert np.max(np.abs(frequency_transform(x, HighPassSpec(0.01)))) < 1e-12


def test_tiny_cutoff_keeps_all_but_dc():
    # u/H + v/W < c only holds at (0, 0) for c <= 1/max(H, W); on a zero-mean
    # image (DC already 0) the filter is then a no-op
    x = np.random.default_rng(3).standard_normal((3, 16, 16))
    x -= x.mean(axis=(1, 2), keepdims=True)
    assert np.max(np.abs(frequency_transform(x, HighPassSpec(1e-6)) - x)) < 1e-9


def test_output_spectrum_zero_on_triangle():
    spec = HighPassSpec()
    x = np.random.default_rng(4).random((3, 32, 32))
    out = frequency_transform(x, spec)
    assert out.shape == x.shape
    zeroed = spec.mask(32, 32) == 0
    assert zeroed.sum() > 0
    assert np.max(np.abs(dct2(out)[:, zeroed])) < 1e-9


def test_batched_matches_per_image():
    x = np.random.default_rng(5).random((2, 3, 8, 8))
    out = frequency_transform(x)
    for i in range(2):
        assert np.max(np.abs(out[i] - frequency_transform(x[i]))) < 1e-14


images = arrays(np.float64, (2, 8, 8), elements=st.floats(-1, 1, allow_nan=False, width=64))


@settings(max_examples=40, deadline=None)
@given(images, images, st.floats(-3, 3), st.floats(-3, 3), st.floats(0.05, 0.95))
def test_filter_properties(x, y, a, b, cutoff):
    spec = HighPassSpec(cutoff)
    fx, fy = frequency_transform(x, spec), frequency_transform(y, spec)
    assert np.linalg.norm(fx) <= np.linalg.norm(x) + 1e-9
    assert np.max(np.abs(frequency_transform(a * x + b * y, spec) - (a * fx + b * fy))) < 1e-9
    assert np.max(np.abs(frequency_transform(fx, spec) - fx)) < 1e-9
    assert np.max(np.abs(idct2(dct2(x)) - x)) < 1e-9
