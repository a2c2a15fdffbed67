import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from resampnet import jpeg
from resampnet.dataset import synthetic_image
from resampnet.errors import ParameterError
from resampnet.imageops import ImageBuffer, jpeg_core_roundtrip

from oracles import dct_matrix_naive


def test_dct_matrix_matches_naive_and_is_orthonormal():
    d = jpeg.dct_matrix()
    np.testing.assert_allclose(d, dct_matrix_naive(), rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(d @ d.T, np.eye(8), atol=1e-14)


@pytest.mark.parametrize("q,scale", [(1, 5000), (10, 500), (25, 200), (49, 102), (50, 100), (75, 50), (90, 20), (100, 0)])
def test_quality_scale_law(q, scale):
    assert jpeg.quality_scale(q) == scale


def test_q50_table_is_the_standard_table():
    np.testing.assert_array_equal(jpeg.quant_table(50), jpeg.LUMA_TABLE)


def test_q100_table_is_all_ones():
    np.testing.assert_array_equal(jpeg.quant_table(100), np.ones((8, 8)))


def test_q1_table_clamped_to_255():
    assert jpeg.quant_table(1).max() == 255 and jpeg.quant_table(1).min() >= 1


@pytest.mark.parametrize("q", [0, 101, -5])
def test_quality_out_of_range(q):
    with pytest.raises(ParameterError):
        jpeg.quality_scale(q)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 10**6))
def test_q100_error_at_most_one(h, w, seed):
    p = np.random.default_rng(seed).integers(0, 256, (1, h, w)).astype(np.float64)
    out = jpeg.jpeg_core_planes(p, 100)
    assert out.shape == p.shape
    assert np.abs(out - p).max() <= 1


@pytest.mark.parametrize("value", [0, 1, 37, 127, 128, 200, 255])
def test_constant_image_reconstructed_exactly_at_q100(value):
    p = np.full((1, 13, 21), float(value))
    np.testing.assert_array_equal(jpeg.jpeg_core_planes(p, 100), p)


@pytest.mark.parametrize("q", [1, 30, 50, 75, 95])
@pytest.mark.parametrize("value", [0, 37, 128, 255])
def test_constant_image_only_loses_dc_rounding(q, value):
    # only the DC coefficient 8*(v-128) is non-zero; it survives exactly when it
    # is a multiple of the DC step, else the error is at most half a step / 8
    p = np.full((1, 13, 21), float(value))
    out = jpeg.jpeg_core_planes(p, q)
    assert np.all(out == out[0, 0, 0])
    step = jpeg.quant_table(q)[0, 0]
    dc = 8 * (value - 128)
    if dc % step == 0:
        assert out[0, 0, 0] == value
    else:
        assert abs(out[0, 0, 0] - value) <= step / 16 + 0.5


def test_output_is_integral_and_clamped():
    p = np.random.default_rng(1).integers(0, 256, (3, 16, 16)).astype(np.float64)
    out = jpeg.jpeg_core_planes(p, 10)
    assert out.min() >= 0 and out.max() <= 255 and np.array_equal(out, np.round(out))


def test_blocks_are_independent():
    rng = np.random.default_rng(2)
    p = rng.integers(0, 256, (1, 8, 16)).astype(np.float64)
    q = p.copy()
    q[0, :, 8:] = 255 - q[0, :, 8:]
    a, b = jpeg.jpeg_core_planes(p, 60), jpeg.jpeg_core_planes(q, 60)
    np.testing.assert_array_equal(a[0, :, :8], b[0, :, :8])


def test_edge_replication_padding_crops_back():
    p = np.random.default_rng(3).integers(0, 256, (1, 10, 10)).astype(np.float64)
    padded = np.pad(p, ((0, 0), (0, 6), (0, 6)), mode="edge")
    np.testing.assert_array_equal(jpeg.jpeg_core_planes(p, 70), jpeg.jpeg_core_planes(padded, 70)[:, :10, :10])


def test_psnr_decreases_with_quality_on_natural_like_image():
    planes = synthetic_image(np.random.default_rng(7), 128)
    img = ImageBuffer(np.clip(np.floor(planes[1] + 0.5), 0, 255).astype(np.uint8))
    scores = [jpeg.psnr(jpeg_core_roundtrip(img, q).data, img.data) for q in (50, 70, 90)]
    assert scores[0] < scores[1] < scores[2]


def test_mse_non_increasing_in_quality_over_twenty_images():
    mses = []
    for q in range(50, 101, 10):
        total = 0.0
        for i in range(20):
            planes = synthetic_image(np.random.default_rng([11, i]), 64)
            p = np.clip(np.floor(planes[1:2] + 0.5), 0, 255)
            total += np.mean((jpeg.jpeg_core_planes(p, q) - p) ** 2)
        mses.append(total)
    assert all(a >= b for a, b in zip(mses, mses[1:]))


def test_psnr_identical_is_infinite():
    a = np.zeros((4, 4))
    assert jpeg.psnr(a, a) == float("inf")
    assert jpeg.psnr(a, a + 255) == pytest.approx(0.0)
