import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nudiff.errors import ContractError
from nudiff.wavelet import (
    PyramidLayout,
    coefficients_to_image,
    haar_decompose,
    haar_matrix,
    haar_reconstruct,
    image_to_coefficients,
    pyramid_flatten,
    pyramid_unflatten,
)


def _haar_1d(n):
    """Orthonormal one-level Haar analysis matrix: lowpass rows, then highpass rows."""
    A = np.zeros((n, n))
    for k in range(n // 2):
        A[k, 2 * k] = A[k, 2 * k + 1] = 1 / np.sqrt(2)
        A[n // 2 + k, 2 * k] = 1 / np.sqrt(2)
        A[n // 2 + k, 2 * k + 1] = -1 / np.sqrt(2)
    return A


def _separable_reference(img, levels):
    """Pyramid from the separable form ``A X A^T`` applied to the lowpass block."""
    x = np.array(img, dtype=float)
    details = []
    for _ in range(levels):
        h, w = x.shape
        y = _haar_1d(h) @ x @ _haar_1d(w).T
        hh, ww = h // 2, w // 2
        details.append(np.stack([y[hh:, :ww], y[:hh, ww:], y[hh:, ww:]]))
        x = y[:hh, :ww]
    return x, details


class TestHaarTransform:
    @pytest.mark.parametrize("levels", [1, 2, 3])
    def test_matches_separable_reference(self, levels):
        img = np.random.default_rng(levels).standard_normal((16, 8))
        pyr = haar_decompose(img, levels)
        approx, details = _separable_reference(img, levels)
        np.testing.assert_allclose(pyr.approx, approx, atol=1e-13)
        for got, want in zip(pyr.details, details):
            np.testing.assert_allclose(got, want, atol=1e-13)

    def test_two_by_two_by_hand(self):
        pyr = haar_decompose(np.array([[1.0, 2.0], [3.0, 4.0]]), 1)
        np.testing.assert_allclose(pyr.approx, [[5.0]])
        # horizontal, vertical, diagonal
        np.testing.assert_allclose(pyr.details[0][:, 0, 0], [-2.0, -1.0, 0.0])

    def test_constant_image(self):
        pyr = haar_decompose(np.full((8, 8), 0.5), 3)
        np.testing.assert_allclose(pyr.approx, [[0.5 * 8]])
        for d in pyr.details:
            np.testing.assert_array_equal(d, 0.0)

    @settings(max_examples=40, deadline=None)
    @given(levels=st.integers(1, 3),
           img=arrays(np.float64, (2, 8, 8), elements=st.floats(-1e3, 1e3)))
    def test_roundtrip_and_energy(self, levels, img):
        pyr = haar_decompose(img, levels)
        np.testing.assert_allclose(haar_reconstruct(pyr), img, atol=1e-10)
        energy = sum(np.sum(c ** 2) for c in pyr.coefficients())
        np.testing.assert_allclose(energy, np.sum(img ** 2), rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("shape,levels", [((6, 8), 2), ((8,), 1), ((8, 8), 0)])
    def test_bad_shapes(self, shape, levels):
        with pytest.raises(ContractError):
            haar_decompose(np.zeros(shape), levels)

    def test_reconstruct_rejects_mismatched_details(self):
        pyr = haar_decompose(np.zeros((8, 8)), 2)
        pyr.details[0] = np.zeros((3, 2, 2))
        with pytest.raises(ContractError):
            haar_reconstruct(pyr)


class TestLayout:
    def test_group_order_and_sizes(self):
        layout = PyramidLayout.for_shape((8, 8), 2)
        assert layout.names == ("a_2", "d_2", "d_1")
        assert layout.group_sizes == (4, 12, 48)
        assert layout.group("d_2") == slice(4, 16)

    def test_channels(self):
        layout = PyramidLayout.for_shape((3, 8, 8), 1)
        assert layout.group_sizes == (48, 144)

    def test_level_zero_is_identity(self):
        layout = PyramidLayout.for_shape((4, 4), 0)
        x = np.arange(32.0).reshape(2, 4, 4)
        np.testing.assert_array_equal(image_to_coefficients(x, layout), x.reshape(2, 16))
        np.testing.assert_array_equal(coefficients_to_image(x.reshape(2, 16), layout), x)

    def test_flatten_roundtrip_with_batch(self):
        x = np.random.default_rng(0).standard_normal((5, 2, 8, 8))
        vec, layout = pyramid_flatten(haar_decompose(x, 2), n_image_axes=3)
        assert vec.shape == (5, layout.size) == (5, 128)
        np.testing.assert_allclose(haar_reconstruct(pyramid_unflatten(vec, layout)), x, atol=1e-12)

    def test_coarse_coefficients_lead(self):
        x = np.random.default_rng(1).standard_normal((8, 8))
        layout = PyramidLayout.for_shape((8, 8), 2)
        vec = image_to_coefficients(x, layout)
        np.testing.assert_array_equal(vec[:4], haar_decompose(x, 2).approx.ravel())

    def test_haar_matrix_orthogonal(self):
        H = haar_matrix(PyramidLayout.for_shape((8, 8), 3))
        np.testing.assert_allclose(H @ H.T, np.eye(64), atol=1e-13)

    def test_unflatten_wrong_length(self):
        with pytest.raises(ContractError):
            pyramid_unflatten(np.zeros(10), PyramidLayout.for_shape((4, 4), 1))
