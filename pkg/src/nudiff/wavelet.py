"""Multi-level orthonormal 2D Haar transform.

Arrays carry the image in their last two axes; any leading axes (batch,
channels) are transformed independently.  For a 2x2 block
``[[a, b], [c, d]]`` one level produces

    approx     = (a + b + c + d) / 2
    horizontal = (a + b - c - d) / 2    top rows minus bottom rows
    vertical   = (a - b + c - d) / 2    left columns minus right columns
    diagonal   = (a - b - c + d) / 2

which is orthonormal, so the coefficient energy equals the image energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

SUBBANDS = ("horizontal", "vertical", "diagonal")


@dataclass
class HaarPyramid:
    """``approx`` is ``a_n``; ``details[i-1]`` is ``d_i`` with shape ``(..., 3, h_i, w_i)``."""

    approx: np.ndarray
    details: list[np.ndarray]

    @property
    def levels(self) -> int:
        return len(self.details)

    def coefficients(self) -> list[np.ndarray]:
        return [self.approx, *self.details]


def _check_shape(shape, levels):
    if levels < 1:
        raise ContractError("levels must be >= 1")
    if len(shape) < 2:
        raise ContractError("image needs at least two axes")
    h, w = shape[-2:]
    k = 2 ** levels
    if h % k or w % k or h == 0 or w == 0:
        raise ContractError(
            f"image shape {h}x{w} must be divisible by 2^{levels} = {k} in both axes")


def _analyze(x):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    approx = (a + b + c + d) / 2
    det = np.stack([(a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2], axis=-3)
    return approx, det


def _synthesize(approx, det):
    hz, vt, dg = det[..., 0, :, :], det[..., 1, :, :], det[..., 2, :, :]
    h, w = approx.shape[-2:]
    out = np.empty(approx.shape[:-2] + (2 * h, 2 * w), dtype=np.result_type(approx, det))
    out[..., 0::2, 0::2] = (approx + hz + vt + dg) / 2
    out[..., 0::2, 1::2] = (approx + hz - vt - dg) / 2
    out[..., 1::2, 0::2] = (approx - hz + vt - dg) / 2
    out[..., 1::2, 1::2] = (approx - hz - vt + dg) / 2
    return out


def haar_decompose(image, levels: int) -> HaarPyramid:
    x = np.asarray(image, dtype=float)
    _check_shape(x.shape, levels)
    details = []
    for _ in range(levels):
        x, det = _analyze(x)
        details.append(det)
    return HaarPyramid(x, details)


def haar_reconstruct(pyramid: HaarPyramid) -> np.ndarray:
    x = np.asarray(pyramid.approx, dtype=float)
    for i in range(pyramid.levels, 0, -1):
        det = np.asarray(pyramid.details[i - 1], dtype=float)
        if det.shape[:-3] != x.shape[:-2] or det.shape[-3] != 3 or det.shape[-2:] != x.shape[-2:]:
            raise ContractError(
                f"detail level {i} has shape {det.shape}, expected "
                f"{x.shape[:-2] + (3,) + x.shape[-2:]}")
        x = _synthesize(x, det)
    return x


@dataclass(frozen=True)
class PyramidLayout:
    """Flattened-vector layout: group names in ``a_n, d_n, ..., d_1`` order."""

    image_shape: tuple[int, ...]
    levels: int
    names: tuple[str, ...]
    slices: tuple[slice, ...]

    @property
    def size(self) -> int:
        return self.slices[-1].stop

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(s.stop - s.start for s in self.slices)

    def group(self, name: str) -> slice:
        return self.slices[self.names.index(name)]

    @classmethod
    def for_shape(cls, image_shape, levels: int) -> PyramidLayout:
        """Layout for images of ``image_shape`` (channels first, if any).

        ``levels = 0`` is the degenerate single-group layout of the raw image.
        """
        image_shape = tuple(int(v) for v in image_shape)
        lead = int(np.prod(image_shape[:-2], dtype=int))
        h, w = image_shape[-2:]
        if levels == 0:
            return cls(image_shape, 0, ("a_0",), (slice(0, lead * h * w),))
        _check_shape(image_shape, levels)
        sizes = [lead * (h >> levels) * (w >> levels)]
        names = [f"a_{levels}"]
        for i in range(levels, 0, -1):
            sizes.append(lead * 3 * (h >> i) * (w >> i))
            names.append(f"d_{i}")
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return cls(image_shape, levels, tuple(names),
                   tuple(slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])))


def pyramid_flatten(pyramid: HaarPyramid, n_image_axes: int = 2):
    """Flatten to ``[a_n, d_n, ..., d_1]`` along the last axis.

    ``n_image_axes`` counts the trailing axes that belong to one sample
    (2 for a single-channel image, 3 for ``(C, H, W)``); remaining leading
    axes are batch axes and are kept.  Returns ``(vector, layout)``.
    """
    approx = np.asarray(pyramid.approx)
    if n_image_axes < 2:
        raise ContractError("n_image_axes must be >= 2")
    batch = approx.shape[: approx.ndim - n_image_axes]
    sample_shape = approx.shape[approx.ndim - n_image_axes:]
    k = 2 ** pyramid.levels
    image_shape = sample_shape[:-2] + (sample_shape[-2] * k, sample_shape[-1] * k)
    layout = PyramidLayout.for_shape(image_shape, pyramid.levels)
    parts = [approx.reshape(batch + (-1,))]
    for i in range(pyramid.levels, 0, -1):
        parts.append(np.asarray(pyramid.details[i - 1]).reshape(batch + (-1,)))
    vec = np.concatenate(parts, axis=-1)
    if vec.shape[-1] != layout.size:
        raise ContractError("pyramid bands are inconsistent with the layout")
    return vec, layout


def pyramid_unflatten(vector, layout: PyramidLayout) -> HaarPyramid:
    vec = np.asarray(vector, dtype=float)
    if vec.shape[-1] != layout.size:
        raise ContractError(f"vector length {vec.shape[-1]} != layout size {layout.size}")
    batch = vec.shape[:-1]
    lead = layout.image_shape[:-2]
    h, w = layout.image_shape[-2:]
    n = layout.levels
    approx = vec[..., layout.slices[0]].reshape(batch + lead + (h >> n, w >> n))
    details = [None] * n
    for j, i in enumerate(range(n, 0, -1), start=1):
        details[i - 1] = vec[..., layout.slices[j]].reshape(batch + lead + (3, h >> i, w >> i))
    return HaarPyramid(approx, details)


def image_to_coefficients(images, layout: PyramidLayout) -> np.ndarray:
    """Decompose and flatten a batch of images shaped ``(..., *layout.image_shape)``."""
    images = np.asarray(images, dtype=float)
    if layout.levels == 0:
        nd = len(layout.image_shape)
        return images.reshape(images.shape[: images.ndim - nd] + (-1,))
    vec, _ = pyramid_flatten(haar_decompose(images, layout.levels), len(layout.image_shape))
    return vec


def coefficients_to_image(vector, layout: PyramidLayout) -> np.ndarray:
    vec = np.asarray(vector, dtype=float)
    if layout.levels == 0:
        return vec.reshape(vec.shape[:-1] + layout.image_shape)
    return haar_reconstruct(pyramid_unflatten(vec, layout))


def haar_matrix(layout: PyramidLayout) -> np.ndarray:
    """Orthogonal matrix ``H`` with ``coefficients = H @ image.ravel()``."""
    n = int(np.prod(layout.image_shape))
    basis = np.eye(n).reshape((n,) + layout.image_shape)
    return image_to_coefficients(basis, layout).T
