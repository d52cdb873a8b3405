"""Core image containers shared by every stage of the pipeline.

A multi-band image is a dense ``(bands, pixels)`` float64 matrix plus grid
geometry: column ``p`` is the spectral vector of raster pixel ``p`` (row-major
pixel order). Images are immutable after construction, so they can be shared
freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridShape",
    "MultiBandImage",
    "ChangeImage",
    "new_image",
    "subtract",
    "frobenius_norm",
    "as_multiband",
]


@dataclass(frozen=True)
class GridShape:
    """Pixel grid geometry: `rows` x `cols`, raster pixel count `n`."""

    rows: int
    cols: int

    def __post_init__(self):
        if int(self.rows) != self.rows or int(self.cols) != self.cols:
            raise ValueError(f"grid dimensions must be integers, got {self.rows!r}x{self.cols!r}")
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @property
    def n(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class MultiBandImage:
    """Immutable multi-band image, band-major with row-major raster pixels.

    ``values[b, p]`` is band ``b`` at raster pixel ``p``; a column is one
    pixel's spectrum. All entries are finite float64.
    """

    bands: int
    shape: GridShape
    values: np.ndarray
    band_centers: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.bands < 1:
            raise ValueError(f"bands must be >= 1, got {self.bands}")
        v = np.asarray(self.values, dtype=np.float64)
        n = self.shape.n
        if v.ndim == 1:
            if v.size != self.bands * n:
                raise ValueError(
                    f"expected {self.bands * n} values "
                    f"({self.bands} bands x {n} pixels), got {v.size}"
                )
            v = v.reshape(self.bands, n)
        elif v.shape != (self.bands, n):
            raise ValueError(
                f"values must have shape ({self.bands}, {n}), got {v.shape}"
            )
        bad = ~np.isfinite(v)
        if bad.any():
            b, p = np.argwhere(bad)[0]
            raise ValueError(f"non-finite entry at band {b}, pixel {p}: {v[b, p]!r}")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.band_centers is not None:
            centers = tuple(float(c) for c in self.band_centers)
            if len(centers) != self.bands:
                raise ValueError(
                    f"band_centers has {len(centers)} entries for {self.bands} bands"
                )
            object.__setattr__(self, "band_centers", centers)

    def band(self, b: int) -> np.ndarray:
        """Band ``b`` as a read-only (rows, cols) array."""
        return self.values[b].reshape(self.shape.rows, self.shape.cols)

    def cube(self) -> np.ndarray:
        """Read-only (bands, rows, cols) view."""
        return self.values.reshape(self.bands, self.shape.rows, self.shape.cols)

    def with_values(self, values: np.ndarray) -> "MultiBandImage":
        """New image with the same geometry and different values."""
        return MultiBandImage(self.bands, self.shape, values, self.band_centers)


# A change image is an ordinary multi-band image paired with a latent image of
# identical geometry; the pairing is checked wherever the two meet.
ChangeImage = MultiBandImage


def new_image(bands: int, shape: GridShape, values) -> MultiBandImage:
    """Build a validated image from a flat or (bands, n) value sequence."""
    return MultiBandImage(bands, shape, np.asarray(values, dtype=np.float64))


def zeros_like(img: MultiBandImage) -> MultiBandImage:
    """All-zero image with the geometry of `img`."""
    return MultiBandImage(img.bands, img.shape, np.zeros((img.bands, img.shape.n)))


def subtract(a: MultiBandImage, b: MultiBandImage) -> MultiBandImage:
    """Elementwise ``a - b``; geometry must match exactly."""
    if a.bands != b.bands or a.shape != b.shape:
        raise ValueError(
            f"image mismatch: {a.bands} bands {a.shape.rows}x{a.shape.cols} vs "
            f"{b.bands} bands {b.shape.rows}x{b.shape.cols}"
        )
    return MultiBandImage(a.bands, a.shape, a.values - b.values, a.band_centers)


def frobenius_norm(a: MultiBandImage) -> float:
    """Square root of the sum of squared entries."""
    return float(np.linalg.norm(a.values))


def as_multiband(x, name: str = "image") -> MultiBandImage:
    """Validate/convert array-like input into a MultiBandImage.

    Accepts a MultiBandImage (returned as-is), a (bands, rows, cols) cube, or
    a single-band (rows, cols) array.
    """
    if isinstance(x, MultiBandImage):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise ValueError(
            f"{name}: expected MultiBandImage or array of shape "
            f"(bands, rows, cols) / (rows, cols), got ndim={arr.ndim}"
        )
    bands, rows, cols = arr.shape
    return MultiBandImage(bands, GridShape(rows, cols), arr.reshape(bands, rows * cols))
