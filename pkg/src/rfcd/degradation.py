"""Forward observation model: spectral mixing, cyclic blur, decimation, noise.

An observed image is a degraded view of a latent high-resolution image:
a band-mixing matrix applied per pixel (spectral side), a cyclic convolution
followed by uniform subsampling (spatial side), and independent Gaussian noise
with a per-band variance. A `SensorModel` bundles one instrument's pieces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagery import GridShape, MultiBandImage

__all__ = [
    "SpectralResponse",
    "BlurKernel",
    "DecimationGrid",
    "BandNoise",
    "SensorModel",
    "spectral_degrade",
    "cyclic_blur",
    "decimate",
    "upsample_zero",
    "sample_noise",
    "apply_forward",
]


@dataclass(frozen=True)
class SpectralResponse:
    """Band-mixing matrix: each row is one output band's nonnegative weights."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError(f"response matrix must be 2-D, got ndim={m.ndim}")
        out_bands, in_bands = m.shape
        if out_bands > in_bands:
            raise ValueError(
                f"response cannot increase the band count ({out_bands} > {in_bands})"
            )
        if not np.isfinite(m).all():
            raise ValueError("response matrix has non-finite entries")
        if (m < 0).any():
            i, j = np.argwhere(m < 0)[0]
            raise ValueError(f"negative response weight at ({i}, {j})")
        if (m.sum(axis=1) == 0).any():
            row = int(np.argwhere(m.sum(axis=1) == 0)[0][0])
            raise ValueError(f"response row {row} is all-zero")
        m = np.ascontiguousarray(m)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def out_bands(self) -> int:
        return self.matrix.shape[0]

    @property
    def in_bands(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def identity(cls, bands: int) -> "SpectralResponse":
        return cls(np.eye(bands))

    @classmethod
    def band_average(cls, in_bands: int, first_k: int) -> "SpectralResponse":
        """Single output band averaging the first `first_k` input bands."""
        if not 1 <= first_k <= in_bands:
            raise ValueError(f"first_k must be in [1, {in_bands}], got {first_k}")
        row = np.zeros((1, in_bands))
        row[0, :first_k] = 1.0 / first_k
        return cls(row)

    @classmethod
    def contiguous_windows(cls, in_bands: int, out_bands: int) -> "SpectralResponse":
        """`out_bands` non-overlapping averaging windows covering all bands."""
        if not 1 <= out_bands <= in_bands:
            raise ValueError(f"out_bands must be in [1, {in_bands}], got {out_bands}")
        edges = np.linspace(0, in_bands, out_bands + 1).round().astype(int)
        m = np.zeros((out_bands, in_bands))
        for r, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
            m[r, lo:hi] = 1.0 / (hi - lo)
        return cls(m)


@dataclass(frozen=True)
class BlurKernel:
    """Odd-sized square convolution kernel, 180deg-symmetric, summing to 1."""

    taps: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.taps, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError(f"kernel must be square, got shape {t.shape}")
        k = t.shape[0]
        if k % 2 == 0:
            raise ValueError(f"kernel side must be odd, got {k}")
        if not np.isfinite(t).all():
            raise ValueError("kernel has non-finite taps")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ValueError(f"kernel taps must sum to 1, got {t.sum()!r}")
        if not np.allclose(t, t[::-1, ::-1], rtol=0.0, atol=1e-12):
            raise ValueError("kernel must be symmetric under 180deg rotation")
        t = np.ascontiguousarray(t)
        t.setflags(write=False)
        object.__setattr__(self, "taps", t)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @classmethod
    def delta(cls) -> "BlurKernel":
        return cls(np.ones((1, 1)))

    @classmethod
    def gaussian(cls, size: int = 5, sigma: float = 1.5) -> "BlurKernel":
        if size % 2 == 0 or size < 1:
            raise ValueError(f"size must be odd and positive, got {size}")
        if sigma <= 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        r = np.arange(size) - size // 2
        g = np.exp(-0.5 * (r / sigma) ** 2)
        taps = np.outer(g, g)
        return cls(taps / taps.sum())

    def embed(self, shape: GridShape) -> np.ndarray:
        """Kernel placed on the full grid with its center tap at (0, 0)."""
        k = self.size
        if k > shape.rows or k > shape.cols:
            raise ValueError(
                f"kernel {k}x{k} larger than image {shape.rows}x{shape.cols}"
            )
        emb = np.zeros((shape.rows, shape.cols))
        c = k // 2
        ii = (np.arange(k) - c) % shape.rows
        jj = (np.arange(k) - c) % shape.cols
        emb[np.ix_(ii, jj)] = self.taps
        return emb


@dataclass(frozen=True)
class DecimationGrid:
    """Uniform subsampling by (d_r, d_c) keeping one phase per block.

    Upsampling by zero-interpolation is the exact adjoint; decimating an
    upsampled image returns it unchanged.
    """

    d_r: int
    d_c: int
    phase: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.d_r < 1 or self.d_c < 1:
            raise ValueError(f"factors must be >= 1, got ({self.d_r}, {self.d_c})")
        p_r, p_c = self.phase
        if not (0 <= p_r < self.d_r and 0 <= p_c < self.d_c):
            raise ValueError(
                f"phase {self.phase} outside the {self.d_r}x{self.d_c} block"
            )
        object.__setattr__(self, "phase", (int(p_r), int(p_c)))

    @property
    def factor(self) -> int:
        return self.d_r * self.d_c

    def lr_shape(self, hr: GridShape) -> GridShape:
        if hr.rows % self.d_r or hr.cols % self.d_c:
            raise ValueError(
                f"grid {hr.rows}x{hr.cols} not divisible by ({self.d_r}, {self.d_c})"
            )
        return GridShape(hr.rows // self.d_r, hr.cols // self.d_c)


@dataclass(frozen=True)
class BandNoise:
    """Diagonal per-band noise variances; pixels are independent."""

    variances: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.variances, dtype=np.float64))
        if v.ndim != 1:
            raise ValueError(f"variances must be a vector, got ndim={v.ndim}")
        if not np.isfinite(v).all() or (v <= 0).any():
            raise ValueError("variances must be finite and strictly positive")
        v = np.ascontiguousarray(v)
        v.setflags(write=False)
        object.__setattr__(self, "variances", v)

    @property
    def bands(self) -> int:
        return self.variances.size


@dataclass(frozen=True)
class SensorModel:
    """One instrument: optional spectral response, optional (blur, decimation),
    and per-band noise. ``spectral=None`` means the identity response and
    ``spatial=None`` means no spatial degradation."""

    spectral: SpectralResponse | None
    spatial: tuple[BlurKernel, DecimationGrid] | None
    noise: BandNoise

    def out_bands(self, in_bands: int) -> int:
        if self.spectral is None:
            return in_bands
        if self.spectral.in_bands != in_bands:
            raise ValueError(
                f"response expects {self.spectral.in_bands} bands, image has {in_bands}"
            )
        return self.spectral.out_bands

    def out_shape(self, in_shape: GridShape) -> GridShape:
        if self.spatial is None:
            return in_shape
        return self.spatial[1].lr_shape(in_shape)


def spectral_degrade(x: MultiBandImage, l: SpectralResponse) -> MultiBandImage:
    """Apply the band-mixing matrix to every pixel spectrum."""
    if l.in_bands != x.bands:
        raise ValueError(f"response expects {l.in_bands} bands, image has {x.bands}")
    return MultiBandImage(l.out_bands, x.shape, l.matrix @ x.values)


def cyclic_blur(x: MultiBandImage, b: BlurKernel) -> MultiBandImage:
    """Circular convolution of each band with the kernel (FFT-based)."""
    transfer = np.fft.rfft2(b.embed(x.shape))
    cube = x.cube()
    out = np.fft.irfft2(
        np.fft.rfft2(cube, axes=(1, 2)) * transfer[None, :, :],
        s=(x.shape.rows, x.shape.cols),
        axes=(1, 2),
    )
    return MultiBandImage(x.bands, x.shape, out.reshape(x.bands, -1), x.band_centers)


def decimate(x: MultiBandImage, s: DecimationGrid) -> MultiBandImage:
    """Keep one pixel per (d_r, d_c) block at the grid's phase offset."""
    lr = s.lr_shape(x.shape)
    p_r, p_c = s.phase
    cube = x.cube()[:, p_r :: s.d_r, p_c :: s.d_c]
    return MultiBandImage(x.bands, lr, cube.reshape(x.bands, -1), x.band_centers)


def upsample_zero(
    y: MultiBandImage, s: DecimationGrid, hr_shape: GridShape
) -> MultiBandImage:
    """Place the samples back on the fine grid, zeros everywhere else."""
    lr = s.lr_shape(hr_shape)
    if lr != y.shape:
        raise ValueError(
            f"image {y.shape.rows}x{y.shape.cols} inconsistent with "
            f"{hr_shape.rows}x{hr_shape.cols} at factors ({s.d_r}, {s.d_c})"
        )
    p_r, p_c = s.phase
    cube = np.zeros((y.bands, hr_shape.rows, hr_shape.cols))
    cube[:, p_r :: s.d_r, p_c :: s.d_c] = y.cube()
    return MultiBandImage(y.bands, hr_shape, cube.reshape(y.bands, -1), y.band_centers)


def sample_noise(noise: BandNoise, shape: GridShape, seed: int) -> MultiBandImage:
    """Independent Gaussian noise, variance `variances[b]` in band b.

    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    draw = rng.standard_normal((noise.bands, shape.n))
    return MultiBandImage(noise.bands, shape, draw * np.sqrt(noise.variances)[:, None])


def apply_forward(
    x: MultiBandImage, sensor: SensorModel, seed: int | None = None
) -> MultiBandImage:
    """Run the full forward model: spectral mixing, blur, decimation, and
    (when a seed is given) additive noise."""
    out = x
    if sensor.spectral is not None:
        out = spectral_degrade(out, sensor.spectral)
    if sensor.spatial is not None:
        kernel, grid = sensor.spatial
        out = decimate(cyclic_blur(out, kernel), grid)
    if seed is not None:
        if sensor.noise.bands != out.bands:
            raise ValueError(
                f"noise has {sensor.noise.bands} bands, observation has {out.bands}"
            )
        noise = sample_noise(sensor.noise, out.shape, seed)
        out = MultiBandImage(out.bands, out.shape, out.values + noise.values, out.band_centers)
    return out
