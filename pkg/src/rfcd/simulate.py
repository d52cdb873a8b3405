"""Ground-truth simulation protocol.

A single high-resolution hyperspectral reference scene is linearly unmixed
into endmember spectra and per-pixel abundances; changes are injected by
editing the abundances of masked pixels (swap, replace, rescale) and remixing,
which yields two latent images that agree bit-exactly outside the mask. The
observed pair is produced by the forward models: a spectral response for the
high-resolution image (PAN band average or a 4-band multispectral response)
and Gaussian blur plus decimation for the low-resolution one, with per-band
noise scaled to a requested SNR.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .degradation import (
    BandNoise,
    BlurKernel,
    DecimationGrid,
    SensorModel,
    SpectralResponse,
    apply_forward,
)
from .detect import ChangeMask
from .imagery import GridShape, MultiBandImage

__all__ = [
    "EndmemberModel",
    "ChangeRule",
    "MaskSpec",
    "Rect",
    "Triangle",
    "Pixel",
    "SimulatedPair",
    "unmix",
    "reconstruction_error",
    "apply_change_rule",
    "mix",
    "rasterize_mask",
    "simulate_pair",
    "benchmark_suite",
    "synthetic_scene",
    "synthetic_model",
    "scenario_response",
]

log = logging.getLogger(__name__)

# Full-scale protocol constants: a 93-band reference uses a 43-band PAN
# average; desk-scale scenes keep the same fraction.
PAN_FRACTION = 43.0 / 93.0
MS_BANDS = 4
SNR_WEIGHT_CAP_DB = 40.0


@dataclass(frozen=True)
class EndmemberModel:
    """Linear mixing model: spectra (bands x R) and simplex abundances (R x n)
    over a pixel grid."""

    endmembers: np.ndarray
    abundances: np.ndarray
    shape: GridShape

    def __post_init__(self):
        m = np.asarray(self.endmembers, dtype=np.float64)
        a = np.asarray(self.abundances, dtype=np.float64)
        if m.ndim != 2 or a.ndim != 2 or m.shape[1] != a.shape[0]:
            raise ValueError(f"inconsistent factor shapes {m.shape} / {a.shape}")
        if m.shape[1] < 2:
            raise ValueError(f"need at least 2 endmembers, got {m.shape[1]}")
        if a.shape[1] != self.shape.n:
            raise ValueError(f"abundances cover {a.shape[1]} pixels, grid has {self.shape.n}")
        if (a < -1e-9).any():
            raise ValueError("abundances must be non-negative")
        sums = a.sum(axis=0)
        if np.abs(sums - 1.0).max() > 1e-6:
            p = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"abundances of pixel {p} sum to {sums[p]!r}, not 1")
        m = np.ascontiguousarray(m)
        a = np.ascontiguousarray(a)
        m.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "endmembers", m)
        object.__setattr__(self, "abundances", a)

    @property
    def r(self) -> int:
        return self.endmembers.shape[1]


@dataclass(frozen=True)
class ChangeRule:
    """Abundance edit applied to masked pixels."""

    kind: str
    i: int | None = None
    j: int | None = None
    factor: float | None = None

    def __post_init__(self):
        if self.kind not in ("identity", "swap", "replace", "rescale"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if self.kind in ("swap", "replace") and (self.i is None or self.j is None):
            raise ValueError(f"{self.kind} needs two endmember indices")
        if self.kind == "rescale":
            if self.i is None:
                raise ValueError("rescale needs an endmember index")
            if self.factor is None or self.factor <= 0:
                raise ValueError(f"rescale needs a positive factor, got {self.factor}")

    @classmethod
    def identity(cls) -> "ChangeRule":
        return cls("identity")

    @classmethod
    def swap(cls, i: int, j: int) -> "ChangeRule":
        return cls("swap", i=i, j=j)

    @classmethod
    def replace(cls, i: int, j: int) -> "ChangeRule":
        """Fold endmember i's abundance into endmember j."""
        return cls("replace", i=i, j=j)

    @classmethod
    def rescale(cls, i: int, factor: float) -> "ChangeRule":
        return cls("rescale", i=i, factor=factor)


@dataclass(frozen=True)
class Rect:
    row: int
    col: int
    height: int
    width: int


@dataclass(frozen=True)
class Triangle:
    """Right triangle with the right angle at (row, col), legs of `size`."""

    row: int
    col: int
    size: int


@dataclass(frozen=True)
class Pixel:
    row: int
    col: int


@dataclass(frozen=True)
class MaskSpec:
    """Geometric description of a binary change mask."""

    shape: GridShape
    regions: tuple

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))


def rasterize_mask(spec: MaskSpec) -> ChangeMask:
    """Union of the rasterized primitives; regions must lie in bounds."""
    rows, cols = spec.shape.rows, spec.shape.cols
    out = np.zeros((rows, cols), dtype=bool)
    for region in spec.regions:
        if isinstance(region, Rect):
            if not (
                0 <= region.row
                and 0 <= region.col
                and region.height >= 1
                and region.width >= 1
                and region.row + region.height <= rows
                and region.col + region.width <= cols
            ):
                raise ValueError(f"rectangle {region} outside {rows}x{cols} grid")
            out[region.row : region.row + region.height, region.col : region.col + region.width] = True
        elif isinstance(region, Triangle):
            if not (
                0 <= region.row
                and 0 <= region.col
                and region.size >= 1
                and region.row + region.size <= rows
                and region.col + region.size <= cols
            ):
                raise ValueError(f"triangle {region} outside {rows}x{cols} grid")
            for k in range(region.size):
                out[region.row + k, region.col : region.col + region.size - k] = True
        elif isinstance(region, Pixel):
            if not (0 <= region.row < rows and 0 <= region.col < cols):
                raise ValueError(f"pixel {region} outside {rows}x{cols} grid")
            out[region.row, region.col] = True
        else:
            raise ValueError(f"unknown region primitive {region!r}")
    return ChangeMask(out.reshape(-1), spec.shape)


def _project_simplex_columns(a: np.ndarray) -> np.ndarray:
    """Euclidean projection of every column onto the probability simplex."""
    r = a.shape[0]
    u = -np.sort(-a, axis=0)
    css = np.cumsum(u, axis=0) - 1.0
    ks = np.arange(1, r + 1, dtype=np.float64)[:, None]
    rho = np.count_nonzero(u - css / ks > 0, axis=0)
    theta = css[rho - 1, np.arange(a.shape[1])] / rho
    return np.maximum(a - theta[None, :], 0.0)


def _purest_pixel_init(x: np.ndarray, r: int) -> np.ndarray:
    """Deterministic extreme-pixel initialization: repeatedly pick the pixel
    with the largest residual after projecting out the chosen spectra."""
    picks = [int(np.argmax(np.linalg.norm(x, axis=0)))]
    for _ in range(1, r):
        basis, _ = np.linalg.qr(x[:, picks])
        resid = x - basis @ (basis.T @ x)
        picks.append(int(np.argmax(np.linalg.norm(resid, axis=0))))
    return x[:, picks].copy()


def unmix(x_ref: MultiBandImage, r: int, iters: int = 60, seed: int = 0) -> EndmemberModel:
    """Linear unmixing under the abundance simplex constraint.

    Extreme-pixel initialization followed by alternating updates: accelerated
    projected gradient for the abundances, least squares (clipped at zero) for
    the spectra. Deterministic for a fixed seed.
    """
    if not 2 <= r <= min(x_ref.bands, x_ref.shape.n):
        raise ValueError(
            f"endmember count must be in [2, min(bands={x_ref.bands}, n={x_ref.shape.n})], got {r}"
        )
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    if (x_ref.values < -1e-12).any():
        raise ValueError("reference image must be non-negative")
    x = x_ref.values
    n = x.shape[1]
    rng = np.random.default_rng(seed)
    m = _purest_pixel_init(x, r)
    m = m + 1e-12 * rng.standard_normal(m.shape)  # break exact ties
    a = np.full((r, n), 1.0 / r)

    for _ in range(iters):
        # abundance step: FISTA with exact simplex projection
        lip = float(np.linalg.norm(m, 2) ** 2)
        if lip == 0.0:
            break
        z = a.copy()
        t = 1.0
        for _ in range(15):
            grad = m.T @ (m @ z - x)
            a_next = _project_simplex_columns(z - grad / lip)
            t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
            z = a_next + ((t - 1.0) / t_next) * (a_next - a)
            a, t = a_next, t_next
        # spectra step: least squares, clipped to physical non-negativity
        gram = a @ a.T
        m = np.maximum(np.linalg.lstsq(gram, a @ x.T, rcond=None)[0].T, 0.0)

    model = EndmemberModel(endmembers=m, abundances=_project_simplex_columns(a), shape=x_ref.shape)
    log.debug("unmix: r=%d iters=%d relative error %.3e", r, iters, reconstruction_error(model, x_ref))
    return model


def reconstruction_error(model: EndmemberModel, x_ref: MultiBandImage) -> float:
    """Relative Frobenius mismatch between the scene and its factorization."""
    num = np.linalg.norm(x_ref.values - model.endmembers @ model.abundances)
    den = np.linalg.norm(x_ref.values)
    return float(num / den) if den > 0 else float(num)


def apply_change_rule(model: EndmemberModel, mask: ChangeMask, rule: ChangeRule) -> EndmemberModel:
    """Transform masked pixels' abundances; unmasked pixels are untouched."""
    if mask.shape != model.shape:
        raise ValueError(
            f"mask grid {mask.shape.rows}x{mask.shape.cols} does not match "
            f"model grid {model.shape.rows}x{model.shape.cols}"
        )
    if rule.kind == "identity" or mask.count() == 0:
        return model
    for idx in (rule.i, rule.j):
        if idx is not None and not 0 <= idx < model.r:
            raise ValueError(f"endmember index {idx} out of range [0, {model.r})")
    a = model.abundances.copy()
    sel = mask.mask
    if rule.kind == "swap":
        a[rule.i, sel], a[rule.j, sel] = model.abundances[rule.j, sel], model.abundances[rule.i, sel]
    elif rule.kind == "replace":
        a[rule.j, sel] = a[rule.j, sel] + a[rule.i, sel]
        a[rule.i, sel] = 0.0
    elif rule.kind == "rescale":
        a[rule.i, sel] = a[rule.i, sel] * rule.factor
        a[:, sel] = a[:, sel] / a[:, sel].sum(axis=0, keepdims=True)
    return EndmemberModel(endmembers=model.endmembers, abundances=a, shape=model.shape)


def mix(model: EndmemberModel) -> MultiBandImage:
    """Remix spectra and abundances into an image."""
    return MultiBandImage(
        model.endmembers.shape[0], model.shape, model.endmembers @ model.abundances
    )


def scenario_response(scenario: str, latent_bands: int, pan_first_k: int | None = None) -> SpectralResponse:
    """High-resolution sensor response for a scenario: `PAN` averages the
    first k bands (k scales with the band count), `MS` uses 4 contiguous
    averaging windows."""
    if scenario == "PAN":
        k = pan_first_k if pan_first_k is not None else max(1, round(latent_bands * PAN_FRACTION))
        return SpectralResponse.band_average(latent_bands, k)
    if scenario == "MS":
        return SpectralResponse.contiguous_windows(latent_bands, MS_BANDS)
    raise ValueError(f"unknown scenario {scenario!r} (expected 'PAN' or 'MS')")


@dataclass(frozen=True)
class SimulatedPair:
    """One synthetic observation pair with its ground truth and the sensor
    models that produced it."""

    y_hr: MultiBandImage
    y_lr: MultiBandImage
    truth_mask: ChangeMask
    latent_ti: MultiBandImage
    latent_tj: MultiBandImage
    scenario: str
    hr_sensor: SensorModel
    lr_sensor: SensorModel
    seed: int
    rule: ChangeRule
    change_epoch: str

    def __post_init__(self):
        if self.truth_mask.shape != self.latent_ti.shape:
            raise ValueError("truth mask must live on the high-resolution grid")
        if (
            self.latent_ti.bands != self.latent_tj.bands
            or self.latent_ti.shape != self.latent_tj.shape
        ):
            raise ValueError("latent images must share bands and grid")


def _snr_variances(y: MultiBandImage, snr_db: float) -> BandNoise:
    """Per-band variances hitting the requested SNR on this image; infinite
    SNR keeps a capped weighting variance (the estimator needs positive
    weights) while no noise gets added."""
    eff = min(snr_db, SNR_WEIGHT_CAP_DB) if math.isfinite(snr_db) else SNR_WEIGHT_CAP_DB
    power = np.mean(y.values**2, axis=1)
    floor = max(float(power.mean()), 1e-30) * 1e-12
    return BandNoise(np.maximum(power * 10.0 ** (-eff / 10.0), floor))


def _simulate_from_model(
    model: EndmemberModel,
    spec: MaskSpec,
    rule: ChangeRule,
    change_epoch: str,
    scenario: str,
    noise_snr_db: float,
    seed: int,
    d: int,
    blur_size: int,
    blur_sigma: float,
    pan_first_k: int | None,
) -> SimulatedPair:
    if change_epoch not in ("ti", "tj"):
        raise ValueError(f"change_epoch must be 'ti' or 'tj', got {change_epoch!r}")
    truth = rasterize_mask(spec)
    changed = apply_change_rule(model, truth, rule)
    model_ti = changed if change_epoch == "ti" else model
    model_tj = changed if change_epoch == "tj" else model
    latent_ti = mix(model_ti)
    latent_tj = mix(model_tj)

    bands = latent_ti.bands
    kernel = BlurKernel.gaussian(blur_size, blur_sigma)
    grid = DecimationGrid(d, d)
    grid.lr_shape(latent_ti.shape)  # validates divisibility

    response = scenario_response(scenario, bands, pan_first_k)
    hr_clean = apply_forward(latent_ti, SensorModel(response, None, BandNoise(np.ones(response.out_bands))))
    lr_clean = apply_forward(latent_tj, SensorModel(None, (kernel, grid), BandNoise(np.ones(bands))))

    hr_sensor = SensorModel(response, None, _snr_variances(hr_clean, noise_snr_db))
    lr_sensor = SensorModel(None, (kernel, grid), _snr_variances(lr_clean, noise_snr_db))

    if math.isfinite(noise_snr_db):
        y_hr = apply_forward(latent_ti, hr_sensor, seed=2 * seed + 1)
        y_lr = apply_forward(latent_tj, lr_sensor, seed=2 * seed + 2)
    else:
        y_hr, y_lr = hr_clean, lr_clean

    return SimulatedPair(
        y_hr=y_hr,
        y_lr=y_lr,
        truth_mask=truth,
        latent_ti=latent_ti,
        latent_tj=latent_tj,
        scenario=scenario,
        hr_sensor=hr_sensor,
        lr_sensor=lr_sensor,
        seed=seed,
        rule=rule,
        change_epoch=change_epoch,
    )


def simulate_pair(
    x_ref: MultiBandImage,
    spec: MaskSpec,
    rule: ChangeRule,
    change_epoch: str,
    scenario: str,
    noise_snr_db: float,
    seed: int,
    *,
    r: int = 5,
    unmix_iters: int = 60,
    d: int = 5,
    blur_size: int = 5,
    blur_sigma: float = 1.5,
    pan_first_k: int | None = None,
) -> SimulatedPair:
    """Full protocol for one pair: unmix the reference, inject the change
    into one epoch (the other keeps the identity rule), remix, degrade."""
    if not math.isfinite(noise_snr_db) and noise_snr_db < 0:
        raise ValueError("noise_snr_db must be a real value or +inf")
    model = unmix(x_ref, r, iters=unmix_iters, seed=seed)
    return _simulate_from_model(
        model, spec, rule, change_epoch, scenario, noise_snr_db, seed,
        d, blur_size, blur_sigma, pan_first_k,
    )


def _suite_rules(r: int) -> list[ChangeRule]:
    return [
        ChangeRule.swap(0, 1 % r),
        ChangeRule.replace(2 % r, 0),
        ChangeRule.rescale(min(3, r - 1), 2.0),
    ]


def _random_mask(shape: GridShape, rng: np.random.Generator) -> MaskSpec:
    regions = []
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.integers(0, 3)
        if kind == 0:
            h = int(rng.integers(8, 25))
            w = int(rng.integers(8, 25))
            r0 = int(rng.integers(0, shape.rows - h + 1))
            c0 = int(rng.integers(0, shape.cols - w + 1))
            regions.append(Rect(r0, c0, h, w))
        elif kind == 1:
            s = int(rng.integers(10, 25))
            r0 = int(rng.integers(0, shape.rows - s + 1))
            c0 = int(rng.integers(0, shape.cols - s + 1))
            regions.append(Triangle(r0, c0, s))
        else:
            regions.append(Pixel(int(rng.integers(0, shape.rows)), int(rng.integers(0, shape.cols))))
    return MaskSpec(shape, tuple(regions))


def benchmark_suite(
    x_ref: MultiBandImage,
    n_masks: int,
    seed: int,
    *,
    r: int = 5,
    unmix_iters: int = 60,
    d: int = 5,
    blur_size: int = 5,
    blur_sigma: float = 1.5,
    snr_db: float = 30.0,
    scenarios: tuple[str, ...] = ("PAN", "MS"),
    pan_first_k: int | None = None,
) -> list[SimulatedPair]:
    """Deterministic benchmark: `n_masks` random masks, each simulated under
    every scenario; rules cycle and the changed epoch alternates across the
    suite. The reference is unmixed once and shared."""
    if n_masks < 1:
        raise ValueError(f"n_masks must be >= 1, got {n_masks}")
    rng = np.random.default_rng(seed)
    model = unmix(x_ref, r, iters=unmix_iters, seed=seed)
    rules = _suite_rules(model.r)
    pairs = []
    for mask_idx in range(n_masks):
        spec = _random_mask(x_ref.shape, rng)
        for scen_idx, scenario in enumerate(scenarios):
            pair_idx = mask_idx * len(scenarios) + scen_idx
            pairs.append(
                _simulate_from_model(
                    model,
                    spec,
                    rules[pair_idx % len(rules)],
                    "ti" if pair_idx % 2 == 0 else "tj",
                    scenario,
                    snr_db,
                    seed + 1000 * (pair_idx + 1),
                    d,
                    blur_size,
                    blur_sigma,
                    pan_first_k,
                )
            )
    return pairs


def synthetic_model(
    rows: int = 120,
    cols: int = 120,
    bands: int = 32,
    r: int = 5,
    seed: int = 0,
) -> EndmemberModel:
    """Procedural reference factors: smooth positive spectra and Gaussian-blob
    abundance fields normalized to the simplex."""
    rng = np.random.default_rng(seed)
    shape = GridShape(rows, cols)
    b = np.arange(bands, dtype=np.float64)
    spectra = np.empty((bands, r))
    for e in range(r):
        s = np.full(bands, 0.15)
        for _ in range(3):
            center = rng.uniform(0, bands)
            width = rng.uniform(bands / 10.0, bands / 3.0)
            s = s + rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((b - center) / width) ** 2)
        spectra[:, e] = s / s.max()

    rr = np.arange(rows, dtype=np.float64)[:, None]
    cc = np.arange(cols, dtype=np.float64)[None, :]
    fields = np.empty((r, rows * cols))
    for e in range(r):
        f = np.full((rows, cols), 0.05)
        for _ in range(int(rng.integers(2, 5))):
            cr = rng.uniform(0, rows)
            ccenter = rng.uniform(0, cols)
            sig = rng.uniform(min(rows, cols) / 15.0, min(rows, cols) / 5.0)
            f = f + np.exp(-((rr - cr) ** 2 + (cc - ccenter) ** 2) / (2.0 * sig**2))
        fields[e] = f.reshape(-1)
    abundances = fields / fields.sum(axis=0, keepdims=True)
    return EndmemberModel(endmembers=spectra, abundances=abundances, shape=shape)


def synthetic_scene(
    rows: int = 120,
    cols: int = 120,
    bands: int = 32,
    r: int = 5,
    seed: int = 0,
) -> MultiBandImage:
    """Bundled desk-scale reference scene."""
    return mix(synthetic_model(rows, cols, bands, r, seed))
