"""Degraded-acquisition simulator and paired-dataset builder.

The degradation pipeline order is fixed: project at the requested number of
views, zero out a fraction of detector bins, add measurement noise, FBP, then
Gaussian blur in image space. Noise is a measurement-domain effect while the
blur stands in for detector/motion effects, hence the ordering.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, ShapeError
from .phantoms import PhantomRecipe, generate_paired_volume
from .seeding import derive_rng, derive_seed
from . import tomo


@dataclass(frozen=True)
class DegradationSpec:
    """One acquisition condition for a single modality."""

    num_views: int
    noise_relative_sigma: float = 0.0
    blur_sigma: float = 0.0
    sampling_keep_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_views < 2:
            raise ConfigError("degradation: num_views must be >= 2")
        if self.noise_relative_sigma < 0:
            raise ConfigError("degradation: noise_relative_sigma must be >= 0")
        if self.blur_sigma < 0:
            raise ConfigError("degradation: blur_sigma must be >= 0")
        if not 0.0 < self.sampling_keep_fraction <= 1.0:
            raise ConfigError("degradation: sampling_keep_fraction must be in (0, 1]")


@dataclass
class PairedSample:
    """Registered (degraded main, degraded aux, ideal main) training triple."""

    degraded_main: np.ndarray
    degraded_aux: np.ndarray
    ideal_main: np.ndarray
    spec_main: DegradationSpec
    spec_aux: DegradationSpec

    def __post_init__(self):
        shapes = {self.degraded_main.shape, self.degraded_aux.shape, self.ideal_main.shape}
        if len(shapes) != 1:
            raise ShapeError(f"paired sample images disagree in shape: {shapes}")


def _bin_mask(num_bins, keep_fraction, seed):
    """Detector bins to retain (same mask across angles), seed-deterministic."""
    keep = int(round(num_bins * keep_fraction))
    keep = max(1, min(num_bins, keep))
    if keep == num_bins:
        return np.ones(num_bins, dtype=bool)
    rng = derive_rng("bin-mask", seed)
    kept = rng.choice(num_bins, size=keep, replace=False)
    mask = np.zeros(num_bins, dtype=bool)
    mask[kept] = True
    return mask


def degraded_reconstruction(slice_img, geom_views, spec: DegradationSpec,
                            filter_kind="hann", pixel_pitch=1.0,
                            detector_pitch=None):
    """Simulate one degraded reconstruction of a square slice.

    `geom_views` is the acquisition system's full view budget; the spec may
    use at most that many views.
    """
    img = np.asarray(slice_img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"slice must be square 2D, got {img.shape}")
    if spec.num_views > geom_views:
        raise ConfigError(
            f"degradation: num_views {spec.num_views} exceeds view budget {geom_views}")
    geom = tomo.make_parallel_geometry(spec.num_views, img.shape[0],
                                       pixel_pitch, detector_pitch)
    sino = tomo.forward_project(img, geom)
    if spec.sampling_keep_fraction < 1.0:
        mask = _bin_mask(geom.num_detector_bins, spec.sampling_keep_fraction,
                         derive_seed(spec.seed, "bins"))
        sino = tomo.Sinogram(geom, sino.values * mask[None, :])
    sino = tomo.add_noise(sino, spec.noise_relative_sigma, derive_seed(spec.seed, "noise"))
    recon = tomo.fbp_reconstruct(sino, filter_kind)
    if spec.blur_sigma > 0:
        # 'reflect' + normalized symmetric kernel preserves the image mean
        recon = gaussian_filter(recon, spec.blur_sigma, mode="reflect")
    return recon


def _respec(spec: DegradationSpec, seed: int) -> DegradationSpec:
    return DegradationSpec(spec.num_views, spec.noise_relative_sigma,
                           spec.blur_sigma, spec.sampling_keep_fraction, seed)


def build_paired_dataset(recipe: PhantomRecipe, ideal_spec: DegradationSpec,
                         spec_grid, count: int, seed: int):
    """Build `count` PairedSamples from slices of recipe-generated volumes.

    Sample i takes slice (i mod depth) of the paired volume derived from
    (seed, "vol", i // depth), so consecutive samples sweep whole volumes.
    Each sample draws one (main, aux) spec pair from `spec_grid` and gets
    sample-specific noise seeds. The result order is shuffled by `seed`.
    """
    if count < 0:
        raise ConfigError("dataset: count must be >= 0")
    if count > 0 and not spec_grid:
        raise ConfigError("dataset: spec_grid must not be empty")
    view_budget = max([ideal_spec.num_views]
                      + [max(m.num_views, a.num_views) for m, a in spec_grid or []])
    samples = []
    vol_cache = {}
    pick = derive_rng(seed, "grid-pick")
    for i in range(count):
        vol_idx = i // recipe.depth
        if vol_idx not in vol_cache:
            vol_cache = {vol_idx: generate_paired_volume(recipe, derive_seed(seed, "vol", vol_idx))}
        main_vol, aux_vol = vol_cache[vol_idx]
        sl = i % recipe.depth
        spec_main, spec_aux = spec_grid[int(pick.integers(len(spec_grid)))]
        spec_main = _respec(spec_main, derive_seed(seed, "main", i, spec_main.seed))
        spec_aux = _respec(spec_aux, derive_seed(seed, "aux", i, spec_aux.seed))
        samples.append(PairedSample(
            degraded_main=degraded_reconstruction(main_vol[sl], view_budget, spec_main),
            degraded_aux=degraded_reconstruction(aux_vol[sl], view_budget, spec_aux),
            ideal_main=degraded_reconstruction(main_vol[sl], view_budget, ideal_spec),
            spec_main=spec_main,
            spec_aux=spec_aux,
        ))
    order = derive_rng(seed, "shuffle").permutation(count)
    return [samples[int(k)] for k in order]


def default_spec_grid(view_budget=256):
    """The declared default degradation grid for translator training.

    Main-arm conditions cover sparse views (to match what the solver feeds
    the translator at test time) crossed with noise/blur/bin-dropout; the
    aux arm varies moderately around the deliberately imperfect default.
    """
    views = [v for v in (8, 16, 32, 64, 128, 256) if v <= view_budget]
    main_specs = [
        DegradationSpec(v, noise, blur, keep)
        for v in views
        for noise in (0.0, 0.05)
        for blur in (0.0, 1.0)
        for keep in (1.0, 0.7)
        # a dense clean acquisition is the ideal itself, not a degradation
        if not (v >= view_budget // 4 and noise == 0.0 and blur == 0.0 and keep == 1.0)
    ]
    aux_specs = [
        DegradationSpec(min(32, view_budget), 0.05, 1.0, 1.0),
        DegradationSpec(min(64, view_budget), 0.05, 1.0, 1.0),
        DegradationSpec(min(128, view_budget), 0.02, 0.5, 1.0),
    ]
    return [(m, aux_specs[k % len(aux_specs)]) for k, m in enumerate(main_specs)]
