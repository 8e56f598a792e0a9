"""Procedural ellipse/ellipsoid microstructure phantoms in two modalities.

Volumes are built from 3D ellipsoids so neighbouring slices are geometrically
consistent; 2D training slices for the prior come from an independent ellipse
sampler with the same shape statistics. The two modality renderings share
geometry exactly: an ellipse is either visible in both volumes, only in the
main one, or only in the auxiliary one, and per-ellipse attenuation values
are drawn with a configurable correlation between modalities (shared density
with modality-specific sensitivity).

Compositing is additive with a final clip to [0, 1].
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .seeding import derive_rng

VISIBILITIES = ("both", "main_only", "aux_only")

# shape statistics of the sampler (declared stand-in for a real
# microstructure generator)
_CENTER_RANGE = 0.75
_SEMI_AXIS_RANGE = (0.08, 0.45)
_SEMI_AXIS_Z_RANGE = (0.25, 0.7)
_CENTER_Z_RANGE = 0.8


@dataclass(frozen=True)
class EllipseSpec:
    """One ellipse in normalized [-1, 1]^2 slice coordinates."""

    center: tuple
    semi_axes: tuple
    rotation: float
    attenuation_main: float
    attenuation_aux: float
    visibility: str = "both"

    def __post_init__(self):
        if self.semi_axes[0] <= 0 or self.semi_axes[1] <= 0:
            raise ConfigError("ellipse semi-axes must be positive")
        for v in (self.attenuation_main, self.attenuation_aux):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"ellipse attenuation {v} outside [0, 1]")
        if self.visibility not in VISIBILITIES:
            raise ConfigError(f"visibility must be one of {VISIBILITIES}")


@dataclass(frozen=True)
class PhantomRecipe:
    """Sampling recipe for paired microstructure volumes."""

    volume_side: int = 64
    depth: int = 32
    ellipse_count_range: tuple = (8, 14)
    attenuation_main_range: tuple = (0.25, 0.95)
    attenuation_aux_range: tuple = (0.25, 0.95)
    attenuation_correlation: float = 0.6
    visibility_weights: tuple = (0.7, 0.15, 0.15)
    seed: int = 0

    def __post_init__(self):
        if self.volume_side < 4 or self.depth < 1:
            raise ConfigError("recipe: volume_side >= 4 and depth >= 1 required")
        lo, hi = self.ellipse_count_range
        if lo < 0 or hi < lo:
            raise ConfigError("recipe: invalid ellipse_count_range")
        for rng_ in (self.attenuation_main_range, self.attenuation_aux_range):
            if not (0.0 <= rng_[0] <= rng_[1] <= 1.0):
                raise ConfigError("recipe: attenuation ranges must lie inside [0, 1]")
        if not 0.0 <= self.attenuation_correlation <= 1.0:
            raise ConfigError("recipe: attenuation_correlation must be in [0, 1]")
        w = self.visibility_weights
        if len(w) != 3 or any(v < 0 for v in w) or sum(w) <= 0:
            raise ConfigError("recipe: visibility_weights must be 3 non-negative values")


def _slice_grid(side):
    c = (side - 1) / 2.0
    pos = (np.arange(side) - c) * (2.0 / side)
    xx, yy = np.meshgrid(pos, -pos)       # x right, y up, matching the projector
    return xx, yy


def render_ellipses(specs, side, modality="main"):
    """Additive composite of the given ellipses, clipped to [0, 1].

    `modality` selects which attenuation is used and which visibilities are
    included ("main" keeps both/main_only, "aux" keeps both/aux_only).
    """
    if modality not in ("main", "aux"):
        raise ConfigError("modality must be 'main' or 'aux'")
    xx, yy = _slice_grid(side)
    img = np.zeros((side, side))
    skip = "aux_only" if modality == "main" else "main_only"
    for e in specs:
        if e.visibility == skip:
            continue
        value = e.attenuation_main if modality == "main" else e.attenuation_aux
        ct, st = np.cos(e.rotation), np.sin(e.rotation)
        dx = xx - e.center[0]
        dy = yy - e.center[1]
        xr = dx * ct + dy * st
        yr = -dx * st + dy * ct
        img += value * (((xr / e.semi_axes[0]) ** 2 + (yr / e.semi_axes[1]) ** 2) <= 1.0)
    return np.clip(img, 0.0, 1.0)


def _sample_attenuations(rng, recipe):
    rho = recipe.attenuation_correlation
    shared = rng.uniform()
    mix_main = rho * shared + (1.0 - rho) * rng.uniform()
    mix_aux = rho * shared + (1.0 - rho) * rng.uniform()
    lo_m, hi_m = recipe.attenuation_main_range
    lo_a, hi_a = recipe.attenuation_aux_range
    return lo_m + (hi_m - lo_m) * mix_main, lo_a + (hi_a - lo_a) * mix_aux


def _sample_ellipse_2d(rng, recipe):
    center = tuple(rng.uniform(-_CENTER_RANGE, _CENTER_RANGE, size=2))
    axes = tuple(rng.uniform(*_SEMI_AXIS_RANGE, size=2))
    rotation = rng.uniform(0.0, np.pi)
    am, aa = _sample_attenuations(rng, recipe)
    w = np.asarray(recipe.visibility_weights, dtype=float)
    visibility = VISIBILITIES[rng.choice(3, p=w / w.sum())]
    return EllipseSpec(center, axes, rotation, am, aa, visibility)


def sample_prior_slice(recipe: PhantomRecipe, seed: int) -> np.ndarray:
    """One main-modality training image for the diffusion prior."""
    rng = derive_rng(recipe.seed, "prior-slice", seed)
    lo, hi = recipe.ellipse_count_range
    count = int(rng.integers(lo, hi + 1))
    specs = [_sample_ellipse_2d(rng, recipe) for _ in range(count)]
    # visibility is irrelevant for single-modality prior images
    specs = [EllipseSpec(e.center, e.semi_axes, e.rotation,
                         e.attenuation_main, e.attenuation_aux, "both")
             for e in specs]
    return render_ellipses(specs, recipe.volume_side, "main")


def _sample_ellipsoids(rng, recipe):
    lo, hi = recipe.ellipse_count_range
    count = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(count):
        e = _sample_ellipse_2d(rng, recipe)
        cz = rng.uniform(-_CENTER_Z_RANGE, _CENTER_Z_RANGE)
        sz = rng.uniform(*_SEMI_AXIS_Z_RANGE)
        out.append((e, cz, sz))
    return out


def _cross_sections(ellipsoids, z):
    """Ellipse cross-sections of the ellipsoids at slice coordinate z."""
    specs = []
    for e, cz, sz in ellipsoids:
        t = (z - cz) / sz
        if abs(t) >= 1.0:
            continue
        scale = np.sqrt(1.0 - t * t)
        specs.append(EllipseSpec(e.center,
                                 (e.semi_axes[0] * scale, e.semi_axes[1] * scale),
                                 e.rotation, e.attenuation_main,
                                 e.attenuation_aux, e.visibility))
    return specs


def generate_paired_volume(recipe: PhantomRecipe, seed: int):
    """Two (depth, side, side) volumes with identical geometry and per-modality
    contrast/visibility."""
    rng = derive_rng(recipe.seed, "paired-volume", seed)
    ellipsoids = _sample_ellipsoids(rng, recipe)
    depth, side = recipe.depth, recipe.volume_side
    zs = ((np.arange(depth) + 0.5) / depth) * 2.0 - 1.0
    main = np.zeros((depth, side, side))
    aux = np.zeros((depth, side, side))
    for k, z in enumerate(zs):
        specs = _cross_sections(ellipsoids, z)
        main[k] = render_ellipses(specs, side, "main")
        aux[k] = render_ellipses(specs, side, "aux")
    return main, aux
