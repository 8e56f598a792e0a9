"""Parallel-beam tomography: forward projector, exact adjoint, FBP, noise model.

Discretization: ray-driven (Joseph) sampling. For each (angle, detector bin)
the ray is stepped one pixel along its dominant axis and linearly
interpolated across the other axis, each sample weighted by the step length
along the ray. Forward and adjoint share one sparse matrix (the adjoint is
its transpose), so <Ax, y> = <x, A^T y> holds by construction, not just
approximately.

FBP uses its own pixel-driven interpolation of the filtered projections,
which is the classic discrete inversion formula and avoids the lattice
aliasing a transpose-based backprojection would add.

All operator math is double precision. Matrices are cached per geometry.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DomainError, ShapeError
from .seeding import derive_rng

FILTER_KINDS = ("ramp", "hann")


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam acquisition description. Angles in radians, in [0, pi)."""

    angles: tuple
    num_detector_bins: int
    detector_pitch: float
    image_side: int
    pixel_pitch: float

    def __post_init__(self):
        ang = np.asarray(self.angles, dtype=float)
        if ang.ndim != 1 or ang.size < 1:
            raise ConfigError("geometry: need at least one angle")
        if np.any(~np.isfinite(ang)):
            raise DomainError("geometry: non-finite angle")
        if np.any(ang < 0.0) or np.any(ang >= np.pi):
            raise ConfigError("geometry: angles must lie in [0, pi)")
        if np.any(np.diff(ang) <= 0.0):
            raise ConfigError("geometry: angles must be strictly increasing")
        if self.num_detector_bins < self.image_side:
            raise ConfigError(
                "geometry: num_detector_bins must be >= image_side "
                f"({self.num_detector_bins} < {self.image_side})"
            )
        if self.detector_pitch <= 0 or self.pixel_pitch <= 0 or self.image_side <= 0:
            raise ConfigError("geometry: pitches and image_side must be positive")

    @property
    def num_angles(self) -> int:
        return len(self.angles)

    @property
    def sinogram_shape(self):
        return (self.num_angles, self.num_detector_bins)


def make_parallel_geometry(num_angles, image_side, pixel_pitch=1.0,
                           detector_pitch=None, num_detector_bins=None):
    """Uniform angles over [0, pi), first angle 0.

    Defaults: detector_pitch = pixel_pitch and enough bins to cover the image
    diagonal (ceil(side*sqrt(2))), so every pixel projects inside the detector.
    """
    if num_angles < 1:
        raise ConfigError("geometry: num_angles must be >= 1")
    if detector_pitch is None:
        detector_pitch = pixel_pitch
    if num_detector_bins is None:
        num_detector_bins = int(np.ceil(image_side * np.sqrt(2.0)))
    angles = tuple(np.arange(num_angles) * (np.pi / num_angles))
    return ProjectionGeometry(
        angles=angles,
        num_detector_bins=num_detector_bins,
        detector_pitch=float(detector_pitch),
        image_side=int(image_side),
        pixel_pitch=float(pixel_pitch),
    )


@dataclass
class Sinogram:
    """(num_angles, num_detector_bins) line-integral measurements."""

    geometry: ProjectionGeometry
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.geometry.sinogram_shape:
            raise ShapeError(
                f"sinogram shape {self.values.shape} does not match geometry "
                f"{self.geometry.sinogram_shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise DomainError("sinogram contains non-finite values")


def _pixel_centers(geom):
    n = geom.image_side
    c = (n - 1) / 2.0
    idx = np.arange(n, dtype=np.float64)
    x = (idx - c) * geom.pixel_pitch          # column -> +x right
    y = (c - idx) * geom.pixel_pitch          # row    -> +y up
    return x, y


@lru_cache(maxsize=32)
def _system_matrix(geom: ProjectionGeometry):
    """Sparse A (num_angles*bins, side*side) with Joseph weights, plus A^T."""
    n = geom.image_side
    nb = geom.num_detector_bins
    x, y = _pixel_centers(geom)
    s = (np.arange(nb) - (nb - 1) / 2.0) * geom.detector_pitch

    rows = []
    cols = []
    vals = []
    for a, theta in enumerate(geom.angles):
        ct, st = np.cos(theta), np.sin(theta)
        if abs(st) >= abs(ct):
            # step along columns, interpolate across rows
            yy = (s[:, None] - x[None, :] * ct) / st          # (nb, n)
            p = (y[0] - yy) / geom.pixel_pitch                # row coordinate
            i0 = np.floor(p).astype(np.int64)
            frac = p - i0
            w = geom.pixel_pitch / abs(st)
            base_col = np.broadcast_to(np.arange(n)[None, :], p.shape)
            bin_row = np.broadcast_to((a * nb + np.arange(nb))[:, None], p.shape)
            for off, wt in ((0, (1.0 - frac) * w), (1, frac * w)):
                ii = i0 + off
                ok = (ii >= 0) & (ii < n) & (wt > 0)
                rows.append(bin_row[ok])
                cols.append((ii * n + base_col)[ok])
                vals.append(wt[ok])
        else:
            # step along rows, interpolate across columns
            xx = (s[:, None] - y[None, :] * st) / ct          # (nb, n)
            q = (xx - x[0]) / geom.pixel_pitch                # column coordinate
            j0 = np.floor(q).astype(np.int64)
            frac = q - j0
            w = geom.pixel_pitch / abs(ct)
            base_row = np.broadcast_to(np.arange(n)[None, :], q.shape)
            bin_row = np.broadcast_to((a * nb + np.arange(nb))[:, None], q.shape)
            for off, wt in ((0, (1.0 - frac) * w), (1, frac * w)):
                jj = j0 + off
                ok = (jj >= 0) & (jj < n) & (wt > 0)
                rows.append(bin_row[ok])
                cols.append((base_row * n + jj)[ok])
                vals.append(wt[ok])
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(geom.num_angles * nb, n * n),
    ).tocsr()
    return mat, mat.T.tocsr()


@lru_cache(maxsize=32)
def operator_norm_sq(geom: ProjectionGeometry, iters: int = 60) -> float:
    """||A||_2^2 via power iteration on A^T A (deterministic all-ones start)."""
    mat, mat_t = _system_matrix(geom)
    v = np.ones(mat.shape[1])
    lam = 1.0
    for _ in range(iters):
        w = mat_t @ (mat @ v)
        lam = float(np.linalg.norm(w))
        v = w / lam
    return lam


def _check_image(img, geom):
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (geom.image_side, geom.image_side):
        raise ShapeError(
            f"image shape {img.shape} does not match geometry side {geom.image_side}"
        )
    if not np.all(np.isfinite(img)):
        raise DomainError("image contains non-finite values")
    return img


def forward_project(img, geom: ProjectionGeometry) -> Sinogram:
    """Discrete line integrals of `img` along every (angle, bin) ray."""
    img = _check_image(img, geom)
    mat, _ = _system_matrix(geom)
    values = (mat @ img.ravel()).reshape(geom.sinogram_shape)
    return Sinogram(geometry=geom, values=values)


def back_project(sino: Sinogram) -> np.ndarray:
    """Exact adjoint of forward_project."""
    geom = sino.geometry
    _, mat_t = _system_matrix(geom)
    n = geom.image_side
    return (mat_t @ sino.values.ravel()).reshape(n, n)


def project_volume(volume, geom: ProjectionGeometry):
    """Forward-project every slice of a (depth, side, side) volume at once."""
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim != 3 or vol.shape[1] != geom.image_side or vol.shape[2] != geom.image_side:
        raise ShapeError(f"volume shape {vol.shape} does not match geometry")
    mat, _ = _system_matrix(geom)
    flat = vol.reshape(vol.shape[0], -1).T            # (side*side, depth)
    return (mat @ flat).T.reshape(vol.shape[0], *geom.sinogram_shape)


def backproject_volume(sino_values, geom: ProjectionGeometry):
    """A^T y for a (depth, angles, bins) stack; returns (depth, side, side)."""
    sb = np.asarray(sino_values, dtype=np.float64)
    if sb.ndim != 3 or sb.shape[1:] != geom.sinogram_shape:
        raise ShapeError(f"sinogram stack shape {sb.shape} does not match geometry")
    _, mat_t = _system_matrix(geom)
    flat = sb.reshape(sb.shape[0], -1).T
    n = geom.image_side
    return (mat_t @ flat).T.reshape(sb.shape[0], n, n)


def _ramp_response(npad, detector_pitch, filter_kind):
    """Frequency response of the band-limited ramp, built from the spatial
    Ram-Lak kernel so the DC term is handled correctly."""
    h = np.zeros(npad)
    h[0] = 1.0 / (4.0 * detector_pitch ** 2)
    k = np.arange(1, npad // 2 + 1, 2)
    h[k] = -1.0 / (np.pi * k * detector_pitch) ** 2
    h[-k] = -1.0 / (np.pi * k * detector_pitch) ** 2
    resp = np.real(np.fft.fft(h))
    if filter_kind == "hann":
        freq = np.fft.fftfreq(npad, d=detector_pitch)
        nyquist = 1.0 / (2.0 * detector_pitch)
        resp = resp * 0.5 * (1.0 + np.cos(np.pi * freq / nyquist))
    return resp


def _interp_backproject(filtered, geom):
    """Classic FBP backprojection: interpolate each filtered projection at the
    pixel's detector coordinate and sum over angles."""
    n = geom.image_side
    nb = geom.num_detector_bins
    x, y = _pixel_centers(geom)
    xx, yy = np.meshgrid(x, y)
    cb = (nb - 1) / 2.0
    out = np.zeros((n, n))
    for a, theta in enumerate(geom.angles):
        u = (xx * np.cos(theta) + yy * np.sin(theta)) / geom.detector_pitch + cb
        i0 = np.floor(u).astype(np.int64)
        frac = u - i0
        q = filtered[a]
        lo = np.where((i0 >= 0) & (i0 < nb), q[np.clip(i0, 0, nb - 1)], 0.0)
        hi = np.where((i0 + 1 >= 0) & (i0 + 1 < nb), q[np.clip(i0 + 1, 0, nb - 1)], 0.0)
        out += lo * (1.0 - frac) + hi * frac
    return out


def fbp_reconstruct(sino: Sinogram, filter_kind: str = "hann") -> np.ndarray:
    """Filtered backprojection; the pseudo-inverse used for initialization.

    Ramp filtering per angle in the frequency domain (with optional Hann
    apodization), then interpolating backprojection with the pi/num_angles
    angular quadrature weight.
    """
    if filter_kind not in FILTER_KINDS:
        raise ConfigError(f"unknown FBP filter {filter_kind!r}; expected one of {FILTER_KINDS}")
    geom = sino.geometry
    if geom.num_angles < 2:
        raise ConfigError("fbp_reconstruct needs at least 2 angles")
    nb = geom.num_detector_bins
    npad = 1 << int(np.ceil(np.log2(2 * nb)))
    resp = _ramp_response(npad, geom.detector_pitch, filter_kind)
    spec = np.fft.fft(sino.values, n=npad, axis=1)
    filtered = np.real(np.fft.ifft(spec * resp[None, :], axis=1))[:, :nb]
    filtered = filtered * geom.detector_pitch
    return _interp_backproject(filtered, geom) * (np.pi / geom.num_angles)


def fbp_volume(sino_values, geom, filter_kind="hann"):
    """FBP of a (depth, angles, bins) stack; returns (depth, side, side)."""
    sb = np.asarray(sino_values, dtype=np.float64)
    return np.stack([
        fbp_reconstruct(Sinogram(geometry=geom, values=sb[d]), filter_kind)
        for d in range(sb.shape[0])
    ])


def add_noise(sino: Sinogram, relative_sigma: float, seed: int) -> Sinogram:
    """I.i.d. Gaussian noise with std = relative_sigma * mean(|values|)."""
    if relative_sigma < 0:
        raise DomainError(f"relative_sigma must be >= 0, got {relative_sigma}")
    if relative_sigma == 0:
        return Sinogram(geometry=sino.geometry, values=sino.values.copy())
    sigma = relative_sigma * float(np.mean(np.abs(sino.values)))
    rng = derive_rng("measurement-noise", seed)
    noisy = sino.values + sigma * rng.standard_normal(sino.values.shape)
    return Sinogram(geometry=sino.geometry, values=noisy)
