"""Reference-based image quality metrics: PSNR and windowed SSIM.

SSIM follows the standard configuration: Gaussian-weighted local statistics
(sigma = 1.5, kernel truncated to the window and renormalized), constants
C1 = (0.01 * range)^2 and C2 = (0.03 * range)^2, mean taken over the valid
(fully inside) window positions.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

PSNR_CAP_DB = 99.0

METRIC_CSV_COLUMNS = ["volume", "views", "steps", "noise", "mode",
                      "slice", "psnr", "ssim"]


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeError(f"metric inputs disagree in shape: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref, data_range: float = 1.0) -> float:
    """10*log10(range^2 / MSE), capped at 99 dB when MSE is exactly zero."""
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    x, ref = _pair(x, ref)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(data_range ** 2 / mse))


def _gaussian_kernel(window, sigma=1.5):
    r = (window - 1) / 2.0
    t = np.arange(window) - r
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _filter_valid(img, kern):
    """Separable 'valid' correlation with a 1D kernel along both axes."""
    w = kern.size
    v = np.lib.stride_tricks.sliding_window_view(img, w, axis=0)
    v = np.tensordot(v, kern, axes=([2], [0]))
    v = np.lib.stride_tricks.sliding_window_view(v, w, axis=1)
    return np.tensordot(v, kern, axes=([2], [0]))


def ssim(x, ref, data_range: float = 1.0, window: int = 7) -> float:
    """Mean local SSIM with Gaussian weighting."""
    if data_range <= 0:
        raise ConfigError("data_range must be positive")
    if window < 3 or window % 2 == 0:
        raise ConfigError(f"window must be odd and >= 3, got {window}")
    x, ref = _pair(x, ref)
    if min(x.shape) < window:
        raise ShapeError(f"images {x.shape} smaller than window {window}")
    kern = _gaussian_kernel(window)
    mu_x = _filter_valid(x, kern)
    mu_y = _filter_valid(ref, kern)
    xx = _filter_valid(x * x, kern) - mu_x * mu_x
    yy = _filter_valid(ref * ref, kern) - mu_y * mu_y
    xy = _filter_valid(x * ref, kern) - mu_x * mu_y
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-slice quality of one reconstruction against its ground truth."""

    volume: int
    views: int
    steps: int
    noise: float
    mode: str
    psnr_slices: list = field(default_factory=list)
    ssim_slices: list = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_slices))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim_slices))

    def csv_rows(self):
        """Rows in METRIC_CSV_COLUMNS order, one per slice."""
        for k, (p, s) in enumerate(zip(self.psnr_slices, self.ssim_slices)):
            yield [self.volume, self.views, self.steps, f"{self.noise:g}",
                   self.mode, k, f"{p:.6f}", f"{s:.6f}"]


def volume_report(recon, reference, *, volume, views, steps, noise, mode,
                  data_range=1.0, window=7) -> MetricReport:
    recon = np.asarray(recon)
    reference = np.asarray(reference)
    if recon.shape != reference.shape or recon.ndim != 3:
        raise ShapeError(
            f"volumes disagree or are not 3D: {recon.shape} vs {reference.shape}")
    rep = MetricReport(volume=volume, views=views, steps=steps,
                       noise=noise, mode=mode)
    for k in range(recon.shape[0]):
        rep.psnr_slices.append(psnr(recon[k], reference[k], data_range))
        rep.ssim_slices.append(ssim(recon[k], reference[k], data_range, window))
    return rep


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_CSV_COLUMNS)
    for rep in reports:
        for row in rep.csv_rows():
            writer.writerow(row)
    return buf.getvalue()
