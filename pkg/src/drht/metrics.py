"""PSNR, SSIM and FSIM for [0, 1] RGB images of shape (H, W, 3)."""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import signal

PSNR_CAP = 99.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def luma(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image @ LUMA_WEIGHTS


def psnr(a, b):
    """10*log10(1 / MSE) with peak 1; plain MSE, capped at 99 dB."""
    a, b = _pair(a, b)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / err))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return g


def _valid_filter(img, g):
    tmp = signal.convolve(img, g[:, None], mode="valid")
    return signal.convolve(tmp, g[None, :], mode="valid")


def ssim(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM on luma over every fully-inside Gaussian window position."""
    a, b = _pair(a, b)
    x, y = luma(a), luma(b)
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mx, my = _valid_filter(x, g), _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- FSIM

_PC_SCALES = 4
_PC_ORIENTS = 4
_MIN_WAVELENGTH = 6
_MULT = 2
_SIGMA_ON_F = 0.55
_D_THETA_ON_SIGMA = 1.2
_NOISE_K = 2.0
_PC_EPS = 1e-4
_T1 = 0.85
_T2 = 160.0


def _freq_grid(rows, cols):
    def axis(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
        return np.arange(-n / 2, n / 2) / n

    x, y = np.meshgrid(axis(cols), axis(rows))
    return x, y


def _lowpass(rows, cols, cutoff=0.45, order=15):
    x, y = _freq_grid(rows, cols)
    radius = np.sqrt(x ** 2 + y ** 2)
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * order)))


def phase_congruency(img):
    """Kovesi-style phase congruency from a 4-scale, 4-orientation log-Gabor bank."""
    rows, cols = img.shape
    spectrum = np.fft.fft2(img)
    x, y = _freq_grid(rows, cols)
    radius = np.fft.ifftshift(np.sqrt(x ** 2 + y ** 2))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = _lowpass(rows, cols)
    theta_sigma = math.pi / _PC_ORIENTS / _D_THETA_ON_SIGMA

    radial = []
    for s in range(_PC_SCALES):
        fo = 1.0 / (_MIN_WAVELENGTH * _MULT ** s)
        lg = np.exp(-(np.log(radius / fo)) ** 2 / (2 * math.log(_SIGMA_ON_F) ** 2)) * lp
        lg[0, 0] = 0.0
        radial.append(lg)

    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(_PC_ORIENTS):
        angle = o * math.pi / _PC_ORIENTS
        ds = sin_t * math.cos(angle) - cos_t * math.sin(angle)
        dc = cos_t * math.cos(angle) + sin_t * math.sin(angle)
        spread = np.exp(-np.abs(np.arctan2(ds, dc)) ** 2 / (2 * theta_sigma ** 2))

        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        responses = []
        spatial_filters = []
        for s in range(_PC_SCALES):
            filt = radial[s] * spread
            spatial_filters.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            eo = np.fft.ifft2(spectrum * filt)
            responses.append(eo)
            sum_an += np.abs(eo)
            sum_e += eo.real
            sum_o += eo.imag
            if s == 0:
                em_n = np.sum(filt ** 2)

        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + _PC_EPS
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for eo in responses:
            e, od = eo.real, eo.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        # noise threshold from the smallest scale's response, Rayleigh model
        median_e2n = np.median(np.abs(responses[0]) ** 2)
        mean_e2n = -median_e2n / math.log(0.5)
        noise_power = mean_e2n / em_n
        est_sum_an2 = sum(f ** 2 for f in spatial_filters)
        est_sum_aiaj = np.zeros((rows, cols))
        for i in range(_PC_SCALES - 1):
            for j in range(i + 1, _PC_SCALES):
                est_sum_aiaj += spatial_filters[i] * spatial_filters[j]
        noise_energy2 = 2 * noise_power * est_sum_an2.sum() + 4 * noise_power * est_sum_aiaj.sum()
        tau = math.sqrt(noise_energy2 / 2)
        noise_mean = tau * math.sqrt(math.pi / 2)
        noise_sigma = math.sqrt((2 - math.pi / 2) * tau ** 2)
        threshold = (noise_mean + _NOISE_K * noise_sigma) / 1.7

        energy_all += np.maximum(energy - threshold, 0)
        an_all += sum_an
    return energy_all / (an_all + _PC_EPS)


_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16.0
_SCHARR_Y = _SCHARR_X.T


def gradient_magnitude(img):
    gx = signal.convolve2d(img, _SCHARR_X, mode="same")
    gy = signal.convolve2d(img, _SCHARR_Y, mode="same")
    return np.sqrt(gx ** 2 + gy ** 2)


def _downsample(img):
    f = max(1, round(min(img.shape) / 256))
    if f == 1:
        return img
    kernel = np.full((f, f), 1.0 / (f * f))
    return signal.convolve2d(img, kernel, mode="same")[::f, ::f]


def fsim(a, b):
    """Feature similarity on luma (8-bit scale): phase congruency and gradient magnitude."""
    a, b = _pair(a, b)
    x, y = luma(a) * 255.0, luma(b) * 255.0
    if min(x.shape) < 32:
        raise ValueError(f"FSIM needs at least 32x32 pixels, got {x.shape}")
    x, y = _downsample(x), _downsample(y)
    pc1, pc2 = phase_congruency(x), phase_congruency(y)
    g1, g2 = gradient_magnitude(x), gradient_magnitude(y)
    pc_sim = (2 * pc1 * pc2 + _T1) / (pc1 ** 2 + pc2 ** 2 + _T1)
    g_sim = (2 * g1 * g2 + _T2) / (g1 ** 2 + g2 ** 2 + _T2)
    pcm = np.maximum(pc1, pc2)
    return float(np.sum(g_sim * pc_sim * pcm) / np.sum(pcm))


@dataclass
class MetricReport:
    per_image: list = field(default_factory=list)

    def add(self, path, a, b):
        self.per_image.append({"path": path, "psnr": psnr(a, b), "ssim": ssim(a, b), "fsim": fsim(a, b)})

    def add_error(self, path, message):
        self.per_image.append({"path": path, "error": message})

    def mean(self):
        ok = [e for e in self.per_image if "error" not in e]
        if not ok:
            return {}
        return {k: float(np.mean([e[k] for e in ok])) for k in ("psnr", "ssim", "fsim")}

    def to_dict(self):
        return {"per_image": self.per_image, "mean": self.mean()}
