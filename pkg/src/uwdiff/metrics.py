"""Image quality measures and the PSNR-derived degradation label.

All functions take float images in [0, 1] shaped HxW or HxWx3 (RGB).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy import ndimage
from skimage import color

PSNR_CAP = 100.0

# UIQM weights (Panetta et al.) and UCIQE weights (Yang & Sowmya).
UIQM_COEFFS = (0.0282, 0.2953, 3.5753)
UCIQE_COEFFS = (0.4680, 0.2745, 0.2576)


def _as_float(img) -> np.ndarray:
    return np.ascontiguousarray(img, dtype=np.float64)


def _check_rgb(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {img.shape}")


def psnr(pred, ref, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    pred, ref = _as_float(pred), _as_float(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(peak * peak / mse), cap)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, keeping only windows that lie fully inside the image
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[r:-r, r:-r]


def _ssim_channel(x: np.ndarray, y: np.ndarray, g: np.ndarray, c1: float, c2: float) -> float:
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x * mu_x
    syy = _filter_valid(y * y, g) - mu_y * mu_y
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(pred, ref, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-windowed SSIM; RGB inputs are scored per channel and averaged."""
    pred, ref = _as_float(pred), _as_float(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if min(pred.shape[:2]) < win_size:
        raise ValueError(f"image {pred.shape[:2]} smaller than the {win_size}x{win_size} window")
    g = _gaussian_window(win_size, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    if pred.ndim == 2:
        return _ssim_channel(pred, ref, g, c1, c2)
    return float(np.mean([_ssim_channel(pred[..., c], ref[..., c], g, c1, c2)
                          for c in range(pred.shape[2])]))


# --- UIQM -----------------------------------------------------------------

def _trimmed_mean(x: np.ndarray, alpha_l: float = 0.1, alpha_r: float = 0.1) -> float:
    x = np.sort(x)
    k = len(x)
    lo, hi = int(np.ceil(alpha_l * k)), int(np.floor(alpha_r * k))
    return float(np.mean(x[lo:k - hi]))


def uicm(img) -> float:
    """Colourfulness term from asymmetric alpha-trimmed RG/YB opponent statistics."""
    img = _as_float(img) * 255.0
    _check_rgb(img)
    r, g, b = (img[..., c].ravel() for c in range(3))
    rg = r - g
    yb = 0.5 * (r + g) - b
    mu_rg, mu_yb = _trimmed_mean(rg), _trimmed_mean(yb)
    var_rg = np.mean((rg - mu_rg) ** 2)
    var_yb = np.mean((yb - mu_yb) ** 2)
    return float(-0.0268 * np.hypot(mu_rg, mu_yb) + 0.1586 * np.sqrt(var_rg + var_yb))


def _blocks(x: np.ndarray, window: int) -> np.ndarray:
    h, w = x.shape[:2]
    k2, k1 = h // window, w // window
    if k1 == 0 or k2 == 0:
        raise ValueError(f"image {x.shape[:2]} smaller than the {window}px block")
    x = x[:k2 * window, :k1 * window]
    tail = x.shape[2:]
    x = x.reshape(k2, window, k1, window, *tail).swapaxes(1, 2)
    return x.reshape(k2, k1, -1)


def eme(x: np.ndarray, window: int = 10) -> float:
    blocks = _blocks(x, window)
    mx, mn = blocks.max(axis=-1), blocks.min(axis=-1)
    ok = (mn > 0) & (mx > 0)
    ratio = np.where(ok, mx / np.where(ok, mn, 1.0), 1.0)
    k = blocks.shape[0] * blocks.shape[1]
    return float(2.0 / k * np.sum(np.log(ratio)))


def _sobel_magnitude(ch: np.ndarray) -> np.ndarray:
    mag = np.hypot(ndimage.sobel(ch, 0), ndimage.sobel(ch, 1))
    peak = mag.max()
    return mag * (255.0 / peak) if peak > 0 else mag


def uism(img, window: int = 10) -> float:
    """Sharpness: EME of Sobel-weighted channels, luminance-weighted (BT.601)."""
    img = _as_float(img) * 255.0
    _check_rgb(img)
    weights = (0.299, 0.587, 0.114)
    return float(sum(w * eme(_sobel_magnitude(img[..., c]) * img[..., c], window)
                     for c, w in enumerate(weights)))


def uiconm(img, window: int = 10) -> float:
    """Contrast: block-wise log Michelson-style AMEE over all three channels."""
    img = _as_float(img) * 255.0
    _check_rgb(img)
    blocks = _blocks(img, window)
    mx, mn = blocks.max(axis=-1), blocks.min(axis=-1)
    top, bot = mx - mn, mx + mn
    ok = (top > 0) & (bot > 0)
    ratio = np.where(ok, top / np.where(ok, bot, 1.0), 1.0)
    k = blocks.shape[0] * blocks.shape[1]
    return float(-1.0 / k * np.sum(ratio * np.log(ratio)))


def uiqm(img, window: int = 10) -> float:
    c1, c2, c3 = UIQM_COEFFS
    return c1 * uicm(img) + c2 * uism(img, window) + c3 * uiconm(img, window)


# --- UCIQE ----------------------------------------------------------------

def uciqe_terms(img) -> tuple[float, float, float]:
    """(chroma std, luminance contrast, mean saturation) in CIELab.

    L and chroma are scaled by 1/100. Luminance contrast is the gap between the
    mean of the brightest and darkest 1% of pixels. Saturation is C/sqrt(C^2+L^2),
    which stays in [0, 1] and is defined (as 0) for black pixels.
    """
    img = _as_float(img)
    _check_rgb(img)
    lab = color.rgb2lab(np.clip(img, 0.0, 1.0))
    lum = lab[..., 0].ravel() / 100.0
    chroma = np.hypot(lab[..., 1], lab[..., 2]).ravel() / 100.0
    sigma_c = float(np.std(chroma))
    n = max(1, int(round(0.01 * lum.size)))
    s = np.sort(lum)
    con_l = float(np.mean(s[-n:]) - np.mean(s[:n]))
    denom = np.hypot(chroma, lum)
    sat = np.divide(chroma, denom, out=np.zeros_like(chroma), where=denom > 0)
    return sigma_c, con_l, float(np.mean(sat))


def uciqe(img) -> float:
    c1, c2, c3 = UCIQE_COEFFS
    sigma_c, con_l, mu_s = uciqe_terms(img)
    return c1 * sigma_c + c2 * con_l + c3 * mu_s


# --- reports and labels ---------------------------------------------------

@dataclass(frozen=True)
class QualityReport:
    psnr: float | None
    ssim: float | None
    uiqm: float
    uciqe: float

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "uiqm": self.uiqm, "uciqe": self.uciqe}


def quality_report(pred, ref=None) -> QualityReport:
    fr = (psnr(pred, ref), ssim(pred, ref)) if ref is not None else (None, None)
    return QualityReport(*fr, uiqm=uiqm(pred), uciqe=uciqe(pred))


@dataclass(frozen=True)
class LabelRange:
    psnr_min: float
    psnr_max: float

    def __post_init__(self):
        if not self.psnr_min < self.psnr_max:
            raise ValueError(f"psnr_min ({self.psnr_min}) must be < psnr_max ({self.psnr_max})")

    @classmethod
    def fit(cls, psnrs: Iterable[float]) -> "LabelRange":
        """Empirical min/max over a training corpus."""
        vals = np.asarray(list(psnrs), dtype=np.float64)
        if vals.size == 0:
            raise ValueError("cannot fit a label range on an empty corpus")
        return cls(float(vals.min()), float(vals.max()))

    def score(self, value: float) -> float:
        d = 1.0 - (value - self.psnr_min) / (self.psnr_max - self.psnr_min)
        return float(np.clip(d, 0.0, 1.0))

    def as_dict(self) -> dict:
        return {"psnr_min": self.psnr_min, "psnr_max": self.psnr_max}


def pair_psnr(pair) -> float:
    return psnr(pair.raw, pair.reference)


def degradation_label(pair, label_range: LabelRange) -> float:
    """Degradation score in [0, 1]: 1 at psnr_min, 0 at psnr_max, clamped outside."""
    return label_range.score(pair_psnr(pair))
