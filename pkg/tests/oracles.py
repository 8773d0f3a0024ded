"""Independent reference implementations used as test oracles.

These are deliberately written differently from the package code (explicit
loops, hand-rolled colour conversion, third-party SSIM) so that agreement is
evidence rather than tautology.
"""
import math

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity


def ref_psnr(a, b):
    return peak_signal_noise_ratio(np.asarray(b, np.float64), np.asarray(a, np.float64), data_range=1.0)


def ref_ssim(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False,
                                 channel_axis=-1 if a.ndim == 3 else None)


# --- UIQM, loop transcription ---------------------------------------------

def _trimmed_mean(values, alpha=0.1):
    x = sorted(values)
    k = len(x)
    lo = math.ceil(alpha * k)
    hi = math.floor(alpha * k)
    kept = x[lo:k - hi]
    return sum(kept) / len(kept)


def _uicm(img):
    h, w, _ = img.shape
    rg, yb = [], []
    for i in range(h):
        for j in range(w):
            r, g, b = img[i, j]
            rg.append(r - g)
            yb.append((r + g) / 2 - b)
    mu_rg, mu_yb = _trimmed_mean(rg), _trimmed_mean(yb)
    s_rg = sum((v - mu_rg) ** 2 for v in rg) / len(rg)
    s_yb = sum((v - mu_yb) ** 2 for v in yb) / len(yb)
    return -0.0268 * math.sqrt(mu_rg ** 2 + mu_yb ** 2) + 0.1586 * math.sqrt(s_rg + s_yb)


def _sobel(ch):
    # explicit 3x3 Sobel with reflect ('symmetric') borders
    p = np.pad(ch, 1, mode="symmetric")
    h, w = ch.shape
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], float)  # derivative along columns
    ky = kx.T  # derivative along rows
    gx = np.zeros_like(ch)
    gy = np.zeros_like(ch)
    for i in range(h):
        for j in range(w):
            win = p[i:i + 3, j:j + 3]
            gx[i, j] = (win * kx).sum()
            gy[i, j] = (win * ky).sum()
    mag = np.sqrt(gx ** 2 + gy ** 2)
    return mag * 255.0 / mag.max() if mag.max() > 0 else mag


def _eme(x, ws):
    k1, k2 = x.shape[1] // ws, x.shape[0] // ws
    total = 0.0
    for l in range(k1):
        for k in range(k2):
            block = x[k * ws:(k + 1) * ws, l * ws:(l + 1) * ws]
            mx, mn = block.max(), block.min()
            if mn > 0 and mx > 0:
                total += math.log(mx / mn)
    return 2.0 / (k1 * k2) * total


def _uiconm(x, ws):
    k1, k2 = x.shape[1] // ws, x.shape[0] // ws
    total = 0.0
    for l in range(k1):
        for k in range(k2):
            block = x[k * ws:(k + 1) * ws, l * ws:(l + 1) * ws, :]
            mx, mn = block.max(), block.min()
            top, bot = mx - mn, mx + mn
            if top > 0 and bot > 0:
                total += (top / bot) * math.log(top / bot)
    return -1.0 / (k1 * k2) * total


def ref_uiqm(img, ws=10):
    x = np.asarray(img, np.float64) * 255.0
    uicm = _uicm(x)
    uism = sum(lam * _eme(_sobel(x[..., c]) * x[..., c], ws)
               for c, lam in enumerate((0.299, 0.587, 0.114)))
    return 0.0282 * uicm + 0.2953 * uism + 3.5753 * _uiconm(x, ws)


# --- UCIQE with hand-written sRGB -> CIELab --------------------------------

def _srgb_to_lab(rgb):
    rgb = np.asarray(rgb, np.float64)
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    m = np.array([[0.412453, 0.357580, 0.180423],
                  [0.212671, 0.715160, 0.072169],
                  [0.019334, 0.119193, 0.950227]])
    xyz = lin @ m.T
    white = np.array([0.95047, 1.0, 1.08883])
    t = xyz / white
    f = np.where(t > 0.008856, np.cbrt(t), 7.787 * t + 16.0 / 116.0)
    L = np.where(t[..., 1] > 0.008856, 116.0 * np.cbrt(t[..., 1]) - 16.0, 903.3 * t[..., 1])
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return L, a, b


def ref_uciqe(img):
    L, a, b = _srgb_to_lab(img)
    lum = L.ravel() / 100.0
    chroma = np.sqrt(a ** 2 + b ** 2).ravel() / 100.0
    mu_c = chroma.mean()
    sigma_c = math.sqrt(((chroma - mu_c) ** 2).mean())
    n = max(1, int(round(0.01 * lum.size)))
    s = sorted(lum)
    con_l = sum(s[-n:]) / n - sum(s[:n]) / n
    sats = []
    for c, l in zip(chroma, lum):
        d = math.sqrt(c * c + l * l)
        sats.append(c / d if d > 0 else 0.0)
    return 0.4680 * sigma_c + 0.2745 * con_l + 0.2576 * (sum(sats) / len(sats))


# --- finite differences -----------------------------------------------------

def central_difference(f, x, idx, h=1e-6):
    """d f / d x[idx] for a scalar-valued f of a float64 tensor x."""
    import torch
    with torch.no_grad():
        xp, xm = x.clone(), x.clone()
        xp.view(-1)[idx] += h
        xm.view(-1)[idx] -= h
        return (float(f(xp)) - float(f(xm))) / (2 * h)


def max_rel_error(analytic, numeric, floor=1e-8):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))
