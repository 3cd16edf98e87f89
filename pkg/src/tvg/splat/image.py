"""Image losses (L1 + windowed SSIM) with gradients, and image file I/O.

SSIM is evaluated on valid 11x11 windows only (no padding), so constant
image pairs reduce to the closed form ``(2ab + C1) / (a^2 + b^2 + C1)``.
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from .gaussians import atomic_write_bytes

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gaussian_window(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


_G = gaussian_window()


def _filter_valid(img):
    """Separable valid correlation over the first two axes."""
    a = sliding_window_view(img, WINDOW, axis=0) @ _G
    return sliding_window_view(a, WINDOW, axis=1) @ _G


def _filter_adjoint(grad):
    """Adjoint of :func:`_filter_valid` (full convolution)."""
    pad = WINDOW - 1
    g = np.pad(grad, ((pad, pad), (pad, pad), (0, 0)))
    # the kernel is symmetric, so correlation and convolution coincide
    return _filter_valid(g)


def _as_hwc(img):
    img = np.asarray(img, dtype=float)
    return img[..., None] if img.ndim == 2 else img


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW} for SSIM")


def _ssim_terms(x, y):
    mx, my = _filter_valid(x), _filter_valid(y)
    exx, eyy, exy = _filter_valid(x * x), _filter_valid(y * y), _filter_valid(x * y)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    n1, n2 = 2 * mx * my + C1, 2 * cxy + C2
    d1, d2 = mx * mx + my * my + C1, vx + vy + C2
    return mx, my, n1, n2, d1, d2


def ssim(img1, img2):
    """Mean SSIM over valid windows and channels."""
    x, y = _as_hwc(img1), _as_hwc(img2)
    _check_pair(x, y)
    _, _, n1, n2, d1, d2 = _ssim_terms(x, y)
    return float(np.mean(n1 * n2 / (d1 * d2)))


def ssim_with_grad(target, rendered):
    """SSIM(target, rendered) and its gradient with respect to ``rendered``."""
    x, y = _as_hwc(target), _as_hwc(rendered)
    _check_pair(x, y)
    mx, my, n1, n2, d1, d2 = _ssim_terms(x, y)
    den = d1 * d2
    s = n1 * n2 / den
    m = s.size
    d_my = (2 * mx * n2 - 2 * mx * n1) / den - s * (2 * my) / d1 + s * (2 * my) / d2
    d_eyy = -s / d2
    d_exy = 2 * n1 / den
    grad = (_filter_adjoint(d_my) + 2 * y * _filter_adjoint(d_eyy) + x * _filter_adjoint(d_exy)) / m
    return float(s.mean()), grad.reshape(np.shape(rendered))


def image_loss(target, rendered, gamma):
    """``(1 - gamma) * L1 + gamma * (1 - SSIM)``."""
    target, rendered = np.asarray(target, float), np.asarray(rendered, float)
    if target.shape != rendered.shape:
        raise ValueError(f"image dimensions differ: {target.shape} vs {rendered.shape}")
    l1 = float(np.mean(np.abs(rendered - target)))
    if gamma == 0:
        return l1
    return (1 - gamma) * l1 + gamma * (1 - ssim(target, rendered))


def image_loss_with_grad(target, rendered, gamma):
    target, rendered = np.asarray(target, float), np.asarray(rendered, float)
    if target.shape != rendered.shape:
        raise ValueError(f"image dimensions differ: {target.shape} vs {rendered.shape}")
    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1 - gamma) * np.sign(diff) / diff.size
    if gamma == 0:
        return l1, grad
    s, gs = ssim_with_grad(target, rendered)
    return (1 - gamma) * l1 + gamma * (1 - s), grad - gamma * gs


def psnr(img1, img2, cap=99.0):
    a, b = np.asarray(img1, float), np.asarray(img2, float)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

TVGF_MAGIC = b"TVGF"


def save_png(img, path):
    img = np.clip(np.asarray(img, float), 0, 1)
    arr = np.round(img * 255).astype(np.uint8)
    import io
    buf = io.BytesIO()
    Image.fromarray(arr.squeeze() if arr.shape[-1] == 1 else arr).save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def load_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return arr


def save_float_image(img, path):
    """Lossless dump: 16-byte header (magic, u32 height, width, channels) + f64 LE."""
    img = _as_hwc(img)
    h, w, c = img.shape
    header = TVGF_MAGIC + struct.pack("<III", h, w, c)
    atomic_write_bytes(path, header + img.astype("<f8").tobytes())


def load_float_image(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != TVGF_MAGIC:
        raise ValueError(f"{path}: not a TVGF float image")
    h, w, c = struct.unpack("<III", data[4:16])
    body = np.frombuffer(data[16:], dtype="<f8")
    if body.size != h * w * c:
        raise ValueError(f"{path}: payload size {body.size} does not match {h}x{w}x{c}")
    return body.reshape(h, w, c).astype(float)
