"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``NADAPT_DISABLE_NUMBA`` is unset (or set to ``0``). Both paths are
always importable so tests and the benchmark can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _flag_disabled() -> bool:
    return os.environ.get("NADAPT_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and not _flag_disabled()


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Separable "valid" filtering + SSIM map mean


@njit(cache=True)
def _filter_valid_nb(img, w):
    h, wd = img.shape
    k = w.shape[0]
    oh = h - k + 1
    ow = wd - k + 1
    tmp = np.empty((h, ow))
    for i in range(h):
        for j in range(ow):
            acc = 0.0
            for q in range(k):
                acc += w[q] * img[i, j + q]
            tmp[i, j] = acc
    out = np.empty((oh, ow))
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for q in range(k):
                acc += w[q] * tmp[i + q, j]
            out[i, j] = acc
    return out


@njit(cache=True)
def _ssim_mean_nb(x, y, w, c1, c2):
    mu_x = _filter_valid_nb(x, w)
    mu_y = _filter_valid_nb(y, w)
    exx = _filter_valid_nb(x * x, w)
    eyy = _filter_valid_nb(y * y, w)
    exy = _filter_valid_nb(x * y, w)
    oh, ow = mu_x.shape
    total = 0.0
    for i in range(oh):
        for j in range(ow):
            mx = mu_x[i, j]
            my = mu_y[i, j]
            vx = exx[i, j] - mx * mx
            vy = eyy[i, j] - my * my
            cxy = exy[i, j] - mx * my
            num = (2.0 * mx * my + c1) * (2.0 * cxy + c2)
            den = (mx * mx + my * my + c1) * (vx + vy + c2)
            total += num / den
    return total / (oh * ow)


def _filter_valid_np(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[0]
    rows = sliding_window_view(img, k, axis=1) @ w
    return sliding_window_view(rows, k, axis=0) @ w


def _ssim_mean_np(x, y, w, c1, c2) -> float:
    mu_x = _filter_valid_np(x, w)
    mu_y = _filter_valid_np(y, w)
    vx = _filter_valid_np(x * x, w) - mu_x * mu_x
    vy = _filter_valid_np(y * y, w) - mu_y * mu_y
    cxy = _filter_valid_np(x * y, w) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# 2-D convolution with reflect padding (motion blur)


@njit(cache=True)
def _reflect(i, n):
    # numpy "reflect" (edge sample not repeated); valid while pad < n
    if i < 0:
        return -i
    if i >= n:
        return 2 * n - 2 - i
    return i


@njit(cache=True)
def _convolve_reflect_nb(img, kernel):
    h, w = img.shape
    kh, kw = kernel.shape
    ph = kh // 2
    pw = kw // 2
    padded = np.empty((h + 2 * ph, w + 2 * pw), dtype=img.dtype)
    for i in range(h + 2 * ph):
        ii = _reflect(i - ph, h)
        for j in range(w + 2 * pw):
            padded[i, j] = img[ii, _reflect(j - pw, w)]
    # motion kernels are sparse, so accumulate tap by tap over the nonzero ones
    out = np.zeros((h, w), dtype=img.dtype)
    for a in range(kh):
        for b in range(kw):
            kv = kernel[a, b]
            if kv == 0.0:
                continue
            for i in range(h):
                for j in range(w):
                    out[i, j] += kv * padded[i + a, j + b]
    return out


def _convolve_reflect_np(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    padded = np.pad(img, ((kh // 2, kh // 2), (kw // 2, kw // 2)), mode="reflect")
    windows = sliding_window_view(padded, (kh, kw))
    return np.einsum("ijab,ab->ij", windows, kernel).astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# Rain streak rasterisation


@njit(cache=True)
def _draw_streaks_nb(h, w, x0, y0, x1, y1, opacity):
    layer = np.zeros((h, w))
    stamp = np.full((h, w), -1, dtype=np.int64)
    for s in range(x0.shape[0]):
        length = np.hypot(x1[s] - x0[s], y1[s] - y0[s])
        n = int(np.ceil(2.0 * length)) + 1
        for q in range(n):
            f = q / (n - 1) if n > 1 else 0.0
            px = int(np.floor(x0[s] + f * (x1[s] - x0[s]) + 0.5))
            py = int(np.floor(y0[s] + f * (y1[s] - y0[s]) + 0.5))
            if 0 <= px < w and 0 <= py < h and stamp[py, px] != s:
                stamp[py, px] = s
                layer[py, px] += opacity[s]
    return layer


def _draw_streaks_np(h, w, x0, y0, x1, y1, opacity) -> np.ndarray:
    layer = np.zeros((h, w))
    for s in range(x0.shape[0]):
        length = np.hypot(x1[s] - x0[s], y1[s] - y0[s])
        n = int(np.ceil(2.0 * length)) + 1
        f = np.arange(n) / (n - 1) if n > 1 else np.zeros(1)
        px = np.floor(x0[s] + f * (x1[s] - x0[s]) + 0.5).astype(np.int64)
        py = np.floor(y0[s] + f * (y1[s] - y0[s]) + 0.5).astype(np.int64)
        keep = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        flat = np.unique(py[keep] * w + px[keep])
        layer.flat[flat] += opacity[s]
    return layer


# ---------------------------------------------------------------------------
# dispatch


def ssim_mean(x: np.ndarray, y: np.ndarray, window: np.ndarray, c1: float, c2: float) -> float:
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    if USE_NUMBA:
        return float(_ssim_mean_nb(x, y, window, c1, c2))
    return _ssim_mean_np(x, y, window, c1, c2)


def convolve_reflect(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    img = np.ascontiguousarray(img)
    kernel = np.ascontiguousarray(kernel, dtype=img.dtype)
    if USE_NUMBA:
        return _convolve_reflect_nb(img, kernel)
    return _convolve_reflect_np(img, kernel)


def draw_streaks(h: int, w: int, x0, y0, x1, y1, opacity) -> np.ndarray:
    args = [np.ascontiguousarray(a, dtype=np.float64) for a in (x0, y0, x1, y1, opacity)]
    if USE_NUMBA:
        return _draw_streaks_nb(h, w, *args)
    return _draw_streaks_np(h, w, *args)
