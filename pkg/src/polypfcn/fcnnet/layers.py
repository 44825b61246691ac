"""Layer primitives on ``(N, C, H, W)`` numpy arrays.

Every layer caches what it needs in ``forward`` and consumes it in
``backward``. Parameter gradients are written to ``layer.grads`` under the
same keys as ``layer.params``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NumericalError(FloatingPointError):
    """Non-finite values appeared in activations, gradients or the loss."""


class Layer:
    params: dict[str, np.ndarray]

    def __init__(self, name: str):
        self.name = name
        self.params = {}
        self.grads = {}
        self._cache = None

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}


class Conv2d(Layer):
    """Stride-1 convolution with 'same' zero padding and odd square kernels."""

    def __init__(self, name, in_channels, out_channels, kernel_size=3, dtype=np.float32):
        super().__init__(name)
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.k = kernel_size
        self.params["weight"] = np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype)
        self.params["bias"] = np.zeros(out_channels, dtype)

    def forward(self, x):
        w, b = self.params["weight"], self.params["bias"]
        n, c, h, wd = x.shape
        f, k = w.shape[0], self.k
        if k == 1:
            cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
        else:
            p = k // 2
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
            # (N, C, H, W, k, k) -> (N, H, W, C, k, k)
            win = sliding_window_view(xp, (k, k), axis=(2, 3))
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * k * k)
        out = cols @ w.reshape(f, -1).T
        out += b
        self._cache = (cols, x.shape)
        return out.reshape(n, h, wd, f).transpose(0, 3, 1, 2)

    def backward(self, grad):
        cols, (n, c, h, wd) = self._require_cache()
        w = self.params["weight"]
        f, k = w.shape[0], self.k
        g = grad.transpose(0, 2, 3, 1).reshape(-1, f)
        self.grads["weight"] = (g.T @ cols).reshape(w.shape)
        self.grads["bias"] = g.sum(axis=0)
        dcols = g @ w.reshape(f, -1)
        if k == 1:
            return dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        p = k // 2
        dcols = dcols.reshape(n, h, wd, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + wd]


class ReLU(Layer):
    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        mask = self._require_cache()
        return np.where(mask, grad, 0).astype(grad.dtype, copy=False)


class MaxPool2x2(Layer):
    """2x2, stride 2. Backward routes to the first maximum in raster order."""

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"{self.name}: spatial dims {h}x{w} must be even")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        self._cache = (idx, x.shape)
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        idx, (n, c, h, w) = self._require_cache()
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=grad.dtype)
        np.put_along_axis(dwin, idx[..., None], grad[..., None], axis=-1)
        return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def bilinear_kernel(stride: int) -> np.ndarray:
    """``2s x 2s`` bilinear interpolation kernel for upsampling by ``s``."""
    size = 2 * stride
    center = stride - 0.5
    og = np.arange(size, dtype=np.float64)
    filt = 1.0 - np.abs(og - center) / stride
    return np.outer(filt, filt)


class ConvTranspose2d(Layer):
    """Transposed convolution with stride ``s``, kernel ``2s`` and ``s/2``
    cropped from each side, so an ``h x w`` input becomes ``hs x ws``.

    No bias. Initialised by the network builder to per-class bilinear kernels.
    """

    def __init__(self, name, in_channels, out_channels, stride, dtype=np.float32):
        super().__init__(name)
        if stride < 2 or stride % 2:
            raise ValueError("stride must be an even integer >= 2")
        self.stride = stride
        self.params["weight"] = np.zeros((in_channels, out_channels, 2 * stride, 2 * stride), dtype)

    def forward(self, x):
        w = self.params["weight"]
        n, c, h, wd = x.shape
        s = self.stride
        o = w.shape[1]
        cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
        # (N, h, w, O, 2, s, 2, s): kernel split into 2x2 quadrants of s x s
        contrib = (cols @ w.reshape(c, -1)).reshape(n, h, wd, o, 2, s, 2, s)
        full = np.zeros((n, o, h + 1, s, wd + 1, s), dtype=contrib.dtype)
        for a in range(2):
            for b in range(2):
                full[:, :, a:a + h, :, b:b + wd, :] += contrib[:, :, :, :, a, :, b, :].transpose(0, 3, 1, 4, 2, 5)
        full = full.reshape(n, o, (h + 1) * s, (wd + 1) * s)
        p = s // 2
        self._cache = (cols, x.shape)
        return full[:, :, p:p + h * s, p:p + wd * s]

    def backward(self, grad):
        cols, (n, c, h, wd) = self._require_cache()
        w = self.params["weight"]
        s = self.stride
        o = w.shape[1]
        p = s // 2
        full = np.zeros((n, o, (h + 1) * s, (wd + 1) * s), dtype=grad.dtype)
        full[:, :, p:p + h * s, p:p + wd * s] = grad
        full = full.reshape(n, o, h + 1, s, wd + 1, s)
        gq = np.empty((n, h, wd, o, 2, s, 2, s), dtype=grad.dtype)
        for a in range(2):
            for b in range(2):
                gq[:, :, :, :, a, :, b, :] = full[:, :, a:a + h, :, b:b + wd, :].transpose(0, 2, 4, 1, 3, 5)
        gq = gq.reshape(n * h * wd, -1)
        self.grads["weight"] = (cols.T @ gq).reshape(w.shape)
        dx = gq @ w.reshape(c, -1).T
        return dx.reshape(n, h, wd, c).transpose(0, 3, 1, 2)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, target, pixel_mask=None, class_weights=None):
    """Mean per-pixel softmax cross-entropy and its gradient w.r.t. ``logits``.

    ``target`` holds class indices with shape ``(N, H, W)``. ``pixel_mask``
    (same shape) excludes pixels from the loss; the mean runs over included
    pixels, each weighted by ``class_weights[target]`` when given.
    """
    n, k, h, w = logits.shape
    target = np.asarray(target).astype(np.intp)
    if target.shape != (n, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    picked = np.take_along_axis(log_p, target[:, None], axis=1)[:, 0]

    weight = np.ones((n, h, w), dtype=logits.dtype)
    if class_weights is not None:
        weight = np.asarray(class_weights, dtype=logits.dtype)[target]
    if pixel_mask is not None:
        weight = weight * np.asarray(pixel_mask, dtype=logits.dtype)
    denom = float(np.count_nonzero(pixel_mask)) if pixel_mask is not None else float(n * h * w)
    denom = max(denom, 1.0)

    loss = float(-(weight * picked).sum() / denom)
    grad = np.exp(log_p)
    np.put_along_axis(grad, target[:, None], np.take_along_axis(grad, target[:, None], axis=1) - 1.0, axis=1)
    grad *= (weight / denom)[:, None]
    return loss, grad.astype(logits.dtype, copy=False)
