"""Miniature FCN-32S / FCN-16S / FCN-8S.

Backbone: five stages of ``3x3 conv -> ReLU -> 2x2 max-pool`` followed by a
3x3 "conv7" layer at stride 32. Score maps are 1x1 convolutions. The
variants differ only in which pooled features are fused into the upsampling
path:

* FCN32: score(conv7) -> x32 up
* FCN16: x2 up(score(conv7)) + score(pool4) -> x16 up
* FCN8:  x2 up(x2 up(score(conv7)) + score(pool4)) + score(pool3) -> x8 up
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..imagecore import Image, ProbMap
from .layers import (
    ConvTranspose2d,
    Conv2d,
    Layer,
    MaxPool2x2,
    NumericalError,
    ReLU,
    bilinear_kernel,
    softmax,
)

VARIANTS = ("FCN32", "FCN16", "FCN8")
STRIDE = 32


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "FCN8"
    stage_widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    num_classes: int = 2
    input_channels: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        widths = tuple(int(w) for w in self.stage_widths)
        if len(widths) != 5 or min(widths) < 1:
            raise ValueError("stage_widths must be five positive channel counts")
        if self.num_classes < 2 or self.input_channels < 1:
            raise ValueError("need num_classes >= 2 and input_channels >= 1")
        object.__setattr__(self, "stage_widths", widths)


class SkipSum(Layer):
    """Elementwise sum of the upsampled deep score and a shallow score map."""

    def forward(self, a, b):
        if a.shape != b.shape:
            raise ValueError(f"{self.name}: shapes {a.shape} and {b.shape} differ")
        self._cache = True
        return a + b

    def backward(self, grad):
        self._require_cache()
        return grad, grad


class Network:
    def __init__(self, spec: NetworkSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers: dict[str, Layer] = {}
        self.velocity: dict[str, np.ndarray] = {}

        w = spec.stage_widths
        k = spec.num_classes
        in_ch = spec.input_channels
        for i, width in enumerate(w, start=1):
            self._add(Conv2d(f"conv{i}", in_ch, width, 3, dtype))
            self._add(ReLU(f"relu{i}"))
            self._add(MaxPool2x2(f"pool{i}"))
            in_ch = width
        self._add(Conv2d("conv7", w[4], w[4], 3, dtype))
        self._add(ReLU("relu7"))
        self._add(Conv2d("score_fr", w[4], k, 1, dtype))

        if spec.variant == "FCN32":
            self._add(ConvTranspose2d("upscore32", k, k, 32, dtype))
        elif spec.variant == "FCN16":
            self._add(ConvTranspose2d("upscore2", k, k, 2, dtype))
            self._add(Conv2d("score_pool4", w[3], k, 1, dtype))
            self._add(SkipSum("fuse_pool4"))
            self._add(ConvTranspose2d("upscore16", k, k, 16, dtype))
        else:
            self._add(ConvTranspose2d("upscore2", k, k, 2, dtype))
            self._add(Conv2d("score_pool4", w[3], k, 1, dtype))
            self._add(SkipSum("fuse_pool4"))
            self._add(ConvTranspose2d("upscore_pool4", k, k, 2, dtype))
            self._add(Conv2d("score_pool3", w[2], k, 1, dtype))
            self._add(SkipSum("fuse_pool3"))
            self._add(ConvTranspose2d("upscore8", k, k, 8, dtype))

    def _add(self, layer: Layer):
        self.layers[layer.name] = layer

    # -- parameters --------------------------------------------------------

    def named_parameters(self):
        for lname, layer in self.layers.items():
            for key, value in layer.params.items():
                yield f"{lname}.{key}", value

    def parameter(self, name: str) -> np.ndarray:
        lname, key = name.rsplit(".", 1)
        return self.layers[lname].params[key]

    def skip_junctions(self) -> list[str]:
        return [n for n, l in self.layers.items() if isinstance(l, SkipSum)]

    def score_layers(self) -> list[str]:
        return [n for n in self.layers if n.startswith("score_")]

    def upsampling_layers(self) -> list[str]:
        return [n for n, l in self.layers.items() if isinstance(l, ConvTranspose2d)]

    # -- forward / backward -----------------------------------------------

    def _check(self, name, value):
        if not np.all(np.isfinite(value)):
            raise NumericalError(f"non-finite values after {name}")
        return value

    def forward(self, batch: np.ndarray) -> np.ndarray:
        """Logits of shape ``(N, num_classes, H, W)``."""
        x = np.asarray(batch, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.spec.input_channels:
            raise ValueError(
                f"expected (N, {self.spec.input_channels}, H, W) input, got {x.shape}"
            )
        h, w = x.shape[2:]
        if h % STRIDE or w % STRIDE or h == 0 or w == 0:
            raise ValueError(f"input spatial dims {h}x{w} must be positive multiples of {STRIDE}")
        self._check("input", x)

        L = self.layers
        pooled = {}
        for i in range(1, 6):
            x = self._check(f"conv{i}", L[f"conv{i}"].forward(x))
            x = L[f"relu{i}"].forward(x)
            x = L[f"pool{i}"].forward(x)
            pooled[i] = x
        x = L["relu7"].forward(L["conv7"].forward(x))
        score = self._check("score_fr", L["score_fr"].forward(x))

        variant = self.spec.variant
        if variant == "FCN32":
            out = L["upscore32"].forward(score)
        else:
            up = L["upscore2"].forward(score)
            fused = L["fuse_pool4"].forward(up, L["score_pool4"].forward(pooled[4]))
            if variant == "FCN16":
                out = L["upscore16"].forward(fused)
            else:
                up = L["upscore_pool4"].forward(fused)
                fused = L["fuse_pool3"].forward(up, L["score_pool3"].forward(pooled[3]))
                out = L["upscore8"].forward(fused)
        return self._check("output", out)

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients keyed like :meth:`named_parameters`."""
        L = self.layers
        g = np.asarray(grad_logits, dtype=self.dtype)
        variant = self.spec.variant
        g_pool = {3: None, 4: None}
        if variant == "FCN32":
            g_score = L["upscore32"].backward(g)
        else:
            if variant == "FCN8":
                g = L["upscore8"].backward(g)
                g, g_skip = L["fuse_pool3"].backward(g)
                g_pool[3] = L["score_pool3"].backward(g_skip)
                g = L["upscore_pool4"].backward(g)
            else:
                g = L["upscore16"].backward(g)
            g, g_skip = L["fuse_pool4"].backward(g)
            g_pool[4] = L["score_pool4"].backward(g_skip)
            g_score = L["upscore2"].backward(g)

        g = L["score_fr"].backward(g_score)
        g = L["conv7"].backward(L["relu7"].backward(g))
        for i in range(5, 0, -1):
            if g_pool.get(i) is not None:
                g = g + g_pool[i]
            g = L[f"pool{i}"].backward(g)
            g = L[f"relu{i}"].backward(g)
            g = L[f"conv{i}"].backward(g)

        grads = {}
        for lname, layer in L.items():
            for key in layer.params:
                grads[f"{lname}.{key}"] = self._check(f"{lname}.{key} gradient", layer.grads[key])
        return grads


def build_network(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> Network:
    """Fresh network: He-normal conv weights, zero biases, bilinear upsamplers."""
    net = Network(spec, dtype)
    for layer in net.layers.values():
        if isinstance(layer, Conv2d):
            weight = layer.params["weight"]
            fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
            weight[...] = rng.standard_normal(weight.shape) * np.sqrt(2.0 / fan_in)
            layer.params["bias"][...] = 0.0
        elif isinstance(layer, ConvTranspose2d):
            weight = layer.params["weight"]
            weight[...] = 0.0
            kernel = bilinear_kernel(layer.stride)
            for c in range(min(weight.shape[0], weight.shape[1])):
                weight[c, c] = kernel
    return net


def pad_to_stride(array: np.ndarray, stride: int = STRIDE) -> np.ndarray:
    """Edge-replicate ``(..., H, W)`` at the bottom/right to multiples of ``stride``."""
    h, w = array.shape[-2:]
    ph = -h % stride
    pw = -w % stride
    if ph == 0 and pw == 0:
        return array
    pad = [(0, 0)] * (array.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(array, pad, mode="edge")


def image_to_batch(image: Image) -> np.ndarray:
    return image.data.transpose(2, 0, 1)[None]


def predict_logits(network: Network, images: np.ndarray) -> np.ndarray:
    """Forward ``(N, C, H, W)`` images of any size; logits cropped to ``H x W``."""
    h, w = images.shape[-2:]
    return network.forward(pad_to_stride(images))[:, :, :h, :w]


def predict_probmap(network: Network, image: Image) -> ProbMap:
    logits = predict_logits(network, image_to_batch(image))
    probs = softmax(logits.astype(np.float64), axis=1)[0, 1]
    return ProbMap(np.clip(probs, 0.0, 1.0))
