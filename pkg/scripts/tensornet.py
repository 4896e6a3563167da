#!/usr/bin/env python3
"""
Minimal Reverse-Mode Tensor Engine.

This module implements:
- Parameter: value / gradient / momentum triple
- A fixed layer catalog with hand-written backward passes:
  Conv2d, ReLU, UpsampleNearest2, Add, Linear, SoftmaxCrossEntropy,
  SmoothL1, PSRoIPool
- sgd_step(): momentum SGD with L2 weight decay
- grad_check(): central finite-difference verification
- DTF1 checkpoints: JSON manifest + little-endian float64 blob

Every layer caches what it needs during forward() and consumes the cache
in backward(); each layer instance is called once per pass. Parameter
gradients accumulate, so call zero_grad() between iterations.

Tensors are plain float64 numpy arrays, feature maps in N x C x H x W.
"""

import json
import logging
import math
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax

from scripts.errors import EmptyBatch, FormatError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64
CHECKPOINT_TAG = "DTF1"
KINK_TOL = 1e-5

Tensor = np.ndarray


class Parameter:
    """
    Trainable tensor.

    Attributes:
        name (str): unique dotted name, e.g. "head.P2.cls.weight"
        value (np.ndarray): current values
        grad (np.ndarray): accumulated gradient, same shape
        momentum (np.ndarray): SGD momentum buffer, same shape
    """

    __slots__ = ("name", "value", "grad", "momentum")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.shape})"


def gaussian_init(rng: np.random.Generator, shape: Sequence[int], std: float = 0.01) -> np.ndarray:
    return rng.normal(0.0, std, size=tuple(shape)).astype(DTYPE)


def he_init(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(shape)).astype(DTYPE)


def _pair(v: Union[int, Sequence[int]]) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Layer:
    """Base class: forward() caches, backward() consumes the cache."""

    kind = "layer"

    def parameters(self) -> List[Parameter]:
        return []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ==================== Convolution ====================


class Conv2d(Layer):
    """
    2-D cross-correlation with zero padding.

    Attributes:
        weight (Parameter): (out_ch, in_ch, kh, kw)
        bias (Parameter): (out_ch,)
        stride (int): step in both directions
        padding (Tuple[int, int]): zero padding (rows, cols)
    """

    kind = "conv2d"

    def __init__(
        self,
        name: str,
        in_ch: int,
        out_ch: int,
        kernel: Union[int, Sequence[int]],
        stride: int = 1,
        padding: Union[int, Sequence[int]] = 0,
        rng: Optional[np.random.Generator] = None,
        init: str = "gaussian",
        std: float = 0.01,
    ):
        kh, kw = _pair(kernel)
        if stride < 1:
            raise ValueError(f"{name}: stride must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_ch, in_ch, kh, kw)
        w = he_init(rng, shape) if init == "he" else gaussian_init(rng, shape, std)
        self.name = name
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch))
        self.stride = int(stride)
        self.padding = _pair(padding)
        self._cache = None

    @property
    def kernel(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def output_shape(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        ph, pw = self.padding
        return (h + 2 * ph - kh) // self.stride + 1, (w + 2 * pw - kw) // self.stride + 1

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: expected N x {self.weight.shape[1]} x H x W input, got {x.shape}")
        kh, kw = self.kernel
        ph, pw = self.padding
        s = self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ShapeError(f"{self.name}: input {x.shape} smaller than kernel {(kh, kw)}")
        windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(windows, self.weight.value, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + self.bias.value[None, :, None, None]
        self._cache = (x.shape, xp.shape, windows)
        return np.ascontiguousarray(out)

    def backward(self, dout: Tensor) -> Tensor:
        x_shape, xp_shape, windows = self._cache
        kh, kw = self.kernel
        ph, pw = self.padding
        s = self.stride
        ho, wo = dout.shape[2], dout.shape[3]
        self.bias.grad += dout.sum(axis=(0, 2, 3))
        self.weight.grad += np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
        dxp = np.zeros(xp_shape, dtype=DTYPE)
        w = self.weight.value
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += contrib
        self._cache = None
        return dxp[:, :, ph:ph + x_shape[2], pw:pw + x_shape[3]]


class ReLU(Layer):
    kind = "relu"

    def __init__(self):
        self._mask = None

    def forward(self, x: Tensor) -> Tensor:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dout: Tensor) -> Tensor:
        # Subgradient 0 at x == 0.
        dx = np.where(self._mask, dout, 0.0)
        self._mask = None
        return dx


class UpsampleNearest2(Layer):
    """Replicate every cell into a 2x2 block."""

    kind = "upsample_nearest2"

    def forward(self, x: Tensor) -> Tensor:
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, dout: Tensor) -> Tensor:
        n, c, h2, w2 = dout.shape
        return dout.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


class Add(Layer):
    kind = "add"

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
        return a + b

    def backward(self, dout: Tensor) -> Tuple[Tensor, Tensor]:
        return dout, dout


class Linear(Layer):
    """Affine map y = x W^T + b on (K, in_features) inputs."""

    kind = "linear"

    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        std: float = 0.01,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.weight = Parameter(f"{name}.weight", gaussian_init(rng, (out_features, in_features), std))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_features))
        self._x = None

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: expected {self.weight.shape[1]} input features, got {x2.shape[1]}")
        self._x = x2
        return x2 @ self.weight.value.T + self.bias.value

    def backward(self, dout: Tensor) -> Tensor:
        self.weight.grad += dout.T @ self._x
        self.bias.grad += dout.sum(axis=0)
        self._x = None
        return dout @ self.weight.value


# ==================== Losses ====================


def softmax_ce_per_sample(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    """Unweighted cross-entropy of each row; used for hard example mining."""
    logp = log_softmax(logits, axis=1)
    return -logp[np.arange(len(labels)), labels]


def smooth_l1_per_sample(pred: Tensor, target: Tensor) -> np.ndarray:
    d = np.abs(pred - target)
    return np.where(d < 1.0, 0.5 * d * d, d - 0.5).sum(axis=1)


class SoftmaxCrossEntropy(Layer):
    """Weighted mean softmax cross-entropy over K samples."""

    kind = "softmax_ce"

    def __init__(self):
        self._cache = None

    def forward(self, logits: Tensor, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
        k = logits.shape[0]
        if k == 0:
            raise EmptyBatch("softmax cross-entropy over an empty batch")
        labels = np.asarray(labels, dtype=np.int64)
        w = np.ones(k) if weights is None else np.asarray(weights, dtype=DTYPE)
        if labels.shape != (k,) or w.shape != (k,):
            raise ShapeError(f"softmax_ce: logits {logits.shape}, labels {labels.shape}, weights {w.shape}")
        total = w.sum()
        self._cache = (logits, labels, w, total)
        if total <= 0:
            return 0.0
        return float(np.dot(w, softmax_ce_per_sample(logits, labels)) / total)

    def backward(self) -> Tensor:
        logits, labels, w, total = self._cache
        self._cache = None
        if total <= 0:
            return np.zeros_like(logits)
        g = softmax(logits, axis=1)
        g[np.arange(len(labels)), labels] -= 1.0
        return g * (w / total)[:, None]


class SmoothL1(Layer):
    """Weighted mean over K samples of the summed smooth-L1 per row."""

    kind = "smooth_l1"

    def __init__(self):
        self._cache = None

    def forward(self, pred: Tensor, target: Tensor, weights: Optional[np.ndarray] = None) -> float:
        if pred.shape != target.shape:
            raise ShapeError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
        k = pred.shape[0]
        w = np.ones(k) if weights is None else np.asarray(weights, dtype=DTYPE)
        if w.shape != (k,):
            raise ShapeError(f"smooth_l1: weights {w.shape} for {k} rows")
        total = w.sum()
        self._cache = (pred - target, w, total)
        if k == 0 or total <= 0:
            return 0.0
        return float(np.dot(w, smooth_l1_per_sample(pred, target)) / total)

    def backward(self) -> Tensor:
        diff, w, total = self._cache
        self._cache = None
        if diff.shape[0] == 0 or total <= 0:
            return np.zeros_like(diff)
        g = np.where(np.abs(diff) < 1.0, diff, np.sign(diff))
        return g * (w / total)[:, None]


def softmax_ce_loss(logits: Tensor, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> Tuple[float, Tensor]:
    """Functional form: (loss, dloss/dlogits)."""
    layer = SoftmaxCrossEntropy()
    loss = layer.forward(logits, labels, weights)
    return loss, layer.backward()


def smooth_l1_loss(pred: Tensor, target: Tensor, weights: Optional[np.ndarray] = None) -> Tuple[float, Tensor]:
    """Functional form: (loss, dloss/dpred)."""
    layer = SmoothL1()
    loss = layer.forward(pred, target, weights)
    return loss, layer.backward()


# ==================== Position-sensitive ROI pooling ====================


class PSRoIPool(Layer):
    """
    Position-sensitive average pooling into a k x k grid.

    Bin (i, j), output channel c averages input channel (i*k + j)*d + c
    over the cells the bin covers. Bin edges are floored at the start and
    ceiled at the end, clamped to the map; empty bins output 0.

    Sums use an integral image; the backward pass scatters each bin's
    gradient into a 2-D difference array and integrates it back.
    """

    kind = "ps_roi_pool"

    def __init__(self, k: int, d: int, stride: int):
        self.k = int(k)
        self.d = int(d)
        self.stride = int(stride)
        self._cache = None
        kk = np.arange(self.k)
        self._channels = ((kk[:, None, None] * self.k + kk[None, :, None]) * self.d
                          + np.arange(self.d)[None, None, :])

    def _bins(self, rois: np.ndarray, h: int, w: int):
        r = rois / float(self.stride)
        frac = np.arange(self.k + 1, dtype=DTYPE) / self.k
        xe = r[:, 0:1] + frac[None, :] * (r[:, 2:3] - r[:, 0:1])
        ye = r[:, 1:2] + frac[None, :] * (r[:, 3:4] - r[:, 1:2])
        xs0 = np.clip(np.floor(xe[:, :-1]), 0, w).astype(np.int64)
        xs1 = np.clip(np.ceil(xe[:, 1:]), 0, w).astype(np.int64)
        ys0 = np.clip(np.floor(ye[:, :-1]), 0, h).astype(np.int64)
        ys1 = np.clip(np.ceil(ye[:, 1:]), 0, h).astype(np.int64)
        xs1 = np.maximum(xs1, xs0)
        ys1 = np.maximum(ys1, ys0)
        return ys0, ys1, xs0, xs1

    def forward(self, features: Tensor, rois) -> Tensor:
        """
        Args:
            features: (1, k*k*d, H, W) thin feature map
            rois: (R, 4) image-pixel boxes (xmin, ymin, xmax, ymax) or AABBs

        Returns:
            (R, k, k, d) pooled features
        """
        if features.ndim != 4 or features.shape[0] != 1:
            raise ShapeError(f"ps_roi_pool expects a single-image map, got {features.shape}")
        _, c, h, w = features.shape
        if c != self.k * self.k * self.d:
            raise ShapeError(f"ps_roi_pool: {c} channels, expected k*k*d = {self.k * self.k * self.d}")
        boxes = _roi_array(rois)
        ys0, ys1, xs0, xs1 = self._bins(boxes, h, w)
        integral = np.zeros((c, h + 1, w + 1), dtype=DTYPE)
        integral[:, 1:, 1:] = features[0].cumsum(axis=1).cumsum(axis=2)
        ch = self._channels[None]
        y0, y1 = ys0[:, :, None, None], ys1[:, :, None, None]
        x0, x1 = xs0[:, None, :, None], xs1[:, None, :, None]
        sums = integral[ch, y1, x1] - integral[ch, y0, x1] - integral[ch, y1, x0] + integral[ch, y0, x0]
        counts = ((ys1 - ys0)[:, :, None] * (xs1 - xs0)[:, None, :])[..., None].astype(DTYPE)
        out = np.where(counts > 0, sums / np.maximum(counts, 1.0), 0.0)
        self._cache = (features.shape, ys0, ys1, xs0, xs1, counts)
        return out

    def backward(self, dout: Tensor) -> Tensor:
        shape, ys0, ys1, xs0, xs1, counts = self._cache
        self._cache = None
        _, c, h, w = shape
        g = np.where(counts > 0, dout / np.maximum(counts, 1.0), 0.0)
        r = g.shape[0]
        ch = np.broadcast_to(self._channels[None], g.shape)
        y0 = np.broadcast_to(ys0[:, :, None, None], g.shape)
        y1 = np.broadcast_to(ys1[:, :, None, None], g.shape)
        x0 = np.broadcast_to(xs0[:, None, :, None], g.shape)
        x1 = np.broadcast_to(xs1[:, None, :, None], g.shape)
        diff = np.zeros((c, h + 1, w + 1), dtype=DTYPE)
        if r:
            np.add.at(diff, (ch, y0, x0), g)
            np.add.at(diff, (ch, y0, x1), -g)
            np.add.at(diff, (ch, y1, x0), -g)
            np.add.at(diff, (ch, y1, x1), g)
        dfeat = diff.cumsum(axis=1).cumsum(axis=2)[:, :h, :w]
        return dfeat[None]


def _roi_array(rois) -> np.ndarray:
    if isinstance(rois, np.ndarray):
        return rois.astype(DTYPE).reshape(-1, 4)
    rows = [r.as_tuple() if hasattr(r, "as_tuple") else tuple(r) for r in rois]
    return np.asarray(rows, dtype=DTYPE).reshape(-1, 4)


def ps_roi_pool(features: Tensor, roi, k: int, level_stride: int) -> Tensor:
    """Pool one roi; returns (k, k, d)."""
    d = features.shape[1] // (k * k)
    return PSRoIPool(k, d, level_stride).forward(features, [roi])[0]


# ==================== Optimization ====================


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9, weight_decay: float = 0.0005):
    """
    One momentum-SGD update.

    buf <- momentum * buf + (grad + weight_decay * value)
    value <- value - lr * buf
    """
    for p in params:
        p.momentum *= momentum
        p.momentum += p.grad + weight_decay * p.value
        p.value -= lr * p.momentum


def grad_check(
    forward_fn: Callable[[], float],
    entries: Dict[str, Tuple[np.ndarray, np.ndarray]],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = False,
) -> Tuple[float, Dict[str, float]]:
    """
    Compare analytic gradients with central finite differences.

    The arrays in `entries` are perturbed in place, so forward_fn must read
    them on every call. The error per entry is
    |analytic - numeric| / max(1, |analytic|, |numeric|).

    With skip_kinks, entries whose +h and -h one-sided slopes disagree
    (a ReLU or smooth-L1 breakpoint lies inside the step) are left out.

    Args:
        forward_fn: recomputes the scalar output from the current arrays
        entries: name -> (array, analytic gradient of the same shape)
        h: finite-difference step
        max_entries: cap on checked elements per array (random subset)
        rng: generator for the subset; a fixed default keeps runs repeatable
        skip_kinks: drop entries whose step straddles a breakpoint

    Returns:
        Tuple of (max relative error, per-name max relative error)
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    f_center = forward_fn() if skip_kinks else 0.0
    skipped = 0
    per_name = {}
    for name, (arr, analytic) in entries.items():
        if arr.shape != analytic.shape:
            raise ShapeError(f"{name}: gradient shape {analytic.shape} != value shape {arr.shape}")
        if not arr.flags.c_contiguous:
            raise ValueError(f"{name}: array must be C-contiguous for in-place perturbation")
        flat = arr.reshape(-1)
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        worst = 0.0
        agrad = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = forward_fn()
            flat[i] = orig - h
            f_minus = forward_fn()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            bend = abs(f_plus - 2.0 * f_center + f_minus) / (2.0 * h)
            if skip_kinks and bend > KINK_TOL * max(1.0, abs(numeric)):
                skipped += 1
                continue
            a = agrad[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
        per_name[name] = worst
    if skipped:
        logger.debug(f"grad_check: skipped {skipped} entries straddling a breakpoint")
    return (max(per_name.values()) if per_name else 0.0), per_name


# ==================== Checkpoints ====================


def save_checkpoint(
    path: Union[str, Path],
    params: Sequence[Parameter],
    meta: Optional[Dict] = None,
    include_momentum: bool = True,
) -> Path:
    """
    Write a DTF1 checkpoint.

    The manifest (JSON, at `path`) lists every tensor's name, shape, dtype
    and offset; values are concatenated little-endian float64 in manifest
    order in `path` + ".bin".

    Returns:
        Path of the manifest
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path = path.with_name(path.name + ".bin")
    tensors = []
    for p in params:
        tensors.append((p.name, p.value))
        if include_momentum:
            tensors.append((f"{p.name}#momentum", p.momentum))
    entries = []
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in tensors:
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(data)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset})
            offset += len(data)
    manifest = {"format": CHECKPOINT_TAG, "blob": blob_path.name, "size": offset, "tensors": entries, "meta": meta or {}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    logger.info(f"✓ Saved checkpoint {path} ({len(entries)} tensors, {offset} bytes)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Read a DTF1 checkpoint.

    Returns:
        Tuple of (name -> array, meta dict)

    Raises:
        FormatError: missing files, wrong tag or truncated blob
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"Cannot read checkpoint manifest {path}: {e}") from e
    if manifest.get("format") != CHECKPOINT_TAG:
        raise FormatError(f"{path}: not a {CHECKPOINT_TAG} checkpoint (format={manifest.get('format')!r})")
    blob_path = path.with_name(manifest["blob"])
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read checkpoint blob {blob_path}: {e}") from e
    if len(blob) != manifest["size"]:
        raise FormatError(f"{blob_path}: expected {manifest['size']} bytes, found {len(blob)}")
    arrays = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(DTYPE)
    return arrays, manifest.get("meta", {})
