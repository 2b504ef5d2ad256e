"""Linear softmax baseline and the small 3-conv network, in plain numpy.

All tensors are NHWC. Convolutions are 3x3, stride 1, zero padding 1, done
as im2col + matmul; each is followed by a leaky ReLU and 2x2 pooling
(max by default, average for the pooling probe). The classifier head is a
single affine layer.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ARCHITECTURES = ("linear", "bcnn")
BCNN_FILTERS = (24, 48, 72)
LEAKY_SLOPE = 0.01
KERNEL = 3

CHECKPOINT_MAGIC = b"PXWCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class ClassifierModel:
    architecture: str
    input_shape: tuple[int, int, int]
    num_classes: int
    params: dict[str, np.ndarray]
    seed: int = 0
    pooling: str = "max"
    norm_mean: np.ndarray = field(default_factory=lambda: np.zeros(3))
    norm_std: np.ndarray = field(default_factory=lambda: np.ones(3))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ClassifierModel":
        return replace(
            self,
            params={k: v.copy() for k, v in self.params.items()},
            norm_mean=np.array(self.norm_mean, dtype=np.float64),
            norm_std=np.array(self.norm_std, dtype=np.float64),
        )

    def astype(self, dtype) -> "ClassifierModel":
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        return m

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.params.values())


def _pooled(size: int, times: int) -> int:
    for _ in range(times):
        size //= 2
    return size


def init_model(architecture: str, input_shape=(32, 32, 3), num_classes: int = 10,
               seed: int = 0, pooling: str = "max", dtype=np.float64) -> ClassifierModel:
    """He-style uniform fan-in init for leaky-ReLU layers, zero biases."""
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}")
    if pooling not in ("max", "avg"):
        raise ValueError(f"unknown pooling {pooling!r}")
    h, w, c = (int(v) for v in input_shape)
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    if architecture == "linear":
        fan_in = h * w * c
        bound = 1.0 / np.sqrt(fan_in)
        params["fc_w"] = rng.uniform(-bound, bound, size=(fan_in, num_classes))
        params["fc_b"] = np.zeros(num_classes)
    else:
        if _pooled(h, 3) < 1 or _pooled(w, 3) < 1:
            raise ValueError(f"bcnn needs images of at least 8x8, got {h}x{w}")
        gain = np.sqrt(2.0 / (1 + LEAKY_SLOPE ** 2))
        in_ch = c
        for i, out_ch in enumerate(BCNN_FILTERS, start=1):
            fan_in = in_ch * KERNEL * KERNEL
            bound = gain * np.sqrt(3.0 / fan_in)
            params[f"conv{i}_w"] = rng.uniform(-bound, bound, size=(in_ch, KERNEL, KERNEL, out_ch))
            params[f"conv{i}_b"] = np.zeros(out_ch)
            in_ch = out_ch
        fan_in = _pooled(h, 3) * _pooled(w, 3) * in_ch
        bound = 1.0 / np.sqrt(fan_in)
        params["fc_w"] = rng.uniform(-bound, bound, size=(fan_in, num_classes))
        params["fc_b"] = np.zeros(num_classes)
    params = {k: v.astype(dtype) for k, v in params.items()}
    return ClassifierModel(architecture, (h, w, c), num_classes, params, seed, pooling)


def normalize(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """uint8 (N, H, W, C) -> standardized floats in the model's dtype."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if tuple(images.shape[1:]) != tuple(model.input_shape):
        raise ValueError(f"image shape {images.shape[1:]} != model input {model.input_shape}")
    dt = model.dtype
    x = images.astype(dt) / dt.type(255)
    return (x - model.norm_mean.astype(dt)) / model.norm_std.astype(dt)


# -- layers ---------------------------------------------------------------

def conv_forward(x, w, b):
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # cols[n, i, j, c, ki, kj] = xp[n, i + ki, j + kj, c]
    cols = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2)).reshape(n * h * wd, -1)
    out = cols @ w.reshape(-1, w.shape[-1]) + b
    return out.reshape(n, h, wd, -1), cols


def conv_backward(dout, cols, x_shape, w):
    n, h, wd, c = x_shape
    f = w.shape[-1]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, f).T).reshape(n, h, wd, c, KERNEL, KERNEL)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dxp[:, ki:ki + h, kj:kj + wd, :] += dcols[..., ki, kj]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def leaky_relu(x):
    return np.where(x > 0, x, x * x.dtype.type(LEAKY_SLOPE))


def leaky_relu_backward(dout, x):
    return np.where(x > 0, dout, dout * dout.dtype.type(LEAKY_SLOPE))


def _windows(x):
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xc = x[:, :h2 * 2, :w2 * 2, :]
    return xc.reshape(n, h2, 2, w2, 2, c)


def pool_forward(x, mode="max"):
    win = _windows(x)
    if mode == "avg":
        return win.mean(axis=(2, 4)), None
    # route the gradient to the first maximal element, as a subgradient
    flat = win.transpose(0, 1, 3, 5, 2, 4).reshape(*win.shape[:2], win.shape[3], win.shape[5], 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, arg


def pool_backward(dout, x_shape, arg, mode="max"):
    n, h, w, c = x_shape
    h2, w2 = h // 2, w // 2
    dx = np.zeros(x_shape, dtype=dout.dtype)
    if mode == "avg":
        block = np.broadcast_to((dout / 4)[:, :, None, :, None, :], (n, h2, 2, w2, 2, c))
    else:
        onehot = np.zeros((*arg.shape, 4), dtype=dout.dtype)
        np.put_along_axis(onehot, arg[..., None], 1, axis=-1)
        grad = onehot * dout[..., None]  # (n, h2, w2, c, 4)
        block = grad.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    dx[:, :h2 * 2, :w2 * 2, :] = block.reshape(n, h2 * 2, w2 * 2, c)
    return dx


# -- network --------------------------------------------------------------

def forward_batch(model: ClassifierModel, x: np.ndarray, keep_cache: bool = False):
    """Logits for already-normalized input ``x`` of shape (N, H, W, C)."""
    p = model.params
    cache = []
    if model.architecture == "bcnn":
        a = x
        for i in range(1, len(BCNN_FILTERS) + 1):
            z, cols = conv_forward(a, p[f"conv{i}_w"], p[f"conv{i}_b"])
            r = leaky_relu(z)
            pooled, arg = pool_forward(r, model.pooling)
            if keep_cache:
                cache.append((a.shape, cols, z, r.shape, arg))
            a = pooled
        x = a
    flat = x.reshape(len(x), -1)
    logits = flat @ p["fc_w"] + p["fc_b"]
    if keep_cache:
        return logits, (cache, flat, x.shape)
    return logits


def backward_batch(model: ClassifierModel, dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
    p = model.params
    conv_cache, flat, head_shape = cache
    grads = {"fc_w": flat.T @ dlogits, "fc_b": dlogits.sum(axis=0)}
    if model.architecture == "bcnn":
        da = (dlogits @ p["fc_w"].T).reshape(head_shape)
        for i in range(len(BCNN_FILTERS), 0, -1):
            a_shape, cols, z, r_shape, arg = conv_cache[i - 1]
            dr = pool_backward(da, r_shape, arg, model.pooling)
            dz = leaky_relu_backward(dr, z)
            da, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = conv_backward(dz, cols, a_shape, p[f"conv{i}_w"])
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, y) -> float:
    """-log(exp(x_y) / sum(exp(x))) for one logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    y = int(y)
    if not 0 <= y < logits.shape[-1]:
        raise ValueError(f"class index {y} out of range for {logits.shape[-1]} logits")
    # log(sum exp(x - m)) = log1p(rest) keeps full relative precision when
    # the true class wins by a wide margin and the loss is tiny
    top = int(np.argmax(logits))
    m = logits[top]
    rest = np.exp(np.delete(logits, top) - m).sum()
    return float((m - logits[y]) + np.log1p(rest))


def batch_loss_and_grad(model: ClassifierModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over the batch, its parameter gradients, and logits."""
    logits, cache = forward_batch(model, x, keep_cache=True)
    logp = log_softmax(logits)
    n = len(y)
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1
    dlogits /= n
    return float(loss), backward_batch(model, dlogits, cache), logits


def forward(model: ClassifierModel, image: np.ndarray) -> np.ndarray:
    return forward_batch(model, normalize(model, image))[0]


def backward(model: ClassifierModel, image: np.ndarray, y: int) -> dict[str, np.ndarray]:
    if not 0 <= int(y) < model.num_classes:
        raise ValueError(f"class index {y} out of range")
    _, grads, _ = batch_loss_and_grad(model, normalize(model, image), np.array([int(y)]))
    return grads


def predict_logits(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=-1)


def predict(model: ClassifierModel, image: np.ndarray) -> int:
    return int(predict_logits(forward(model, image)))


def predict_dataset(model: ClassifierModel, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = np.empty(len(images), dtype=np.int64)
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        out[start:start + len(chunk)] = predict_logits(forward_batch(model, normalize(model, chunk)))
    return out


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(model: ClassifierModel, path) -> None:
    """Magic, header length, JSON header, then raw little-endian tensors."""
    blobs, entries, offset = [], [], 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name])
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="),
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "pixelwarden-checkpoint", "version": CHECKPOINT_VERSION,
        "architecture": model.architecture, "input_shape": list(model.input_shape),
        "num_classes": model.num_classes, "seed": model.seed, "pooling": model.pooling,
        "norm_mean": [float(v) for v in model.norm_mean],
        "norm_std": [float(v) for v in model.norm_std],
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> ClassifierModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a pixelwarden checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = data[16 + hlen:]
    params = {}
    for t in header["tensors"]:
        dt = np.dtype("<" + t["dtype"])
        chunk = body[t["offset"]:t["offset"] + t["nbytes"]]
        params[t["name"]] = np.frombuffer(chunk, dtype=dt).reshape(t["shape"]).astype(dt.newbyteorder("="))
    return ClassifierModel(
        header["architecture"], tuple(header["input_shape"]), header["num_classes"],
        params, header["seed"], header["pooling"],
        np.array(header["norm_mean"]), np.array(header["norm_std"]),
    )


def parameter_digest(model: ClassifierModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()
