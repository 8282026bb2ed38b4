"""
Numerical core of the line recognizer.

This module handles:
- The architecture description and its presets
- Parameter initialization (Glorot uniform, zero biases, forget bias 1)
- Forward pass: conv3x3+ReLU+maxpool2x2 (twice), bidirectional LSTM,
  dropout on the recurrent output, linear layer, softmax
- Backward pass for every tensor
- Adam with decoupled weight decay and the EMA shadow update

Inputs are inverted (ink = 1, paper = 0) so white right-padding is the
zero padding of the convolutions. Columns past a sample's true width are
zeroed after every pooling step and the LSTMs hold their state over
padded frames, so results on the true frames do not depend on how far a
batch was padded.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.checkpoint import Checkpoint
from models.codec import Codec
from utils.exceptions import CodecMismatchError, ConfigError, ShapeMismatchError
from utils.seeding import rng_for
from utils.validator import ConfigValidator

GATES = 4


@dataclass(frozen=True)
class ArchSpec:
    input_height: int = 48
    conv_filters: Tuple[int, int] = (40, 60)
    lstm_hidden: int = 200
    dropout: float = 0.5
    num_classes: int = 2

    def __post_init__(self):
        ok, message = ConfigValidator.validate_arch(self)
        if not ok:
            raise ConfigError(message)

    @classmethod
    def preset(cls, name: str, num_classes: int) -> "ArchSpec":
        try:
            fields = ARCH_PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown architecture preset {name!r}; expected one of {', '.join(ARCH_PRESETS)}")
        return cls(num_classes=num_classes, **fields)

    @property
    def frame_features(self) -> int:
        return self.conv_filters[1] * (self.input_height // 4)

    def tensor_shapes(self) -> Dict[str, Tuple[int, ...]]:
        f1, f2 = self.conv_filters
        h, d = self.lstm_hidden, self.frame_features
        shapes = {
            "conv1.w": (f1, 1, 3, 3),
            "conv1.b": (f1,),
            "conv2.w": (f2, f1, 3, 3),
            "conv2.b": (f2,),
            "out.w": (self.num_classes, 2 * h),
            "out.b": (self.num_classes,),
        }
        for direction in ("lstm_fw", "lstm_bw"):
            shapes[f"{direction}.w_x"] = (d, GATES * h)
            shapes[f"{direction}.w_h"] = (h, GATES * h)
            shapes[f"{direction}.b"] = (GATES * h,)
        return shapes


ARCH_PRESETS = {
    "default": dict(input_height=48, conv_filters=(40, 60), lstm_hidden=200, dropout=0.5),
    "desk": dict(input_height=32, conv_filters=(8, 16), lstm_hidden=64, dropout=0.5),
    "gradcheck": dict(input_height=8, conv_filters=(2, 3), lstm_hidden=4, dropout=0.0),
}


def output_frames(width: int) -> int:
    return (width // 2) // 2


def glorot_fans(name: str, shape: Tuple[int, ...]) -> Tuple[int, int]:
    if name.endswith(".w") and len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    if name == "out.w":
        return shape[1], shape[0]
    # LSTM matrices are stored input-major
    return shape[0], shape[1]


def glorot_bound(name: str, shape: Tuple[int, ...]) -> float:
    fan_in, fan_out = glorot_fans(name, shape)
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(arch: ArchSpec, seed: int, codec: Codec, dtype=np.float32, voter: int = 0) -> Checkpoint:
    """Fresh checkpoint; every tensor has its own (seed, voter, name) random stream."""
    if arch.num_classes != codec.size:
        raise CodecMismatchError(f"arch has {arch.num_classes} classes, codec needs {codec.size}")
    tensors = {}
    for name, shape in sorted(arch.tensor_shapes().items()):
        if name.endswith(".b"):
            value = np.zeros(shape, dtype=dtype)
            if name.startswith("lstm"):
                h = arch.lstm_hidden
                value[h : 2 * h] = 1.0
        else:
            bound = glorot_bound(name, shape)
            value = rng_for("init", seed, voter, name).uniform(-bound, bound, size=shape).astype(dtype)
        tensors[name] = value
    return Checkpoint(
        arch=arch,
        codec=codec,
        tensors=tensors,
        ema_tensors={k: v.copy() for k, v in tensors.items()},
        train_meta={
            "seed": seed, "voter": voter, "epochs": 0.0, "best_cer": None, "stage": "init", "samples_seen": 0,
        },
    )


# ------------------------------------------------------------------ layers


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """'Same' 3x3 convolution of (B, Cin, H, W); returns output and the padded input."""
    _, _, h, width = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((x.shape[0], w.shape[0], h, width), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            window = xp[:, :, dy : dy + h, dx : dx + width]
            out += np.moveaxis(np.tensordot(window, w[:, :, dy, dx], axes=([1], [1])), 3, 1)
    out += b[None, :, None, None]
    return out, xp


def _conv3x3_backward(grad: np.ndarray, xp: np.ndarray, w: np.ndarray, need_input: bool):
    _, _, h, width = grad.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_input else None
    for dy in range(3):
        for dx in range(3):
            window = xp[:, :, dy : dy + h, dx : dx + width]
            dw[:, :, dy, dx] = np.tensordot(grad, window, axes=([0, 2, 3], [0, 2, 3]))
            if need_input:
                dxp[:, :, dy : dy + h, dx : dx + width] += np.moveaxis(
                    np.tensordot(grad, w[:, :, dy, dx], axes=([1], [0])), 3, 1
                )
    db = grad.sum(axis=(0, 2, 3))
    dx_out = dxp[:, :, 1:-1, 1:-1] if need_input else None
    return dw, db, dx_out


def _maxpool2x2(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Floor-mode 2x2 max pooling; first maximum wins."""
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    blocks = (
        x[:, :, : 2 * ho, : 2 * wo]
        .reshape(b, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, 4)
    )
    idx = blocks.argmax(axis=-1)[..., None]
    return np.take_along_axis(blocks, idx, axis=-1)[..., 0], idx


def _maxpool2x2_backward(grad: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    b, c, h, w = in_shape
    ho, wo = grad.shape[2], grad.shape[3]
    blocks = np.zeros((b, c, ho, wo, 4), dtype=grad.dtype)
    np.put_along_axis(blocks, idx, grad[..., None], axis=-1)
    dx = np.zeros(in_shape, dtype=grad.dtype)
    dx[:, :, : 2 * ho, : 2 * wo] = (
        blocks.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * ho, 2 * wo)
    )
    return dx


def _column_mask(widths: np.ndarray, total: int, dtype) -> np.ndarray:
    return (np.arange(total)[None, :] < widths[:, None]).astype(dtype)[:, None, None, :]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _lstm_forward(x, mask, w_x, w_h, b, reverse: bool):
    """Run one direction over (B, T, D); masked steps keep the previous state and emit zeros."""
    batch, steps, _ = x.shape
    h_size = w_h.shape[0]
    xw = x @ w_x + b
    h = np.zeros((batch, h_size), dtype=x.dtype)
    c = np.zeros_like(h)
    out = np.zeros((batch, steps, h_size), dtype=x.dtype)
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    trace = []
    for t in order:
        m = mask[:, t, None]
        z = xw[:, t] + h @ w_h
        i = _sigmoid(z[:, :h_size])
        f = _sigmoid(z[:, h_size : 2 * h_size])
        g = np.tanh(z[:, 2 * h_size : 3 * h_size])
        o = _sigmoid(z[:, 3 * h_size :])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        trace.append((t, m, h, c, i, f, g, o, tc))
        out[:, t] = h_new * m
        h = m * h_new + (1 - m) * h
        c = m * c_new + (1 - m) * c
    return out, trace


def _lstm_backward(dout, x, trace, w_x, w_h):
    batch, steps, _ = dout.shape
    h_size = w_h.shape[0]
    dxw = np.zeros((batch, steps, GATES * h_size), dtype=dout.dtype)
    dw_h = np.zeros_like(w_h)
    dh = np.zeros((batch, h_size), dtype=dout.dtype)
    dc = np.zeros_like(dh)
    for t, m, h_prev, c_prev, i, f, g, o, tc in reversed(trace):
        dh_new = m * (dout[:, t] + dh)
        dc_new = m * dc + dh_new * o * (1 - tc * tc)
        dz = np.concatenate(
            [
                dc_new * g * i * (1 - i),
                dc_new * c_prev * f * (1 - f),
                dc_new * i * (1 - g * g),
                dh_new * tc * o * (1 - o),
            ],
            axis=1,
        )
        dxw[:, t] = dz
        dw_h += h_prev.T @ dz
        dh = dz @ w_h.T + (1 - m) * dh
        dc = dc_new * f + (1 - m) * dc
    dw_x = np.tensordot(x, dxw, axes=([0, 1], [0, 1]))
    db = dxw.sum(axis=(0, 1))
    dx = dxw @ w_x.T
    return dw_x, dw_h, db, dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------ forward/back


@dataclass
class ForwardCache:
    params: Dict[str, np.ndarray]
    widths: np.ndarray
    frames: np.ndarray
    xp1: np.ndarray
    a1: np.ndarray
    idx1: np.ndarray
    mask1: np.ndarray
    xp2: np.ndarray
    a2: np.ndarray
    idx2: np.ndarray
    mask2: np.ndarray
    pooled_shape: Tuple[int, ...]
    seq: np.ndarray
    trace_fw: list
    trace_bw: list
    keep: Optional[np.ndarray]
    rec: np.ndarray


def forward(
    ckpt: Checkpoint,
    batch: np.ndarray,
    widths: Optional[Sequence[int]] = None,
    training: bool = False,
    dropout_stream: Optional[Sequence] = None,
) -> Tuple[List[np.ndarray], np.ndarray, Optional[ForwardCache]]:
    """Posteriors for a white-padded batch (B, H, W).

    Returns (per-sample ProbMatrix list, padded logits, cache). Inference uses
    the EMA tensors and no dropout; training uses the live tensors and draws
    the dropout mask from ``dropout_stream``.
    """
    arch = ckpt.arch
    batch = np.asarray(batch)
    if batch.ndim != 3 or batch.shape[1] != arch.input_height:
        raise ShapeMismatchError(
            f"expected rasters of height {arch.input_height}, got batch shape {batch.shape}"
        )
    params = ckpt.tensors if training else ckpt.ema_tensors
    dtype = params["out.w"].dtype
    widths = np.full(batch.shape[0], batch.shape[2]) if widths is None else np.asarray(widths, dtype=np.int64)
    x = (1.0 - batch.astype(dtype))[:, None]

    z1, xp1 = _conv3x3(x, params["conv1.w"], params["conv1.b"])
    a1 = np.maximum(z1, 0)
    p1, idx1 = _maxpool2x2(a1)
    mask1 = _column_mask(widths // 2, p1.shape[3], dtype)
    p1 = p1 * mask1

    z2, xp2 = _conv3x3(p1, params["conv2.w"], params["conv2.b"])
    a2 = np.maximum(z2, 0)
    p2, idx2 = _maxpool2x2(a2)
    frames = output_frames_array(widths)
    mask2 = _column_mask(frames, p2.shape[3], dtype)
    p2 = p2 * mask2

    b, f2, h4, steps = p2.shape
    seq = p2.transpose(0, 3, 1, 2).reshape(b, steps, f2 * h4)
    step_mask = (np.arange(steps)[None, :] < frames[:, None]).astype(dtype)

    fw, trace_fw = _lstm_forward(
        seq, step_mask, params["lstm_fw.w_x"], params["lstm_fw.w_h"], params["lstm_fw.b"], reverse=False
    )
    bw, trace_bw = _lstm_forward(
        seq, step_mask, params["lstm_bw.w_x"], params["lstm_bw.w_h"], params["lstm_bw.b"], reverse=True
    )
    rec = np.concatenate([fw, bw], axis=2)

    keep = None
    if training and arch.dropout > 0:
        rng = rng_for("dropout", *(dropout_stream if dropout_stream is not None else (0,)))
        keep = (rng.random(rec.shape) >= arch.dropout).astype(dtype) / (1.0 - arch.dropout)
        rec = rec * keep

    logits = rec @ params["out.w"].T + params["out.b"]
    probs = softmax(logits)
    per_sample = [probs[i, : frames[i]] for i in range(b)]

    cache = None
    if training:
        cache = ForwardCache(
            params, widths, frames, xp1, a1, idx1, mask1, xp2, a2, idx2, mask2,
            p2.shape, seq, trace_fw, trace_bw, keep, rec,
        )
    return per_sample, logits, cache


def output_frames_array(widths: np.ndarray) -> np.ndarray:
    return (np.asarray(widths, dtype=np.int64) // 2) // 2


def backward(cache: ForwardCache, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
    """Gradients of every tensor given dL/dlogits of shape (B, T, C+1)."""
    params = cache.params
    dtype = params["out.w"].dtype
    g = np.asarray(grad_logits, dtype=dtype)
    h = params["lstm_fw.w_h"].shape[0]
    grads: Dict[str, np.ndarray] = {}

    grads["out.w"] = np.tensordot(g, cache.rec, axes=([0, 1], [0, 1]))
    grads["out.b"] = g.sum(axis=(0, 1))
    drec = g @ params["out.w"]
    if cache.keep is not None:
        drec = drec * cache.keep

    dseq = np.zeros_like(cache.seq)
    for name, trace, part in (
        ("lstm_fw", cache.trace_fw, drec[:, :, :h]),
        ("lstm_bw", cache.trace_bw, drec[:, :, h:]),
    ):
        dw_x, dw_h, db, dx = _lstm_backward(part, cache.seq, trace, params[f"{name}.w_x"], params[f"{name}.w_h"])
        grads[f"{name}.w_x"], grads[f"{name}.w_h"], grads[f"{name}.b"] = dw_x, dw_h, db
        dseq += dx

    b, f2, h4, steps = cache.pooled_shape
    dp2 = dseq.reshape(b, steps, f2, h4).transpose(0, 2, 3, 1) * cache.mask2
    da2 = _maxpool2x2_backward(dp2, cache.idx2, cache.a2.shape)
    dz2 = da2 * (cache.a2 > 0)
    grads["conv2.w"], grads["conv2.b"], dp1 = _conv3x3_backward(dz2, cache.xp2, params["conv2.w"], True)

    dp1 = dp1 * cache.mask1
    da1 = _maxpool2x2_backward(dp1, cache.idx1, cache.a1.shape)
    dz1 = da1 * (cache.a1 > 0)
    grads["conv1.w"], grads["conv1.b"], _ = _conv3x3_backward(dz1, cache.xp1, params["conv1.w"], False)
    return grads


# --------------------------------------------------------------- updates


def adam_step(
    ckpt: Checkpoint,
    grads: Dict[str, np.ndarray],
    lr: float,
    betas: Tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-7,
    weight_decay: float = 0.0,
) -> Checkpoint:
    """One Adam update in place: decay θ by (1 - lr*wd), then apply the moment step."""
    if set(grads) != set(ckpt.tensors):
        raise ShapeMismatchError(f"gradient names {sorted(grads)} do not match tensors")
    for name, grad in grads.items():
        if grad.shape != ckpt.tensors[name].shape:
            raise ShapeMismatchError(f"{name}: gradient shape {grad.shape} != {ckpt.tensors[name].shape}")

    if ckpt.opt_state is None:
        ckpt.opt_state = {
            "step": 0,
            "m": {k: np.zeros_like(v) for k, v in ckpt.tensors.items()},
            "v": {k: np.zeros_like(v) for k, v in ckpt.tensors.items()},
        }
    state = ckpt.opt_state
    state["step"] += 1
    beta1, beta2 = betas
    correction1 = 1.0 - beta1 ** state["step"]
    correction2 = 1.0 - beta2 ** state["step"]
    for name in sorted(ckpt.tensors):
        theta = ckpt.tensors[name]
        grad = grads[name].astype(theta.dtype)
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        if weight_decay:
            theta *= 1.0 - lr * weight_decay
        theta -= (lr * (m / correction1) / (np.sqrt(v / correction2) + eps)).astype(theta.dtype)
    return ckpt


def ema_update(ckpt: Checkpoint, decay: float) -> Checkpoint:
    """ema <- decay*ema + (1-decay)*θ, written so that ema == θ stays exactly fixed."""
    if not 0 < decay < 1:
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    for name, theta in ckpt.tensors.items():
        ema = ckpt.ema_tensors[name]
        ema += ((1.0 - decay) * (theta - ema)).astype(ema.dtype)
    return ckpt
