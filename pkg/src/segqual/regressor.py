"""Quality regressor: a small CNN trained with hand-written backprop and AdamW.

Parameters live in one flat float64 vector; layers read named, reshaped views
of it. Each parameter value is kept representable in float32 (rounded at
init and after every optimizer step during training) so the 32-bit model
file reproduces a trained state exactly.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import (InvalidInputError, ModelChecksumError, ModelFormatError,
                     ModelVersionError, TrainingDivergedError, UndefinedMetricError)
from .metrics import spearman
from .preprocess import DEFAULT_INPUT_SIDE, BoxPrompt, psi

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass(frozen=True)
class Architecture:
    widths: tuple[int, ...] = (8, 16, 32, 64)
    heads: int = 1
    input_side: int = DEFAULT_INPUT_SIDE
    in_channels: int = 3
    backbone: str = "conv"

    def validate(self) -> None:
        if self.heads not in (1, 2):
            raise InvalidInputError(f"head count must be 1 or 2, got {self.heads}")
        if not self.widths or any(w < 1 for w in self.widths):
            raise InvalidInputError(f"invalid channel widths {self.widths}")
        if self.input_side < 1 or self.input_side >> len(self.widths) < 1:
            raise InvalidInputError(
                f"input side {self.input_side} too small for {len(self.widths)} pooling blocks")
        if self.backbone not in BACKBONES:
            raise InvalidInputError(f"unknown backbone {self.backbone!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class Backbone(Protocol):
    """Feature extractor contract: NHWC batch in, (B, feature_dim) features out."""

    feature_dim: int

    def param_specs(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, fan_in) per tensor; fan_in 0 marks a bias."""

    def forward(self, params: dict, x: np.ndarray) -> tuple[np.ndarray, list]: ...

    def backward(self, params: dict, cache: list, dfeat: np.ndarray) -> dict: ...


class ConvBackbone:
    """Blocks of 3x3 same-padded conv, ReLU and 2x2 average pooling, then global mean."""

    def __init__(self, arch: Architecture):
        self.channels = [arch.in_channels, *arch.widths]
        self.feature_dim = arch.widths[-1]

    def param_specs(self):
        specs = []
        for k, (cin, cout) in enumerate(zip(self.channels[:-1], self.channels[1:])):
            specs.append((f"conv{k}.weight", (cout, cin, 3, 3), cin * 9))
            specs.append((f"conv{k}.bias", (cout,), 0))
        return specs

    def forward(self, params, x):
        cache = []
        for k in range(len(self.channels) - 1):
            w = params[f"conv{k}.weight"]
            b = params[f"conv{k}.bias"]
            bsz, h, wd, cin = x.shape
            xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
            cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(bsz * h * wd, cin * 9)
            z = cols @ w.reshape(w.shape[0], -1).T + b
            a = np.maximum(z, 0.0).reshape(bsz, h, wd, -1)
            h2, w2 = h // 2, wd // 2
            x = a[:, :2 * h2, :2 * w2].reshape(bsz, h2, 2, w2, 2, -1).mean(axis=(2, 4))
            cache.append((cols, z > 0, (bsz, h, wd, cin)))
        cache.append(x.shape)
        return x.mean(axis=(1, 2)), cache

    def backward(self, params, cache, dfeat):
        grads = {}
        bsz, h, wd, c = cache[-1]
        dx = np.broadcast_to(dfeat[:, None, None, :] / (h * wd), (bsz, h, wd, c))
        for k in reversed(range(len(self.channels) - 1)):
            cols, active, (bsz, h, wd, cin) = cache[k]
            w = params[f"conv{k}.weight"]
            cout = w.shape[0]
            h2, w2 = h // 2, wd // 2
            da = np.zeros((bsz, h, wd, cout))
            up = np.repeat(np.repeat(dx * 0.25, 2, axis=1), 2, axis=2)
            da[:, :2 * h2, :2 * w2] = up
            dz = da.reshape(-1, cout) * active
            grads[f"conv{k}.weight"] = (dz.T @ cols).reshape(w.shape)
            grads[f"conv{k}.bias"] = dz.sum(axis=0)
            if k == 0:
                break
            dcols = (dz @ w.reshape(cout, -1)).reshape(bsz, h, wd, cin, 3, 3)
            dxp = np.zeros((bsz, h + 2, wd + 2, cin))
            for i in range(3):
                for j in range(3):
                    dxp[:, i:i + h, j:j + wd] += dcols[..., i, j]
            dx = dxp[:, 1:-1, 1:-1]
        return grads


BACKBONES = {"conv": ConvBackbone}


class Layout:
    """Named slices of the flat parameter vector."""

    def __init__(self, arch: Architecture):
        self.backbone = BACKBONES[arch.backbone](arch)
        specs = list(self.backbone.param_specs())
        f = self.backbone.feature_dim
        specs.append(("head.weight", (arch.heads, f), f))
        specs.append(("head.bias", (arch.heads,), 0))
        self.specs = specs
        self.offsets = {}
        off = 0
        for name, shape, _ in specs:
            size = math.prod(shape)
            self.offsets[name] = (off, off + size, shape)
            off += size
        self.size = off

    def views(self, theta: np.ndarray) -> dict:
        return {n: theta[a:b].reshape(s) for n, (a, b, s) in self.offsets.items()}

    def flatten(self, grads: dict) -> np.ndarray:
        out = np.empty(self.size)
        for n, (a, b, _) in self.offsets.items():
            out[a:b] = grads[n].ravel()
        return out


def param_count(arch: Architecture) -> int:
    return Layout(arch).size


@dataclass
class RegressorState:
    arch: Architecture
    theta: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    _layout: Layout | None = field(default=None, repr=False, compare=False)

    @property
    def layout(self) -> Layout:
        if self._layout is None:
            self._layout = Layout(self.arch)
        return self._layout


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    weight_decay: float = 0.01
    seed: int = 0
    head_weights: tuple[float, ...] = (1.0, 1.0)
    widths: tuple[int, ...] = (8, 16, 32, 64)
    heads: int = 1
    input_side: int = DEFAULT_INPUT_SIDE
    chunk: int = 16

    def validate(self) -> None:
        if not self.lr > 0:
            raise InvalidInputError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise InvalidInputError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InvalidInputError("epochs must be nonnegative")
        if self.weight_decay < 0:
            raise InvalidInputError("weight decay must be nonnegative")
        if len(self.head_weights) < self.heads:
            raise InvalidInputError("one weight per head is required")
        self.architecture().validate()

    def architecture(self) -> Architecture:
        return Architecture(tuple(self.widths), self.heads, self.input_side)


def _f32(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32).astype(np.float64)


def init(arch: Architecture, seed: int = 0) -> RegressorState:
    """Fan-in scaled uniform weights, zero biases, zero optimizer moments."""
    arch.validate()
    layout = Layout(arch)
    rng = np.random.default_rng(seed)
    theta = np.zeros(layout.size)
    for name, shape, fan_in in layout.specs:
        if fan_in == 0:
            continue
        a, b, _ = layout.offsets[name]
        gain = 3.0 if name.startswith("head") else 6.0
        bound = math.sqrt(gain / fan_in)
        theta[a:b] = rng.uniform(-bound, bound, size=b - a)
    return RegressorState(arch, _f32(theta), np.zeros(layout.size), np.zeros(layout.size), 0, layout)


def _as_batch(state: RegressorState, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    side = state.arch.input_side
    expected = (state.arch.in_channels, side, side)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise InvalidInputError(f"expected input of shape (B, {expected}), got {np.shape(inputs)}")
    return x.transpose(0, 2, 3, 1)


def _forward(state, params, x_nhwc):
    feat, cache = state.layout.backbone.forward(params, x_nhwc)
    logits = feat @ params["head.weight"].T + params["head.bias"]
    return expit(logits), feat, cache


def forward(state: RegressorState, inputs, chunk: int = 64) -> np.ndarray:
    """Predicted scores in (0, 1): shape (H,) for one input, (B, H) for a batch."""
    single = np.ndim(inputs) == 3
    x = _as_batch(state, inputs)
    params = state.layout.views(state.theta)
    outs = [_forward(state, params, x[i:i + chunk])[0] for i in range(0, len(x), chunk)]
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


def loss(pred, target, head_weights=(1.0, 1.0)) -> float:
    """Weighted sum over heads of squared error."""
    p = np.atleast_1d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape:
        raise InvalidInputError(f"prediction has {p.shape} heads, target {t.shape}")
    w = np.asarray(head_weights, dtype=np.float64)[: p.shape[-1]]
    return float(((p - t) ** 2 * w).sum())


def grad(state: RegressorState, inputs, targets, head_weights=(1.0, 1.0), chunk: int = 16):
    """Mean batch loss and its exact gradient with respect to the flat parameters.

    Samples are processed in fixed-size chunks in index order; per-chunk sums
    are accumulated in that same order so results do not depend on scheduling.

    Returns:
        (loss, gradient) where gradient has the length of ``state.theta``.
    """
    x = _as_batch(state, inputs)
    t = np.asarray(targets, dtype=np.float64).reshape(len(x), -1)
    heads = state.arch.heads
    if t.shape[1] != heads:
        raise InvalidInputError(f"targets have {t.shape[1]} columns for a {heads}-head model")
    if len(x) == 0:
        raise InvalidInputError("gradient of an empty batch")
    w = np.asarray(head_weights, dtype=np.float64)[:heads]
    layout = state.layout
    params = layout.views(state.theta)
    total = np.zeros(layout.size)
    loss_sum = 0.0
    for s in range(0, len(x), chunk):
        xb, tb = x[s:s + chunk], t[s:s + chunk]
        p, feat, cache = _forward(state, params, xb)
        err = p - tb
        loss_sum += float((err * err * w).sum())
        dlogit = 2.0 * w * err * p * (1.0 - p)
        grads = layout.backbone.backward(params, cache, dlogit @ params["head.weight"])
        grads["head.weight"] = dlogit.T @ feat
        grads["head.bias"] = dlogit.sum(axis=0)
        total += layout.flatten(grads)
    n = len(x)
    return loss_sum / n, total / n


def adamw_step(state: RegressorState, gradient, config: TrainConfig,
               betas: tuple[float, float] = (BETA1, BETA2), eps: float = EPS) -> RegressorState:
    """One AdamW update; returns a new state.

    Weight decay shrinks the parameters by (1 - lr * decay) independently of
    the bias-corrected adaptive step.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.theta.shape:
        raise InvalidInputError(f"gradient length {g.size} != parameter count {state.theta.size}")
    if not np.all(np.isfinite(g)):
        raise TrainingDivergedError(f"non-finite gradient at step {state.step + 1}")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    theta = state.theta * (1.0 - config.lr * config.weight_decay)
    theta = theta - config.lr * m_hat / (np.sqrt(v_hat) + eps)
    return RegressorState(state.arch, theta, m, v, step, state._layout)


def targets_for(tuples, heads: int) -> np.ndarray:
    cols = [[t.q_dice] if heads == 1 else [t.q_dice, t.q_hd] for t in tuples]
    return np.asarray(cols, dtype=np.float64)


def prepare_inputs(tuples, side: int) -> np.ndarray:
    """psi for every tuple, stacked as float32 (B, 3, side, side)."""
    out = np.empty((len(tuples), 3, side, side), dtype=np.float32)
    for i, t in enumerate(tuples):
        out[i] = psi(t.image, t.pred_mask, t.prompt, side)
    return out


def train(tuples: Sequence, config: TrainConfig, val: Sequence | None = None):
    """Mini-batch AdamW on the weighted MSE objective.

    Returns:
        (state, history); history holds one dict per epoch with the mean
        training loss and, when ``val`` is given, the validation Spearman
        correlation of the dice head.
    """
    config.validate()
    if not tuples:
        raise InvalidInputError("training needs at least one tuple")
    arch = config.architecture()
    state = init(arch, config.seed)
    x_all = prepare_inputs(tuples, arch.input_side)
    y_all = targets_for(tuples, arch.heads)
    x_val = prepare_inputs(val, arch.input_side) if val else None
    rng = np.random.default_rng([config.seed, 1])
    history = []
    n = len(tuples)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch_loss, g = grad(state, x_all[idx], y_all[idx], config.head_weights, config.chunk)
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(f"loss became {batch_loss} at epoch {epoch}, batch {b}")
            state = adamw_step(state, g, config)
            state.theta = _f32(state.theta)
            loss_sum += batch_loss * len(idx)
        record = {"epoch": epoch, "train_loss": loss_sum / n}
        if x_val is not None:
            pred = forward(state, x_val)[:, 0]
            try:
                record["val_spearman"] = spearman(pred, [t.q_dice for t in val])
            except UndefinedMetricError:
                record["val_spearman"] = float("nan")
        log.info("epoch %d %s", epoch,
                 " ".join(f"{k}={v:.5f}" for k, v in record.items() if k != "epoch"))
        history.append(record)
    return state, history


def predict(state: RegressorState, image, pred_mask, prompt: BoxPrompt) -> np.ndarray:
    x = psi(image, pred_mask, prompt, state.arch.input_side).astype(np.float32)
    return forward(state, x)


def predict_tuples(state: RegressorState, tuples, chunk: int = 64) -> np.ndarray:
    """(N, H) predictions for a list of training tuples."""
    if not tuples:
        return np.zeros((0, state.arch.heads))
    out = []
    for s in range(0, len(tuples), chunk):
        x = prepare_inputs(tuples[s:s + chunk], state.arch.input_side)
        out.append(forward(state, x))
    return np.concatenate(out, axis=0)


MAGIC = b"SEGQUAL\x00"
FORMAT_VERSION = 1


def save(state: RegressorState, path) -> None:
    """magic | u32 version | u32 header length | JSON header | f32 params | u32 CRC32."""
    header = json.dumps({"arch": state.arch.to_dict(), "n_params": int(state.theta.size),
                         "step": state.step}, sort_keys=True).encode()
    payload = state.theta.astype("<f4").tobytes()
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load(path) -> RegressorState:
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 12 or not buf.startswith(MAGIC):
        raise ModelFormatError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<II", buf, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ModelChecksumError(f"{path}: checksum mismatch (file truncated or corrupt)")
    start = len(MAGIC) + 8
    try:
        header = json.loads(body[start:start + hlen])
        arch = Architecture.from_dict(header["arch"])
        arch.validate()
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: bad header ({exc})") from exc
    theta = np.frombuffer(body[start + hlen:], dtype="<f4").astype(np.float64)
    layout = Layout(arch)
    if theta.size != layout.size or header.get("n_params") != layout.size:
        raise ModelFormatError(f"{path}: {theta.size} parameters, architecture needs {layout.size}")
    return RegressorState(arch, theta, np.zeros(layout.size), np.zeros(layout.size),
                          int(header.get("step", 0)), layout)


@dataclass(frozen=True)
class GradientCheck:
    max_relative_error: float
    compared: int
    kinked: int


def _relu_pattern(state, params, x_nhwc) -> np.ndarray:
    _, cache = state.layout.backbone.forward(params, x_nhwc)
    return np.concatenate([c[1].ravel() for c in cache[:-1]])


def gradient_check(arch: Architecture, seed: int = 0, batch: int = 2, h: float = 1e-5,
                   head_weights=(1.0, 0.5)) -> GradientCheck:
    """Compare analytic gradients with central differences on a random problem.

    Uses a random batch and random targets; intended for small architectures
    since it costs a few forward passes per parameter. Biases are drawn at
    random rather than left at zero, which would put pre-activations exactly on
    the ReLU kink wherever a window sees only dead inputs. A coordinate whose
    +h or -h probe flips any ReLU is not differentiable over the probe
    interval, so it is counted as kinked and left out of the comparison.
    """
    state = init(arch, seed)
    rng = np.random.default_rng([seed, 2])
    for name, _, fan_in in state.layout.specs:
        if fan_in == 0:
            a, b, _ = state.layout.offsets[name]
            state.theta[a:b] = rng.uniform(-0.1, 0.1, size=b - a)
    side = arch.input_side
    x = rng.random((batch, arch.in_channels, side, side))
    t = rng.random((batch, arch.heads))
    _, analytic = grad(state, x, t, head_weights)
    theta = state.theta.copy()
    probe = RegressorState(arch, theta, state.m, state.v, 0, state.layout)
    params = probe.layout.views(theta)
    x_nhwc = _as_batch(probe, x)
    base = _relu_pattern(probe, params, x_nhwc)
    numeric = np.empty_like(analytic)
    smooth = np.ones(theta.size, dtype=bool)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + h
        up, _ = grad(probe, x, t, head_weights)
        smooth[i] = np.array_equal(_relu_pattern(probe, params, x_nhwc), base)
        theta[i] = orig - h
        down, _ = grad(probe, x, t, head_weights)
        smooth[i] &= np.array_equal(_relu_pattern(probe, params, x_nhwc), base)
        theta[i] = orig
        numeric[i] = (up - down) / (2 * h)
    a, n = analytic[smooth], numeric[smooth]
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)
    err = float(np.max(np.abs(a - n) / scale)) if a.size else float("nan")
    return GradientCheck(err, int(smooth.sum()), int((~smooth).sum()))
