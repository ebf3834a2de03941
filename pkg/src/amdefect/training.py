"""Losses, Adam, early stopping, image augmentation and the mini-batch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .tensor import DTYPE, Tensor, backward, log_softmax, no_grad

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7


@dataclass
class EarlyStopConfig:
    monitor: str = "loss"
    min_delta: float = 0.002
    patience: int = 10


@dataclass
class AugmentConfig:
    rotation_max_deg: float = 15.0
    zoom_max_frac: float = 0.1
    shift_max_frac: float = 0.1
    enabled: bool = True


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    adam: AdamConfig = field(default_factory=AdamConfig)
    early_stop: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(enabled=False))
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if not (0 < self.adam.beta1 < 1 and 0 < self.adam.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.early_stop.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.early_stop.min_delta < 0:
            raise ValueError("min_delta must be >= 0")

    def to_dict(self) -> dict[str, str]:
        flat = {}
        for key, value in asdict(self).items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    flat[f"{key}.{sub}"] = _fmt(v)
            else:
                flat[key] = _fmt(value)
        return flat

    def save(self, path: str | Path) -> None:
        lines = [f"{k} = {v}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, flat: dict[str, str]) -> TrainConfig:
        sections = {"adam": AdamConfig, "early_stop": EarlyStopConfig, "augment": AugmentConfig}
        top: dict = {}
        nested: dict[str, dict] = {name: {} for name in sections}
        for key, raw in flat.items():
            if "." in key:
                sec, sub = key.split(".", 1)
                if sec not in sections:
                    raise KeyError(f"unknown config section {sec!r}")
                nested[sec][sub] = raw
            else:
                top[key] = raw
        kwargs = {k: _parse_field(cls, k, v) for k, v in top.items()}
        defaults = cls()
        for sec, klass in sections.items():
            base = asdict(getattr(defaults, sec))
            for sub, raw in nested[sec].items():
                if sub not in base:
                    raise KeyError(f"unknown config key {sec}.{sub}")
                base[sub] = _parse_field(klass, sub, raw)
            kwargs[sec] = klass(**base)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(read_kv(path))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_field(klass, name: str, raw: str):
    types = {f.name: f.type for f in fields(klass)}
    if name not in types:
        raise KeyError(f"unknown config key {name!r}")
    t = types[name]
    if t in ("bool", bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if t in ("int", int):
        return int(raw)
    if t in ("float", float):
        return float(raw)
    return raw.strip()


def read_kv(path: str | Path) -> dict[str, str]:
    """Read a ``key = value`` file; ``#`` starts a comment line."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# losses

def sparse_cce(logits: Tensor, labels, from_logits: bool = True) -> Tensor:
    """Mean negative log-likelihood of the true class.

    With ``from_logits`` the log-probabilities come from a log-sum-exp over
    the logits; otherwise the input is treated as probabilities and clamped.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    rows = np.arange(b)
    if from_logits:
        lsm = log_softmax(logits)
        out = -lsm.data[rows, labels].mean()

        def bw(g):
            gl = np.zeros(lsm.shape, dtype=lsm.data.dtype)
            gl[rows, labels] = -g / b
            return (gl,)

        picked = Tensor.from_op(np.asarray(out, dtype=lsm.data.dtype), (lsm,), "nll", bw)
        return picked
    p = np.clip(logits.data[rows, labels], LOG_CLAMP, 1 - LOG_CLAMP)
    out = np.asarray(-np.log(p).mean(), dtype=logits.data.dtype)

    def bw_p(g):
        gp = np.zeros(logits.shape, dtype=logits.data.dtype)
        gp[rows, labels] = -g / (b * p)
        return (gp,)

    return Tensor.from_op(out, (logits,), "cce", bw_p)


def bce(pred: Tensor, target) -> Tensor:
    """Binary cross-entropy on probabilities with clamped logs."""
    t = np.asarray(target, dtype=pred.data.dtype).reshape(pred.shape)
    p = np.clip(pred.data, LOG_CLAMP, 1 - LOG_CLAMP)
    out = np.asarray(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean(), dtype=pred.data.dtype)
    n = pred.data.size
    inside = (pred.data > LOG_CLAMP) & (pred.data < 1 - LOG_CLAMP)

    def bw(g):
        return (g / n * (p - t) / (p * (1 - p)) * inside,)

    return Tensor.from_op(out, (pred,), "bce", bw)


def mse(pred: Tensor, target) -> Tensor:
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.data.dtype)
    if tgt.shape != pred.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {tgt.shape}")
    diff = pred.data - tgt
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    return Tensor.from_op(out, (pred,), "mse", lambda g: (g * 2.0 / n * diff,))


# optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, cfg: AdamConfig) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)).astype(p.dtype)


# early stopping

def early_stop_check(losses, min_delta: float = 0.002, patience: int = 10) -> bool:
    """True when the last ``patience`` epochs brought no improvement of at least ``min_delta``."""
    losses = list(losses)
    if not losses:
        raise ValueError("early_stop_check needs at least one loss")
    best = losses[0]
    wait = 0
    for loss in losses[1:]:
        # tolerance so that an improvement of exactly min_delta counts despite float rounding
        if best - loss >= min_delta - 1e-12:
            best = loss
            wait = 0
        else:
            wait += 1
    return wait >= patience


# augmentation

def augment(img: np.ndarray, cfg: AugmentConfig, seed: int | np.random.Generator | None = None,
            *, angle: float | None = None, zoom: float | None = None,
            shift: tuple[float, float] | None = None) -> np.ndarray:
    """Random rotation, zoom and shift with nearest-neighbour sampling and zero fill.

    ``angle`` (degrees), ``zoom`` and ``shift`` (pixels, dy/dx) override the random draw.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    h, w = img.shape[:2]
    if angle is None:
        angle = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) if cfg.rotation_max_deg else 0.0
    if zoom is None:
        zoom = 1.0 + (rng.uniform(-cfg.zoom_max_frac, cfg.zoom_max_frac) if cfg.zoom_max_frac else 0.0)
    if shift is None:
        dy = rng.uniform(-cfg.shift_max_frac, cfg.shift_max_frac) * h if cfg.shift_max_frac else 0.0
        dx = rng.uniform(-cfg.shift_max_frac, cfg.shift_max_frac) * w if cfg.shift_max_frac else 0.0
        shift = (dy, dx)
    if angle == 0.0 and zoom == 1.0 and shift == (0.0, 0.0):
        return img.copy()
    theta = math.radians(angle)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # inverse map: output pixel -> source pixel
    oy = (yy - cy - shift[0]) / zoom
    ox = (xx - cx - shift[1]) / zoom
    sy = cos_t * oy - sin_t * ox + cy
    sx = sin_t * oy + cos_t * ox + cx
    iy = np.floor(sy + 0.5 + 1e-9).astype(np.int64)
    ix = np.floor(sx + 0.5 + 1e-9).astype(np.int64)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(img)
    out[valid] = img[iy[valid], ix[valid]]
    return out


# training loop

@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    stop_reason: str = "completed"
    steps: int = 0
    best_epoch: int = -1


def fit(model, inputs: np.ndarray, targets: np.ndarray, cfg: TrainConfig, loss: str = "sparse_cce",
        input_transform: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
        on_epoch: Callable[[int, float], None] | None = None):
    """Mini-batch Adam training.

    ``model`` must expose ``params`` (name -> array), ``forward(x, training, rng)``
    and ``logits(x, training, rng)``. ``loss`` is ``"sparse_cce"`` (targets are
    integer labels, loss on logits) or ``"mse"`` (targets are arrays). The
    parameters of the lowest-loss epoch are restored at the end.
    """
    n = len(inputs)
    if n == 0:
        raise ValueError("fit: empty dataset")
    if len(targets) != n:
        raise ValueError(f"fit: {n} inputs but {len(targets)} targets")
    if loss not in ("sparse_cce", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = TrainHistory()
    best_loss = math.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    best_buffers = model.buffers_snapshot()
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = inputs[idx]
            if input_transform is not None:
                xb = input_transform(xb, rng)
            elif cfg.augment.enabled:
                xb = np.stack([augment(x, cfg.augment, rng) for x in xb])
            xb = Tensor(np.ascontiguousarray(xb, dtype=DTYPE))
            tgt = targets[idx]
            leaves = model.param_tensors()
            if loss == "sparse_cce":
                logits = model.logits(xb, training=True, rng=rng, params=leaves)
                lt = sparse_cce(logits, tgt)
                correct += int((logits.data.argmax(axis=1) == tgt).sum())
            else:
                out = model.forward(xb, training=True, rng=rng, params=leaves)
                lt = mse(out, np.asarray(tgt, dtype=DTYPE))
            backward(lt)
            grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
            adam_step(model.params, grads, state, cfg.adam)
            history.steps += 1
            total += float(lt.data) * len(idx)
        epoch_loss = total / n
        history.loss.append(epoch_loss)
        if loss == "sparse_cce":
            history.accuracy.append(correct / n)
        log.debug("epoch %d loss %.5f", epoch + 1, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            history.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
            best_buffers = model.buffers_snapshot()
        if early_stop_check(history.loss, cfg.early_stop.min_delta, cfg.early_stop.patience):
            history.stop_reason = "early_stopped"
            break
    if history.loss:
        for k, v in best_params.items():
            model.params[k][...] = v
        model.restore_buffers(best_buffers)
    return model, history


def evaluate_loss(model, inputs: np.ndarray, targets: np.ndarray, loss: str = "sparse_cce",
                  batch_size: int = 64) -> float:
    total = 0.0
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            xb = Tensor(inputs[start:start + batch_size])
            tgt = targets[start:start + batch_size]
            if loss == "sparse_cce":
                lt = sparse_cce(model.logits(xb, training=False), tgt)
            else:
                lt = mse(model.forward(xb, training=False), np.asarray(tgt, dtype=DTYPE))
            total += float(lt.data) * len(tgt)
    return total / len(inputs)
