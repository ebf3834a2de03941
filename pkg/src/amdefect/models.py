"""Network descriptors, the CNN / DAE / GAN builders, GAN training and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dataset import ImageTile
from .tensor import DTYPE, BatchNormState, Tensor, no_grad
from .training import AdamConfig, AdamState, adam_step, bce

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FGS1"
CHECKPOINT_VERSION = 1
PARAM_KINDS = {"conv2d": ("kernel", "bias"), "dense": ("weights", "bias"), "batchnorm": ("gamma", "beta")}


@dataclass
class ModelSpec:
    """Ordered layer descriptors plus the input shape (without the batch axis)."""

    name: str
    input_shape: tuple[int, ...]
    layers: list[dict]
    label_set: str | None = None
    class_names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": self.layers,
                "label_set": self.label_set, "class_names": self.class_names, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(d["name"], tuple(d["input_shape"]), [dict(l) for l in d["layers"]],
                   d.get("label_set"), d.get("class_names"), d.get("meta", {}))

    def shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer; raises ValueError if layers do not chain."""
        shape = tuple(self.input_shape)
        out = []
        for i, layer in enumerate(self.layers):
            shape = _layer_output_shape(layer, shape, i)
            out.append(shape)
        return out

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        shape = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            kind = layer["kind"]
            if kind == "conv2d":
                k = layer["kernel"]
                shapes[_pname(i, "kernel")] = (k, k, shape[-1], layer["filters"])
                shapes[_pname(i, "bias")] = (layer["filters"],)
            elif kind == "dense":
                shapes[_pname(i, "weights")] = (shape[-1], layer["units"])
                shapes[_pname(i, "bias")] = (layer["units"],)
            elif kind == "batchnorm":
                shapes[_pname(i, "gamma")] = (shape[-1],)
                shapes[_pname(i, "beta")] = (shape[-1],)
            shape = _layer_output_shape(layer, shape, i)
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def output_shape(self) -> tuple[int, ...]:
        return self.shapes()[-1]


def _pname(i: int, what: str) -> str:
    return f"{i:02d}.{what}"


def _layer_output_shape(layer: dict, shape: tuple[int, ...], i: int) -> tuple[int, ...]:
    kind = layer["kind"]
    if kind in ("relu", "sigmoid", "softmax", "dropout", "rescale", "batchnorm"):
        return shape
    if kind == "conv2d":
        if len(shape) != 3:
            raise ValueError(f"layer {i} conv2d needs an HxWxC input, got {shape}")
        h, w, _ = shape
        s, k, pad = layer.get("stride", 1), layer["kernel"], layer.get("padding", "same")
        return (T.conv_output_size(h, k, s, pad), T.conv_output_size(w, k, s, pad), layer["filters"])
    if kind == "maxpool2d":
        if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
            raise ValueError(f"layer {i} maxpool2d cannot pool shape {shape}")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if kind == "upsample2d":
        return (shape[0] * 2, shape[1] * 2, shape[2])
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "dense":
        if len(shape) != 1:
            raise ValueError(f"layer {i} dense needs a flat input, got {shape}")
        return (layer["units"],)
    if kind == "reshape":
        target = tuple(layer["shape"])
        if int(np.prod(target)) != int(np.prod(shape)):
            raise ValueError(f"layer {i} cannot reshape {shape} to {target}")
        return target
    raise ValueError(f"layer {i}: unknown kind {kind!r}")


class Network:
    """Parameters and buffers for one ModelSpec, with a graph-building forward pass."""

    def __init__(self, spec: ModelSpec, seed: int = 0, params: dict[str, np.ndarray] | None = None):
        spec.shapes()
        self.spec = spec
        self.bn: dict[str, BatchNormState] = {}
        shape = tuple(spec.input_shape)
        for i, layer in enumerate(spec.layers):
            if layer["kind"] == "batchnorm":
                self.bn[f"{i:02d}"] = BatchNormState(shape[-1], layer.get("momentum", 0.99),
                                                     layer.get("eps", 1e-5))
            shape = _layer_output_shape(layer, shape, i)
        self.params = params if params is not None else init_params(spec, seed)
        self.metadata: dict = {}

    # buffers are the batchnorm running moments
    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for key, st in self.bn.items():
            out[f"{key}.running_mean"] = st.running_mean
            out[f"{key}.running_var"] = st.running_var
        return out

    def buffers_snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.buffers().items()}

    def restore_buffers(self, snap: dict[str, np.ndarray]) -> None:
        for key, st in self.bn.items():
            st.running_mean = snap[f"{key}.running_mean"].astype(DTYPE).copy()
            st.running_var = snap[f"{key}.running_var"].astype(DTYPE).copy()

    def param_tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def copy(self) -> Network:
        net = Network(self.spec, params={k: v.copy() for k, v in self.params.items()})
        net.restore_buffers(self.buffers_snapshot())
        net.metadata = dict(self.metadata)
        return net

    def forward(self, x: Tensor | np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None, params: dict[str, Tensor] | None = None,
                start: int = 0, stop: int | None = None) -> Tensor:
        """Run layers ``start:stop``; graph recording follows the ``params`` leaves."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=DTYPE))
        expected = self.spec.input_shape if start == 0 else self.spec.shapes()[start - 1]
        if tuple(x.shape[1:]) != tuple(expected):
            raise T.ShapeError(f"{self.spec.name}: expected input (B, {', '.join(map(str, expected))}), "
                               f"got {x.shape}")
        if params is None:
            params = self.param_tensors(requires_grad=False)
        if rng is None:
            rng = np.random.default_rng(0)
        layers = self.spec.layers
        stop = len(layers) if stop is None else stop
        for i in range(start, stop):
            layer = layers[i]
            kind = layer["kind"]
            if kind == "rescale":
                if layer["scale"] != 1.0:
                    x = T.scale(x, layer["scale"])
            elif kind == "conv2d":
                x = T.conv2d(x, params[_pname(i, "kernel")], params[_pname(i, "bias")],
                             stride=layer.get("stride", 1), padding=layer.get("padding", "same"))
            elif kind == "dense":
                x = T.dense(x, params[_pname(i, "weights")], params[_pname(i, "bias")])
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "sigmoid":
                x = T.sigmoid(x)
            elif kind == "softmax":
                x = T.softmax(x)
            elif kind == "maxpool2d":
                x = T.maxpool2d(x)
            elif kind == "upsample2d":
                x = T.upsample2d(x)
            elif kind == "dropout":
                x = T.dropout(x, layer["rate"], training=training, seed=rng)
            elif kind == "flatten":
                x = T.flatten(x)
            elif kind == "reshape":
                x = T.reshape(x, (x.shape[0],) + tuple(layer["shape"]))
            elif kind == "batchnorm":
                x = T.batchnorm(x, params[_pname(i, "gamma")], params[_pname(i, "beta")],
                                self.bn[f"{i:02d}"], training=training)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return x

    def logits(self, x, training: bool = False, rng=None, params=None) -> Tensor:
        """Forward pass without a trailing softmax layer."""
        stop = len(self.spec.layers)
        if self.spec.layers[-1]["kind"] == "softmax":
            stop -= 1
        return self.forward(x, training=training, rng=rng, params=params, stop=stop)


def init_params(spec: ModelSpec, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded Glorot-uniform weights, zero biases, batchnorm gamma=1 and beta=0.

    For a conv kernel the fans are kh*kw*cin and kh*kw*cout.
    """
    rng = np.random.default_rng(seed)
    params = {}
    shapes = spec.param_shapes()
    for i, layer in enumerate(spec.layers):
        kind = layer["kind"]
        if kind in ("conv2d", "dense"):
            wname = _pname(i, "kernel" if kind == "conv2d" else "weights")
            wshape = shapes[wname]
            receptive = int(np.prod(wshape[:-2]))
            fan_in, fan_out = receptive * wshape[-2], receptive * wshape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[wname] = rng.uniform(-bound, bound, size=wshape).astype(DTYPE)
            params[_pname(i, "bias")] = np.zeros(shapes[_pname(i, "bias")], dtype=DTYPE)
        elif kind == "batchnorm":
            params[_pname(i, "gamma")] = np.ones(shapes[_pname(i, "gamma")], dtype=DTYPE)
            params[_pname(i, "beta")] = np.zeros(shapes[_pname(i, "beta")], dtype=DTYPE)
    return params


# builders

def build_cnn(input_shape=(400, 400, 3), num_classes: int = 4, filters=(16, 32, 64),
              dropout_rate: float = 0.5, hidden_units: int = 128, input_range: str = "unit",
              label_set: str | None = None, class_names=None) -> ModelSpec:
    """Rescale, three conv/ReLU/maxpool stages, dropout, dense(128)+ReLU, dense(K)+softmax."""
    h, w = input_shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"CNN input height and width must be divisible by 8, got {h}x{w}")
    if input_range not in ("unit", "8bit"):
        raise ValueError("input_range must be 'unit' or '8bit'")
    layers: list[dict] = [{"kind": "rescale", "scale": 1.0 / 255.0 if input_range == "8bit" else 1.0}]
    for f in filters:
        layers += [{"kind": "conv2d", "filters": f, "kernel": 3, "stride": 1, "padding": "same"},
                   {"kind": "relu"}, {"kind": "maxpool2d", "size": 2}]
    layers += [{"kind": "flatten"}, {"kind": "dropout", "rate": dropout_rate},
               {"kind": "dense", "units": hidden_units}, {"kind": "relu"},
               {"kind": "dense", "units": num_classes}, {"kind": "softmax"}]
    if class_names is not None and len(class_names) != num_classes:
        raise ValueError("class_names length must equal num_classes")
    return ModelSpec("cnn", tuple(input_shape), layers, label_set,
                     list(class_names) if class_names else None)


def build_dae(input_shape=(400, 400, 3), filters: int = 32) -> ModelSpec:
    """Five 3x3 convs: two encoder stages with 2x2 pooling, two decoder stages with 2x upsampling."""
    h, w, c = input_shape
    if h % 4 or w % 4:
        raise ValueError(f"DAE input height and width must be divisible by 4, got {h}x{w}")
    conv = {"kind": "conv2d", "filters": filters, "kernel": 3, "stride": 1, "padding": "same"}
    layers = [dict(conv), {"kind": "relu"}, {"kind": "maxpool2d", "size": 2},
              dict(conv), {"kind": "relu"}, {"kind": "maxpool2d", "size": 2}]
    bottleneck = len(layers)
    layers += [{"kind": "upsample2d", "factor": 2}, dict(conv), {"kind": "relu"},
               {"kind": "upsample2d", "factor": 2}, dict(conv), {"kind": "relu"},
               {"kind": "conv2d", "filters": c, "kernel": 3, "stride": 1, "padding": "same"},
               {"kind": "sigmoid"}]
    return ModelSpec("dae", tuple(input_shape), layers, meta={"bottleneck_layer": bottleneck})


def build_gan(latent_dim: int = 100, image_shape=(64, 64, 3), seed_channels: int = 64,
              gen_filters=(32, 16), disc_filters=(16, 32, 64), disc_dropout: float = 0.3):
    """Generator: dense -> two conv/upsample stages -> output conv; discriminator: three strided convs -> dense(1)."""
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    h, w, c = image_shape
    if h % 4 or w % 4:
        raise ValueError(f"GAN image height and width must be divisible by 4, got {h}x{w}")
    seed_shape = (h // 4, w // 4, seed_channels)
    g_layers: list[dict] = [
        {"kind": "dense", "units": int(np.prod(seed_shape))}, {"kind": "relu"}, {"kind": "batchnorm"},
        {"kind": "reshape", "shape": list(seed_shape)},
    ]
    for f in gen_filters:
        g_layers += [{"kind": "conv2d", "filters": f, "kernel": 3, "stride": 1, "padding": "same"},
                     {"kind": "relu"}, {"kind": "batchnorm"}, {"kind": "upsample2d", "factor": 2}]
    g_layers += [{"kind": "conv2d", "filters": c, "kernel": 3, "stride": 1, "padding": "same"},
                 {"kind": "sigmoid"}]
    d_layers: list[dict] = []
    for f in disc_filters:
        d_layers += [{"kind": "conv2d", "filters": f, "kernel": 3, "stride": 2, "padding": "same"},
                     {"kind": "relu"}, {"kind": "dropout", "rate": disc_dropout}]
    d_layers += [{"kind": "flatten"}, {"kind": "dense", "units": 1}, {"kind": "sigmoid"}]
    gen = ModelSpec("generator", (latent_dim,), g_layers, meta={"latent_dim": latent_dim})
    disc = ModelSpec("discriminator", tuple(image_shape), d_layers)
    return gen, disc


# inference helpers

def _stack(tiles) -> np.ndarray:
    if isinstance(tiles, np.ndarray):
        return tiles.astype(DTYPE, copy=False)
    return np.stack([t.pixels if isinstance(t, ImageTile) else np.asarray(t, dtype=DTYPE) for t in tiles])


def _check_tiles(net: Network, tiles) -> np.ndarray:
    expected = tuple(net.spec.input_shape)
    if not isinstance(tiles, np.ndarray):
        for k, t in enumerate(tiles):
            shape = t.pixels.shape if isinstance(t, ImageTile) else np.shape(t)
            if tuple(shape) != expected:
                name = t.source_id if isinstance(t, ImageTile) and t.source_id else f"#{k}"
                raise T.ShapeError(f"tile {name} has shape {tuple(shape)}, model expects {expected}")
        if len(tiles) == 0:
            return np.zeros((0,) + expected, dtype=DTYPE)
    elif tiles.shape[1:] != expected:
        raise T.ShapeError(f"tiles have shape {tiles.shape[1:]}, model expects {expected}")
    return _stack(tiles)


def predict(cnn: Network, tiles, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities (N x K) and argmax labels, in input order."""
    x = _check_tiles(cnn, tiles)
    k = cnn.spec.output_shape()[0]
    probs = np.zeros((len(x), k), dtype=DTYPE)
    with no_grad():
        for s in range(0, len(x), batch_size):
            probs[s:s + batch_size] = cnn.forward(x[s:s + batch_size]).data
    return probs, probs.argmax(axis=1)


def denoise(dae: Network, noisy_tiles, batch_size: int = 32) -> np.ndarray:
    x = _check_tiles(dae, noisy_tiles)
    out = np.zeros_like(x)
    with no_grad():
        for s in range(0, len(x), batch_size):
            out[s:s + batch_size] = dae.forward(x[s:s + batch_size]).data
    return out


def dae_encode(dae: Network, x) -> Tensor:
    return dae.forward(x, stop=dae.spec.meta["bottleneck_layer"])


def dae_decode(dae: Network, code) -> Tensor:
    return dae.forward(code, start=dae.spec.meta["bottleneck_layer"])


# GAN

@dataclass
class GanConfig:
    steps: int = 200
    batch_size: int = 16
    latent_dim: int = 100
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(lr=2e-4, beta1=0.5))
    seed: int = 0
    calibration_batches: int = 8


@dataclass
class GanHistory:
    d_loss: list[float] = field(default_factory=list)
    g_loss: list[float] = field(default_factory=list)


def gan_discriminator_step(gen: Network, disc: Network, real: np.ndarray, rng: np.random.Generator,
                           state: AdamState, cfg: GanConfig) -> float:
    """Update only the discriminator on one real batch (label 1) and one fake batch (label 0)."""
    b = len(real)
    z = rng.standard_normal((b, cfg.latent_dim)).astype(DTYPE)
    with no_grad():
        fake = gen.forward(z, training=True, rng=rng).data
    leaves = disc.param_tensors()
    batch = Tensor(np.concatenate([real, fake]).astype(DTYPE))
    pred = disc.forward(batch, training=True, rng=rng, params=leaves)
    labels = np.concatenate([np.ones(b), np.zeros(b)])
    loss = bce(pred, labels)
    T.backward(loss)
    adam_step(disc.params, {k: t.grad for k, t in leaves.items() if t.grad is not None}, state, cfg.adam)
    return float(loss.data)


def gan_generator_step(gen: Network, disc: Network, b: int, rng: np.random.Generator,
                       state: AdamState, cfg: GanConfig) -> float:
    """Update only the generator so that fresh fakes are scored as real."""
    z = Tensor(rng.standard_normal((b, cfg.latent_dim)).astype(DTYPE))
    g_leaves = gen.param_tensors()
    fake = gen.forward(z, training=True, rng=rng, params=g_leaves)
    d_frozen = disc.param_tensors(requires_grad=False)
    pred = disc.forward(fake, training=True, rng=rng, params=d_frozen)
    loss = bce(pred, np.ones(b))
    T.backward(loss)
    adam_step(gen.params, {k: t.grad for k, t in g_leaves.items() if t.grad is not None}, state, cfg.adam)
    return float(loss.data)


def calibrate_batchnorm(gen: Network, cfg: GanConfig, rng: np.random.Generator) -> None:
    """Replace running moments by exact averages of batch moments over random latents."""
    if not gen.bn:
        return
    sums = {k: [np.zeros_like(s.running_mean), np.zeros_like(s.running_var)] for k, s in gen.bn.items()}
    saved_momentum = {k: s.momentum for k, s in gen.bn.items()}
    for s in gen.bn.values():
        s.momentum = 0.0
    with no_grad():
        for _ in range(cfg.calibration_batches):
            z = rng.standard_normal((max(cfg.batch_size, 16), cfg.latent_dim)).astype(DTYPE)
            gen.forward(z, training=True, rng=rng)
            for k, s in gen.bn.items():
                sums[k][0] += s.running_mean
                sums[k][1] += s.running_var
    for k, s in gen.bn.items():
        s.momentum = saved_momentum[k]
        s.running_mean = (sums[k][0] / cfg.calibration_batches).astype(DTYPE)
        s.running_var = (sums[k][1] / cfg.calibration_batches).astype(DTYPE)


def train_gan(real_tiles, cfg: GanConfig | None = None, label: str | None = None,
              image_shape=None, gen: Network | None = None, disc: Network | None = None):
    """Alternate discriminator and generator Adam steps (1:1) on tiles of a single class.

    Returns (generator, discriminator, history).
    """
    cfg = cfg or GanConfig()
    real = _stack(real_tiles)
    if len(real) < cfg.batch_size:
        raise ValueError(f"GAN training needs at least batch_size={cfg.batch_size} tiles, got {len(real)}")
    image_shape = tuple(image_shape or real.shape[1:])
    if gen is None or disc is None:
        gspec, dspec = build_gan(cfg.latent_dim, image_shape)
        gen = Network(gspec, seed=cfg.seed)
        disc = Network(dspec, seed=cfg.seed + 1)
    gen.metadata["label"] = label
    rng = np.random.default_rng(cfg.seed)
    g_state, d_state = AdamState(), AdamState()
    hist = GanHistory()
    for step in range(cfg.steps):
        idx = rng.choice(len(real), size=cfg.batch_size, replace=False)
        hist.d_loss.append(gan_discriminator_step(gen, disc, real[idx], rng, d_state, cfg))
        hist.g_loss.append(gan_generator_step(gen, disc, cfg.batch_size, rng, g_state, cfg))
    calibrate_batchnorm(gen, cfg, rng)
    gen.metadata.update({"seed": cfg.seed, "steps": cfg.steps,
                         "final_d_loss": hist.d_loss[-1] if hist.d_loss else None,
                         "final_g_loss": hist.g_loss[-1] if hist.g_loss else None})
    return gen, disc, hist


def gan_sample(gen: Network, n: int, seed: int = 0, label: str | None = None,
               batch_size: int = 64) -> list[ImageTile]:
    label = label or gen.metadata.get("label") or "no-defect"
    if n <= 0:
        return []
    latent = gen.spec.input_shape[0]
    z = np.random.default_rng(seed).standard_normal((n, latent)).astype(DTYPE)
    out = []
    with no_grad():
        for s in range(0, n, batch_size):
            imgs = gen.forward(z[s:s + batch_size], training=False).data
            out.extend(np.clip(imgs, 0.0, 1.0))
    return [ImageTile(img, f"gan_{seed}_{k}", label) for k, img in enumerate(out)]


# checkpoints

class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or malformed header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    """Stored arrays disagree with the stored spec."""


class CheckpointChecksumError(CheckpointError):
    """Content does not match the trailing CRC32."""


def checkpoint_bytes(net: Network) -> bytes:
    """Serialize spec, parameters and batchnorm buffers.

    Layout: magic ``FGS1``, u32 version, u32 header length, JSON header,
    u32 array count, then per array (sorted by name) u16 name length, UTF-8
    name, u32 element count, little-endian f32 data; finally the u32 CRC32 of
    everything before it. All integers are little-endian.
    """
    header = {"spec": net.spec.to_dict(), "metadata": net.metadata}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    arrays = dict(net.params)
    arrays.update(net.buffers())
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        data = np.ascontiguousarray(arrays[name], dtype="<f4")
        encoded = name.encode("utf-8")
        parts += [struct.pack("<H", len(encoded)), encoded, struct.pack("<I", data.size), data.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(net: Network, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(net))


class _Reader:
    def __init__(self, buf: bytes, origin: str):
        self.buf, self.pos, self.origin = buf, 0, origin

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.origin}: file ends at byte {len(self.buf)}, "
                                           f"needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def checkpoint_from_bytes(buf: bytes, origin: str = "<bytes>") -> Network:
    r = _Reader(buf, origin)
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{origin}: not a model checkpoint (bad magic bytes)")
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{origin}: unsupported checkpoint version {version}")
    blob = r.take(r.u32())
    try:
        header = json.loads(blob.decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        spec.shapes()
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{origin}: malformed spec block ({exc})") from exc
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(struct.unpack("<H", r.take(2))[0]).decode("utf-8", errors="replace")
        count = r.u32()
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(DTYPE)
    end = r.pos
    stored = r.u32()
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{origin}: {len(buf) - r.pos} trailing bytes")
    if zlib.crc32(buf[:end]) != stored:
        raise CheckpointChecksumError(f"{origin}: checksum mismatch, file is corrupted")
    net = Network(spec)
    expected = spec.param_shapes()
    expected.update({k: v.shape for k, v in net.buffers().items()})
    if set(arrays) != set(expected):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CheckpointShapeError(f"{origin}: array names mismatch (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].size != int(np.prod(shape)):
            raise CheckpointShapeError(f"{origin}: array {name} has {arrays[name].size} values, "
                                       f"spec needs {int(np.prod(shape))}")
    net.params = {k: arrays[k].reshape(s).copy() for k, s in spec.param_shapes().items()}
    net.restore_buffers({k: arrays[k] for k in net.buffers()})
    net.metadata = header.get("metadata", {})
    return net


def load_checkpoint(path: str | Path) -> Network:
    path = Path(path)
    return checkpoint_from_bytes(path.read_bytes(), str(path))


def model_id(net: Network) -> str:
    return hashlib.sha256(checkpoint_bytes(net)).hexdigest()[:12]
