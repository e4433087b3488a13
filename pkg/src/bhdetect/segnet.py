"""Encoder/decoder pixel classifier with memorised max-pool indices.

Each encoder block is conv -> batchnorm -> relu -> 2x2 maxpool. Each decoder
block unpools with the indices of its mirror encoder, then conv -> batchnorm ->
relu. The last decoder conv emits one channel per class and its batchnorm output
goes straight into a pixel-wise softmax.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ContractError, InputShapeError, ParseError
from .fileio import atomic_write_bytes


@dataclass
class NetworkConfig:
    encoder_layers: int = 3
    filters_per_layer: int = 64
    input_channels: int = 1
    num_classes: int = 2
    threshold: float = 0.999

    def validate(self) -> None:
        if self.encoder_layers < 1:
            raise ConfigError("encoder_layers must be >= 1")
        if self.filters_per_layer < 1:
            raise ConfigError("filters_per_layer must be >= 1")
        if self.input_channels != 1:
            raise ConfigError("only single-channel (greyscale) input is supported")
        if self.num_classes != 2:
            raise ConfigError("num_classes must be 2 (background, aircraft)")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    @property
    def divisor(self) -> int:
        return 2**self.encoder_layers


@dataclass
class ConvBlock:
    weight: np.ndarray
    bias: np.ndarray
    bn: tc.BatchNormState

    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias, self.bn.gamma, self.bn.beta]

    def astype(self, dtype) -> "ConvBlock":
        return ConvBlock(self.weight.astype(dtype), self.bias.astype(dtype), self.bn.astype(dtype))


@dataclass
class _BlockCache:
    conv_in: np.ndarray
    bn_cache: tc.BatchNormCache
    bn_out: np.ndarray
    pool_indices: np.ndarray | None = None
    plane: tuple[int, int] | None = None


@dataclass
class Network:
    config: NetworkConfig
    encoders: list[ConvBlock]
    decoders: list[ConvBlock]
    training: bool = True
    _cache: list[_BlockCache] | None = field(default=None, repr=False)

    @property
    def blocks(self) -> list[ConvBlock]:
        return self.encoders + self.decoders

    @property
    def dtype(self):
        return self.encoders[0].weight.dtype

    def parameters(self) -> list[np.ndarray]:
        return [p for blk in self.blocks for p in blk.params()]

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.encoders)):
            names += [f"enc{i + 1}.{s}" for s in ("weight", "bias", "gamma", "beta")]
        for i in range(len(self.decoders)):
            names += [f"dec{i + 1}.{s}" for s in ("weight", "bias", "gamma", "beta")]
        return names

    def decay_flags(self) -> list[bool]:
        """L2 applies to conv weights only."""
        return [name.endswith(".weight") for name in self.parameter_names()]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        self._cache = None
        return self

    def astype(self, dtype) -> "Network":
        """Deep copy with every parameter and running statistic cast to ``dtype``."""
        return Network(
            config=NetworkConfig(**asdict(self.config)),
            encoders=[b.astype(dtype) for b in self.encoders],
            decoders=[b.astype(dtype) for b in self.decoders],
            training=self.training,
        )

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def build_network(config: NetworkConfig | None = None, rng=None) -> Network:
    config = config or NetworkConfig()
    config.validate()
    rng = np.random.default_rng(rng)
    f = config.filters_per_layer
    L = config.encoder_layers

    def block(cin: int, cout: int) -> ConvBlock:
        return ConvBlock(
            weight=tc.msra_init((cout, cin, 3, 3), rng),
            bias=np.zeros(cout, np.float32),
            bn=tc.BatchNormState.fresh(cout),
        )

    encoders = [block(config.input_channels if i == 0 else f, f) for i in range(L)]
    decoders = [block(f, config.num_classes if i == L - 1 else f) for i in range(L)]
    return Network(config=config, encoders=encoders, decoders=decoders)


def closed_form_parameter_count(config: NetworkConfig) -> int:
    f, L, c_in, k = (
        config.filters_per_layer,
        config.encoder_layers,
        config.input_channels,
        config.num_classes,
    )
    conv = lambda a, b: 9 * a * b + b  # noqa: E731
    bn = lambda b: 2 * b  # noqa: E731
    total = conv(c_in, f) + bn(f)
    total += (L - 1) * (conv(f, f) + bn(f))  # deeper encoders
    total += (L - 1) * (conv(f, f) + bn(f))  # all decoders but the head
    total += conv(f, k) + bn(k)
    return total


def shape_schedule(config: NetworkConfig, n: int, h: int, w: int) -> dict[str, tuple]:
    """Closed-form activation shapes for an (n, 1, h, w) input."""
    f, L = config.filters_per_layer, config.encoder_layers
    sched = {}
    for i in range(L):
        sched[f"enc{i + 1}.conv"] = (n, f, h >> i, w >> i)
        sched[f"enc{i + 1}.pool"] = (n, f, h >> (i + 1), w >> (i + 1))
    for j in range(L):
        level = L - 1 - j
        cout = config.num_classes if j == L - 1 else f
        sched[f"dec{j + 1}.unpool"] = (n, f, h >> level, w >> level)
        sched[f"dec{j + 1}.conv"] = (n, cout, h >> level, w >> level)
    return sched


def prepare_input(images) -> np.ndarray:
    """8-bit greyscale image(s) -> float32 (N, 1, H, W) scaled to [0, 1]."""
    a = np.asarray(images)
    if a.ndim == 2:
        a = a[None]
    if a.ndim == 3:
        a = a[:, None]
    if a.ndim != 4:
        raise InputShapeError(f"cannot interpret image array of shape {a.shape}")
    if a.dtype == np.uint8:
        return a.astype(np.float32) / np.float32(255.0)
    return a


def _check_input(net: Network, x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != net.config.input_channels:
        raise InputShapeError(f"expected (N, {net.config.input_channels}, H, W), got {x.shape}")
    d = net.config.divisor
    h, w = x.shape[2:]
    if h % d or w % d:
        raise InputShapeError(
            f"input {h}x{w} must have H and W divisible by {d} "
            f"(2^{net.config.encoder_layers})"
        )


def forward_logits(net: Network, x: np.ndarray, trace: dict | None = None) -> np.ndarray:
    _check_input(net, x)
    x = x.astype(net.dtype, copy=False)
    training = net.training
    cache: list[_BlockCache] = []
    stack: list[tuple[np.ndarray, tuple[int, int]]] = []

    for i, blk in enumerate(net.encoders):
        z = tc.conv2d_forward(x, blk.weight, blk.bias)
        y, bnc = tc.batchnorm_forward(z, blk.bn, training)
        a = tc.relu(y)
        pooled, idx = tc.maxpool2x2(a)
        stack.append((idx, a.shape[2:]))
        if training:
            cache.append(_BlockCache(x, bnc, y, idx, a.shape[2:]))
        if trace is not None:
            trace[f"enc{i + 1}.conv"] = z.shape
            trace[f"enc{i + 1}.pool"] = pooled.shape
        x = pooled

    last = len(net.decoders) - 1
    for j, blk in enumerate(net.decoders):
        idx, plane = stack.pop()
        if idx.shape != x.shape:
            raise ContractError(f"decoder {j + 1} got indices {idx.shape} for input {x.shape}")
        u = tc.maxunpool2x2(x, idx, *plane)
        z = tc.conv2d_forward(u, blk.weight, blk.bias)
        y, bnc = tc.batchnorm_forward(z, blk.bn, training)
        if training:
            cache.append(_BlockCache(u, bnc, y, idx, plane))
        if trace is not None:
            trace[f"dec{j + 1}.unpool"] = u.shape
            trace[f"dec{j + 1}.conv"] = z.shape
        x = y if j == last else tc.relu(y)

    net._cache = cache if training else None
    return x


def forward(net: Network, images, trace: dict | None = None) -> np.ndarray:
    """Per-pixel class probabilities, shape (N, 2, H, W)."""
    return tc.softmax_pixelwise(forward_logits(net, prepare_input(images), trace))


def backward(net: Network, grad_logits: np.ndarray) -> list[np.ndarray]:
    """Gradients for ``net.parameters()`` (same order) given dLoss/dlogits.

    Requires the cache left by a training-mode forward; the cache is not
    consumed, so repeated calls return identical gradients.
    """
    cache = net._cache
    if not cache:
        raise ContractError("backward() needs a live cache from a training-mode forward")
    L = len(net.encoders)
    grads: list[list[np.ndarray]] = [None] * (2 * L)  # type: ignore[list-item]
    g = grad_logits.astype(net.dtype, copy=False)

    for j in reversed(range(L)):
        blk, c = net.decoders[j], cache[L + j]
        if j != L - 1:
            g = tc.relu_backward(c.bn_out, g)
        g, g_gamma, g_beta = tc.batchnorm_backward(blk.bn, g, c.bn_cache)
        g, g_w, g_b = tc.conv2d_backward(c.conv_in, blk.weight, g)
        grads[L + j] = [g_w, g_b, g_gamma, g_beta]
        g = tc.maxunpool2x2_backward(g, c.pool_indices)

    for i in reversed(range(L)):
        blk, c = net.encoders[i], cache[i]
        g = tc.maxpool2x2_backward(g, c.pool_indices, *c.plane)
        g = tc.relu_backward(c.bn_out, g)
        g, g_gamma, g_beta = tc.batchnorm_backward(blk.bn, g, c.bn_cache)
        g, g_w, g_b = tc.conv2d_backward(c.conv_in, blk.weight, g)
        grads[i] = [g_w, g_b, g_gamma, g_beta]

    return [p.astype(net.dtype, copy=False) for blk in grads for p in blk]


def predict_proba(net: Network, images, batch_size: int = 8) -> np.ndarray:
    """Inference-mode aircraft probability maps, shape (N, H, W)."""
    was_training = net.training
    net.eval()
    x = prepare_input(images)
    out = []
    for s in range(0, x.shape[0], batch_size):
        out.append(forward(net, x[s : s + batch_size])[:, tc.AIRCRAFT])
    if was_training:
        net.train()
    return np.concatenate(out, axis=0)


def threshold_mask(aircraft_prob: np.ndarray, threshold: float) -> np.ndarray:
    return aircraft_prob >= threshold


def segment(net: Network, images, threshold: float | None = None) -> np.ndarray:
    """Binary aircraft mask(s): aircraft iff P(aircraft) >= threshold."""
    t = net.config.threshold if threshold is None else threshold
    masks = threshold_mask(predict_proba(net, images), t)
    return masks[0] if np.asarray(images).ndim == 2 else masks


# ------------------------------------------------------------------- checkpoints

_MAGIC = b"BHDSEGv1"
_HEADER_LEN = struct.Struct("<Q")


def _named_arrays(net: Network) -> list[tuple[str, np.ndarray]]:
    out = []
    for prefix, blocks in (("enc", net.encoders), ("dec", net.decoders)):
        for i, blk in enumerate(blocks, 1):
            out += [
                (f"{prefix}{i}.weight", blk.weight),
                (f"{prefix}{i}.bias", blk.bias),
                (f"{prefix}{i}.gamma", blk.bn.gamma),
                (f"{prefix}{i}.beta", blk.bn.beta),
                (f"{prefix}{i}.running_mean", blk.bn.running_mean),
                (f"{prefix}{i}.running_var", blk.bn.running_var),
            ]
    return out


def checkpoint_bytes(net: Network) -> bytes:
    """Serialise config, parameters and running statistics.

    Layout: 8-byte magic, little-endian u64 header length, a JSON header
    describing every tensor (name, shape, byte offset into the payload), then
    the little-endian float32 payload.
    """
    tensors, blobs, offset = [], [], 0
    for name, arr in _named_arrays(net):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    bn = net.encoders[0].bn
    header = {
        "format": "bhdetect-segnet",
        "config": asdict(net.config),
        "bn_eps": bn.eps,
        "bn_momentum": bn.momentum,
        "dtype": "<f4",
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return _MAGIC + _HEADER_LEN.pack(len(hb)) + hb + b"".join(blobs)


def save_checkpoint(net: Network, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(net))


def load_checkpoint(path) -> Network:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(_MAGIC) + _HEADER_LEN.size:
        raise ParseError(path, len(data), "file too short for a checkpoint header")
    if data[: len(_MAGIC)] != _MAGIC:
        raise ParseError(path, 0, "bad magic; not a bhdetect checkpoint")
    pos = len(_MAGIC)
    (hlen,) = _HEADER_LEN.unpack_from(data, pos)
    pos += _HEADER_LEN.size
    if pos + hlen > len(data):
        raise ParseError(path, pos, f"header length {hlen} runs past end of file")
    try:
        header = json.loads(data[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        where = pos + getattr(exc, "pos", getattr(exc, "start", 0))
        raise ParseError(path, where, f"malformed header: {exc}") from None
    payload = pos + hlen
    try:
        config = NetworkConfig(**header["config"])
        config.validate()
        tensors = {t["name"]: t for t in header["tensors"]}
        eps, momentum = float(header["bn_eps"]), float(header["bn_momentum"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, pos, f"invalid header contents: {exc}") from None

    net = build_network(config, rng=0)
    for name, arr in _named_arrays(net):
        t = tensors.get(name)
        if t is None:
            raise ParseError(path, pos, f"missing tensor {name!r}")
        if list(t["shape"]) != list(arr.shape):
            raise ParseError(path, pos, f"tensor {name!r} has shape {t['shape']}, expected {list(arr.shape)}")
        start = payload + int(t["offset"])
        end = start + arr.size * 4
        if int(t["nbytes"]) != arr.size * 4 or end > len(data):
            raise ParseError(path, min(start, len(data)), f"tensor {name!r} truncated")
        arr[...] = np.frombuffer(data, dtype="<f4", count=arr.size, offset=start).reshape(arr.shape)
    for blk in net.blocks:
        blk.bn.eps, blk.bn.momentum = eps, momentum
    return net.eval()
