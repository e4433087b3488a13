"""Training data handling and the SGD training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import segnet
from . import tensor_core as tc
from .errors import (
    ConfigError,
    ContractError,
    DegenerateDatasetError,
    DivergenceError,
    EmptyTargetError,
    OversizeTargetError,
    ParseError,
)
from .fileio import atomic_write_text, read_pgm, write_pgm

log = logging.getLogger(__name__)


@dataclass
class LabeledSample:
    image: np.ndarray  # (H, W) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    frame_id: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ContractError(f"image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class TrainConfig:
    learn_rate: float = 0.001
    momentum: float = 0.9
    l2: float = 0.0005
    max_epochs: int = 200
    batch_size: int = 8
    crop_size: int = 64
    translate_px: int = 10
    flip_prob: float = 0.5
    seed: int = 0
    augment: bool = True
    loss_normalization: str = "image"

    def validate(self) -> None:
        if self.crop_size % 8:
            raise ConfigError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if not 0 <= self.translate_px < self.crop_size / 2:
            raise ConfigError("translate_px must lie in [0, crop_size / 2)")
        if self.learn_rate < 0 or not 0 <= self.momentum < 1 or self.l2 < 0:
            raise ConfigError("need learn_rate >= 0, 0 <= momentum < 1, l2 >= 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("max_epochs and batch_size must be >= 1")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")
        if self.loss_normalization not in ("pixel", "image"):
            raise ConfigError(f"unknown loss_normalization {self.loss_normalization!r}")


def compute_class_weights(dataset) -> tuple[float, float]:
    """Inverse-frequency weights ``P_total / (2 * P_c)`` for (background, aircraft)."""
    n_air = sum(int(np.count_nonzero(s.mask)) for s in dataset)
    n_tot = sum(s.mask.size for s in dataset)
    n_bg = n_tot - n_air
    if n_air == 0 or n_bg == 0:
        raise DegenerateDatasetError(
            f"need both classes present, got {n_bg} background / {n_air} aircraft pixels"
        )
    return n_tot / (2 * n_bg), n_tot / (2 * n_air)


def aircraft_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyTargetError("sample has no aircraft pixels")
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def crop_around_aircraft(sample: LabeledSample, crop_size: int, rng: np.random.Generator) -> LabeledSample:
    """Random crop_size square that fully contains the aircraft bounding box.

    The window is drawn uniformly from every valid placement.
    """
    h, w = sample.mask.shape
    if h < crop_size or w < crop_size:
        raise ContractError(f"{h}x{w} image cannot hold a {crop_size} crop")
    r0, r1, c0, c1 = aircraft_bbox(sample.mask)
    if r1 - r0 + 1 > crop_size or c1 - c0 + 1 > crop_size:
        raise OversizeTargetError(
            f"aircraft bbox {r1 - r0 + 1}x{c1 - c0 + 1} exceeds crop {crop_size}"
        )
    top = int(rng.integers(max(0, r1 - crop_size + 1), min(r0, h - crop_size) + 1))
    left = int(rng.integers(max(0, c1 - crop_size + 1), min(c0, w - crop_size) + 1))
    sl = np.s_[top : top + crop_size, left : left + crop_size]
    return LabeledSample(sample.image[sl].copy(), sample.mask[sl].copy(), sample.frame_id,
                         {**sample.meta, "crop": (top, left)})


def apply_transform(a: np.ndarray, flip: bool, dx: int, dy: int) -> np.ndarray:
    """Mirror left/right (optional) then shift by (dx cols, dy rows), zero fill."""
    if flip:
        a = a[:, ::-1]
    out = np.zeros_like(a)
    h, w = a.shape
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = a[src_r, src_c]
    return out


def augment(sample: LabeledSample, config: TrainConfig, rng: np.random.Generator) -> LabeledSample:
    flip = bool(rng.random() < config.flip_prob)
    t = config.translate_px
    dx, dy = (int(v) for v in rng.integers(-t, t + 1, size=2))
    return LabeledSample(
        apply_transform(sample.image, flip, dx, dy),
        apply_transform(sample.mask, flip, dx, dy),
        sample.frame_id,
        {**sample.meta, "flip": flip, "shift": (dx, dy)},
    )


def _batch_loss(net, images, masks, weights, normalization):
    probs = segnet.forward(net, images)
    return tc.weighted_cross_entropy(probs, masks, weights, normalization)


def train(net: segnet.Network, dataset, config: TrainConfig, on_epoch=None):
    """Mini-batch SGD with momentum over ``config.max_epochs`` epochs.

    Every epoch reshuffles the dataset and draws a fresh crop and augmentation
    for each sample, all from one generator seeded by ``config.seed``.
    Returns the network and the per-epoch mean batch loss.
    """
    config.validate()
    dataset = list(dataset)
    if not dataset:
        raise DegenerateDatasetError("empty dataset")
    weights = compute_class_weights(dataset)
    rng = np.random.default_rng(config.seed)
    state = tc.SgdState.for_params(
        net.parameters(), net.decay_flags(),
        learn_rate=config.learn_rate, momentum=config.momentum, l2=config.l2,
    )
    net.train()
    history = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(dataset))
        losses = []
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = []
            for i in order[start : start + config.batch_size]:
                s = crop_around_aircraft(dataset[i], config.crop_size, rng)
                if config.augment:
                    s = augment(s, config, rng)
                batch.append(s)
            images = np.stack([s.image for s in batch])
            masks = np.stack([s.mask for s in batch])
            loss, grad = _batch_loss(net, images, masks, weights, config.loss_normalization)
            if not np.isfinite(loss):
                raise DivergenceError(epoch + 1, b + 1, loss)
            tc.sgd_momentum_step(net.parameters(), segnet.backward(net, grad), state)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        log.info("epoch %d/%d loss %.6f", epoch + 1, config.max_epochs, history[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, history[-1])
    net.eval()
    return net, history


def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = pred.astype(bool), truth.astype(bool)
    union = np.count_nonzero(pred | truth)
    return 1.0 if union == 0 else np.count_nonzero(pred & truth) / union


def gradient_check(
    net: segnet.Network,
    sample: LabeledSample,
    n_params_per_layer: int = 20,
    eps: float = 1e-4,
    dtype=np.float64,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a copy of ``net`` cast to ``dtype``; for every parameter tensor up
    to ``n_params_per_layer`` entries are sampled. Relative error is
    ``|a - n| / max(|a|, |n|, 1e-6)``. Large ``eps`` inflates the error
    through truncation.
    """
    if max(sample.image.shape) > 16:
        raise ContractError("gradient_check is meant for inputs of at most 16x16")
    probe = net.astype(dtype).train()
    x = segnet.prepare_input(sample.image).astype(dtype)
    labels = sample.mask[None].astype(np.int64)
    try:
        weights = compute_class_weights([sample])
    except DegenerateDatasetError:
        weights = (1.0, 1.0)

    def loss_and_grad():
        probs = tc.softmax_pixelwise(segnet.forward_logits(probe, x))
        return tc.weighted_cross_entropy(probs, labels, weights, "pixel")

    _, g_logits = loss_and_grad()
    analytic = segnet.backward(probe, g_logits)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(probe.parameters(), analytic):
        picks = rng.choice(p.size, size=min(n_params_per_layer, p.size), replace=False)
        for flat in picks:
            idx = np.unravel_index(flat, p.shape)
            orig = p[idx]
            p[idx] = orig + eps
            lp, _ = loss_and_grad()
            p[idx] = orig - eps
            lm, _ = loss_and_grad()
            p[idx] = orig
            num = (lp - lm) / (2 * eps)
            a = float(g[idx])
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
    return worst


# -------------------------------------------------------------------------- io


def write_dataset(samples, directory, split: str = "train") -> None:
    """``<stem>.pgm`` / ``<stem>.mask.pgm`` pairs plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = s.frame_id or f"sample_{i:05d}"
        write_pgm(d / f"{stem}.pgm", s.image)
        write_pgm(d / f"{stem}.mask.pgm", (s.mask > 0).astype(np.uint8) * 255)
        entries.append({"stem": stem, "split": split, "meta": s.meta})
    atomic_write_text(d / "manifest.json", json.dumps({"samples": entries}, indent=1, sort_keys=True) + "\n")


def read_dataset(directory, split: str | None = "train") -> list[LabeledSample]:
    d = Path(directory)
    path = d / "manifest.json"
    raw = path.read_bytes()
    try:
        text = raw.decode()
        entries = json.loads(text)["samples"]
        if not isinstance(entries, list):
            raise TypeError
    except UnicodeDecodeError as exc:
        raise ParseError(path, exc.start, "not valid UTF-8") from None
    except json.JSONDecodeError as exc:
        raise ParseError(path, len(text[: exc.pos].encode()), exc.msg) from None
    except (KeyError, TypeError):
        raise ParseError(path, 0, "manifest needs a top-level 'samples' list") from None
    out = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or not isinstance(e.get("stem"), str) or not isinstance(e.get("meta", {}), dict):
            raise ParseError(path, 0, f"sample {i}: expected an object with a string 'stem'")
        if split is not None and e.get("split") != split:
            continue
        stem = e["stem"]
        try:
            image = read_pgm(d / f"{stem}.pgm")
            mask = read_pgm(d / f"{stem}.mask.pgm")
        except OSError as exc:
            raise ParseError(path, 0, f"sample {i}: {exc}") from None
        if image.shape != mask.shape:
            raise ParseError(d / f"{stem}.mask.pgm", 0, f"mask shape {mask.shape} != image shape {image.shape}")
        out.append(LabeledSample(image, (mask > 0).astype(np.uint8), stem, e.get("meta", {})))
    return out


def loss_csv(history) -> str:
    return "epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(history))
