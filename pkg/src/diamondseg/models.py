"""Toy-scale FCN-8s, DeepLabV3 and DeepLabV3+ plus training and prediction."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, InvalidConfig, ShapeMismatch
from .imaging import NUM_CLASSES, Sample
from .metrics import ConfusionMatrix, confusion, mean_iou
from .nn import functional as F
from .nn.layers import Conv2d, GlobalAvgPool, Module, ReLU, Upsample, conv_bn_relu, separable_block
from .nn.optim import LR_BOUNDS, Adam
from .nn.serialize import load_weights, save_weights, weights_hash
from .preprocess import normalize

FAMILIES = ("fcn8", "deeplabv3", "deeplabv3plus")
LOSSES = ("cross_entropy", "focal")


@dataclass(frozen=True)
class ArchConfig:
    family: str = "deeplabv3plus"
    base_width: int = 16
    num_classes: int = NUM_CLASSES
    aspp_rates: tuple[int, ...] = (1, 2, 4)
    input_resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidConfig(f"family must be one of {FAMILIES}")
        if self.num_classes != NUM_CLASSES:
            raise InvalidConfig("num_classes must be 4")
        if self.input_resolution % 16 or self.input_resolution <= 0:
            raise InvalidConfig("input_resolution must be a positive multiple of 16")
        if self.family == "fcn8" and self.input_resolution % 32:
            raise InvalidConfig("fcn8 needs a resolution divisible by 32 (stride-32 stage)")
        if self.base_width < 4:
            raise InvalidConfig("base_width must be >= 4")
        if not self.aspp_rates or min(self.aspp_rates) < 1:
            raise InvalidConfig("aspp_rates must be positive")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 20
    lr: float = 1e-4
    loss: str = "focal"
    focal_gamma: float = 2.0
    focal_alpha: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.epochs <= 200:
            raise InvalidConfig("epochs must lie in [1, 200]")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not LR_BOUNDS[0] <= self.lr <= LR_BOUNDS[1]:
            raise InvalidConfig(f"lr must lie in {LR_BOUNDS}")
        if self.loss not in LOSSES:
            raise InvalidConfig(f"loss must be one of {LOSSES}")


def _concat(parts):
    return np.concatenate(parts, axis=1), [p.shape[1] for p in parts]


def _split(dy, widths):
    return np.split(dy, np.cumsum(widths)[:-1], axis=1)


class SegmentationModel(Module):
    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.config.input_resolution,) * 2:
            raise ShapeMismatch(
                f"expected (N, 1, {self.config.input_resolution}, {self.config.input_resolution}), got {x.shape}"
            )
        return self._forward(x, train)

    def _forward(self, x, train):
        raise NotImplementedError


class FCN8(SegmentationModel):
    """Separable-conv encoder to stride 32 with score fusion at /32, /16 and /8."""

    def __init__(self, config: ArchConfig, rng):
        super().__init__(config)
        w, k = config.base_width, config.num_classes
        self.stem = conv_bn_relu(1, w, 3, stride=2, rng=rng)
        self.stage4 = separable_block(w, 2 * w, stride=2, rng=rng)
        self.stage8 = Sequential2(separable_block(2 * w, 2 * w, stride=2, rng=rng), separable_block(2 * w, 2 * w, rng=rng))
        self.stage16 = separable_block(2 * w, 4 * w, stride=2, rng=rng)
        self.stage32 = Sequential2(separable_block(4 * w, 4 * w, stride=2, rng=rng), separable_block(4 * w, 4 * w, rng=rng))
        self.score8 = Conv2d(2 * w, k, 1, rng=rng)
        self.score16 = Conv2d(4 * w, k, 1, rng=rng)
        self.score32 = Conv2d(4 * w, k, 1, rng=rng)
        self.up32 = Upsample(2)
        self.up16 = Upsample(2)
        self.up8 = Upsample(8)

    def _forward(self, x, train):
        f8 = self.stage8(self.stage4(self.stem(x, train), train), train)
        f16 = self.stage16(f8, train)
        f32 = self.stage32(f16, train)
        s = self.up32(self.score32(f32, train)) + self.score16(f16, train)
        s = self.up16(s) + self.score8(f8, train)
        return self.up8(s)

    def backward(self, dy):
        ds8 = self.up8.backward(dy)
        df8 = self.score8.backward(ds8)
        ds16 = self.up16.backward(ds8)
        df16 = self.score16.backward(ds16)
        df32 = self.score32.backward(self.up32.backward(ds16))
        df16 = df16 + self.stage32.backward(df32)
        df8 = df8 + self.stage16.backward(df16)
        return self.stem.backward(self.stage4.backward(self.stage8.backward(df8)))


class Sequential2(Module):
    """Two modules in series (keeps parameter names short)."""

    def __init__(self, a: Module, b: Module):
        super().__init__()
        self.a, self.b = a, b

    def forward(self, x, train=False):
        return self.b(self.a(x, train), train)

    def backward(self, dy):
        return self.a.backward(self.b.backward(dy))


class ASPP(Module):
    """1x1 branch, one 3x3 atrous branch per rate, and an image-pooling branch."""

    def __init__(self, c_in, c_out, rates, rng):
        super().__init__()
        self.branch0 = conv_bn_relu(c_in, c_out, 1, rng=rng)
        self.atrous = []
        for i, r in enumerate(rates):
            branch = conv_bn_relu(c_in, c_out, 3, dilation=r, rng=rng)
            setattr(self, f"atrous{i}", branch)
            self.atrous.append(branch)
        self.pool = GlobalAvgPool()
        self.pool_conv = Conv2d(c_in, c_out, 1, rng=rng)
        self.pool_relu = ReLU()
        self.project = conv_bn_relu(c_out * (len(rates) + 2), c_out, 1, rng=rng)

    @property
    def branch_count(self) -> int:
        return len(self.atrous) + 2

    def forward(self, x, train=False):
        h, w = x.shape[2], x.shape[3]
        outs = [self.branch0(x, train)] + [b(x, train) for b in self.atrous]
        pooled = self.pool_relu(self.pool_conv(self.pool(x), train))
        up, self._pool_cache = F.resize_bilinear_forward(pooled, h, w)
        cat, self._widths = _concat(outs + [up])
        return self.project(cat, train)

    def backward(self, dy):
        parts = _split(self.project.backward(dy), self._widths)
        dx = self.branch0.backward(parts[0])
        for branch, d in zip(self.atrous, parts[1:-1]):
            dx = dx + branch.backward(d)
        dpool = F.resize_bilinear_backward(parts[-1], self._pool_cache)
        return dx + self.pool.backward(self.pool_conv.backward(self.pool_relu.backward(dpool)))


class DeepLabEncoder(Module):
    """Separable encoder to output stride 16, last stage dilated instead of strided."""

    def __init__(self, w, rng):
        super().__init__()
        self.stem = conv_bn_relu(1, w, 3, stride=2, rng=rng)
        self.stage4 = separable_block(w, 3 * w, stride=2, rng=rng)
        self.stage8 = separable_block(3 * w, 3 * w, stride=2, rng=rng)
        self.stage16 = separable_block(3 * w, 4 * w, stride=2, rng=rng)
        self.dilated = separable_block(4 * w, 4 * w, dilation=2, rng=rng)

    def forward(self, x, train=False):
        self.low = self.stage4(self.stem(x, train), train)
        return self.dilated(self.stage16(self.stage8(self.low, train), train), train)

    def backward(self, dy, dlow=None):
        d = self.stage8.backward(self.stage16.backward(self.dilated.backward(dy)))
        if dlow is not None:
            d = d + dlow
        return self.stem.backward(self.stage4.backward(d))


class DeepLabV3(SegmentationModel):
    def __init__(self, config: ArchConfig, rng):
        super().__init__(config)
        w, k = config.base_width, config.num_classes
        self.encoder = DeepLabEncoder(w, rng)
        self.aspp = ASPP(4 * w, 2 * w, config.aspp_rates, rng)
        self.classifier = Conv2d(2 * w, k, 1, rng=rng)
        self.up = Upsample(16)

    def _forward(self, x, train):
        return self.up(self.classifier(self.aspp(self.encoder(x, train), train), train))

    def backward(self, dy):
        return self.encoder.backward(self.aspp.backward(self.classifier.backward(self.up.backward(dy))))


class DeepLabV3Plus(SegmentationModel):
    def __init__(self, config: ArchConfig, rng):
        super().__init__(config)
        w, k = config.base_width, config.num_classes
        low_ch, dec_ch = 2 * w, 4 * w
        self.encoder = DeepLabEncoder(w, rng)
        self.aspp = ASPP(4 * w, 2 * w, config.aspp_rates, rng)
        self.up_aspp = Upsample(4)
        self.reduce = conv_bn_relu(3 * w, low_ch, 1, rng=rng)
        self.refine = Sequential2(
            conv_bn_relu(2 * w + low_ch, dec_ch, 3, rng=rng),
            conv_bn_relu(dec_ch, dec_ch, 3, rng=rng),
        )
        self.classifier = Conv2d(dec_ch, k, 1, rng=rng)
        self.up = Upsample(4)

    def _forward(self, x, train):
        high = self.up_aspp(self.aspp(self.encoder(x, train), train))
        low = self.reduce(self.encoder.low, train)
        cat, self._widths = _concat([high, low])
        return self.up(self.classifier(self.refine(cat, train), train))

    def backward(self, dy):
        dcat = self.refine.backward(self.classifier.backward(self.up.backward(dy)))
        dhigh, dlow = _split(dcat, self._widths)
        dlow = self.reduce.backward(dlow)
        return self.encoder.backward(self.aspp.backward(self.up_aspp.backward(dhigh)), dlow)


def build(config: ArchConfig) -> SegmentationModel:
    rng = np.random.default_rng([config.seed, 7])
    cls = {"fcn8": FCN8, "deeplabv3": DeepLabV3, "deeplabv3plus": DeepLabV3Plus}[config.family]
    return cls(config, rng)


def build_metadata(model: SegmentationModel) -> dict:
    return {"config": asdict(model.config), "param_count": model.param_count()}


# -------------------------------------------------------------------- data


def to_batch(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray | None]:
    images = np.stack([normalize(s.image if s.image.ndim == 2 else s.image.mean(axis=2).astype(np.uint8)) for s in samples])
    x = images[:, None].astype(np.float32)
    masks = None
    if all(s.mask is not None for s in samples):
        masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return x, masks


def forward_batches(model: SegmentationModel, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return np.concatenate([model.forward(x[i : i + batch_size], train=False) for i in range(0, len(x), batch_size)])


def predict_probs(model: SegmentationModel, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
    return np.concatenate(
        [F.softmax_per_pixel(model.forward(x[i : i + batch_size], train=False)) for i in range(0, len(x), batch_size)]
    )


def predict_mask(model: SegmentationModel, image: np.ndarray):
    """Argmax mask (ties to the lowest class) and the per-pixel max probability.

    ``image`` is a normalized ``(H, W)`` or ``(N, 1, H, W)`` float array.
    """
    single = image.ndim == 2
    x = image[None, None] if single else image
    probs = predict_probs(model, x.astype(np.float32))
    mask = probs.argmax(axis=1).astype(np.uint8)
    maxp = probs.max(axis=1)
    return (mask[0], maxp[0]) if single else (mask, maxp)


def predict_samples(model: SegmentationModel, samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x, _ = to_batch(samples)
    probs = predict_probs(model, x)
    return probs.argmax(axis=1).astype(np.uint8), probs


def evaluate(model: SegmentationModel, samples: list[Sample]) -> ConfusionMatrix:
    x, y = to_batch(samples)
    cm = ConfusionMatrix()
    for i in range(0, len(x), 32):
        pred = model.forward(x[i : i + 32], train=False).argmax(axis=1)
        for p, g in zip(pred, y[i : i + 32]):
            cm = cm + confusion(p.astype(np.uint8), g.astype(np.uint8))
    return cm


# ---------------------------------------------------------------- training


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_miou: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def __len__(self):
        return len(self.train_loss)

    def rows(self, with_timing: bool = True):
        for i in range(len(self)):
            yield {
                "epoch": i + 1,
                "train_loss": f"{self.train_loss[i]:.9g}",
                "val_miou": f"{self.val_miou[i]:.9g}",
                "seconds": f"{self.seconds[i]:.3f}" if with_timing else "0",
            }

    def to_csv(self, path, with_timing: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_miou", "seconds"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows(with_timing))


def _loss(config: TrainConfig, logits, target):
    if config.loss == "focal":
        return F.focal_loss(logits, target, config.focal_gamma, config.focal_alpha)
    return F.cross_entropy_loss(logits, target)


def train(model: SegmentationModel, train_set: list[Sample], val_set: list[Sample], config: TrainConfig,
          optimizer: Adam | None = None, log=None):
    """Mini-batch Adam training; the weights with the best validation mIoU are kept.

    Returns ``(model, history)``.  ``model`` is updated in place.
    """
    if not train_set or not val_set:
        raise EmptyDataset("train and validation sets must be non-empty")
    x, y = to_batch(train_set)
    if y is None:
        raise EmptyDataset("training samples must be labeled")
    optimizer = optimizer or Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 11])
    history = TrainHistory()
    best, best_state = -math.inf, None
    for epoch in range(config.epochs):
        start = time.perf_counter()
        order = rng.permutation(len(x))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = np.sort(order[i : i + config.batch_size])
            logits = model.forward(x[idx], train=True)
            loss, dlogits = _loss(config, logits, y[idx])
            optimizer.zero_grad()
            model.backward(dlogits)
            optimizer.step()
            total += loss * len(idx)
        score = mean_iou(evaluate(model, val_set))
        history.train_loss.append(total / len(x))
        history.val_miou.append(score)
        history.seconds.append(time.perf_counter() - start)
        if score > best:
            best, best_state = score, {k: v.copy() for k, v in model.state_dict().items()}
            history.best_epoch = epoch + 1
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} loss={total / len(x):.4f} val_miou={score:.4f}")
    model.load_state_dict(best_state)
    return model, history


# ------------------------------------------------------------- persistence


def save_model(model: SegmentationModel, path) -> str:
    """Write the weight file plus a ``.json`` sidecar with the architecture; returns the sha256."""
    path = Path(path)
    digest = save_weights(model.state_dict(), path)
    meta = build_metadata(model)
    meta["sha256"] = digest
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return digest


def load_model(path) -> SegmentationModel:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    cfg = meta["config"]
    cfg["aspp_rates"] = tuple(cfg["aspp_rates"])
    model = build(ArchConfig(**cfg))
    model.load_state_dict(load_weights(path))
    return model


def model_hash(model: SegmentationModel) -> str:
    return weights_hash(model.state_dict())
