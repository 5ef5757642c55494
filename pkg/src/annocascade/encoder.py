"""Convolutional image classifier with a pooled embedding head.

The trunk is a stack of small network-in-network style blocks: one k x k
convolution followed by two 1 x 1 convolutions, each with optional batch
normalization and a ReLU.  Every block but the last ends in 2 x 2 average
pooling; the last ends in a global spatial average pool, so the embedding
length equals the final block's channel count and the trunk accepts any
input side the pooling splits cleanly.  There is no fully connected layer
besides the classifier head, which maps the pooled embedding to class
logits.  ``classify`` reuses ``encode``'s exact code path, so logits are
always the classifier applied to the embedding, bit for bit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_into, save_checkpoint
from .data.mining import LabelSpace
from .data.sampler import BalancedSampler, BatchSpec, UniformSampler
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .optim import LrSchedule, Optimizer
from .tensor import BatchNormState, Parameter, Tensor

log = logging.getLogger("annocascade.encoder")


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    kernels: tuple[int, ...] = (5, 5, 3)
    use_batch_norm: bool = True
    bn_momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != len(self.kernels):
            raise ConfigError("encoder: channels and kernels must have equal length")
        if not self.channels:
            raise ConfigError("encoder: needs at least one block")

    @property
    def embed_dim(self) -> int:
        return self.channels[-1]


@dataclass
class TrainReport:
    epoch: int
    train_accuracy: float
    val_accuracy: float
    loss: float


def write_reports_csv(reports: list[TrainReport], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_acc", "val_acc", "loss"])
        for r in reports:
            writer.writerow([r.epoch, f"{r.train_accuracy:.6f}",
                             f"{r.val_accuracy:.6f}", f"{r.loss:.6f}"])


class _ConvLayer:
    def __init__(self, name: str, c_in: int, c_out: int, kernel: int,
                 use_bn: bool, bn_momentum: float, rng: np.random.Generator):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(f"{name}.weight",
                                Tensor(T.uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in)))
        self.bias = Parameter(f"{name}.bias", Tensor(np.zeros(c_out)))
        self.pad = kernel // 2
        self.bn = (BatchNormState.create(f"{name}.bn", c_out, momentum=bn_momentum)
                   if use_bn else None)

    def parameters(self) -> list[Parameter]:
        params = [self.weight, self.bias]
        if self.bn is not None:
            params.extend(self.bn.parameters())
        return params

    def apply(self, x: Tensor, training: bool) -> Tensor:
        out = T.conv2d(x, self.weight.tensor, stride=1, pad=self.pad)
        out = T.add(out, T.reshape(self.bias.tensor, (1, -1, 1, 1)))
        if self.bn is not None:
            out = T.batch_norm(out, self.bn, training)
        return T.relu(out)


class EncoderModel:
    """Parameters and forward passes for the convolutional classifier."""

    def __init__(self, config: EncoderConfig, num_classes: int,
                 label_space_version: int = 0):
        if num_classes < 2:
            raise ConfigError(f"encoder: needs >= 2 classes, got {num_classes}")
        self.config = config
        self.num_classes = num_classes
        self.label_space_version = label_space_version
        rng = np.random.default_rng(config.seed)

        self.blocks: list[list[_ConvLayer]] = []
        c_in = 1
        for b, (c_out, kernel) in enumerate(zip(config.channels, config.kernels)):
            layers = [
                _ConvLayer(f"encoder.block{b}.conv0", c_in, c_out, kernel,
                           config.use_batch_norm, config.bn_momentum, rng),
                _ConvLayer(f"encoder.block{b}.conv1", c_out, c_out, 1,
                           config.use_batch_norm, config.bn_momentum, rng),
                _ConvLayer(f"encoder.block{b}.conv2", c_out, c_out, 1,
                           config.use_batch_norm, config.bn_momentum, rng),
            ]
            self.blocks.append(layers)
            c_in = c_out
        self._init_classifier(rng)

    def _init_classifier(self, rng: np.random.Generator) -> None:
        d = self.config.embed_dim
        self.classifier_w = Parameter(
            "encoder.classifier.weight", Tensor(T.uniform_init(rng, (d, self.num_classes), d)))
        self.classifier_b = Parameter("encoder.classifier.bias",
                                      Tensor(np.zeros(self.num_classes)))

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = []
        for block in self.blocks:
            for layer in block:
                params.extend(layer.parameters())
        params.extend([self.classifier_w, self.classifier_b])
        return params

    def trunk_parameter_names(self) -> set[str]:
        return {p.name for p in self.parameters()
                if not p.name.startswith("encoder.classifier.")}

    # -- forward passes ---------------------------------------------------------

    def features(self, x: Tensor, training: bool) -> Tensor:
        """Embedding tensor (B, D) from pixel tensor (B, 1, H, W)."""
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"encoder: expected (B, 1, H, W) input, got {x.shape}")
        out = x
        for b, block in enumerate(self.blocks):
            for layer in block:
                out = layer.apply(out, training)
            if b < len(self.blocks) - 1:
                out = T.avg_pool2d(out, 2)
        return T.global_avg_pool(out)

    def logits(self, x: Tensor, training: bool) -> Tensor:
        return self.logits_from_features(self.features(x, training))

    def logits_from_features(self, feats: Tensor) -> Tensor:
        return T.add(T.matmul(feats, self.classifier_w.tensor), self.classifier_b.tensor)

    @staticmethod
    def _as_batch(pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[None, None]
        elif pixels.ndim == 3:
            pixels = pixels[:, None]
        elif pixels.ndim != 4:
            raise ShapeError(f"encoder: cannot interpret pixels of shape {pixels.shape}")
        if pixels.max() > 1.0:
            pixels = pixels / 255.0
        return pixels

    def encode(self, pixels: np.ndarray) -> np.ndarray:
        """Inference-mode embeddings, shape (B, D); accepts (H, W) too."""
        with T.no_grad():
            return self.features(Tensor(self._as_batch(pixels)), training=False).data

    def classify(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Inference-mode (argmax class indices, probability rows)."""
        with T.no_grad():
            feats = self.features(Tensor(self._as_batch(pixels)), training=False)
            logits = self.logits_from_features(feats)
        probs = T.softmax(logits.data)
        return np.argmax(probs, axis=1), probs

    # -- persistence --------------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {"kind": "encoder", "config": asdict(self.config),
                "num_classes": self.num_classes,
                "label_space_version": self.label_space_version}

    def save(self, stem: str | Path) -> None:
        save_checkpoint(stem, self.parameters(), meta=self.checkpoint_meta())

    @classmethod
    def load(cls, stem: str | Path) -> "EncoderModel":
        from .checkpoint import load_checkpoint
        _, meta = load_checkpoint(stem)
        cfg = meta["config"]
        cfg["channels"] = tuple(cfg["channels"])
        cfg["kernels"] = tuple(cfg["kernels"])
        model = cls(EncoderConfig(**cfg), meta["num_classes"],
                    label_space_version=meta["label_space_version"])
        load_into(stem, model.parameters())
        return model


def fine_tune_reset(model: EncoderModel, new_label_space: LabelSpace,
                    lr_scale: float = 0.1, seed: int = 1) -> dict[str, float]:
    """Swap the classifier for the new label space and return lr scales.

    The classifier is reinitialized at the new width and trains at full
    rate; every trunk parameter trains at lr_scale times the base rate.
    Passing the model's current label space is allowed and simply
    continues training.
    """
    if new_label_space.iteration not in (model.label_space_version,
                                         model.label_space_version + 1):
        raise UsageError(
            f"fine_tune: label space iteration {new_label_space.iteration} does not follow "
            f"model version {model.label_space_version}")
    model.num_classes = new_label_space.num_classes
    model.label_space_version = new_label_space.iteration
    model._init_classifier(np.random.default_rng(seed))
    scales = {name: lr_scale for name in model.trunk_parameter_names()}
    return scales


def accuracy(model: EncoderModel, examples, label_space: LabelSpace,
             chunk: int = 128) -> float:
    """Inference-mode accuracy on full-size images."""
    labeled = [ex for ex in examples if ex.label is not None]
    if not labeled:
        return 0.0
    hits = 0
    for start in range(0, len(labeled), chunk):
        batch = labeled[start:start + chunk]
        pixels = np.stack([ex.pixels for ex in batch]).astype(np.float64) / 255.0
        predicted, _ = model.classify(pixels[:, None])
        wanted = np.array([label_space.index_of(ex.label) for ex in batch])
        hits += int(np.sum(predicted == wanted))
    return hits / len(labeled)


@dataclass
class EncoderTrainSettings:
    epochs: int = 40
    schedule: LrSchedule = field(default_factory=lambda: LrSchedule(
        0.1, kind="step_down", step_fraction=1 / 3, step_multiplier=0.5))
    optimizer: str = "sgd"
    decay: float = 0.9  # momentum (sgd) or accumulator decay (rmsprop)
    use_data_dropout: bool = True
    stop_at_train_acc: float | None = None
    lr_scales: dict[str, float] | None = None
    report_path: str | Path | None = None
    checkpoint_stem: str | Path | None = None


def train_encoder(model: EncoderModel, examples, label_space: LabelSpace,
                  batch_spec: BatchSpec,
                  settings: EncoderTrainSettings) -> list[TrainReport]:
    """Cross-entropy training with per-epoch accuracies and best-val weights.

    Diverging (non-finite) losses raise NumericError with a parameter-norm
    dump.  On return the model holds the weights of the best validation
    epoch (or the final epoch when there is no validation data).
    """
    train = [ex for ex in examples if ex.split == "train" and ex.label is not None]
    val = [ex for ex in examples if ex.split == "val" and ex.label is not None]
    if not train:
        raise UsageError("train_encoder: no labeled training examples")

    sampler_cls = BalancedSampler if settings.use_data_dropout else UniformSampler
    sampler = sampler_cls(train, batch_spec, label_space)
    params = model.parameters()
    opt = Optimizer(params, settings.schedule, kind=settings.optimizer,
                    decay=settings.decay, lr_scales=settings.lr_scales)

    reports: list[TrainReport] = []
    best_val = -1.0
    best_state: list[np.ndarray] | None = None

    for epoch in range(settings.epochs):
        losses = []
        for batch in sampler.epoch():
            logits = model.logits(Tensor(batch.pixels), training=True)
            loss = T.softmax_cross_entropy(logits, batch.classes, reduction="mean")
            try:
                T.backward(loss, params)
            except NumericError as exc:
                dump = {p.name: float(np.abs(p.tensor.data).max()) for p in params[:6]}
                raise NumericError(f"encoder training diverged at epoch {epoch}: {exc}; "
                                   f"parameter magnitudes {dump}") from exc
            opt.step(epoch, settings.epochs)
            losses.append(loss.item())

        train_acc = accuracy(model, train, label_space)
        val_acc = accuracy(model, val, label_space) if val else train_acc
        reports.append(TrainReport(epoch, train_acc, val_acc, float(np.mean(losses))))
        log.info("encoder epoch %d: loss %.4f train %.3f val %.3f",
                 epoch, reports[-1].loss, train_acc, val_acc)

        if not val or val_acc >= best_val:
            best_val = val_acc
            best_state = [p.tensor.data.copy() for p in params]
        if settings.stop_at_train_acc is not None and train_acc >= settings.stop_at_train_acc:
            break

    if best_state is not None:
        for p, data in zip(params, best_state):
            p.tensor.data = data
            p.tensor.zero_grad()

    if settings.report_path is not None:
        write_reports_csv(reports, settings.report_path)
    if settings.checkpoint_stem is not None:
        model.save(settings.checkpoint_stem)
    return reports
