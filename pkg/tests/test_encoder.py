import numpy as np
import pytest

from annocascade import tensor as T
from annocascade.data import AnnotatedImage, BatchSpec, LabelSpace
from annocascade.encoder import (
    EncoderConfig,
    EncoderModel,
    EncoderTrainSettings,
    accuracy,
    fine_tune_reset,
    train_encoder,
)
from annocascade.errors import ShapeError, UsageError
from annocascade.optim import LrSchedule
from annocascade.tensor import Tensor

from fd import numeric_grad, max_rel_err


def tiny_model(num_classes=3, seed=0, use_bn=True):
    cfg = EncoderConfig(channels=(3, 4), kernels=(3, 3), use_batch_norm=use_bn, seed=seed)
    return EncoderModel(cfg, num_classes)


def tiny_corpus(n_classes=3, per_class=6, side=8, seed=0):
    rng = np.random.default_rng(seed)
    examples, labels = [], [f"d{c}" for c in range(n_classes)]
    for c in range(n_classes):
        base = np.zeros((side, side))
        base[c % side, :] = 250  # one bright row per class
        for k in range(per_class):
            px = np.clip(base + rng.normal(0, 8, (side, side)), 0, 255).astype(np.uint8)
            ex = AnnotatedImage(f"c{c}_{k}", px, labels[c])
            ex.label, ex.split = labels[c], "train"
            examples.append(ex)
    space = LabelSpace(0, labels, {ex.id: labels.index(ex.label) for ex in examples})
    return examples, space


class TestForwardShapes:
    def test_embedding_length_is_last_channel_count(self):
        model = tiny_model()
        out = model.encode(np.random.default_rng(0).integers(0, 256, (5, 8, 8)))
        assert out.shape == (5, 4)
        assert model.embed_dim == 4

    def test_single_image_accepted(self):
        model = tiny_model()
        assert model.encode(np.zeros((8, 8), dtype=np.uint8)).shape == (1, 4)

    def test_wrong_rank_rejected(self):
        with pytest.raises(ShapeError):
            tiny_model().encode(np.zeros((2, 2, 8, 8, 1)))

    def test_trunk_accepts_other_sides(self):
        # Global pooling keeps D fixed across input sizes (crop vs full).
        model = tiny_model()
        assert model.encode(np.zeros((12, 12), dtype=np.uint8)).shape == (1, 4)


class TestClassify:
    def test_probabilities_sum_to_one(self):
        model = tiny_model(num_classes=5)
        _, probs = model.classify(np.random.default_rng(1).integers(0, 256, (4, 8, 8)))
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-9)

    def test_zero_logits_give_uniform(self):
        model = tiny_model(num_classes=4)
        model.classifier_w.tensor.data = np.zeros_like(model.classifier_w.tensor.data)
        model.classifier_b.tensor.data = np.zeros_like(model.classifier_b.tensor.data)
        _, probs = model.classify(np.random.default_rng(2).integers(0, 256, (3, 8, 8)))
        assert np.allclose(probs, 0.25)

    def test_logits_are_classifier_of_embedding_exactly(self):
        model = tiny_model()
        pixels = np.random.default_rng(3).integers(0, 256, (6, 8, 8))
        feats = model.encode(pixels)
        manual = feats @ model.classifier_w.tensor.data + model.classifier_b.tensor.data
        with T.no_grad():
            direct = model.logits(Tensor(model._as_batch(pixels)), training=False)
        assert np.array_equal(direct.data, manual)

    def test_argmax_tie_breaks_to_lowest_index(self):
        logits = np.array([[1.0, 1.0, 0.5]])
        assert int(np.argmax(T.softmax(logits), axis=1)[0]) == 0


def _min_relu_margin(model, pixels):
    """Smallest |input| ever fed to relu during one training-mode forward."""
    margins = []
    original = T.relu

    def tracking_relu(x):
        margins.append(float(np.min(np.abs(x.data))))
        return original(x)

    T.relu = tracking_relu
    try:
        with T.no_grad():
            model.logits(Tensor(pixels), training=True)
    finally:
        T.relu = original
    return min(margins)


def encoder_fd_case(seed, num_classes=3):
    """A 2-block encoder, batch, and targets safe for finite differencing."""
    for attempt in range(50):
        s = seed + 1000 * attempt
        model = tiny_model(num_classes=num_classes, seed=s)
        rng = np.random.default_rng(s + 1)
        pixels = rng.uniform(0.05, 0.95, size=(2, 1, 8, 8))
        targets = rng.integers(0, num_classes, size=2)
        if _min_relu_margin(model, pixels) > 1e-3:
            return model, pixels, targets
    raise AssertionError("no margin-safe seed found")


class TestEncoderGradients:
    def test_two_block_encoder_matches_finite_differences(self):
        model, pixels, targets = encoder_fd_case(seed=0)
        params = model.parameters()
        loss = T.softmax_cross_entropy(model.logits(Tensor(pixels), training=True),
                                       targets, reduction="mean")
        T.backward(loss, params)
        analytic = {p.name: p.tensor.grad.copy() for p in params if p.trainable}

        trainable = [p for p in params if p.trainable]

        def forward_value():
            with T.no_grad():
                out = model.logits(Tensor(pixels), training=True)
                return T.softmax_cross_entropy(out, targets, reduction="mean").item()

        numeric = numeric_grad(forward_value, [p.tensor.data for p in trainable])
        for p, fd in zip(trainable, numeric):
            assert max_rel_err(analytic[p.name], fd) < 1e-4, p.name


class TestFineTune:
    def test_version_mismatch(self):
        model = tiny_model()
        space = LabelSpace(2, ["a", "b"], {})
        with pytest.raises(UsageError, match="iteration"):
            fine_tune_reset(model, space)

    def test_identical_iteration_is_continued_training(self):
        model = tiny_model()
        space = LabelSpace(0, ["a", "b", "c"], {})
        scales = fine_tune_reset(model, space, lr_scale=0.5)
        assert model.num_classes == 3
        assert all(v == 0.5 for v in scales.values())

    def test_lr_scale_zero_freezes_trunk_bitwise(self):
        examples, space = tiny_corpus()
        model = EncoderModel(EncoderConfig(channels=(3, 4), kernels=(3, 3), seed=1),
                             space.num_classes)
        new_space = LabelSpace(1, space.labels + ["extra"], {})
        scales = fine_tune_reset(model, new_space, lr_scale=0.0)
        space_plus = LabelSpace(1, new_space.labels,
                                {ex.id: new_space.labels.index(ex.label) for ex in examples})
        before = {p.name: p.tensor.data.copy() for p in model.parameters()}
        settings = EncoderTrainSettings(epochs=1, schedule=LrSchedule(0.05),
                                        lr_scales=scales)
        train_encoder(model, examples, space_plus, BatchSpec(6, normal_cap=0.0, seed=0,
                                                             aug_multiplier=1), settings)
        for p in model.parameters():
            if p.name in model.trunk_parameter_names() and p.trainable:
                assert np.array_equal(p.tensor.data, before[p.name]), p.name
        assert not np.array_equal(model.classifier_w.tensor.data,
                                  before["encoder.classifier.weight"])

    def test_classifier_width_follows_new_space(self):
        model = tiny_model(num_classes=3)
        fine_tune_reset(model, LabelSpace(1, [f"l{i}" for i in range(7)], {}))
        assert model.classifier_w.tensor.shape == (4, 7)


class TestTraining:
    def test_overfits_tiny_distinct_corpus(self):
        examples, space = tiny_corpus()
        model = EncoderModel(EncoderConfig(channels=(4, 6), kernels=(3, 3), seed=2),
                             space.num_classes)
        settings = EncoderTrainSettings(
            epochs=60, schedule=LrSchedule(0.05), stop_at_train_acc=1.0)
        reports = train_encoder(model, examples, space,
                                BatchSpec(9, normal_cap=0.0, seed=1, aug_multiplier=1),
                                settings)
        assert reports[-1].train_accuracy == 1.0

    def test_checkpoint_roundtrip_preserves_accuracy(self, tmp_path):
        examples, space = tiny_corpus()
        model = EncoderModel(EncoderConfig(channels=(3, 4), kernels=(3, 3), seed=3),
                             space.num_classes)
        settings = EncoderTrainSettings(epochs=3, schedule=LrSchedule(0.05))
        train_encoder(model, examples, space,
                      BatchSpec(9, normal_cap=0.0, seed=2, aug_multiplier=1), settings)
        acc_before = accuracy(model, examples, space)
        model.save(tmp_path / "enc")
        restored = EncoderModel.load(tmp_path / "enc")
        assert accuracy(restored, examples, space) == acc_before
        for p, q in zip(model.parameters(), restored.parameters()):
            assert np.array_equal(p.tensor.data, q.tensor.data), p.name

    def test_deterministic_training(self):
        def run():
            examples, space = tiny_corpus(seed=4)
            model = EncoderModel(EncoderConfig(channels=(3, 4), kernels=(3, 3), seed=4),
                                 space.num_classes)
            settings = EncoderTrainSettings(epochs=2, schedule=LrSchedule(0.05))
            train_encoder(model, examples, space,
                          BatchSpec(6, normal_cap=0.0, seed=3, aug_multiplier=1), settings)
            return np.concatenate([p.tensor.data.ravel() for p in model.parameters()])

        a, b = run(), run()
        assert np.array_equal(a, b)
