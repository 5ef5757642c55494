import logging

import numpy as np
import pytest

from annocascade import tensor as T
from annocascade.data import AnnotatedImage
from annocascade.decoder import (
    EOS,
    CellLayer,
    DecoderConfig,
    DecoderModel,
    Vocab,
    default_hyper,
    greedy_decode,
    gru_step,
    lstm_step,
    make_sequences,
    sequence_loss,
    token_accuracy,
    train_decoder,
)
from annocascade.errors import ConfigError, ShapeError, UsageError
from annocascade.tensor import Tensor

from fd import numeric_grad, max_rel_err


def zero_layer(cell_kind, dim=4):
    layer = CellLayer("t", cell_kind, dim, np.random.default_rng(0))
    for p in layer.parameters():
        p.tensor.data = np.zeros_like(p.tensor.data)
    return layer


class TestClosedForms:
    def test_lstm_zero_weights_exact(self):
        layer = zero_layer("lstm")
        v = np.array([[0.3, -1.2, 0.0, 2.5]])
        h, m, trace = lstm_step(layer, Tensor(np.zeros((1, 4))), Tensor(v),
                                Tensor(np.zeros((1, 4))))
        assert np.array_equal(trace.gates["i"], np.full((1, 4), 0.5))
        assert np.array_equal(trace.gates["f"], np.full((1, 4), 0.5))
        assert np.array_equal(trace.gates["o"], np.full((1, 4), 0.5))
        assert np.array_equal(trace.candidate, np.zeros((1, 4)))
        assert np.array_equal(h.data, 0.5 * v)
        assert np.array_equal(m.data, 0.5 * np.tanh(0.5 * v))

    def test_gru_zero_weights_exact(self):
        layer = zero_layer("gru")
        v = np.array([[1.0, -0.5, 0.25, 3.0]])
        h, trace = gru_step(layer, Tensor(np.zeros((1, 4))), Tensor(v))
        assert np.array_equal(trace.gates["z"], np.full((1, 4), 0.5))
        assert np.array_equal(trace.gates["r"], np.full((1, 4), 0.5))
        assert np.array_equal(trace.candidate, np.zeros((1, 4)))
        assert np.array_equal(h.data, 0.5 * v)


class TestSaturationLimits:
    def test_lstm_forget_open_input_closed_carries_state(self):
        rng = np.random.default_rng(1)
        layer = CellLayer("t", "lstm", 5, rng)
        layer.b["f"].tensor.data = np.full(5, 20.0)
        layer.b["i"].tensor.data = np.full(5, -20.0)
        x = Tensor(rng.normal(size=(3, 5)) * 0.1)
        h_prev = Tensor(rng.normal(size=(3, 5)))
        m_prev = Tensor(rng.normal(size=(3, 5)) * 0.1)
        h, _, _ = lstm_step(layer, x, h_prev, m_prev)
        assert np.allclose(h.data, h_prev.data, atol=1e-6)

    def test_gru_update_open_carries_state(self):
        rng = np.random.default_rng(2)
        layer = CellLayer("t", "gru", 5, rng)
        layer.b["z"].tensor.data = np.full(5, 20.0)
        x = Tensor(rng.normal(size=(3, 5)) * 0.1)
        h_prev = Tensor(rng.normal(size=(3, 5)))
        h, _ = gru_step(layer, x, h_prev)
        assert np.allclose(h.data, h_prev.data, atol=1e-6)


class TestGateRanges:
    def test_gates_in_open_unit_interval(self):
        rng = np.random.default_rng(3)
        for kind in ("lstm", "gru"):
            layer = CellLayer("t", kind, 6, rng)
            h = Tensor(rng.normal(size=(4, 6)))
            for _ in range(5):
                x = Tensor(rng.normal(size=(4, 6)))
                if kind == "lstm":
                    h2, m, trace = lstm_step(layer, x, h, Tensor(rng.normal(size=(4, 6))))
                else:
                    h2, trace = gru_step(layer, x, h)
                for g in trace.gates.values():
                    assert np.all(g > 0) and np.all(g < 1)
                assert np.all(trace.candidate > -1) and np.all(trace.candidate < 1)
                h = Tensor(h2.data)


def _step_gradcheck(cell_kind, seed):
    rng = np.random.default_rng(seed)
    dim = 3
    layer = CellLayer("t", cell_kind, dim, rng)
    x = Tensor(rng.normal(size=(2, dim)), requires_grad=True)
    h_prev = Tensor(rng.normal(size=(2, dim)), requires_grad=True)
    m_prev = Tensor(rng.normal(size=(2, dim)), requires_grad=True)
    c1 = Tensor(rng.normal(size=(2, dim)))
    c2 = Tensor(rng.normal(size=(2, dim)))

    def loss_tensor():
        if cell_kind == "lstm":
            h, m, _ = lstm_step(layer, x, h_prev, m_prev, want_trace=False)
            return T.add(T.sum_all(T.hadamard(h, c1)), T.sum_all(T.hadamard(m, c2)))
        h, _ = gru_step(layer, x, h_prev, want_trace=False)
        return T.sum_all(T.hadamard(h, c1))

    loss = loss_tensor()
    leaves = [p.tensor for p in layer.parameters()] + [x, h_prev] + \
        ([m_prev] if cell_kind == "lstm" else [])
    T.backward(loss, [type("P", (), {"name": "leaf", "tensor": t, "trainable": True})()
                      for t in leaves])
    analytic = [t.grad.copy() for t in leaves]

    def forward_value():
        with T.no_grad():
            return loss_tensor().item()

    numeric = numeric_grad(forward_value, [t.data for t in leaves])
    for a, n in zip(analytic, numeric):
        assert max_rel_err(a, n) < 1e-4


class TestStepGradients:
    def test_lstm_step_matches_finite_differences(self):
        for seed in range(3):
            _step_gradcheck("lstm", seed)

    def test_gru_step_matches_finite_differences(self):
        for seed in range(3):
            _step_gradcheck("gru", seed)


class TestShapes:
    def test_lstm_step_shape_mismatch(self):
        layer = zero_layer("lstm")
        with pytest.raises(ShapeError, match="lstm_step"):
            lstm_step(layer, Tensor(np.zeros((1, 4))), Tensor(np.zeros((2, 4))),
                      Tensor(np.zeros((1, 4))))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            DecoderConfig("elman")
        with pytest.raises(ConfigError):
            DecoderConfig("gru", dropout=1.0)


class TestVocabAndSequences:
    def test_vocab_eos_pinned_at_zero(self):
        vocab = Vocab(["b", "a", "b"])
        assert vocab.tokens[0] == EOS
        assert vocab.eos_id == 0
        assert len(vocab) == 3

    def test_unknown_token_errors(self):
        with pytest.raises(UsageError, match="unknown"):
            Vocab(["a"]).id_of("zzz")

    def test_sequences_padded_to_horizon(self):
        examples = [AnnotatedImage("x", np.zeros((4, 4), np.uint8),
                                   "small granuloma/right upper")]
        vocab = Vocab.build(examples)
        (seq,) = make_sequences(examples, vocab, horizon=5)
        assert seq.length == 4
        assert len(seq.inputs) == len(seq.targets) == 5
        assert seq.inputs[-1] == vocab.eos_id
        # Targets are the inputs shifted one step left, EOS-extended.
        assert list(seq.targets[:-1]) == list(seq.inputs[1:])
        assert seq.targets[-1] == vocab.eos_id

    def test_overlong_annotations_excluded(self, caplog):
        examples = [AnnotatedImage("x", np.zeros((4, 4), np.uint8), "a b c d e f"),
                    AnnotatedImage("y", np.zeros((4, 4), np.uint8), "a b")]
        vocab = Vocab.build(examples)
        with caplog.at_level(logging.WARNING, logger="annocascade.decoder"):
            seqs = make_sequences(examples, vocab, horizon=5)
        assert [s.image_id for s in seqs] == ["y"]
        assert "excluded 1" in caplog.text


def memorization_fixture(n=10, dim=16, seed=0):
    rng = np.random.default_rng(seed)
    examples = [AnnotatedImage(f"m{i}", np.zeros((4, 4), np.uint8),
                               f"w{i} x{i % 3} y{i % 2}") for i in range(n)]
    vocab = Vocab.build(examples)
    sequences = make_sequences(examples, vocab, horizon=5)
    embeddings = {ex.id: rng.normal(size=dim) for ex in examples}
    return examples, vocab, sequences, embeddings


class TestTraining:
    @pytest.mark.parametrize("cell", ["lstm", "gru"])
    def test_loss_decreases_by_epoch_50(self, cell):
        _, vocab, sequences, embeddings = memorization_fixture()
        decoder = DecoderModel(DecoderConfig(cell, num_layers=2, state_dim=16, seed=1), vocab)
        hyper = default_hyper(cell, lr=2e-3, epochs=51, seed=2)
        history = train_decoder(decoder, embeddings, sequences, hyper)
        assert history[50].loss < history[0].loss

    def test_memorizes_fixture_to_perfect_token_accuracy(self):
        _, vocab, sequences, embeddings = memorization_fixture()
        decoder = DecoderModel(DecoderConfig("gru", num_layers=2, state_dim=16, seed=3), vocab)
        hyper = default_hyper("gru", lr=5e-3, epochs=500, seed=4, stop_at_token_acc=1.0)
        history = train_decoder(decoder, embeddings, sequences, hyper)
        assert history[-1].token_accuracy == 1.0
        assert len(history) <= 500

    def test_unroll_loss_equals_sum_of_per_step_cross_entropies(self):
        _, vocab, sequences, embeddings = memorization_fixture(n=4)
        decoder = DecoderModel(DecoderConfig("lstm", num_layers=2, state_dim=16, seed=5), vocab)
        embeds = np.stack([embeddings[s.image_id] for s in sequences])
        inputs = np.stack([s.inputs for s in sequences])
        targets = np.stack([s.targets for s in sequences])
        step_logits, _ = decoder.unroll(embeds, inputs, training=False)
        loss = sequence_loss(step_logits, targets)
        manual = 0.0
        for t, logits in enumerate(step_logits):
            z = logits.data
            lse = np.log(np.exp(z - z.max(1, keepdims=True)).sum(1)) + z.max(1)
            manual += float(np.mean(lse - z[np.arange(len(part := targets[:, t])), part]))
        assert abs(loss.item() - manual) < 1e-12

    def test_deterministic_training(self):
        def run():
            _, vocab, sequences, embeddings = memorization_fixture()
            decoder = DecoderModel(DecoderConfig("gru", num_layers=2, state_dim=16, seed=6),
                                   vocab)
            train_decoder(decoder, embeddings, sequences,
                          default_hyper("gru", lr=1e-3, epochs=5, seed=7))
            return np.concatenate([p.tensor.data.ravel() for p in decoder.parameters()])

        assert np.array_equal(run(), run())

    def test_checkpoint_roundtrip(self, tmp_path):
        _, vocab, sequences, embeddings = memorization_fixture()
        decoder = DecoderModel(DecoderConfig("lstm", num_layers=2, state_dim=16, seed=8), vocab)
        train_decoder(decoder, embeddings, sequences,
                      default_hyper("lstm", epochs=3, seed=9))
        decoder.save(tmp_path / "dec")
        restored = DecoderModel.load(tmp_path / "dec")
        assert restored.vocab.tokens == decoder.vocab.tokens
        before = token_accuracy(decoder, embeddings, sequences)
        after = token_accuracy(restored, embeddings, sequences)
        assert before == after


class TestGeneration:
    def _memorized_decoder(self):
        _, vocab, sequences, embeddings = memorization_fixture()
        decoder = DecoderModel(DecoderConfig("gru", num_layers=2, state_dim=16, seed=10), vocab)
        train_decoder(decoder, embeddings, sequences,
                      default_hyper("gru", lr=5e-3, epochs=500, seed=11,
                                    stop_at_token_acc=1.0))
        return decoder, sequences, embeddings

    def test_reproduces_memorized_annotations(self):
        decoder, sequences, embeddings = self._memorized_decoder()
        vocab = decoder.vocab
        for seq in sequences:
            seed_token = vocab.tokens[seq.inputs[0]]
            out = greedy_decode(decoder, embeddings[seq.image_id], seed_token)
            expected = [vocab.tokens[i] for i in seq.inputs[:seq.length]]
            assert out == expected

    def test_max_len_honored(self):
        decoder, sequences, embeddings = self._memorized_decoder()
        for seq in sequences:
            out = greedy_decode(decoder, embeddings[seq.image_id],
                                decoder.vocab.tokens[seq.inputs[0]], max_len=5)
            assert len(out) <= 5

    def test_sequence_starts_with_seed(self):
        decoder, sequences, embeddings = self._memorized_decoder()
        out = greedy_decode(decoder, embeddings[sequences[0].image_id], "w0")
        assert out[0] == "w0"

    def test_unknown_seed_degrades_gracefully(self):
        decoder, sequences, embeddings = self._memorized_decoder()
        out = greedy_decode(decoder, embeddings[sequences[0].image_id], "nonesuch")
        assert out == ["nonesuch"]
