"""LSTM and GRU sequence decoders conditioned on image embeddings.

Layer-0 state starts at the image embedding (the LSTM additionally starts
its output vector at zero); upper layers start at zero.  Gates follow the
row-vector convention h' = f(x W + h U + b), with per-gate square weight
matrices of the shared state dimension.  Biases exist but initialize to
zero, so the zero-weight closed forms hold exactly.

Training is teacher forced over sequences padded with EOS to a fixed
horizon; the loss is the summed per-step cross entropy, averaged over the
batch, with the padded positions included so the model learns to stop.
Generation is greedy: the encoder's predicted label supplies the first
word and argmax tokens feed back until EOS or the length cap.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .data.corpus import AnnotatedImage
from .data.mining import LabelSpace, label_seed_token
from .encoder import EncoderModel
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .optim import LrSchedule, Optimizer
from .tensor import Parameter, Tensor

log = logging.getLogger("annocascade.decoder")

EOS = "</s>"
LSTM_GATES = ("i", "f", "o")
GRU_GATES = ("z", "r")


class Vocab:
    """Token/index map with EOS pinned at index 0."""

    def __init__(self, tokens: list[str]):
        self.tokens = [EOS] + sorted(set(tokens) - {EOS})
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    eos_id = 0

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UsageError(f"vocab: token {token!r} unknown; rebuild the vocabulary "
                             "from the corpus it came from")

    @classmethod
    def build(cls, examples: list[AnnotatedImage]) -> "Vocab":
        tokens: list[str] = []
        for ex in examples:
            tokens.extend(ex.tokens)
        return cls(tokens)


@dataclass
class SequenceExample:
    """EOS-padded ids: inputs feed the cells, targets score the outputs."""

    image_id: str
    inputs: np.ndarray  # (horizon,) int ids
    targets: np.ndarray  # (horizon,) int ids, inputs shifted left
    length: int  # real (unpadded) token count


def make_sequences(examples: list[AnnotatedImage], vocab: Vocab,
                   horizon: int = 5) -> list[SequenceExample]:
    """Training sequences; annotations longer than the horizon are excluded."""
    out: list[SequenceExample] = []
    skipped = 0
    for ex in examples:
        tokens = ex.tokens
        if len(tokens) > horizon:
            skipped += 1
            continue
        padded = tokens + [EOS] * (horizon - len(tokens))
        shifted = padded[1:] + [EOS]
        out.append(SequenceExample(
            image_id=ex.id,
            inputs=np.array([vocab.id_of(t) for t in padded]),
            targets=np.array([vocab.id_of(t) for t in shifted]),
            length=len(tokens)))
    if skipped:
        log.warning("make_sequences: excluded %d annotations longer than %d tokens",
                    skipped, horizon)
    return out


@dataclass
class CellTrace:
    """Detached per-step activations, for tests and for context pooling."""

    gates: dict[str, np.ndarray]
    candidate: np.ndarray
    state: np.ndarray
    output: np.ndarray | None = None


class CellLayer:
    """One recurrent layer's gate parameters (either cell kind)."""

    def __init__(self, name: str, cell_kind: str, dim: int, rng: np.random.Generator):
        gate_names = LSTM_GATES + ("h",) if cell_kind == "lstm" else GRU_GATES + ("h",)
        self.cell_kind = cell_kind
        self.W: dict[str, Parameter] = {}
        self.U: dict[str, Parameter] = {}
        self.b: dict[str, Parameter] = {}
        for g in gate_names:
            self.W[g] = Parameter(f"{name}.W_{g}", Tensor(T.uniform_init(rng, (dim, dim), dim)))
            self.U[g] = Parameter(f"{name}.U_{g}", Tensor(T.uniform_init(rng, (dim, dim), dim)))
            self.b[g] = Parameter(f"{name}.b_{g}", Tensor(np.zeros(dim)))

    def parameters(self) -> list[Parameter]:
        out = []
        for g in self.W:
            out.extend([self.W[g], self.U[g], self.b[g]])
        return out

    def linear(self, gate: str, x: Tensor, recurrent: Tensor) -> Tensor:
        return T.add(T.add(T.matmul(x, self.W[gate].tensor),
                           T.matmul(recurrent, self.U[gate].tensor)),
                     self.b[gate].tensor)


def lstm_step(layer: CellLayer, x: Tensor, h_prev: Tensor, m_prev: Tensor,
              want_trace: bool = True) -> tuple[Tensor, Tensor, CellTrace | None]:
    """One LSTM step: gates read the previous output vector m, the memory
    state h blends the candidate through the input/forget gates, and the
    output is the gated tanh of the new memory."""
    if x.shape != h_prev.shape or x.shape != m_prev.shape:
        raise ShapeError(f"lstm_step: x {x.shape}, h_prev {h_prev.shape}, "
                         f"m_prev {m_prev.shape} must agree")
    i = T.sigmoid(layer.linear("i", x, m_prev))
    f = T.sigmoid(layer.linear("f", x, m_prev))
    o = T.sigmoid(layer.linear("o", x, m_prev))
    candidate = T.tanh(layer.linear("h", x, m_prev))
    h = T.add(T.hadamard(f, h_prev), T.hadamard(i, candidate))
    m = T.hadamard(o, T.tanh(h))
    trace = None
    if want_trace:
        trace = CellTrace(gates={"i": i.data.copy(), "f": f.data.copy(), "o": o.data.copy()},
                          candidate=candidate.data.copy(), state=h.data.copy(),
                          output=m.data.copy())
    return h, m, trace


def gru_step(layer: CellLayer, x: Tensor, h_prev: Tensor,
             want_trace: bool = True) -> tuple[Tensor, CellTrace | None]:
    """One GRU step: update gate z blends the previous state with the
    candidate, whose recurrent term is masked by the reset gate r."""
    if x.shape != h_prev.shape:
        raise ShapeError(f"gru_step: x {x.shape} and h_prev {h_prev.shape} must agree")
    z = T.sigmoid(layer.linear("z", x, h_prev))
    r = T.sigmoid(layer.linear("r", x, h_prev))
    masked = T.hadamard(r, T.matmul(h_prev, layer.U["h"].tensor))
    candidate = T.tanh(T.add(T.add(T.matmul(x, layer.W["h"].tensor), masked),
                             layer.b["h"].tensor))
    ones = Tensor(np.ones_like(z.data))
    h = T.add(T.hadamard(z, h_prev), T.hadamard(T.add(ones, -z), candidate))
    trace = None
    if want_trace:
        trace = CellTrace(gates={"z": z.data.copy(), "r": r.data.copy()},
                          candidate=candidate.data.copy(), state=h.data.copy())
    return h, trace


@dataclass(frozen=True)
class DecoderConfig:
    cell_kind: str
    num_layers: int = 2
    state_dim: int = 64
    dropout: float = 0.0  # inter-layer only, training mode only
    horizon: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.cell_kind not in ("lstm", "gru"):
            raise ConfigError(f"decoder: unknown cell kind {self.cell_kind!r}")
        if self.num_layers < 1:
            raise ConfigError("decoder: needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"decoder: dropout must be in [0, 1), got {self.dropout}")


class DecoderModel:
    """Stacked recurrent layers plus token embedding and output projection."""

    def __init__(self, config: DecoderConfig, vocab: Vocab):
        self.config = config
        self.vocab = vocab
        d = config.state_dim
        rng = np.random.default_rng(config.seed)
        self.embed = Parameter("decoder.embed", Tensor(T.uniform_init(rng, (len(vocab), d), d)))
        self.layers = [CellLayer(f"decoder.layer{l}", config.cell_kind, d, rng)
                       for l in range(config.num_layers)]
        self.out_w = Parameter("decoder.out.weight", Tensor(T.uniform_init(rng, (d, len(vocab)), d)))
        self.out_b = Parameter("decoder.out.bias", Tensor(np.zeros(len(vocab))))

    @property
    def state_dim(self) -> int:
        return self.config.state_dim

    def parameters(self) -> list[Parameter]:
        params = [self.embed]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.out_w, self.out_b])
        return params

    def initial_state(self, embeddings: np.ndarray) -> list[tuple[Tensor, Tensor]]:
        """Per-layer (h, m) tensors; layer 0's h is the image embedding."""
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim != 2 or embeddings.shape[1] != self.state_dim:
            raise ShapeError(f"decoder: embeddings {embeddings.shape} do not match "
                             f"state_dim {self.state_dim}")
        states = []
        zero = np.zeros_like(embeddings)
        for l in range(self.config.num_layers):
            h = Tensor(embeddings if l == 0 else zero.copy())
            m = Tensor(zero.copy())
            states.append((h, m))
        return states

    def step(self, x: Tensor, states: list[tuple[Tensor, Tensor]], training: bool,
             rng: np.random.Generator | None,
             want_trace: bool = False):
        """Advance every layer one step; returns (logits, new states, traces)."""
        new_states: list[tuple[Tensor, Tensor]] = []
        traces: list[CellTrace | None] = []
        inp = x
        for l, layer in enumerate(self.layers):
            if l > 0 and self.config.dropout > 0.0 and training:
                if rng is None:
                    raise UsageError("decoder: training with dropout needs an rng")
                inp = T.dropout(inp, self.config.dropout, rng, training=True)
            h_prev, m_prev = states[l]
            if self.config.cell_kind == "lstm":
                h, m, trace = lstm_step(layer, inp, h_prev, m_prev, want_trace)
                out = m
            else:
                h, trace = gru_step(layer, inp, h_prev, want_trace)
                m = h
                out = h
            new_states.append((h, m))
            traces.append(trace)
            inp = out
        logits = T.add(T.matmul(inp, self.out_w.tensor), self.out_b.tensor)
        return logits, new_states, traces

    def unroll(self, embeddings: np.ndarray, input_ids: np.ndarray, training: bool,
               rng: np.random.Generator | None = None, want_trace: bool = False):
        """Teacher-forced unroll: logits per step plus per-step layer traces."""
        input_ids = np.asarray(input_ids)
        if input_ids.ndim != 2:
            raise ShapeError(f"decoder: input ids must be (B, T), got {input_ids.shape}")
        states = self.initial_state(embeddings)
        step_logits: list[Tensor] = []
        step_traces: list[list[CellTrace | None]] = []
        for t in range(input_ids.shape[1]):
            x = T.gather_rows(self.embed.tensor, input_ids[:, t])
            logits, states, traces = self.step(x, states, training, rng, want_trace)
            step_logits.append(logits)
            step_traces.append(traces)
        return step_logits, step_traces

    # -- persistence --------------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {"kind": "decoder", "config": asdict(self.config),
                "vocab": self.vocab.tokens[1:]}

    def save(self, stem: str | Path) -> None:
        save_checkpoint(stem, self.parameters(), meta=self.checkpoint_meta())

    @classmethod
    def load(cls, stem: str | Path) -> "DecoderModel":
        _, meta = load_checkpoint(stem)
        model = cls(DecoderConfig(**meta["config"]), Vocab(meta["vocab"]))
        load_into(stem, model.parameters())
        return model


# -- training ----------------------------------------------------------------------


@dataclass(frozen=True)
class DecoderHyper:
    """Per-cell training defaults; see default_hyper()."""

    lr: float
    lr_decay: float
    decay_rate: float
    batch_size: int = 50
    epochs: int = 200
    optimizer: str = "rmsprop"
    clip_norm: float = 5.0
    seed: int = 0
    stop_at_token_acc: float | None = None


def default_hyper(cell_kind: str, **overrides) -> DecoderHyper:
    if cell_kind == "lstm":
        base = dict(lr=2e-3, lr_decay=0.97, decay_rate=0.95)
    elif cell_kind == "gru":
        base = dict(lr=1e-4, lr_decay=0.99, decay_rate=0.99)
    else:
        raise ConfigError(f"unknown cell kind {cell_kind!r}")
    base.update(overrides)
    return DecoderHyper(**base)


def default_dropout(cell_kind: str) -> float:
    return 0.9 if cell_kind == "gru" else 0.0


def sequence_loss(step_logits: list[Tensor], targets: np.ndarray) -> Tensor:
    """Sum over time of batch-mean cross entropies."""
    total = None
    for t, logits in enumerate(step_logits):
        step = T.softmax_cross_entropy(logits, targets[:, t], reduction="mean")
        total = step if total is None else T.add(total, step)
    return total


@dataclass
class DecoderEpoch:
    epoch: int
    loss: float
    token_accuracy: float


def write_loss_csv(history: list[DecoderEpoch], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "token_acc"])
        for row in history:
            writer.writerow([row.epoch, f"{row.loss:.6f}", f"{row.token_accuracy:.6f}"])


def compute_embeddings(encoder: EncoderModel, examples: list[AnnotatedImage],
                       chunk: int = 128) -> dict[str, np.ndarray]:
    """Inference-mode image embeddings keyed by example id."""
    out: dict[str, np.ndarray] = {}
    for start in range(0, len(examples), chunk):
        batch = examples[start:start + chunk]
        pixels = np.stack([ex.pixels for ex in batch]).astype(np.float64) / 255.0
        embeds = encoder.encode(pixels[:, None])
        for ex, vec in zip(batch, embeds):
            out[ex.id] = vec
    return out


def token_accuracy(decoder: DecoderModel, embeddings: dict[str, np.ndarray],
                   sequences: list[SequenceExample], chunk: int = 256) -> float:
    """Eval-mode argmax accuracy over every (padded) target position."""
    if not sequences:
        return 0.0
    hits = total = 0
    with T.no_grad():
        for start in range(0, len(sequences), chunk):
            part = sequences[start:start + chunk]
            embeds = np.stack([embeddings[s.image_id] for s in part])
            inputs = np.stack([s.inputs for s in part])
            targets = np.stack([s.targets for s in part])
            step_logits, _ = decoder.unroll(embeds, inputs, training=False)
            for t, logits in enumerate(step_logits):
                predicted = np.argmax(logits.data, axis=1)
                hits += int(np.sum(predicted == targets[:, t]))
                total += len(part)
    return hits / total


def train_decoder(decoder: DecoderModel, embeddings: dict[str, np.ndarray],
                  sequences: list[SequenceExample], hyper: DecoderHyper,
                  loss_csv: str | Path | None = None,
                  checkpoint_stem: str | Path | None = None) -> list[DecoderEpoch]:
    """Teacher-forced training against precomputed image embeddings."""
    if not sequences:
        raise UsageError("train_decoder: no training sequences")
    missing = [s.image_id for s in sequences if s.image_id not in embeddings]
    if missing:
        raise UsageError(f"train_decoder: no embeddings for {missing[:3]}...")

    params = decoder.parameters()
    schedule = LrSchedule(hyper.lr, kind="exponential", decay=hyper.lr_decay)
    opt = Optimizer(params, schedule, kind=hyper.optimizer, decay=hyper.decay_rate,
                    clip_norm=hyper.clip_norm)
    history: list[DecoderEpoch] = []

    for epoch in range(hyper.epochs):
        rng = np.random.default_rng([hyper.seed, epoch])
        order = rng.permutation(len(sequences))
        losses = []
        for start in range(0, len(order), hyper.batch_size):
            part = [sequences[i] for i in order[start:start + hyper.batch_size]]
            embeds = np.stack([embeddings[s.image_id] for s in part])
            inputs = np.stack([s.inputs for s in part])
            targets = np.stack([s.targets for s in part])
            step_logits, _ = decoder.unroll(embeds, inputs, training=True, rng=rng)
            loss = sequence_loss(step_logits, targets)
            try:
                T.backward(loss, params)
            except NumericError as exc:
                raise NumericError(f"decoder training diverged at epoch {epoch}: {exc}") from exc
            opt.step(epoch, hyper.epochs)
            losses.append(loss.item())

        acc = token_accuracy(decoder, embeddings, sequences)
        history.append(DecoderEpoch(epoch, float(np.mean(losses)), acc))
        if epoch % 25 == 0 or epoch == hyper.epochs - 1:
            log.info("decoder epoch %d: loss %.4f token acc %.3f", epoch,
                     history[-1].loss, acc)
        if hyper.stop_at_token_acc is not None and acc >= hyper.stop_at_token_acc:
            break

    if loss_csv is not None:
        write_loss_csv(history, loss_csv)
    if checkpoint_stem is not None:
        decoder.save(checkpoint_stem)
    return history


# -- generation ---------------------------------------------------------------------


def greedy_decode(decoder: DecoderModel, embedding: np.ndarray, seed_token: str,
                  max_len: int = 5) -> list[str]:
    """Greedy argmax chain from a seed token; EOS excluded from the output."""
    vocab = decoder.vocab
    if seed_token not in vocab:
        log.warning("generate: seed token %r not in vocabulary, emitting it alone",
                    seed_token)
        return [seed_token]
    tokens = [seed_token]
    with T.no_grad():
        states = decoder.initial_state(np.asarray(embedding, dtype=np.float64)[None])
        current = vocab.id_of(seed_token)
        while len(tokens) < max_len:
            x = T.gather_rows(decoder.embed.tensor, np.array([current]))
            logits, states, _ = decoder.step(x, states, training=False, rng=None)
            current = int(np.argmax(logits.data[0]))
            if current == vocab.eos_id:
                break
            tokens.append(vocab.tokens[current])
    return tokens


def generate(decoder: DecoderModel, encoder: EncoderModel, label_space: LabelSpace,
             pixels: np.ndarray, max_len: int = 5) -> tuple[list[str], str]:
    """Annotate one image: (generated tokens, predicted class label)."""
    embedding = encoder.encode(pixels)[0]
    predicted, _ = encoder.classify(pixels)
    label = label_space.labels[int(predicted[0])]
    return greedy_decode(decoder, embedding, label_seed_token(label), max_len), label


def generate_corpus(decoder: DecoderModel, encoder: EncoderModel,
                    label_space: LabelSpace, examples: list[AnnotatedImage],
                    max_len: int = 5) -> list[dict]:
    """Prediction records {id, predicted_label, tokens, reference_tokens}."""
    records = []
    embeddings = compute_embeddings(encoder, examples)
    for start in range(0, len(examples), 128):
        batch = examples[start:start + 128]
        pixels = np.stack([ex.pixels for ex in batch]).astype(np.float64) / 255.0
        predicted, _ = encoder.classify(pixels[:, None])
        for ex, cls in zip(batch, predicted):
            label = label_space.labels[int(cls)]
            tokens = greedy_decode(decoder, embeddings[ex.id],
                                   label_seed_token(label), max_len)
            records.append({"id": ex.id, "predicted_label": label,
                            "tokens": tokens, "reference_tokens": ex.tokens})
    return records
