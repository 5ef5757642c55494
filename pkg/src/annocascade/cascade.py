"""Label refinement from joint image/text context vectors.

A context vector for one image/annotation pair is the arithmetic mean of
the decoder's top-layer states while it is unrolled over the true
annotation tokens, starting from the image embedding.  Vectors are
grouped by first-mentioned disease; groups larger than mean + std of the
group sizes are split into sub-labels by k-means (k-means++ seeding,
Lloyd iterations) with k = round(n / target_size).  The refined label
space then drives a second training round: the classifier is fine-tuned
at a reduced trunk rate and the decoder is retrained from scratch on the
enlarged corpus.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.corpus import AnnotatedImage
from .data.mining import LabelSpace
from .data.sampler import BatchSpec
from .decoder import (
    DecoderConfig,
    DecoderHyper,
    DecoderModel,
    Vocab,
    compute_embeddings,
    generate_corpus,
    make_sequences,
    train_decoder,
)
from .encoder import EncoderModel, EncoderTrainSettings, fine_tune_reset, train_encoder
from .errors import AnnocascadeError, DataError, UsageError
from .evaluate import BleuReport, bleu_report
from .tensor import Parameter, Tensor

log = logging.getLogger("annocascade.cascade")

NORMAL_KEY = "normal"


@dataclass
class ContextVector:
    image_id: str
    vector: np.ndarray
    disease: str
    iteration: int = 0


def context_vectors(decoder: DecoderModel, encoder: EncoderModel,
                    examples: list[AnnotatedImage], horizon: int | None = None,
                    capture_states: dict | None = None) -> list[ContextVector]:
    """Mean-pooled top-layer decoder states over each true annotation.

    Annotations longer than the horizon are truncated with a warning; the
    pooled mean runs over the real-token steps only.  Pass a dict as
    capture_states to also receive the raw per-step states keyed by id.
    Extraction is read-only: no model parameter changes.
    """
    horizon = horizon or decoder.config.horizon
    vocab = decoder.vocab
    embeddings = compute_embeddings(encoder, examples)

    by_length: dict[int, list[AnnotatedImage]] = {}
    truncated = 0
    for ex in examples:
        n = len(ex.tokens)
        if n > horizon:
            truncated += 1
            n = horizon
        by_length.setdefault(n, []).append(ex)
    if truncated:
        log.warning("context_vectors: truncated %d annotations to %d tokens",
                    truncated, horizon)

    out: dict[str, ContextVector] = {}
    for n, group in sorted(by_length.items()):
        embeds = np.stack([embeddings[ex.id] for ex in group])
        ids = np.stack([[vocab.id_of(t) for t in ex.tokens[:n]] for ex in group])
        _, traces = decoder.unroll(embeds, ids, training=False, want_trace=True)
        # traces is time-major; take the top layer's state at each step.
        top_states = [step[-1].state for step in traces]
        for b, ex in enumerate(group):
            states = [top_states[t][b] for t in range(n)]
            pooled = np.stack(states).mean(axis=0)
            if capture_states is not None:
                capture_states[ex.id] = states
            out[ex.id] = ContextVector(ex.id, pooled, ex.disease)
    return [out[ex.id] for ex in examples]


def save_vectors(vectors: list[ContextVector], stem: str | Path) -> None:
    """Persist as manifest+blob (same format as model checkpoints)."""
    from .checkpoint import save_checkpoint
    params = [Parameter(v.image_id, Tensor(v.vector), trainable=False) for v in vectors]
    meta = {"kind": "context_vectors",
            "iteration": vectors[0].iteration if vectors else 0,
            "diseases": {v.image_id: v.disease for v in vectors}}
    save_checkpoint(stem, params, meta=meta)


def load_vectors(stem: str | Path) -> list[ContextVector]:
    from .checkpoint import load_checkpoint
    arrays, meta = load_checkpoint(stem)
    diseases = meta["diseases"]
    return [ContextVector(name, arr, diseases[name], meta.get("iteration", 0))
            for name, arr in arrays.items()]


def write_sidecar(vectors: list[ContextVector], clusters: dict[str, int] | None,
                  path: str | Path) -> None:
    with open(path, "w") as fh:
        for v in vectors:
            cluster = clusters.get(v.image_id) if clusters else None
            fh.write(json.dumps({"id": v.image_id, "disease": v.disease,
                                 "cluster": cluster}) + "\n")


# -- k-means ----------------------------------------------------------------------


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centroids by squared distance."""
    centroids = [x[rng.integers(len(x))]]
    for _ in range(k - 1):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centroids], axis=0)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[rng.integers(len(x))])
            continue
        centroids.append(x[rng.choice(len(x), p=d2 / total)])
    return np.stack(centroids)


def lloyd(x: np.ndarray, centroids: np.ndarray,
          max_iter: int = 100) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lloyd iterations until the assignment is fixed or max_iter.

    Returns (centroids, labels, per-iteration objective); the objective is
    the assignment cost under the centroids entering each iteration, so it
    is non-increasing.  A centroid that loses all points keeps its place.
    """
    centroids = centroids.copy()
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(len(centroids)):
            members = x[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return centroids, labels, np.asarray(history)


def _merge_small_clusters(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray,
                          min_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Fold empty or undersized clusters into their nearest neighbour."""
    while len(centroids) > 1:
        sizes = np.bincount(labels, minlength=len(centroids))
        small = np.where(sizes < min_size)[0]
        if small.size == 0:
            break
        victim = int(small[np.argmin(sizes[small])])
        others = [c for c in range(len(centroids)) if c != victim]
        if sizes[victim]:
            d = ((centroids[others] - centroids[victim]) ** 2).sum(axis=1)
            target = others[int(np.argmin(d))]
            log.warning("cluster repair: merging cluster of %d into neighbour", sizes[victim])
            labels[labels == victim] = target
        centroids = np.delete(centroids, victim, axis=0)
        labels = np.where(labels > victim, labels - 1, labels)
        for c in range(len(centroids)):
            members = x[labels == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return centroids, labels


@dataclass
class ClusterPlan:
    """Sub-grouping of one disease's context vectors.

    k is the planned count round(n / target_size); after small-cluster
    repair the realized count is len(centroids), available as
    cluster_count.
    """

    disease: str
    n: int
    k: int
    centroids: np.ndarray
    assignment: dict[str, int]
    min_cluster_size: int

    @property
    def cluster_count(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class CascadeSettings:
    target_size: int = 50
    scale: float = 1.0  # shrinks target_size for desk-size corpora
    threshold: float | None = None  # None: mean + std of group sizes
    min_cluster_size: int | None = None  # None: half the effective target
    lr_scale: float = 0.1
    seed: int = 0

    @property
    def effective_target(self) -> int:
        return max(2, round(self.target_size * self.scale))


def group_sizes(vectors: list[ContextVector]) -> dict[str, int]:
    sizes: dict[str, int] = {}
    for v in vectors:
        if v.disease != NORMAL_KEY:
            sizes[v.disease] = sizes.get(v.disease, 0) + 1
    return sizes


def size_threshold(sizes: dict[str, int]) -> float:
    """Clustering cutoff: mean plus (population) std of the group sizes."""
    values = np.array(list(sizes.values()), dtype=np.float64)
    if values.size == 0:
        return np.inf
    return float(values.mean() + values.std())


def plan_clusters(vectors: list[ContextVector], settings: CascadeSettings) -> list[ClusterPlan]:
    """One plan per disease; groups at or above the threshold get k-means."""
    groups: dict[str, list[ContextVector]] = {}
    for v in vectors:
        groups.setdefault(v.disease, []).append(v)

    sizes = group_sizes(vectors)
    threshold = settings.threshold if settings.threshold is not None else size_threshold(sizes)
    target = settings.effective_target
    min_size = (settings.min_cluster_size if settings.min_cluster_size is not None
                else max(2, round(target / 2)))
    log.info("cluster threshold %.2f, target size %d, min cluster size %d",
             threshold, target, min_size)

    plans: list[ClusterPlan] = []
    for disease in sorted(groups):
        members = groups[disease]
        n = len(members)
        x = np.stack([v.vector for v in members])
        if disease == NORMAL_KEY or n < threshold:
            plans.append(ClusterPlan(disease, n, 1, x.mean(axis=0, keepdims=True),
                                     {v.image_id: 0 for v in members}, min_size))
            continue
        k = max(1, round(n / target))
        if k > n:
            log.warning("plan_clusters: %s has k=%d > n=%d, clamping", disease, k, n)
            k = n
        rng = np.random.default_rng([settings.seed, n, len(disease)])
        centroids, labels, _ = lloyd(x, kmeans_pp_init(x, k, rng))
        centroids, labels = _merge_small_clusters(x, centroids, labels, min_size)
        assignment = {v.image_id: int(labels[i]) for i, v in enumerate(members)}
        plans.append(ClusterPlan(disease, n, k, centroids, assignment, min_size))
    return plans


def relabel(examples: list[AnnotatedImage], plans: list[ClusterPlan],
            iteration: int = 1) -> LabelSpace:
    """Materialize the refined label space and stamp it onto the examples.

    Diseases with one realized cluster keep their name; split diseases
    get "<disease>#<index>" sub-labels.  Examples not covered by any plan
    (the held-out test split) lose their stale label.
    """
    labels: list[str] = []
    for p in sorted(plans, key=lambda p: p.disease):
        if p.cluster_count == 1:
            labels.append(p.disease)
        else:
            labels.extend(f"{p.disease}#{c}" for c in range(p.cluster_count))
    index = {name: i for i, name in enumerate(labels)}

    assignment: dict[str, int] = {}
    covered = set()
    for p in plans:
        for ex_id, cluster in p.assignment.items():
            name = p.disease if p.cluster_count == 1 else f"{p.disease}#{cluster}"
            assignment[ex_id] = index[name]
            covered.add(ex_id)

    space = LabelSpace(iteration=iteration, labels=labels, assignment=assignment)
    for ex in examples:
        ex.label = space.label_of(ex.id)
    missing = [ex for ex in examples if ex.split != "test" and ex.id not in covered]
    if missing:
        raise DataError(f"relabel: plans do not cover diseases "
                        f"{sorted({ex.disease for ex in missing})[:5]}")
    return space


def cluster_purity(plans: list[ClusterPlan], truth: dict[str, str],
                   min_clusters: int = 2) -> float:
    """Majority-mode fraction over the clusters of actually-split diseases."""
    correct = total = 0
    for p in plans:
        if p.cluster_count < min_clusters:
            continue
        members_by_cluster: dict[int, list[str]] = {}
        for ex_id, c in p.assignment.items():
            members_by_cluster.setdefault(c, []).append(ex_id)
        for members in members_by_cluster.values():
            modes: dict[str, int] = {}
            for ex_id in members:
                mode = truth.get(ex_id, "?")
                modes[mode] = modes.get(mode, 0) + 1
            correct += max(modes.values())
            total += len(members)
    if total == 0:
        raise UsageError("cluster_purity: no disease was split into clusters")
    return correct / total


# -- second-round orchestration ------------------------------------------------------


@dataclass
class IterationResult:
    vectors: list[ContextVector]
    plans: list[ClusterPlan]
    label_space: LabelSpace
    encoder: EncoderModel
    decoder: DecoderModel
    predictions: dict[str, list[dict]]
    bleu: dict[str, BleuReport]


@dataclass
class IterationSettings:
    cascade: CascadeSettings = field(default_factory=CascadeSettings)
    encoder_settings: EncoderTrainSettings = field(default_factory=EncoderTrainSettings)
    batch_spec: BatchSpec = field(default_factory=lambda: BatchSpec(50))
    decoder_config: DecoderConfig | None = None  # None: reuse iteration-0 config
    decoder_hyper: DecoderHyper | None = None
    horizon: int = 5
    max_len: int = 5


def _stage(name: str):
    class _Ctx:
        def __enter__(self):
            log.info("cascade stage: %s", name)
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, AnnocascadeError):
                raise AnnocascadeError(f"stage {name} failed: {exc}") from exc
            if isinstance(exc, AnnocascadeError):
                exc.args = (f"stage {name}: {exc}",) + exc.args[1:]
            return False

    return _Ctx()


def run_iteration(examples: list[AnnotatedImage], encoder: EncoderModel,
                  decoder: DecoderModel, settings: IterationSettings) -> IterationResult:
    """Full second round: context, cluster, relabel, fine-tune, retrain,
    generate, evaluate.  The passed-in iteration-0 models are not mutated."""
    pool = [ex for ex in examples if ex.split != "test"]
    for ex in pool:
        if ex.split is None:
            ex.split = "train"

    with _stage("context"):
        vectors = context_vectors(decoder, encoder, pool)

    with _stage("cluster"):
        plans = plan_clusters(vectors, settings.cascade)

    with _stage("relabel"):
        space = relabel(examples, plans, iteration=1)

    with _stage("fine-tune-encoder"):
        encoder1 = copy.deepcopy(encoder)
        scales = fine_tune_reset(encoder1, space, lr_scale=settings.cascade.lr_scale,
                                 seed=settings.cascade.seed + 1)
        enc_settings = copy.copy(settings.encoder_settings)
        enc_settings.lr_scales = scales
        train_encoder(encoder1, examples, space, settings.batch_spec, enc_settings)

    with _stage("retrain-decoder"):
        vocab = Vocab.build(pool)
        cfg = settings.decoder_config or decoder.config
        decoder1 = DecoderModel(cfg, vocab)
        train_examples = [ex for ex in pool if ex.split == "train"]
        sequences = make_sequences(train_examples, vocab, horizon=settings.horizon)
        embeddings = compute_embeddings(encoder1, train_examples)
        hyper = settings.decoder_hyper or DecoderHyper(lr=1e-3, lr_decay=0.99,
                                                       decay_rate=0.99)
        train_decoder(decoder1, embeddings, sequences, hyper)

    with _stage("generate"):
        predictions = {}
        for name in ("train", "val", "test"):
            part = [ex for ex in examples if ex.split == name]
            if part:
                predictions[name] = generate_corpus(decoder1, encoder1, space, part,
                                                    max_len=settings.max_len)

    with _stage("evaluate"):
        bleu = {name: bleu_report([(r["tokens"], r["reference_tokens"]) for r in recs],
                                  name)
                for name, recs in predictions.items()}

    return IterationResult(vectors=vectors, plans=plans, label_space=space,
                           encoder=encoder1, decoder=decoder1,
                           predictions=predictions, bleu=bleu)
