"""Command-line pipeline driver.

One output directory holds everything a run produces, in versioned
subtrees (iter0/, context/, iter1/).  Each subcommand checks that its
upstream artifacts exist, records a manifest (config hash, seed, version,
wall time) next to its outputs, and is a no-op when rerun with an
unchanged configuration.  A lock file serializes runs per directory.

Exit codes: 0 success, 2 configuration error, 3 missing upstream
artifact, 4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .cascade import (
    CascadeSettings,
    context_vectors,
    load_vectors,
    plan_clusters,
    relabel,
    save_vectors,
    write_sidecar,
)
from .config import RunConfig, describe_defaults, load_config
from .data import (
    LabelSpace,
    SynthSpec,
    apply_splits,
    ingest,
    make_archetypes,
    save_corpus,
    save_splits,
    split,
    term_stats,
    write_stats_tsv,
)
from .data.mining import mine_labels
from .data.sampler import BatchSpec
from .decoder import (
    DecoderConfig,
    DecoderHyper,
    DecoderModel,
    Vocab,
    compute_embeddings,
    default_dropout,
    default_hyper,
    generate_corpus,
    make_sequences,
    train_decoder,
)
from .encoder import EncoderConfig, EncoderModel, EncoderTrainSettings, fine_tune_reset, train_encoder
from .errors import (
    AnnocascadeError,
    ConfigError,
    MissingArtifactError,
    NumericError,
)
from .evaluate import bleu_report, load_predictions, project_2d, save_predictions, write_projection_tsv
from .optim import LrSchedule

log = logging.getLogger("annocascade.cli")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4

SPLITS = ("train", "val", "test")


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "-C", str(here), "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


class Lock:
    """One pipeline run per output directory."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output dir is locked by another run ({self.path}); "
                              "remove the file if that run is gone")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


class Workspace:
    """Paths, manifests, and staleness checks for one output directory."""

    def __init__(self, out: Path, config: RunConfig, force: bool = False):
        self.out = out
        self.config = config
        self.force = force
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifests").mkdir(exist_ok=True)

    # -- layout -------------------------------------------------------------

    @property
    def corpus_dir(self) -> Path:
        return self.out / "corpus"

    @property
    def splits_path(self) -> Path:
        return self.out / "splits.json"

    def iter_dir(self, iteration: int) -> Path:
        d = self.out / f"iter{iteration}"
        d.mkdir(exist_ok=True)
        return d

    def labels_path(self, iteration: int) -> Path:
        return self.iter_dir(iteration) / "labels.json"

    def encoder_stem(self, iteration: int) -> Path:
        return self.iter_dir(iteration) / "encoder"

    def decoder_stem(self, iteration: int) -> Path:
        return self.iter_dir(iteration) / "decoder"

    def predictions_path(self, iteration: int, split_name: str) -> Path:
        return self.iter_dir(iteration) / f"predictions_{split_name}.jsonl"

    def bleu_path(self, iteration: int) -> Path:
        return self.iter_dir(iteration) / "bleu.json"

    @property
    def context_dir(self) -> Path:
        d = self.out / "context"
        d.mkdir(exist_ok=True)
        return d

    # -- manifests ------------------------------------------------------------

    def manifest_path(self, command: str) -> Path:
        return self.out / "manifests" / f"{command.replace('@', '_iter')}.json"

    def write_manifest(self, command: str, wall_time: float) -> None:
        payload = {
            "command": command,
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "version": version_string(),
            "wall_time_s": round(wall_time, 3),
            "created": datetime.now(timezone.utc).isoformat(),
        }
        self.manifest_path(command).write_text(json.dumps(payload, indent=2) + "\n")

    def up_to_date(self, command: str, outputs: list[Path]) -> bool:
        manifest = self.manifest_path(command)
        if not manifest.exists() or not all(p.exists() for p in outputs):
            return False
        recorded = json.loads(manifest.read_text()).get("config_hash")
        if recorded != self.config.hash() and not self.force:
            raise ConfigError(
                f"{command}: artifacts in {self.out} were built with config hash "
                f"{recorded}, current is {self.config.hash()}; pass --force to rebuild")
        return recorded == self.config.hash() and not self.force

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"{path} not found; run `{producer}` first")
        return path

    def require_stem(self, stem: Path, producer: str) -> Path:
        self.require(stem.with_suffix(".json"), producer)
        self.require(stem.with_suffix(".bin"), producer)
        return stem

    # -- common loading ----------------------------------------------------------

    def load_corpus(self, with_splits: bool = True):
        self.require(self.corpus_dir / "index.jsonl", "synth (or ingest)")
        corpus = ingest(self.corpus_dir, image_side=self.config.image_side)
        if with_splits:
            self.require(self.splits_path, "split")
            apply_splits(corpus, self.splits_path)
        return corpus

    def load_labels(self, iteration: int) -> LabelSpace:
        self.require(self.labels_path(iteration),
                     "mine" if iteration == 0 else "cluster")
        return LabelSpace.load(self.labels_path(iteration))

    def batch_spec(self) -> BatchSpec:
        cfg = self.config
        return BatchSpec(batch_size=cfg.batch_size, normal_cap=cfg.normal_cap,
                         crop_size=cfg.crop_size or None, seed=cfg.seed,
                         aug_multiplier=cfg.aug_multiplier)

    def encoder_schedule(self) -> LrSchedule:
        cfg = self.config
        return LrSchedule(cfg.cnn_lr, kind=cfg.cnn_schedule,
                          step_fraction=cfg.cnn_step_fraction,
                          step_multiplier=cfg.cnn_step_multiplier,
                          decay=cfg.cnn_decay)

    def decoder_hyper(self, epochs: int) -> DecoderHyper:
        cfg = self.config
        overrides: dict = {"epochs": epochs, "batch_size": cfg.rnn_batch,
                           "optimizer": cfg.rnn_optimizer, "clip_norm": cfg.clip_norm,
                           "seed": cfg.seed}
        if cfg.rnn_lr > 0:
            overrides["lr"] = cfg.rnn_lr
        if cfg.rnn_lr_decay > 0:
            overrides["lr_decay"] = cfg.rnn_lr_decay
        if cfg.rnn_decay_rate > 0:
            overrides["decay_rate"] = cfg.rnn_decay_rate
        return default_hyper(cfg.cell_kind, **overrides)


def apply_labels(corpus, space: LabelSpace) -> None:
    for ex in corpus:
        ex.label = space.label_of(ex.id)


def pool_of(corpus):
    """Everything outside the held-out test split takes part in training
    and context extraction; unsplit examples count as train."""
    pool = [ex for ex in corpus if ex.split != "test"]
    for ex in pool:
        if ex.split is None:
            ex.split = "train"
    return pool


# -- subcommands ----------------------------------------------------------------------


def default_synth_spec(cfg: RunConfig) -> SynthSpec:
    archetypes = make_archetypes(cfg.synth_context, cfg.synth_plain_weight,
                                 cfg.synth_mode_weight)
    return SynthSpec(archetypes=archetypes, n_examples=cfg.synth_examples,
                     normal_prior=cfg.synth_normal_prior, image_side=cfg.image_side,
                     noise=cfg.synth_noise, seed=cfg.seed)


def cmd_synth(ws: Workspace, args) -> None:
    from .data import synthesize
    spec = default_synth_spec(ws.config)
    corpus = synthesize(spec)
    save_corpus(corpus, ws.corpus_dir)
    log.info("synthesized %d examples into %s", len(corpus), ws.corpus_dir)


def cmd_ingest(ws: Workspace, args) -> None:
    corpus = ingest(args.corpus, image_side=ws.config.image_side)
    if not corpus:
        raise MissingArtifactError(f"no usable examples under {args.corpus}")
    save_corpus(corpus, ws.corpus_dir)
    log.info("ingested %d examples from %s", len(corpus), args.corpus)


def cmd_stats(ws: Workspace, args) -> None:
    corpus = ws.load_corpus(with_splits=False)
    write_stats_tsv(term_stats(corpus), ws.out / "stats.tsv")
    log.info("wrote %s", ws.out / "stats.tsv")


def cmd_split(ws: Workspace, args) -> None:
    corpus = ws.load_corpus(with_splits=False)
    split(corpus, min_eval_per_label=ws.config.min_eval_per_label,
          seed=ws.config.split_seed)
    save_splits(corpus, ws.splits_path)
    log.info("wrote %s", ws.splits_path)


def cmd_mine(ws: Workspace, args) -> None:
    corpus = ws.load_corpus(with_splits=False)
    space = mine_labels(corpus, min_support=ws.config.min_support)
    space.save(ws.labels_path(0))
    log.info("mined %d labels into %s", space.num_classes, ws.labels_path(0))


def cmd_train_cnn(ws: Workspace, args) -> None:
    cfg = ws.config
    corpus = ws.load_corpus()
    space = ws.load_labels(args.iter)
    apply_labels(corpus, space)
    pool_of(corpus)

    if args.iter == 0:
        model = EncoderModel(
            EncoderConfig(channels=tuple(cfg.channels), kernels=tuple(cfg.kernels),
                          use_batch_norm=cfg.use_batch_norm, seed=cfg.seed),
            space.num_classes)
        lr_scales = None
        epochs = cfg.cnn_epochs
    else:
        ws.require_stem(ws.encoder_stem(0), "train-cnn")
        model = EncoderModel.load(ws.encoder_stem(0))
        lr_scales = fine_tune_reset(model, space, lr_scale=cfg.cascade_lr_scale,
                                    seed=cfg.seed + 1)
        epochs = cfg.cnn_epochs_iter1

    settings = EncoderTrainSettings(
        epochs=epochs, schedule=ws.encoder_schedule(), optimizer="sgd",
        decay=cfg.cnn_momentum, use_data_dropout=cfg.use_data_dropout,
        lr_scales=lr_scales,
        report_path=ws.iter_dir(args.iter) / "encoder_train.csv",
        checkpoint_stem=ws.encoder_stem(args.iter))
    reports = train_encoder(model, corpus, space, ws.batch_spec(), settings)
    log.info("encoder iter%d: final train %.3f val %.3f", args.iter,
             reports[-1].train_accuracy, reports[-1].val_accuracy)


def cmd_train_rnn(ws: Workspace, args) -> None:
    cfg = ws.config
    corpus = ws.load_corpus()
    space = ws.load_labels(args.iter)
    apply_labels(corpus, space)
    pool = pool_of(corpus)
    ws.require_stem(ws.encoder_stem(args.iter), f"train-cnn --iter {args.iter}")
    encoder = EncoderModel.load(ws.encoder_stem(args.iter))

    vocab = Vocab.build(pool)
    dropout = cfg.rnn_dropout if cfg.rnn_dropout >= 0 else default_dropout(cfg.cell_kind)
    decoder = DecoderModel(
        DecoderConfig(cfg.cell_kind, num_layers=cfg.num_layers,
                      state_dim=encoder.embed_dim, dropout=dropout,
                      horizon=cfg.unroll, seed=cfg.seed), vocab)

    train_examples = [ex for ex in pool if ex.split == "train" and ex.label is not None]
    sequences = make_sequences(train_examples, vocab, horizon=cfg.unroll)
    embeddings = compute_embeddings(encoder, train_examples)
    epochs = cfg.rnn_epochs if args.iter == 0 else cfg.rnn_epochs_iter1
    history = train_decoder(decoder, embeddings, sequences, ws.decoder_hyper(epochs),
                            loss_csv=ws.iter_dir(args.iter) / "decoder_train.csv",
                            checkpoint_stem=ws.decoder_stem(args.iter))
    log.info("decoder iter%d: final loss %.4f token acc %.3f", args.iter,
             history[-1].loss, history[-1].token_accuracy)


def cmd_generate(ws: Workspace, args) -> None:
    corpus = ws.load_corpus()
    space = ws.load_labels(args.iter)
    ws.require_stem(ws.encoder_stem(args.iter), f"train-cnn --iter {args.iter}")
    ws.require_stem(ws.decoder_stem(args.iter), f"train-rnn --iter {args.iter}")
    encoder = EncoderModel.load(ws.encoder_stem(args.iter))
    decoder = DecoderModel.load(ws.decoder_stem(args.iter))
    for name in SPLITS:
        part = [ex for ex in corpus if ex.split == name]
        if not part:
            continue
        records = generate_corpus(decoder, encoder, space, part,
                                  max_len=ws.config.unroll)
        save_predictions(records, ws.predictions_path(args.iter, name))
        log.info("generated %d annotations for %s", len(records), name)


def cmd_eval(ws: Workspace, args) -> None:
    reports = {}
    for name in SPLITS:
        path = ws.predictions_path(args.iter, name)
        ws.require(path, f"generate --iter {args.iter}")
        pairs = [(r["tokens"], r["reference_tokens"]) for r in load_predictions(path)]
        reports[name] = bleu_report(pairs, name)
        print(reports[name].format_row())
    payload = {name: rep.to_json() for name, rep in reports.items()}
    ws.bleu_path(args.iter).write_text(json.dumps(payload, indent=2) + "\n")
    log.info("wrote %s", ws.bleu_path(args.iter))


def cmd_context(ws: Workspace, args) -> None:
    corpus = ws.load_corpus()
    ws.require_stem(ws.encoder_stem(0), "train-cnn")
    ws.require_stem(ws.decoder_stem(0), "train-rnn")
    encoder = EncoderModel.load(ws.encoder_stem(0))
    decoder = DecoderModel.load(ws.decoder_stem(0))
    pool = pool_of(corpus)
    vectors = context_vectors(decoder, encoder, pool)
    save_vectors(vectors, ws.context_dir / "vectors")
    write_sidecar(vectors, None, ws.context_dir / "vectors.jsonl")
    log.info("wrote %d context vectors", len(vectors))


def cmd_cluster(ws: Workspace, args) -> None:
    cfg = ws.config
    corpus = ws.load_corpus()
    ws.require_stem(ws.context_dir / "vectors", "context")
    vectors = load_vectors(ws.context_dir / "vectors")
    settings = CascadeSettings(target_size=cfg.cascade_target_size,
                               scale=cfg.cascade_scale, seed=cfg.seed)
    plans = plan_clusters(vectors, settings)
    space = relabel(corpus, plans, iteration=1)
    space.save(ws.labels_path(1))
    clusters: dict[str, int] = {}
    for plan in plans:
        clusters.update(plan.assignment)
    write_sidecar(vectors, clusters, ws.context_dir / "vectors.jsonl")
    log.info("relabeled into %d classes (%s)", space.num_classes, ws.labels_path(1))


def cmd_project(ws: Workspace, args) -> None:
    ws.require_stem(ws.context_dir / "vectors", "context")
    vectors = load_vectors(ws.context_dir / "vectors")
    sidecar_path = ws.context_dir / "vectors.jsonl"
    clusters: dict[str, object] = {}
    if sidecar_path.exists():
        for line in sidecar_path.read_text().splitlines():
            rec = json.loads(line)
            clusters[rec["id"]] = rec.get("cluster")
    coords = project_2d(np.stack([v.vector for v in vectors]))
    rows = [(v.image_id, v.disease,
             str(clusters.get(v.image_id)) if clusters.get(v.image_id) is not None else "-",
             float(x), float(y))
            for v, (x, y) in zip(vectors, coords)]
    write_projection_tsv(rows, ws.out / "projection.tsv")
    log.info("wrote %s", ws.out / "projection.tsv")


def cmd_iterate(ws: Workspace, args) -> None:
    for stage, argv in (
        (cmd_context, argparse.Namespace()),
        (cmd_cluster, argparse.Namespace()),
        (cmd_train_cnn, argparse.Namespace(iter=1)),
        (cmd_train_rnn, argparse.Namespace(iter=1)),
        (cmd_generate, argparse.Namespace(iter=1)),
        (cmd_eval, argparse.Namespace(iter=1)),
    ):
        _run_stage(ws, stage, argv)


# command name -> (handler, outputs fn, takes --iter)
def _outputs_for(ws: Workspace, command: str, args) -> list[Path]:
    it = getattr(args, "iter", 0)
    table = {
        "synth": [ws.corpus_dir / "index.jsonl"],
        "ingest": [ws.corpus_dir / "index.jsonl"],
        "stats": [ws.out / "stats.tsv"],
        "split": [ws.splits_path],
        "mine": [ws.labels_path(0)],
        "train-cnn": [ws.encoder_stem(it).with_suffix(".json")],
        "train-rnn": [ws.decoder_stem(it).with_suffix(".json")],
        "generate": [ws.predictions_path(it, "train")],
        "eval": [ws.bleu_path(it)],
        "context": [ws.context_dir / "vectors.json"],
        "cluster": [ws.labels_path(1)],
        "project": [ws.out / "projection.tsv"],
        "iterate": [ws.bleu_path(1)],
    }
    return table[command]


_HANDLERS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "split": cmd_split,
    "mine": cmd_mine,
    "train-cnn": cmd_train_cnn,
    "train-rnn": cmd_train_rnn,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "context": cmd_context,
    "cluster": cmd_cluster,
    "project": cmd_project,
    "iterate": cmd_iterate,
}

_STAGE_NAMES = {cmd_context: "context", cmd_cluster: "cluster",
                cmd_train_cnn: "train-cnn", cmd_train_rnn: "train-rnn",
                cmd_generate: "generate", cmd_eval: "eval"}


def _run_stage(ws: Workspace, handler, args) -> None:
    name = _STAGE_NAMES[handler]
    key = name + (f"@{args.iter}" if hasattr(args, "iter") else "")
    outputs = _outputs_for(ws, name, args)
    if ws.up_to_date(key, outputs):
        log.info("%s: up to date, skipping", key)
        return
    started = time.monotonic()
    handler(ws, args)
    ws.write_manifest(key, time.monotonic() - started)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, type=Path,
                        help="output directory holding all artifacts")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file (flat schema; see --help epilog)")
    common.add_argument("--force", action="store_true",
                        help="rebuild artifacts made with a different config")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="annocascade",
        description="Train an image annotator (CNN encoder + RNN decoder) and "
                    "refine its label space by clustering joint image/text "
                    "context vectors.",
        epilog=describe_defaults(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    descriptions = {
        "synth": "generate the synthetic corpus",
        "ingest": "import an external corpus directory (index.jsonl + images)",
        "stats": "per-term totals and co-occurrence overlaps (TSV)",
        "split": "stratified train/val/test split",
        "mine": "mine frequent annotation patterns into class labels",
        "train-cnn": "train (or fine-tune, --iter 1) the image classifier",
        "train-rnn": "train the annotation decoder on image embeddings",
        "generate": "greedy-decode annotations for every split",
        "eval": "BLEU-1..4 per split, filtered by reference length",
        "context": "extract joint image/text context vectors",
        "cluster": "k-means the context vectors into a refined label space",
        "project": "2-D projection of context vectors for plotting",
        "iterate": "full second round: context through eval",
    }
    for name, help_text in descriptions.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ingest":
            p.add_argument("--corpus", required=True, type=Path,
                           help="source corpus directory")
        if name in ("train-cnn", "train-rnn", "generate", "eval"):
            p.add_argument("--iter", type=int, choices=(0, 1), default=0,
                           help="pipeline iteration (default 0)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        ws = Workspace(args.out, config, force=args.force)
        with Lock(ws.out):
            if args.command == "iterate":
                cmd_iterate(ws, args)
            else:
                key = args.command + (f"@{args.iter}" if hasattr(args, "iter") else "")
                outputs = _outputs_for(ws, args.command, args)
                if ws.up_to_date(key, outputs):
                    log.info("%s: up to date, skipping", key)
                else:
                    started = time.monotonic()
                    _HANDLERS[args.command](ws, args)
                    ws.write_manifest(key, time.monotonic() - started)
        return EXIT_OK
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except NumericError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except AnnocascadeError as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
