"""Command-line entry point.

Every subcommand accepts ``--seed`` and writes its outputs atomically; each
artifact other than a corpus directory gets a ``<output>.cfg`` sidecar with
the seed and resolved configuration (corpora carry ``corpus.cfg`` inside).
Usage errors exit with status 2, runtime failures with status 1 and a
single-line diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from ldelab import configfile
from ldelab.backend import Backend, CenteringStats, LdaTransform, PldaModel, format_scores, parse_scores
from ldelab.checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from ldelab.embednet.model import EmbeddingModel
from ldelab.errors import ArgumentError, ContractError, FormatError, NumericError, ShapeError
from ldelab.metrics import ScoreSet, format_report
from ldelab.svpipe import (CorpusConfig, ExperimentConfig, SpeakerEmbeddingTable, build_corpus, extract_all,
                           fit_backend, format_grid, grid, load_corpus, parse_grid_config, run_trials, save_corpus,
                           train_sv)
from ldelab.synthdata.io import atomic_write, read_trials
from ldelab.ttsablation import (SynthConfig, SynthModel, SynthTrainConfig, ablate, best_row, format_ablation,
                                parse_sites, train_synth)

FAILURES = (ArgumentError, ContractError, FormatError, NumericError, ShapeError, OSError, ValueError)


# --------------------------------------------------------------------------
# artifact helpers


def _sidecar(out, seed: int, sections: dict[str, dict] | None = None) -> None:
    secs = {"run": {"seed": seed}}
    secs.update(sections or {})
    atomic_write(Path(str(out) + ".cfg"), configfile.format_sections(secs))


def _with_kind(kind: str, sections: dict[str, dict]) -> str:
    return configfile.format_sections({"checkpoint": {"kind": kind}, **sections})


def _split_kind(ckpt: Checkpoint, kind: str, path) -> dict[str, dict[str, str]]:
    sections = configfile.parse(ckpt.config_text)
    found = sections.pop("checkpoint", {}).get("kind")
    if found != kind:
        raise FormatError(f"{path} holds a {found!r} checkpoint, expected {kind!r}")
    return sections


def save_sv_model(path, model: EmbeddingModel, cfg: ExperimentConfig) -> None:
    cfg = dataclasses.replace(cfg, model=model.config)
    write_checkpoint(path, Checkpoint(model.arrays(), _with_kind("sv", cfg.to_sections())))


def load_sv_model(path) -> tuple[EmbeddingModel, ExperimentConfig]:
    ckpt = read_checkpoint(path)
    cfg = ExperimentConfig.from_sections(_split_kind(ckpt, "sv", path))
    model = EmbeddingModel.from_arrays(cfg.model, ckpt.tensors)
    return model, cfg


def save_synth(path, model: SynthModel, train: SynthTrainConfig) -> None:
    secs = {"synth": configfile.to_section(model.config), "synth_train": configfile.to_section(train)}
    write_checkpoint(path, Checkpoint(dict(sorted(model.params.items())), _with_kind("synth", secs)))


def load_synth(path) -> tuple[SynthModel, SynthTrainConfig]:
    ckpt = read_checkpoint(path)
    secs = _split_kind(ckpt, "synth", path)
    cfg = configfile.from_section(SynthConfig, secs.get("synth", {}), where="synth")
    train = configfile.from_section(SynthTrainConfig, secs.get("synth_train", {}), where="synth_train")
    return SynthModel(cfg, {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}), train


def save_backend(path, be: Backend) -> None:
    tensors = {}
    if be.centering is not None:
        tensors["center.mean"] = be.centering.mean
    if be.lda is not None:
        tensors["lda.matrix"] = be.lda.matrix
        tensors["lda.eigenvalues"] = be.lda.eigenvalues
    if be.plda is not None:
        tensors.update({"plda.mu": be.plda.mu, "plda.between": be.plda.between, "plda.within": be.plda.within})
    if be.cohort is not None:
        tensors["cohort"] = be.cohort
    write_checkpoint(path, Checkpoint(tensors, _with_kind("backend", {"backend": {"kind": be.kind}})))


def load_backend(path) -> Backend:
    ckpt = read_checkpoint(path)
    secs = _split_kind(ckpt, "backend", path)
    t = {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}
    plda = PldaModel(t["plda.mu"], t["plda.between"], t["plda.within"]) if "plda.mu" in t else None
    return Backend(secs.get("backend", {}).get("kind", "plda"),
                   CenteringStats(t["center.mean"]) if "center.mean" in t else None,
                   LdaTransform(t["lda.matrix"], t["lda.eigenvalues"]) if "lda.matrix" in t else None,
                   plda, t.get("cohort"))


def format_embeddings(table: SpeakerEmbeddingTable) -> str:
    """``utt <id> <speaker-or-dash> v...`` and ``spk <id> <n> <utt ids...>`` lines, values round-trip exact."""
    lines = []
    for uid, vec in table.utterances.items():
        lines.append("utt " + uid + " " + " ".join(repr(float(v)) for v in vec))
    for spk, ids in table.speaker_utts.items():
        lines.append(f"spk {spk} {len(ids)} " + " ".join(ids))
    return "\n".join(lines) + "\n"


def parse_embeddings(text: str) -> SpeakerEmbeddingTable:
    table = SpeakerEmbeddingTable()
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split(" ")
        try:
            if parts[0] == "utt":
                table.utterances[parts[1]] = np.array([float(v) for v in parts[2:]])
            elif parts[0] == "spk":
                n = int(parts[2])
                if len(parts) != 3 + n:
                    raise ValueError
                table.speaker_utts[parts[1]] = parts[3:]
            else:
                raise ValueError
        except (ValueError, IndexError):
            raise FormatError(f"embedding line {lineno} is malformed") from None
    return table


def _read_config(path, base=None) -> ExperimentConfig:
    if path is None:
        return base or ExperimentConfig()
    return ExperimentConfig.from_text(Path(path).read_text(encoding="utf-8"), base)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = CorpusConfig()
    if args.config:
        cfg = configfile.from_section(CorpusConfig, configfile.parse(Path(args.config).read_text()).get("corpus", {}),
                                      where="corpus")
    over = {"n_train": args.speakers, "n_dev": args.dev, "n_test": args.test, "utts_per_speaker": args.utts,
            "adapt_utts": args.adapt, "seed": args.seed}
    cfg = dataclasses.replace(cfg, **{k: v for k, v in over.items() if v is not None})
    if args.augment:
        cfg = dataclasses.replace(cfg, augment=True)
    corpus = build_corpus(cfg)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.utterances)} utterances for {len(corpus.speaker_splits)} speakers to {args.out}")
    return 0


def cmd_train_sv(args) -> int:
    corpus = load_corpus(args.data)
    cfg = dataclasses.replace(_read_config(args.config), corpus=corpus.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=args.steps))
    init = load_sv_model(args.init)[0] if args.init else None
    result = train_sv(cfg, corpus, init)
    save_sv_model(args.out, result.model, cfg)
    atomic_write(str(args.out) + ".loss.txt", "".join(f"{i} {v!r}\n" for i, v in enumerate(result.losses)))
    _sidecar(args.out, cfg.seed, dataclasses.replace(cfg, model=result.model.config).to_sections())
    print(f"step 0 loss {result.losses[0]:.4f}, final loss {result.losses[-1]:.4f}" if result.losses else "no steps")
    return 0


def cmd_extract(args) -> int:
    corpus = load_corpus(args.data)
    model, cfg = load_sv_model(args.model)
    table = extract_all(model, corpus, args.speakers.split(",") if args.speakers else None, workers=args.workers)
    atomic_write(args.out, format_embeddings(table))
    _sidecar(args.out, args.seed if args.seed is not None else cfg.seed, cfg.to_sections())
    return 0


def cmd_backend_fit(args) -> int:
    corpus = load_corpus(args.data)
    table = parse_embeddings(Path(args.embeddings).read_text())
    cfg = ExperimentConfig(backend=args.backend, lda_dim=args.lda_dim, snorm=not args.no_snorm)
    be = fit_backend(cfg, table, corpus, not args.raw)
    save_backend(args.out, be)
    _sidecar(args.out, args.seed or 0, {"backend": {"kind": args.backend, "postprocess": not args.raw,
                                                    "lda_dim": args.lda_dim, "snorm": not args.no_snorm}})
    return 0


def cmd_score(args) -> int:
    table = parse_embeddings(Path(args.embeddings).read_text())
    trials = read_trials(args.trials)
    backend = load_backend(args.backend) if args.backend != "cosine" else "cosine"
    records, _ = run_trials(table, trials, backend)
    atomic_write(args.out, format_scores(records))
    _sidecar(args.out, args.seed or 0, {"score": {"backend": "cosine" if backend == "cosine" else "fitted"}})
    return 0


def cmd_eval_metrics(args) -> int:
    scores = parse_scores(Path(args.scores).read_text(encoding="utf-8"))
    trials = read_trials(args.trials)
    labels = {(t.enroll_id, t.test_id): t.is_target for t in trials}
    missing = [s for s in scores if (s.enroll_id, s.test_id) not in labels]
    if missing:
        raise ArgumentError(f"score for unknown trial {missing[0].enroll_id} {missing[0].test_id}")
    report = format_report(ScoreSet.from_labels([s.score for s in scores],
                                                [labels[(s.enroll_id, s.test_id)] for s in scores]))
    sys.stdout.write(report)
    if args.out:
        atomic_write(args.out, report)
    return 0


def _synth_train_cfg(args) -> SynthTrainConfig:
    train = SynthTrainConfig(seed=args.seed or 0)
    if args.steps is not None:
        train = dataclasses.replace(train, steps=args.steps)
    return train


def cmd_train_synth(args) -> int:
    corpus = load_corpus(args.data)
    table = parse_embeddings(Path(args.embeddings).read_text())
    speakers = table.speakers
    dim = len(next(iter(speakers.values())))
    cfg = SynthConfig(sites=parse_sites(args.sites), speaker_dim=dim)
    train = _synth_train_cfg(args)
    init = load_synth(args.init)[0] if args.init else None
    result = train_synth(corpus, speakers, cfg, train, init)
    save_synth(args.out, result.model, train)
    atomic_write(str(args.out) + ".loss.txt", "".join(f"{i} {v!r}\n" for i, v in enumerate(result.losses)))
    _sidecar(args.out, train.seed, {"synth": configfile.to_section(cfg), "synth_train": configfile.to_section(train)})
    return 0


def cmd_ablate(args) -> int:
    corpus = load_corpus(args.data)
    model, _ = load_sv_model(args.model)
    table = extract_all(model, corpus)
    base = SynthConfig(speaker_dim=model.config.embed_dim)
    train = _synth_train_cfg(args)
    rows = ablate(corpus, model, table, base, train, n_sentences=args.sentences)
    text = format_ablation(rows)
    atomic_write(args.out, text)
    _sidecar(args.out, train.seed, {"synth": configfile.to_section(base), "synth_train": configfile.to_section(train),
                                    "ablate": {"sentences": args.sentences, "winner": best_row(rows).format().split()[0]}})
    sys.stdout.write(text)
    return 0


def cmd_grid(args) -> int:
    configs = parse_grid_config(Path(args.config).read_text(encoding="utf-8"))
    if args.seed is not None:
        configs = [dataclasses.replace(c, seed=args.seed) for c in configs]
    if args.steps is not None:
        configs = [dataclasses.replace(c, train=dataclasses.replace(c.train, steps=args.steps)) for c in configs]
    corpus = load_corpus(args.data) if args.data else build_corpus(configs[0].corpus)
    rows = grid(configs, corpus)
    text = format_grid(rows)
    atomic_write(args.out, text)
    sections = {}
    for c in configs:
        for name, items in c.to_sections().items():
            sections[f"{c.name}.{name}"] = items
    _sidecar(args.out, configs[0].seed, sections)
    sys.stdout.write(text)
    return 0


def cmd_grad_check(args) -> int:
    from ldelab.gradsuite import TOLERANCE, run_suite

    results = run_suite(args.seed or 0)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} {r.error:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"error: {len(failed)} gradient checks exceed {TOLERANCE:g}: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ldelab", description="Speaker-embedding experiments at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="root seed (recorded in the output sidecar)")
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "generate a synthetic speaker corpus directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="config file with a [corpus] section")
    p.add_argument("--speakers", type=int, help="number of training speakers")
    p.add_argument("--dev", type=int, help="held-out development speakers")
    p.add_argument("--test", type=int, help="held-out test speakers")
    p.add_argument("--utts", type=int, help="utterances per speaker")
    p.add_argument("--adapt", type=int, help="adaptation utterances per held-out speaker")
    p.add_argument("--augment", action="store_true", help="add one channel-degraded copy per training utterance")

    p = add("train-sv", cmd_train_sv, "train an embedding network")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--config", help="experiment config file")
    p.add_argument("--init", help="warm-start checkpoint")
    p.add_argument("--steps", type=int, help="override the number of training steps")

    p = add("extract", cmd_extract, "extract utterance embeddings and speaker averages")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--model", required=True, help="embedding-network checkpoint")
    p.add_argument("--out", required=True, help="output embedding file")
    p.add_argument("--speakers", help="comma-separated speaker subset")
    p.add_argument("--workers", type=int, default=1, help="extraction threads")

    p = add("backend-fit", cmd_backend_fit, "fit centering, LDA and PLDA on training embeddings")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--embeddings", required=True, help="embedding file from extract")
    p.add_argument("--out", required=True, help="output backend checkpoint")
    p.add_argument("--backend", choices=("plda", "cosine"), default="plda", help="scoring model")
    p.add_argument("--lda-dim", type=int, default=200, help="LDA output dimension (capped by speakers-1)")
    p.add_argument("--raw", action="store_true", help="skip centering and LDA")
    p.add_argument("--no-snorm", action="store_true", help="disable s-norm")

    p = add("score", cmd_score, "score a trial list")
    p.add_argument("--embeddings", required=True, help="embedding file from extract")
    p.add_argument("--trials", required=True, help="trial list")
    p.add_argument("--backend", required=True, help="backend checkpoint, or 'cosine' for raw cosine scoring")
    p.add_argument("--out", required=True, help="output score file")

    p = add("eval-metrics", cmd_eval_metrics, "EER and minDCF of a score file")
    p.add_argument("--scores", required=True, help="score file")
    p.add_argument("--trials", required=True, help="trial list with labels")
    p.add_argument("--out", help="also write the report here")

    p = add("train-synth", cmd_train_synth, "train a speaker-conditioned synthesizer")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--embeddings", required=True, help="embedding file from extract")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--sites", default="pre,attn", help="injection sites, e.g. pre,attn,post")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--init", help="warm-start synthesizer checkpoint")

    p = add("ablate", cmd_ablate, "injection-site ablation grid")
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--model", required=True, help="embedding-network checkpoint")
    p.add_argument("--out", required=True, help="output TSV")
    p.add_argument("--steps", type=int, help="synthesizer training steps per combination")
    p.add_argument("--sentences", type=int, default=4, help="generated sentences per speaker")

    p = add("grid", cmd_grid, "train and score every system of a grid config")
    p.add_argument("--config", required=True, help="grid config with [system NAME] sections")
    p.add_argument("--out", required=True, help="output TSV")
    p.add_argument("--data", help="corpus directory (default: generate from the config)")
    p.add_argument("--steps", type=int, help="override training steps for every system")

    add("grad-check", cmd_grad_check, "run the central-difference gradient suite")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FAILURES as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
