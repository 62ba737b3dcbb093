"""Speaker-verification experiment at desk scale.

corpus -> preprocess -> train embedding network -> extract -> backend ->
trials -> metrics, plus the per-speaker embedding averages consumed by the
synthesizer.
"""

from __future__ import annotations

import dataclasses
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ldelab import configfile
from ldelab.backend import Backend, ScoreRecord, cosine_score
from ldelab.embednet.encoders import EncoderConfig, update_running
from ldelab.embednet.margin import MarginConfig
from ldelab.embednet.model import EmbeddingModel, ModelConfig
from ldelab.embednet.pooling import PoolingConfig
from ldelab.errors import ArgumentError, ContractError, FormatError, NumericError, ShapeError
from ldelab.metrics import ScoreSet, eer, min_dcf
from ldelab.substrate.optim import MomentumSGD
from ldelab.substrate.rng import RngStream, derive_seed
from ldelab.substrate.tensor import Tape, forward_backward
from ldelab.synthdata import io as sio
from ldelab.synthdata.corpus import (CLEAN, FRAME_RATE, FeatureSequence, gen_population, gen_utterance,
                                     random_channel, random_tokens, utterance_seed)
from ldelab.synthdata.preprocess import preprocess

SPLITS = ("train", "dev", "test")
ROLES = ("sv", "adapt", "aug", "tts")


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 20
    n_dev: int = 4
    n_test: int = 4
    utts_per_speaker: int = 20
    adapt_utts: int = 5
    d_latent: int = 16
    min_dur_s: float = 4.0
    max_dur_s: float = 10.0
    augment: bool = False
    tts_sentences: int = 8
    tts_tokens: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 2:
            raise ArgumentError("need at least 2 training speakers")
        if self.utts_per_speaker < 2:
            raise ArgumentError("need at least 2 utterances per speaker")
        if not 0 <= self.adapt_utts < self.utts_per_speaker - 1:
            raise ArgumentError("adapt_utts must leave at least 2 trial utterances per held-out speaker")
        if not 0 < self.min_dur_s <= self.max_dur_s:
            raise ArgumentError("utterance durations must satisfy 0 < min <= max")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    min_chunk_s: float = 3.0
    max_chunk_s: float = 8.0
    lr: float = 0.01
    momentum: float = 0.9
    plateau_window: int = 200


DESK_ENCODER = EncoderConfig(widths=(32, 32, 32, 32, 96), channels=(8, 16, 16, 32))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "x-vec"
    seed: int = 0
    backend: str = "plda"
    lda_dim: int = 200
    snorm: bool = True
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(encoder=DESK_ENCODER, embed_dim=64, n_classes=20))
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_sections(self) -> dict[str, dict]:
        out = {"experiment": configfile.to_section(self), "corpus": configfile.to_section(self.corpus),
               "train": configfile.to_section(self.train)}
        out.update(self.model.to_sections())
        return out

    def to_text(self) -> str:
        return configfile.format_sections(self.to_sections())

    @classmethod
    def from_sections(cls, sections: dict[str, dict[str, str]], base: "ExperimentConfig | None" = None):
        base = base or cls()
        known = {"experiment", "corpus", "train", "model", "encoder", "pooling", "margin"}
        unknown = sorted(set(sections) - known)
        if unknown:
            raise ArgumentError(f"unknown config section(s) {unknown}")
        model = base.model
        model = dataclasses.replace(
            model,
            encoder=configfile.from_section(EncoderConfig, sections.get("encoder", {}), model.encoder, "encoder"),
            pooling=configfile.from_section(PoolingConfig, sections.get("pooling", {}), model.pooling, "pooling"),
            margin=configfile.from_section(MarginConfig, sections.get("margin", {}), model.margin, "margin"))
        m = sections.get("model", {})
        bad = sorted(set(m) - {"embed_dim", "n_classes"})
        if bad:
            raise ArgumentError(f"unknown config key(s) {bad} in [model]")
        model = dataclasses.replace(model, **{k: int(v) for k, v in m.items()})
        exp = configfile.from_section(_ExperimentScalars, sections.get("experiment", {}),
                                      _ExperimentScalars.of(base), "experiment")
        return cls(**dataclasses.asdict(exp),
                   corpus=configfile.from_section(CorpusConfig, sections.get("corpus", {}), base.corpus, "corpus"),
                   model=model,
                   train=configfile.from_section(TrainConfig, sections.get("train", {}), base.train, "train"))

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return cls.from_sections(configfile.parse(text), base)


@dataclass(frozen=True)
class _ExperimentScalars:
    name: str = "x-vec"
    seed: int = 0
    backend: str = "plda"
    lda_dim: int = 200
    snorm: bool = True

    @classmethod
    def of(cls, cfg: ExperimentConfig) -> "_ExperimentScalars":
        return cls(cfg.name, cfg.seed, cfg.backend, cfg.lda_dim, cfg.snorm)


def parse_grid_config(text: str) -> list[ExperimentConfig]:
    """Base sections plus one ``[system NAME]`` section per grid entry.

    A system section holds dotted overrides such as ``pooling.kind = lde``.
    """
    sections = configfile.parse(text)
    base_secs = {k: v for k, v in sections.items() if not k.startswith("system ")}
    base = ExperimentConfig.from_sections(base_secs)
    configs = []
    for name, items in sections.items():
        if not name.startswith("system "):
            continue
        over: dict[str, dict[str, str]] = {}
        for key, value in items.items():
            if "." not in key:
                raise ArgumentError(f"[{name}]: override {key!r} must look like section.key")
            sec, sub = key.split(".", 1)
            over.setdefault(sec, {})[sub] = value
        over.setdefault("experiment", {})["name"] = name[len("system "):].strip()
        configs.append(ExperimentConfig.from_sections(over, base))
    if not configs:
        raise ArgumentError("grid config defines no [system NAME] sections")
    return configs


# --------------------------------------------------------------------------
# corpus


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: str
    split: str
    role: str
    raw: FeatureSequence
    tokens: np.ndarray | None = None
    features: FeatureSequence | None = None

    def __post_init__(self):
        if self.features is None:
            self.features = preprocess(self.raw)


class Corpus:
    """Utterances of a speaker population partitioned into train / dev / test speakers."""

    def __init__(self, config: CorpusConfig, speaker_splits: dict[str, str], utterances: list[Utterance]):
        self.config = config
        self.speaker_splits = dict(speaker_splits)
        self.utterances = {u.utterance_id: u for u in utterances}
        for u in utterances:
            if self.speaker_splits.get(u.speaker_id) != u.split:
                raise ContractError(f"utterance {u.utterance_id} split disagrees with its speaker")

    @property
    def feat_dim(self) -> int:
        return next(iter(self.utterances.values())).raw.dim

    def speakers(self, *splits: str) -> list[str]:
        splits = splits or SPLITS
        return sorted(s for s, sp in self.speaker_splits.items() if sp in splits)

    @property
    def train_speakers(self) -> list[str]:
        return self.speakers("train")

    @property
    def heldout_speakers(self) -> list[str]:
        return self.speakers("dev", "test")

    def select(self, speaker_id: str | None = None, roles=ROLES) -> list[Utterance]:
        return [u for uid, u in sorted(self.utterances.items())
                if (speaker_id is None or u.speaker_id == speaker_id) and u.role in roles]

    def training_pool(self) -> list[Utterance]:
        """Utterances eligible for embedding-network minibatches (train speakers only)."""
        pool = [u for u in self.select(roles=("sv", "aug")) if u.split == "train"]
        assert all(self.speaker_splits[u.speaker_id] == "train" for u in pool)
        return pool


def _utt(config: CorpusConfig, spk, split: str, i: int, role: str) -> list[Utterance]:
    seed = config.seed
    dur_rng = RngStream(utterance_seed(seed, spk.speaker_id, i, "dur"))
    dur = float(dur_rng.uniform(config.min_dur_s, config.max_dur_s))
    dur = round(dur * FRAME_RATE) / FRAME_RATE
    uid = f"{spk.speaker_id}-u{i:03d}"
    clean = gen_utterance(spk, dur, CLEAN, utterance_seed(seed, spk.speaker_id, i), utterance_id=uid)
    out = [Utterance(uid, spk.speaker_id, split, role, clean)]
    if config.augment and split == "train":
        aseed = utterance_seed(seed, spk.speaker_id, i, "aug")
        chan = random_channel(RngStream(aseed))
        aug = gen_utterance(spk, dur, chan, utterance_seed(seed, spk.speaker_id, i), utterance_id=uid + "a")
        out.append(Utterance(uid + "a", spk.speaker_id, split, "aug", aug))
    return out


def tts_tokens(seed: int, tag: str, index: int, n_tokens: int, vocab_size: int = 24) -> np.ndarray:
    return random_tokens(RngStream(derive_seed(seed, "text", tag, index)), n_tokens, vocab_size)


def build_corpus(config: CorpusConfig = CorpusConfig()) -> Corpus:
    n_total = config.n_train + config.n_dev + config.n_test
    speakers = gen_population(n_total, config.d_latent, config.seed)
    splits = {}
    utts: list[Utterance] = []
    for k, spk in enumerate(speakers):
        split = "train" if k < config.n_train else ("dev" if k < config.n_train + config.n_dev else "test")
        splits[spk.speaker_id] = split
        for i in range(config.utts_per_speaker):
            role = "adapt" if split != "train" and i < config.adapt_utts else "sv"
            utts.extend(_utt(config, spk, split, i, role))
        for j in range(config.tts_sentences):
            toks = tts_tokens(config.seed, spk.speaker_id, j, config.tts_tokens)
            uid = f"{spk.speaker_id}-s{j:03d}"
            seq = gen_utterance(spk, 4 * config.tts_tokens / FRAME_RATE, CLEAN,
                                utterance_seed(config.seed, spk.speaker_id, j, "tts"), tokens=toks, utterance_id=uid)
            utts.append(Utterance(uid, spk.speaker_id, split, "tts", seq, toks))
    return Corpus(config, splits, utts)


def save_corpus(corpus: Corpus, out_dir) -> None:
    """Write features, a manifest, TTS token lists, trials and the generating config."""
    out = Path(out_dir)
    manifest, tokens = [], []
    for uid, u in sorted(corpus.utterances.items()):
        sio.write_features(out / "feats" / f"{uid}.sfea", u.raw)
        manifest.append(f"{uid} {u.speaker_id} {u.split} {u.role}\n")
        if u.tokens is not None:
            tokens.append(uid + " " + " ".join(str(int(t)) for t in u.tokens) + "\n")
    sio.atomic_write(out / "manifest.txt", "".join(manifest))
    sio.atomic_write(out / "tokens.txt", "".join(tokens))
    sio.write_trials(out / "trials.txt", build_trials(corpus))
    sio.atomic_write(out / "corpus.cfg", configfile.format_sections({"corpus": configfile.to_section(corpus.config)}))


def load_corpus(data_dir) -> Corpus:
    d = Path(data_dir)
    try:
        cfg_text = (d / "corpus.cfg").read_text(encoding="utf-8")
        manifest = (d / "manifest.txt").read_text(encoding="utf-8")
        token_text = (d / "tokens.txt").read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise FormatError(f"corpus directory {d} is missing {Path(exc.filename).name}") from None
    config = configfile.from_section(CorpusConfig, configfile.parse(cfg_text).get("corpus", {}), where="corpus")
    toks = {}
    for line in token_text.splitlines():
        parts = line.split(" ")
        toks[parts[0]] = np.array([int(t) for t in parts[1:]], dtype=np.int64)
    splits, utts = {}, []
    for lineno, line in enumerate(manifest.splitlines(), 1):
        parts = line.split(" ")
        if len(parts) != 4 or parts[2] not in SPLITS or parts[3] not in ROLES:
            raise FormatError(f"manifest line {lineno} is malformed: {line!r}")
        uid, spk, split, role = parts
        splits[spk] = split
        utts.append(Utterance(uid, spk, split, role, sio.read_features(d / "feats" / f"{uid}.sfea", uid), toks.get(uid)))
    return Corpus(config, splits, utts)


def build_trials(corpus: Corpus, seed: int | None = None) -> list[sio.Trial]:
    """All same-speaker pairs of held-out trial utterances plus as many seeded cross-speaker pairs."""
    seed = corpus.config.seed if seed is None else seed
    by_spk = {s: [u.utterance_id for u in corpus.select(s, roles=("sv",))] for s in corpus.heldout_speakers}
    targets = [sio.Trial(a, b, sio.TARGET) for ids in by_spk.values() for a, b in itertools.combinations(ids, 2)]
    cross = [(a, b) for s1, s2 in itertools.combinations(sorted(by_spk), 2) for a in by_spk[s1] for b in by_spk[s2]]
    rng = RngStream(derive_seed(seed, "trials"))
    if not targets or not cross:
        raise ArgumentError("trial construction needs at least two held-out speakers with two utterances each")
    pick = rng.shuffle(np.arange(len(cross)))[:len(targets)]
    nontargets = [sio.Trial(*cross[i], sio.NONTARGET) for i in sorted(pick)]
    order = rng.child("order").shuffle(np.arange(len(targets) + len(nontargets)))
    pooled = targets + nontargets
    return [pooled[i] for i in order]


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: EmbeddingModel
    losses: list[float]


def resolve_model_config(cfg: ExperimentConfig, corpus: Corpus) -> ModelConfig:
    model = cfg.model
    if model.encoder.in_dim != corpus.feat_dim:
        raise ShapeError(f"encoder in_dim {model.encoder.in_dim} does not match corpus feature width {corpus.feat_dim}")
    return dataclasses.replace(model, n_classes=len(corpus.train_speakers))


def make_batch(corpus: Corpus, train: TrainConfig, seed: int, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Minibatch for ``step``: one shared chunk length, per-example utterance and offset."""
    pool = corpus.training_pool()
    labels_of = {s: i for i, s in enumerate(corpus.train_speakers)}
    rng = RngStream(derive_seed(seed, "batch", step))
    picks = rng.integers(0, len(pool), train.batch_size)
    chosen = [pool[int(i)] for i in picks]
    lo = int(round(train.min_chunk_s * FRAME_RATE))
    hi = int(round(train.max_chunk_s * FRAME_RATE))
    length = int(rng.integers(lo, hi + 1))
    length = min([length] + [u.features.n_frames for u in chosen])
    frames = np.empty((len(chosen), length, corpus.feat_dim), dtype=np.float32)
    for b, u in enumerate(chosen):
        off = int(rng.integers(0, u.features.n_frames - length + 1))
        frames[b] = u.features.frames[off:off + length]
    labels = np.array([labels_of[u.speaker_id] for u in chosen], dtype=np.int64)
    return frames, labels


def train_sv(cfg: ExperimentConfig, corpus: Corpus, init: EmbeddingModel | None = None,
             progress=None) -> TrainResult:
    """Seeded minibatch training; ``init`` warm-starts from an existing model."""
    mcfg = resolve_model_config(cfg, corpus)
    if init is not None:
        if init.config != mcfg:
            raise ArgumentError("warm-start checkpoint architecture differs from the experiment config")
        model = init.copy()
    else:
        model = EmbeddingModel.init(mcfg, derive_seed(cfg.seed, "init"))
    opt = MomentumSGD(cfg.train.lr, cfg.train.momentum, cfg.train.plateau_window)
    losses = []
    for step in range(cfg.train.steps):
        batch, labels = make_batch(corpus, cfg.train, cfg.seed, step)
        lam = mcfg.margin.anneal(step)
        tape = Tape()
        p = model.bind(tape)
        loss, stats = model.loss(tape, p, tape.leaf(batch, requires_grad=False), labels, lam, training=True)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss at step {step}")
        grads = forward_backward(tape, loss)
        opt.step(model.params, {k: grads[t.id] for k, t in p.items()})
        tape.release()
        update_running(model.buffers, stats)
        opt.observe(value)
        losses.append(value)
        if progress is not None:
            progress(step, value)
    return TrainResult(model, losses)


# --------------------------------------------------------------------------
# extraction


@dataclass
class SpeakerEmbeddingTable:
    utterances: dict[str, np.ndarray] = field(default_factory=dict)
    speaker_utts: dict[str, list[str]] = field(default_factory=dict)

    def speaker_mean(self, speaker_id: str) -> np.ndarray:
        if speaker_id not in self.speaker_utts:
            raise ArgumentError(f"no embeddings for speaker {speaker_id!r}")
        return np.mean([self.utterances[u] for u in self.speaker_utts[speaker_id]], axis=0)

    @property
    def speakers(self) -> dict[str, np.ndarray]:
        return {s: self.speaker_mean(s) for s in sorted(self.speaker_utts)}

    def merge(self, other: "SpeakerEmbeddingTable") -> "SpeakerEmbeddingTable":
        utts = dict(self.utterances)
        utts.update(other.utterances)
        spk = {s: list(v) for s, v in self.speaker_utts.items()}
        for s, ids in other.speaker_utts.items():
            spk[s] = sorted(set(spk.get(s, [])) | set(ids))
        return SpeakerEmbeddingTable(dict(sorted(utts.items())), dict(sorted(spk.items())))


def extract_all(model: EmbeddingModel, corpus: Corpus, speakers=None, workers: int = 1) -> SpeakerEmbeddingTable:
    """Per-utterance embeddings and per-speaker averages.

    Training speakers average over all their verification utterances;
    held-out speakers average over their adaptation utterances only.
    """
    speakers = corpus.speakers() if speakers is None else list(speakers)
    for s in speakers:
        if s not in corpus.speaker_splits:
            raise ArgumentError(f"unknown speaker id {s!r}")
    utts = [u for s in sorted(set(speakers)) for u in corpus.select(s, roles=("sv", "adapt"))]

    def one(u: Utterance):
        return u.utterance_id, model.extract(u.features).vector.astype(np.float64)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, utts))
    else:
        results = [one(u) for u in utts]
    table = SpeakerEmbeddingTable(dict(sorted(results)))
    for s in sorted(set(speakers)):
        held = corpus.speaker_splits[s] != "train"
        ids = [u.utterance_id for u in corpus.select(s, roles=("adapt",) if held else ("sv",))]
        if ids:
            table.speaker_utts[s] = ids
    return table


# --------------------------------------------------------------------------
# scoring


def fit_backend(cfg: ExperimentConfig, table: SpeakerEmbeddingTable, corpus: Corpus, postprocess: bool) -> Backend:
    ids = [u.utterance_id for s in corpus.train_speakers for u in corpus.select(s, roles=("sv",))]
    missing = [i for i in ids if i not in table.utterances]
    if missing:
        raise ArgumentError(f"embedding table lacks training utterance {missing[0]!r}")
    x = np.stack([table.utterances[i] for i in ids])
    labels = [corpus.utterances[i].speaker_id for i in ids]
    return Backend.fit(x, labels, cfg.backend, postprocess, cfg.lda_dim, cfg.snorm)


def run_trials(table, trials, backend: Backend | str = "cosine") -> tuple[list[ScoreRecord], ScoreSet]:
    """Score trials in list order; ``table`` maps ids to embeddings (or is a SpeakerEmbeddingTable)."""
    vectors = table.utterances if isinstance(table, SpeakerEmbeddingTable) else table
    for t in trials:
        for key in (t.enroll_id, t.test_id):
            if key not in vectors:
                raise ArgumentError(f"trial id {key!r} has no embedding")
    if isinstance(backend, str):
        if backend != "cosine":
            raise ArgumentError("only 'cosine' can be used without a fitted backend")
        scores = [cosine_score(vectors[t.enroll_id], vectors[t.test_id]) for t in trials]
    else:
        ids = sorted({k for t in trials for k in (t.enroll_id, t.test_id)})
        index = {k: i for i, k in enumerate(ids)}
        emb = backend.transform(np.stack([vectors[k] for k in ids]))
        e = emb[[index[t.enroll_id] for t in trials]]
        s = emb[[index[t.test_id] for t in trials]]
        scores = [float(v) for v in backend.score_pairs(e, s)]
    records = [ScoreRecord(t.enroll_id, t.test_id, float(v)) for t, v in zip(trials, scores)]
    if not all(np.isfinite(r.score) for r in records):
        raise NumericError("non-finite trial score")
    return records, ScoreSet.from_labels(scores, [t.is_target for t in trials])


# --------------------------------------------------------------------------
# grid


GRID_HEADER = "system\tdim\tpool\tobjective\tnorm\teer\tmin_dcf"


@dataclass(frozen=True)
class GridRow:
    system: str
    dim: int
    pool: str
    objective: str
    norm: str
    eer: float
    min_dcf: float

    def format(self) -> str:
        return (f"{self.system}\t{self.dim}\t{self.pool}\t{self.objective}\t{self.norm}\t"
                f"{100.0 * self.eer:.4f}\t{self.min_dcf:.4f}")


def describe(cfg: ExperimentConfig) -> tuple[str, str]:
    pooling, margin = cfg.model.pooling, cfg.model.margin
    if pooling.kind == "sp":
        pool = "m,s"
    else:
        pool = "m" if pooling.lde_components == "mean_only" else "m,s"
        pool = f"lde:{pool}"
    obj = "S" if margin.objective == "softmax" else f"AS({int(margin.margin)})"
    return pool, obj


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    train: TrainResult
    table: SpeakerEmbeddingTable
    rows: list[GridRow]


def run_experiment(cfg: ExperimentConfig, corpus: Corpus, trials=None, init=None, progress=None) -> ExperimentResult:
    trials = build_trials(corpus) if trials is None else trials
    result = train_sv(cfg, corpus, init, progress)
    table = extract_all(result.model, corpus)
    pool, obj = describe(cfg)
    rows = []
    for post in (False, True):
        _, scores = run_trials(table, trials, fit_backend(cfg, table, corpus, post))
        rows.append(GridRow(cfg.name, cfg.model.embed_dim, pool, obj, "N" if post else "-",
                            eer(scores)[0], min_dcf(scores)[0]))
    return ExperimentResult(cfg, result, table, rows)


def grid(configs, corpus: Corpus, trials=None, progress=None) -> list[GridRow]:
    """Two rows (raw, post-processed) per config; a failing config aborts with its name."""
    rows = []
    for cfg in configs:
        try:
            rows.extend(run_experiment(cfg, corpus, trials, progress=progress).rows)
        except (ArgumentError, NumericError, ShapeError, ContractError) as exc:
            raise type(exc)(f"grid system {cfg.name!r} failed: {exc}") from exc
    return rows


def format_grid(rows) -> str:
    return GRID_HEADER + "\n" + "".join(r.format() + "\n" for r in rows)


def linear_oracle_eer(corpus: Corpus, trials=None) -> float:
    """EER of centering + LDA + cosine on raw utterance means (no network)."""
    from ldelab.synthdata.oracle import utterance_means

    trials = build_trials(corpus) if trials is None else trials
    utts = corpus.select(roles=("sv", "adapt"))
    means = dict(zip([u.utterance_id for u in utts], utterance_means([u.raw.frames for u in utts])))
    cfg = ExperimentConfig(backend="cosine", snorm=False)
    table = SpeakerEmbeddingTable(means)
    _, scores = run_trials(table, trials, fit_backend(cfg, table, corpus, True))
    return eer(scores)[0]
