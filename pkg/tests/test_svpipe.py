from pathlib import Path

import numpy as np
import pytest

from conftest import replace
from ldelab.embednet.encoders import EncoderConfig
from ldelab.errors import ArgumentError, ShapeError
from ldelab.substrate.tensor import Tape
from ldelab.synthdata.io import NONTARGET, TARGET, Trial
from ldelab.svpipe import (GRID_HEADER, ExperimentConfig, SpeakerEmbeddingTable, build_trials, describe, extract_all,
                           format_grid, grid, load_corpus, make_batch, parse_grid_config, run_trials, save_corpus,
                           train_sv)

TABLE1 = Path(__file__).resolve().parents[1] / "configs" / "table1.cfg"


def batch_loss(model, cfg, corpus, step=0):
    frames, labels = make_batch(corpus, cfg.train, cfg.seed, step)
    tape = Tape()
    p = model.bind(tape)
    loss, _ = model.loss(tape, p, tape.leaf(frames, requires_grad=False), labels,
                         model.config.margin.anneal(step), training=True)
    return float(loss.data)


class TestCorpus:
    def test_split_sizes(self, small_corpus):
        assert len(small_corpus.train_speakers) == 6
        assert len(small_corpus.speakers("dev")) == 2
        assert len(small_corpus.speakers("test")) == 2

    def test_heldout_never_in_training_pool(self, small_corpus):
        held = set(small_corpus.heldout_speakers)
        assert held and not held & {u.speaker_id for u in small_corpus.training_pool()}

    def test_heldout_never_in_batches(self, small_corpus, small_experiment):
        train_ids = small_corpus.train_speakers
        for step in range(30):
            _, labels = make_batch(small_corpus, small_experiment.train, 5, step)
            assert all(0 <= l < len(train_ids) for l in labels)

    def test_batch_chunk_bounds(self, small_corpus, small_experiment):
        frames, _ = make_batch(small_corpus, small_experiment.train, 5, 0)
        assert frames.shape[0] == 8 and 300 <= frames.shape[1] <= 800

    def test_adaptation_roles(self, small_corpus):
        for s in small_corpus.heldout_speakers:
            assert len(small_corpus.select(s, roles=("adapt",))) == 3
        for s in small_corpus.train_speakers:
            assert not small_corpus.select(s, roles=("adapt",))

    def test_save_load_round_trip(self, small_corpus, tmp_path):
        save_corpus(small_corpus, tmp_path)
        back = load_corpus(tmp_path)
        assert back.config == small_corpus.config
        assert sorted(back.utterances) == sorted(small_corpus.utterances)
        for uid, u in small_corpus.utterances.items():
            assert back.utterances[uid].raw.frames.tobytes() == u.raw.frames.tobytes()


class TestTrials:
    def test_structure(self, small_corpus):
        trials = build_trials(small_corpus)
        held = set(small_corpus.heldout_speakers)
        spk = {uid: u.speaker_id for uid, u in small_corpus.utterances.items()}
        tgt = [t for t in trials if t.label == TARGET]
        non = [t for t in trials if t.label == NONTARGET]
        # 4 held-out speakers x C(5, 2) target pairs
        assert len(tgt) == 4 * 10 and len(non) == len(tgt)
        for t in trials:
            assert spk[t.enroll_id] in held and spk[t.test_id] in held
            assert (spk[t.enroll_id] == spk[t.test_id]) == (t.label == TARGET)
            assert small_corpus.utterances[t.enroll_id].role == "sv"

    def test_seeded(self, small_corpus):
        assert build_trials(small_corpus, 1) == build_trials(small_corpus, 1)
        assert build_trials(small_corpus, 1) != build_trials(small_corpus, 2)


class TestTraining:
    def test_deterministic(self, small_corpus, small_experiment, small_model):
        cfg = replace(small_experiment, train=replace(small_experiment.train, steps=5))
        a = train_sv(cfg, small_corpus)
        b = train_sv(cfg, small_corpus)
        assert a.losses == b.losses
        for k in a.model.params:
            assert a.model.params[k].tobytes() == b.model.params[k].tobytes()

    def test_warm_start_step_zero_loss(self, small_corpus, small_experiment, small_model):
        donor = small_model.model
        cfg = replace(small_experiment, train=replace(small_experiment.train, steps=1))
        warm = train_sv(cfg, small_corpus, init=donor)
        assert warm.losses[0] == batch_loss(donor, cfg, small_corpus)

    def test_warm_start_leaves_donor(self, small_corpus, small_experiment, small_model):
        before = {k: v.copy() for k, v in small_model.model.params.items()}
        cfg = replace(small_experiment, train=replace(small_experiment.train, steps=2))
        train_sv(cfg, small_corpus, init=small_model.model)
        for k, v in before.items():
            np.testing.assert_array_equal(small_model.model.params[k], v)

    def test_width_mismatch(self, small_corpus, small_experiment):
        enc = replace(small_experiment.model.encoder, in_dim=20)
        cfg = replace(small_experiment, model=replace(small_experiment.model, encoder=enc))
        with pytest.raises(ShapeError):
            train_sv(cfg, small_corpus)

    def test_loss_decreases(self, small_model):
        assert np.mean(small_model.losses[-5:]) < np.mean(small_model.losses[:5])


class TestExtraction:
    def test_average_of_two(self):
        t = SpeakerEmbeddingTable({"a": np.array([1.0, 2.0]), "b": np.array([3.0, 0.0])}, {"s": ["a", "b"]})
        np.testing.assert_array_equal(t.speaker_mean("s"), [2.0, 1.0])

    def test_single_utterance(self):
        t = SpeakerEmbeddingTable({"a": np.array([1.5, -2.0])}, {"s": ["a"]})
        np.testing.assert_array_equal(t.speakers["s"], [1.5, -2.0])

    def test_linearity(self, rng):
        vecs = {f"u{i}": rng.normal(size=4) for i in range(5)}
        t = SpeakerEmbeddingTable(vecs, {"s": sorted(vecs)})
        scaled = SpeakerEmbeddingTable({k: 3.0 * v for k, v in vecs.items()}, {"s": sorted(vecs)})
        np.testing.assert_allclose(scaled.speaker_mean("s"), 3.0 * t.speaker_mean("s"), rtol=1e-14)

    def test_parallel_matches_serial(self, small_corpus, small_model):
        serial = extract_all(small_model.model, small_corpus)
        parallel = extract_all(small_model.model, small_corpus, workers=4)
        spk = small_corpus.speakers()
        merged = (extract_all(small_model.model, small_corpus, spk[:5])
                  .merge(extract_all(small_model.model, small_corpus, spk[5:], workers=2)))
        for other in (parallel, merged):
            assert list(other.utterances) == list(serial.utterances)
            assert other.speaker_utts == serial.speaker_utts
            for k, v in serial.utterances.items():
                assert other.utterances[k].tobytes() == v.tobytes()

    def test_heldout_use_adaptation_only(self, small_corpus, small_model):
        table = extract_all(small_model.model, small_corpus)
        for s in small_corpus.heldout_speakers:
            assert {small_corpus.utterances[u].role for u in table.speaker_utts[s]} == {"adapt"}
        for s in small_corpus.train_speakers:
            assert len(table.speaker_utts[s]) == 8

    def test_unknown_speaker(self, small_corpus, small_model):
        with pytest.raises(ArgumentError, match="nobody"):
            extract_all(small_model.model, small_corpus, ["nobody"])


class TestRunTrials:
    def test_self_trial_is_one(self):
        recs, _ = run_trials({"a": np.array([0.3, -1.0, 2.0]), "b": np.array([1.0, 0.0, 0.0])},
                             [Trial("a", "a", TARGET), Trial("a", "b", NONTARGET)])
        assert recs[0].score == pytest.approx(1.0, abs=1e-15)

    def test_missing_id_named(self):
        with pytest.raises(ArgumentError, match="ghost"):
            run_trials({"a": np.ones(2)}, [Trial("a", "ghost", TARGET)])

    def test_permutation_tracks_order(self, small_corpus, small_model):
        table = extract_all(small_model.model, small_corpus)
        trials = build_trials(small_corpus)
        recs, _ = run_trials(table, trials)
        perm = np.random.default_rng(0).permutation(len(trials))
        recs2, _ = run_trials(table, [trials[i] for i in perm])
        assert [recs2[k].score for k in range(len(trials))] == [recs[i].score for i in perm]

    def test_scoreset_partition(self, small_corpus, small_model):
        table = extract_all(small_model.model, small_corpus)
        trials = build_trials(small_corpus)
        _, scores = run_trials(table, trials)
        assert len(scores.target_scores) == sum(t.is_target for t in trials)


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig(name="z", seed=9, snorm=False)
        assert ExperimentConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ArgumentError):
            ExperimentConfig.from_text("[train]\nstepz = 3\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ArgumentError):
            ExperimentConfig.from_text("[trian]\nsteps = 3\n")

    def test_table1_families(self):
        configs = parse_grid_config(TABLE1.read_text())
        assert [c.name for c in configs] == ["x-vec"] + [f"lde-{i}" for i in range(1, 8)]
        assert [describe(c) for c in configs] == [
            ("m,s", "S"), ("lde:m", "S"), ("lde:m", "AS(2)"), ("lde:m", "AS(3)"), ("lde:m", "AS(4)"),
            ("lde:m", "AS(2)"), ("lde:m", "AS(2)"), ("lde:m,s", "AS(2)")]
        assert [c.model.embed_dim for c in configs] == [64, 64, 64, 64, 64, 32, 25, 64]

    def test_paper_scale_dimensions_expressible(self):
        for dim in (512, 256, 200):
            text = f"[model]\nembed_dim = {dim}\n[encoder]\nwidths = 512, 512, 512, 512, 1500\n"
            assert ExperimentConfig.from_text(text).model.embed_dim == dim
        assert EncoderConfig().widths == (512, 512, 512, 512, 512)

    def test_override_needs_dot(self):
        with pytest.raises(ArgumentError):
            parse_grid_config("[system a]\nsteps = 3\n")


class TestGrid:
    def test_single_system_two_rows(self, small_corpus, small_experiment):
        cfg = replace(small_experiment, backend="cosine", train=replace(small_experiment.train, steps=3))
        rows = grid([cfg], small_corpus)
        assert [r.norm for r in rows] == ["-", "N"]
        text = format_grid(rows)
        assert text.splitlines()[0] == GRID_HEADER
        assert format_grid(grid([cfg], small_corpus)) == text

    def test_failing_system_named(self, small_corpus, small_experiment):
        enc = replace(small_experiment.model.encoder, in_dim=20)
        cfg = replace(small_experiment, name="broken", model=replace(small_experiment.model, encoder=enc))
        with pytest.raises(ShapeError, match="broken"):
            grid([cfg], small_corpus)
