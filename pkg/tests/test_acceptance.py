"""Acceptance criteria, one PASS/FAIL line each (also listed in the terminal summary).

The end-to-end and ablation runs share one default-scale verification model;
expect roughly 15 minutes on a single core for the whole module.
"""

import dataclasses
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LOG
from test_backend import plda_data, quad_llr
from test_cli import sample_ckpt, tree_bytes
from test_metrics import brute_dcf, brute_eer, random_sets
from ldelab.backend import PldaModel, plda_fit, plda_score
from ldelab.checkpoint import decode_checkpoint, encode_checkpoint
from ldelab.cli import main
from ldelab.embednet.margin import psi
from ldelab.embednet.pooling import PoolingConfig, lde_as_sp, pool_numpy
from ldelab.errors import FormatError
from ldelab.gradsuite import TOLERANCE, run_suite
from ldelab.metrics import eer, min_dcf
from ldelab.svpipe import (CorpusConfig, ExperimentConfig, build_corpus, build_trials, extract_all,
                           linear_oracle_eer, parse_grid_config, run_experiment)
from ldelab.synthdata.io import decode_features, encode_features
from ldelab.ttsablation import ABLATION_SITES, SynthConfig, SynthTrainConfig, ablate, best_row, format_ablation

TABLE1 = Path(__file__).resolve().parents[1] / "configs" / "table1.cfg"


def record(criterion, ok, detail=""):
    line = f"{'PASS' if ok else 'FAIL'} {criterion}" + (f": {detail}" if detail else "")
    print(line)
    ACCEPTANCE_LOG.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_run():
    t0 = time.perf_counter()
    corpus = build_corpus(CorpusConfig())
    trials = build_trials(corpus)
    result = run_experiment(ExperimentConfig(), corpus, trials)
    return corpus, trials, result, time.perf_counter() - t0


class TestGradientSuite:
    def test_all_checks(self):
        t0 = time.perf_counter()
        results = run_suite(0)
        elapsed = time.perf_counter() - t0
        names = {r.name for r in results}
        required = ({f"a_softmax(m={m})[emb]" for m in (1, 2, 3, 4)}
                    | {"lde_pool[mean_and_std][frames]", "lde_pool[mean_and_std][centers]", "synth_loss"})
        worst = max(results, key=lambda r: r.error)
        ok = all(r.passed for r in results) and required <= names and elapsed < 120
        record("gradient suite", ok, f"{len(results)} checks, worst {worst.name} {worst.error:.2e} "
                                     f"(tol {TOLERANCE:g}), {elapsed:.1f}s")


class TestLdeSpReduction:
    def test_hundred_inputs(self):
        r = np.random.default_rng(2024)
        cfg = PoolingConfig("lde", "mean_and_std", 1)
        worst = 0.0
        for _ in range(100):
            t, d = int(r.integers(1, 60)), int(r.integers(1, 12))
            x = r.normal(size=(t, d)) * r.uniform(0.1, 5) + r.normal(size=d)
            lde = lde_as_sp(pool_numpy(x, cfg, np.zeros((1, d))), t)
            worst = max(worst, float(np.max(np.abs(lde - pool_numpy(x, PoolingConfig())))))
        record("LDE->SP reduction", worst < 1e-6, f"max abs diff {worst:.2e} over 100 inputs")


class TestPsiIdentities:
    def test_identities(self):
        grid = np.linspace(0, np.pi, 1000)
        e1 = float(np.max(np.abs(psi(grid, 1) - np.cos(grid))))
        zero = all(psi(0.0, m) == 1.0 for m in (1, 2, 3, 4))
        pi2 = abs(psi(np.pi, 2) + 3.0)
        mono = all(np.all(np.diff(psi(grid, m)) <= 1e-15) for m in (1, 2, 3, 4))
        ok = e1 < 1e-12 and zero and pi2 < 1e-12 and mono
        record("psi identities", ok, f"|psi(.,1)-cos| {e1:.1e}, psi(0,m)=1 {zero}, |psi(pi,2)+3| {pi2:.1e}, "
                                     f"monotone {mono}")


class TestMetricOracles:
    def test_brute_force_and_invariance(self):
        worst_eer = worst_dcf = 0.0
        for tgt, non in random_sets(1000, 77):
            worst_eer = max(worst_eer, abs(eer((tgt, non))[0] - brute_eer(tgt, non)))
            worst_dcf = max(worst_dcf, abs(min_dcf((tgt, non))[0] - brute_dcf(tgt, non)))
        invariant = 0
        for tgt, non in random_sets(100, 78):
            base = (eer((tgt, non))[0], min_dcf((tgt, non))[0])
            if all((eer((f(tgt), f(non)))[0], min_dcf((f(tgt), f(non)))[0]) == base
                   for f in (lambda s: 2 * s + 1, np.tanh)):
                invariant += 1
        ok = worst_eer < 1e-12 and worst_dcf < 1e-12 and invariant == 100
        record("metric oracles", ok, f"EER diff {worst_eer:.1e}, minDCF diff {worst_dcf:.1e} on 1000 sets; "
                                     f"{invariant}/100 invariant")


class TestPldaOracle:
    def test_quadrature_em_refit(self):
        r = np.random.default_rng(31)
        quad = 0.0
        for _ in range(50):
            mu, b, w = r.normal(), r.uniform(0.1, 3.0), r.uniform(0.1, 3.0)
            e, t = mu + r.normal(size=2) * np.sqrt(b + w)
            model = PldaModel(np.array([mu]), np.array([[b]]), np.array([[w]]))
            quad = max(quad, abs(plda_score(model, [e], [t]) - quad_llr(mu, b, w, e, t)))
        monotone = 0
        for _ in range(10):
            d = int(r.integers(1, 5))
            a, c = r.normal(size=(d, d)), r.normal(size=(d, d))
            x, labels = plda_data(r, r.normal(size=d), a @ a.T, c @ c.T + 0.1 * np.eye(d),
                                  int(r.integers(5, 30)), int(r.integers(1, 8)))
            _, hist = plda_fit(x, labels, 20, return_history=True)
            monotone += bool(np.all(np.diff(hist) >= -1e-8 * np.abs(hist[:-1])))
        b_true = np.array([[2.0, 0.6], [0.6, 1.0]])
        w_true = np.array([[0.5, -0.1], [-0.1, 0.3]])
        # own generator: the refit error is a property of one 200-speaker draw
        x, labels = plda_data(np.random.default_rng(0), np.array([1.0, -2.0]), b_true, w_true, 200, 10)
        m = plda_fit(x, labels)
        eb = np.linalg.norm(m.between - b_true) / np.linalg.norm(b_true)
        ew = np.linalg.norm(m.within - w_true) / np.linalg.norm(w_true)
        ok = quad < 1e-6 and monotone == 10 and eb < 0.15 and ew < 0.15
        record("PLDA oracle", ok, f"quadrature diff {quad:.1e}; EM monotone {monotone}/10; "
                                  f"refit rel err B {eb:.3f} W {ew:.3f}")


class TestEndToEnd:
    def test_default_config(self, default_run):
        corpus, trials, result, elapsed = default_run
        oracle = linear_oracle_eer(corpus, trials)
        worst = max(row.eer for row in result.rows)
        rows = ", ".join(f"{row.norm} {100 * row.eer:.2f}%" for row in result.rows)
        ok = worst <= 0.05 and oracle <= 0.01 and elapsed <= 600
        record("end-to-end SV", ok, f"EER {rows}; linear oracle {100 * oracle:.2f}%; {elapsed:.0f}s")

    def test_training_loss_drops(self, default_run):
        losses = default_run[2].train.losses
        assert np.mean(losses[-20:]) < 0.25 * losses[0]

    def test_lde_configs_reported(self, default_run):
        # same harness, reduced step budget; EER relative to the baseline is reported only
        corpus, trials, result, _ = default_run
        base = min(row.eer for row in result.rows)
        lines = []
        for cfg in parse_grid_config(TABLE1.read_text())[1:]:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, steps=300))
            rows = run_experiment(cfg, corpus, trials).rows
            assert all(0.0 <= row.eer <= 1.0 for row in rows)
            lines.append(f"{cfg.name} {100 * min(row.eer for row in rows):.2f}%")
        print(f"baseline {100 * base:.2f}%; " + ", ".join(lines))
        ACCEPTANCE_LOG.append(f"INFO LDE/A-softmax configs (300 steps, reported only): {', '.join(lines)}")


class TestAblation:
    def test_direction_and_zero_shot(self, default_run):
        corpus, _, result, _ = default_run
        model = result.train.model
        table = extract_all(model, corpus)
        t0 = time.perf_counter()
        rows = ablate(corpus, model, table, SynthConfig(speaker_dim=model.config.embed_dim), SynthTrainConfig())
        elapsed = time.perf_counter() - t0
        print(format_ablation(rows))
        seen = np.mean([r.seen_avg for r in rows])
        unseen = np.mean([r.unseen_avg for r in rows])
        unchanged = all(a == b and a for a, b in (r.digests for r in rows))
        ok = ([r.sites for r in rows] == list(ABLATION_SITES) and seen >= unseen and unchanged and elapsed <= 900)
        record("zero-shot ablation", ok, f"seen {seen:.3f} vs unseen {unseen:.3f}; digests unchanged {unchanged}; "
                                         f"best {'+'.join(best_row(rows).sites)}; {elapsed:.0f}s")


class TestDeterminism:
    def test_cli_reruns(self, tmp_path, capsys):
        cfg = ("[experiment]\nbackend = cosine\n[corpus]\nn_train = 4\nn_dev = 2\nn_test = 2\nutts_per_speaker = 6\n"
               "adapt_utts = 2\n[train]\nsteps = 3\nbatch_size = 4\n[system x-vec]\npooling.kind = sp\n")
        (tmp_path / "g.cfg").write_text(cfg)
        same = {}
        for run in ("a", "b"):
            d = tmp_path / run
            main(["gen-data", "--speakers", "4", "--dev", "2", "--test", "2", "--utts", "6", "--adapt", "2",
                  "--seed", "7", "--out", str(d / "data")])
            main(["train-sv", "--data", str(d / "data"), "--steps", "3", "--seed", "1", "--out", str(d / "sv.sckp")])
            main(["grid", "--config", str(tmp_path / "g.cfg"), "--out", str(d / "grid.tsv")])
            main(["ablate", "--data", str(d / "data"), "--model", str(d / "sv.sckp"), "--steps", "2",
                  "--sentences", "1", "--out", str(d / "ablate.tsv")])
        for name, rel in (("gen-data", "data"), ("train-sv", "sv.sckp"), ("grid", "grid.tsv"),
                          ("ablate", "ablate.tsv")):
            a, b = tmp_path / "a" / rel, tmp_path / "b" / rel
            same[name] = (tree_bytes(a) == tree_bytes(b) and tree_bytes(a) != {}) if a.is_dir() else \
                (a.exists() and a.read_bytes() == b.read_bytes())
        record("determinism", all(same.values()), ", ".join(f"{k} {'identical' if v else 'DIFFERS'}"
                                                            for k, v in same.items()))


class TestFormatRoundTrips:
    def test_sfea_and_sckp(self):
        x = np.random.default_rng(5).normal(size=(40, 30)).astype(np.float32)
        fe = encode_features(x)
        ck = sample_ckpt(3)
        cb = encode_checkpoint(ck)
        exact = (decode_features(fe).tobytes() == x.tobytes()
                 and encode_checkpoint(decode_checkpoint(cb)) == cb)

        def rejects(decode, buf):
            try:
                decode(buf)
            except FormatError as exc:
                return "offset" in str(exc)
            return False

        def bump_version(buf):
            return buf[:4] + struct.pack("<I", 99) + buf[8:]

        errors = {}
        for name, decode, buf in (("SFEA", decode_features, fe), ("SCKP", decode_checkpoint, cb)):
            errors[name] = (rejects(decode, b"ZZZZ" + buf[4:]) and rejects(decode, bump_version(buf))
                            and rejects(decode, buf[:-3]))
        ok = exact and all(errors.values())
        record("format round trips", ok, f"bit-exact {exact}; magic/version/truncation errors "
                                         + ", ".join(f"{k} {v}" for k, v in errors.items()))
