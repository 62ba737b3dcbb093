import struct
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ldelab.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint
from ldelab.cli import (format_embeddings, load_backend, load_sv_model, load_synth, main, parse_embeddings,
                        save_backend, save_sv_model, save_synth)
from ldelab.errors import FormatError
from ldelab.backend import Backend
from ldelab.svpipe import SpeakerEmbeddingTable
from ldelab.ttsablation import SynthConfig, SynthModel, SynthTrainConfig

TABLE1 = Path(__file__).resolve().parents[1] / "configs" / "table1.cfg"


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def sample_ckpt(seed=0):
    r = np.random.default_rng(seed)
    return Checkpoint({"a.w": r.normal(size=(3, 4)).astype(np.float32), "b": r.normal(size=5).astype(np.float32),
                       "scalar": np.array(2.5, dtype=np.float32)}, "[x]\nk = v\n")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Tiny corpus, model, embeddings and trials produced through the CLI."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--speakers", "4", "--dev", "2", "--test", "2", "--utts", "6", "--adapt", "2",
                 "--seed", "7", "--out", str(d / "data")]) == 0
    assert main(["train-sv", "--data", str(d / "data"), "--steps", "3", "--seed", "1",
                 "--out", str(d / "sv.sckp")]) == 0
    assert main(["extract", "--data", str(d / "data"), "--model", str(d / "sv.sckp"),
                 "--out", str(d / "emb.txt")]) == 0
    return d


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        ck = sample_ckpt()
        write_checkpoint(tmp_path / "c.sckp", ck)
        back = read_checkpoint(tmp_path / "c.sckp")
        assert back.config_text == ck.config_text
        assert list(back.tensors) == list(ck.tensors)
        for k, v in ck.tensors.items():
            assert back.tensors[k].tobytes() == v.tobytes() and back.tensors[k].shape == v.shape
        assert encode_checkpoint(back) == (tmp_path / "c.sckp").read_bytes()

    def test_layout(self):
        buf = encode_checkpoint(Checkpoint({"w": np.array([1.0], dtype=np.float32)}, "c"))
        assert buf[:4] == b"SCKP"
        assert struct.unpack("<II", buf[4:12]) == (1, 1)
        assert buf[12:15] == b"\x01\x00w" and buf[15] == 1
        assert struct.unpack("<If", buf[16:24]) == (1, 1.0)
        assert buf[24:] == struct.pack("<I", 1) + b"c"

    def test_bad_magic(self):
        buf = b"NOPE" + encode_checkpoint(sample_ckpt())[4:]
        with pytest.raises(FormatError, match="offset 0"):
            decode_checkpoint(buf)

    def test_version_bump_rejected(self):
        buf = bytearray(encode_checkpoint(sample_ckpt()))
        buf[4:8] = struct.pack("<I", 2)
        with pytest.raises(FormatError, match="offset 4"):
            decode_checkpoint(bytes(buf))

    @pytest.mark.parametrize("delta", [1, -1])
    def test_tensor_count_mismatch(self, delta):
        buf = bytearray(encode_checkpoint(sample_ckpt()))
        buf[8:12] = struct.pack("<I", 3 + delta)
        with pytest.raises(FormatError):
            decode_checkpoint(bytes(buf))

    @pytest.mark.parametrize("cut", [3, 10, 20, 40, 1])
    def test_truncation(self, cut):
        buf = encode_checkpoint(sample_ckpt())
        with pytest.raises(FormatError, match="offset"):
            decode_checkpoint(buf[:len(buf) - cut])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            encode_checkpoint(Checkpoint({"x": np.array([np.inf], dtype=np.float32)}))


class TestModelFiles:
    def test_sv_model_round_trip(self, tmp_path, small_model, small_experiment):
        save_sv_model(tmp_path / "m.sckp", small_model.model, small_experiment)
        model, cfg = load_sv_model(tmp_path / "m.sckp")
        assert cfg.seed == small_experiment.seed and model.config == small_model.model.config
        save_sv_model(tmp_path / "m2.sckp", model, cfg)
        assert (tmp_path / "m.sckp").read_bytes() == (tmp_path / "m2.sckp").read_bytes()

    def test_synth_round_trip(self, tmp_path):
        model = SynthModel.init(SynthConfig(sites=("attn",), speaker_dim=8), 2)
        model.params = {k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()}
        save_synth(tmp_path / "s.sckp", model, SynthTrainConfig(steps=7))
        back, train = load_synth(tmp_path / "s.sckp")
        assert back.config == model.config and train.steps == 7
        assert back.digest() == model.digest()

    def test_kind_checked(self, tmp_path):
        save_synth(tmp_path / "s.sckp", SynthModel.init(SynthConfig(speaker_dim=8), 2), SynthTrainConfig())
        with pytest.raises(FormatError):
            load_sv_model(tmp_path / "s.sckp")

    def test_backend_round_trip(self, tmp_path):
        r = np.random.default_rng(0)
        x = np.repeat(r.normal(size=(5, 4)) * 3, 4, axis=0) + r.normal(size=(20, 4))
        be = Backend.fit(x, np.repeat(np.arange(5), 4), "plda", True)
        save_backend(tmp_path / "b.sckp", be)
        back = load_backend(tmp_path / "b.sckp")
        assert back.score(x[0], x[1]) == pytest.approx(be.score(x[0], x[1]), rel=1e-4)

    def test_embedding_text_round_trip(self):
        t = SpeakerEmbeddingTable({"u1": np.array([0.1, 1 / 3]), "u2": np.array([-2.0, 1e-300])}, {"s": ["u1", "u2"]})
        back = parse_embeddings(format_embeddings(t))
        assert back.speaker_utts == t.speaker_utts
        for k in t.utterances:
            assert back.utterances[k].tobytes() == t.utterances[k].tobytes()

    def test_embedding_text_malformed(self):
        with pytest.raises(FormatError, match="line 1"):
            parse_embeddings("spk s 2 u1\n")


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["frobnicate"])
        assert e.value.code == 2

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["grad-check", "--bogus"])
        assert e.value.code == 2

    def test_missing_file_is_runtime_failure(self, tmp_path, capsys):
        code = main(["eval-metrics", "--scores", str(tmp_path / "none.txt"), "--trials", str(tmp_path / "t.txt")])
        err = capsys.readouterr().err
        assert code == 1
        assert err.startswith("error: ") and err.count("\n") == 1

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.cfg").write_text("[system a]\npooling.kynd = lde\n")
        assert main(["grid", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path / "g.tsv")]) == 1
        assert "kynd" in capsys.readouterr().err

    def test_every_subcommand_takes_seed(self):
        for cmd in ["gen-data", "train-sv", "extract", "backend-fit", "score", "eval-metrics", "train-synth",
                    "ablate", "grid", "grad-check"]:
            out = subprocess.run([sys.executable, "-m", "ldelab", cmd, "--help"], capture_output=True, text=True)
            assert out.returncode == 0 and "--seed" in out.stdout, cmd


class TestCommands:
    def test_eval_metrics_perfect(self, tmp_path, capsys):
        (tmp_path / "s.txt").write_text("a b 0.900000\nc d 0.100000\n")
        (tmp_path / "t.txt").write_text("a b target\nc d nontarget\n")
        assert main(["eval-metrics", "--scores", str(tmp_path / "s.txt"), "--trials", str(tmp_path / "t.txt")]) == 0
        assert capsys.readouterr().out.startswith("EER 0.0000% ")

    def test_gen_data_byte_identical(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert main(["gen-data", "--speakers", "10", "--seed", "7", "--out", str(tmp_path / name)]) == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and len(a) > 10

    def test_train_sv_byte_identical(self, workdir, tmp_path, capsys):
        assert main(["train-sv", "--data", str(workdir / "data"), "--steps", "3", "--seed", "1",
                     "--out", str(tmp_path / "again.sckp")]) == 0
        assert (tmp_path / "again.sckp").read_bytes() == (workdir / "sv.sckp").read_bytes()
        assert "seed = 1" in (workdir / "sv.sckp.cfg").read_text()

    def test_warm_start(self, workdir, tmp_path, capsys):
        assert main(["train-sv", "--data", str(workdir / "data"), "--steps", "1", "--seed", "1",
                     "--init", str(workdir / "sv.sckp"), "--out", str(tmp_path / "warm.sckp")]) == 0

    def test_score_chain(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        assert main(["backend-fit", "--data", str(data), "--embeddings", str(workdir / "emb.txt"),
                     "--backend", "cosine", "--out", str(tmp_path / "be.sckp")]) == 0
        for backend in (str(tmp_path / "be.sckp"), "cosine"):
            assert main(["score", "--embeddings", str(workdir / "emb.txt"), "--trials", str(data / "trials.txt"),
                         "--backend", backend, "--out", str(tmp_path / "s.txt")]) == 0
            capsys.readouterr()
            assert main(["eval-metrics", "--scores", str(tmp_path / "s.txt"),
                         "--trials", str(data / "trials.txt")]) == 0
            out = capsys.readouterr().out
            assert out.startswith("EER ") and "minDCF(p=0.01)" in out

    def test_synth_and_ablate(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        assert main(["train-synth", "--data", str(data), "--embeddings", str(workdir / "emb.txt"),
                     "--sites", "pre,attn,post", "--steps", "2", "--out", str(tmp_path / "syn.sckp")]) == 0
        assert load_synth(tmp_path / "syn.sckp")[0].config.sites == ("pre", "attn", "post")
        outs = []
        for name in ("a.tsv", "b.tsv"):
            assert main(["ablate", "--data", str(data), "--model", str(workdir / "sv.sckp"), "--steps", "1",
                         "--sentences", "1", "--out", str(tmp_path / name)]) == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]
        assert outs[0].decode().splitlines()[0] == "sites\tseen_avg\tunseen_avg"

    def test_grid_cli(self, tmp_path, capsys):
        cfg = ("[experiment]\nbackend = cosine\n[corpus]\nn_train = 4\nn_dev = 2\nn_test = 2\nutts_per_speaker = 6\n"
               "adapt_utts = 2\n[train]\nsteps = 2\nbatch_size = 4\n"
               "[system x-vec]\npooling.kind = sp\n[system lde-1]\npooling.kind = lde\n")
        (tmp_path / "g.cfg").write_text(cfg)
        for name in ("a.tsv", "b.tsv"):
            assert main(["grid", "--config", str(tmp_path / "g.cfg"), "--out", str(tmp_path / name)]) == 0
        text = (tmp_path / "a.tsv").read_text()
        assert text == (tmp_path / "b.tsv").read_text()
        assert len(text.splitlines()) == 1 + 4
