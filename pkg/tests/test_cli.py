import logging

import pytest

from hslnet.cli import main
from hslnet.training import load_checkpoint

SMALL = ["--classes", "3", "--pairs-per-class", "10", "--objects", "3", "--tokens", "4", "--d0", "6",
         "--vocab-size", "12", "--pool-size", "6"]
TINY = ["--d-c", "8", "--d-e", "8", "--word-dim", "8", "--heads", "2", "--image-layers", "1", "--text-layers", "1",
        "--batch-size", "8", "--min-count", "1", "--lr", "0.005"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, out = root / "data", root / "run"
    assert main(["gen-synth", *SMALL, "--out-dir", str(data)]) == 0
    assert main(["train", *TINY, "--epochs", "2", "--data-dir", str(data), "--out-dir", str(out)]) == 0
    return data, out


class TestGenSynth:
    def test_deterministic_and_creates_dir(self, tmp_path):
        a, b = tmp_path / "x" / "a", tmp_path / "y" / "b"
        assert main(["gen-synth", "--classes", "8", "--pairs-per-class", "25", "--seed", "7", "--out-dir", str(a)]) == 0
        assert main(["gen-synth", "--classes", "8", "--pairs-per-class", "25", "--seed", "7", "--out-dir", str(b)]) == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == ["eval_queries.tsv", "eval_relevance.tsv", "features.tsv", "manifest.txt",
                         "train_pairs.tsv", "train_queries.tsv"]
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_one_class_is_usage_error(self, tmp_path, capsys):
        assert main(["gen-synth", "--classes", "1", "--out-dir", str(tmp_path)]) == 2
        assert "--classes" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, run):
        _, out = run
        assert {"model.ckpt", "loss.csv", "run.log", "effective_config.txt"} <= {p.name for p in out.iterdir()}
        ckpt = load_checkpoint(out / "model.ckpt")
        assert ckpt.model_cfg.d_c == 8 and ckpt.model_cfg.d0 == 6 and ckpt.epoch == 2
        assert "config lr=0.005" in (out / "run.log").read_text()

    def test_flag_beats_file(self, run, tmp_path, caplog):
        data, _ = run
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs=5\nlr=0.005\nencoder=bigru\n")
        caplog.set_level(logging.INFO, logger="hslnet")
        code = main(["train", "--config", str(cfg), *TINY, "--epochs", "1", "--data-dir", str(data),
                     "--out-dir", str(tmp_path / "o")])
        assert code == 0
        assert load_checkpoint(tmp_path / "o" / "model.ckpt").epoch == 1
        assert load_checkpoint(tmp_path / "o" / "model.ckpt").model_cfg.encoder == "bigru"
        assert "epochs file=5 flag=1" in caplog.text

    def test_unknown_config_key(self, run, tmp_path, capsys):
        data, _ = run
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs=1\nlearning_rate=0.1\n")
        code = main(["train", "--config", str(cfg), "--data-dir", str(data), "--out-dir", str(tmp_path / "o")])
        assert code == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_bad_value(self, run, tmp_path):
        data, _ = run
        assert main(["train", "--encoder", "lstm", "--data-dir", str(data), "--out-dir", str(tmp_path / "o")]) == 2

    def test_missing_data_dir(self, tmp_path):
        assert main(["train", "--out-dir", str(tmp_path)]) == 2


class TestEvalRank:
    def test_eval_prints_ndcg(self, run, capsys):
        data, out = run
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--data-dir", str(data), "--k", "5", "--k", "10"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [l.split()[0] for l in lines] == ["nDCG@5", "nDCG@10"]
        assert 0.0 <= float(lines[0].split()[1]) <= 1.0

    def test_rank_single_query(self, run, capsys):
        data, out = run
        qid = sorted(l.split("\t")[0] for l in (data / "eval_queries.tsv").read_text().splitlines())[0]
        assert main(["rank", "--checkpoint", str(out / "model.ckpt"), "--data-dir", str(data), "--query-id", qid]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "query_id\trank\timage_id\tscore"
        assert len(lines) == 7
        assert [l.split("\t")[1] for l in lines[1:]] == [str(r) for r in range(1, 7)]
        assert main(["rank", "--checkpoint", str(out / "model.ckpt"), "--data-dir", str(data)]) == 0
        everything = capsys.readouterr().out.splitlines()
        assert [l for l in everything if l.startswith(qid + "\t")] == lines[1:]

    def test_rank_unknown_query(self, run):
        data, out = run
        assert main(["rank", "--checkpoint", str(out / "model.ckpt"), "--data-dir", str(data), "--query-id", "zzz"]) == 2

    def test_eval_spec_restriction(self, run, capsys):
        data, out = run
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--data-dir", str(data),
                     "--spec-levels", "2", "--spec-granularities", "object"]) == 0
        assert capsys.readouterr().out.startswith("nDCG@5 ")
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--data-dir", str(data), "--spec-levels", "3"]) == 2

    def test_missing_checkpoint(self, run, tmp_path):
        data, _ = run
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data-dir", str(data)]) == 1


class TestAblate:
    def test_mask(self, run, tmp_path, capsys):
        data, out = run
        assert main(["ablate", "--mode", "mask", "--checkpoint", str(out / "model.ckpt"), "--data-dir", str(data),
                     "--out-dir", str(tmp_path)]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 9
        assert len((tmp_path / "ablation.csv").read_text().splitlines()) == 1 + 9 * 6

    def test_retrain(self, run, tmp_path, capsys):
        data, _ = run
        assert main(["ablate", "--mode", "retrain", *TINY, "--epochs", "1", "--data-dir", str(data),
                     "--out-dir", str(tmp_path)]) == 0
        names = [l.split()[0] for l in capsys.readouterr().out.splitlines()]
        assert names == ["L1/obj", "L1/img", "L1/obj+img", "L2/obj", "L2/img", "L2/obj+img",
                         "L1+2/obj", "L1+2/img", "L1+2/obj+img"]
