import json
import shutil
from pathlib import Path

import pytest

from absa_pair.cli import main
from absa_pair.corpus import load_corpus, write_canonical
from absa_pair.synthetic import make_corpus
from absa_pair.training import TrainHistory

FAST_TRAIN = {"batch_size": 8, "learning_rate": 1e-3, "epochs": 1}
OVERFIT_TRAIN = {"batch_size": 4, "learning_rate": 1e-3, "epochs": 200, "warmup_steps": 200,
                 "lr_schedule": "linear", "max_grad_norm": 1.0, "early_stop_accuracy": 1.0}


def write_config(root: Path, mode="nli-m", train=None, encoder=None, **extra) -> Path:
    cfg = {
        "corpus": {"path": "corpus.jsonl"},
        "seed": 0,
        "mode": mode,
        "templates": {"language_tag": "fa"},
        "tokenizer": {"vocab_size": 200, "max_len": 32},
        "encoder": encoder if encoder is not None else {"dropout_rate": 0.0},
        "train": train if train is not None else FAST_TRAIN,
        "out_dir": "out",
        **extra,
    }
    path = root / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return path


@pytest.fixture
def workdir(tmp_path):
    write_canonical(make_corpus(32, seed=0), tmp_path / "corpus.jsonl")
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def overfit(tmp_path_factory):
    """One memorizing NLI-B run shared by the slower CLI tests."""
    root = tmp_path_factory.mktemp("overfit")
    write_canonical(make_corpus(32, seed=0), root / "corpus.jsonl")
    cfg = write_config(root, mode="nli-b", train=OVERFIT_TRAIN)
    assert main(["prepare", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    ckpt = next((root / "out" / "runs").glob("*/checkpoint.npz"))
    train_split = load_corpus(next((root / "out" / "prepared").glob("*/train.jsonl")))
    return root, cfg, ckpt, train_split


class TestPrepare:
    def test_outputs_and_rerun(self, workdir, capsys):
        cfg = write_config(workdir)
        code, out, _ = run(capsys, "prepare", "--config", cfg)
        assert code == 0 and "32 instances" in out
        (prep,) = (workdir / "out" / "prepared").iterdir()
        nli_b = (prep / "expanded" / "nli-b-all.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(nli_b) == 3 * 32
        assert len((prep / "expanded" / "qa-m-all.jsonl").read_text(encoding="utf-8").splitlines()) == 32
        manifest = json.loads((prep / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["command"] == "prepare" and "vocab.txt" in manifest["artifacts"]
        first = tree_bytes(workdir / "out")
        assert run(capsys, "prepare", "--config", cfg)[0] == 0
        assert tree_bytes(workdir / "out") == first

    def test_bad_polarity(self, workdir, capsys):
        lines = (workdir / "corpus.jsonl").read_text(encoding="utf-8").splitlines()
        lines[4] = lines[4].replace('"negative"', '"mixed"').replace('"positive"', '"mixed"').replace('"neutral"', '"mixed"')
        (workdir / "corpus.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
        code, _, err = run(capsys, "prepare", "--config", write_config(workdir))
        assert code == 1
        assert "absa-pair prepare" in err and "line 5" in err and "polarity" in err

    def test_missing_corpus(self, tmp_path, capsys):
        code, _, err = run(capsys, "prepare", "--config", write_config(tmp_path))
        assert code == 1 and "corpus.jsonl" in err

    def test_unknown_config_key(self, workdir, capsys):
        code, _, err = run(capsys, "prepare", "--config", write_config(workdir, colour="blue"))
        assert code == 1 and "colour" in err


class TestTrain:
    def test_requires_prepare(self, workdir, capsys):
        code, _, err = run(capsys, "train", "--config", write_config(workdir))
        assert code == 1 and "run the earlier stage first" in err

    def test_b_mode_three_class_head_rejected(self, workdir, capsys):
        cfg = write_config(workdir, mode="nli-b", encoder={"num_classes": 3})
        code, _, err = run(capsys, "train", "--config", cfg)
        assert code == 1 and "2-class head" in err
        assert not (workdir / "out" / "runs").exists()

    def test_default_epochs(self, workdir, capsys):
        cfg = write_config(workdir, train={"learning_rate": 1e-3},
                           encoder={"num_layers": 1, "hidden_size": 16})
        assert run(capsys, "prepare", "--config", cfg)[0] == 0
        code, out, _ = run(capsys, "train", "--config", cfg)
        assert code == 0 and "trained 4 epoch(s)" in out
        (run_dir,) = (workdir / "out" / "runs").iterdir()
        assert [r.epoch for r in TrainHistory.read_csv(run_dir / "history.csv").epochs] == [1, 2, 3, 4]
        assert sorted(p.name for p in run_dir.glob("checkpoint-epoch*.npz")) == [
            f"checkpoint-epoch{i}.npz" for i in range(1, 5)]
        assert (run_dir / "history.png").read_bytes()[:4] == b"\x89PNG"

    def test_seed_controls_history(self, workdir, capsys):
        cfg = write_config(workdir)
        histories = {}
        for seed in (0, 0, 1):
            out = workdir / f"out-{seed}-{len(histories)}"
            for cmd in ("prepare", "train"):
                assert run(capsys, cmd, "--config", cfg, "--seed", seed, "--out", out)[0] == 0
            (run_dir,) = (out / "runs").iterdir()
            histories.setdefault(seed, []).append((run_dir / "history.csv").read_bytes())
        assert histories[0][0] == histories[0][1]
        assert histories[1][0] != histories[0][0]


class TestEval:
    def test_missing_checkpoint(self, workdir, capsys):
        cfg = write_config(workdir)
        run(capsys, "prepare", "--config", cfg)
        code, _, err = run(capsys, "eval", "--config", cfg, "--checkpoint", workdir / "nope.npz")
        assert code == 1 and "nope.npz" in err

    def test_overfit_row(self, overfit, capsys):
        root, cfg, ckpt, _ = overfit
        code, out, _ = run(capsys, "eval", "--config", cfg, "--split", "train", "--details")
        assert code == 0
        assert "| Tiny-BERT-NLI-B | 100.0 | 100.0 |" in out and "weighted-F1" in out
        reports = root / "out" / "reports"
        assert (reports / "Tiny-BERT-NLI-B.md").read_text(encoding="utf-8").endswith("| Tiny-BERT-NLI-B | 100.0 | 100.0 |\n")
        assert (reports / "comparison.png").is_file() and (reports / "Tiny-BERT-NLI-B-confusion.png").is_file()

    def test_two_checkpoints_sorted(self, overfit, capsys):
        root, cfg, ckpt, _ = overfit
        early = ckpt.parent / "checkpoint-epoch1.npz"
        code, out, _ = run(capsys, "eval", "--config", cfg, "--split", "train", "--checkpoint", early, "--checkpoint", ckpt)
        assert code == 0
        rows = [l for l in out.splitlines() if l.startswith("| Tiny")]
        assert len(rows) == 2
        assert rows[0] == "| Tiny-BERT-NLI-B#2 | 100.0 | 100.0 |"
        assert float(rows[1].split(" | ")[1]) < 100.0

    def test_head_mode_mismatch(self, overfit, capsys):
        _, cfg, ckpt, _ = overfit
        code, _, err = run(capsys, "predict", "--checkpoint", ckpt, "--text", "قیمت خوبه", "--aspect", "قیمت", "--mode", "nli-m")
        assert code == 1 and "3-class head" in err


class TestPredict:
    def test_memorized_instances_and_agreement(self, overfit, capsys):
        _, _, ckpt, train_split = overfit
        for inst in train_split:
            code, out, _ = run(capsys, "predict", "--checkpoint", ckpt, "--text", inst.text, "--aspect", inst.aspect)
            assert code == 0
            assert out.splitlines()[-1] == f"polarity\t{inst.polarity.value}"

    def test_nli_b_output(self, overfit, capsys):
        _, _, ckpt, train_split = overfit
        inst = train_split[0]
        args = ("predict", "--checkpoint", ckpt, "--text", inst.text, "--aspect", inst.aspect)
        code, out, _ = run(capsys, *args)
        lines = out.splitlines()
        assert code == 0 and lines[0] == "mode\tNLI-B"
        assert [l.split("\t")[0] for l in lines[1:4]] == ["yes[positive]", "yes[negative]", "yes[neutral]"]
        assert lines[1].split("\t")[2] == f"{inst.aspect}-مثبت"
        assert all(0.0 <= float(l.split("\t")[1]) <= 1.0 for l in lines[1:4])
        assert run(capsys, *args)[1] == out

    def test_writes_manifest_with_out(self, overfit, tmp_path, capsys):
        _, _, ckpt, train_split = overfit
        inst = train_split[0]
        code, out, _ = run(capsys, "predict", "--checkpoint", ckpt, "--text", inst.text, "--aspect", inst.aspect,
                           "--out", tmp_path / "p")
        assert code == 0 and (tmp_path / "p" / "prediction.tsv").read_text(encoding="utf-8") == out
        assert json.loads((tmp_path / "p" / "manifest.json").read_text(encoding="utf-8"))["command"] == "predict"

    @pytest.mark.parametrize("text, aspect", [("", "قیمت"), ("قیمت خوبه", " ")])
    def test_empty_inputs(self, overfit, capsys, text, aspect):
        _, _, ckpt, _ = overfit
        code, _, err = run(capsys, "predict", "--checkpoint", ckpt, "--text", text, "--aspect", aspect)
        assert code == 1 and "nonempty" in err


class TestReplayAndThreads:
    def test_manifest_replay(self, workdir, capsys, tmp_path_factory):
        cfg = write_config(workdir)
        for cmd in ("prepare", "train"):
            assert run(capsys, cmd, "--config", cfg)[0] == 0
        (run_dir,) = (workdir / "out" / "runs").iterdir()
        original = tree_bytes(run_dir)
        replay_out = tmp_path_factory.mktemp("replay")
        manifest = run_dir / "manifest.json"
        for cmd in ("prepare", "train"):
            assert run(capsys, cmd, "--config", manifest, "--out", replay_out)[0] == 0
        (replayed,) = (replay_out / "runs").iterdir()
        assert replayed.name == run_dir.name
        replay = tree_bytes(replayed)
        # only the recorded out_dir differs
        assert {k: v for k, v in replay.items() if k != "manifest.json"} == {
            k: v for k, v in original.items() if k != "manifest.json"}
        load = lambda b: json.loads(b.decode("utf-8"))  # noqa: E731
        assert load(replay["manifest.json"])["artifacts"] == load(original["manifest.json"])["artifacts"]

    def test_thread_env(self, workdir, capsys, monkeypatch):
        cfg = write_config(workdir)
        monkeypatch.setenv("ABSA_PAIR_THREADS", "1")
        assert run(capsys, "prepare", "--config", cfg)[0] == 0
        monkeypatch.setenv("ABSA_PAIR_THREADS", "zero")
        code, _, err = run(capsys, "prepare", "--config", cfg)
        assert code == 1 and "ABSA_PAIR_THREADS" in err


def test_module_entry_point(workdir):
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "absa_pair", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("absa-pair ")
    assert shutil.which("absa-pair") is not None
