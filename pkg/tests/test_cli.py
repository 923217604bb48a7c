"""End-to-end CLI behaviour: artifacts, determinism, exit codes."""

from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from magscope.cli import main
from magscope.store import load_magf

SEED = ["--seed", "11"]


def _hash_tree(root):
    digest = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return digest


@pytest.fixture(scope="module")
def cli_corpus(tmp_path_factory):
    """synth -> sample -> extract, shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    ds = root / "ds"
    store = root / "lbp2.magf"
    # strictly above 16 x patch_size so the base-40 sampling rectangle is non-empty
    assert main(["synth", "--slides", "3", "--width", "3648", "--height", "3648",
                 "--base-power-mix", "2:1", "--out", str(corpus)] + SEED) == 0
    assert main(["sample", "--manifest", str(corpus / "manifest.jsonl"),
                 "--out", str(ds)] + SEED) == 0
    assert main(["extract", "lbp", "--index", str(ds / "index.csv"), "--preset", "LBP2",
                 "--out", str(store)] + SEED) == 0
    return {"root": root, "corpus": corpus, "ds": ds, "store": store}


class TestSynth:
    def test_manifest_lines_and_mix(self, cli_corpus):
        lines = (cli_corpus["corpus"] / "manifest.jsonl").read_text().splitlines()
        assert len(lines) == 3
        powers = [json.loads(line)["base_objective_power"] for line in lines]
        assert powers.count(40) == 2 and powers.count(20) == 1

    def test_run_json_written(self, cli_corpus):
        payload = json.loads((cli_corpus["corpus"] / "run.json").read_text())
        assert payload["command"] == "synth"
        assert payload["seed"] == 11
        assert "magscope" in payload["versions"]

    def test_rerun_byte_identical(self, tmp_path):
        args = ["synth", "--slides", "1", "--width", "3584", "--height", "3584",
                "--seed", "3", "--out", str(tmp_path / "a")]
        assert main(args) == 0
        first = _hash_tree(tmp_path / "a")
        assert main(args) == 0
        assert _hash_tree(tmp_path / "a") == first

    def test_bad_mix_is_runtime_error(self, tmp_path):
        code = main(["synth", "--slides", "2", "--base-power-mix", "nope",
                     "--out", str(tmp_path / "x")])
        assert code == 1


class TestSample:
    def test_patch_count(self, cli_corpus):
        lines = (cli_corpus["ds"] / "index.csv").read_text().splitlines()
        assert len(lines) - 1 == 2 * 5 * 5 + 1 * 5 * 4  # 70

    def test_missing_manifest_message(self, tmp_path, capsys):
        code = main(["sample", "--manifest", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "ds")])
        assert code == 1
        assert "nope.jsonl" in capsys.readouterr().err


class TestExtract:
    def test_lbp_store_dims(self, cli_corpus):
        store = load_magf(cli_corpus["store"])
        assert store.values.shape == (70, 18)  # LBP2 -> 18 bins

    def test_lbp3_gives_26(self, cli_corpus, tmp_path):
        out = tmp_path / "lbp3.magf"
        assert main(["extract", "lbp", "--index", str(cli_corpus["ds"] / "index.csv"),
                     "--preset", "LBP3", "--out", str(out)] + SEED) == 0
        assert load_magf(out).dim == 26

    def test_threads_invariance(self, cli_corpus, tmp_path):
        index = str(cli_corpus["ds"] / "index.csv")
        one = tmp_path / "t1.magf"
        two = tmp_path / "t2.magf"
        assert main(["extract", "lbp", "--index", index, "--preset", "LBP1",
                     "--threads", "1", "--out", str(one)] + SEED) == 0
        assert main(["extract", "lbp", "--index", index, "--preset", "LBP1",
                     "--threads", "3", "--out", str(two)] + SEED) == 0
        assert one.read_bytes() == two.read_bytes()
        assert (tmp_path / "t1.magf.ids").read_bytes() == (tmp_path / "t2.magf.ids").read_bytes()

    def test_csv_out(self, cli_corpus, tmp_path):
        out = tmp_path / "s.magf"
        csv_out = tmp_path / "s.csv"
        assert main(["extract", "lbp", "--index", str(cli_corpus["ds"] / "index.csv"),
                     "--preset", "LBP1", "--csv-out", str(csv_out),
                     "--out", str(out)] + SEED) == 0
        header = csv_out.read_text().splitlines()[0]
        assert header == "patch_id,label," + ",".join(f"f{i}" for i in range(10))

    def test_deep_with_fixture_model(self, cli_corpus, fixture_model_1024, tmp_path):
        out = tmp_path / "deep.magf"
        assert main(["extract", "deep", "--index", str(cli_corpus["ds"] / "index.csv"),
                     "--model", str(fixture_model_1024), "--batch-size", "16",
                     "--out", str(out)] + SEED) == 0
        assert load_magf(out).dim == 1024


class TestTrainEval:
    def test_train_rf_writes_model(self, cli_corpus, tmp_path):
        out = tmp_path / "rf.json"
        assert main(["train", "rf", "--features", str(cli_corpus["store"]),
                     "--trees", "12", "--out", str(out)] + SEED) == 0
        model = json.loads(out.read_text())
        assert len(model["trees"]) == 12
        assert model["config"]["max_depth"] == 50
        assert (tmp_path / "rf.json.run.json").exists()

    def test_train_mlp_writes_model_and_sidecar(self, cli_corpus, tmp_path):
        out = tmp_path / "net.mmlp"
        assert main(["train", "mlp", "--features", str(cli_corpus["store"]),
                     "--epochs", "2", "--batch-size", "16", "--out", str(out)] + SEED) == 0
        sidecar = json.loads((tmp_path / "net.mmlp.json").read_text())
        assert len(sidecar["loss_history"]) == 2
        assert "determinism" in sidecar

    def test_eval_and_report(self, cli_corpus, tmp_path):
        metrics = tmp_path / "report.json"
        assert main(["eval", "--features", str(cli_corpus["store"]), "--classifier", "rf",
                     "--trees", "15", "--folds", "5", "--out", str(metrics)] + SEED) == 0
        payload = json.loads(metrics.read_text())
        assert len(payload["per_fold"]) == 5
        assert np.asarray(payload["confusion"]).shape == (5, 5)

        rendered = tmp_path / "rendered"
        assert main(["report", "--metrics", str(metrics), "--out", str(rendered)] + SEED) == 0
        folds = (rendered / "folds.csv").read_text().splitlines()
        assert folds[0] == "fold,n_test,accuracy,kappa,f1"
        assert len(folds) == 7  # header + 5 folds + all-folds row
        assert "±" in folds[-1]
        confusion = (rendered / "confusion.csv").read_text().splitlines()
        assert confusion[0].endswith("2.5x,5x,10x,20x,40x")
        svg = (rendered / "confusion.svg").read_text()
        assert svg.startswith("<svg") and "predicted" in svg

    def test_eval_slide_strategy_requires_index(self, cli_corpus, tmp_path):
        code = main(["eval", "--features", str(cli_corpus["store"]), "--classifier", "rf",
                     "--strategy", "slide", "--out", str(tmp_path / "r.json")] + SEED)
        assert code == 1

    def test_eval_slide_strategy_with_index(self, cli_corpus, tmp_path):
        code = main(["eval", "--features", str(cli_corpus["store"]), "--classifier", "rf",
                     "--trees", "10", "--strategy", "slide", "--index",
                     str(cli_corpus["ds"] / "index.csv"),
                     "--out", str(tmp_path / "r.json")] + SEED)
        assert code == 1  # only 3 distinct slides; needs >= 5 for slide folds

    def test_eval_mlp_small_batch(self, cli_corpus, tmp_path):
        metrics = tmp_path / "mlp.json"
        assert main(["eval", "--features", str(cli_corpus["store"]), "--classifier", "mlp",
                     "--epochs", "3", "--batch-size", "16",
                     "--out", str(metrics)] + SEED) == 0
        payload = json.loads(metrics.read_text())
        assert payload["extra"]["determinism"].startswith("blas-threaded")


class TestExitCodes:
    def test_missing_artifact(self, tmp_path, capsys):
        code = main(["train", "rf", "--features", str(tmp_path / "absent.magf"),
                     "--out", str(tmp_path / "m.json")])
        assert code == 1
        assert "absent.magf" in capsys.readouterr().err

    def test_bad_flags_exit_two(self):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--bogus"])
        assert exc.value.code == 2

    def test_success_zero(self, cli_corpus, tmp_path):
        assert main(["train", "rf", "--features", str(cli_corpus["store"]),
                     "--trees", "3", "--out", str(tmp_path / "m.json")] + SEED) == 0
