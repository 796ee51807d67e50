import json

import pytest

from ade.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    data = root / "data"
    code = main(["synth", "--out", str(data), "--colors", "red,green,blue",
                 "--shapes", "circle,square", "--images-per-pair", "4",
                 "--eval-images-per-pair", "2", "--seed", "0"])
    assert code == 0
    run = root / "run"
    code = main(["train", "--manifest", str(data / "manifest.jsonl"),
                 "--out", str(run), "--epochs", "2", "--batch-size", "8",
                 "--attention", "self", "--reg-weight", "0", "--seed", "0"])
    assert code == 0
    return root, data, run


class TestSynth:
    def test_default_shape_counts(self, tmp_path):
        out = tmp_path / "d"
        assert main(["synth", "--out", str(out), "--images-per-pair", "1",
                     "--eval-images-per-pair", "1"]) == 0
        rows = [json.loads(l) for l in
                (out / "manifest.jsonl").read_text().splitlines()]
        attrs = {r["attribute"] for r in rows}
        objs = {r["object"] for r in rows}
        assert len(attrs) == 6 and len(objs) == 5
        assert (out / "resolved-config.ini").exists()

    def test_seeded_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["synth", "--out", str(out), "--colors", "red,green",
                         "--shapes", "circle,square", "--images-per-pair", "2",
                         "--eval-images-per-pair", "1", "--seed", "5"]) == 0
        assert (a / "manifest.jsonl").read_bytes() \
            == (b / "manifest.jsonl").read_bytes()

    def test_orphaning_unseen_fraction_is_data_error(self, tmp_path):
        code = main(["synth", "--out", str(tmp_path / "x"), "--colors",
                     "red,green", "--shapes", "circle,square",
                     "--unseen-frac", "0.9"])
        assert code == 2

    def test_usage_error_exit_code(self):
        assert main(["synth", "--no-such-flag"]) == 1
        assert main(["frobnicate"]) == 1


class TestTrainEval:
    def test_train_outputs(self, workspace):
        root, data, run = workspace
        assert (run / "metrics.jsonl").exists()
        assert (run / "best.ckpt").exists()
        assert (run / "resolved-config.ini").exists()
        lines = (run / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2

    def test_missing_manifest_is_data_error(self, tmp_path):
        code = main(["train", "--manifest", str(tmp_path / "nope.jsonl"),
                     "--out", str(tmp_path / "r"), "--epochs", "1"])
        assert code == 2

    def test_eval_closed_and_open_worlds(self, workspace, tmp_path):
        root, data, run = workspace
        out = tmp_path / "eval-closed"
        code = main(["eval", "--manifest", str(data / "manifest.jsonl"),
                     "--ckpt", str(run / "best.ckpt"), "--out", str(out),
                     "--attention", "self", "--beta", "0", "--world", "closed",
                     "--store", str(run / "tokens.bin")])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert 0 <= metrics["auc"] <= 100
        assert (out / "scores.jsonl").exists()
        assert (out / "curve.csv").exists()

        out2 = tmp_path / "eval-open"
        code = main(["eval", "--manifest", str(data / "manifest.jsonl"),
                     "--ckpt", str(run / "best.ckpt"), "--out", str(out2),
                     "--attention", "self", "--beta", "0", "--world", "open",
                     "--store", str(run / "tokens.bin")])
        assert code == 0
        metrics2 = json.loads((out2 / "metrics.json").read_text())
        assert metrics2["num_candidates"] == 6  # |A| x |O|

    def test_eval_beta_auto_grid(self, workspace, tmp_path):
        root, data, run = workspace
        out = tmp_path / "eval-auto"
        code = main(["eval", "--manifest", str(data / "manifest.jsonl"),
                     "--ckpt", str(run / "best.ckpt"), "--out", str(out),
                     "--attention", "self", "--beta", "auto",
                     "--store", str(run / "tokens.bin")])
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert len(metrics["beta_grid"]) == 11

    def test_config_file_with_flag_override(self, workspace, tmp_path):
        root, data, run = workspace
        cfg = tmp_path / "run.ini"
        cfg.write_text("[train]\nepochs = 7\nbatch-size = 8\n"
                       "attention = self\nreg-weight = 0\n")
        out = tmp_path / "r2"
        code = main(["train", "--manifest", str(data / "manifest.jsonl"),
                     "--out", str(out), "--config", str(cfg),
                     "--epochs", "1"])
        assert code == 0
        lines = (out / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 1  # flag overrides the file's epochs=7
        resolved = (out / "resolved-config.ini").read_text()
        assert "batch-size = 8" in resolved


class TestRetrieve:
    def test_modes_dispatch(self, workspace, tmp_path):
        root, data, run = workspace
        rows = [json.loads(l) for l in
                (data / "manifest.jsonl").read_text().splitlines()]
        test_id = next(r["id"] for r in rows if r["split"] == "test")
        common = ["--manifest", str(data / "manifest.jsonl"),
                  "--ckpt", str(run / "best.ckpt"), "--attention", "self",
                  "--store", str(run / "tokens.bin"), "--k", "3"]
        for mode, query in [("t2i", "red,circle"), ("i2t", test_id),
                            ("concept", test_id)]:
            out = tmp_path / f"retr-{mode}"
            code = main(["retrieve", *common, "--mode", mode,
                         "--query", query, "--out", str(out)])
            assert code == 0, mode
            report = json.loads((out / "retrieval.json").read_text())
            assert report["mode"] == mode
            assert len(report["results"]) <= 3

    def test_unknown_mode_is_usage_error(self, workspace, tmp_path):
        root, data, run = workspace
        code = main(["retrieve", "--manifest", str(data / "manifest.jsonl"),
                     "--ckpt", str(run / "best.ckpt"), "--mode", "warp",
                     "--query", "x", "--out", str(tmp_path / "r")])
        assert code == 1


class TestPlot:
    def test_plot_one_and_two_curves(self, workspace, tmp_path):
        root, data, run = workspace
        out = tmp_path / "ev"
        main(["eval", "--manifest", str(data / "manifest.jsonl"),
              "--ckpt", str(run / "best.ckpt"), "--out", str(out),
              "--attention", "self", "--beta", "0",
              "--store", str(run / "tokens.bin")])
        svg = tmp_path / "one.svg"
        assert main(["plot", str(out / "curve.csv"), "--out", str(svg)]) == 0
        assert "<svg" in svg.read_text()
        svg2 = tmp_path / "two.svg"
        assert main(["plot", str(out / "curve.csv"), str(out / "curve.csv"),
                     "--out", str(svg2)]) == 0

    def test_empty_curve_is_data_error(self, tmp_path):
        empty = tmp_path / "c.csv"
        empty.write_text("gamma,seen_acc,unseen_acc\n")
        assert main(["plot", str(empty), "--out",
                     str(tmp_path / "x.svg")]) == 2
