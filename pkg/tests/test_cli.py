import json
import subprocess
import sys

import pytest

import serkit.autodiff
from serkit.cli import main
from serkit.model import LABELS


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """One full synth -> featurize -> train pipeline, shared by the
    read-only CLI tests below."""
    ws = tmp_path_factory.mktemp("cli")
    ini = ws / "run.ini"
    ini.write_text(
        "[dsp]\n"
        "n_mels = 32\n"
        "target_frames = 32\n"
        "\n"
        "[model]\n"
        "conv_channels = 4,8,8\n"
        "n_encoder_layers = 1\n"
        "n_heads = 4\n"
        "d_model = 32\n"
        "d_ff = 64\n"
        "\n"
        "[train]\n"
        "max_epochs = 5\n"
        "early_stop_patience = 5\n"
        "batch_size = 8\n"
        "\n"
        "[paths]\n"
        f"data_dir = {ws / 'data'}\n"
        f"manifest = {ws / 'data' / 'manifest.csv'}\n"
        f"cache_dir = {ws / 'features'}\n"
        f"run_dir = {ws / 'runs'}\n"
        f"report_dir = {ws / 'reports'}\n")
    assert main(["synth", "--config", str(ini)]) == 0
    assert main(["featurize", "--config", str(ini)]) == 0
    assert main(["train", "--config", str(ini)]) == 0
    return ws, str(ini)


class TestPipeline:
    def test_artifacts_exist(self, workspace):
        ws, _ = workspace
        assert len(list((ws / "data").glob("*.wav"))) == 16
        assert len(list((ws / "features").glob("*.feat"))) == 16
        assert (ws / "features" / "index.csv").exists()
        for name in ("best.ckpt", "final.ckpt", "train_log.csv",
                     "split_manifest.csv"):
            assert (ws / "runs" / name).exists()

    def test_featurize_skips_cached_files(self, workspace, capsys):
        ws, ini = workspace
        index_before = (ws / "features" / "index.csv").read_bytes()
        assert main(["featurize", "--config", ini]) == 0
        out = capsys.readouterr().out
        assert "featurized 0 files, 16 already cached" in out
        assert (ws / "features" / "index.csv").read_bytes() == index_before

    def test_parallel_featurize_matches_serial(self, workspace):
        ws, ini = workspace
        alt = ws / "features_mt"
        assert main(["featurize", "--config", ini, "--cache-dir", str(alt),
                     "--workers", "4"]) == 0
        base = ws / "features"
        assert (alt / "index.csv").read_text() == (base / "index.csv").read_text()
        for f in sorted(base.glob("*.feat")):
            assert (alt / f.name).read_bytes() == f.read_bytes()

    def test_train_is_reproducible(self, workspace):
        ws, ini = workspace
        out2 = ws / "runs2"
        assert main(["train", "--config", ini, "--out", str(out2)]) == 0
        for name in ("best.ckpt", "final.ckpt", "train_log.csv",
                     "split_manifest.csv"):
            assert (out2 / name).read_bytes() == (ws / "runs" / name).read_bytes()

    def test_eval_writes_reports(self, workspace, capsys):
        ws, ini = workspace
        split_manifest = str(ws / "runs" / "split_manifest.csv")
        assert main(["eval", "--config", ini,
                     "--manifest", split_manifest]) == 0
        out = capsys.readouterr().out
        assert "split=test n=4" in out
        report = json.loads((ws / "reports" / "report.json").read_text())
        assert set(report) >= {"accuracy", "n_samples", "per_class", "macro",
                               "confusion"}
        assert (ws / "reports" / "confusion.csv").read_text().startswith(
            "true\\pred,")
        lines = (ws / "reports" / "predictions.csv").read_text().strip()
        assert len(lines.split("\n")) == 1 + 4

    def test_eval_over_every_utterance(self, workspace, capsys):
        ws, ini = workspace
        assert main(["eval", "--config", ini, "--split", "all",
                     "--manifest", str(ws / "runs" / "split_manifest.csv"),
                     "--out", str(ws / "reports_all")]) == 0
        assert "n=16" in capsys.readouterr().out

    def test_predict_outputs_json(self, workspace, capsys):
        ws, ini = workspace
        wav = str(ws / "data" / "anger_000.wav")
        assert main(["predict", wav, "--config", ini]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["label"] in LABELS
        assert set(out["probabilities"]) == set(LABELS)
        assert abs(sum(out["probabilities"].values()) - 1.0) < 1e-6

    def test_config_comes_from_the_environment(self, workspace, capsys,
                                               monkeypatch):
        ws, ini = workspace
        monkeypatch.setenv("SERKIT_CONFIG", ini)
        assert main(["eval", "--split", "val",
                     "--manifest", str(ws / "runs" / "split_manifest.csv"),
                     "--out", str(ws / "reports_val")]) == 0
        assert "split=val" in capsys.readouterr().out

    def test_set_overrides_apply_without_a_file(self, tmp_path):
        corpus = tmp_path / "corpus"
        assert main(["synth", "--set", f"paths.data_dir={corpus}",
                     "--n-per-class", "1"]) == 0
        assert (corpus / "manifest.csv").exists()
        assert len(list(corpus.glob("*.wav"))) == 4


class TestExitCodes:
    def test_no_subcommand_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_missing_config_file(self, capsys):
        assert main(["synth", "--config", "/nonexistent/run.ini"]) == 1
        assert "error:" in capsys.readouterr().err

    @pytest.mark.parametrize("override", [
        "garbage", "train.lr0=fast", "model.d_model=63", "tuning.lr0=1",
    ])
    def test_bad_overrides(self, override, capsys):
        assert main(["synth", "--set", override]) == 1
        assert "error:" in capsys.readouterr().err

    def test_featurize_reports_unreadable_audio(self, tmp_path, capsys):
        manifest = tmp_path / "m.csv"
        manifest.write_text("path,label\nghost.wav,anger\n")
        rc = main(["featurize", "--manifest", str(manifest),
                   "--cache-dir", str(tmp_path / "cache")])
        assert rc == 2
        assert "ghost.wav" in capsys.readouterr().err

    def test_train_without_a_feature_cache(self, workspace, tmp_path, capsys):
        ws, ini = workspace
        rc = main(["train", "--config", ini,
                   "--cache-dir", str(tmp_path / "empty"),
                   "--out", str(tmp_path / "run")])
        assert rc == 2
        assert "featurize" in capsys.readouterr().err

    def test_partially_assigned_splits_are_rejected(self, workspace, tmp_path,
                                                    capsys):
        ws, ini = workspace
        manifest = tmp_path / "m.csv"
        manifest.write_text("path,label,split\n"
                            "a.wav,anger,train\n"
                            "b.wav,anger,\n")
        rc = main(["train", "--config", ini, "--manifest", str(manifest),
                   "--out", str(tmp_path / "run")])
        assert rc == 1
        assert "split" in capsys.readouterr().err

    def test_eval_needs_split_assignments(self, workspace, tmp_path):
        ws, ini = workspace
        # the raw data manifest carries no split column
        rc = main(["eval", "--config", ini, "--out", str(tmp_path)])
        assert rc == 2

    def test_eval_with_a_missing_checkpoint(self, workspace, tmp_path):
        ws, ini = workspace
        rc = main(["eval", "--config", ini,
                   "--manifest", str(ws / "runs" / "split_manifest.csv"),
                   "--checkpoint", str(tmp_path / "absent.ckpt"),
                   "--out", str(tmp_path)])
        assert rc == 2

    def test_predict_rejects_unreadable_audio(self, workspace, tmp_path):
        ws, ini = workspace
        bad = tmp_path / "x.wav"
        bad.write_bytes(b"this is not audio")
        assert main(["predict", str(bad), "--config", ini]) == 2


class TestGradcheckCommand:
    def test_quick_suite_passes(self, capsys):
        assert main(["gradcheck", "--trials", "1"]) == 0
        out = capsys.readouterr().out
        assert "full model" in out
        assert "FAIL" not in out

    def test_detects_a_corrupted_backward(self, monkeypatch, capsys):
        orig = serkit.autodiff.relu

        def bad_relu(x):
            out = orig(x)
            recorded = out._backward
            if recorded is not None:
                out._backward = lambda g: tuple(
                    1.5 * gg if gg is not None else None for gg in recorded(g))
            return out

        monkeypatch.setattr(serkit.autodiff, "relu", bad_relu)
        assert main(["gradcheck", "--trials", "1"]) == 3
        out = capsys.readouterr().out
        assert "FAIL" in out
        failing = [line for line in out.split("\n") if "FAIL" in line]
        assert any(line.startswith("relu") for line in failing)


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "serkit", "synth",
         "--out", str(tmp_path / "d"), "--n-per-class", "1"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    assert (tmp_path / "d" / "manifest.csv").exists()
