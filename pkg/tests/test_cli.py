import json

import numpy as np
import pytest

from dinosd.cli import build_parser, main
from dinosd.data import SceneConfig, make_dataset, read_dataset, write_dataset
from dinosd.formats import read_dsd1, read_ppm, write_ppm
from dinosd.model import DecoderConfig, EncoderConfig, ModelConfig, load_checkpoint
from dinosd.train import TrainConfig

SCENES = SceneConfig(height=32, view_width=48)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_dataset(make_dataset(2, 0, SCENES), root / "train", SCENES)
    write_dataset(make_dataset(1, 1, SCENES), root / "val", SCENES)
    (root / "corr.json").write_text(json.dumps([{"kind": "gaussian_noise", "severity": 3, "seed": 4}]))
    model = ModelConfig(
        encoder=EncoderConfig(channels=16, block_count=4),
        decoder=DecoderConfig(fusion_channels=8, head_channels=8),
    )
    TrainConfig(model=model, epochs=3).save(root / "cfg.json")
    args = ["train", "--data", str(root / "train"), "--val", str(root / "val"), "--out", str(root / "run"),
            "--config", str(root / "cfg.json"), "--epochs", "1", "--val-corruptions", str(root / "corr.json")]
    assert main(args) == 0
    return root


class TestUsage:
    def test_unknown_subcommand_exits_2(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", "x", "--colour"])
        assert exc.value.code == 2

    def test_missing_required_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--out", "x"])
        assert exc.value.code == 2

    @pytest.mark.parametrize("cmd", ["gen-data", "train", "eval", "corrupt", "preprocess", "infer", "gradcheck", "ablate"])
    def test_every_subcommand_registered(self, cmd):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args([cmd, "--help"])
        assert exc.value.code == 0


class TestGenData:
    def test_writes_dataset(self, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["gen-data", "--out", str(out), "--scenes", "2", "--seed", "3",
                     "--height", "32", "--view-width", "48"]) == 0
        got = read_dataset(out)
        ref = make_dataset(2, 3, SCENES)
        np.testing.assert_array_equal(got[1].images, ref[1].images)
        assert "2 scenes" in capsys.readouterr().out

    def test_bad_geometry_is_runtime_error(self, tmp_path, capsys):
        assert main(["gen-data", "--out", str(tmp_path), "--view-width", "50", "--overlap", "0.25"]) == 1
        assert "error:" in capsys.readouterr().err


class TestTrain:
    def test_config_then_flag_override(self, workspace):
        cfg = TrainConfig.load(workspace / "run" / "config.json")
        assert cfg.epochs == 1  # flag wins over the file's 3
        assert cfg.model.encoder.channels == 16
        assert (cfg.model.encoder.height, cfg.model.encoder.width) == (32, 48)
        assert cfg.val_corruptions[0].kind == "gaussian_noise"
        assert (workspace / "run" / "best" / "manifest.json").is_file()

    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
        assert "error:" in capsys.readouterr().err


class TestEval:
    def test_adjacent_with_both_preprocessing_steps(self, workspace, capsys):
        args = ["eval", "--checkpoint", str(workspace / "run" / "best"), "--data", str(workspace / "val"),
                "--corruptions", str(workspace / "corr.json"), "--attention", "adjacent", "--denoise", "--equalize"]
        assert main(args) == 0
        lines = [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.startswith("{")]
        assert len(lines) == 1
        assert (lines[0]["attention"], lines[0]["denoise"], lines[0]["equalize"]) == ("adjacent", True, True)

    def test_reproduces_training_validation(self, workspace, tmp_path):
        out = tmp_path / "rows.jsonl"
        args = ["eval", "--checkpoint", str(workspace / "run" / "epoch_1"), "--data", str(workspace / "val"),
                "--corruptions", str(workspace / "corr.json"), "--json", str(out)]
        assert main(args) == 0
        row = json.loads(out.read_text().splitlines()[0])
        hist = json.loads((workspace / "run" / "history.json").read_text())
        for key, val in hist[0]["val"].items():
            assert row[key] == val

    def test_grid(self, workspace, tmp_path):
        out = tmp_path / "rows.jsonl"
        assert main(["eval", "--checkpoint", str(workspace / "run" / "best"), "--data", str(workspace / "val"),
                     "--grid", "--json", str(out)]) == 0
        rows = [json.loads(x) for x in out.read_text().splitlines()]
        assert {(r["denoise"], r["equalize"]) for r in rows} == {(a, b) for a in (False, True) for b in (False, True)}

    def test_attention_mismatch(self, workspace, capsys):
        assert main(["eval", "--checkpoint", str(workspace / "run" / "best"), "--data", str(workspace / "val"),
                     "--attention", "self"]) == 1
        assert "error:" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, workspace, tmp_path, capsys):
        (tmp_path / "manifest.json").write_text("{not json")
        assert main(["eval", "--checkpoint", str(tmp_path), "--data", str(workspace / "val")]) == 1
        assert "error:" in capsys.readouterr().err


class TestImageCommands:
    def test_corrupt_single_image(self, workspace, tmp_path):
        src = workspace / "val" / "scene_0000" / "view_0.ppm"
        out = tmp_path / "c.ppm"
        assert main(["corrupt", "--input", str(src), "--out", str(out), "--kind", "pixelate", "--severity", "5"]) == 0
        img = read_ppm(out)
        assert img.shape == read_ppm(src).shape
        assert not np.array_equal(img, read_ppm(src))

    def test_corrupt_dataset(self, workspace, tmp_path):
        assert main(["corrupt", "--input", str(workspace / "val"), "--out", str(tmp_path),
                     "--manifest", str(workspace / "corr.json")]) == 0
        got = read_dataset(tmp_path / "gaussian_noise_s3_seed4")
        ref = read_dataset(workspace / "val")
        np.testing.assert_array_equal(got[0].depth, ref[0].depth)
        assert not np.array_equal(got[0].images, ref[0].images)

    def test_corrupt_dataset_needs_manifest(self, workspace, tmp_path):
        assert main(["corrupt", "--input", str(workspace / "val"), "--out", str(tmp_path)]) == 1

    def test_preprocess_image(self, tmp_path):
        img = np.random.default_rng(0).random((3, 8, 10))
        write_ppm(tmp_path / "a.ppm", img)
        assert main(["preprocess", "--input", str(tmp_path / "a.ppm"), "--out", str(tmp_path / "b.ppm")]) == 0
        out = read_ppm(tmp_path / "b.ppm")
        assert out.shape == (3, 8, 10) and out.max() == 1.0

    def test_preprocess_bad_ppm(self, tmp_path, capsys):
        (tmp_path / "a.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
        assert main(["preprocess", "--input", str(tmp_path / "a.ppm"), "--out", str(tmp_path / "b.ppm")]) == 1
        assert "magic" in capsys.readouterr().err


class TestInfer:
    def test_writes_dsd1_and_ppm(self, workspace, tmp_path):
        ckpt = workspace / "run" / "best"
        assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(workspace / "val" / "scene_0000"),
                     "--out", str(tmp_path)]) == 0
        model = load_checkpoint(ckpt)
        ref = model.predict(read_dataset(workspace / "val")[0].images)
        for k in range(6):
            depth = read_dsd1(tmp_path / f"depth_{k}.dsd1")
            # DSD1 stores float32
            np.testing.assert_array_equal(depth, ref[k].astype(np.float32))
            vis = read_ppm(tmp_path / f"depth_{k}.ppm")
            assert vis.shape == (3, 32, 48)
            np.testing.assert_array_equal(vis[0], vis[2])  # grayscale

    def test_wrong_view_count(self, workspace, tmp_path):
        view = str(workspace / "val" / "scene_0000" / "view_0.ppm")
        assert main(["infer", "--checkpoint", str(workspace / "run" / "best"), "--images", view, view,
                     "--out", str(tmp_path)]) == 1


class TestGradcheck:
    def test_selected_cases_pass(self, capsys):
        assert main(["gradcheck", "--only", "mul", "softmax", "--trials", "2", "--skip-model"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 2 and "2/2 passed" in out

    def test_unknown_case(self):
        assert main(["gradcheck", "--only", "tan", "--skip-model"]) == 1
