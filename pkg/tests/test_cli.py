import json

import numpy as np
import pytest

from idsynth import imageio
from idsynth.cli import EXIT_INVALID, EXIT_MISSING, EXIT_OK, main
from idsynth.config import tiny_config


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(tiny_config(str(root / "runs")).to_dict()))
    assert main(["--config", str(cfg_path), "-q", "train", "all"]) == EXIT_OK
    return root, cfg_path, tiny_config(str(root / "runs")).run_dir()


def _run(cfg_path, *args):
    return main(["--config", str(cfg_path), "-q", *args])


def test_train_writes_checkpoints_and_logs(tiny_run):
    _, _, run = tiny_run
    for name in ("encoders.idg", "id_encoder.idg", "prior.idg", "diffusion.idg"):
        assert (run / "ckpt" / name).stat().st_size > 0
    assert (run / "config_hash.txt").read_text().strip() == run.name
    assert (run / "logs" / "diffusion_loss.csv").read_text().startswith("step,loss")


def test_gen_data(tiny_run):
    _, cfg_path, run = tiny_run
    assert _run(cfg_path, "gen-data") == EXIT_OK
    manifest = json.loads((run / "data" / "manifest.json").read_text())
    assert len(manifest) == 160
    assert imageio.read_ppm(run / "data" / "preview_00.ppm").shape == (3, 24, 24)


@pytest.mark.parametrize("alpha,flag", [(1.0, "e_g_equals_e_i"), (0.0, "e_g_equals_e_p")])
def test_sample_alpha_endpoints_logged(tiny_run, capsys, alpha, flag):
    _, cfg_path, run = tiny_run
    assert _run(cfg_path, "sample", "--alpha", str(alpha)) == EXIT_OK
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert info[flag] is True
    assert info["branch"] == ("image" if alpha == 1.0 else "text")
    assert not info["dropped_style"] and not info["dropped_face"]
    img = imageio.read_ppm(info["output"])
    assert img.shape == (3, 24, 24)
    assert (run / "samples" / "config_hash.txt").exists()


def test_sample_is_reproducible(tiny_run, tmp_path):
    _, cfg_path, _ = tiny_run
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    assert _run(cfg_path, "sample", "--sample-seed", "3", "--out", str(a)) == EXIT_OK
    assert _run(cfg_path, "sample", "--sample-seed", "3", "--out", str(b)) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()


def test_sample_modes(tiny_run, tmp_path, capsys):
    _, cfg_path, _ = tiny_run
    assert _run(cfg_path, "sample", "--mix", "h0:0.7,h1:0.3") == EXIT_OK
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["mix"] == [0.7, 0.3]
    assert _run(cfg_path, "sample", "--multi", "h0@0.3,0.5,0.3;h1@0.72,0.5,0.3", "--nonhuman", "fixed") == EXIT_OK
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["identities"] == 2
    src = tmp_path / "in.ppm"
    imageio.write_ppm(src, np.full((3, 24, 24), 0.5, dtype=np.float32))
    assert _run(cfg_path, "sample", "--img2img", str(src), "--strength", "0.0", "--out", str(tmp_path / "o.ppm")) == EXIT_OK
    assert (tmp_path / "o.ppm").read_bytes() == src.read_bytes()


def test_eval_then_report(tiny_run, capsys):
    _, cfg_path, run = tiny_run
    assert _run(cfg_path, "eval") == EXIT_OK
    latest = (run / "eval" / "latest").read_text().strip()
    out = run / "eval" / latest
    for name in ("report.csv", "similarities.csv", "report.txt", "checks.csv", "config_hash.txt"):
        assert (out / name).exists()
    capsys.readouterr()
    assert _run(cfg_path, "report") == EXIT_OK
    assert "Ours w/ image" in capsys.readouterr().out


def test_missing_artifacts_exit_2(tmp_path, tiny_run):
    _, cfg_path, _ = tiny_run
    empty = ["--runs-root", str(tmp_path / "nothing")]
    assert _run(cfg_path, *empty, "sample") == EXIT_MISSING
    assert _run(cfg_path, *empty, "eval") == EXIT_MISSING
    assert _run(cfg_path, *empty, "report") == EXIT_MISSING
    assert _run(cfg_path, *empty, "train", "diffusion") == EXIT_MISSING
    assert _run(cfg_path, "sample", "--img2img", str(tmp_path / "none.ppm")) == EXIT_MISSING
    assert main(["--config", str(tmp_path / "absent.json"), "eval"]) == EXIT_MISSING


def test_invalid_input_exit_1(tmp_path, tiny_run, capsys):
    _, cfg_path, _ = tiny_run
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"stepz": 1}}')
    assert main(["--config", str(bad), "eval"]) == EXIT_INVALID
    assert "train.stepz" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["--config", str(bad), "eval"]) == EXIT_INVALID
    assert _run(cfg_path, "sample", "--alpha", "1.5") == EXIT_INVALID
    assert _run(cfg_path, "sample", "--identity", "h99") == EXIT_INVALID
    assert _run(cfg_path, "sample", "--mix", "h0:0.9,h1:0.3") == EXIT_INVALID
    assert _run(cfg_path, "sample", "--multi", "h0@0.5,0.5,0.3;h1@0.55,0.5,0.3") == EXIT_INVALID
    assert main(["frobnicate"]) == EXIT_INVALID
    assert main(["--lr", "-1", "gen-data"]) == EXIT_INVALID


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "gen-data" in capsys.readouterr().out


def test_flags_before_and_after_subcommand_agree(tmp_path, capsys):
    root = str(tmp_path / "r")
    assert main(["--n", "20", "--runs-root", root, "-q", "gen-data"]) == EXIT_OK
    capsys.readouterr()
    assert main(["gen-data", "--n", "20", "--runs-root", root, "-q"]) == EXIT_OK
    assert "wrote 20 samples" in capsys.readouterr().out
