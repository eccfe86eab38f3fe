import json

import numpy as np
import pytest

from atseg.cli import build_parser, main, parse_args, write_run_manifest
from atseg.driver import run_segmentation
from atseg.imagefield import save_pgm


def test_preset_tanh1d_100_with_eps():
    cfg = parse_args(["--preset", "tanh1d-100", "--eps", "0.01"])
    assert cfg.source == {"kind": "tanh1d", "steepness": 100.0}
    assert cfg.n == 200
    assert cfg.alpha == 0.01
    assert cfg.beta == 1e-3
    assert cfg.gamma == 1e-3
    assert cfg.k_eps == 1e-9
    assert cfg.T == 20.0
    assert cfg.eps == 0.01


def test_preset_circle2d():
    cfg = parse_args(["--preset", "circle2d", "--eps", "1e-3"])
    assert cfg.source["kind"] == "circle2d"
    assert cfg.n == 50
    assert cfg.alpha == 1e-3 and cfg.gamma == 1e-5 and cfg.beta == 1e-2
    assert cfg.k_eps == 1e-10
    assert cfg.scale == "auto"


def test_auto_selection_flags():
    cfg = parse_args(["--preset", "tanh1d-20", "--eps", "auto",
                      "--scale", "auto"])
    assert cfg.eps == "auto"
    assert cfg.scale == "auto"
    assert cfg.grad_cr == 3e3


def test_flag_overrides_preset():
    cfg = parse_args(["--preset", "tanh1d-100", "--eps", "0.1", "--n", "64",
                      "--T", "1.5", "--tau", "0.02", "--noise", "0.25",
                      "--seed", "7"])
    assert cfg.n == 64 and cfg.T == 1.5 and cfg.tau == 0.02
    assert cfg.noise == 0.25 and cfg.seed == 7


def test_image_and_preset_conflict(capsys):
    with pytest.raises(SystemExit) as exc:
        parse_args(["--image", "x.pgm", "--preset", "circle2d"])
    assert exc.value.code == 2


def test_missing_source_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        parse_args(["--eps", "0.01"])
    assert exc.value.code == 2


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        parse_args(["--preset", "circle2d", "--bogus", "1"])
    assert exc.value.code == 2


def test_bad_eps_value_exits_2():
    with pytest.raises(SystemExit) as exc:
        parse_args(["--preset", "circle2d", "--eps", "wide"])
    assert exc.value.code == 2


def test_image_defaults(tmp_path):
    img = tmp_path / "in.pgm"
    save_pgm(np.linspace(0, 1, 64).reshape(8, 8), img)
    cfg = parse_args(["--image", str(img)])
    assert cfg.source == {"kind": "image", "path": str(img)}
    assert cfg.n == 70
    assert cfg.eps == "auto" and cfg.scale == "auto"


def test_main_runs_and_writes_manifest(tmp_path):
    out = tmp_path / "run"
    code = main(["--preset", "tanh1d-100", "--eps", "0.01", "--n", "40",
                 "--T", "0.1", "--macro-dt", "0.05", "--out-dir", str(out)])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["request"]["eps"] == 0.01
    assert manifest["effective"]["eps"] == 0.01
    assert manifest["effective"]["L"] == 1.0
    assert (out / "series.csv").exists()


def test_main_flat_image_numerical_failure(tmp_path):
    img = tmp_path / "flat.pgm"
    save_pgm(np.full((8, 8), 0.5), img)
    code = main(["--image", str(img), "--out-dir", str(tmp_path / "o")])
    assert code == 3


def test_manifest_roundtrip_reproduces(tmp_path):
    out_a = tmp_path / "a"
    assert main(["--preset", "tanh1d-100", "--eps", "auto", "--n", "40",
                 "--T", "0.1", "--macro-dt", "0.05",
                 "--out-dir", str(out_a), "--deterministic"]) == 0
    out_b = tmp_path / "b"
    assert main(["--from-manifest", str(out_a / "manifest.json"),
                 "--out-dir", str(out_b)]) == 0
    assert (out_a / "series.csv").read_bytes() == (out_b / "series.csv").read_bytes()
    man_a = json.loads((out_a / "manifest.json").read_text())
    man_b = json.loads((out_b / "manifest.json").read_text())
    assert man_a["effective"]["eps"] == man_b["effective"]["eps"]


def test_parser_help_mentions_presets():
    help_text = build_parser().format_help()
    assert "tanh1d-100" in help_text
    assert "circle2d" in help_text
