import json
import os
import struct
import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hdrsplat import cli
from hdrsplat.cli import (
    ConfigError,
    ImageFormatError,
    bracket_slot,
    default_config,
    format_config,
    load_config,
    main,
    parse_config,
    parse_domain,
    parse_pfm,
    parse_ppm,
    pfm_bytes,
    ppm_bytes,
    read_pfm,
)
from hdrsplat.bracketing import ExposurePlan
from hdrsplat.training import read_checkpoint

SMALL = ["--set", "synthetic.n_gaussians=5", "--set", "synthetic.width=32", "--set", "synthetic.height=32",
         "--set", "synthetic.n_cameras=4"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Small data set plus a 50-iteration run, shared by the read-only CLI tests."""
    out = tmp_path_factory.mktemp("cli")
    assert run("gen-scene", "--output", out, *SMALL) == 0
    t0 = time.perf_counter()
    code = run("train", "--output", out, "--iterations", 50, *SMALL)
    return out, code, time.perf_counter() - t0


class TestConfig:
    def test_parse_with_comments(self):
        cfg = parse_config("# a comment\nseed = 7  # trailing\n\ntrain.beta = 0.25\nplan.ratios = 0.5, 2\n")
        assert cfg["seed"] == 7 and cfg["train.beta"] == 0.25 and cfg["plan.ratios"] == (0.5, 2.0)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="nope"):
            parse_config("nope = 1\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config("seed = many\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config("seed 3\n")

    def test_round_trip(self):
        cfg = default_config()
        cfg["train.beta"] = 0.3
        cfg["output_dir"] = "elsewhere"
        assert parse_config(format_config(cfg)) == cfg

    def test_file_then_overrides(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("seed = 3\ntrain.iterations = 9\n")
        cfg = load_config(p, ["train.iterations=11"])
        assert cfg["seed"] == 3 and cfg["train.iterations"] == 11
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.cfg")


class TestImages:
    @given(st.integers(0, 2**31 - 1), st.integers(1, 9), st.integers(1, 9))
    def test_pfm_bit_exact(self, seed, h, w):
        img = np.random.default_rng(seed).uniform(0, 100, (h, w, 3)).astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(parse_pfm(pfm_bytes(img)), img)

    def test_pfm_rows_bottom_to_top_little_endian(self):
        img = np.zeros((2, 1, 3))
        img[0] = 1.0
        data = pfm_bytes(img)
        assert data.startswith(b"PF\n1 2\n-1.0\n")
        body = data[-24:]
        assert struct.unpack("<3f", body[:12]) == (0.0, 0.0, 0.0)
        assert struct.unpack("<3f", body[12:]) == (1.0, 1.0, 1.0)

    def test_grey_pfm(self):
        data = b"Pf\n2 1\n-1.0\n" + struct.pack("<2f", 0.25, 0.5)
        out = parse_pfm(data)
        np.testing.assert_array_equal(out.reshape(-1), [0.25, 0.5])

    def test_big_endian_pfm(self):
        data = b"PF\n1 1\n1.0\n" + struct.pack(">3f", 1.5, 2.5, 3.5)
        np.testing.assert_array_equal(parse_pfm(data)[0, 0], [1.5, 2.5, 3.5])

    def test_ppm_quantization(self):
        data = ppm_bytes(np.full((1, 1, 3), 0.5))
        assert data.endswith(bytes([128, 128, 128]))
        np.testing.assert_array_equal(parse_ppm(data), np.full((1, 1, 3), 128 / 255))

    def test_ppm_header_comment(self):
        data = b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 255, 51])
        np.testing.assert_allclose(parse_ppm(data)[0, 0], [0, 1, 0.2])

    @pytest.mark.parametrize(
        "data",
        [b"P3\n1 1\n255\n000", b"P6\n1 1\n65535\n" + bytes(6), b"P6\n2 2\n255\n" + bytes(5), b"P6\nx 1\n255\n",
         b""],
    )
    def test_bad_ppm(self, data):
        with pytest.raises(ImageFormatError):
            parse_ppm(data)

    @pytest.mark.parametrize(
        "data",
        [b"PX\n1 1\n-1.0\n" + bytes(12), b"PF\n1 1\n0\n" + bytes(12), b"PF\n1 1\n-1.0\n" + bytes(8), b"PF\n"],
    )
    def test_bad_pfm(self, data):
        with pytest.raises(ImageFormatError):
            parse_pfm(data)


class TestDomains:
    def test_parse(self):
        assert parse_domain("hdr") == ("hdr", None)
        assert parse_domain("ldr") == ("ldr", None)
        assert parse_domain("bracketed:2", 3) == ("bracketed", 2)

    @pytest.mark.parametrize("tag", ["linear", "bracketed:", "bracketed:0", "bracketed:4", "bracketed:x"])
    def test_reject(self, tag):
        with pytest.raises(ConfigError):
            parse_domain(tag, 3)

    def test_slots(self):
        plan = ExposurePlan(1.0, (0.25, 4.0))
        assert [bracket_slot(plan, j) for j in (1, 2, 3)] == [1, 0, 2]
        plan = ExposurePlan(1.0, (4.0, 0.25))
        assert [bracket_slot(plan, j) for j in (1, 2, 3)] == [1, 2, 0]


class TestGenScene:
    def test_manifest_and_rerun(self, tmp_path):
        assert run("gen-scene", "--output", tmp_path / "a", *SMALL) == 0
        d = tmp_path / "a" / "data"
        names = sorted(os.listdir(d))
        assert names == sorted([f"ldr_{i:03d}.ppm" for i in range(4)] + [f"hdr_{i:03d}.pfm" for i in range(4)]
                               + ["scene.bin", "cameras.json", "resolved_config.txt"])
        cams = json.loads((d / "cameras.json").read_text())
        assert cams["test"] == [3] and cams["train"] == [0, 1, 2] and cams["exposure"] == 5.0
        assert run("gen-scene", "--output", tmp_path / "b", *SMALL) == 0
        for n in names:
            if n != "resolved_config.txt":
                assert (d / n).read_bytes() == (tmp_path / "b" / "data" / n).read_bytes(), n

    def test_resolved_config_reproduces(self, tmp_path):
        assert run("gen-scene", "--output", tmp_path, "--seed", 4, *SMALL) == 0
        text = (tmp_path / "data" / "resolved_config.txt").read_text()
        assert text.startswith("# command: gen-scene\n")
        cfg = parse_config(text)
        assert cfg["seed"] == 4 and cfg["synthetic.n_gaussians"] == 5

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert run("gen-scene", "--output", blocker / "sub", *SMALL) == 2

    def test_bad_key(self, tmp_path):
        assert run("gen-scene", "--output", tmp_path, "--set", "synthetic.bogus=1") == 2

    def test_invalid_spec(self, tmp_path):
        assert run("gen-scene", "--output", tmp_path, "--set", "synthetic.n_cameras=1") == 2


class TestTrain:
    def test_smoke(self, trained):
        out, code, seconds = trained
        assert code == 0
        assert seconds < 60
        rows = (out / "loss.csv").read_text().splitlines()
        assert len(rows) == 51
        ck = read_checkpoint(out / "checkpoint.bin")
        assert ck.iteration == 50 and ck.extra["train_views"] == [0, 1, 2]

    def test_hdr_supervised_needs_references(self, tmp_path):
        assert run("gen-scene", "--output", tmp_path, *SMALL) == 0
        for f in (tmp_path / "data").glob("hdr_*.pfm"):
            f.unlink()
        assert run("train", "--output", tmp_path, "--mode", "hdr-supervised", "--iterations", 2, *SMALL) == 2

    def test_missing_data(self, tmp_path):
        assert run("train", "--output", tmp_path, "--iterations", 2) == 2

    def test_named_curve(self, tmp_path):
        assert run("gen-scene", "--output", tmp_path, *SMALL) == 0
        assert run("train", "--output", tmp_path, "--iterations", 1, "--crf", "sigmoid-6", *SMALL) == 0
        assert read_checkpoint(tmp_path / "checkpoint.bin").model.curve.name == "sigmoid-6"
        assert run("train", "--output", tmp_path, "--iterations", 1, "--crf", "no-such", *SMALL) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_numeric(self, tmp_path):
        assert run("gen-scene", "--output", tmp_path, *SMALL) == 0
        assert run("train", "--output", tmp_path, "--iterations", 5, "--set", "train.lr_sh=1e300", *SMALL) == 1


class TestRenderEvalFuse:
    def test_render_hdr(self, trained):
        out = trained[0]
        assert run("render", "--output", out, "--domain", "hdr") == 0
        names = sorted(os.listdir(out / "render_hdr"))
        for i in range(4):
            assert f"view_{i:03d}.pfm" in names and f"view_{i:03d}_preview.ppm" in names
        assert read_pfm(out / "render_hdr" / "view_000.pfm").shape == (32, 32, 3)

    def test_render_ldr(self, trained):
        out = trained[0]
        assert run("render", "--output", out, "--domain", "ldr", "--views", "1,2") == 0
        assert sorted(n for n in os.listdir(out / "render_ldr") if n.endswith(".ppm")) == ["view_001.ppm",
                                                                                        "view_002.ppm"]

    def test_bracketed_domains_agree_after_exposure(self, trained):
        out = trained[0]
        assert run("render", "--output", out, "--domain", "bracketed:1", "--views", "0") == 0
        assert run("render", "--output", out, "--domain", "bracketed:2", "--views", "0") == 0
        dt1 = 5.0
        dt2 = 0.25 * dt1
        a = read_pfm(out / "render_bracketed_1" / "view_000.pfm")
        b = read_pfm(out / "render_bracketed_2" / "view_000.pfm")
        # PFM stores float32, so compare at single-precision resolution
        np.testing.assert_allclose(b / dt2, a / dt1, rtol=1e-6, atol=1e-6)

    def test_unknown_domain(self, trained):
        assert run("render", "--output", trained[0], "--domain", "linear") == 2
        assert run("render", "--output", trained[0], "--domain", "bracketed:9") == 2

    def test_bad_views(self, trained):
        assert run("render", "--output", trained[0], "--views", "0,17") == 2

    def test_eval(self, trained):
        out = trained[0]
        assert run("eval", "--output", out) == 0
        rows = (out / "eval" / "report.csv").read_text().splitlines()
        assert rows[0] == "view,psnr_mu,ssim_mu" and [r.split(",")[0] for r in rows[1:]] == ["3"]
        assert (out / "eval" / "baseline" / "report.csv").exists()
        assert (out / "eval" / "view_003.ppm").exists()

    def test_eval_without_references(self, trained, tmp_path):
        out = trained[0]
        data = tmp_path / "data"
        data.mkdir()
        for f in (out / "data").iterdir():
            if not f.name.startswith("hdr_"):
                (data / f.name).write_bytes(f.read_bytes())
        assert run("eval", "--output", tmp_path, "--data", data, "--checkpoint", out / "checkpoint.bin") == 0
        assert "LDR" in (tmp_path / "eval" / "summary.txt").read_text()

    def test_fuse(self, trained):
        out = trained[0]
        assert run("fuse", "--output", out) == 0
        from hdrsplat.scene import ColorDomain, read_scene

        fused = read_scene(out / "fused_scene.bin")
        assert fused.color_domain == ColorDomain.LINEAR_HDR and len(fused) == 5

    def test_missing_checkpoint(self, tmp_path):
        assert run("render", "--output", tmp_path) == 2

    def test_corrupt_checkpoint(self, trained, tmp_path):
        bad = tmp_path / "ck.bin"
        bad.write_bytes(b"garbage")
        assert run("render", "--output", tmp_path, "--data", trained[0] / "data", "--checkpoint", bad) == 2


def test_module_entry_point():
    assert callable(cli.main)
