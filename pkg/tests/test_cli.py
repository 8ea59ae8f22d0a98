import io
import os

import numpy as np
import pytest

from sbt_lab import backbone as bb
from sbt_lab import cli
from sbt_lab.errors import NumericError

TINY_CFG = """
name = tiny
embed_kernel = 4
embed_stride = 4
inter_stage = merge
pe = rel
pattern = urm
head = mixmlp
template_size = 32
search_size = 64

[stage1]
operator = mlp-local
channels = 8
blocks = 1

[stage2]
operator = mlp-local
channels = 8
blocks = 1

[stage3]
operator = vg
channels = 16
blocks = 2
heads = 2
"""


def run(argv):
    out = io.StringIO()
    code = cli.run(argv, out=out)
    return code, out.getvalue()


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return str(p)


@pytest.fixture
def dataset(tmp_path):
    d = str(tmp_path / "data")
    code, _ = run(["gen-data", "--out", d, "--sequences", "2",
                   "--length", "4", "--frame-size", "96", "--seed", "1"])
    assert code == 0
    return d


class TestHelpAndErrors:
    SUBCOMMANDS = ("variant-info", "flops", "selftest", "gen-data", "train",
                   "pretrain-mim", "track", "eval")

    def test_top_level_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.run(["--help"])
        assert e.value.code == 0

    @pytest.mark.parametrize("sub", SUBCOMMANDS)
    def test_subcommand_help_exits_zero(self, sub, capsys):
        with pytest.raises(SystemExit) as e:
            cli.run([sub, "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        assert "--seed" in text

    def test_unknown_subcommand_exit_one(self):
        code, _ = run(["frobnicate"])
        assert code == 1

    def test_unknown_flag_exit_one(self):
        code, _ = run(["selftest", "--frobnicate"])
        assert code == 1

    def test_no_subcommand_exit_one(self):
        code, _ = run([])
        assert code == 1

    def test_missing_required_flag_exit_one(self):
        code, _ = run(["gen-data"])
        assert code == 1


class TestVariantInfo:
    def test_reference_comparison(self):
        code, text = run(["variant-info", "--variant", "supersbt-light"])
        assert code == 0
        assert "variant supersbt-light" in text
        assert "reference_params_m 21.500000" in text
        params = int(text.split("params ")[1].split("\n")[0])
        assert abs(params / 1e6 - 21.5) / 21.5 < 0.10

    def test_repeat_runs_identical(self):
        a = run(["variant-info", "--variant", "hi-sbt"])
        b = run(["variant-info", "--variant", "hi-sbt"])
        assert a == b

    def test_variant_file_overrides_variant(self, tiny_cfg):
        code, text = run(["variant-info", "--variant", "supersbt-base",
                          "--variant-file", tiny_cfg])
        assert code == 0
        assert "variant tiny" in text

    def test_bad_variant_file_exit_one(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("name = x\nunknown_key = 1\n")
        code, _ = run(["variant-info", "--variant-file", str(p)])
        assert code == 1


class TestFlops:
    def test_breakdown_sums_to_total(self, tiny_cfg):
        code, text = run(["flops", "--variant-file", tiny_cfg])
        assert code == 0
        layer_sum = sum(
            int(ln.split("flops=")[1].split(" ")[0])
            for ln in text.splitlines() if ln.startswith("layer ")
        )
        total = int(text.split("total flops=")[1].split(" ")[0])
        assert layer_sum == total


class TestSelftest:
    def test_fresh_build_passes(self):
        code, text = run(["selftest"])
        assert code == 0
        assert "selftest all pass" in text
        assert "FAIL" not in text


class TestGenData:
    def test_byte_identical_repeats(self, tmp_path):
        outs = []
        for sub in ("a", "b"):
            d = str(tmp_path / sub)
            code, _ = run(["gen-data", "--out", d, "--sequences", "1",
                           "--length", "3", "--frame-size", "64",
                           "--seed", "7"])
            assert code == 0
            outs.append(d)
        for name in sorted(os.listdir(os.path.join(outs[0], "seq_7"))):
            a = open(os.path.join(outs[0], "seq_7", name), "rb").read()
            b = open(os.path.join(outs[1], "seq_7", name), "rb").read()
            assert a == b

    def test_seed_changes_output(self, tmp_path):
        frames = []
        for seed in ("1", "2"):
            d = str(tmp_path / seed)
            run(["gen-data", "--out", d, "--sequences", "1", "--length", "2",
                 "--frame-size", "64", "--seed", seed])
            frames.append(
                open(os.path.join(d, f"seq_{seed}", "frame_0.ppm"),
                     "rb").read())
        assert frames[0] != frames[1]


class TestTrainAndEval:
    def test_train_writes_loadable_checkpoint(self, tiny_cfg, dataset,
                                              tmp_path):
        ckpt = str(tmp_path / "m.sbtc")
        code, text = run(["train", "--data", dataset, "--variant-file",
                          tiny_cfg, "--steps", "2", "--out", ckpt,
                          "--log-every", "1"])
        assert code == 0
        assert "step 0 total=" in text and "saved" in text
        model = bb.build_variant(bb.load_variant_file(tiny_cfg))
        bb.load_checkpoint(ckpt, model)

    def test_train_byte_identical_repeats(self, tiny_cfg, dataset, tmp_path):
        blobs = []
        for sub in ("a.sbtc", "b.sbtc"):
            ckpt = str(tmp_path / sub)
            code, _ = run(["train", "--data", dataset, "--variant-file",
                           tiny_cfg, "--steps", "2", "--out", ckpt,
                           "--seed", "3"])
            assert code == 0
            blobs.append(open(ckpt, "rb").read())
        assert blobs[0] == blobs[1]

    def test_eval_jobs_equivalent(self, tiny_cfg, dataset):
        base = ["eval", "--data", dataset, "--variant-file", tiny_cfg]
        a = run(base + ["--jobs", "1"])
        b = run(base + ["--jobs", "2"])
        assert a[0] == 0 and a == b
        assert "aggregate sequences=2" in a[1]

    def test_numeric_failure_exit_two(self, tiny_cfg, dataset, tmp_path,
                                      monkeypatch):
        def boom(*a, **k):
            raise NumericError("non-finite loss at step 0")

        monkeypatch.setattr(cli.hn, "train_loop", boom)
        code, _ = run(["train", "--data", dataset, "--variant-file", tiny_cfg,
                       "--steps", "1", "--out", str(tmp_path / "x.sbtc")])
        assert code == 2


class TestTrack:
    def test_box_csv_schema_and_determinism(self, tiny_cfg, dataset,
                                            tmp_path):
        video = os.path.join(dataset, "seq_1")
        outs = []
        for sub in ("a.csv", "b.csv"):
            p = str(tmp_path / sub)
            code, text = run(["track", "--video", video, "--init",
                              "30,30,20,20", "--variant-file", tiny_cfg,
                              "--out", p])
            assert code == 0
            outs.append(open(p).read())
            lines = text.strip().split("\n")
            assert len(lines) == 4  # 4 frames: init + 3 tracked
            assert lines[0] == "0,30.000000,30.000000,20.000000,20.000000"
            for i, ln in enumerate(lines):
                parts = ln.split(",")
                assert parts[0] == str(i) and len(parts) == 5
        assert outs[0] == outs[1]

    def test_out_of_frame_init_exit_one(self, tiny_cfg, dataset):
        video = os.path.join(dataset, "seq_1")
        code, _ = run(["track", "--video", video, "--init", "300,300,20,20",
                       "--variant-file", tiny_cfg])
        assert code == 1

    def test_malformed_init_exit_one(self, tiny_cfg, dataset):
        video = os.path.join(dataset, "seq_1")
        for bad in ("30,30,20", "a,b,c,d"):
            code, _ = run(["track", "--video", video, "--init", bad,
                           "--variant-file", tiny_cfg])
            assert code == 1

    def test_missing_video_exit_one(self, tiny_cfg, tmp_path):
        code, _ = run(["track", "--video", str(tmp_path / "nope"), "--init",
                       "1,1,2,2", "--variant-file", tiny_cfg])
        assert code == 1


class TestPretrainMim:
    def test_short_run_saves_checkpoint(self, tiny_cfg, dataset, tmp_path):
        ckpt = str(tmp_path / "mim.sbtc")
        code, text = run(["pretrain-mim", "--data", dataset, "--variant-file",
                          tiny_cfg, "--steps", "2", "--out", ckpt,
                          "--log-every", "1"])
        assert code == 0
        assert "step 0 recon=" in text
        model = bb.build_variant(bb.load_variant_file(tiny_cfg))
        bb.load_checkpoint(ckpt, model)

    def test_bad_mask_ratio_exit_one(self, tiny_cfg, dataset, tmp_path):
        code, _ = run(["pretrain-mim", "--data", dataset, "--variant-file",
                       tiny_cfg, "--steps", "1", "--mask-ratio", "1.5",
                       "--out", str(tmp_path / "x.sbtc")])
        assert code == 1
