import subprocess
import sys

import numpy as np
import pytest

from carafe.carafe import CarafeConfig, CarafeParams
from carafe.cli import golden_cost_csv, main
from carafe.tensor import make_rng, write_tensor
from carafe.viz import decode_heatmap, read_pnm


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def body(out):
    return "".join(line + "\n" for line in out.splitlines() if not line.startswith("#"))


class TestCostTable:
    def test_defaults_match_golden(self, capsys, tmp_path):
        path = tmp_path / "cost.csv"
        code, out, _ = run(capsys, "cost-table", "--out", str(path))
        assert code == 0
        assert path.read_bytes() == golden_cost_csv().encode()
        assert body(out) == golden_cost_csv()
        assert "CARAFE,199496,199k,74148,74k" in out

    def test_echoes_config(self, capsys):
        _, out, _ = run(capsys, "cost-table")
        assert "# channels=256" in out and "# sigma=2" in out

    def test_nearest_only(self, capsys):
        _, out, _ = run(capsys, "cost-table", "--kinds", "nearest")
        assert body(out).splitlines()[1:] == ["Nearest,0,0,0,0"]

    def test_minimal_carafe(self, capsys):
        code, out, _ = run(capsys, "cost-table", "--channels", "1", "--sigma", "1", "--kinds", "carafe",
                           "--k-up", "1", "--k-encoder", "1", "--c-mid", "1")
        assert code == 0
        assert body(out).splitlines()[1] == "CARAFE,10,10,4,4"

    def test_bad_kind(self, capsys):
        code, _, err = run(capsys, "cost-table", "--kinds", "bicubic")
        assert code == 2 and "bicubic" in err

    def test_bad_config(self, capsys):
        assert run(capsys, "cost-table", "--k-up", "4")[0] == 2

    def test_unknown_flag(self, capsys):
        assert run(capsys, "cost-table", "--frobnicate")[0] == 2

    def test_no_subcommand(self, capsys):
        assert run(capsys)[0] == 2


class TestGradcheck:
    args = ("gradcheck", "--seeds", "1", "--max-entries", "6")

    def test_passes(self, capsys):
        code, out, _ = run(capsys, *self.args)
        assert code == 0 and "FAIL" not in out

    def test_zero_tolerance_fails(self, capsys):
        code, out, _ = run(capsys, *self.args, "--tolerance", "0")
        assert code == 1 and "FAIL" in out and "rel_err=" in out

    def test_deterministic(self, capsys):
        assert run(capsys, *self.args)[1] == run(capsys, *self.args)[1]

    def test_bad_configs(self, capsys):
        assert run(capsys, *self.args, "--configs", "2,3")[0] == 2
        assert run(capsys, *self.args, "--configs", "2,4,3")[0] == 2


class TestTrainCompare:
    small = ("--epochs", "1", "--n-train", "4", "--n-eval", "2", "--image-size", "8",
             "--channels", "4", "--c-mid", "4")

    def test_one_epoch_nearest(self, capsys, tmp_path):
        path = tmp_path / "r.csv"
        code, out, _ = run(capsys, "compare", "--kinds", "nearest", "--seeds", "2", *self.small,
                           "--out", str(path))
        assert code == 0 and "nearest" in out
        rows = [line for line in path.read_text().splitlines() if not line.startswith("#")]
        assert rows[0] == "kind,seed,epoch,train_loss,eval_loss"
        assert [r.split(",")[:3] for r in rows[1:]] == [["nearest", "0", "1"], ["nearest", "1", "1"]]

    def test_repeat_identical(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(capsys, "compare", "--kinds", "carafe", "--seeds", "1", *self.small, "--out", str(a))
        run(capsys, "compare", "--kinds", "carafe", "--seeds", "1", *self.small, "--out", str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_timing_column(self, capsys, tmp_path):
        path = tmp_path / "t.csv"
        run(capsys, "train", "--kind", "bilinear", *self.small, "--timing", "--out", str(path))
        assert path.read_text().splitlines()[-2].endswith("wall_time")

    def test_env_seed(self, capsys, monkeypatch, tmp_path):
        monkeypatch.setenv("CARAFE_SEED", "7")
        code, out, _ = run(capsys, "train", "--kind", "nearest", *self.small)
        assert code == 0 and "# seed=7" in out
        monkeypatch.setenv("CARAFE_SEED", "x")
        assert run(capsys, "train", *self.small)[0] == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit(self, capsys):
        code, _, err = run(capsys, "train", "--kind", "nearest_conv", *self.small,
                           "--lr", "1e9", "--clip-norm", "0", "--epochs", "3")
        assert code == 1 and "diverged" in err

    def test_save_params(self, capsys, tmp_path):
        path = tmp_path / "p.ctns"
        code, _, _ = run(capsys, "train", "--kind", "carafe", *self.small, "--save-params", str(path))
        assert code == 0
        params, cfg = CarafeParams.load(path)
        assert cfg.in_channels == 4 and params.encoder_weight.shape == (36, 4, 3, 3)
        assert run(capsys, "train", "--kind", "nearest", *self.small,
                   "--save-params", str(path))[0] == 2


class TestVisualize:
    def test_files_valid_and_sum_to_one(self, capsys, tmp_path):
        prefix = str(tmp_path / "v")
        code, out, _ = run(capsys, "visualize", "--out-prefix", prefix, "--at", "3,5",
                           "--at", "0,0", "--level-count", "2")
        assert code == 0
        for y, x in [(3, 5), (0, 0)]:
            kpix, kmeta = read_pnm(f"{prefix}_kernel_{y}_{x}.pgm")
            assert kpix.ndim == 2 and kpix.max() == 255
            kernel = decode_heatmap(f"{prefix}_kernel_{y}_{x}.pgm")
            assert kernel.shape == (5, 5)
            assert abs(kernel.sum() - 1) <= 25 / 255
            apix, _ = read_pnm(f"{prefix}_accum_{y}_{x}.ppm")
            assert apix.shape == (8 * 4, 8 * 4, 3)
        with open(f"{prefix}_kernel_3_5.pgm", "rb") as f:
            assert f.read(2) == b"P5"
        with open(f"{prefix}_accum_3_5.ppm", "rb") as f:
            assert f.read(2) == b"P6"

    def test_interior_accumulated_sums_to_one(self, capsys, tmp_path):
        prefix = str(tmp_path / "a")
        run(capsys, "visualize", "--out-prefix", prefix, "--at", "16,16", "--level-count", "2",
            "--k-up", "3")
        acc = decode_heatmap(f"{prefix}_accum_16_16.ppm")
        assert acc.shape == (8, 8)
        assert abs(acc.sum() - 1) <= acc.size / 255

    def test_zero_encoder_uniform(self, capsys, tmp_path):
        cfg = CarafeConfig(2, k_up=3, k_encoder=3, c_mid=2)
        params = CarafeParams.zeros(cfg)
        params.compressor_weight[:] = 1.0
        params.save(tmp_path / "p.ctns", cfg)
        write_tensor(tmp_path / "x.ctns", make_rng(0).normal(size=(2, 4, 4)))
        prefix = str(tmp_path / "z")
        code, _, _ = run(capsys, "visualize", "--params", str(tmp_path / "p.ctns"),
                         "--input", str(tmp_path / "x.ctns"), "--out-prefix", prefix, "--at", "2,3")
        assert code == 0
        pix, meta = read_pnm(f"{prefix}_kernel_2_3.pgm")
        assert np.all(pix == 255)
        assert float(meta["max_weight"]) == pytest.approx(1 / 9)

    def test_k_up_one(self, capsys, tmp_path):
        prefix = str(tmp_path / "k")
        run(capsys, "visualize", "--out-prefix", prefix, "--at", "1,1", "--k-up", "1")
        kernel = decode_heatmap(f"{prefix}_kernel_1_1.pgm")
        assert kernel.shape == (1, 1) and kernel[0, 0] == 1.0

    def test_out_of_range(self, capsys, tmp_path):
        code, _, err = run(capsys, "visualize", "--out-prefix", str(tmp_path / "o"), "--at", "16,0")
        assert code == 2 and "outside" in err
        assert run(capsys, "visualize", "--at", "a,b")[0] == 2

    def test_wrong_input_channels(self, capsys, tmp_path):
        write_tensor(tmp_path / "x.ctns", np.ones((3, 4, 4)))
        assert run(capsys, "visualize", "--input", str(tmp_path / "x.ctns"),
                   "--out-prefix", str(tmp_path / "w"))[0] == 2


class TestSelftest:
    def test_passes_and_repeats(self, capsys):
        code, out, _ = run(capsys, "selftest", "--seeds", "3")
        assert code == 0 and "FAIL" not in out
        assert run(capsys, "selftest", "--seeds", "3")[1] == out

    def test_corrupted_golden(self, capsys, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text(golden_cost_csv().replace("199k", "200k"))
        code, out, _ = run(capsys, "selftest", "--seeds", "1", "--golden", str(path))
        assert code == 1 and "FAIL  cost golden values" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "carafe", "cost-table", "--kinds", "deconv"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "Deconv,1180160,1.2M,590080,590k" in proc.stdout
