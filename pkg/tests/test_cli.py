import numpy as np
import pytest
import yaml

from bayesseg.cli import main
from bayesseg.core import DatasetManifest, Volume3D, read_volume, write_volume
from bayesseg.synthdata import PhantomConfig, generate_phantom


def _small_dataset(tmp_path, cases=2):
    out = str(tmp_path / "data")
    rc = main(["synth", "--cases", str(cases), "--size", "32,32,32",
               "--classes", "5", "--seed", "11", "--out", out])
    assert rc == 0
    return out


class TestSynth:
    def test_writes_dataset(self, tmp_path, capsys):
        out = _small_dataset(tmp_path)
        m = DatasetManifest.load(f"{out}/manifest.yaml")
        assert len(m.cases) == 2
        assert m.n_classes == 5

    def test_too_few_classes(self, tmp_path):
        rc = main(["synth", "--cases", "1", "--classes", "3",
                   "--out", str(tmp_path / "x")])
        assert rc == 1


class TestUsageErrors:
    def test_unknown_flag_exit_2(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["evaluate", "--bogus"])
        assert e.value.code == 2

    def test_missing_subcommand_exit_2(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_runtime_error_exit_1(self, tmp_path):
        rc = main(["evaluate", "--pred", str(tmp_path / "no"),
                   "--truth", str(tmp_path / "no"), "--classes", "2",
                   "--out", str(tmp_path / "rep")])
        assert rc == 1


class TestEvaluate:
    def test_identical_maps_all_ones(self, tmp_path, capsys):
        _, lab = generate_phantom(
            PhantomConfig(seed=2, size=(32, 32, 32), n_structures=2))
        vol = Volume3D(lab.labels.astype(np.uint8))
        p = str(tmp_path / "map")
        write_volume(vol, p)
        rc = main(["evaluate", "--pred", p, "--truth", p, "--classes", "5",
                   "--out", str(tmp_path / "rep")])
        assert rc == 0
        doc = yaml.safe_load(open(tmp_path / "rep_dice.yaml"))
        assert doc["cells"]
        assert all(rec["value"] == 1.0 for rec in doc["cells"])


class TestTrainInfer:
    def test_train_then_infer(self, tmp_path):
        data = _small_dataset(tmp_path, cases=1)
        ckpt = str(tmp_path / "ckpt")
        rc = main(["train", "--manifest", f"{data}/manifest.yaml",
                   "--out", ckpt, "--size", "32,32", "--depth", "2",
                   "--base-channels", "4", "--iterations", "4",
                   "--epochs", "1", "--no-augment"])
        assert rc == 0
        out = str(tmp_path / "pred")
        rc = main(["infer", "--checkpoint", ckpt,
                   "--volume", f"{data}/case_000_image",
                   "--out", out, "--t-mc", "2", "--lcc"])
        assert rc == 0
        labels = read_volume(f"{out}/labels")
        assert labels.voxels.shape == (32, 32, 32)
        var = read_volume(f"{out}/variance_summed")
        assert var.voxels.dtype == np.float32
        report = yaml.safe_load(open(f"{out}/report.yaml"))
        assert report["cases"][0]["case_id"] == "volume"
        assert report["cases"][0]["structures"]


class TestFitPdc:
    def test_fit_from_yaml(self, tmp_path):
        obs = [{"psv": float(p), "dice": float(-40.0 * p + 0.9)}
               for p in np.linspace(1e-4, 5e-3, 8)]
        src = tmp_path / "obs.yaml"
        src.write_text(yaml.safe_dump(obs))
        out = tmp_path / "model.yaml"
        rc = main(["fit-pdc", "--observations", str(src), "--out", str(out)])
        assert rc == 0
        doc = yaml.safe_load(open(out))
        assert doc["alpha"] == pytest.approx(-40.0, abs=1e-6)
        assert doc["beta"] == pytest.approx(0.9, abs=1e-6)


class TestAlSim:
    def _run(self, data, out, extra=()):
        return main(["al-sim", "--data", data, "--steps", "2",
                     "--strategy", "semi", "--tau", "0.05",
                     "--test-cases", "1", "--seed", "4", "--t-mc", "2",
                     "--iterations", "4", "--epochs", "1",
                     "--depth", "2", "--base-channels", "4",
                     "--out", out, *extra])

    def test_deterministic_history(self, tmp_path):
        data = _small_dataset(tmp_path, cases=3)
        h1, h2 = str(tmp_path / "h1.yaml"), str(tmp_path / "h2.yaml")
        assert self._run(data, h1) == 0
        assert self._run(data, h2) == 0
        assert open(h1, "rb").read() == open(h2, "rb").read()

    def test_history_contents_and_budget_replay(self, tmp_path):
        data = _small_dataset(tmp_path, cases=3)
        h_semi = str(tmp_path / "semi.yaml")
        assert self._run(data, h_semi) == 0
        steps = yaml.safe_load(open(h_semi))["steps"]
        assert [s["step"] for s in steps] == [1, 2]
        assert all("mean_dice" in s and "queried_counts" in s for s in steps)
        # random run consuming the semi budget queries identical pixel counts
        h_rand = str(tmp_path / "rand.yaml")
        rc = main(["al-sim", "--data", data, "--steps", "2",
                   "--strategy", "random", "--tau", "0.05",
                   "--test-cases", "1", "--seed", "4", "--t-mc", "2",
                   "--iterations", "4", "--epochs", "1",
                   "--depth", "2", "--base-channels", "4",
                   "--budget-from", h_semi, "--out", h_rand])
        assert rc == 0
        rand_steps = yaml.safe_load(open(h_rand))["steps"]
        for s_semi, s_rand in zip(steps, rand_steps):
            assert (sum(s_rand["queried_counts"])
                    == sum(s_semi["queried_counts"]))


class TestPlotCurves:
    def test_writes_png(self, tmp_path):
        from bayesseg.active import write_history
        hist = [{"step": i, "mean_dice": 0.5 + 0.1 * i} for i in range(1, 4)]
        h = str(tmp_path / "h.yaml")
        write_history(hist, h)
        out = str(tmp_path / "curves.png")
        assert main(["plot-curves", "--history", h, "--out", out]) == 0
        assert open(out, "rb").read()[:4] == b"\x89PNG"
