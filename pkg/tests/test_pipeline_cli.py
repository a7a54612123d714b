import csv
import json

import numpy as np
import pytest
import torch

from predenhance import cli
from predenhance import enhancer as E
from predenhance import predictor as P
from predenhance import quality_metrics as qm
from predenhance.pipeline import (ConfigurationError, PipelineSpec, benchmark_inference, emit_report,
                                  run_pipeline)

SMALL = dict(base_channels=8, min_channels=4, final_resolution=16)


@pytest.fixture(scope="module")
def states():
    pred = P.build_predictor(P.PredictorConfig(**SMALL), 2)
    enh = {
        "deblur_trconv": E.build_enhancer(E.EnhancerConfig(task="deblur", upsampler="transposed_conv", ngf=4)),
        "deblur_upsconv": E.build_enhancer(E.EnhancerConfig(task="deblur", ngf=4)),
        "sr": E.build_enhancer(E.EnhancerConfig(task="super_resolve", ngf=4, residual_blocks=1)),
    }
    g = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for st in [pred.generator] + [e.generator for e in enh.values()]:
            for p in st.parameters():
                p.add_(0.05 * torch.randn(p.shape, generator=g))
    return pred, enh


@pytest.fixture
def inputs():
    return np.random.default_rng(0).random((3, 5, 16, 16, 3)).astype(np.float32)


def test_plain_equals_predict(states, inputs):
    pred, _ = states
    np.testing.assert_array_equal(run_pipeline(PipelineSpec("plain", pred), inputs), P.predict(pred, inputs))


@pytest.mark.parametrize("label,scale", [("deblur_trconv", 1), ("deblur_upsconv", 1), ("sr", 4)])
def test_composition_law_and_shapes(states, inputs, label, scale):
    pred, enh = states
    out = run_pipeline(PipelineSpec(label, pred, enh[label]), inputs)
    assert out.shape == (3, 5, 16 * scale, 16 * scale, 3)
    plain = run_pipeline(PipelineSpec("plain", pred), inputs)
    for i in range(3):
        np.testing.assert_allclose(out[i], E.enhance(enh[label], plain[i]), atol=1e-6)


def test_spec_validation(states, tmp_path):
    pred, enh = states
    with pytest.raises(ConfigurationError):
        PipelineSpec("plain", pred, enh["sr"])
    with pytest.raises(ConfigurationError):
        PipelineSpec("sr", pred)
    with pytest.raises(ConfigurationError):
        PipelineSpec("bogus", pred)
    with pytest.raises(ConfigurationError, match="super_resolve"):
        run_pipeline(PipelineSpec("sr", pred, enh["deblur_upsconv"]), np.zeros((1, 5, 16, 16, 3)))
    with pytest.raises(ConfigurationError, match="transposed_conv"):
        run_pipeline(PipelineSpec("deblur_trconv", pred, enh["deblur_upsconv"]), np.zeros((1, 5, 16, 16, 3)))


def test_benchmark_single_trial(states, inputs, tmp_path):
    pred, enh = states
    csv_path = tmp_path / "timing.csv"
    r = benchmark_inference(PipelineSpec("plain", pred), inputs, trials=1, warmup=0, csv_path=csv_path)
    assert r["std_seconds"] == 0.0 and r["mean_seconds"] > 0
    benchmark_inference(PipelineSpec("sr", pred, enh["sr"]), inputs, trials=2, warmup=0, csv_path=csv_path)
    rows = list(csv.DictReader(open(csv_path)))
    assert [row["pipeline"] for row in rows] == ["plain", "sr"]
    with pytest.raises(ValueError):
        benchmark_inference(PipelineSpec("plain", pred), inputs, trials=0)


def _reports(rng):
    reps = []
    for label in ("plain", "deblur_trconv", "deblur_upsconv", "sr"):
        ref = rng.random((2, 5, 12, 12, 3))
        reps.append(qm.per_frame_report(np.clip(ref + 0.05, 0, 1), ref, label))
    return reps


def test_emit_report_files_and_determinism(tmp_path, rng, caplog):
    reps = _reports(rng)
    files = emit_report(reps, [], tmp_path / "a")
    names = sorted(p.name for p in files)
    assert names == ["metrics.csv", "metrics.json", "mse_per_step.png", "psnr_per_step.png", "ssim_per_step.png",
                     "summary.md"]
    assert "no AP reports" in caplog.text
    rows = list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))
    assert len(rows) == 4 * 5
    emit_report(reps, [], tmp_path / "b")
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with pytest.raises(ValueError):
        emit_report([], [], tmp_path / "c")


# -- command line ----------------------------------------------------------------

TINY = ["--set", "data.n_clips=4", "--set", "data.clip_length=20", "--set", "schedule.epochs_per_stage=[1,0,0,1]",
        "--set", "enhancer.deblur.epochs=1", "--set", "enhancer.sr.epochs=1", "--set", "enhancer.sr.warmup_epochs=1",
        "--set", "benchmark.trials=1", "--set", "benchmark.warmup=0"]
RECIPE = ["make-data", "train-predictor", "train-enhancer --kind deblur_trconv",
          "train-enhancer --kind deblur_upsconv", "train-enhancer --kind sr", "predict", "eval-metrics",
          "eval-detection", "benchmark", "report"]


def run(out, *args):
    return cli.main(["--out-dir", str(out), *TINY, *args])


def test_no_args_is_usage_error(capsys):
    assert cli.main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_command_and_flag():
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["make-data", "--bogus"])
    assert e.value.code == 2


def test_known_errors_exit_1(tmp_path, capsys):
    assert cli.main(["--out-dir", str(tmp_path), "train-predictor"]) == 1
    assert "make-data" in capsys.readouterr().err
    assert cli.main(["--out-dir", str(tmp_path), "--set", "nope.key=1", "make-data"]) == 1


def test_make_data_deterministic(tmp_path):
    assert run(tmp_path / "a", "make-data") == 0
    assert run(tmp_path / "b", "make-data") == 0
    assert (tmp_path / "a/data/dataset.npz").read_bytes() == (tmp_path / "b/data/dataset.npz").read_bytes()
    assert run(tmp_path / "c", "--seed", "1", "make-data") == 0
    assert (tmp_path / "a/data/dataset.npz").read_bytes() != (tmp_path / "c/data/dataset.npz").read_bytes()


def test_config_file_and_override(tmp_path):
    from predenhance import config as C
    f = tmp_path / "c.yaml"
    f.write_text("data:\n  n_clips: 7\n")
    cfg = C.load_config(f, ["predictor.lr=0.5", "schedule.epochs_per_stage=[1,2,3,4]"], seed=9)
    assert cfg["data"]["n_clips"] == 7 and cfg["predictor"]["lr"] == 0.5 and cfg["seed"] == 9
    assert C.schedule(cfg, C.predictor_config(cfg)).stage_epochs == (1, 2, 3, 4)
    with pytest.raises(ValueError):
        C.apply_override(cfg, "no-equals-sign")


@pytest.fixture(scope="module")
def recipe(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    for step in RECIPE:
        assert run(out, *step.split()) == 0, step
    return out


@pytest.mark.slow
def test_toy_recipe_produces_all_outputs(recipe):
    report = sorted(p.name for p in (recipe / "report").iterdir())
    assert report == ["ap.csv", "ap_disk_per_step.png", "ap_square_per_step.png", "manifest_report.json",
                      "metrics.csv", "metrics.json", "mse_per_step.png", "psnr_per_step.png",
                      "ssim_per_step.png", "summary.md"]
    for sub in ("data", "predictor", "enhancers/sr", "enhancers/deblur_trconv", "enhancers/deblur_upsconv",
                "predictions", "eval"):
        assert list((recipe / sub).glob("manifest_*.json")), sub
    timing = list(csv.DictReader(open(recipe / "eval" / "timing.csv")))
    assert [r["pipeline"] for r in timing] == ["plain", "deblur_trconv", "deblur_upsconv", "sr"]
    ap_rows = list(csv.DictReader(open(recipe / "eval" / "ap.csv")))
    assert len(ap_rows) == 4 * 2 * 5
    manifest = json.loads((recipe / "predictor" / "manifest_train_predictor.json").read_text())
    assert manifest["seeds"] == {"seed": 0} and manifest["checkpoints"]
    assert len(list((recipe / "predictor").glob("stage*.pt"))) == 4


@pytest.mark.slow
def test_seeded_evaluation_identical(recipe, tmp_path):
    before = (recipe / "eval" / "metrics.csv").read_bytes(), (recipe / "eval" / "ap.csv").read_bytes()
    assert run(recipe, "eval-metrics") == 0
    assert run(recipe, "eval-detection") == 0
    assert ((recipe / "eval" / "metrics.csv").read_bytes(), (recipe / "eval" / "ap.csv").read_bytes()) == before


@pytest.mark.slow
def test_end_to_end_rerun_identical_metrics(tmp_path):
    csvs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for step in ("make-data", "train-predictor", "train-enhancer --kind deblur_upsconv",
                     "predict --pipeline plain,deblur_upsconv", "eval-metrics"):
            assert run(out, *step.split()) == 0
        csvs.append((out / "eval" / "metrics.csv").read_bytes())
    assert csvs[0] == csvs[1]


def test_enhance_subcommand(recipe, tmp_path):
    out = tmp_path / "enh.npz"
    assert cli.main(["--out-dir", str(recipe), "enhance", "--input", str(recipe / "predictions" / "plain.npz"),
                     "--enhancer", str(recipe / "enhancers" / "deblur_upsconv" / "enhancer.pt"),
                     "--output", str(out)]) == 0
    from predenhance import datakit as dk
    a = dk.load_packed(out)["frames"]
    b = dk.load_packed(recipe / "predictions" / "deblur_upsconv.npz")["frames"]
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert (tmp_path / "manifest_enhance.json").exists()


def test_external_detections_via_cli(recipe, tmp_path):
    from predenhance import detection_eval as det
    path = det.write_detections(tmp_path / "d.jsonl", {"real/00000/1": []})
    assert cli.main(["--out-dir", str(recipe), "eval-detection", "--detections", str(path)]) == 1
