import numpy as np
import pytest
import torch

from predenhance import predictor as P

SMALL = dict(base_channels=8, min_channels=4, final_resolution=16, batch_size=4)


def _perturbed(stage, seed=0, **kw):
    """Predictor at ``stage`` with all weights randomised (to_rgb starts at zero)."""
    state = P.build_predictor(P.PredictorConfig(seed=seed, **{**SMALL, **kw}), stage)
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for p in state.generator.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g))
    return state


def _inputs(res, n=2, seed=0):
    return np.random.default_rng(seed).random((n, 5, res, res, 3)).astype(np.float32)


def test_shapes_per_stage():
    cfg = P.PredictorConfig(**{**SMALL, "final_resolution": 32})
    for stage, res in enumerate(cfg.ladder):
        state = P.build_predictor(cfg, stage)
        out = P.predict(state, _inputs(res, 1)[0])
        assert out.shape == (5, res, res, 3)
    assert cfg.ladder == (4, 8, 16, 32)


def test_same_seed_same_weights():
    a = P.build_predictor(P.PredictorConfig(seed=3, **SMALL), 0)
    b = P.build_predictor(P.PredictorConfig(seed=3, **SMALL), 0)
    for (ka, va), (kb, vb) in zip(a.generator.state_dict().items(), b.generator.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_bad_stage_and_resolution():
    cfg = P.PredictorConfig(**SMALL)
    with pytest.raises(ValueError):
        P.build_predictor(cfg, 5)
    state = P.build_predictor(cfg, 1)
    with pytest.raises(ValueError):
        P.predict(state, _inputs(4))
    with pytest.raises(ValueError):
        P.forward_blended(state, _inputs(8), 1.5)


def test_predict_deterministic():
    state = _perturbed(2)
    x = _inputs(16)
    np.testing.assert_array_equal(P.predict(state, x), P.predict(state, x))


@pytest.mark.parametrize("stage", [1, 2])  # 4->8 and 8->16
def test_fade_in_endpoints_and_linearity(stage):
    state = _perturbed(stage)
    res = state.resolution
    x = _inputs(res)
    # oracle for alpha=0: a separately built previous-stage predictor with the same weights,
    # fed 2x2-averaged inputs, then nearest-neighbour upsampled with numpy
    prev = P.build_predictor(state.config, stage - 1)
    prev.generator.load_state_dict(state.generator.state_dict())
    low = x.reshape(2, 5, res // 2, 2, res // 2, 2, 3).mean(axis=(3, 5))
    expected0 = P.predict(prev, low).repeat(2, axis=2).repeat(2, axis=3)
    out0 = P.to_numpy(P.forward_blended(state, x, 0.0))
    out1 = P.to_numpy(P.forward_blended(state, x, 1.0))
    assert np.abs(out0 - expected0).max() < 1e-5
    state.alpha = 1.0
    assert np.abs(out1 - P.predict(state, x)).max() < 1e-5
    assert np.abs(out0 - out1).max() > 1e-3  # the endpoints really differ
    for a in (0.25, 0.5, 0.8):
        mid = P.to_numpy(P.forward_blended(state, x, a))
        assert np.abs(mid - ((1 - a) * out0 + a * out1)).max() < 1e-5


def test_stage0_has_no_fade():
    with pytest.raises(ValueError):
        P.forward_blended(_perturbed(0), _inputs(4), 0.5)


def test_checkpoint_round_trip_bitwise(tmp_path):
    state = _perturbed(2, seed=4)
    x = _inputs(16, seed=1)
    before = P.predict(state, x)
    state.save(tmp_path / "p.pt")
    after = P.predict(P.load_predictor(tmp_path / "p.pt"), x)
    assert before.tobytes() == after.tobytes()


def _toy_train(n=8, res=16, static=False, seed=0):
    rng = np.random.default_rng(seed)
    frames = rng.random((n, 1, res, res, 3)).astype(np.float32)
    if static:
        return np.repeat(frames, 5, axis=1), np.repeat(frames, 5, axis=1)
    seq = np.repeat(frames, 10, axis=1)
    return seq[:, :5], seq[:, 5:]


def test_zero_epochs_is_noop(tmp_path):
    state = P.build_predictor(P.PredictorConfig(**SMALL), 0)
    before = {k: v.clone() for k, v in state.generator.state_dict().items()}
    xi, xt = _toy_train()
    sched = P.ProgressiveSchedule(ladder=state.config.ladder, epochs_per_stage=0)
    P.train_predictor(state, xi, xt, sched, out_dir=tmp_path)
    for k, v in state.generator.state_dict().items():
        assert torch.equal(v, before[k])


def test_one_checkpoint_per_stage_and_monotone_stages(tmp_path):
    state = P.build_predictor(P.PredictorConfig(**SMALL), 0)
    xi, xt = _toy_train()
    rows = []
    sched = P.ProgressiveSchedule(ladder=state.config.ladder, epochs_per_stage=(1, 1, 1))
    state, log = P.train_predictor(state, xi, xt, sched, out_dir=tmp_path, progress=rows.append)
    assert sorted(p.name for p in tmp_path.glob("stage*.pt")) == ["stage0_4px.pt", "stage1_8px.pt", "stage2_16px.pt"]
    stages = [r["stage"] for r in rows]
    assert stages == sorted(stages) == [0, 1, 2]
    assert (tmp_path / "train_log.csv").read_text().count("\n") == 4
    assert state.stage == 2 and state.alpha == 1.0


def test_empty_split_rejected():
    state = P.build_predictor(P.PredictorConfig(**SMALL), 0)
    with pytest.raises(ValueError):
        P.train_predictor(state, np.zeros((0, 5, 16, 16, 3)), np.zeros((0, 5, 16, 16, 3)))


def test_nonfinite_loss_aborts_with_checkpoint(tmp_path):
    state = P.build_predictor(P.PredictorConfig(**SMALL), 0)
    with torch.no_grad():
        state.discriminator.head.bias.fill_(float("nan"))
    xi, xt = _toy_train()
    with pytest.raises(P.L.NumericalFailure):
        P.train_predictor(state, xi, xt, P.ProgressiveSchedule(ladder=state.config.ladder, epochs_per_stage=1),
                          out_dir=tmp_path)
    assert (tmp_path / "diverged.pt").exists()


def test_static_clip_prediction_close_to_copy():
    cfg = P.PredictorConfig(**{**SMALL, "final_resolution": 8})
    state = P.build_predictor(cfg, 0)
    xi, xt = _toy_train(n=8, res=8, static=True)
    state, _ = P.train_predictor(state, xi, xt, P.ProgressiveSchedule(ladder=cfg.ladder, epochs_per_stage=2))
    pred = P.predict(state, xi)
    copy = P.copy_last_baseline(xi, 5)  # exact on static data
    assert np.mean((pred - xt) ** 2) < np.mean((copy - xt) ** 2) + 1e-3
