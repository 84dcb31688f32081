import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from genprop.backbone import VideoDenoiser
from genprop.losses import LossWeights
from genprop.trainer import (
    ConfigMismatchError,
    CorruptCheckpointError,
    PretrainDataSource,
    SceneDataSource,
    TrainConfig,
    clip_gradients,
    derive_seed,
    ema_model,
    ema_update,
    global_grad_norm,
    init_backbone_state,
    init_prop_state,
    load_checkpoint,
    lr_at,
    parameter_checksums,
    save_checkpoint,
    train_loop,
    train_step,
)

from conftest import smoke_model_config


def tiny_config(**overrides):
    base = dict(total_steps=50, warmup_steps=5, batch=2, seed=0, ema_decay=0.99)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture()
def prop_state(smoke_backbone):
    return init_prop_state(smoke_backbone, tiny_config())


class TestLrSchedule:
    def test_step_zero_is_zero(self):
        assert lr_at(0, tiny_config()) == 0.0

    def test_warmup_end_hits_base_rate(self):
        cfg = tiny_config()
        assert lr_at(cfg.warmup_steps, cfg) == pytest.approx(5e-5)

    def test_decay_midpoint_closed_form(self):
        cfg = TrainConfig(total_steps=1000, warmup_steps=100, seed=0)
        mid = (cfg.warmup_steps + cfg.total_steps) // 2
        assert lr_at(mid, cfg) == pytest.approx(cfg.lr_base * 0.5, rel=1e-9)
        assert lr_at(cfg.total_steps, cfg) == pytest.approx(0.0, abs=1e-20)

    def test_out_of_range(self):
        cfg = tiny_config()
        with pytest.raises(ValueError):
            lr_at(-1, cfg)
        with pytest.raises(ValueError):
            lr_at(cfg.total_steps + 1, cfg)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(10, 500), st.integers(1, 9))
    def test_continuous_at_warmup_junction(self, total, warm_tenth):
        warmup = max(1, total * warm_tenth // 10)
        if warmup >= total:
            return
        cfg = TrainConfig(total_steps=total, warmup_steps=warmup, seed=0)
        left = lr_at(warmup - 1, cfg)
        mid = lr_at(warmup, cfg)
        right = lr_at(min(warmup + 1, total), cfg)
        assert left <= mid + 1e-12
        assert abs(mid - cfg.lr_base) < 1e-12
        assert right <= mid + 1e-12


class TestClipGradients:
    def test_zero_gradients_unchanged(self):
        grads = [torch.zeros(3, 3)]
        out = clip_gradients(grads, 1e-3)
        assert torch.equal(out[0], grads[0])

    def test_boundary_inclusive(self):
        g = torch.zeros(4, dtype=torch.float64)
        g[0] = 1e-3
        out = clip_gradients([g], 1e-3)
        assert torch.equal(out[0], g)

    def test_ten_x_norm_rescaled(self):
        gs = [torch.full((5,), 1.0, dtype=torch.float64), torch.full((3,), -2.0, dtype=torch.float64)]
        norm = global_grad_norm(gs)
        out = clip_gradients(gs, norm / 10.0)
        assert global_grad_norm(out) == pytest.approx(norm / 10.0, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=8))
    def test_post_clip_norm_bounded(self, values):
        gs = [torch.tensor(values, dtype=torch.float64)]
        out = clip_gradients(gs, 1e-3)
        assert global_grad_norm(out) <= 1e-3 + 1e-9


class TestEmaUpdate:
    def test_fixed_point(self):
        params = [torch.full((2, 2), 0.7)]
        out = ema_update(params, [p.clone() for p in params], 0.9)
        assert torch.allclose(out[0], params[0])

    def test_decay_to_zero_copies_params(self):
        params = [torch.ones(3)]
        shadow = [torch.zeros(3)]
        out = ema_update(params, shadow, 1e-12)
        assert torch.allclose(out[0], params[0], atol=1e-9)

    def test_two_step_recurrence(self):
        decay = 0.99
        shadow = [torch.tensor([1.0], dtype=torch.float64)]
        p1 = [torch.tensor([2.0], dtype=torch.float64)]
        p2 = [torch.tensor([3.0], dtype=torch.float64)]
        shadow = ema_update(p1, shadow, decay)
        shadow = ema_update(p2, shadow, decay)
        expected = decay * (decay * 1.0 + (1 - decay) * 2.0) + (1 - decay) * 3.0
        assert float(shadow[0]) == pytest.approx(expected, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ema_update([torch.ones(2)], [torch.ones(3)], 0.9)

    def test_invalid_decay(self):
        with pytest.raises(ValueError):
            ema_update([torch.ones(1)], [torch.ones(1)], 1.0)


class TestDeriveSeed:
    def test_deterministic_and_distinct(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        seeds = {derive_seed(0, step, 0) for step in range(1000)}
        assert len(seeds) == 1000


class TestTrainStep:
    def test_freeze_contract_and_norm(self, smoke_backbone, smoke_scenes):
        cfg = tiny_config()
        state = init_prop_state(smoke_backbone, cfg)
        source = SceneDataSource(smoke_scenes, cfg.seed)
        before = parameter_checksums(state.model.backbone)
        for _ in range(3):
            state, _ = train_step(state, source.batch(state.step, cfg.batch))
            assert state.last_grad_norm <= cfg.grad_norm_threshold + 1e-9
        assert parameter_checksums(state.model.backbone) == before

    def test_two_runs_identical_traces(self, smoke_backbone, smoke_scenes):
        traces = []
        for _ in range(2):
            cfg = tiny_config()
            state = init_prop_state(smoke_backbone, cfg)
            source = SceneDataSource(smoke_scenes, cfg.seed)
            run = []
            for _ in range(4):
                state, bd = train_step(state, source.batch(state.step, cfg.batch))
                run.append(bd.total)
            traces.append(run)
        assert np.abs(np.array(traces[0]) - np.array(traces[1])).max() <= 1e-6

    def test_zero_weights_reduce_to_plain_diffusion(self, smoke_backbone, smoke_scenes):
        cfg = tiny_config(
            loss_weights=LossWeights(lam=0.0, beta=0.0, gamma=0.0), mpd_enabled=False
        )
        state = init_prop_state(smoke_backbone, cfg)
        source = SceneDataSource(smoke_scenes, cfg.seed)
        state, bd = train_step(state, source.batch(0, cfg.batch))
        # the unweighted parts are still reported, but the optimized total
        # reduces to the plain non-mask diffusion loss
        assert bd.grad == 0.0 and bd.mpd == 0.0
        assert bd.total == bd.non_mask

    def test_ra_disabled_uses_full_mse(self, smoke_backbone, smoke_scenes):
        cfg = tiny_config(ra_enabled=False)
        state = init_prop_state(smoke_backbone, cfg)
        source = SceneDataSource(smoke_scenes, cfg.seed)
        state, bd = train_step(state, source.batch(0, cfg.batch))
        assert bd.mask == 0.0 and bd.grad == 0.0
        assert bd.mpd > 0.0  # MPD supervision stays on

    def test_empty_batch_rejected(self, prop_state):
        with pytest.raises(ValueError):
            train_step(prop_state, [])

    def test_pretrain_phase_updates_backbone(self, smoke_scenes):
        cfg = tiny_config(phase="backbone")
        state = init_backbone_state(smoke_model_config(), cfg)
        before = parameter_checksums(state.model)
        source = PretrainDataSource(smoke_scenes, cfg.seed)
        state, traces = train_loop(state, source, steps=2)
        assert state.step == 2
        assert parameter_checksums(state.model) != before
        assert all(math.isfinite(b.total) for b in traces)


class TestDataSources:
    def test_batches_deterministic(self, smoke_scenes):
        a = SceneDataSource(smoke_scenes, 7).batch(3, 2)
        b = SceneDataSource(smoke_scenes, 7).batch(3, 2)
        for x, y in zip(a, b):
            assert x.task is y.task
            assert np.array_equal(x.encoder_video.data, y.encoder_video.data)

    def test_examples_routed_consistently(self, smoke_scenes):
        source = SceneDataSource(smoke_scenes, 11)
        for step in range(4):
            for ex in source.batch(step, 4):
                assert ex.edit_masks.data[0].any()
                assert ex.encoder_video.data.shape == ex.target_video.data.shape


class TestCheckpoints:
    def test_round_trip_bitwise(self, smoke_scenes, smoke_backbone, tmp_path):
        cfg = tiny_config()
        state = init_prop_state(smoke_backbone, cfg)
        source = SceneDataSource(smoke_scenes, cfg.seed)
        for _ in range(2):
            state, _ = train_step(state, source.batch(state.step, cfg.batch))
        save_checkpoint(state, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.step == state.step
        for (na, pa), (nb, pb) in zip(
            state.model.named_parameters(), loaded.model.named_parameters()
        ):
            assert na == nb
            assert torch.equal(pa, pb)
        for k in state.ema:
            assert torch.equal(state.ema[k], loaded.ema[k])

    def test_resume_matches_uninterrupted(self, smoke_scenes, smoke_backbone, tmp_path):
        cfg = tiny_config(total_steps=12)
        source = SceneDataSource(smoke_scenes, cfg.seed)

        state = init_prop_state(smoke_backbone, cfg)
        straight = []
        for _ in range(8):
            state, bd = train_step(state, source.batch(state.step, cfg.batch))
            straight.append(bd.total)

        state2 = init_prop_state(smoke_backbone, cfg)
        resumed = []
        for _ in range(4):
            state2, bd = train_step(state2, source.batch(state2.step, cfg.batch))
            resumed.append(bd.total)
        save_checkpoint(state2, tmp_path / "mid")
        state3 = load_checkpoint(tmp_path / "mid")
        for _ in range(4):
            state3, bd = train_step(state3, source.batch(state3.step, cfg.batch))
            resumed.append(bd.total)
        assert np.abs(np.array(straight) - np.array(resumed)).max() <= 1e-6

    def test_config_mismatch_error(self, smoke_scenes, smoke_backbone, tmp_path):
        state = init_prop_state(smoke_backbone, tiny_config())
        save_checkpoint(state, tmp_path / "ck")
        with pytest.raises(ConfigMismatchError):
            load_checkpoint(tmp_path / "ck", expected_model_config=smoke_model_config(hidden=64))

    def test_corrupt_checkpoint_detected(self, smoke_backbone, tmp_path):
        import json

        state = init_prop_state(smoke_backbone, tiny_config())
        save_checkpoint(state, tmp_path / "ck")
        manifest = json.loads((tmp_path / "ck" / "checkpoint.json").read_text())
        manifest["parameters"][0]["sha256"] = "0" * 64
        (tmp_path / "ck" / "checkpoint.json").write_text(json.dumps(manifest))
        with pytest.raises(CorruptCheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_ema_model_swaps_trainable_weights(self, smoke_backbone):
        state = init_prop_state(smoke_backbone, tiny_config())
        with torch.no_grad():
            for k in state.ema:
                state.ema[k] = state.ema[k] + 1.0
        shadowed = ema_model(state)
        name, param = next(iter(shadowed.trainable_named_parameters()))
        original = dict(state.model.trainable_named_parameters())[name]
        assert torch.allclose(param, original + 1.0)


class TestTrainLoop:
    def test_loss_csv_written(self, smoke_scenes, smoke_backbone, tmp_path):
        import csv

        cfg = tiny_config()
        state = init_prop_state(smoke_backbone, cfg)
        source = SceneDataSource(smoke_scenes, cfg.seed)
        state, traces = train_loop(state, source, steps=3, run_dir=tmp_path / "run")
        with open(tmp_path / "run" / "loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert set(rows[0]) == {"step", "non_mask", "mask", "grad", "mpd", "total", "lr", "grad_norm"}
        assert (tmp_path / "run" / "environment.json").exists()
        assert (tmp_path / "run" / "train_config.json").exists()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(total_steps=10, warmup_steps=10)
        with pytest.raises(ValueError):
            TrainConfig(task_ratio=(0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            TrainConfig(phase="bogus")
