"""Tests for batching, augmentation, the loss and the training loop."""

import json

import numpy as np
import pytest

from app.errors import InsufficientData
from app.services.autograd import Tensor
from app.services import training
from app.services.model import ModelParams, init_params
from app.services.optim import OptimizerState
from app.services.so3 import pairwise_geodesic, random_rotation, rot6d_from_matrix, rot_z
from app.services.training import (
    augment_rotations,
    build_batch,
    episode_loss,
    log_path_for,
    rotation_loss,
    step_rng,
    train_loop,
    train_step,
    validation_accuracy,
)
from app.storage import load_checkpoint


def _with_train(run_config, **updates):
    return run_config.model_copy(update={"train": run_config.train.model_copy(update=updates)})


class TestLoss:
    def test_quarter_turn_against_identity(self, f64):
        pred = Tensor([[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]])
        assert rotation_loss(pred, rot_z(np.pi / 2)[None]).item() == pytest.approx(4.0)

    def test_perfect_prediction(self, f64, rng):
        gt = np.stack([random_rotation(rng) for _ in range(3)])
        assert rotation_loss(Tensor(rot6d_from_matrix(gt)), gt).item() == pytest.approx(0.0, abs=1e-12)

    def test_episode_loss_is_scalar(self, f64, dataset, run_config, micro_params):
        episodes = build_batch(dataset.split("train"), run_config.train, step_rng(0, 1))
        loss = episode_loss(episodes, micro_params)
        assert loss.shape == ()
        assert loss.item() > 0.0


class TestBatching:
    def test_deterministic_per_step(self, dataset, run_config):
        records = dataset.split("train")
        a = build_batch(records, run_config.train, step_rng(7, 3))
        b = build_batch(records, run_config.train, step_rng(7, 3))
        assert [e.object_id for e in a] == [e.object_id for e in b]
        assert all(np.array_equal(x.query_images, y.query_images) for x, y in zip(a, b))

    def test_shapes_and_distinct_objects(self, dataset, run_config):
        cfg = run_config.train
        episodes = build_batch(dataset.split("train"), cfg, step_rng(0, 1))
        assert len(episodes) == cfg.objects_per_batch
        assert len({e.object_id for e in episodes}) == cfg.objects_per_batch
        for e in episodes:
            assert e.ref_images.shape == (cfg.n_ref, 16, 16, 3)
            assert e.query_rotations.shape == (cfg.n_query, 3, 3)

    def test_views_within_an_episode_are_distinct(self, dataset, run_config):
        for e in build_batch(dataset.split("train"), run_config.train, step_rng(0, 2)):
            rots = np.concatenate([e.ref_rotations, e.query_rotations])
            D = pairwise_geodesic(rots, rots)
            assert D[~np.eye(len(rots), dtype=bool)].min() > 1e-9

    def test_too_few_objects(self, dataset, run_config):
        with pytest.raises(InsufficientData):
            build_batch(dataset.split("train")[:1], run_config.train, step_rng(0, 1))

    def test_too_few_views(self, dataset, run_config):
        cfg = run_config.train.model_copy(update={"n_ref": 10, "n_query": 5})
        with pytest.raises(InsufficientData, match="views"):
            build_batch(dataset.split("train"), cfg, step_rng(0, 1))

    def test_render_on_the_fly(self, dataset, run_config):
        cfg = run_config.train.model_copy(update={"render_on_the_fly": True, "background": "black"})
        episodes = build_batch(dataset.split("train"), cfg, step_rng(0, 1))
        assert episodes[0].ref_images.shape == (cfg.n_ref, 16, 16, 3)


class TestAugmentation:
    def test_identity_leaves_labels(self, dataset):
        ep = dataset.records[0].episode
        out = augment_rotations(ep, np.random.default_rng(0), R=np.eye(3))
        assert np.allclose(out.ref_rotations, ep.ref_rotations)
        assert out.query_images is ep.query_images

    def test_relative_rotations_preserved(self, dataset, rng):
        ep = dataset.records[0].episode
        out = augment_rotations(ep, rng)
        before = pairwise_geodesic(ep.ref_rotations, ep.query_rotations)
        after = pairwise_geodesic(out.ref_rotations, out.query_rotations)
        assert np.allclose(before, after, atol=1e-7)
        assert not np.allclose(out.ref_rotations, ep.ref_rotations)


class TestTrainLoop:
    def test_zero_steps_leaves_params(self, f64, dataset, run_config, micro_params):
        before = {n: a.copy() for n, a in micro_params.arrays().items()}
        result = train_loop(_with_train(run_config, total_steps=0), dataset.split("train"), params=micro_params)
        assert result.step == 0
        assert result.log == []
        assert all(np.array_equal(before[n], result.params[n].data) for n in before)

    def test_steps_change_params_and_log(self, f64, dataset, run_config, tmp_path):
        ckpt = tmp_path / "run.egrt"
        log = log_path_for(ckpt)
        result = train_loop(run_config, dataset.split("train"), checkpoint_path=ckpt, log_path=log)
        assert result.step == run_config.train.total_steps
        assert all(np.isfinite(r.loss) for r in result.log)

        lines = [json.loads(line) for line in log.read_text().splitlines()]
        assert [line["step"] for line in lines] == [1, 2, 3]
        assert set(lines[0]) == {"step", "loss", "val_acc", "ms_per_step", "config_hash"}
        assert all(line["config_hash"] == run_config.config_hash() for line in lines)

        saved = load_checkpoint(ckpt)
        assert saved.step == 3
        assert saved.precision == "f64"
        assert saved.optimizer.step == 3
        fresh = init_params(run_config.model)
        assert not np.array_equal(saved.params["head.fc1.W"], fresh["head.fc1.W"].data)

    def test_validation_steps(self, f64, dataset, run_config):
        cfg = _with_train(run_config, val_every=2, total_steps=2)
        result = train_loop(cfg, dataset.split("train"), val_records=dataset.split("holdout"))
        assert result.log[0].val_acc is None
        assert 0.0 <= result.log[1].val_acc <= 1.0

    def test_validation_without_records(self, f64, micro_params):
        assert validation_accuracy(micro_params, [], 4) is None

    def test_resume_matches_uninterrupted(self, f64, dataset, run_config, tmp_path):
        records = dataset.split("train")
        full = train_loop(_with_train(run_config, total_steps=5), records)

        ckpt = tmp_path / "half.egrt"
        train_loop(_with_train(run_config, total_steps=2), records, checkpoint_path=ckpt)
        saved = load_checkpoint(ckpt)
        resumed = train_loop(
            _with_train(run_config, total_steps=5),
            records,
            params=ModelParams.from_arrays(run_config.model, saved.params),
            optimizer=saved.optimizer,
            start_step=saved.step,
        )
        assert resumed.step == 5
        assert [r.loss for r in resumed.log] == [r.loss for r in full.log[2:]]
        for name in full.params:
            assert np.array_equal(resumed.params[name].data, full.params[name].data), name

    def test_resume_appends_to_log(self, f64, dataset, run_config, tmp_path):
        records = dataset.split("train")
        ckpt = tmp_path / "run.egrt"
        log = log_path_for(ckpt)
        train_loop(_with_train(run_config, total_steps=2), records, checkpoint_path=ckpt, log_path=log)
        saved = load_checkpoint(ckpt)
        train_loop(
            _with_train(run_config, total_steps=3),
            records,
            params=ModelParams.from_arrays(run_config.model, saved.params),
            optimizer=saved.optimizer,
            start_step=saved.step,
            log_path=log,
        )
        assert [json.loads(line)["step"] for line in log.read_text().splitlines()] == [1, 2, 3]

    def test_frozen_encoder_is_untouched(self, f64, dataset, run_config, micro_params):
        before = {n: micro_params[n].data.copy() for n in micro_params.encoder_names()}
        head_before = micro_params["head.fc1.W"].data.copy()
        result = train_loop(_with_train(run_config, freeze_encoder_after=0), dataset.split("train"),
                            params=micro_params)
        for name, value in before.items():
            assert np.array_equal(result.params[name].data, value), name
        assert not np.array_equal(result.params["head.fc1.W"].data, head_before)
        assert not any(n.startswith("enc.") for n in result.optimizer.m)

    def test_augmentation_can_be_disabled(self, f64, dataset, run_config):
        records = dataset.split("train")
        a = train_loop(_with_train(run_config, rotation_augmentation=False, total_steps=1), records)
        b = train_loop(_with_train(run_config, rotation_augmentation=True, total_steps=1), records)
        assert a.log[0].loss != b.log[0].loss

    def test_resume_after_crash_between_checkpoints(self, f64, dataset, run_config, tmp_path, monkeypatch):
        records = dataset.split("train")
        cfg = _with_train(run_config, total_steps=4, checkpoint_every=2)
        ckpt = tmp_path / "run.egrt"
        log = log_path_for(ckpt)

        real_build_batch = training.build_batch
        calls = []

        def dies_on_fourth_batch(*args, **kwargs):
            calls.append(None)
            if len(calls) == 4:
                raise RuntimeError("worker killed")
            return real_build_batch(*args, **kwargs)

        monkeypatch.setattr(training, "build_batch", dies_on_fourth_batch)
        with pytest.raises(RuntimeError):
            train_loop(cfg, records, checkpoint_path=ckpt, log_path=log)
        monkeypatch.undo()

        saved = load_checkpoint(ckpt)
        assert saved.step == 2
        assert [json.loads(line)["step"] for line in log.read_text().splitlines()] == [1, 2, 3]

        train_loop(
            cfg,
            records,
            params=ModelParams.from_arrays(run_config.model, saved.params),
            optimizer=saved.optimizer,
            start_step=saved.step,
            checkpoint_path=ckpt,
            log_path=log,
        )
        assert [json.loads(line)["step"] for line in log.read_text().splitlines()] == [1, 2, 3, 4]

    def test_resume_drops_unreadable_log_lines(self, f64, dataset, run_config, tmp_path):
        records = dataset.split("train")
        ckpt = tmp_path / "run.egrt"
        log = log_path_for(ckpt)
        train_loop(_with_train(run_config, total_steps=2), records, checkpoint_path=ckpt, log_path=log)
        with log.open("a", encoding="utf-8") as f:
            f.write('{"step": 3, "loss": 0.5, "val_ac')
        saved = load_checkpoint(ckpt)
        train_loop(
            _with_train(run_config, total_steps=3),
            records,
            params=ModelParams.from_arrays(run_config.model, saved.params),
            optimizer=saved.optimizer,
            start_step=saved.step,
            log_path=log,
        )
        assert [json.loads(line)["step"] for line in log.read_text().splitlines()] == [1, 2, 3]

    def test_identical_runs_write_identical_checkpoints(self, f64, dataset, run_config, tmp_path):
        records = dataset.split("train")
        first, second = tmp_path / "a.egrt", tmp_path / "b.egrt"
        train_loop(run_config, records, checkpoint_path=first)
        train_loop(run_config, records, checkpoint_path=second)
        assert first.read_bytes() == second.read_bytes()


class TestConvergence:
    @pytest.mark.slow
    def test_loss_halves_on_a_five_object_batch(self, f64, dataset, run_config):
        cfg = run_config.train.model_copy(update={"objects_per_batch": 5})
        episodes = build_batch(dataset.split("all")[:5], cfg, step_rng(0, 1))
        params = init_params(run_config.model)
        state = OptimizerState(lr=5e-3, weight_decay=0.0)
        losses = [train_step(episodes, params, state) for _ in range(200)]
        assert all(np.isfinite(losses))
        assert losses[-1] <= 0.5 * losses[0]
