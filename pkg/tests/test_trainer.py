import csv
import json

import numpy as np
import pytest

from enerf.exceptions import CheckpointError, DatasetError, TrainingDivergedError
from enerf.field import DecoderReport
from enerf.objective import LossBreakdown
from enerf.scenegen import SceneDataset, generate_dataset, preset_scene
from enerf.trainer import (
    LOSS_COLUMNS,
    PixelPool,
    build_model,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    evaluate_images,
    learning_rate_scale,
    prepare_decoders,
    train,
    write_eval_report,
    write_resource_report,
)

from .conftest import tiny_run_config


def read_rows(path):
    with open(path, newline="") as handle:
        return list(csv.DictReader(handle))


class TestPieces:
    def test_warmup_ramp(self):
        assert learning_rate_scale(0, 10, 0.1) == pytest.approx(0.1)
        assert learning_rate_scale(5, 10, 0.1) == pytest.approx(0.55)
        assert learning_rate_scale(50, 10, 0.1) == 1.0
        assert learning_rate_scale(0, 0, 0.1) == 1.0

    def test_pixel_pool(self, tiny_dataset):
        pool = PixelPool.from_dataset(tiny_dataset, 0.1, 20.0)
        assert len(pool) == 4 * 64
        np.testing.assert_array_equal(pool.batch_indices(3, 7, 10), pool.batch_indices(3, 7, 10))
        assert not np.array_equal(pool.batch_indices(3, 7, 10), pool.batch_indices(3, 8, 10))
        bundle = pool.bundle(pool.batch_indices(0, 0, 5), 0.1, 20.0)
        assert len(bundle) == 5

    def test_pool_needs_train_frames(self, tiny_dataset):
        only_eval = SceneDataset(
            tiny_dataset.intrinsics, tiny_dataset.width, tiny_dataset.height, tiny_dataset.eval_frames()
        )
        with pytest.raises(DatasetError):
            PixelPool.from_dataset(only_eval, 0.1, 20.0)

    def test_table_learning_rates(self, run_config):
        model = build_model(run_config.field, run_config.sampling, 4)
        overrides = model.lr_overrides(0.5)
        assert set(overrides) == {
            "field.hash.table",
            "field.appearance",
            "proposal.0.hash.table",
            "proposal.1.hash.table",
        }


class TestTraining:
    def test_zero_iterations_keeps_initial_parameters(self, tiny_dataset, tmp_path):
        cfg = tiny_run_config(train={"iterations": 0})
        initial = build_model(cfg.field, cfg.sampling, tiny_dataset.n_images).store.snapshot()
        result = train(tiny_dataset, cfg, tmp_path / "run")
        assert result.step == 0
        assert result.history == []
        assert result.model.store.snapshot() == initial
        assert (tmp_path / "run" / "ckpt" / "final.ckpt").exists()

    def test_same_seed_same_parameters(self, tiny_dataset):
        a = train(tiny_dataset, tiny_run_config())
        b = train(tiny_dataset, tiny_run_config())
        assert a.model.store.snapshot() == b.model.store.snapshot()
        assert [row["total"] for row in a.history] == [row["total"] for row in b.history]

    def test_different_seed_different_parameters(self, tiny_dataset):
        a = train(tiny_dataset, tiny_run_config())
        b = train(tiny_dataset, tiny_run_config(train={"seed": 1}))
        assert a.model.store.snapshot() != b.model.store.snapshot()

    def test_frozen_decoders_do_not_move(self, tiny_dataset, run_config):
        model = build_model(run_config.field, run_config.sampling, tiny_dataset.n_images)
        decoders = model.store.snapshot("decoder.")
        trainable = model.store.snapshot("field.")
        train(tiny_dataset, run_config, model=model)
        assert model.store.snapshot("decoder.") == decoders
        assert model.store.snapshot("field.") != trainable

    def test_loss_csv(self, tiny_dataset, tmp_path):
        run_dir = tmp_path / "run"
        train(tiny_dataset, tiny_run_config(), run_dir)
        rows = read_rows(run_dir / "loss.csv")
        assert list(rows[0]) == list(LOSS_COLUMNS)
        assert [int(r["step"]) for r in rows] == [0, 1, 2]
        for row in rows:
            parts = sum(float(row[c]) for c in LossBreakdown.COLUMNS[1:])
            assert float(row["total"]) == pytest.approx(parts)
            assert float(row["prop"]) >= 0.0

    def test_single_color_variant_has_no_sh_terms(self, tiny_dataset, tmp_path):
        run_dir = tmp_path / "run"
        train(tiny_dataset, tiny_run_config("no_multiperf"), run_dir)
        for row in read_rows(run_dir / "loss.csv"):
            assert (float(row["sh_fine"]), float(row["sh_mid"]), float(row["sh_coarse"])) == (0.0, 0.0, 0.0)

    @pytest.mark.parametrize("variant", ["test1", "test2", "no_pretrained"])
    def test_other_variants_train(self, tiny_dataset, variant):
        result = train(tiny_dataset, tiny_run_config(variant))
        assert result.step == 3
        assert np.isfinite(result.final_loss)

    def test_divergence_dumps_batch(self, tiny_dataset, run_config, tmp_path):
        model = build_model(run_config.field, run_config.sampling, tiny_dataset.n_images)
        model.store["field.directional.1.bias"].data[:] = np.nan
        with pytest.raises(TrainingDivergedError) as excinfo:
            train(tiny_dataset, run_config, tmp_path / "run", model=model)
        assert excinfo.value.step == 0
        dump = excinfo.value.dump_path
        assert dump is not None and dump.name == "diverged_step000000.npz"
        with np.load(dump) as data:
            assert data["origins"].shape == (run_config.train.rays_per_batch, 3)


class TestCheckpoints:
    def test_round_trip(self, tiny_dataset, run_config, tmp_path):
        result = train(tiny_dataset, run_config)
        path = checkpoint_save(tmp_path / "m.ckpt", result.model, result.step, tiny_dataset)
        meta = json.loads((tmp_path / "m.ckpt.json").read_text())
        assert meta["variant"] == "enhance"
        assert meta["step"] == 3
        assert meta["resolution"] == [8, 8]

        loaded = checkpoint_load(path)
        assert loaded.step == 3
        assert loaded.model.store.step == result.model.store.step
        assert loaded.model.store.snapshot() == result.model.store.snapshot()
        assert loaded.intrinsics == tiny_dataset.intrinsics
        assert loaded.background == tiny_dataset.background

    def test_variant_mismatch(self, tiny_dataset, run_config, tmp_path):
        model = build_model(run_config.field, run_config.sampling, tiny_dataset.n_images)
        path = checkpoint_save(tmp_path / "m.ckpt", model, 0)
        other_cfg = tiny_run_config("test1")
        other = build_model(other_cfg.field, other_cfg.sampling, tiny_dataset.n_images)
        with pytest.raises(CheckpointError) as excinfo:
            checkpoint_load(path, other)
        assert "'enhance'" in str(excinfo.value) and "'test1'" in str(excinfo.value)

    def test_missing_sidecar(self, tiny_dataset, run_config, tmp_path):
        model = build_model(run_config.field, run_config.sampling, tiny_dataset.n_images)
        path = checkpoint_save(tmp_path / "m.ckpt", model, 0)
        (tmp_path / "m.ckpt.json").unlink()
        with pytest.raises(CheckpointError, match="metadata"):
            checkpoint_load(path)

    def test_resume_matches_uninterrupted_run(self, tiny_dataset, tmp_path):
        cfg = tiny_run_config(train={"iterations": 4, "checkpoint_every": 2})
        full = train(tiny_dataset, cfg, tmp_path / "full")

        loaded = checkpoint_load(tmp_path / "full" / "ckpt" / "step_000002.ckpt")
        assert loaded.step == 2
        resumed = train(tiny_dataset, cfg, tmp_path / "resumed", model=loaded.model, start_step=loaded.step)

        assert resumed.step == 4
        assert resumed.model.store.snapshot() == full.model.store.snapshot()
        assert resumed.model.store.step == full.model.store.step


class TestEvaluation:
    def test_ground_truth_scores_perfectly(self, tiny_dataset):
        frame = tiny_dataset.eval_frames()[0]
        report = evaluate_images({"v": {"fine": frame.rgb, "mid": frame.rgb}}, {"v": frame.rgb})
        assert report.means() == {
            "psnr_fine": 99.0,
            "ssim_fine": pytest.approx(1.0),
            "psnr_mid": 99.0,
            "ssim_mid": pytest.approx(1.0),
        }

    def test_evaluate_writes_renders(self, tiny_dataset, run_config, tmp_path):
        model = build_model(run_config.field, run_config.sampling, tiny_dataset.n_images)
        report = evaluate(model, tiny_dataset, chunk=64, render_dir=tmp_path / "renders")
        assert report.channels == ("fine", "mid", "coarse")
        assert [view.name for view in report.views] == ["eval_000"]
        names = sorted(p.name for p in (tmp_path / "renders").iterdir())
        expected = [f"eval_000_{c}.{ext}" for c in ("fine", "mid", "coarse") for ext in ("png", "pfm")]
        assert names == sorted(expected + ["eval_000_depth.pfm"])

        path = write_eval_report(report, tmp_path, {"variant": "enhance"})
        payload = json.loads(path.read_text())
        assert payload["variant"] == "enhance"
        assert set(payload["mean"]) == {"psnr_fine", "ssim_fine", "psnr_mid", "ssim_mid", "psnr_coarse", "ssim_coarse"}

    def test_resource_report_holds_timings_and_decoder_losses(self, tmp_path):
        report = DecoderReport(seed=0, steps=5, initial_loss=0.4, final_loss=0.1)
        path = write_resource_report(tmp_path, {"wall_seconds": 1.5, "peak_memory_mb": 80.0}, report)
        payload = json.loads(path.read_text())
        assert path.name == "resources.json"
        assert payload["wall_seconds"] == 1.5
        assert payload["decoder"]["final_loss"] == 0.1


class TestDecoders:
    def test_pretraining_is_cached(self, tiny_dataset, tmp_path):
        cfg = tiny_run_config(field={"decoder_pretrain_steps": 2})
        first = build_model(cfg.field, cfg.sampling, tiny_dataset.n_images)
        random_init = first.store.snapshot("decoder.")
        report = prepare_decoders(first, tmp_path / "cache")
        assert report is not None and report.steps == 2
        assert first.store.snapshot("decoder.") != random_init
        assert len(list((tmp_path / "cache").glob("*.ckpt"))) == 1

        second = build_model(cfg.field, cfg.sampling, tiny_dataset.n_images)
        assert prepare_decoders(second, tmp_path / "cache") is None
        assert second.store.snapshot("decoder.") == first.store.snapshot("decoder.")

    def test_variants_without_pretrained_decoders(self, tiny_dataset, tmp_path):
        for variant in ("no_pretrained", "test2"):
            cfg = tiny_run_config(variant, field={"decoder_pretrain_steps": 2})
            model = build_model(cfg.field, cfg.sampling, tiny_dataset.n_images)
            assert prepare_decoders(model, tmp_path / "cache") is None
        assert not (tmp_path / "cache").exists()


@pytest.mark.slow
def test_fit_converges_on_lambertian_scene(tmp_path):
    dataset = generate_dataset(
        preset_scene("lambertian"), n_train=12, n_eval=2, resolution=(16, 16), seed=0, n_quadrature=256
    )
    cfg = tiny_run_config(
        scene={"width": 16, "height": 16},
        sampling={"n_uniform": 16, "n_log": 16, "proposal_samples": [24], "nerf_samples": 24},
        field={"spatial_hidden": 32, "directional_hidden": 32, "table_log2": 12, "grid_resolution": 32},
        train={"iterations": 400, "rays_per_batch": 256, "log_every": 50, "warmup_steps": 20},
    )
    result = train(dataset, cfg, tmp_path / "run")
    assert result.history[-1]["total"] < 0.5 * result.history[0]["total"]
    report = evaluate(result.model, dataset, chunk=1024)
    assert report.mean("psnr", "fine") > 15.0
