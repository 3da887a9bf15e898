import csv

import pytest

from enerf.ablation import (
    TABLE_COLUMNS,
    AblationRunner,
    job_config,
    render_text_table,
    table_rows,
    write_reports,
)
from enerf.cli import main
from enerf.models import AblationRun, RunStatus, initialize_db

from .conftest import tiny_run_config


@pytest.fixture
def db(tmp_path):
    database = initialize_db(tmp_path / "runs.db")
    yield database
    database.close()


def completed(variant, seed, psnr, ssim):
    run = AblationRun.create(variant=variant, seed=seed, status=RunStatus.COMPLETED.value)
    run.set_metrics(
        {
            "psnr_fine": psnr,
            "ssim_fine": ssim,
            "psnr_mid": psnr - 1.0,
            "ssim_mid": ssim - 0.1,
            "psnr_coarse": psnr - 2.0,
            "ssim_coarse": ssim - 0.2,
        }
    )
    run.save()
    return run


def failed(variant, seed, error):
    return AblationRun.create(variant=variant, seed=seed, status=RunStatus.FAILED.value, error=error)


class TestTables:
    @pytest.fixture
    def runs(self, db):
        return [
            completed("enhance", 0, 30.0, 0.9),
            completed("enhance", 1, 32.0, 0.8),
            completed("test1", 0, 25.0, 0.7),
            failed("test1", 1, "Training diverged at step 7"),
        ]

    def test_rows_and_medians(self, runs):
        rows = table_rows(runs)
        assert len(rows) == 6
        assert all(list(row) == list(TABLE_COLUMNS) for row in rows)
        assert [(r["variant"], r["seed"]) for r in rows] == [
            ("enhance", "0"),
            ("enhance", "1"),
            ("test1", "0"),
            ("test1", "1"),
            ("enhance", "median"),
            ("test1", "median"),
        ]
        assert rows[0]["psnr_fine"] == "30.00"
        assert rows[0]["ssim_coarse"] == "0.7000"
        assert rows[4]["psnr_fine"] == "31.00"
        assert rows[4]["ssim_fine"] == "0.8500"
        assert rows[5]["psnr_fine"] == "25.00"

    def test_failed_run_has_empty_cells(self, runs):
        row = table_rows(runs)[3]
        assert all(row[column] == "" for column in TABLE_COLUMNS[2:])

    def test_text_table(self, runs, tmp_path):
        text = render_text_table(table_rows(runs), runs, tmp_path / "data")
        lines = text.splitlines()
        assert lines[0] == "Ablation results"
        header = next(line for line in lines if line.startswith("variant"))
        assert header.split() == list(TABLE_COLUMNS)
        assert "FAILED runs:" in text
        assert "test1 seed 1: Training diverged at step 7" in text

    def test_failed_run_names_its_directory(self, db, tmp_path):
        run = failed("test2", 3, "Missing dataset")
        run.run_dir = str(tmp_path / "test2_seed3")
        run.save()
        text = render_text_table(table_rows([run]), [run], tmp_path / "data")
        assert f"test2 seed 3: Missing dataset ({tmp_path / 'test2_seed3'})" in text

    def test_write_reports(self, runs, tmp_path):
        csv_path, text_path = write_reports(runs, tmp_path, tmp_path / "data")
        with open(csv_path, newline="") as handle:
            reader = csv.reader(handle)
            header = next(reader)
            body = list(reader)
        assert header == list(TABLE_COLUMNS)
        assert len(body) == 6
        assert all(len(row) == 8 for row in body)
        assert text_path.read_text().startswith("Ablation results")


class TestRunner:
    def test_job_config(self, tmp_path):
        cfg = job_config(tiny_run_config(), "test2", 5, tmp_path / "data", tmp_path / "run")
        assert cfg.field.variant.value == "test2"
        assert cfg.field.init_seed == 5
        assert cfg.train.seed == 5
        assert cfg.io.out == tmp_path / "run"

    def test_matrix_layout(self, tmp_path):
        runner = AblationRunner(tmp_path / "data", tmp_path / "out", ["enhance", "test1"], [0, 1])
        labels = [job.label for job in runner.jobs()]
        assert labels == ["enhance/seed0", "enhance/seed1", "test1/seed0", "test1/seed1"]
        assert runner.jobs()[1].run_dir == tmp_path / "out" / "enhance_seed1"

    def test_unknown_variant(self, tmp_path):
        with pytest.raises(ValueError):
            AblationRunner(tmp_path, tmp_path, ["bogus"], [0])

    def test_runs_and_records(self, tmp_path, tiny_dataset_dir):
        out = tmp_path / "ablation"
        cfg = tiny_run_config(train={"iterations": 1}, io={"write_pfm": False})
        runs = AblationRunner(tiny_dataset_dir, out, ["enhance", "no_multiperf"], [0], cfg).run()

        assert [r.status for r in runs] == [RunStatus.COMPLETED.value] * 2
        assert set(runs[0].get_metrics()) == set(TABLE_COLUMNS[2:])
        assert set(runs[1].get_metrics()) == {"psnr_fine", "ssim_fine"}
        assert (out / "enhance_seed0" / "eval.json").exists()
        assert (out / "no_multiperf_seed0" / "config.echo").exists()

        rows = table_rows(runs)
        assert rows[1]["psnr_mid"] == ""
        assert rows[1]["psnr_fine"] != ""

    def test_failures_are_recorded(self, tmp_path):
        runs = AblationRunner(tmp_path / "missing", tmp_path / "out", ["enhance"], [0, 1]).run()
        assert [r.status for r in runs] == [RunStatus.FAILED.value] * 2
        assert all("missing" in r.error for r in runs)

    def test_cli_exit_code_on_failure(self, tmp_path, capsys):
        args = ["ablate", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "out")]
        assert main([*args, "--variants", "enhance", "--seeds", "0"]) == 1
        assert "FAILED runs:" in capsys.readouterr().out
        assert (tmp_path / "out" / "ablation.csv").exists()

    @pytest.mark.slow
    def test_parallel_workers(self, tmp_path, tiny_dataset_dir):
        cfg = tiny_run_config(train={"iterations": 2})
        runs = AblationRunner(tiny_dataset_dir, tmp_path / "out", ["enhance", "test1"], [0, 1], cfg, workers=2).run()
        assert all(r.status == RunStatus.COMPLETED.value for r in runs)
