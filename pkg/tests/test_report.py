import os

import numpy as np
import pytest

from proxytta.errors import ReportError
from proxytta.pipeline import LossRow
from proxytta.report import emit_report
from proxytta.runner import RunDir


def make_run(root, name, dataset, method, seed, mae, rmse, with_losses=True):
    run = RunDir(str(root), name)
    run.write_metrics(
        [
            {
                "dataset": dataset,
                "method": method,
                "seed": seed,
                "mode": "both",
                "density": 0.05,
                "mae_mm": mae,
                "rmse_mm": rmse,
                "n_pixels": 1000,
            }
        ]
    )
    if with_losses:
        rows = [LossRow(i, 0.5 / (i + 1), 0.1, 0.2, 0.8 / (i + 1), 50) for i in range(6)]
        run.write_losses(rows)
    return run.path


def test_five_seed_aggregation_matches_sample_std(tmp_path):
    maes = [100.0, 110.0, 95.0, 105.0, 120.0]
    dirs = [
        make_run(tmp_path / "runs", f"m-{i}", "target", "proxytta", i, mae, mae * 2)
        for i, mae in enumerate(maes)
    ]
    out = emit_report(dirs, str(tmp_path / "report"))
    lines = open(out["summary_csv"]).read().splitlines()
    header = lines[0].split(",")
    row = dict(zip(header, lines[1].split(",")))
    assert row["method"] == "proxytta" and row["n_runs"] == "5"
    assert abs(float(row["mae_mm_mean"]) - np.mean(maes)) < 1e-6
    assert abs(float(row["mae_mm_std"]) - np.std(maes, ddof=1)) < 1e-6


def test_best_method_bolded_per_dataset(tmp_path):
    dirs = [
        make_run(tmp_path / "runs", "a-0", "target", "proxytta", 0, 90.0, 150.0),
        make_run(tmp_path / "runs", "b-0", "target", "no_adapt", 0, 140.0, 220.0),
    ]
    out = emit_report(dirs, str(tmp_path / "report"))
    md = open(out["summary_md"]).read()
    best_line = next(l for l in md.splitlines() if l.startswith("| proxytta"))
    other_line = next(l for l in md.splitlines() if l.startswith("| no_adapt"))
    assert "**" in best_line
    assert "**" not in other_line


def test_report_regeneration_is_byte_identical(tmp_path):
    dirs = [
        make_run(tmp_path / "runs", f"r-{i}", "target", "proxytta", i, 100.0 + i, 200.0 + i)
        for i in range(3)
    ]
    out1 = emit_report(dirs, str(tmp_path / "rep1"))
    out2 = emit_report(dirs, str(tmp_path / "rep2"))
    for key in ("summary_csv", "summary_md"):
        assert open(out1[key], "rb").read() == open(out2[key], "rb").read()
    plots1 = sorted(os.listdir(out1["plots_dir"]))
    plots2 = sorted(os.listdir(out2["plots_dir"]))
    assert plots1 == plots2 and plots1
    for name in plots1:
        a = open(os.path.join(out1["plots_dir"], name), "rb").read()
        b = open(os.path.join(out2["plots_dir"], name), "rb").read()
        assert a == b


def test_parallel_report_matches_serial(tmp_path):
    dirs = [
        make_run(tmp_path / "runs", f"p-{i}", "target", "proxytta", i, 100.0 + i, 200.0 + i)
        for i in range(3)
    ]
    serial = emit_report(dirs, str(tmp_path / "rs"), jobs=1)
    parallel = emit_report(dirs, str(tmp_path / "rp"), jobs=2)
    assert open(serial["summary_csv"], "rb").read() == open(parallel["summary_csv"], "rb").read()
    for name in sorted(os.listdir(serial["plots_dir"])):
        a = open(os.path.join(serial["plots_dir"], name), "rb").read()
        b = open(os.path.join(parallel["plots_dir"], name), "rb").read()
        assert a == b


def test_missing_run_listed_in_error(tmp_path):
    present = make_run(tmp_path / "runs", "ok-0", "target", "proxytta", 0, 100.0, 200.0)
    absent = str(tmp_path / "runs" / "gone-1")
    with pytest.raises(ReportError) as err:
        emit_report([present, absent], str(tmp_path / "report"))
    assert "gone-1" in str(err.value)
