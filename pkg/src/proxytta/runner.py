"""Run-directory artifacts.

Every command writes into runs/<name>/ (root overridable via the
PROXYTTA_RUNS_DIR environment variable or --runs-dir):

    config.json     resolved config + command, enough to re-run identically
    checkpoint.bin  model (+ proxy heads) archive
    losses.csv      step,l_z,l_sm,l_proxy,total,valid_points
    metrics.csv     dataset,method,seed,mode,density,mae_mm,rmse_mm,n_pixels
    events.log      one JSON object per line

All writers use fixed float formatting so identical runs produce
byte-identical files.
"""

import json
import os

LOSS_HEADER = "step,l_z,l_sm,l_proxy,total,valid_points"
METRICS_HEADER = "dataset,method,seed,mode,density,mae_mm,rmse_mm,n_pixels"


def runs_root(override=None):
    if override:
        return override
    return os.environ.get("PROXYTTA_RUNS_DIR", "runs")


class RunDir:
    def __init__(self, root, name):
        self.name = name
        self.path = os.path.join(root, name)
        os.makedirs(self.path, exist_ok=True)

    def file(self, name):
        return os.path.join(self.path, name)

    @property
    def checkpoint_path(self):
        return self.file("checkpoint.bin")

    def write_config(self, snapshot):
        with open(self.file("config.json"), "w") as fh:
            json.dump(snapshot, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_losses(self, rows):
        with open(self.file("losses.csv"), "w") as fh:
            fh.write(LOSS_HEADER + "\n")
            for r in rows:
                fh.write(
                    f"{r.step},{r.l_z:.8f},{r.l_sm:.8f},{r.l_proxy:.8f},"
                    f"{r.total:.8f},{r.valid_points}\n"
                )

    def write_metrics(self, rows):
        """rows: dicts with the METRICS_HEADER fields."""
        with open(self.file("metrics.csv"), "w") as fh:
            fh.write(METRICS_HEADER + "\n")
            for r in rows:
                fh.write(
                    f"{r['dataset']},{r['method']},{r['seed']},{r['mode']},"
                    f"{r['density']:.4f},{r['mae_mm']:.6f},{r['rmse_mm']:.6f},{r['n_pixels']}\n"
                )

    def write_events(self, events):
        with open(self.file("events.log"), "w") as fh:
            for event in events:
                fh.write(json.dumps(event, sort_keys=True) + "\n")


def metrics_row(record, seed, mode="both", density=0.0):
    return {
        "dataset": record.dataset_tag,
        "method": record.method_tag,
        "seed": seed,
        "mode": mode,
        "density": density,
        "mae_mm": record.mae_mm,
        "rmse_mm": record.rmse_mm,
        "n_pixels": record.n_pixels,
    }


def read_metrics_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(header):
                continue
            row = dict(zip(header, parts))
            row["seed"] = int(row["seed"])
            row["density"] = float(row["density"])
            row["mae_mm"] = float(row["mae_mm"])
            row["rmse_mm"] = float(row["rmse_mm"])
            row["n_pixels"] = int(row["n_pixels"])
            rows.append(row)
    return rows


def read_losses_csv(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) != len(header):
                continue
            row = dict(zip(header, parts))
            row["step"] = int(row["step"])
            for key in ("l_z", "l_sm", "l_proxy", "total"):
                row[key] = float(row[key])
            row["valid_points"] = int(row["valid_points"])
            rows.append(row)
    return rows
