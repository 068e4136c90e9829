"""Base-model test MAE against baselines for every horizon on one synthetic scenario.

    python scripts/skill_table.py --config configs/acceptance.json --seed 0 --out skill.csv
"""
import argparse
import csv
import time

import numpy as np

from floodcast import experiment as ex, metrics, synth
from floodcast.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/acceptance.json")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="skill.csv")
    args = ap.parse_args()
    cfg = load_config(args.config, args.seed)
    data = ex.data_from_synth(synth.generate(cfg.synth))
    rows = []
    for h in cfg.horizons:
        t0 = time.perf_counter()
        trained = ex.train_horizon(data, cfg, h)
        fc = ex.forecast_horizon(data, cfg, trained.params, h)
        forecasts = {"dcrnn_rc": fc.base, **ex.baseline_forecasts(data, cfg, h, cfg.baselines)}
        mask = fc.split_mask("test") & np.isfinite(fc.base)
        for name, series in forecasts.items():
            rows.append([h, name, metrics.mae(fc.reported[mask], series[mask])])
        print(f"h{h}: " + ", ".join(f"{n} {v:.2f}" for hh, n, v in rows if hh == h)
              + f" ({time.perf_counter() - t0:.0f} s)", flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["horizon", "model", "test_mae_reported"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
