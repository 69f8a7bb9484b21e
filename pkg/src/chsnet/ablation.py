"""Sweeps over the maximum noise ratio, several seeds per setting, reported per evaluation head."""

from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .train import HEADS, TrainConfig, TrainData, train

log = logging.getLogger(__name__)

ROW_FIELDS = ["delta_max", "alpha_max", "seed", "head", "mae", "mse", "easy_mae", "easy_mse", "hard_mae", "hard_mse"]
SUMMARY_FIELDS = ["delta_max", "alpha_max", "head", "n_seeds", "mae_mean", "mae_std", "mse_mean", "mse_std"]


def sweep_seeds(master_seed: int, n_seeds: int) -> list[int]:
    return [master_seed + j for j in range(n_seeds)]


def run_ablation(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: TrainData,
    deltas: list[float],
    seeds: list[int],
    out_dir: str | Path | None = None,
    alpha_max: float | None = None,
) -> list[dict]:
    """Train one model per (delta_max, seed) and evaluate its final weights on every head.

    Rows come back ordered by setting, then seed, then head, regardless of how
    the runs were scheduled.
    """
    for d in deltas:
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"sweep value delta_max={d} outside [0, 1]")
    alpha = train_cfg.alpha_max if alpha_max is None else alpha_max
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for d in deltas:
        for seed in seeds:
            cfg = dataclasses.replace(train_cfg, delta_max=float(d), alpha_max=float(alpha), seed=int(seed))
            run_dir = out / "runs" / f"delta{d:g}_seed{seed}" if out is not None else None
            log.info("ablation run delta_max=%g seed=%d", d, seed)
            result = train(model_cfg, cfg, data, out_dir=run_dir)
            for head in HEADS:
                r = result.reports[head]
                rows.append({
                    "delta_max": float(d), "alpha_max": float(alpha), "seed": int(seed), "head": head,
                    "mae": r.mae, "mse": r.mse, "easy_mae": r.easy_mae, "easy_mse": r.easy_mse,
                    "hard_mae": r.hard_mae, "hard_mse": r.hard_mse,
                })
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    keys = sorted({(r["delta_max"], r["alpha_max"], r["head"]) for r in rows},
                  key=lambda k: (k[0], k[1], HEADS.index(k[2])))
    out = []
    for d, a, head in keys:
        sel = [r for r in rows if (r["delta_max"], r["alpha_max"], r["head"]) == (d, a, head)]
        mae = np.array([r["mae"] for r in sel])
        mse = np.array([r["mse"] for r in sel])
        out.append({"delta_max": d, "alpha_max": a, "head": head, "n_seeds": len(sel),
                    "mae_mean": float(mae.mean()), "mae_std": float(mae.std()),
                    "mse_mean": float(mse.mean()), "mse_std": float(mse.std())})
    return out


def write_csv(rows: list[dict], fields: list[str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def format_table(rows: list[dict], fields: list[str]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r[f]) for f in fields] for r in rows]
    widths = [max(len(f), *(len(b[i]) for b in body)) if body else len(f) for i, f in enumerate(fields)]
    lines = ["  ".join(f.rjust(w) for f, w in zip(fields, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def write_report(rows: list[dict], out_dir: str | Path) -> list[dict]:
    """CSV and aligned-text tables of per-run rows and the per-setting summary, plus the sweep figure."""
    from .plotting import plot_ablation

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    write_csv(rows, ROW_FIELDS, out / "ablation.csv")
    write_csv(summary, SUMMARY_FIELDS, out / "ablation_summary.csv")
    (out / "ablation.txt").write_text(format_table(rows, ROW_FIELDS) + "\n" + format_table(summary, SUMMARY_FIELDS))
    plot_ablation(summary, out / "ablation.png")
    return summary
