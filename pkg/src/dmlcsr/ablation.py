"""Four-arm ablation: Baseline, +DDGCN, +DML, +CSR on one shared dataset."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .config import RunConfig, apply_overrides, save
from .csr import TrainResult, jsonl_logger, run_training
from .data import SplitData, build_splits

# Each arm switches one component on top of the previous row.
ARMS: dict[str, list[str]] = {
    "Baseline": ["model.context=conv", "model.use_edges=false", "loss.lambda1=0", "loss.lambda2=0",
                 "loss.lambda3=0", "loss.lambda4=0", "csr.K=0"],
    "+DDGCN": ["model.context=ddgcn", "model.use_edges=false", "loss.lambda1=0", "loss.lambda2=0",
               "loss.lambda3=0", "loss.lambda4=0", "csr.K=0"],
    "+DML": ["model.context=ddgcn", "model.use_edges=true", "csr.K=0"],
    "+CSR": ["model.context=ddgcn", "model.use_edges=true"],
}


def synthetic_splits(cfg: RunConfig) -> SplitData:
    d = cfg.data
    return build_splits(d.n_train, d.n_val, d.noise_rate, seed=d.seed, config=d.scene)


def final_metrics(result: TrainResult) -> dict:
    epochs = [{k: v for k, v in r.items()} for r in result.history]
    return {"best_mean_f1": result.best_metric, "metrics": result.metrics, "history": epochs}


def train_run(cfg: RunConfig, data: SplitData, out_dir: str | Path) -> TrainResult:
    """Train one configuration and write config, log, checkpoints and final_metrics.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save(cfg, out / "config.txt")
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    result = run_training(cfg, data.train_images, data.train_labels, data.val_images, data.val_labels,
                          log=jsonl_logger(log_path), checkpoint_dir=out)
    (out / "final_metrics.json").write_text(json.dumps(final_metrics(result), indent=2, sort_keys=True) + "\n")
    return result


def arm_config(base: RunConfig, arm: str) -> RunConfig:
    cfg = copy.deepcopy(base)
    apply_overrides(cfg, ARMS[arm])
    cfg.validate()
    return cfg


def run_ablation(base: RunConfig, out_dir: str | Path, data: SplitData | None = None,
                 arms=tuple(ARMS)) -> list[dict]:
    """Train every arm with shared seeds and data; writes ``ablation.md`` and ``ablation.json``."""
    data = data if data is not None else synthetic_splits(base)
    out = Path(out_dir)
    rows = []
    for arm in arms:
        result = train_run(arm_config(base, arm), data, out / _slug(arm))
        cycles = [r for r in result.history if r["event"] == "cycle"]
        rows.append({
            "arm": arm,
            "mean_f1": result.metrics["mean_f1"],
            "miou": result.metrics["miou"],
            "overall_f1": result.metrics["overall_f1"],
            "cycles_improved": sum(bool(r["improved"]) for r in cycles),
        })
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    (out / "ablation.md").write_text(markdown_table(rows))
    return rows


def markdown_table(rows: list[dict]) -> str:
    lines = ["| Arm | mean F1 | mIoU | overall F1 | cycles improved |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['arm']} | {100 * r['mean_f1']:.2f} | {100 * r['miou']:.2f} | "
                     f"{100 * r['overall_f1']:.2f} | {r['cycles_improved']} |")
    return "\n".join(lines) + "\n"


def _slug(arm: str) -> str:
    return arm.lstrip("+").lower()
