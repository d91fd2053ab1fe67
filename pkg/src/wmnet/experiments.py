"""Component ablation and W1/W2 initialisation sweep over several seeds."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from wmnet.config import ExperimentConfig
from wmnet.model import build_model
from wmnet.ops import count_parameters
from wmnet.plotting import plot_table
from wmnet.train import evaluate_model, load_split, tensorize, train

# (wunet, sawf, cfm) in the order of the published ablation; with cfm off the
# interaction core is the cross-attention transformer
ABLATION_ROWS: Tuple[Tuple[bool, bool, bool], ...] = (
    (False, False, False),
    (False, False, True),
    (True, False, False),
    (True, False, True),
    (False, True, True),
    (False, True, False),
    (True, True, True),
)
SWEEP_W2 = (1.0, 0.5)
SWEEP_W1 = (1.0, 0.75, 0.5, 0.25, 0.1)

Runner = Callable[[ExperimentConfig], Dict]


def run_seed(cfg: ExperimentConfig) -> Dict:
    """Train one configuration and score it on the validation split."""
    result = train(cfg, write=False)
    metrics = evaluate_model(result.model, tensorize(load_split(cfg, "val")))
    return {"mAP@0.5": metrics["mAP@0.5"], "mAP": metrics["mAP"], "final_loss": result.checkpoint.history[-1]["loss"]}


def run_seeds(cfg: ExperimentConfig, runner: Optional[Runner] = None) -> Dict:
    runner = runner or run_seed
    per_seed = [runner(replace(cfg, seed=s)) for s in cfg.seeds]
    m50 = np.array([r["mAP@0.5"] for r in per_seed])
    m = np.array([r["mAP"] for r in per_seed])
    return {
        "mAP@0.5": float(m50.mean()),
        "mAP@0.5_std": float(m50.std()),
        "mAP": float(m.mean()),
        "per_seed": [float(v) for v in m50],
        "params": count_parameters(build_model(cfg)),
        "config_hash": cfg.hash(),
    }


def ablation_configs(base: ExperimentConfig) -> List[ExperimentConfig]:
    return [replace(base, wunet=w, sawf=s, cfm=c, attention=not c) for w, s, c in ABLATION_ROWS]


def sweep_configs(base: ExperimentConfig) -> List[ExperimentConfig]:
    return [replace(base, w1=w1, w2=w2) for w2 in SWEEP_W2 for w1 in SWEEP_W1]


def ablate(cfg: ExperimentConfig, runner: Optional[Runner] = None, write: bool = True) -> Dict:
    rows = []
    for row_cfg in ablation_configs(cfg):
        flags = {"wunet": row_cfg.wunet, "sawf": row_cfg.sawf, "cfm": row_cfg.cfm}
        label = "".join(k if v else "-" for k, v in zip("WSC", flags.values()))
        rows.append({"row": label, **flags, **run_seeds(row_cfg, runner)})
    table = {"kind": "ablation", "config_hash": cfg.hash(), "spec": cfg.spec, "seeds": list(cfg.seeds), "rows": rows}
    if write:
        _emit(table, cfg, "ablation", ["wunet", "sawf", "cfm"], "row")
    return table


def sweep_w(cfg: ExperimentConfig, runner: Optional[Runner] = None, write: bool = True) -> Dict:
    rows = []
    for row_cfg in sweep_configs(cfg):
        rows.append({"row": f"W2={row_cfg.w2:g} W1={row_cfg.w1:g}", "w2": row_cfg.w2, "w1": row_cfg.w1,
                     **run_seeds(row_cfg, runner)})
    table = {"kind": "sweep_w", "config_hash": cfg.hash(), "spec": cfg.spec, "seeds": list(cfg.seeds), "rows": rows}
    if write:
        _emit(table, cfg, "sweep_w", ["w2", "w1"], "row")
    return table


def to_markdown(table: Dict, columns: Sequence[str]) -> str:
    def cell(v):
        if isinstance(v, bool):
            return "✓" if v else ""
        return f"{v:g}" if isinstance(v, float) else str(v)

    head = list(columns) + ["mAP@0.5", "mAP", "params"]
    lines = [
        f"config hash: `{table['config_hash']}` | spec: {table['spec']} | seeds: {table['seeds']}",
        "",
        "| " + " | ".join(head) + " |",
        "|" + "---|" * len(head),
    ]
    for r in table["rows"]:
        values = [cell(r[c]) for c in columns]
        values += [f"{100 * r['mAP@0.5']:.1f} ± {100 * r['mAP@0.5_std']:.1f}", f"{100 * r['mAP']:.1f}",
                   f"{r['params']:,}"]
        lines.append("| " + " | ".join(values) + " |")
    return "\n".join(lines) + "\n"


def _emit(table: Dict, cfg: ExperimentConfig, name: str, columns: Sequence[str], label_key: str,
          out_dir: Optional[Path] = None) -> None:
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}.json").write_text(json.dumps(table, indent=2) + "\n")
    (out_dir / f"{name}.md").write_text(to_markdown(table, columns))
    (out_dir / "config.txt").write_text(cfg.to_text())
    plot_table(table["rows"], label_key, out_dir / f"{name}.png", title=f"{name} ({table['config_hash']})")
