import json
import logging
import os
from typing import Dict, List, Optional, Any, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd

from src.analytics.metrics import EvalReport

logger = logging.getLogger("openworld_kit.analytics")

UNDEFINED = "—"


def fmt(value: Optional[float], digits: int = 4) -> str:
    """Undefined metrics render as an em dash, never as 0."""
    if value is None:
        return UNDEFINED
    if isinstance(value, int):
        return str(value)
    return f"{value:.{digits}f}"


def write_report(report: EvalReport, out_dir: str, stem: Optional[str] = None) -> Dict[str, str]:
    """
    Write `<stem>.json` (canonical key order, undefined as null) and `<stem>.csv` (one summary row).

    Returns:
        Paths of the written files.
    """
    os.makedirs(out_dir, exist_ok=True)
    stem = stem or f"task_{report.task_id}"
    json_path = os.path.join(out_dir, f"{stem}.json")
    csv_path = os.path.join(out_dir, f"{stem}.csv")
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    pd.DataFrame([report.summary_row()]).to_csv(csv_path, index=False)
    logger.info(f"Report written to {json_path}")
    return {"json": json_path, "csv": csv_path}


def load_report(path: str) -> EvalReport:
    with open(path, "r") as f:
        return EvalReport.from_dict(json.load(f))


def render_markdown(reports: Sequence[EvalReport], title: str = "Open-world detection results") -> str:
    """Summary with one row per report: previous/current/both mAP, U-Recall, WI, A-OSE."""
    lines = [f"# {title}", ""]
    if reports:
        meta = reports[0].metadata
        lines += [f"- AP: {meta.get('ap_protocol', '')}", f"- WI: {meta.get('wi_protocol', '')}", ""]
    lines += [
        "| Task | Arm | U-Recall | WI | A-OSE | mAP prev | mAP curr | mAP both |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in sorted(reports, key=lambda r: (r.task_id, str(r.metadata.get("arm")))):
        lines.append(
            f"| {r.task_id} | {r.metadata.get('arm', UNDEFINED)} | {fmt(r.u_recall)} | {fmt(r.wi)} | "
            f"{r.a_ose} | {fmt(r.map_prev)} | {fmt(r.map_curr)} | {fmt(r.map_both)} |"
        )
    for r in sorted(reports, key=lambda r: (r.task_id, str(r.metadata.get("arm")))):
        lines += ["", f"## Task {r.task_id} ({r.metadata.get('arm', UNDEFINED)}) per-class AP", "",
                  "| Class | AP |", "|---|---|"]
        lines += [f"| {name} | {fmt(ap)} |" for name, ap in r.per_class_ap.items()]
    return "\n".join(lines) + "\n"


def plot_loss_curves(logs: Dict[int, pd.DataFrame], path: str) -> Optional[str]:
    """One panel per task of det / MSCAL / total loss against step."""
    logs = {t: df for t, df in sorted(logs.items()) if df is not None and len(df)}
    if not logs:
        logger.warning("No training logs to plot")
        return None
    fig, axes = plt.subplots(1, len(logs), figsize=(5 * len(logs), 4), squeeze=False)
    for ax, (task_id, df) in zip(axes[0], logs.items()):
        for column in ("det_loss", "mscal_loss", "total"):
            ax.plot(df["step"], df[column], label=column)
        if "mscal_floor" in df:
            ax.plot(df["step"], df["mscal_floor"], linestyle="--", label="mscal_floor")
        ax.set_title(f"Task {task_id}")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
    fig.tight_layout()
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.info(f"Loss curves saved to {path}")
    return path


def summary_table(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([r.summary_row() for r in reports])
