"""
Report table shaping shared by the `report` command and the results dashboard
"""

from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.errors import FormatError

REPORT_COLUMNS = ["predictor", "metric", "horizon", "snr_db", "target_rate", "value", "config_hash"]
PREDICTOR_ORDER = ["fas_llm_mini", "transformer_no_lora", "persistence", "ridge_ar", "perfect_csi", "actual"]
PREDICTOR_LABELS = {
    "fas_llm_mini": "FAS-LLM mini (LoRA)",
    "transformer_no_lora": "Transformer (no LoRA)",
    "persistence": "Persistence",
    "ridge_ar": "Ridge AR",
    "perfect_csi": "Perfect CSI",
    "actual": "Actual channel",
}


def load_reports(paths: Sequence) -> pd.DataFrame:
    """Đọc và gộp các file report CSV"""
    frames = []
    for path in paths:
        df = pd.read_csv(path, dtype={"predictor": str, "metric": str, "config_hash": str})
        missing = [c for c in REPORT_COLUMNS if c not in df.columns]
        if missing:
            raise FormatError(f"report is missing columns {missing}", str(getattr(path, "name", path)))
        frames.append(df[REPORT_COLUMNS])
    if not frames:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def _ordered(df: pd.DataFrame) -> pd.DataFrame:
    present = [p for p in PREDICTOR_ORDER if p in df.index]
    others = [p for p in df.index if p not in PREDICTOR_ORDER]
    return df.loc[present + others]


def pivot_prediction_errors(report: pd.DataFrame, metric: str = "code_nmse_db") -> pd.DataFrame:
    """predictor × horizon"""
    rows = report[report["metric"] == metric]
    table = rows.pivot_table(index="predictor", columns="horizon", values="value", aggfunc="mean")
    return _ordered(table)


def _shortest_horizon(report: pd.DataFrame, horizon: Optional[int]) -> pd.DataFrame:
    if horizon is None and not report.empty:
        horizon = int(report["horizon"].min())
    return report[report["horizon"] == horizon]


def pivot_capacity(report: pd.DataFrame, horizon: Optional[int] = None,
                   metric: str = "ergodic_capacity") -> pd.DataFrame:
    """predictor × SNR for one horizon (the shortest by default)"""
    rows = _shortest_horizon(report, horizon)
    rows = rows[rows["metric"] == metric]
    table = rows.pivot_table(index="predictor", columns="snr_db", values="value", aggfunc="mean")
    return _ordered(table)


def pivot_outage(report: pd.DataFrame, snr_db: float, horizon: Optional[int] = None) -> pd.DataFrame:
    """predictor × R₀ at one SNR; `actual` rows carry the true-channel outage"""
    rows = _shortest_horizon(report, horizon)
    rows = rows[rows["metric"].isin(["outage_predicted", "outage_actual"])]
    rows = rows[np.isclose(rows["snr_db"].astype(float), snr_db)]
    table = rows.pivot_table(index="predictor", columns="target_rate", values="value", aggfunc="mean")
    return _ordered(table)


def summary_table(report: pd.DataFrame, snr_db: Optional[float] = None) -> pd.DataFrame:
    """One row per (predictor, horizon) with prediction errors and link figures at one SNR"""
    keys = report[["predictor", "horizon"]].drop_duplicates()
    errors = report[report["snr_db"].isna()].pivot_table(
        index=["predictor", "horizon"], columns="metric", values="value", aggfunc="mean")
    link = report[report["metric"].isin(["ergodic_capacity", "capacity_gap", "active_tap_capacity"])]
    if snr_db is not None:
        link = link[np.isclose(link["snr_db"].astype(float), snr_db)]
    link = link.pivot_table(index=["predictor", "horizon"], columns="metric", values="value", aggfunc="mean")
    table = keys.set_index(["predictor", "horizon"]).join(errors).join(link).reset_index()
    order = {p: i for i, p in enumerate(PREDICTOR_ORDER)}
    table["_order"] = table["predictor"].map(order).fillna(len(order))
    table = table.sort_values(["horizon", "_order"]).drop(columns="_order")
    if snr_db is not None:
        table.insert(2, "snr_db", snr_db)
    return table.reset_index(drop=True)


def overview(report: pd.DataFrame) -> Dict[str, object]:
    """Figures for the dashboard metric cards"""
    if report.empty:
        return {}
    nmse = report[(report["metric"] == "code_nmse_db") & (report["predictor"] != "perfect_csi")]
    best = nmse.loc[nmse["value"].idxmin()] if not nmse.empty else None
    return {
        "n_rows": int(len(report)),
        "horizons": sorted(int(h) for h in report["horizon"].unique()),
        "predictors": [p for p in PREDICTOR_ORDER if p in set(report["predictor"])],
        "config_hashes": sorted(report["config_hash"].astype(str).unique()),
        "best_predictor": None if best is None else str(best["predictor"]),
        "best_nmse_db": None if best is None else float(best["value"]),
        "best_horizon": None if best is None else int(best["horizon"]),
    }


def load_epoch_log(path: str, value_name: str = "loss") -> pd.DataFrame:
    """`epoch,value` lines (loss or validation log) as a DataFrame"""
    return pd.read_csv(path, header=None, names=["epoch", value_name])


def label_predictors(table: pd.DataFrame) -> pd.DataFrame:
    return table.rename(index=PREDICTOR_LABELS)


def horizon_list(report: pd.DataFrame) -> List[int]:
    return sorted(int(h) for h in report["horizon"].unique())
