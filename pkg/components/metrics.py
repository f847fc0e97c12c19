"""
Metric cards for the results dashboard
"""

from typing import Any, Dict, Optional

import streamlit as st

from utils.compression import PcaBasis
from utils.data_processing import PREDICTOR_LABELS
from utils.file_formats import Checkpoint


def display_overview_metrics(summary: Dict[str, Any]):
    """Hiển thị metrics tổng quan của report"""
    if not summary:
        st.warning("⚠️ Report không có dữ liệu")
        return

    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.metric(label="📄 Report rows", value=f"{summary['n_rows']:,}")
    with col2:
        st.metric(label="🔭 Horizons", value=", ".join(str(h) for h in summary["horizons"]),
                  help="Prediction lengths M found in the report")
    with col3:
        best = summary.get("best_predictor")
        st.metric(label="🏆 Best code NMSE",
                  value="n/a" if best is None else f"{summary['best_nmse_db']:.2f} dB",
                  help=None if best is None else f"{PREDICTOR_LABELS.get(best, best)} at M={summary['best_horizon']}")
    with col4:
        hashes = summary.get("config_hashes", [])
        st.metric(label="🔑 Config", value=hashes[0] if len(hashes) == 1 else f"{len(hashes)} configs")


def display_basis_metrics(basis: PcaBasis):
    """Ranks and retained energy of a fitted basis"""
    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.metric(label="📡 r_s", value=basis.r_s, help=f"Retained {basis.spatial_ratio:.4f} of spatial energy")
    with col2:
        st.metric(label="🌀 r_d", value=basis.r_d, help=f"Retained {basis.doppler_ratio:.4f} of delay–Doppler energy")
    with col3:
        st.metric(label="🗜️ Code size", value=basis.code_size, help=f"{100 * basis.reduction:.2f}% reduction")
    with col4:
        st.metric(label="🎯 Reference port", value=basis.ref_port + 1)


def display_checkpoint_metrics(ckpt: Checkpoint, last_loss: Optional[float] = None):
    cfg = ckpt.model.config
    col1, col2, col3, col4 = st.columns(4)
    with col1:
        st.metric(label="🧠 Parameters", value=f"{ckpt.model.n_params:,}")
    with col2:
        st.metric(label="🔗 LoRA rank", value=cfg.lora_rank, help=f"α = {cfg.lora_alpha:g}")
    with col3:
        st.metric(label="⏱️ N → M", value=f"{cfg.past_window} → {cfg.horizon}")
    with col4:
        st.metric(label="📉 Final loss", value="n/a" if last_loss is None else f"{last_loss:.4g}")
