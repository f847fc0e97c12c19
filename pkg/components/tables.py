"""
Table components for the results dashboard
"""

from datetime import datetime

import pandas as pd
import streamlit as st

from utils.data_processing import (
    label_predictors,
    pivot_capacity,
    pivot_outage,
    pivot_prediction_errors,
    summary_table,
)


def _download(df: pd.DataFrame, stem: str, key: str):
    st.download_button(
        label="📥 Download CSV",
        data=df.to_csv(index=True),
        file_name=f"{stem}_{datetime.now().strftime('%Y%m%d')}.csv",
        mime="text/csv",
        key=key,
    )


def display_report_tables(report: pd.DataFrame, snr_db: float, horizon: int):
    """Hiển thị bảng kết quả"""
    if report.empty:
        st.warning("⚠️ Không có dữ liệu để hiển thị")
        return

    st.subheader("📋 Result Tables")
    tab1, tab2, tab3, tab4 = st.tabs(["🎯 NMSE", "📡 Capacity", "📉 Outage", "📋 Summary"])

    with tab1:
        code = label_predictors(pivot_prediction_errors(report, "code_nmse_db"))
        channel = label_predictors(pivot_prediction_errors(report, "channel_nmse_db"))
        st.write("**Code NMSE (dB), predictor × horizon**")
        st.dataframe(code.style.format("{:.2f}"), use_container_width=True)
        st.write("**Channel NMSE (dB), predictor × horizon**")
        st.dataframe(channel.style.format("{:.2f}"), use_container_width=True)
        _download(code, "code_nmse", "dl_code_nmse")

    with tab2:
        cap = label_predictors(pivot_capacity(report, horizon))
        gap = label_predictors(pivot_capacity(report, horizon, metric="capacity_gap"))
        st.write(f"**Ergodic capacity (bit/s/Hz), M = {horizon}**")
        st.dataframe(cap.style.format("{:.3f}"), use_container_width=True)
        st.write("**Capacity gap to the actual channel**")
        st.dataframe(gap.style.format("{:.3f}"), use_container_width=True)
        _download(cap, "capacity", "dl_capacity")

    with tab3:
        outage = label_predictors(pivot_outage(report, snr_db, horizon))
        st.write(f"**Outage probability at {snr_db:g} dB, M = {horizon}**")
        st.dataframe(outage.style.format("{:.3f}"), use_container_width=True)
        _download(outage, "outage", "dl_outage")

    with tab4:
        summary = summary_table(report, snr_db)
        st.write(f"**👥 Predictor × horizon rows:** {len(summary)}")
        st.dataframe(summary, use_container_width=True, height=400)
        _download(summary, "summary", "dl_summary")
