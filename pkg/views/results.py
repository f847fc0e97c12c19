"""
Results page: browse one or more report CSV files
"""

import pandas as pd
import streamlit as st

from components.metrics import display_overview_metrics
from components.tables import display_report_tables
from utils.data_processing import horizon_list, load_reports, overview
from utils.errors import FormatError


def display_welcome_message():
    """Hiển thị thông báo chào mừng"""
    st.markdown("""
    <div class="welcome-box">
        <h2>📡 Delay–Doppler forecasting results</h2>
        <h4>📋 Hướng dẫn sử dụng:</h4>
        <ol>
            <li>🧪 <strong>Chạy thí nghiệm:</strong> <code>python -m utils.experiment eval ... --out report.csv</code></li>
            <li>📂 <strong>Tải lên:</strong> một hoặc nhiều file report CSV</li>
            <li>📊 <strong>Xem kết quả:</strong> NMSE, capacity, outage theo predictor</li>
        </ol>
    </div>
    """, unsafe_allow_html=True)


def results_page():
    st.title("📊 Kết quả thí nghiệm")
    uploads = st.file_uploader("Report CSV", type=["csv"], accept_multiple_files=True)
    if not uploads:
        display_welcome_message()
        return

    try:
        report = load_reports(uploads)
    except (FormatError, pd.errors.ParserError) as exc:
        st.error(f"❌ {exc}")
        return

    render_report(report)


def render_report(report: pd.DataFrame):
    """Hiển thị tổng quan và bảng kết quả của report"""
    if report.empty:
        st.warning("⚠️ Report không có dòng kết quả nào")
        return
    display_overview_metrics(overview(report))
    snr_values = sorted(report["snr_db"].dropna().unique())
    horizons = horizon_list(report)
    col1, col2 = st.columns(2)
    with col1:
        snr_db = st.select_slider("SNR (dB)", options=snr_values, value=snr_values[len(snr_values) // 2]) \
            if snr_values else 0.0
    with col2:
        horizon = st.selectbox("Horizon M", horizons)
    display_report_tables(report, float(snr_db), int(horizon))
