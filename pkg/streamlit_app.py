#!/usr/bin/env python3
"""
Results browser for delay–Doppler forecasting experiments
"""

import streamlit as st
from views.results import results_page
from views.training import training_page

# Page config
st.set_page_config(
    page_title="DD Channel Forecasting",
    page_icon="📡",
    layout="wide",
    initial_sidebar_state="expanded"
)

# Custom CSS
st.markdown("""
<style>
    .metric-card {
        background-color: #f0f2f6;
        border-radius: 10px;
        padding: 1rem;
        border-left: 5px solid #1f77b4;
    }
    .welcome-box {
        background-color: #fff3cd;
        border-radius: 8px;
        padding: 20px;
        margin: 20px 0;
        border-left: 4px solid #ffc107;
    }
</style>
""", unsafe_allow_html=True)


def main():
    """Main function to run the Streamlit app"""
    page = st.sidebar.radio("Chọn trang:", ["Kết quả", "Huấn luyện"])

    if page == "Kết quả":
        results_page()
    elif page == "Huấn luyện":
        training_page()


if __name__ == "__main__":
    main()
