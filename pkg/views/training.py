"""
Training artefacts page: loss logs, basis and checkpoint summaries
"""

from typing import Callable, Optional, Tuple

import pandas as pd
import streamlit as st

from components.metrics import display_basis_metrics, display_checkpoint_metrics
from utils.data_processing import load_epoch_log
from utils.errors import FormatError
from utils.file_formats import read_basis, read_model


def _load(reader: Callable, path: str) -> Tuple[Optional[object], Optional[str]]:
    if not path:
        return None, None
    try:
        return reader(path), None
    except FileNotFoundError:
        return None, f"Không tìm thấy file: {path}"
    except (FormatError, OSError, pd.errors.ParserError) as exc:
        return None, f"Lỗi khi đọc {path}: {exc}"


def training_page():
    st.title("🧠 Huấn luyện")
    with st.expander("📂 Artefacts", expanded=True):
        col1, col2 = st.columns(2)
        with col1:
            loss_path = st.text_input("Loss log (epoch,loss)")
            val_path = st.text_input("Validation log (epoch,val_nmse_db)")
        with col2:
            basis_path = st.text_input("Basis (.ddpb)")
            model_path = st.text_input("Checkpoint (.ddmd)")

    losses, err = _load(load_epoch_log, loss_path)
    if err:
        st.error(err)
    val, err = _load(lambda p: load_epoch_log(p, "val_nmse_db"), val_path)
    if err:
        st.error(err)
    basis, err = _load(read_basis, basis_path)
    if err:
        st.error(err)
    ckpt, err = _load(read_model, model_path)
    if err:
        st.error(err)

    if basis is not None:
        st.subheader("🗜️ PCA basis")
        display_basis_metrics(basis)
    if ckpt is not None:
        st.subheader("🧠 Checkpoint")
        last = float(losses["loss"].iloc[-1]) if losses is not None and not losses.empty else None
        display_checkpoint_metrics(ckpt, last)

    if losses is not None:
        table = losses if val is None else losses.merge(val, on="epoch", how="left")
        st.subheader("📉 Epochs")
        st.write(f"**Số epoch:** {len(table)}")
        st.dataframe(table, use_container_width=True, height=400)
        st.download_button("📥 Download CSV", data=table.to_csv(index=False),
                           file_name="epochs.csv", mime="text/csv")
    elif basis is None and ckpt is None:
        st.info("ℹ️ Nhập đường dẫn tới loss log, basis hoặc checkpoint để xem chi tiết")
