import os

import numpy as np
import pandas as pd
import streamlit as st

import config
from boundary_loss import dfb_map
from data_processor import filter_dataframe, format_ablation_table, generate_csv, generate_excel, read_report
from db_handler import get_run_history, initialize_database, load_run_metrics
from utils import get_file_size, slice_to_uint8
from volumes import load_volume

# Set page configuration
st.set_page_config(
    page_title="Segmentation Results Viewer",
    page_icon="🫀",
    layout="wide",
    initial_sidebar_state="expanded"
)

# Initialize the run registry
db_success, db_message = initialize_database()
if not db_success:
    st.error(f"Failed to initialize run registry: {db_message}")

if 'data_dir' not in st.session_state:
    st.session_state.data_dir = os.path.join(config.DATA_DIR, "phantoms")
if 'ablation_dir' not in st.session_state:
    st.session_state.ablation_dir = os.path.join(config.DATA_DIR, "ablation")

# Header
st.title("Volumetric Segmentation Results")
st.markdown("""
Browse synthetic volumes with their masks and boundary weight maps, inspect
ablation tables, and review the run registry.
""")

# Sidebar
with st.sidebar:
    st.header("Controls")
    mode = st.radio("View", ["Volumes", "Ablation Report", "Run History"])

    with st.expander("📁 Data Storage Info", expanded=True):
        st.text_input("Dataset directory", key="data_dir")
        st.text_input("Ablation output directory", key="ablation_dir")
        if os.path.exists(config.REGISTRY_FILE):
            st.write(f"Run registry: `{config.REGISTRY_FILE}` ({get_file_size(config.REGISTRY_FILE)})")
        else:
            st.write("Run registry: not created yet")


@st.cache_data
def _load_case(stem: str):
    sample = load_volume(stem)
    return sample.image, sample.mask, sample.spacing


@st.cache_data
def _weights(mask: np.ndarray, k: int) -> np.ndarray:
    return dfb_map(mask, k).weights


def _case_names(data_dir: str):
    if not os.path.isdir(data_dir):
        return []
    return sorted(f[:-5] for f in os.listdir(data_dir)
                  if f.endswith(".json") and f.startswith("case_") and not f.endswith("_mask.json"))


if mode == "Volumes":
    cases = _case_names(st.session_state.data_dir)
    if not cases:
        st.info("No volumes found. Generate some with `volseg synth --out <dir>`.")
    else:
        case = st.selectbox("Case", cases)
        image, mask, spacing = _load_case(os.path.join(st.session_state.data_dir, case))
        col_axis, col_k = st.columns(2)
        with col_axis:
            axis = st.selectbox("Slicing axis", [2, 1, 0], format_func=lambda a: "HWD"[a])
        with col_k:
            k = st.select_slider("DFB neighborhood k", options=[3, 5, 7], value=config.DEFAULT_DFB_K)
        index = st.slider("Slice", 0, image.shape[axis] - 1, image.shape[axis] // 2)

        weights = _weights(mask, k)
        col1, col2, col3 = st.columns(3)
        with col1:
            st.image(slice_to_uint8(image, axis, index), caption="Image", use_container_width=True, clamp=True)
        with col2:
            st.image(slice_to_uint8(mask, axis, index), caption="Mask", use_container_width=True, clamp=True)
        with col3:
            st.image(slice_to_uint8(weights, axis, index), caption=f"DFB weights (k={k})",
                     use_container_width=True, clamp=True)

        st.write(f"Shape {image.shape}, spacing {spacing} mm, foreground {100 * mask.mean():.2f}%, "
                 f"max weight {weights.max():.0f}")

elif mode == "Ablation Report":
    table_path = os.path.join(st.session_state.ablation_dir, "ablation_table.csv")
    cells_path = os.path.join(st.session_state.ablation_dir, "cells.csv")
    if not os.path.exists(table_path):
        st.info("No ablation table found. Run `volseg ablate --config <file> --out <dir>` first.")
    else:
        table = read_report(table_path)
        settings = ["All"] + sorted(table["setting"].unique())
        setting = st.selectbox("Setting", settings)
        shown = table if setting == "All" else filter_dataframe(table, "setting", setting)
        st.subheader("Ablation table")
        st.dataframe(format_ablation_table(shown), use_container_width=True)

        col1, col2 = st.columns(2)
        with col1:
            st.download_button(
                label="Download CSV",
                data=generate_csv(shown).getvalue(),
                file_name="ablation_table.csv",
                mime="text/csv"
            )
        with col2:
            st.download_button(
                label="Download Excel",
                data=generate_excel(format_ablation_table(shown)).getvalue(),
                file_name="ablation_table.xlsx",
                mime="application/vnd.openxmlformats-officedocument.spreadsheetml.sheet"
            )

        if os.path.exists(cells_path):
            with st.expander("Per-seed results"):
                st.dataframe(pd.read_csv(cells_path), use_container_width=True)

        if {"method", "dice_mean"} <= set(shown.columns):
            st.bar_chart(shown.set_index("method")["dice_mean"])

else:
    history = get_run_history(200)
    if not history:
        st.info("No runs recorded yet.")
    else:
        metrics_df = load_run_metrics()
        kind = st.selectbox("Run kind", ["All"] + sorted(metrics_df["kind"].dropna().unique()))
        shown = metrics_df if kind == "All" else filter_dataframe(metrics_df, "kind", kind)
        st.dataframe(shown, use_container_width=True)
        st.download_button(
            label="Download run history (CSV)",
            data=generate_csv(shown).getvalue(),
            file_name="runs.csv",
            mime="text/csv"
        )
