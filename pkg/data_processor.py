import io
import logging
import os
from typing import Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

# Display columns of the formatted ablation table, in order
ABLATION_COLUMNS = ['Methods', 'Setting', 'Dice (%)', 'Jaccard (%)', 'HD95 (mm)', 'ASSD (mm)']

_METRIC_LABELS = {
    'dice': 'Dice (%)',
    'jaccard': 'Jaccard (%)',
    'hd95': 'HD95 (mm)',
    'assd': 'ASSD (mm)',
}


def _mean_std(mean: float, std: float, digits: int = 2) -> str:
    if mean is None or (isinstance(mean, float) and np.isnan(mean)):
        return "-"
    if std is None or (isinstance(std, float) and np.isnan(std)):
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def format_ablation_table(df: pd.DataFrame, digits: int = 2) -> pd.DataFrame:
    """
    Turn an ablation table with <metric>_mean / <metric>_std columns into
    display rows with "mean ± std" strings.

    Args:
        df: Output of trainer.summarize_cells
        digits: Decimal places

    Returns:
        A dataframe with ABLATION_COLUMNS
    """
    rows = []
    for _, record in df.iterrows():
        row = {'Methods': record['method'], 'Setting': record['setting']}
        for metric, label in _METRIC_LABELS.items():
            row[label] = _mean_std(record.get(f'{metric}_mean'), record.get(f'{metric}_std'), digits)
        rows.append(row)
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)


def clean_nan_values(df: pd.DataFrame) -> pd.DataFrame:
    """Replace NaN with empty strings for spreadsheet export."""
    return df.astype(object).where(pd.notna(df), "")


def generate_excel(df: pd.DataFrame, sheet_name: str = 'Ablation') -> io.BytesIO:
    """
    Generate an Excel workbook from a report table.

    Args:
        df: The table to export
        sheet_name: Worksheet name

    Returns:
        BytesIO object containing the Excel file
    """
    export_df = clean_nan_values(df.reset_index(drop=True))
    output = io.BytesIO()

    try:
        with pd.ExcelWriter(output, engine='xlsxwriter', engine_kwargs={'options': {'nan_inf_to_errors': True}}) as writer:
            export_df.to_excel(writer, sheet_name=sheet_name, index=False)

            workbook = writer.book
            worksheet = writer.sheets[sheet_name]

            header_format = workbook.add_format({
                'bold': True,
                'text_wrap': True,
                'valign': 'top',
                'fg_color': '#D7E4BC',
                'border': 1
            })

            for col_num, value in enumerate(export_df.columns.values):
                worksheet.write(0, col_num, value, header_format)

            column_widths = {
                'Methods': 18,
                'method': 18,
                'Setting': 9,
                'setting': 9,
                'case': 12,
            }
            for i, col in enumerate(export_df.columns):
                worksheet.set_column(i, i, column_widths.get(col, 16))

        output.seek(0)
    except Exception as e:
        logger.error(f"Error generating Excel file: {e}")
        raise

    return output


def generate_csv(df: pd.DataFrame) -> io.StringIO:
    """
    Generate CSV text from a report table.

    Returns:
        StringIO object containing the CSV file
    """
    output = io.StringIO()
    df.to_csv(output, index=False)
    output.seek(0)
    return output


def read_report(path: str, sheet_name: Optional[str] = None) -> pd.DataFrame:
    """Read a report table back from CSV or xlsx."""
    ext = os.path.splitext(path)[1].lower()
    if ext == '.csv':
        return pd.read_csv(path)
    if ext in ('.xlsx', '.xlsm'):
        return pd.read_excel(path, sheet_name=sheet_name or 0, engine='openpyxl')
    raise ValueError(f"Unsupported report format '{ext}' (expected .csv or .xlsx)")


def filter_dataframe(df: pd.DataFrame, column: str, value: Optional[str] = None) -> pd.DataFrame:
    """
    Filter the dataframe based on a column value.

    Args:
        df: The input dataframe
        column: The column to filter on
        value: The value to filter for (None returns the dataframe unchanged)

    Returns:
        A filtered dataframe
    """
    if value is None or column not in df.columns:
        return df
    return df[df[column].astype(str) == str(value)]
