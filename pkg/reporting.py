"""
Console tables and styled Excel workbooks for evaluation results.
"""

import logging
import os
import sys
from typing import Mapping, Optional, TextIO

import pandas as pd
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side

logger = logging.getLogger(__name__)

BANNER_WIDTH = 100
MAX_COLUMN_WIDTH = 30
PASS_FILL = PatternFill(start_color="FFC6EFCE", end_color="FFC6EFCE", fill_type="solid")  # light green
FAIL_FILL = PatternFill(start_color="FFFFC7CE", end_color="FFFFC7CE", fill_type="solid")  # light red
PASS_FAIL_COLUMNS = ("correct", "joint_correct")


def _cell_text(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(title: str, df: pd.DataFrame) -> str:
    columns = [str(c) for c in df.columns]
    rows = [[_cell_text(v) for v in record] for record in df.itertuples(index=False)]
    widths = [max([len(c)] + [len(r[i]) for r in rows]) + 2 for i, c in enumerate(columns)]
    lines = ["=" * BANNER_WIDTH, title, "=" * BANNER_WIDTH]
    lines.append("".join(f"{c:<{w}}" for c, w in zip(columns, widths)).rstrip())
    lines.append("-" * BANNER_WIDTH)
    for row in rows:
        lines.append("".join(f"{v:<{w}}" for v, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def print_table(title: str, df: pd.DataFrame, stream: Optional[TextIO] = None):
    print(format_table(title, df), file=stream or sys.stdout)


def _is_pass_fail(value) -> bool:
    return isinstance(value, bool) or str(value).strip().lower() in ("true", "false")


def save_report(sheets: Mapping[str, pd.DataFrame], path: str) -> str:
    """One styled worksheet per entry; boolean pass/fail columns are filled green or red."""
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        with pd.ExcelWriter(path, engine="openpyxl") as writer:
            thin_border = Border(
                left=Side(style="thin"),
                right=Side(style="thin"),
                top=Side(style="thin"),
                bottom=Side(style="thin"),
            )
            for name, df in sheets.items():
                sheet_name = str(name)[:31]
                df.to_excel(writer, index=False, sheet_name=sheet_name)
                worksheet = writer.sheets[sheet_name]
                flagged = {i + 1 for i, c in enumerate(df.columns) if c in PASS_FAIL_COLUMNS}

                for row in worksheet.iter_rows():
                    for cell in row:
                        cell.border = thin_border
                        cell.alignment = Alignment(horizontal="center", vertical="center")
                        if cell.row == 1:
                            cell.font = Font(bold=True)
                            continue
                        if cell.column in flagged and _is_pass_fail(cell.value):
                            passed = cell.value is True or str(cell.value).strip().lower() == "true"
                            cell.fill = PASS_FILL if passed else FAIL_FILL

                for col in worksheet.columns:
                    longest = max(len(str(cell.value)) if cell.value is not None else 0 for cell in col)
                    worksheet.column_dimensions[col[0].column_letter].width = min(longest + 2, MAX_COLUMN_WIDTH)
    except OSError as e:
        logger.error(f"Could not write report {path}: {e}")
        raise
    logger.info(f"Saved report with {len(sheets)} sheet(s) to {path}")
    return path
