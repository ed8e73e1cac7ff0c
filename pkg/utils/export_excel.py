"""Excel export of the report tables (one sheet per table)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

from openpyxl import Workbook
from openpyxl.styles import Border, Font, Side
from openpyxl.utils import get_column_letter


def _cell_value(value: object) -> object:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if hasattr(value, "item"):  # numpy scalars
        return _cell_value(value.item())
    return value


def _auto_width(ws) -> None:
    for column_cells in ws.columns:
        max_length = 0
        column = get_column_letter(column_cells[0].column)
        for cell in column_cells:
            cell_length = len(str(cell.value)) if cell.value is not None else 0
            max_length = max(max_length, cell_length)
        ws.column_dimensions[column].width = min(max_length + 2, 50)


def export_tables_to_excel(tables: Mapping[str, tuple[Sequence[str], Sequence[Sequence[object]]]], filepath: Path | str) -> Path:
    """Write ``{sheet title: (headers, rows)}`` as a bold-headed, bordered workbook."""
    wb = Workbook()
    wb.remove(wb.active)
    thin = Border(
        left=Side(style="thin", color="DDDDDD"),
        right=Side(style="thin", color="DDDDDD"),
        top=Side(style="thin", color="DDDDDD"),
        bottom=Side(style="thin", color="DDDDDD"),
    )
    for title, (headers, rows) in tables.items():
        ws = wb.create_sheet(title=title[:31])
        ws.append(list(headers))
        for cell in ws[1]:
            cell.font = Font(bold=True)
            cell.border = thin
        for row in rows:
            ws.append([_cell_value(v) for v in row])
        for row in ws.iter_rows(min_row=2, max_row=ws.max_row):
            for cell in row:
                cell.border = thin
        _auto_width(ws)
    if not wb.sheetnames:
        wb.create_sheet(title="empty")
    wb.save(filepath)
    return Path(filepath)
