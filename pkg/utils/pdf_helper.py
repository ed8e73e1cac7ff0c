"""PDF export helpers for experiment reports using ReportLab."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, List, Mapping, Sequence

from reportlab.lib import colors
from reportlab.lib.pagesizes import landscape, letter
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from utils.export_csv import format_value


def _build_table(headers: Sequence[str], rows: Iterable[Sequence]) -> Table:
    data: List[List[str]] = [list(headers)] + [[format_value(v, 4) for v in r] for r in rows]
    table = Table(data, repeatRows=1)
    table.setStyle(
        TableStyle(
            [
                ("BACKGROUND", (0, 0), (-1, 0), colors.lightgrey),
                ("TEXTCOLOR", (0, 0), (-1, 0), colors.black),
                ("ALIGN", (0, 0), (-1, -1), "LEFT"),
                ("GRID", (0, 0), (-1, -1), 0.5, colors.grey),
                ("FONTSIZE", (0, 0), (-1, -1), 7),
                ("BOTTOMPADDING", (0, 0), (-1, 0), 6),
            ]
        )
    )
    return table


def export_report_pdf(
    title: str,
    sections: Mapping[str, tuple[Sequence[str], Sequence[Sequence[object]]]],
    filepath: Path | str,
    notes: Sequence[str] = (),
) -> Path:
    """One heading and table per section; ``invariant=1`` keeps the bytes reproducible."""
    styles = getSampleStyleSheet()
    story = [Paragraph(title, styles["Heading1"]), Spacer(1, 12)]
    for note in notes:
        story.append(Paragraph(note, styles["Normal"]))
    story.append(Spacer(1, 12))
    for heading, (headers, rows) in sections.items():
        story.append(Paragraph(heading, styles["Heading2"]))
        story.append(_build_table(headers, rows))
        story.append(Spacer(1, 12))
    doc = SimpleDocTemplate(
        str(filepath),
        pagesize=landscape(letter),
        leftMargin=24,
        rightMargin=24,
        topMargin=24,
        bottomMargin=24,
        invariant=1,
    )
    doc.build(story)
    return Path(filepath)
