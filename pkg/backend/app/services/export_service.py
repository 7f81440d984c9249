"""
Module: services.export_service
-------------------------------

Export of result tables (training logs, ablation runs and summaries, check
reports) as CSV, JSON, PDF or an aligned plain-text table.

Key Responsibilities:
- CSV: one header row from the first record's keys, one row per record.
  This is the machine-readable output of ``train --log`` and ``ablate``.
- JSON: the same records, optionally pretty-printed.
- PDF: a paginated summary built with ReportLab, for sharing ablation tables.
- Text: a fixed-width table for the terminal.

Error Handling:
- Empty inputs raise ValueError; an export with no rows is always a bug in
  the caller.
"""

import csv
import io
import json
import logging
from pathlib import Path
from typing import Dict, List, Union

from reportlab.lib.pagesizes import letter
from reportlab.pdfgen import canvas

logger = logging.getLogger(__name__)


def export_to_csv(data: List[Dict]) -> io.StringIO:
    """Generate CSV content from list of dictionaries."""
    if not data:
        raise ValueError("No data available for CSV export.")

    output = io.StringIO()
    writer = csv.DictWriter(output, fieldnames=list(data[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(data)
    output.seek(0)
    return output


def export_to_json(data: List[Dict], pretty: bool = False) -> str:
    """Generate JSON string from list of dictionaries."""
    if not data:
        raise ValueError("No data available for JSON export.")

    return json.dumps(data, indent=4 if pretty else None)


def export_to_pdf(data: List[Dict], title: str = "protoocc-desk results") -> io.BytesIO:
    """Generate a paginated PDF table from list of dictionaries."""
    if not data:
        raise ValueError("No data available for PDF export.")

    buffer = io.BytesIO()
    p = canvas.Canvas(buffer, pagesize=letter)
    width, height = letter

    y = height - 40
    p.setFont("Helvetica-Bold", 14)
    p.drawString(50, y, title)
    p.setFont("Courier", 8)
    y -= 30

    for line in format_table(data).splitlines():
        p.drawString(50, y, line)
        y -= 12
        if y < 50:
            p.showPage()
            p.setFont("Courier", 8)
            y = height - 40

    p.save()
    buffer.seek(0)
    return buffer


def _cell(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(data: List[Dict]) -> str:
    """Fixed-width text table with a header rule."""
    if not data:
        raise ValueError("No data available for table export.")
    columns = list(data[0].keys())
    cells = [[_cell(row.get(c)) for c in columns] for row in data]
    widths = [max(len(c), *(len(r[i]) for r in cells)) for i, c in enumerate(columns)]
    header = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    rule = "  ".join("-" * w for w in widths)
    body = ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join([header, rule] + body)


def write_export(data: List[Dict], path: Union[str, Path]) -> Path:
    """Write ``data`` in the format given by the file suffix (.csv, .json, .pdf, .txt)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".csv":
        path.write_text(export_to_csv(data).getvalue(), encoding="utf-8")
    elif suffix == ".json":
        path.write_text(export_to_json(data, pretty=True), encoding="utf-8")
    elif suffix == ".pdf":
        path.write_bytes(export_to_pdf(data, title=path.stem).getvalue())
    elif suffix == ".txt":
        path.write_text(format_table(data) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"Unsupported export format {suffix!r}")
    logger.info(f"Exported {len(data)} rows to {path}")
    return path
