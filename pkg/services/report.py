# services/report.py: PDF rendering of the validation results.

import os
from io import BytesIO
from typing import List, Optional

from reportlab.lib import colors
from reportlab.lib.pagesizes import A4, landscape
from reportlab.lib.styles import getSampleStyleSheet
from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle

from services.helpers import get_logger
from services.validate import ValidationResult

logger = get_logger("report")

HEADER_STYLE = [
    ("BACKGROUND", (0, 0), (-1, 0), colors.HexColor("#1e3a8a")),
    ("TEXTCOLOR", (0, 0), (-1, 0), colors.white),
    ("GRID", (0, 0), (-1, -1), 0.25, colors.grey),
    ("FONTSIZE", (0, 0), (-1, -1), 8),
]


def _table(rows: List[List[str]]) -> Table:
    table = Table(rows, repeatRows=1)
    table.setStyle(TableStyle(HEADER_STYLE))
    return table


def render_validation_pdf(result: ValidationResult, filename: Optional[str] = None, subtitle: str = "") -> bytes:
    """
    Build the validation report. The document is rendered in reportlab's
    invariant mode and carries no dates, so identical results give identical bytes.
    """
    buffer = BytesIO()
    doc = SimpleDocTemplate(
        buffer,
        pagesize=landscape(A4),
        invariant=1,
        title="Activity chain reconstruction report",
        author="activity-chains",
        creator="activity-chains",
    )
    styles = getSampleStyleSheet()
    story = [Paragraph("<b>Activity chain reconstruction: validation</b>", styles["Title"]), Spacer(1, 12)]
    if subtitle:
        story += [Paragraph(subtitle, styles["Normal"]), Spacer(1, 12)]

    if not result.accuracy:
        story.append(Paragraph("No validated activity types.", styles["Normal"]))
    else:
        story.append(Paragraph("Reconstruction accuracy (1 - mean hourly MAPE)", styles["Heading2"]))
        story.append(_table([["Activity", "Accuracy"]] + [[k, f"{v:.4f}"] for k, v in sorted(result.accuracy.items())]))
        story.append(Spacer(1, 18))

        mape = result.mape_frame()
        story.append(Paragraph("Hourly MAPE", styles["Heading2"]))
        rows = [["Hour"] + list(mape.columns)]
        for hour, row in mape.iterrows():
            rows.append([f"{int(hour):02d}:00"] + ["" if v != v else f"{v:.3f}" for v in row])
        story.append(_table(rows))
        story.append(Spacer(1, 18))

    story.append(Paragraph("Bootstrap confidence-interval widths", styles["Heading2"]))
    if result.ci_widths is None:
        story.append(Paragraph(f"Not computed: {result.ci_error or 'no data'}", styles["Normal"]))
    else:
        rows: List[List[str]] = [["Activity", "Mean width", "Max width"]]
        for name, row in result.ci_widths.iterrows():
            rows.append([str(name), f"{row.mean():.5f}", f"{row.max():.5f}"])
        story.append(_table(rows))

    doc.build(story)
    pdf = buffer.getvalue()
    buffer.close()

    if filename:
        os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
        with open(filename, "wb") as f:
            f.write(pdf)
        logger.info(f"📄 Validation report written to {filename}")
    return pdf
