"""
PDF Report Generator for Experiment Summaries
Renders averaged error tables and run diagnostics of an experiment bundle
"""

from reportlab.lib.pagesizes import letter
from reportlab.lib.units import inch
from reportlab.lib import colors
from reportlab.lib.styles import getSampleStyleSheet, ParagraphStyle
from reportlab.platypus import SimpleDocTemplate, Paragraph, Spacer, Table, TableStyle
from reportlab.lib.enums import TA_CENTER, TA_RIGHT
import io
from typing import List

import pandas as pd

from services.experiment import ExperimentBundle


class PDFReportGenerator:
    """Generate experiment summary reports as PDFs"""

    def __init__(self):
        """Initialize PDF generator with custom styles"""
        self.styles = getSampleStyleSheet()
        self._create_custom_styles()

    def _create_custom_styles(self):
        """Define custom paragraph styles for the report"""

        # Title style
        self.styles.add(ParagraphStyle(
            name='ReportTitle',
            parent=self.styles['Heading1'],
            fontSize=22,
            textColor=colors.HexColor('#1e3a5f'),
            spaceAfter=12,
            alignment=TA_CENTER,
            fontName='Helvetica-Bold'
        ))

        # Section header style
        self.styles.add(ParagraphStyle(
            name='SectionHeader',
            parent=self.styles['Heading2'],
            fontSize=15,
            textColor=colors.HexColor('#4a9eff'),
            spaceAfter=10,
            spaceBefore=15,
            fontName='Helvetica-Bold'
        ))

        # Body text style
        self.styles['BodyText'].fontSize = 10
        self.styles['BodyText'].leading = 14
        self.styles['BodyText'].textColor = colors.HexColor('#2d2d2d')
        self.styles['BodyText'].spaceAfter = 8

        # Metadata style
        self.styles.add(ParagraphStyle(
            name='Metadata',
            parent=self.styles['Normal'],
            fontSize=9,
            textColor=colors.HexColor('#7a7a7a'),
            alignment=TA_RIGHT,
            spaceAfter=20
        ))

    def _add_header(self, canvas, doc):
        """Add header to each page"""
        canvas.saveState()

        # Header background
        canvas.setFillColor(colors.HexColor('#1e3a5f'))
        canvas.rect(0, letter[1] - 0.8*inch, letter[0], 0.8*inch, fill=True, stroke=False)

        # Header text
        canvas.setFillColor(colors.white)
        canvas.setFont('Helvetica-Bold', 16)
        canvas.drawString(0.75*inch, letter[1] - 0.5*inch, "Spatio-temporal Bernoulli Experiments")

        # Page number
        canvas.setFont('Helvetica', 9)
        canvas.drawRightString(letter[0] - 0.75*inch, 0.5*inch, f"Page {doc.page}")

        canvas.restoreState()

    def _create_table(self, frame: pd.DataFrame) -> Table:
        """Render a DataFrame as a striped table"""
        def cell(value):
            if isinstance(value, float):
                return "" if pd.isna(value) else f"{value:.4g}"
            return "" if value is None else str(value)

        data: List[List[str]] = [list(frame.columns)]
        data += [[cell(v) for v in row] for row in frame.itertuples(index=False)]

        table = Table(data, repeatRows=1)
        table.setStyle(TableStyle([
            ('BACKGROUND', (0, 0), (-1, 0), colors.HexColor('#2d5a7b')),
            ('TEXTCOLOR', (0, 0), (-1, 0), colors.white),
            ('FONTNAME', (0, 0), (-1, 0), 'Helvetica-Bold'),
            ('FONTSIZE', (0, 0), (-1, -1), 8),
            ('ALIGN', (0, 0), (-1, -1), 'CENTER'),
            ('ROWBACKGROUNDS', (0, 1), (-1, -1), [colors.white, colors.HexColor('#eef2f7')]),
            ('GRID', (0, 0), (-1, -1), 0.25, colors.HexColor('#9aa5b1')),
            ('TOPPADDING', (0, 0), (-1, -1), 4),
            ('BOTTOMPADDING', (0, 0), (-1, -1), 4),
        ]))
        return table

    def generate_pdf(self, bundle: ExperimentBundle) -> bytes:
        """
        Generate PDF from an experiment bundle

        Args:
            bundle: experiment bundle

        Returns:
            PDF file as bytes
        """
        buffer = io.BytesIO()

        # invariant output: no timestamps or random ids in the file
        doc = SimpleDocTemplate(
            buffer,
            pagesize=letter,
            rightMargin=0.75*inch,
            leftMargin=0.75*inch,
            topMargin=1*inch,
            bottomMargin=0.75*inch,
            invariant=1,
            title=f"{bundle.name} summary",
        )

        story = []
        config = bundle.config
        story.append(Paragraph("EXPERIMENT SUMMARY", self.styles['ReportTitle']))
        story.append(Spacer(1, 0.2*inch))

        model = config.get("model", {})
        metadata = (f"Experiment: {bundle.name} | Scenario: {config.get('scenario', '-')} | "
                    f"K={model.get('K', '-')}, M={model.get('M', '-')}, d={model.get('d', '-')} | "
                    f"N={config.get('N', '-')} | seed={config.get('seed', '-')}")
        story.append(Paragraph(metadata, self.styles['Metadata']))

        # Averaged errors
        story.append(Paragraph("Averaged Estimation Errors", self.styles['SectionHeader']))
        summary = bundle.summary()
        if summary.empty:
            story.append(Paragraph("No completed replications.", self.styles['BodyText']))
        else:
            story.append(self._create_table(summary))

        # Run diagnostics
        story.append(Paragraph("Run Diagnostics", self.styles['SectionHeader']))
        runs = bundle.runs_frame()
        failed = sum(r.error is not None for r in bundle.records)
        story.append(Paragraph(
            f"{len(bundle.records)} replication(s), {failed} failed.", self.styles['BodyText']))
        if not runs.empty:
            columns = ["replication", "estimator", "converged", "iterations", "residual"]
            story.append(self._create_table(runs[columns]))

        # Support recovery
        exact = [r.support[name]["exact"] for r in bundle.records for name in r.support]
        if exact:
            story.append(Paragraph("Support Recovery", self.styles['SectionHeader']))
            story.append(Paragraph(
                f"Exact edge-set recovery in {sum(exact)} of {len(exact)} fits "
                "(largest-gap threshold on max over lags of |interaction|).",
                self.styles['BodyText']))

        doc.build(story, onFirstPage=self._add_header, onLaterPages=self._add_header)

        pdf_bytes = buffer.getvalue()
        buffer.close()

        return pdf_bytes


# Convenience function
def generate_experiment_pdf(bundle: ExperimentBundle) -> bytes:
    """
    Generate experiment summary PDF

    Args:
        bundle: experiment bundle

    Returns:
        PDF file as bytes
    """
    generator = PDFReportGenerator()
    return generator.generate_pdf(bundle)
