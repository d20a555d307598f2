from __future__ import annotations
import os, hashlib
from docx import Document
from docx.shared import Pt
from docx.enum.text import WD_ALIGN_PARAGRAPH

from core.exporter import table_rows


class ReportWriter:
    """report.docx: metrics tables, sweep summaries and artifact digests."""

    def __init__(self, docx_path: str, title: str = "Domain adaptation report", config_digest: str = ""):
        self.docx_path = docx_path
        if os.path.exists(docx_path):
            self.doc = Document(docx_path)
        else:
            self.doc = Document()
            self._init_template(title, config_digest)
            self.save()

    def _init_template(self, title: str, config_digest: str):
        self.doc.add_heading(title, level=0)
        if config_digest:
            p = self.doc.add_paragraph(f"Config digest: {config_digest}")
            p.runs[0].font.size = Pt(8)

    def save(self):
        self.doc.save(self.docx_path)

    def add_metrics_table(self, columns: dict[str, dict], heading: str = "Ablation",
                          class_names: list[str] | None = None):
        """Rows: per-class F1 then MA/mIoU/mF1 (Avg)/(Std); one column per configuration."""
        self.doc.add_heading(heading, level=1)
        rows = table_rows(columns, class_names)
        table = self.doc.add_table(rows=len(rows), cols=len(rows[0]))
        table.style = "Table Grid"
        for i, row in enumerate(rows):
            for j, text in enumerate(row):
                cell = table.cell(i, j)
                cell.text = text
                if i == 0 or j == 0:
                    cell.paragraphs[0].runs[0].bold = True
        seeds = sorted({s for col in columns.values() for s in col.get("seeds", [])})
        if seeds:
            self.doc.add_paragraph(f"Seeds: {', '.join(str(s) for s in seeds)}")
        self.save()

    def add_sweep(self, records: list[dict], heading: str = "Reconstruction sweep"):
        self.doc.add_heading(heading, level=1)
        table = self.doc.add_table(rows=len(records) + 1, cols=3)
        table.style = "Table Grid"
        for j, text in enumerate(("masking ratio", "masked pixels", "MSE")):
            table.cell(0, j).text = text
        for i, rec in enumerate(records, start=1):
            mse = rec.get("mse")
            table.cell(i, 0).text = f"{rec['ratio']:.2f}"
            table.cell(i, 1).text = str(rec["masked_pixels"])
            table.cell(i, 2).text = "undefined" if mse is None else f"{mse:.6f}"
        self.save()

    def add_artifact(self, path: str, caption: str) -> str:
        with open(path, "rb") as f:
            sha256 = hashlib.sha256(f.read()).hexdigest()
        cap = self.doc.add_paragraph(f"{caption}: {os.path.basename(path)}")
        cap.alignment = WD_ALIGN_PARAGRAPH.LEFT
        hash_p = self.doc.add_paragraph(f"SHA-256: {sha256}")
        hash_p.runs[0].font.size = Pt(8)
        self.save()
        return sha256
