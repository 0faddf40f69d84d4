"""Campaign result rendering: per-scenario rows, totals, crash bundles."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

from .campaign import CampaignReport, IMPACT_COLUMNS
from .errors import CivFuzzError


@dataclass(frozen=True)
class ScenarioRow:
    trust_model: str
    scenario: str
    api: str
    raw: int
    dedup: int
    victims: int
    callers: int
    coverage_reached: int
    coverage_total: int
    impact: dict[str, tuple[int, int]]

    @property
    def coverage_str(self) -> str:
        # always recomputed from the fraction; 0 decimals
        pct = round(100 * self.coverage_reached / self.coverage_total) if self.coverage_total else 0
        return f"{pct}% ({self.coverage_reached}/{self.coverage_total})"

    def impact_cell(self, column: str) -> str:
        count, arbitrary = self.impact.get(column, (0, 0))
        return f"{count} ({arbitrary})"


def row_from_report(report: CampaignReport) -> ScenarioRow:
    for column, (count, arbitrary) in report.impact.items():
        if arbitrary > count:
            raise CivFuzzError(
                f"{report.scenario}: arbitrary sub-count {arbitrary} exceeds {column} count {count}"
            )
    return ScenarioRow(
        trust_model=report.trust_model,
        scenario=report.scenario,
        api=report.api_name,
        raw=report.raw_crash_count,
        dedup=report.dedup_count,
        victims=report.victims,
        callers=report.callers,
        coverage_reached=report.coverage_reached,
        coverage_total=report.coverage_total,
        impact=dict(report.impact),
    )


def _totals(rows: list[ScenarioRow]) -> ScenarioRow:
    impact = {
        c: (
            sum(r.impact.get(c, (0, 0))[0] for r in rows),
            sum(r.impact.get(c, (0, 0))[1] for r in rows),
        )
        for c in IMPACT_COLUMNS
    }
    return ScenarioRow(
        trust_model="",
        scenario="Total",
        api="",
        raw=sum(r.raw for r in rows),
        dedup=sum(r.dedup for r in rows),
        victims=sum(r.victims for r in rows),
        callers=sum(r.callers for r in rows),
        coverage_reached=sum(r.coverage_reached for r in rows),
        coverage_total=sum(r.coverage_total for r in rows),
        impact=impact,
    )


HEADER = (
    ["TM", "Scenario", "API", "Raw", "Dedup", "Victims", "Callers", "Coverage"]
    + list(IMPACT_COLUMNS)
)


def emit_table(reports: list[CampaignReport], fmt: str = "plain") -> str:
    """One row per scenario plus a totals row; totals are column sums."""
    rows = [row_from_report(r) for r in reports]
    total = _totals(rows)
    table = rows + [total]

    if fmt == "json":
        doc = {
            "rows": [_row_json(r) for r in rows],
            "total": _row_json(total),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    cells = [HEADER] + [_row_cells(r) for r in table]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerows(cells)
        return buf.getvalue()
    if fmt != "plain":
        raise CivFuzzError(f"unknown table format {fmt!r}")
    widths = [max(len(row[i]) for row in cells) for i in range(len(HEADER))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _row_cells(row: ScenarioRow) -> list[str]:
    return [
        row.trust_model,
        row.scenario,
        row.api,
        str(row.raw),
        str(row.dedup),
        str(row.victims),
        str(row.callers),
        row.coverage_str,
    ] + [row.impact_cell(c) for c in IMPACT_COLUMNS]


def _row_json(row: ScenarioRow) -> dict:
    return {
        "trust_model": row.trust_model,
        "scenario": row.scenario,
        "api": row.api,
        "raw": row.raw,
        "dedup": row.dedup,
        "victims": row.victims,
        "callers": row.callers,
        "coverage": row.coverage_str,
        "coverage_reached": row.coverage_reached,
        "coverage_total": row.coverage_total,
        "impact": {c: list(row.impact.get(c, (0, 0))) for c in IMPACT_COLUMNS},
    }


def emit_crash_bundle(report: CampaignReport, out_dir: Path) -> Path:
    """Per-crash JSON files named by dedup hash, plus an index.

    Serialization is key-sorted and timestamp-free so identical campaigns
    produce byte-identical bundles.
    """
    crash_dir = Path(out_dir) / "crashes"
    crash_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for crash in sorted(report.crashes, key=lambda c: c["crash_id"]):
        path = crash_dir / f"{crash['crash_id']}.json"
        path.write_text(json.dumps(crash, indent=2, sort_keys=True))
        minimized = crash.get("minimized") or {}
        core_size = len(minimized.get("sufficient", [])) + len(minimized.get("necessary", []))
        index.append(
            {
                "crash_id": crash["crash_id"],
                "classes": crash["civ_classes"],
                "impact": crash["impact"],
                "arbitrary": crash["arbitrary"],
                "disposition": crash["disposition"],
                "minimized_size": core_size,
                "occurrences": crash["occurrences"],
            }
        )
    (crash_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return crash_dir
