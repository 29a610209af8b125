"""Aggregate per-pair scores and judge assessments into tables, comparisons and charts."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from ._io import atomic_write_text, dumps_line, iter_jsonl
from .judge import LIKERT_FIELDS, JudgedRow

logger = logging.getLogger(__name__)

MISSING = "—"
NA = "n/a"


@dataclass(frozen=True)
class Field:
    key: str
    label: str
    kind: str  # "metric" (3 dp), "likert" (2 dp) or "count" (integer)

    def fmt(self, value: Optional[float]) -> str:
        if value is None:
            return MISSING
        if self.kind == "count":
            return str(int(value))
        return f"{value:.2f}" if self.kind == "likert" else f"{value:.3f}"


SIMILARITY_FIELDS = (
    Field("rouge1", "ROUGE-1", "metric"),
    Field("rouge2", "ROUGE-2", "metric"),
    Field("rougeL", "ROUGE-L", "metric"),
    Field("rougeLsum", "ROUGE-Lsum", "metric"),
    Field("bertscore_p", "BERTScore P", "metric"),
    Field("bertscore_r", "BERTScore R", "metric"),
    Field("bertscore_f1", "BERTScore F1", "metric"),
    Field("bleurt", "BLEURT", "metric"),
)
LIKERT_LABELS = {
    "factual_correctness": "Factual Correctness",
    "completeness": "Completeness",
    "clinical_relevance": "Clinical Relevance",
    "coherence_organization": "Coherence and Organization",
    "terminology_accuracy": "Terminology Accuracy",
    "readability": "Readability",
    "overall_quality": "Overall Quality",
}
QUALITY_FIELDS = tuple(Field(k, v, "likert") for k, v in LIKERT_LABELS.items()) + (
    Field("negation_detection", "Negation Detection", "metric"),
    Field("composite", "Composite Score", "likert"),
)
SAFETY_FIELDS = tuple(
    Field(f"{cat}_{sev}", f"{sev.capitalize()} {cat.capitalize()}", "count")
    for cat in ("hallucination", "omission")
    for sev in ("no", "minor", "major")
)
ALL_FIELDS = {f.key: f for f in SIMILARITY_FIELDS + QUALITY_FIELDS + SAFETY_FIELDS}
SAFETY_KEYS = frozenset(f.key for f in SAFETY_FIELDS)

# Rendered table layouts. The first columns follow the published table order;
# columns the published tables lack come after them.
TABLE_LAYOUTS = (
    ("Automated Evaluation Results", ("rouge1", "rouge2", "rougeL", "rougeLsum", "bertscore_f1", "bleurt")),
    (
        "Clinical Quality Assessment Results",
        (
            "factual_correctness",
            "completeness",
            "clinical_relevance",
            "overall_quality",
            "coherence_organization",
            "terminology_accuracy",
            "readability",
            "negation_detection",
            "composite",
        ),
    ),
    ("Clinical Safety Metrics", tuple(f.key for f in SAFETY_FIELDS)),
)

CHART_GROUPS = {
    "similarity": ("rouge1", "rouge2", "rougeL", "rougeLsum", "bertscore_f1"),
    "quality": tuple(LIKERT_FIELDS) + ("composite",),
    "hallucination": ("hallucination_no", "hallucination_minor", "hallucination_major"),
    "omission": ("omission_no", "omission_minor", "omission_major"),
}


class ReportError(ValueError):
    pass


class IdMismatchError(ReportError):
    def __init__(self, orphans: Mapping[str, list[str]]):
        parts = [f"{where}: {', '.join(ids)}" for where, ids in orphans.items() if ids]
        super().__init__("id sets differ; orphan ids -> " + "; ".join(parts))
        self.orphans = dict(orphans)


@dataclass(frozen=True)
class SafetyCounts:
    hallucination: tuple[int, int, int]
    omission: tuple[int, int, int]

    @property
    def n(self) -> int:
        return sum(self.hallucination)

    def as_fields(self) -> dict[str, float]:
        out = {}
        for cat in ("hallucination", "omission"):
            for sev, v in zip(("no", "minor", "major"), getattr(self, cat)):
                out[f"{cat}_{sev}"] = v
        return out


@dataclass(frozen=True)
class AggregateRow:
    dataset: str
    model: str
    n: int
    values: Mapping[str, Optional[float]]
    safety: Optional[SafetyCounts] = None

    def __post_init__(self):
        if self.n <= 0:
            raise ReportError("aggregate over zero records")
        # Absent and None mean the same thing; keep one canonical form.
        object.__setattr__(self, "values", {k: v for k, v in self.values.items() if v is not None})
        if self.safety is not None:
            for cat in ("hallucination", "omission"):
                if sum(getattr(self.safety, cat)) != self.n:
                    raise ReportError(f"{cat} counts do not sum to n={self.n}")

    def get(self, key: str) -> Optional[float]:
        if key in self.values:
            return self.values[key]
        if self.safety is not None:
            return self.safety.as_fields().get(key)
        return None

    def to_json(self) -> dict:
        out: dict = {"dataset": self.dataset, "model": self.model, "n": self.n}
        out.update({k: self.values.get(k) for k in ALL_FIELDS if k not in SAFETY_KEYS})
        out["safety"] = (
            None if self.safety is None else {"hallucination": list(self.safety.hallucination), "omission": list(self.safety.omission)}
        )
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "AggregateRow":
        safety = obj.get("safety")
        return cls(
            obj["dataset"],
            obj["model"],
            int(obj["n"]),
            {k: obj.get(k) for k in ALL_FIELDS if k in obj},
            None if safety is None else SafetyCounts(tuple(safety["hallucination"]), tuple(safety["omission"])),
        )


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return math.fsum(present) / len(present) if present else None


def _single_model(rows: Sequence[Mapping], model: Optional[str], what: str) -> Optional[str]:
    labels = {str(r["model"]) for r in rows}
    if len(labels) > 1:
        raise ReportError(f"{what} rows mix models: {sorted(labels)}")
    found = labels.pop() if labels else None
    if model is not None and found is not None and found != model:
        logger.warning("%s rows are labelled %r; reporting them as %r", what, found, model)
    return model or found


def aggregate(
    score_rows: Sequence[Mapping],
    judged_rows: Sequence[Mapping],
    dataset: str,
    model: Optional[str] = None,
    strict: bool = True,
) -> AggregateRow:
    """Means over per-pair scores and judge rows, plus severity counts.

    When both inputs are given their id sets must match; with ``strict=False``
    a mismatch is logged and only the shared ids are used.
    """
    if not score_rows and not judged_rows:
        raise ReportError("nothing to aggregate: no score rows and no judged rows")
    label = _single_model(score_rows, model, "score")
    label = _single_model(judged_rows, label, "judged")
    if score_rows and judged_rows:
        s_ids, j_ids = [r["id"] for r in score_rows], [r["id"] for r in judged_rows]
        orphans = {
            "scores only": sorted(set(s_ids) - set(j_ids)),
            "judged only": sorted(set(j_ids) - set(s_ids)),
        }
        if any(orphans.values()):
            if strict:
                raise IdMismatchError(orphans)
            logger.warning("id mismatch, using shared ids only: %s", orphans)
            shared = set(s_ids) & set(j_ids)
            score_rows = [r for r in score_rows if r["id"] in shared]
            judged_rows = [r for r in judged_rows if r["id"] in shared]
            if not shared:
                raise ReportError("no shared ids between scores and judged rows")

    values: dict[str, Optional[float]] = {}
    for key in ("rouge1", "rouge2", "rougeL", "rougeLsum"):
        values[key] = _mean(r[key]["f"] for r in score_rows if r.get(key) is not None)
    for key, sub in (("bertscore_p", "p"), ("bertscore_r", "r"), ("bertscore_f1", "f1")):
        values[key] = _mean(r["bertscore"][sub] for r in score_rows if r.get("bertscore") is not None)
    values["bleurt"] = _mean(r.get("bleurt") for r in score_rows)

    safety = None
    if judged_rows:
        assessments = [JudgedRow.from_json(dict(r)).assessment for r in judged_rows]
        for key in LIKERT_FIELDS:
            values[key] = _mean(getattr(a, key) for a in assessments)
        values["negation_detection"] = _mean(float(a.negation_detection) for a in assessments)
        values["composite"] = _mean(sum(a.likert()) / len(LIKERT_FIELDS) for a in assessments)
        tallies = {cat: {"No": 0, "Minor": 0, "Major": 0} for cat in ("hallucination", "omission")}
        for a in assessments:
            tallies["hallucination"][a.hallucination.value] += 1
            tallies["omission"][a.omission.value] += 1
        safety = SafetyCounts(
            tuple(tallies["hallucination"].values()), tuple(tallies["omission"].values())
        )
    n = len(judged_rows) if judged_rows else len(score_rows)
    return AggregateRow(dataset, label or "unknown", n, values, safety)


def percent_change(baseline: float, treatment: float) -> Optional[float]:
    """Relative change in percent; None when the baseline is zero."""
    if baseline == 0:
        return None
    return (treatment - baseline) / baseline * 100.0


def format_percent(pct: Optional[float]) -> str:
    return NA if pct is None else f"{pct:+.1f}%"


# --- tables -----------------------------------------------------------------


def _sorted(rows: Iterable[AggregateRow]) -> list[AggregateRow]:
    return sorted(rows, key=lambda r: (r.dataset, r.model))


def _cells(row: AggregateRow, keys: Sequence[str]) -> list[str]:
    return [ALL_FIELDS[k].fmt(row.get(k)) for k in keys]


def render_markdown(rows: Sequence[AggregateRow]) -> str:
    rows = _sorted(rows)
    out = []
    for title, keys in TABLE_LAYOUTS:
        header = ["Dataset", "Model"] + [ALL_FIELDS[k].label for k in keys]
        out.append(f"## {title}\n")
        out.append("| " + " | ".join(header) + " |")
        out.append("|" + "|".join(["---"] * 2 + ["---:"] * len(keys)) + "|")
        for r in rows:
            out.append("| " + " | ".join([r.dataset, r.model] + _cells(r, keys)) + " |")
        out.append("")
    return "\n".join(out)


def render_csv(rows: Sequence[AggregateRow]) -> str:
    keys = [k for _, ks in TABLE_LAYOUTS for k in ks]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Dataset", "Model", "N"] + [ALL_FIELDS[k].label for k in keys])
    for r in _sorted(rows):
        w.writerow([r.dataset, r.model, r.n] + _cells(r, keys))
    return buf.getvalue()


def render_jsonl(rows: Sequence[AggregateRow]) -> str:
    return "".join(dumps_line(r.to_json()) + "\n" for r in _sorted(rows))


RENDERERS = {"markdown": ("tables.md", render_markdown), "csv": ("tables.csv", render_csv), "jsonl": ("tables.jsonl", render_jsonl)}


def render_tables(
    rows: Sequence[AggregateRow], out_dir: Union[str, Path], formats: Sequence[str] = ("markdown", "csv", "jsonl")
) -> dict[str, Path]:
    if not rows:
        raise ReportError("no aggregate rows to render")
    out_dir = Path(out_dir)
    written = {}
    for fmt in formats:
        name, fn = RENDERERS[fmt]
        atomic_write_text(out_dir / name, fn(rows))
        written[fmt] = out_dir / name
    return written


def load_aggregates(report_dir: Union[str, Path]) -> list[AggregateRow]:
    path = Path(report_dir) / "tables.jsonl"
    if not path.exists():
        raise ReportError(f"{report_dir} has no tables.jsonl (not a report directory?)")
    return [AggregateRow.from_json(obj) for _, obj in iter_jsonl(path)]


# --- comparison -------------------------------------------------------------


@dataclass(frozen=True)
class FieldDelta:
    key: str
    baseline: float
    treatment: float

    @property
    def delta(self) -> float:
        return self.treatment - self.baseline

    @property
    def percent(self) -> Optional[float]:
        return percent_change(self.baseline, self.treatment)


@dataclass(frozen=True)
class ComparisonReport:
    dataset: str
    baseline_model: str
    treatment_model: str
    deltas: tuple[FieldDelta, ...]

    def get(self, key: str) -> FieldDelta:
        for d in self.deltas:
            if d.key == key:
                return d
        raise KeyError(key)

    def keys(self) -> list[str]:
        return [d.key for d in self.deltas]


def compare(baseline: AggregateRow, treatment: AggregateRow) -> ComparisonReport:
    if baseline.dataset != treatment.dataset:
        raise ReportError(f"cannot compare different datasets: {baseline.dataset!r} vs {treatment.dataset!r}")
    deltas = []
    for key in ALL_FIELDS:
        b, t = baseline.get(key), treatment.get(key)
        if b is not None and t is not None:
            deltas.append(FieldDelta(key, float(b), float(t)))
    return ComparisonReport(baseline.dataset, baseline.model, treatment.model, tuple(deltas))


def pair_for_comparison(baseline: Sequence[AggregateRow], treatment: Sequence[AggregateRow]) -> list[tuple[AggregateRow, AggregateRow]]:
    """Match rows by dataset label; a lone row on each side is paired directly."""
    if len(baseline) == 1 and len(treatment) == 1:
        return [(baseline[0], treatment[0])]
    by_ds = {r.dataset: r for r in treatment}
    pairs = [(b, by_ds[b.dataset]) for b in _sorted(baseline) if b.dataset in by_ds]
    if not pairs:
        raise ReportError("baseline and treatment share no dataset label")
    return pairs


def render_comparison_markdown(reports: Sequence[ComparisonReport]) -> str:
    out = []
    for rep in reports:
        out.append(f"## {rep.dataset}: {rep.baseline_model} → {rep.treatment_model}\n")
        out.append("| Metric | Baseline | Treatment | Delta | Change |")
        out.append("|---|---:|---:|---:|---:|")
        for d in rep.deltas:
            f = ALL_FIELDS[d.key]
            delta = f"{round(d.delta):+d}" if f.kind == "count" else f"{d.delta:+.3f}"
            out.append(f"| {f.label} | {f.fmt(d.baseline)} | {f.fmt(d.treatment)} | {delta} | {format_percent(d.percent)} |")
        out.append("")
    return "\n".join(out)


# --- charts -----------------------------------------------------------------

COLORS = {"baseline": "#9aa5b1", "treatment": "#2f6fde", "text": "#1f2933", "muted": "#52606d", "grid": "#e4e7eb"}
FONT = "Helvetica, Arial, sans-serif"


def _nice_top(v: float) -> float:
    if v <= 0:
        return 1.0
    mag = 10 ** math.floor(math.log10(v))
    for step in (1, 2, 2.5, 5, 10):
        if step * mag >= v:
            return step * mag
    return 10 * mag


def render_chart(comparison: ComparisonReport, group: str, width: int = 720, height: int = 400) -> str:
    """Grouped bar chart (baseline vs treatment per field) as a standalone SVG."""
    if group not in CHART_GROUPS:
        raise ReportError(f"unknown metric group {group!r}; choose from {sorted(CHART_GROUPS)}")
    deltas = [d for d in comparison.deltas if d.key in CHART_GROUPS[group]]
    if not deltas:
        raise ReportError(f"metric group {group!r} has no values in this comparison")

    m_top, m_right, m_bottom, m_left = 56, 24, 84, 64
    plot_w, plot_h = width - m_left - m_right, height - m_top - m_bottom
    y_top = _nice_top(max(max(d.baseline, d.treatment) for d in deltas))
    cat_w = plot_w / len(deltas)
    bar_w = min(48.0, cat_w * 0.35)

    def y(v: float) -> float:
        return m_top + plot_h * (1 - max(v, 0.0) / y_top)

    title = f"{comparison.dataset}: {group} ({comparison.baseline_model} vs {comparison.treatment_model})"
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" width="{width}" height="{height}" '
        f'font-family="{FONT}">\n',
        f"<title>{escape(title)}</title>\n",
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>\n',
        f'<text x="{width / 2:.1f}" y="26" text-anchor="middle" font-size="15" font-weight="600" '
        f'fill="{COLORS["text"]}">{escape(title)}</text>\n',
    ]
    for i in range(5):
        tv = y_top * i / 4
        ty = y(tv)
        parts.append(
            f'<line x1="{m_left}" y1="{ty:.1f}" x2="{width - m_right}" y2="{ty:.1f}" stroke="{COLORS["grid"]}"/>\n'
            f'<text x="{m_left - 6}" y="{ty + 4:.1f}" text-anchor="end" font-size="11" fill="{COLORS["muted"]}">'
            f"{tv:.4g}</text>\n"
        )
    y_label = {"similarity": "score", "quality": "mean rating (1-5)"}.get(group, "cases")
    parts.append(
        f'<text x="16" y="{m_top + plot_h / 2:.1f}" text-anchor="middle" font-size="12" fill="{COLORS["muted"]}" '
        f'transform="rotate(-90 16 {m_top + plot_h / 2:.1f})">{escape(y_label)}</text>\n'
    )
    for ci, d in enumerate(deltas):
        f = ALL_FIELDS[d.key]
        cx = m_left + cat_w * (ci + 0.5)
        for si, (arm, v) in enumerate((("baseline", d.baseline), ("treatment", d.treatment))):
            bx = cx - bar_w - 2 + si * (bar_w + 4)
            by = y(v)
            parts.append(
                f'<rect x="{bx:.1f}" y="{by:.1f}" width="{bar_w:.1f}" height="{max(y(0) - by, 0.5):.1f}" '
                f'fill="{COLORS[arm]}"><title>{escape(arm)}: {f.fmt(v)}</title></rect>\n'
                f'<text x="{bx + bar_w / 2:.1f}" y="{by - 4:.1f}" text-anchor="middle" font-size="10" '
                f'fill="{COLORS["text"]}">{f.fmt(v)}</text>\n'
            )
        parts.append(
            f'<text x="{cx:.1f}" y="{m_top + plot_h + 18:.1f}" text-anchor="middle" font-size="11" '
            f'fill="{COLORS["text"]}">{escape(f.label)}</text>\n'
            f'<text x="{cx:.1f}" y="{m_top + plot_h + 33:.1f}" text-anchor="middle" font-size="10" '
            f'fill="{COLORS["muted"]}">{format_percent(d.percent)}</text>\n'
        )
    parts.append(
        f'<line x1="{m_left}" y1="{m_top + plot_h}" x2="{width - m_right}" y2="{m_top + plot_h}" stroke="{COLORS["muted"]}"/>\n'
    )
    for si, (arm, name) in enumerate((("baseline", comparison.baseline_model), ("treatment", comparison.treatment_model))):
        lx = m_left + si * 200
        ly = height - 20
        parts.append(
            f'<rect x="{lx}" y="{ly - 10}" width="12" height="12" fill="{COLORS[arm]}"/>\n'
            f'<text x="{lx + 18}" y="{ly}" font-size="12" fill="{COLORS["text"]}">{escape(name)}</text>\n'
        )
    parts.append("</svg>\n")
    return "".join(parts)


def chart_groups_for(comparison: ComparisonReport) -> list[str]:
    keys = set(comparison.keys())
    return [g for g, ks in CHART_GROUPS.items() if keys & set(ks)]
