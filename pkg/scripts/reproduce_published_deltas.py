"""Recompute the published percent changes from the published aggregate tables.

    python3 scripts/reproduce_published_deltas.py [--out-dir published_report]
"""

import argparse
import json
from pathlib import Path

from scribebench.report import (
    AggregateRow,
    SafetyCounts,
    compare,
    format_percent,
    pair_for_comparison,
    render_comparison_markdown,
    render_tables,
)
from scribebench.cli import main as cli

DATA = Path(__file__).resolve().parents[1] / "data" / "published_tables.json"


def load_rows(tables):
    merged = {}
    for name in ("similarity", "quality", "safety"):
        for row in tables[name]:
            merged.setdefault((row["dataset"], row["model"]), {}).update(row)
    rows = []
    for obj in merged.values():
        safety = SafetyCounts(tuple(obj.pop("hallucination")), tuple(obj.pop("omission")))
        rows.append(AggregateRow(obj.pop("dataset"), obj.pop("model"), obj.pop("n"), obj, safety))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", type=Path, help="also write tables, comparison and charts here")
    args = ap.parse_args()

    tables = json.loads(DATA.read_text())
    rows = load_rows(tables)
    base = [r for r in rows if r.model == "Base_Llama"]
    treat = [r for r in rows if r.model == "OnDevice"]
    reports = {rep.dataset: rep for rep in (compare(b, t) for b, t in pair_for_comparison(base, treat))}

    print(render_comparison_markdown(list(reports.values())))
    print("stated vs recomputed:")
    worst = 0.0
    for s in tables["stated_changes"]:
        got = reports[s["dataset"]].get(s["field"]).percent
        worst = max(worst, abs(got - s["percent"]))
        print(f"  {s['dataset']:<14} {s['field']:<20} stated {s['percent']:+7.1f}%  recomputed {format_percent(got):>8}")
    print(f"largest gap: {worst:.2f} pp")

    if args.out_dir:
        render_tables(base, args.out_dir / "base")
        render_tables(treat, args.out_dir / "ondevice")
        cli(["compare", "--baseline-dir", str(args.out_dir / "base"),
             "--treatment-dir", str(args.out_dir / "ondevice"), "--out-dir", str(args.out_dir / "comparison")])
        print(f"wrote {args.out_dir}")


if __name__ == "__main__":
    main()
