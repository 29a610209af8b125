"""Run the whole benchmark offline against the built-in mock clinic model.

Synthesizes a small corpus, generates notes with two model arms, scores,
judges, reports and compares them. Nothing leaves 127.0.0.1.

    python3 scripts/offline_demo.py --count 6 --work-dir demo_run
"""

import argparse
import os
import sys
from pathlib import Path

from scribebench.cli import main as cli
from scribebench.mock_endpoint import MockEndpoint

ARMS = (("base", "llama-base-1b"), ("ondevice", "ondevice-1b"))


def run(argv):
    print("$ scribebench " + " ".join(argv))
    code = cli(argv)
    if code:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--count", type=int, default=6)
    ap.add_argument("--work-dir", type=Path, default=Path("demo_run"))
    args = ap.parse_args()
    args.work_dir.mkdir(parents=True, exist_ok=True)
    w = lambda name: str(args.work_dir / name)

    with MockEndpoint() as server:
        os.environ["SCRIBEBENCH_BASE_URL"] = server.url
        os.environ.setdefault("SCRIBEBENCH_CACHE_DIR", w("cache"))
        run(["synthesize", "--count", str(args.count), "--writer-model", "writer",
             "--checkpoint-dir", w("ckpt"), "--out", w("synth.jsonl")])
        for arm, model in ARMS:
            run(["generate", "--dataset", w("synth.jsonl"), "--profile", arm, "--model", model,
                 "--out", w(f"{arm}.cands.jsonl")])
            run(["evaluate", "--references", w("synth.jsonl"), "--candidates", w(f"{arm}.cands.jsonl"),
                 "--embedding-endpoint", server.url, "--out", w(f"{arm}.scores.jsonl")])
            run(["judge", "--references", w("synth.jsonl"), "--candidates", w(f"{arm}.cands.jsonl"),
                 "--transcripts", w("synth.jsonl"), "--out", w(f"{arm}.judged.jsonl")])
            run(["report", "--scores", w(f"{arm}.scores.jsonl"), "--judged", w(f"{arm}.judged.jsonl"),
                 "--dataset-label", "Synthetic", "--out-dir", w(f"report_{arm}")])
        run(["compare", "--baseline-dir", w("report_base"), "--treatment-dir", w("report_ondevice"),
             "--out-dir", w("comparison")])
        print(f"\n{server.request_count} requests served")
    print((args.work_dir / "comparison" / "comparison.md").read_text())


if __name__ == "__main__":
    main()
