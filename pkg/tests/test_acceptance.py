"""Exit criteria, one test per criterion. The terminal summary prints a PASS/FAIL line for each."""

import json
import os
import random
import time
from fractions import Fraction
from pathlib import Path

import pytest

from oracles import lcs_oracle, onehot_bertscore_oracle, rouge_n_oracle
from published import published_rows, stated_changes
from scribebench.cli import main
from scribebench.embed_metrics import EmbeddingBackendRef, HttpEmbeddingBackend, OneHotBackend, bertscore, greedy_match
from scribebench.judge import LIKERT_FIELDS, JudgeConfig, JudgeRecord, judge_batch, judge_pair
from scribebench.mock_endpoint import as_transport, chat_body, clinic_responder
from scribebench.report import aggregate, compare, percent_change
from scribebench.rouge import lcs_length, rouge_l, rouge_lsum, rouge_n
from scribebench.synthesis import StageProfile, SynthesisConfig, run_pipeline

from conftest import Scripted

VOCAB = [f"w{i}" for i in range(20)]
PAIRS = 500


def random_pairs(seed):
    rng = random.Random(seed)
    seq = lambda: [rng.choice(VOCAB) for _ in range(rng.randint(0, 30))]
    return [(seq(), seq()) for _ in range(PAIRS)]


@pytest.mark.acceptance(1, "ROUGE oracle equivalence")
def test_rouge_oracle_equivalence():
    start = time.perf_counter()
    for c, r in random_pairs(1):
        for n in (1, 2):
            s = rouge_n(c, r, n)
            p, rc, f = rouge_n_oracle(c, r, n)
            assert Fraction(s.precision) == Fraction(float(p)) and Fraction(s.recall) == Fraction(float(rc))
            assert abs(s.fmeasure - float(f)) <= 1e-12
        L = lcs_oracle(c, r)
        assert lcs_length(c, r) == L
        s = rouge_l(c, r)
        if c and r:
            assert (s.precision, s.recall) == (L / len(c), L / len(r))
        else:
            assert s.fmeasure == 0.0
    assert time.perf_counter() - start < 5.0


@pytest.mark.acceptance(2, "hand-computed metric cases")
def test_hand_computed_cases():
    s = rouge_n("the cat sat".split(), "the cat slept".split(), 1)
    assert s.precision == s.recall == 2 / 3 and abs(s.fmeasure - 2 / 3) <= 1e-15
    s = rouge_n("the cat sat on the mat".split(), "the cat sat on a mat".split(), 2)
    assert (s.precision, s.recall, s.fmeasure) == (0.6, 0.6, 0.6)
    s = rouge_l("the cat sat".split(), "the sat cat".split())
    assert s.precision == s.recall == 2 / 3
    s = rouge_lsum("the cat ran", "the cat sat\nthe dog ran")
    assert (s.precision, s.recall) == (1.0, 0.5) and abs(s.fmeasure - 2 / 3) <= 1e-15


@pytest.mark.acceptance(3, "BERTScore one-hot reduction")
def test_bertscore_reduction():
    backend = OneHotBackend()
    for c, r in random_pairs(3):
        s = greedy_match(*backend.embed_pair(" ".join(c), " ".join(r)))
        p, rc, f = onehot_bertscore_oracle(c, r)
        assert (s.precision, s.recall) == (p, rc)
        assert abs(s.f1 - f) <= 1e-12
    http = HttpEmbeddingBackend(
        EmbeddingBackendRef("http_service", "fixture", "http://embed"), transport=as_transport(clinic_responder)
    )
    text = "Patient denies chest pain. TSH 4.5 mIU/L; continue levothyroxine 75 mcg."
    assert bertscore(text, text, backend).f1 == 1.0
    assert abs(bertscore(text, text, http).f1 - 1.0) <= 1e-12


@pytest.mark.acceptance(4, "published-delta reproduction")
def test_published_deltas():
    rows = published_rows()
    report = []
    for stated in stated_changes():
        ds = stated["dataset"]
        rep = compare(rows[(ds, "Base_Llama")], rows[(ds, "OnDevice")])
        got = rep.get(stated["field"]).percent
        report.append((ds, stated["field"], stated["percent"], round(got, 2)))
        assert abs(got - stated["percent"]) <= 0.5, report[-1]
    # The two rounding artifacts: recomputed from the rounded table values they land 0.3-0.4 pp away.
    assert round(percent_change(0.118, 0.227), 1) == 92.4
    assert round(percent_change(0.135, 0.390), 1) == 188.9


@pytest.mark.acceptance(5, "safety-count invariant")
def test_safety_counts():
    severities = ("No", "Minor", "Major")
    for (ds, model), row in published_rows().items():
        halls = [s for s, c in zip(severities, row.safety.hallucination) for _ in range(c)]
        omits = [s for s, c in zip(severities, row.safety.omission) for _ in range(c)]
        judged = []
        for i, (h, o) in enumerate(zip(halls, omits)):
            obj = {"id": f"{i}", "model": model, **{f: 3 for f in LIKERT_FIELDS}}
            obj.update(negation_detection=True, hallucination=h, omission=o, rationale="")
            judged.append(obj)
        random.Random(5).shuffle(judged)
        agg = aggregate([], judged, ds)
        assert agg.safety == row.safety
        assert sum(agg.safety.hallucination) == sum(agg.safety.omission) == agg.n
        assert agg.n == (140 if ds == "ACI Benchmark" else 100)


def wire(**over):
    obj = {f: 4 for f in LIKERT_FIELDS}
    obj.update(negation_detection=True, hallucination="Minor", omission="No", rationale="ok")
    obj.update(over)
    return json.dumps(obj)


@pytest.mark.acceptance(6, "judge round-trip")
def test_judge_round_trip(make_client, tmp_path):
    records = [JudgeRecord(f"r{i:03d}", "m", "## Plan\nref", f"## Plan\ncandidate {i}") for i in range(100)]
    ok = judge_batch(records, JudgeConfig(), make_client(Scripted(wire()), cache=False))
    assert len(ok.records) == 100 and not ok.failures
    assert all(r.reask_count == 0 for r in ok.records)

    for bad in ("not json", wire(readability=0), wire(omission="Severe")):
        responder = Scripted(bad, wire())
        row = judge_pair(records[0], JudgeConfig(), make_client(responder, cache=False))
        assert row.reask_count == 1 and len(responder.calls) == 2

    def one_broken(path, payload):
        broken = "candidate 7\n" in payload["messages"][1]["content"]
        return 200, chat_body("still broken" if broken else wire())

    result = judge_batch(records[:10], JudgeConfig(), make_client(one_broken, cache=False), tmp_path / "j.jsonl")
    assert list(result.failures) == ["r007"]
    assert len((tmp_path / "j.jsonl").read_text().splitlines()) == 9


class CriticFailing:
    def __init__(self, k):
        self.k = k
        self.revise_calls = 0

    def __call__(self, path, payload):
        system = payload["messages"][0]["content"]
        if "reviewing synthetic consultation" in system:
            passed = payload["messages"][1]["content"].count("(revision ") >= self.k
            scores = {"completeness": 5, "clinical_relevance": 5, "realism": 5 if passed else 2, "feedback": "more"}
            return 200, chat_body(json.dumps(scores))
        if "revise synthetic" in system:
            self.revise_calls += 1
        return clinic_responder(path, payload)


class Killed(BaseException):
    pass


@pytest.mark.acceptance(7, "synthesis pipeline")
def test_synthesis_pipeline(make_client, tmp_path):
    writer, critic = StageProfile("writer"), StageProfile("critic", temperature=0.0)
    cfg = lambda name, count, **kw: SynthesisConfig(count, writer, critic, str(tmp_path / name), **kw)

    out = tmp_path / "full.jsonl"
    result = run_pipeline(cfg("full", 25), make_client(cache=False), out)
    assert len(result.records) == 25 and len(out.read_text().splitlines()) == 25

    for k in range(0, 4):
        responder = CriticFailing(k)
        run_pipeline(cfg(f"k{k}", 1), make_client(responder, cache=False))
        assert responder.revise_calls == k

    calls = []

    def dies(path, payload):
        calls.append(1)
        if len(calls) == 60:
            raise Killed()
        return clinic_responder(path, payload)

    resumable = cfg("resume", 25)
    with pytest.raises(Killed):
        run_pipeline(resumable, make_client(dies, cache=False, max_concurrency=1), tmp_path / "resumed.jsonl")
    run_pipeline(resumable, make_client(cache=False), tmp_path / "resumed.jsonl")
    assert (tmp_path / "resumed.jsonl").read_bytes() == out.read_bytes()


def _cli_run(server, work: Path):
    """generate -> evaluate -> judge -> report -> compare over a fixed 4-record dataset."""
    rows = [
        {"id": f"case-{i}", "transcript": clinic_responder("/v1/chat/completions", {
            "model": "w", "messages": [
                {"role": "system", "content": "You write natural, unedited transcripts"},
                {"role": "user", "content": f"Case description:\nA patient with {c}. Recent labs stable. The end\nWrite the full"},
            ]})[1]["choices"][0]["message"]["content"], "note": f"## Assessment\n{c}, stable.\n## Plan\nContinue therapy."}
        for i, c in enumerate(("hypothyroidism", "type 2 diabetes", "osteoporosis", "Graves disease"))
    ]
    (work / "data.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    codes = []
    for arm, model in (("base", "llama-base-1b"), ("ondevice", "ondevice-1b")):
        codes.append(main(["generate", "--dataset", "data.jsonl", "--profile", arm, "--model", model, "--out", f"{arm}.c.jsonl"]))
        codes.append(main(["evaluate", "--references", "data.jsonl", "--candidates", f"{arm}.c.jsonl",
                           "--embedding-endpoint", server.url, "--out", f"{arm}.s.jsonl"]))
        codes.append(main(["judge", "--references", "data.jsonl", "--candidates", f"{arm}.c.jsonl",
                           "--transcripts", "data.jsonl", "--out", f"{arm}.j.jsonl"]))
        codes.append(main(["report", "--scores", f"{arm}.s.jsonl", "--judged", f"{arm}.j.jsonl",
                           "--dataset-label", "Fixture", "--out-dir", f"rep_{arm}"]))
    codes.append(main(["compare", "--baseline-dir", "rep_base", "--treatment-dir", "rep_ondevice", "--out-dir", "cmp"]))
    assert codes == [0] * 9
    outputs = sorted(
        p for p in work.rglob("*")
        if p.is_file() and p.suffix in (".jsonl", ".md", ".csv", ".svg") and p.name != "data.jsonl"
    )
    return {str(p.relative_to(work)): p.read_bytes() for p in outputs}


@pytest.mark.acceptance(8, "determinism with warm cache")
def test_determinism(clinic_server, tmp_path, monkeypatch):
    monkeypatch.setenv("SCRIBEBENCH_BASE_URL", clinic_server.url)
    monkeypatch.setenv("SCRIBEBENCH_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("SCRIBEBENCH_CONFIG", raising=False)
    first, second = tmp_path / "first", tmp_path / "second"
    first.mkdir()
    second.mkdir()
    monkeypatch.chdir(first)
    cold = _cli_run(clinic_server, first)
    cold_calls = clinic_server.request_count
    assert cold_calls > 0
    monkeypatch.chdir(second)
    warm = _cli_run(clinic_server, second)
    assert clinic_server.request_count == cold_calls
    assert warm == cold
    kinds = {Path(k).suffix for k in cold}
    assert kinds == {".jsonl", ".md", ".csv", ".svg"}
    assert {"base.s.jsonl", "base.j.jsonl", "rep_base/tables.md", "cmp/charts/fixture_similarity.svg"} <= set(cold)


LIVE_VARS = ("SCRIBEBENCH_LIVE_BASE_URL", "SCRIBEBENCH_LIVE_MODEL", "SCRIBEBENCH_LIVE_TRANSCRIPTS", "SCRIBEBENCH_LIVE_REFERENCES")


@pytest.mark.live
@pytest.mark.acceptance(9, "published ROUGE-1 on a live endpoint (optional)")
@pytest.mark.skipif(not all(os.environ.get(v) for v in LIVE_VARS), reason="needs a served model: set " + ", ".join(LIVE_VARS))
def test_live_rouge1(tmp_path, monkeypatch):
    env = {v: os.environ[v] for v in LIVE_VARS}
    monkeypatch.setenv("SCRIBEBENCH_BASE_URL", env["SCRIBEBENCH_LIVE_BASE_URL"])
    cands, scores = tmp_path / "c.jsonl", tmp_path / "s.jsonl"
    assert main(["generate", "--dataset", env["SCRIBEBENCH_LIVE_TRANSCRIPTS"], "--profile", "ondevice",
                 "--model", env["SCRIBEBENCH_LIVE_MODEL"], "--out", str(cands)]) == 0
    assert main(["evaluate", "--references", env["SCRIBEBENCH_LIVE_REFERENCES"], "--candidates", str(cands),
                 "--metrics", "rouge", "--out", str(scores)]) == 0
    rows = [json.loads(l) for l in scores.read_text().splitlines()]
    assert len(rows) == 140
    mean = sum(r["rouge1"]["f"] for r in rows) / len(rows)
    assert abs(mean - 0.496) <= 0.05, mean
