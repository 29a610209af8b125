"""Local stand-in for a chat-completions + token-embedding server.

Useful for offline smoke runs and tests. The default responder is a
deterministic rule-based "model": every reply is a pure function of the
request body, so cached and uncached runs agree.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional

import httpx

from .rouge import rouge_n, tokenize

Responder = Callable[[str, dict], tuple[int, dict]]

CHAT_PATH = "/v1/chat/completions"
EMBED_PATH = "/v1/token_embeddings"
EMBED_DIM = 32


def chat_body(content: Optional[str], finish_reason: str = "stop") -> dict:
    return {
        "id": "mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": finish_reason}],
        "usage": {"prompt_tokens": 0, "completion_tokens": len((content or "").split())},
    }


def token_vector(token: str) -> list[float]:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return [b / 255 for b in digest[:EMBED_DIM]]


def embedding_body(text: str) -> dict:
    tokens = tokenize(text)
    return {"tokens": tokens, "embeddings": [token_vector(t) for t in tokens]}


# --- rule-based clinic model --------------------------------------------------


def _h(*parts: str) -> int:
    return int(hashlib.sha256("\x1f".join(parts).encode("utf-8")).hexdigest()[:8], 16)


_CONDITIONS = (
    "type 2 diabetes", "hypothyroidism", "Graves disease", "primary hyperparathyroidism",
    "adrenal insufficiency", "polycystic ovary syndrome", "osteoporosis", "thyroid nodule",
    "prediabetes", "Cushing syndrome", "hyperlipidemia", "type 1 diabetes",
)
_MEDS = {
    "type 2 diabetes": "metformin 1000 mg twice daily",
    "hypothyroidism": "levothyroxine 75 mcg daily",
    "Graves disease": "methimazole 10 mg daily",
    "primary hyperparathyroidism": "cinacalcet 30 mg daily",
    "adrenal insufficiency": "hydrocortisone 15 mg in divided doses",
    "polycystic ovary syndrome": "metformin 500 mg daily",
    "osteoporosis": "alendronate 70 mg weekly",
    "thyroid nodule": "no current medications",
    "prediabetes": "no current medications",
    "Cushing syndrome": "no current medications",
    "hyperlipidemia": "atorvastatin 20 mg daily",
    "type 1 diabetes": "insulin glargine 20 units nightly",
}


def _section(text: str, start: str, end: Optional[str] = None) -> str:
    i = text.find(start)
    if i < 0:
        return ""
    i += len(start)
    j = text.find(end, i) if end else -1
    return text[i : j if j >= 0 else None].strip()


def _condition_for(seed: str) -> str:
    for c in _CONDITIONS:
        if c.lower() in seed.lower():
            return c
    return _CONDITIONS[_h(seed) % len(_CONDITIONS)]


def _topics(user: str) -> str:
    want = int(re.search(r"Propose (\d+)", user).group(1))
    batch = re.search(r"Request batch: (\S+)", user).group(1)
    topics = []
    for i in range(want):
        cond = _CONDITIONS[_h(batch, str(i)) % len(_CONDITIONS)]
        topics.append({"title": f"{cond.capitalize()} visit {batch}-{i}", "focus": f"management of {cond}"})
    return json.dumps({"topics": topics})


def _context(user: str) -> str:
    title = _section(user, "Topic:", "\n")
    cond = _condition_for(title)
    age = 30 + _h(title) % 45
    a1c = 6 + (_h(title, "a1c") % 30) / 10
    return (
        f"A {age}-year-old patient with {cond} attends a follow-up endocrinology visit ({title}). "
        f"Current medication: {_MEDS[cond]}. Recent HbA1c {a1c:.1f}% and TSH 2.1 mIU/L. "
        "The patient reports fatigue but denies chest pain or palpitations. "
        "The clinician reviews labs, adjusts therapy, and schedules follow-up in three months."
    )


def _dialogue(context: str) -> str:
    cond = _condition_for(context)
    med = _MEDS[cond]
    lines = [
        f"Doctor: Good morning. We are following up on your {cond} today.",
        "Patient: Morning. I have been feeling more tired than usual.",
        "Doctor: Any chest pain or palpitations?",
        "Patient: No chest pain, no palpitations.",
        f"Doctor: Your recent labs came back. {_section(context, 'Recent', '. The') or 'They look stable'}.",
        f"Patient: Should I keep taking {med}?",
        f"Doctor: Yes, continue {med}, and we will recheck labs before the next visit.",
        "Patient: Okay, sounds good.",
        "Doctor: Let's follow up in three months.",
    ]
    return "\n".join(lines)


def _note_from_transcript(transcript: str, sloppy: bool) -> str:
    cond = _condition_for(transcript)
    patient = [l.split(":", 1)[1].strip() for l in transcript.split("\n") if l.lower().startswith("patient:")]
    doctor = [l.split(":", 1)[1].strip() for l in transcript.split("\n") if l.lower().startswith("doctor:")]
    if sloppy:
        return (
            f"The patient came in about {cond}. " + " ".join(patient[:2]) + " The doctor discussed labs and medications."
        )
    meds = _MEDS[cond]
    return (
        f"## Chief Complaint\nFollow-up of {cond}.\n\n"
        f"## History of Present Illness\n{' '.join(patient[:3])}\n\n"
        f"## Review of Systems\nDenies chest pain and palpitations.\n\n"
        f"## Medications\n{meds.capitalize()}.\n\n"
        f"## Laboratory and Diagnostic Results\n{' '.join(d for d in doctor if 'labs' in d.lower()) or 'None reported'}\n\n"
        f"## Assessment\n{cond.capitalize()}, stable.\n\n"
        f"## Plan\nContinue {meds}. Recheck labs before next visit.\n\n"
        f"## Follow-up\nReturn in three months.\n"
    )


def _judge(user: str) -> str:
    ref = _section(user, "<reference_note>", "</reference_note>")
    cand = _section(user, "<candidate_note>", "</candidate_note>")
    source = _section(user, "<transcript>", "</transcript>") or ref
    r1 = rouge_n(tokenize(cand), tokenize(ref), 1)
    cand_toks, src_toks = tokenize(cand), set(tokenize(source))
    unsupported = sum(t not in src_toks for t in cand_toks) / max(len(cand_toks), 1)
    covered = r1.recall

    def likert(x: float) -> int:
        return max(1, min(5, 1 + round(4 * x)))

    sev = lambda x, lo, hi: "No" if x < lo else ("Minor" if x < hi else "Major")
    return json.dumps(
        {
            "factual_correctness": likert(1 - unsupported),
            "completeness": likert(covered),
            "clinical_relevance": likert((1 - unsupported + covered) / 2),
            "coherence_organization": likert(1.0 if "## " in cand else 0.3),
            "terminology_accuracy": likert(1 - unsupported / 2),
            "readability": likert(0.9 if "## " in cand else 0.5),
            "overall_quality": likert(r1.fmeasure),
            "negation_detection": "denies" in cand.lower() or "no " in cand.lower(),
            "hallucination": sev(unsupported, 0.15, 0.4),
            "omission": sev(1 - covered, 0.3, 0.6),
            "rationale": f"Unigram F {r1.fmeasure:.2f}; {unsupported:.0%} of candidate tokens unsupported.",
        }
    )


def clinic_responder(path: str, payload: dict) -> tuple[int, dict]:
    """Deterministic rule-based responder covering every prompt the toolkit ships."""
    if path == EMBED_PATH:
        return 200, embedding_body(payload.get("text", ""))
    msgs = payload.get("messages") or []
    system = next((m["content"] for m in msgs if m["role"] == "system"), "")
    user = next((m["content"] for m in msgs if m["role"] == "user"), "")
    model = payload.get("model", "")
    if "consultation topics" in system:
        content = _topics(user)
    elif "clinical case descriptions" in system:
        content = _context(user)
    elif "write natural, unedited transcripts" in system:
        content = _dialogue(_section(user, "Case description:", "Write the full"))
    elif "reviewing synthetic consultation" in system:
        transcript = _section(user, "Transcript to review:")
        realism = 5 if "revision" in transcript or _h(transcript) % 3 else 3
        content = json.dumps(
            {"completeness": 5, "clinical_relevance": 5, "realism": realism, "feedback": "Add a natural interruption."}
        )
    elif "revise synthetic" in system:
        transcript = _section(user, "Transcript to revise:")
        n = transcript.count("(revision ") + 1
        content = f"{transcript}\nPatient: Sorry, one more thing about my diet (revision {n})."
    elif "expert clinical documentation reviewer" in system:
        content = _judge(user)
    elif "structured" in system and "note" in system:
        transcript = _section(user, "Conversation transcript:", "Write the structured note") or user
        content = _note_from_transcript(transcript, sloppy="base" in model.lower())
    else:
        content = "I am a mock model."
    return 200, chat_body(content)


# --- serving ----------------------------------------------------------------


def as_transport(responder: Responder) -> httpx.MockTransport:
    """Wrap a responder as an in-process httpx transport (no sockets)."""

    def handle(request: httpx.Request) -> httpx.Response:
        payload = json.loads(request.content or b"{}")
        status, body = responder(request.url.path, payload)
        return httpx.Response(status, json=body)

    return httpx.MockTransport(handle)


@dataclass
class RecordedRequest:
    path: str
    payload: dict


class MockEndpoint:
    """Threaded HTTP server on 127.0.0.1 serving a responder.

    Use as a context manager; ``url`` is the base URL and ``requests`` lists
    everything received.
    """

    def __init__(self, responder: Responder = clinic_responder, port: int = 0):
        self.responder = responder
        self.requests: list[RecordedRequest] = []
        self._lock = threading.Lock()
        endpoint = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                try:
                    payload = json.loads(self.rfile.read(length) or b"{}")
                except json.JSONDecodeError:
                    payload = {}
                with endpoint._lock:
                    endpoint.requests.append(RecordedRequest(self.path, payload))
                status, body = endpoint.responder(self.path, payload)
                data = json.dumps(body).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self._server = ThreadingHTTPServer(("127.0.0.1", port), Handler)
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def request_count(self) -> int:
        with self._lock:
            return len(self.requests)

    def start(self) -> "MockEndpoint":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def main(argv=None) -> None:
    import argparse

    ap = argparse.ArgumentParser(description="Serve the rule-based mock model locally.")
    ap.add_argument("--port", type=int, default=8000)
    args = ap.parse_args(argv)
    ep = MockEndpoint(port=args.port)
    print(f"mock endpoint listening on {ep.url}", flush=True)
    try:
        ep._server.serve_forever()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
