"""Multi-stage synthetic consultation data workflow.

Stages per run: topics -> per record (context -> transcript -> critique/revise
loop -> structured note). Every stage result is checkpointed as
``{checkpoint_dir}/{record_index}/{stage}.out`` so a killed run resumes where
it stopped.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Union

from ._io import atomic_write_text, canonical_hash, write_jsonl
from .generator import run_batch
from .llm_client import SYNTHESIS_TEMPERATURE, ChatClient, ChatRequest, Message
from .notes import DEFAULT_SCHEMA, SectionSchema, StructuredNote, parse_note
from .prompts import PromptTemplate, bullet_list, load_template

logger = logging.getLogger(__name__)

MAX_TOPIC_REREQUESTS = 3
WARN_NOTE_UNSTRUCTURED = "note_no_recognized_sections"

_SPEAKER_RE = re.compile(r"^\s*\**\s*([A-Za-z][A-Za-z0-9 .'\-]{0,40}?)\s*\**\s*:")

_REQUIRED = {
    "synth_topics": (),
    "synth_context": (),
    "synth_transcript": ("context",),
    "synth_critique": ("transcript",),
    "synth_revise": ("transcript",),
    "synth_note": ("transcript",),
}


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class StageProfile:
    model: str
    temperature: float = SYNTHESIS_TEMPERATURE
    max_tokens: int = 4096
    seed: Optional[int] = None

    def request(self, messages, structured: bool = False) -> ChatRequest:
        return ChatRequest(self.model, tuple(messages), self.temperature, self.max_tokens, self.seed, structured)


@dataclass(frozen=True)
class Topic:
    topic_id: str
    title: str
    focus: str = ""


@dataclass(frozen=True)
class CaseContext:
    topic_id: str
    description: str


@dataclass(frozen=True)
class CritiqueResult:
    completeness: int
    clinical_relevance: int
    realism: int
    feedback: str
    passed: bool

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SynthesisConfig:
    count: int
    writer: StageProfile
    critic: StageProfile
    checkpoint_dir: str
    specialty: str = "endocrinology"
    max_revision_iters: int = 3
    pass_threshold: int = 4
    topic_batch_size: int = 25
    template_dir: Optional[str] = None
    pilot: Optional[int] = None

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.max_revision_iters < 0:
            raise ValueError("max_revision_iters must be >= 0")
        if not 1 <= self.pass_threshold <= 5:
            raise ValueError("pass_threshold must be within 1-5")
        if self.pilot is not None and self.pilot < 1:
            raise ValueError("pilot must be >= 1")

    @property
    def config_hash(self) -> str:
        # Pilot size and checkpoint location do not change record contents.
        d = dataclasses.asdict(self)
        d.pop("pilot")
        d.pop("checkpoint_dir")
        return canonical_hash(d)


@lru_cache(maxsize=None)
def _shipped(template_id: str) -> PromptTemplate:
    return load_template(template_id, _REQUIRED[template_id])


def stage_template(template_id: str, template_dir: Optional[str] = None) -> PromptTemplate:
    if template_dir:
        path = Path(template_dir) / f"{template_id}.txt"
        if path.exists():
            return load_template(path, _REQUIRED[template_id])
    return _shipped(template_id)


def speaker_labels(transcript: str) -> set[str]:
    labels = set()
    for line in transcript.split("\n"):
        m = _SPEAKER_RE.match(line)
        if m:
            labels.add(m.group(1).strip().casefold())
    return labels


def is_dialogue(transcript: str) -> bool:
    return bool(transcript.strip()) and len(speaker_labels(transcript)) >= 2


def _json_object(text: str) -> Optional[dict]:
    text = text.strip()
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end <= start:
        return None
    try:
        obj = json.loads(text[start : end + 1])
    except json.JSONDecodeError:
        return None
    return obj if isinstance(obj, dict) else None


# --- stages -----------------------------------------------------------------


def generate_topics(
    n: int,
    specialty: str,
    profile: StageProfile,
    client: ChatClient,
    batch_size: int = 25,
    template: Optional[PromptTemplate] = None,
) -> list[Topic]:
    """Request ``n`` distinct topics in batches.

    A batch that comes back short (duplicate or missing titles) is re-requested
    for the remainder up to three times before giving up.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    template = template or _shipped("synth_topics")
    topics: list[Topic] = []
    seen: set[str] = set()
    batch = 0
    while len(topics) < n:
        target = len(topics) + min(batch_size, n - len(topics))
        for attempt in range(MAX_TOPIC_REREQUESTS + 1):
            want = target - len(topics)
            taken = "; ".join(t.title for t in topics) or "none"
            msgs = template.render({"n": want, "specialty": specialty, "taken": taken, "batch": f"{batch}.{attempt}"})
            obj = _json_object(client.chat(profile.request(msgs, structured=True)).content) or {}
            items = obj.get("topics") if isinstance(obj.get("topics"), list) else []
            for item in items:
                if not isinstance(item, dict) or not isinstance(item.get("title"), str):
                    continue
                title = item["title"].strip()
                key = title.casefold()
                if not title or key in seen or len(topics) >= target:
                    continue
                seen.add(key)
                topics.append(Topic(f"T{len(topics):05d}", title, str(item.get("focus", "")).strip()))
            if len(topics) == target:
                break
            logger.info("topic batch %d short by %d; re-requesting", batch, target - len(topics))
        else:
            raise SynthesisError(f"could not obtain {n} distinct topics after {MAX_TOPIC_REREQUESTS} re-requests")
        batch += 1
    return topics


def expand_context(
    topic: Topic, specialty: str, profile: StageProfile, client: ChatClient, template: Optional[PromptTemplate] = None
) -> CaseContext:
    template = template or _shipped("synth_context")
    msgs = template.render({"title": topic.title, "focus": topic.focus or topic.title, "specialty": specialty})
    text = client.chat(profile.request(msgs)).content.strip()
    if not text:
        raise SynthesisError(f"empty context for topic {topic.topic_id}")
    return CaseContext(topic.topic_id, text)


_DIALOGUE_FIX = (
    "That is not a usable transcript. Write it as a dialogue with at least two speakers, "
    "each turn on its own line starting with the speaker label, e.g. 'Doctor: ...' and 'Patient: ...'."
)


def _dialogue_with_retry(msgs: tuple[Message, ...], profile: StageProfile, client: ChatClient, reject: Callable[[str], bool]) -> str:
    text = client.chat(profile.request(msgs)).content.strip()
    if not reject(text):
        return text
    retry = msgs + (Message("assistant", text), Message("user", _DIALOGUE_FIX))
    text = client.chat(profile.request(retry)).content.strip()
    if reject(text):
        raise SynthesisError("model did not produce a valid dialogue after one re-request")
    return text


def synthesize_transcript(
    context: CaseContext, specialty: str, profile: StageProfile, client: ChatClient, template: Optional[PromptTemplate] = None
) -> str:
    template = template or _shipped("synth_transcript")
    msgs = template.render({"context": context.description, "specialty": specialty})
    return _dialogue_with_retry(msgs, profile, client, lambda t: not is_dialogue(t))


def _parse_critique(text: str, threshold: int) -> CritiqueResult:
    obj = _json_object(text)
    if obj is None:
        raise SynthesisError("critique is not a JSON object")
    scores = []
    for name in ("completeness", "clinical_relevance", "realism"):
        v = obj.get(name)
        if isinstance(v, float) and v.is_integer():
            v = int(v)
        if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
            raise SynthesisError(f"critique field {name} must be an integer 1-5, got {v!r}")
        scores.append(v)
    feedback = obj.get("feedback", "")
    return CritiqueResult(*scores, str(feedback), all(s >= threshold for s in scores))


def critique_transcript(
    transcript: str,
    specialty: str,
    profile: StageProfile,
    client: ChatClient,
    pass_threshold: int = 4,
    template: Optional[PromptTemplate] = None,
) -> CritiqueResult:
    if not transcript.strip():
        raise ValueError("transcript is empty")
    template = template or _shipped("synth_critique")
    msgs = template.render({"transcript": transcript, "specialty": specialty})
    text = client.chat(profile.request(msgs, structured=True)).content
    try:
        return _parse_critique(text, pass_threshold)
    except SynthesisError as exc:
        retry = msgs + (
            Message("assistant", text),
            Message("user", f"Invalid review: {exc}. Reply with only the JSON object, all scores integers 1-5."),
        )
        text = client.chat(profile.request(retry, structured=True)).content
        return _parse_critique(text, pass_threshold)


def revise_transcript(
    transcript: str,
    critique: CritiqueResult,
    specialty: str,
    profile: StageProfile,
    client: ChatClient,
    template: Optional[PromptTemplate] = None,
) -> str:
    if critique.passed:
        raise ValueError("revise_transcript called for a transcript that passed critique")
    template = template or _shipped("synth_revise")
    msgs = template.render(
        {
            "transcript": transcript,
            "specialty": specialty,
            "completeness": critique.completeness,
            "clinical_relevance": critique.clinical_relevance,
            "realism": critique.realism,
            "feedback": critique.feedback or "(none given)",
        }
    )
    return _dialogue_with_retry(msgs, profile, client, lambda t: not is_dialogue(t) or t == transcript.strip())


def transform_to_note(
    transcript: str,
    specialty: str,
    profile: StageProfile,
    client: ChatClient,
    schema: SectionSchema = DEFAULT_SCHEMA,
    template: Optional[PromptTemplate] = None,
) -> tuple[StructuredNote, tuple[str, ...]]:
    template = template or _shipped("synth_note")
    msgs = template.render({"transcript": transcript, "specialty": specialty, "sections": bullet_list(schema.canonical)})
    text = client.chat(profile.request(msgs)).content
    note = parse_note(text, schema)
    if note.recognized_count:
        return note, ()
    retry = msgs + (
        Message("assistant", text),
        Message("user", "Rewrite the note using the required '## Heading' lines exactly as listed."),
    )
    note = parse_note(client.chat(profile.request(retry)).content, schema)
    if note.recognized_count:
        return note, ()
    logger.warning("note kept without recognized sections")
    return note, (WARN_NOTE_UNSTRUCTURED,)


# --- pipeline ---------------------------------------------------------------


class Checkpoints:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def path(self, index: int, stage: str) -> Path:
        return self.root / f"{index:05d}" / f"{stage}.out"

    def get(self, index: int, stage: str) -> Optional[str]:
        p = self.path(index, stage)
        return p.read_text(encoding="utf-8") if p.exists() else None

    def put(self, index: int, stage: str, text: str) -> str:
        atomic_write_text(self.path(index, stage), text)
        return text

    def memo(self, index: int, stage: str, compute: Callable[[], str]) -> str:
        cached = self.get(index, stage)
        return cached if cached is not None else self.put(index, stage, compute())

    def check_manifest(self, config: SynthesisConfig) -> None:
        manifest = self.root / "manifest.json"
        expected = {"config_hash": config.config_hash, "count": config.count}
        if manifest.exists():
            found = json.loads(manifest.read_text(encoding="utf-8"))
            if found.get("config_hash") != expected["config_hash"]:
                raise SynthesisError(
                    f"checkpoint dir {self.root} belongs to a different configuration; "
                    "use a fresh --checkpoint-dir or restore the original config"
                )
        else:
            atomic_write_text(manifest, json.dumps(expected, indent=2) + "\n")


@dataclass
class PipelineResult:
    records: list[dict]
    failures: dict[str, str] = field(default_factory=dict)
    revise_calls: dict[str, int] = field(default_factory=dict)
    pilot: bool = False


def record_id(index: int) -> str:
    return f"synth-{index:05d}"


def _process_record(
    index: int,
    topic: Topic,
    config: SynthesisConfig,
    client: ChatClient,
    ckpt: Checkpoints,
    schema: SectionSchema,
) -> dict:
    tdir = config.template_dir
    spec = config.specialty
    context = ckpt.memo(
        index, "context", lambda: expand_context(topic, spec, config.writer, client, stage_template("synth_context", tdir)).description
    )
    transcript = ckpt.memo(
        index,
        "transcript_0",
        lambda: synthesize_transcript(CaseContext(topic.topic_id, context), spec, config.writer, client, stage_template("synth_transcript", tdir)),
    )
    revisions = 0
    passed = False
    for it in range(config.max_revision_iters + 1):
        raw = ckpt.memo(
            index,
            f"critique_{it}",
            lambda: json.dumps(
                critique_transcript(transcript, spec, config.critic, client, config.pass_threshold, stage_template("synth_critique", tdir)).to_json()
            ),
        )
        critique = CritiqueResult(**json.loads(raw))
        if critique.passed:
            passed = True
            break
        if it == config.max_revision_iters:
            break
        prev = transcript
        transcript = ckpt.memo(
            index,
            f"transcript_{it + 1}",
            lambda: revise_transcript(prev, critique, spec, config.writer, client, stage_template("synth_revise", tdir)),
        )
        revisions += 1

    def note_stage() -> str:
        note, warnings = transform_to_note(transcript, spec, config.writer, client, schema, stage_template("synth_note", tdir))
        return json.dumps({"note": note.raw, "warnings": list(warnings)})

    note_obj = json.loads(ckpt.memo(index, "note", note_stage))
    warnings = list(note_obj["warnings"])
    if not passed:
        warnings.append("critique_budget_exhausted")
    return {
        "id": record_id(index),
        "transcript": transcript,
        "note": note_obj["note"],
        "critique_passed": passed,
        "revisions": revisions,
        "topic": topic.title,
        "warnings": warnings,
    }


def _load_topics(config: SynthesisConfig, client: ChatClient, ckpt: Checkpoints) -> list[Topic]:
    stored = [ckpt.get(i, "topic") for i in range(config.count)]
    if all(s is not None for s in stored):
        return [Topic(**json.loads(s)) for s in stored]
    topics = generate_topics(
        config.count,
        config.specialty,
        config.writer,
        client,
        config.topic_batch_size,
        stage_template("synth_topics", config.template_dir),
    )
    for i, t in enumerate(topics):
        ckpt.put(i, "topic", json.dumps(dataclasses.asdict(t)))
    return topics


def run_pipeline(
    config: SynthesisConfig,
    client: ChatClient,
    out_path: Union[str, Path, None] = None,
    schema: SectionSchema = DEFAULT_SCHEMA,
) -> PipelineResult:
    """Produce ``config.count`` records (or the first ``config.pilot``).

    The output file is written only when every requested record succeeded;
    otherwise the failures are returned and checkpoints keep the progress.
    """
    ckpt = Checkpoints(config.checkpoint_dir)
    ckpt.check_manifest(config)
    topics = _load_topics(config, client, ckpt)
    limit = min(config.pilot, config.count) if config.pilot else config.count
    indices = list(range(limit))
    batch = run_batch(
        lambda i: _process_record(i, topics[i], config, client, ckpt, schema),
        indices,
        [record_id(i) for i in indices],
        client.cfg.max_concurrency,
    )
    result = PipelineResult(batch.records, batch.failures, pilot=bool(config.pilot))
    result.revise_calls = {r["id"]: r["revisions"] for r in batch.records}
    if batch.failures:
        return result
    if out_path is not None:
        write_jsonl(out_path, result.records)
    return result
