"""Candidate note generation: one endpoint/model configuration per arm."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from ._io import canonical_hash, write_jsonl
from .llm_client import GENERATION_TEMPERATURE, ChatClient, ChatRequest, ClientConfig, LLMError, Message
from .notes import DEFAULT_SCHEMA, CandidateRecord, SectionSchema, TranscriptRecord, parse_note
from .prompts import PromptTemplate, bullet_list, default_note_template, load_template

logger = logging.getLogger(__name__)

WARN_TRUNCATED = "truncated"
WARN_UNSTRUCTURED = "no_recognized_sections"


@dataclass(frozen=True)
class GenerationProfile:
    profile_id: str
    model: str
    client: ClientConfig = field(default_factory=ClientConfig)
    prompt_template_id: str = "note_default"
    temperature: float = GENERATION_TEMPERATURE
    max_tokens: int = 2048
    seed: Optional[int] = None

    @property
    def config_hash(self) -> str:
        return canonical_hash(dataclasses.asdict(self))

    @classmethod
    def from_json(cls, obj: dict, client: Optional[ClientConfig] = None) -> "GenerationProfile":
        obj = dict(obj)
        if "client" in obj:
            client = ClientConfig(**obj.pop("client"))
        return cls(client=client or ClientConfig(), **obj)


def render_prompt(
    template: PromptTemplate, transcript: str, schema: SectionSchema = DEFAULT_SCHEMA
) -> tuple[Message, ...]:
    return template.render({"transcript": transcript, "sections": bullet_list(schema.canonical)})


def generate_note(
    record: TranscriptRecord,
    profile: GenerationProfile,
    client: ChatClient,
    template: Optional[PromptTemplate] = None,
    schema: SectionSchema = DEFAULT_SCHEMA,
) -> CandidateRecord:
    template = template or _template_for(profile)
    req = ChatRequest(
        model=profile.model,
        messages=render_prompt(template, record.transcript, schema),
        temperature=profile.temperature,
        max_tokens=profile.max_tokens,
        seed=profile.seed,
    )
    resp = client.chat(req)
    note = parse_note(resp.content, schema)
    warnings = []
    if resp.finish_reason == "length":
        warnings.append(WARN_TRUNCATED)
    if note.recognized_count == 0:
        warnings.append(WARN_UNSTRUCTURED)
    if warnings:
        logger.warning("%s: %s", record.id, ", ".join(warnings))
    return CandidateRecord(record.id, profile.profile_id, note, profile.config_hash, tuple(warnings))


def _template_for(profile: GenerationProfile) -> PromptTemplate:
    if profile.prompt_template_id == "note_default":
        return default_note_template()
    return load_template(profile.prompt_template_id)


@dataclass
class BatchResult:
    records: list
    failures: dict[str, str]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_batch(fn, items: Sequence, ids: Sequence[str], max_workers: int) -> BatchResult:
    """Apply ``fn`` concurrently; results keep input order, failures are collected by id."""
    results: list = [None] * len(items)
    failures: dict[str, str] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(fn, item) for item in items]
        for i, fut in enumerate(futures):
            try:
                results[i] = fut.result()
            except (LLMError, ValueError) as exc:
                failures[ids[i]] = f"{type(exc).__name__}: {exc}"
                logger.error("%s failed permanently: %s", ids[i], exc)
    return BatchResult([r for r in results if r is not None], failures)


def generate_batch(
    dataset: Sequence[TranscriptRecord],
    profile: GenerationProfile,
    client: ChatClient,
    out_path: Union[str, Path, None] = None,
    template: Optional[PromptTemplate] = None,
    schema: SectionSchema = DEFAULT_SCHEMA,
) -> BatchResult:
    """Generate one candidate per transcript and write them in input order.

    Already-cached requests cost nothing, so an interrupted batch is resumed
    by simply running it again.
    """
    template = template or _template_for(profile)
    result = run_batch(
        lambda rec: generate_note(rec, profile, client, template, schema),
        dataset,
        [r.id for r in dataset],
        client.cfg.max_concurrency,
    )
    if out_path is not None:
        write_jsonl(out_path, (c.to_json() for c in result.records))
    return result
