"""LLM-as-judge rubric: seven Likert dimensions, negation check, hallucination/omission severity."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence, Union

from ._io import write_jsonl
from .generator import BatchResult, run_batch
from .llm_client import JUDGE_TEMPERATURE, ChatClient, ChatRequest, ClientConfig, Message

logger = logging.getLogger(__name__)

DEFAULT_JUDGE_MODEL = "gpt-4.1-mini-2025-04-14"

LIKERT_FIELDS = (
    "factual_correctness",
    "completeness",
    "clinical_relevance",
    "coherence_organization",
    "terminology_accuracy",
    "readability",
    "overall_quality",
)
SEVERITY_FIELDS = ("hallucination", "omission")
ASSESSMENT_FIELDS = LIKERT_FIELDS + ("negation_detection",) + SEVERITY_FIELDS


class Severity(str, Enum):
    NO = "No"
    MINOR = "Minor"
    MAJOR = "Major"


class JudgeParseError(ValueError):
    def __init__(self, field_name: Optional[str], message: str):
        super().__init__(f"{field_name}: {message}" if field_name else message)
        self.field = field_name


@dataclass(frozen=True)
class JudgeAssessment:
    factual_correctness: int
    completeness: int
    clinical_relevance: int
    coherence_organization: int
    terminology_accuracy: int
    readability: int
    overall_quality: int
    negation_detection: bool
    hallucination: Severity
    omission: Severity
    rationale: str = ""

    def __post_init__(self):
        for name in LIKERT_FIELDS:
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or not 1 <= v <= 5:
                raise JudgeParseError(name, f"must be an integer 1-5, got {v!r}")
        object.__setattr__(self, "hallucination", Severity(self.hallucination))
        object.__setattr__(self, "omission", Severity(self.omission))

    def likert(self) -> tuple[int, ...]:
        return tuple(getattr(self, f) for f in LIKERT_FIELDS)

    def to_json(self) -> dict:
        out: dict = {f: getattr(self, f) for f in LIKERT_FIELDS}
        out["negation_detection"] = self.negation_detection
        out["hallucination"] = self.hallucination.value
        out["omission"] = self.omission.value
        out["rationale"] = self.rationale
        return out


@dataclass(frozen=True)
class JudgeConfig:
    client: ClientConfig = field(default_factory=ClientConfig)
    judge_model: str = DEFAULT_JUDGE_MODEL
    temperature: float = JUDGE_TEMPERATURE
    include_transcript: bool = True
    max_reasks: int = 1
    max_tokens: int = 1024
    seed: Optional[int] = None


def composite_score(a: JudgeAssessment) -> float:
    """Unweighted mean of the seven Likert dimensions."""
    return sum(a.likert()) / len(LIKERT_FIELDS)


# --- prompt -----------------------------------------------------------------

_DIMENSIONS = """\
factual_correctness: Are the statements in the candidate note true to the source?
  1 = several clinically important statements are wrong; 3 = mostly correct with some errors; 5 = every statement is accurate.
completeness: Does the candidate capture the clinically relevant content?
  1 = most key findings, medications, results or plans are missing; 3 = main points present, secondary details missing; 5 = nothing clinically relevant is missing.
clinical_relevance: Does the note focus on what matters for patient care?
  1 = dominated by irrelevant or trivial content; 3 = relevant but with noticeable padding; 5 = entirely focused on clinically pertinent information.
coherence_organization: Is the note logically structured under appropriate sections?
  1 = disorganized, content under wrong sections; 3 = generally organized with some misplaced content; 5 = clean, well-ordered sections.
terminology_accuracy: Is medical terminology, including drug names, doses and units, used correctly?
  1 = frequent misuse; 3 = occasional imprecision; 5 = precise and correct throughout.
readability: Can a clinician read the note quickly and unambiguously?
  1 = hard to follow; 3 = readable with effort; 5 = clear and concise.
overall_quality: Would a clinician accept this note for the medical record?
  1 = unusable; 3 = usable after substantial edits; 5 = ready to sign.
negation_detection: true if every negated finding in the source (for example "denies chest pain", "no polyuria") is preserved as negated in the candidate and no finding has its polarity flipped; otherwise false.
hallucination: content in the candidate that is not supported by the {ground}.
  "No" = none; "Minor" = unsupported details without clinical consequence; "Major" = unsupported findings, diagnoses, medications, doses or plans that could affect care.
omission: clinically significant content in the {ground} that is missing from the candidate.
  "No" = none; "Minor" = missing details without clinical consequence; "Major" = missing findings, medications, results or plans that could affect care."""

_OUTPUT_SPEC = """\
Respond with a single JSON object and nothing else, with exactly these keys:
{"factual_correctness": 1-5, "completeness": 1-5, "clinical_relevance": 1-5, "coherence_organization": 1-5, "terminology_accuracy": 1-5, "readability": 1-5, "overall_quality": 1-5, "negation_detection": true|false, "hallucination": "No"|"Minor"|"Major", "omission": "No"|"Minor"|"Major", "rationale": "two or three sentences"}"""


def build_judge_prompt(
    transcript: Optional[str], reference_note: str, candidate_note: str, config: JudgeConfig = JudgeConfig()
) -> tuple[Message, Message]:
    if not candidate_note.strip():
        raise ValueError("candidate note is empty")
    if not reference_note.strip():
        raise ValueError("reference note is empty")
    use_transcript = config.include_transcript and transcript is not None and transcript.strip()
    ground = "source transcript" if use_transcript else "reference note"
    system = (
        "You are an expert clinical documentation reviewer. You will evaluate a candidate "
        "structured medical note generated by an AI system, comparing it against the "
        f"{'source conversation and a ' if use_transcript else ''}reference note written for the same encounter.\n\n"
        "Score each dimension on a 1-5 scale using these anchors:\n\n"
        + _DIMENSIONS.format(ground=ground)
        + "\n\n"
        + _OUTPUT_SPEC
    )
    docs = []
    if use_transcript:
        docs.append(f"<transcript>\n{transcript.strip()}\n</transcript>")
    docs.append(f"<reference_note>\n{reference_note.strip()}\n</reference_note>")
    docs.append(f"<candidate_note>\n{candidate_note.strip()}\n</candidate_note>")
    user = "\n\n".join(docs) + "\n\nEvaluate the candidate note."
    return Message("system", system), Message("user", user)


# --- parsing ----------------------------------------------------------------


def _extract_object(text: str) -> dict:
    text = (text or "").strip()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        start, end = text.find("{"), text.rfind("}")
        if start == -1 or end <= start:
            raise JudgeParseError(None, "no JSON object in response") from None
        try:
            obj = json.loads(text[start : end + 1])
        except json.JSONDecodeError as exc:
            raise JudgeParseError(None, f"invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise JudgeParseError(None, "response is not a JSON object")
    return obj


def _likert(name: str, v) -> int:
    if isinstance(v, bool):
        raise JudgeParseError(name, f"must be an integer 1-5, got {v!r}")
    if isinstance(v, float) and v.is_integer():
        v = int(v)
    if not isinstance(v, int):
        raise JudgeParseError(name, f"must be an integer 1-5, got {v!r}")
    if not 1 <= v <= 5:
        raise JudgeParseError(name, f"out of range 1-5: {v}")
    return v


def _flag(name: str, v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.strip().lower() in ("yes", "true", "no", "false"):
        return v.strip().lower() in ("yes", "true")
    raise JudgeParseError(name, f"must be true or false, got {v!r}")


def _severity(name: str, v) -> Severity:
    if isinstance(v, str):
        key = v.strip().lower()
        for sev in Severity:
            if sev.value.lower() == key:
                return sev
    raise JudgeParseError(name, f"unrecognized severity {v!r} (expected No, Minor or Major)")


def parse_judge_response(text: str) -> JudgeAssessment:
    obj = _extract_object(text)
    for name in ASSESSMENT_FIELDS:
        if name not in obj:
            raise JudgeParseError(name, "missing field")
    rationale = obj.get("rationale", "")
    return JudgeAssessment(
        *(_likert(n, obj[n]) for n in LIKERT_FIELDS),
        negation_detection=_flag("negation_detection", obj["negation_detection"]),
        hallucination=_severity("hallucination", obj["hallucination"]),
        omission=_severity("omission", obj["omission"]),
        rationale=rationale if isinstance(rationale, str) else json.dumps(rationale),
    )


# --- calls ------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeRecord:
    id: str
    model: str
    reference: str
    candidate: str
    transcript: Optional[str] = None


@dataclass(frozen=True)
class JudgedRow:
    id: str
    model: str
    assessment: JudgeAssessment
    reask_count: int

    def to_json(self) -> dict:
        return {"id": self.id, "model": self.model, **self.assessment.to_json(), "reask_count": self.reask_count}

    @classmethod
    def from_json(cls, obj: dict) -> "JudgedRow":
        return cls(str(obj["id"]), str(obj["model"]), parse_judge_response(json.dumps(obj)), int(obj.get("reask_count", 0)))


class JudgeFailure(ValueError):
    """Both the first answer and the re-ask failed to parse."""


def judge_pair(record: JudgeRecord, config: JudgeConfig, client: ChatClient) -> JudgedRow:
    msgs = list(build_judge_prompt(record.transcript, record.reference, record.candidate, config))
    errors = []
    for attempt in range(config.max_reasks + 1):
        req = ChatRequest(
            model=config.judge_model,
            messages=tuple(msgs),
            temperature=config.temperature,
            max_tokens=config.max_tokens,
            seed=config.seed,
            force_structured_output=True,
        )
        resp = client.chat(req)
        try:
            return JudgedRow(record.id, record.model, parse_judge_response(resp.content), attempt)
        except JudgeParseError as exc:
            errors.append(str(exc))
            logger.info("%s: judge response rejected (%s)", record.id, exc)
            msgs += [
                Message("assistant", resp.content),
                Message(
                    "user",
                    f"That response was invalid: {exc}. Reply again with only the JSON object, "
                    "containing every required key with values in the allowed ranges.",
                ),
            ]
    raise JudgeFailure(f"unparseable judge output after {config.max_reasks} re-ask(s): {'; '.join(errors)}")


def judge_batch(
    records: Sequence[JudgeRecord],
    config: JudgeConfig,
    client: ChatClient,
    out_path: Union[str, Path, None] = None,
) -> BatchResult:
    result = run_batch(lambda r: judge_pair(r, config, client), records, [r.id for r in records], client.cfg.max_concurrency)
    if out_path is not None:
        write_jsonl(out_path, (row.to_json() for row in result.records))
    return result
