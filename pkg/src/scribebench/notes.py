"""Transcripts, structured notes, the section parser, and dataset ingestion."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from ._io import dumps_line, iter_jsonl, write_jsonl

logger = logging.getLogger(__name__)

UNRECOGNIZED = "unrecognized"
BODY = "BODY"

HEADING_RE = re.compile(r"^\s*(##\s+(.+?)\s*|\*\*(.+?):?\*\*)\s*$")
_PUNCT_RE = re.compile(r"[^\w\s]|_")


class Source(str, Enum):
    INTERNAL_EVAL = "internal_eval"
    ACI_BENCH = "aci_bench"
    SYNTHETIC = "synthetic"
    OTHER = "other"


class DatasetError(ValueError):
    """A record file failed validation. The message names the file and line(s)."""


def _fold(text: str) -> str:
    return " ".join(_PUNCT_RE.sub(" ", text).casefold().split())


@dataclass(frozen=True)
class SectionSchema:
    canonical: tuple[str, ...]
    aliases: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "canonical", tuple(self.canonical))
        folded = [_fold(h) for h in self.canonical]
        if len(set(folded)) != len(folded):
            raise ValueError("canonical headings must be unique")
        lookup = {f: h for f, h in zip(folded, self.canonical)}
        for alias, target in self.aliases.items():
            if target not in self.canonical:
                raise ValueError(f"alias {alias!r} maps to unknown heading {target!r}")
            key = _fold(alias)
            if key in lookup and lookup[key] != target:
                raise ValueError(f"alias {alias!r} is ambiguous ({lookup[key]!r} vs {target!r})")
            lookup[key] = target
        object.__setattr__(self, "_lookup", lookup)

    def normalize(self, surface: str) -> str:
        return self._lookup.get(_fold(surface), UNRECOGNIZED)

    def to_json(self) -> dict:
        return {"canonical": list(self.canonical), "aliases": dict(self.aliases)}

    @classmethod
    def from_json(cls, obj: Mapping) -> "SectionSchema":
        return cls(tuple(obj["canonical"]), dict(obj.get("aliases", {})))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SectionSchema":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


DEFAULT_SCHEMA = SectionSchema(
    canonical=(
        "Chief Complaint",
        "History of Present Illness",
        "Review of Systems",
        "Past Medical History",
        "Medications",
        "Allergies",
        "Physical Examination",
        "Laboratory and Diagnostic Results",
        "Assessment",
        "Plan",
        "Follow-up",
    ),
    aliases={
        "CC": "Chief Complaint",
        "Reason for Visit": "Chief Complaint",
        "HPI": "History of Present Illness",
        "History of Present Illness (HPI)": "History of Present Illness",
        "ROS": "Review of Systems",
        "PMH": "Past Medical History",
        "Medical History": "Past Medical History",
        "Meds": "Medications",
        "Current Medications": "Medications",
        "Medication List": "Medications",
        "Drug Allergies": "Allergies",
        "Physical Exam": "Physical Examination",
        "PE": "Physical Examination",
        "Exam": "Physical Examination",
        "Labs": "Laboratory and Diagnostic Results",
        "Lab Results": "Laboratory and Diagnostic Results",
        "Laboratory Results": "Laboratory and Diagnostic Results",
        "Diagnostic Results": "Laboratory and Diagnostic Results",
        "Results": "Laboratory and Diagnostic Results",
        "Impression": "Assessment",
        "Treatment Plan": "Plan",
        "Followup": "Follow-up",
        "Follow-up Instructions": "Follow-up",
    },
)


def normalize_heading(surface: str, schema: SectionSchema = DEFAULT_SCHEMA) -> str:
    """Map a surface heading to its canonical form, or ``"unrecognized"``.

    Matching ignores case and punctuation, so ``"HPI:"`` and ``"hpi"`` hit the
    same alias.
    """
    return schema.normalize(surface)


@dataclass(frozen=True)
class NoteSection:
    heading: str
    body: str
    recognized: bool

    def __post_init__(self):
        if not self.heading.strip():
            raise ValueError("section heading must be non-empty")


@dataclass(frozen=True)
class StructuredNote:
    sections: tuple[NoteSection, ...]
    raw: str = ""

    def headings(self) -> list[str]:
        return [s.heading for s in self.sections]

    def get(self, heading: str) -> Optional[NoteSection]:
        for s in self.sections:
            if s.heading == heading:
                return s
        return None

    @property
    def recognized_count(self) -> int:
        return sum(s.recognized for s in self.sections)


def _match_heading(line: str) -> Optional[str]:
    m = HEADING_RE.match(line)
    if not m:
        return None
    surface = (m.group(2) if m.group(2) is not None else m.group(3)).strip()
    return surface or None


def parse_note(raw: str, schema: SectionSchema = DEFAULT_SCHEMA) -> StructuredNote:
    # Total: any text parses. Only "\n" splits lines so serialize/parse agree exactly.
    blocks: list[tuple[str, list[str]]] = []
    preamble: list[str] = []
    current: Optional[list[str]] = None
    for line in raw.split("\n"):
        surface = _match_heading(line)
        if surface is not None:
            current = []
            blocks.append((surface, current))
        elif current is None:
            preamble.append(line)
        else:
            current.append(line)

    sections: list[NoteSection] = []
    canonical_pos: dict[str, int] = {}
    pre_text = "\n".join(preamble).strip()
    if pre_text or not blocks:
        sections.append(NoteSection(BODY, pre_text, False))

    for surface, lines in blocks:
        body = "\n".join(lines).strip()
        canon = schema.normalize(surface)
        if canon == UNRECOGNIZED:
            sections.append(NoteSection(surface, body, False))
            continue
        if canon in canonical_pos:
            idx = canonical_pos[canon]
            merged = "\n\n".join(b for b in (sections[idx].body, body) if b)
            sections[idx] = NoteSection(canon, merged, True)
        else:
            canonical_pos[canon] = len(sections)
            sections.append(NoteSection(canon, body, True))
    return StructuredNote(tuple(sections), raw)


def serialize_note(note: StructuredNote) -> str:
    return "".join(f"## {s.heading}\n{s.body}\n\n" for s in note.sections)


# --- record types ---------------------------------------------------------


@dataclass(frozen=True)
class TranscriptRecord:
    id: str
    transcript: str
    source: Source = Source.OTHER
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("transcript id must be non-empty")
        if not self.transcript.strip():
            raise ValueError(f"transcript {self.id!r} is empty")

    def to_json(self) -> dict:
        out = {"id": self.id, "transcript": self.transcript, "source": self.source.value}
        if self.metadata:
            out["metadata"] = dict(self.metadata)
        return out


@dataclass(frozen=True)
class ReferencePair:
    id: str
    reference_note: StructuredNote
    transcript: Optional[TranscriptRecord] = None

    def __post_init__(self):
        if self.transcript is not None and self.transcript.id != self.id:
            raise ValueError(f"reference id {self.id!r} != transcript id {self.transcript.id!r}")

    def to_json(self) -> dict:
        out = {"id": self.id, "note": self.reference_note.raw}
        if self.transcript is not None:
            out["transcript"] = self.transcript.transcript
            out["source"] = self.transcript.source.value
        return out


@dataclass(frozen=True)
class CandidateRecord:
    id: str
    model: str
    note: StructuredNote
    gen_config_hash: str
    warnings: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "model": self.model,
            "note": self.note.raw,
            "gen_config_hash": self.gen_config_hash,
            "warnings": list(self.warnings),
        }


Record = Union[TranscriptRecord, ReferencePair, CandidateRecord]

REQUIRED_FIELDS = {
    "transcripts": ("id", "transcript"),
    "references": ("id", "note"),
    "candidates": ("id", "model", "note", "gen_config_hash"),
}


def _str_field(obj: dict, key: str, where: str) -> str:
    value = obj[key]
    if not isinstance(value, str):
        raise DatasetError(f"{where}: field {key!r} must be a string")
    return value


def _build(kind: str, obj: dict, where: str, schema: SectionSchema) -> Record:
    try:
        if kind == "transcripts":
            meta = obj.get("metadata") or {}
            return TranscriptRecord(
                _str_field(obj, "id", where),
                _str_field(obj, "transcript", where),
                Source(obj.get("source", "other")),
                {str(k): str(v) for k, v in meta.items()},
            )
        if kind == "references":
            rid = _str_field(obj, "id", where)
            transcript = None
            if obj.get("transcript"):
                transcript = TranscriptRecord(
                    rid, _str_field(obj, "transcript", where), Source(obj.get("source", "other"))
                )
            return ReferencePair(rid, parse_note(_str_field(obj, "note", where), schema), transcript)
        return CandidateRecord(
            _str_field(obj, "id", where),
            _str_field(obj, "model", where),
            parse_note(_str_field(obj, "note", where), schema),
            _str_field(obj, "gen_config_hash", where),
            tuple(obj.get("warnings") or ()),
        )
    except DatasetError:
        raise
    except ValueError as exc:
        raise DatasetError(f"{where}: {exc}") from None


def load_dataset(
    path: Union[str, Path], kind: str, schema: SectionSchema = DEFAULT_SCHEMA
) -> list[Record]:
    """Load and validate a line-delimited record file.

    ``kind`` is one of ``transcripts``, ``references``, ``candidates``. Records
    come back in file order. Raises DatasetError on a malformed line, a missing
    field, or a duplicate id (the message carries line numbers).
    """
    if kind not in REQUIRED_FIELDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    records: list[Record] = []
    seen: dict[str, int] = {}
    try:
        rows = list(iter_jsonl(path))
    except ValueError as exc:
        raise DatasetError(str(exc)) from None
    for lineno, obj in rows:
        where = f"{path}:{lineno}"
        if not isinstance(obj, dict):
            raise DatasetError(f"{where}: malformed line (expected an object)")
        missing = [k for k in REQUIRED_FIELDS[kind] if k not in obj]
        if missing:
            raise DatasetError(f"{where}: missing field(s) {', '.join(missing)}")
        rec = _build(kind, obj, where, schema)
        if rec.id in seen:
            raise DatasetError(
                f"{path}: duplicate id {rec.id!r} on lines {seen[rec.id]} and {lineno}"
            )
        seen[rec.id] = lineno
        records.append(rec)
    if not records:
        logger.warning("%s: dataset is empty", path)
    return records


def dump_dataset(records: Iterable[Record], path: Union[str, Path]) -> None:
    write_jsonl(path, (r.to_json() for r in records))


def dumps_dataset(records: Sequence[Record]) -> str:
    return "".join(dumps_line(r.to_json()) + "\n" for r in records)
