"""Plain-text prompt templates with ``{{name}}`` placeholders.

File layout::

    template_id: note_default
    --- system ---
    ...
    --- user ---
    ... {{transcript}} ...
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Union

from .llm_client import Message

PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")
_HEADER_RE = re.compile(r"^template_id:\s*(\S+)\s*$")


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    system_text: str
    user_text: str
    required: tuple[str, ...] = ("transcript",)

    def __post_init__(self):
        found = PLACEHOLDER_RE.findall(self.user_text)
        for name in self.required:
            count = found.count(name)
            if count != 1:
                raise TemplateError(
                    f"template {self.template_id!r}: user text must contain "
                    f"{{{{{name}}}}} exactly once (found {count})"
                )

    @property
    def placeholders(self) -> set[str]:
        return set(PLACEHOLDER_RE.findall(self.system_text + self.user_text))

    def render(self, values: Mapping[str, object]) -> tuple[Message, Message]:
        missing = self.placeholders - values.keys()
        if missing:
            raise TemplateError(f"template {self.template_id!r}: no value for {sorted(missing)}")

        def fill(text: str) -> str:
            # One regex pass: substituted values are never re-scanned.
            return PLACEHOLDER_RE.sub(lambda m: str(values[m.group(1)]), text)

        return Message("system", fill(self.system_text)), Message("user", fill(self.user_text))

    def to_text(self) -> str:
        return (
            f"template_id: {self.template_id}\n--- system ---\n{self.system_text}\n"
            f"--- user ---\n{self.user_text}\n"
        )


def parse_template(text: str, required: Iterable[str] = ("transcript",)) -> PromptTemplate:
    lines = text.split("\n")
    m = _HEADER_RE.match(lines[0]) if lines else None
    if not m:
        raise TemplateError("first line must be 'template_id: <id>'")
    try:
        sys_at = lines.index("--- system ---")
        user_at = lines.index("--- user ---")
    except ValueError:
        raise TemplateError("template needs '--- system ---' and '--- user ---' markers") from None
    if not 0 < sys_at < user_at:
        raise TemplateError("system block must come before user block")
    system = "\n".join(lines[sys_at + 1 : user_at]).strip("\n")
    user = "\n".join(lines[user_at + 1 :]).strip("\n")
    return PromptTemplate(m.group(1), system, user, tuple(required))


def load_template(
    source: Union[str, Path], required: Iterable[str] = ("transcript",)
) -> PromptTemplate:
    """Load a template from a file path, or a shipped template by id."""
    path = Path(source)
    if path.suffix == ".txt" and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("scribebench") / "templates" / f"{source}.txt"
        if not res.is_file():
            raise TemplateError(f"no template file or shipped template named {source!r}")
        text = res.read_text(encoding="utf-8")
    return parse_template(text, required)


def bullet_list(items: Iterable[str], indent: str = "  ") -> str:
    return "\n".join(f"{indent}{i}. {item}" for i, item in enumerate(items, start=1))


@lru_cache(maxsize=None)
def default_note_template() -> PromptTemplate:
    return load_template("note_default")
