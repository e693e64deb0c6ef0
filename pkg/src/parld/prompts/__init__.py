"""Prompt template registry.

Templates live as text assets with a YAML front-matter block::

    ---
    id: previewer
    version: "1"
    required_slots: [question, kcs, state]
    optional_slots: []
    ---
    === system ===
    ...jinja2 text...
    === user ===
    ...jinja2 text...

Slots are filled with jinja2 under ``StrictUndefined``. At load time every
variable a template references must be a declared slot, so a render that
binds all required slots cannot leave a marker behind.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import jinja2
import jinja2.meta
import yaml

from ..llm.types import ChatMessage

TEMPLATE_IDS = (
    "previewer",
    "analyzer",
    "reasoner",
    "reflector",
    "tutor_instruction_parld",
    "tutor_instruction_da",
    "tutor_direct_respond",
    "direct_analyzer",
    "simulated_student",
    "correctness_judge",
    "kc_tagger",
)

_SECTION_RE = re.compile(r"^=== (system|user) ===\s*$", re.MULTILINE)
_ENV = jinja2.Environment(
    undefined=jinja2.StrictUndefined,
    autoescape=False,
    keep_trailing_newline=False,
    trim_blocks=True,
    lstrip_blocks=True,
)


class PromptError(KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    version: str
    system_text: str
    user_text: str
    required_slots: tuple[str, ...]
    optional_slots: tuple[str, ...] = ()
    json_mode: bool = False

    @property
    def tag(self) -> str:
        return f"{self.id}@{self.version}"

    def render(self, slots: Mapping[str, str]) -> list[ChatMessage]:
        missing = [s for s in self.required_slots if s not in slots]
        if missing:
            raise PromptError(f"template {self.id!r} is missing slot {missing[0]!r}")
        unknown = set(slots) - set(self.required_slots) - set(self.optional_slots)
        if unknown:
            raise PromptError(f"template {self.id!r} got undeclared slot(s) {sorted(unknown)}")
        values = {name: "" for name in self.optional_slots}
        values.update({k: "" if v is None else str(v) for k, v in slots.items()})
        system = _ENV.from_string(self.system_text).render(values).strip()
        user = _ENV.from_string(self.user_text).render(values).strip()
        return [ChatMessage("system", system), ChatMessage("user", user)]


def parse_template(text: str, source: str = "<string>") -> PromptTemplate:
    if not text.startswith("---"):
        raise PromptError(f"{source}: missing front-matter")
    _, header, body = text.split("---", 2)
    meta = yaml.safe_load(header) or {}
    parts = _SECTION_RE.split(body)
    sections = {parts[i]: parts[i + 1] for i in range(1, len(parts) - 1, 2)}
    if set(sections) != {"system", "user"}:
        raise PromptError(f"{source}: needs exactly one system and one user section")
    template = PromptTemplate(
        id=str(meta["id"]),
        version=str(meta["version"]),
        system_text=sections["system"].strip(),
        user_text=sections["user"].strip(),
        required_slots=tuple(meta.get("required_slots") or ()),
        optional_slots=tuple(meta.get("optional_slots") or ()),
        json_mode=bool(meta.get("json_mode", False)),
    )
    declared = set(template.required_slots) | set(template.optional_slots)
    for part in (template.system_text, template.user_text):
        used = jinja2.meta.find_undeclared_variables(_ENV.parse(part))
        if used - declared:
            raise PromptError(f"{source}: undeclared slot(s) {sorted(used - declared)}")
    return template


class PromptRegistry:
    """Immutable set of templates keyed by id."""

    def __init__(self, templates: Mapping[str, PromptTemplate]) -> None:
        self._templates = dict(templates)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptRegistry":
        if directory is None:
            root = resources.files(__package__).joinpath("templates")
            files = [(p.name, p.read_text(encoding="utf-8")) for p in root.iterdir() if p.name.endswith(".txt")]
        else:
            files = [(p.name, p.read_text(encoding="utf-8")) for p in Path(directory).glob("*.txt")]
        templates: dict[str, PromptTemplate] = {}
        for name, text in sorted(files):
            template = parse_template(text, name)
            if template.id in templates:
                raise PromptError(f"duplicate template id {template.id!r}")
            templates[template.id] = template
        missing = set(TEMPLATE_IDS) - set(templates)
        if missing:
            raise PromptError(f"template directory lacks {sorted(missing)}")
        return cls(templates)

    def get(self, template_id: str) -> PromptTemplate:
        try:
            return self._templates[template_id]
        except KeyError:
            raise PromptError(f"unknown template id {template_id!r}") from None

    def render(self, template_id: str, slots: Mapping[str, str]) -> list[ChatMessage]:
        return self.get(template_id).render(slots)

    def versions(self) -> dict[str, str]:
        return {tid: t.version for tid, t in sorted(self._templates.items())}

    def __iter__(self):
        return iter(self._templates.values())


_default: PromptRegistry | None = None


def default_registry() -> PromptRegistry:
    global _default
    if _default is None:
        _default = PromptRegistry.load()
    return _default


def render(template_id: str, slots: Mapping[str, str]) -> list[ChatMessage]:
    return default_registry().render(template_id, slots)
