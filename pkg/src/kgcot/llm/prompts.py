"""Prompt templates for the pipeline's LLM calls.

Templates live as text assets in ``kgcot/templates/<id>.txt`` and use
``string.Template`` placeholders (``${slot}``). Leading ``##`` lines are
metadata (id and version) and are not part of the rendered prompt. A
directory of same-named files overrides the shipped assets.
"""

from __future__ import annotations

import hashlib
import re
from importlib import resources
from pathlib import Path
from string import Template
from typing import Mapping

from .gateway import TEMPLATE_IDS

REQUIRED_SLOTS: dict[str, tuple[str, ...]] = {
    "extraction": ("question", "answer"),
    "select": ("entity", "candidates", "question", "answer"),
    "prune": ("paths", "question", "k"),
    "generate": ("question", "answer", "paths"),
    "eval": ("question", "cot"),
    "judge": ("question", "gold", "predicted"),
}
# slots that must be non-blank after stripping
NON_EMPTY_SLOTS: dict[str, tuple[str, ...]] = {
    "extraction": ("question",),
    "select": ("entity", "candidates"),
    "prune": ("paths",),
    "generate": ("paths",),
    "eval": ("cot",),
    "judge": ("gold", "predicted"),
}

_META = re.compile(r"^##\s*kgcot template:\s*(\w+)\s+v(\d+)\s*$")


class TemplateError(ValueError):
    pass


class PromptSet:
    def __init__(self, override_dir: str | Path | None = None):
        self._templates: dict[str, Template] = {}
        self.versions: dict[str, str] = {}
        self.digests: dict[str, str] = {}
        for tid in TEMPLATE_IDS:
            text = None
            if override_dir is not None:
                path = Path(override_dir) / f"{tid}.txt"
                if path.exists():
                    text = path.read_text(encoding="utf-8")
            if text is None:
                text = resources.files("kgcot").joinpath("templates", f"{tid}.txt").read_text(encoding="utf-8")
            self._templates[tid], self.versions[tid] = self._parse(tid, text)
            self.digests[tid] = hashlib.sha256(self._templates[tid].template.encode("utf-8")).hexdigest()

    @staticmethod
    def _parse(tid: str, text: str) -> tuple[Template, str]:
        lines = text.splitlines()
        version = "custom"
        while lines and lines[0].startswith("##"):
            m = _META.match(lines[0])
            if m:
                if m.group(1) != tid:
                    raise TemplateError(f"template file for {tid!r} declares id {m.group(1)!r}")
                version = f"v{m.group(2)}"
            lines.pop(0)
        body = "\n".join(lines).strip("\n") + "\n"
        return Template(body), version

    def render(self, template_id: str, **slots: object) -> str:
        if template_id not in self._templates:
            raise TemplateError(f"unknown template {template_id!r}")
        for name in REQUIRED_SLOTS[template_id]:
            if slots.get(name) is None:
                raise TemplateError(f"template {template_id!r} is missing slot {name!r}")
        extra = set(slots) - set(REQUIRED_SLOTS[template_id])
        if extra:
            raise TemplateError(f"template {template_id!r} has no slot(s) {sorted(extra)}")
        for name in NON_EMPTY_SLOTS[template_id]:
            if not str(slots[name]).strip():
                raise TemplateError(f"template {template_id!r} slot {name!r} is empty")
        values = {k: str(v) for k, v in slots.items()}
        try:
            return self._templates[template_id].substitute(values)
        except KeyError as exc:
            raise TemplateError(f"template {template_id!r} is missing slot {exc.args[0]!r}") from None


_default: PromptSet | None = None


def render_prompt(template_id: str, slots: Mapping[str, object], prompts: PromptSet | None = None) -> str:
    global _default
    if prompts is None:
        if _default is None:
            _default = PromptSet()
        prompts = _default
    return prompts.render(template_id, **slots)
