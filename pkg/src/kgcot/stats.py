"""Raw / generated / quality-filtered counts per source dataset."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

STATS_VERSION = 1
# column order for the datasets we know about; anything else follows alphabetically
KNOWN_SOURCES = {
    "medqa": "MedQA", "medmcqa": "MedMCQA", "pubmedqa": "PubmedQA", "mmlu": "MMLU",
    "medxpert": "MedXpert", "huatuo": "Huatuo", "hle": "HLE",
}
ROWS = (("raw", "Raw"), ("generated", "Generated"), ("filtered", "Quality Filtered"))
GENERATED_STATUSES = frozenset({"generated", "retained", "rejected"})


@dataclass
class StageCounts:
    raw: int = 0
    generated: int = 0
    filtered: int = 0

    def __add__(self, other: "StageCounts") -> "StageCounts":
        return StageCounts(self.raw + other.raw, self.generated + other.generated,
                           self.filtered + other.filtered)

    def monotone(self) -> bool:
        return 0 <= self.filtered <= self.generated <= self.raw

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.raw, self.generated, self.filtered)


def _order_key(source: str):
    keys = list(KNOWN_SOURCES)
    return (0, keys.index(source), "") if source in KNOWN_SOURCES else (1, 0, source)


@dataclass
class PipelineStats:
    sources: dict[str, StageCounts] = field(default_factory=dict)

    @property
    def order(self) -> list[str]:
        return sorted(self.sources, key=_order_key)

    @property
    def total(self) -> StageCounts:
        total = StageCounts()
        for c in self.sources.values():
            total = total + c
        return total

    def to_dict(self) -> dict:
        return {
            "version": STATS_VERSION,
            "sources": {s: vars(self.sources[s]).copy() for s in self.order},
            "total": vars(self.total).copy(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PipelineStats":
        return cls({s: StageCounts(**c) for s, c in data.get("sources", {}).items()})

    def summary_line(self) -> str:
        t = self.total
        return f"{t.raw} / {t.generated} / {t.filtered}"

    def format_table(self) -> str:
        cols = [KNOWN_SOURCES.get(s, s) for s in self.order] + ["Total"]
        counts = [self.sources[s] for s in self.order] + [self.total]
        label_w = max(len("Datasets"), *(len(r[1]) for r in ROWS))
        widths = [max(len(c), *(len(str(v)) for v in cnt.as_tuple())) for c, cnt in zip(cols, counts)]
        lines = ["Datasets".ljust(label_w) + "".join(f"  {c:>{w}}" for c, w in zip(cols, widths))]
        for attr, label in ROWS:
            lines.append(label.ljust(label_w) + "".join(
                f"  {getattr(cnt, attr):>{w}}" for cnt, w in zip(counts, widths)))
        return "\n".join(lines)


def compute_stats(records: Iterable) -> PipelineStats:
    """Count records by source; accepts audit dicts or objects with ``qa.source`` and ``status``."""
    stats = PipelineStats()
    for r in records:
        if isinstance(r, Mapping):
            source, status = r["source"], r["status"]
        else:
            source, status = r.qa.source, r.status
        c = stats.sources.setdefault(source, StageCounts())
        c.raw += 1
        if status in GENERATED_STATUSES:
            c.generated += 1
        if status == "retained":
            c.filtered += 1
    return stats
