"""Caption selection by image-text matching (ITM) score.

Each record may carry an original and a generated caption, each with an ITM
score. The caption with the strictly higher score wins; ties keep the
original. Scores are read from the records, never computed here.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError
from .io import CaptionRecord


@dataclass(frozen=True)
class FilterPolicy:
    min_score: float | None = None


@dataclass
class FilterReport:
    total: int = 0
    original: int = 0
    generated: int = 0
    dropped: int = 0
    min_score: float | None = None

    @property
    def kept(self) -> int:
        return self.total - self.dropped

    def to_text(self) -> str:
        lines = [
            f"total={self.total}",
            f"kept={self.kept}",
            f"original={self.original}",
            f"generated={self.generated}",
            f"dropped={self.dropped}",
            f"min_score={'none' if self.min_score is None else repr(self.min_score)}",
            f"thresholding={'on' if self.min_score is not None else 'off'}",
        ]
        return "\n".join(lines) + "\n"


def select_caption(rec: CaptionRecord) -> tuple[str, float | None]:
    """Return ``(source, retained_score)`` for one record."""
    if rec.generated_caption is None:
        return "original", rec.itm_original
    if rec.itm_generated is None:
        raise ValidationError(f"record {rec.id!r}: generated caption has no itm_generated")
    if rec.itm_original is None:
        raise ValidationError(f"record {rec.id!r}: generated caption present but no itm_original")
    if rec.itm_generated > rec.itm_original:
        return "generated", rec.itm_generated
    return "original", rec.itm_original


def filter_captions(
    records: Sequence[CaptionRecord], policy: FilterPolicy = FilterPolicy()
) -> tuple[list[CaptionRecord], FilterReport]:
    report = FilterReport(min_score=policy.min_score)
    out = []
    for rec in records:
        report.total += 1
        source, score = select_caption(rec)
        if policy.min_score is not None:
            if score is None:
                raise ValidationError(f"record {rec.id!r}: no ITM score to compare with min_score")
            if score < policy.min_score:
                report.dropped += 1
                continue
        setattr(report, source, getattr(report, source) + 1)
        out.append(dataclasses.replace(rec, source=source))
    return out, report


def best_of_k(candidates: Sequence[tuple[str, float]]) -> tuple[str, float]:
    """Highest-scoring (caption, score); the earliest wins a tie."""
    if not candidates:
        raise ValueError("best_of_k needs at least one candidate")
    best = candidates[0]
    for cand in candidates[1:]:
        if cand[1] > best[1]:
            best = cand
    return best
