"""Correlation analysis and the three ground-truth-free utilities.

All utilities read the dice-head prediction (``EvalRecord.predicted``); the
HD head is carried along only for export.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError
from .metrics import pearson, spearman

CSV_FIELDS = ["sample_id", "object_id", "segmenter_id", "predicted", "true_dice", "true_hd",
              "predicted_hd"]


@dataclass(frozen=True)
class EvalRecord:
    sample_id: str
    object_id: int
    segmenter_id: str
    predicted: float
    true_dice: float
    true_hd: float
    predicted_hd: float | None = None

    @property
    def group(self) -> tuple[str, int]:
        return (self.sample_id, self.object_id)

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.sample_id, self.object_id, self.segmenter_id)


def records_from(tuples, predictions) -> list[EvalRecord]:
    """Pair training tuples with an (N, H) prediction array."""
    preds = np.asarray(predictions, dtype=np.float64).reshape(len(tuples), -1)
    return [
        EvalRecord(t.sample_id, t.object_id, t.segmenter_id, float(p[0]), t.q_dice, t.q_hd,
                   float(p[1]) if p.size > 1 else None)
        for t, p in zip(tuples, preds)
    ]


def with_oracle(records: Iterable[EvalRecord]) -> list[EvalRecord]:
    """Replace every prediction by the true dice."""
    return [EvalRecord(r.sample_id, r.object_id, r.segmenter_id, r.true_dice, r.true_dice,
                       r.true_hd, r.predicted_hd) for r in records]


def correlate(records: Sequence[EvalRecord]) -> dict:
    pred = [r.predicted for r in records]
    true = [r.true_dice for r in records]
    return {"pearson": pearson(pred, true), "spearman": spearman(pred, true), "count": len(records)}


def flag_low(records: Sequence[EvalRecord], *, threshold: float | None = None,
             percentile: float | None = None) -> list[tuple[str, int, str]]:
    """Keys of records judged low quality.

    Exactly one policy applies: ``threshold`` flags every record scoring below
    it; ``percentile`` flags the floor(p * N / 100) lowest scores, ties going
    to the smaller (sample_id, object_id, segmenter_id).
    """
    if (threshold is None) == (percentile is None):
        raise InvalidInputError("give exactly one of threshold or percentile")
    if threshold is not None:
        if not 0.0 <= threshold <= 1.0:
            raise InvalidInputError(f"threshold must lie in [0, 1], got {threshold}")
        return [r.key for r in records if r.predicted < threshold]
    if not 0.0 < percentile < 100.0:
        raise InvalidInputError(f"percentile must lie in (0, 100), got {percentile}")
    count = math.floor(percentile * len(records) / 100.0)
    ranked = sorted(records, key=lambda r: (r.predicted, r.key))
    return [r.key for r in ranked[:count]]


def benchmark(records: Sequence[EvalRecord]) -> list[dict]:
    """Mean predicted dice per segmenter, best first; equal means sort by id."""
    sums: dict[str, list[float]] = {}
    for r in records:
        sums.setdefault(r.segmenter_id, []).append(r.predicted)
    rows = [{"segmenter_id": s, "mean_predicted": float(np.mean(v)), "count": len(v)}
            for s, v in sums.items()]
    rows.sort(key=lambda d: (-d["mean_predicted"], d["segmenter_id"]))
    for rank, row in enumerate(rows, 1):
        row["rank"] = rank
    return rows


def _groups(records: Sequence[EvalRecord], priority: Sequence[str] | None):
    segmenters = sorted({r.segmenter_id for r in records})
    if priority is not None:
        missing = set(segmenters) - set(priority)
        if missing:
            raise InvalidInputError(f"priority order lacks segmenters {sorted(missing)}")
        segmenters = [s for s in priority if s in set(segmenters)]
    groups: dict[tuple[str, int], dict[str, EvalRecord]] = {}
    for r in records:
        g = groups.setdefault(r.group, {})
        if r.segmenter_id in g:
            raise InvalidInputError(f"duplicate record for {r.key}")
        g[r.segmenter_id] = r
    for key, g in groups.items():
        absent = [s for s in segmenters if s not in g]
        if absent:
            raise InvalidInputError(f"group sample={key[0]} object={key[1]} has no record for {absent}")
    return segmenters, dict(sorted(groups.items()))


def select_per_sample(records: Sequence[EvalRecord],
                      priority: Sequence[str] | None = None) -> dict[tuple[str, int], str]:
    """Per (sample, object) group, the segmenter with the highest predicted dice.

    Ties go to the segmenter appearing first in ``priority`` (default: sorted ids).
    """
    order, groups = _groups(records, priority)
    chosen = {}
    for key, g in groups.items():
        best = order[0]
        for s in order[1:]:
            if g[s].predicted > g[best].predicted:
                best = s
        chosen[key] = best
    return chosen


def selection_report(records: Sequence[EvalRecord],
                     priority: Sequence[str] | None = None) -> dict:
    """Selection accuracy and the resulting true dice against the oracle selector.

    A choice counts as correct when its true dice equals the group maximum.
    """
    order, groups = _groups(records, priority)
    chosen = select_per_sample(records, priority)
    hits = 0
    selected, oracle = [], []
    for key, g in groups.items():
        best_true = max(r.true_dice for r in g.values())
        pick = g[chosen[key]].true_dice
        hits += pick == best_true
        selected.append(pick)
        oracle.append(best_true)
    per_model = {s: float(np.mean([g[s].true_dice for g in groups.values()])) for s in order}
    n = len(groups)
    return {
        "groups": n,
        "accuracy": 100.0 * hits / n if n else float("nan"),
        "mean_dice_selected": float(np.mean(selected)) if n else float("nan"),
        "mean_dice_oracle": float(np.mean(oracle)) if n else float("nan"),
        "per_model_mean_dice": per_model,
    }


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def scatter_export(records: Iterable[EvalRecord], path) -> None:
    """One CSV row per record, sorted by (sample_id, object_id, segmenter_id)."""
    rows = sorted(records, key=lambda r: r.key)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in rows:
            w.writerow([r.sample_id, r.object_id, r.segmenter_id, _fmt(r.predicted),
                        _fmt(r.true_dice), _fmt(r.true_hd), _fmt(r.predicted_hd)])


def scatter_import(path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:6] != CSV_FIELDS[:6]:
            raise InvalidInputError(f"{path}: unexpected CSV header {reader.fieldnames}")
        out = []
        for line, row in enumerate(reader, start=2):
            try:
                phd = row.get("predicted_hd") or None
                out.append(EvalRecord(row["sample_id"], int(row["object_id"]), row["segmenter_id"],
                                      float(row["predicted"]), float(row["true_dice"]),
                                      float(row["true_hd"]), None if phd is None else float(phd)))
            except (TypeError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{line}: {exc}") from exc
        return out


def summary(records: Sequence[EvalRecord], priority: Sequence[str] | None = None) -> dict:
    """The combined JSON-ready report: correlations plus selection statistics."""
    corr = correlate(records)
    sel = selection_report(records, priority)
    return {
        "pearson": corr["pearson"],
        "spearman": corr["spearman"],
        "count": corr["count"],
        "accuracy": sel["accuracy"],
        "mean_dice_selected": sel["mean_dice_selected"],
        "mean_dice_oracle": sel["mean_dice_oracle"],
        "per_model": sel["per_model_mean_dice"],
    }
