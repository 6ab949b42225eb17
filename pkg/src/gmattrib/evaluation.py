"""Verdicts, decision rules and metrics (PRC/REC/F1, ACC, EXA, CR)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelBundle

THRESHOLD = 0.5
REAL = "real"


@dataclass
class PredictionRecord:
    image_id: str
    true_label: str
    primary_score: float
    secondary_scores: dict[str, float] = field(default_factory=dict)

    @property
    def primary_positive(self) -> bool:
        return self.primary_score > THRESHOLD

    @property
    def positive_attributions(self) -> set[str]:
        return {k for k, v in self.secondary_scores.items() if v > THRESHOLD}

    @property
    def failed_attribution(self) -> bool:
        return self.primary_positive and not self.positive_attributions

    @property
    def multiple_attribution(self) -> bool:
        return len(self.positive_attributions) > 1

    @property
    def contradiction(self) -> bool:
        return not self.primary_positive and bool(self.positive_attributions)

    @property
    def top_source(self) -> str | None:
        if not self.secondary_scores:
            return None
        return max(sorted(self.secondary_scores), key=lambda k: self.secondary_scores[k])

    def flags(self) -> dict:
        return {"primary_positive": self.primary_positive,
                "positive_attributions": sorted(self.positive_attributions),
                "failed_attribution": self.failed_attribution,
                "multiple_attribution": self.multiple_attribution,
                "contradiction": self.contradiction}

    def to_dict(self) -> dict:
        return {**asdict(self), **self.flags()}

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(d["image_id"], d["true_label"], float(d["primary_score"]),
                   {k: float(v) for k, v in d.get("secondary_scores", {}).items()})


def probe(bundle: ModelBundle, x, image_ids=None, true_labels=None, representation=None,
          batch_size=256) -> list[PredictionRecord]:
    """Run the primary once per image and every secondary on its branch features."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[None]
    if representation is not None and representation != bundle.primary.representation:
        raise ValueError(f"input representation {representation!r} does not match bundle "
                         f"({bundle.primary.representation!r})")
    if x.shape[1] != bundle.primary.input_shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, bundle expects {bundle.primary.input_shape[0]}")
    primary, secs = bundle.probe_scores(x, batch_size)
    n = len(x)
    image_ids = image_ids if image_ids is not None else [str(i) for i in range(n)]
    true_labels = true_labels if true_labels is not None else [""] * n
    return [PredictionRecord(str(image_ids[i]), str(true_labels[i]), float(primary[i]),
                             {k: float(v[i]) for k, v in secs.items()}) for i in range(n)]


def multiclass_decision(record: PredictionRecord) -> str:
    """Primary first; failed attributions count as real; otherwise the top-scoring source."""
    if not record.primary_positive or record.failed_attribution:
        return REAL
    return record.top_source


def _safe_div(a, b):
    return a / b if b else 0.0


def confusion(predicted, relevant) -> dict:
    predicted = np.asarray(predicted, dtype=bool)
    relevant = np.asarray(relevant, dtype=bool)
    return {"tp": int((predicted & relevant).sum()), "fp": int((predicted & ~relevant).sum()),
            "fn": int((~predicted & relevant).sum()), "tn": int((~predicted & ~relevant).sum())}


def prf(counts: dict) -> dict:
    tp, fp, fn = counts["tp"], counts["fp"], counts["fn"]
    p = _safe_div(tp, tp + fp)
    r = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * p * r, p + r)
    return {"precision": p, "recall": r, "f1": f1, **counts,
            "degenerate": (tp + fp == 0) or (tp + fn == 0)}


def binary_metrics(records: list[PredictionRecord], positive: str = "any_fake") -> dict:
    """Detection metrics for ``positive='any_fake'``; otherwise attribution metrics for that source."""
    if not records:
        raise ValueError("no records")
    if positive == "any_fake":
        predicted = [r.primary_positive for r in records]
        relevant = [r.true_label != REAL for r in records]
    else:
        predicted = [r.secondary_scores.get(positive, 0.0) > THRESHOLD for r in records]
        relevant = [r.true_label == positive for r in records]
    return prf(confusion(predicted, relevant))


def external_accuracy(records: list[PredictionRecord], task: str, source: str | None = None) -> float:
    """Sensitivity (detection) or specificity (attribution) on a single held-out source."""
    if not records:
        raise ValueError("no records")
    labels = {r.true_label for r in records}
    if len(labels) != 1:
        raise ValueError(f"external records must come from one source, got {sorted(labels)}")
    if task == "detection":
        return float(np.mean([r.primary_positive for r in records]))
    if task == "attribution":
        names = [source] if source is not None else sorted(records[0].secondary_scores)
        neg = [r.secondary_scores[name] <= THRESHOLD for r in records for name in names]
        return float(np.mean(neg))
    raise ValueError(f"unknown task {task!r}")


def contradiction_rate(records: list[PredictionRecord]) -> float:
    if not records:
        raise ValueError("no records")
    return float(np.mean([r.contradiction for r in records]))


def multiclass_accuracy(records: list[PredictionRecord]) -> float:
    if not records:
        raise ValueError("no records")
    return float(np.mean([multiclass_decision(r) == r.true_label for r in records]))


def pct(x: float) -> float:
    return round(100.0 * x, 1)


@dataclass
class MetricsReport:
    split: str
    variant: str = "clean"
    detection: dict = field(default_factory=dict)
    attribution: dict = field(default_factory=dict)
    accuracy: float | None = None
    exa: dict = field(default_factory=dict)
    cr: float | None = None
    n_records: int = 0

    def table(self) -> dict:
        """Report fields as percentages with one decimal."""
        out = {"split": self.split, "variant": self.variant, "n": self.n_records}
        if self.detection:
            out["detection"] = {"PRC": pct(self.detection["precision"]), "REC": pct(self.detection["recall"]),
                                "F1": pct(self.detection["f1"])}
        if self.attribution:
            out["attribution"] = {k: {"PRC": pct(v["precision"]), "REC": pct(v["recall"]), "F1": pct(v["f1"])}
                                  for k, v in self.attribution.items()}
        if self.accuracy is not None:
            out["ACC"] = pct(self.accuracy)
        if self.exa:
            out["EXA"] = {k: pct(v) for k, v in self.exa.items()}
        if self.cr is not None:
            out["CR"] = pct(self.cr)
        return out

    def to_dict(self) -> dict:
        return {"table": self.table(), "raw": asdict(self)}


def build_report(records: list[PredictionRecord], split: str, variant: str = "clean",
                 external: list[PredictionRecord] | None = None) -> MetricsReport:
    rep = MetricsReport(split, variant, n_records=len(records))
    rep.detection = binary_metrics(records)
    sources = sorted({k for r in records for k in r.secondary_scores})
    if sources:
        rep.attribution = {s: binary_metrics(records, s) for s in sources}
        rep.accuracy = multiclass_accuracy(records)
        rep.cr = contradiction_rate(records)
    if external:
        rep.exa["detection"] = external_accuracy(external, "detection")
        if sources:
            for s in sources:
                rep.exa[f"attribution:{s}"] = external_accuracy(external, "attribution", s)
    return rep


def save_records(records: list[PredictionRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records))
    return path


def load_records(path) -> list[PredictionRecord]:
    return [PredictionRecord.from_dict(json.loads(ln)) for ln in Path(path).read_text().splitlines() if ln.strip()]
