"""Top-1 accuracy variants, per-round records, forgetting deltas and log emission."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import LabeledDataset
from .model import ModelParams, features, logits_of


@dataclass
class RoundRecord:
    round: int
    stage: int
    A_sel: Optional[float]
    A_loc: Optional[float]
    A_glo: Optional[float]
    A_loc_minority: Optional[float]
    A_glo_minority: Optional[float]
    loss_c: float = 0.0
    loss_p: float = 0.0
    loss_i: float = 0.0
    loss_s: float = 0.0
    proto_upload_bytes: int = 0


CSV_HEADER = [f.name for f in fields(RoundRecord)]
ACCURACY_FIELDS = ["A_sel", "A_loc", "A_glo", "A_loc_minority", "A_glo_minority"]


@dataclass
class MetricsLog:
    records: List[RoundRecord] = field(default_factory=list)
    forgetting: Dict[int, float] = field(default_factory=dict)
    final: Dict[str, Optional[float]] = field(default_factory=dict)
    meta: Dict[str, object] = field(default_factory=dict)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


def accuracy(params: ModelParams, dataset: LabeledDataset, class_filter=None) -> Optional[float]:
    """Fraction of samples whose argmax logit equals the label; None when nothing survives the filter."""
    labels = dataset.labels
    x = dataset.features
    if class_filter is not None:
        keep = np.isin(labels, np.fromiter(class_filter, dtype=np.int64, count=len(class_filter)))
        labels, x = labels[keep], x[keep]
    if labels.size == 0:
        return None
    pred = np.argmax(logits_of(params, x), axis=1)
    return float((pred == labels).mean())


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(sum(vals) / len(vals)) if vals else None


def evaluate_round(global_params: ModelParams, client_params: Sequence[ModelParams],
                   cumulative_tests: Sequence[LabeledDataset], balanced: LabeledDataset,
                   minority: frozenset, round_index: int, stage: int) -> RoundRecord:
    """Accuracies after aggregation. ``cumulative_tests[m]`` is client m's test set for ``stage``."""
    minority_filter = minority if minority else frozenset()
    a_sel = _mean(accuracy(p, t) for p, t in zip(client_params, cumulative_tests))
    a_loc = _mean(accuracy(p, balanced) for p in client_params)
    a_loc_min = _mean(accuracy(p, balanced, minority_filter) for p in client_params)
    return RoundRecord(
        round=round_index, stage=stage, A_sel=a_sel, A_loc=a_loc,
        A_glo=accuracy(global_params, balanced),
        A_loc_minority=a_loc_min,
        A_glo_minority=accuracy(global_params, balanced, minority_filter),
    )


def forgetting_delta(log: MetricsLog | Sequence[RoundRecord], stage_boundary: int) -> float:
    """A_sel on the last round before ``stage_boundary`` minus A_sel after its first round."""
    records = log.records if isinstance(log, MetricsLog) else list(log)
    if stage_boundary < 2:
        raise ValueError("stage_boundary must be >= 2")
    before = [r for r in records if r.stage == stage_boundary - 1]
    after = [r for r in records if r.stage == stage_boundary]
    if not before or not after:
        raise ValueError(f"no records straddle stage {stage_boundary}")
    last_before = max(before, key=lambda r: r.round)
    first_after = min((r for r in after if r.round > last_before.round), key=lambda r: r.round, default=None)
    if first_after is None or last_before.A_sel is None or first_after.A_sel is None:
        raise ValueError(f"no A_sel pair around stage {stage_boundary}")
    return last_before.A_sel - first_after.A_sel


def final_metrics(records: Sequence[RoundRecord], window: int = 10) -> Dict[str, Optional[float]]:
    tail = list(records)[-window:]
    names = ACCURACY_FIELDS + ["loss_c", "loss_p", "loss_i", "loss_s"]
    return {name: _mean(getattr(r, name) for r in tail) for name in names}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([_fmt(getattr(r, name)) for name in CSV_HEADER])
    return buf.getvalue()


def records_to_jsonl(records: Sequence[RoundRecord]) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in records)


def embeddings_to_csv(params: ModelParams, dataset: LabeledDataset) -> str:
    """One row per sample: sample_id, label, then the feature vector z_0..z_{d-1}."""
    z = features(params, dataset.features)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "label"] + [f"z{j}" for j in range(z.shape[1])])
    for i in range(len(dataset)):
        writer.writerow([i, int(dataset.labels[i])] + [repr(float(v)) for v in z[i]])
    return buf.getvalue()
