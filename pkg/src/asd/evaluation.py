"""Average precision, ROC AUC and the face-count / face-size breakdowns."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

PREDICTION_COLUMNS = ("track_id", "frame_index", "face_index", "score", "label", "num_faces", "face_area")
FACE_COUNT_SUBSETS = (1, 2, 3)
FACE_SIZE_SUBSETS = ("S", "M", "L")


@dataclass(frozen=True)
class PredictionRecord:
    track_id: str
    frame_index: int
    face_index: int
    score: float
    label: int
    num_faces: int
    face_area: int


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    if records and isinstance(records[0], PredictionRecord):
        return np.array([r.score for r in records], dtype=np.float64), np.array([r.label for r in records], dtype=np.int64)
    scores, labels = records
    return np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def average_precision(scores, labels=None) -> float | None:
    """Mean of the precision at each positive, ranking by descending score.

    Ties keep input order. Returns ``None`` when there is no positive.
    Accepts either a list of :class:`PredictionRecord` or ``(scores, labels)``.
    """
    s, y = _arrays(scores if labels is None else (scores, labels))
    if not np.any(y == 1):
        return None
    order = np.argsort(-s, kind="stable")
    hits = (y[order] == 1).astype(np.float64)
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].mean())


def auc(scores, labels=None) -> float | None:
    """Mann-Whitney AUC: P(pos > neg) + 0.5 P(tie); ``None`` for single-class input."""
    s, y = _arrays(scores if labels is None else (scores, labels))
    n_pos = int(np.sum(y == 1))
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class SubsetScore:
    count: int
    mAP: float | None
    AUC: float | None = None


@dataclass
class EvalReport:
    mAP: float | None
    AUC: float | None
    total: int
    by_face_count: dict[str, SubsetScore] = field(default_factory=dict)
    by_face_size: dict[str, SubsetScore] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": {"mAP": self.mAP, "AUC": self.AUC, "count": self.total},
            "by_face_count": {k: asdict(v) for k, v in self.by_face_count.items()},
            "by_face_size": {k: asdict(v) for k, v in self.by_face_size.items()},
            **({"meta": self.meta} if self.meta else {}),
        }

    def plot_rows(self) -> list[tuple[str, str, float]]:
        rows = [("overall", "mAP", self.mAP), ("overall", "AUC", self.AUC)]
        rows += [(f"faces={k}", "mAP", v.mAP) for k, v in self.by_face_count.items()]
        rows += [(f"size={k}", "mAP", v.mAP) for k, v in self.by_face_size.items()]
        return [(a, b, c) for a, b, c in rows if c is not None]


def size_tertiles(face_areas: Sequence[int]) -> list[np.ndarray]:
    """Index sets of the three face-size parts; remainder records go to the earlier parts."""
    order = np.argsort(np.asarray(face_areas), kind="stable")
    n = len(order)
    sizes = [n // 3 + (1 if i < n % 3 else 0) for i in range(3)]
    bounds = np.cumsum([0] + sizes)
    return [order[bounds[i] : bounds[i + 1]] for i in range(3)]


def breakdown(records: Sequence[PredictionRecord], meta: dict | None = None) -> EvalReport:
    scores, labels = _arrays(list(records))
    eta = np.array([r.num_faces for r in records], dtype=np.int64)
    mu = np.array([r.face_area for r in records], dtype=np.int64)
    report = EvalReport(average_precision(scores, labels), auc(scores, labels), len(records), meta=dict(meta or {}))
    for k in FACE_COUNT_SUBSETS:
        sel = eta == k
        if sel.any():
            report.by_face_count[str(k)] = SubsetScore(int(sel.sum()), average_precision(scores[sel], labels[sel]), auc(scores[sel], labels[sel]))
    if len(records):
        for name, idx in zip(FACE_SIZE_SUBSETS, size_tertiles(mu)):
            if len(idx):
                report.by_face_size[name] = SubsetScore(len(idx), average_precision(scores[idx], labels[idx]), auc(scores[idx], labels[idx]))
            else:
                report.by_face_size[name] = SubsetScore(0, None, None)
    return report


# ---------------------------------------------------------------------------
# files


def write_predictions(path: str | Path, records: Iterable[PredictionRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PREDICTION_COLUMNS)
        for r in records:
            w.writerow([r.track_id, r.frame_index, r.face_index, repr(float(r.score)), r.label, r.num_faces, r.face_area])


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(PREDICTION_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: predictions CSV lacks columns {sorted(missing)}")
        return [
            PredictionRecord(
                row["track_id"], int(row["frame_index"]), int(row["face_index"]), float(row["score"]),
                int(row["label"]), int(row["num_faces"]), int(row["face_area"]),
            )
            for row in reader
        ]


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / f"{stem}.json"
    js.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    plot = out / f"{stem}_plot_data.csv"
    with plot.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("subset", "metric", "value"))
        w.writerows(report.plot_rows())
    return js, plot
