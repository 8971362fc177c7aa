# app/services/evaluation.py

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

from pydantic import ValidationError

from app.core.constants import SPLIT_NAMES
from app.core.errors import InputValidationError, StorageError
from app.models.schemas import BoxPixels, PairRecallRow, Prediction, RecallRow, SampleRecord
from app.utils import metrics
from app.utils.logger import get_logger

logger = get_logger(__name__)


def iou(a: BoxPixels, b: BoxPixels) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


class SynonymMap:
    """
    term -> equivalent terms. Groups are symmetric by construction and
    every term is its own synonym.
    """

    def __init__(self, groups: Iterable[Iterable[str]] = ()) -> None:
        self._syn: Dict[str, set[str]] = defaultdict(set)
        for group in groups:
            terms = {normalize_text(t) for t in group if normalize_text(t)}
            for term in terms:
                self._syn[term].update(terms)

    def synonyms(self, term: str) -> set[str]:
        term = normalize_text(term)
        return self._syn.get(term, set()) | {term}

    def related(self, a: str, b: str) -> bool:
        return normalize_text(b) in self.synonyms(a)

    def __len__(self) -> int:
        return len(self._syn)


def parse_synonym_map(text: str) -> SynonymMap:
    groups = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        groups.append([term for term in line.split(",") if term.strip()])
    return SynonymMap(groups)


def load_synonym_map(path: Optional[str | Path]) -> SynonymMap:
    if path is None:
        return SynonymMap()
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"synonym map not found: {path}")
    return parse_synonym_map(path.read_text(encoding="utf-8"))


def _objects_match(pred: str, gt: str, syn: SynonymMap) -> bool:
    if pred == gt or syn.related(pred, gt):
        return True
    # "red box" vs "red square": word by word
    pred_words, gt_words = pred.split(), gt.split()
    return len(pred_words) == len(gt_words) and all(
        p == g or syn.related(p, g) for p, g in zip(pred_words, gt_words)
    )


def match_rel_obj(pred: tuple[str, str], gt: tuple[str, str], syn: SynonymMap) -> bool:
    """Exact relation; object equal or synonym-related."""
    pred_rel, pred_obj = (normalize_text(t) for t in pred)
    gt_rel, gt_obj = (normalize_text(t) for t in gt)
    if not pred_obj or pred_rel != gt_rel:
        return False
    return _objects_match(pred_obj, gt_obj, syn)


# ============================================================
# Recall report
# ============================================================

class _Tally:
    __slots__ = ("n", "text", "box")

    def __init__(self, n: int = 0, text: int = 0, box: int = 0) -> None:
        self.n, self.text, self.box = n, text, box

    def add(self, other: "_Tally") -> None:
        self.n += other.n
        self.text += other.text
        self.box += other.box


def _split_order(split: str) -> tuple[int, str]:
    return (SPLIT_NAMES.index(split) if split in SPLIT_NAMES else len(SPLIT_NAMES), split)


class EvalReport:
    """
    Positive counts per (split, K, IoU threshold), plus a per-pair breakdown.
    Counts add, so partial reports merge in any order.
    """

    def __init__(self) -> None:
        self.cells: Dict[tuple[str, int, float], _Tally] = defaultdict(_Tally)
        self.pairs: Dict[tuple[str, str, str, int, float], _Tally] = defaultdict(_Tally)
        self.missing = 0

    def merge(self, other: "EvalReport") -> "EvalReport":
        for key, tally in other.cells.items():
            self.cells[key].add(tally)
        for key, tally in other.pairs.items():
            self.pairs[key].add(tally)
        self.missing += other.missing
        return self

    def rows(self) -> List[RecallRow]:
        rows = []
        for split, k, threshold in sorted(self.cells, key=lambda c: (_split_order(c[0]), c[1], c[2])):
            tally = self.cells[(split, k, threshold)]
            rows.append(
                RecallRow(
                    split=split,
                    k=k,
                    iou_threshold=threshold,
                    rel_object_recall=tally.text / tally.n if tally.n else 0.0,
                    object_loc_recall=tally.box / tally.n if tally.n else 0.0,
                    n=tally.n,
                )
            )
        return rows

    def pair_rows(self) -> List[PairRecallRow]:
        return [
            PairRecallRow(
                split=split,
                relation=relation,
                object=obj,
                k=k,
                iou_threshold=threshold,
                n=tally.n,
                text_positives=tally.text,
                box_positives=tally.box,
            )
            for (split, relation, obj, k, threshold), tally in sorted(
                self.pairs.items(), key=lambda item: (_split_order(item[0][0]), *item[0][1:])
            )
        ]

    def row(self, split: str, k: int, threshold: float) -> RecallRow:
        for row in self.rows():
            if row.split == split and row.k == k and row.iou_threshold == threshold:
                return row
        raise KeyError((split, k, threshold))

    @classmethod
    def from_rows(cls, rows: Iterable[RecallRow], pair_rows: Iterable[PairRecallRow] = ()) -> "EvalReport":
        report = cls()
        for row in rows:
            report.cells[(row.split, row.k, row.iou_threshold)] = _Tally(
                row.n, round(row.rel_object_recall * row.n), round(row.object_loc_recall * row.n)
            )
        for row in pair_rows:
            key = (row.split, row.relation, row.object, row.k, row.iou_threshold)
            report.pairs[key] = _Tally(row.n, row.text_positives, row.box_positives)
        return report


def evaluate_recall(
    predictions: Mapping[str, Sequence[Prediction]],
    gt: Sequence[SampleRecord],
    ks: Sequence[int],
    thresholds: Sequence[float],
    syn: SynonymMap,
    split: str = "full_test",
) -> EvalReport:
    """
    Per-sample Recall@K. A sample is text-positive when any top-K prediction
    matches its relation-object pair, and box-positive when such a matching
    prediction also carries a box with IoU >= threshold. Repeated predicted
    strings are not deduplicated.
    """
    ks = sorted(set(ks))
    thresholds = sorted(set(thresholds))
    report = EvalReport()
    for k in ks:
        for t in thresholds:
            report.cells.setdefault((split, k, t), _Tally())

    depth = max(ks)
    for sample in gt:
        if not sample.grounded:
            raise InputValidationError(f"{sample.id}: evaluation ground truth must be grounded")

        preds = predictions.get(sample.id)
        if preds is None:
            report.missing += 1
            preds = ()
        preds = list(preds)[:depth]
        matched = [match_rel_obj((p.relation, p.object), sample.pair, syn) for p in preds]
        overlaps = [
            iou(p.box, sample.object_box) if hit and p.box is not None and p.well_formed else -1.0
            for p, hit in zip(preds, matched)
        ]

        for k in ks:
            text_hit = any(matched[:k])
            best = max(overlaps[:k], default=-1.0)
            for t in thresholds:
                hit = _Tally(1, int(text_hit), int(best >= t))
                report.cells[(split, k, t)].add(hit)
                report.pairs[(split, sample.relation, sample.object, k, t)].add(hit)

    if report.missing:
        logger.warning(f"{report.missing} of {len(gt)} '{split}' samples had no prediction list; counted negative")
    for row in report.rows():
        metrics.recall.labels(split=row.split, metric="rel_object", k=str(row.k), iou=str(row.iou_threshold)).set(
            row.rel_object_recall
        )
        metrics.recall.labels(split=row.split, metric="object_loc", k=str(row.k), iou=str(row.iou_threshold)).set(
            row.object_loc_recall
        )
    logger.info(f"Evaluated '{split}': {len(gt)} samples, Ks={ks}, IoU thresholds={thresholds}")
    return report


# ============================================================
# Report files
# ============================================================

TABLE_HEADER = ("split", "K", "IoU", "Rel-Object", "Object-Loc", "n")


def format_table(report: EvalReport) -> str:
    body = [
        (
            row.split,
            str(row.k),
            f"{row.iou_threshold:.2f}",
            f"{100 * row.rel_object_recall:.2f}",
            f"{100 * row.object_loc_recall:.2f}",
            str(row.n),
        )
        for row in report.rows()
    ]
    widths = [max(len(cell) for cell in column) for column in zip(TABLE_HEADER, *body)]
    lines = []
    for cells in (TABLE_HEADER, *body):
        padded = [cells[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(cells[1:], widths[1:])]
        lines.append("  ".join(padded))
    return "\n".join(lines) + "\n"


def report_paths(destination: str | Path) -> tuple[Path, Path, Path]:
    base = Path(destination)
    return tuple(base.parent / f"{base.name}{suffix}" for suffix in (".txt", ".jsonl", ".pairs.jsonl"))


def write_report(report: EvalReport, destination: str | Path) -> Path:
    """Writes <dest>.txt (table), <dest>.jsonl (rows) and <dest>.pairs.jsonl."""
    table_path, rows_path, pairs_path = report_paths(destination)
    try:
        table_path.parent.mkdir(parents=True, exist_ok=True)
        table_path.write_text(format_table(report), encoding="utf-8")
        rows_path.write_text(
            "".join(json.dumps(row.model_dump(by_alias=True)) + "\n" for row in report.rows()),
            encoding="utf-8",
        )
        pairs_path.write_text(
            "".join(json.dumps(row.model_dump()) + "\n" for row in report.pair_rows()),
            encoding="utf-8",
        )
    except OSError as exc:
        raise StorageError(f"cannot write report to {table_path.parent}: {exc}") from exc
    logger.info(f"Report written: {table_path}")
    return table_path


def read_report(destination: str | Path) -> EvalReport:
    _, rows_path, pairs_path = report_paths(destination)
    if not rows_path.is_file():
        raise StorageError(f"report rows not found: {rows_path}")
    try:
        rows = [
            RecallRow.model_validate_json(line)
            for line in rows_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        pair_rows = []
        if pairs_path.is_file():
            pair_rows = [
                PairRecallRow.model_validate_json(line)
                for line in pairs_path.read_text(encoding="utf-8").splitlines()
                if line.strip()
            ]
    except ValidationError as exc:
        raise StorageError(f"corrupt report {rows_path}: {exc.errors()[0]['msg']}") from exc
    return EvalReport.from_rows(rows, pair_rows)
