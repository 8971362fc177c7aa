# app/utils/metrics.py

from __future__ import annotations
from pathlib import Path

from prometheus_client import CollectorRegistry, Counter, Gauge, write_to_textfile

# Process-private registry; exported as a textfile for batch runs.
REGISTRY = CollectorRegistry()

train_epoch_loss = Gauge(
    "scord_train_epoch_loss",
    "Token-weighted mean loss of the last finished epoch",
    ["split"],
    registry=REGISTRY,
)
decoded_samples = Counter(
    "scord_decoded_samples",
    "Decoded inputs",
    ["strategy"],
    registry=REGISTRY,
)
decode_latency = Gauge(
    "scord_decode_latency_seconds",
    "Wall time of the last decoding batch",
    ["strategy"],
    registry=REGISTRY,
)
recall = Gauge(
    "scord_recall",
    "Recall@K per split and IoU threshold",
    ["split", "metric", "k", "iou"],
    registry=REGISTRY,
)


def export_metrics(path: str | Path | None) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_to_textfile(str(path), REGISTRY)
