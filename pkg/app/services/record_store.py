# app/services/record_store.py

from __future__ import annotations

import json
import threading
from pathlib import Path
from collections import OrderedDict
from typing import Dict, Iterable, List, Type, TypeVar

import numpy as np
from PIL import Image
from pydantic import BaseModel, ValidationError

from app.core.constants import SPLIT_NAMES
from app.core.errors import InputValidationError, StorageError
from app.models.schemas import (
    BenchmarkSplits,
    CaptionRecord,
    ImageRef,
    PredictionRecord,
    SampleRecord,
    TripletRecord,
)
from app.services.seqmodel import ImageTensor, load_image_tensor
from app.utils.logger import get_logger

logger = get_logger(__name__)

M = TypeVar("M", bound=BaseModel)

IMAGE_MANIFEST = "images/manifest.jsonl"
SETS_FILE = "sets.json"
IMAGE_CACHE_SIZE = 4096


class RecordStore:
    """
    Thin file-system abstraction over one run directory.

    RULES:
    - NO business logic
    - line-delimited JSON for every record type
    - relative paths resolve against the workdir, absolute ones are kept
    - readers never modify what they read
    """

    def __init__(self, workdir: str | Path, image_size: int, cache_size: int = IMAGE_CACHE_SIZE) -> None:
        self.workdir = Path(workdir)
        self.image_size = image_size
        self.cache_size = max(0, cache_size)
        self._images: "OrderedDict[str, ImageTensor]" = OrderedDict()
        self._lock = threading.Lock()

    # -----------------------------
    # Paths
    # -----------------------------
    def path(self, name: str | Path) -> Path:
        name = Path(name)
        return name if name.is_absolute() else self.workdir / name

    def exists(self, name: str | Path) -> bool:
        return self.path(name).exists()

    # -----------------------------
    # JSONL
    # -----------------------------
    def write_jsonl(self, name: str | Path, rows: Iterable[BaseModel]) -> Path:
        path = self.path(name)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", encoding="utf-8") as handle:
                for row in rows:
                    handle.write(row.model_dump_json(by_alias=True) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        return path

    def read_jsonl(self, name: str | Path, model: Type[M]) -> List[M]:
        path = self.path(name)
        if not path.is_file():
            raise StorageError(f"record file not found: {path}")
        rows: List[M] = []
        with path.open("r", encoding="utf-8") as handle:
            for number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append(model.model_validate_json(line))
                except ValidationError as exc:
                    raise InputValidationError(
                        f"{path}:{number}: invalid {model.__name__}: {exc.errors()[0]['msg']}"
                    ) from exc
        return rows

    def read_raw_jsonl(self, name: str | Path) -> List[dict]:
        """Untyped rows, for inspecting arbitrary record files."""
        path = self.path(name)
        if not path.is_file():
            raise StorageError(f"record file not found: {path}")
        try:
            return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise InputValidationError(f"{path}: not line-delimited JSON ({exc.msg})") from exc

    def read_records(self, name: str | Path) -> List[SampleRecord]:
        return self.read_jsonl(name, SampleRecord)

    def read_captions(self, name: str | Path) -> List[CaptionRecord]:
        return self.read_jsonl(name, CaptionRecord)

    def read_triplets(self, name: str | Path) -> List[TripletRecord]:
        return self.read_jsonl(name, TripletRecord)

    def read_predictions(self, name: str | Path) -> List[PredictionRecord]:
        return self.read_jsonl(name, PredictionRecord)

    def write_text(self, name: str | Path, text: str) -> Path:
        path = self.path(name)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot write {path}: {exc}") from exc
        return path

    # -----------------------------
    # Splits
    # -----------------------------
    def write_splits(self, splits: BenchmarkSplits, directory: str = "splits") -> Path:
        for name in SPLIT_NAMES:
            self.write_jsonl(f"{directory}/{name}.jsonl", splits.by_name(name))
        sets = {
            "set_a": [list(pair) for pair in sorted(splits.set_a)],
            "set_b": [list(pair) for pair in sorted(splits.set_b)],
        }
        return self.write_text(f"{directory}/{SETS_FILE}", json.dumps(sets, indent=2) + "\n")

    def read_splits(self, directory: str = "splits") -> BenchmarkSplits:
        sets_path = self.path(f"{directory}/{SETS_FILE}")
        if not sets_path.is_file():
            raise StorageError(f"splits not built yet: {sets_path} missing")
        try:
            sets = json.loads(sets_path.read_text(encoding="utf-8"))
            set_a = frozenset(tuple(pair) for pair in sets["set_a"])
            set_b = frozenset(tuple(pair) for pair in sets["set_b"])
        except (ValueError, KeyError, TypeError) as exc:
            raise StorageError(f"{sets_path} is corrupt: {exc}") from exc
        return BenchmarkSplits(
            set_a=set_a,
            set_b=set_b,
            **{name: self.read_records(f"{directory}/{name}.jsonl") for name in SPLIT_NAMES},
        )

    # -----------------------------
    # Images
    # -----------------------------
    def write_image(self, ref: str, pixels: np.ndarray) -> Path:
        """Binary PPM (P6)."""
        path = self.path(ref)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PPM")
        except OSError as exc:
            raise StorageError(f"cannot write image {path}: {exc}") from exc
        return path

    def write_images(self, images: Dict[str, np.ndarray]) -> Path:
        manifest = []
        for ref in sorted(images):
            pixels = images[ref]
            self.write_image(ref, pixels)
            manifest.append(ImageRef(kind="synthetic", ref=ref, width=pixels.shape[1], height=pixels.shape[0]))
        path = self.path(IMAGE_MANIFEST)
        existing = self.read_jsonl(IMAGE_MANIFEST, ImageRef) if path.is_file() else []
        merged = {item.ref: item for item in [*existing, *manifest]}
        return self.write_jsonl(IMAGE_MANIFEST, [merged[ref] for ref in sorted(merged)])

    def load_image(self, image: ImageRef) -> ImageTensor:
        """Cached S x S tensor; safe to call from decoding workers."""
        with self._lock:
            cached = self._images.get(image.ref)
            if cached is not None:
                self._images.move_to_end(image.ref)
        if cached is not None:
            return cached
        tensor = load_image_tensor(self.path(image.ref), self.image_size)
        if (tensor.width, tensor.height) != (image.width, image.height):
            logger.warning(
                f"{image.ref}: file is {tensor.width}x{tensor.height}, record says {image.width}x{image.height}"
            )
            tensor = ImageTensor(tensor.pixels, image.width, image.height)
        if self.cache_size:
            with self._lock:
                self._images[image.ref] = tensor
                while len(self._images) > self.cache_size:
                    self._images.popitem(last=False)
        return tensor
