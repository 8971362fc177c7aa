# app/services/tokenizer.py

from __future__ import annotations

import hashlib
import math
from pathlib import Path
from typing import Iterable, List, NamedTuple, Optional, Sequence

from pydantic import BaseModel, model_validator

from app.core.constants import (
    AT_ID,
    BOX_CLOSE_ID,
    BOX_OPEN_ID,
    NUM_SENTINELS,
    PAD_ID,
    POSITION_TOKEN_FORMAT,
    SENTINEL_TOKENS,
    SEP_ID,
    SUB_ID,
    UNK_ID,
)
from app.core.errors import ConfigError, InputValidationError, StorageError
from app.models.schemas import BoxBins, BoxPixels, SampleRecord, Triplet
from app.utils.logger import get_logger

logger = get_logger(__name__)

OBJECT_LEXICON_SUFFIX = ".objects"


def split_words(text: str) -> List[str]:
    """Word-level tokenization: lowercase, whitespace split."""
    return text.lower().split()


class Vocabulary:
    """
    Closed token vocabulary.

    Id layout (disjoint ranges):
    - sentinels        [0, 7)
    - text terms       [7, 7 + W)
    - position tokens  [7 + W, 7 + W + P)

    The object lexicon rides along so decoded text can be split into
    relation and object; it is stored next to the token file.
    """

    def __init__(
        self,
        text_terms: Sequence[str],
        num_position_tokens: int,
        object_terms: Iterable[str] = (),
    ) -> None:
        if num_position_tokens < 2:
            raise ConfigError(f"need at least 2 position tokens, got P={num_position_tokens}")

        self.text_terms = tuple(text_terms)
        self.num_position_tokens = int(num_position_tokens)
        self.object_terms = frozenset(object_terms)

        positions = [POSITION_TOKEN_FORMAT.format(i) for i in range(self.num_position_tokens)]
        self._tokens = list(SENTINEL_TOKENS) + list(self.text_terms) + positions
        self._index = {token: idx for idx, token in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise InputValidationError("text terms collide with reserved tokens or repeat")

        unknown = self.object_terms.difference(self.text_terms)
        if unknown:
            raise InputValidationError(f"object terms missing from text terms: {sorted(unknown)[:5]}")

    # -----------------------------
    # Id ranges
    # -----------------------------
    @property
    def text_offset(self) -> int:
        return NUM_SENTINELS

    @property
    def position_offset(self) -> int:
        return NUM_SENTINELS + len(self.text_terms)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def is_text_id(self, token_id: int) -> bool:
        return self.text_offset <= token_id < self.position_offset

    def is_position_id(self, token_id: int) -> bool:
        return self.position_offset <= token_id < len(self._tokens)

    def position_id(self, bin_index: int) -> int:
        if not 0 <= bin_index < self.num_position_tokens:
            raise InputValidationError(f"bin {bin_index} outside [0, {self.num_position_tokens - 1}]")
        return self.position_offset + bin_index

    def bin_of(self, token_id: int) -> int:
        if not self.is_position_id(token_id):
            raise InputValidationError(f"token id {token_id} is not a position token")
        return token_id - self.position_offset

    # -----------------------------
    # Surface forms
    # -----------------------------
    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def token_of(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tokens):
            raise InputValidationError(f"token id {token_id} outside vocabulary of {len(self)}")
        return self._tokens[token_id]

    def ids_for(self, text: str) -> List[int]:
        return [self.id_of(word) for word in split_words(text)]

    def layout(self) -> dict:
        """Fields a ModelConfig needs from this vocabulary."""
        return {
            "num_text_terms": len(self.text_terms),
            "num_position_tokens": self.num_position_tokens,
        }

    # -----------------------------
    # Serialization
    # -----------------------------
    def serialize(self) -> str:
        lines = [f"P={self.num_position_tokens}", *self._tokens]
        return "\n".join(lines) + "\n"

    def sha256(self) -> str:
        payload = self.serialize() + "\n".join(sorted(self.object_terms))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.serialize(), encoding="utf-8")
        objects_path = path.with_name(path.name + OBJECT_LEXICON_SUFFIX)
        objects_path.write_text("".join(f"{term}\n" for term in sorted(self.object_terms)), encoding="utf-8")
        return path

    @classmethod
    def parse(cls, text: str, object_terms: Iterable[str] = ()) -> "Vocabulary":
        lines = text.splitlines()
        if not lines or not lines[0].startswith("P="):
            raise StorageError("vocabulary file must start with a 'P=<int>' header")
        num_positions = int(lines[0][2:])
        tokens = lines[1:]
        if tuple(tokens[:NUM_SENTINELS]) != SENTINEL_TOKENS:
            raise StorageError("vocabulary sentinel block is corrupt")
        text_terms = tokens[NUM_SENTINELS:len(tokens) - num_positions]
        vocab = cls(text_terms, num_positions, object_terms)
        if vocab._tokens != tokens:
            raise StorageError("vocabulary position block is corrupt")
        return vocab

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        path = Path(path)
        if not path.is_file():
            raise StorageError(f"vocabulary not found: {path}")
        objects_path = path.with_name(path.name + OBJECT_LEXICON_SUFFIX)
        object_terms = objects_path.read_text(encoding="utf-8").split() if objects_path.is_file() else ()
        return cls.parse(path.read_text(encoding="utf-8"), object_terms)


def build_vocabulary(
    records: Iterable[SampleRecord],
    num_position_tokens: int,
    triplets: Iterable[Triplet] = (),
) -> Vocabulary:
    """
    Every word of every subject/relation/object field, sorted lexicographically,
    so the same corpus in any order gives a byte-identical vocabulary.
    """
    if num_position_tokens < 2:
        raise ConfigError(f"need at least 2 position tokens, got P={num_position_tokens}")

    terms: set[str] = set()
    object_terms: set[str] = set()
    for subject, relation, obj in [
        *((r.subject, r.relation, r.object) for r in records),
        *((t.subject, t.relation, t.object) for t in triplets),
    ]:
        terms.update(split_words(subject))
        terms.update(split_words(relation))
        object_words = split_words(obj)
        terms.update(object_words)
        object_terms.update(object_words)

    if not terms:
        raise InputValidationError("cannot build a vocabulary from an empty term set")

    vocab = Vocabulary(sorted(terms), num_position_tokens, object_terms)
    logger.info(
        f"Vocabulary built: {len(vocab.text_terms)} terms, P={num_position_tokens}, {len(vocab)} ids"
    )
    return vocab


# ============================================================
# Box discretization
# ============================================================

def _check_extent(width: float, height: float) -> None:
    if width <= 0 or height <= 0:
        raise InputValidationError(f"image extent must be positive, got {width}x{height}")


def quantize_box(box: BoxPixels, width: float, height: float, num_bins: int) -> BoxBins:
    """floor(P * coord / extent), clamped into [0, P-1]."""
    _check_extent(width, height)
    if not (box.x1 < box.x2 and box.y1 < box.y2):
        raise InputValidationError(f"degenerate box {box.as_list()}")
    if not box.within(width, height):
        raise InputValidationError(f"box {box.as_list()} outside {width}x{height}")

    def _bin(coord: float, extent: float) -> int:
        return min(max(math.floor(num_bins * coord / extent), 0), num_bins - 1)

    return BoxBins(
        bx1=_bin(box.x1, width),
        by1=_bin(box.y1, height),
        bx2=_bin(box.x2, width),
        by2=_bin(box.y2, height),
    )


def dequantize_bins(bins: BoxBins, width: float, height: float, num_bins: int) -> BoxPixels:
    """
    Bin-center inverse of quantize_box. Equal bins on an axis are widened by
    half a bin on each side so the box stays non-degenerate.
    """
    _check_extent(width, height)
    if max(bins.as_tuple()) >= num_bins:
        raise InputValidationError(f"bins {bins.as_tuple()} outside [0, {num_bins - 1}]")

    def _axis(lo: int, hi: int, extent: float) -> tuple[float, float]:
        step = extent / num_bins
        a = (lo + 0.5) * step
        b = (hi + 0.5) * step
        if lo == hi:
            a, b = a - 0.5 * step, b + 0.5 * step
        return a, b

    x1, x2 = _axis(bins.bx1, bins.bx2, width)
    y1, y2 = _axis(bins.by1, bins.by2, height)
    return BoxPixels(x1=x1, y1=y1, x2=x2, y2=y2)


# ============================================================
# Sequence encoding
# ============================================================

class SequenceExample(BaseModel):
    input_ids: List[int]
    target_ids: List[int]
    loss_mask: List[bool]

    @model_validator(mode="after")
    def _aligned(self) -> "SequenceExample":
        if len(self.target_ids) != len(self.loss_mask):
            raise ValueError("loss_mask must align with target_ids")
        return self


def _box_ids(box: BoxPixels, width: float, height: float, vocab: Vocabulary) -> List[int]:
    bins = quantize_box(box, width, height, vocab.num_position_tokens)
    return [vocab.position_id(b) for b in bins.as_tuple()]


def encode_input(subject: str, subject_box: BoxPixels, width: float, height: float, vocab: Vocabulary) -> List[int]:
    """SUB, subject words, BOX_OPEN, 4 position tokens, BOX_CLOSE."""
    words = vocab.ids_for(subject)
    if not words:
        raise InputValidationError("subject must not be empty")
    return [SUB_ID, *words, BOX_OPEN_ID, *_box_ids(subject_box, width, height, vocab), BOX_CLOSE_ID]


def encode_target(
    relation: str,
    obj: str,
    object_box: Optional[BoxPixels],
    width: float,
    height: float,
    vocab: Vocabulary,
    grounded: Optional[bool] = None,
) -> tuple[List[int], List[bool]]:
    """
    Grounded:   relation, object, AT, 4 position tokens, SEP.
    Ungrounded: relation, object, AT  (the sequence stops at the separator).
    """
    relation_ids = vocab.ids_for(relation)
    object_ids = vocab.ids_for(obj)
    if not relation_ids or not object_ids:
        raise InputValidationError("relation and object must not be empty")

    grounded = object_box is not None if grounded is None else grounded
    if grounded and object_box is None:
        raise InputValidationError("grounded target is missing its object box")

    target = [*relation_ids, *object_ids, AT_ID]
    if grounded:
        target += [*_box_ids(object_box, width, height, vocab), SEP_ID]
    return target, [True] * len(target)


def encode_sample(record: SampleRecord, vocab: Vocabulary) -> SequenceExample:
    width, height = record.image.width, record.image.height
    target_ids, loss_mask = encode_target(
        record.relation,
        record.object,
        record.object_box,
        width,
        height,
        vocab,
        grounded=record.grounded,
    )
    return SequenceExample(
        input_ids=encode_input(record.subject, record.subject_box, width, height, vocab),
        target_ids=target_ids,
        loss_mask=loss_mask,
    )


# ============================================================
# Decoding back to structure
# ============================================================

class DecodedSequence(NamedTuple):
    relation: str
    object: str
    box: Optional[BoxPixels]
    well_formed: bool


class DecodedInput(NamedTuple):
    subject: str
    bins: Optional[BoxBins]


def decode_input(ids: Sequence[int], vocab: Vocabulary) -> DecodedInput:
    words = [vocab.token_of(i) for i in ids if vocab.is_text_id(i) or i == UNK_ID]
    bins = [vocab.bin_of(i) for i in ids if vocab.is_position_id(i)]
    box = None
    if len(bins) == 4:
        box = BoxBins(bx1=bins[0], by1=bins[1], bx2=bins[2], by2=bins[3])
    return DecodedInput(" ".join(words), box)


def _split_relation_object(words: List[str], vocab: Vocabulary) -> tuple[str, str]:
    start = len(words)
    while start > 0 and words[start - 1] in vocab.object_terms:
        start -= 1
    return " ".join(words[:start]), " ".join(words[start:])


def decode_prediction(ids: Sequence[int], width: float, height: float, vocab: Vocabulary) -> DecodedSequence:
    """
    Inverse of encode_target. Malformed output is reported through
    well_formed=False and never raised: it has to count as a miss.
    """
    ids = list(ids)
    well_formed = True

    if AT_ID not in ids:
        words = [vocab.token_of(i) for i in ids if vocab.is_text_id(i)]
        return DecodedSequence("", " ".join(words), None, False)

    at = ids.index(AT_ID)
    head, tail = ids[:at], ids[at + 1:]

    words: List[str] = []
    for token_id in head:
        # an unknown word is still a word
        if vocab.is_text_id(token_id) or token_id == UNK_ID:
            words.append(vocab.token_of(token_id))
        else:
            well_formed = False
    relation, obj = _split_relation_object(words, vocab)

    while tail and tail[-1] == PAD_ID:
        tail.pop()
    box_ok = (
        len(tail) == 5
        and all(vocab.is_position_id(i) for i in tail[:4])
        and tail[4] == SEP_ID
    )
    if not box_ok:
        return DecodedSequence(relation, obj, None, False)

    x1, y1, x2, y2 = (vocab.bin_of(i) for i in tail[:4])
    if x1 > x2 or y1 > y2:
        return DecodedSequence(relation, obj, None, False)

    box = dequantize_bins(
        BoxBins(bx1=x1, by1=y1, bx2=x2, by2=y2), width, height, vocab.num_position_tokens
    )
    return DecodedSequence(relation, obj, box if well_formed else None, well_formed)
