from __future__ import annotations

import math
from typing import Any, FrozenSet, List, Literal, NamedTuple, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_BETA1,
    DEFAULT_BETA2,
    DEFAULT_DECODE_K,
    DEFAULT_EPOCHS,
    DEFAULT_EPS,
    DEFAULT_EVAL_KS,
    DEFAULT_HIDDEN_DIM,
    DEFAULT_IMAGE_SIZE,
    DEFAULT_IOU_THRESHOLDS,
    DEFAULT_JOBS,
    DEFAULT_LAYERS,
    DEFAULT_LR,
    DEFAULT_MAX_INPUT_LEN,
    DEFAULT_MAX_PAIR_COUNT,
    DEFAULT_MAX_TARGET_LEN,
    DEFAULT_MIN_PAIR_COUNT,
    DEFAULT_NUM_HEADS,
    DEFAULT_PATCH_SIZE,
    DEFAULT_POSITION_TOKENS,
    DEFAULT_REMOVAL_FRACTION,
    DEFAULT_SEED,
    DEFAULT_WORKDIR,
    LOG_LEVEL,
    MAX_LEN_BOX_STEP,
    MAX_LEN_PAIR_STEP,
)
from app.core.constants import (
    AUGMENT_EXTERNAL,
    IMAGE_KIND_FILE,
    LEXICON_SECTIONS,
    NUM_SENTINELS,
    SPLIT_NAMES,
    STRATEGY_TWO_STEP,
)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


# ============================================================
# 1️⃣ GEOMETRY
# ============================================================

class BoxPixels(BaseModel):
    """
    Axis-aligned box in image pixel space.
    Ordering is checked here; image bounds are checked by whoever knows w/h.
    """

    model_config = ConfigDict(frozen=True)

    x1: float = Field(..., ge=0)
    y1: float = Field(..., ge=0)
    x2: float
    y2: float

    @model_validator(mode="after")
    def _ordered(self) -> "BoxPixels":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        return self

    @classmethod
    def of(cls, coords: List[float]) -> "BoxPixels":
        x1, y1, x2, y2 = coords
        return cls(x1=x1, y1=y1, x2=x2, y2=y2)

    def as_list(self) -> List[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def within(self, width: float, height: float) -> bool:
        return self.x2 <= width and self.y2 <= height

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


class BoxBins(BaseModel):
    """Quantized box: four position-token bins in [0, P-1]."""

    model_config = ConfigDict(frozen=True)

    bx1: int = Field(..., ge=0)
    by1: int = Field(..., ge=0)
    bx2: int = Field(..., ge=0)
    by2: int = Field(..., ge=0)

    @model_validator(mode="after")
    def _ordered(self) -> "BoxBins":
        if self.bx1 > self.bx2 or self.by1 > self.by2:
            raise ValueError(f"unordered bins {self.as_tuple()}")
        return self

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.bx1, self.by1, self.bx2, self.by2)


# ============================================================
# 2️⃣ CORPUS RECORDS
# ============================================================

class ImageRef(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["file", "synthetic"] = IMAGE_KIND_FILE
    ref: str = Field(..., min_length=1)
    width: int = Field(..., gt=0)
    height: int = Field(..., gt=0)


class SampleRecord(BaseModel):
    """
    One grounded or ungrounded instance <s, b_s, r, o, b_o?>.
    Ungrounded records carry a subject box but no object box.
    """

    model_config = ConfigDict(frozen=True)

    id: str = Field(..., min_length=1)
    image: ImageRef
    subject: str = Field(..., min_length=1)
    subject_box: BoxPixels
    relation: str = Field(..., min_length=1)
    object: str = Field(..., min_length=1)
    object_box: Optional[BoxPixels] = None
    grounded: bool
    source: str = ""

    @model_validator(mode="after")
    def _consistent(self) -> "SampleRecord":
        if self.grounded != (self.object_box is not None):
            raise ValueError(f"{self.id}: grounded flag disagrees with object_box")
        for label, box in (("subject_box", self.subject_box), ("object_box", self.object_box)):
            if box is not None and not box.within(self.image.width, self.image.height):
                raise ValueError(f"{self.id}: {label} outside {self.image.width}x{self.image.height}")
        return self

    @property
    def pair(self) -> tuple[str, str]:
        return (self.relation, self.object)

    @property
    def input_key(self) -> tuple:
        """Samples sharing this key share the decoder input."""
        return (self.image.ref, self.subject, tuple(self.subject_box.as_list()))


class CaptionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(..., min_length=1)
    image: ImageRef
    caption: str


class Triplet(NamedTuple):
    subject: str
    relation: str
    object: str


class TripletRecord(BaseModel):
    """Triplet extracted from a caption, keyed back to its caption."""

    caption_id: str
    subject: str
    relation: str
    object: str


# ============================================================
# 3️⃣ PREDICTIONS
# ============================================================

class Prediction(BaseModel):
    model_config = ConfigDict(frozen=True)

    relation: str
    object: str
    box: Optional[BoxPixels] = None
    score: float
    well_formed: bool

    @model_validator(mode="after")
    def _valid(self) -> "Prediction":
        if self.box is not None and not self.well_formed:
            raise ValueError("a box requires a well-formed sequence")
        if not math.isfinite(self.score):
            raise ValueError("prediction score must be finite")
        return self


class PredictionRecord(BaseModel):
    """Line-delimited prediction row; rank -1 marks an empty prediction list."""

    sample_id: str
    rank: int
    relation: str
    object: str
    box: Optional[List[float]] = None
    score: float
    well_formed: bool

    def to_prediction(self) -> Prediction:
        return Prediction(
            relation=self.relation,
            object=self.object,
            box=BoxPixels.of(self.box) if self.box is not None else None,
            score=self.score,
            well_formed=self.well_formed,
        )


# ============================================================
# 4️⃣ CONFIGURATION
# ============================================================

class ModelConfig(BaseModel):
    """
    Network sizes. num_text_terms / num_position_tokens are filled in from the
    vocabulary before the network is built.
    """

    hidden_dim: int = Field(DEFAULT_HIDDEN_DIM, ge=1)
    num_heads: int = Field(DEFAULT_NUM_HEADS, ge=1)
    vision_layers: int = DEFAULT_LAYERS
    text_layers: int = DEFAULT_LAYERS
    fusion_layers: int = DEFAULT_LAYERS
    decoder_layers: int = DEFAULT_LAYERS
    image_size: int = Field(DEFAULT_IMAGE_SIZE, ge=1)
    patch_size: int = Field(DEFAULT_PATCH_SIZE, ge=1)
    num_text_terms: int = Field(0, ge=0)
    num_position_tokens: int = Field(DEFAULT_POSITION_TOKENS, ge=0)
    max_input_len: int = Field(DEFAULT_MAX_INPUT_LEN, ge=1)
    max_target_len: int = DEFAULT_MAX_TARGET_LEN
    ffn_multiplier: int = Field(4, ge=1)
    segment_mask: bool = True
    seed: int = DEFAULT_SEED

    @property
    def vocab_size(self) -> int:
        return NUM_SENTINELS + self.num_text_terms + self.num_position_tokens

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class TrainParams(BaseModel):
    lr: float = Field(DEFAULT_LR, ge=0)
    beta1: float = Field(DEFAULT_BETA1, ge=0, lt=1)
    beta2: float = Field(DEFAULT_BETA2, ge=0, lt=1)
    eps: float = Field(DEFAULT_EPS, gt=0)
    epochs: int = Field(DEFAULT_EPOCHS, ge=0)
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=1)
    seed: int = DEFAULT_SEED
    threads: int = Field(1, ge=1)


class SplitSpec(BaseModel):
    min_count: int = Field(DEFAULT_MIN_PAIR_COUNT, ge=0)
    max_count: int = Field(DEFAULT_MAX_PAIR_COUNT, ge=0)
    removal_fraction: float = Field(DEFAULT_REMOVAL_FRACTION, ge=0.0, le=1.0)
    # 0 keeps every eligible pair
    num_pairs: int = Field(0, ge=0)
    augment_source: Literal["external", "in_domain"] = AUGMENT_EXTERNAL
    seed: int = DEFAULT_SEED

    @property
    def window(self) -> tuple[int, int]:
        return (self.min_count, self.max_count)


class SyntheticSpec(BaseModel):
    num_scenes: int = 400
    test_scenes: int = 120
    min_objects: int = Field(2, ge=2)
    max_objects: int = Field(5, ge=2)
    image_size: int = DEFAULT_IMAGE_SIZE
    grounded_fraction: float = Field(0.5, ge=0.0, le=1.0)
    inside_probability: float = Field(0.25, ge=0.0, le=1.0)
    # leading entries of the color palette and shape list
    colors: int = Field(6, ge=1)
    shapes: int = Field(3, ge=1)
    seed: int = DEFAULT_SEED

    @model_validator(mode="after")
    def _range(self) -> "SyntheticSpec":
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        return self


class DecodeConfig(BaseModel):
    k: int = Field(DEFAULT_DECODE_K, ge=1)
    strategy: Literal["two_step", "single_pass"] = STRATEGY_TWO_STEP
    max_len_pair: int = Field(MAX_LEN_PAIR_STEP, ge=1)
    max_len_box: int = Field(MAX_LEN_BOX_STEP, ge=1)


class EvalConfig(BaseModel):
    ks: List[int] = Field(default_factory=lambda: list(DEFAULT_EVAL_KS), min_length=1)
    iou_thresholds: List[float] = Field(
        default_factory=lambda: list(DEFAULT_IOU_THRESHOLDS), min_length=1
    )

    parse_lists = field_validator("ks", "iou_thresholds", mode="before")(_split_list)

    @field_validator("ks")
    @classmethod
    def _positive_ks(cls, ks: List[int]) -> List[int]:
        if any(k < 1 for k in ks):
            raise ValueError("K values must be >= 1")
        return sorted(set(ks))

    @field_validator("iou_thresholds")
    @classmethod
    def _thresholds(cls, values: List[float]) -> List[float]:
        if any(not 0.0 < t <= 1.0 for t in values):
            raise ValueError("IoU thresholds must lie in (0, 1]")
        return sorted(set(values))


class ExperimentConfig(BaseModel):
    seeds: List[int] = Field(default_factory=lambda: [1, 2, 3], min_length=1)
    k: int = Field(3, ge=1)
    diversity_k: int = Field(5, ge=1)

    parse_seeds = field_validator("seeds", mode="before")(_split_list)


class PathsConfig(BaseModel):
    """
    Every artifact lives under workdir unless a path is given explicitly.
    External record files (non-synthetic corpora) plug in here.
    """

    workdir: str = DEFAULT_WORKDIR
    grounded: Optional[str] = None
    ungrounded: Optional[str] = None
    test_pool: Optional[str] = None
    captions: Optional[str] = None
    lexicon: Optional[str] = None
    synonyms: Optional[str] = None
    vocabulary: Optional[str] = None
    metrics: Optional[str] = None


class RunConfig(BaseModel):
    seed: int = DEFAULT_SEED
    jobs: int = Field(DEFAULT_JOBS, ge=1)
    log_level: str = LOG_LEVEL
    position_tokens: int = DEFAULT_POSITION_TOKENS
    paths: PathsConfig = Field(default_factory=PathsConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainParams = Field(default_factory=TrainParams)
    split: SplitSpec = Field(default_factory=SplitSpec)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)


# ============================================================
# 5️⃣ EVALUATION ROWS
# ============================================================

class RecallRow(BaseModel):
    """Machine-readable report row; `K` keeps its report spelling on disk."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    split: str
    k: int = Field(..., alias="K")
    iou_threshold: float
    rel_object_recall: float = Field(..., ge=0.0, le=1.0)
    object_loc_recall: float = Field(..., ge=0.0, le=1.0)
    n: int = Field(..., ge=0)


class PairRecallRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    split: str
    relation: str
    object: str
    k: int
    iou_threshold: float
    n: int
    text_positives: int
    box_positives: int


# ============================================================
# 6️⃣ LEXICON & BENCHMARK SPLITS
# ============================================================

class Lexicon(BaseModel):
    """
    Closed word lists driving caption triplet extraction.
    copulas and modifiers are optional sections.
    """

    model_config = ConfigDict(frozen=True)

    verbs: FrozenSet[str] = frozenset()
    prepositions: FrozenSet[str] = frozenset()
    ignorable: FrozenSet[str] = frozenset()
    nouns: FrozenSet[str] = frozenset()
    copulas: FrozenSet[str] = frozenset()
    modifiers: FrozenSet[str] = frozenset()

    @model_validator(mode="after")
    def _disjoint(self) -> "Lexicon":
        sections = {name: getattr(self, name) for name in LEXICON_SECTIONS}
        names = list(sections)
        for i, left in enumerate(names):
            for right in names[i + 1:]:
                shared = sections[left] & sections[right]
                if shared:
                    raise ValueError(f"lexicon sections [{left}] and [{right}] share {sorted(shared)[:5]}")
        return self


class BenchmarkSplits(BaseModel):
    set_a: FrozenSet[Tuple[str, str]]
    set_b: FrozenSet[Tuple[str, str]]
    base_train: List[SampleRecord]
    text_aug_train: List[SampleRecord]
    test_a: List[SampleRecord]
    test_b: List[SampleRecord]
    full_test: List[SampleRecord]

    def by_name(self, name: str) -> List[SampleRecord]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split '{name}'")
        return getattr(self, name)


# ============================================================
# 7️⃣ MODEL REBUILD (SAFE GUARD)
# ============================================================

RunConfig.model_rebuild()
BenchmarkSplits.model_rebuild()
