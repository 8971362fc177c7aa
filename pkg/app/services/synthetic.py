# app/services/synthetic.py

from __future__ import annotations

import random
from itertools import product
from typing import Dict, List, NamedTuple, Optional

import numpy as np
from PIL import Image, ImageDraw

from app.core.constants import (
    IMAGE_KIND_SYNTHETIC,
    REL_ABOVE,
    REL_BELOW,
    REL_INSIDE,
    REL_LEFT_OF,
    REL_OVERLAPPING,
    REL_RIGHT_OF,
    SOURCE_SYNTHETIC_CAPTION,
    SOURCE_SYNTHETIC_GROUNDED,
)
from app.core.errors import GenerationError
from app.models.schemas import BoxPixels, CaptionRecord, ImageRef, Lexicon, SampleRecord, SyntheticSpec
from app.services.corpus import GroundTruthIndex
from app.utils.logger import get_logger

logger = get_logger(__name__)

MIN_CANVAS = 16
MAX_PLACEMENT_ATTEMPTS = 60
MAX_SCENE_ATTEMPTS = 20

COLORS = {
    "red": (220, 50, 47),
    "green": (60, 170, 70),
    "blue": (38, 110, 210),
    "yellow": (235, 200, 40),
    "purple": (140, 70, 190),
    "orange": (240, 130, 30),
}
SHAPES = ("square", "circle", "triangle")
OBJECT_CLASSES = tuple(f"{color} {shape}" for color, shape in product(COLORS, SHAPES))

# relations written as "<subject> is <relation> <object>"; overlapping reads as a verb
PREPOSITION_RELATIONS = (REL_ABOVE, REL_BELOW, REL_LEFT_OF, REL_RIGHT_OF, REL_INSIDE)
VERB_RELATIONS = (REL_OVERLAPPING,)

SYNTHETIC_SYNONYMS = (
    ("square", "box"),
    ("circle", "disc", "ring"),
    ("triangle", "wedge"),
)


class SceneObject(NamedTuple):
    cls: str
    box: BoxPixels


class SyntheticDataset(NamedTuple):
    images: Dict[str, np.ndarray]  # ref -> S x S x 3 uint8
    grounded: List[SampleRecord]
    ungrounded: List[SampleRecord]
    captions: List[CaptionRecord]
    index: GroundTruthIndex


def _strictly_inside(inner: BoxPixels, outer: BoxPixels) -> bool:
    return (
        outer.x1 < inner.x1
        and outer.y1 < inner.y1
        and inner.x2 < outer.x2
        and inner.y2 < outer.y2
    )


def _intersection_area(a: BoxPixels, b: BoxPixels) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    return w * h if w > 0 and h > 0 else 0.0


def _gap(lo_a: float, hi_a: float, lo_b: float, hi_b: float) -> Optional[tuple[float, bool]]:
    """(gap, a_first) along one axis, None when the projections overlap."""
    if hi_a <= lo_b:
        return lo_b - hi_a, True
    if hi_b <= lo_a:
        return lo_a - hi_b, False
    return None


def spatial_relation(subject: BoxPixels, obj: BoxPixels) -> Optional[str]:
    """
    Geometric predicate from subject to object, or None when the subject
    contains the object (no relation is emitted in that direction).
    """
    if _strictly_inside(subject, obj):
        return REL_INSIDE
    if _strictly_inside(obj, subject):
        return None
    if _intersection_area(subject, obj) > 0:
        return REL_OVERLAPPING

    horizontal = _gap(subject.x1, subject.x2, obj.x1, obj.x2)
    vertical = _gap(subject.y1, subject.y2, obj.y1, obj.y2)
    # ties go to the vertical axis
    if vertical is not None and (horizontal is None or vertical[0] >= horizontal[0]):
        return REL_ABOVE if vertical[1] else REL_BELOW
    return REL_LEFT_OF if horizontal[1] else REL_RIGHT_OF


def caption_for(subject: str, relation: str, obj: str) -> str:
    return f"a {subject} is {relation} a {obj}"


def synthetic_lexicon() -> Lexicon:
    words = set(OBJECT_CLASSES)
    return Lexicon(
        verbs=frozenset(VERB_RELATIONS),
        prepositions=frozenset(PREPOSITION_RELATIONS),
        ignorable=frozenset({"a", "an", "the"}),
        nouns=frozenset(cls.split()[1] for cls in words),
        copulas=frozenset({"is", "are"}),
        modifiers=frozenset(COLORS),
    )


class SyntheticSceneGenerator:
    """
    Colored shapes on a blank canvas, relations computed from placement.

    Responsibilities:
    - place 2..N uniquely-classed objects (optionally nested inside another)
    - render them with PIL
    - emit grounded or ungrounded records for every ordered object pair
    - emit a template caption per triplet

    RULES:
    - every draw comes from one random.Random(seed)
    - nothing touches the filesystem here
    """

    def __init__(self, spec: SyntheticSpec) -> None:
        if spec.image_size < MIN_CANVAS:
            raise GenerationError(f"canvas {spec.image_size}px is too small; need at least {MIN_CANVAS}px")
        if spec.colors > len(COLORS) or spec.shapes > len(SHAPES):
            raise GenerationError(f"palette has {len(COLORS)} colors and {len(SHAPES)} shapes")
        self.classes = tuple(
            f"{color} {shape}" for color, shape in product(list(COLORS)[: spec.colors], SHAPES[: spec.shapes])
        )
        if spec.max_objects > len(self.classes):
            raise GenerationError(f"at most {len(self.classes)} objects fit the class inventory")
        self.spec = spec
        self.size = spec.image_size
        self.min_side = max(4, self.size // 8)
        self.max_side = max(self.min_side + 1, self.size // 3)

    # -----------------------------
    # Placement
    # -----------------------------
    def _free_box(self, rng: random.Random) -> BoxPixels:
        w = rng.randint(self.min_side, self.max_side)
        h = rng.randint(self.min_side, self.max_side)
        x1 = rng.randint(0, self.size - w)
        y1 = rng.randint(0, self.size - h)
        return BoxPixels(x1=x1, y1=y1, x2=x1 + w, y2=y1 + h)

    def _nested_box(self, rng: random.Random, outer: BoxPixels) -> Optional[BoxPixels]:
        room_w = int(outer.x2 - outer.x1) - 2
        room_h = int(outer.y2 - outer.y1) - 2
        if room_w < 3 or room_h < 3:
            return None
        w = rng.randint(3, room_w)
        h = rng.randint(3, room_h)
        x1 = rng.randint(int(outer.x1) + 1, int(outer.x2) - 1 - w)
        y1 = rng.randint(int(outer.y1) + 1, int(outer.y2) - 1 - h)
        return BoxPixels(x1=x1, y1=y1, x2=x1 + w, y2=y1 + h)

    def _acceptable(self, box: BoxPixels, placed: List[SceneObject], container: Optional[BoxPixels]) -> bool:
        for other in placed:
            if other.box == container:
                continue
            # free objects may touch or overlap but never nest by accident
            if _strictly_inside(box, other.box) or _strictly_inside(other.box, box) or box == other.box:
                return False
        return True

    def _place(self, rng: random.Random) -> List[SceneObject]:
        count = rng.randint(self.spec.min_objects, self.spec.max_objects)
        classes = rng.sample(self.classes, count)
        placed: List[SceneObject] = []
        for cls in classes:
            for _ in range(MAX_PLACEMENT_ATTEMPTS):
                container = None
                if placed and rng.random() < self.spec.inside_probability:
                    container = rng.choice(placed).box
                    box = self._nested_box(rng, container)
                    if box is None:
                        continue
                else:
                    box = self._free_box(rng)
                if self._acceptable(box, placed, container):
                    placed.append(SceneObject(cls, box))
                    break
        return placed

    # -----------------------------
    # Rendering
    # -----------------------------
    def render(self, objects: List[SceneObject]) -> np.ndarray:
        canvas = Image.new("RGB", (self.size, self.size), (255, 255, 255))
        draw = ImageDraw.Draw(canvas)
        for obj in objects:
            color_name, shape = obj.cls.split()
            fill = COLORS[color_name]
            x1, y1, x2, y2 = (int(v) for v in obj.box.as_list())
            if shape == "square":
                draw.rectangle((x1, y1, x2 - 1, y2 - 1), fill=fill)
            elif shape == "circle":
                draw.ellipse((x1, y1, x2 - 1, y2 - 1), fill=fill)
            else:
                draw.polygon([(x1, y2 - 1), ((x1 + x2 - 1) / 2, y1), (x2 - 1, y2 - 1)], fill=fill)
        return np.asarray(canvas, dtype=np.uint8).copy()

    # -----------------------------
    # Dataset
    # -----------------------------
    def generate(
        self,
        num_scenes: int,
        seed: int,
        prefix: str = "scene",
        grounded_fraction: Optional[float] = None,
    ) -> SyntheticDataset:
        if num_scenes < 1:
            raise GenerationError("num_scenes must be >= 1")
        fraction = self.spec.grounded_fraction if grounded_fraction is None else grounded_fraction
        rng = random.Random(seed)

        images: Dict[str, np.ndarray] = {}
        grounded: List[SampleRecord] = []
        ungrounded: List[SampleRecord] = []
        captions: List[CaptionRecord] = []

        for scene in range(num_scenes):
            objects: List[SceneObject] = []
            for _ in range(MAX_SCENE_ATTEMPTS):
                objects = self._place(rng)
                if len(objects) >= 2:
                    break
            if len(objects) < 2:
                raise GenerationError(
                    f"could not place 2 objects on a {self.size}px canvas after {MAX_SCENE_ATTEMPTS} attempts"
                )

            name = f"{prefix}-{scene:05d}"
            image = ImageRef(kind=IMAGE_KIND_SYNTHETIC, ref=f"images/{name}.ppm", width=self.size, height=self.size)
            images[image.ref] = self.render(objects)
            is_grounded = rng.random() < fraction

            for i, subject in enumerate(objects):
                for j, obj in enumerate(objects):
                    if i == j:
                        continue
                    relation = spatial_relation(subject.box, obj.box)
                    if relation is None:
                        continue
                    record = SampleRecord(
                        id=f"{name}-{i}-{j}",
                        image=image,
                        subject=subject.cls,
                        subject_box=subject.box,
                        relation=relation,
                        object=obj.cls,
                        object_box=obj.box if is_grounded else None,
                        grounded=is_grounded,
                        source=SOURCE_SYNTHETIC_GROUNDED if is_grounded else SOURCE_SYNTHETIC_CAPTION,
                    )
                    (grounded if is_grounded else ungrounded).append(record)
                    captions.append(
                        CaptionRecord(
                            id=f"{name}-c{i}-{j}",
                            image=image,
                            caption=caption_for(subject.cls, relation, obj.cls),
                        )
                    )

        logger.info(
            f"Synthetic '{prefix}': {num_scenes} scenes, {len(grounded)} grounded, "
            f"{len(ungrounded)} ungrounded, {len(captions)} captions"
        )
        return SyntheticDataset(images, grounded, ungrounded, captions, GroundTruthIndex(grounded))
