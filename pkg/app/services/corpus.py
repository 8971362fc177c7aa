# app/services/corpus.py

from __future__ import annotations

import math
import random
import re
from collections import Counter, defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from pydantic import ValidationError

from app.core.constants import (
    AUGMENT_IN_DOMAIN,
    LEXICON_SECTIONS,
    REQUIRED_LEXICON_SECTIONS,
    SOURCE_IN_DOMAIN,
)
from app.core.errors import ConfigError, InputValidationError, StorageError
from app.models.schemas import (
    BenchmarkSplits,
    Lexicon,
    SampleRecord,
    SplitSpec,
    Triplet,
)
from app.utils.logger import get_logger

logger = get_logger(__name__)

Pair = tuple[str, str]

_PUNCTUATION = re.compile(r"[^\w\s]")
_SECTION = re.compile(r"^\[(\w+)\]$")


# ============================================================
# Lexicon
# ============================================================

def parse_lexicon(text: str) -> Lexicon:
    """
    Sectioned word lists:

        [verbs]
        riding
        [prepositions]
        on
        left of

    Blank lines and '#' comments are skipped.
    """
    sections: Dict[str, set[str]] = {}
    current: Optional[str] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header = _SECTION.match(line)
        if header:
            current = header.group(1).lower()
            if current not in LEXICON_SECTIONS:
                raise ConfigError(f"lexicon line {number}: unknown section [{current}]")
            sections.setdefault(current, set())
            continue
        if current is None:
            raise ConfigError(f"lexicon line {number}: term outside any section")
        sections[current].add(" ".join(line.lower().split()))

    missing = [name for name in REQUIRED_LEXICON_SECTIONS if name not in sections]
    if missing:
        raise ConfigError(f"lexicon is missing sections {missing}")
    try:
        return Lexicon(**{name: frozenset(terms) for name, terms in sections.items()})
    except ValidationError as exc:
        raise ConfigError(f"invalid lexicon: {exc.errors()[0]['msg']}") from exc


def load_lexicon(path: str | Path) -> Lexicon:
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"lexicon not found: {path}")
    return parse_lexicon(path.read_text(encoding="utf-8"))


def render_lexicon(lex: Lexicon) -> str:
    blocks = []
    for name in LEXICON_SECTIONS:
        terms = getattr(lex, name)
        if terms or name in REQUIRED_LEXICON_SECTIONS:
            blocks.append("\n".join([f"[{name}]", *sorted(terms)]))
    return "\n\n".join(blocks) + "\n"


# ============================================================
# Caption -> triplets
# ============================================================

def _normalize_caption(caption: str) -> List[str]:
    return _PUNCTUATION.sub(" ", caption.lower()).split()


def _noun_phrase(words: List[str], start: int, lex: Lexicon) -> Optional[tuple[str, int]]:
    """(ignorable | modifier)* noun; modifiers stay in the phrase."""
    kept = []
    pos = start
    while pos < len(words) and (words[pos] in lex.ignorable or words[pos] in lex.modifiers):
        if words[pos] in lex.modifiers:
            kept.append(words[pos])
        pos += 1
    if pos < len(words) and words[pos] in lex.nouns:
        kept.append(words[pos])
        return " ".join(kept), pos + 1
    return None


def _prepositions_at(words: List[str], start: int, preps: Sequence[List[str]]) -> List[tuple[str, int]]:
    hits = []
    for prep in preps:
        if words[start:start + len(prep)] == prep:
            hits.append((" ".join(prep), start + len(prep)))
    return hits


def _relations(words: List[str], start: int, lex: Lexicon, preps: Sequence[List[str]]) -> List[tuple[str, int]]:
    """Candidate (relation, end) readings, preferred first."""
    pos = start
    after_copula = False
    if pos < len(words) and words[pos] in lex.copulas:
        pos += 1
        after_copula = True
    if pos >= len(words):
        return []

    if words[pos] in lex.verbs:
        verb = words[pos]
        readings = [(f"{verb} {prep}", end) for prep, end in _prepositions_at(words, pos + 1, preps)]
        readings.append((verb, pos + 1))
        return readings
    if after_copula:
        return _prepositions_at(words, pos, preps)
    return []


def extract_triplets(caption: str, lex: Lexicon) -> List[Triplet]:
    """
    Rule-based NP1 V [P] NP2 matcher over a closed lexicon.
    Matches are non-overlapping and emitted left to right.
    """
    words = _normalize_caption(caption)
    # longest prepositions first so "left of" wins over "left"
    preps = sorted((p.split() for p in lex.prepositions), key=lambda p: (-len(p), p))

    triplets = []
    pos = 0
    while pos < len(words):
        subject = _noun_phrase(words, pos, lex)
        if subject is None:
            pos += 1
            continue
        subject_text, subject_end = subject

        match = None
        for relation, rel_end in _relations(words, subject_end, lex, preps):
            obj = _noun_phrase(words, rel_end, lex)
            if obj is not None:
                match = Triplet(subject_text, relation, obj[0]), obj[1]
                break

        if match is None:
            pos += 1
            continue
        triplets.append(match[0])
        pos = match[1]
    return triplets


# ============================================================
# Pair statistics and Rel-Obj sets
# ============================================================

def build_pair_statistics(
    records: Iterable[SampleRecord],
    triplets: Iterable[Triplet],
    window: tuple[int, int],
) -> Dict[Pair, int]:
    low, high = window
    if low > high:
        raise ConfigError(f"frequency window min {low} exceeds max {high}")

    counts: Counter = Counter()
    counts.update(r.pair for r in records)
    counts.update((t.relation, t.object) for t in triplets)
    kept = {pair: n for pair, n in sorted(counts.items()) if low <= n <= high}
    logger.info(f"Pair statistics: {len(counts)} pairs seen, {len(kept)} inside [{low}, {high}]")
    return kept


def partition_rel_obj_sets(pairs: Iterable[Pair], seed: int, limit: int = 0) -> tuple[frozenset, frozenset]:
    """
    Seeded shuffle then even split; an odd pair count favours set A.
    A positive limit keeps only the first `limit` shuffled pairs, the rest
    stay out of both sets.
    """
    ordered = sorted(set(pairs))
    random.Random(seed).shuffle(ordered)
    if limit > 0:
        ordered = ordered[:limit]
    if len(ordered) < 2:
        raise InputValidationError(f"need at least 2 relation-object pairs to partition, got {len(ordered)}")
    cut = math.ceil(len(ordered) / 2)
    return frozenset(ordered[:cut]), frozenset(ordered[cut:])


# ============================================================
# Benchmark splits
# ============================================================

def removal_count(fraction: float, n: int) -> int:
    """ceil(fraction * n), immune to float noise such as 0.3 * 10."""
    return min(n, math.ceil(round(fraction * n, 9)))


def strip_object_boxes(records: Iterable[SampleRecord]) -> List[SampleRecord]:
    """Ungrounded twins of grounded records (in-domain text augmentation)."""
    stripped = []
    for record in records:
        fields = record.model_dump(exclude={"id", "object_box", "grounded", "source"})
        stripped.append(
            SampleRecord(
                **fields,
                id=f"{record.id}:text",
                object_box=None,
                grounded=False,
                source=SOURCE_IN_DOMAIN,
            )
        )
    return stripped


def _require(records: Iterable[SampleRecord], grounded: bool, label: str) -> List[SampleRecord]:
    records = sorted(records, key=lambda r: r.id)
    wrong = [r.id for r in records if r.grounded != grounded]
    if wrong:
        state = "grounded" if grounded else "ungrounded"
        raise InputValidationError(f"{label} must be {state}; offending ids {wrong[:5]}")
    ids = [r.id for r in records]
    if len(ids) != len(set(ids)):
        raise InputValidationError(f"{label} contains duplicate ids")
    return records


def build_splits(
    grounded: Iterable[SampleRecord],
    ungrounded: Iterable[SampleRecord],
    spec: SplitSpec,
    set_a: Iterable[Pair],
    set_b: Iterable[Pair],
    test_pool: Iterable[SampleRecord],
) -> BenchmarkSplits:
    """
    base_train:     grounded minus ceil(fraction * n) seeded picks per set-A pair,
                    minus every set-B sample
    text_aug_train: base_train plus ungrounded records whose pair is in A or B
    test_a/test_b:  test pool filtered by pair membership
    """
    set_a, set_b = frozenset(set_a), frozenset(set_b)
    if set_a & set_b:
        raise ConfigError(f"Rel-Obj sets overlap on {sorted(set_a & set_b)[:5]}")

    grounded = _require(grounded, True, "grounded records")
    test_pool = _require(test_pool, True, "test pool")

    rng = random.Random(spec.seed)
    by_pair: Dict[Pair, List[SampleRecord]] = defaultdict(list)
    for record in grounded:
        by_pair[record.pair].append(record)

    removed: set[str] = set()
    for pair in sorted(set_a):
        members = by_pair.get(pair, [])
        removed.update(r.id for r in rng.sample(members, removal_count(spec.removal_fraction, len(members))))

    base_train = [r for r in grounded if r.pair not in set_b and r.id not in removed]

    if spec.augment_source == AUGMENT_IN_DOMAIN:
        held_out = [r for r in grounded if r.pair in set_b or r.id in removed]
        ungrounded = strip_object_boxes(held_out)
    ungrounded = _require(ungrounded, False, "ungrounded records")

    targets = set_a | set_b
    extra = [r for r in ungrounded if r.pair in targets]
    text_aug_train = sorted(base_train + extra, key=lambda r: r.id)

    covered = {r.pair for r in extra}
    for pair in sorted(set_b - covered):
        logger.warning(f"Set-B pair {pair} has no ungrounded samples; Test-B cannot recover it")

    splits = BenchmarkSplits(
        set_a=set_a,
        set_b=set_b,
        base_train=base_train,
        text_aug_train=text_aug_train,
        test_a=[r for r in test_pool if r.pair in set_a],
        test_b=[r for r in test_pool if r.pair in set_b],
        full_test=test_pool,
    )
    logger.info(
        f"Splits: |A|={len(set_a)} |B|={len(set_b)} base={len(base_train)} "
        f"text_aug={len(text_aug_train)} test_a={len(splits.test_a)} "
        f"test_b={len(splits.test_b)} full={len(test_pool)}"
    )
    return splits


def audit_splits(
    splits: BenchmarkSplits,
    grounded: Iterable[SampleRecord],
    ungrounded: Iterable[SampleRecord],
    removal_fraction: float,
) -> List[str]:
    """
    Recounts every split invariant from scratch; returns the violations.
    `ungrounded` is the augmentation pool that was actually used.
    """
    problems: List[str] = []
    set_a, set_b = splits.set_a, splits.set_b
    targets = set_a | set_b

    if set_a & set_b:
        problems.append("set A and set B overlap")

    grounded_counts = Counter(r.pair for r in grounded)
    base_counts = Counter(r.pair for r in splits.base_train)
    for pair, n in sorted(grounded_counts.items()):
        if pair in set_b:
            expected = 0
        elif pair in set_a:
            expected = n - removal_count(removal_fraction, n)
        else:
            expected = n
        if base_counts.get(pair, 0) != expected:
            problems.append(f"base_train has {base_counts.get(pair, 0)} samples of {pair}, expected {expected}")
    if any(not r.grounded for r in splits.base_train):
        problems.append("base_train contains ungrounded samples")

    base_ids = {r.id for r in splits.base_train}
    aug_ids = {r.id for r in splits.text_aug_train}
    if not base_ids <= aug_ids:
        problems.append(f"{len(base_ids - aug_ids)} base_train samples missing from text_aug_train")
    extras = [r for r in splits.text_aug_train if r.id not in base_ids]
    if any(r.grounded for r in extras):
        problems.append("text_aug_train adds grounded samples")
    if any(r.pair not in targets for r in extras):
        problems.append("text_aug_train adds samples outside A and B")
    expected_extra = sum(1 for r in ungrounded if r.pair in targets)
    if len(extras) != expected_extra:
        problems.append(f"text_aug_train adds {len(extras)} samples, expected {expected_extra}")

    if any(r.pair not in set_a for r in splits.test_a):
        problems.append("test_a contains pairs outside set A")
    if any(r.pair not in set_b for r in splits.test_b):
        problems.append("test_b contains pairs outside set B")
    if any(not r.grounded for r in splits.full_test):
        problems.append("full_test contains ungrounded samples")
    return problems


class GroundTruthIndex:
    """Image ref -> grounded records of that image."""

    def __init__(self, records: Iterable[SampleRecord] = ()) -> None:
        self._by_image: Dict[str, List[SampleRecord]] = defaultdict(list)
        self._ids: set[str] = set()
        for record in records:
            self.add(record)

    def add(self, record: SampleRecord) -> None:
        if not record.grounded:
            raise InputValidationError(f"{record.id}: ground truth must be grounded")
        if record.id in self._ids:
            raise InputValidationError(f"duplicate ground-truth id {record.id}")
        self._ids.add(record.id)
        self._by_image[record.image.ref].append(record)

    def for_image(self, ref: str) -> List[SampleRecord]:
        return list(self._by_image.get(ref, []))

    def records(self) -> List[SampleRecord]:
        return sorted((r for members in self._by_image.values() for r in members), key=lambda r: r.id)

    def __len__(self) -> int:
        return len(self._ids)
