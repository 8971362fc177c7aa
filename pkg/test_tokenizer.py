import os
import random
import sys
import tempfile

# Add project root to path
sys.path.append(os.getcwd())

import pytest

from app.core.constants import AT_ID, BOX_CLOSE_ID, BOX_OPEN_ID, NUM_SENTINELS, SEP_ID, SUB_ID, UNK_ID
from app.core.errors import ConfigError, InputValidationError
from app.models.schemas import BoxPixels, ImageRef, SampleRecord
from app.services.tokenizer import (
    Vocabulary,
    build_vocabulary,
    decode_input,
    decode_prediction,
    dequantize_bins,
    encode_input,
    encode_sample,
    encode_target,
    quantize_box,
)


def make_record(rid, subject, relation, obj, object_box=(25, 25, 75, 75), size=100):
    return SampleRecord(
        id=rid,
        image=ImageRef(ref=f"{rid}.ppm", width=size, height=size),
        subject=subject,
        subject_box=BoxPixels.of([10, 10, 40, 40]),
        relation=relation,
        object=obj,
        object_box=BoxPixels.of(list(object_box)) if object_box else None,
        grounded=object_box is not None,
    )


RECORDS = [
    make_record("r1", "man", "rides", "horse"),
    make_record("r2", "red square", "left of", "blue circle"),
    make_record("r3", "dog", "sits on", "chair", object_box=None),
]


def vocab(p=100):
    return build_vocabulary(RECORDS, p)


# ============================================================
# Vocabulary
# ============================================================

def test_layout_sentinels_words_positions():
    v = build_vocabulary([make_record("x", "man", "rides", "horse")], 100)
    assert len(v) == NUM_SENTINELS + 3 + 100
    assert v.text_terms == ("horse", "man", "rides")
    assert v.position_offset == NUM_SENTINELS + 3
    assert v.is_text_id(v.id_of("man")) and not v.is_position_id(v.id_of("man"))
    assert v.is_position_id(v.position_id(0)) and not v.is_text_id(v.position_id(0))
    assert v.id_of("zebra") == UNK_ID


def test_build_is_order_independent_and_serialization_idempotent():
    a = build_vocabulary(RECORDS, 100)
    b = build_vocabulary(list(reversed(RECORDS)), 100)
    assert a.serialize() == b.serialize()
    again = Vocabulary.parse(a.serialize(), a.object_terms)
    assert again.serialize() == a.serialize()
    assert again.sha256() == a.sha256()


def test_too_few_position_tokens_is_a_config_error():
    with pytest.raises(ConfigError):
        build_vocabulary(RECORDS, 1)


def test_empty_term_set_is_rejected():
    with pytest.raises(InputValidationError):
        build_vocabulary([], 100)


def test_save_load_keeps_object_lexicon():
    v = vocab()
    with tempfile.TemporaryDirectory() as tmp:
        path = v.save(os.path.join(tmp, "vocab.txt"))
        loaded = Vocabulary.load(path)
    assert loaded.serialize() == v.serialize()
    assert loaded.object_terms == {"horse", "blue", "circle", "chair"}


# ============================================================
# Boxes
# ============================================================

def test_quantize_examples():
    bins = quantize_box(BoxPixels.of([0, 0, 50, 50]), 100, 100, 100)
    assert bins.as_tuple() == (0, 0, 50, 50)
    # the far image edge clamps into the last bin
    assert quantize_box(BoxPixels.of([10, 10, 100, 100]), 100, 100, 100).as_tuple() == (10, 10, 99, 99)
    # each axis is binned against its own extent
    assert quantize_box(BoxPixels.of([50, 25, 150, 75]), 200, 100, 100).as_tuple() == (25, 25, 75, 75)


def test_quantize_rejects_bad_boxes():
    with pytest.raises(InputValidationError):
        quantize_box(BoxPixels.of([0, 0, 120, 50]), 100, 100, 100)
    with pytest.raises(InputValidationError):
        quantize_box(BoxPixels.of([0, 0, 10, 10]), 0, 100, 100)


def test_quantize_is_monotone():
    previous = -1
    for step in range(1, 200):
        x2 = step * 0.5
        bins = quantize_box(BoxPixels.of([0, 0, x2, 100]), 100, 100, 100)
        assert bins.bx2 >= previous
        previous = bins.bx2


def test_round_trip_error_on_random_boxes():
    rng = random.Random(0)
    width, height, p = 640.0, 480.0, 100
    checked = 0
    while checked < 1000:
        xs = sorted(rng.uniform(0, width) for _ in range(2))
        ys = sorted(rng.uniform(0, height) for _ in range(2))
        if xs[0] == xs[1] or ys[0] == ys[1]:
            continue
        box = BoxPixels.of([xs[0], ys[0], xs[1], ys[1]])
        back = dequantize_bins(quantize_box(box, width, height, p), width, height, p)
        for original, restored, extent in zip(box.as_list(), back.as_list(), (width, height, width, height)):
            assert abs(original - restored) <= 1.5 * extent / p
        checked += 1


def test_equal_bins_are_widened():
    box = dequantize_bins(quantize_box(BoxPixels.of([10.2, 10.2, 10.4, 10.4]), 100, 100, 100), 100, 100, 100)
    assert box.x1 < box.x2 and box.y1 < box.y2


# ============================================================
# Sequences
# ============================================================

def test_encode_input_layout():
    v = vocab()
    ids = encode_input("man", BoxPixels.of([10, 10, 40, 40]), 100, 100, v)
    assert ids[0] == SUB_ID and ids[1] == v.id_of("man") and ids[2] == BOX_OPEN_ID
    assert [v.bin_of(i) for i in ids[3:7]] == [10, 10, 40, 40]
    assert ids[7] == BOX_CLOSE_ID
    assert decode_input(ids, v).subject == "man"
    assert encode_input("unicorn", BoxPixels.of([10, 10, 40, 40]), 100, 100, v)[1] == UNK_ID


def test_encode_target_grounded_and_ungrounded():
    v = vocab()
    ids, mask = encode_target("rides", "horse", BoxPixels.of([25, 25, 75, 75]), 100, 100, v)
    assert ids == [
        v.id_of("rides"),
        v.id_of("horse"),
        AT_ID,
        v.position_id(25),
        v.position_id(25),
        v.position_id(75),
        v.position_id(75),
        SEP_ID,
    ]
    assert all(mask)

    ids, mask = encode_target("sits on", "chair", None, 100, 100, v)
    assert ids == [v.id_of("sits"), v.id_of("on"), v.id_of("chair"), AT_ID]
    assert len(mask) == len(ids)


def test_encode_sample_follows_grounded_flag():
    v = vocab()
    example = encode_sample(RECORDS[2], v)
    assert example.target_ids[-1] == AT_ID
    assert encode_sample(RECORDS[0], v).target_ids[-1] == SEP_ID


def test_decode_prediction_inverts_encode_target():
    v = vocab()
    for record in RECORDS:
        ids, _ = encode_target(record.relation, record.object, record.object_box, 100, 100, v)
        decoded = decode_prediction(ids, 100, 100, v)
        assert (decoded.relation, decoded.object) == (record.relation, record.object)
        assert decoded.well_formed == record.grounded
        if record.grounded:
            for a, b in zip(decoded.box.as_list(), record.object_box.as_list()):
                assert abs(a - b) <= 1.5


def test_decode_prediction_malformed_cases():
    v = vocab()
    short = [v.id_of("rides"), v.id_of("horse"), AT_ID, v.position_id(3), SEP_ID]
    decoded = decode_prediction(short, 100, 100, v)
    assert (decoded.relation, decoded.object, decoded.box, decoded.well_formed) == ("rides", "horse", None, False)

    no_at = decode_prediction([v.id_of("rides"), v.id_of("horse")], 100, 100, v)
    assert no_at == ("", "rides horse", None, False)

    text_after_at = [v.id_of("rides"), v.id_of("horse"), AT_ID, v.id_of("man"), SEP_ID]
    assert decode_prediction(text_after_at, 100, 100, v).well_formed is False


def test_unknown_words_before_the_separator_keep_the_box():
    v = vocab()
    box = [v.position_id(25), v.position_id(25), v.position_id(75), v.position_id(75), SEP_ID]
    decoded = decode_prediction([UNK_ID, v.id_of("horse"), AT_ID, *box], 100, 100, v)
    assert decoded.well_formed is True
    assert (decoded.relation, decoded.object) == ("[UNK]", "horse")
    for a, b in zip(decoded.box.as_list(), [25, 25, 75, 75]):
        assert abs(a - b) <= 1.5

    sentinel = decode_prediction([SUB_ID, v.id_of("horse"), AT_ID, *box], 100, 100, v)
    assert sentinel.well_formed is False and sentinel.box is None


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"PASS {name}")
