import math
import os
import sys
import tempfile

# Add project root to path
sys.path.append(os.getcwd())

import numpy as np
import pytest
import torch
from PIL import Image

from app.core.constants import AT_ID
from app.core.errors import ConfigError, InputValidationError, NumericError, StorageError
from app.models.schemas import BoxPixels, ImageRef, ModelConfig, SampleRecord, TrainParams
from app.services.seqmodel import (
    ImageTensor,
    TrainingSample,
    compute_gradients,
    compute_loss,
    decoder_logits,
    encode_context,
    encode_image,
    encode_text,
    fuse_context,
    gradient_check,
    init_parameters,
    load_checkpoint,
    load_image_tensor,
    save_checkpoint,
    train,
)
from app.services.tokenizer import SequenceExample, build_vocabulary, encode_input, encode_sample

IMAGE_SIZE = 16


def make_record(rid, subject, relation, obj, object_box=(25, 25, 75, 75)):
    return SampleRecord(
        id=rid,
        image=ImageRef(ref=f"{rid}.ppm", width=100, height=100),
        subject=subject,
        subject_box=BoxPixels.of([10, 10, 40, 40]),
        relation=relation,
        object=obj,
        object_box=BoxPixels.of(list(object_box)) if object_box else None,
        grounded=object_box is not None,
    )


GROUNDED = [
    make_record("g1", "man", "rides", "horse"),
    make_record("g2", "red square", "left of", "blue circle", object_box=(50, 20, 90, 60)),
]
UNGROUNDED = [
    make_record("u1", "dog", "sits on", "chair", object_box=None),
    make_record("u2", "man", "holds", "cup", object_box=None),
]
VOCAB = build_vocabulary(GROUNDED + UNGROUNDED, 20)


def small_config(**overrides):
    values = dict(
        hidden_dim=16,
        num_heads=2,
        vision_layers=1,
        text_layers=1,
        fusion_layers=1,
        decoder_layers=2,
        image_size=IMAGE_SIZE,
        patch_size=8,
        max_input_len=16,
        max_target_len=12,
        seed=3,
        **VOCAB.layout(),
    )
    values.update(overrides)
    return ModelConfig(**values)


def image(seed):
    pixels = np.random.default_rng(seed).random((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.float32)
    return ImageTensor(pixels, 100, 100)


def samples(records):
    return [TrainingSample(image(i), encode_sample(r, VOCAB)) for i, r in enumerate(records)]


def same_state(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


# ============================================================
# Construction
# ============================================================

def test_init_is_deterministic_per_seed():
    assert same_state(init_parameters(small_config()), init_parameters(small_config()))
    assert not same_state(init_parameters(small_config()), init_parameters(small_config(seed=4)))


def test_decoder_layers_start_as_fusion_copies():
    model = init_parameters(small_config())
    fusion = model.fusion[0].state_dict()
    for layer in model.decoder:
        state = layer.state_dict()
        assert all(torch.equal(state[k], fusion[k]) for k in fusion)


def test_invalid_config_is_rejected():
    with pytest.raises(ConfigError):
        init_parameters(small_config(hidden_dim=15))
    with pytest.raises(ConfigError):
        init_parameters(small_config(patch_size=5))
    with pytest.raises(ConfigError):
        init_parameters(small_config(num_text_terms=0))


# ============================================================
# Forward passes
# ============================================================

def test_stage_shapes():
    model = init_parameters(small_config())
    ids = encode_input("man", BoxPixels.of([10, 10, 40, 40]), 100, 100, VOCAB)
    img = image(0)
    assert tuple(encode_image(img, model).shape) == (4, 16)
    assert tuple(encode_text(ids, model).shape) == (len(ids), 16)
    z = fuse_context(encode_image(img, model), encode_text(ids, model), model)
    assert tuple(z.z.shape) == (len(ids), 16)
    prefix = [VOCAB.id_of("rides"), VOCAB.id_of("horse")]
    assert tuple(decoder_logits(z, prefix, model).shape) == (3, len(VOCAB))


def test_bad_inputs_raise():
    model = init_parameters(small_config())
    with pytest.raises(InputValidationError):
        encode_image(ImageTensor(np.zeros((8, 8, 3), dtype=np.float32), 8, 8), model)
    with pytest.raises(InputValidationError):
        encode_image(ImageTensor(np.full((IMAGE_SIZE, IMAGE_SIZE, 3), 2.0, dtype=np.float32), 1, 1), model)
    with pytest.raises(InputValidationError):
        encode_text([len(VOCAB) + 3], model)


def test_decoder_is_causal():
    model = init_parameters(small_config())
    ids = encode_sample(GROUNDED[0], VOCAB)
    z = encode_context(image(0), ids.input_ids, model)
    full = decoder_logits(z, ids.target_ids[:-1], model)
    for k in range(len(ids.target_ids)):
        partial = decoder_logits(z, ids.target_ids[:k], model)
        assert torch.allclose(partial, full[: k + 1], atol=1e-5, rtol=0, equal_nan=True)


def test_next_token_distributions_normalize():
    model = init_parameters(small_config())
    ids = encode_sample(GROUNDED[1], VOCAB)
    z = encode_context(image(1), ids.input_ids, model)
    probs = torch.softmax(decoder_logits(z, ids.target_ids[:-1], model), dim=-1)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(probs.shape[0]), atol=1e-5)


def test_segment_mask_blocks_wrong_segment():
    model = init_parameters(small_config())
    ids = encode_sample(GROUNDED[0], VOCAB)
    z = encode_context(image(0), ids.input_ids, model)
    logits = decoder_logits(z, ids.target_ids[:-1], model)
    at = ids.target_ids.index(AT_ID)
    assert torch.isinf(logits[0, VOCAB.position_offset:]).all()
    assert torch.isinf(logits[at + 1, VOCAB.text_offset:VOCAB.position_offset]).all()


# ============================================================
# Objective
# ============================================================

def test_uniform_output_gives_log_vocab_loss():
    model = init_parameters(small_config(segment_mask=False))
    with torch.no_grad():
        model.output.weight.zero_()
        model.output.bias.zero_()
    result = compute_loss(samples(GROUNDED), model)
    assert abs(result.loss.item() - math.log(len(VOCAB))) < 1e-5
    assert result.num_tokens == sum(len(encode_sample(r, VOCAB).target_ids) for r in GROUNDED)


def test_ungrounded_batch_ignores_position_tokens():
    model = init_parameters(small_config())
    batch = samples(UNGROUNDED)
    before_loss = compute_loss(batch, model).loss.item()
    before = compute_gradients(batch, model)
    assert torch.count_nonzero(before["output.weight"][VOCAB.position_offset:]) == 0

    with torch.no_grad():
        model.output.weight[VOCAB.position_offset:] += 5.0
        model.output.bias[VOCAB.position_offset:] -= 3.0
    after_loss = compute_loss(batch, model).loss.item()
    after = compute_gradients(batch, model)

    assert before_loss == pytest.approx(after_loss, abs=1e-7)
    for name in before:
        assert torch.allclose(before[name], after[name], atol=1e-7, rtol=0), name


def test_empty_loss_mask_yields_zero_loss():
    model = init_parameters(small_config())
    example = encode_sample(UNGROUNDED[0], VOCAB)
    muted = SequenceExample(
        input_ids=example.input_ids, target_ids=example.target_ids, loss_mask=[False] * len(example.target_ids)
    )
    result = compute_loss([TrainingSample(image(0), muted)], model)
    assert result.num_tokens == 0 and result.loss.item() == 0.0


def test_gradients_match_finite_differences():
    model = init_parameters(small_config())
    batch = samples([GROUNDED[1], UNGROUNDED[0]])
    for entry in gradient_check(batch, model, num_params=30):
        scale = max(abs(entry.analytic), abs(entry.numeric))
        assert abs(entry.analytic - entry.numeric) <= 1e-4 * scale + 1e-6, entry


def test_non_finite_loss_raises():
    model = init_parameters(small_config())
    with torch.no_grad():
        model.output.bias.fill_(float("nan"))
    with pytest.raises(NumericError):
        compute_gradients(samples(GROUNDED), model)


# ============================================================
# Training & checkpoints
# ============================================================

def test_zero_epochs_returns_initial_parameters():
    result = train(samples(GROUNDED), small_config(), TrainParams(epochs=0))
    assert result.loss_history == []
    assert same_state(result.model, init_parameters(small_config()))


def test_training_is_deterministic():
    params = TrainParams(epochs=3, batch_size=2, lr=1e-3, seed=7)
    data = samples(GROUNDED + UNGROUNDED)
    a = train(data, small_config(), params)
    b = train(data, small_config(), params)
    assert a.loss_history == b.loss_history
    assert same_state(a.model, b.model)


def test_small_set_is_memorized():
    params = TrainParams(epochs=200, batch_size=2, lr=5e-3, seed=1)
    result = train(samples(GROUNDED), small_config(), params)
    assert len(result.loss_history) == 200
    assert result.loss_history[-1] < 0.5 * result.loss_history[0]


def test_checkpoint_round_trip():
    model = init_parameters(small_config())
    ids = encode_sample(GROUNDED[0], VOCAB)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(model, os.path.join(tmp, "m.pt"), VOCAB.sha256())
        loaded, sha = load_checkpoint(path)
    assert sha == VOCAB.sha256()
    assert loaded.config == model.config
    z_a = encode_context(image(0), ids.input_ids, model)
    z_b = encode_context(image(0), ids.input_ids, loaded)
    assert torch.equal(decoder_logits(z_a, ids.target_ids[:3], model), decoder_logits(z_b, ids.target_ids[:3], loaded))


def test_corrupt_checkpoints_are_storage_errors():
    model = init_parameters(small_config())
    with tempfile.TemporaryDirectory() as tmp:
        garbage = os.path.join(tmp, "garbage.pt")
        with open(garbage, "wb") as handle:
            handle.write(b"not a checkpoint at all")
        with pytest.raises(StorageError):
            load_checkpoint(garbage)

        path = save_checkpoint(model, os.path.join(tmp, "m.pt"), VOCAB.sha256())
        payload = torch.load(path, map_location="cpu", weights_only=True)
        payload["config"]["hidden_dim"] = 32
        torch.save(payload, path)
        with pytest.raises(StorageError):
            load_checkpoint(path)

        del payload["state_dict"]
        torch.save(payload, path)
        with pytest.raises(StorageError):
            load_checkpoint(path)


def test_image_loading_resizes_and_keeps_native_size():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "img.png")
        Image.new("RGB", (40, 30), (255, 0, 0)).save(path)
        tensor = load_image_tensor(path, IMAGE_SIZE)
    assert tensor.pixels.shape == (IMAGE_SIZE, IMAGE_SIZE, 3)
    assert (tensor.width, tensor.height) == (40, 30)
    assert np.allclose(tensor.pixels[..., 0], 1.0) and np.allclose(tensor.pixels[..., 1], 0.0)


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"PASS {name}")
