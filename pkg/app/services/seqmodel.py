# app/services/seqmodel.py

from __future__ import annotations

import copy
import math
import pickle
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from pydantic import ValidationError
from torch import nn

from app.core.config import INIT_STD
from app.core.constants import AT_ID, NUM_SENTINELS, PAD_ID, SEP_ID, UNK_ID
from app.core.errors import ConfigError, InputValidationError, NumericError, StorageError
from app.models.schemas import ModelConfig, TrainParams
from app.services.tokenizer import SequenceExample
from app.utils import metrics
from app.utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_FORMAT = "scord-checkpoint/1"
NEG_INF = float("-inf")


class ImageTensor(NamedTuple):
    """S x S x 3 intensities in [0, 1] plus the native size boxes refer to."""

    pixels: np.ndarray
    width: int
    height: int


class TrainingSample(NamedTuple):
    image: ImageTensor
    example: SequenceExample


class ContextState(NamedTuple):
    """Fused features z (one row per input text position)."""

    z: torch.Tensor
    padding: Optional[torch.Tensor] = None


class BatchLoss(NamedTuple):
    loss: torch.Tensor
    num_tokens: int  # 0 flags a batch with nothing to supervise


class TrainResult(NamedTuple):
    model: "RelationSequenceModel"
    loss_history: List[float]


# ============================================================
# Building blocks
# ============================================================

class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(
        self,
        x: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        key_padding: Optional[torch.Tensor] = None,
        causal: bool = False,
    ) -> torch.Tensor:
        context = x if context is None else context
        batch, q_len, dim = x.shape
        k_len = context.shape[1]

        def heads(t: torch.Tensor, length: int) -> torch.Tensor:
            return t.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

        q = heads(self.query(x), q_len)
        k = heads(self.key(context), k_len)
        v = heads(self.value(context), k_len)

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        # masked_fill replaces values, so masked keys have no numeric path at all
        if causal:
            future = torch.ones(q_len, k_len, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, NEG_INF)
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], NEG_INF)

        weights = torch.softmax(scores, dim=-1)
        mixed = (weights @ v).transpose(1, 2).reshape(batch, q_len, dim)
        return self.out(mixed)


class FeedForward(nn.Module):
    def __init__(self, dim: int, multiplier: int) -> None:
        super().__init__()
        self.up = nn.Linear(dim, dim * multiplier)
        self.down = nn.Linear(dim * multiplier, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(F.gelu(self.up(x)))


class EncoderLayer(nn.Module):
    """Pre-norm self-attention block (image and text encoders)."""

    def __init__(self, dim: int, num_heads: int, multiplier: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, multiplier)

    def forward(self, x: torch.Tensor, key_padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_padding=key_padding)
        return x + self.ffn(self.norm2(x))


class CrossLayer(nn.Module):
    """
    Self-attention, cross-attention, feed-forward.
    Shared by the fusion encoder and the decoder so decoder layers can start
    as copies of fusion layers; only the causal flag differs.
    """

    def __init__(self, dim: int, num_heads: int, multiplier: int) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, multiplier)

    def forward(
        self,
        x: torch.Tensor,
        context: torch.Tensor,
        self_padding: Optional[torch.Tensor] = None,
        context_padding: Optional[torch.Tensor] = None,
        causal: bool = False,
    ) -> torch.Tensor:
        x = x + self.self_attn(self.norm1(x), key_padding=self_padding, causal=causal)
        x = x + self.cross_attn(self.norm2(x), context=context, key_padding=context_padding)
        return x + self.ffn(self.norm3(x))


# ============================================================
# The four-part network
# ============================================================

class RelationSequenceModel(nn.Module):
    """
    Image encoder -> text encoder -> fusion encoder -> autoregressive decoder.

    The decoder predicts relation words, object words, [@], four position
    tokens and [SEP]. With segment_mask on, rows before [@] can only emit
    text terms or [@], rows after it only position tokens or [SEP].
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        dim, heads, mult = config.hidden_dim, config.num_heads, config.ffn_multiplier
        patch_dim = 3 * config.patch_size * config.patch_size

        self.patch_embed = nn.Linear(patch_dim, dim)
        self.image_pos = nn.Parameter(torch.zeros(config.num_patches, dim))
        self.vision = nn.ModuleList(EncoderLayer(dim, heads, mult) for _ in range(config.vision_layers))
        self.vision_norm = nn.LayerNorm(dim)

        self.token_embed = nn.Embedding(config.vocab_size, dim)
        self.text_pos = nn.Parameter(torch.zeros(config.max_input_len, dim))
        self.text = nn.ModuleList(EncoderLayer(dim, heads, mult) for _ in range(config.text_layers))
        self.text_norm = nn.LayerNorm(dim)

        self.fusion = nn.ModuleList(CrossLayer(dim, heads, mult) for _ in range(config.fusion_layers))
        self.fusion_norm = nn.LayerNorm(dim)

        self.bos = nn.Parameter(torch.zeros(dim))
        self.target_pos = nn.Parameter(torch.zeros(config.max_target_len, dim))
        self.decoder = nn.ModuleList(CrossLayer(dim, heads, mult) for _ in range(config.decoder_layers))
        self.decoder_norm = nn.LayerNorm(dim)
        self.output = nn.Linear(dim, config.vocab_size)

        text_allowed = torch.zeros(config.vocab_size, dtype=torch.bool)
        text_allowed[NUM_SENTINELS:NUM_SENTINELS + config.num_text_terms] = True
        text_allowed[AT_ID] = True
        text_allowed[UNK_ID] = True
        box_allowed = torch.zeros(config.vocab_size, dtype=torch.bool)
        box_allowed[NUM_SENTINELS + config.num_text_terms:] = True
        box_allowed[SEP_ID] = True
        self.register_buffer("text_allowed", text_allowed, persistent=False)
        self.register_buffer("box_allowed", box_allowed, persistent=False)

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        batch = images.shape[0]
        grid = self.config.image_size // self.config.patch_size
        p = self.config.patch_size
        patches = (
            images.reshape(batch, grid, p, grid, p, 3)
            .permute(0, 1, 3, 2, 4, 5)
            .reshape(batch, grid * grid, p * p * 3)
        )
        x = self.patch_embed(patches) + self.image_pos
        for layer in self.vision:
            x = layer(x)
        return self.vision_norm(x)

    def encode_texts(self, input_ids: torch.Tensor, padding: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.token_embed(input_ids) + self.text_pos[: input_ids.shape[1]]
        for layer in self.text:
            x = layer(x, key_padding=padding)
        return self.text_norm(x)

    def fuse(
        self,
        image_feats: torch.Tensor,
        text_feats: torch.Tensor,
        padding: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        x = text_feats
        for layer in self.fusion:
            x = layer(x, image_feats, self_padding=padding)
        return self.fusion_norm(x)

    def decode(
        self,
        context: torch.Tensor,
        context_padding: Optional[torch.Tensor],
        prefix_ids: torch.Tensor,
    ) -> torch.Tensor:
        """Logits [B, L+1, V]: row k predicts token k from BOS + prefix[:k]."""
        batch, length = prefix_ids.shape
        bos = self.bos.expand(batch, 1, -1)
        x = torch.cat([bos, self.token_embed(prefix_ids)], dim=1) + self.target_pos[: length + 1]
        for layer in self.decoder:
            x = layer(x, context, context_padding=context_padding, causal=True)
        logits = self.output(self.decoder_norm(x))
        if self.config.segment_mask:
            logits = logits.masked_fill(~self.allowed_tokens(prefix_ids), NEG_INF)
        return logits

    def allowed_tokens(self, prefix_ids: torch.Tensor) -> torch.Tensor:
        batch = prefix_ids.shape[0]
        seen_at = torch.cumsum(prefix_ids == AT_ID, dim=1) > 0
        in_box = torch.cat(
            [torch.zeros(batch, 1, dtype=torch.bool, device=prefix_ids.device), seen_at], dim=1
        )
        return torch.where(in_box[..., None], self.box_allowed, self.text_allowed)

    def forward(
        self,
        images: torch.Tensor,
        input_ids: torch.Tensor,
        input_padding: Optional[torch.Tensor],
        decoder_inputs: torch.Tensor,
    ) -> torch.Tensor:
        image_feats = self.encode_images(images)
        text_feats = self.encode_texts(input_ids, input_padding)
        z = self.fuse(image_feats, text_feats, input_padding)
        return self.decode(z, input_padding, decoder_inputs)


# ============================================================
# Construction
# ============================================================

def validate_model_config(config: ModelConfig) -> None:
    problems = []
    if config.hidden_dim % config.num_heads:
        problems.append(f"hidden_dim {config.hidden_dim} not divisible by num_heads {config.num_heads}")
    for name in ("vision_layers", "text_layers", "fusion_layers", "decoder_layers"):
        if getattr(config, name) < 1:
            problems.append(f"{name} must be >= 1")
    if config.image_size % config.patch_size:
        problems.append(f"image_size {config.image_size} not divisible by patch_size {config.patch_size}")
    if config.max_target_len < 8:
        problems.append("max_target_len must leave room for 2 words + [@] + 4 bins + [SEP]")
    if config.num_text_terms < 1:
        problems.append("num_text_terms missing; fill the config from a vocabulary layout")
    if config.num_position_tokens < 2:
        problems.append("num_position_tokens must be >= 2")
    if problems:
        raise ConfigError("; ".join(problems))


def init_parameters(config: ModelConfig) -> RelationSequenceModel:
    """
    N(0, 0.02) weights drawn from a seeded generator, zero biases, unit norms.
    Decoder layers then start as copies of the fusion layers.
    """
    validate_model_config(config)
    generator = torch.Generator().manual_seed(config.seed)
    model = RelationSequenceModel(config)

    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.Linear):
                module.weight.normal_(0.0, INIT_STD, generator=generator)
                module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                module.weight.normal_(0.0, INIT_STD, generator=generator)
        for param in (model.image_pos, model.text_pos, model.bos, model.target_pos):
            param.normal_(0.0, INIT_STD, generator=generator)

        for index, layer in enumerate(model.decoder):
            layer.load_state_dict(model.fusion[index % len(model.fusion)].state_dict())

    model.eval()
    return model


# ============================================================
# Single-sample forward passes
# ============================================================

def _check_image(img: ImageTensor, config: ModelConfig) -> None:
    expected = (config.image_size, config.image_size, 3)
    if tuple(img.pixels.shape) != expected:
        raise InputValidationError(f"image shape {tuple(img.pixels.shape)} != {expected}")
    if img.pixels.size and (img.pixels.min() < 0.0 or img.pixels.max() > 1.0):
        raise InputValidationError("image intensities must lie in [0, 1]")


def _check_ids(ids: Sequence[int], config: ModelConfig, limit: int, label: str) -> None:
    if len(ids) > limit:
        raise InputValidationError(f"{label} length {len(ids)} exceeds {limit}")
    bad = [i for i in ids if not 0 <= i < config.vocab_size]
    if bad:
        raise InputValidationError(f"{label} ids outside vocabulary: {bad[:5]}")


def _image_batch(images: Sequence[ImageTensor], model: RelationSequenceModel) -> torch.Tensor:
    for img in images:
        _check_image(img, model.config)
    return torch.as_tensor(np.stack([img.pixels for img in images]), dtype=model.dtype)


@torch.no_grad()
def encode_image(img: ImageTensor, model: RelationSequenceModel) -> torch.Tensor:
    return model.encode_images(_image_batch([img], model))[0]


@torch.no_grad()
def encode_text(input_ids: Sequence[int], model: RelationSequenceModel) -> torch.Tensor:
    _check_ids(input_ids, model.config, model.config.max_input_len, "input")
    return model.encode_texts(torch.tensor([list(input_ids)], dtype=torch.long))[0]


@torch.no_grad()
def fuse_context(image_feats: torch.Tensor, text_feats: torch.Tensor, model: RelationSequenceModel) -> ContextState:
    dim = model.config.hidden_dim
    if image_feats.shape[-1] != dim or text_feats.shape[-1] != dim:
        raise InputValidationError(
            f"feature width mismatch: image {image_feats.shape[-1]}, text {text_feats.shape[-1]}, model {dim}"
        )
    return ContextState(model.fuse(image_feats[None], text_feats[None])[0])


@torch.no_grad()
def encode_context(img: ImageTensor, input_ids: Sequence[int], model: RelationSequenceModel) -> ContextState:
    return fuse_context(encode_image(img, model), encode_text(input_ids, model), model)


@torch.no_grad()
def decoder_logits(z: ContextState, prefix: Sequence[int], model: RelationSequenceModel) -> torch.Tensor:
    """One logit row per next-token prediction: |prefix| + 1 rows."""
    _check_ids(prefix, model.config, model.config.max_target_len - 1, "prefix")
    prefix_ids = torch.tensor([list(prefix)], dtype=torch.long)
    padding = None if z.padding is None else z.padding[None]
    return model.decode(z.z[None], padding, prefix_ids)[0]


# ============================================================
# Objective
# ============================================================

class _Collated(NamedTuple):
    images: torch.Tensor
    input_ids: torch.Tensor
    input_padding: torch.Tensor
    decoder_inputs: torch.Tensor
    targets: torch.Tensor
    mask: torch.Tensor


def _collate(batch: Sequence[TrainingSample], model: RelationSequenceModel) -> _Collated:
    config = model.config
    size = len(batch)
    in_len = max(len(s.example.input_ids) for s in batch)
    out_len = max(len(s.example.target_ids) for s in batch)
    if in_len > config.max_input_len:
        raise InputValidationError(f"input length {in_len} exceeds {config.max_input_len}")
    if out_len > config.max_target_len:
        raise InputValidationError(f"target length {out_len} exceeds {config.max_target_len}")

    input_ids = torch.full((size, in_len), PAD_ID, dtype=torch.long)
    input_padding = torch.ones((size, in_len), dtype=torch.bool)
    targets = torch.full((size, out_len), PAD_ID, dtype=torch.long)
    mask = torch.zeros((size, out_len), dtype=torch.bool)
    for row, sample in enumerate(batch):
        ex = sample.example
        _check_ids(ex.input_ids, config, config.max_input_len, "input")
        _check_ids(ex.target_ids, config, config.max_target_len, "target")
        input_ids[row, : len(ex.input_ids)] = torch.tensor(ex.input_ids, dtype=torch.long)
        input_padding[row, : len(ex.input_ids)] = False
        targets[row, : len(ex.target_ids)] = torch.tensor(ex.target_ids, dtype=torch.long)
        mask[row, : len(ex.loss_mask)] = torch.tensor(ex.loss_mask, dtype=torch.bool)

    return _Collated(
        images=_image_batch([s.image for s in batch], model),
        input_ids=input_ids,
        input_padding=input_padding,
        decoder_inputs=targets[:, :-1],
        targets=targets,
        mask=mask,
    )


def compute_loss(batch: Sequence[TrainingSample], model: RelationSequenceModel) -> BatchLoss:
    """
    Masked cross-entropy, mean over supervised target positions.
    Ungrounded targets stop at [@], so box positions never enter the sum.
    """
    if not batch:
        raise InputValidationError("cannot compute a loss over an empty batch")
    data = _collate(batch, model)
    num_tokens = int(data.mask.sum())
    if num_tokens == 0:
        logger.warning(f"Batch of {len(batch)} samples has no supervised positions; loss is 0")
        return BatchLoss(torch.zeros((), dtype=model.dtype), 0)

    logits = model(data.images, data.input_ids, data.input_padding, data.decoder_inputs)
    loss = F.cross_entropy(logits[data.mask], data.targets[data.mask], reduction="sum") / num_tokens
    return BatchLoss(loss, num_tokens)


def compute_gradients(batch: Sequence[TrainingSample], model: RelationSequenceModel) -> Dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of compute_loss for every named parameter."""
    model.zero_grad(set_to_none=True)
    result = compute_loss(batch, model)
    if not torch.isfinite(result.loss):
        raise NumericError(f"non-finite loss {result.loss.item()}")
    if result.num_tokens:
        result.loss.backward()

    grads = {}
    for name, param in model.named_parameters():
        grads[name] = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
    model.zero_grad(set_to_none=True)
    return grads


class GradientSample(NamedTuple):
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-12)
        return abs(self.analytic - self.numeric) / scale


def gradient_check(
    batch: Sequence[TrainingSample],
    model: RelationSequenceModel,
    num_params: int = 30,
    step: float = 1e-4,
    seed: int = 0,
) -> List[GradientSample]:
    """Central finite differences at float64 against autograd, on a copy of the model."""
    twin = copy.deepcopy(model).double()
    analytic = compute_gradients(batch, twin)
    named = list(twin.named_parameters())
    generator = torch.Generator().manual_seed(seed)

    results = []
    for _ in range(num_params):
        which = int(torch.randint(len(named), (1,), generator=generator))
        name, param = named[which]
        index = int(torch.randint(param.numel(), (1,), generator=generator))
        flat = param.data.view(-1)
        original = flat[index].item()
        with torch.no_grad():
            flat[index] = original + step
            plus = compute_loss(batch, twin).loss.item()
            flat[index] = original - step
            minus = compute_loss(batch, twin).loss.item()
            flat[index] = original
        results.append(
            GradientSample(name, index, analytic[name].view(-1)[index].item(), (plus - minus) / (2 * step))
        )
    return results


# ============================================================
# Training
# ============================================================

def train(
    dataset: Sequence[TrainingSample],
    config: ModelConfig,
    params: TrainParams,
    split_name: str = "train",
) -> TrainResult:
    """
    Adam over shuffled mini-batches. One writer owns the parameters; shuffling
    is driven by params.seed so identical inputs give identical histories.
    """
    if not dataset:
        raise InputValidationError("training set is empty")

    torch.set_num_threads(params.threads)
    model = init_parameters(config)
    history: List[float] = []
    if params.epochs == 0:
        return TrainResult(model, history)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=params.lr, betas=(params.beta1, params.beta2), eps=params.eps
    )
    generator = torch.Generator().manual_seed(params.seed)
    model.train()

    for epoch in range(params.epochs):
        order = torch.randperm(len(dataset), generator=generator).tolist()
        total, tokens = 0.0, 0
        for start in range(0, len(order), params.batch_size):
            batch = [dataset[i] for i in order[start:start + params.batch_size]]
            result = compute_loss(batch, model)
            if result.num_tokens == 0:
                continue
            if not torch.isfinite(result.loss):
                raise NumericError(
                    f"training diverged at epoch {epoch + 1}, batch {start // params.batch_size}: "
                    f"loss={result.loss.item()}"
                )
            optimizer.zero_grad(set_to_none=True)
            result.loss.backward()
            optimizer.step()
            total += result.loss.item() * result.num_tokens
            tokens += result.num_tokens

        epoch_loss = total / max(tokens, 1)
        history.append(epoch_loss)
        metrics.train_epoch_loss.labels(split=split_name).set(epoch_loss)
        logger.info(f"[{split_name}] epoch {epoch + 1}/{params.epochs} loss={epoch_loss:.4f}")

    model.eval()
    return TrainResult(model, history)


# ============================================================
# Checkpoints & images
# ============================================================

def save_checkpoint(model: RelationSequenceModel, path: str | Path, vocab_sha256: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": model.config.model_dump(),
            "vocab_sha256": vocab_sha256,
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> tuple[RelationSequenceModel, str]:
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise StorageError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    try:
        config = ModelConfig.model_validate(payload["config"])
        model = RelationSequenceModel(config)
        state = payload["state_dict"]
        model.to(next(iter(state.values())).dtype)
        model.load_state_dict(state)
        vocab_sha256 = payload["vocab_sha256"]
    except (KeyError, StopIteration, RuntimeError, ValidationError) as exc:
        raise StorageError(f"checkpoint {path} does not match its config: {exc}") from exc
    model.eval()
    return model, vocab_sha256


def load_image_tensor(path: str | Path, size: int) -> ImageTensor:
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"image not found: {path}")
    with Image.open(path) as handle:
        img = handle.convert("RGB")
    width, height = img.size
    if img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    pixels = np.asarray(img, dtype=np.float32) / 255.0
    return ImageTensor(pixels, width, height)
