# app/services/decoding.py

from __future__ import annotations

import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence

import torch

from app.core.constants import (
    AT_ID,
    EMPTY_PREDICTION_RANK,
    PAD_ID,
    SEP_ID,
    STRATEGY_SINGLE_PASS,
    STRATEGY_TWO_STEP,
)
from app.core.errors import InputValidationError
from app.models.schemas import (
    BoxPixels,
    DecodeConfig,
    ImageRef,
    Prediction,
    PredictionRecord,
    SampleRecord,
)
from app.services.seqmodel import ContextState, ImageTensor, RelationSequenceModel, encode_context
from app.services.tokenizer import Vocabulary, decode_prediction, encode_input
from app.utils import metrics
from app.utils.logger import get_logger

logger = get_logger(__name__)

NEG_INF = float("-inf")

# Maps a batch of same-context prefixes to log-probability rows [n, V].
Scorer = Callable[[Sequence[Sequence[int]]], torch.Tensor]


class ScoredSequence(NamedTuple):
    tokens: tuple[int, ...]
    score: float
    finished: bool = True


class BeamSearchResult(NamedTuple):
    sequences: List[ScoredSequence]  # finished, best first
    shortfall: int                   # K minus number finished
    pending: List[ScoredSequence]    # best unfinished hypotheses when the search stopped


def _rank_key(item: tuple[float, tuple[int, ...]]) -> tuple[float, tuple[int, ...]]:
    score, tokens = item
    return (-score, tokens)


def beam_search(
    scorer: Scorer,
    prefix: Sequence[int],
    k: int,
    end_token: int,
    max_len: int,
) -> BeamSearchResult:
    """
    Width-K beam search over a fixed context.

    - max_len bounds the total sequence length, prefix included
    - a hypothesis is finished the moment it emits end_token
    - ranking: summed log-probability, then the lexicographically smaller ids
    - candidates that hit max_len without end_token are dropped before ranking,
      so with K at least the number of finishable sequences the result is exact
    """
    if k < 1:
        raise InputValidationError(f"beam width must be >= 1, got {k}")
    if max_len <= len(prefix):
        raise InputValidationError(f"max_len {max_len} must exceed prefix length {len(prefix)}")

    live: List[tuple[float, tuple[int, ...]]] = [(0.0, tuple(prefix))]
    finished: List[tuple[float, tuple[int, ...]]] = []
    truncated: List[tuple[float, tuple[int, ...]]] = []

    while live:
        rows = scorer([tokens for _, tokens in live]).tolist()
        candidates = []
        for (score, tokens), row in zip(live, rows):
            at_limit = len(tokens) + 1 >= max_len
            for token, logp in enumerate(row):
                if logp == NEG_INF:
                    continue
                extended = (score + logp, tokens + (token,))
                if at_limit and token != end_token:
                    truncated.append(extended)
                    continue
                candidates.append(extended)

        candidates.sort(key=_rank_key)
        live = []
        for score, tokens in candidates[:k]:
            if tokens[-1] == end_token:
                finished.append((score, tokens))
            else:
                live.append((score, tokens))

        if len(finished) >= k and live:
            finished.sort(key=_rank_key)
            if live[0][0] < finished[k - 1][0]:
                truncated.extend(live)
                break

    finished.sort(key=_rank_key)
    truncated.sort(key=_rank_key)
    sequences = [ScoredSequence(tokens, score) for score, tokens in finished[:k]]
    pending = [ScoredSequence(tokens, score, False) for score, tokens in truncated[:k]]
    return BeamSearchResult(sequences, max(0, k - len(sequences)), pending)


class ModelScorer:
    """Binds a trained model to one fused context z for beam_search."""

    def __init__(self, model: RelationSequenceModel, context: ContextState) -> None:
        self.model = model
        self.context = context

    @torch.no_grad()
    def __call__(self, prefixes: Sequence[Sequence[int]]) -> torch.Tensor:
        count = len(prefixes)
        lengths = torch.tensor([len(p) for p in prefixes], dtype=torch.long)
        width = int(lengths.max()) if count else 0
        if width >= self.model.config.max_target_len:
            raise InputValidationError(f"prefix length {width} exceeds the decoder window")

        ids = torch.full((count, width), PAD_ID, dtype=torch.long)
        for row, prefix in enumerate(prefixes):
            if prefix:
                ids[row, : len(prefix)] = torch.tensor(list(prefix), dtype=torch.long)

        z = self.context.z[None].expand(count, -1, -1)
        padding = None
        if self.context.padding is not None:
            padding = self.context.padding[None].expand(count, -1)
        logits = self.model.decode(z, padding, ids)
        rows = logits[torch.arange(count), lengths]
        return torch.log_softmax(rows.double(), dim=-1)


# ============================================================
# Two-step and single-pass decoding
# ============================================================

def _prediction(tokens: Sequence[int], score: float, img: ImageTensor, vocab: Vocabulary) -> Prediction:
    decoded = decode_prediction(tokens, img.width, img.height, vocab)
    return Prediction(
        relation=decoded.relation,
        object=decoded.object,
        box=decoded.box,
        score=score,
        well_formed=decoded.well_formed,
    )


def _scorer_for(
    img: ImageTensor,
    subject: str,
    subject_box: BoxPixels,
    model: RelationSequenceModel,
    vocab: Vocabulary,
) -> ModelScorer:
    input_ids = encode_input(subject, subject_box, img.width, img.height, vocab)
    return ModelScorer(model, encode_context(img, input_ids, model))


def two_step_decode(
    img: ImageTensor,
    subject: str,
    subject_box: BoxPixels,
    k: int,
    model: RelationSequenceModel,
    vocab: Vocabulary,
    config: Optional[DecodeConfig] = None,
) -> List[Prediction]:
    """
    Step 1: width-K search to [@] gives K distinct relation-object prefixes.
    Step 2: width-1 search to [SEP] completes each prefix with a box.
    Predictions are ranked (and scored) by their step-1 prefix.
    """
    config = config or DecodeConfig(k=k)
    scorer = _scorer_for(img, subject, subject_box, model, vocab)
    window = model.config.max_target_len

    step1 = beam_search(scorer, [], k, AT_ID, min(config.max_len_pair, window))
    if step1.shortfall:
        logger.warning(f"two-step: only {len(step1.sequences)}/{k} prefixes reached [@] for '{subject}'")

    predictions = []
    for hyp in step1.sequences:
        tokens = hyp.tokens
        box_len = min(len(tokens) + config.max_len_box, window)
        if box_len > len(tokens):
            step2 = beam_search(scorer, tokens, 1, SEP_ID, box_len)
            best = step2.sequences or step2.pending
            if best:
                tokens = best[0].tokens
        predictions.append(_prediction(tokens, hyp.score, img, vocab))
    return predictions


def single_pass_decode(
    img: ImageTensor,
    subject: str,
    subject_box: BoxPixels,
    k: int,
    model: RelationSequenceModel,
    vocab: Vocabulary,
    config: Optional[DecodeConfig] = None,
) -> List[Prediction]:
    """One width-K search straight to [SEP]; the diversity baseline."""
    config = config or DecodeConfig(k=k)
    scorer = _scorer_for(img, subject, subject_box, model, vocab)
    max_len = min(config.max_len_pair + config.max_len_box, model.config.max_target_len)

    result = beam_search(scorer, [], k, SEP_ID, max_len)
    if result.shortfall:
        logger.warning(f"single-pass: only {len(result.sequences)}/{k} sequences reached [SEP] for '{subject}'")
    return [_prediction(hyp.tokens, hyp.score, img, vocab) for hyp in result.sequences]


DECODERS = {
    STRATEGY_TWO_STEP: two_step_decode,
    STRATEGY_SINGLE_PASS: single_pass_decode,
}


def decode_records(
    records: Sequence[SampleRecord],
    model: RelationSequenceModel,
    vocab: Vocabulary,
    load_image: Callable[[ImageRef], ImageTensor],
    config: DecodeConfig,
    jobs: int = 1,
) -> Dict[str, List[Prediction]]:
    """
    Decodes every record; records sharing (image, subject, subject box) share
    one decode. Output order is by sample id whatever the worker count.
    """
    decoder = DECODERS.get(config.strategy)
    if decoder is None:
        raise InputValidationError(f"unknown decoding strategy '{config.strategy}'")

    groups: Dict[tuple, List[SampleRecord]] = defaultdict(list)
    for record in records:
        groups[record.input_key].append(record)
    ordered = sorted(groups.values(), key=lambda members: min(r.id for r in members))

    def run(members: List[SampleRecord]) -> List[Prediction]:
        first = members[0]
        return decoder(load_image(first.image), first.subject, first.subject_box, config.k, model, vocab, config)

    started = time.perf_counter()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(run, ordered))
    else:
        outputs = [run(members) for members in ordered]
    elapsed = time.perf_counter() - started

    predictions = {}
    for members, preds in zip(ordered, outputs):
        for record in members:
            predictions[record.id] = preds

    metrics.decode_latency.labels(strategy=config.strategy).set(elapsed)
    metrics.decoded_samples.labels(strategy=config.strategy).inc(len(ordered))
    logger.info(
        f"Decoded {len(records)} samples ({len(ordered)} distinct inputs) "
        f"with {config.strategy}, K={config.k} in {elapsed:.1f}s"
    )
    return dict(sorted(predictions.items()))


def distinct_pair_count(predictions: Iterable[Prediction]) -> int:
    return len({(p.relation, p.object) for p in predictions})


# ============================================================
# Prediction rows
# ============================================================

def to_prediction_records(predictions: Dict[str, List[Prediction]]) -> List[PredictionRecord]:
    rows = []
    for sample_id in sorted(predictions):
        preds = predictions[sample_id]
        if not preds:
            rows.append(
                PredictionRecord(
                    sample_id=sample_id,
                    rank=EMPTY_PREDICTION_RANK,
                    relation="",
                    object="",
                    score=0.0,
                    well_formed=False,
                )
            )
            continue
        for rank, pred in enumerate(preds):
            rows.append(
                PredictionRecord(
                    sample_id=sample_id,
                    rank=rank,
                    relation=pred.relation,
                    object=pred.object,
                    box=pred.box.as_list() if pred.box is not None else None,
                    score=pred.score,
                    well_formed=pred.well_formed,
                )
            )
    return rows


def from_prediction_records(rows: Iterable[PredictionRecord]) -> Dict[str, List[Prediction]]:
    grouped: Dict[str, List[PredictionRecord]] = {}
    for row in rows:
        members = grouped.setdefault(row.sample_id, [])
        if row.rank != EMPTY_PREDICTION_RANK:
            members.append(row)
    return {
        sample_id: [row.to_prediction() for row in sorted(members, key=lambda r: r.rank)]
        for sample_id, members in sorted(grouped.items())
    }
