# app/services/pipeline_service.py

from __future__ import annotations

import json
import statistics
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional

import torch

from app.core.config import derive_seed
from app.core.constants import (
    AUGMENT_IN_DOMAIN,
    EMPTY_PREDICTION_RANK,
    SPLIT_FULL_TEST,
    SPLIT_TEST_A,
    SPLIT_TEST_B,
    STRATEGY_SINGLE_PASS,
    STRATEGY_TWO_STEP,
    TEST_SPLITS,
    TRAIN_SPLITS,
)
from app.core.errors import ConfigError, InputValidationError, StorageError
from app.models.schemas import (
    BenchmarkSplits,
    DecodeConfig,
    EvalConfig,
    Prediction,
    RunConfig,
    SampleRecord,
    Triplet,
    TripletRecord,
)
from app.services import corpus
from app.services.decoding import (
    decode_records,
    distinct_pair_count,
    from_prediction_records,
    to_prediction_records,
)
from app.services.evaluation import (
    EvalReport,
    evaluate_recall,
    load_synonym_map,
    write_report,
)
from app.services.record_store import RecordStore
from app.services.seqmodel import (
    RelationSequenceModel,
    TrainingSample,
    load_checkpoint,
    save_checkpoint,
    train,
)
from app.services.synthetic import SYNTHETIC_SYNONYMS, SyntheticSceneGenerator, synthetic_lexicon
from app.services.tokenizer import Vocabulary, build_vocabulary, encode_sample
from app.utils.logger import get_logger

logger = get_logger(__name__)

GROUNDED_FILE = "records/grounded.jsonl"
UNGROUNDED_FILE = "records/ungrounded.jsonl"
TEST_POOL_FILE = "records/test_pool.jsonl"
CAPTIONS_FILE = "records/captions.jsonl"
TRIPLETS_FILE = "records/triplets.jsonl"
LEXICON_FILE = "lexicon.txt"
SYNONYMS_FILE = "synonyms.txt"
VOCAB_FILE = "vocab.txt"


class ExperimentRow(NamedTuple):
    seed: int
    model: str
    split: str
    rel_object_recall: float
    object_loc_recall: float


class PipelineService:
    """
    Pipeline coordinator: one method per CLI stage.

    Responsibilities:
    - resolve artifact paths inside the run directory
    - hand each stage its named sub-seed
    - call the pure services and persist their outputs via RecordStore

    RULES:
    - NO algorithmic logic here
    - inputs are read, never rewritten
    """

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.paths = config.paths
        self.store = RecordStore(self.paths.workdir, config.model.image_size)

    # -----------------------------
    # Paths & seeds
    # -----------------------------
    def _file(self, configured: Optional[str], default: str) -> str:
        return configured or default

    def seed_for(self, stage: str) -> int:
        return derive_seed(self.config.seed, stage)

    def checkpoint_path(self, model: str) -> Path:
        if model.endswith(".pt"):
            return self.store.path(model)
        return self.store.path(f"checkpoints/{model}.pt")

    def predictions_path(self, model: str, strategy: str = STRATEGY_TWO_STEP) -> Path:
        stem = Path(model).stem
        suffix = "" if strategy == STRATEGY_TWO_STEP else f".{strategy}"
        return self.store.path(f"predictions/{stem}{suffix}.jsonl")

    def load_vocabulary(self) -> Vocabulary:
        return Vocabulary.load(self.store.path(self._file(self.paths.vocabulary, VOCAB_FILE)))

    # -----------------------------
    # gen-synthetic
    # -----------------------------
    def gen_synthetic(self) -> Dict[str, int]:
        spec = self.config.synthetic
        generator = SyntheticSceneGenerator(spec)
        train_world = generator.generate(spec.num_scenes, self.seed_for("synthetic.train"), prefix="train")
        test_world = generator.generate(
            spec.test_scenes, self.seed_for("synthetic.test"), prefix="test", grounded_fraction=1.0
        )

        self.store.write_images({**train_world.images, **test_world.images})
        self.store.write_jsonl(self._file(self.paths.grounded, GROUNDED_FILE), train_world.grounded)
        self.store.write_jsonl(self._file(self.paths.ungrounded, UNGROUNDED_FILE), train_world.ungrounded)
        self.store.write_jsonl(self._file(self.paths.test_pool, TEST_POOL_FILE), test_world.index.records())
        self.store.write_jsonl(self._file(self.paths.captions, CAPTIONS_FILE), train_world.captions)
        self.store.write_text(
            self._file(self.paths.lexicon, LEXICON_FILE), corpus.render_lexicon(synthetic_lexicon())
        )
        self.store.write_text(
            self._file(self.paths.synonyms, SYNONYMS_FILE),
            "".join(",".join(group) + "\n" for group in SYNTHETIC_SYNONYMS),
        )
        return {
            "images": len(train_world.images) + len(test_world.images),
            "grounded": len(train_world.grounded),
            "ungrounded": len(train_world.ungrounded),
            "test_pool": len(test_world.index),
            "captions": len(train_world.captions),
        }

    # -----------------------------
    # extract-triplets
    # -----------------------------
    def extract_triplets(self) -> Dict[str, int]:
        lex = corpus.load_lexicon(self.store.path(self._file(self.paths.lexicon, LEXICON_FILE)))
        captions = self.store.read_captions(self._file(self.paths.captions, CAPTIONS_FILE))
        rows = []
        unmatched = 0
        for caption in captions:
            triplets = corpus.extract_triplets(caption.caption, lex)
            unmatched += not triplets
            rows.extend(
                TripletRecord(caption_id=caption.id, subject=t.subject, relation=t.relation, object=t.object)
                for t in triplets
            )
        self.store.write_jsonl(TRIPLETS_FILE, rows)
        logger.info(f"Extracted {len(rows)} triplets from {len(captions)} captions ({unmatched} unmatched)")
        return {"captions": len(captions), "triplets": len(rows), "unmatched": unmatched}

    def _caption_triplets(self) -> List[Triplet]:
        if not self.store.exists(TRIPLETS_FILE):
            logger.warning(f"{TRIPLETS_FILE} missing; pair statistics use grounded records only")
            return []
        return [Triplet(r.subject, r.relation, r.object) for r in self.store.read_triplets(TRIPLETS_FILE)]

    # -----------------------------
    # build-splits
    # -----------------------------
    def build_splits(self) -> BenchmarkSplits:
        grounded = self.store.read_records(self._file(self.paths.grounded, GROUNDED_FILE))
        ungrounded = self.store.read_records(self._file(self.paths.ungrounded, UNGROUNDED_FILE))
        test_pool = self.store.read_records(self._file(self.paths.test_pool, TEST_POOL_FILE))

        spec = self.config.split.model_copy(update={"seed": self.seed_for("split")})
        counts = corpus.build_pair_statistics(grounded, self._caption_triplets(), spec.window)
        test_pairs = {r.pair for r in test_pool}
        # candidates also need text records to augment from
        text_pairs = {r.pair for r in (grounded if spec.augment_source == AUGMENT_IN_DOMAIN else ungrounded)}
        candidates = sorted(pair for pair in counts if pair in test_pairs and pair in text_pairs)
        logger.info(f"{len(candidates)} windowed pairs appear in the test pool and in text records")

        set_a, set_b = corpus.partition_rel_obj_sets(candidates, self.seed_for("partition"), spec.num_pairs)
        splits = corpus.build_splits(grounded, ungrounded, spec, set_a, set_b, test_pool)

        if spec.augment_source == AUGMENT_IN_DOMAIN:
            base_ids = {r.id for r in splits.base_train}
            held_out = [r for r in grounded if r.id not in base_ids and r.pair in set_a | set_b]
            pool = corpus.strip_object_boxes(held_out)
        else:
            pool = ungrounded
        problems = corpus.audit_splits(splits, grounded, pool, spec.removal_fraction)
        if problems:
            raise InputValidationError(f"split audit failed: {'; '.join(problems[:3])}")

        self.store.write_splits(splits)
        vocab = build_vocabulary(splits.text_aug_train, self.config.position_tokens)
        vocab.save(self.store.path(self._file(self.paths.vocabulary, VOCAB_FILE)))
        return splits

    # -----------------------------
    # train
    # -----------------------------
    def training_samples(self, records: List[SampleRecord], vocab: Vocabulary) -> List[TrainingSample]:
        return [TrainingSample(self.store.load_image(r.image), encode_sample(r, vocab)) for r in records]

    def train(self, split: str) -> tuple[RelationSequenceModel, List[float]]:
        if split not in TRAIN_SPLITS:
            raise ConfigError(f"unknown training split '{split}'; choose from {sorted(TRAIN_SPLITS)}")
        splits = self.store.read_splits()
        vocab = self.load_vocabulary()
        dataset = self.training_samples(splits.by_name(TRAIN_SPLITS[split]), vocab)

        model_config = self.config.model.model_copy(
            update={
                **vocab.layout(),
                "seed": self.seed_for("init"),
            }
        )
        params = self.config.train.model_copy(update={"seed": self.seed_for("train")})
        logger.info(f"Training '{split}' on {len(dataset)} samples, vocabulary of {len(vocab)} ids")
        result = train(dataset, model_config, params, split_name=split)

        save_checkpoint(result.model, self.checkpoint_path(split), vocab.sha256())
        self.store.write_text(
            f"checkpoints/{split}.history.json", json.dumps({"loss": result.loss_history}, indent=2) + "\n"
        )
        return result.model, result.loss_history

    # -----------------------------
    # predict
    # -----------------------------
    def load_model(self, model: str, vocab: Vocabulary) -> RelationSequenceModel:
        network, vocab_hash = load_checkpoint(self.checkpoint_path(model))
        if vocab_hash != vocab.sha256():
            raise StorageError(f"checkpoint '{model}' was trained against a different vocabulary")
        return network

    def predict(
        self,
        model: str,
        k: Optional[int] = None,
        strategy: Optional[str] = None,
        out: Optional[str] = None,
        split: str = SPLIT_FULL_TEST,
    ) -> Dict[str, List[Prediction]]:
        overrides = {key: value for key, value in (("k", k), ("strategy", strategy)) if value is not None}
        decode = DecodeConfig.model_validate({**self.config.decode.model_dump(), **overrides})
        vocab = self.load_vocabulary()
        network = self.load_model(model, vocab)
        records = self.store.read_splits().by_name(split)

        torch.set_num_threads(self.config.train.threads)
        predictions = decode_records(records, network, vocab, self.store.load_image, decode, jobs=self.config.jobs)
        path = self.store.path(out) if out else self.predictions_path(model, decode.strategy)
        self.store.write_jsonl(path, to_prediction_records(predictions))
        logger.info(f"Predictions written: {path}")
        return predictions

    # -----------------------------
    # evaluate
    # -----------------------------
    def evaluate(
        self,
        model: str,
        predictions_file: Optional[str] = None,
        out: Optional[str] = None,
        allow_partial: bool = False,
    ) -> EvalReport:
        path = predictions_file or self.predictions_path(model)
        predictions = from_prediction_records(self.store.read_predictions(path))
        splits = self.store.read_splits()
        gt = splits.full_test

        gt_ids = {r.id for r in gt}
        unmatched = len(gt_ids.symmetric_difference(predictions))
        if unmatched and not allow_partial:
            raise InputValidationError(
                f"{unmatched} unmatched sample ids between {path} and {SPLIT_FULL_TEST}"
            )

        syn = load_synonym_map(self.store.path(self._file(self.paths.synonyms, SYNONYMS_FILE)))
        report = EvalReport()
        for split in TEST_SPLITS:
            report.merge(
                evaluate_recall(
                    predictions,
                    splits.by_name(split),
                    self.config.eval.ks,
                    self.config.eval.iou_thresholds,
                    syn,
                    split=split,
                )
            )
        write_report(report, self.store.path(out or f"reports/{Path(model).stem}"))
        return report

    # -----------------------------
    # inspect
    # -----------------------------
    def inspect(self, path: str) -> List[str]:
        rows = self.store.read_raw_jsonl(path)
        if rows and "rank" in rows[0]:
            rows.sort(key=lambda r: (r["sample_id"], r["rank"]))
            lines = []
            for row in rows:
                if row["rank"] == EMPTY_PREDICTION_RANK:
                    lines.append(f"{row['sample_id']}  (no predictions)")
                    continue
                box = "-" if row.get("box") is None else "[" + ", ".join(f"{v:.1f}" for v in row["box"]) + "]"
                flag = "" if row["well_formed"] else "  malformed"
                lines.append(
                    f"{row['sample_id']}  #{row['rank'] + 1}  {row['relation']} | {row['object']}  "
                    f"box={box}  score={row['score']:.3f}{flag}"
                )
            return lines
        return [json.dumps(row, sort_keys=True) for row in rows]

    # -----------------------------
    # experiment
    # -----------------------------
    def experiment(self) -> str:
        """
        Per seed: fresh synthetic world, splits, base and text-augmented
        models, two-step and single-pass decoding. Writes a comparison table.
        """
        settings = self.config.experiment
        k = settings.k
        threshold = max(self.config.eval.iou_thresholds)
        eval_config = EvalConfig(
            ks=sorted({*self.config.eval.ks, k}),
            iou_thresholds=self.config.eval.iou_thresholds,
        )
        depth = max(*eval_config.ks, settings.diversity_k)

        rows: List[ExperimentRow] = []
        diversity: Dict[str, List[float]] = {STRATEGY_TWO_STEP: [], STRATEGY_SINGLE_PASS: []}
        for seed in settings.seeds:
            workdir = str(Path(self.paths.workdir) / f"seed-{seed}")
            run = PipelineService(
                self.config.model_copy(
                    update={
                        "seed": seed,
                        "eval": eval_config,
                        "paths": self.paths.model_copy(update={"workdir": workdir}),
                    }
                )
            )
            run.gen_synthetic()
            run.extract_triplets()
            run.build_splits()
            for model in TRAIN_SPLITS:
                run.train(model)
                two_step = run.predict(model, k=depth, strategy=STRATEGY_TWO_STEP)
                report = run.evaluate(model)
                for split in (SPLIT_TEST_A, SPLIT_TEST_B):
                    cell = report.row(split, k, threshold)
                    rows.append(ExperimentRow(seed, model, split, cell.rel_object_recall, cell.object_loc_recall))

            single = run.predict("text_aug", k=settings.diversity_k, strategy=STRATEGY_SINGLE_PASS)
            diversity[STRATEGY_TWO_STEP].append(_mean_distinct(two_step, settings.diversity_k))
            diversity[STRATEGY_SINGLE_PASS].append(_mean_distinct(single, settings.diversity_k))

        text = _experiment_table(rows, diversity, k, threshold, settings.diversity_k)
        self.store.write_text("reports/experiment.txt", text)
        summary = {"rows": [row._asdict() for row in rows], "distinct_pairs": diversity}
        self.store.write_text("reports/experiment.json", json.dumps(summary, indent=2) + "\n")
        return text


def _mean_distinct(predictions: Dict[str, List[Prediction]], k: int) -> float:
    counts = [distinct_pair_count(preds[:k]) for preds in predictions.values()]
    return statistics.fmean(counts) if counts else 0.0


def _experiment_table(
    rows: List[ExperimentRow],
    diversity: Dict[str, List[float]],
    k: int,
    threshold: float,
    diversity_k: int,
) -> str:
    lines = [f"Rel-Object / Object-Loc R@{k} (IoU {threshold:.2f}), percent"]
    lines.append(f"{'seed':>6}  {'model':<9}  {'split':<7}  {'Rel-Object':>10}  {'Object-Loc':>10}")
    for row in rows:
        lines.append(
            f"{row.seed:>6}  {row.model:<9}  {row.split:<7}  "
            f"{100 * row.rel_object_recall:>10.2f}  {100 * row.object_loc_recall:>10.2f}"
        )
    for model in TRAIN_SPLITS:
        for split in (SPLIT_TEST_A, SPLIT_TEST_B):
            cells = [r for r in rows if r.model == model and r.split == split]
            if cells:
                lines.append(
                    f"{'mean':>6}  {model:<9}  {split:<7}  "
                    f"{100 * statistics.fmean(r.rel_object_recall for r in cells):>10.2f}  "
                    f"{100 * statistics.fmean(r.object_loc_recall for r in cells):>10.2f}"
                )
    lines.append("")
    lines.append(f"Mean distinct relation-object pairs among K={diversity_k} outputs (text_aug model)")
    for strategy, values in diversity.items():
        mean = statistics.fmean(values) if values else 0.0
        lines.append(f"  {strategy:<12} {mean:.3f}")
    return "\n".join(lines) + "\n"
