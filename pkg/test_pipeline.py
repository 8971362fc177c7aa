import contextlib
import io
import json
import os
import sys
import tempfile

# Add project root to path
sys.path.append(os.getcwd())

import numpy as np
import pytest

from app.core.config import derive_seed, load_run_config
from app.core.constants import EXIT_FAILURE, EXIT_OK, EXIT_USAGE
from app.core.errors import ConfigError
from app.main import dispatch
from app.models.schemas import ImageRef
from app.services.record_store import RecordStore

TINY_CONFIG = """
seed=5
log_level=WARNING
position_tokens=20

synthetic.num_scenes=30
synthetic.test_scenes=10
synthetic.image_size=32
synthetic.max_objects=3

model.hidden_dim=16
model.num_heads=2
model.vision_layers=1
model.text_layers=1
model.fusion_layers=1
model.decoder_layers=1
model.image_size=16
model.patch_size=8

train.epochs=2
train.batch_size=8

decode.k=2
eval.ks=1,2
eval.iou_thresholds=0.5
"""


def write_config(directory, **extra):
    body = TINY_CONFIG + f"paths.workdir={os.path.join(directory, 'run')}\n"
    body += "".join(f"{key}={value}\n" for key, value in extra.items())
    path = os.path.join(directory, "run.env")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(body)
    return path


def run_cli(*argv):
    out = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(io.StringIO()):
        code = dispatch(list(argv))
    return code, out.getvalue()


PREPARED = None


def prepared_run():
    """gen-synthetic -> extract-triplets -> build-splits -> train -> predict, once per session."""
    global PREPARED
    if PREPARED is None:
        directory = tempfile.mkdtemp(prefix="scord-test-")
        config = write_config(directory)
        for argv in (
            ["gen-synthetic"],
            ["extract-triplets"],
            ["build-splits"],
            ["train", "--split", "text_aug"],
            ["predict", "--model", "text_aug"],
        ):
            code, output = run_cli(*argv, "--config", config)
            assert code == EXIT_OK, (argv, output)
        PREPARED = (config, os.path.join(directory, "run"))
    return PREPARED


# ============================================================
# Configuration
# ============================================================

def test_run_config_layers_file_and_overrides():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_config(tmp)
        config = load_run_config(path, {"decode.k": 4, "seed": None})
    assert config.seed == 5 and config.decode.k == 4
    assert config.model.hidden_dim == 16 and config.eval.ks == [1, 2]
    assert config.eval.iou_thresholds == [0.5]


def test_invalid_config_values_are_config_errors():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_config(tmp, **{"train.epochs": "-1"})
        with pytest.raises(ConfigError):
            load_run_config(path)
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/run.env")


def test_stage_seeds_are_stable_and_distinct():
    assert derive_seed(7, "split") == derive_seed(7, "split")
    assert derive_seed(7, "split") != derive_seed(7, "partition")
    assert derive_seed(7, "split") != derive_seed(8, "split")


# ============================================================
# CLI
# ============================================================

def test_usage_errors_exit_with_two():
    assert run_cli("fly")[0] == EXIT_USAGE
    assert run_cli()[0] == EXIT_USAGE
    assert run_cli("train", "--split", "nowhere")[0] == EXIT_USAGE
    assert run_cli("--help")[0] == EXIT_OK


def test_missing_inputs_exit_with_one():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        assert run_cli("train", "--config", config)[0] == EXIT_FAILURE
        assert run_cli("build-splits", "--config", config)[0] == EXIT_FAILURE
    assert run_cli("gen-synthetic", "--config", "/nonexistent/run.env")[0] == EXIT_FAILURE


def test_corrupt_split_file_exits_with_one():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        for argv in (["gen-synthetic"], ["extract-triplets"], ["build-splits"]):
            assert run_cli(*argv, "--config", config)[0] == EXIT_OK
        sets_path = os.path.join(tmp, "run", "splits", "sets.json")

        with open(sets_path, "w", encoding="utf-8") as handle:
            handle.write("{not json")
        assert run_cli("train", "--config", config)[0] == EXIT_FAILURE

        with open(sets_path, "w", encoding="utf-8") as handle:
            json.dump({"set_a": []}, handle)
        assert run_cli("train", "--config", config)[0] == EXIT_FAILURE


def test_pipeline_artifacts():
    _, workdir = prepared_run()
    for name in (
        "images/manifest.jsonl",
        "records/grounded.jsonl",
        "records/triplets.jsonl",
        "splits/sets.json",
        "splits/full_test.jsonl",
        "vocab.txt",
        "vocab.txt.objects",
        "checkpoints/text_aug.pt",
        "checkpoints/text_aug.history.json",
        "predictions/text_aug.jsonl",
    ):
        assert os.path.isfile(os.path.join(workdir, name)), name

    with open(os.path.join(workdir, "splits", "sets.json"), encoding="utf-8") as handle:
        sets = json.load(handle)
    a, b = {tuple(p) for p in sets["set_a"]}, {tuple(p) for p in sets["set_b"]}
    assert a and b and not a & b

    with open(os.path.join(workdir, "checkpoints", "text_aug.history.json"), encoding="utf-8") as handle:
        assert len(json.load(handle)["loss"]) == 2


def read_pairs(path):
    with open(path, encoding="utf-8") as handle:
        return {(row["relation"], row["object"]) for row in map(json.loads, handle)}


def test_held_out_pairs_have_text_records_and_respect_the_cap():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp, **{"split.num_pairs": "4"})
        for argv in (["gen-synthetic"], ["extract-triplets"], ["build-splits"]):
            assert run_cli(*argv, "--config", config)[0] == EXIT_OK
        workdir = os.path.join(tmp, "run")
        with open(os.path.join(workdir, "splits", "sets.json"), encoding="utf-8") as handle:
            sets = json.load(handle)
        ungrounded = read_pairs(os.path.join(workdir, "records", "ungrounded.jsonl"))
        base_train = read_pairs(os.path.join(workdir, "splits", "base_train.jsonl"))

    a, b = {tuple(p) for p in sets["set_a"]}, {tuple(p) for p in sets["set_b"]}
    assert len(a) == 2 and len(b) == 2
    assert a | b <= ungrounded
    assert not b & base_train


def test_evaluate_writes_a_report():
    config, workdir = prepared_run()
    code, output = run_cli("evaluate", "--model", "text_aug", "--config", config)
    assert code == EXIT_OK
    assert output.splitlines()[0].split() == ["split", "K", "IoU", "Rel-Object", "Object-Loc", "n"]
    for suffix in (".txt", ".jsonl", ".pairs.jsonl"):
        assert os.path.isfile(os.path.join(workdir, "reports", f"text_aug{suffix}"))

    with open(os.path.join(workdir, "reports", "text_aug.jsonl"), encoding="utf-8") as handle:
        rows = [json.loads(line) for line in handle]
    assert {row["split"] for row in rows} == {"test_a", "test_b", "full_test"}
    assert {row["K"] for row in rows} == {1, 2}


def test_mismatched_prediction_ids_fail_unless_partial():
    config, workdir = prepared_run()
    source = os.path.join(workdir, "predictions", "text_aug.jsonl")
    with open(source, encoding="utf-8") as handle:
        first = handle.readline()
    partial = os.path.join(workdir, "predictions", "partial.jsonl")
    with open(partial, "w", encoding="utf-8") as handle:
        handle.write(first)

    assert run_cli("evaluate", "--predictions", partial, "--config", config)[0] == EXIT_FAILURE
    code, _ = run_cli(
        "evaluate", "--predictions", partial, "--allow-partial", "--out", "reports/partial", "--config", config
    )
    assert code == EXIT_OK
    assert os.path.isfile(os.path.join(workdir, "reports", "partial.txt"))


def test_single_pass_predictions_use_their_own_file():
    config, workdir = prepared_run()
    code, _ = run_cli("predict", "--model", "text_aug", "--strategy", "single_pass", "--k", "2", "--config", config)
    assert code == EXIT_OK
    assert os.path.isfile(os.path.join(workdir, "predictions", "text_aug.single_pass.jsonl"))


def test_inspect_renders_predictions_and_records():
    config, workdir = prepared_run()
    code, output = run_cli("inspect", os.path.join(workdir, "predictions", "text_aug.jsonl"), "--config", config)
    assert code == EXIT_OK
    lines = output.splitlines()
    assert lines and all(" #" in line or "(no predictions)" in line for line in lines)

    code, output = run_cli("inspect", os.path.join(workdir, "splits", "test_a.jsonl"), "--config", config)
    assert code == EXIT_OK
    assert all(json.loads(line)["grounded"] for line in output.splitlines())

    assert run_cli("inspect", os.path.join(workdir, "missing.jsonl"), "--config", config)[0] == EXIT_FAILURE


def test_experiment_compares_models_per_seed():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp, **{"experiment.k": "2", "experiment.diversity_k": "2"})
        code, output = run_cli("experiment", "--seeds", "1", "--config", config)
        assert code == EXIT_OK, output
        assert "text_aug" in output and "single_pass" in output

        workdir = os.path.join(tmp, "run")
        assert os.path.isfile(os.path.join(workdir, "reports", "experiment.txt"))
        assert os.path.isfile(os.path.join(workdir, "seed-1", "checkpoints", "base.pt"))
        with open(os.path.join(workdir, "reports", "experiment.json"), encoding="utf-8") as handle:
            summary = json.load(handle)
    assert {(row["model"], row["split"]) for row in summary["rows"]} == {
        (model, split) for model in ("base", "text_aug") for split in ("test_a", "test_b")
    }
    for values in summary["distinct_pairs"].values():
        assert len(values) == 1 and 0.0 <= values[0] <= 2.0


# ============================================================
# Storage
# ============================================================

def test_image_cache_keeps_the_most_recent_images():
    with tempfile.TemporaryDirectory() as tmp:
        store = RecordStore(tmp, 8, cache_size=2)
        refs = {}
        for name, shade in (("a", 0), ("b", 120), ("c", 250)):
            store.write_image(f"images/{name}.ppm", np.full((12, 12, 3), shade, dtype=np.uint8))
            refs[name] = ImageRef(kind="synthetic", ref=f"images/{name}.ppm", width=12, height=12)

        first_b = store.load_image(refs["b"])
        store.load_image(refs["a"])
        assert store.load_image(refs["b"]) is first_b
        store.load_image(refs["c"])
        assert list(store._images) == ["images/b.ppm", "images/c.ppm"]
        assert np.allclose(store.load_image(refs["a"]).pixels, 0.0)
        assert list(store._images) == ["images/c.ppm", "images/a.ppm"]

        uncached = RecordStore(tmp, 8, cache_size=0)
        uncached.load_image(refs["a"])
        assert not uncached._images


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    for name, fn in tests:
        fn()
        print(f"PASS {name}")
