from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

import engine_scenario as scenario
from conftest import make_sample, rect_mask
from promptseg.cli import dispatch
from promptseg.core import DatasetManifest, load_manifest, save_manifest
from promptseg.maskops import rle_encode
from promptseg.synthdata import generate_pairs, pairs_manifest


def write_engine_fixtures(tmp_path: Path) -> tuple[Path, Path]:
    """Materialize the scenario as on-disk fixtures for --fixtures mode."""
    img_dir = tmp_path / "images"
    img_dir.mkdir()
    records, pixels = scenario.build_images(img_dir)
    fixtures = tmp_path / "fixtures"
    (fixtures / "vlm").mkdir(parents=True)
    (fixtures / "detector").mkdir()
    (fixtures / "segmenter").mkdir()
    rules = [
        {"contains": list(r.needles) if len(r.needles) > 1 else r.needles[0], "text": r.text,
         **({"image_key": r.image_key} if r.image_key else {})}
        for r in scenario.vlm_rules(pixels)
    ]
    (fixtures / "vlm" / "rules.json").write_text(json.dumps(rules, indent=2))
    (fixtures / "detector" / "table.json").write_text(json.dumps(scenario.detector_table(), indent=2))
    (fixtures / "segmenter" / "mode.json").write_text(json.dumps({"box_mode": "box_fill"}))
    return img_dir, fixtures


def test_engine_run_happy_path(tmp_path, capsys):
    img_dir, fixtures = write_engine_fixtures(tmp_path)
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"engine": {"concepts": ["entities", "physics_safety"]}}))
    out = tmp_path / "out"
    code = dispatch([
        "--config", str(config), "engine", "run",
        "--images", str(img_dir), "--out", str(out), "--fixtures", str(fixtures),
    ])
    assert code == 0
    assert (out / "manifest.jsonl").is_file()
    assert (out / "audit.jsonl").is_file()
    assert (out / "resolved_config.json").is_file()
    manifest = load_manifest(out / "manifest.jsonl")
    assert len(manifest) == 6
    summary = json.loads(capsys.readouterr().out)
    assert summary["samples"] == 6


def test_engine_resume_requires_cache(tmp_path):
    img_dir, fixtures = write_engine_fixtures(tmp_path)
    code = dispatch([
        "engine", "resume", "--images", str(img_dir),
        "--out", str(tmp_path / "fresh_out"), "--fixtures", str(fixtures),
    ])
    assert code == 2


def test_engine_resume_after_run(tmp_path):
    img_dir, fixtures = write_engine_fixtures(tmp_path)
    out = tmp_path / "out"
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"engine": {"concepts": ["entities"]}}))
    args = ["--config", str(config)]
    assert dispatch(args + ["engine", "run", "--images", str(img_dir), "--out", str(out), "--fixtures", str(fixtures)]) == 0
    first = (out / "manifest.jsonl").read_bytes()
    assert dispatch(args + ["engine", "resume", "--images", str(img_dir), "--out", str(out), "--fixtures", str(fixtures)]) == 0
    assert (out / "manifest.jsonl").read_bytes() == first


def test_dataset_stats(tmp_path, capsys):
    manifest = DatasetManifest(samples=[make_sample("a", prompt="one two three"), make_sample("b", prompt="four five")])
    path = tmp_path / "m.jsonl"
    save_manifest(manifest, path)
    out = tmp_path / "statsout"
    code = dispatch(["dataset", "stats", "--manifest", str(path), "--out", str(out)])
    assert code == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["total"] == 2
    assert stats["prompt_word_mean"] == pytest.approx(2.5)
    assert (out / "stats.json").is_file()
    assert (out / "split_distribution.png").is_file()


def test_dataset_stats_missing_manifest(tmp_path):
    assert dispatch(["dataset", "stats", "--manifest", str(tmp_path / "nope.jsonl")]) == 1


def test_convert_coco(tmp_path, capsys):
    mask_a = rect_mask(8, 10, 1, 4, 2, 6)
    mask_b = rect_mask(8, 10, 5, 8, 0, 3)
    coco = {
        "images": [{"id": 7, "file_name": "seven.png", "width": 10, "height": 8}],
        "categories": [{"id": 1, "name": "crate"}],
        "annotations": [
            {"image_id": 7, "category_id": 1, "segmentation": rle_encode(mask_a).to_json()},
            {"image_id": 7, "category_id": 1, "segmentation": rle_encode(mask_b).to_json()},
            {"image_id": 7, "category_id": 1, "segmentation": [[0, 0, 1, 1]]},  # polygon -> skipped
        ],
    }
    ann_path = tmp_path / "instances.json"
    ann_path.write_text(json.dumps(coco))
    out_path = tmp_path / "coco_manifest.jsonl"
    code = dispatch([
        "dataset", "convert-coco", "--annotations", str(ann_path),
        "--images", str(tmp_path), "--out", str(out_path),
    ])
    assert code == 0
    manifest = load_manifest(out_path)
    assert len(manifest) == 1
    sample = manifest.samples[0]
    assert sample.prompt == "segment all the crate in the image"
    from promptseg.maskops import rle_decode

    np.testing.assert_array_equal(rle_decode(sample.mask), mask_a | mask_b)


def write_groups_config(tmp_path, image_size=64):
    pairs = generate_pairs(n_images=2, prompts_per_image=2, image_size=image_size, seed=3, out_dir=tmp_path / "synth")
    conv = generate_pairs(n_images=2, prompts_per_image=1, image_size=image_size, seed=4, negatives=True, out_dir=tmp_path / "synth")
    paths = {}
    for gid, subset in [
        ("literal", pairs),
        ("referring", pairs),
        ("open_vocab_regions", pairs),
        ("conversational_pos", [p for p in conv if not p.sample.is_negative]),
        ("conversational_neg", [p for p in conv if p.sample.is_negative]),
    ]:
        path = tmp_path / f"{gid}.jsonl"
        save_manifest(pairs_manifest(subset), path)
        paths[gid] = str(path)
    config = {
        "groups": paths,
        "model": {"image_size": 64, "patch_stride": 16, "d_img": 8, "d_dec": 8, "d_t": 12,
                  "decoder_blocks": 1, "decoder_heads": 2, "prompt_layers": 1, "prompt_heads": 2,
                  "lora_rank": 2, "max_text_len": 48},
        "train": {"lr_peak": 2e-3, "warmup_steps": 2, "total_steps": 6, "batch_size": 2,
                  "grad_accum": 1, "erode_kernel": 3},
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    return config_path, pairs


def test_train_phase1_and_eval(tmp_path, capsys):
    config_path, pairs = write_groups_config(tmp_path)
    out = tmp_path / "train_out"
    code = dispatch(["--config", str(config_path), "--seed", "5", "train", "--phase", "1", "--out", str(out)])
    assert code == 0
    result = json.loads(capsys.readouterr().out)
    ckpt = result["checkpoint"]
    assert Path(ckpt).is_file()
    assert Path(result["loss_curve"]).is_file()

    eval_manifest = tmp_path / "evalset.jsonl"
    save_manifest(pairs_manifest(pairs), eval_manifest)
    eval_out = tmp_path / "eval_out"
    code = dispatch([
        "eval", "--checkpoint", ckpt, "--manifest", str(eval_manifest),
        "--out", str(eval_out), "--threshold", "0.5",
    ])
    assert code == 0
    assert (eval_out / "predictions.jsonl").is_file()
    assert (eval_out / "report.json").is_file()
    assert (eval_out / "report.txt").is_file()
    assert (eval_out / "per_concept.png").is_file()


def test_train_phase2_without_init_checkpoint_is_usage_error(tmp_path):
    config_path, _ = write_groups_config(tmp_path)
    code = dispatch(["--config", str(config_path), "train", "--phase", "2", "--out", str(tmp_path / "o")])
    assert code == 2


def test_train_phase2_with_init_checkpoint(tmp_path, capsys):
    config_path, _ = write_groups_config(tmp_path)
    out1 = tmp_path / "p1"
    assert dispatch(["--config", str(config_path), "train", "--phase", "1", "--out", str(out1)]) == 0
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    out2 = tmp_path / "p2"
    code = dispatch([
        "--config", str(config_path), "train", "--phase", "2",
        "--out", str(out2), "--init-checkpoint", ckpt,
    ])
    assert code == 0
    rows = (out2 / "loss_log.csv").read_text().splitlines()
    assert "conversational" in rows[-1]


def test_report_from_predictions(tmp_path, capsys):
    manifest = DatasetManifest(samples=[make_sample("a"), make_sample("b", prompt="other")])
    m_path = tmp_path / "m.jsonl"
    save_manifest(manifest, m_path)
    from promptseg.evaluation import PredictionSet, save_predictions

    preds = PredictionSet(model_id="m", entries={s.sample_id: s.mask for s in manifest.samples})
    p_path = tmp_path / "preds.jsonl"
    save_predictions(preds, p_path)
    out = tmp_path / "report_out"
    code = dispatch(["report", "--manifest", str(m_path), "--predictions", str(p_path), "--out", str(out)])
    assert code == 0
    assert (out / "report.json").is_file()
    assert (out / "per_concept.png").is_file()
    report = json.loads((out / "report.json").read_text())
    assert report["with_negatives"]["overall"]["giou"] == 100.0


def test_report_without_inputs_usage_error(tmp_path):
    assert dispatch(["report", "--out", str(tmp_path / "o")]) == 2


def test_unknown_subcommand_exits_2():
    assert dispatch(["frobnicate"]) == 2


def test_unknown_flag_exits_2():
    assert dispatch(["dataset", "stats", "--manifest", "x", "--bogus"]) == 2


def test_unknown_config_section_rejected(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps({"mystery": {}}))
    code = dispatch(["--config", str(config), "dataset", "stats", "--manifest", "whatever"])
    assert code == 2


def test_unknown_config_key_in_section_rejected(tmp_path):
    config_path, _ = write_groups_config(tmp_path)
    config = json.loads(config_path.read_text())
    config["train"]["mystery_knob"] = 1
    config_path.write_text(json.dumps(config))
    code = dispatch(["--config", str(config_path), "train", "--phase", "1", "--out", str(tmp_path / "o")])
    assert code == 2
