from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import make_sample
from promptseg.core import ConceptFamily, DatasetManifest, manifest_stats
from promptseg.evaluation import (
    EvaluationError,
    PredictionSet,
    evaluate_predictions,
    load_predictions,
    predict_dataset,
    save_predictions,
    write_evaluation,
)
from promptseg.maskops import MaskRLE, rle_encode
from promptseg.model import ModelConfig, build_model
from promptseg.reporting import render_concept_bars, render_loss_curve, render_split_distribution
from promptseg.synthdata import generate_pairs, pairs_manifest

torch.set_num_threads(4)


def small_model():
    return build_model(
        ModelConfig(image_size=64, patch_stride=16, d_img=8, d_dec=8, d_t=12,
                    decoder_blocks=1, decoder_heads=2, prompt_layers=1, prompt_heads=2,
                    lora_rank=2, max_text_len=48, seed=5)
    )


def disk_pairs(tmp_path, **kw):
    return generate_pairs(n_images=2, prompts_per_image=2, image_size=64, seed=3, out_dir=tmp_path, **kw)


class TestPredictDataset:
    def test_entry_per_sample(self, tmp_path):
        manifest = pairs_manifest(disk_pairs(tmp_path))
        preds = predict_dataset(small_model(), manifest)
        assert set(preds.entries) == {s.sample_id for s in manifest.samples}
        for sid, rle in preds.entries.items():
            sample = next(s for s in manifest.samples if s.sample_id == sid)
            assert rle.size == (sample.image.height, sample.image.width)

    def test_impossible_threshold_all_empty(self, tmp_path):
        manifest = pairs_manifest(disk_pairs(tmp_path))
        preds = predict_dataset(small_model(), manifest, threshold=1.01)
        assert all(rle.foreground == 0 for rle in preds.entries.values())

    def test_unreadable_image_recorded_not_fatal(self, tmp_path):
        manifest = pairs_manifest(disk_pairs(tmp_path))
        broken = make_sample("broken", height=64, width=64)
        manifest.samples.append(broken)
        preds = predict_dataset(small_model(), manifest)
        assert preds.entries["broken"].foreground == 0
        assert any(e["sample_id"] == "broken" for e in preds.errors)

    def test_overlong_prompt_recorded_not_fatal(self, tmp_path):
        from promptseg.core import Sample

        manifest = pairs_manifest(disk_pairs(tmp_path))
        source = manifest.samples[0]
        overlong = Sample(
            sample_id="overlong",
            image=source.image,
            prompt="word " * 60,
            mask=source.mask,
            concept=source.concept,
            split=source.split,
            provenance=source.provenance,
        )
        manifest.samples.append(overlong)
        preds = predict_dataset(small_model(), manifest)
        assert preds.entries["overlong"].foreground == 0
        assert any(e["sample_id"] == "overlong" for e in preds.errors)

    def test_roundtrip_file(self, tmp_path):
        manifest = pairs_manifest(disk_pairs(tmp_path))
        preds = predict_dataset(small_model(), manifest)
        path = tmp_path / "predictions.jsonl"
        save_predictions(preds, path)
        loaded = load_predictions(path)
        assert loaded.entries == preds.entries
        assert loaded.threshold == preds.threshold


class TestEvaluatePredictions:
    def _manifest(self):
        samples = [
            make_sample("a", concept=ConceptFamily.ENTITIES),
            make_sample("b", concept=ConceptFamily.PHYSICS_SAFETY),
            make_sample("n", mask=np.zeros((8, 8), dtype=np.uint8), concept=ConceptFamily.ENTITIES),
        ]
        return DatasetManifest(samples=samples)

    def test_perfect_predictions_score_100(self):
        manifest = self._manifest()
        preds = PredictionSet(model_id="m", entries={s.sample_id: s.mask for s in manifest.samples})
        result = evaluate_predictions(preds, manifest)
        assert result.report.overall_giou == pytest.approx(100.0)
        for value in result.report.per_concept_giou.values():
            assert value == pytest.approx(100.0)

    def test_all_empty_on_positive_set_scores_zero(self):
        manifest = DatasetManifest(samples=[make_sample("a"), make_sample("b", prompt="second target")])
        empty = MaskRLE.empty(8, 8)
        preds = PredictionSet(model_id="m", entries={"a": empty, "b": empty})
        result = evaluate_predictions(preds, manifest)
        assert result.report.overall_giou == 0.0

    def test_missing_prediction_becomes_empty_with_warning(self):
        manifest = self._manifest()
        preds = PredictionSet(model_id="m", entries={"a": manifest.samples[0].mask})
        result = evaluate_predictions(preds, manifest)
        assert set(result.missing) == {"b", "n"}
        # b missing -> IoU 0; n missing -> empty vs empty -> 1.0
        assert result.report.overall_giou == pytest.approx(100.0 * (1 + 0 + 1) / 3)

    def test_unknown_sample_id_rejected(self):
        manifest = self._manifest()
        preds = PredictionSet(model_id="m", entries={"ghost": MaskRLE.empty(8, 8)})
        with pytest.raises(EvaluationError):
            evaluate_predictions(preds, manifest)

    def test_positives_only_variant_present_iff_negatives(self):
        manifest = self._manifest()
        preds = PredictionSet(model_id="m", entries={s.sample_id: s.mask for s in manifest.samples})
        result = evaluate_predictions(preds, manifest)
        assert result.positives_only is not None
        assert result.positives_only.total == 2
        pos_manifest = DatasetManifest(samples=[make_sample("a")])
        pos_preds = PredictionSet(model_id="m", entries={"a": pos_manifest.samples[0].mask})
        assert evaluate_predictions(pos_preds, pos_manifest).positives_only is None

    def test_evaluation_idempotent(self):
        manifest = self._manifest()
        preds = PredictionSet(model_id="m", entries={s.sample_id: s.mask for s in manifest.samples})
        r1 = evaluate_predictions(preds, manifest)
        r2 = evaluate_predictions(preds, manifest)
        assert r1.to_json() == r2.to_json()

    def test_written_files(self, tmp_path):
        manifest = self._manifest()
        preds = PredictionSet(model_id="m", entries={s.sample_id: s.mask for s in manifest.samples})
        result = evaluate_predictions(preds, manifest)
        paths = write_evaluation(result, tmp_path)
        assert paths["json"].is_file() and paths["text"].is_file()
        text = paths["text"].read_text()
        assert "All samples" in text and "Positives only" in text
        assert "Ent." in text


class TestFigures:
    def test_concept_bars_rendered(self, tmp_path):
        manifest = DatasetManifest(samples=[make_sample("a"), make_sample("b", prompt="other prompt")])
        preds = PredictionSet(model_id="m", entries={s.sample_id: s.mask for s in manifest.samples})
        report = evaluate_predictions(preds, manifest).report
        out = render_concept_bars(report, tmp_path / "figs" / "concepts.png")
        assert out.is_file() and out.stat().st_size > 1000

    def test_split_distribution_rendered(self, tmp_path):
        manifest = DatasetManifest(samples=[make_sample(f"s{i}") for i in range(5)])
        out = render_split_distribution(manifest_stats(manifest), tmp_path / "split.png")
        assert out.is_file()

    def test_loss_curve_rendered(self, tmp_path):
        log = tmp_path / "loss.csv"
        log.write_text("step,lr,loss,bce,dice,category\n1,0.001,0.9,0.8,0.4,pretrain_mix:6\n2,0.001,0.7,0.6,0.35,pretrain_mix:6\n")
        out = render_loss_curve(log, tmp_path / "loss.png")
        assert out.is_file()
