from __future__ import annotations

import logging

import numpy as np
import pytest

from conftest import rect_mask
from promptseg.backends import (
    BackendConfig,
    BackendError,
    MockDetector,
    MockVlm,
    NoDetectionError,
    ResponseSchema,
    SchemaParseError,
    SyntheticSegmenter,
    TransientBackendError,
    VlmRequest,
    VlmRule,
    build_chat_payload,
    dense_point_grid,
    detect_region,
    image_key,
    request_fingerprint,
    save_vlm_fixture,
    segment_from_box,
    segment_from_grid,
    vlm_complete,
)
from promptseg.maskops import BoundingBox, rle_encode


def cfg(**kw):
    return BackendConfig(timeout_ms=1000, max_retries=2, retry_backoff_ms=1, **kw)


def flat_image(h=32, w=32, color=(10, 20, 30)):
    img = np.zeros((h, w, 3), dtype=np.uint8)
    img[:] = color
    return img


class TestVlm:
    def test_scripted_accept_by_request_hash(self):
        req = VlmRequest(user_text="is this correct?", response_schema=ResponseSchema.ACCEPT_REJECT)
        client = MockVlm(script={request_fingerprint(req): "accept"})
        resp = vlm_complete(cfg(), req, client=client)
        assert resp.parsed == "accept"
        assert resp.text == "accept"

    def test_malformed_json_is_structured_error(self):
        req = VlmRequest(user_text="give json", response_schema=ResponseSchema.JSON_OBJECT)
        client = MockVlm(script={request_fingerprint(req): "{broken"})
        with pytest.raises(SchemaParseError) as err:
            vlm_complete(cfg(), req, client=client)
        assert err.value.raw_text == "{broken"

    def test_seeded_mock_is_deterministic(self):
        req = VlmRequest(user_text="hello", images=(flat_image(),))
        a = vlm_complete(cfg(), req, client=MockVlm(seed=5))
        b = vlm_complete(cfg(), req, client=MockVlm(seed=5))
        assert a.text == b.text
        c = vlm_complete(cfg(), req, client=MockVlm(seed=6))
        assert c.text != a.text  # seed participates in synthesis

    def test_fixture_file_lookup(self, tmp_path):
        req = VlmRequest(user_text="what is here", response_schema=ResponseSchema.FREE_TEXT)
        save_vlm_fixture(tmp_path, req, "a small dog")
        client = MockVlm(fixtures_dir=tmp_path)
        assert vlm_complete(cfg(), req, client=client).text == "a small dog"

    def test_rules_first_match_wins(self):
        client = MockVlm(
            rules=[
                VlmRule(contains="describe", text="first"),
                VlmRule(contains="describe the scene", text="second"),
            ]
        )
        assert client.complete(VlmRequest(user_text="describe the scene")) == "first"

    def test_rule_image_key_filter(self):
        img = flat_image(color=(1, 2, 3))
        other = flat_image(color=(9, 9, 9))
        client = MockVlm(rules=[VlmRule(contains="look", text="match", image_key=image_key(img)[:12])])
        assert client.complete(VlmRequest(user_text="look", images=(img,))) == "match"
        with pytest.raises(BackendError):
            client.complete(VlmRequest(user_text="look", images=(other,)))

    def test_unknown_request_raises(self):
        with pytest.raises(BackendError, match="no VLM fixture"):
            MockVlm().complete(VlmRequest(user_text="anything"))

    def test_retry_policy_bounded(self):
        class Flaky:
            def __init__(self, fail_times):
                self.remaining = fail_times
                self.attempts = 0

            def complete(self, req):
                self.attempts += 1
                if self.remaining > 0:
                    self.remaining -= 1
                    raise TransientBackendError("boom")
                return "accept"

        ok = Flaky(fail_times=2)
        resp = vlm_complete(cfg(), VlmRequest(user_text="x", response_schema=ResponseSchema.ACCEPT_REJECT), client=ok)
        assert resp.parsed == "accept"
        assert ok.attempts == 3

        dead = Flaky(fail_times=10)
        with pytest.raises(BackendError, match="after 3 attempts"):
            vlm_complete(cfg(), VlmRequest(user_text="x"), client=dead)
        assert dead.attempts == 3  # 1 + max_retries

    def test_accept_reject_parsing_variants(self):
        for text in ("accept", " Accept ", "REJECT", "reject."):
            req = VlmRequest(user_text="q", response_schema=ResponseSchema.ACCEPT_REJECT)
            client = MockVlm(script={request_fingerprint(req): text})
            assert vlm_complete(cfg(), req, client=client).parsed in ("accept", "reject")
        req = VlmRequest(user_text="q", response_schema=ResponseSchema.ACCEPT_REJECT)
        client = MockVlm(script={request_fingerprint(req): "maybe so"})
        with pytest.raises(SchemaParseError):
            vlm_complete(cfg(), req, client=client)

    def test_request_validation(self):
        with pytest.raises(ValueError):
            VlmRequest()
        with pytest.raises(ValueError):
            VlmRequest(user_text="x", images=tuple(flat_image() for _ in range(5)))


class TestDetector:
    def test_table_hit(self):
        img = flat_image()
        client = MockDetector(table={f"{image_key(img)[:16]}|the dog": [2, 3, 10, 12]})
        box = detect_region(cfg(), img, "the dog", client=client)
        assert (box.x_min, box.y_min, box.x_max, box.y_max) == (2, 3, 10, 12)

    def test_unknown_text_is_no_detection(self):
        with pytest.raises(NoDetectionError):
            detect_region(cfg(), flat_image(), "a unicorn", client=MockDetector(table={}))

    def test_out_of_bounds_box_clamped_with_warning(self, caplog):
        img = flat_image(16, 16)
        client = MockDetector(table={"*|the sky": [4, 4, 99, 99]})
        with caplog.at_level(logging.WARNING):
            box = detect_region(cfg(), img, "the sky", client=client)
        assert (box.x_max, box.y_max) == (16, 16)
        assert any("clamped" in r.message for r in caplog.records)


class TestSegmenter:
    def test_box_fill_contract(self):
        img = flat_image(20, 20)
        box = BoundingBox(5, 6, 10, 12)
        cand = segment_from_box(cfg(), img, box, client=SyntheticSegmenter(box_mode="box_fill"))
        expected = rect_mask(20, 20, 6, 12, 5, 10)
        np.testing.assert_array_equal(cand.mask, expected)

    def test_mask_outside_box_passes_through(self):
        # geometric filtering is a later verification stage's job
        img = flat_image(20, 20)
        stored = rect_mask(20, 20, 0, 3, 0, 3)

        class Static:
            def segment_box(self, image, box):
                from promptseg.backends import SegmenterCandidate

                return SegmenterCandidate(mask=stored, score=0.5)

            def segment_points(self, image, points):
                return []

        cand = segment_from_box(cfg(), img, BoundingBox(10, 10, 18, 18), client=Static())
        np.testing.assert_array_equal(cand.mask, stored)

    def test_grid_dedup_two_points_one_blob(self):
        img = flat_image(30, 30, color=(0, 0, 0))
        img[5:15, 5:15] = (200, 10, 10)
        cands = segment_from_grid(cfg(), img, [(7, 7), (12, 12)], client=SyntheticSegmenter())
        assert len(cands) == 1
        np.testing.assert_array_equal(cands[0].mask, rect_mask(30, 30, 5, 15, 5, 15))

    def test_grid_one_candidate_per_component(self):
        img = flat_image(40, 40, color=(0, 0, 0))
        img[2:10, 2:10] = (250, 0, 0)
        img[20:30, 20:30] = (0, 250, 0)
        img[33:38, 5:12] = (0, 0, 250)
        points = [(5, 5), (25, 25), (35, 8), (6, 6)]
        cands = segment_from_grid(cfg(), img, points, client=SyntheticSegmenter())
        assert len(cands) == 3  # connected-component oracle: 3 distinct blobs touched

    def test_empty_response_ok(self):
        class Empty:
            def segment_box(self, image, box):
                raise NotImplementedError

            def segment_points(self, image, points):
                return []

        assert segment_from_grid(cfg(), flat_image(), [(1, 1)], client=Empty()) == []

    def test_point_bounds_checked(self):
        with pytest.raises(ValueError):
            segment_from_grid(cfg(), flat_image(8, 8), [(9, 1)], client=SyntheticSegmenter())


def test_dense_point_grid_within_bounds():
    box = BoundingBox(10, 10, 50, 40)
    points = dense_point_grid(box, height=60, width=80, side=16)
    assert len(points) == len(set(points)) > 0
    for y, x in points:
        assert 0 <= y < 60 and 0 <= x < 80


def test_chat_payload_shape():
    payload = build_chat_payload(
        BackendConfig(endpoint="http://e", model="m"),
        VlmRequest(system_text="sys", user_text="hi", images=(flat_image(4, 4),), response_schema=ResponseSchema.JSON_OBJECT),
    )
    assert payload["model"] == "m"
    assert payload["messages"][0] == {"role": "system", "content": "sys"}
    user = payload["messages"][1]["content"]
    assert user[0] == {"type": "text", "text": "hi"}
    assert user[1]["image_url"]["url"].startswith("data:image/png;base64,")
    assert payload["response_format"] == {"type": "json_object"}


def test_fingerprint_sensitive_to_content():
    a = VlmRequest(user_text="one")
    b = VlmRequest(user_text="two")
    assert request_fingerprint(a) != request_fingerprint(b)
    img1, img2 = flat_image(color=(1, 1, 1)), flat_image(color=(2, 2, 2))
    assert request_fingerprint(VlmRequest(user_text="x", images=(img1,))) != request_fingerprint(
        VlmRequest(user_text="x", images=(img2,))
    )
