import itertools

import numpy as np
import pytest

from vizcap.embeddings import Lexicon
from vizcap.perception import (ANGLES, ChannelLimits, DetectedObject, DetectedText, ImageDetections,
                               RotationResult, filter_objects, rank_ocr, read_detections,
                               select_orientation, write_detections)

LEX = Lexicon(["cognac", "liqueur", "marnier", "grand", "heinz", "tomato", "ketchup"])


def _texts(tokens):
    return [DetectedText(t, (0, 0, 10, 5), 0.9) for t in tokens]


def _rotations(by_angle):
    return [RotationResult(a, _texts(by_angle.get(a, []))) for a in ANGLES]


def test_cognac_sweep_selects_90():
    angle, ranked = select_orientation(_rotations({
        0: ["xqzt"], 90: ["cognac", "marnier", "trand"], 180: [], 270: ["blr"]}), LEX)
    assert angle == 90
    assert [d.token for d in ranked] == ["cognac", "marnier", "trand"]


def test_all_empty_returns_zero():
    assert select_orientation(_rotations({}), LEX) == (0, [])


def test_tie_prefers_smaller_angle():
    angle, _ = select_orientation(_rotations({0: ["heinz", "tomato"], 180: ["ketchup", "cognac"]}), LEX)
    assert angle == 0


def test_counts_whitespace_tokens_inside_strings():
    angle, _ = select_orientation(_rotations({0: ["heinz"], 270: ["grand marnier"]}), LEX)
    assert angle == 270


def test_instances_vs_types_flag():
    rots = _rotations({0: ["heinz", "heinz", "heinz"], 90: ["tomato", "ketchup"]})
    assert select_orientation(rots, LEX)[0] == 0
    assert select_orientation(rots, LEX, ChannelLimits(count_instances=False))[0] == 90


def test_exhaustive_count_patterns_match_brute_force():
    # every pattern of intelligible counts 0..3 per angle
    for counts in itertools.product(range(4), repeat=4):
        rots = _rotations({a: ["heinz"] * c + ["zzq"] for a, c in zip(ANGLES, counts)})
        expected = ANGLES[max(range(4), key=lambda k: (counts[k], -k))]
        assert select_orientation(rots, LEX)[0] == expected
        for perm in itertools.islice(itertools.permutations(rots), 0, 24, 7):
            assert select_orientation(list(perm), LEX)[0] == expected


def test_orientation_rejects_bad_candidate_sets():
    rots = _rotations({})
    with pytest.raises(ValueError):
        select_orientation(rots[:3], LEX)
    with pytest.raises(ValueError):
        select_orientation(rots + [rots[0]], LEX)
    with pytest.raises(ValueError):
        RotationResult(45)


def test_rank_ocr_example():
    dets = [DetectedText("a", (0, 0, 10, 10), 0.9), DetectedText("b", (0, 0, 20, 20), 0.5),
            DetectedText("c", (0, 0, 20, 20), 0.8)]
    assert [d.token for d in rank_ocr(dets)] == ["c", "b", "a"]
    assert rank_ocr(dets[:1]) == dets[:1]


def test_rank_ocr_matches_brute_force_and_clips():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(0, 30))
        dets = [DetectedText(f"t{i}", (0, 0, int(rng.integers(1, 4)), int(rng.integers(1, 4))),
                             float(rng.choice([0.1, 0.5, 0.9]))) for i in range(n)]
        # brute force: repeatedly take the best remaining element
        remaining = list(range(n))
        order = []
        while remaining:
            best = remaining[0]
            for i in remaining[1:]:
                a, b = dets[i], dets[best]
                if (a.area, a.confidence) > (b.area, b.confidence):
                    best = i
            order.append(best)
            remaining.remove(best)
        got = rank_ocr(dets)
        assert got == [dets[i] for i in order[:20]]
        assert rank_ocr(got) == got


def test_filter_objects_examples():
    objs = [DetectedObject(f"o{i}", c) for i, c in enumerate([0.9, 0.3, 0.25, 0.1])]
    assert [o.confidence for o in filter_objects(objs)] == [0.9, 0.3]
    assert [o.confidence for o in filter_objects(objs, ChannelLimits(strict_threshold=False))] \
        == [0.9, 0.3, 0.25]
    assert filter_objects([DetectedObject("x", 0.2)]) == []
    many = [DetectedObject(f"o{i}", 0.3 + 0.05 * i) for i in range(12)]
    top = filter_objects(many)
    assert len(top) == 10 and top[0].label == "o11" and top[-1].label == "o2"


def test_filter_objects_stable_and_idempotent():
    rng = np.random.default_rng(5)
    for _ in range(100):
        objs = [DetectedObject(f"o{i}", float(rng.choice([0.1, 0.25, 0.4, 0.7]))) for i in range(15)]
        once = filter_objects(objs)
        assert filter_objects(once) == once
        expected = sorted([(i, o) for i, o in enumerate(objs) if o.confidence > 0.25],
                          key=lambda t: (-t[1].confidence, t[0]))
        assert once == [o for _, o in expected][:10]


def test_detection_validation():
    with pytest.raises(ValueError):
        DetectedText("a", (0, 0, -1, 2), 0.5)
    with pytest.raises(ValueError):
        DetectedText("a", (0, 0, 1, 2), 1.5)
    with pytest.raises(ValueError):
        DetectedObject("", 0.5)
    with pytest.raises(ValueError):
        ChannelLimits(obj_threshold=1.0)


def test_detections_jsonl_roundtrip(tmp_path):
    items = [ImageDetections("img1", _rotations({90: ["heinz"]}), [DetectedObject("bottle", 0.8)]),
             ImageDetections("img2", _rotations({}), [])]
    write_detections(tmp_path / "d.jsonl", items)
    first = (tmp_path / "d.jsonl").read_text().splitlines()[1]
    assert '"angle": 90' in first and '"conf": 0.9' in first
    back = read_detections(tmp_path / "d.jsonl")
    assert back == items
