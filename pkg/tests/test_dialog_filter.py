import math
from collections import Counter

import numpy as np
import pytest

from dialog_forge.dialog_filter import (
    MatchedDialogue,
    apply_frequency_filter,
    apply_score_filter,
    assemble_dataset,
    compute_tau1,
    load_matched,
    nearest_rank_cut,
    run_filters,
    save_matched,
    sweep_tau2,
)
from dialog_forge.matcher import CandidateEntry, CandidateSet, PipelineConfig

from helpers import make_dialogue


def _entry(dialogue_id, turn, image_id, combined):
    return CandidateEntry(
        dialogue_id=dialogue_id,
        turn_index=turn,
        image_id=image_id,
        s_ui=combined,
        s_uc=combined,
        combined=combined,
    )


def _candidates(scores_by_image, dialogue_id="d0", turn=0, k=100):
    entries = [_entry(dialogue_id, turn, image_id, s) for image_id, s in scores_by_image]
    return CandidateSet(entries=entries, k=k)


def test_tau1_odd_count():
    assert compute_tau1(_candidates([("a", 0.1), ("b", 0.2), ("c", 0.3)])) == 0.2


def test_tau1_even_count_lower_middle():
    # Sort oracle under the lower-middle convention: index (4-1)//2 = 1.
    assert compute_tau1(_candidates([("a", 0.4), ("b", 0.1), ("c", 0.3), ("d", 0.2)])) == 0.2


def test_tau1_single_score():
    assert compute_tau1(_candidates([("a", 0.7)])) == 0.7


def test_tau1_empty_errors():
    with pytest.raises(ValueError):
        compute_tau1(CandidateSet(entries=[], k=10))


def test_score_filter_boundary():
    entries = _candidates([("a", 0.5), ("b", 0.5 - 1e-9), ("c", 0.9)])
    kept = apply_score_filter(entries, 0.5)
    assert [e.image_id for e in kept.entries] == ["a", "c"]


def test_score_filter_half_survive():
    rng = np.random.default_rng(21)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        scores = rng.normal(size=n)
        cands = _candidates([(f"i{j}", float(s)) for j, s in enumerate(scores)])
        tau1 = compute_tau1(cands)
        kept = apply_score_filter(cands, tau1)
        assert len(kept.entries) >= n / 2  # median keeps at least half
        assert len(kept.entries) == sum(1 for s in scores if s >= tau1)


def test_score_filter_idempotent():
    rng = np.random.default_rng(22)
    cands = _candidates([(f"i{j}", float(s)) for j, s in enumerate(rng.normal(size=101))])
    tau1 = compute_tau1(cands)
    once = apply_score_filter(cands, tau1)
    assert apply_score_filter(once, tau1).entries == once.entries


def test_nearest_rank_cut():
    assert nearest_rank_cut([1, 2, 3, 100], 75) == 3
    assert nearest_rank_cut([1, 2, 3, 100], 100) == 100
    assert nearest_rank_cut([5, 5, 5], 25) == 5
    with pytest.raises(ValueError):
        nearest_rank_cut([1], 0)


def test_frequency_filter_drops_heavy_image():
    # counts a:1 b:2 c:3 d:100 at p75 -> keep counts <= 3, all of d removed.
    entries = []
    for image_id, count in (("a", 1), ("b", 2), ("c", 3), ("d", 100)):
        for j in range(count):
            entries.append(_entry(f"d{j}", 0, image_id, 1.0))
    filtered = apply_frequency_filter(CandidateSet(entries=entries, k=200), 75)
    surviving = {e.image_id for e in filtered.entries}
    assert surviving == {"a", "b", "c"}
    assert len(filtered.entries) == 6


def test_frequency_filter_p100_is_identity():
    rng = np.random.default_rng(23)
    entries = [
        _entry("d0", 0, f"i{int(rng.integers(0, 10))}", float(rng.normal()))
        for _ in range(100)
    ]
    cands = CandidateSet(entries=entries, k=100)
    assert apply_frequency_filter(cands, 100).entries == cands.entries


def test_frequency_filter_ties_at_cut_kept():
    entries = []
    for image_id in ("a", "b", "c"):
        for j in range(5):
            entries.append(_entry(f"d{j}", 0, image_id, 1.0))
    filtered = apply_frequency_filter(CandidateSet(entries=entries, k=100), 25)
    assert {e.image_id for e in filtered.entries} == {"a", "b", "c"}


def _naive_two_stage(entries, percentile):
    """Brute-force reference for the full two-stage filter."""
    scores = sorted(e.combined for e in entries)
    tau1 = scores[(len(scores) - 1) // 2]
    kept = [e for e in entries if e.combined >= tau1]
    counts = Counter(e.image_id for e in kept)
    ordered = sorted(counts.values())
    cut = ordered[max(math.ceil(percentile / 100 * len(ordered)), 1) - 1]
    return [e for e in kept if counts[e.image_id] <= cut], tau1, cut


def test_two_stage_matches_naive_reference():
    rng = np.random.default_rng(24)
    for _ in range(100):
        n = int(rng.integers(1, 1001))
        entries = [
            _entry(
                f"d{int(rng.integers(0, 5))}",
                int(rng.integers(0, 4)),
                f"i{int(rng.integers(0, 30))}",
                float(rng.normal()),
            )
            for _ in range(n)
        ]
        percentile = float(rng.choice([25, 50, 75, 100]))
        cands = CandidateSet(entries=entries, k=1000)
        expected, tau1, cut = _naive_two_stage(entries, percentile)
        filtered, stats = run_filters(cands, PipelineConfig(tau2_percentile=percentile))
        assert filtered.entries == expected
        assert stats.tau1 == tau1
        assert stats.frequency_threshold == cut
        assert stats.score_stage.images_after <= stats.score_stage.images_before
        assert stats.frequency_stage.images_after <= stats.frequency_stage.images_before


def test_pipeline_monotonicity_links_shrink():
    rng = np.random.default_rng(25)
    entries = [
        _entry(f"d{j % 7}", j % 3, f"i{int(rng.integers(0, 12))}", float(rng.normal()))
        for j in range(200)
    ]
    cands = CandidateSet(entries=entries, k=100)
    tau1 = compute_tau1(cands)
    after_tau1 = apply_score_filter(cands, tau1)
    after_tau2 = apply_frequency_filter(after_tau1, 50)
    links = lambda cs: {(e.dialogue_id, e.turn_index, e.image_id) for e in cs.entries}
    assert links(after_tau1) <= links(cands)
    assert links(after_tau2) <= links(after_tau1)


def test_assemble_caps_attachments():
    dialogue = make_dialogue("d0", ["a", "b", "c"])
    entries = [_entry("d0", 1, f"i{j:02d}", 1.0 - j * 0.01) for j in range(12)]
    result = assemble_dataset(
        [dialogue], CandidateSet(entries=entries, k=100), PipelineConfig(max_images_per_utterance=10)
    )
    (md,) = result.matched
    attached = md.attachments[1]
    assert len(attached) == 10
    assert [image_id for image_id, _ in attached] == [f"i{j:02d}" for j in range(10)]


def test_assemble_drops_and_counts_empty_dialogues():
    with_images = make_dialogue("d0", ["hello there"])
    without = make_dialogue("d1", ["nothing here"])
    entries = [_entry("d0", 0, "img", 0.5)]
    result = assemble_dataset(
        [with_images, without], CandidateSet(entries=entries, k=10), PipelineConfig()
    )
    assert [md.dialogue.dialogue_id for md in result.matched] == ["d0"]
    assert result.unmatched_dialogue_ids == ["d1"]
    report = result.as_report()
    assert report["dialogues_without_images"] == 1


def test_assemble_multiple_turns_single_dialogue():
    dialogue = make_dialogue("d0", ["a", "b", "c"])
    entries = [_entry("d0", 0, "x", 0.9), _entry("d0", 2, "y", 0.8)]
    result = assemble_dataset([dialogue], CandidateSet(entries=entries, k=10), PipelineConfig())
    assert len(result.matched) == 1
    assert set(result.matched[0].attachments) == {0, 2}


def test_assemble_errors():
    dialogue = make_dialogue("d0", ["only turn"])
    dangling = CandidateSet(entries=[_entry("ghost", 0, "x", 1.0)], k=10)
    with pytest.raises(KeyError):
        assemble_dataset([dialogue], dangling, PipelineConfig())
    bad_turn = CandidateSet(entries=[_entry("d0", 5, "x", 1.0)], k=10)
    with pytest.raises(ValueError):
        assemble_dataset([dialogue], bad_turn, PipelineConfig())


def test_assembled_attachments_satisfy_thresholds():
    rng = np.random.default_rng(26)
    entries = []
    for dialogue in range(9):
        for turn in range(2):
            images = rng.choice(25, size=int(rng.integers(5, 20)), replace=False)
            entries.extend(
                _entry(f"d{dialogue}", turn, f"i{int(img)}", float(rng.normal()))
                for img in images
            )
    dialogues = [make_dialogue(f"d{j}", ["one", "two"]) for j in range(9)]
    config = PipelineConfig(tau2_percentile=75, max_images_per_utterance=5)
    filtered, stats = run_filters(CandidateSet(entries=entries, k=400), config)
    counts = Counter(e.image_id for e in apply_score_filter(CandidateSet(entries=entries, k=400), stats.tau1).entries)
    result = assemble_dataset(dialogues, filtered, config)
    for md in result.matched:
        for images in md.attachments.values():
            assert len(images) <= 5
            for image_id, score in images:
                assert score >= stats.tau1
                assert counts[image_id] <= stats.frequency_threshold


def test_matched_dialogue_invariants():
    dialogue = make_dialogue("d0", ["a"])
    with pytest.raises(ValueError, match="turn"):
        MatchedDialogue(dialogue=dialogue, attachments={3: [("x", 1.0)]})
    with pytest.raises(ValueError, match="duplicate"):
        MatchedDialogue(dialogue=dialogue, attachments={0: [("x", 1.0), ("x", 0.5)]})
    with pytest.raises(ValueError, match="sorted"):
        MatchedDialogue(dialogue=dialogue, attachments={0: [("x", 0.5), ("y", 1.0)]})


def test_matched_jsonl_roundtrip(tmp_path):
    dialogue = make_dialogue("d0", ["hello", "world"], skill="daily")
    md = MatchedDialogue(dialogue=dialogue, attachments={1: [("imgA", 0.9), ("imgB", 0.4)]})
    path = tmp_path / "dataset.jsonl"
    save_matched(path, [md])
    (loaded,) = load_matched(path)
    assert loaded.dialogue == dialogue
    assert loaded.attachments == md.attachments


def test_filter_and_assemble_match_naive_reference():
    rng = np.random.default_rng(28)
    for _ in range(25):
        dialogues = [make_dialogue(f"d{j}", ["w", "x", "y", "z"]) for j in range(8)]
        entries = []
        for dialogue in dialogues:
            for turn in range(4):
                if rng.random() < 0.3:
                    continue
                images = rng.choice(40, size=int(rng.integers(1, 12)), replace=False)
                entries.extend(
                    _entry(dialogue.dialogue_id, turn, f"i{int(img):02d}", float(rng.normal()))
                    for img in images
                )
        if not entries:
            continue
        config = PipelineConfig(tau2_percentile=float(rng.choice([25, 75, 100])), max_images_per_utterance=3)

        expected_entries, _, _ = _naive_two_stage(entries, config.tau2_percentile)
        expected = {}
        for e in expected_entries:
            expected.setdefault((e.dialogue_id, e.turn_index), []).append(e)
        expected_attachments = {
            key: [
                (e.image_id, e.combined)
                for e in sorted(group, key=lambda e: (-e.combined, e.image_id))[:3]
            ]
            for key, group in expected.items()
        }

        filtered, _ = run_filters(CandidateSet(entries=entries, k=10_000), config)
        result = assemble_dataset(dialogues, filtered, config)
        got_attachments = {
            (md.dialogue.dialogue_id, turn): images
            for md in result.matched
            for turn, images in md.attachments.items()
        }
        assert got_attachments == expected_attachments
        matched_ids = {md.dialogue.dialogue_id for md in result.matched}
        expected_ids = {d for d, _ in expected_attachments}
        assert matched_ids == expected_ids
        assert set(result.unmatched_dialogue_ids) == {
            d.dialogue_id for d in dialogues
        } - expected_ids


def test_sweep_tau2_monotone():
    rng = np.random.default_rng(27)
    entries = [
        _entry(f"d{j % 11}", 0, f"i{int(rng.integers(0, 40))}", float(rng.normal()))
        for j in range(500)
    ]
    rows = sweep_tau2(CandidateSet(entries=entries, k=500), (25, 50, 75, 100))
    retained = [row["entries_retained"] for row in rows]
    assert retained == sorted(retained)
    assert rows[-1]["tau2_percentile"] == 100.0
