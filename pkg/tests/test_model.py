import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insdel.autodiff import ContractViolation, Tensor
from insdel.model import (
    CLS,
    EOS_SLOT,
    LETTERS,
    PAD,
    SEP,
    VOCAB_SIZE,
    Canvas,
    InsertionRecord,
    apply_deletions,
    balanced_tree_weights,
    build_canvas,
    deletion_loss,
    deletion_probs,
    deletion_targets,
    greedy_parallel_insert,
    insertion_logits,
    insertion_loss,
    slot_spans,
    slot_targets,
    token_id,
)
from insdel.transformer import ModelConfig, init_decoder_params

TINY = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ffn=32, max_positions=32, dropout_rate=0.0)


def scripted_logits(canvas, picks):
    """Logits whose argmax is picks[slot] (a letter) or [EOS_SLOT] elsewhere."""
    out = np.zeros((canvas.num_slots, VOCAB_SIZE))
    out[:, EOS_SLOT] = 1.0
    for slot, letter in picks.items():
        out[slot, token_id(letter)] = 2.0
    return out


def is_subsequence(small, big):
    it = iter(big)
    return all(ch in it for ch in small)


@st.composite
def target_and_alignment(draw, max_len=12):
    target = draw(st.text(alphabet=LETTERS, min_size=1, max_size=max_len))
    kept = draw(st.sets(st.integers(0, len(target) - 1)))
    alignment = sorted(kept)
    return target, alignment


# ---------------------------------------------------------------- vocabulary and canvas


def test_vocab_layout():
    assert VOCAB_SIZE == 30
    assert (PAD, CLS, SEP, EOS_SLOT) == (0, 1, 2, 3)
    assert token_id("a") == 4 and token_id("z") == 29


def test_empty_target_canvas():
    c = build_canvas("cdefg")
    assert c.token_names() == ["[CLS]", "c", "d", "e", "f", "g", "[SEP]", "[SEP]"]
    assert c.num_slots == 1
    assert list(c.segments) == [0] * 7 + [1]


def test_canvas_length_and_segments():
    c = build_canvas("abc", "xy")
    assert len(c) == 3 + 2 + 3
    assert list(c.segments) == [0, 0, 0, 0, 0, 1, 1, 1]
    assert list(c.target_span) == [5, 6] and list(c.anchors) == [5, 6, 7]


def test_table1_partial_canvas_slots():
    c = build_canvas("efghijklm", "pvw", [1, 6, 8])
    names = c.token_names()
    assert [names[a] for a in c.anchors] == ["p", "v", "w", "[SEP]"]
    assert c.num_slots == 4
    p = init_decoder_params(TINY, VOCAB_SIZE, np.random.default_rng(0))
    assert insertion_logits(c, p, TINY).shape == (4, VOCAB_SIZE)


def test_build_canvas_rejects_structural_tokens():
    with pytest.raises(ContractViolation):
        build_canvas("ab[SEP]")
    with pytest.raises(ContractViolation):
        build_canvas("ab", "c d")


def test_build_canvas_rejects_non_increasing_alignment():
    with pytest.raises(ContractViolation):
        build_canvas("ab", "xy", [2, 1])


# ---------------------------------------------------------------- slot spans and weights


def test_slot_spans_examples():
    assert slot_spans([0, 2], "abc", "ac") == ["", "b", ""]
    assert slot_spans([2], "abcde", "c") == ["ab", "de"]
    assert slot_spans([0, 1, 2], "abc", "abc") == ["", "", "", ""]


def test_slot_spans_rejects_bad_witness():
    with pytest.raises(ContractViolation):
        slot_spans([0, 1], "abc", "ac")
    with pytest.raises(ContractViolation):
        slot_spans([1, 1], "abc")


@settings(max_examples=150, deadline=None)
@given(target_and_alignment())
def test_slot_count_and_span_partition_laws(case):
    target, alignment = case
    present = "".join(target[a] for a in alignment)
    canvas = build_canvas("abc", present, alignment)
    spans = slot_spans(alignment, target, present)
    assert len(spans) == canvas.num_slots == len(present) + 1
    missing = "".join(ch for k, ch in enumerate(target) if k not in set(alignment))
    assert "".join(spans) == missing
    np.testing.assert_allclose(slot_targets(canvas, target).weights.sum(axis=1), 1.0)


def test_balanced_weights_singleton():
    for tau in (0.1, 1.0, 10.0):
        w = balanced_tree_weights("b", tau)
        assert w[token_id("b")] == 1.0 and w.sum() == 1.0


def test_balanced_weights_three_span_tau_one():
    w = balanced_tree_weights("bcd", 1.0)
    z = 2 * math.exp(-1) + 1
    expected = [math.exp(-1) / z, 1 / z, math.exp(-1) / z]  # 0.2119, 0.5761, 0.2119
    np.testing.assert_allclose(w[[token_id(c) for c in "bcd"]], expected, rtol=1e-12)
    assert expected[0] == pytest.approx(0.2119, abs=1e-4) and expected[1] == pytest.approx(0.5761, abs=1e-4)


def test_balanced_weights_small_tau_is_one_hot_centre():
    w = balanced_tree_weights("bcd", 1e-3)
    assert w[token_id("c")] == pytest.approx(1.0)


def test_balanced_weights_empty_span_is_eos():
    w = balanced_tree_weights("", 1.0)
    assert w[EOS_SLOT] == 1.0 and w.sum() == 1.0


def test_uniform_weights_mode():
    w = balanced_tree_weights("bcde", uniform=True)
    np.testing.assert_allclose(w[[token_id(c) for c in "bcde"]], 0.25)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 5.0))
def test_balanced_weights_symmetric_under_reversal(length, tau):
    # distinct letters so each position owns its vocabulary entry
    span = LETTERS[:length]
    w = balanced_tree_weights(span, tau)
    per_pos = np.array([w[token_id(c)] for c in span])
    np.testing.assert_allclose(per_pos, per_pos[::-1], rtol=1e-12)
    centre = (len(span) - 1) / 2
    order = np.argsort([abs(j - centre) for j in range(len(span))], kind="stable")
    assert np.all(np.diff(per_pos[order]) <= 1e-15)


# ---------------------------------------------------------------- insertion


def test_insertion_logits_rows_track_slot_count():
    p = init_decoder_params(TINY, VOCAB_SIZE, np.random.default_rng(0))
    assert insertion_logits(build_canvas("abc"), p, TINY).shape == (1, VOCAB_SIZE)
    assert insertion_logits(build_canvas("abc", "xyz"), p, TINY).shape == (4, VOCAB_SIZE)


def test_insertion_loss_uniform_singletons_is_ln30():
    c = build_canvas("abc", "b", [1])
    targets = slot_targets(c, "abc")
    assert targets.spans == ["a", "c"]
    assert insertion_loss(Tensor(np.zeros((2, VOCAB_SIZE))), targets).item() == pytest.approx(math.log(30), abs=1e-6)


def test_insertion_loss_confident_correct_is_near_zero():
    c = build_canvas("abc", "b", [1])
    logits = np.zeros((2, VOCAB_SIZE))
    logits[0, token_id("a")] = logits[1, token_id("c")] = 60.0
    assert insertion_loss(Tensor(logits), slot_targets(c, "abc")).item() < 1e-12


def test_insertion_loss_three_token_span_brute_force():
    c = build_canvas("abc", "", ())
    targets = slot_targets(c, "xyz", tau=1.0)
    logits = np.random.default_rng(0).normal(size=(1, VOCAB_SIZE))
    logz = math.log(sum(math.exp(v) for v in logits[0]))
    z = 2 * math.exp(-1) + 1
    brute = -sum(wc * (logits[0, token_id(ch)] - logz)
                 for ch, wc in zip("xyz", (math.exp(-1) / z, 1 / z, math.exp(-1) / z)))
    assert insertion_loss(Tensor(logits), targets).item() == pytest.approx(brute, abs=1e-5)


def test_insertion_loss_rejects_row_mismatch():
    with pytest.raises(ContractViolation):
        insertion_loss(Tensor(np.zeros((3, VOCAB_SIZE))), slot_targets(build_canvas("ab", "", ()), "ab"))


def test_greedy_insert_all_eos_is_fixpoint():
    c = build_canvas("abc", "xz", [0, 2])
    after, records = greedy_parallel_insert(c, scripted_logits(c, {}))
    assert after == c and records == []


def test_greedy_insert_places_tokens_left_of_anchors():
    c = build_canvas("abc", "mq")
    after, records = greedy_parallel_insert(c, scripted_logits(c, {0: "k", 1: "n", 2: "z"}))
    assert after.target == "kmnqz"
    assert [(r.slot, r.token, r.position) for r in records] == [(0, "k", 5), (1, "n", 7), (2, "z", 9)]
    names = after.token_names()
    assert all(names[r.position] == r.token for r in records)


def test_structural_argmax_is_suppressed():
    c = build_canvas("abc", "m")
    logits = np.zeros((2, VOCAB_SIZE))
    logits[0, SEP] = 5.0
    logits[1, PAD] = 5.0
    after, records = greedy_parallel_insert(c, logits)
    assert after.target == "m"
    assert all(r.suppressed and r.token is None for r in records) and len(records) == 2


def test_target_cap_drops_rightmost_insertions():
    c = build_canvas("abc", "mq")
    after, records = greedy_parallel_insert(c, scripted_logits(c, {0: "k", 1: "n", 2: "z"}), max_target_len=3)
    assert after.target == "kmq" and [r.token for r in records] == ["k"]


def table1_state():
    """Worked parallel-insertion example on a partial canvas.

    Source e..m, reference o..w, present tokens p r u w. One round of parallel
    insertion adds o, q, u, v (u lands in the slot whose span is {s, t}).
    """
    canvas = build_canvas("efghijklm", "pruw", [1, 3, 6, 8])
    logits = scripted_logits(canvas, {0: "o", 1: "q", 2: "u", 3: "v"})
    return canvas, logits, slot_targets(canvas, "opqrstuvw")


def test_table1_insertion_row():
    canvas, logits, targets = table1_state()
    assert targets.spans == ["o", "q", "st", "v", ""]
    after, records = greedy_parallel_insert(canvas, logits, targets)
    assert " ".join(after.token_names()[-9:]) == "o p q r u u v w [SEP]"
    assert [r.span_valid for r in records] == [True, True, False, True]
    assert after.alignment is None  # an invalid insertion breaks the alignment


def test_table1_deletion_labels_and_output():
    canvas, logits, targets = table1_state()
    after, records = greedy_parallel_insert(canvas, logits, targets)
    labels = deletion_targets(records, after)
    names = after.token_names()
    flagged = [k for k in range(len(after)) if labels.labels[k]]
    assert flagged == [records[2].position] and names[flagged[0]] == "u"
    assert flagged[0] + 1 < len(names) and names[flagged[0] + 1] == "u"  # the first of the two u's
    out = apply_deletions(after, labels.labels.astype(float), 0.5)
    assert " ".join(out.token_names()) == "[CLS] e f g h i j k l m [SEP] o p q r u v w [SEP]"


def test_valid_insertions_carry_the_alignment_forward():
    canvas = build_canvas("abcdef", "", ())
    targets = slot_targets(canvas, "ghijkl")
    after, records = greedy_parallel_insert(canvas, scripted_logits(canvas, {0: "i"}), targets)
    assert records[0].span_valid and after.alignment == (2,)
    targets = slot_targets(after, "ghijkl")
    assert targets.spans == ["gh", "jkl"]


@settings(max_examples=120, deadline=None)
@given(target_and_alignment(), st.data())
def test_span_valid_insertions_preserve_subsequence(case, data):
    target, alignment = case
    present = "".join(target[a] for a in alignment)
    canvas = build_canvas("ab", present, alignment)
    targets = slot_targets(canvas, target)
    picks = {}
    for slot, span in enumerate(targets.spans):
        if span and data.draw(st.booleans()):
            picks[slot] = data.draw(st.sampled_from(span))
    after, records = greedy_parallel_insert(canvas, scripted_logits(canvas, picks), targets)
    assert all(r.span_valid for r in records)
    assert is_subsequence(after.target, target)
    assert "".join(target[a] for a in after.alignment) == after.target


@settings(max_examples=120, deadline=None)
@given(target_and_alignment(), st.integers(0, 2**32 - 1))
def test_repair_soundness_and_label_locality(case, seed):
    target, alignment = case
    present = "".join(target[a] for a in alignment)
    canvas = build_canvas("ab", present, alignment)
    targets = slot_targets(canvas, target)
    logits = np.random.default_rng(seed).normal(size=(canvas.num_slots, VOCAB_SIZE))
    after, records = greedy_parallel_insert(canvas, logits, targets)
    labels = deletion_targets(records, after)
    created = {r.position for r in records if r.token}
    assert set(np.flatnonzero(labels.labels)) <= created
    assert not (labels.labels & ~labels.mask.astype(bool)).any()
    repaired = apply_deletions(after, labels.labels.astype(float), 0.5)
    assert is_subsequence(repaired.target, target)


# ---------------------------------------------------------------- deletion


def test_deletion_probs_shape_and_range():
    p = init_decoder_params(TINY, 1, np.random.default_rng(0))
    c = build_canvas("abc", "xyz")
    probs = deletion_probs(c, p, TINY).data
    assert probs.shape == (len(c),) and ((probs > 0) & (probs < 1)).all()


def test_deletion_targets_without_insertions():
    c = build_canvas("abc", "xy")
    t = deletion_targets([], c)
    assert not t.labels.any() and list(t.mask) == [0, 0, 0, 0, 0, 1, 1, 0]
    assert not t.has_signal


def test_deletion_targets_wrong_letter_is_labelled():
    canvas = build_canvas("abc", "pr", [0, 2])
    targets = slot_targets(canvas, "pqr")
    after, records = greedy_parallel_insert(canvas, scripted_logits(canvas, {1: "z"}), targets)
    t = deletion_targets(records, after)
    assert after.target == "pzr" and t.labels[records[0].position] == 1 and t.labels.sum() == 1


def test_deletion_targets_reject_inconsistent_record():
    c = build_canvas("abc", "xy")
    with pytest.raises(ContractViolation):
        deletion_targets([InsertionRecord(0, "q", False, 5, None)], c)


def test_deletion_loss_values():
    c = build_canvas("ab", "xyz")
    labels = deletion_targets([], c)
    half = Tensor(np.full(len(c), 0.5))
    assert deletion_loss(half, labels).item() == pytest.approx(math.log(2), abs=1e-6)
    labels.labels[5] = 1
    probs = np.full(len(c), 0.01)
    probs[5], probs[6] = 0.7, 0.2
    expected = (-math.log(0.7) - math.log(0.8) - math.log(0.99)) / 3
    assert deletion_loss(Tensor(probs), labels).item() == pytest.approx(expected, abs=1e-5)


def test_deletion_loss_empty_mask_has_no_gradient():
    c = build_canvas("ab")
    probs = Tensor(np.full(len(c), 0.3), requires_grad=True)
    loss = deletion_loss(probs, deletion_targets([], c))
    assert loss.item() == 0.0 and not loss.requires_grad


def test_apply_deletions_below_threshold_is_identity():
    c = build_canvas("ab", "xyz")
    assert apply_deletions(c, np.full(len(c), 0.4), 0.5) == c


def test_apply_deletions_never_touches_structure_or_source():
    c = build_canvas("ab", "xyz")
    out = apply_deletions(c, np.full(len(c), 0.99), 0.5)
    assert out.source == "ab" and out.target == "" and out.num_slots == 1


def test_apply_deletions_threshold_must_be_open_interval():
    c = build_canvas("ab", "x")
    with pytest.raises(ValueError):
        apply_deletions(c, np.zeros(len(c)), 1.0)


def test_losses_gradient_check_on_three_letters():
    from insdel.gradcheck import check_combined_loss

    for result in check_combined_loss():
        assert result.error < 1e-2, result


def test_canvas_equality_includes_alignment():
    assert Canvas("a", "b") != Canvas("a", "b", (0,))
