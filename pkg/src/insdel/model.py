"""Canvas layout, slot supervision, greedy parallel insertion and deletion labelling.

A canvas is ``[CLS] source [SEP] target-so-far [SEP]``. Insertion slots sit
immediately left of each target token and of the final ``[SEP]``, so a canvas
with ``t`` target tokens has ``t + 1`` slots. Each slot is an independent
categorical over the vocabulary, where ``[EOS_SLOT]`` means "insert nothing
here".
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .transformer import DecoderParams, ModelConfig, decoder_forward, project_head

PAD, CLS, SEP, EOS_SLOT = 0, 1, 2, 3
LETTERS = "abcdefghijklmnopqrstuvwxyz"
LETTER_OFFSET = 4
TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[EOS_SLOT]") + tuple(LETTERS)
VOCAB_SIZE = len(TOKENS)
STRUCTURAL = (PAD, CLS, SEP)
_LETTER_SET = frozenset(LETTERS)


def token_id(token: str) -> int:
    return TOKENS.index(token)


def letter_ids(letters: str) -> list[int]:
    return [ord(c) - ord("a") + LETTER_OFFSET for c in letters]


def is_letter_id(i: int) -> bool:
    return LETTER_OFFSET <= i < VOCAB_SIZE


def check_letters(text: str, what: str = "sequence") -> None:
    bad = set(text) - _LETTER_SET
    if bad:
        raise ContractViolation(f"{what} must contain only lowercase letters, found {sorted(bad)!r}")


@dataclass(frozen=True)
class Canvas:
    source: str
    target: str
    alignment: tuple[int, ...] | None = None

    def __len__(self) -> int:
        return len(self.source) + len(self.target) + 3

    @property
    def tokens(self) -> np.ndarray:
        return np.array([CLS, *letter_ids(self.source), SEP, *letter_ids(self.target), SEP], dtype=np.int64)

    @property
    def segments(self) -> np.ndarray:
        seg = np.ones(len(self), dtype=np.int64)
        seg[: len(self.source) + 2] = 0
        return seg

    @property
    def source_span(self) -> range:
        return range(1, 1 + len(self.source))

    @property
    def target_span(self) -> range:
        start = len(self.source) + 2
        return range(start, start + len(self.target))

    @property
    def anchors(self) -> range:
        """Canvas index of the token each slot sits left of (last one is the final [SEP])."""
        start = len(self.source) + 2
        return range(start, start + len(self.target) + 1)

    @property
    def num_slots(self) -> int:
        return len(self.target) + 1

    def token_names(self) -> list[str]:
        return ["[CLS]", *self.source, "[SEP]", *self.target, "[SEP]"]


def build_canvas(source: str, partial_target: str = "", alignment: Sequence[int] | None = None) -> Canvas:
    check_letters(source, "source")
    check_letters(partial_target, "target")
    if alignment is not None:
        alignment = tuple(int(a) for a in alignment)
        if len(alignment) != len(partial_target):
            raise ContractViolation(f"alignment has {len(alignment)} entries for {len(partial_target)} target tokens")
        if any(b <= a for a, b in zip(alignment, alignment[1:])) or any(a < 0 for a in alignment):
            raise ContractViolation(f"alignment {alignment} is not strictly increasing")
    return Canvas(source, partial_target, alignment)


# ---------------------------------------------------------------- slot supervision

def _slot_bounds(alignment: Sequence[int], n: int) -> list[tuple[int, int]]:
    edges = [-1, *alignment, n]
    return [(lo + 1, hi) for lo, hi in zip(edges, edges[1:])]


def slot_spans(alignment: Sequence[int], full_target: str, present: str | None = None) -> list[str]:
    """Missing ground-truth tokens each slot is responsible for, in slot order."""
    alignment = list(alignment)
    n = len(full_target)
    if any(b <= a for a, b in zip(alignment, alignment[1:])) or any(not 0 <= a < n for a in alignment):
        raise ContractViolation(f"alignment {alignment} is not strictly increasing within a target of length {n}")
    if present is not None and "".join(full_target[a] for a in alignment) != present:
        raise ContractViolation(f"alignment {alignment} does not witness {present!r} inside {full_target!r}")
    return [full_target[lo:hi] for lo, hi in _slot_bounds(alignment, n)]


def balanced_tree_weights(span: str, tau: float = 1.0, uniform: bool = False) -> np.ndarray:
    """Soft target over the vocabulary favouring the middle of ``span``.

    Position ``j`` gets weight proportional to ``exp(-|j - (len-1)/2| / tau)``;
    an empty span puts all mass on ``[EOS_SLOT]``. Repeated letters pool weight.
    """
    w = np.zeros(VOCAB_SIZE)
    if not span:
        w[EOS_SLOT] = 1.0
        return w
    if uniform:
        raw = np.ones(len(span))
    else:
        if tau <= 0:
            raise ValueError("tau must be positive")
        dist = np.abs(np.arange(len(span)) - (len(span) - 1) / 2)
        raw = np.exp(-(dist - dist.min()) / tau)
    np.add.at(w, letter_ids(span), raw / raw.sum())
    return w


@dataclass
class SlotTargets:
    spans: list[str]
    weights: np.ndarray  # (slots, VOCAB_SIZE)
    bounds: list[tuple[int, int]]  # [lo, hi) index range of each span in the full target
    full_target: str

    def __len__(self) -> int:
        return len(self.spans)


def slot_targets(canvas: Canvas, full_target: str, tau: float = 1.0, uniform: bool = False) -> SlotTargets:
    if canvas.alignment is None:
        raise ContractViolation("slot targets need a canvas with an alignment")
    spans = slot_spans(canvas.alignment, full_target, canvas.target)
    weights = np.stack([balanced_tree_weights(s, tau, uniform) for s in spans])
    return SlotTargets(spans, weights, _slot_bounds(canvas.alignment, len(full_target)), full_target)


# ---------------------------------------------------------------- batching

def pad_batch(canvases: Sequence[Canvas]):
    """Right-pad canvases into (batch, t) token, segment and pad-mask arrays."""
    t = max(len(c) for c in canvases)
    tokens = np.full((len(canvases), t), PAD, dtype=np.int64)
    segments = np.ones((len(canvases), t), dtype=np.int64)
    pad = np.ones((len(canvases), t), dtype=bool)
    for i, c in enumerate(canvases):
        n = len(c)
        tokens[i, :n] = c.tokens
        segments[i, :n] = c.segments
        pad[i, :n] = False
    return tokens, segments, pad


# ---------------------------------------------------------------- insertion

def insertion_logits_batch(canvases: Sequence[Canvas], params: DecoderParams, config: ModelConfig,
                           train_mode: bool = False, rng=None) -> tuple[Tensor, list[int]]:
    """Slot logits for a batch, stacked as (total_slots, vocab), plus each canvas's first row."""
    tokens, segments, pad = pad_batch(canvases)
    b, t = tokens.shape
    hidden = decoder_forward(tokens, segments, pad, params, config, train_mode, rng)
    rows, offsets = [], []
    for i, c in enumerate(canvases):
        offsets.append(len(rows))
        rows.extend(i * t + a for a in c.anchors)
    anchors = ad.take_rows(ad.reshape(hidden, (b * t, config.d_model)), rows)
    return project_head(anchors, params), offsets


def insertion_logits(canvas: Canvas, params: DecoderParams, config: ModelConfig,
                     train_mode: bool = False, rng=None) -> Tensor:
    return insertion_logits_batch([canvas], params, config, train_mode, rng)[0]


def insertion_loss(logits: Tensor, targets: SlotTargets) -> Tensor:
    if logits.shape[0] != len(targets):
        raise ContractViolation(f"{logits.shape[0]} logit rows for {len(targets)} slots")
    return ad.weighted_cross_entropy(logits, targets.weights)


@dataclass(frozen=True)
class InsertionRecord:
    slot: int
    token: str | None
    span_valid: bool | None = None
    position: int | None = None  # index in the post-insertion canvas
    target_index: int | None = None  # aligned ground-truth index when span_valid
    suppressed: bool = False  # argmax was a structural token


def _closest_to_centre(full_target: str, token: str, lo: int, hi: int) -> int:
    centre = (lo + hi - 1) / 2
    hits = [j for j in range(lo, hi) if full_target[j] == token]
    return min(hits, key=lambda j: (abs(j - centre), j))


def greedy_parallel_insert(canvas: Canvas, logits, targets: SlotTargets | None = None,
                           max_target_len: int | None = None) -> tuple[Canvas, list[InsertionRecord]]:
    """Insert each slot's argmax token left of its anchor, all slots at once.

    ``targets`` enables span-validity flags and carries the
    alignment forward when every insertion is valid. ``max_target_len`` drops
    the rightmost insertions that would overflow the canvas.
    """
    scores = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if scores.shape != (canvas.num_slots, VOCAB_SIZE):
        raise ContractViolation(f"logits shape {scores.shape} does not match {canvas.num_slots} slots")
    choice = scores.argmax(axis=1)
    budget = None if max_target_len is None else max(0, max_target_len - len(canvas.target))

    picks: list[tuple[int, str | None, bool]] = []
    for slot, c in enumerate(choice):
        c = int(c)
        if c == EOS_SLOT:
            continue
        if c in STRUCTURAL:
            picks.append((slot, None, True))
        elif budget is None or budget > 0:
            picks.append((slot, TOKENS[c], False))
            budget = None if budget is None else budget - 1

    inserted = {slot: tok for slot, tok, sup in picks if not sup}
    new_target, records_pos = [], {}
    base = len(canvas.source) + 2
    for slot in range(canvas.num_slots):
        tok = inserted.get(slot)
        if tok is not None:
            records_pos[slot] = base + len(new_target)
            new_target.append(tok)
        if slot < len(canvas.target):
            new_target.append(canvas.target[slot])

    records = []
    for slot, tok, suppressed in picks:
        if suppressed:
            records.append(InsertionRecord(slot, None, suppressed=True))
            continue
        valid, idx = None, None
        if targets is not None:
            valid = tok in targets.spans[slot]
            if valid:
                idx = _closest_to_centre(targets.full_target, tok, *targets.bounds[slot])
        records.append(InsertionRecord(slot, tok, valid, records_pos[slot], idx))

    alignment = None
    if canvas.alignment is not None and all(r.span_valid for r in records if r.token):
        by_slot = {r.slot: r.target_index for r in records if r.token}
        new_align = []
        for slot in range(canvas.num_slots):
            if slot in by_slot:
                new_align.append(by_slot[slot])
            if slot < len(canvas.target):
                new_align.append(canvas.alignment[slot])
        alignment = tuple(new_align)
    return Canvas(canvas.source, "".join(new_target), alignment), records


# ---------------------------------------------------------------- deletion

def deletion_probs_batch(canvases: Sequence[Canvas], params: DecoderParams, config: ModelConfig,
                         train_mode: bool = False, rng=None) -> Tensor:
    """Per-position delete probabilities, shape (batch, t) with right padding."""
    tokens, segments, pad = pad_batch(canvases)
    hidden = decoder_forward(tokens, segments, pad, params, config, train_mode, rng)
    logit = project_head(hidden, params)
    return ad.sigmoid(ad.reshape(logit, tokens.shape))


def deletion_probs(canvas: Canvas, params: DecoderParams, config: ModelConfig,
                   train_mode: bool = False, rng=None) -> Tensor:
    return ad.reshape(deletion_probs_batch([canvas], params, config, train_mode, rng), (len(canvas),))


@dataclass
class DeletionTarget:
    labels: np.ndarray
    mask: np.ndarray

    @property
    def has_signal(self) -> bool:
        return bool(self.labels.any())


def deletion_targets(records: Sequence[InsertionRecord], canvas_after: Canvas) -> DeletionTarget:
    """On-policy labels: delete exactly the insertions that fell outside their slot's span."""
    n = len(canvas_after)
    mask = np.zeros(n, dtype=np.int8)
    mask[list(canvas_after.target_span)] = 1
    labels = np.zeros(n, dtype=np.int8)
    tokens = canvas_after.token_names()
    for r in records:
        if r.token is None:
            continue
        if r.position is None or r.position not in canvas_after.target_span or tokens[r.position] != r.token:
            raise ContractViolation(f"record {r} does not match the canvas")
        if r.span_valid is None:
            raise ContractViolation("deletion labels need span-validity on every insertion")
        if not r.span_valid:
            labels[r.position] = 1
    return DeletionTarget(labels, mask)


def deletion_loss(probs: Tensor, targets: DeletionTarget) -> Tensor:
    if probs.shape != targets.labels.shape:
        raise ContractViolation(f"probs {probs.shape} vs targets {targets.labels.shape}")
    return ad.binary_cross_entropy(probs, targets.labels, targets.mask)


def deletion_decisions(canvas: Canvas, probs, threshold: float = 0.5) -> np.ndarray:
    p = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if p.shape != (len(canvas),):
        raise ContractViolation(f"{p.shape} probabilities for a canvas of length {len(canvas)}")
    doomed = np.zeros(len(canvas), dtype=bool)
    span = canvas.target_span
    doomed[span.start:span.stop] = p[span.start:span.stop] > threshold
    return doomed


def apply_deletions(canvas: Canvas, probs, threshold: float = 0.5) -> Canvas:
    """Drop every target-span token whose delete probability exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    doomed = deletion_decisions(canvas, probs, threshold)
    return delete_positions(canvas, np.flatnonzero(doomed))


def delete_positions(canvas: Canvas, positions) -> Canvas:
    start = canvas.target_span.start
    drop = {int(p) - start for p in positions}
    if any(not 0 <= d < len(canvas.target) for d in drop):
        raise ContractViolation("only target-span positions can be deleted")
    target = "".join(ch for k, ch in enumerate(canvas.target) if k not in drop)
    alignment = None
    if canvas.alignment is not None:
        alignment = tuple(a for k, a in enumerate(canvas.alignment) if k not in drop)
    return Canvas(canvas.source, target, alignment)
