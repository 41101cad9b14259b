"""Iterative insert-then-delete decoding, five-row traces and corpus evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import no_grad
from .bleu import bleu_corpus
from .model import (
    EOS_SLOT,
    VOCAB_SIZE,
    Canvas,
    InsertionRecord,
    build_canvas,
    deletion_decisions,
    deletion_probs,
    delete_positions,
    greedy_parallel_insert,
    insertion_logits,
    letter_ids,
    slot_targets,
)
from .tasks import Example
from .transformer import DecoderParams, ModelConfig

MODES = ("ins-only", "ins-del")
ROW_LABELS = (
    "Inputs to insertion model",
    "Predicted insertions",
    "Inputs to deletion model",
    "Predicted deletions",
    "Outputs",
)

Inserter = Callable[[Canvas], np.ndarray]
Deleter = Callable[[Canvas], np.ndarray]


@dataclass(frozen=True)
class DecodeOptions:
    mode: str = "ins-del"
    max_iterations: int | None = None  # None: 2 * len(source) + 2
    deletion_threshold: float = 0.5
    trace: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.deletion_threshold < 1.0:
            raise ValueError("deletion_threshold must be in (0, 1)")

    def iteration_cap(self, source: str) -> int:
        return self.max_iterations if self.max_iterations is not None else 2 * len(source) + 2


@dataclass
class IterationTrace:
    before: Canvas
    insertions: list[InsertionRecord]
    inserted: Canvas
    deletions: list[int]  # positions in ``inserted``
    after: Canvas

    @property
    def edits(self) -> int:
        return sum(1 for r in self.insertions if r.token) + len(self.deletions)


@dataclass
class DecodeTrace:
    iterations: list[IterationTrace] = field(default_factory=list)

    @property
    def productive_iterations(self) -> int:
        return sum(1 for it in self.iterations if it.edits)

    @property
    def insertions(self) -> int:
        return sum(1 for it in self.iterations for r in it.insertions if r.token)

    @property
    def deletions(self) -> int:
        return sum(len(it.deletions) for it in self.iterations)


class ParamsInserter:
    """Slot logits from a trained insertion decoder (eval mode)."""

    def __init__(self, params: DecoderParams, config: ModelConfig):
        self.params, self.config = params, config

    def __call__(self, canvas: Canvas) -> np.ndarray:
        with no_grad():
            return insertion_logits(canvas, self.params, self.config).data


class ParamsDeleter:
    def __init__(self, params: DecoderParams, config: ModelConfig):
        self.params, self.config = params, config

    def __call__(self, canvas: Canvas) -> np.ndarray:
        with no_grad():
            return deletion_probs(canvas, self.params, self.config).data


class OracleInserter:
    """Stand-in for the insertion model that always picks each slot's span centre.

    Needs the decode to run with ``reference`` so canvases carry an alignment.
    """

    def __init__(self, reference: str):
        self.reference = reference

    @classmethod
    def for_example(cls, example: Example) -> "OracleInserter":
        return cls(example.target)

    def __call__(self, canvas: Canvas) -> np.ndarray:
        targets = slot_targets(canvas, self.reference)
        out = np.zeros((canvas.num_slots, VOCAB_SIZE))
        for slot, span in enumerate(targets.spans):
            out[slot, letter_ids(span[(len(span) - 1) // 2])[0] if span else EOS_SLOT] = 1.0
        return out


def max_target_len(source: str, config: ModelConfig | None) -> int | None:
    return None if config is None else config.max_positions - len(source) - 3


def decode(source: str, inserter: Inserter, deleter: Deleter | None, options: DecodeOptions,
           start: Canvas | None = None, reference: str | None = None,
           target_cap: int | None = None) -> tuple[str, DecodeTrace]:
    """Alternate parallel insertion and (in ins-del mode) deletion until nothing changes.

    Stops after an iteration with no edits or at the iteration cap. With a
    ``reference`` the canvases carry an alignment so insertions are checked
    against their slot spans.
    """
    canvas = start if start is not None else build_canvas(source, "", () if reference is not None else None)
    use_del = options.mode == "ins-del"
    if use_del and deleter is None:
        raise ValueError("ins-del decoding needs a deletion model")
    trace = DecodeTrace()
    for _ in range(options.iteration_cap(source)):
        targets = slot_targets(canvas, reference) if reference is not None and canvas.alignment is not None else None
        inserted, records = greedy_parallel_insert(canvas, inserter(canvas), targets, target_cap)
        doomed: list[int] = []
        if use_del and inserted.target:
            flags = deletion_decisions(inserted, deleter(inserted), options.deletion_threshold)
            doomed = np.flatnonzero(flags).tolist()
        after = delete_positions(inserted, doomed) if doomed else inserted
        it = IterationTrace(canvas, records, inserted, doomed, after)
        trace.iterations.append(it)
        canvas = after
        if not it.edits:
            break
    return canvas.target, trace


# ---------------------------------------------------------------- traces

def _insert_cells(it: IterationTrace) -> list[str]:
    cells = [""] * len(it.before)
    for r in it.insertions:
        if r.token:
            cells[it.before.anchors[r.slot]] = r.token
    return cells


def render_iteration(it: IterationTrace) -> list[list[str]]:
    dels = [""] * len(it.inserted)
    names = it.inserted.token_names()
    for p in it.deletions:
        dels[p] = names[p]
    return [
        it.before.token_names(),
        _insert_cells(it),
        names,
        dels,
        it.after.token_names(),
    ]


def render_trace(trace: DecodeTrace) -> str:
    """Five tab-separated rows per iteration, cells aligned with the row they annotate."""
    lines = []
    for k, it in enumerate(trace.iterations, 1):
        lines.append(f"# iteration {k}")
        for label, row in zip(ROW_LABELS, render_iteration(it)):
            lines.append("\t".join([label, *row]).rstrip("\t"))
    return "\n".join(lines) + "\n"


EXAMPLE_HEADER = "## example"


def render_trace_file(dataset: Sequence[Example], traces: Sequence[DecodeTrace]) -> str:
    """Concatenate per-example traces, each under a ``## example k<TAB>source<TAB>reference`` line."""
    parts = []
    for k, (ex, trace) in enumerate(zip(dataset, traces)):
        parts.append(f"{EXAMPLE_HEADER} {k}\t{ex.source}\t{ex.target}\n" + render_trace(trace))
    return "".join(parts)


def split_trace_file(text: str) -> list[tuple[str, str, str]]:
    """Inverse of render_trace_file: (source, reference, trace text) per example."""
    out = []
    for line in text.splitlines(keepends=True):
        if line.startswith(EXAMPLE_HEADER):
            _, source, reference = line.rstrip("\n").split("\t")
            out.append([source, reference, ""])
        elif out:
            out[-1][2] += line
        else:
            raise ValueError("trace file must start with an example header")
    return [tuple(x) for x in out]


def _canvas_from_names(names: Sequence[str]) -> Canvas:
    if names[0] != "[CLS]" or names[-1] != "[SEP]" or names.count("[SEP]") != 2:
        raise ValueError(f"malformed canvas row: {names}")
    mid = names.index("[SEP]")
    return build_canvas("".join(names[1:mid]), "".join(names[mid + 1:-1]))


def replay_trace_text(text: str) -> list[tuple[Canvas, Canvas, Canvas]]:
    """Re-apply the edits written in a rendered trace and check each row against them.

    Returns (before, inserted, after) canvases per iteration; raises ValueError
    on any row that the recorded edits do not reproduce.
    """
    blocks: list[list[list[str]]] = []
    for line in text.splitlines():
        if line.startswith("# iteration"):
            blocks.append([])
            continue
        label, *cells = line.split("\t")
        if label != ROW_LABELS[len(blocks[-1])]:
            raise ValueError(f"unexpected row label {label!r}")
        blocks[-1].append(cells)

    out = []
    prev_after: Canvas | None = None
    for rows in blocks:
        if len(rows) != len(ROW_LABELS):
            raise ValueError("incomplete iteration block")
        before = _canvas_from_names(rows[0])
        if prev_after is not None and before != prev_after:
            raise ValueError("iteration does not start from the previous output")
        ins = rows[1] + [""] * (len(rows[0]) - len(rows[1]))
        names = before.token_names()
        built = []
        for k, tok in enumerate(names):
            if ins[k]:
                if k not in before.anchors:
                    raise ValueError(f"insertion at non-slot position {k}")
                built.append(ins[k])
            built.append(tok)
        inserted = _canvas_from_names(built)
        if inserted != _canvas_from_names(rows[2]):
            raise ValueError("insertions do not reproduce the deletion-model input")
        dels = rows[3] + [""] * (len(rows[2]) - len(rows[3]))
        doomed = [k for k, c in enumerate(dels) if c]
        if any(dels[k] != rows[2][k] for k in doomed):
            raise ValueError("deletion cell does not match the token it removes")
        after = delete_positions(inserted, doomed)
        if after != _canvas_from_names(rows[4]):
            raise ValueError("deletions do not reproduce the output row")
        out.append((before, inserted, after))
        prev_after = after
    return out


def replay(trace: DecodeTrace) -> Canvas | None:
    """Apply the structured edits from the first canvas; check every intermediate canvas."""
    canvas = trace.iterations[0].before if trace.iterations else None
    for it in trace.iterations:
        if _strip(it.before) != _strip(canvas):
            raise ValueError("trace is not contiguous")
        target = []
        inserted = {r.slot: r.token for r in it.insertions if r.token}
        for slot in range(canvas.num_slots):
            if slot in inserted:
                target.append(inserted[slot])
            if slot < len(canvas.target):
                target.append(canvas.target[slot])
        mid = Canvas(canvas.source, "".join(target))
        if mid != _strip(it.inserted):
            raise ValueError("insertions do not reproduce the recorded canvas")
        canvas = delete_positions(mid, it.deletions)
        if canvas != _strip(it.after):
            raise ValueError("deletions do not reproduce the recorded canvas")
    return canvas


def _strip(c: Canvas) -> Canvas:
    return Canvas(c.source, c.target)


# ---------------------------------------------------------------- corpus evaluation

def evaluate(dataset: Sequence[Example], inserter_for: Callable[[Example], Inserter], deleter: Deleter | None,
             options: DecodeOptions, config: ModelConfig | None = None, oracle: bool = False,
             traces: list | None = None) -> dict:
    """Decode every example and summarise. ``inserter_for`` builds the inserter per example
    (the oracle needs the reference); with ``oracle`` the decode tracks alignments."""
    if not dataset:
        raise ValueError("empty dataset")
    outputs, iters, n_ins, n_del = [], [], [], []
    for ex in dataset:
        out, trace = decode(ex.source, inserter_for(ex), deleter if options.mode == "ins-del" else None,
                            options, reference=ex.target if oracle else None,
                            target_cap=max_target_len(ex.source, config))
        outputs.append(out)
        iters.append(trace.productive_iterations)
        n_ins.append(trace.insertions)
        n_del.append(trace.deletions)
        if traces is not None:
            traces.append(trace)
    refs = [ex.target for ex in dataset]
    return {
        "mode": options.mode,
        "examples": len(dataset),
        "bleu": bleu_corpus([list(o) for o in outputs], [list(r) for r in refs]),
        "exact_match_rate": float(np.mean([o == r for o, r in zip(outputs, refs)])),
        "mean_iterations": float(np.mean(iters)),
        "mean_insertions": float(np.mean(n_ins)),
        "mean_deletions": float(np.mean(n_del)),
    }


def evaluate_params(dataset: Sequence[Example], ins: DecoderParams, dele: DecoderParams | None,
                    config: ModelConfig, options: DecodeOptions, traces: list | None = None) -> dict:
    inserter = ParamsInserter(ins, config)
    deleter = ParamsDeleter(dele, config) if dele is not None and options.mode == "ins-del" else None
    return evaluate(dataset, lambda ex: inserter, deleter, options, config, traces=traces)

