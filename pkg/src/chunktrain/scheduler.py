"""State-aware chunk scheduling with a retained-activation budget ``k``.

Within a dependent group of ``n`` chunks, forwards ascend and backwards
descend. When ``n > k`` the first ``n - k`` chunks are forwarded once with
activations discarded (their key/value state is kept), and forwarded again
right before their own backward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError, check_positive_int

FORWARD_DISCARD = "Fd"
FORWARD_RETAIN = "Fr"
BACKWARD = "B"
EVENT_KINDS = (FORWARD_DISCARD, FORWARD_RETAIN, BACKWARD)

SAVE_KV = "save_kv"
READ_KV = "read_kv_prefix"
READ_KV_GRAD = "read_kv_grad"
ACCUMULATE_KV_GRAD = "accumulate_kv_grad"


@dataclass(frozen=True)
class ExecEvent:
    kind: str
    chunk_id: int
    tokens: int = 1
    group_id: int | None = None
    index_in_group: int | None = None
    group_size: int | None = None
    notes: tuple = ()

    @property
    def is_forward(self):
        return self.kind != BACKWARD

    def label(self):
        return f"{self.kind}{self.chunk_id}"

    def to_dict(self):
        d = {"kind": self.kind, "chunk_id": self.chunk_id, "tokens": self.tokens}
        if self.group_id is not None:
            d.update(group_id=self.group_id, index_in_group=self.index_in_group,
                     group_size=self.group_size)
        if self.notes:
            d["notes"] = list(self.notes)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], int(d["chunk_id"]), int(d.get("tokens", 1)), d.get("group_id"),
                   d.get("index_in_group"), d.get("group_size"), tuple(d.get("notes", ())))


@dataclass
class ExecutionPlan:
    events: list
    k: int
    chunk_size: int

    def labels(self):
        return [e.label() for e in self.events]

    def forward_count(self, chunk_id=None):
        return sum(1 for e in self.events if e.is_forward and (chunk_id is None or e.chunk_id == chunk_id))

    def listing(self):
        """One line per event: ``F-`` discards activations, ``F+`` retains them."""
        short = {FORWARD_DISCARD: "F-", FORWARD_RETAIN: "F+", BACKWARD: "B"}
        lines = []
        for e in self.events:
            group = "-" if e.group_id is None else e.group_id
            lines.append(f"{short[e.kind]:<2} chunk={e.chunk_id} group={group}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {"k": self.k, "chunk_size": self.chunk_size,
                "events": [e.to_dict() for e in self.events]}

    @classmethod
    def from_dict(cls, d):
        return cls([ExecEvent.from_dict(e) for e in d["events"]], int(d["k"]), int(d["chunk_size"]))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _group_events(chunk_ids, tokens, k, group_id):
    n = len(chunk_ids)

    def ev(kind, i, first_pass):
        notes = []
        if kind == BACKWARD:
            if i < n - 1:
                notes.append(READ_KV_GRAD)
            if i > 0:
                notes.append(ACCUMULATE_KV_GRAD)
        else:
            if i > 0:
                notes.append(READ_KV)
            if first_pass:
                notes.append(SAVE_KV)
        return ExecEvent(kind, chunk_ids[i], tokens[i], group_id, i, n, tuple(notes))

    if n <= k:
        events = [ev(FORWARD_RETAIN, i, True) for i in range(n)]
        events += [ev(BACKWARD, i, False) for i in reversed(range(n))]
        return events
    split = n - k
    events = [ev(FORWARD_DISCARD, i, True) for i in range(split)]
    events += [ev(FORWARD_RETAIN, i, True) for i in range(split, n)]
    events += [ev(BACKWARD, i, False) for i in reversed(range(split, n))]
    for i in reversed(range(split)):
        events += [ev(FORWARD_RETAIN, i, False), ev(BACKWARD, i, False)]
    return events


def schedule_group(n: int, k: int, chunk_size: int = 1, chunk_ids=None, tokens=None,
                   group_id: int = 0) -> ExecutionPlan:
    """Schedule one dependent group of ``n`` chunks under budget ``k``.

    Chunk ids default to ``1..n`` and every chunk to ``chunk_size`` tokens.

    >>> schedule_group(4, 1).labels()
    ['Fd1', 'Fd2', 'Fd3', 'Fr4', 'B4', 'Fr3', 'B3', 'Fr2', 'B2', 'Fr1', 'B1']
    """
    n = check_positive_int(n, "n")
    k = check_positive_int(k, "k")
    chunk_ids = list(range(1, n + 1)) if chunk_ids is None else list(chunk_ids)
    tokens = [chunk_size] * n if tokens is None else list(tokens)
    if len(chunk_ids) != n or len(tokens) != n:
        raise ValidationError("chunk_ids and tokens must have n entries")
    return ExecutionPlan(_group_events(chunk_ids, tokens, k, group_id), k, chunk_size)


def schedule_step(plan, k: int) -> ExecutionPlan:
    """Schedule every chunk of a :class:`~chunktrain.chunker.ChunkPlan` in plan order."""
    k = check_positive_int(k, "k")
    events = []
    seen = set()
    index = plan._index()
    for c in plan.chunks:
        if not c.is_dependent:
            events.append(ExecEvent(FORWARD_RETAIN, c.chunk_id, c.total_tokens, notes=(SAVE_KV,)))
            events.append(ExecEvent(BACKWARD, c.chunk_id, c.total_tokens))
        elif c.group_id not in seen:
            seen.add(c.group_id)
            ids = plan.groups[c.group_id]
            events += _group_events(ids, [index[i].total_tokens for i in ids], k, c.group_id)
    return ExecutionPlan(events, k, plan.chunk_size)


@dataclass
class PlanDiagnostics:
    peak_retained_tokens: int = 0
    recompute_token_count: int = 0
    forward_count: int = 0
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations


def validate_plan(plan: ExecutionPlan) -> PlanDiagnostics:
    """Replay ``plan`` against an abstract activation counter."""
    diag = PlanDiagnostics()
    retained = {}  # chunk_id -> tokens held by an unconsumed retaining forward
    live = 0
    forwarded = set()
    backwarded = set()
    group_fwd = {}  # group -> set of indices forwarded at least once
    group_bwd = {}
    group_size = {}
    for e in plan.events:
        if e.group_id is not None:
            size = e.group_size if e.group_size is not None else (e.index_in_group + 1)
            group_size[e.group_id] = max(group_size.get(e.group_id, 0), size)

    for pos, e in enumerate(plan.events):
        where = f"event {pos} ({e.label()})"
        if e.kind not in EVENT_KINDS:
            diag.violations.append(f"{where}: unknown kind")
            continue
        if e.is_forward:
            diag.forward_count += 1
            if e.chunk_id in forwarded:
                diag.recompute_token_count += e.tokens
            elif e.group_id is not None and e.index_in_group > 0 \
                    and e.index_in_group - 1 not in group_fwd.get(e.group_id, ()):
                diag.violations.append(f"{where}: forward before the first forward of its predecessor")
            forwarded.add(e.chunk_id)
            if e.group_id is not None:
                group_fwd.setdefault(e.group_id, set()).add(e.index_in_group)
            if e.chunk_id in backwarded:
                diag.violations.append(f"{where}: forward after backward")
            if e.kind == FORWARD_RETAIN:
                if e.chunk_id in retained:
                    diag.violations.append(f"{where}: activations already retained")
                    live -= retained[e.chunk_id]
                retained[e.chunk_id] = e.tokens
                live += e.tokens
                diag.peak_retained_tokens = max(diag.peak_retained_tokens, live)
            continue
        if e.chunk_id in backwarded:
            diag.violations.append(f"{where}: chunk backwarded twice")
        if e.chunk_id not in retained:
            diag.violations.append(f"{where}: backward without a retaining forward")
        else:
            live -= retained.pop(e.chunk_id)
        if e.group_id is not None:
            done = group_bwd.setdefault(e.group_id, set())
            nxt = e.index_in_group + 1
            if nxt < group_size[e.group_id] and nxt not in done:
                diag.violations.append(f"{where}: backward before the backward of its successor")
            done.add(e.index_in_group)
        backwarded.add(e.chunk_id)

    for cid in sorted(forwarded - backwarded):
        diag.violations.append(f"chunk {cid}: never backwarded")
    return diag


class ChunkScheduler(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform(chunk_plan) -> ExecutionPlan``.

    Parameters
    ----------
    k : int
        Number of chunks of one dependent group whose activations may be
        held at once.
    """

    def __init__(self, k=1):
        self.k = k

    def fit(self, X=None, y=None):
        self.k_ = check_positive_int(self.k, "k")
        return self

    def transform(self, X):
        if not hasattr(self, "k_"):
            self.fit()
        return schedule_step(X, self.k_)
