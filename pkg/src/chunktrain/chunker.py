"""Chunk construction: split long sequences, bin-pack the short ones.

A sequence longer than ``chunk_size`` becomes a *dependent group* of
contiguous slices. Everything else (including sequences of exactly
``chunk_size`` tokens) is packed into as few *standalone* chunks as possible.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError, check_positive_int
from .dataset import Batch, SequenceRecord

STANDALONE = "standalone"
DEPENDENT = "dependent"

# search nodes allowed per bin-count attempt once first-fit-decreasing fails
EXACT_NODE_LIMIT = 20_000


@dataclass(frozen=True)
class ChunkSegment:
    sequence_id: int
    start_token: int
    length: int


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    kind: str
    segments: tuple
    group_id: int | None = None
    index_in_group: int | None = None

    @property
    def total_tokens(self):
        return sum(s.length for s in self.segments)

    @property
    def is_dependent(self):
        return self.kind == DEPENDENT

    def to_dict(self):
        out = {
            "chunk_id": self.chunk_id,
            "kind": self.kind,
            "total_tokens": self.total_tokens,
            "segments": [
                {"sequence_id": s.sequence_id, "start_token": s.start_token, "length": s.length}
                for s in self.segments
            ],
        }
        if self.is_dependent:
            out["group_id"] = self.group_id
            out["index_in_group"] = self.index_in_group
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(
            chunk_id=int(d["chunk_id"]),
            kind=d["kind"],
            segments=tuple(
                ChunkSegment(int(s["sequence_id"]), int(s["start_token"]), int(s["length"]))
                for s in d["segments"]
            ),
            group_id=d.get("group_id"),
            index_in_group=d.get("index_in_group"),
        )


@dataclass
class ChunkPlan:
    chunk_size: int
    chunks: list
    groups: dict = field(default_factory=dict)
    sequence_lengths: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.chunks)

    def chunk(self, chunk_id):
        return self._index()[chunk_id]

    def _index(self):
        return {c.chunk_id: c for c in self.chunks}

    @property
    def standalone(self):
        return [c for c in self.chunks if not c.is_dependent]

    @property
    def dependent(self):
        return [c for c in self.chunks if c.is_dependent]

    def summary(self):
        n_groups = len(self.groups)
        n_dep = sum(len(v) for v in self.groups.values())
        sizes = ", ".join(str(len(v)) for v in self.groups.values())
        text = f"{len(self.chunks)} chunks ({len(self.chunks) - n_dep} standalone"
        if n_groups:
            text += f", {n_groups} group{'s' if n_groups > 1 else ''} of {sizes}"
        return text + ")"

    def fill_ratio(self):
        """Mean fraction of ``chunk_size`` occupied by real tokens."""
        if not self.chunks:
            return 0.0
        return sum(c.total_tokens for c in self.chunks) / (len(self.chunks) * self.chunk_size)

    def to_dict(self):
        return {
            "chunk_size": self.chunk_size,
            "chunks": [c.to_dict() for c in self.chunks],
            "groups": {str(k): list(v) for k, v in self.groups.items()},
            "sequence_lengths": {str(k): v for k, v in self.sequence_lengths.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            chunk_size=int(d["chunk_size"]),
            chunks=[Chunk.from_dict(c) for c in d["chunks"]],
            groups={int(k): [int(x) for x in v] for k, v in d.get("groups", {}).items()},
            sequence_lengths={int(k): int(v) for k, v in d.get("sequence_lengths", {}).items()},
        )

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def split_long(seq: SequenceRecord, chunk_size: int, first_chunk_id: int = 0) -> list:
    """Cut ``seq`` into ``ceil(length / chunk_size)`` contiguous dependent chunks."""
    chunk_size = check_positive_int(chunk_size, "chunk_size")
    if seq.length <= chunk_size:
        raise ValidationError(
            f"sequence {seq.id} has {seq.length} tokens; only sequences longer than "
            f"chunk_size={chunk_size} are split"
        )
    n = math.ceil(seq.length / chunk_size)
    chunks = []
    for i in range(n):
        start = i * chunk_size
        seg = ChunkSegment(seq.id, start, min(chunk_size, seq.length - start))
        chunks.append(Chunk(first_chunk_id + i, DEPENDENT, (seg,), group_id=seq.id, index_in_group=i))
    return chunks


def _first_fit(items, n_bins, cap):
    loads = [0] * n_bins
    bins = [[] for _ in range(n_bins)]
    for sid, size in items:
        for b in range(n_bins):
            if loads[b] + size <= cap:
                loads[b] += size
                bins[b].append(sid)
                break
        else:
            return None
    return bins


def _fit_exact(items, n_bins, cap, node_limit=EXACT_NODE_LIMIT):
    """Depth-first search for a packing into ``n_bins``; ``None`` if none found in budget."""
    loads = [0] * n_bins
    assign = [0] * len(items)
    suffix = [0] * (len(items) + 1)
    for i in range(len(items) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + items[i][1]
    nodes = 0

    def place(i):
        nonlocal nodes
        if i == len(items):
            return True
        nodes += 1
        if nodes > node_limit:
            return False
        if suffix[i] > n_bins * cap - sum(loads):
            return False
        size = items[i][1]
        tried = set()
        for b in range(n_bins):
            if loads[b] + size > cap or loads[b] in tried:
                continue
            tried.add(loads[b])
            loads[b] += size
            assign[i] = b
            if place(i + 1):
                return True
            loads[b] -= size
        return False

    if not place(0):
        return None
    bins = [[] for _ in range(n_bins)]
    for (sid, _), b in zip(items, assign):
        bins[b].append(sid)
    return [b for b in bins if b]


def pack_short(shorts, chunk_size: int) -> list:
    """Pack sequences of at most ``chunk_size`` tokens into the fewest bins found.

    For ``n_bins = 1, 2, ...`` try first-fit-decreasing restricted to
    ``n_bins`` bins, then a bounded exact search; return the first success.
    Sequences are ordered by ``(length desc, id asc)`` and ties in bin choice
    go to the lowest bin index, so the result is deterministic. Returns a list
    of bins, each a list of sequence ids.
    """
    chunk_size = check_positive_int(chunk_size, "chunk_size")
    items = sorted(((s.id, s.length) for s in shorts), key=lambda t: (-t[1], t[0]))
    for sid, size in items:
        if size > chunk_size:
            raise ValidationError(f"sequence {sid} ({size} tokens) exceeds chunk_size={chunk_size}")
    if not items:
        return []
    total = sum(size for _, size in items)
    for n_bins in range(1, len(items) + 1):
        if total > n_bins * chunk_size:
            continue
        bins = _first_fit(items, n_bins, chunk_size)
        if bins is None:
            bins = _fit_exact(items, n_bins, chunk_size)
        if bins is not None:
            return [b for b in bins if b]
    raise AssertionError("one bin per sequence is always feasible")


def ffd_bin_count(lengths, chunk_size):
    """Bin count of unrestricted first-fit-decreasing; an upper bound for :func:`pack_short`."""
    loads = []
    for size in sorted(lengths, reverse=True):
        for b, load in enumerate(loads):
            if load + size <= chunk_size:
                loads[b] += size
                break
        else:
            loads.append(size)
    return len(loads)


def construct_chunks(batch, chunk_size: int) -> ChunkPlan:
    """Reorganize a batch into a :class:`ChunkPlan`.

    Standalone chunks come first (one per packed bin, in bin order), then
    dependent groups by ascending sequence id.
    """
    chunk_size = check_positive_int(chunk_size, "chunk_size")
    seqs = batch.sequences if isinstance(batch, Batch) else tuple(batch)
    longs = sorted((s for s in seqs if s.length > chunk_size), key=lambda s: s.id)
    shorts = [s for s in seqs if s.length <= chunk_size]
    by_id = {s.id: s for s in seqs}

    chunks = []
    for bin_ids in pack_short(shorts, chunk_size):
        segs = tuple(ChunkSegment(sid, 0, by_id[sid].length) for sid in sorted(bin_ids))
        chunks.append(Chunk(len(chunks), STANDALONE, segs))
    groups = {}
    for seq in longs:
        group = split_long(seq, chunk_size, first_chunk_id=len(chunks))
        groups[seq.id] = [c.chunk_id for c in group]
        chunks.extend(group)
    return ChunkPlan(chunk_size, chunks, groups, {s.id: s.length for s in seqs})


def check_plan(plan: ChunkPlan, batch=None):
    """Return a list of invariant violations (empty when the plan is sound)."""
    problems = []
    lengths = dict(plan.sequence_lengths)
    if batch is not None:
        seqs = batch.sequences if isinstance(batch, Batch) else tuple(batch)
        lengths = {s.id: s.length for s in seqs}
    covered = {sid: [] for sid in lengths}
    for c in plan.chunks:
        if c.total_tokens > plan.chunk_size:
            problems.append(f"chunk {c.chunk_id} holds {c.total_tokens} > {plan.chunk_size} tokens")
        if c.is_dependent and len(c.segments) != 1:
            problems.append(f"dependent chunk {c.chunk_id} has {len(c.segments)} segments")
        for s in c.segments:
            if s.length < 1:
                problems.append(f"chunk {c.chunk_id} has an empty segment")
            if not c.is_dependent and (s.start_token != 0 or s.length != lengths.get(s.sequence_id)):
                problems.append(f"standalone chunk {c.chunk_id} holds a partial sequence {s.sequence_id}")
            covered.setdefault(s.sequence_id, []).append((s.start_token, s.length))
    for sid, spans in covered.items():
        pos = 0
        for start, length in sorted(spans):
            if start != pos:
                problems.append(f"sequence {sid}: token {pos} covered {'twice' if start < pos else 'never'}")
            pos = start + length
        if pos != lengths.get(sid, pos):
            problems.append(f"sequence {sid}: covered {pos} of {lengths.get(sid)} tokens")
    index = plan._index()
    for gid, ids in plan.groups.items():
        for i, cid in enumerate(ids):
            c = index[cid]
            if c.group_id != gid or c.index_in_group != i:
                problems.append(f"group {gid}: chunk {cid} mislabelled")
            if c.segments[0].start_token != i * plan.chunk_size:
                problems.append(f"group {gid}: chunk {cid} starts at {c.segments[0].start_token}")
    return problems


class ChunkConstructor(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`construct_chunks`.

    Parameters
    ----------
    chunk_size : int
        Token cap for every chunk.
    """

    def __init__(self, chunk_size=2048):
        self.chunk_size = chunk_size

    def fit(self, X=None, y=None):
        self.chunk_size_ = check_positive_int(self.chunk_size, "chunk_size")
        return self

    def transform(self, X):
        """Turn a :class:`Batch` (or list of batches) into chunk plans."""
        if not hasattr(self, "chunk_size_"):
            self.fit()
        if isinstance(X, list) and X and isinstance(X[0], Batch):
            return [construct_chunks(b, self.chunk_size_) for b in X]
        return construct_chunks(X, self.chunk_size_)
