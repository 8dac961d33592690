"""Sequence-length datasets: ingestion, long-tail synthesis and batch sampling.

Lengths follow the strictly-less-than CDF convention: a bucket with upper
bound ``1024`` holds sequences with ``length < 1024``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import ValidationError, check_ascending, check_is_fitted, check_positive_int

KIB = 1024
MIN_SYNTH_LENGTH = 16


class RecordParseError(ValidationError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EpochExhausted(IndexError):
    """Signals that ``step`` lies past the end of the shuffled epoch."""


@dataclass(frozen=True)
class SequenceRecord:
    id: int
    length: int
    tokens: tuple | None = None

    def __post_init__(self):
        if self.length < 1:
            raise ValidationError(f"sequence {self.id}: length must be >= 1, got {self.length}")
        if self.tokens is not None and len(self.tokens) != self.length:
            raise ValidationError(
                f"sequence {self.id}: {len(self.tokens)} tokens but length {self.length}"
            )

    def to_dict(self):
        out = {"length": self.length}
        if self.tokens is not None:
            out["tokens"] = list(self.tokens)
        return out


class SequenceSet(tuple):
    """Immutable ordered collection of :class:`SequenceRecord`."""

    def __new__(cls, records: Iterable[SequenceRecord] = ()):
        return super().__new__(cls, tuple(records))

    @classmethod
    def from_lengths(cls, lengths, tokens=None):
        if tokens is None:
            tokens = [None] * len(lengths)
        return cls(
            SequenceRecord(i, int(n), None if t is None else tuple(int(x) for x in t))
            for i, (n, t) in enumerate(zip(lengths, tokens))
        )

    @property
    def lengths(self):
        return np.array([r.length for r in self], dtype=np.int64)

    def by_id(self):
        return {r.id: r for r in self}


@dataclass(frozen=True)
class DistributionSpec:
    """Bucketed CDF: ``buckets`` is a list of ``(upper_bound, cumulative_fraction)``."""

    buckets: tuple
    max_length: int

    def __post_init__(self):
        buckets = tuple((int(b), float(c)) for b, c in self.buckets)
        object.__setattr__(self, "buckets", buckets)
        if not buckets:
            raise ValidationError("distribution needs at least one bucket")
        bounds = [b for b, _ in buckets]
        fracs = [c for _, c in buckets]
        check_ascending(bounds, "bucket upper bounds")
        check_ascending(fracs, "cumulative fractions")
        if bounds[0] < 2:
            raise ValidationError("first bucket bound must be >= 2")
        if fracs[0] <= 0.0 or fracs[-1] > 1.0:
            raise ValidationError("cumulative fractions must lie in (0, 1]")
        if self.max_length < bounds[-1]:
            raise ValidationError("max_length must be >= the last bucket bound")
        if (fracs[-1] < 1.0) != (self.max_length > bounds[-1]):
            raise ValidationError(
                "last cumulative fraction must be < 1 exactly when max_length exceeds the last bound"
            )

    @property
    def bounds(self):
        return [b for b, _ in self.buckets]

    def ranges(self, min_length=MIN_SYNTH_LENGTH):
        """Half-open integer ranges ``[lo, hi)`` per bucket, tail bucket last."""
        first = self.buckets[0][0]
        lo = min_length if min_length < first else 1
        out = []
        for bound, _ in self.buckets:
            out.append((lo, bound))
            lo = bound
        if self.buckets[-1][1] < 1.0:
            out.append((lo, self.max_length + 1))
        return out


EVAL_LENGTHS = DistributionSpec(
    buckets=(
        (1 * KIB, 0.9817),
        (4 * KIB, 0.9972),
        (8 * KIB, 0.9983),
        (32 * KIB, 0.9992),
        (128 * KIB, 0.9998),
    ),
    max_length=256 * KIB,
)

LMSYS_LENGTHS = DistributionSpec(
    buckets=(
        (1 * KIB, 0.90499),
        (4 * KIB, 0.99539),
        (8 * KIB, 0.99908),
        (32 * KIB, 0.99987),
        (128 * KIB, 0.99996),
    ),
    max_length=303 * KIB,
)

PRESETS = {"eval-table5": EVAL_LENGTHS, "lmsys-table2": LMSYS_LENGTHS}


def _iter_lines(source):
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def load_lengths(source) -> SequenceSet:
    """Read line-delimited JSON records (``length`` required, ``tokens`` optional).

    ``source`` may be a path or any iterable of text lines. Records receive
    sequential ids in input order; blank lines are skipped.
    """
    records = []
    for lineno, line in enumerate(_iter_lines(source), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise RecordParseError(lineno, f"malformed record ({exc.msg})") from None
        if not isinstance(obj, dict) or "length" not in obj:
            raise RecordParseError(lineno, "record must be an object with a 'length' field")
        length = obj["length"]
        if isinstance(length, bool) or not isinstance(length, int):
            raise RecordParseError(lineno, f"length must be an integer, got {length!r}")
        if length <= 0:
            raise RecordParseError(lineno, f"length must be positive, got {length}")
        tokens = obj.get("tokens")
        if tokens is not None:
            if len(tokens) != length:
                raise RecordParseError(lineno, f"{len(tokens)} tokens but length {length}")
            tokens = tuple(int(t) for t in tokens)
        records.append(SequenceRecord(len(records), length, tokens))
    return SequenceSet(records)


def dump_records(seqs: SequenceSet, dest) -> None:
    """Write records as line-delimited JSON to a path or text stream."""
    if isinstance(dest, (str, Path)):
        with open(dest, "w", encoding="utf-8") as fh:
            dump_records(seqs, fh)
        return
    for rec in seqs:
        dest.write(json.dumps(rec.to_dict(), separators=(",", ":")))
        dest.write("\n")


def synthesize(spec: DistributionSpec, count: int, seed: int,
               min_length: int = MIN_SYNTH_LENGTH) -> SequenceSet:
    """Draw ``count`` lengths: bucket by the CDF, then log-uniform inside the bucket."""
    count = check_positive_int(count, "count")
    rng = np.random.default_rng(seed)
    ranges = spec.ranges(min_length)
    cum = np.array([c for _, c in spec.buckets] + ([1.0] if len(ranges) > len(spec.buckets) else []))
    bucket = np.searchsorted(cum, rng.random(count), side="right")
    bucket = np.minimum(bucket, len(ranges) - 1)
    lo = np.array([r[0] for r in ranges], dtype=np.float64)[bucket]
    hi = np.array([r[1] for r in ranges], dtype=np.float64)[bucket]
    u = rng.random(count)
    lengths = np.floor(np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))).astype(np.int64)
    lengths = np.clip(lengths, lo.astype(np.int64), hi.astype(np.int64) - 1)
    return SequenceSet.from_lengths(lengths.tolist())


@dataclass(frozen=True)
class Batch:
    step: int
    sequences: tuple
    global_batch_size: int
    partial: bool = False

    @property
    def lengths(self):
        return [r.length for r in self.sequences]

    @property
    def total_tokens(self):
        return sum(r.length for r in self.sequences)


def batch_from_lengths(lengths: Sequence[int], tokens=None) -> Batch:
    seqs = SequenceSet.from_lengths(lengths, tokens)
    return Batch(step=0, sequences=tuple(seqs), global_batch_size=len(seqs))


def num_steps(seqs: SequenceSet, global_batch_size: int) -> int:
    return math.ceil(len(seqs) / global_batch_size)


def sample_batch(seqs: SequenceSet, global_batch_size: int, step: int, seed: int) -> Batch:
    """Return slice ``[step*B, (step+1)*B)`` of a seed-keyed shuffle of ``seqs``."""
    if len(seqs) == 0:
        raise ValidationError("cannot sample from an empty sequence set")
    global_batch_size = check_positive_int(global_batch_size, "global_batch_size")
    step = check_positive_int(step, "step", allow_zero=True)
    start = step * global_batch_size
    if start >= len(seqs):
        raise EpochExhausted(f"step {step} is past the end of the epoch ({len(seqs)} records)")
    order = np.random.default_rng(seed).permutation(len(seqs))
    picked = tuple(seqs[i] for i in order[start:start + global_batch_size])
    return Batch(step, picked, global_batch_size, partial=len(picked) < global_batch_size)


@dataclass
class DistributionReport:
    rows: list = field(default_factory=list)
    max_length: int = 0
    count: int = 0

    def fractions(self):
        return [f for _, f in self.rows]

    def to_table(self):
        buf = io.StringIO()
        buf.write(f"{'bound':>10}  {'cumulative':>11}\n")
        for bound, frac in self.rows:
            buf.write(f"{'<' + _fmt_tokens(bound):>10}  {100 * frac:>10.3f}%\n")
        buf.write(f"{'longest':>10}  {_fmt_tokens(self.max_length):>11}\n")
        return buf.getvalue()

    def to_csv(self):
        lines = ["bound,fraction"]
        lines += [f"{bound},{frac:.6f}" for bound, frac in self.rows]
        lines.append(f"max_length,{self.max_length}")
        return "\n".join(lines) + "\n"


def _fmt_tokens(n):
    if n >= KIB and n % KIB == 0:
        return f"{n // KIB}K"
    return str(n)


def distribution_report(seqs: SequenceSet, bounds: Sequence[int]) -> DistributionReport:
    """Empirical CDF ``P(length < bound)`` at each bound, plus the longest length."""
    bounds = check_ascending(bounds, "bounds")
    lengths = np.sort(seqs.lengths)
    n = len(lengths)
    rows = []
    for b in bounds:
        below = int(np.searchsorted(lengths, b, side="left"))
        rows.append((int(b), below / n if n else 0.0))
    return DistributionReport(rows, int(lengths[-1]) if n else 0, n)


class LongTailSampler(BaseEstimator):
    """Estimate a bucketed length CDF from data and draw synthetic sets from it.

    Parameters
    ----------
    bounds : sequence of int
        Bucket upper bounds (strictly ascending).
    min_length : int
        Smallest length generated inside the first bucket.
    """

    def __init__(self, bounds=(KIB, 4 * KIB, 8 * KIB, 32 * KIB, 128 * KIB),
                 min_length=MIN_SYNTH_LENGTH):
        self.bounds = bounds
        self.min_length = min_length

    def fit(self, seqs, y=None):
        report = distribution_report(seqs, self.bounds)
        buckets = []
        for bound, frac in report.rows:
            if frac <= 0.0 or (buckets and frac <= buckets[-1][1]):
                continue
            buckets.append((bound, frac))
            if frac >= 1.0:
                break
        max_length = report.max_length
        if buckets and buckets[-1][1] >= 1.0:
            max_length = buckets[-1][0]
        self.spec_ = DistributionSpec(tuple(buckets), max_length)
        return self

    def sample(self, count, seed=0):
        check_is_fitted(self, "spec_")
        return synthesize(self.spec_, count, seed, self.min_length)
