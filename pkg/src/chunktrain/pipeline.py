"""Discrete-event simulation of 1F1B pipelines over microbatches and chunk plans.

Each stage runs a fixed per-stage op order; every op starts at the earliest
time its stage is free and its cross-stage inputs are available.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

from ._validation import ValidationError, check_nonnegative, check_positive_int

FWD = "F"
RECOMPUTE = "F'"
BWD = "B"

US_PER_UNIT = 1000


@dataclass(frozen=True)
class CostModel:
    """Forward time ``gamma + alpha*len + beta*len**2 + beta*len*prefix_len``.

    Backward time is ``backward_multiplier`` times the forward time of the
    same chunk. ``hop_latency`` is charged on every cross-stage transfer.
    """

    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    backward_multiplier: float = 2.0
    hop_latency: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "hop_latency"):
            check_nonnegative(getattr(self, name), name)
        if not self.backward_multiplier > 0:
            raise ValidationError("backward_multiplier must be > 0")

    @classmethod
    def for_transformer(cls, d_model, num_layers, num_params, chunk_overhead_tokens=0.0, **kw):
        """Coefficients in units of one token's dense forward time.

        Dense layers cost about ``2 * num_params`` FLOPs per token; causal
        attention about ``2 * d_model * num_layers`` per (query, key) pair
        once masking halves the score matrix, so
        ``beta = d_model * num_layers / num_params``. ``chunk_overhead_tokens``
        charges every chunk a fixed launch/underutilization cost.
        """
        return cls(alpha=1.0, beta=d_model * num_layers / num_params, gamma=chunk_overhead_tokens, **kw)

    def forward_time(self, length, prefix_len=0):
        return self.gamma + self.alpha * length + self.beta * length * length \
            + self.beta * length * prefix_len

    def chunk_forward_time(self, chunk):
        """Forward time of a chunk; packed sequences do not attend to each other."""
        t = self.gamma
        for seg in chunk.segments:
            t += self.alpha * seg.length + self.beta * seg.length * (seg.length + seg.start_token)
        return t

    def backward_time(self, forward_time):
        return self.backward_multiplier * forward_time


@dataclass(frozen=True)
class PipelineConfig:
    num_stages: int = 4
    k: int = 1
    chunk_size: int = 2048

    def __post_init__(self):
        check_positive_int(self.num_stages, "num_stages")
        check_positive_int(self.k, "k")
        check_positive_int(self.chunk_size, "chunk_size")


@dataclass(frozen=True)
class Interval:
    kind: str
    chunk_id: int
    start: float
    end: float

    @property
    def duration(self):
        return self.end - self.start

    def name(self):
        return f"{self.kind} chunk{self.chunk_id}"


@dataclass
class PipelineTrace:
    stages: list = field(default_factory=list)

    @property
    def num_stages(self):
        return len(self.stages)

    @property
    def makespan(self):
        ends = [iv.end for stage in self.stages for iv in stage]
        starts = [iv.start for stage in self.stages for iv in stage]
        return max(ends) - min(starts) if ends else 0.0

    @property
    def busy(self):
        return [sum(iv.duration for iv in stage) for stage in self.stages]

    @property
    def recompute_time(self):
        return [sum(iv.duration for iv in stage if iv.kind == RECOMPUTE) for stage in self.stages]

    def bubble_ratio(self, recompute_is_busy=False):
        return bubble_ratio(self, recompute_is_busy)


def bubble_ratio(trace: PipelineTrace, recompute_is_busy: bool = False) -> float:
    """Wasted stage-time inside the makespan divided by total stage-time.

    Wasted time is idle time plus, unless ``recompute_is_busy``, the time
    spent re-running forwards whose activations were discarded.
    """
    if trace.num_stages == 0:
        raise ValidationError("bubble ratio of an empty trace is undefined")
    span = trace.makespan
    if span <= 0:
        return 0.0
    busy = trace.busy
    if not recompute_is_busy:
        busy = [b - r for b, r in zip(busy, trace.recompute_time)]
    idle = sum(span - b for b in busy)
    return idle / (trace.num_stages * span)


class _Op:
    __slots__ = ("kind", "mb", "stage", "duration", "deps", "end")

    def __init__(self, kind, mb, stage, duration):
        self.kind = kind
        self.mb = mb
        self.stage = stage
        self.duration = duration
        self.deps = []
        self.end = None


def _stage_order(stage, p, fwd_order, bwd_order, recomputed):
    """Build one stage's op order on the 1F1B skeleton.

    ``fwd_order``/``bwd_order`` list microbatch keys. Microbatches in
    ``recomputed`` get a recompute forward immediately before their backward.
    """
    order = []
    fwd = list(fwd_order)
    issued = set()
    fi = 0

    def next_forward():
        nonlocal fi
        order.append((FWD, fwd[fi]))
        issued.add(fwd[fi])
        fi += 1

    for _ in range(min(p - stage, len(fwd))):
        next_forward()
    for mb in bwd_order:
        while mb not in issued:
            if fi >= len(fwd):
                raise AssertionError(f"stage {stage}: backward of {mb} precedes its forward")
            next_forward()
        if mb in recomputed:
            order.append((RECOMPUTE, mb))
        order.append((BWD, mb))
        if fi < len(fwd):
            next_forward()
    return order


def _run(orders, durations, p, cost, recompute="jit"):
    ops = {}
    for s, order in enumerate(orders):
        for kind, mb in order:
            ops[(kind, mb, s)] = _Op(kind, mb, s, durations[(kind, mb)])
    for (kind, mb, s), op in ops.items():
        if kind == FWD and s > 0:
            op.deps.append(ops[(FWD, mb, s - 1)])
        elif kind == RECOMPUTE and recompute == "chained" and s > 0:
            op.deps.append(ops[(RECOMPUTE, mb, s - 1)])
        elif kind == RECOMPUTE and recompute == "jit" and s < p - 1:
            op.deps.append(ops[(BWD, mb, s + 1)])
        elif kind == BWD and s < p - 1:
            op.deps.append(ops[(BWD, mb, s + 1)])

    stages = [[] for _ in orders]
    heads = [0] * len(orders)
    free = [0.0] * len(orders)
    remaining = sum(len(o) for o in orders)
    while remaining:
        progressed = False
        for s, order in enumerate(orders):
            while heads[s] < len(order):
                kind, mb = order[heads[s]]
                op = ops[(kind, mb, s)]
                if any(d.end is None for d in op.deps):
                    break
                start = max([free[s]] + [d.end + cost.hop_latency for d in op.deps])
                op.end = start + op.duration
                free[s] = op.end
                stages[s].append(Interval(kind, mb, start, op.end))
                heads[s] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise AssertionError("pipeline schedule has a dependency cycle")
    return PipelineTrace(stages)


def simulate_1f1b(lengths, p: int, cost: CostModel | None = None,
                  order: str = "longest_first") -> PipelineTrace:
    """Standard 1F1B over microbatches of the given token lengths.

    Microbatch ids in the trace are positions in ``lengths``. ``order``
    selects the dispatch order: ``"longest_first"`` (stable sort by length,
    descending; the order chunk plans use for whole sequences) or
    ``"given"``.
    """
    cost = cost or CostModel()
    p = check_positive_int(p, "p")
    lengths = list(lengths)
    if not lengths:
        raise ValidationError("need at least one microbatch")
    if order == "longest_first":
        mbs = sorted(range(len(lengths)), key=lambda i: -lengths[i])
    elif order == "given":
        mbs = list(range(len(lengths)))
    else:
        raise ValidationError(f"unknown dispatch order {order!r}")
    durations = {}
    for mb, n in enumerate(lengths):
        f = cost.forward_time(n)
        durations[(FWD, mb)] = f
        durations[(BWD, mb)] = cost.backward_time(f)
    orders = [_stage_order(s, p, mbs, mbs, set()) for s in range(p)]
    return _run(orders, durations, p, cost)


def state_aware_orders(plan, cfg: PipelineConfig):
    """Forward order, backward order (groups reversed) and recomputed chunks of a plan."""
    fwd = [c.chunk_id for c in plan.chunks]
    bwd = list(fwd)
    pos = {cid: i for i, cid in enumerate(fwd)}
    recomputed = set()
    for ids in plan.groups.values():
        slots = sorted(pos[cid] for cid in ids)
        for slot, cid in zip(slots, reversed(ids)):
            bwd[slot] = cid
        recomputed.update(ids[: max(0, len(ids) - cfg.k)])
    return fwd, bwd, recomputed


def simulate_state_aware_1f1b(plan, cfg: PipelineConfig, cost: CostModel | None = None,
                              recompute: str = "jit") -> PipelineTrace:
    """1F1B over the chunks of ``plan`` with group ordering and ``k``-bounded recompute.

    Chunks are the microbatches, in plan order. A discarded chunk is
    re-forwarded on each stage immediately before its own backward, which
    the group ordering places after the backward of its successor.
    ``recompute`` picks what that re-forward waits for:

    ``"jit"``
        the chunk's output gradient from the next stage, i.e. recompute
        starts from the stage's saved input when the backward is due;
    ``"chained"``
        the re-forward of the previous stage, i.e. a second full pipeline
        forward pass.
    """
    cost = cost or CostModel()
    if recompute not in ("jit", "chained"):
        raise ValidationError(f"unknown recompute mode {recompute!r}")
    if not plan.chunks:
        raise ValidationError("plan has no chunks")
    fwd, bwd, recomputed = state_aware_orders(plan, cfg)
    durations = {}
    for c in plan.chunks:
        f = cost.chunk_forward_time(c)
        durations[(FWD, c.chunk_id)] = f
        durations[(RECOMPUTE, c.chunk_id)] = f
        durations[(BWD, c.chunk_id)] = cost.backward_time(f)
    p = cfg.num_stages
    orders = [_stage_order(s, p, fwd, bwd, recomputed) for s in range(p)]
    return _run(orders, durations, p, cost, recompute)


def export_trace(trace: PipelineTrace, format: str = "chrome-trace"):
    """Render ``trace`` as a chrome-trace JSON document or a per-stage text table."""
    if format == "chrome-trace":
        events = []
        for s, stage in enumerate(trace.stages):
            for iv in stage:
                events.append({
                    "name": iv.name(),
                    "ph": "X",
                    "ts": round(iv.start * US_PER_UNIT, 3),
                    "dur": round(iv.duration * US_PER_UNIT, 3),
                    "pid": s,
                    "tid": 0,
                })
        return {"traceEvents": events, "displayTimeUnit": "ms"}
    if format == "table":
        return format_table(trace)
    raise ValidationError(f"unknown trace format {format!r}; use 'chrome-trace' or 'table'")


def format_table(trace: PipelineTrace, width: int = 100) -> str:
    buf = io.StringIO()
    span = trace.makespan
    scale = width / span if span else 0.0
    for s, stage in enumerate(trace.stages):
        row = [" "] * width
        for iv in stage:
            lo = int(round(iv.start * scale))
            hi = max(lo + 1, int(round(iv.end * scale)))
            tag = f"{'r' if iv.kind == RECOMPUTE else iv.kind}{iv.chunk_id}"
            cells = ("[" + tag).ljust(hi - lo, "-")[: hi - lo]
            row[lo:hi] = list(cells)
        buf.write(f"stage {s:>2} |{''.join(row)}|\n")
    buf.write(f"makespan {span:g}\n")
    for s, busy in enumerate(trace.busy):
        buf.write(f"stage {s:>2} busy {busy:g}\n")
    return buf.getvalue()


def trace_json(trace: PipelineTrace) -> str:
    return json.dumps(export_trace(trace, "chrome-trace"), indent=1)
