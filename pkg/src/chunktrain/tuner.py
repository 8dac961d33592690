"""Grid search over ``(chunk_size, k)`` against the pipeline simulator."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

from joblib import Parallel, delayed
from sklearn.base import BaseEstimator

from ._validation import ValidationError, check_is_fitted, check_positive_int
from .chunker import construct_chunks
from .dataset import num_steps, sample_batch
from .memory import UNLIMITED, MemoryModelCoefficients, predict_peak
from .pipeline import CostModel, PipelineConfig, simulate_state_aware_1f1b


@dataclass(frozen=True)
class CandidateResult:
    chunk_size: int
    k: int
    effective_k: int
    mean_time: float
    predicted_peak_gib: float
    feasible: bool
    mean_chunks: float = 0.0
    mean_bubble_ratio: float = 0.0


@dataclass
class TunerResult:
    best: tuple | None
    table: list = field(default_factory=list)
    evaluations: int = 0

    @property
    def feasible(self):
        return self.best is not None

    def ranked(self):
        return sorted((r for r in self.table if r.feasible), key=_rank_key)

    def to_csv(self):
        lines = ["chunk_size,k,effective_k,mean_time,predicted_peak_gib,feasible,mean_chunks,mean_bubble_ratio"]
        for r in self.table:
            lines.append(
                f"{r.chunk_size},{r.k},{r.effective_k},{r.mean_time:.6f},{r.predicted_peak_gib:.4f},"
                f"{int(r.feasible)},{r.mean_chunks:.3f},{r.mean_bubble_ratio:.6f}"
            )
        return "\n".join(lines) + "\n"

    def report(self):
        buf = io.StringIO()
        if self.best is None:
            buf.write("no feasible configuration\n")
        else:
            buf.write(f"best chunk_size={self.best[0]} k={self.best[1]}\n")
        buf.write(f"{'rank':>4} {'chunk_size':>10} {'k':>4} {'mean_time':>14} {'peak_gib':>9} {'bubble':>8}\n")
        for i, r in enumerate(self.ranked(), start=1):
            buf.write(f"{i:>4} {r.chunk_size:>10} {r.effective_k:>4} {r.mean_time:>14.3f} "
                      f"{r.predicted_peak_gib:>9.2f} {100 * r.mean_bubble_ratio:>7.2f}%\n")
        for r in self.table:
            if not r.feasible:
                buf.write(f"   - {r.chunk_size:>10} {r.k:>4} {'infeasible':>14} {r.predicted_peak_gib:>9.2f}\n")
        buf.write(f"simulated evaluations: {self.evaluations}\n")
        return buf.getvalue()


def _rank_key(r):
    # fastest, then larger chunk_size, then smaller k
    return (round(r.mean_time, 9), -r.chunk_size, r.effective_k)


def _sample_batches(seqs, global_batch_size, count, seed):
    steps = num_steps(seqs, global_batch_size)
    out = []
    for i in range(count):
        epoch, step = divmod(i, steps)
        out.append(sample_batch(seqs, global_batch_size, step, seed + epoch))
    return out


def _evaluate(batches, chunk_size, k, cfg, cost):
    times, ratios, chunks = [], [], []
    for batch in batches:
        plan = construct_chunks(batch, chunk_size)
        trace = simulate_state_aware_1f1b(plan, PipelineConfig(cfg.num_stages, k, chunk_size), cost)
        times.append(trace.makespan)
        ratios.append(trace.bubble_ratio())
        chunks.append(len(plan))
    n = len(batches)
    return sum(times) / n, sum(ratios) / n, sum(chunks) / n


def grid_search(seqs, chunk_sizes, ks, cfg: PipelineConfig | None = None, cost: CostModel | None = None,
                mem: MemoryModelCoefficients = UNLIMITED, budget_gib: float = math.inf,
                batches_to_sample: int = 1, seed: int = 0, global_batch_size: int | None = None,
                n_jobs: int | None = None, candidates=None) -> TunerResult:
    """Simulate every ``(chunk_size, k)`` pair and pick the fastest memory-feasible one.

    ``candidates`` replaces the cross product of ``chunk_sizes`` and ``ks``
    with an explicit list of pairs. With a single pipeline stage every
    candidate is evaluated at ``k = 1``.
    """
    if candidates is None:
        candidates = [(cs, k) for cs in chunk_sizes for k in ks]
    candidates = [(check_positive_int(cs, "chunk_size"), check_positive_int(k, "k")) for cs, k in candidates]
    if not candidates:
        raise ValidationError("candidate grids must be non-empty")
    if not budget_gib > 0:
        raise ValidationError("memory budget must be > 0")
    if len(seqs) == 0:
        raise ValidationError("sequence set is empty")
    cfg = cfg or PipelineConfig()
    cost = cost or CostModel()
    batches_to_sample = check_positive_int(batches_to_sample, "batches_to_sample")
    global_batch_size = global_batch_size or min(256, len(seqs))
    batches = _sample_batches(seqs, global_batch_size, batches_to_sample, seed)
    context_len = max(r.length for r in seqs)

    candidates = [(cs, k, 1 if cfg.num_stages == 1 else k) for cs, k in candidates]
    timings = Parallel(n_jobs=n_jobs)(
        delayed(_evaluate)(batches, cs, ek, cfg, cost) for cs, _, ek in candidates
    )
    table = []
    for (cs, k, ek), (mean_time, ratio, n_chunks) in zip(candidates, timings):
        peak = predict_peak(mem, cs, ek, context_len)
        table.append(CandidateResult(cs, k, ek, mean_time, peak, peak <= budget_gib, n_chunks, ratio))
    feasible = sorted((r for r in table if r.feasible), key=_rank_key)
    best = (feasible[0].chunk_size, feasible[0].effective_k) if feasible else None
    return TunerResult(best, table, len(candidates) * len(batches))


class ChunkSizeKTuner(BaseEstimator):
    """Estimator front-end for :func:`grid_search`.

    After ``fit(seqs)`` the chosen pair is in ``best_params_`` and the full
    candidate table in ``result_``.
    """

    def __init__(self, chunk_sizes=(2048, 8192, 32768), ks=(1, 4, 16), num_stages=4, cost=None,
                 mem=None, budget_gib=math.inf, batches_to_sample=1, global_batch_size=None,
                 seed=0, n_jobs=None):
        self.chunk_sizes = chunk_sizes
        self.ks = ks
        self.num_stages = num_stages
        self.cost = cost
        self.mem = mem
        self.budget_gib = budget_gib
        self.batches_to_sample = batches_to_sample
        self.global_batch_size = global_batch_size
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        self.result_ = grid_search(
            X, self.chunk_sizes, self.ks, PipelineConfig(num_stages=self.num_stages), self.cost,
            self.mem or UNLIMITED, self.budget_gib, self.batches_to_sample, self.seed,
            self.global_batch_size, self.n_jobs,
        )
        if self.result_.best is not None:
            self.best_params_ = {"chunk_size": self.result_.best[0], "k": self.result_.best[1]}
        return self

    def score(self, X=None, y=None):
        """Negative mean simulated iteration time of the best candidate."""
        check_is_fitted(self, "result_")
        ranked = self.result_.ranked()
        return -ranked[0].mean_time if ranked else -math.inf
