import math

import pytest
from sklearn.base import clone

from chunktrain._validation import ValidationError
from chunktrain.dataset import EVAL_LENGTHS, SequenceSet, synthesize
from chunktrain.memory import MemoryModelCoefficients
from chunktrain.pipeline import CostModel, PipelineConfig
from chunktrain.tuner import ChunkSizeKTuner, grid_search

UNIT_SET = SequenceSet.from_lengths([1, 1, 2, 4])


def test_unit_grid_ranking():
    result = grid_search(UNIT_SET, [2, 4], [1, 2])
    assert result.best == (2, 2)
    ranked = [(r.chunk_size, r.k) for r in result.ranked()]
    assert ranked[:2] == [(2, 2), (2, 1)]
    times = {(r.chunk_size, r.k): r.mean_time for r in result.table}
    assert times[(2, 2)] < times[(2, 1)] < times[(4, 1)]
    assert len(result.table) == 4
    assert result.evaluations == 4


def test_single_stage_forces_budget_one():
    result = grid_search(UNIT_SET, [2, 4], [1, 2], cfg=PipelineConfig(num_stages=1))
    assert result.best == (4, 1)
    assert {r.effective_k for r in result.table} == {1}


def test_single_stage_takes_largest_feasible_chunk():
    mem = MemoryModelCoefficients(0.0, 1.0, 0.0)
    result = grid_search(UNIT_SET, [1, 2, 4], [1], cfg=PipelineConfig(num_stages=1), mem=mem,
                         budget_gib=2.5)
    assert result.best == (2, 1)


def test_budget_below_every_candidate():
    mem = MemoryModelCoefficients(100.0, 0.0, 0.0)
    result = grid_search(UNIT_SET, [2, 4], [1, 2], mem=mem, budget_gib=50)
    assert result.best is None and not result.feasible
    assert len(result.table) == 4
    assert result.report().startswith("no feasible configuration")


def test_best_respects_budget():
    mem = MemoryModelCoefficients(0.0, 1.0, 0.0)
    result = grid_search(UNIT_SET, [2, 4], [1, 2], mem=mem, budget_gib=3.0)
    assert result.best == (2, 1)
    best = next(r for r in result.table if (r.chunk_size, r.k) == result.best)
    assert best.predicted_peak_gib <= 3.0


def test_single_candidate():
    assert grid_search(UNIT_SET, [4], [2]).best == (4, 2)


@pytest.mark.parametrize("sizes,ks", [([], [1]), ([2], []), ([0], [1]), ([2], [0])])
def test_empty_or_invalid_grid(sizes, ks):
    with pytest.raises(ValidationError):
        grid_search(UNIT_SET, sizes, ks)


def test_deterministic_and_parallel_agree():
    seqs = synthesize(EVAL_LENGTHS, 3000, seed=4)
    kwargs = dict(cost=CostModel(gamma=100), batches_to_sample=2, seed=3, global_batch_size=64)
    a = grid_search(seqs, [512, 2048], [1, 2], **kwargs)
    b = grid_search(seqs, [512, 2048], [1, 2], n_jobs=2, **kwargs)
    assert a.table == b.table
    assert a.to_csv() == b.to_csv()


def test_csv_has_one_row_per_candidate():
    result = grid_search(UNIT_SET, [2, 4], [1, 2, 3])
    lines = result.to_csv().splitlines()
    assert len(lines) == 1 + 6
    assert lines[0].startswith("chunk_size,k,")


def test_estimator_front_end():
    tuner = ChunkSizeKTuner(chunk_sizes=(2, 4), ks=(1, 2))
    assert clone(tuner).get_params()["chunk_sizes"] == (2, 4)
    tuner.fit(UNIT_SET)
    assert tuner.best_params_ == {"chunk_size": 2, "k": 2}
    assert tuner.score() == -46


def test_estimator_without_feasible_candidate():
    tuner = ChunkSizeKTuner(chunk_sizes=(2,), ks=(1,), mem=MemoryModelCoefficients(9.0, 0, 0),
                            budget_gib=1.0).fit(UNIT_SET)
    assert not hasattr(tuner, "best_params_")
    assert tuner.score() == -math.inf
