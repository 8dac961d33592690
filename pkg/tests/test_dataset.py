import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunktrain._validation import ValidationError
from chunktrain.dataset import (KIB, PRESETS, LMSYS_LENGTHS, EVAL_LENGTHS, DistributionSpec, EpochExhausted,
                                LongTailSampler, RecordParseError, SequenceSet, distribution_report,
                                dump_records, load_lengths, sample_batch, synthesize)


def test_load_lengths_assigns_sequential_ids():
    seqs = load_lengths(['{"length": 5}\n', '{"length": 2}\n', '{"length": 9}\n'])
    assert [r.id for r in seqs] == [0, 1, 2]
    assert seqs.lengths.tolist() == [5, 2, 9]


def test_load_lengths_empty_stream():
    assert len(load_lengths([])) == 0


def test_load_lengths_zero_length_names_line():
    with pytest.raises(ValidationError, match="line 2"):
        load_lengths(['{"length": 3}', '{"length": 0}'])


def test_load_lengths_malformed_line():
    with pytest.raises(RecordParseError) as err:
        load_lengths(['{"length": 3}', "", "not json"])
    assert err.value.lineno == 3


@pytest.mark.parametrize("line", ['{"len": 3}', '{"length": "3"}', '{"length": true}', "[3]",
                                  '{"length": 2, "tokens": [1]}'])
def test_load_lengths_rejects_bad_records(line):
    with pytest.raises(RecordParseError):
        load_lengths([line])


def test_records_round_trip_with_tokens(tmp_path):
    seqs = SequenceSet.from_lengths([3, 2], tokens=[[1, 2, 3], [4, 5]])
    path = tmp_path / "d.jsonl"
    dump_records(seqs, path)
    back = load_lengths(path)
    assert back == seqs


def test_dump_records_to_stream():
    buf = io.StringIO()
    dump_records(SequenceSet.from_lengths([7]), buf)
    assert buf.getvalue() == '{"length":7}\n'


def test_single_bucket_spec_stays_in_range():
    spec = DistributionSpec(((8, 1.0),), 8)
    lengths = synthesize(spec, 100, seed=3).lengths
    assert lengths.min() >= 1 and lengths.max() < 8


def test_synthesize_deterministic():
    a = synthesize(EVAL_LENGTHS, 5000, seed=11)
    b = synthesize(EVAL_LENGTHS, 5000, seed=11)
    assert a == b
    assert synthesize(EVAL_LENGTHS, 5000, seed=12) != a


def test_synthesize_respects_min_and_max():
    lengths = synthesize(EVAL_LENGTHS, 200_000, seed=0).lengths
    assert lengths.min() >= 16
    assert lengths.max() <= 256 * KIB


def test_synthesize_count_must_be_positive():
    with pytest.raises(ValidationError):
        synthesize(EVAL_LENGTHS, 0, seed=0)


@pytest.mark.parametrize("buckets,max_length", [
    (((1024, 0.5), (512, 0.9)), 2048),
    (((1024, 0.9), (2048, 0.8)), 4096),
    (((1024, 0.9),), 512),
    (((1024, 0.9),), 1024),
    (((1024, 1.0),), 4096),
    ((), 10),
])
def test_distribution_spec_rejects_inconsistent_buckets(buckets, max_length):
    with pytest.raises(ValidationError):
        DistributionSpec(buckets, max_length)


def test_report_uses_strictly_less_than():
    report = distribution_report(SequenceSet.from_lengths([1, 2, 3]), [2])
    assert report.rows == [(2, pytest.approx(1 / 3))]
    assert report.max_length == 3


def test_report_with_no_bounds_has_only_max():
    report = distribution_report(SequenceSet.from_lengths([4, 9]), [])
    assert report.rows == []
    assert "9" in report.to_table()
    assert report.to_csv().splitlines()[-1] == "max_length,9"


def test_sample_batch_two_steps_cover_set():
    seqs = SequenceSet.from_lengths(list(range(1, 513)))
    a = sample_batch(seqs, 256, 0, seed=5)
    b = sample_batch(seqs, 256, 1, seed=5)
    ids_a = {r.id for r in a.sequences}
    ids_b = {r.id for r in b.sequences}
    assert not ids_a & ids_b
    assert ids_a | ids_b == set(range(512))


def test_sample_batch_remainder_is_flagged():
    seqs = SequenceSet.from_lengths([5] * 300)
    batch = sample_batch(seqs, 256, 1, seed=0)
    assert len(batch.sequences) == 44 and batch.partial
    assert not sample_batch(seqs, 256, 0, seed=0).partial


def test_sample_batch_past_epoch():
    with pytest.raises(EpochExhausted):
        sample_batch(SequenceSet.from_lengths([5] * 10), 4, 3, seed=0)


def test_sample_batch_deterministic():
    seqs = SequenceSet.from_lengths(list(range(1, 100)))
    assert sample_batch(seqs, 10, 2, seed=9) == sample_batch(seqs, 10, 2, seed=9)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 200), batch=st.integers(1, 64), seed=st.integers(0, 2**31))
def test_epoch_partitions_set(n, batch, seed):
    seqs = SequenceSet.from_lengths([1] * n)
    seen = []
    step = 0
    while True:
        try:
            seen += [r.id for r in sample_batch(seqs, batch, step, seed).sequences]
        except EpochExhausted:
            break
        step += 1
    assert sorted(seen) == list(range(n))


@pytest.mark.parametrize("spec,expected", [
    (EVAL_LENGTHS, [98.17, 99.72, 99.83, 99.92, 99.98]),
    (LMSYS_LENGTHS, [90.499, 99.539, 99.908, 99.987, 99.996]),
])
def test_presets_encode_published_fractions(spec, expected):
    assert [round(100 * c, 3) for _, c in spec.buckets] == expected
    assert spec.bounds == [KIB, 4 * KIB, 8 * KIB, 32 * KIB, 128 * KIB]


def test_preset_names():
    assert PRESETS["eval-table5"] is EVAL_LENGTHS
    assert PRESETS["lmsys-table2"] is LMSYS_LENGTHS
    assert EVAL_LENGTHS.max_length == 256 * KIB
    assert LMSYS_LENGTHS.max_length == 303 * KIB


def test_sampler_recovers_fractions():
    seqs = synthesize(EVAL_LENGTHS, 200_000, seed=1)
    sampler = LongTailSampler().fit(seqs)
    again = sampler.sample(200_000, seed=2)
    want = np.array(distribution_report(seqs, EVAL_LENGTHS.bounds).fractions())
    got = np.array(distribution_report(again, EVAL_LENGTHS.bounds).fractions())
    assert np.max(np.abs(want - got)) < 0.003
