import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunktrain._validation import ValidationError
from chunktrain.chunker import construct_chunks
from chunktrain.dataset import batch_from_lengths
from chunktrain.kernel import (StateStore, ToyModelConfig, backward_full, fd_max_rel_error, finite_diff_grads,
                               forward_full, init_model, param_shapes, random_batch, run_plan, target_count)
from chunktrain.scheduler import schedule_step, validate_plan

CFG = ToyModelConfig()


def make_case(lengths, seed=0, cfg=CFG):
    params = init_model(cfg)
    tokens = random_batch(np.random.default_rng(seed), cfg.vocab_size, lengths)
    return params, tokens, batch_from_lengths(lengths, tokens)


def run(params, batch, chunk_size, k, **kw):
    plan = construct_chunks(batch, chunk_size)
    return plan, run_plan(params, plan, schedule_step(plan, k), batch, **kw)


def test_init_is_deterministic():
    a, b = init_model(CFG), init_model(CFG)
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert not np.array_equal(a["embed"], init_model(ToyModelConfig(seed=1))["embed"])


def test_grouped_kv_projection_shapes():
    shapes = param_shapes(ToyModelConfig(num_heads=2, num_kv_heads=1))
    assert shapes["l0.wq"] == (16, 16)
    assert shapes["l0.wk"] == shapes["l0.wv"] == (16, 8)


@pytest.mark.parametrize("kw", [dict(d_model=15), dict(num_heads=4, num_kv_heads=3), dict(vocab_size=0)])
def test_invalid_config(kw):
    with pytest.raises(ValidationError):
        ToyModelConfig(**kw)


def test_init_scale():
    params = init_model(ToyModelConfig(d_model=64, vocab_size=512, seed=3))
    assert np.std(params["embed"]) == pytest.approx(1 / 8, rel=0.05)


def test_uniform_logits_give_log_vocab():
    params = init_model(CFG)
    for name in params:
        if name != "embed":
            params[name][...] = 0.0
    assert forward_full(params, [[3, 3]]) == pytest.approx(math.log(CFG.vocab_size), rel=1e-14)


def test_packing_does_not_leak_across_sequences():
    params, tokens, _ = make_case([9, 14])
    a, b = tokens
    joint = forward_full(params, [a, b])
    separate = (forward_full(params, [a]) * 8 + forward_full(params, [b]) * 13) / 21
    assert joint == pytest.approx(separate, rel=1e-13)


def test_token_out_of_vocab():
    with pytest.raises(ValidationError):
        forward_full(init_model(CFG), [[1, 32]])


def test_sequence_needs_a_target():
    with pytest.raises(ValidationError):
        forward_full(init_model(CFG), [[1]])


def test_vocab_of_one_has_zero_loss_and_gradient():
    cfg = ToyModelConfig(vocab_size=1)
    grads = backward_full(init_model(cfg), [[0] * 6, [0] * 3])
    assert grads.loss == pytest.approx(0.0, abs=1e-15)
    assert all(np.max(np.abs(g)) < 1e-15 for g in grads.values())


def test_doubling_normalizer_halves_gradients():
    params, tokens, _ = make_case([10, 7])
    n = target_count(tokens)
    g1 = backward_full(params, tokens, normalizer=n)
    g2 = backward_full(params, tokens, normalizer=2 * n)
    for name in g1:
        np.testing.assert_allclose(g2[name], g1[name] / 2, rtol=1e-14, atol=0)


def test_finite_differences_desk_scale():
    params, tokens, _ = make_case([24], seed=5)
    analytic = backward_full(params, tokens)
    numeric = finite_diff_grads(params, tokens, epsilon=1e-5, n_entries=300, seed=1)
    assert sum(int(np.sum(~np.isnan(v))) for v in numeric.values()) == 300
    assert fd_max_rel_error(analytic, numeric) <= 1e-4
    assert numeric.loss == pytest.approx(analytic.loss, rel=1e-15)


def test_finite_differences_without_attention():
    # embedding -> output head only: no attention or tanh on the path
    cfg = ToyModelConfig(num_layers=0)
    params, tokens, _ = make_case([12, 5], cfg=cfg)
    numeric = finite_diff_grads(params, tokens, epsilon=1e-5, n_entries=None)
    assert numeric.max_rel_error(backward_full(params, tokens)) <= 1e-8


def test_finite_differences_need_positive_step():
    params, tokens, _ = make_case([5])
    with pytest.raises(ValidationError):
        finite_diff_grads(params, tokens, epsilon=0.0)


def test_single_chunk_plan_is_identity():
    params, tokens, batch = make_case([7, 5, 9])
    ref = backward_full(params, tokens)
    plan, got = run(params, batch, 64, 1)
    assert len(plan) == 1
    assert got.loss == pytest.approx(ref.loss, rel=1e-12)
    assert got.grads.max_rel_error(ref) <= 1e-12


def test_unit_example_scaled_by_eight():
    params, tokens, batch = make_case([8, 8, 16, 32], seed=2)
    ref = backward_full(params, tokens)
    _, k1 = run(params, batch, 16, 1)
    _, k2 = run(params, batch, 16, 2)
    assert abs(k1.loss - ref.loss) <= 1e-12 * abs(ref.loss)
    assert k1.grads.max_rel_error(ref) <= 1e-9
    assert k2.grads.max_rel_error(k1.grads) <= 1e-12
    assert k1.forward_count == 5 and k2.forward_count == 4


def test_boundary_targets_are_kept():
    params, tokens, batch = make_case([20])
    _, got = run(params, batch, 5, 1)
    assert len(got.chunk_losses) == 4
    assert got.loss == pytest.approx(forward_full(params, tokens), rel=1e-12)


def test_corrupted_kv_gradients_are_detected():
    params, tokens, batch = make_case([30, 6], seed=3)
    _, got = run(params, batch, 8, 1, corrupt_kv_grads=True)
    assert got.grads.max_rel_error(backward_full(params, tokens)) > 1e-3


def test_plan_token_mismatch():
    params, tokens, batch = make_case([6, 6])
    plan = construct_chunks(batch, 4)
    with pytest.raises(ValidationError):
        run_plan(params, plan, schedule_step(plan, 1), [tokens[0], tokens[1][:5]])


def test_state_store_flags_premature_read():
    store = StateStore(num_layers=1)
    kv = [(np.zeros((2, 1, 4)), np.zeros((2, 1, 4)))]
    for i in range(3):
        store.save((0, i), kv, 3)
    store.read_grad(0, 0)
    assert store.violations and "before backward of [1, 2]" in store.violations[0]


def test_recompute_reproduces_first_pass_bitwise():
    params, tokens, batch = make_case([40, 3], seed=8)
    _, got = run(params, batch, 8, 1)
    assert got.forward_count > len(got.chunk_losses)
    assert got.recompute_mismatches == 0


desk_cases = st.tuples(
    st.lists(st.integers(8, 64), min_size=4, max_size=8),
    st.integers(8, 32),
    st.integers(1, 3),
    st.integers(0, 2**31),
)


@settings(max_examples=25, deadline=None)
@given(case=desk_cases)
def test_chunked_equals_full(case):
    lengths, chunk_size, k, seed = case
    params, tokens, batch = make_case(lengths, seed=seed)
    ref = backward_full(params, tokens)
    plan, got = run(params, batch, chunk_size, k)
    assert abs(got.loss - ref.loss) <= 1e-12 * abs(ref.loss)
    assert got.grads.max_rel_error(ref) <= 1e-9
    assert got.kv_violations == []
    assert got.recompute_mismatches == 0
    assert got.peak_retained_tokens == validate_plan(schedule_step(plan, k)).peak_retained_tokens


@settings(max_examples=10, deadline=None)
@given(lengths=st.lists(st.integers(8, 48), min_size=2, max_size=5), chunk_size=st.integers(4, 16),
       seed=st.integers(0, 1000))
def test_results_do_not_depend_on_budget(lengths, chunk_size, seed):
    params, _, batch = make_case(lengths, seed=seed)
    base = run(params, batch, chunk_size, 1)[1]
    for k in (2, 3, 8):
        other = run(params, batch, chunk_size, k)[1]
        assert other.grads.max_rel_error(base.grads) <= 1e-12
        assert abs(other.loss - base.loss) <= 1e-12 * abs(base.loss)
