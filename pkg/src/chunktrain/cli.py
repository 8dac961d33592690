"""Command-line entry point: ``chunktrain <command> [flags]``.

Every command accepts ``--seed``, ``--out-dir`` and ``--config``. The config
file holds flat ``key = value`` lines whose keys are long flag names
(``chunk-size`` or ``chunk_size``); explicit flags win over the file, the
file wins over built-in defaults.

Exit codes: 0 ok, 1 usage or validation error, 2 a check failed
(verification mismatch, no feasible tuner candidate), 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import ValidationError
from .chunker import ChunkPlan, construct_chunks
from .dataset import (PRESETS, SequenceSet, batch_from_lengths, distribution_report, dump_records,
                      load_lengths, sample_batch, synthesize)
from .kernel import (ToyModelConfig, backward_full, fd_max_rel_error, finite_diff_grads, init_model,
                     random_batch, run_plan)
from .memory import MEASURED_7B_PEAKS, UNLIMITED, MemoryModelCoefficients, calibrate, predict_peak, read_measurements
from .pipeline import CostModel, PipelineConfig, export_trace, simulate_1f1b, simulate_state_aware_1f1b
from .scheduler import ExecutionPlan, schedule_step, validate_plan
from .tuner import grid_search

EXIT_OK, EXIT_USAGE, EXIT_CHECK, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text):
    try:
        return [int(x) for x in str(text).replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _version_line():
    return f"# chunktrain {__version__}\n"


def _write(out_dir, name, text):
    path = Path(out_dir) / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


# ------------------------------------------------------------------ inputs

def _load_batch(args):
    """Batch from ``--lengths``, or from ``--dataset`` (whole file unless ``--batch-size``)."""
    if getattr(args, "lengths", None):
        return batch_from_lengths(args.lengths)
    if not getattr(args, "dataset", None):
        raise UsageError("need --lengths or --dataset")
    seqs = load_lengths(args.dataset)
    if len(seqs) == 0:
        raise ValidationError(f"{args.dataset}: no records")
    if args.batch_size:
        return sample_batch(seqs, args.batch_size, args.step, args.seed)
    return batch_from_lengths(seqs.lengths.tolist(), [r.tokens for r in seqs]
                              if all(r.tokens is not None for r in seqs) else None)


def _load_seqs(args):
    if getattr(args, "lengths", None):
        return SequenceSet.from_lengths(args.lengths)
    if getattr(args, "dataset", None):
        return load_lengths(args.dataset)
    if getattr(args, "preset", None):
        return synthesize(PRESETS[args.preset], args.count, args.seed)
    raise UsageError("need --lengths, --dataset or --preset")


def _cost(args):
    return CostModel(alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                     backward_multiplier=args.backward_multiplier, hop_latency=args.hop_latency)


# ---------------------------------------------------------------- commands

def cmd_gen_dataset(args, out):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    spec = PRESETS[args.preset]
    seqs = synthesize(spec, args.count, args.seed)
    if args.vocab_size:
        rng = np.random.default_rng(args.seed)
        seqs = SequenceSet.from_lengths(seqs.lengths.tolist(),
                                        random_batch(rng, args.vocab_size, seqs.lengths.tolist()))
    path = Path(args.out_dir) / args.output
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_records(seqs, path)
    report = distribution_report(seqs, spec.bounds)
    _write(args.out_dir, "distribution.csv", report.to_csv())
    out.write(f"wrote {len(seqs)} records to {path}\n")
    out.write(report.to_table())
    return EXIT_OK


def cmd_pack(args, out):
    batch = _load_batch(args)
    plan = construct_chunks(batch, args.chunk_size)
    plan.save(Path(args.out_dir) / args.output)
    text = f"{plan.summary()}\nfill_ratio {plan.fill_ratio():.4f}\n"
    _write(args.out_dir, "pack_report.txt", _version_line() + text)
    out.write(text)
    return EXIT_OK


def cmd_schedule(args, out):
    plan = ChunkPlan.load(args.plan)
    exec_plan = schedule_step(plan, args.k)
    exec_plan.save(Path(args.out_dir) / args.output)
    _write(args.out_dir, "exec_plan.txt", exec_plan.listing())
    diag = validate_plan(exec_plan)
    out.write(exec_plan.listing())
    out.write(f"events {len(exec_plan.events)}\nforwards {diag.forward_count}\n"
              f"peak_retained_tokens {diag.peak_retained_tokens}\n"
              f"recompute_tokens {diag.recompute_token_count}\n")
    return EXIT_OK if diag.ok else EXIT_CHECK


def cmd_simulate(args, out):
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    if args.stages < 1:
        raise UsageError("--stages must be >= 1")
    cost = _cost(args)
    if args.baseline:
        batch = _load_batch(args)
        trace = simulate_1f1b(batch.lengths, args.stages, cost, order=args.order)
        label = "baseline 1F1B"
    else:
        if args.plan:
            plan = ChunkPlan.load(args.plan)
        else:
            if not args.chunk_size:
                raise UsageError("need --chunk-size (or --plan) for a state-aware simulation")
            plan = construct_chunks(_load_batch(args), args.chunk_size)
        cfg = PipelineConfig(args.stages, args.k, plan.chunk_size)
        trace = simulate_state_aware_1f1b(plan, cfg, cost, recompute=args.recompute)
        label = f"state-aware 1F1B chunk_size={plan.chunk_size} k={args.k} chunks={len(plan)}"
    report = [label, f"stages {trace.num_stages}", f"makespan {trace.makespan:g}"]
    report += [f"stage {s} busy {b:g}" for s, b in enumerate(trace.busy)]
    report.append(f"bubble_ratio {100 * trace.bubble_ratio():.2f}%")
    if any(trace.recompute_time):
        report.append(f"bubble_ratio_recompute_busy {100 * trace.bubble_ratio(True):.2f}%")
    text = "\n".join(report) + "\n"
    _write(args.out_dir, args.trace, json.dumps(export_trace(trace), indent=1) + "\n")
    _write(args.out_dir, "simulate_report.txt", _version_line() + text)
    out.write(text)
    if args.table:
        out.write(export_trace(trace, "table"))
    return EXIT_OK


def cmd_tune(args, out):
    if not args.chunk_sizes or not args.ks:
        raise UsageError("--chunk-sizes and --ks must be non-empty")
    seqs = _load_seqs(args)
    mem = MemoryModelCoefficients.load(args.memory_model) if args.memory_model else UNLIMITED
    result = grid_search(seqs, args.chunk_sizes, args.ks, PipelineConfig(num_stages=args.stages),
                         _cost(args), mem, args.budget, args.batches, args.seed, args.batch_size,
                         args.n_jobs)
    _write(args.out_dir, "tuner.csv", result.to_csv())
    _write(args.out_dir, "tuner_report.txt", _version_line() + result.report())
    out.write(result.report())
    return EXIT_OK if result.feasible else EXIT_CHECK


def _verify_case(params, lengths, chunk_size, k, rng, corrupt):
    tokens = random_batch(rng, params.cfg.vocab_size, lengths)
    batch = batch_from_lengths(lengths, tokens)
    plan = construct_chunks(batch, chunk_size)
    exec_plan = schedule_step(plan, k)
    ref = backward_full(params, tokens)
    got = run_plan(params, plan, exec_plan, batch, corrupt_kv_grads=corrupt)
    loss_err = abs(got.loss - ref.loss) / abs(ref.loss)
    predicted = validate_plan(exec_plan).peak_retained_tokens
    return (loss_err, got.grads.max_rel_error(ref), exec_plan.forward_count() - len(plan),
            got.kv_violations, got.peak_retained_tokens == predicted, tokens)


def cmd_verify(args, out):
    cfg = ToyModelConfig(args.vocab_size, args.d_model, args.num_heads, args.num_kv_heads,
                         args.layers, seed=args.seed)
    params = init_model(cfg)
    rng = np.random.default_rng(args.seed)
    cases = [(args.lengths, args.chunk_size, args.k)]
    for _ in range(args.cases):
        n = int(rng.integers(4, 9))
        cases.append((rng.integers(8, 65, size=n).tolist(), int(rng.integers(8, 33)), int(rng.integers(1, 4))))
    worst_loss = worst_grad = 0.0
    recomputes = violations = 0
    accounting_ok = True
    first_tokens = None
    for lengths, cs, k in cases:
        loss_err, grad_err, extra, viol, acc, tokens = _verify_case(params, lengths, cs, k, rng,
                                                                    args.corrupt_kv_grads)
        first_tokens = first_tokens if first_tokens is not None else tokens
        worst_loss, worst_grad = max(worst_loss, loss_err), max(worst_grad, grad_err)
        recomputes += extra
        violations += len(viol)
        accounting_ok &= acc
    lines = [f"cases {len(cases)}", f"recomputed_forwards {recomputes}",
             f"kv_grad_violations {violations}",
             f"activation_accounting {'ok' if accounting_ok else 'MISMATCH'}",
             f"loss_rel_err {worst_loss:.3e}"]
    passed = worst_loss <= 1e-12 and worst_grad <= args.tolerance and violations == 0 and accounting_ok
    if args.fd_entries:
        fd = finite_diff_grads(params, first_tokens, args.epsilon, args.fd_entries, args.seed)
        fd_err = fd_max_rel_error(backward_full(params, first_tokens), fd)
        lines.append(f"fd_rel_err {fd_err:.3e} (<= 1e-4 required)")
        passed &= fd_err <= 1e-4
    verdict = "PASS" if passed else "FAIL"
    lines.append(f"max_rel_err {worst_grad:.3e} <= {args.tolerance:g}, {verdict}" if worst_grad <= args.tolerance
                 else f"max_rel_err {worst_grad:.3e} > {args.tolerance:g}, {verdict}")
    text = "\n".join(lines) + "\n"
    _write(args.out_dir, "verify_report.txt", _version_line() + text)
    out.write(text)
    return EXIT_OK if passed else EXIT_CHECK


def cmd_calibrate_mem(args, out):
    rows = read_measurements(args.measurements) if args.measurements else MEASURED_7B_PEAKS
    coeffs = calibrate(rows, args.gqa_ratio)
    coeffs.save(Path(args.out_dir) / args.output)
    lines = [f"rows {len(rows)}",
             f"base_gib {coeffs.base:.4f}",
             f"per_chunk_token_gib {coeffs.per_chunk_token:.6e} ({coeffs.per_chunk_token * 1024:.3f} per 1K)",
             f"per_context_token_gib {coeffs.per_context_token:.6e}",
             f"max_residual_gib {coeffs.max_residual:.4f}"]
    if args.predict:
        cs, k, ctx = args.predict
        lines.append(f"predicted_peak_gib chunk_size={cs} k={k} context={ctx}: "
                     f"{predict_peak(coeffs, cs, k, ctx):.3f}")
    text = "\n".join(lines) + "\n"
    out.write(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _add_cost(p):
    p.add_argument("--alpha", type=float, default=1.0, help="time per token")
    p.add_argument("--beta", type=float, default=0.0, help="attention time per token pair")
    p.add_argument("--gamma", type=float, default=0.0, help="fixed time per chunk")
    p.add_argument("--backward-multiplier", type=float, default=2.0)
    p.add_argument("--hop-latency", type=float, default=0.0)


def _add_batch(p):
    p.add_argument("--lengths", type=_int_list, help="comma-separated sequence lengths")
    p.add_argument("--dataset", help="line-delimited JSON records")
    p.add_argument("--batch-size", type=int, help="sample this many records (default: whole file)")
    p.add_argument("--step", type=int, default=0)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--config", help="flat key = value file of flag defaults")

    parser = _Parser(prog="chunktrain", description="Chunk-centric training planner and simulator.")
    parser.add_argument("--version", action="version", version=f"chunktrain {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-dataset", parents=[common], help="synthesize a length dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="eval-table5")
    p.add_argument("--count", type=int, default=100_000)
    p.add_argument("--vocab-size", type=int, default=0, help="also attach random tokens")
    p.add_argument("--output", default="dataset.jsonl")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("pack", parents=[common], help="construct chunks for one batch")
    _add_batch(p)
    p.add_argument("--chunk-size", type=int, required=True)
    p.add_argument("--output", default="chunk_plan.json")
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("schedule", parents=[common], help="schedule a chunk plan under budget k")
    p.add_argument("--plan", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--output", default="exec_plan.json")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", parents=[common], help="simulate a 1F1B pipeline")
    _add_batch(p)
    p.add_argument("--plan", help="chunk plan file (instead of --lengths/--dataset)")
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--baseline", action="store_true", help="whole sequences as microbatches")
    p.add_argument("--order", choices=["longest_first", "given"], default="longest_first")
    p.add_argument("--recompute", choices=["jit", "chained"], default="jit")
    p.add_argument("--trace", default="trace.json")
    p.add_argument("--table", action="store_true", help="also print a text Gantt chart")
    _add_cost(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tune", parents=[common], help="grid-search chunk_size and k")
    _add_batch(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--count", type=int, default=20_000)
    p.add_argument("--chunk-sizes", type=_int_list, required=True)
    p.add_argument("--ks", type=_int_list, required=True)
    p.add_argument("--stages", type=int, default=4)
    p.add_argument("--memory-model", help="coefficients written by calibrate-mem")
    p.add_argument("--budget", type=float, default=float("inf"), help="GiB")
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--n-jobs", type=int)
    _add_cost(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("verify", parents=[common], help="check chunked gradients against full-batch ones")
    p.add_argument("--vocab-size", type=int, default=32)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--num-heads", type=int, default=2)
    p.add_argument("--num-kv-heads", type=int, default=1)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--lengths", type=_int_list, default=[8, 8, 16, 32])
    p.add_argument("--chunk-size", type=int, default=16)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--cases", type=int, default=0, help="extra randomized cases")
    p.add_argument("--fd-entries", type=int, default=200, help="0 skips the finite-difference check")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--corrupt-kv-grads", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("calibrate-mem", parents=[common], help="fit the peak-memory model")
    p.add_argument("--measurements", help="CSV chunk_size,k,context_len,peak_gib (default: built-in table)")
    p.add_argument("--gqa-ratio", type=float, default=1.0)
    p.add_argument("--predict", type=_int_list, help="chunk_size,k,context_len")
    p.add_argument("--output", default="memory_model.json")
    p.set_defaults(func=cmd_calibrate_mem)
    return parser


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser, argv, args):
    conf = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in conf.items():
        action = actions.get(key)
        if action is None or key in ("config", "help", "func"):
            raise UsageError(f"{args.config}: unknown key {key!r} for {args.command}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = value.lower() in ("1", "true", "yes", "on")
        else:
            try:
                defaults[key] = action.type(value) if action.type else value
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {exc}") from None
        action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None, out=None):
    out = out or sys.stdout
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except UsageError:
            # a required flag may come from --config
            if "--config" not in argv:
                raise
            pre = _Parser(add_help=False)
            pre.add_argument("command")
            pre.add_argument("--config")
            args, _ = pre.parse_known_args(argv)
        if getattr(args, "config", None):
            args = _apply_config(parser, argv, args)
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        return args.func(args, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
