"""Toy causal transformer with analytic gradients that executes chunk schedules.

The model is deliberately minimal (no norms, no biases, tanh feed-forward,
grouped-query attention) so every gradient is written out by hand in float64.
Two execution paths share the same layer math:

* :func:`forward_full` / :func:`backward_full` run the whole batch as one
  packed stream under a block-diagonal causal mask;
* :func:`run_plan` executes an :class:`~chunktrain.scheduler.ExecutionPlan`
  chunk by chunk, carrying key/value tensors and their gradients between the
  chunks of a split sequence through a :class:`StateStore`.

Loss is next-token cross-entropy summed over every position that has a
target and divided by the batch-wide target count, so chunk losses add up to
the full-batch loss exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError, check_positive_int
from .scheduler import BACKWARD, FORWARD_DISCARD, FORWARD_RETAIN, validate_plan


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 32
    d_model: int = 16
    num_heads: int = 2
    num_kv_heads: int = 1
    num_layers: int = 2
    ffn_mult: int = 2
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "num_heads", "num_kv_heads", "ffn_mult"):
            check_positive_int(getattr(self, name), name)
        check_positive_int(self.num_layers, "num_layers", allow_zero=True)
        if self.d_model % self.num_heads:
            raise ValidationError(f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}")
        if self.num_heads % self.num_kv_heads:
            raise ValidationError(
                f"num_heads={self.num_heads} is not divisible by num_kv_heads={self.num_kv_heads}"
            )

    @property
    def head_dim(self):
        return self.d_model // self.num_heads

    @property
    def group(self):
        return self.num_heads // self.num_kv_heads


class ToyModelParams(dict):
    """Parameter name -> float64 array. Carries its config as ``.cfg``."""

    def __init__(self, cfg, arrays):
        super().__init__(arrays)
        self.cfg = cfg

    def copy(self):
        return ToyModelParams(self.cfg, {k: v.copy() for k, v in self.items()})


class GradientSet(dict):
    """Parameter name -> gradient array, plus the scalar ``loss``."""

    def __init__(self, arrays, loss=0.0):
        super().__init__(arrays)
        self.loss = loss

    def max_rel_error(self, reference):
        """Largest per-tensor ``max|self - ref| / max|ref|`` (NaN entries in ``self`` ignored)."""
        worst = 0.0
        for name, ref in reference.items():
            mine = self[name]
            keep = ~np.isnan(mine)
            if not keep.any():
                continue
            diff = np.max(np.abs(mine[keep] - ref[keep]))
            scale = np.max(np.abs(ref))
            worst = max(worst, diff / scale if scale > 0 else diff)
        return worst


def param_shapes(cfg: ToyModelConfig):
    d, dkv = cfg.d_model, cfg.num_kv_heads * cfg.head_dim
    f = cfg.ffn_mult * d
    shapes = {"embed": (cfg.vocab_size, d)}
    for layer in range(cfg.num_layers):
        shapes.update({
            f"l{layer}.wq": (d, d),
            f"l{layer}.wk": (d, dkv),
            f"l{layer}.wv": (d, dkv),
            f"l{layer}.wo": (d, d),
            f"l{layer}.w1": (d, f),
            f"l{layer}.w2": (f, d),
        })
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def init_model(cfg: ToyModelConfig) -> ToyModelParams:
    """Seeded normal initialization scaled by ``1/sqrt(d_model)``."""
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / np.sqrt(cfg.d_model)
    return ToyModelParams(cfg, {name: rng.standard_normal(shape) * scale
                                for name, shape in param_shapes(cfg).items()})


def zero_grads(params):
    return GradientSet({k: np.zeros_like(v) for k, v in params.items()})


# ---------------------------------------------------------------- layer math

def _forward(params, tokens, targets, mask, prefix=None):
    """Run ``tokens`` through the model.

    ``mask`` is a boolean ``(L, P + L)`` attention mask over prefix + own
    keys; ``prefix`` holds one ``(K, V)`` pair of shape ``(P, kv_heads,
    head_dim)`` per layer. ``targets`` uses ``-1`` for positions without a
    next token. Returns the summed loss, the cache needed by
    :func:`_backward` and this input's own per-layer ``(K, V)``.
    """
    cfg = params.cfg
    L = len(tokens)
    H, G, dh = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(dh)
    x = params["embed"][tokens]
    layers, own_kv = [], []
    for layer in range(cfg.num_layers):
        p = lambda n: params[f"l{layer}.{n}"]  # noqa: E731
        q = (x @ p("wq")).reshape(L, H, dh)
        k = (x @ p("wk")).reshape(L, G, dh)
        v = (x @ p("wv")).reshape(L, G, dh)
        own_kv.append((k, v))
        if prefix is not None:
            k_all = np.concatenate([prefix[layer][0], k])
            v_all = np.concatenate([prefix[layer][1], v])
        else:
            k_all, v_all = k, v
        # head-major: (H, L, dh) queries, (H, T, dh) keys/values
        qh = q.transpose(1, 0, 2)
        kh = np.repeat(k_all, cfg.group, axis=1).transpose(1, 0, 2)
        vh = np.repeat(v_all, cfg.group, axis=1).transpose(1, 0, 2)
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        scores = np.where(mask[None], scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        a /= a.sum(axis=-1, keepdims=True)
        o = (a @ vh).transpose(1, 0, 2).reshape(L, H * dh)
        x1 = x + o @ p("wo")
        hid = np.tanh(x1 @ p("w1"))
        x2 = x1 + hid @ p("w2")
        layers.append((x, qh, kh, vh, a, o, x1, hid))
        x = x2
    logits = x @ params["head"]
    logits = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(logits).sum(axis=-1))
    has_target = targets >= 0
    picked = logits[np.arange(L), np.where(has_target, targets, 0)]
    loss_sum = float(np.sum((logz - picked)[has_target]))
    cache = (tokens, targets, mask, layers, x, logits, logz)
    return loss_sum, cache, own_kv


def _backward(params, cache, scale, grads, own_kv_grad=None):
    """Accumulate ``scale * d(loss_sum)`` into ``grads``.

    ``own_kv_grad`` adds externally accumulated gradients for this input's
    own keys/values. Returns per-layer ``(dK, dV)`` for the prefix.
    """
    cfg = params.cfg
    tokens, targets, mask, layers, x_final, logits, logz = cache
    L = len(tokens)
    H, G, dh = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    att_scale = 1.0 / np.sqrt(dh)
    has_target = targets >= 0

    dlogits = np.exp(logits - logz[:, None])
    dlogits[np.arange(L), np.where(has_target, targets, 0)] -= 1.0
    dlogits *= has_target[:, None] * scale
    grads["head"] += x_final.T @ dlogits
    dx = dlogits @ params["head"].T

    prefix_grads = [None] * cfg.num_layers
    for layer in reversed(range(cfg.num_layers)):
        p = lambda n: params[f"l{layer}.{n}"]  # noqa: E731
        g = lambda n: grads[f"l{layer}.{n}"]  # noqa: E731
        x, qh, kh, vh, a, o, x1, hid = layers[layer]
        # feed-forward
        g("w2")[...] += hid.T @ dx
        dz = (dx @ p("w2").T) * (1.0 - hid * hid)
        g("w1")[...] += x1.T @ dz
        dx1 = dx + dz @ p("w1").T
        # attention
        g("wo")[...] += o.T @ dx1
        do = (dx1 @ p("wo").T).reshape(L, H, dh).transpose(1, 0, 2)
        da = do @ vh.transpose(0, 2, 1)
        dvh = (a.transpose(0, 2, 1) @ do).transpose(1, 0, 2)
        ds = a * (da - np.sum(da * a, axis=-1, keepdims=True))
        dq = (ds @ kh).transpose(1, 0, 2) * att_scale
        dkh = (ds.transpose(0, 2, 1) @ qh).transpose(1, 0, 2) * att_scale
        T = kh.shape[1]
        dk_all = dkh.reshape(T, G, cfg.group, dh).sum(axis=2)
        dv_all = dvh.reshape(T, G, cfg.group, dh).sum(axis=2)
        P = T - L
        prefix_grads[layer] = (dk_all[:P], dv_all[:P])
        dk, dv = dk_all[P:], dv_all[P:]
        if own_kv_grad is not None:
            dk = dk + own_kv_grad[layer][0]
            dv = dv + own_kv_grad[layer][1]
        dq = dq.reshape(L, H * dh)
        dk = dk.reshape(L, G * dh)
        dv = dv.reshape(L, G * dh)
        g("wq")[...] += x.T @ dq
        g("wk")[...] += x.T @ dk
        g("wv")[...] += x.T @ dv
        dx = dx1 + dq @ p("wq").T + dk @ p("wk").T + dv @ p("wv").T
    np.add.at(grads["embed"], tokens, dx)
    return prefix_grads


def _causal_mask(length, prefix_len=0):
    i = np.arange(length)[:, None] + prefix_len
    j = np.arange(prefix_len + length)[None, :]
    return j <= i


# ------------------------------------------------------------ full sequences

def _as_sequences(batch):
    if hasattr(batch, "sequences"):
        batch = batch.sequences
    seqs = []
    for s in batch:
        toks = getattr(s, "tokens", s)
        if toks is None:
            raise ValidationError(f"sequence {getattr(s, 'id', '?')} has no tokens")
        seqs.append(np.asarray(toks, dtype=np.int64))
    return seqs


def _check_tokens(params, seqs):
    V = params.cfg.vocab_size
    for i, s in enumerate(seqs):
        if len(s) < 2:
            raise ValidationError(f"sequence {i} needs at least 2 tokens, has {len(s)}")
        if s.min() < 0 or s.max() >= V:
            raise ValidationError(f"sequence {i} has a token id outside [0, {V})")


def target_count(seqs):
    return sum(len(s) - 1 for s in seqs)


def _packed(seqs):
    tokens = np.concatenate(seqs)
    targets = np.concatenate([np.append(s[1:], -1) for s in seqs])
    seg = np.concatenate([np.full(len(s), i) for i, s in enumerate(seqs)])
    pos = np.arange(len(tokens))
    mask = (seg[:, None] == seg[None, :]) & (pos[None, :] <= pos[:, None])
    return tokens, targets, mask


def forward_full(params, batch, normalizer=None) -> float:
    """Mean next-token loss of the batch run as one block-diagonally masked stream."""
    seqs = _as_sequences(batch)
    _check_tokens(params, seqs)
    tokens, targets, mask = _packed(seqs)
    loss_sum, _, _ = _forward(params, tokens, targets, mask)
    return loss_sum / (normalizer or target_count(seqs))


def backward_full(params, batch, normalizer=None) -> GradientSet:
    """Exact gradients of :func:`forward_full`."""
    seqs = _as_sequences(batch)
    _check_tokens(params, seqs)
    n = normalizer or target_count(seqs)
    tokens, targets, mask = _packed(seqs)
    loss_sum, cache, _ = _forward(params, tokens, targets, mask)
    grads = zero_grads(params)
    _backward(params, cache, 1.0 / n, grads)
    grads.loss = loss_sum / n
    return grads


def finite_diff_grads(params, batch, epsilon=1e-5, n_entries=200, seed=0) -> GradientSet:
    """Central differences of :func:`forward_full` on ``n_entries`` sampled parameters.

    Unsampled entries are NaN. ``n_entries=None`` differentiates everything.
    """
    if not epsilon > 0:
        raise ValidationError("epsilon must be > 0")
    names = list(params)
    sizes = [params[n].size for n in names]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    if n_entries is None or n_entries >= total:
        picks = np.arange(total)
    else:
        picks = np.sort(rng.choice(total, size=n_entries, replace=False))
    offsets = np.cumsum([0] + sizes)
    out = GradientSet({n: np.full(params[n].shape, np.nan) for n in names})
    work = params.copy()
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[i], int(flat - offsets[i])
        arr = work[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + epsilon
        up = forward_full(work, batch)
        arr[idx] = orig - epsilon
        down = forward_full(work, batch)
        arr[idx] = orig
        out[name].reshape(-1)[idx] = (up - down) / (2 * epsilon)
    out.loss = forward_full(params, batch)
    return out


def fd_max_rel_error(analytic: GradientSet, numeric: GradientSet, floor=1e-6):
    """Worst entrywise ``|a - n| / max(|a|, |n|, floor)`` over the sampled entries."""
    worst = 0.0
    for name, num in numeric.items():
        keep = ~np.isnan(num)
        a, n = analytic[name][keep], num[keep]
        if a.size:
            rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            worst = max(worst, float(rel.max()))
    return worst


# ------------------------------------------------------------ chunked runs

class StateStore:
    """Key/value tensors and their accumulated gradients for dependent chunks.

    Entries are keyed by ``(sequence_id, index_in_group)`` and hold one
    ``(K, V)`` pair per layer. Reads of a gradient buffer are checked against
    the set of later chunks that have finished their backward.
    """

    def __init__(self, num_layers):
        self.num_layers = num_layers
        self.kv = {}
        self.grad = {}
        self.group_size = {}
        self.backwarded = {}
        self.violations = []
        self.peak_entries = 0

    def save(self, key, kv, group_size):
        self.kv[key] = kv
        self.group_size[key[0]] = group_size
        self.grad.setdefault(key, [(np.zeros_like(k), np.zeros_like(v)) for k, v in kv])
        self.peak_entries = max(self.peak_entries, len(self.kv))

    def prefix(self, sequence_id, index):
        missing = [i for i in range(index) if (sequence_id, i) not in self.kv]
        if missing:
            raise ValidationError(f"sequence {sequence_id}: key/value state of chunks {missing} not saved")
        return [
            (np.concatenate([self.kv[(sequence_id, i)][layer][0] for i in range(index)]),
             np.concatenate([self.kv[(sequence_id, i)][layer][1] for i in range(index)]))
            for layer in range(self.num_layers)
        ]

    def accumulate_prefix(self, sequence_id, index, prefix_grads):
        offset = 0
        for i in range(index):
            n = self.kv[(sequence_id, i)][0][0].shape[0] if self.num_layers else 0
            buf = self.grad[(sequence_id, i)]
            for layer in range(self.num_layers):
                dk, dv = prefix_grads[layer]
                buf[layer][0][...] += dk[offset:offset + n]
                buf[layer][1][...] += dv[offset:offset + n]
            offset += n

    def read_grad(self, sequence_id, index):
        done = self.backwarded.setdefault(sequence_id, set())
        pending = [j for j in range(index + 1, self.group_size[sequence_id]) if j not in done]
        if pending:
            self.violations.append(
                f"sequence {sequence_id}: gradient of chunk {index} read before backward of {pending}"
            )
        return self.grad[(sequence_id, index)]

    def finish(self, sequence_id, index):
        self.backwarded.setdefault(sequence_id, set()).add(index)
        if len(self.backwarded[sequence_id]) == self.group_size[sequence_id]:
            for i in range(self.group_size[sequence_id]):
                self.kv.pop((sequence_id, i), None)
                self.grad.pop((sequence_id, i), None)


@dataclass
class RunReport:
    loss: float
    grads: GradientSet
    peak_retained_tokens: int = 0
    forward_count: int = 0
    recompute_mismatches: int = 0
    kv_violations: list = field(default_factory=list)
    chunk_losses: dict = field(default_factory=dict)


def _segment_inputs(seg, seqs):
    toks = seqs[seg.sequence_id]
    lo, hi = seg.start_token, seg.start_token + seg.length
    tokens = toks[lo:hi]
    nxt = toks[lo + 1:hi + 1]
    targets = np.full(seg.length, -1, dtype=np.int64)
    targets[: len(nxt)] = nxt
    return tokens, targets


def run_plan(params, chunk_plan, exec_plan, batch, corrupt_kv_grads=False) -> RunReport:
    """Execute ``exec_plan`` over the chunks of ``chunk_plan`` and accumulate gradients.

    ``batch`` maps sequence ids to token arrays (a :class:`~chunktrain.dataset.Batch`,
    a dict, or a list indexed by id). ``corrupt_kv_grads`` drops the
    incoming key/value gradients; it exists only as a negative control.
    """
    if hasattr(batch, "sequences"):
        seqs = {s.id: s.tokens for s in batch.sequences}
    elif isinstance(batch, dict):
        seqs = dict(batch)
    else:
        seqs = dict(enumerate(batch))
    seqs = {sid: None if t is None else np.asarray(t, dtype=np.int64) for sid, t in seqs.items()}
    for sid, n in chunk_plan.sequence_lengths.items():
        if seqs.get(sid) is None or len(seqs[sid]) != n:
            raise ValidationError(f"sequence {sid}: tokens missing or not {n} long")
    _check_tokens(params, [seqs[sid] for sid in chunk_plan.sequence_lengths])
    diag = validate_plan(exec_plan)
    if diag.violations:
        raise ValidationError("execution plan is invalid: " + "; ".join(diag.violations[:3]))
    chunks = chunk_plan._index()
    scheduled = {e.chunk_id for e in exec_plan.events}
    if scheduled != set(chunks):
        raise ValidationError("execution plan and chunk plan cover different chunks")

    normalizer = sum(n - 1 for n in chunk_plan.sequence_lengths.values())
    scale = 1.0 / normalizer
    store = StateStore(params.cfg.num_layers)
    grads = zero_grads(params)
    retained = {}
    live = peak = 0
    report = RunReport(0.0, grads)

    def forward(chunk):
        total, caches = 0.0, []
        for seg in chunk.segments:
            tokens, targets = _segment_inputs(seg, seqs)
            prefix = None
            if chunk.is_dependent and chunk.index_in_group > 0:
                prefix = store.prefix(seg.sequence_id, chunk.index_in_group)
            plen = seg.start_token if prefix is not None else 0
            loss_sum, cache, own_kv = _forward(params, tokens, targets, _causal_mask(seg.length, plen), prefix)
            if chunk.is_dependent:
                size = len(chunk_plan.groups[chunk.group_id])
                store.save((seg.sequence_id, chunk.index_in_group), own_kv, size)
            total += loss_sum
            caches.append(cache)
        return total, caches

    for e in exec_plan.events:
        chunk = chunks[e.chunk_id]
        if e.kind in (FORWARD_DISCARD, FORWARD_RETAIN):
            report.forward_count += 1
            loss_sum, caches = forward(chunk)
            first = chunk.chunk_id not in report.chunk_losses
            if first:
                report.chunk_losses[chunk.chunk_id] = loss_sum
            elif loss_sum != report.chunk_losses[chunk.chunk_id]:
                report.recompute_mismatches += 1
            if e.kind == FORWARD_RETAIN:
                retained[chunk.chunk_id] = caches
                live += chunk.total_tokens
                peak = max(peak, live)
        elif e.kind == BACKWARD:
            caches = retained.pop(chunk.chunk_id)
            live -= chunk.total_tokens
            for seg, cache in zip(chunk.segments, caches):
                own = None
                if chunk.is_dependent:
                    own = store.read_grad(seg.sequence_id, chunk.index_in_group)
                    if corrupt_kv_grads:
                        own = None
                prefix_grads = _backward(params, cache, scale, grads, own)
                if chunk.is_dependent:
                    if chunk.index_in_group > 0:
                        store.accumulate_prefix(seg.sequence_id, chunk.index_in_group, prefix_grads)
                    store.finish(seg.sequence_id, chunk.index_in_group)

    report.loss = sum(report.chunk_losses.values()) * scale
    grads.loss = report.loss
    report.peak_retained_tokens = peak
    report.kv_violations = store.violations
    return report


def random_batch(rng, vocab_size, lengths):
    """Token batch (list of arrays) with the given lengths."""
    return [rng.integers(0, vocab_size, size=n) for n in lengths]
