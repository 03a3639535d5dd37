"""Toy training: synthetic decomposable task, exact backprop, plain SGD.

Two batch layouts mirror the two inference configurations.  The
prompt-in-encoder layout turns every (instance, prompt) pair into its own
example with the prompt concatenated to the input, so each epoch encodes
every shared input once per prompt.  The prompt-in-decoder layout keeps
one encoder pass per instance and trains all of the instance's decoder
streams against that single shared encoding.

The backward pass is exact and runs through the same counted kernels as
the forward pass (matrix multiplies, softmax/layer-norm/relu backward),
so per-epoch training flops are measured rather than estimated.  Gradient
buffer accumulation (the ``+=`` into weight-gradient arrays) is plain
numpy and is not counted; it is linear in parameter count and negligible
next to the matmul terms.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .costmodel import _encode_flops
from .engines import PID, PIE, Instance, Workload, infer
from .errors import ConfigError, TrainingError
from .kernels import CounterSink, F32
from .model import (
    BOS,
    EOS,
    SEP,
    ModelConfig,
    WeightSet,
    _multihead,
)

# -- synthetic decomposable task ----------------------------------------------


@dataclass(frozen=True)
class LabeledInstance:
    """A workload instance plus the gold answer span per prompt."""

    instance: Instance
    answers: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class SyntheticTask:
    """Key-value recall: the input interleaves key/value pairs, each prompt
    is one key, and the target is the value token that follows it.

    The keys form a fixed catalog shared by every instance, mirroring the
    fixed prompt sets of real decomposable tasks (slot names, section
    headers); the values are random per instance, so exact match on the
    held-out split requires actually reading them out of the input."""

    train: tuple[LabeledInstance, ...]
    heldout: tuple[LabeledInstance, ...]
    n_prompts: int
    n_s: int
    vocab_size: int
    prompt_len: int = 1
    answer_len: int = 1


def synthetic_vocab_ranges(vocab_size: int) -> tuple[range, range, int]:
    """(key ids, value ids, filler id) partition of the content vocabulary."""
    content = vocab_size - 5  # 4 reserved ids plus one filler id
    n_keys = content // 2
    keys = range(4, 4 + n_keys)
    values = range(4 + n_keys, 4 + 2 * n_keys)
    return keys, values, vocab_size - 1


def make_synthetic_task(
    seed: int,
    n_prompts: int,
    n_s: int,
    vocab_size: int,
    n_instances: int = 640,
) -> SyntheticTask:
    """Deterministic dataset of key-value recall instances.

    The train/held-out split hashes each instance's input tokens, so the
    split is a pure function of content: identical instances always land on
    the same side and the two sides are disjoint by construction.
    """
    keys, values, filler = synthetic_vocab_ranges(vocab_size)
    if len(keys) < n_prompts:
        raise ConfigError(
            f"vocab_size={vocab_size} yields {len(keys)} keys; need >= {n_prompts}"
        )
    if n_s < 2 * n_prompts:
        raise ConfigError(f"n_s={n_s} cannot hold {n_prompts} key-value pairs")
    catalog = np.asarray(keys)[:n_prompts]
    rng = np.random.default_rng(seed)
    train, heldout = [], []
    for _ in range(n_instances):
        vs = rng.choice(np.asarray(values), size=n_prompts, replace=True)
        x = np.full(n_s, filler, dtype=np.int64)
        x[0 : 2 * n_prompts : 2] = catalog
        x[1 : 2 * n_prompts : 2] = vs
        order = rng.permutation(n_prompts)
        labeled = LabeledInstance(
            instance=Instance(
                x=x,
                prompts=tuple(np.asarray([catalog[j]], dtype=np.int64) for j in order),
            ),
            answers=tuple((int(vs[j]),) for j in order),
        )
        digest = hashlib.sha256(x.tobytes()).digest()
        (heldout if digest[0] % 5 == 0 else train).append(labeled)
    return SyntheticTask(
        train=tuple(train),
        heldout=tuple(heldout),
        n_prompts=n_prompts,
        n_s=n_s,
        vocab_size=vocab_size,
    )


def split_key(example: LabeledInstance) -> str:
    """Hash used by the train/held-out split (exposed for the split check)."""
    return hashlib.sha256(np.asarray(example.instance.x).tobytes()).hexdigest()


# -- batch layouts ---------------------------------------------------------------


@dataclass(frozen=True)
class DecStream:
    tokens: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray


@dataclass(frozen=True)
class TrainBatch:
    """Uniform-shape training batch: ``group_size`` decoder streams share
    each encoder input (1 for prompt-in-encoder, U for prompt-in-decoder)."""

    enc_inputs: list[np.ndarray]
    streams: list[DecStream]
    group_size: int


def _pid_stream(prompt: np.ndarray, answer: tuple[int, ...]) -> DecStream:
    tokens = np.concatenate([prompt, np.asarray(answer, dtype=np.int64)])
    targets = np.concatenate([prompt[1:], np.asarray(answer, dtype=np.int64), [EOS]])
    n_p = prompt.size
    mask = np.zeros(tokens.size, dtype=bool)
    mask[n_p - 1 :] = True  # positions predicting answer tokens and the end token
    return DecStream(tokens=tokens, targets=targets, loss_mask=mask)


def _pie_stream(answer: tuple[int, ...]) -> DecStream:
    ans = np.asarray(answer, dtype=np.int64)
    tokens = np.concatenate([[BOS], ans])
    targets = np.concatenate([ans, [EOS]])
    return DecStream(tokens=tokens, targets=targets, loss_mask=np.ones(tokens.size, dtype=bool))


def pid_batches(
    examples: list[LabeledInstance], batch_instances: int, rng: np.random.Generator
) -> list[TrainBatch]:
    """All outputs of one shared input travel in the same batch group."""
    order = rng.permutation(len(examples))
    batches = []
    for start in range(0, len(order), batch_instances):
        chunk = [examples[i] for i in order[start : start + batch_instances]]
        enc_inputs = [np.asarray(ex.instance.x, dtype=np.int64) for ex in chunk]
        streams = [
            _pid_stream(np.asarray(z, dtype=np.int64), ans)
            for ex in chunk
            for z, ans in zip(ex.instance.prompts, ex.answers)
        ]
        batches.append(
            TrainBatch(enc_inputs=enc_inputs, streams=streams, group_size=len(chunk[0].answers))
        )
    return batches


def pie_batches(
    examples: list[LabeledInstance], batch_instances: int, rng: np.random.Generator
) -> list[TrainBatch]:
    """One example per (instance, prompt): the prompt rides in the encoder."""
    flat: list[tuple[np.ndarray, tuple[int, ...]]] = []
    for ex in examples:
        x = np.asarray(ex.instance.x, dtype=np.int64)
        for z, ans in zip(ex.instance.prompts, ex.answers):
            enc = np.concatenate([x, [SEP], np.asarray(z, dtype=np.int64)])
            flat.append((enc, ans))
    order = rng.permutation(len(flat))
    per_batch = batch_instances * (len(examples[0].answers) if examples else 1)
    batches = []
    for start in range(0, len(order), per_batch):
        chunk = [flat[i] for i in order[start : start + per_batch]]
        batches.append(
            TrainBatch(
                enc_inputs=[enc for enc, _ in chunk],
                streams=[_pie_stream(ans) for _, ans in chunk],
                group_size=1,
            )
        )
    return batches


# -- forward/backward ---------------------------------------------------------------


def _attn_backward(
    d_out: np.ndarray,
    mh: dict,
    n_heads: int,
    kv_group: int,
    dh_scale: float,
    sink: CounterSink,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of :func:`multiprompt.model._multihead`.

    ``d_out`` is ``[G, nq, d]`` matching the forward output; returns
    ``(d_q rows [G*nq, d], d_k [owners, m, d], d_v [owners, m, d])``.
    """
    g, nq, d = d_out.shape
    q4, k4, v4, probs = mh["q4"], mh["k4"], mh["v4"], mh["probs"]
    oh, gq, dh = q4.shape
    owners = oh // n_heads
    m = k4.shape[2]
    d_ctx = d_out.reshape(owners, kv_group * nq, n_heads, dh).transpose(0, 2, 1, 3)
    d_ctx = np.ascontiguousarray(d_ctx).reshape(oh, gq, dh)
    d_probs = kernels.bmm(d_ctx, np.ascontiguousarray(v4.transpose(0, 2, 1)), sink)
    d_v4 = kernels.bmm(np.ascontiguousarray(probs.transpose(0, 2, 1)), d_ctx, sink)
    d_scores = kernels.softmax_rows_backward(
        probs.reshape(oh * gq, m), d_probs.reshape(oh * gq, m), sink
    )
    d_scores = kernels.scale(d_scores, dh_scale, sink).reshape(oh, gq, m)
    d_q4 = kernels.bmm(d_scores, np.ascontiguousarray(k4.transpose(0, 2, 1)), sink)
    d_k4 = kernels.bmm(np.ascontiguousarray(d_scores.transpose(0, 2, 1)), q4, sink)
    d_q = d_q4.reshape(owners, n_heads, gq, dh).transpose(0, 2, 1, 3)
    d_q = np.ascontiguousarray(d_q).reshape(g * nq, d)
    d_k = d_k4.reshape(owners, n_heads, m, dh).transpose(0, 2, 1, 3)
    d_k = np.ascontiguousarray(d_k).reshape(owners, m, d)
    d_v = d_v4.reshape(owners, n_heads, m, dh).transpose(0, 2, 1, 3)
    d_v = np.ascontiguousarray(d_v).reshape(owners, m, d)
    return d_q, d_k, d_v


def _t(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def training_forward_backward(
    config: ModelConfig,
    weights: WeightSet,
    batch: TrainBatch,
    sink: CounterSink,
) -> tuple[float, dict[str, np.ndarray]]:
    """One exact forward/backward over a uniform batch; returns (loss, grads).

    Cross-entropy is averaged over positions whose loss mask is set (targets
    that are output tokens, never prompt tokens); decoder streams of one
    group share a single encoder forward and their memory gradients sum.
    """
    d, h = config.d_model, config.n_heads
    dh_scale = 1.0 / math.sqrt(config.head_dim)
    n_groups = len(batch.enc_inputs)
    group = batch.group_size
    n_streams = n_groups * group
    if len(batch.streams) != n_streams:
        raise ConfigError(
            f"batch has {len(batch.streams)} streams, expected {n_groups}x{group}"
        )
    le = batch.enc_inputs[0].size
    t_dec = batch.streams[0].tokens.size
    re, rd = n_groups * le, n_streams * t_dec

    grads = {name: np.zeros_like(arr) for name, arr in weights.named_arrays()}

    # ---- encoder forward
    emb_scale = math.sqrt(d)
    enc_tokens = np.concatenate(batch.enc_inputs)
    enc_pos = np.tile(np.arange(le), n_groups)
    with sink.scope("embedding"):
        x = kernels.gather_rows(weights.embedding, enc_tokens, sink)
        x = kernels.scale(x, emb_scale, sink)
        x = kernels.add(x, weights.positions[enc_pos], sink)
    enc_tape = []
    for layer in weights.enc_layers:
        t: dict = {}
        with sink.scope("encoder_self"):
            t["x_in"] = x
            normed = kernels.layer_norm(x, layer.attn.gain, sink)
            t["normed"] = normed
            q = kernels.matmul(normed, layer.attn.w_q, sink)
            k = kernels.matmul(normed, layer.attn.w_k, sink)
            v = kernels.matmul(normed, layer.attn.w_v, sink)
            mh: dict = {}
            ctx = _multihead(
                q.reshape(n_groups, le, d), k.reshape(n_groups, le, d),
                v.reshape(n_groups, le, d), h, sink, None, internals=mh,
            ).reshape(re, d)
            t["mh"], t["ctx"] = mh, ctx
            x = kernels.add(x, kernels.matmul(ctx, layer.attn.w_o, sink), sink)
        with sink.scope("feed_forward"):
            t["x_mid"] = x
            normed2 = kernels.layer_norm(x, layer.ffn.gain, sink)
            t["normed2"] = normed2
            pre = kernels.matmul(normed2, layer.ffn.w_in, sink)
            t["pre"] = pre
            hid = kernels.relu(pre, sink)
            t["hid"] = hid
            x = kernels.add(x, kernels.matmul(hid, layer.ffn.w_out, sink), sink)
        enc_tape.append(t)
    enc_final_in = x
    with sink.scope("other"):
        memory_flat = kernels.layer_norm(x, weights.enc_final_gain, sink)

    # ---- cross-attention K/V (shared per group)
    cross_kv = []
    with sink.scope("decoder_cross"):
        for layer in weights.dec_layers:
            cross_kv.append(
                {
                    "k": kernels.matmul(memory_flat, layer.cross_attn.w_k, sink),
                    "v": kernels.matmul(memory_flat, layer.cross_attn.w_v, sink),
                }
            )

    # ---- decoder forward
    dec_tokens = np.stack([s.tokens for s in batch.streams])
    targets = np.stack([s.targets for s in batch.streams]).reshape(-1)
    loss_mask = np.stack([s.loss_mask for s in batch.streams]).reshape(-1)
    dec_pos = np.tile(np.arange(t_dec), n_streams)
    with sink.scope("embedding"):
        x = kernels.gather_rows(weights.embedding, dec_tokens.reshape(-1), sink)
        x = kernels.scale(x, emb_scale, sink)
        x = kernels.add(x, weights.positions[dec_pos], sink)
    causal = np.tril(np.ones((t_dec, t_dec), dtype=bool))
    dec_tape = []
    for li, layer in enumerate(weights.dec_layers):
        t = {}
        with sink.scope("decoder_self"):
            t["x_in"] = x
            normed = kernels.layer_norm(x, layer.self_attn.gain, sink)
            t["normed"] = normed
            q = kernels.matmul(normed, layer.self_attn.w_q, sink)
            k = kernels.matmul(normed, layer.self_attn.w_k, sink)
            v = kernels.matmul(normed, layer.self_attn.w_v, sink)
            mh = {}
            ctx = _multihead(
                q.reshape(n_streams, t_dec, d), k.reshape(n_streams, t_dec, d),
                v.reshape(n_streams, t_dec, d), h, sink, causal, internals=mh,
            ).reshape(rd, d)
            t["mh_self"], t["ctx_self"] = mh, ctx
            x = kernels.add(x, kernels.matmul(ctx, layer.self_attn.w_o, sink), sink)
        with sink.scope("decoder_cross"):
            t["x_mid1"] = x
            normed_c = kernels.layer_norm(x, layer.cross_attn.gain, sink)
            t["normed_c"] = normed_c
            q_c = kernels.matmul(normed_c, layer.cross_attn.w_q, sink)
            mh_c: dict = {}
            ctx_c = _multihead(
                q_c.reshape(n_streams, t_dec, d),
                cross_kv[li]["k"].reshape(n_groups, le, d),
                cross_kv[li]["v"].reshape(n_groups, le, d),
                h, sink, None, kv_group=group, internals=mh_c,
            ).reshape(rd, d)
            t["mh_cross"], t["ctx_cross"] = mh_c, ctx_c
            x = kernels.add(x, kernels.matmul(ctx_c, layer.cross_attn.w_o, sink), sink)
        with sink.scope("feed_forward"):
            t["x_mid2"] = x
            normed2 = kernels.layer_norm(x, layer.ffn.gain, sink)
            t["normed2"] = normed2
            pre = kernels.matmul(normed2, layer.ffn.w_in, sink)
            t["pre"] = pre
            hid = kernels.relu(pre, sink)
            t["hid"] = hid
            x = kernels.add(x, kernels.matmul(hid, layer.ffn.w_out, sink), sink)
        dec_tape.append(t)
    dec_final_in = x
    with sink.scope("other"):
        final = kernels.layer_norm(x, weights.dec_final_gain, sink)
    with sink.scope("embedding"):
        logits = kernels.matmul(final, weights.head, sink)

    # ---- loss and logits gradient
    n_count = int(loss_mask.sum())
    with sink.scope("other"):
        probs = kernels.softmax_rows(logits, sink)
        picked = probs[np.arange(rd), targets]
        loss = float(-np.log(np.maximum(picked[loss_mask], 1e-30)).mean())
        d_logits = probs.copy()
        d_logits[np.arange(rd), targets] -= 1.0
        d_logits *= (loss_mask / n_count).astype(F32)[:, None]
        sink.add("loss_grad", 3 * rd * config.vocab_size, 8 * rd * config.vocab_size,
                 4 * rd * config.vocab_size)
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss")

    # ---- decoder backward
    with sink.scope("embedding"):
        grads["head"] += kernels.matmul(_t(final), d_logits, sink)
        d_final = kernels.matmul(d_logits, _t(weights.head), sink)
    with sink.scope("other"):
        dx, dg = kernels.layer_norm_backward(dec_final_in, weights.dec_final_gain, d_final, sink)
        grads["dec_final_gain"] += dg
    d_memory = np.zeros_like(memory_flat)
    for li in reversed(range(config.n_dec_layers)):
        layer = weights.dec_layers[li]
        t = dec_tape[li]
        with sink.scope("feed_forward"):
            grads[f"dec.{li}.ffn.w_out"] += kernels.matmul(_t(t["hid"]), dx, sink)
            d_hid = kernels.matmul(dx, _t(layer.ffn.w_out), sink)
            d_pre = kernels.relu_backward(t["pre"], d_hid, sink)
            grads[f"dec.{li}.ffn.w_in"] += kernels.matmul(_t(t["normed2"]), d_pre, sink)
            d_normed2 = kernels.matmul(d_pre, _t(layer.ffn.w_in), sink)
            d_ln, dg = kernels.layer_norm_backward(t["x_mid2"], layer.ffn.gain, d_normed2, sink)
            grads[f"dec.{li}.ffn.gain"] += dg
            dx = kernels.add(dx, d_ln, sink)
        with sink.scope("decoder_cross"):
            grads[f"dec.{li}.cross.w_o"] += kernels.matmul(_t(t["ctx_cross"]), dx, sink)
            d_ctx = kernels.matmul(dx, _t(layer.cross_attn.w_o), sink)
            d_q, d_k, d_v = _attn_backward(
                d_ctx.reshape(n_streams, t_dec, d), t["mh_cross"], h, group, dh_scale, sink
            )
            grads[f"dec.{li}.cross.w_q"] += kernels.matmul(_t(t["normed_c"]), d_q, sink)
            d_normed_c = kernels.matmul(d_q, _t(layer.cross_attn.w_q), sink)
            d_kv_rows = d_k.reshape(re, d)
            grads[f"dec.{li}.cross.w_k"] += kernels.matmul(_t(memory_flat), d_kv_rows, sink)
            d_memory += kernels.matmul(d_kv_rows, _t(layer.cross_attn.w_k), sink)
            d_vv_rows = d_v.reshape(re, d)
            grads[f"dec.{li}.cross.w_v"] += kernels.matmul(_t(memory_flat), d_vv_rows, sink)
            d_memory += kernels.matmul(d_vv_rows, _t(layer.cross_attn.w_v), sink)
            d_ln, dg = kernels.layer_norm_backward(t["x_mid1"], layer.cross_attn.gain, d_normed_c, sink)
            grads[f"dec.{li}.cross.gain"] += dg
            dx = kernels.add(dx, d_ln, sink)
        with sink.scope("decoder_self"):
            grads[f"dec.{li}.self.w_o"] += kernels.matmul(_t(t["ctx_self"]), dx, sink)
            d_ctx = kernels.matmul(dx, _t(layer.self_attn.w_o), sink)
            d_q, d_k, d_v = _attn_backward(
                d_ctx.reshape(n_streams, t_dec, d), t["mh_self"], h, 1, dh_scale, sink
            )
            d_k_rows, d_v_rows = d_k.reshape(rd, d), d_v.reshape(rd, d)
            grads[f"dec.{li}.self.w_q"] += kernels.matmul(_t(t["normed"]), d_q, sink)
            grads[f"dec.{li}.self.w_k"] += kernels.matmul(_t(t["normed"]), d_k_rows, sink)
            grads[f"dec.{li}.self.w_v"] += kernels.matmul(_t(t["normed"]), d_v_rows, sink)
            d_normed = kernels.matmul(d_q, _t(layer.self_attn.w_q), sink)
            d_normed = kernels.add(d_normed, kernels.matmul(d_k_rows, _t(layer.self_attn.w_k), sink), sink)
            d_normed = kernels.add(d_normed, kernels.matmul(d_v_rows, _t(layer.self_attn.w_v), sink), sink)
            d_ln, dg = kernels.layer_norm_backward(t["x_in"], layer.self_attn.gain, d_normed, sink)
            grads[f"dec.{li}.self.gain"] += dg
            dx = kernels.add(dx, d_ln, sink)
    with sink.scope("embedding"):
        kernels.scatter_add_rows(
            grads["embedding"], dec_tokens.reshape(-1), kernels.scale(dx, emb_scale, sink), sink
        )

    # ---- encoder backward (memory gradient fans in from every decoder layer)
    with sink.scope("other"):
        dx, dg = kernels.layer_norm_backward(enc_final_in, weights.enc_final_gain, d_memory, sink)
        grads["enc_final_gain"] += dg
    for li in reversed(range(config.n_enc_layers)):
        layer = weights.enc_layers[li]
        t = enc_tape[li]
        with sink.scope("feed_forward"):
            grads[f"enc.{li}.ffn.w_out"] += kernels.matmul(_t(t["hid"]), dx, sink)
            d_hid = kernels.matmul(dx, _t(layer.ffn.w_out), sink)
            d_pre = kernels.relu_backward(t["pre"], d_hid, sink)
            grads[f"enc.{li}.ffn.w_in"] += kernels.matmul(_t(t["normed2"]), d_pre, sink)
            d_normed2 = kernels.matmul(d_pre, _t(layer.ffn.w_in), sink)
            d_ln, dg = kernels.layer_norm_backward(t["x_mid"], layer.ffn.gain, d_normed2, sink)
            grads[f"enc.{li}.ffn.gain"] += dg
            dx = kernels.add(dx, d_ln, sink)
        with sink.scope("encoder_self"):
            grads[f"enc.{li}.attn.w_o"] += kernels.matmul(_t(t["ctx"]), dx, sink)
            d_ctx = kernels.matmul(dx, _t(layer.attn.w_o), sink)
            d_q, d_k, d_v = _attn_backward(
                d_ctx.reshape(n_groups, le, d), t["mh"], h, 1, dh_scale, sink
            )
            d_k_rows, d_v_rows = d_k.reshape(re, d), d_v.reshape(re, d)
            grads[f"enc.{li}.attn.w_q"] += kernels.matmul(_t(t["normed"]), d_q, sink)
            grads[f"enc.{li}.attn.w_k"] += kernels.matmul(_t(t["normed"]), d_k_rows, sink)
            grads[f"enc.{li}.attn.w_v"] += kernels.matmul(_t(t["normed"]), d_v_rows, sink)
            d_normed = kernels.matmul(d_q, _t(layer.attn.w_q), sink)
            d_normed = kernels.add(d_normed, kernels.matmul(d_k_rows, _t(layer.attn.w_k), sink), sink)
            d_normed = kernels.add(d_normed, kernels.matmul(d_v_rows, _t(layer.attn.w_v), sink), sink)
            d_ln, dg = kernels.layer_norm_backward(t["x_in"], layer.attn.gain, d_normed, sink)
            grads[f"enc.{li}.attn.gain"] += dg
            dx = kernels.add(dx, d_ln, sink)
    with sink.scope("embedding"):
        kernels.scatter_add_rows(
            grads["embedding"], enc_tokens, kernels.scale(dx, emb_scale, sink), sink
        )
    return loss, grads


def sgd_update(weights: WeightSet, grads: dict[str, np.ndarray], lr: float, sink: CounterSink) -> None:
    for name, arr in weights.named_arrays():
        g = grads[name]
        arr -= F32(lr) * g
        sink.add("sgd", 2 * arr.size, 8 * arr.size, 4 * arr.size)


def train_step(
    config: ModelConfig,
    weights: WeightSet,
    batch: TrainBatch,
    learning_rate: float,
    sink: CounterSink | None = None,
    step_index: int | None = None,
) -> float:
    """One SGD step in place; returns the batch loss."""
    sink = sink if sink is not None else CounterSink()
    try:
        loss, grads = training_forward_backward(config, weights, batch, sink)
    except (TrainingError, FloatingPointError) as exc:
        raise TrainingError(f"{exc} at step {step_index}") from None
    sgd_update(weights, grads, learning_rate, sink)
    return loss


# -- orchestration -------------------------------------------------------------------


@dataclass
class TrainingRun:
    layout: str
    losses: list[float] = field(default_factory=list)
    epoch_flops: list[int] = field(default_factory=list)
    exact_match: float | None = None

    @property
    def flops_per_epoch(self) -> int:
        return self.epoch_flops[0] if self.epoch_flops else 0


def train_layout(
    config: ModelConfig,
    task: SyntheticTask,
    layout: str,
    epochs: int,
    learning_rate: float,
    batch_instances: int,
    seed: int,
    sink: CounterSink | None = None,
) -> tuple[WeightSet, TrainingRun]:
    """Train a fresh model with one batch layout; flops measured per epoch."""
    from .model import init_weights

    if layout not in (PIE, PID):
        raise ConfigError(f"unknown layout {layout!r}")
    weights = init_weights(config, seed)
    sink = sink if sink is not None else CounterSink()
    rng = np.random.default_rng(seed)
    run = TrainingRun(layout=layout)
    build = pid_batches if layout == PID else pie_batches
    step = 0
    for _ in range(epochs):
        flops_before = sink.flops
        epoch_losses = []
        for batch in build(list(task.train), batch_instances, rng):
            epoch_losses.append(
                train_step(config, weights, batch, learning_rate, sink, step_index=step)
            )
            step += 1
        run.losses.append(float(np.mean(epoch_losses)))
        run.epoch_flops.append(sink.flops - flops_before)
    return weights, run


def evaluate_exact_match(
    config: ModelConfig,
    weights: WeightSet,
    examples: list[LabeledInstance],
    layout: str,
    batch_instances: int = 16,
) -> float:
    """Fraction of prompts whose greedy decode equals answer plus end token."""
    if not examples:
        return 0.0
    max_new = len(examples[0].answers[0]) + 1 if examples[0].answers else 1
    hits = total = 0
    for start in range(0, len(examples), batch_instances):
        chunk = examples[start : start + batch_instances]
        wl = Workload(
            instances=tuple(ex.instance for ex in chunk), max_new_tokens=max_new
        )
        res = infer(layout, config, weights, wl)
        for ex, per_instance in zip(chunk, res.outputs):
            for ans, got in zip(ex.answers, per_instance):
                hits += int(got == list(ans) + [EOS])
                total += 1
    return hits / total


def _full_decoder_forward_flops(
    config: ModelConfig, n_streams: int, t_dec: int, m: int, owners: int
) -> int:
    d, dff, h, v = config.d_model, config.d_ff, config.n_heads, config.vocab_size
    rows = n_streams * t_dec
    layers = config.n_dec_layers
    self_part = layers * (
        8 * rows * d * d + 4 * n_streams * t_dec * t_dec * d
        + 5 * n_streams * h * t_dec * t_dec + 7 * rows * d
    )
    kv = layers * 4 * owners * m * d * d
    cross = kv + layers * (
        4 * rows * d * d + 4 * n_streams * t_dec * m * d + 5 * n_streams * h * t_dec * m
        + 7 * rows * d
    )
    ffn = layers * (4 * rows * d * dff + rows * dff + 7 * rows * d)
    return self_part + cross + ffn + 2 * rows * d + 6 * rows * d + 2 * rows * d * v


@dataclass(frozen=True)
class ToyTrainingSpec:
    """Frozen defaults that reach full held-out exact match with plain SGD."""

    n_prompts: int = 4
    n_s: int = 8
    vocab_size: int = 37
    n_instances: int = 2048
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    d_ff: int = 64
    max_len: int = 32
    epochs: int = 30
    learning_rate: float = 0.5
    batch_instances: int = 8
    task_seed: int = 0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads,
            n_enc_layers=self.n_layers, n_dec_layers=self.n_layers,
            d_ff=self.d_ff, vocab_size=self.vocab_size, max_len=self.max_len,
        )

    def task(self) -> SyntheticTask:
        return make_synthetic_task(
            self.task_seed, self.n_prompts, self.n_s, self.vocab_size, self.n_instances
        )


def run_toy_training(
    spec: ToyTrainingSpec, seed: int, layouts: tuple[str, ...] = (PIE, PID)
) -> dict[str, TrainingRun]:
    """Train one model per layout and report exact match plus epoch flops."""
    config = spec.model_config()
    task = spec.task()
    runs: dict[str, TrainingRun] = {}
    for layout in layouts:
        weights, run = train_layout(
            config, task, layout, spec.epochs, spec.learning_rate,
            spec.batch_instances, seed,
        )
        run.exact_match = evaluate_exact_match(config, weights, list(task.heldout), layout)
        runs[layout] = run
    return runs


def predicted_training_flop_ratio(config: ModelConfig, task: SyntheticTask) -> float:
    """Analytic prompt-in-encoder over prompt-in-decoder per-epoch flops.

    Forward-pass closed forms only: the backward pass multiplies both
    layouts by nearly the same factor, so it cancels in the ratio.
    """
    u = task.n_prompts
    ans = task.answer_len
    pie_enc_len = task.n_s + 1 + task.prompt_len
    pie = _encode_flops(config, u, pie_enc_len)
    pie_total = sum(pie.values()) + _full_decoder_forward_flops(
        config, u, 1 + ans, pie_enc_len, u
    )
    pid = _encode_flops(config, 1, task.n_s)
    pid_total = sum(pid.values()) + _full_decoder_forward_flops(
        config, u, task.prompt_len + ans, task.n_s, 1
    )
    return pie_total / pid_total
