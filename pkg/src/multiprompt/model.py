"""Toy encoder-decoder transformer over the instrumented kernels.

Architecture: token embeddings plus sinusoidal absolute positions,
pre-layer-norm residual blocks, multi-head attention with the head
dimension ``d/h`` and all heads projected jointly through ``d x d``
matrices, ReLU feed-forward sublayers, a final layer norm per stack, and
a linear vocabulary head.

The decoder runs incrementally against a :class:`KVCacheSet`: self-attention
keys/values are appended one position per active stream, cross-attention
keys/values are projected once from the encoder output ``M`` and owned
either per stream or per instance (the latter is what lets several decode
streams share one broadcast cache).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, LengthError, MaskError, ShapeError
from .kernels import CounterSink, F32

# Reserved vocabulary ids, in every model regardless of size.
PAD, BOS, EOS, SEP = 0, 1, 2, 3
N_RESERVED = 4


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of the toy transformer."""

    d_model: int
    n_heads: int
    n_enc_layers: int
    n_dec_layers: int
    d_ff: int
    vocab_size: int
    max_len: int

    def __post_init__(self) -> None:
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size <= N_RESERVED:
            raise ConfigError(f"vocab_size must exceed {N_RESERVED} reserved ids")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    gain: np.ndarray  # pre-sublayer layer-norm gain


@dataclass
class FeedForwardWeights:
    w_in: np.ndarray
    w_out: np.ndarray
    gain: np.ndarray


@dataclass
class EncoderLayerWeights:
    attn: AttentionWeights
    ffn: FeedForwardWeights


@dataclass
class DecoderLayerWeights:
    self_attn: AttentionWeights
    cross_attn: AttentionWeights
    ffn: FeedForwardWeights


@dataclass
class WeightSet:
    """All trainable arrays, finite and shape-consistent with the config."""

    config: ModelConfig
    embedding: np.ndarray  # [vocab, d]
    enc_layers: list[EncoderLayerWeights]
    dec_layers: list[DecoderLayerWeights]
    enc_final_gain: np.ndarray
    dec_final_gain: np.ndarray
    head: np.ndarray  # [d, vocab]
    positions: np.ndarray = field(init=False)  # sinusoid table, not trained

    def __post_init__(self) -> None:
        self.positions = sinusoid_table(self.config.max_len, self.config.d_model)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Trainable arrays in deterministic order (sinusoids excluded)."""
        out: list[tuple[str, np.ndarray]] = [("embedding", self.embedding)]

        def attn(prefix: str, a: AttentionWeights):
            out.extend(
                [
                    (f"{prefix}.w_q", a.w_q),
                    (f"{prefix}.w_k", a.w_k),
                    (f"{prefix}.w_v", a.w_v),
                    (f"{prefix}.w_o", a.w_o),
                    (f"{prefix}.gain", a.gain),
                ]
            )

        for i, layer in enumerate(self.enc_layers):
            attn(f"enc.{i}.attn", layer.attn)
            out.extend(
                [
                    (f"enc.{i}.ffn.w_in", layer.ffn.w_in),
                    (f"enc.{i}.ffn.w_out", layer.ffn.w_out),
                    (f"enc.{i}.ffn.gain", layer.ffn.gain),
                ]
            )
        for i, layer in enumerate(self.dec_layers):
            attn(f"dec.{i}.self", layer.self_attn)
            attn(f"dec.{i}.cross", layer.cross_attn)
            out.extend(
                [
                    (f"dec.{i}.ffn.w_in", layer.ffn.w_in),
                    (f"dec.{i}.ffn.w_out", layer.ffn.w_out),
                    (f"dec.{i}.ffn.gain", layer.ffn.gain),
                ]
            )
        out.append(("enc_final_gain", self.enc_final_gain))
        out.append(("dec_final_gain", self.dec_final_gain))
        out.append(("head", self.head))
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(arr.tobytes())
        return h.hexdigest()


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    """Parameter-free absolute position encodings [max_len, d]."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(F32)


def init_weights(config: ModelConfig, seed: int) -> WeightSet:
    """Deterministic weights: identical (config, seed) gives identical bytes.

    Matrix entries are drawn uniformly from [-0.05, 0.05] by a PCG64
    generator (``numpy.random.default_rng``) in a fixed order; layer-norm
    gains start at one (the multiplicative identity).
    """
    rng = np.random.default_rng(seed)
    d, dff, v = config.d_model, config.d_ff, config.vocab_size

    def mat(*shape: int) -> np.ndarray:
        return rng.uniform(-0.05, 0.05, size=shape).astype(F32)

    def attn() -> AttentionWeights:
        return AttentionWeights(mat(d, d), mat(d, d), mat(d, d), mat(d, d), np.ones(d, dtype=F32))

    def ffn() -> FeedForwardWeights:
        return FeedForwardWeights(mat(d, dff), mat(dff, d), np.ones(d, dtype=F32))

    embedding = mat(v, d)
    enc_layers = [EncoderLayerWeights(attn(), ffn()) for _ in range(config.n_enc_layers)]
    dec_layers = [
        DecoderLayerWeights(attn(), attn(), ffn()) for _ in range(config.n_dec_layers)
    ]
    return WeightSet(
        config=config,
        embedding=embedding,
        enc_layers=enc_layers,
        dec_layers=dec_layers,
        enc_final_gain=np.ones(d, dtype=F32),
        dec_final_gain=np.ones(d, dtype=F32),
        head=mat(d, v),
    )


# -- attention -------------------------------------------------------------


@dataclass(frozen=True)
class AttentionMask:
    """Boolean visibility matrix [query_len, key_len]; True means visible."""

    allowed: np.ndarray

    @classmethod
    def causal(cls, n: int) -> "AttentionMask":
        return cls(np.tril(np.ones((n, n), dtype=bool)))

    @classmethod
    def full(cls, n: int, m: int) -> "AttentionMask":
        return cls(np.ones((n, m), dtype=bool))


def attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    w_o: np.ndarray,
    mask: AttentionMask | None,
    n_heads: int,
    sink: CounterSink,
) -> np.ndarray:
    """Scaled dot-product attention over already-projected q/k/v.

    Computes ``softmax(q kT / sqrt(d/h)) v`` per head on the joint
    dimension ``d`` and applies the output projection ``w_o``.  Masked
    positions receive exactly zero attention weight; a query row with no
    visible keys raises :class:`MaskError`.
    """
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    n, d = q.shape
    m = k.shape[0]
    if k.shape != (m, d) or v.shape != (m, d):
        raise ShapeError(f"attention: q is {q.shape}, k is {k.shape}, v is {v.shape}")
    if w_o.shape != (d, d):
        raise ShapeError(f"attention: w_o is {w_o.shape}, want ({d}, {d})")
    if d % n_heads != 0:
        raise ShapeError(f"attention: d={d} not divisible by n_heads={n_heads}")
    if mask is not None and mask.allowed.shape != (n, m):
        raise ShapeError(
            f"attention: mask is {mask.allowed.shape}, want ({n}, {m})"
        )
    dh = d // n_heads
    out = np.empty((n, d), dtype=F32)
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = kernels.matmul(q[:, sl], np.ascontiguousarray(k[:, sl].T), sink)
        scores = kernels.scale(scores, 1.0 / math.sqrt(dh), sink)
        probs = kernels.softmax_rows(scores, sink, mask=None if mask is None else mask.allowed)
        out[:, sl] = kernels.matmul(probs, v[:, sl], sink)
    return kernels.matmul(out, w_o, sink)


# -- encoder ----------------------------------------------------------------


def _validate_tokens(config: ModelConfig, tokens: np.ndarray, what: str) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise LengthError(f"{what} must be a non-empty 1-D id sequence, got shape {tokens.shape}")
    if tokens.size > config.max_len:
        raise LengthError(f"{what} has {tokens.size} tokens, max_len is {config.max_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ShapeError(
            f"{what} ids span [{tokens.min()}, {tokens.max()}], vocab_size is {config.vocab_size}"
        )
    return tokens


def _embed(weights: WeightSet, tokens_flat: np.ndarray, pos_flat: np.ndarray, sink: CounterSink) -> np.ndarray:
    # embeddings are scaled by sqrt(d) before the position add so token
    # identity is not drowned out by the unit-magnitude sinusoids
    with sink.scope("embedding"):
        x = kernels.gather_rows(weights.embedding, tokens_flat, sink)
        x = kernels.scale(x, math.sqrt(weights.config.d_model), sink)
        return kernels.add(x, weights.positions[pos_flat], sink)


def _multihead(
    x_q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    n_heads: int,
    sink: CounterSink,
    mask_rows: np.ndarray | None,
    kv_group: int = 1,
    internals: dict | None = None,
) -> np.ndarray:
    """Stream-batched attention core on 3-D tensors.

    ``x_q`` is ``[G, nq, d]`` queries; ``k``/``v`` are ``[O, m, d]`` with
    ``O * kv_group == G``: consecutive runs of ``kv_group`` query slices
    share one k/v slice, so a shared slice is read once per owner rather
    than once per stream (the broadcast at the heart of the shared-cache
    path).  Returns ``[G, nq, d]`` concatenated over heads, before any
    output projection.  ``mask_rows`` is an optional bool ``[nq, m]`` mask
    applied identically to every slice.
    """
    g, nq, d = x_q.shape
    owners, m, _ = k.shape
    dh = d // n_heads
    # fold heads into the batch dimension: [O*h, ...]
    q4 = x_q.reshape(owners, kv_group * nq, n_heads, dh).transpose(0, 2, 1, 3)
    q4 = np.ascontiguousarray(q4).reshape(owners * n_heads, kv_group * nq, dh)
    k4 = k.reshape(owners, m, n_heads, dh).transpose(0, 2, 3, 1)
    k4 = np.ascontiguousarray(k4).reshape(owners * n_heads, dh, m)
    v4 = v.reshape(owners, m, n_heads, dh).transpose(0, 2, 1, 3)
    v4 = np.ascontiguousarray(v4).reshape(owners * n_heads, m, dh)
    scores = kernels.bmm(q4, k4, sink)
    scores = kernels.scale(scores, 1.0 / math.sqrt(dh), sink)
    flat = scores.reshape(owners * n_heads * kv_group * nq, m)
    if mask_rows is None:
        probs = kernels.softmax_rows(flat, sink)
    else:
        tiled = np.broadcast_to(mask_rows, (owners * n_heads * kv_group, nq, m))
        probs = kernels.softmax_rows(flat, sink, mask=np.ascontiguousarray(tiled).reshape(flat.shape))
    probs = probs.reshape(owners * n_heads, kv_group * nq, m)
    ctx = kernels.bmm(probs, v4, sink)
    if internals is not None:
        internals.update(q4=q4, k4=k4, v4=v4, probs=probs)
    ctx = ctx.reshape(owners, n_heads, kv_group * nq, dh).transpose(0, 2, 1, 3)
    return np.ascontiguousarray(ctx).reshape(g, nq, d)


def _project_rows(x: np.ndarray, w: np.ndarray, sink: CounterSink) -> np.ndarray:
    """[rows, d] @ [d, out] with the weight matrix read once for all rows."""
    return kernels.matmul(x, w, sink)


def encode_batch(
    config: ModelConfig,
    weights: WeightSet,
    sequences: list[np.ndarray],
    sink: CounterSink,
) -> np.ndarray:
    """Encoder forward over ``b`` equal-length sequences; returns ``[b, L, d]``.

    Projections and norms are row-stacked across the batch so each weight
    matrix is read once per call; attention mixes positions only within a
    sequence, so batching never changes any instance's output.
    """
    if not sequences:
        raise LengthError("encoder batch is empty")
    toks = [_validate_tokens(config, s, "encoder input") for s in sequences]
    lengths = {t.size for t in toks}
    if len(lengths) != 1:
        raise ShapeError(f"encoder batch has mixed lengths {sorted(lengths)}")
    b, n = len(toks), toks[0].size
    d = config.d_model
    flat_tokens = np.concatenate(toks)
    flat_pos = np.tile(np.arange(n), b)
    x = _embed(weights, flat_tokens, flat_pos, sink)  # [b*n, d]
    for layer in weights.enc_layers:
        with sink.scope("encoder_self"):
            normed = kernels.layer_norm(x, layer.attn.gain, sink)
            q = _project_rows(normed, layer.attn.w_q, sink).reshape(b, n, d)
            k = _project_rows(normed, layer.attn.w_k, sink).reshape(b, n, d)
            v = _project_rows(normed, layer.attn.w_v, sink).reshape(b, n, d)
            ctx = _multihead(q, k, v, config.n_heads, sink, mask_rows=None)
            proj = _project_rows(ctx.reshape(b * n, d), layer.attn.w_o, sink)
            x = kernels.add(x, proj, sink)
        with sink.scope("feed_forward"):
            normed = kernels.layer_norm(x, layer.ffn.gain, sink)
            hidden = kernels.relu(_project_rows(normed, layer.ffn.w_in, sink), sink)
            proj = _project_rows(hidden, layer.ffn.w_out, sink)
            x = kernels.add(x, proj, sink)
    x = kernels.layer_norm(x, weights.enc_final_gain, sink)
    return x.reshape(b, n, d)


def encoder_forward(
    config: ModelConfig, weights: WeightSet, tokens: np.ndarray, sink: CounterSink
) -> np.ndarray:
    """Encoder forward for one sequence; returns contextual embeddings [L, d]."""
    return encode_batch(config, weights, [np.asarray(tokens)], sink)[0]


# -- decoder state -----------------------------------------------------------


@dataclass
class KVCacheSet:
    """Per-run decoder caches for ``n_streams`` lockstep streams.

    ``self_k``/``self_v`` hold one ``[S, capacity, d]`` array per decoder
    layer; ``length`` positions are filled.  ``cross_k``/``cross_v`` hold
    the encoder-side projections, one ``[owners, m, d]`` array per layer:
    ``owners == n_streams`` when every stream carries its own copy, and
    ``owners == n_streams / kv_group`` when ``kv_group`` consecutive
    streams share (and broadcast) one slice.
    """

    n_streams: int
    capacity: int
    kv_group: int
    self_k: list[np.ndarray]
    self_v: list[np.ndarray]
    cross_k: list[np.ndarray]
    cross_v: list[np.ndarray]
    length: int = 0
    written_len: np.ndarray = field(default=None)  # type: ignore[assignment]
    active: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.written_len is None:
            self.written_len = np.zeros(self.n_streams, dtype=np.int64)
        if self.active is None:
            self.active = np.ones(self.n_streams, dtype=bool)

    @property
    def cross_owners(self) -> int:
        return self.cross_k[0].shape[0]


def init_decode_state(
    config: ModelConfig,
    weights: WeightSet,
    memories: np.ndarray,
    streams_per_memory: int,
    capacity: int,
    sink: CounterSink,
) -> KVCacheSet:
    """Project cross-attention K/V from encoder outputs and allocate caches.

    ``memories`` is ``[owners, m, d]``; each memory serves
    ``streams_per_memory`` consecutive streams through one shared slice.
    Pass ``streams_per_memory=1`` with one memory per stream for fully
    replicated caches.
    """
    owners, m, d = memories.shape
    n_streams = owners * streams_per_memory
    if capacity > config.max_len:
        raise LengthError(f"decoder capacity {capacity} exceeds max_len {config.max_len}")
    cross_k, cross_v = [], []
    with sink.scope("decoder_cross"):
        for layer in weights.dec_layers:
            ks = np.empty((owners, m, d), dtype=F32)
            vs = np.empty((owners, m, d), dtype=F32)
            for o in range(owners):
                ks[o] = kernels.matmul(memories[o], layer.cross_attn.w_k, sink)
                vs[o] = kernels.matmul(memories[o], layer.cross_attn.w_v, sink)
            cross_k.append(ks)
            cross_v.append(vs)
    return KVCacheSet(
        n_streams=n_streams,
        capacity=capacity,
        kv_group=streams_per_memory,
        self_k=[np.zeros((n_streams, capacity, d), dtype=F32) for _ in weights.dec_layers],
        self_v=[np.zeros((n_streams, capacity, d), dtype=F32) for _ in weights.dec_layers],
        cross_k=cross_k,
        cross_v=cross_v,
    )


def _decoder_sublayers(
    config: ModelConfig,
    weights: WeightSet,
    state: KVCacheSet,
    x: np.ndarray,
    p: int,
    write_rows: np.ndarray,
    causal_rows: np.ndarray | None,
    sink: CounterSink,
) -> np.ndarray:
    """Shared body of prefill and single-step decode.

    ``x`` is ``[S*p, d]`` for ``p`` new positions per stream starting at
    ``state.length``; self-attention K/V rows are written for streams in
    ``write_rows`` only.
    """
    s = state.n_streams
    d = config.d_model
    start = state.length
    total = start + p
    for li, layer in enumerate(weights.dec_layers):
        with sink.scope("decoder_self"):
            normed = kernels.layer_norm(x, layer.self_attn.gain, sink)
            q = _project_rows(normed, layer.self_attn.w_q, sink)
            k = _project_rows(normed, layer.self_attn.w_k, sink)
            v = _project_rows(normed, layer.self_attn.w_v, sink)
            k3 = k.reshape(s, p, d)
            v3 = v.reshape(s, p, d)
            state.self_k[li][write_rows, start:total] = k3[write_rows]
            state.self_v[li][write_rows, start:total] = v3[write_rows]
            # frozen streams keep zero K/V at dead positions; their own
            # output is never sampled so the garbage attention is inert
            keys = state.self_k[li][:, :total]
            vals = state.self_v[li][:, :total]
            mask = None
            if causal_rows is not None:
                mask = np.concatenate(
                    [np.ones((p, start), dtype=bool), causal_rows], axis=1
                )
            ctx = _multihead(
                q.reshape(s, p, d), keys, vals, config.n_heads, sink, mask_rows=mask
            )
            proj = _project_rows(ctx.reshape(s * p, d), layer.self_attn.w_o, sink)
            x = kernels.add(x, proj, sink)
        with sink.scope("decoder_cross"):
            normed = kernels.layer_norm(x, layer.cross_attn.gain, sink)
            q = _project_rows(normed, layer.cross_attn.w_q, sink)
            ctx = _multihead(
                q.reshape(s, p, d),
                state.cross_k[li],
                state.cross_v[li],
                config.n_heads,
                sink,
                mask_rows=None,
                kv_group=state.kv_group,
            )
            proj = _project_rows(ctx.reshape(s * p, d), layer.cross_attn.w_o, sink)
            x = kernels.add(x, proj, sink)
        with sink.scope("feed_forward"):
            normed = kernels.layer_norm(x, layer.ffn.gain, sink)
            hidden = kernels.relu(_project_rows(normed, layer.ffn.w_in, sink), sink)
            proj = _project_rows(hidden, layer.ffn.w_out, sink)
            x = kernels.add(x, proj, sink)
    return x


def decoder_prefill(
    config: ModelConfig,
    weights: WeightSet,
    state: KVCacheSet,
    token_block: np.ndarray,
    sink: CounterSink,
    return_all_logits: bool = False,
) -> np.ndarray:
    """Process ``p`` known positions per stream in one causal pass.

    ``token_block`` is ``[S, p]``.  Fills cache positions
    ``length .. length+p-1`` and returns the last position's logits
    ``[S, vocab]`` (or all positions ``[S, p, vocab]``).
    """
    token_block = np.asarray(token_block, dtype=np.int64)
    s, p = token_block.shape
    if s != state.n_streams:
        raise ShapeError(f"prefill block has {s} streams, state has {state.n_streams}")
    if state.length + p > state.capacity:
        raise LengthError(
            f"cache overflow: {state.length} + {p} exceeds capacity {state.capacity}"
        )
    if token_block.min() < 0 or token_block.max() >= config.vocab_size:
        raise ShapeError("prefill token id out of range")
    d = config.d_model
    pos = np.tile(np.arange(state.length, state.length + p), s)
    x = _embed(weights, token_block.reshape(-1), pos, sink)
    causal = np.tril(np.ones((p, p), dtype=bool))
    x = _decoder_sublayers(
        config, weights, state, x, p, np.arange(s), causal, sink
    )
    state.length += p
    state.written_len[:] = state.length
    with sink.scope("other"):
        x = kernels.layer_norm(x, weights.dec_final_gain, sink)
    with sink.scope("embedding"):
        if return_all_logits:
            logits = kernels.matmul(x, weights.head, sink)
            return logits.reshape(s, p, config.vocab_size)
        last = np.ascontiguousarray(x.reshape(s, p, d)[:, -1])
        return kernels.matmul(last, weights.head, sink)


def decoder_step(
    config: ModelConfig,
    weights: WeightSet,
    state: KVCacheSet,
    new_tokens: np.ndarray,
    sink: CounterSink,
) -> np.ndarray:
    """Advance every stream by one position; returns logits ``[S, vocab]``.

    Appends exactly one self-attention cache position per *active* stream;
    frozen streams flow through the batched kernels (their cost is counted)
    but neither write cache rows nor contribute sampled tokens.
    """
    new_tokens = np.asarray(new_tokens, dtype=np.int64)
    s = state.n_streams
    if new_tokens.shape != (s,):
        raise ShapeError(f"step tokens have shape {new_tokens.shape}, want ({s},)")
    if state.length + 1 > state.capacity:
        raise LengthError(
            f"cache overflow: {state.length} + 1 exceeds capacity {state.capacity}"
        )
    pos = np.full(s, state.length)
    x = _embed(weights, new_tokens, pos, sink)
    write_rows = np.flatnonzero(state.active)
    x = _decoder_sublayers(config, weights, state, x, 1, write_rows, None, sink)
    state.length += 1
    state.written_len[state.active] = state.length
    with sink.scope("other"):
        x = kernels.layer_norm(x, weights.dec_final_gain, sink)
    with sink.scope("embedding"):
        return kernels.matmul(x, weights.head, sink)
