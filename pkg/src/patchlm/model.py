"""Three-block byte model: local byte encoder, latent patch transformer, byte decoder.

The encoder contextualizes bytes with windowed causal attention and pools them
into patch queries that cross-attend only to their own patch's bytes. The
latent transformer runs causally over patches. The decoder interchanges the
cross-attention roles: byte queries attend to split projections of the latent
outputs, restricted to patches that are already complete at the query
position, so no information from inside the current patch can leak backward.

Everything runs on the package's numpy autodiff; float64 mode exists for
finite-difference gradient checks.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .ngram_hash import DEFAULT_HASH_PRIME, rolling_hashes
from .patching import PatchBoundaries
from .tensor import (
    Tensor,
    concat,
    embedding,
    nll_from_logits,
    parameter,
    segment_max,
    segment_mean,
    softmax,
)

logger = logging.getLogger(__name__)

NEG_MASK = -1e30  # additive mask; exp underflows to exactly 0 after the shift
VOCAB = 256


class NumericError(Exception):
    pass


def ffn_hidden_dim(dim: int, ff_mult: int = 4, multiple_of: int = 8) -> int:
    """Gated feed-forward hidden width: 2/3 of mult*dim, rounded up.

    The 2/3 factor keeps the three-matmul gated block at the same cost as a
    plain two-matmul block of width mult*dim, which is what the FLOP
    accounting assumes.
    """
    h = int(2 * ff_mult * dim / 3)
    return multiple_of * ((h + multiple_of - 1) // multiple_of)


@dataclass
class ModelConfig:
    enc_dim: int = 64
    global_dim: int = 128
    dec_dim: int = 64
    enc_layers: int = 1
    global_layers: int = 4
    dec_layers: int = 2
    enc_heads: int = 4
    global_heads: int = 4
    dec_heads: int = 4
    enc_window: int = 512
    dec_window: int = 512
    ff_mult: int = 4
    ff_multiple_of: int = 8
    rope_theta: float = 500000.0
    ngram_sizes: tuple = (3, 4, 5, 6, 7, 8)
    hash_vocab: int = 4096  # buckets per n-gram size; 0 disables hash embeddings
    hash_prime: int = DEFAULT_HASH_PRIME
    max_patch_size: int = 512
    pooling: str = "max"  # patch query init: max | mean

    def __post_init__(self):
        self.ngram_sizes = tuple(sorted(self.ngram_sizes))
        if self.global_dim % self.enc_dim != 0:
            raise ValueError(
                f"global_dim ({self.global_dim}) must be a multiple of enc_dim ({self.enc_dim}): "
                "patch queries are maintained as encoder-width heads whose concatenation is global width"
            )
        if self.dec_dim != self.enc_dim:
            raise ValueError("dec_dim must equal enc_dim: the decoder starts from encoder byte states")
        for dim, heads, tag in ((self.enc_dim, self.enc_heads, "enc"),
                                (self.global_dim, self.global_heads, "global"),
                                (self.dec_dim, self.dec_heads, "dec")):
            if dim % heads != 0:
                raise ValueError(f"{tag}_dim {dim} not divisible by {tag}_heads {heads}")
            if (dim // heads) % 2 != 0:
                raise ValueError(f"{tag} head dim must be even for rotary embeddings")
        if self.enc_layers >= self.global_layers or self.dec_layers >= self.global_layers:
            warnings.warn("local blocks are expected to be much shallower than the latent transformer",
                          stacklevel=2)
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"pooling must be max or mean, got {self.pooling!r}")
        if self.enc_window < 1 or self.dec_window < 1:
            raise ValueError("attention windows must be >= 1")

    @property
    def k(self) -> int:
        """Width ratio global_dim / enc_dim: encoder-width slots per patch vector."""
        return self.global_dim // self.enc_dim

    @classmethod
    def tiny(cls, **over) -> "ModelConfig":
        return cls(**over)

    @classmethod
    def small(cls, **over) -> "ModelConfig":
        base = dict(enc_dim=128, global_dim=512, dec_dim=128, enc_layers=1,
                    global_layers=8, dec_layers=4, enc_heads=4, global_heads=8, dec_heads=4)
        base.update(over)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ngram_sizes"] = list(self.ngram_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "ngram_sizes" in d:
            d["ngram_sizes"] = tuple(d["ngram_sizes"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class BltParams:
    """Named parameter tensors plus initialization metadata."""

    def __init__(self, tensors: dict[str, Tensor], meta: dict):
        self.tensors = tensors
        self.meta = meta

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def names(self):
        return list(self.tensors)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.tensors.items()}

    def astype(self, dtype) -> "BltParams":
        return BltParams(
            {k: parameter(t.data.astype(dtype), k) for k, t in self.tensors.items()},
            dict(self.meta, dtype=np.dtype(dtype).name),
        )


def _layer_names(prefix: str, dim: int, ff: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}attn_norm", (dim,)),
        (f"{prefix}attn.wq", (dim, dim)),
        (f"{prefix}attn.wk", (dim, dim)),
        (f"{prefix}attn.wv", (dim, dim)),
        (f"{prefix}attn.wo", (dim, dim)),
        (f"{prefix}ffn_norm", (dim,)),
        (f"{prefix}ffn.w_gate", (dim, ff)),
        (f"{prefix}ffn.w_up", (dim, ff)),
        (f"{prefix}ffn.w_down", (ff, dim)),
    ]


def _xattn_names(prefix: str, q_dim: int, kv_dim: int) -> list[tuple[str, tuple]]:
    return [
        (f"{prefix}q_norm", (q_dim,)),
        (f"{prefix}kv_norm", (kv_dim,)),
        (f"{prefix}wq", (q_dim, q_dim)),
        (f"{prefix}wk", (kv_dim, q_dim)),
        (f"{prefix}wv", (kv_dim, q_dim)),
        (f"{prefix}wo", (q_dim, q_dim)),
    ]


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Every parameter tensor's shape, keyed by name."""
    E, G, D, k = config.enc_dim, config.global_dim, config.dec_dim, config.k
    fe = ffn_hidden_dim(E, config.ff_mult, config.ff_multiple_of)
    fg = ffn_hidden_dim(G, config.ff_mult, config.ff_multiple_of)
    fd = ffn_hidden_dim(D, config.ff_mult, config.ff_multiple_of)
    shapes: dict[str, tuple] = {"byte_embed": (VOCAB, E)}
    if config.hash_vocab > 0:
        for n in config.ngram_sizes:
            shapes[f"hash_embed.n{n}"] = (config.hash_vocab, E)
    shapes["enc.pool_proj"] = (E, G)
    for i in range(config.enc_layers):
        shapes.update(dict(_xattn_names(f"enc.{i}.xattn.", G, E)))
        shapes.update(dict(_layer_names(f"enc.{i}.", E, fe)))
    for i in range(config.global_layers):
        shapes.update(dict(_layer_names(f"global.{i}.", G, fg)))
    shapes["dec.patch_proj"] = (G, k * D)
    shapes["dec.start_kv"] = (k, D)
    for i in range(config.dec_layers):
        shapes.update(dict(_xattn_names(f"dec.{i}.xattn.", D, D)))
        shapes.update(dict(_layer_names(f"dec.{i}.", D, fd)))
    shapes["out_norm"] = (D,)
    shapes["out_proj"] = (D, VOCAB)
    return shapes


def _block_depth(name: str, config: ModelConfig) -> int:
    if name.startswith("enc."):
        return config.enc_layers
    if name.startswith("global."):
        return config.global_layers
    if name.startswith("dec."):
        return config.dec_layers
    return 1


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> BltParams:
    """Scaled-normal init; residual-out projections shrink with block depth."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, Tensor] = {}
    base_std = 0.02
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        else:
            std = base_std
            if name.endswith(("attn.wo", "xattn.wo", "ffn.w_down")):
                std = base_std / math.sqrt(2.0 * _block_depth(name, config))
            data = std * rng.standard_normal(shape)
        tensors[name] = parameter(data.astype(dtype), name)
    meta = {
        "init": "normal(std=0.02, residual_out/sqrt(2*depth))",
        "seed": seed,
        "dtype": np.dtype(dtype).name,
        "rng": "pcg64",
    }
    return BltParams(tensors, meta)


# ---------------------------------------------------------------------------
# Streams: a packed run of documents with patch boundaries
# ---------------------------------------------------------------------------


@dataclass
class Stream:
    """Concatenated document bytes, per-byte doc ids, and patch start indices."""

    data: np.ndarray
    doc_ids: np.ndarray
    patch_starts: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.doc_ids = np.asarray(self.doc_ids, dtype=np.int32)
        self.patch_starts = np.asarray(self.patch_starts, dtype=np.int64)
        n = len(self.data)
        if n == 0:
            raise ValueError("empty stream")
        if len(self.doc_ids) != n:
            raise ValueError("doc_ids length mismatch")
        if np.any(np.diff(self.doc_ids) < 0):
            raise ValueError("doc_ids must be nondecreasing (documents are contiguous)")
        PatchBoundaries(self.patch_starts, n)  # validates order/range
        # every document start must begin a patch, and patches stay inside one doc
        doc_start = np.nonzero(np.diff(self.doc_ids, prepend=self.doc_ids[0] - 1))[0]
        if not np.isin(doc_start, self.patch_starts).all():
            raise ValueError("every document start must start a patch")
        if np.any(self.doc_ids[self.patch_starts] != self.doc_ids[self.boundaries.ends()]):
            raise ValueError("a patch may not span documents")

    @property
    def n_bytes(self) -> int:
        return len(self.data)

    @property
    def n_patches(self) -> int:
        return len(self.patch_starts)

    @property
    def boundaries(self) -> PatchBoundaries:
        return PatchBoundaries(self.patch_starts, len(self.data))

    @property
    def patch_doc_ids(self) -> np.ndarray:
        return self.doc_ids[self.patch_starts]

    @classmethod
    def from_documents(cls, docs: list[np.ndarray], patcher) -> "Stream":
        """Patch each document independently and concatenate."""
        datas, ids, starts = [], [], []
        offset = 0
        for d, arr in enumerate(docs):
            arr = np.asarray(arr, dtype=np.uint8)
            b = patcher(arr)
            datas.append(arr)
            ids.append(np.full(len(arr), d, dtype=np.int32))
            starts.append(b.starts + offset)
            offset += len(arr)
        return cls(np.concatenate(datas), np.concatenate(ids), np.concatenate(starts))


# ---------------------------------------------------------------------------
# Attention masks
# ---------------------------------------------------------------------------


@dataclass
class AttentionMask:
    kind: str
    allowed: np.ndarray  # bool (n_queries, n_keys)

    def additive(self, dtype) -> np.ndarray:
        return np.where(self.allowed, 0.0, NEG_MASK).astype(dtype)


def local_block_causal_mask(n_bytes: int, window: int, doc_ids: np.ndarray | None = None) -> AttentionMask:
    """Query i sees key j iff j <= i, i - j < window, and both share a document."""
    if window < 1:
        raise ValueError("window must be >= 1")
    i = np.arange(n_bytes)[:, None]
    j = np.arange(n_bytes)[None, :]
    allowed = (j <= i) & (i - j < window)
    if doc_ids is not None:
        allowed &= doc_ids[:, None] == doc_ids[None, :]
    return AttentionMask(f"local_block_causal({window})", allowed)


def block_causal_patch_mask(patch_doc_ids: np.ndarray) -> AttentionMask:
    """Patch j sees patch j' iff j' <= j within the same document."""
    m = len(patch_doc_ids)
    i = np.arange(m)[:, None]
    j = np.arange(m)[None, :]
    allowed = (j <= i) & (patch_doc_ids[:, None] == patch_doc_ids[None, :])
    return AttentionMask("block_causal_patches", allowed)


def patch_membership_mask(boundaries: PatchBoundaries) -> AttentionMask:
    """Patch query j sees byte i iff byte i belongs to patch j."""
    patch_of = boundaries.patch_of()
    allowed = patch_of[None, :] == np.arange(boundaries.n_patches)[:, None]
    return AttentionMask("patch_membership", allowed)


def completed_patch_mask(boundaries: PatchBoundaries, doc_ids: np.ndarray) -> AttentionMask:
    """Byte i sees patch j iff patch j ends at or before i in the same document.

    Column 0 is a permanently visible learned start slot, so bytes of a
    document's first patch (which have no completed patch yet) still have a
    key to attend.
    """
    ends = boundaries.ends()
    patch_docs = doc_ids[boundaries.starts]
    i = np.arange(boundaries.n_bytes)[:, None]
    allowed_patches = (ends[None, :] <= i) & (patch_docs[None, :] == doc_ids[:, None])
    allowed = np.concatenate([np.ones((boundaries.n_bytes, 1), dtype=bool), allowed_patches], axis=1)
    return AttentionMask("completed_patch_causal", allowed)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

RMS_EPS = 1e-6


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    ms = (x * x).mean(axis=-1, keepdims=True)
    return x * ((ms + eps) ** -0.5) * gain


def rope_cache(positions: np.ndarray, head_dim: int, theta: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (heads, n, head_dim) queries/keys pairwise over even/odd channels."""
    h, n, d = x.shape
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out_e = xe * cos - xo * sin
    out_o = xe * sin + xo * cos
    paired = concat([out_e.reshape(h, n, d // 2, 1), out_o.reshape(h, n, d // 2, 1)], axis=-1)
    return paired.reshape(h, n, d)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).swapaxes(0, 1)


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return x.swapaxes(0, 1).reshape(n, h * dh)


def _attend(q: Tensor, kt: Tensor, v: Tensor, add_mask: np.ndarray, scale: float) -> Tensor:
    # scaling the (small) query block beats scaling the (n_q, n_k) score matrix
    scores = (q * scale) @ kt + add_mask
    return softmax(scores, axis=-1) @ v


def self_attention_block(x: Tensor, params: BltParams, prefix: str, heads: int,
                         add_mask: np.ndarray, rope: tuple[np.ndarray, np.ndarray]) -> Tensor:
    n, d = x.shape
    dh = d // heads
    xn = rms_norm(x, params[f"{prefix}attn_norm"])
    q = _split_heads(xn @ params[f"{prefix}attn.wq"], heads)
    k = _split_heads(xn @ params[f"{prefix}attn.wk"], heads)
    v = _split_heads(xn @ params[f"{prefix}attn.wv"], heads)
    cos, sin = rope
    q = apply_rope(q, cos, sin)
    k = apply_rope(k, cos, sin)
    out = _attend(q, k.swapaxes(-1, -2), v, add_mask, 1.0 / math.sqrt(dh))
    return x + _merge_heads(out) @ params[f"{prefix}attn.wo"]


def ffn_block(x: Tensor, params: BltParams, prefix: str) -> Tensor:
    xn = rms_norm(x, params[f"{prefix}ffn_norm"])
    gated = (xn @ params[f"{prefix}ffn.w_gate"]).silu() * (xn @ params[f"{prefix}ffn.w_up"])
    return x + gated @ params[f"{prefix}ffn.w_down"]


def transformer_layer(x: Tensor, params: BltParams, prefix: str, heads: int,
                      add_mask: np.ndarray, rope: tuple[np.ndarray, np.ndarray]) -> Tensor:
    x = self_attention_block(x, params, prefix, heads, add_mask, rope)
    return ffn_block(x, params, prefix)


def cross_attention_block(q_in: Tensor, kv_in: Tensor, params: BltParams, prefix: str,
                          heads: int, add_mask: np.ndarray) -> Tensor:
    """Pre-normed multi-head cross-attention with residual; no positional encoding."""
    a, qd = q_in.shape
    dh = qd // heads
    qn = rms_norm(q_in, params[f"{prefix}q_norm"])
    kvn = rms_norm(kv_in, params[f"{prefix}kv_norm"])
    q = _split_heads(qn @ params[f"{prefix}wq"], heads)
    k = _split_heads(kvn @ params[f"{prefix}wk"], heads)
    v = _split_heads(kvn @ params[f"{prefix}wv"], heads)
    out = _attend(q, k.swapaxes(-1, -2), v, add_mask, 1.0 / math.sqrt(dh))
    return q_in + _merge_heads(out) @ params[f"{prefix}wo"]


# ---------------------------------------------------------------------------
# Embedding augmentation (trainable twin of ngram_hash.augment_embeddings)
# ---------------------------------------------------------------------------


def augmented_byte_embeddings(params: BltParams, stream: Stream, config: ModelConfig) -> Tensor:
    """Byte embeddings plus per-size hash n-gram embeddings, averaged.

    n-grams never cross document boundaries: a size is available at a position
    only once the document provides that many bytes.
    """
    dtype = params["byte_embed"].dtype
    e = embedding(params["byte_embed"], stream.data)
    if config.hash_vocab <= 0 or not config.ngram_sizes:
        return e
    n = stream.n_bytes
    divisor = np.ones(n, dtype=dtype)
    doc_bounds = np.nonzero(np.diff(stream.doc_ids, prepend=stream.doc_ids[0] - 1))[0]
    doc_bounds = np.append(doc_bounds, n)
    contributions = [e]
    for size in config.ngram_sizes:
        ids = np.zeros(n, dtype=np.int64)
        valid = np.zeros(n, dtype=bool)
        for d in range(len(doc_bounds) - 1):
            lo, hi = doc_bounds[d], doc_bounds[d + 1]
            if hi - lo < size:
                continue
            h = rolling_hashes(stream.data[lo:hi], size, config.hash_prime)
            ids[lo + size - 1 : hi] = (h % np.uint64(config.hash_vocab)).astype(np.int64)
            valid[lo + size - 1 : hi] = True
        gathered = embedding(params[f"hash_embed.n{size}"], ids)
        contributions.append(gathered * valid.astype(dtype)[:, None])
        divisor += valid.astype(dtype)
    total = contributions[0]
    for c in contributions[1:]:
        total = total + c
    return total * (1.0 / divisor)[:, None]

# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _byte_mask(stream: Stream, window: int, dtype, cache: dict | None) -> np.ndarray:
    key = ("local", window)
    if cache is not None and key in cache:
        return cache[key]
    mask = local_block_causal_mask(stream.n_bytes, window, stream.doc_ids).additive(dtype)
    if cache is not None:
        cache[key] = mask
    return mask


def encoder_forward(params: BltParams, stream: Stream, config: ModelConfig,
                    mask_cache: dict | None = None) -> tuple[Tensor, Tensor]:
    """Byte states for the decoder plus patch representations for the latent model.

    Patch queries are initialized by pooling the augmented byte embeddings of
    each patch and projecting to global width; each cross-attention layer uses
    the byte states from before that layer's transformer (the embeddings for
    the first layer) as keys/values, restricted to the query's own patch.
    """
    dtype = params["byte_embed"].dtype
    bounds = stream.boundaries
    if int(bounds.lengths().max()) > config.max_patch_size:
        raise ValueError(f"a patch exceeds max_patch_size={config.max_patch_size}")
    e = augmented_byte_embeddings(params, stream, config)
    pool = segment_max if config.pooling == "max" else segment_mean
    p = pool(e, stream.patch_starts) @ params["enc.pool_proj"]

    byte_mask = _byte_mask(stream, config.enc_window, dtype, mask_cache)
    memb_mask = patch_membership_mask(bounds).additive(dtype)
    rope = rope_cache(np.arange(stream.n_bytes), config.enc_dim // config.enc_heads,
                      config.rope_theta, dtype)
    h = e
    for i in range(config.enc_layers):
        p = cross_attention_block(p, h, params, f"enc.{i}.xattn.", config.k, memb_mask)
        h = transformer_layer(h, params, f"enc.{i}.", config.enc_heads, byte_mask, rope)
    return h, p


def global_forward(params: BltParams, patches: Tensor, patch_doc_ids: np.ndarray,
                   config: ModelConfig) -> Tensor:
    """Causal transformer over patch representations within each document."""
    dtype = patches.dtype
    m = patches.shape[0]
    mask = block_causal_patch_mask(patch_doc_ids).additive(dtype)
    rope = rope_cache(np.arange(m), config.global_dim // config.global_heads,
                      config.rope_theta, dtype)
    o = patches
    for i in range(config.global_layers):
        o = transformer_layer(o, params, f"global.{i}.", config.global_heads, mask, rope)
    return o


def decoder_forward(params: BltParams, byte_states: Tensor, latent_out: Tensor,
                    stream: Stream, config: ModelConfig,
                    mask_cache: dict | None = None) -> Tensor:
    """Byte logits from encoder byte states and latent patch outputs.

    Each latent output is linearly mapped and split into k decoder-width
    key/value slots. The byte query at position i attends only to slots of
    patches that end at or before i (plus the learned start slot), then a
    windowed causal transformer layer refines the byte sequence.
    """
    dtype = byte_states.dtype
    k, d = config.k, config.dec_dim
    m = latent_out.shape[0]
    slots = (latent_out @ params["dec.patch_proj"]).reshape(m * k, d)
    kv = concat([params["dec.start_kv"], slots], axis=0)

    group_mask = completed_patch_mask(stream.boundaries, stream.doc_ids).allowed
    slot_mask = np.repeat(group_mask, k, axis=1)
    xattn_mask = np.where(slot_mask, 0.0, NEG_MASK).astype(dtype)

    byte_mask = _byte_mask(stream, config.dec_window, dtype, mask_cache)
    rope = rope_cache(np.arange(stream.n_bytes), d // config.dec_heads, config.rope_theta, dtype)

    x = byte_states
    for i in range(config.dec_layers):
        x = cross_attention_block(x, kv, params, f"dec.{i}.xattn.", config.dec_heads, xattn_mask)
        x = transformer_layer(x, params, f"dec.{i}.", config.dec_heads, byte_mask, rope)
    return rms_norm(x, params["out_norm"]) @ params["out_proj"]


@dataclass
class ForwardResult:
    logits: Tensor  # (n, 256)
    nll: Tensor  # (n,) nats; meaningful only where loss_mask is set
    loss: Tensor  # scalar: mean nats per predicted byte
    loss_mask: np.ndarray
    n_predicted: int

    @property
    def total_nats(self) -> float:
        return float((self.nll.data * self.loss_mask).sum())


def lm_forward(params: BltParams, stream: Stream, config: ModelConfig) -> ForwardResult:
    """Full composition: augmented embeddings -> encoder -> latent -> decoder -> loss.

    Position i predicts byte i+1; positions whose successor crosses a document
    boundary (or does not exist) are excluded from the loss.
    """
    mask_cache: dict = {}
    h, p = encoder_forward(params, stream, config, mask_cache)
    o = global_forward(params, p, stream.patch_doc_ids, config)
    logits = decoder_forward(params, h, o, stream, config, mask_cache)

    n = stream.n_bytes
    targets = np.zeros(n, dtype=np.int64)
    targets[: n - 1] = stream.data[1:]
    mask = np.zeros(n, dtype=bool)
    mask[: n - 1] = stream.doc_ids[1:] == stream.doc_ids[: n - 1]
    n_pred = int(mask.sum())
    if n_pred == 0:
        raise NumericError("stream has no predictable positions")
    nll = nll_from_logits(logits, targets)
    loss = (nll * mask.astype(logits.dtype)).sum() * (1.0 / n_pred)
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss")
    return ForwardResult(logits, nll, loss, mask, n_pred)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def grad_check(params: BltParams, stream: Stream, config: ModelConfig,
               eps: float = 1e-5, samples_per_tensor: int = 4, seed: int = 0,
               abs_floor: float = 1e-7) -> dict:
    """Central-difference check of every parameter tensor at 64-bit precision.

    Samples a few entries per tensor; an entry passes when the analytic and
    numeric values agree to a relative error of 1e-4, or to ``abs_floor``
    absolutely for near-zero gradients. Returns a per-tensor report.
    """
    p64 = params.astype(np.float64)

    def loss_value() -> float:
        return float(lm_forward(p64, stream, config).loss.data)

    res = lm_forward(p64, stream, config)
    res.loss.backward()
    rng = np.random.Generator(np.random.PCG64(seed))
    report: dict[str, dict] = {}
    worst = 0.0
    for name, t in p64.tensors.items():
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite analytic gradient in {name}")
        idxs = rng.choice(t.data.size, size=min(samples_per_tensor, t.data.size), replace=False)
        max_rel = 0.0
        for flat in idxs:
            orig = t.data.flat[flat]
            t.data.flat[flat] = orig + eps
            f_plus = loss_value()
            t.data.flat[flat] = orig - eps
            f_minus = loss_value()
            t.data.flat[flat] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            analytic = float(grad.flat[flat])
            diff = abs(analytic - numeric)
            if diff > abs_floor:
                max_rel = max(max_rel, diff / max(abs(analytic), abs(numeric)))
        report[name] = {"max_rel_err": max_rel, "passed": max_rel < 1e-4}
        worst = max(worst, max_rel)
    return {"tensors": report, "max_rel_err": worst, "passed": worst < 1e-4}


# ---------------------------------------------------------------------------
# Using a trained byte model as an entropy source (parity experiments)
# ---------------------------------------------------------------------------


class TransformerEntropySource:
    """Adapter exposing entropy_trace() from a trained byte model.

    Runs the model with single-byte patches so each position's predictive
    distribution is well-defined; the first position of each context segment
    gets the maximum entropy since the model has no unconditional table.
    """

    def __init__(self, params: BltParams, config: ModelConfig):
        self.params = params
        self.config = config

    def entropy_trace(self, data, reset_on_newline: bool = False):
        from .entropy_lm import LN256, EntropyTrace
        from .patching import patch_strided

        arr = np.asarray(data, dtype=np.uint8)
        n = len(arr)
        cuts = [0]
        if reset_on_newline:
            cuts += [int(i) + 1 for i in np.nonzero(arr == NEWLINE_BYTE)[0] if i + 1 < n]
        cuts.append(n)
        values = np.empty(n, dtype=np.float64)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if hi <= lo:
                continue
            seg = arr[lo:hi]
            values[lo] = LN256
            if hi - lo > 1:
                stream = Stream(seg, np.zeros(len(seg), np.int32),
                                patch_strided(len(seg), 1, None).starts)
                logits = lm_forward(self.params, stream, self.config).logits.data
                z = logits - logits.max(axis=1, keepdims=True)
                p = np.exp(z)
                p /= p.sum(axis=1, keepdims=True)
                h = -(p * np.log(np.maximum(p, 1e-30))).sum(axis=1)
                values[lo + 1 : hi] = h[: hi - lo - 1]
        return EntropyTrace(values, np.asarray(cuts[1:-1], dtype=np.int64))


NEWLINE_BYTE = 0x0A
