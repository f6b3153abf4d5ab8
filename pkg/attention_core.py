import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, DegenerateVectorError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float32
# Stand-in for -inf in masked logits; softmax weight underflows to exactly 0.
MASK_SENTINEL = np.float32(-1e9)
NORM_EPS = 1e-6
COSINE_SNAP = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    hidden_dim: int = 64
    ffn_dim: int = 128
    rope_base: float = 10000.0
    weight_seed: int = 0
    prune_layer: int = 1  # 1-based; 1 = first decoder layer
    qk_alignment: float = 0.9

    def validate(self):
        for name in ("num_layers", "num_heads", "head_dim", "hidden_dim", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"must be positive, got {getattr(self, name)}", field=f"model.{name}")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigurationError(
                f"hidden_dim={self.hidden_dim} must equal num_heads*head_dim={self.num_heads * self.head_dim}",
                field="model.hidden_dim",
            )
        if self.head_dim % 2:
            raise ConfigurationError("head_dim must be even for rotary pairs", field="model.head_dim")
        if self.rope_base <= 0:
            raise ConfigurationError("rope_base must be positive", field="model.rope_base")
        if not 1 <= self.prune_layer <= self.num_layers:
            raise ConfigurationError(
                f"prune_layer must lie in 1..{self.num_layers}, got {self.prune_layer}", field="model.prune_layer"
            )
        if not 0.0 <= self.qk_alignment <= 1.0:
            raise ConfigurationError("qk_alignment must lie in [0, 1]", field="model.qk_alignment")


@dataclass(frozen=True)
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_in: np.ndarray
    w_out: np.ndarray

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return (self.attn_norm, self.wq, self.wk, self.wv, self.wo, self.ffn_norm, self.w_in, self.w_out)


@dataclass(frozen=True)
class ModelWeights:
    config: ModelConfig
    layers: Tuple[LayerWeights, ...]
    checksum: str


@dataclass(frozen=True)
class TokenSequence:
    visual: np.ndarray  # (N_v, d)
    text: np.ndarray  # (N_t, d)
    frames: int
    tokens_per_frame: int
    planted: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.visual.ndim != 2 or self.text.ndim != 2:
            raise ShapeError("visual and text must be 2-D matrices")
        if self.visual.shape[1] != self.text.shape[1]:
            raise ShapeError(f"hidden size mismatch: visual {self.visual.shape[1]} vs text {self.text.shape[1]}")
        if self.visual.shape[0] != self.frames * self.tokens_per_frame:
            raise ShapeError(
                f"N_v={self.visual.shape[0]} != frames*tokens_per_frame={self.frames * self.tokens_per_frame}"
            )

    @property
    def n_visual(self) -> int:
        return self.visual.shape[0]

    @property
    def n_text(self) -> int:
        return self.text.shape[0]

    @property
    def length(self) -> int:
        return self.n_visual + self.n_text

    @property
    def hidden_dim(self) -> int:
        return self.visual.shape[1]

    @property
    def frame_of(self) -> np.ndarray:
        return np.arange(self.n_visual) // self.tokens_per_frame

    def hidden(self) -> np.ndarray:
        return np.concatenate([self.visual, self.text], axis=0).astype(DTYPE)

    def with_visual(self, visual: np.ndarray, planted: Optional[Sequence[int]] = None) -> "TokenSequence":
        return replace(self, visual=visual, planted=tuple(self.planted if planted is None else planted))


@dataclass(frozen=True)
class AttentionMaskSpec:
    """Per-row permitted column intervals, half-open [start, end)."""

    rows: Tuple[Tuple[Tuple[int, int], ...], ...]

    @property
    def size(self) -> int:
        return len(self.rows)

    def permits(self, i: int, j: int) -> bool:
        return any(s <= j < e for s, e in self.rows[i])

    def to_dense(self) -> np.ndarray:
        n = self.size
        dense = np.zeros((n, n), dtype=bool)
        for i, intervals in enumerate(self.rows):
            for s, e in intervals:
                dense[i, s:e] = True
        return dense

    def signature(self) -> str:
        return hashlib.sha1(repr(self.rows).encode("ascii")).hexdigest()[:16]

    def validate(self):
        for i, intervals in enumerate(self.rows):
            if not any(s <= i < e for s, e in intervals):
                raise ShapeError(f"row {i} does not permit its own column")
            for s, e in intervals:
                if s < 0 or e > i + 1 or s >= e:
                    raise ShapeError(f"row {i} interval [{s}, {e}) violates causality")


def causal_mask(n: int) -> AttentionMaskSpec:
    return AttentionMaskSpec(rows=tuple(((0, i + 1),) for i in range(n)))


@dataclass(frozen=True)
class ScoreVector:
    values: np.ndarray  # (N_v,)
    layer: int
    debiased: bool = False

    def __len__(self):
        return len(self.values)


@dataclass
class ForwardTrace:
    hidden: np.ndarray
    scores: Optional[ScoreVector] = None
    probs: List[np.ndarray] = field(default_factory=list)


def _checksum(layers: Sequence[LayerWeights]) -> str:
    digest = hashlib.sha256()
    for lw in layers:
        for arr in lw.arrays():
            digest.update(np.ascontiguousarray(arr).tobytes())
    return digest.hexdigest()


def init_model(config: ModelConfig) -> ModelWeights:
    """Draws all weights from a generator seeded by config.weight_seed.

    Projections use std 1/sqrt(fan_in). The key projection is mixed with the
    query projection by qk_alignment so that queries and keys agree the way
    trained models do; without that agreement RoPE produces no long-term decay.
    """
    config.validate()
    rng = np.random.default_rng(config.weight_seed)
    d, m = config.hidden_dim, config.ffn_dim
    scale_d, scale_m = 1.0 / math.sqrt(d), 1.0 / math.sqrt(m)
    a = config.qk_alignment
    layers = []
    for _ in range(config.num_layers):
        wq = rng.normal(0.0, scale_d, (d, d))
        wk_free = rng.normal(0.0, scale_d, (d, d))
        wk = a * wq + math.sqrt(1.0 - a * a) * wk_free
        layers.append(LayerWeights(
            attn_norm=(1.0 + 0.02 * rng.standard_normal(d)).astype(DTYPE),
            wq=wq.astype(DTYPE),
            wk=wk.astype(DTYPE),
            wv=rng.normal(0.0, scale_d, (d, d)).astype(DTYPE),
            wo=rng.normal(0.0, scale_d, (d, d)).astype(DTYPE),
            ffn_norm=(1.0 + 0.02 * rng.standard_normal(d)).astype(DTYPE),
            w_in=rng.normal(0.0, scale_d, (d, m)).astype(DTYPE),
            w_out=rng.normal(0.0, scale_m, (m, d)).astype(DTYPE),
        ))
    weights = ModelWeights(config=config, layers=tuple(layers), checksum=_checksum(layers))
    logger.debug(f"Initialised model L={config.num_layers} d={d} seed={config.weight_seed} checksum={weights.checksum[:12]}")
    return weights


def _inv_freq(config: ModelConfig) -> np.ndarray:
    return config.rope_base ** (-np.arange(0, config.head_dim, 2, dtype=np.float64) / config.head_dim)


def apply_rope(x: np.ndarray, positions: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Rotates interleaved pairs of x (N, H, head_dim) by position * frequency."""
    angles = np.asarray(positions, dtype=np.float64)[:, None] * _inv_freq(config)[None, :]
    cos = np.cos(angles)[:, None, :]
    sin = np.sin(angles)[:, None, :]
    work = x.astype(np.float64)
    even, odd = work[..., 0::2], work[..., 1::2]
    out = np.empty_like(work)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out.astype(x.dtype if x.dtype == np.float64 else DTYPE)


def rope_apply(vec: np.ndarray, position: int, config: ModelConfig) -> np.ndarray:
    if position < 0:
        raise ShapeError(f"position must be non-negative, got {position}")
    vec = np.asarray(vec)
    heads = vec.reshape(1, config.num_heads, config.head_dim)
    return apply_rope(heads, np.array([position]), config).reshape(vec.shape)


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(np.square(x, dtype=np.float32), axis=-1, keepdims=True) + NORM_EPS)
    return (x / rms * gain).astype(DTYPE)


def softmax(logits: np.ndarray) -> np.ndarray:
    work = logits.astype(np.float64)
    exp = np.exp(work - work.max(axis=-1, keepdims=True))
    return (exp / exp.sum(axis=-1, keepdims=True)).astype(DTYPE)


def silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(DTYPE)


def masked_logits(q: np.ndarray, k: np.ndarray, positions: np.ndarray,
                  mask: AttentionMaskSpec, config: ModelConfig) -> np.ndarray:
    """Per-head logits (H, N, N) from unrotated q, k of shape (N, H, head_dim)."""
    n = q.shape[0]
    if mask.size != n:
        raise ShapeError(f"mask covers {mask.size} rows but sequence has {n} tokens")
    q_rot = apply_rope(q, positions, config)
    k_rot = apply_rope(k, positions, config)
    logits = np.einsum("ihd,jhd->hij", q_rot, k_rot) / np.float32(math.sqrt(config.head_dim))
    return np.where(mask.to_dense()[None, :, :], logits, MASK_SENTINEL).astype(DTYPE)


def _project(h: np.ndarray, lw: LayerWeights, config: ModelConfig):
    n = h.shape[0]
    x = rms_norm(h, lw.attn_norm)
    shape = (n, config.num_heads, config.head_dim)
    return (x @ lw.wq).reshape(shape), (x @ lw.wk).reshape(shape), (x @ lw.wv).reshape(shape)


def _layer_forward(h: np.ndarray, positions: np.ndarray, lw: LayerWeights,
                   mask: AttentionMaskSpec, config: ModelConfig):
    q, k, v = _project(h, lw, config)
    logits = masked_logits(q, k, positions, mask, config)
    probs = softmax(logits)
    attn = np.einsum("hij,jhd->ihd", probs, v).reshape(h.shape[0], config.hidden_dim)
    h = (h + attn @ lw.wo).astype(DTYPE)
    x = rms_norm(h, lw.ffn_norm)
    h = (h + silu(x @ lw.w_in) @ lw.w_out).astype(DTYPE)
    return h, logits, probs


def forward_layers(hidden: np.ndarray, positions: np.ndarray, weights: ModelWeights,
                   masks: Sequence[AttentionMaskSpec], start: int, stop: int,
                   capture_layer: Optional[int] = None, n_visual: int = 0,
                   keep_probs: bool = False) -> ForwardTrace:
    """Runs 1-based layers start..stop inclusive; masks[i] is used for layer start+i.

    When capture_layer is set, the head-mean logits of the last row over the
    first n_visual columns are captured at that layer as a ScoreVector.
    """
    if len(masks) != stop - start + 1:
        raise ShapeError(f"expected {stop - start + 1} masks for layers {start}..{stop}, got {len(masks)}")
    trace = ForwardTrace(hidden=hidden.astype(DTYPE))
    for offset, layer in enumerate(range(start, stop + 1)):
        h, logits, probs = _layer_forward(trace.hidden, positions, weights.layers[layer - 1],
                                          masks[offset], weights.config)
        if layer == capture_layer:
            row = logits[:, -1, :n_visual].astype(np.float64).mean(axis=0)
            trace.scores = ScoreVector(values=row.astype(DTYPE), layer=layer)
        if keep_probs:
            trace.probs.append(probs)
        trace.hidden = h
    return trace


def attention_logits(seq: TokenSequence, weights: ModelWeights, layer: int,
                     mask: AttentionMaskSpec) -> np.ndarray:
    """Per-head (H, N, N) logits at a 1-based layer; earlier layers run under the same mask."""
    if mask.size != seq.length:
        raise ShapeError(f"mask covers {mask.size} rows but sequence has {seq.length} tokens")
    positions = np.arange(seq.length)
    hidden = seq.hidden()
    if layer > 1:
        hidden = forward_layers(hidden, positions, weights, [mask] * (layer - 1), 1, layer - 1).hidden
    q, k, _ = _project(hidden, weights.layers[layer - 1], weights.config)
    return masked_logits(q, k, positions, mask, weights.config)


def prefill(seq: TokenSequence, weights: ModelWeights, masks: Sequence[AttentionMaskSpec],
            keep_probs: bool = False) -> ForwardTrace:
    config = weights.config
    if seq.n_text == 0:
        raise ShapeError("prefill needs at least one text token to score from")
    if len(masks) != config.num_layers:
        raise ShapeError(f"masks cover {len(masks)} layers, model has {config.num_layers}")
    return forward_layers(seq.hidden(), np.arange(seq.length), weights, masks, 1, config.num_layers,
                          capture_layer=config.prune_layer, n_visual=seq.n_visual, keep_probs=keep_probs)


def _snap_unit(sims: np.ndarray) -> np.ndarray:
    # Parallel vectors must compare as exactly +-1 so threshold ties stay ties.
    sims = np.clip(sims, -1.0, 1.0)
    return np.where(np.abs(np.abs(sims) - 1.0) <= COSINE_SNAP, np.sign(sims), sims)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aa, bb = np.dot(a, a), np.dot(b, b)
    if aa == 0.0 or bb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(_snap_unit(np.dot(a, b) / np.sqrt(aa * bb)))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    if np.any(aa == 0.0) or np.any(bb == 0.0):
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return _snap_unit((a @ b.T) / np.sqrt(np.outer(aa, bb)))


def key_preimage_direction(weights: ModelWeights, seq: TokenSequence, position: int) -> np.ndarray:
    """Unit input direction maximising the first-layer logit of the last text token at `position`."""
    config = weights.config
    lw = weights.layers[0]
    last = seq.length - 1
    x_t = rms_norm(seq.text[-1:], lw.attn_norm)
    q = (x_t @ lw.wq).reshape(1, config.num_heads, config.head_dim).astype(np.float64)
    target = apply_rope(q, np.array([last - position]), config).reshape(-1)
    direction = (lw.wk.astype(np.float64) @ target) / lw.attn_norm.astype(np.float64)
    norm = np.linalg.norm(direction)
    if norm == 0.0:
        raise DegenerateVectorError("query has no key-space preimage")
    return direction / norm
