"""Query-conditioned set transformation built from stacked multi-head
self-attention blocks, with a hand-written backward pass.

Inputs are batches of sets shaped ``(B, m, d)``.  Slot 0 of every set is the
query node and slots ``1..m-1`` are support nodes; all slots are processed
identically, the caller only decides which outputs to read.  One block is

    z1 = x + dropout(W_O concat_h(softmax(q_h k_h^T / sqrt(d'/H)) v_h))
    y1 = LN1(z1)
    z2 = y1 + dropout(W_2 act(W_1 y1 + b_1) + b_2)
    y2 = LN2(z2)

Support slots are put in a canonical (lexicographic) order before the
forward pass and restored afterwards, so outputs depend on the support
*set* only and are bit-identical under any permutation of the supports.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, NumericalError, UsageError

TRF_MAGIC = b"MTNETRF\x01"
_TRF_HEADER = struct.Struct("<8sIIIIIIdd")
_ACTIVATIONS = ("relu", "tanh")

BLOCK_FIELDS = (
    "w_q", "w_k", "w_v", "w_o", "w_1", "b_1", "w_2", "b_2",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
)


@dataclass(frozen=True)
class TransformConfig:
    d: int
    d_prime: int
    heads: int
    d_ff: int
    blocks: int
    p_drop: float = 0.1
    ln_epsilon: float = 1e-5
    activation: str = "relu"

    def __post_init__(self):
        if min(self.d, self.d_prime, self.heads, self.d_ff, self.blocks) < 1:
            raise ConfigError(f"all transform dimensions must be >= 1: {self}")
        if self.d_prime % self.heads:
            raise ConfigError(f"d_prime={self.d_prime} not divisible by heads={self.heads}")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def d_head(self) -> int:
        return self.d_prime // self.heads

    def param_count(self) -> int:
        d, dp, dff = self.d, self.d_prime, self.d_ff
        per_block = 3 * self.heads * self.d_head * d + d * dp + dff * d + dff + d * dff + d + 4 * d
        return self.blocks * per_block


@dataclass
class AttentionBlock:
    """Trainable tensors of one block.

    ``w_q``, ``w_k``, ``w_v`` are ``(H, d'/H, d)`` (one projection per head),
    ``w_o`` is ``(d, d')``, ``w_1``/``b_1`` are ``(d_ff, d)``/``(d_ff,)`` and
    ``w_2``/``b_2`` are ``(d, d_ff)``/``(d,)``.
    """

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_1: np.ndarray
    b_1: np.ndarray
    w_2: np.ndarray
    b_2: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCK_FIELDS}


@dataclass
class TransformParams:
    config: TransformConfig
    blocks: list[AttentionBlock]
    version: int = field(default=0, compare=False)

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Flat ``{"block{i}.{field}": array}`` view; arrays are shared, not copied."""
        out = {}
        for i, blk in enumerate(self.blocks):
            for name, arr in blk.arrays().items():
                out[f"block{i}.{name}"] = arr
        return out

    def copy(self) -> "TransformParams":
        return TransformParams(
            self.config,
            [AttentionBlock(**{k: v.copy() for k, v in b.arrays().items()}) for b in self.blocks],
        )

    def zeros_like(self) -> "TransformParams":
        return TransformParams(
            self.config,
            [AttentionBlock(**{k: np.zeros_like(v) for k, v in b.arrays().items()}) for b in self.blocks],
        )

    def sq_norm(self) -> float:
        return float(sum(np.dot(a.ravel(), a.ravel()) for a in self.named_arrays().values()))

    def mark_updated(self) -> None:
        self.version += 1


def _glorot(rng, shape, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_transform(config: TransformConfig, seed: int | np.random.Generator) -> TransformParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, dp, dff, H, dh = config.d, config.d_prime, config.d_ff, config.heads, config.d_head
    blocks = []
    for _ in range(config.blocks):
        blocks.append(
            AttentionBlock(
                # head projections are initialized as one (d', d) matrix
                w_q=_glorot(rng, (H, dh, d), d, dp),
                w_k=_glorot(rng, (H, dh, d), d, dp),
                w_v=_glorot(rng, (H, dh, d), d, dp),
                w_o=_glorot(rng, (d, dp), dp, d),
                w_1=_glorot(rng, (dff, d), d, dff),
                b_1=np.zeros(dff),
                w_2=_glorot(rng, (d, dff), dff, d),
                b_2=np.zeros(d),
                ln1_gain=np.ones(d),
                ln1_bias=np.zeros(d),
                ln2_gain=np.ones(d),
                ln2_bias=np.zeros(d),
            )
        )
    return TransformParams(config, blocks)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(inputs: np.ndarray, w_q: np.ndarray, w_k: np.ndarray, d_head: int) -> np.ndarray:
    """Row-stochastic attention matrix of one head over a single set.

    ``inputs`` is ``(n, d)``; ``w_q``/``w_k`` are ``(d_head, d)``.
    """
    q = inputs @ w_q.T
    k = inputs @ w_k.T
    logits = (q @ k.T) / math.sqrt(d_head)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite attention logits")
    return softmax(logits, axis=-1)


def layer_norm(x, gain, bias, eps):
    d = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) / d
    var = (xc * xc).sum(axis=-1, keepdims=True) / d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return gain * xhat + bias, (xhat, rstd)


def _layer_norm_backward(dy, gain, cache):
    xhat, rstd = cache
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axis=red), dy.sum(axis=red)


def _dropout_mask(shape, p, rng):
    if p <= 0.0:
        return None
    if rng is None:
        raise UsageError("train mode with dropout needs an rng")
    return (rng.random(shape) >= p) / (1.0 - p)


class _BlockCache:
    __slots__ = ("x", "q", "k", "v", "a", "cat", "mask1", "ln1", "y1", "h_pre", "h", "mask2", "ln2")


def _block_forward(blk: AttentionBlock, cfg: TransformConfig, x, train, rng, keep):
    B, m, d = x.shape
    H, dh = cfg.heads, cfg.d_head

    def heads(w):
        return (x @ w.reshape(H * dh, d).T).reshape(B, m, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(blk.w_q), heads(blk.w_k), heads(blk.w_v)
    logits = (q @ k.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    if not np.all(np.isfinite(logits)):
        raise NumericalError("non-finite attention logits")
    a = softmax(logits, axis=-1)
    cat = (a @ v).transpose(0, 2, 1, 3).reshape(B, m, H * dh)
    att = cat @ blk.w_o.T
    mask1 = _dropout_mask(att.shape, cfg.p_drop, rng) if train else None
    if mask1 is not None:
        att = att * mask1
    y1, ln1 = layer_norm(x + att, blk.ln1_gain, blk.ln1_bias, cfg.ln_epsilon)

    h_pre = y1 @ blk.w_1.T + blk.b_1
    h = np.maximum(h_pre, 0.0) if cfg.activation == "relu" else np.tanh(h_pre)
    f = h @ blk.w_2.T + blk.b_2
    mask2 = _dropout_mask(f.shape, cfg.p_drop, rng) if train else None
    if mask2 is not None:
        f = f * mask2
    y2, ln2 = layer_norm(y1 + f, blk.ln2_gain, blk.ln2_bias, cfg.ln_epsilon)
    if not np.all(np.isfinite(y2)):
        raise NumericalError("non-finite activations in transform block")

    cache = None
    if keep:
        cache = _BlockCache()
        cache.x, cache.q, cache.k, cache.v, cache.a, cache.cat = x, q, k, v, a, cat
        cache.mask1, cache.ln1, cache.y1 = mask1, ln1, y1
        cache.h_pre, cache.h, cache.mask2, cache.ln2 = h_pre, h, mask2, ln2
    return y2, cache


def _block_backward(blk: AttentionBlock, cfg: TransformConfig, c: _BlockCache, dy2):
    B, m, d = dy2.shape
    H, dh = cfg.heads, cfg.d_head
    g = {}

    dz2, g["ln2_gain"], g["ln2_bias"] = _layer_norm_backward(dy2, blk.ln2_gain, c.ln2)
    df = dz2 if c.mask2 is None else dz2 * c.mask2
    g["b_2"] = df.sum(axis=(0, 1))
    g["w_2"] = df.reshape(-1, d).T @ c.h.reshape(-1, cfg.d_ff)
    dh_act = df @ blk.w_2
    if cfg.activation == "relu":
        dh_pre = dh_act * (c.h_pre > 0)
    else:
        dh_pre = dh_act * (1.0 - c.h * c.h)
    g["b_1"] = dh_pre.sum(axis=(0, 1))
    g["w_1"] = dh_pre.reshape(-1, cfg.d_ff).T @ c.y1.reshape(-1, d)
    dy1 = dz2 + dh_pre @ blk.w_1

    dz1, g["ln1_gain"], g["ln1_bias"] = _layer_norm_backward(dy1, blk.ln1_gain, c.ln1)
    datt = dz1 if c.mask1 is None else dz1 * c.mask1
    g["w_o"] = datt.reshape(-1, d).T @ c.cat.reshape(-1, H * dh)
    dcat = (datt @ blk.w_o).reshape(B, m, H, dh).transpose(0, 2, 1, 3)

    da = dcat @ c.v.transpose(0, 1, 3, 2)
    dv = c.a.transpose(0, 1, 3, 2) @ dcat
    ds = c.a * (da - np.sum(da * c.a, axis=-1, keepdims=True)) / math.sqrt(dh)
    dq = ds @ c.k
    dk = ds.transpose(0, 1, 3, 2) @ c.q

    dx = dz1
    x_flat = c.x.reshape(-1, d)
    for name, dproj in (("w_q", dq), ("w_k", dk), ("w_v", dv)):
        flat = dproj.transpose(0, 2, 1, 3).reshape(B * m, H * dh)
        g[name] = (flat.T @ x_flat).reshape(H, dh, d)
        dx = dx + (flat @ getattr(blk, name).reshape(H * dh, d)).reshape(B, m, d)
    return dx, AttentionBlock(**g)


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Per-set permutation of slots that keeps slot 0 first and sorts the
    remaining slots lexicographically by their vector entries."""
    B, m, d = x.shape
    if m <= 2:
        return np.broadcast_to(np.arange(m), (B, m)).copy()
    sup = x[:, 1:, :].reshape(B * (m - 1), d)
    batch = np.repeat(np.arange(B), m - 1)
    # lexsort treats the last key as primary; two columns settle almost every
    # set, the full key is only needed when distinct rows tie on both
    n_keys = min(d, 2)
    order = np.lexsort([sup[:, j] for j in range(n_keys - 1, -1, -1)] + [batch])
    if d > n_keys:
        s = sup[order]
        tie = (batch[order][1:] == batch[order][:-1]) & np.all(s[1:, :n_keys] == s[:-1, :n_keys], axis=1)
        if np.any(tie & np.any(s[1:] != s[:-1], axis=1)):
            order = np.lexsort([sup[:, j] for j in range(d - 1, -1, -1)] + [batch])
    order = order.reshape(B, m - 1) - (np.arange(B) * (m - 1))[:, None] + 1
    return np.concatenate([np.zeros((B, 1), dtype=order.dtype), order], axis=1)


@dataclass
class ForwardCache:
    params_version: int
    params_id: int
    perm: np.ndarray
    blocks: list = field(repr=False)


def transform_batch(
    x: np.ndarray,
    params: TransformParams,
    train: bool = False,
    rng: np.random.Generator | None = None,
    keep_cache: bool = False,
):
    """Apply the transformation to a batch of sets.

    ``x`` has shape ``(B, m, d)`` with the query in slot 0.  Returns ``(y,
    cache)``; ``cache`` is ``None`` unless ``keep_cache`` is set.
    """
    cfg = params.config
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != cfg.d or x.shape[1] < 1:
        raise ConfigError(f"expected input of shape (B, m, {cfg.d}), got {x.shape}")
    perm = canonical_order(x)
    rows = np.arange(x.shape[0])[:, None]
    h = x[rows, perm]
    caches = []
    for blk in params.blocks:
        h, c = _block_forward(blk, cfg, h, train, rng, keep_cache)
        caches.append(c)
    y = np.empty_like(h)
    y[rows, perm] = h
    cache = ForwardCache(params.version, id(params), perm, caches) if keep_cache else None
    return y, cache


def transform_backward(params: TransformParams, cache: ForwardCache | None, dy: np.ndarray):
    """Gradients of a scalar loss given ``dy = dLoss/dy``.

    Returns ``(param_grads, dx)`` where ``param_grads`` is a
    :class:`TransformParams` holding gradients and ``dx`` matches the input.
    Dropout masks recorded in the forward pass are replayed.
    """
    if cache is None:
        raise UsageError("transform_backward needs the cache from a keep_cache=True forward pass")
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise UsageError("stale forward cache: parameters changed since the forward pass")
    cfg = params.config
    rows = np.arange(dy.shape[0])[:, None]
    g = dy[rows, cache.perm]
    grads = []
    for blk, c in zip(reversed(params.blocks), reversed(cache.blocks)):
        g, gb = _block_backward(blk, cfg, c, g)
        grads.append(gb)
    grads.reverse()
    dx = np.empty_like(g)
    dx[rows, cache.perm] = g
    return TransformParams(cfg, grads), dx


def transform_set(
    query_emb: np.ndarray,
    support_embs: np.ndarray,
    params: TransformParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
):
    """Transform one set ``{query} + supports``; returns ``(query_out, support_outs)``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    support_embs = np.atleast_2d(support_embs)
    if len(support_embs) < 1:
        raise ConfigError("need at least one support embedding")
    x = np.concatenate([np.asarray(query_emb)[None, :], support_embs], axis=0)[None]
    y, _ = transform_batch(x, params, train=(mode == "train"), rng=rng)
    return y[0, 0], y[0, 1:]


def save_transform(path: str | Path, params: TransformParams) -> None:
    cfg = params.config
    with open(path, "wb") as f:
        f.write(_TRF_HEADER.pack(
            TRF_MAGIC, cfg.d, cfg.d_prime, cfg.heads, cfg.d_ff, cfg.blocks,
            _ACTIVATIONS.index(cfg.activation), cfg.p_drop, cfg.ln_epsilon,
        ))
        for blk in params.blocks:
            for name in BLOCK_FIELDS:
                f.write(np.ascontiguousarray(getattr(blk, name), dtype="<f4").tobytes())


def _block_shapes(cfg: TransformConfig) -> dict[str, tuple[int, ...]]:
    d, dp, dff, H, dh = cfg.d, cfg.d_prime, cfg.d_ff, cfg.heads, cfg.d_head
    return {
        "w_q": (H, dh, d), "w_k": (H, dh, d), "w_v": (H, dh, d), "w_o": (d, dp),
        "w_1": (dff, d), "b_1": (dff,), "w_2": (d, dff), "b_2": (d,),
        "ln1_gain": (d,), "ln1_bias": (d,), "ln2_gain": (d,), "ln2_bias": (d,),
    }


def load_transform(path: str | Path) -> TransformParams:
    data = Path(path).read_bytes()
    if len(data) < _TRF_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, d, dp, heads, dff, nblocks, act, p_drop, eps = _TRF_HEADER.unpack_from(data)
    if magic != TRF_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if act >= len(_ACTIVATIONS):
        raise CheckpointError(f"{path}: unknown activation code {act}")
    try:
        cfg = TransformConfig(d, dp, heads, dff, nblocks, p_drop, eps, _ACTIVATIONS[act])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid header: {exc}") from None
    shapes = _block_shapes(cfg)
    expected = _TRF_HEADER.size + 4 * cfg.param_count()
    if len(data) != expected:
        raise CheckpointError(f"{path}: header implies {expected} bytes, file has {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=_TRF_HEADER.size).astype(np.float64)
    pos = 0
    blocks = []
    for _ in range(nblocks):
        arrs = {}
        for name in BLOCK_FIELDS:
            size = math.prod(shapes[name])
            arrs[name] = body[pos : pos + size].reshape(shapes[name]).copy()
            pos += size
        blocks.append(AttentionBlock(**arrs))
    return TransformParams(cfg, blocks)

