"""Caption decoders over adapted image features.

A captioner is a feature adapter (``single``, ``detection`` or ``stacked``)
feeding a decoder (``lstm`` or ``transformer``). Adapters turn raw feature
rows into embedding-sized encoder tokens; the transformer uses them as
cross-attention keys/values, the LSTM consumes its single token as a
pre-step input before SOS.

All batched entry points take ``ids[B, T]`` and encoder tokens ``[B, R, e]``;
the unbatched helpers accept ``[T]`` / ``[R, e]`` and return ``[T, V]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import EOS_ID, PAD_ID, SOS_ID

DECODER_KINDS = ("lstm", "transformer")
ADAPTER_KINDS = ("single", "detection", "stacked")
DTYPES = {"float32": np.float32, "float64": np.float64}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureConfig:
    decoder_kind: str
    adapter_kind: str
    embed_size: int
    num_layers: int
    vocab_size: int
    input_dim: int = 0
    input_dim_b: int = 0
    max_len: int = 30
    num_heads: int = 0  # 0 selects embed_size // 64 (at least 1)
    ffn_size: int = 0  # 0 selects 4 * embed_size
    dropout: float = 0.1
    max_boxes: int = 16
    num_classes: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.num_heads == 0:
            object.__setattr__(self, "num_heads", max(1, self.embed_size // 64))
        if self.ffn_size == 0:
            object.__setattr__(self, "ffn_size", 4 * self.embed_size)
        self.validate()

    def validate(self) -> None:
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.adapter_kind not in ADAPTER_KINDS:
            raise ConfigError(f"adapter_kind must be one of {ADAPTER_KINDS}")
        if self.embed_size < 1 or self.num_layers < 1 or self.vocab_size < 3:
            raise ConfigError("embed_size and num_layers must be >= 1, vocab_size >= 3")
        if self.embed_size % self.num_heads:
            raise ConfigError(f"embed_size {self.embed_size} not divisible by num_heads {self.num_heads}")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {tuple(DTYPES)}")
        if self.adapter_kind == "detection":
            if self.num_classes < 1 or self.max_boxes < 1:
                raise ConfigError("detection adapter needs num_classes >= 1 and max_boxes >= 1")
        elif self.input_dim < 1:
            raise ConfigError("input_dim must be >= 1")
        if self.adapter_kind == "stacked":
            if self.input_dim_b < 1:
                raise ConfigError("stacked adapter needs input_dim_b >= 1")
            if self.decoder_kind == "lstm":
                raise ConfigError("the lstm decoder consumes one encoder token; stacked adapter is transformer-only")

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def box_width(self) -> int:
        return 4 + self.num_classes

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ArchitectureConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# Parameter manifest and initialization


def param_manifest(cfg: ArchitectureConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init-kind) for every parameter of ``cfg``."""
    e, v, f = cfg.embed_size, cfg.vocab_size, cfg.ffn_size
    out = []

    def linear(prefix, fan_in, fan_out):
        out.append((f"{prefix}.w", (fan_in, fan_out), "weight"))
        out.append((f"{prefix}.b", (fan_out,), "bias"))

    def norm(prefix):
        out.append((f"{prefix}.g", (e,), "gain"))
        out.append((f"{prefix}.b", (e,), "bias"))

    if cfg.adapter_kind == "single":
        linear("adapter", cfg.input_dim, e)
    elif cfg.adapter_kind == "detection":
        linear("adapter", cfg.max_boxes * cfg.box_width, e)
    else:
        linear("adapter_a", cfg.input_dim, e)
        linear("adapter_b", cfg.input_dim_b, e)

    out.append(("embed", (v, e), "embedding"))
    if cfg.decoder_kind == "transformer":
        for layer in range(cfg.num_layers):
            p = f"layers.{layer}"
            for block in ("self", "cross"):
                for proj in ("q", "k", "v", "o"):
                    linear(f"{p}.{block}.{proj}", e, e)
            linear(f"{p}.ffn1", e, f)
            linear(f"{p}.ffn2", f, e)
            for k in (1, 2, 3):
                norm(f"{p}.ln{k}")
    else:
        for layer in range(cfg.num_layers):
            p = f"lstm.{layer}"
            out.append((f"{p}.wx", (e, 4 * e), "weight"))
            out.append((f"{p}.wh", (e, 4 * e), "weight"))
            out.append((f"{p}.b", (4 * e,), "lstm_bias"))
    linear("head", e, v)
    return out


def init_params(cfg: ArchitectureConfig, seed: int) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit gains, LSTM forget bias +1."""
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    params = {}
    for name, shape, kind in param_manifest(cfg):
        if kind in ("weight", "embedding"):
            fan_in = shape[0] if kind == "weight" else shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "gain":
            arr = np.ones(shape)
        elif kind == "lstm_bias":
            arr = np.zeros(shape)
            h = shape[0] // 4
            arr[h : 2 * h] = 1.0
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def check_params(cfg: ArchitectureConfig, params: dict[str, Tensor]) -> None:
    manifest = param_manifest(cfg)
    expected = {name: shape for name, shape, _ in manifest}
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name].data)):
            raise ConfigError(f"parameter {name} has non-finite values")


# ---------------------------------------------------------------------------
# Adapters


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return ad.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def adapter_single(features, params, prefix: str = "adapter") -> Tensor:
    """Row-wise affine projection ``[.., r, d] -> [.., r, e]``."""
    x = ad.as_tensor(features)
    w = params[f"{prefix}.w"]
    if x.ndim < 2 or x.shape[-1] != w.shape[0]:
        raise ConfigError(f"feature dim {x.shape[-1:]} does not match adapter input {w.shape[0]}")
    if x.shape[-2] < 1:
        raise ConfigError("feature matrix needs at least one row")
    if not x.requires_grad and x.dtype != w.dtype:
        x = Tensor(x.data.astype(w.dtype))
    return _linear(x, params, prefix)


def pack_boxes(boxes: np.ndarray, max_boxes: int, num_classes: int) -> np.ndarray:
    """Validate ``[n, 4 + C]`` box rows and zero-pad/flatten to ``max_boxes * (4 + C)``."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4 + num_classes)
    n = boxes.shape[0]
    if n > max_boxes:
        raise ConfigError(f"{n} boxes exceed max_boxes={max_boxes}")
    coords, onehot = boxes[:, :4], boxes[:, 4:]
    if np.any(coords < 0.0) or np.any(coords > 1.0):
        raise ConfigError("box coordinates must be normalized to [0, 1]")
    if n and not (np.all((onehot == 0.0) | (onehot == 1.0)) and np.all(onehot.sum(axis=1) == 1.0)):
        raise ConfigError("class rows must be one-hot")
    flat = np.zeros(max_boxes * (4 + num_classes))
    flat[: boxes.size] = boxes.reshape(-1)
    return flat


def adapter_detection(boxes, params, max_boxes: int, num_classes: int) -> Tensor:
    """Box rows (x, y, w, h, one-hot class) -> one encoder token ``[1, e]``.

    ``boxes`` may be a single ``[n, 4 + C]`` array or a list of them (batched,
    giving ``[B, 1, e]``).
    """
    w = params["adapter.w"]
    if isinstance(boxes, np.ndarray) and boxes.ndim == 2:
        flat = pack_boxes(boxes, max_boxes, num_classes)[None, :]
        return _linear(Tensor(flat.astype(w.dtype)), params, "adapter")
    flat = np.stack([pack_boxes(b, max_boxes, num_classes) for b in boxes])
    tok = _linear(Tensor(flat.astype(w.dtype)), params, "adapter")
    return ad.reshape(tok, (flat.shape[0], 1, w.shape[1]))


def adapter_stacked(features_a, features_b, params) -> Tensor:
    """Project both streams and stack them along the token axis, stream a first."""
    a = adapter_single(features_a, params, "adapter_a")
    b = adapter_single(features_b, params, "adapter_b")
    return ad.concat([a, b], axis=a.ndim - 2)


# ---------------------------------------------------------------------------
# Transformer decoder


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(0, dim, 2)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def causal_mask(t: int) -> np.ndarray:
    """Additive mask: 0 where key position <= query position, MASK_VALUE elsewhere."""
    return np.triu(np.full((t, t), ad.MASK_VALUE), k=1)


def multi_head_attention(q_in, kv_in, mask, params, prefix: str, num_heads: int,
                         dropout: float = 0.0, rng=None, training: bool = False) -> Tensor:
    """Scaled dot-product attention with ``num_heads`` heads.

    ``q_in`` is ``[B, Tq, e]`` (or ``[Tq, e]``), ``kv_in`` ``[B, Tk, e]``;
    ``mask`` is an additive ``[Tq, Tk]`` array or None.
    """
    q_in, kv_in = ad.as_tensor(q_in), ad.as_tensor(kv_in)
    unbatched = q_in.ndim == 2
    if unbatched:
        q_in = ad.reshape(q_in, (1, *q_in.shape))
        kv_in = ad.reshape(kv_in, (1, *kv_in.shape))
    b, tq, e = q_in.shape
    tk = kv_in.shape[1]
    if kv_in.shape[0] != b or kv_in.shape[2] != e:
        raise ConfigError(f"attention shape mismatch: q {q_in.shape} vs kv {kv_in.shape}")
    if e % num_heads:
        raise ConfigError("embed size not divisible by head count")
    d = e // num_heads
    q = ad.transpose(ad.reshape(_linear(q_in, params, f"{prefix}.q"), (b, tq, num_heads, d)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(_linear(kv_in, params, f"{prefix}.k"), (b, tk, num_heads, d)), (0, 2, 3, 1))
    v = ad.transpose(ad.reshape(_linear(kv_in, params, f"{prefix}.v"), (b, tk, num_heads, d)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (tq, tk):
            raise ConfigError(f"mask shape {mask.shape} != ({tq}, {tk})")
        scores = scores + Tensor(mask.astype(scores.dtype))
    weights = ad.dropout(ad.softmax(scores, axis=-1), dropout, rng, training)
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, tq, e))
    out = _linear(ctx, params, f"{prefix}.o")
    if unbatched:
        out = ad.reshape(out, (tq, e))
    return out


def _embed(ids: np.ndarray, params, scale: float) -> Tensor:
    x = ad.take_rows(params["embed"], ids)
    return ad.scale(x, scale) if scale != 1.0 else x


def transformer_decoder_forward(ids, enc, params, cfg: ArchitectureConfig,
                                rng=None, training: bool = False) -> Tensor:
    """Teacher-forced logits ``[B, T, V]`` (``[T, V]`` for unbatched input)."""
    ids = np.asarray(ids, dtype=np.int64)
    enc = ad.as_tensor(enc)
    unbatched = ids.ndim == 1
    if unbatched:
        ids = ids[None, :]
        enc = ad.reshape(enc, (1, *enc.shape))
    b, t = ids.shape
    if t == 0:
        raise ConfigError("empty prefix")
    if t > cfg.max_len:
        raise ConfigError(f"prefix length {t} exceeds max_len {cfg.max_len}")
    e = cfg.embed_size
    dtype = params["embed"].dtype
    x = _embed(ids, params, math.sqrt(e))
    x = x + Tensor(sinusoidal_positions(t, e).astype(dtype))
    x = ad.dropout(x, cfg.dropout, rng, training)
    mask = causal_mask(t)
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}"
        a = multi_head_attention(x, x, mask, params, f"{p}.self", cfg.num_heads, cfg.dropout, rng, training)
        x = ad.layer_norm(x + a, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        c = multi_head_attention(x, enc, None, params, f"{p}.cross", cfg.num_heads, cfg.dropout, rng, training)
        x = ad.layer_norm(x + c, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        h = _linear(ad.relu(_linear(x, params, f"{p}.ffn1")), params, f"{p}.ffn2")
        x = ad.layer_norm(x + h, params[f"{p}.ln3.g"], params[f"{p}.ln3.b"])
    logits = _linear(x, params, "head")
    if unbatched:
        logits = ad.reshape(logits, (t, cfg.vocab_size))
    return logits


# ---------------------------------------------------------------------------
# LSTM decoder


def lstm_cell_step(x, h, c, params, prefix: str = "lstm.0") -> tuple[Tensor, Tensor]:
    """One LSTM step with gate order (input, forget, cell, output)."""
    x, h, c = ad.as_tensor(x), ad.as_tensor(h), ad.as_tensor(c)
    wx = params[f"{prefix}.wx"]
    hidden = wx.shape[1] // 4
    if x.shape[-1] != wx.shape[0] or h.shape[-1] != hidden or c.shape != h.shape:
        raise ConfigError("lstm_cell_step: dimension mismatch")
    unbatched = x.ndim == 1
    if unbatched:
        x, h, c = (ad.reshape(z, (1, z.shape[0])) for z in (x, h, c))
    gates = ad.matmul(x, wx) + ad.matmul(h, params[f"{prefix}.wh"]) + params[f"{prefix}.b"]
    i = ad.sigmoid(ad.slice_last(gates, 0, hidden))
    f = ad.sigmoid(ad.slice_last(gates, hidden, 2 * hidden))
    g = ad.tanh(ad.slice_last(gates, 2 * hidden, 3 * hidden))
    o = ad.sigmoid(ad.slice_last(gates, 3 * hidden, 4 * hidden))
    c_new = f * c + i * g
    h_new = o * ad.tanh(c_new)
    if unbatched:
        h_new, c_new = ad.reshape(h_new, (hidden,)), ad.reshape(c_new, (hidden,))
    return h_new, c_new


@dataclass
class LSTMState:
    h: list[Tensor]
    c: list[Tensor]


def _lstm_stack(x: Tensor, state: LSTMState, params, cfg) -> tuple[Tensor, LSTMState]:
    hs, cs = [], []
    for layer in range(cfg.num_layers):
        h, c = lstm_cell_step(x, state.h[layer], state.c[layer], params, f"lstm.{layer}")
        hs.append(h)
        cs.append(c)
        x = h
    return x, LSTMState(hs, cs)


def lstm_start(feature_token, params, cfg: ArchitectureConfig) -> LSTMState:
    """Zero state advanced by one step on the projected image token ``[B, 1, e]``."""
    tok = ad.as_tensor(feature_token)
    if tok.ndim != 3 or tok.shape[1] != 1:
        raise ConfigError(f"lstm decoder expects exactly one encoder token, got shape {tok.shape}")
    b, _, e = tok.shape
    dtype = params["embed"].dtype
    zero = Tensor(np.zeros((b, e), dtype=dtype))
    state = LSTMState([zero] * cfg.num_layers, [zero] * cfg.num_layers)
    _, state = _lstm_stack(ad.reshape(tok, (b, e)), state, params, cfg)
    return state


def lstm_advance(state: LSTMState, ids_t, params, cfg: ArchitectureConfig,
                 rng=None, training: bool = False) -> tuple[Tensor, LSTMState]:
    """Consume token ids ``[B]``; return logits ``[B, V]`` and the new state."""
    x = ad.dropout(_embed(np.asarray(ids_t, dtype=np.int64), params, 1.0), cfg.dropout, rng, training)
    top, state = _lstm_stack(x, state, params, cfg)
    return _linear(top, params, "head"), state


def lstm_decoder_forward(ids, feature_token, params, cfg: ArchitectureConfig,
                         rng=None, training: bool = False) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    tok = ad.as_tensor(feature_token)
    unbatched = ids.ndim == 1
    if unbatched:
        ids = ids[None, :]
        tok = ad.reshape(tok, (1, *tok.shape))
    b, t = ids.shape
    if t == 0:
        raise ConfigError("empty prefix")
    state = lstm_start(tok, params, cfg)
    rows = []
    for step in range(t):
        logits, state = lstm_advance(state, ids[:, step], params, cfg, rng, training)
        rows.append(ad.reshape(logits, (b, 1, cfg.vocab_size)))
    out = ad.concat(rows, axis=1)
    if unbatched:
        out = ad.reshape(out, (t, cfg.vocab_size))
    return out


# ---------------------------------------------------------------------------
# Captioner


class Captioner:
    """Parameters plus architecture, exposing encode / forward / next_token_logits."""

    def __init__(self, cfg: ArchitectureConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else params
        check_params(cfg, self.params)
        self.training = False
        self.rng = np.random.default_rng(seed)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def encode(self, features) -> Tensor:
        """Encoder tokens for one image (``[R, e]``) or a batch (``[B, R, e]``).

        ``features`` is an array for ``single``, box rows for ``detection``
        (a list of arrays when batched), and an ``(a, b)`` pair for ``stacked``.
        """
        kind = self.cfg.adapter_kind
        if kind == "single":
            return adapter_single(features, self.params)
        if kind == "detection":
            return adapter_detection(features, self.params, self.cfg.max_boxes, self.cfg.num_classes)
        a, b = features
        return adapter_stacked(a, b, self.params)

    def forward(self, ids, enc) -> Tensor:
        if self.cfg.decoder_kind == "transformer":
            return transformer_decoder_forward(ids, enc, self.params, self.cfg, self.rng, self.training)
        return lstm_decoder_forward(ids, enc, self.params, self.cfg, self.rng, self.training)

    def loss(self, seqs: np.ndarray, enc) -> Tensor:
        """Teacher-forced cross-entropy on padded id sequences ``[B, L]``."""
        seqs = np.asarray(seqs, dtype=np.int64)
        logits = self.forward(seqs[:, :-1], enc)
        return ad.cross_entropy_loss(logits, seqs[:, 1:], PAD_ID)

    def next_token_logits(self, prefix: Sequence[int], enc) -> np.ndarray:
        """Logits ``[V]`` for the token following ``prefix`` given one image's tokens ``[R, e]``."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim != 1 or len(prefix) == 0 or prefix[0] != SOS_ID:
            raise ValueError("prefix must be a non-empty id list starting with SOS")
        enc_data = enc.data if isinstance(enc, Tensor) else np.asarray(enc)
        with ad.no_grad():
            if self.cfg.decoder_kind == "transformer":
                out = transformer_decoder_forward(prefix, enc_data, self.params, self.cfg)
                return out.data[-1]
            state = lstm_start(Tensor(enc_data[None]), self.params, self.cfg)
            for tok in prefix:
                logits, state = lstm_advance(state, np.array([tok]), self.params, self.cfg)
            return logits.data[0]

    def encode_one(self, features) -> np.ndarray:
        with ad.no_grad():
            return self.encode(features).data


__all__ = [
    "ArchitectureConfig", "Captioner", "ConfigError", "LSTMState", "adapter_detection",
    "adapter_single", "adapter_stacked", "causal_mask", "check_params", "init_params",
    "lstm_advance", "lstm_cell_step", "lstm_decoder_forward", "lstm_start",
    "multi_head_attention", "pack_boxes", "param_manifest", "sinusoidal_positions",
    "transformer_decoder_forward", "EOS_ID", "SOS_ID",
]
