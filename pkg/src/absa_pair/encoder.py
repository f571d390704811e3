"""Bidirectional transformer encoder with a linear head on the [CLS] state.

Pure numpy, float64 throughout. ``forward`` keeps every intermediate needed by
``backward_from_logits``, which returns exact gradients for every parameter.
Residual blocks use the post-layer-norm ordering::

    x = LN(x + Dropout(Attention(x)))
    x = LN(x + Dropout(FFN(x)))
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
from scipy.special import erf

from .tokenizer import Batch

DTYPE = np.float64
LN_EPSILON = 1e-12
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 2
    hidden_size: int = 32
    feed_forward_size: int | None = None
    vocab_size: int = 200
    max_len: int = 32
    num_classes: int = 3
    dropout_rate: float = 0.1
    seed: int = 0
    type_vocab_size: int = field(default=2, repr=False)

    def __post_init__(self) -> None:
        if self.feed_forward_size is None:
            object.__setattr__(self, "feed_forward_size", 4 * self.hidden_size)
        for name in ("num_layers", "num_heads", "hidden_size", "feed_forward_size", "vocab_size", "max_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_classes not in (2, 3):
            raise ValueError(f"num_classes must be 2 or 3, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def head_size(self) -> int:
        return self.hidden_size // self.num_heads

    @classmethod
    def bert_base(cls, vocab_size: int, num_classes: int = 3, **kw: Any) -> "EncoderConfig":
        """12 layers, 12 heads, hidden 768: reachable, but far too slow for this numpy code."""
        return cls(num_layers=12, num_heads=12, hidden_size=768, feed_forward_size=3072,
                   vocab_size=vocab_size, max_len=512, num_classes=num_classes, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


def parameter_shapes(config: EncoderConfig) -> "OrderedDict[str, tuple[int, ...]]":
    H, F = config.hidden_size, config.feed_forward_size
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["embeddings.token"] = (config.vocab_size, H)
    shapes["embeddings.position"] = (config.max_len, H)
    shapes["embeddings.segment"] = (config.type_vocab_size, H)
    shapes["embeddings.ln.scale"] = (H,)
    shapes["embeddings.ln.shift"] = (H,)
    for l in range(config.num_layers):
        p = f"layer{l}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attention.{proj}.weight"] = (H, H)
            shapes[p + f"attention.{proj}.bias"] = (H,)
        shapes[p + "attention.ln.scale"] = (H,)
        shapes[p + "attention.ln.shift"] = (H,)
        shapes[p + "ffn.inner.weight"] = (H, F)
        shapes[p + "ffn.inner.bias"] = (F,)
        shapes[p + "ffn.outer.weight"] = (F, H)
        shapes[p + "ffn.outer.bias"] = (H,)
        shapes[p + "ffn.ln.scale"] = (H,)
        shapes[p + "ffn.ln.shift"] = (H,)
    shapes["classifier.weight"] = (H, config.num_classes)
    shapes["classifier.bias"] = (config.num_classes,)
    return shapes


class ModelParams:
    """Named parameter arrays plus the config that fixes their shapes.

    ``version`` is bumped by every in-place update so stale forward caches can
    be detected.
    """

    def __init__(self, config: EncoderConfig, arrays: "dict[str, np.ndarray]"):
        shapes = parameter_shapes(config)
        if list(arrays) != list(shapes):
            missing = set(shapes) - set(arrays)
            extra = set(arrays) - set(shapes)
            if missing or extra:
                raise ValueError(f"parameter names mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        self.config = config
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, shape in shapes.items():
            a = np.asarray(arrays[name], dtype=DTYPE)
            if a.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {a.shape}")
            self.arrays[name] = a
        self.version = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())


def truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: EncoderConfig) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".scale"):
            arrays[name] = np.ones(shape, dtype=DTYPE)
        elif name.endswith((".shift", ".bias")):
            arrays[name] = np.zeros(shape, dtype=DTYPE)
        else:
            arrays[name] = truncated_normal(rng, shape)
    return ModelParams(config, arrays)


# -- numeric kernels -----------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=DTYPE)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def gelu(x: np.ndarray | float) -> np.ndarray:
    """Exact GELU, x * Phi(x)."""
    x = np.asarray(x, dtype=DTYPE)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return cdf + x * pdf


def layer_norm(
    v: np.ndarray, scale: np.ndarray, shift: np.ndarray, epsilon: float = LN_EPSILON
) -> tuple[np.ndarray, tuple]:
    """Normalize over the last axis, then apply ``scale`` and ``shift``. Returns (out, cache)."""
    v = np.asarray(v, dtype=DTYPE)
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    rstd = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + epsilon)
    normed = centered * rstd
    return normed * scale + shift, (normed, rstd, scale)


def layer_norm_backward(dout: np.ndarray, cache: tuple) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    normed, rstd, scale = cache
    reduce_axes = tuple(range(dout.ndim - 1))
    dscale = (dout * normed).sum(axis=reduce_axes)
    dshift = dout.sum(axis=reduce_axes)
    dn = dout * scale
    dv = rstd * (dn - dn.mean(axis=-1, keepdims=True) - normed * (dn * normed).mean(axis=-1, keepdims=True))
    return dv, dscale, dshift


def _dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray | None]:
    if rng is None or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def _linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return x @ weight + bias


def _linear_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray):
    H_in = x.shape[-1]
    dweight = x.reshape(-1, H_in).T @ dout.reshape(-1, dout.shape[-1])
    dbias = dout.reshape(-1, dout.shape[-1]).sum(axis=0)
    return dout @ weight.T, dweight, dbias


# -- attention -------------------------------------------------------------------


def _split_heads(x: np.ndarray, num_heads: int) -> np.ndarray:
    B, T, H = x.shape
    return x.reshape(B, T, num_heads, H // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    B, A, T, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, A * d)


def multi_head_attention(
    hidden: np.ndarray, mask: np.ndarray, params: "dict[str, np.ndarray] | ModelParams", prefix: str, num_heads: int
) -> tuple[np.ndarray, dict]:
    """Scaled dot-product self-attention over unmasked keys, followed by the output projection.

    ``mask`` is (batch, len) with 1 on real tokens. Returns (batch x len x H output,
    cache); ``cache["probs"]`` holds the (batch, heads, len, len) attention weights.
    """
    hidden = np.asarray(hidden, dtype=DTYPE)
    mask = np.asarray(mask).astype(bool)
    if not mask.any(axis=-1).all():
        raise ValueError("every sequence needs at least one unmasked position")
    head_size = hidden.shape[-1] // num_heads
    w = lambda n: params[prefix + n]  # noqa: E731
    q = _split_heads(_linear(hidden, w("query.weight"), w("query.bias")), num_heads)
    k = _split_heads(_linear(hidden, w("key.weight"), w("key.bias")), num_heads)
    v = _split_heads(_linear(hidden, w("value.weight"), w("value.bias")), num_heads)
    scores = q @ k.transpose(0, 1, 3, 2) / math.sqrt(head_size)
    scores = np.where(mask[:, None, None, :], scores, -np.inf)
    probs = softmax(scores, axis=-1)
    context = _merge_heads(probs @ v)
    out = _linear(context, w("output.weight"), w("output.bias"))
    cache = {"hidden": hidden, "q": q, "k": k, "v": v, "probs": probs, "context": context}
    return out, cache


def multi_head_attention_backward(dout: np.ndarray, cache: dict, params, prefix: str, num_heads: int):
    grads = {}
    w = lambda n: params[prefix + n]  # noqa: E731
    q, k, v, probs = cache["q"], cache["k"], cache["v"], cache["probs"]
    head_size = q.shape[-1]
    dcontext, grads[prefix + "output.weight"], grads[prefix + "output.bias"] = _linear_backward(
        dout, cache["context"], w("output.weight")
    )
    dctx = _split_heads(dcontext, num_heads)
    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dscores /= math.sqrt(head_size)
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dhidden = np.zeros_like(cache["hidden"])
    for name, d in (("query", dq), ("key", dk), ("value", dv)):
        dh, grads[prefix + f"{name}.weight"], grads[prefix + f"{name}.bias"] = _linear_backward(
            _merge_heads(d), cache["hidden"], w(f"{name}.weight")
        )
        dhidden += dh
    return dhidden, grads


# -- full model ------------------------------------------------------------------


@dataclass
class ForwardCache:
    batch: Batch
    params_id: int
    params_version: int
    embed: dict
    layers: list
    cls: dict
    logits: np.ndarray


def _check_batch(config: EncoderConfig, batch: Batch) -> None:
    ids = batch.token_ids
    if ids.ndim != 2 or batch.segment_ids.shape != ids.shape or batch.attention_mask.shape != ids.shape:
        raise ValueError(
            f"batch arrays must share one (batch, len) shape: {ids.shape}, "
            f"{batch.segment_ids.shape}, {batch.attention_mask.shape}"
        )
    if ids.shape[1] > config.max_len:
        raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    if batch.segment_ids.size and (batch.segment_ids.min() < 0 or batch.segment_ids.max() >= config.type_vocab_size):
        raise ValueError("segment id out of range")


def forward(
    params: ModelParams, batch: Batch, mode: str = "eval", rng: np.random.Generator | None = None
) -> tuple[np.ndarray, ForwardCache]:
    """Logits of shape (batch, num_classes) and the activations ``backward_from_logits`` needs.

    Dropout is applied only in ``"train"`` mode and draws its masks from ``rng``
    (a fresh seeded generator when omitted), so train-mode passes are reproducible.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    _check_batch(cfg, batch)
    if mode == "train" and rng is None:
        rng = np.random.default_rng(cfg.seed)
    drop_rng = rng if mode == "train" else None
    rate = cfg.dropout_rate
    B, T = batch.token_ids.shape

    emb = (
        params["embeddings.token"][batch.token_ids]
        + params["embeddings.position"][:T][None, :, :]
        + params["embeddings.segment"][batch.segment_ids]
    )
    x, ln_cache = layer_norm(emb, params["embeddings.ln.scale"], params["embeddings.ln.shift"])
    x, keep = _dropout(x, rate, drop_rng)
    embed_cache = {"ln": ln_cache, "keep": keep}

    layer_caches = []
    for l in range(cfg.num_layers):
        p = f"layer{l}."
        att, att_cache = multi_head_attention(x, batch.attention_mask, params, p + "attention.", cfg.num_heads)
        att, keep_att = _dropout(att, rate, drop_rng)
        x1, ln1 = layer_norm(x + att, params[p + "attention.ln.scale"], params[p + "attention.ln.shift"])
        pre = _linear(x1, params[p + "ffn.inner.weight"], params[p + "ffn.inner.bias"])
        act = gelu(pre)
        ff = _linear(act, params[p + "ffn.outer.weight"], params[p + "ffn.outer.bias"])
        ff, keep_ff = _dropout(ff, rate, drop_rng)
        x2, ln2 = layer_norm(x1 + ff, params[p + "ffn.ln.scale"], params[p + "ffn.ln.shift"])
        layer_caches.append(
            {"att": att_cache, "keep_att": keep_att, "ln1": ln1, "x1": x1,
             "pre": pre, "act": act, "keep_ff": keep_ff, "ln2": ln2}
        )
        x = x2

    cls_vec, keep_cls = _dropout(x[:, 0, :], rate, drop_rng)
    logits = _linear(cls_vec, params["classifier.weight"], params["classifier.bias"])
    cache = ForwardCache(
        batch=batch,
        params_id=id(params),
        params_version=params.version,
        embed=embed_cache,
        layers=layer_caches,
        cls={"vec": cls_vec, "keep": keep_cls, "shape": x.shape},
        logits=logits,
    )
    return logits, cache


class StaleCacheError(RuntimeError):
    pass


def backward_from_logits(params: ModelParams, cache: ForwardCache, dlogits: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Gradients of a scalar loss with respect to every parameter, given dloss/dlogits."""
    if cache.params_id != id(params) or cache.params_version != params.version:
        raise StaleCacheError("forward cache was computed with different or since-updated parameters")
    cfg = params.config
    grads: dict[str, np.ndarray] = {}
    batch = cache.batch

    dcls, grads["classifier.weight"], grads["classifier.bias"] = _linear_backward(
        dlogits, cache.cls["vec"], params["classifier.weight"]
    )
    if cache.cls["keep"] is not None:
        dcls = dcls * cache.cls["keep"]
    dx = np.zeros(cache.cls["shape"], dtype=DTYPE)
    dx[:, 0, :] = dcls

    for l in reversed(range(cfg.num_layers)):
        p = f"layer{l}."
        c = cache.layers[l]
        dsum2, grads[p + "ffn.ln.scale"], grads[p + "ffn.ln.shift"] = layer_norm_backward(dx, c["ln2"])
        dff = dsum2 if c["keep_ff"] is None else dsum2 * c["keep_ff"]
        dact, grads[p + "ffn.outer.weight"], grads[p + "ffn.outer.bias"] = _linear_backward(
            dff, c["act"], params[p + "ffn.outer.weight"]
        )
        dpre = dact * gelu_grad(c["pre"])
        dx1, grads[p + "ffn.inner.weight"], grads[p + "ffn.inner.bias"] = _linear_backward(
            dpre, c["x1"], params[p + "ffn.inner.weight"]
        )
        dx1 = dx1 + dsum2
        dsum1, grads[p + "attention.ln.scale"], grads[p + "attention.ln.shift"] = layer_norm_backward(dx1, c["ln1"])
        datt = dsum1 if c["keep_att"] is None else dsum1 * c["keep_att"]
        dh, att_grads = multi_head_attention_backward(datt, c["att"], params, p + "attention.", cfg.num_heads)
        grads.update(att_grads)
        dx = dh + dsum1

    if cache.embed["keep"] is not None:
        dx = dx * cache.embed["keep"]
    demb, grads["embeddings.ln.scale"], grads["embeddings.ln.shift"] = layer_norm_backward(dx, cache.embed["ln"])
    T = batch.token_ids.shape[1]
    dtok = np.zeros_like(params["embeddings.token"])
    np.add.at(dtok, batch.token_ids.ravel(), demb.reshape(-1, cfg.hidden_size))
    dpos = np.zeros_like(params["embeddings.position"])
    dpos[:T] = demb.sum(axis=0)
    dseg = np.zeros_like(params["embeddings.segment"])
    np.add.at(dseg, batch.segment_ids.ravel(), demb.reshape(-1, cfg.hidden_size))
    grads["embeddings.token"] = dtok
    grads["embeddings.position"] = dpos
    grads["embeddings.segment"] = dseg
    return OrderedDict((name, grads[name]) for name in params)


def predict_proba(params: ModelParams, batch: Batch, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities, computed in chunks of ``batch_size``."""
    out = []
    for start in range(0, len(batch), batch_size):
        logits, _ = forward(params, batch.take(range(start, min(start + batch_size, len(batch)))), "eval")
        out.append(softmax(logits))
    if not out:
        return np.zeros((0, params.config.num_classes), dtype=DTYPE)
    return np.concatenate(out, axis=0)


# -- checkpoints -----------------------------------------------------------------

_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, params: ModelParams, metadata: dict | None = None) -> None:
    """Write config, metadata and raw parameter arrays into one .npz container.

    Entries carry a fixed timestamp, so equal parameters give equal bytes.
    """
    meta = {"config": params.config.to_dict(), "metadata": metadata or {}}
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with zipfile.ZipFile(Path(path), "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(_META_KEY + ".json", date_time=(1980, 1, 1, 0, 0, 0)), blob)
        for name, array in params.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read(_META_KEY + ".json").decode("utf-8"))
        config = EncoderConfig.from_dict(meta["config"])
        arrays = {}
        for name in parameter_shapes(config):
            with zf.open(name + ".npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    return ModelParams(config, arrays), meta["metadata"]
