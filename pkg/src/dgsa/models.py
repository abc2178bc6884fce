"""Encoder classifiers built from the attention variants.

Block topology is pre-norm: ``x + Attn(RMSNorm(x))`` then
``x + FFN(RMSNorm(x))``, a final RMSNorm and a linear head.  Text models
mean-pool over non-padding positions; vision models prepend a class token and
read only its row.

Variant naming follows the usual pairs: ``vanilla`` is the Transformer / ViT
baseline, ``diff`` the differential baseline (DT / DViT), ``dgsa`` the gated
model (DGT / DGViT).
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import schema
from .attention import (AttentionParams, HeadLayout, diff_attn_forward, lambda_init_schedule,
                        mdgsa_forward, vanilla_mha_forward)
from .autograd import Tensor
from .errors import ConfigError, DataError, DimensionError, FormatError

VARIANTS = ("vanilla", "diff", "dgsa")
TASKS = ("text", "vision")
NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    variant: str = "dgsa"
    task: str = "text"
    depth: int = 2
    d_model: int = 64
    heads: int = 4
    ffn_expansion: float = 4.0
    ffn_activation: str = "auto"        # auto -> gelu for vanilla, swiglu otherwise
    dropout_p: float = 0.1
    n_dropout_layers: int = 1
    residual_in_attention: bool = False
    residual_source: str = "xwq"        # xwq | x
    lambda_init_mode: str = "schedule"  # schedule | fixed
    lambda_init_fixed: float = 0.8
    gate_depth: int = 1
    vocab_size: int = 64
    max_seq_len: int = 32
    image_size: int = 8
    patch_size: int = 2
    channels: int = 1
    n_classes: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.heads < 1 or self.d_model < 1:
            raise ConfigError("heads and d_model must be positive")
        div = self.heads if self.variant == "vanilla" else 2 * self.heads
        if self.d_model % div:
            raise ConfigError(f"d_model={self.d_model} must be divisible by {div} for {self.variant}")
        if self.ffn_activation not in ("auto", "swiglu", "gelu"):
            raise ConfigError(f"unknown ffn_activation {self.ffn_activation!r}")
        if self.ffn_expansion <= 0:
            raise ConfigError("ffn_expansion must be positive")
        if self.n_dropout_layers not in (1, 2):
            raise ConfigError("n_dropout_layers must be 1 or 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.gate_depth != 1:
            raise ConfigError(f"gate_depth={self.gate_depth} rejected: the gate is a single "
                              "linear layer followed by a sigmoid")
        if self.residual_source not in ("xwq", "x"):
            raise ConfigError(f"residual_source must be xwq or x, got {self.residual_source!r}")
        if self.lambda_init_mode not in ("schedule", "fixed"):
            raise ConfigError(f"lambda_init_mode must be schedule or fixed")
        if not 0.0 < self.lambda_init_fixed < 1.0:
            raise ConfigError("lambda_init_fixed must lie in (0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.task == "vision":
            if self.patch_size < 1 or self.image_size % self.patch_size:
                raise ConfigError(f"image_size={self.image_size} not divisible by "
                                  f"patch_size={self.patch_size}")
        elif self.vocab_size < 3 or self.max_seq_len < 1:
            raise ConfigError("text models need vocab_size >= 3 and max_seq_len >= 1")

    @property
    def activation(self) -> str:
        if self.ffn_activation != "auto":
            return self.ffn_activation
        return "gelu" if self.variant == "vanilla" else "swiglu"

    @property
    def ffn_hidden(self) -> int:
        """Post-split SwiGLU width m, or the GeLU hidden width."""
        if self.activation == "swiglu":
            return int(math.floor(self.ffn_expansion * self.d_model / 2 + 1e-9))
        return int(math.floor(self.ffn_expansion * self.d_model + 1e-9))

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def layout(self) -> HeadLayout | None:
        return None if self.variant == "vanilla" else HeadLayout(self.d_model, self.heads)

    def layer_lambda(self, l: int) -> float:
        if self.lambda_init_mode == "fixed":
            return self.lambda_init_fixed
        return lambda_init_schedule(l)

    def canonical(self) -> str:
        return schema.canonical(self)

    def hash(self) -> str:
        return schema.digest(self.canonical())


@dataclass
class Batch:
    """Token ids (B, N) with a keep-mask, or images (B, C, H, W); labels (B,)."""

    inputs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray | None = None
    noise: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


@dataclass
class LayerParams:
    attn_norm: Tensor
    attn: AttentionParams
    ffn_norm: Tensor
    ffn: dict


@dataclass
class LayerStack:
    cfg: ModelConfig
    params: dict = field(default_factory=dict)   # name -> Tensor, declaration order
    groups: dict = field(default_factory=dict)   # name -> group label
    layers: list = field(default_factory=list)

    def parameters(self):
        return list(self.params.items())

    def no_decay(self) -> set:
        return {n for n, g in self.groups.items() if g in ("bias", "norm")}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "LayerStack":
        """Copy with every parameter cast to ``dtype`` (e.g. float64 for gradchecks)."""
        new_cfg = ModelConfig(**{**self.cfg.__dict__, "dtype": np.dtype(dtype).name})
        clone = build_model(new_cfg, None)
        for name, t in self.params.items():
            clone.params[name].data[...] = t.data
        return clone


# -- building ----------------------------------------------------------------

class _Builder:
    def __init__(self, stack: LayerStack, rng, dtype):
        self.stack, self.rng, self.dtype = stack, rng, dtype

    def _add(self, name, shape, group, init):
        if self.rng is None:
            data = np.ones(shape) if init == "ones" else np.zeros(shape)
        elif init == "uniform":
            bound = 1.0 / math.sqrt(shape[0])
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "embed":
            bound = 1.0 / math.sqrt(shape[-1])
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "normal0.1":
            data = self.rng.normal(0.0, 0.1, size=shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        t = Tensor(np.ascontiguousarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self.stack.params[name] = t
        self.stack.groups[name] = group
        return t

    def matrix(self, name, fan_in, fan_out, group="matrix"):
        return self._add(name, (fan_in, fan_out), group, "uniform")


def build_model(cfg: ModelConfig, rng: np.random.Generator | None) -> LayerStack:
    """Allocate and initialise every parameter in declaration order.

    ``rng=None`` allocates zeros/ones only (used when loading checkpoints).
    Matrices draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings and the
    class token from U(-1/sqrt(d_model), 1/sqrt(d_model)); lambda vectors from
    N(0, 0.1^2); the gate and all biases start at zero; norm gains at one.
    """
    cfg.validate()
    stack = LayerStack(cfg=cfg)
    b = _Builder(stack, rng, np.dtype(cfg.dtype))
    d = cfg.d_model
    if cfg.task == "text":
        b._add("tok_emb", (cfg.vocab_size, d), "embedding", "embed")
        b._add("pos_emb", (cfg.max_seq_len, d), "embedding", "embed")
    else:
        b.matrix("patch.W", cfg.channels * cfg.patch_size ** 2, d)
        b._add("patch.b", (d,), "bias", "zeros")
        b._add("cls_token", (d,), "embedding", "embed")
        b._add("pos_emb", (cfg.n_patches + 1, d), "embedding", "embed")

    for l in range(1, cfg.depth + 1):
        p = f"layers.{l}."
        attn_norm = b._add(p + "attn_norm", (d,), "norm", "ones")
        W = {k: b.matrix(p + f"attn.{k}", d, d, "attention") for k in ("W_Q", "W_K", "W_V", "W_O")}
        extra = {}
        if cfg.variant == "dgsa":
            extra["W_g"] = b._add(p + "attn.W_g", (d, cfg.heads), "gate", "zeros")
            extra["b_g"] = b._add(p + "attn.b_g", (cfg.heads,), "bias", "zeros")
        if cfg.variant in ("dgsa", "diff"):
            dh = cfg.layout.d_half
            extra["norm_gain"] = b._add(p + "attn.norm_gain", (2 * dh,), "norm", "ones")
        if cfg.variant == "diff":
            for k in ("lambda_q1", "lambda_k1", "lambda_q2", "lambda_k2"):
                extra[k] = b._add(p + f"attn.{k}", (dh,), "lambda", "normal0.1")
        attn = AttentionParams(**W, **extra, lambda_init=cfg.layer_lambda(l))
        ffn_norm = b._add(p + "ffn_norm", (d,), "norm", "ones")
        m = cfg.ffn_hidden
        if cfg.activation == "swiglu":
            ffn = {"up": b.matrix(p + "ffn.up", d, 2 * m, "ffn"),
                   "down": b.matrix(p + "ffn.down", m, d, "ffn")}
        else:
            ffn = {"W1": b.matrix(p + "ffn.W1", d, m, "ffn"),
                   "W2": b.matrix(p + "ffn.W2", m, d, "ffn")}
        stack.layers.append(LayerParams(attn_norm, attn, ffn_norm, ffn))

    b._add("final_norm", (d,), "norm", "ones")
    b.matrix("head.W", d, cfg.n_classes, "head")
    b._add("head.b", (cfg.n_classes,), "bias", "zeros")
    return stack


def count_params(stack: LayerStack) -> tuple[int, dict]:
    """Exact learnable scalar count and its breakdown per parameter group."""
    groups: dict[str, int] = {}
    for name, t in stack.params.items():
        g = stack.groups[name]
        groups[g] = groups.get(g, 0) + t.size
    return sum(groups.values()), groups


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``; must agree with :func:`count_params`."""
    d, L, h, C = cfg.d_model, cfg.depth, cfg.heads, cfg.n_classes
    if cfg.task == "text":
        total = cfg.vocab_size * d + cfg.max_seq_len * d
    else:
        total = cfg.channels * cfg.patch_size ** 2 * d + d + d + (cfg.n_patches + 1) * d
    per_layer = 2 * d + 4 * d * d
    if cfg.variant != "vanilla":
        dh = d // (2 * h)
        per_layer += 2 * dh
        per_layer += d * h + h if cfg.variant == "dgsa" else 4 * dh
    m = cfg.ffn_hidden
    per_layer += 3 * d * m if cfg.activation == "swiglu" else 2 * d * m
    return total + L * per_layer + d + d * C + C


# -- forward -----------------------------------------------------------------

def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(…, C, H, W) -> (…, n_patches, C*p*p); row-major patches, channel-major inside."""
    *lead, C, H, W = image.shape
    p = patch_size
    if p < 1 or H % p or W % p:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {p}")
    x = image.reshape(*lead, C, H // p, p, W // p, p)
    n = len(lead)
    x = x.transpose(*range(n), n + 1, n + 3, n, n + 2, n + 4)
    return x.reshape(*lead, (H // p) * (W // p), C * p * p)


def unpatchify(patches: np.ndarray, channels: int, image_size: int, patch_size: int) -> np.ndarray:
    *lead, _, _ = patches.shape
    p, g = patch_size, image_size // patch_size
    x = patches.reshape(*lead, g, g, channels, p, p)
    n = len(lead)
    x = x.transpose(*range(n), n + 2, n, n + 3, n + 1, n + 4)
    return x.reshape(*lead, channels, image_size, image_size)


def swiglu_ffn(x: Tensor, up: Tensor, down: Tensor, dropout_p=0.0, n_dropout=1,
               training=False, rng=None) -> Tensor:
    """down( a * silu(b) ) where [a, b] = x @ up.

    Dropout slot 1 sits after the gated activation; slot 2 (``n_dropout=2``)
    additionally after the up-projection.
    """
    if up.shape[0] != x.shape[-1] or up.shape[1] != 2 * down.shape[0]:
        raise DimensionError(f"swiglu weights {up.shape}/{down.shape} do not fit input {x.shape}")
    m = down.shape[0]
    u = x @ up
    if n_dropout == 2:
        u = ag.dropout(u, dropout_p, training, rng)
    z = u[..., :m] * ag.silu(u[..., m:])
    z = ag.dropout(z, dropout_p, training, rng)
    return z @ down


def gelu_ffn(x: Tensor, W1: Tensor, W2: Tensor, dropout_p=0.0, n_dropout=1,
             training=False, rng=None) -> Tensor:
    if W1.shape[0] != x.shape[-1] or W1.shape[1] != W2.shape[0]:
        raise DimensionError(f"gelu weights {W1.shape}/{W2.shape} do not fit input {x.shape}")
    u = x @ W1
    if n_dropout == 2:
        u = ag.dropout(u, dropout_p, training, rng)
    z = ag.dropout(ag.gelu(u), dropout_p, training, rng)
    return z @ W2


def _embed(stack: LayerStack, batch: Batch) -> tuple[Tensor, np.ndarray | None]:
    cfg, P = stack.cfg, stack.params
    dtype = np.dtype(cfg.dtype)
    if cfg.task == "text":
        ids = np.asarray(batch.inputs)
        if ids.ndim != 2:
            raise DimensionError(f"text batch must be (B, N) token ids, got {ids.shape}")
        B, N = ids.shape
        if N > cfg.max_seq_len:
            raise DimensionError(f"sequence length {N} exceeds max_seq_len {cfg.max_seq_len}")
        x = ag.embedding(P["tok_emb"], ids)
        x = x + ag.expand(P["pos_emb"][:N], (B, N, cfg.d_model))
        mask = None if batch.mask is None else np.asarray(batch.mask, dtype=bool)
        if mask is not None and mask.all():
            mask = None
        return x, mask
    images = np.asarray(batch.inputs, dtype=dtype)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"vision batch must be (B, {expected}), got {images.shape}")
    B = images.shape[0]
    patches = Tensor(patchify(images, cfg.patch_size))
    x = ag.add_bias(patches @ P["patch.W"], P["patch.b"])
    cls = ag.expand(ag.reshape(P["cls_token"], (1, 1, cfg.d_model)), (B, 1, cfg.d_model))
    x = ag.concat([cls, x], axis=1)
    x = x + ag.expand(P["pos_emb"], x.shape)
    return x, None


def _attention(cfg: ModelConfig, layer: LayerParams, x: Tensor, l: int, key_mask):
    a = layer.attn
    if cfg.variant == "vanilla":
        return vanilla_mha_forward(x, a.W_Q, a.W_K, a.W_V, a.W_O, cfg.heads, key_mask=key_mask)
    if cfg.variant == "diff":
        return diff_attn_forward(x, a, cfg.layout, l, key_mask=key_mask)
    return mdgsa_forward(x, a, cfg.layout, l, residual=cfg.residual_in_attention,
                         residual_source=cfg.residual_source, lambda_l=a.lambda_init,
                         key_mask=key_mask)


def encode(stack: LayerStack, batch: Batch, training=False, rng=None, capture=None) -> Tensor:
    """Final-norm token features (B, N, d_model); appends AttentionMaps to ``capture``."""
    cfg = stack.cfg
    x, key_mask = _embed(stack, batch)
    for l, layer in enumerate(stack.layers, 1):
        y, maps = _attention(cfg, layer, ag.rmsnorm(x, layer.attn_norm, NORM_EPS), l, key_mask)
        if capture is not None:
            capture.append(maps)
        x = x + y
        h = ag.rmsnorm(x, layer.ffn_norm, NORM_EPS)
        if cfg.activation == "swiglu":
            f = swiglu_ffn(h, layer.ffn["up"], layer.ffn["down"], cfg.dropout_p,
                           cfg.n_dropout_layers, training, rng)
        else:
            f = gelu_ffn(h, layer.ffn["W1"], layer.ffn["W2"], cfg.dropout_p,
                         cfg.n_dropout_layers, training, rng)
        x = x + f
    return ag.rmsnorm(x, stack.params["final_norm"], NORM_EPS)


def pool(stack: LayerStack, feats: Tensor, batch: Batch) -> Tensor:
    if stack.cfg.task == "vision":
        return feats[:, 0, :]
    B, N, d = feats.shape
    if batch.mask is None or np.asarray(batch.mask).all():
        return ag.mean(feats, axis=1)
    keep = np.asarray(batch.mask, dtype=feats.dtype)
    counts = keep.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise DataError("a sequence in the batch has no non-padding tokens")
    weights = Tensor(np.broadcast_to((keep / counts)[..., None], (B, N, d)).copy())
    return ag.tsum(feats * weights, axis=1)


def model_forward(stack: LayerStack, batch: Batch, training=False, rng=None, capture=None) -> Tensor:
    """Logits (B, n_classes). ``training`` switches dropout on; ``rng`` drives it."""
    feats = encode(stack, batch, training, rng, capture)
    P = stack.params
    return ag.add_bias(pool(stack, feats, batch) @ P["head.W"], P["head.b"])


# -- checkpoints -------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"DGSACKPT"
#   u32       format version (1)
#   u32 + n   model config, canonical key-sorted text (UTF-8)
#   64 bytes  sha256 hex of that text
#   u32 + n   full run config text (UTF-8, informational)
#   u32       tensor count, then per tensor in declaration order:
#             u16 + n name (UTF-8), u8 ndim, u32 * ndim extents, float32 data

MAGIC = b"DGSACKPT"
VERSION = 1


def save_checkpoint(path, stack: LayerStack, run_text: str = "") -> None:
    buf = io.BytesIO()
    model_text = stack.cfg.canonical().encode("utf-8")
    run_bytes = run_text.encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(model_text)) + model_text)
    buf.write(schema.digest(stack.cfg.canonical()).encode("ascii"))
    buf.write(struct.pack("<I", len(run_bytes)) + run_bytes)
    buf.write(struct.pack("<I", len(stack.params)))
    for name, t in stack.params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"checkpoint truncated while reading {what}", self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path):
    """Parse a checkpoint file into (model canonical text, stored hash, run text, tensors)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(8, "magic") != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    (n,) = r.unpack("<I", "config length")
    model_text = r.take(n, "model config").decode("utf-8")
    stored_hash = r.take(64, "config hash").decode("ascii")
    (n,) = r.unpack("<I", "run config length")
    run_text = r.take(n, "run config").decode("utf-8")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (nl,) = r.unpack("<H", "name length")
        name = r.take(nl, "tensor name").decode("utf-8")
        (ndim,) = r.unpack("<B", "ndim")
        shape = r.unpack(f"<{ndim}I", "shape")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(r.take(4 * size, f"data of {name}"), dtype="<f4").reshape(shape)
        tensors[name] = data
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return model_text, stored_hash, run_text, tensors


def load_checkpoint(path) -> tuple[LayerStack, str]:
    """Rebuild the model stored at ``path``; returns (stack, run config text)."""
    model_text, stored_hash, run_text, tensors = read_checkpoint(path)
    actual = schema.digest(model_text)
    if actual != stored_hash:
        raise FormatError(f"config hash mismatch: stored {stored_hash}, computed {actual}")
    cfg = schema.build(ModelConfig, schema.parse_lines(model_text, str(path)))
    stack = build_model(cfg, None)
    if list(tensors) != list(stack.params):
        raise FormatError("checkpoint tensors do not match the model's declaration order")
    for name, data in tensors.items():
        target = stack.params[name]
        if data.shape != target.shape:
            raise FormatError(f"tensor {name} has shape {data.shape}, model expects {target.shape}")
        target.data[...] = data
    return stack, run_text
