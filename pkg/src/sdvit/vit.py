"""Monolithic vision transformer.

Every block emits tokens of the same shape (m+1, d), so any block's class
token can be pushed through the shared final norm + classifier head to form
an intermediate classifier. The forward pass traces all of them, plus the
final block's attention weights, which is what the distillation loss and
the analysis instruments consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 6
    mlp_ratio: float = 2.0
    num_classes: int = 7

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "embed_dim",
                     "num_heads", "num_blocks", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def mlp_hidden(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size, "channels": self.channels,
            "patch_size": self.patch_size, "embed_dim": self.embed_dim,
            "num_heads": self.num_heads, "num_blocks": self.num_blocks,
            "mlp_ratio": self.mlp_ratio, "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


@dataclass
class ViTModel:
    config: ViTConfig
    params: dict[str, Tensor]

    def parameter_names(self) -> list[str]:
        return list(self.params.keys())

    def clone(self) -> "ViTModel":
        return ViTModel(self.config, {
            k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()
        })

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in self.params.items():
            np.copyto(v.data, snap[k])


@dataclass
class ForwardTrace:
    """Everything one forward pass exposes for losses and analysis."""

    config: ViTConfig
    logits: Tensor                      # (B, C), final classifier output
    block_cls: list[Tensor] = field(default_factory=list)  # n tensors (B, d)
    attention: np.ndarray | None = None  # (B, heads, m+1, m+1), final block


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with values beyond 2 sigma resampled."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def _uniform_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_model(config: ViTConfig, seed: int) -> ViTModel:
    """Deterministic initialization: same (config, seed) -> identical params."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    d = config.embed_dim
    patch_dim = config.channels * config.patch_size**2
    hidden = config.mlp_hidden

    p: dict[str, np.ndarray] = {}
    p["patch_embed.w"] = _uniform_linear(rng, patch_dim, d)
    p["patch_embed.b"] = np.zeros(d)
    p["cls_token"] = _trunc_normal(rng, (1, 1, d), 0.02)
    p["pos_embed"] = _trunc_normal(rng, (config.num_tokens, d), 0.02)
    for i in range(config.num_blocks):
        pre = f"block{i}."
        p[pre + "ln1.g"] = np.ones(d)
        p[pre + "ln1.b"] = np.zeros(d)
        p[pre + "attn.qkv_w"] = _uniform_linear(rng, d, 3 * d)
        p[pre + "attn.qkv_b"] = np.zeros(3 * d)
        p[pre + "attn.out_w"] = _uniform_linear(rng, d, d)
        p[pre + "attn.out_b"] = np.zeros(d)
        p[pre + "ln2.g"] = np.ones(d)
        p[pre + "ln2.b"] = np.zeros(d)
        p[pre + "mlp.fc1_w"] = _uniform_linear(rng, d, hidden)
        p[pre + "mlp.fc1_b"] = np.zeros(hidden)
        p[pre + "mlp.fc2_w"] = _uniform_linear(rng, hidden, d)
        p[pre + "mlp.fc2_b"] = np.zeros(d)
    p["final_norm.g"] = np.ones(d)
    p["final_norm.b"] = np.zeros(d)
    p["head.w"] = _uniform_linear(rng, d, config.num_classes)
    p["head.b"] = np.zeros(config.num_classes)

    return ViTModel(config, {k: Tensor(v, requires_grad=True) for k, v in p.items()})


def patchify(image, patch_size: int) -> Tensor:
    """(B,C,H,W) or (C,H,W) -> (B,m,C*p*p) or (m,C*p*p), patches row-major."""
    x = T.as_tensor(image)
    single = x.ndim == 3
    if single:
        x = T.reshape(x, (1, *x.shape))
    if x.ndim != 4:
        raise ShapeError(f"patchify expects (B,C,H,W) or (C,H,W), got {x.shape}")
    b, c, h, w = x.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"image dims {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = T.reshape(x, (b, c, gh, patch_size, gw, patch_size))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (b, gh * gw, c * patch_size * patch_size))
    if single:
        x = T.reshape(x, x.shape[1:])
    return x


def unpatchify(patches, channels: int, image_size: int, patch_size: int) -> Tensor:
    """Inverse of patchify; patchify -> unpatchify is the identity bitwise."""
    x = T.as_tensor(patches)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1, *x.shape))
    b, m, _ = x.shape
    g = image_size // patch_size
    if m != g * g:
        raise ShapeError(f"expected {g * g} patches for image size {image_size}, got {m}")
    x = T.reshape(x, (b, g, g, channels, patch_size, patch_size))
    x = T.transpose(x, (0, 3, 1, 4, 2, 5))
    x = T.reshape(x, (b, channels, image_size, image_size))
    if single:
        x = T.reshape(x, x.shape[1:])
    return x


def _linear(x2d: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x2d, w), b)


def head_logits(model: ViTModel, cls: Tensor) -> Tensor:
    """Shared classifier pipeline: final norm, then the head, on a (B,d) token.

    Intermediate class tokens go through the identical path as the final one,
    so every sub-model reuses the final classifier unchanged.
    """
    p = model.params
    normed = T.layer_norm(cls, p["final_norm.g"], p["final_norm.b"])
    return _linear(normed, p["head.w"], p["head.b"])


def _block(model: ViTModel, i: int, x: Tensor, batch: int) -> tuple[Tensor, Tensor]:
    """Pre-norm block: LN -> MHSA -> residual, LN -> MLP -> residual."""
    cfg = model.config
    p = model.params
    pre = f"block{i}."
    tok = cfg.num_tokens
    d = cfg.embed_dim
    heads = cfg.num_heads
    dh = d // heads

    h = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
    qkv = _linear(T.reshape(h, (batch * tok, d)), p[pre + "attn.qkv_w"], p[pre + "attn.qkv_b"])
    qkv = T.reshape(qkv, (batch, tok, 3, heads, dh))
    qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # (3, B, heads, tok, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (B, heads, tok, dh)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (batch * tok, d))
    out = _linear(ctx, p[pre + "attn.out_w"], p[pre + "attn.out_b"])
    x = T.add(x, T.reshape(out, (batch, tok, d)))

    h2 = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
    a = T.gelu(_linear(T.reshape(h2, (batch * tok, d)), p[pre + "mlp.fc1_w"], p[pre + "mlp.fc1_b"]))
    o = _linear(a, p[pre + "mlp.fc2_w"], p[pre + "mlp.fc2_b"])
    x = T.add(x, T.reshape(o, (batch, tok, d)))
    return x, attn


def forward(model: ViTModel, batch) -> ForwardTrace:
    """Run the full model on a (B,C,H,W) batch, tracing every block's class token."""
    cfg = model.config
    p = model.params
    x_in = T.as_tensor(batch)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if x_in.ndim != 4 or x_in.shape[1:] != expected:
        raise ShapeError(f"batch shape {x_in.shape} does not match (B,{expected})")
    b = x_in.shape[0]
    d = cfg.embed_dim

    patches = patchify(x_in, cfg.patch_size)  # (B, m, C*p*p)
    emb = _linear(T.reshape(patches, (b * cfg.num_patches, patches.shape[-1])),
                  p["patch_embed.w"], p["patch_embed.b"])
    tokens = T.reshape(emb, (b, cfg.num_patches, d))
    cls = T.add(T.zeros((b, 1, d)), p["cls_token"])  # broadcast expand
    x = T.add(T.concat([cls, tokens], axis=1), p["pos_embed"])

    block_cls: list[Tensor] = []
    attn_last: Tensor | None = None
    for i in range(cfg.num_blocks):
        x, attn_last = _block(model, i, x, b)
        if x.shape != (b, cfg.num_tokens, d):
            raise ShapeError(f"block {i} broke the monolithic shape contract: {x.shape}")
        block_cls.append(x[:, 0])

    logits = head_logits(model, block_cls[-1])
    return ForwardTrace(config=cfg, logits=logits, block_cls=block_cls,
                        attention=attn_last.data)


def sub_model_logits(model: ViTModel, trace: ForwardTrace, block_idx: int) -> Tensor:
    """Classifier logits from block block_idx's class token.

    At the last block this coincides bitwise with trace.logits: both run
    the identical final-norm + head pipeline on the same token.
    """
    n = len(trace.block_cls)
    if not 0 <= block_idx < n:
        raise IndexError(f"block index {block_idx} out of range [0, {n})")
    return head_logits(model, trace.block_cls[block_idx])


def attention_map(trace: ForwardTrace, example_idx: int) -> np.ndarray:
    """Final-block class-token attention over patches as an (H, W) map in [0,1].

    Head-averaged, min-max normalized (a constant row maps to all zeros),
    nearest-neighbor upsampled to image resolution.
    """
    if trace.attention is None:
        raise InputError("trace carries no attention weights")
    b = trace.attention.shape[0]
    if not 0 <= example_idx < b:
        raise IndexError(f"example index {example_idx} out of range [0, {b})")
    cfg = trace.config
    row = trace.attention[example_idx, :, 0, 1:].mean(axis=0)  # (m,)
    lo, hi = row.min(), row.max()
    if hi > lo:
        row = (row - lo) / (hi - lo)
    else:
        row = np.zeros_like(row)
    g = cfg.image_size // cfg.patch_size
    grid = row.reshape(g, g)
    return np.kron(grid, np.ones((cfg.patch_size, cfg.patch_size)))
