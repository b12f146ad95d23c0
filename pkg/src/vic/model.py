"""Vision Conformer and the plain ViT baseline.

Both networks share patch tokenisation, the CLS token, learned positional
embeddings, multi-head self-attention and the linear classification head.
They differ only in the encoder block: the ViC block sends the patch tokens
through reverse embedding, spatial reconstruction, a small CNN and patch
re-embedding before the MLP.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from vic import ops
from vic.config import ConfigError, ModelConfig
from vic.tensor import ShapeError, Tensor


# -- initialisation -------------------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float, dtype=np.float32) -> np.ndarray:
    """Normal samples with ``std``, redrawn until all lie within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def _he(rng, shape, fan_in, dtype):
    return Tensor(trunc_normal(rng, shape, math.sqrt(2.0 / fan_in), dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


# -- modules --------------------------------------------------------------

class Module:
    """Minimal parameter container; parameters are attributes holding grad-tracking tensors."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng, dtype=np.float32, bias: bool = True):
        self.weight = _he(rng, (din, dout), din, dtype)
        self.bias = _zeros((dout,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = _zeros((d,), dtype)
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self._eps)


class Conv2d(Module):
    """Stride-1 convolution with same zero padding."""

    def __init__(self, cin: int, cout: int, k: int, rng, dtype=np.float32):
        self.kernel = _he(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.bias = _zeros((cout,), dtype)
        self._pad = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.kernel, self.bias, stride=1, padding=self._pad)


class MHSA(Module):
    """Multi-head self-attention with bias-free Q/K/V/output projections.

    Scores are scaled by ``1/sqrt(d_head)``. The most recent attention weights
    are kept on ``last_attention`` (shape ``B x heads x N x N``) for inspection.
    """

    def __init__(self, d: int, heads: int, rng, dtype=np.float32):
        if d % heads:
            raise ConfigError(f"embed_dim {d} is not divisible by {heads} heads")
        self.w_q = _he(rng, (d, d), d, dtype)
        self.w_k = _he(rng, (d, d), d, dtype)
        self.w_v = _he(rng, (d, d), d, dtype)
        self.w_o = _he(rng, (d, d), d, dtype)
        self._heads = heads
        self.last_attention: np.ndarray | None = None

    def forward(self, z: Tensor) -> Tensor:
        return mhsa(z, self.w_q, self.w_k, self.w_v, self.w_o, self._heads, hook=self)


def mhsa(z: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: int, hook=None) -> Tensor:
    B, N, d = z.shape
    dh = d // heads

    def split(t):  # B x N x d -> B x heads x N x dh
        return ops.permute(ops.reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(ops.linear(z, w_q))
    k = split(ops.linear(z, w_k))
    v = split(ops.linear(z, w_v))
    scores = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ops.softmax(scores, axis=-1)
    if hook is not None:
        hook.last_attention = attn.data
    ctx = ops.reshape(ops.permute(ops.matmul(attn, v), (0, 2, 1, 3)), (B, N, d))
    return ops.linear(ctx, w_o)


class MLP(Module):
    def __init__(self, d: int, hidden: int, rng, dtype=np.float32):
        self.fc1 = Linear(d, hidden, rng, dtype)
        self.fc2 = Linear(hidden, d, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


# -- patch layout ---------------------------------------------------------

def patchify(images: Tensor, patch_h: int, patch_w: int) -> Tensor:
    """``B x C x H x W`` -> ``B x T x (C*P_h*P_w)``.

    Patches are ordered left-to-right, top-to-bottom; each patch is flattened
    channel-major, then row-major.
    """
    B, C, H, W = images.shape
    if H % patch_h or W % patch_w:
        raise ShapeError(f"image {H}x{W} is not divisible into {patch_h}x{patch_w} patches")
    gh, gw = H // patch_h, W // patch_w
    x = ops.reshape(images, (B, C, gh, patch_h, gw, patch_w))
    x = ops.permute(x, (0, 2, 4, 1, 3, 5))
    return ops.reshape(x, (B, gh * gw, C * patch_h * patch_w))


def unpatchify(patches: Tensor, channels: int, image_h: int, image_w: int, patch_h: int, patch_w: int) -> Tensor:
    B, T, _ = patches.shape
    gh, gw = image_h // patch_h, image_w // patch_w
    if T != gh * gw:
        raise ShapeError(f"{T} patches do not tile a {gh}x{gw} grid")
    x = ops.reshape(patches, (B, gh, gw, channels, patch_h, patch_w))
    x = ops.permute(x, (0, 3, 1, 4, 2, 5))
    return ops.reshape(x, (B, channels, image_h, image_w))


def reconstruct(patches: Tensor, image_h: int, image_w: int) -> Tensor:
    """Place ``B x T x P_h x P_w`` patches back on the image grid -> ``B x 1 x H x W``."""
    B, T, ph, pw = patches.shape
    if image_h % ph or image_w % pw or T != (image_h // ph) * (image_w // pw):
        raise ShapeError(f"{T} patches of {ph}x{pw} do not tile a {image_h}x{image_w} image")
    return unpatchify(ops.reshape(patches, (B, T, ph * pw)), 1, image_h, image_w, ph, pw)


# -- blocks ---------------------------------------------------------------

class PatchPath(Module):
    """Reverse embedding -> reconstruction -> CNN -> patch re-embedding."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        p = cfg.patch_h * cfg.patch_w
        self.reverse_embed = Linear(cfg.embed_dim, p, rng, dtype)
        self.convs = [
            Conv2d(1 if i == 0 else cfg.conv_filters, cfg.conv_filters, cfg.conv_kernel, rng, dtype)
            for i in range(cfg.conv_layers)
        ]
        self.re_embed = Linear(p * cfg.conv_filters, cfg.embed_dim, rng, dtype)
        self._cfg = cfg

    def reverse(self, z_patch: Tensor) -> Tensor:
        """``B x T x d`` -> ``B x T x P_h x P_w``."""
        B, T, _ = z_patch.shape
        return ops.reshape(self.reverse_embed(z_patch), (B, T, self._cfg.patch_h, self._cfg.patch_w))

    def cnn(self, image: Tensor) -> Tensor:
        for conv in self.convs:
            image = ops.gelu(conv(image))
        return image

    def extract_embed(self, fmap: Tensor) -> Tensor:
        """``B x F x H x W`` -> ``B x T x d`` over the same patch grid as the input."""
        return self.re_embed(patchify(fmap, self._cfg.patch_h, self._cfg.patch_w))

    def forward(self, z_patch: Tensor) -> Tensor:
        image = reconstruct(self.reverse(z_patch), self._cfg.image_h, self._cfg.image_w)
        return self.extract_embed(self.cnn(image))


class VicBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.ln1 = LayerNorm(cfg.embed_dim, dtype)
        self.attn = MHSA(cfg.embed_dim, cfg.num_heads, rng, dtype)
        self.ln2 = LayerNorm(cfg.embed_dim, dtype)
        self.patch_path = PatchPath(cfg, rng, dtype)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_hidden, rng, dtype)
        self._residual = cfg.patch_residual
        self.last_pre_mlp: np.ndarray | None = None

    def forward(self, z: Tensor) -> Tensor:
        a = ops.add(self.attn(self.ln1(z)), z)
        b = self.ln2(a)
        n = b.shape[1]
        b_cls = ops.slice(b, 1, 0, 1)
        path = self.patch_path(ops.slice(b, 1, 1, n))
        skip = b if self._residual == "normed" else z
        z_prime = ops.add(ops.concat([b_cls, path], axis=1), skip)
        self.last_pre_mlp = z_prime.data
        return ops.add(self.mlp(z_prime), z_prime)


class VitBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.ln1 = LayerNorm(cfg.embed_dim, dtype)
        self.attn = MHSA(cfg.embed_dim, cfg.num_heads, rng, dtype)
        self.ln2 = LayerNorm(cfg.embed_dim, dtype)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_hidden, rng, dtype)

    def forward(self, z: Tensor) -> Tensor:
        a = ops.add(self.attn(self.ln1(z)), z)
        return ops.add(self.mlp(self.ln2(a)), a)


BLOCKS = {"vic": VicBlock, "vit": VitBlock}


class VisionModel(Module):
    """Patch embedding, CLS token, ``num_blocks`` encoder blocks and a linear head."""

    def __init__(self, cfg: ModelConfig, kind: str = "vic", seed: int = 0, dtype=np.float32):
        if kind not in BLOCKS:
            raise ConfigError(f"unknown model kind {kind!r}; choose from {sorted(BLOCKS)}")
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.kind = kind
        d, T = cfg.embed_dim, cfg.num_patches
        self.patch_embed = Linear(cfg.patch_dim, d, rng, dtype)
        self.cls_token = Tensor(trunc_normal(rng, (d,), 0.02, dtype), requires_grad=True)
        self.pos_embed = Tensor(trunc_normal(rng, (T + 1, d), 0.02, dtype), requires_grad=True)
        self.blocks = [BLOCKS[kind](cfg, rng, dtype) for _ in range(cfg.num_blocks)]
        self.head = Linear(d, cfg.num_classes, rng, dtype)
        # zero head as in ViT: fresh models start from uniform predictions
        self.head.weight.data[...] = 0.0

    def embed(self, images: Tensor) -> Tensor:
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.image_channels, cfg.image_h, cfg.image_w):
            raise ShapeError(
                f"expected images B x {cfg.image_channels} x {cfg.image_h} x {cfg.image_w}, got {images.shape}"
            )
        return embed_tokens(patchify(images, cfg.patch_h, cfg.patch_w), self.patch_embed, self.pos_embed, self.cls_token)

    def forward(self, images: Tensor) -> Tensor:
        z = self.embed(images)
        for block in self.blocks:
            z = block(z)
        cls = ops.reshape(ops.slice(z, 1, 0, 1), (z.shape[0], z.shape[2]))
        return self.head(cls)


def embed_tokens(patches: Tensor, proj: Linear, pos_embed: Tensor, cls_token: Tensor) -> Tensor:
    """Project patches to ``d``, prepend the CLS token and add positional embeddings."""
    B, T, p = patches.shape
    if proj.weight.shape[0] != p:
        raise ShapeError(f"patch length {p} does not match projection input {proj.weight.shape[0]}")
    if pos_embed.shape[0] != T + 1:
        raise ShapeError(f"positional embedding covers {pos_embed.shape[0]} tokens, need {T + 1}")
    tokens = proj(patches)
    d = tokens.shape[2]
    cls = ops.add(ops.reshape(cls_token, (1, 1, d)), Tensor(np.zeros((B, 1, d), dtype=tokens.dtype)))
    return ops.add(ops.concat([cls, tokens], axis=1), pos_embed)


# -- parameter accounting -------------------------------------------------

def param_count(cfg: ModelConfig, kind: str = "vic") -> int:
    """Closed-form trainable-scalar count."""
    d = cfg.embed_dim
    lin = lambda i, o: i * o + o  # noqa: E731
    block = 2 * (2 * d) + 4 * d * d + lin(d, cfg.mlp_hidden) + lin(cfg.mlp_hidden, d)
    if kind == "vic":
        block += patch_path_count(cfg)
    elif kind != "vit":
        raise ConfigError(f"unknown model kind {kind!r}")
    embed = lin(cfg.patch_dim, d) + d + (cfg.num_patches + 1) * d
    return embed + cfg.num_blocks * block + lin(d, cfg.num_classes)


def patch_path_count(cfg: ModelConfig) -> int:
    d, p, f, k = cfg.embed_dim, cfg.patch_h * cfg.patch_w, cfg.conv_filters, cfg.conv_kernel
    convs = (1 * f * k * k + f) + (cfg.conv_layers - 1) * (f * f * k * k + f)
    return (d * p + p) + convs + (p * f * d + d)
