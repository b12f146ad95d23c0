"""Finite-difference checks for every registered op and both encoder blocks."""

from __future__ import annotations

from typing import Callable

import numpy as np

from vic import ops
from vic.config import ModelConfig
from vic.gradcheck import grad_check_many
from vic.model import VicBlock, VisionModel, VitBlock
from vic.tensor import Tensor

TINY = dict(image_h=4, image_w=4, image_channels=1, patch_h=2, patch_w=2, embed_dim=8,
            num_blocks=1, num_heads=2, conv_layers=2, conv_filters=3, conv_kernel=3,
            mlp_hidden=16, num_classes=3)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def _leaf(rng, *shape, positive=False):
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    return Tensor(x, requires_grad=True)


def _weighted(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    # fixed random weighting gives every output coordinate a distinct O(1) cotangent
    w = Tensor(rng.standard_normal(out.shape))
    return lambda o: ops.sum(ops.mul(o, w))


def _case(rng, fn: Callable[..., Tensor], *inputs: Tensor) -> float:
    weight = _weighted(fn(*inputs), rng)
    return grad_check_many(lambda: weight(fn(*inputs)), list(inputs))


def _ce_case(rng) -> float:
    x = _leaf(rng, 4, 5)
    return grad_check_many(lambda: ops.cross_entropy_logits(x, [1, 0, 3, 3]), [x])


def _block_case(rng, block_cls, **overrides) -> float:
    cfg = tiny_config(**overrides)
    block = block_cls(cfg, np.random.default_rng(rng.integers(1 << 31)), np.float64)
    z = _leaf(rng, 2, cfg.num_patches + 1, cfg.embed_dim)
    params = block.parameters()
    # break the LN/bias symmetry of a fresh block so no gradient is identically tiny
    for p in params:
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    weight = _weighted(block(z), rng)
    return grad_check_many(lambda: weight(block(z)), [z] + params)


def _model_case(rng, kind: str) -> float:
    cfg = tiny_config(num_blocks=2)
    model = VisionModel(cfg, kind, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    images = Tensor(rng.random((3, 1, cfg.image_h, cfg.image_w)))
    labels = np.array([0, 2, 1])
    return grad_check_many(lambda: ops.cross_entropy_logits(model(images), labels), model.parameters())


def op_cases(rng) -> dict[str, Callable[[], float]]:
    L = lambda *s, **kw: _leaf(rng, *s, **kw)  # noqa: E731
    return {
        "add": lambda: _case(rng, ops.add, L(3, 4), L(4)),
        "sub": lambda: _case(rng, ops.sub, L(2, 1, 4), L(3, 1)),
        "mul": lambda: _case(rng, ops.mul, L(3, 4), L(3, 1)),
        "scale": lambda: _case(rng, lambda x: ops.scale(x, -2.5), L(3, 4)),
        "sum": lambda: _case(rng, lambda x: ops.sum(x, axis=1, keepdims=True), L(2, 3, 4)),
        "mean": lambda: _case(rng, lambda x: ops.mean(x, axis=(0, 2)), L(2, 3, 4)),
        "matmul": lambda: _case(rng, ops.matmul, L(2, 3, 4), L(4, 5)),
        "linear": lambda: _case(rng, ops.linear, L(2, 3, 4), L(4, 5), L(5)),
        "reshape": lambda: _case(rng, lambda x: ops.reshape(x, (4, 6)), L(2, 3, 4)),
        "permute": lambda: _case(rng, lambda x: ops.permute(x, (2, 0, 1)), L(2, 3, 4)),
        "concat": lambda: _case(rng, lambda a, b: ops.concat([a, b], axis=1), L(2, 1, 3), L(2, 4, 3)),
        "slice": lambda: _case(rng, lambda x: ops.slice(x, 1, 1, 3), L(2, 4, 3)),
        "flatten_trailing": lambda: _case(rng, lambda x: ops.flatten_trailing(x, 1), L(2, 3, 4)),
        "softmax": lambda: _case(rng, lambda x: ops.softmax(x, axis=-1), L(3, 5)),
        "gelu": lambda: _case(rng, ops.gelu, L(4, 5)),
        "layer_norm": lambda: _case(rng, ops.layer_norm, L(3, 6), L(6), L(6)),
        "conv2d": lambda: max(
            _case(rng, lambda x, k, b: ops.conv2d(x, k, b, 1, 1), L(2, 2, 5, 5), L(3, 2, 3, 3), L(3)),
            _case(rng, lambda x, k, b: ops.conv2d(x, k, b, 2, 0), L(1, 2, 7, 7), L(2, 2, 3, 3), L(2)),
        ),
        "cross_entropy_logits": lambda: _ce_case(rng),
        "vic_block": lambda: _block_case(rng, VicBlock),
        "vit_block": lambda: _block_case(rng, VitBlock),
        "vic_model": lambda: _model_case(rng, "vic"),
        "vit_model": lambda: _model_case(rng, "vit"),
    }


def run_suite(seed: int = 0, names=None) -> dict[str, float]:
    """Return the max relative gradient error per check."""
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    missing = [op for op in ops.REGISTRY if op not in cases]
    if missing:
        raise RuntimeError(f"gradient suite lacks cases for ops: {missing}")
    return {name: fn() for name, fn in cases.items() if names is None or name in names}
