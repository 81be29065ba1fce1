"""Two-stream bridge from [MM] hidden states to denoiser conditions.

Textual branch: learnable queries read the hidden states (Q-Former), then a
bidirectional interaction with the source-image features yields the text
condition ``f_txt`` and a per-patch residual ``v_txt`` for the denoiser input.
Image branch: a mapper squeezes the hidden states into one embedding that is
supervised against an image embedding, then expands it to ``N`` tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .comprehension import VocabSpec, to_unit
from .nn import LayerNorm, Linear, MLP, Module, normal
from .tensor import Parameter, ShapeError, Tensor


@dataclass
class BridgeConfig:
    d_llm: int = 64
    r: int = 4
    d_vision: int = 32
    d_cond: int = 32
    t_q: int = 8
    n_img_tokens: int = 4
    d_model: int = 64  # denoiser width, target of v_txt
    mapper_hidden: int = 128
    seed: int = 0


class FrozenEmbedders(Module):
    """Fixed random projections standing in for the CLIP text and image encoders."""

    POOL = 8

    def __init__(self, vocab_size: int, t_q: int, d_cond: int, image_size: int = 32, seed: int = 0):
        rng = np.random.default_rng([seed, 7])
        cells = (image_size // self.POOL) ** 2 * 3
        self.t_q, self.d_cond = t_q, d_cond
        self.text_proj = Parameter(normal(rng, (vocab_size, t_q * d_cond), 0.35), frozen=True)
        self.image_proj = Parameter(normal(rng, (cells, d_cond), 0.25), frozen=True)

    def text_embed(self, instructions: list[str], vocab: VocabSpec) -> np.ndarray:
        """Bag-of-words counts -> (B, t_q, d_cond)."""
        counts = np.zeros((len(instructions), vocab.base_size))
        for i, text in enumerate(instructions):
            np.add.at(counts[i], vocab.encode(text), 1.0)
        return (counts @ self.text_proj.data).reshape(len(instructions), self.t_q, self.d_cond)

    def image_embed(self, images: np.ndarray) -> np.ndarray:
        """Block-averaged pixels -> (B, 1, d_cond)."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        x = to_unit(images)
        b, h, w, c = x.shape
        p = self.POOL
        pooled = x.reshape(b, h // p, p, w // p, p, c).mean(axis=(2, 4)).reshape(b, -1)
        return (pooled @ self.image_proj.data)[:, None, :]


class CrossAttention(Module):
    """Single-head attention of ``queries`` over ``context`` with a residual-ready output projection."""

    def __init__(self, d_q: int, d_ctx: int, d_att: int, d_out: int, rng):
        self.wq = Linear(d_q, d_att, rng, bias=False)
        self.wk = Linear(d_ctx, d_att, rng, bias=False)
        self.wv = Linear(d_ctx, d_att, rng, bias=False)
        self.wo = Linear(d_att, d_out, rng, bias=False)

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        return self.wo(T.scaled_dot_attention(self.wq(queries), self.wk(context), self.wv(context)))


class QFormer(Module):
    def __init__(self, cfg: BridgeConfig, rng):
        self.query = Parameter(normal(rng, (cfg.t_q, cfg.d_cond), 0.1))
        self.cross = CrossAttention(cfg.d_cond, cfg.d_llm, cfg.d_cond, cfg.d_cond, rng)
        self.norm = LayerNorm(cfg.d_cond)
        self.ffn = MLP(cfg.d_cond, 4 * cfg.d_cond, cfg.d_cond, rng)

    def __call__(self, h: Tensor) -> Tensor:
        """h: (B, r, d_llm) -> q': (B, t_q, d_cond)."""
        x = self.query + self.cross(self.query, h)
        return x + self.ffn(self.norm(x))


class BIM(Module):
    def __init__(self, cfg: BridgeConfig, rng):
        self.txt_proj = Linear(cfg.d_cond, cfg.d_cond, rng)
        self.txt_from_img = CrossAttention(cfg.d_cond, cfg.d_vision, cfg.d_cond, cfg.d_cond, rng)
        self.img_proj = Linear(cfg.d_vision, cfg.d_model, rng)
        self.img_from_txt = CrossAttention(cfg.d_vision, cfg.d_cond, cfg.d_cond, cfg.d_model, rng)

    def __call__(self, img_feats: Tensor, q_prime: Tensor) -> tuple[Tensor, Tensor]:
        f_txt = self.txt_proj(q_prime) + self.txt_from_img(q_prime, img_feats)
        v_txt = self.img_proj(img_feats) + self.img_from_txt(img_feats, q_prime)
        return f_txt, v_txt


class IAA(Module):
    """mapper (2-layer MLP over the flattened hidden states) -> linear expansion -> layer norm."""

    def __init__(self, cfg: BridgeConfig, rng):
        self.mapper = MLP(cfg.r * cfg.d_llm, cfg.mapper_hidden, cfg.d_cond, rng)
        self.linear = Linear(cfg.d_cond, cfg.n_img_tokens * cfg.d_cond, rng)
        self.norm = LayerNorm(cfg.d_cond)
        self.n, self.d_cond = cfg.n_img_tokens, cfg.d_cond

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (mapped (B, 1, d_cond), f_img (B, N, d_cond))."""
        b, r, d = h.shape
        mapped = T.reshape(self.mapper(T.reshape(h, (b, r * d))), (b, 1, self.d_cond))
        tokens = T.reshape(self.linear(mapped), (b, self.n, self.d_cond))
        return mapped, self.norm(tokens)


class Bridging(Module):
    def __init__(self, cfg: BridgeConfig):
        rng = np.random.default_rng([cfg.seed, 3])
        self.cfg = cfg
        self.qformer = QFormer(cfg, rng)
        self.bim = BIM(cfg, rng)
        self.iaa = IAA(cfg, rng)

    def __call__(self, h: Tensor, img_feats: Tensor | None):
        q_prime = self.qformer(h)
        mapped, f_img = self.iaa(h)
        if img_feats is None:
            return q_prime, None, None, mapped, f_img
        f_txt, v_txt = self.bim(img_feats, q_prime)
        return q_prime, f_txt, v_txt, mapped, f_img


def _as_batch_target(target: np.ndarray, like: Tensor) -> Tensor:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != like.shape:
        raise ShapeError(f"target shape {target.shape} does not match prediction {like.shape}")
    return Tensor(target)


def iaa_loss(mapped: Tensor, target_images: np.ndarray, emb: FrozenEmbedders) -> Tensor:
    """MSE between the target-image embedding and the mapper output."""
    return T.mse(_as_batch_target(emb.image_embed(target_images), mapped), mapped)


def stage1_text_feature_loss(q_prime: Tensor, instructions: list[str], emb: FrozenEmbedders,
                             vocab: VocabSpec) -> Tensor:
    return T.mse(_as_batch_target(emb.text_embed(instructions, vocab), q_prime), q_prime)


def stage1_image_feature_loss(mapped: Tensor, source_images: np.ndarray, emb: FrozenEmbedders) -> Tensor:
    return T.mse(_as_batch_target(emb.image_embed(source_images), mapped), mapped)
