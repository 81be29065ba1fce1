"""Toy multimodal LM: patch vision encoder, FC aligner and a causal decoder.

The decoder's vocabulary ends with ``r`` special [MM] tokens.  Their input
embeddings double as output rows of the (tied) LM head, and the final hidden
states at the [MM] positions are what the bridge consumes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, LoRALinear, MLP, Module, multi_head_attention, normal
from .tensor import Parameter, Tensor

PAD, UNK = "<pad>", "<unk>"
_TOKEN_RE = re.compile(r"[a-z0-9\-]+|[.,?]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class VocabSpec:
    """Closed word vocabulary followed by ``r`` contiguous [MM] ids."""

    def __init__(self, words: list[str], r: int):
        if r < 1:
            raise ValueError("r must be >= 1")
        words = [w for w in words if w not in (PAD, UNK)]
        self.words = [PAD, UNK, *words]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.r = r

    @property
    def base_size(self) -> int:
        return len(self.words)

    @property
    def size(self) -> int:
        return self.base_size + self.r

    @property
    def mm_token_ids(self) -> list[int]:
        return list(range(self.base_size, self.base_size + self.r))

    @property
    def pad_id(self) -> int:
        return 0

    def encode(self, text: str) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(w, unk) for w in tokenize(text)]

    def append_mm_tokens(self, ids: list[int]) -> list[int]:
        if any(i >= self.base_size for i in ids):
            raise ValueError("instruction already contains [MM] tokens")
        return list(ids) + self.mm_token_ids

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words[2:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, r: int) -> VocabSpec:
        words = [w for w in Path(path).read_text(encoding="utf-8").splitlines() if w]
        return cls(words, r)

    @classmethod
    def default(cls, r: int) -> VocabSpec:
        from .datapipe.pipeline import grammar_words

        return cls(grammar_words(), r)


@dataclass
class ComprehensionConfig:
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    image_size: int = 32
    patch_size: int = 4
    d_vision: int = 32
    r: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    max_text_len: int = 40
    seed: int = 0
    lora_seed: int | None = None

    def __post_init__(self):
        if self.d_llm % self.n_heads:
            raise ValueError("d_llm must be divisible by n_heads")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")

    @property
    def patch_grid(self) -> int:
        return (self.image_size // self.patch_size) ** 2


def to_unit(images: np.ndarray) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) / 255.0


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)*(W/p), p*p*C), patches in row-major order."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    x = images.reshape(b, h // patch, patch, w // patch, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch * c)


def unpatchify(patches: np.ndarray, patch: int, side: int, channels: int = 3) -> np.ndarray:
    b = patches.shape[0]
    g = side // patch
    x = patches.reshape(b, g, g, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, side, side, channels)


class VisionEncoder(Module):
    """Bias-free patch embedding followed by a residual channel-mixing MLP."""

    def __init__(self, cfg: ComprehensionConfig, rng: np.random.Generator):
        d_in = cfg.patch_size * cfg.patch_size * 3
        self.patch = cfg.patch_size
        self.embed = Linear(d_in, cfg.d_vision, rng, bias=False, std=2.0 / np.sqrt(d_in))
        self.mix1 = Linear(cfg.d_vision, 2 * cfg.d_vision, rng, bias=False)
        self.mix2 = Linear(2 * cfg.d_vision, cfg.d_vision, rng, bias=False, std=0.5 / np.sqrt(2 * cfg.d_vision))

    def __call__(self, images: np.ndarray) -> Tensor:
        x = self.embed(Tensor(patchify(to_unit(images), self.patch)))
        return x + self.mix2(T.gelu(self.mix1(x)))


class DecoderBlock(Module):
    def __init__(self, cfg: ComprehensionConfig, rng, lora_rng):
        d = cfg.d_llm
        self.ln1 = LayerNorm(d)
        self.wq = LoRALinear(d, d, cfg.lora_rank, cfg.lora_alpha, rng, lora_rng)
        self.wk = LoRALinear(d, d, cfg.lora_rank, cfg.lora_alpha, rng, lora_rng)
        self.wv = LoRALinear(d, d, cfg.lora_rank, cfg.lora_alpha, rng, lora_rng)
        self.wo = LoRALinear(d, d, cfg.lora_rank, cfg.lora_alpha, rng, lora_rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, d, rng)
        self.n_heads = cfg.n_heads

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.ln1(x)
        x = x + self.wo(multi_head_attention(self.wq(h), self.wk(h), self.wv(h), self.n_heads, mask))
        return x + self.mlp(self.ln2(x))


class Comprehension(Module):
    def __init__(self, cfg: ComprehensionConfig, vocab: VocabSpec):
        if vocab.r != cfg.r:
            raise ValueError(f"vocab has r={vocab.r}, config has r={cfg.r}")
        rng = np.random.default_rng([cfg.seed, 1])
        lora_rng = np.random.default_rng([cfg.seed if cfg.lora_seed is None else cfg.lora_seed, 2])
        self.cfg = cfg
        self._vocab = vocab
        self.vision = VisionEncoder(cfg, rng)
        self.fc = Linear(cfg.d_vision, cfg.d_llm, rng)
        self.tok_embeddings = Parameter(normal(rng, (vocab.base_size, cfg.d_llm), 0.25), frozen=True)
        self.mm_embeddings = Parameter(normal(rng, (cfg.r, cfg.d_llm), 0.25))
        self.pos_embeddings = Parameter(normal(rng, (self.max_len, cfg.d_llm), 0.25), frozen=True)
        self.blocks = [DecoderBlock(cfg, rng, lora_rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_llm)

    @property
    def vocab(self) -> VocabSpec:
        return self._vocab

    @property
    def max_len(self) -> int:
        return self.cfg.patch_grid + self.cfg.max_text_len

    def encode_image(self, images: np.ndarray) -> Tensor:
        images = np.asarray(images)
        return self.vision(images if images.ndim == 4 else images[None])

    def fc_align(self, v_raw: Tensor) -> Tensor:
        return self.fc(v_raw)

    def batch_ids(self, instructions: list[str]) -> tuple[np.ndarray, np.ndarray]:
        """Tokenise, append [MM] tokens and left-pad so the [MM] block ends every row."""
        seqs = [self.vocab.append_mm_tokens(self.vocab.encode(s)) for s in instructions]
        t = max(len(s) for s in seqs)
        if t > self.cfg.max_text_len:
            raise ValueError(f"instruction of {t} tokens exceeds max_text_len={self.cfg.max_text_len}")
        ids = np.full((len(seqs), t), self.vocab.pad_id, dtype=np.int64)
        valid = np.zeros((len(seqs), t), dtype=bool)
        for i, s in enumerate(seqs):
            ids[i, t - len(s):] = s
            valid[i, t - len(s):] = True
        return ids, valid

    def run_decoder(self, v: Tensor | None, ids: np.ndarray, valid: np.ndarray | None = None):
        """Returns (logits over text positions (B, t, V), hidden states at the [MM] positions (B, r, d)).

        ``v`` is the aligned image prefix (B, p, d) or None for text-only input.
        """
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        valid = np.ones(ids.shape, dtype=bool) if valid is None else np.atleast_2d(valid)
        b, t = ids.shape
        p = 0 if v is None else v.shape[1]
        if p + t > self.max_len or t > self.cfg.max_text_len:
            raise ValueError(f"sequence of {p}+{t} tokens exceeds max length {self.max_len}")
        table = T.concat([self.tok_embeddings, self.mm_embeddings], axis=0)
        x = T.embedding(table, ids)
        pos = p + np.maximum(np.cumsum(valid, axis=1) - 1, 0)
        x = x + T.embedding(self.pos_embeddings, pos)
        key_valid = valid
        if v is not None:
            if v.ndim == 2:
                v = T.reshape(v, (1, *v.shape))
            x = T.concat([v + T.index(self.pos_embeddings, slice(0, p)), x], axis=1)
            key_valid = np.concatenate([np.ones((b, p), dtype=bool), valid], axis=1)
        n = p + t
        mask = np.tril(np.ones((n, n), dtype=bool))[None] & key_valid[:, None, :]
        mask |= np.eye(n, dtype=bool)[None]
        mask = mask[:, None]  # heads axis
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_f(x)
        text = T.index(x, (slice(None), slice(p, n)))
        logits = T.matmul(text, T.transpose(table))
        h = T.index(x, (slice(None), slice(n - self.cfg.r, n)))
        return logits, h

    def __call__(self, images: np.ndarray | None, instructions: list[str]):
        ids, valid = self.batch_ids(instructions)
        v = None if images is None else self.fc_align(self.encode_image(images))
        logits, h = self.run_decoder(v, ids, valid)
        return logits, h, ids


def llm_loss(logits: Tensor, ids: np.ndarray, vocab: VocabSpec) -> Tensor:
    """Teacher-forced NLL of each [MM] token given everything before it, averaged."""
    ids = np.atleast_2d(ids)
    if logits.ndim == 2:
        logits = T.reshape(logits, (1, *logits.shape))
    rows, cols = np.nonzero(ids >= vocab.base_size)
    counts = np.bincount(rows, minlength=ids.shape[0])
    if np.any(counts != vocab.r) or np.any(cols == 0):
        raise ValueError("every sequence needs all r [MM] tokens after at least one instruction token")
    picked = T.index(logits, (rows, cols - 1))
    return T.nll_loss(picked, ids[rows, cols])
