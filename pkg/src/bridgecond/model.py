"""The assembled editor: comprehension -> bridge -> denoiser, plus frozen stand-ins."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .bridging import BridgeConfig, Bridging, FrozenEmbedders
from .comprehension import Comprehension, ComprehensionConfig, VocabSpec
from .generation import Denoiser, DenoiserConfig, LatentCodec, NoiseSchedule, sample_latent
from .nn import Module
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4  # also the codec factor, so v_txt lines up with latent tokens
    d_vision: int = 32
    d_llm: int = 64
    llm_layers: int = 2
    llm_heads: int = 4
    r: int = 4
    lora_rank: int = 4
    lora_alpha: float = 8.0
    max_text_len: int = 40
    d_cond: int = 32
    t_q: int = 8
    n_img_tokens: int = 4
    mapper_hidden: int = 128
    d_z: int = 4
    d_model: int = 64
    den_blocks: int = 2
    den_heads: int = 4
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    lambda_default: float = 1.0
    seed: int = 0

    def __post_init__(self):
        # the component configs carry the divisibility checks
        self.comprehension()
        self.denoiser()
        NoiseSchedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def comprehension(self) -> ComprehensionConfig:
        return ComprehensionConfig(self.d_llm, self.llm_layers, self.llm_heads, self.image_size, self.patch_size,
                                   self.d_vision, self.r, self.lora_rank, self.lora_alpha, self.max_text_len,
                                   self.seed)

    def bridge(self) -> BridgeConfig:
        return BridgeConfig(self.d_llm, self.r, self.d_vision, self.d_cond, self.t_q, self.n_img_tokens,
                            self.d_model, self.mapper_hidden, self.seed)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(self.d_z, self.image_size // self.patch_size, self.d_model, self.den_blocks,
                              self.den_heads, self.d_cond, self.lambda_default, self.seed)


@dataclass
class Features:
    """Per-sample outputs of the frozen parts, computed once per dataset."""

    img_feats: np.ndarray  # (B, p, d_vision)
    v: np.ndarray  # aligned image prefix (B, p, d_llm)
    src_latent: np.ndarray
    tgt_latent: np.ndarray
    text_embed: np.ndarray  # (B, t_q, d_cond)
    src_embed: np.ndarray  # (B, 1, d_cond)
    tgt_embed: np.ndarray

    def take(self, idx) -> Features:
        return Features(*(getattr(self, f.name)[idx] for f in fields(self)))


class EditModel(Module):
    def __init__(self, cfg: ModelConfig, vocab: VocabSpec):
        self.cfg = cfg
        self._vocab = vocab
        self.comprehension = Comprehension(cfg.comprehension(), vocab)
        self.bridging = Bridging(cfg.bridge())
        self.denoiser = Denoiser(cfg.denoiser())
        self.embedders = FrozenEmbedders(vocab.base_size, cfg.t_q, cfg.d_cond, cfg.image_size, cfg.seed)
        self.codec = LatentCodec(cfg.patch_size, cfg.d_z)
        self._schedule = NoiseSchedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
        self.assign_names()

    @property
    def vocab(self) -> VocabSpec:
        return self._vocab

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    def featurize(self, sources: np.ndarray, targets: np.ndarray, instructions: list[str]) -> Features:
        with T.no_grad():
            feats = self.comprehension.encode_image(sources)
            v = self.comprehension.fc_align(feats)
        return Features(feats.data, v.data, self.codec.encode(sources), self.codec.encode(targets),
                        self.embedders.text_embed(instructions, self.vocab),
                        self.embedders.image_embed(sources), self.embedders.image_embed(targets))

    def conditions(self, instructions: list[str], feats: Features | None):
        """Run comprehension and the bridge; ``feats=None`` feeds the decoder text only.

        Returns (logits, ids, q', f_txt, v_txt, mapped, f_img).
        """
        ids, valid = self.comprehension.batch_ids(instructions)
        v = None if feats is None else Tensor(feats.v)
        logits, h = self.comprehension.run_decoder(v, ids, valid)
        img = None if feats is None else Tensor(feats.img_feats)
        q_prime, f_txt, v_txt, mapped, f_img = self.bridging(h, img)
        return logits, ids, q_prime, f_txt, v_txt, mapped, f_img

    def edit(self, sources: np.ndarray, instructions: list[str], lam: float | None = None,
             steps: int | None = None, seed: int = 0) -> np.ndarray:
        """Edited uint8 images for a batch of sources and instructions."""
        sources = np.asarray(sources)
        single = sources.ndim == 3
        if single:
            sources = sources[None]
        lam = self.cfg.lambda_default if lam is None else lam
        feats = self.featurize(sources, sources, instructions)
        with T.no_grad():
            *_, f_txt, v_txt, _, f_img = self.conditions(instructions, feats)
        z = sample_latent(self.denoiser, self.schedule, feats.src_latent, f_txt, v_txt, f_img, lam, steps,
                          np.random.default_rng(seed))
        out = self.codec.decode(z, sources.shape[1])
        return out[0] if single else out
