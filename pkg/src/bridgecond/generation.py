"""Latent diffusion generator conditioned on the bridge outputs.

Latents are kept token-major, ``(B, side*side, d_z)``, which is what the
attention denoiser consumes; ``to_map``/``from_map`` convert to and from the
channel-first ``(B, d_z, side, side)`` layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .comprehension import patchify, to_unit, unpatchify
from .nn import LayerNorm, Linear, MLP, Module, multi_head_attention, normal, sinusoidal_embedding
from .tensor import NumericError, Parameter, ShapeError, Tensor


# --- codec -------------------------------------------------------------------

class LatentCodec(Module):
    """Fixed linear patch projection onto the top principal directions of synthetic scenes.

    The basis is an uncentered SVD of patches from a fixed scene corpus, so a black
    image maps to the zero latent.  Each channel is scaled to unit std.
    """

    def __init__(self, factor: int = 4, d_z: int = 4, corpus_size: int = 128, corpus_seed: int = 900_000):
        from .datapipe.world import gen_scene

        self.factor, self.d_z = factor, d_z
        images = np.stack([gen_scene(corpus_seed + i)[1] for i in range(corpus_size)])
        patches = patchify(to_unit(images), factor).reshape(-1, factor * factor * 3)
        _, _, vt = np.linalg.svd(patches, full_matrices=False)
        basis = vt[:d_z].T.copy()
        # sign convention: the largest-magnitude entry of each direction is positive
        flip = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(d_z)])
        basis *= flip
        scale = (patches @ basis).std(axis=0)
        self.basis = Parameter(basis, frozen=True)
        self.scale = Parameter(scale, frozen=True)

    def encode(self, images: np.ndarray) -> np.ndarray:
        """(B, H, W, 3) uint8 -> (B, (H/f)*(W/f), d_z)."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1] % self.factor or images.shape[2] % self.factor:
            raise ShapeError(f"image {images.shape[1:3]} not divisible by codec factor {self.factor}")
        return patchify(to_unit(images), self.factor) @ self.basis.data / self.scale.data

    def decode_unit(self, z: np.ndarray, side: int) -> np.ndarray:
        """Latent tokens -> float pixels in [0, 1] (unclipped)."""
        patches = (np.asarray(z) * self.scale.data) @ self.basis.data.T
        return unpatchify(patches, self.factor, side)

    def decode(self, z: np.ndarray, side: int) -> np.ndarray:
        return np.clip(np.rint(self.decode_unit(z, side) * 255.0), 0, 255).astype(np.uint8)


def to_map(z: np.ndarray) -> np.ndarray:
    b, n, c = z.shape
    s = math.isqrt(n)
    return z.reshape(b, s, s, c).transpose(0, 3, 1, 2)


def from_map(z: np.ndarray) -> np.ndarray:
    b, c, s, _ = z.shape
    return z.transpose(0, 2, 3, 1).reshape(b, s * s, c)


# --- noise process -----------------------------------------------------------

class NoiseSchedule:
    """Linear betas; ``alpha_bars[0] = 1`` so index t in 0..T lines up with timesteps.

    The 1e-4..0.02 range is quoted for 1000 steps; with ``rescale`` it is stretched
    by 1000/T so the chain still ends near pure noise at small T.
    """

    def __init__(self, steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02, rescale: bool = True):
        if steps < 1:
            raise ValueError("need at least one diffusion step")
        k = 1000.0 / steps if rescale else 1.0
        self.T = steps
        self.betas = np.concatenate([[0.0], np.linspace(beta_start * k, beta_end * k, steps)])
        if not np.all((self.betas[1:] > 0) & (self.betas[1:] < 1)):
            raise ValueError("betas must lie in (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def check(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 0..{self.T}: {t}")
        return t


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps, with t broadcast over the leading axis."""
    t = schedule.check(t)
    ab = schedule.alpha_bars[t].reshape(np.shape(t) + (1,) * (np.ndim(z0) - np.ndim(t)))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


# --- denoiser ----------------------------------------------------------------

@dataclass
class DenoiserConfig:
    d_z: int = 4
    side: int = 8
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    d_cond: int = 32
    lambda_default: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def in_channels(self) -> int:
        return 2 * self.d_z


class KV(Module):
    def __init__(self, d_cond: int, d_model: int, rng, zero: bool = False):
        self.wk = Linear(d_cond, d_model, rng, bias=False, zero=zero)
        self.wv = Linear(d_cond, d_model, rng, bias=False, zero=zero)


class DecoupledCrossAttention(Module):
    """Shared query, separate key/value projections for the text and image conditions.

    The image branch starts at zero so an untouched model behaves as text-only.
    """

    def __init__(self, d_model: int, d_cond: int, n_heads: int, rng):
        self.wq = Linear(d_model, d_model, rng, bias=False)
        self.txt = KV(d_cond, d_model, rng)
        self.img = KV(d_cond, d_model, rng, zero=True)
        self.n_heads = n_heads

    def text_attention(self, q: Tensor, f_txt: Tensor) -> Tensor:
        return multi_head_attention(q, self.txt.wk(f_txt), self.txt.wv(f_txt), self.n_heads)

    def image_attention(self, q: Tensor, f_img: Tensor) -> Tensor:
        return multi_head_attention(q, self.img.wk(f_img), self.img.wv(f_img), self.n_heads)

    def __call__(self, x: Tensor, f_txt: Tensor, f_img: Tensor | None, lam: float) -> Tensor:
        return decoupled_cross_attention(self, x, f_txt, f_img, lam)


def decoupled_cross_attention(attn: DecoupledCrossAttention, x: Tensor, f_txt: Tensor,
                              f_img: Tensor | None, lam: float) -> Tensor:
    """Z = Attn(Q, K_txt, V_txt) + lam * Attn(Q, K_img, V_img); no output projection here."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    q = attn.wq(x)
    z = attn.text_attention(q, f_txt)
    if f_img is None or lam == 0:
        return z
    return z + attn.image_attention(q, f_img) * lam


class DenoiserBlock(Module):
    def __init__(self, cfg: DenoiserConfig, rng):
        d = cfg.d_model
        self.time_proj = Linear(d, d, rng)
        self.ln1 = LayerNorm(d)
        self.self_q = Linear(d, d, rng, bias=False)
        self.self_k = Linear(d, d, rng, bias=False)
        self.self_v = Linear(d, d, rng, bias=False)
        self.self_out = Linear(d, d, rng)
        self.ln2 = LayerNorm(d)
        self.cross_attn = DecoupledCrossAttention(d, cfg.d_cond, cfg.n_heads, rng)
        self.cross_out = Linear(d, d, rng)
        self.ln3 = LayerNorm(d)
        self.mlp = MLP(d, 4 * d, d, rng)
        self.n_heads = cfg.n_heads

    def __call__(self, x: Tensor, temb: Tensor, f_txt: Tensor, f_img: Tensor | None, lam: float) -> Tensor:
        b, n, d = x.shape
        x = x + T.broadcast_to(T.reshape(self.time_proj(temb), (b, 1, d)), (b, n, d))
        h = self.ln1(x)
        x = x + self.self_out(multi_head_attention(self.self_q(h), self.self_k(h), self.self_v(h), self.n_heads))
        x = x + self.cross_out(self.cross_attn(self.ln2(x), f_txt, f_img, lam))
        return x + self.mlp(self.ln3(x))


class Denoiser(Module):
    def __init__(self, cfg: DenoiserConfig):
        rng = np.random.default_rng([cfg.seed, 4])
        self.cfg = cfg
        d = cfg.d_model
        self.in_proj = Linear(cfg.in_channels, d, rng)
        self.pos = Parameter(normal(rng, (cfg.side * cfg.side, d), 0.02))
        self.time_mlp = MLP(d, 2 * d, d, rng)
        self.blocks = [DenoiserBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.ln_out = LayerNorm(d)
        self.head = Linear(d, cfg.d_z, rng, zero=True)

    def __call__(self, z_t, src_latent, v_txt: Tensor | None, f_txt: Tensor, f_img: Tensor | None,
                 t, lam: float) -> Tensor:
        return predict_noise(self, z_t, src_latent, v_txt, f_txt, f_img, t, lam)


def predict_noise(net: Denoiser, z_t, src_latent, v_txt: Tensor | None, f_txt: Tensor,
                  f_img: Tensor | None, t, lam: float) -> Tensor:
    """eps_hat for concat[z_t, src] with v_txt added after the input projection."""
    cfg = net.cfg
    z_t, src_latent = T.as_tensor(z_t), T.as_tensor(src_latent)
    n = cfg.side * cfg.side
    if z_t.shape != src_latent.shape or z_t.shape[1:] != (n, cfg.d_z):
        raise ShapeError(f"latents must both be (B, {n}, {cfg.d_z}); got {z_t.shape} and {src_latent.shape}")
    b = z_t.shape[0]
    x = net.in_proj(T.concat([z_t, src_latent], axis=-1)) + net.pos
    if v_txt is not None:
        if v_txt.shape != x.shape:
            raise ShapeError(f"v_txt {v_txt.shape} does not match denoiser features {x.shape}")
        x = x + v_txt
    t = np.broadcast_to(np.asarray(t), (b,))
    temb = net.time_mlp(Tensor(sinusoidal_embedding(t, cfg.d_model)))
    for block in net.blocks:
        x = block(x, temb, f_txt, f_img, lam)
    return net.head(net.ln_out(x))


@dataclass
class EditBatch:
    src_latent: np.ndarray
    tgt_latent: np.ndarray
    f_txt: Tensor
    v_txt: Tensor | None
    f_img: Tensor | None
    t: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        b = self.src_latent.shape[0]
        sizes = {self.tgt_latent.shape[0], self.f_txt.shape[0], len(self.t), self.eps.shape[0]}
        sizes |= {x.shape[0] for x in (self.v_txt, self.f_img) if x is not None}
        if sizes != {b}:
            raise ShapeError(f"inconsistent batch sizes in EditBatch: {sorted(sizes | {b})}")


def sd_loss(net: Denoiser, schedule: NoiseSchedule, batch: EditBatch, lam: float) -> Tensor:
    z_t = add_noise(schedule, batch.tgt_latent, batch.t, batch.eps)
    pred = predict_noise(net, z_t, batch.src_latent, batch.v_txt, batch.f_txt, batch.f_img, batch.t, lam)
    return T.mse(pred, Tensor(batch.eps))


def sample_latent(net: Denoiser, schedule: NoiseSchedule, src_latent: np.ndarray, f_txt: Tensor,
                  v_txt: Tensor | None, f_img: Tensor | None, lam: float, steps: int | None,
                  rng: np.random.Generator) -> np.ndarray:
    """DDPM ancestral sampling from pure noise; ``steps < T`` uses an evenly respaced subchain."""
    steps = schedule.T if steps is None else steps
    if not 1 <= steps <= schedule.T:
        raise ValueError(f"steps must be in 1..{schedule.T}")
    for p in net.parameters():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"non-finite parameter {p.name or '?'} in denoiser")
    ts = np.unique(np.rint(np.linspace(1, schedule.T, steps)).astype(np.int64))[::-1]
    ab = schedule.alpha_bars
    z = rng.standard_normal(src_latent.shape)
    with T.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            eps = predict_noise(net, z, src_latent, v_txt, f_txt, f_img, np.full(len(z), t), lam).data
            beta = 1.0 - ab[t] / ab[t_prev]
            x0 = (z - np.sqrt(1.0 - ab[t]) * eps) / np.sqrt(ab[t])
            mean = (np.sqrt(ab[t_prev]) * beta * x0 + np.sqrt(1.0 - beta) * (1.0 - ab[t_prev]) * z) / (1.0 - ab[t])
            z = mean
            if t_prev > 0:
                z = z + np.sqrt(beta * (1.0 - ab[t_prev]) / (1.0 - ab[t])) * rng.standard_normal(z.shape)
    return z


def sample(net: Denoiser, schedule: NoiseSchedule, codec: LatentCodec, src_img: np.ndarray, f_txt: Tensor,
           v_txt: Tensor | None, f_img: Tensor | None, lam: float, steps: int | None = None,
           seed: int = 0) -> np.ndarray:
    """Edited uint8 image(s) with the source's dimensions."""
    src_img = np.asarray(src_img)
    single = src_img.ndim == 3
    batch = src_img[None] if single else src_img
    z = sample_latent(net, schedule, codec.encode(batch), f_txt, v_txt, f_img, lam, steps,
                      np.random.default_rng(seed))
    out = codec.decode(z, batch.shape[1])
    return out[0] if single else out
