"""Finite-difference verification of every differentiable block.

Each check builds a tiny randomly initialised block (zero-initialised weights are
re-randomised so no path is trivially dead), reduces its output to a scalar with
a fixed random projection, and compares backward() with central differences.
Error per block: max |analytic - numeric| / max(max |analytic|, max |numeric|).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .bridging import BIM, IAA, BridgeConfig, QFormer
from .comprehension import VocabSpec
from .generation import Denoiser, DenoiserConfig, predict_noise
from .model import EditModel, ModelConfig
from .nn import Module
from .tensor import Parameter, Tensor

TOLERANCE = 1e-4
STEP = 1e-5
PROBES_PER_TENSOR = 12


@dataclass
class GradResult:
    block: str
    max_rel_error: float
    n_params: int
    n_probes: int
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _randomize(params: list[Parameter], rng: np.random.Generator, std: float = 0.3) -> None:
    for p in params:
        if np.all(p.data == 0):
            p.data = rng.standard_normal(p.shape) * std
        p.requires_grad = True  # include normally frozen weights in the check


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    proj = Tensor(rng.standard_normal(out.shape))
    return lambda y: T.tsum(y * proj)


def check(name: str, leaves: list[Parameter], loss_fn: Callable[[], Tensor], seed: int = 0,
          probes: int = PROBES_PER_TENSOR) -> GradResult:
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    for p in leaves:
        p.grad = None
    T.backward(loss_fn())
    num_err, scale, n = 0.0, 0.0, 0
    for p in leaves:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        size = p.data.size
        idx = np.arange(size) if size <= probes else np.sort(rng.choice(size, probes, replace=False))
        numeric = T.finite_diff_grad(loss_fn, p, STEP, idx).reshape(-1)[idx]
        a = analytic.reshape(-1)[idx]
        num_err = max(num_err, float(np.max(np.abs(a - numeric))))
        scale = max(scale, float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))))
        n += len(idx)
    rel = num_err / max(scale, 1e-12)
    return GradResult(name, rel, len(leaves), n, time.perf_counter() - start)


def _leaf(rng, *shape) -> Parameter:
    return Parameter(rng.standard_normal(shape))


def _module_leaves(module: Module, rng) -> list[Parameter]:
    params = module.parameters()
    _randomize(params, rng)
    return params


def check_attention(seed=0):
    rng = np.random.default_rng(seed)
    q, k, v = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 3)
    mask = rng.random((2, 3, 5)) > 0.3
    mask[..., 0] = True
    f = lambda: T.scaled_dot_attention(q, k, v, mask)
    red = _projected(f(), rng)
    return check("attention", [q, k, v], lambda: red(f()), seed)


def check_layer_norm(seed=0):
    rng = np.random.default_rng(seed)
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    f = lambda: T.layer_norm(x, g, b)
    red = _projected(f(), rng)
    return check("layer_norm", [x, g, b], lambda: red(f()), seed)


def check_lora(seed=0):
    rng = np.random.default_rng(seed)
    x, w, a, b = _leaf(rng, 4, 5), _leaf(rng, 5, 3), _leaf(rng, 2, 5), _leaf(rng, 3, 2)
    f = lambda: T.lora_linear(x, w, a, b, 4.0)
    red = _projected(f(), rng)
    return check("lora", [x, w, a, b], lambda: red(f()), seed)


def _tiny_bridge() -> BridgeConfig:
    return BridgeConfig(d_llm=6, r=2, d_vision=5, d_cond=4, t_q=3, n_img_tokens=2, d_model=6, mapper_hidden=7)


def check_qformer(seed=0):
    rng = np.random.default_rng(seed)
    cfg = _tiny_bridge()
    mod = QFormer(cfg, rng)
    h = _leaf(rng, 2, cfg.r, cfg.d_llm)
    f = lambda: mod(h)
    red = _projected(f(), rng)
    return check("qformer", [h, *_module_leaves(mod, rng)], lambda: red(f()), seed)


def check_bim(seed=0):
    rng = np.random.default_rng(seed)
    cfg = _tiny_bridge()
    mod = BIM(cfg, rng)
    img, q = _leaf(rng, 2, 4, cfg.d_vision), _leaf(rng, 2, cfg.t_q, cfg.d_cond)
    f = lambda: T.concat([T.reshape(o, (2, -1)) for o in mod(img, q)], axis=1)
    red = _projected(f(), rng)
    return check("bim", [img, q, *_module_leaves(mod, rng)], lambda: red(f()), seed)


def check_iaa(seed=0):
    rng = np.random.default_rng(seed)
    cfg = _tiny_bridge()
    mod = IAA(cfg, rng)
    h = _leaf(rng, 2, cfg.r, cfg.d_llm)
    f = lambda: T.concat([T.reshape(o, (2, -1)) for o in mod(h)], axis=1)
    red = _projected(f(), rng)
    return check("iaa", [h, *_module_leaves(mod, rng)], lambda: red(f()), seed)


def check_denoiser(seed=0):
    rng = np.random.default_rng(seed)
    cfg = DenoiserConfig(d_z=2, side=2, d_model=6, n_blocks=1, n_heads=2, d_cond=4)
    net = Denoiser(cfg)
    n = cfg.side * cfg.side
    z, src = _leaf(rng, 2, n, cfg.d_z), _leaf(rng, 2, n, cfg.d_z)
    v_txt, f_txt, f_img = _leaf(rng, 2, n, cfg.d_model), _leaf(rng, 2, 3, cfg.d_cond), _leaf(rng, 2, 2, cfg.d_cond)
    t = np.array([3, 7])
    f = lambda: predict_noise(net, z, src, v_txt, f_txt, f_img, t, 0.7)
    red = _projected(f(), rng)
    leaves = [z, src, v_txt, f_txt, f_img, *_module_leaves(net, rng)]
    return check("denoiser", leaves, lambda: red(f()), seed)


TINY_MODEL = ModelConfig(image_size=8, patch_size=4, d_vision=4, d_llm=8, llm_layers=1, llm_heads=2, r=2,
                         lora_rank=2, max_text_len=12, d_cond=4, t_q=2, n_img_tokens=2, mapper_hidden=6, d_z=2,
                         d_model=8, den_blocks=1, den_heads=2, diffusion_steps=50)


def _check_stage(stage: int, seed=0):
    from .training import StageBatch, stage_losses

    rng = np.random.default_rng(seed)
    model = EditModel(TINY_MODEL, VocabSpec.default(TINY_MODEL.r))
    src = rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    tgt = rng.integers(0, 256, (2, 8, 8, 3), dtype=np.uint8)
    instructions = ["remove the red circle.", "add the small blue square."]
    feats = model.featurize(src, tgt, instructions)
    batch = StageBatch(instructions, feats, np.array([2, 9]), rng.standard_normal(feats.tgt_latent.shape))
    # the codec and frozen embedders never see gradients; everything else is probed
    leaves = [p for name, p in model.named_parameters() if not name.startswith(("codec", "embedders"))]
    _randomize(leaves, rng)
    if stage == 1:  # text-only decoding leaves the image path out of the graph
        leaves = [p for name, p in model.named_parameters()
                  if name.startswith("comprehension.") and "vision" not in name and ".fc." not in name
                  or name.startswith(("bridging.qformer", "bridging.iaa"))]
    elif stage == 3:
        leaves = [p for name, p in model.named_parameters() if name.startswith(("bridging", "denoiser"))]
    loss = lambda: stage_losses(model, stage, batch, lam=0.5)[0]
    return check(f"stage{stage}_loss", leaves, loss, seed, probes=6)


def check_decoder(seed=0):
    rng = np.random.default_rng(seed)
    model = EditModel(TINY_MODEL, VocabSpec.default(TINY_MODEL.r))
    comp = model.comprehension
    leaves = [p for name, p in comp.named_parameters() if not name.startswith(("vision", "fc"))]
    _randomize(leaves, rng)
    v = _leaf(rng, 2, TINY_MODEL.image_size ** 2 // TINY_MODEL.patch_size ** 2, TINY_MODEL.d_llm)
    ids, valid = comp.batch_ids(["remove the red circle.", "add it."])

    def f():
        logits, h = comp.run_decoder(v, ids, valid)
        return T.concat([T.reshape(logits, (2, -1)), T.reshape(h, (2, -1))], axis=1)

    red = _projected(f(), rng)
    return check("decoder", [v, *leaves], lambda: red(f()), seed, probes=8)


CHECKS: dict[str, Callable[..., GradResult]] = {
    "attention": check_attention,
    "layer_norm": check_layer_norm,
    "lora": check_lora,
    "decoder": check_decoder,
    "qformer": check_qformer,
    "bim": check_bim,
    "iaa": check_iaa,
    "denoiser": check_denoiser,
    "stage1_loss": lambda seed=0: _check_stage(1, seed),
    "stage2_loss": lambda seed=0: _check_stage(2, seed),
    "stage3_loss": lambda seed=0: _check_stage(3, seed),
}


def run(module: str = "all", seed: int = 0) -> list[GradResult]:
    if module != "all" and module not in CHECKS:
        raise ValueError(f"unknown gradcheck block {module!r}; choose from all, {', '.join(CHECKS)}")
    names = list(CHECKS) if module == "all" else [module]
    return [CHECKS[n](seed=seed) for n in names]


def format_table(results: list[GradResult]) -> str:
    lines = [f"{'block':<14}{'max rel err':>14}{'tensors':>9}{'probes':>8}{'sec':>7}  status"]
    for r in results:
        lines.append(f"{r.block:<14}{r.max_rel_error:>14.3e}{r.n_params:>9}{r.n_probes:>8}{r.seconds:>7.2f}  "
                     f"{'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
