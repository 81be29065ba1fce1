"""Five-step edit-pair construction over the synthetic world.

captions/objects -> masks (confidence filtered) -> closed masks and blended
edit pairs -> instruction recaptioning -> quality filtering -> manifest.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import world
from .imageio import write_pgm, write_ppm
from .scorer import ScorerAdapter, ScorerError

log = logging.getLogger(__name__)

TASKS = ("removal", "addition", "replacement")
MODES = ("template", "simple", "advanced")

TEMPLATES = {
    "removal": "remove the {x}.",
    "addition": "add the {x}.",
    "replacement": "replace the {x} with the {y}.",
}

SIMPLE_TEMPLATES = {
    "removal": ("Remove the {x}.", "Erase the {x}.", "Get rid of the {x}.", "Delete the {x} from the image."),
    "addition": ("Add the {x}.", "Put the {x} in the image.", "Insert the {x}."),
    "replacement": ("Swap the {x} for the {y}.", "Change the {x} into the {y}.", "Turn the {x} into the {y}."),
}

DETAILED_TEMPLATES = {
    "removal": "Remove {d}.",
    "addition": "Add {d}.",
    "replacement": "Replace {d} with the {y}.",
}

ACTIONS = {"removal": "Remove it.", "replacement": "Replace it with the {y}."}
REASONING_QUESTIONS = {
    "color": "What is the {color} object in the image?",
    "largest": "Which object is the largest in the image?",
    "region": "What is near the {region} of the image?",
}
ADDITION_REASONING = "Something {color} is missing near the {region} of the image. Add a {kind} there."


@dataclass
class ObjectRecord:
    object_id: int
    simple_caption: str
    detailed_caption: str
    confidence: float = 1.0
    mask: np.ndarray | None = None


@dataclass
class EditSample:
    sample_id: str
    task: str
    source: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    instruction: str
    instruction_mode: str = "template"
    quality: dict | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    seed: int = 0
    tau_conf: float = 0.5
    tau_q: float = 7.0
    kernel_radius: int = 1
    tasks: tuple[str, ...] = TASKS
    modes: tuple[str, ...] = MODES
    scorer: str = "mock"
    workers: int = 1


# step 1 ----------------------------------------------------------------------


def extract_objects(scene: world.SceneSpec) -> tuple[list[ObjectRecord], str]:
    """One caption-only record per visible shape, plus the scene's global caption."""
    records = [
        ObjectRecord(i, shape.caption, world.detailed_caption(shape, scene.size))
        for i, (shape, vis) in enumerate(zip(scene.shapes, world.visible_masks(scene)))
        if vis.any()
    ]
    return records, world.global_caption(scene)


# step 2 ----------------------------------------------------------------------


def gen_masks(scene: world.SceneSpec, records: list[ObjectRecord], tau_conf: float) -> list[ObjectRecord]:
    """Attach exact visible masks; confidence is the visible fraction of the shape's in-frame area."""
    if not 0.0 <= tau_conf <= 1.0:
        raise ValueError(f"tau_conf must lie in [0, 1], got {tau_conf}")
    visible = world.visible_masks(scene)
    kept = []
    for rec in records:
        full = world.shape_mask(scene.shapes[rec.object_id], scene.size)
        vis = visible[rec.object_id]
        conf = float(vis.sum()) / float(full.sum()) if full.any() else 0.0
        if conf >= tau_conf and vis.any():
            kept.append(ObjectRecord(rec.object_id, rec.simple_caption, rec.detailed_caption, conf, vis))
    return kept


def _window_reduce(mask: np.ndarray, radius: int, reduce) -> np.ndarray:
    k = 2 * radius + 1
    padded = np.pad(mask, radius, constant_values=False)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return reduce(windows, axis=(-2, -1))


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    return _window_reduce(mask, radius, np.any)


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erosion with out-of-frame pixels counted as background."""
    return _window_reduce(mask, radius, np.all)


def morph_close(mask: np.ndarray, kernel_radius: int = 1) -> np.ndarray:
    """Dilation then erosion with a (2r+1)^2 square element, computed on the unbounded plane.

    Padding by r before dilating keeps the dilated band that spills past the frame,
    so the result is extensive and idempotent up to the image border.
    """
    if kernel_radius < 1:
        raise ValueError("kernel_radius must be >= 1")
    r = kernel_radius
    big = np.pad(mask.astype(bool), r, constant_values=False)
    closed = erode(dilate(big, r), r)
    return closed[r:-r, r:-r]


# step 3 ----------------------------------------------------------------------


def blend(source: np.ndarray, edited: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Hard composite: edited pixels inside ``mask``, source pixels (bit-exact) elsewhere."""
    return np.where(mask[..., None], edited, source)


def propose_replacement(shape: world.Shape, rng: np.random.Generator) -> tuple[str, str]:
    options = [(c, k) for c in world.SHAPE_COLORS for k in world.SHAPE_KINDS if (c, k) != (shape.color, shape.kind)]
    return options[int(rng.integers(len(options)))]


def build_edit_pair(scene: world.SceneSpec, record: ObjectRecord, task: str, rng: np.random.Generator,
                    kernel_radius: int = 1, proposal: tuple[str, str] | None = None) -> EditSample:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if record.mask is None:
        raise ValueError("record has no mask; run gen_masks first")
    source = world.render(scene)
    shape = scene.shapes[record.object_id]
    sid = f"s{scene.seed:05d}_o{record.object_id}_{task}"
    meta = {"seed": scene.seed, "object_id": record.object_id, "object": shape.caption}

    if task in ("removal", "addition"):
        mask = morph_close(record.mask, kernel_radius)
        target = blend(source, world.render(scene.without(record.object_id)), mask)
        if task == "removal":
            return EditSample(sid, task, source, target, mask, TEMPLATES["removal"].format(x=shape.caption), meta=meta)
        return EditSample(sid, task, target, source, mask, TEMPLATES["addition"].format(x=shape.caption), meta=meta)

    color, kind = proposal if proposal is not None else propose_replacement(shape, rng)
    if (color, kind) == (shape.color, shape.kind):
        raise ValueError(f"replacement proposal equals the original object ({shape.caption})")
    new_shape = world.Shape(kind, color, shape.cx, shape.cy, shape.size)
    new_scene = scene.substituted(record.object_id, new_shape)
    new_visible = world.visible_masks(new_scene)[record.object_id]
    mask = morph_close(record.mask | new_visible, kernel_radius)
    target = blend(source, world.render(new_scene), mask)
    meta["replacement"] = new_shape.caption
    instruction = TEMPLATES["replacement"].format(x=shape.caption, y=new_shape.caption)
    return EditSample(sid, task, source, target, mask, instruction, meta=meta)


# step 4 ----------------------------------------------------------------------


def _reasoning_options(scene: world.SceneSpec, idx: int) -> list[str]:
    shape = scene.shapes[idx]
    others = [s for i, s in enumerate(scene.shapes) if i != idx]
    opts = []
    if all(s.color != shape.color for s in others):
        opts.append(REASONING_QUESTIONS["color"].format(color=shape.color))
    if all(s.size < shape.size for s in others):
        opts.append(REASONING_QUESTIONS["largest"])
    region = world.region_word(shape, scene.size)
    if all(world.region_word(s, scene.size) != region for s in others):
        opts.append(REASONING_QUESTIONS["region"].format(region=region))
    return opts


def recaption(sample: EditSample, record: ObjectRecord, mode: str, rng: np.random.Generator,
              scene: world.SceneSpec | None = None) -> str:
    """Rewrite a template instruction in ``simple`` or ``advanced`` form.

    Advanced reasoning questions are only emitted when ``scene`` shows they have
    a unique answer; otherwise the detailed-caption form is used.
    """
    task = sample.task
    x = record.simple_caption
    y = sample.meta.get("replacement", "")
    if mode == "simple":
        choices = SIMPLE_TEMPLATES[task]
        return choices[int(rng.integers(len(choices)))].format(x=x, y=y)
    if mode != "advanced":
        raise ValueError(f"unknown recaption mode {mode!r}")

    detailed = DETAILED_TEMPLATES[task].format(d=record.detailed_caption, y=y)
    options = [detailed]
    if scene is not None:
        shape = scene.shapes[record.object_id]
        if task == "addition":
            options.append(ADDITION_REASONING.format(color=shape.color, kind=shape.kind,
                                                     region=world.region_word(shape, scene.size)))
        else:
            action = ACTIONS[task].format(y=y)
            options.extend(f"{q} {action}" for q in _reasoning_options(scene, record.object_id))
    return options[int(rng.integers(len(options)))]


def grammar_words() -> list[str]:
    """Every word the instruction and caption grammar can emit."""
    from ..comprehension import tokenize

    texts = [*TEMPLATES.values(), *DETAILED_TEMPLATES.values(), *ACTIONS.values(),
             *REASONING_QUESTIONS.values(), ADDITION_REASONING,
             world.detailed_caption(world.Shape("circle", "red", 16, 16, 6)),
             world.global_caption(world.SceneSpec(0, "gray")), " and on a background"]
    for group in SIMPLE_TEMPLATES.values():
        texts.extend(group)
    texts.extend(world.SHAPE_COLORS)
    texts.extend(world.BACKGROUND_COLORS)
    texts.extend(world.SHAPE_KINDS)
    texts.extend(world.REGION_WORDS)
    texts.extend(world.SIZE_WORDS)
    words: set[str] = set()
    for text in texts:
        for key in ("x", "y", "d", "color", "kind", "region"):
            text = text.replace("{" + key + "}", " ")
        words.update(tokenize(text))
    return sorted(words)


# step 5 ----------------------------------------------------------------------


def quality_filter(sample: EditSample, scorer: ScorerAdapter, src_path: str = "",
                   tgt_path: str = "") -> tuple[bool, dict | None]:
    """Score a sample and store the scores on it; unscored samples come back as (False, None)."""
    try:
        scores = scorer.score(sample.source, sample.target, sample.mask, sample.instruction, src_path, tgt_path)
    except ScorerError as exc:
        log.warning("sample %s unscored: %s", sample.sample_id, exc)
        sample.quality = None
        return False, None
    sample.quality = scores
    return scores["overall"] >= scorer.tau_q, scores


# composition -----------------------------------------------------------------


@dataclass
class PipelineStats:
    scenes: int = 0
    objects_found: int = 0
    masks_kept: int = 0
    pairs_built: int = 0
    pairs_accepted: int = 0
    unscored: int = 0

    def lines(self) -> list[str]:
        return [f"objects found: {self.objects_found}", f"masks kept: {self.masks_kept}",
                f"pairs built: {self.pairs_built}", f"pairs accepted: {self.pairs_accepted}",
                f"unscored: {self.unscored}"]


def _scene_jobs(seed: int, cfg: PipelineConfig, img_dir: Path):
    scene, _ = world.gen_scene(seed)
    records, caption = extract_objects(scene)
    log.debug("scene %d: %s", seed, caption)
    kept = gen_masks(scene, records, cfg.tau_conf)
    rows = []
    for rec in kept:
        pair_rng = np.random.default_rng([seed, rec.object_id])
        base = {}
        if "removal" in cfg.tasks or "addition" in cfg.tasks:
            base["removal"] = build_edit_pair(scene, rec, "removal", pair_rng, cfg.kernel_radius)
        if "replacement" in cfg.tasks:
            base["replacement"] = build_edit_pair(scene, rec, "replacement", pair_rng, cfg.kernel_radius)
        files = {}
        for task, sample in base.items():
            stem = f"s{seed:05d}_o{rec.object_id}_{task}"
            paths = {k: f"images/{stem}_{k}.{ext}" for k, ext in (("src", "ppm"), ("tgt", "ppm"), ("mask", "pgm"))}
            write_ppm(img_dir / Path(paths["src"]).name, sample.source)
            write_ppm(img_dir / Path(paths["tgt"]).name, sample.target)
            write_pgm(img_dir / Path(paths["mask"]).name, sample.mask)
            files[task] = paths
        for task in (t for t in TASKS if t in cfg.tasks):
            if task == "addition":
                rm = base["removal"]
                sample = EditSample(rm.sample_id.replace("removal", "addition"), "addition", rm.target, rm.source,
                                    rm.mask, TEMPLATES["addition"].format(x=rec.simple_caption), meta=dict(rm.meta))
                paths = {"src": files["removal"]["tgt"], "tgt": files["removal"]["src"], "mask": files["removal"]["mask"]}
            else:
                sample, paths = base[task], files[task]
            text_rng = np.random.default_rng([seed, rec.object_id, TASKS.index(task)])
            for mode in cfg.modes:
                instruction = sample.instruction if mode == "template" else recaption(sample, rec, mode, text_rng, scene)
                rows.append((sample, mode, instruction, paths))
    return len(records), len(kept), rows


def run_pipeline(n_scenes: int, config: PipelineConfig, out_dir, scorer: ScorerAdapter | None = None):
    """Build the dataset under ``out_dir``; returns (manifest rows, stats)."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {img_dir}: {exc.strerror}") from exc
    own_scorer = scorer is None
    scorer = scorer or ScorerAdapter.from_spec(config.scorer, config.tau_q)
    seeds = [config.seed + i for i in range(n_scenes)]
    stats = PipelineStats(scenes=n_scenes)
    manifest: list[dict] = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
            results = list(pool.map(lambda s: _scene_jobs(s, config, img_dir), seeds))
        for found, kept, rows in results:
            stats.objects_found += found
            stats.masks_kept += kept
            for sample, mode, instruction, paths in rows:
                scored = EditSample(sample.sample_id, sample.task, sample.source, sample.target, sample.mask,
                                    instruction, mode, meta=sample.meta)
                accepted, scores = quality_filter(scored, scorer, str(out_dir / paths["src"]),
                                                  str(out_dir / paths["tgt"]))
                if scores is None:
                    stats.unscored += 1
                stats.pairs_built += 1
                stats.pairs_accepted += int(accepted)
                manifest.append({
                    "id": f"{sample.sample_id}_{mode}", "task": sample.task, "mode": mode,
                    "instruction": instruction, "src_path": paths["src"], "tgt_path": paths["tgt"],
                    "mask_path": paths["mask"], "scores": scores, "accepted": accepted,
                })
    finally:
        if own_scorer:
            scorer.close()
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest, stats


def write_manifest(path, rows: list[dict]) -> None:
    ids = [r["id"] for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest ids are not unique")
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def append_manifest(path, row: dict) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
