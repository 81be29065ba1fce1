"""Deterministic scene world: flat-coloured shapes on a plain background.

The world plays the part of the photo corpus plus the captioning/segmentation
models: every scene carries its exact object list, so captions, masks and
inpainted targets can be produced without any learned component.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

IMAGE_SIZE = 32

SHAPE_KINDS = ("circle", "square", "triangle")

SHAPE_COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 210, 40),
    "purple": (140, 60, 190),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "pink": (240, 130, 180),
}

BACKGROUND_COLORS: dict[str, tuple[int, int, int]] = {
    "white": (245, 245, 245),
    "gray": (128, 128, 128),
    "black": (20, 20, 20),
    "beige": (225, 210, 170),
}

REGION_WORDS = ("top left", "top", "top right", "left", "center", "right",
                "bottom left", "bottom", "bottom right")
SIZE_WORDS = ("small", "medium-sized", "large")

MIN_SIZE, MAX_SIZE = 4.0, 9.0


@dataclass(frozen=True)
class Shape:
    kind: str
    color: str
    cx: float
    cy: float
    size: float

    @property
    def caption(self) -> str:
        return f"{self.color} {self.kind}"


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    background: str
    shapes: tuple[Shape, ...] = field(default_factory=tuple)  # back-to-front z-order
    size: int = IMAGE_SIZE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shapes"] = [asdict(s) for s in self.shapes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        return cls(seed=d["seed"], background=d["background"],
                   shapes=tuple(Shape(**s) for s in d["shapes"]), size=d.get("size", IMAGE_SIZE))

    def without(self, i: int) -> SceneSpec:
        return replace(self, shapes=self.shapes[:i] + self.shapes[i + 1:])

    def substituted(self, i: int, shape: Shape) -> SceneSpec:
        return replace(self, shapes=self.shapes[:i] + (shape,) + self.shapes[i + 1:])


def shape_mask(shape: Shape, size: int = IMAGE_SIZE) -> np.ndarray:
    """Pixels whose centre lies inside the shape."""
    ys, xs = np.mgrid[0:size, 0:size]
    px, py = xs + 0.5 - shape.cx, ys + 0.5 - shape.cy
    s = shape.size
    if shape.kind == "circle":
        return px * px + py * py <= s * s
    if shape.kind == "square":
        return (np.abs(px) <= s) & (np.abs(py) <= s)
    if shape.kind == "triangle":
        # apex up at (0, -s), base corners (+-s, +s)
        return (py <= s) & (2 * px + py + s >= 0) & (-2 * px + py + s >= 0)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render(scene: SceneSpec) -> np.ndarray:
    img = np.empty((scene.size, scene.size, 3), dtype=np.uint8)
    img[:] = BACKGROUND_COLORS[scene.background]
    for shape in scene.shapes:
        img[shape_mask(shape, scene.size)] = SHAPE_COLORS[shape.color]
    return img


def visible_masks(scene: SceneSpec) -> list[np.ndarray]:
    """Per shape, the pixels not covered by any shape drawn later."""
    covered = np.zeros((scene.size, scene.size), dtype=bool)
    out = []
    for shape in reversed(scene.shapes):
        m = shape_mask(shape, scene.size)
        out.append(m & ~covered)
        covered |= m
    return out[::-1]


def gen_scene(seed: int, size: int = IMAGE_SIZE) -> tuple[SceneSpec, np.ndarray]:
    rng = np.random.default_rng(seed)
    colors = list(SHAPE_COLORS)
    while True:
        background = str(rng.choice(list(BACKGROUND_COLORS)))
        n = int(rng.integers(1, 5))
        picked = rng.choice(len(colors), size=n, replace=False)
        shapes = []
        for ci in picked:
            s = float(np.round(rng.uniform(MIN_SIZE, MAX_SIZE), 2))
            lo, hi = 0.6 * s, size - 0.6 * s
            shapes.append(Shape(
                kind=str(rng.choice(SHAPE_KINDS)),
                color=colors[int(ci)],
                cx=float(np.round(rng.uniform(lo, hi), 2)),
                cy=float(np.round(rng.uniform(lo, hi), 2)),
                size=s,
            ))
        scene = SceneSpec(seed=seed, background=background, shapes=tuple(shapes), size=size)
        if all(m.any() for m in visible_masks(scene)):
            return scene, render(scene)


def region_word(shape: Shape, size: int = IMAGE_SIZE) -> str:
    col = min(int(shape.cx * 3 // size), 2)
    row = min(int(shape.cy * 3 // size), 2)
    return REGION_WORDS[row * 3 + col]


def size_word(shape: Shape) -> str:
    if shape.size < 5.5:
        return "small"
    if shape.size > 7.5:
        return "large"
    return "medium-sized"


def detailed_caption(shape: Shape, size: int = IMAGE_SIZE) -> str:
    return (f"a {size_word(shape)} {shape.kind} near the {region_word(shape, size)} of the image, "
            f"colored {shape.color}")


def global_caption(scene: SceneSpec) -> str:
    if not scene.shapes:
        return f"an empty {scene.background} background"
    names = [f"a {s.caption}" for s in scene.shapes]
    listed = names[0] if len(names) == 1 else ", ".join(names[:-1]) + " and " + names[-1]
    return f"{listed} on a {scene.background} background"
