"""Synthetic image / caption / mask triples of colored shapes.

On-disk layout of a split directory::

    index.tsv      one line per sample: "<image file>\\t<caption>\\n"
    NNNNNN.ppm     binary PPM (P6), 8-bit RGB
    NNNNNN.pgm     binary PGM (P5), 8-bit class index per pixel, 255 = ignore
    classes.txt    class names, line number = class index (0 = background)
    lexicon.txt    recognized nouns, one per line
    vocab.txt      tokenizer vocabulary
    templates.txt  prompt templates

PPM/PGM headers are exactly ``b"P6\\n<W> <H>\\n255\\n"`` / ``b"P5\\n<W> <H>\\n255\\n"``
followed by raw row-major bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import text as txt

SHAPES = ("circle", "square", "triangle", "cross", "ring")
COLORS = {
    "red": (230, 25, 25),
    "green": (25, 200, 50),
    "blue": (40, 60, 240),
    "yellow": (240, 225, 25),
    "purple": (150, 40, 200),
}
BACKGROUND = "background"
CLASS_NAMES = (BACKGROUND,) + SHAPES
IGNORE_INDEX = 255

IMAGE_SIZE = 64
MIN_RADIUS, MAX_RADIUS = 9.0, 14.0
MAX_OBJECTS = 3
_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    center: tuple[float, float]  # (row, col) in pixels
    size: float  # outer radius in pixels


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    background_color: tuple[int, int, int]
    seed: int


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, 3) float64 in [0, 1], multiples of 1/255
    caption: str
    mask: np.ndarray  # (H, W) uint8 class indices
    nouns: list[str]
    scene: SceneSpec | None = None


def shape_mask(shape: str, center, size: float, image_size: int = IMAGE_SIZE) -> np.ndarray:
    """Boolean pixel mask of one shape, sampled at pixel centers."""
    rows, cols = np.mgrid[0:image_size, 0:image_size] + 0.5
    dy, dx = rows - center[0], cols - center[1]
    r = size
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        h = 0.85 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "triangle":
        # upward equilateral triangle inscribed in the circle of radius r
        s3 = np.sqrt(3.0)
        return (dy <= r / 2) & (s3 * dx - dy <= r) & (-s3 * dx - dy <= r)
    if shape == "cross":
        t = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= t)) | ((np.abs(dy) <= r) & (np.abs(dx) <= t))
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def analytic_area(shape: str, size: float) -> float:
    r = size
    return {
        "circle": np.pi * r * r,
        "square": (1.7 * r) ** 2,
        "triangle": 3 * np.sqrt(3) / 4 * r * r,
        "cross": 2 * (2 * r) * (2 * r / 3) - (2 * r / 3) ** 2,
        "ring": np.pi * r * r * (1 - 0.55**2),
    }[shape]


def sample_scene(seed: int, image_size: int = IMAGE_SIZE, max_tries: int = 200) -> SceneSpec:
    rng = np.random.default_rng(seed)
    wanted = int(rng.integers(1, MAX_OBJECTS + 1))
    bg = tuple(int(v) for v in rng.integers(20, 110, size=3))
    objects: list[SceneObject] = []
    occupied = np.zeros((image_size, image_size), dtype=bool)
    for _ in range(wanted):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = list(COLORS)[int(rng.integers(len(COLORS)))]
        for _ in range(max_tries):
            size = float(rng.uniform(MIN_RADIUS, MAX_RADIUS))
            center = tuple(float(c) for c in rng.uniform(size, image_size - size, size=2))
            m = shape_mask(shape, center, size, image_size)
            # one-pixel margin keeps objects visually separate
            grown = m | np.roll(m, 1, 0) | np.roll(m, -1, 0) | np.roll(m, 1, 1) | np.roll(m, -1, 1)
            if not (grown & occupied).any():
                objects.append(SceneObject(shape, color, center, size))
                occupied |= m
                break
    return SceneSpec(tuple(objects), bg, seed)


def caption_for(scene: SceneSpec) -> str:
    parts = [f"a {o.color} {o.shape}" for o in scene.objects]
    return "a photo of " + " and ".join(parts)


def render(scene: SceneSpec, image_size: int = IMAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    img = np.empty((image_size, image_size, 3), dtype=np.uint8)
    img[:] = scene.background_color
    mask = np.zeros((image_size, image_size), dtype=np.uint8)
    for obj in scene.objects:
        m = shape_mask(obj.shape, obj.center, obj.size, image_size)
        img[m] = COLORS[obj.color]
        mask[m] = CLASS_NAMES.index(obj.shape)
    return img, mask


def generate_sample(seed: int, image_size: int = IMAGE_SIZE) -> SampleRecord:
    scene = sample_scene(seed, image_size)
    img, mask = render(scene, image_size)
    nouns = [o.shape for o in scene.objects]
    return SampleRecord(img.astype(np.float64) / 255.0, caption_for(scene), mask, nouns, scene)


def sample_seed(seed: int, split: str, i: int) -> int:
    """Per-sample seed; different splits never share one."""
    ss = np.random.SeedSequence([seed, _SPLIT_IDS[split], i])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def vocabulary() -> txt.Vocabulary:
    ws = txt.words(" ".join(txt.DEFAULT_TEMPLATES).replace(txt.NOUN_PLACEHOLDER, ""))
    ws += ["a", "photo", "of", "and"] + list(COLORS) + list(SHAPES) + [BACKGROUND]
    return txt.Vocabulary.from_words(ws)


# ---------------------------------------------------------------- PNM files


def write_ppm(path, img: np.ndarray) -> None:
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.ascontiguousarray(mask, dtype=np.uint8)
    h, w = mask.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + mask.tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != magic or int(fields[3]) != 255:
        raise ValueError(f"{path}: expected 8-bit {magic.decode()} file")
    w, h = int(fields[1]), int(fields[2])
    raster = np.frombuffer(blob, dtype=np.uint8, count=w * h * channels, offset=pos)
    return raster.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


# ---------------------------------------------------------------- splits


def generate_split(out_dir, n: int, seed: int, split: str = "train", image_size: int = IMAGE_SIZE) -> Path:
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        scene = sample_scene(sample_seed(seed, split, i), image_size)
        img, mask = render(scene, image_size)
        name = f"{i:06d}"
        write_ppm(out / f"{name}.ppm", img)
        write_pgm(out / f"{name}.pgm", mask)
        lines.append(f"{name}.ppm\t{caption_for(scene)}")
    txt.save_lines(out / "index.tsv", lines)
    txt.save_lines(out / "classes.txt", CLASS_NAMES)
    txt.save_lines(out / "lexicon.txt", SHAPES)
    txt.save_lines(out / "templates.txt", txt.DEFAULT_TEMPLATES)
    vocabulary().save(out / "vocab.txt")
    return out


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W, 3) float64
    masks: np.ndarray  # (n, H, W) uint8
    captions: list[str]
    names: list[str]

    def __len__(self) -> int:
        return len(self.captions)


def load_split(directory) -> Dataset:
    d = Path(directory)
    index = d / "index.tsv"
    if not index.exists():
        raise FileNotFoundError(f"{index}: no index file")
    names, captions, images, masks = [], [], [], []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        name, caption = line.split("\t", 1)
        names.append(name)
        captions.append(caption)
        images.append(read_ppm(d / name).astype(np.float64) / 255.0)
        masks.append(read_pgm(d / (Path(name).stem + ".pgm")))
    return Dataset(np.stack(images), np.stack(masks), captions, names)


def in_memory_split(n: int, seed: int, split: str = "train", image_size: int = IMAGE_SIZE) -> Dataset:
    """Same content as :func:`generate_split` + :func:`load_split`, without touching disk."""
    recs = [generate_sample(sample_seed(seed, split, i), image_size) for i in range(n)]
    return Dataset(
        np.stack([r.image for r in recs]),
        np.stack([r.mask for r in recs]),
        [r.caption for r in recs],
        [f"{i:06d}.ppm" for i in range(n)],
    )
