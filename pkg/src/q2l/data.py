"""Synthetic multi-label shape scenes: generation, on-disk format, loading, size buckets.

Dataset directory layout (one per split)::

    images/NNNNNN.ppm   binary PPM (P6, maxval 255)
    labels.jsonl        {"id": int, "labels": [int], "boxes": [[x, y, w, h, category]]}
    meta.json           K, canvas size, seed, bucket thresholds, category table
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 80, 230),
    "yellow": (235, 215, 40),
    "magenta": (210, 50, 210),
    "cyan": (40, 210, 210),
}
SIZE_BUCKETS = ("small", "medium", "large")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass
class DataConfig:
    n_train: int = 2000
    n_test: int = 500
    n_classes: int = 12
    n_shapes: int = 3
    n_colors: int = 4
    image_size: int = 48
    min_objects: int = 1
    max_objects: int = 5
    # P(n objects) for n = min_objects..max_objects; None → the default mix below
    count_weights: list[float] | None = None
    size_mix: tuple[float, float, float] = (0.3, 0.4, 0.3)
    small_area: int = 64
    medium_area: int = 400
    noise: int = 30
    color_jitter: int = 15

    def __post_init__(self):
        self.size_mix = tuple(float(v) for v in self.size_mix)
        self.validate()

    def validate(self) -> None:
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ValueError("need at least one sample")
        if not 1 <= self.n_shapes <= len(SHAPES):
            raise ValueError(f"n_shapes must be in [1, {len(SHAPES)}], got {self.n_shapes}")
        if not 1 <= self.n_colors <= len(COLORS):
            raise ValueError(f"n_colors must be in [1, {len(COLORS)}], got {self.n_colors}")
        if not 1 <= self.n_classes <= self.n_shapes * self.n_colors:
            raise ValueError(
                f"{self.n_classes} classes unsatisfiable with {self.n_shapes} shapes × {self.n_colors} colors"
            )
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.n_classes:
            raise ValueError("max_objects cannot exceed the number of classes (labels are distinct per image)")
        if not 0 < self.small_area < self.medium_area:
            raise ValueError("need 0 < small_area < medium_area")
        if len(self.size_mix) != 3 or min(self.size_mix) < 0 or sum(self.size_mix) <= 0:
            raise ValueError("size_mix must be three nonnegative weights")
        if self.count_weights is not None and len(self.count_weights) != self.max_objects - self.min_objects + 1:
            raise ValueError("count_weights needs one weight per object count")
        for bucket in SIZE_BUCKETS:
            lo, hi = self.side_range(bucket)
            if lo > hi:
                raise ValueError(f"canvas {self.image_size} leaves no valid side length for {bucket} objects")

    def counts_distribution(self) -> tuple[np.ndarray, np.ndarray]:
        counts = np.arange(self.min_objects, self.max_objects + 1)
        if self.count_weights is not None:
            w = np.asarray(self.count_weights, dtype=np.float64)
        elif (self.min_objects, self.max_objects) == (1, 5):
            # mean 2.9 objects per image
            w = np.array([0.14, 0.25, 0.30, 0.19, 0.12])
        else:
            w = np.ones(len(counts))
        return counts, w / w.sum()

    def side_range(self, bucket: str) -> tuple[int, int]:
        small = math.isqrt(self.small_area)
        medium = math.isqrt(self.medium_area)
        if bucket == "small":
            return min(max(5, small - 2), small), small
        if bucket == "medium":
            return small + 1, medium
        return medium + 1, min(int(self.image_size * 0.6), self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_mix"] = list(self.size_mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SceneObject:
    category: int
    shape: str
    color: str
    box: tuple[int, int, int, int]  # x, y, w, h

    @property
    def area(self) -> int:
        return self.box[2] * self.box[3]


@dataclass
class SceneSpec:
    canvas: tuple[int, int]
    objects: list[SceneObject]
    noise_seed: int

    def labels(self, n_classes: int) -> np.ndarray:
        y = np.zeros(n_classes, dtype=np.int64)
        for o in self.objects:
            y[o.category] = 1
        return y


@dataclass
class SampleRecord:
    id: int
    image: np.ndarray  # H×W×3 uint8
    y: np.ndarray  # K multi-hot
    boxes: list[tuple[int, int, int, int, int]] = field(default_factory=list)  # x, y, w, h, category


@dataclass
class Dataset:
    path: Path | None
    meta: dict
    records: list[SampleRecord]

    @property
    def n_classes(self) -> int:
        return int(self.meta["K"])

    def __len__(self) -> int:
        return len(self.records)

    @property
    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])

    @property
    def targets(self) -> np.ndarray:
        return np.stack([r.y for r in self.records])

    def thresholds(self) -> tuple[int, int]:
        t = self.meta["thresholds"]
        return int(t["small"]), int(t["medium"])


def category_table(n_classes: int, n_colors: int) -> list[dict]:
    colors = list(COLORS)
    return [
        {"id": c, "shape": SHAPES[c // n_colors], "color": colors[c % n_colors]}
        for c in range(n_classes)
    ]


# -- rendering ---------------------------------------------------------------

def _shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if shape == "square":
        return np.ones((h, w), dtype=bool)
    if shape == "circle":
        cx, cy = w / 2.0, h / 2.0
        return ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
    if shape == "triangle":
        # apex at top centre, base along the bottom edge
        return np.abs(xx - w / 2.0) <= (yy / h) * (w / 2.0)
    raise ValueError(f"unknown shape {shape!r}")


def _background(rng: np.random.Generator, size: int, noise: int) -> np.ndarray:
    base = rng.uniform(80, 150)
    c0 = base + rng.uniform(-20, 20, size=3)
    c1 = base + rng.uniform(-40, 40) + rng.uniform(-20, 20, size=3)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    t = np.cos(theta) * xx + np.sin(theta) * yy
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[None, None, :] * (1 - t[..., None]) + c1[None, None, :] * t[..., None]
    img += rng.uniform(-noise, noise, size=img.shape)
    return img


def render_scene(scene: SceneSpec, color_jitter: int = 15, noise: int = 30) -> np.ndarray:
    h, w = scene.canvas
    rng = np.random.default_rng(scene.noise_seed)
    img = _background(rng, h, noise)
    for o in scene.objects:
        x, y, bw, bh = o.box
        mask = _shape_mask(o.shape, bw, bh)
        rgb = np.asarray(COLORS[o.color], dtype=np.float64) + rng.uniform(-color_jitter, color_jitter, size=3)
        region = img[y : y + bh, x : x + bw]
        region[mask] = rgb + rng.uniform(-noise / 3, noise / 3, size=(int(mask.sum()), 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _overlap(a, b) -> int:
    ix = max(0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    return ix * iy


def _place(rng: np.random.Generator, side: int, canvas: int, boxes: list) -> tuple[int, int, int, int]:
    best, best_cost = None, None
    for _ in range(40):
        x = int(rng.integers(0, canvas - side + 1))
        y = int(rng.integers(0, canvas - side + 1))
        box = (x, y, side, side)
        # later objects paint over earlier ones; cap how much of each is hidden
        cost = max((_overlap(box, b) / (b[2] * b[3]) for b in boxes), default=0.0)
        if cost <= 0.15:
            return box
        if best_cost is None or cost < best_cost:
            best, best_cost = box, cost
    return best


def _category_plan(cfg: DataConfig, counts: list[int], rng: np.random.Generator) -> list[list[int]]:
    """Distinct categories per image, drawn from reshuffled decks so every class recurs."""
    deck: list[int] = []
    plan = []
    for n in counts:
        chosen: list[int] = []
        while len(chosen) < n:
            if not deck:
                deck = [int(c) for c in rng.permutation(cfg.n_classes)]
            pick = next((i for i, c in enumerate(deck) if c not in chosen), None)
            if pick is None:
                deck.extend(int(c) for c in rng.permutation(cfg.n_classes))
                continue
            chosen.append(deck.pop(pick))
        plan.append(chosen)
    return plan


def make_scenes(cfg: DataConfig, n: int, seed: int, split: str) -> list[SceneSpec]:
    split_code = {"train": 0, "test": 1}.get(split, 2)
    plan_rng = np.random.default_rng([seed, split_code, 0x51])
    counts_vals, counts_p = cfg.counts_distribution()
    counts = [int(v) for v in plan_rng.choice(counts_vals, size=n, p=counts_p)]
    plan = _category_plan(cfg, counts, plan_rng)
    colors = list(COLORS)
    mix = np.asarray(cfg.size_mix) / sum(cfg.size_mix)
    scenes = []
    for idx, cats in enumerate(plan):
        rng = np.random.default_rng([seed, split_code, idx])
        objects, boxes = [], []
        for c in cats:
            bucket = SIZE_BUCKETS[int(rng.choice(3, p=mix))]
            lo, hi = cfg.side_range(bucket)
            side = int(rng.integers(lo, hi + 1))
            box = _place(rng, side, cfg.image_size, boxes)
            boxes.append(box)
            objects.append(SceneObject(c, SHAPES[c // cfg.n_colors], colors[c % cfg.n_colors], box))
        scenes.append(SceneSpec((cfg.image_size, cfg.image_size), objects, int(rng.integers(2**31))))
    return scenes


# -- file formats --------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs H×W×3 uint8, got {image.dtype} {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


_PPM_HEADER = re.compile(rb"P6\n(\d+) (\d+)\n255\n")


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PPM_HEADER.match(data)
    if not m:
        raise DatasetError(f"{path}: malformed PPM header")
    w, h = int(m.group(1)), int(m.group(2))
    body = data[m.end():]
    if len(body) != w * h * 3:
        raise DatasetError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)} (truncated or padded)")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise ValueError(f"PGM needs H×W uint8, got {image.dtype} {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\n(\d+) (\d+)\n255\n", data)
    if not m:
        raise DatasetError(f"{path}: malformed PGM header")
    w, h = int(m.group(1)), int(m.group(2))
    body = data[m.end():]
    if len(body) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_split(out_dir, cfg: DataConfig, scenes: list[SceneSpec], seed: int, split: str) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for idx, scene in enumerate(scenes):
        write_ppm(out / "images" / f"{idx:06d}.ppm", render_scene(scene, cfg.color_jitter, cfg.noise))
        labels = sorted({o.category for o in scene.objects})
        boxes = [[*o.box, o.category] for o in scene.objects]
        lines.append(_dump_json({"id": idx, "labels": labels, "boxes": boxes}))
    (out / "labels.jsonl").write_text("".join(line + "\n" for line in lines))
    meta = {
        "K": cfg.n_classes,
        "canvas": [cfg.image_size, cfg.image_size],
        "seed": seed,
        "split": split,
        "n_samples": len(scenes),
        "thresholds": {"small": cfg.small_area, "medium": cfg.medium_area},
        "categories": category_table(cfg.n_classes, cfg.n_colors),
        "config": cfg.to_dict(),
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return out


def generate_dataset(out_dir, config: DataConfig | None = None, seed: int = 0) -> dict[str, Path]:
    """Write ``train/`` and ``test/`` splits under ``out_dir``; byte-deterministic in ``seed``."""
    cfg = config or DataConfig()
    cfg.validate()
    required = math.ceil(0.01 * cfg.n_train)
    if cfg.n_train and cfg.n_train * cfg.max_objects < cfg.n_classes * required:
        raise ValueError("unsatisfiable config: too few objects for every class to reach 1% of training images")
    paths = {}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        if n == 0:
            continue
        scenes = make_scenes(cfg, n, seed, split)
        if split == "train":
            freq = np.zeros(cfg.n_classes, dtype=int)
            for s in scenes:
                freq += s.labels(cfg.n_classes)
            if freq.min() < required:
                raise ValueError(
                    f"unsatisfiable config: class {int(freq.argmin())} appears in {int(freq.min())} "
                    f"training images (< {required})"
                )
        paths[split] = write_split(Path(out_dir) / split, cfg, scenes, seed, split)
    return paths


def load_dataset(path) -> Dataset:
    """Load one split directory, validating every record against ``meta.json``."""
    root = Path(path)
    if not (root / "meta.json").exists() and (root / "train" / "meta.json").exists():
        raise DatasetError(f"{root} holds several splits; pass {root / 'train'} or {root / 'test'}")
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{root}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{root / 'meta.json'}: {exc}") from None
    for key in ("K", "canvas", "thresholds"):
        if key not in meta:
            raise DatasetError(f"{root / 'meta.json'}: missing key {key!r}")
    k = int(meta["K"])
    h, w = (int(v) for v in meta["canvas"])
    label_path = root / "labels.jsonl"
    if not label_path.exists():
        raise DatasetError(f"{root}: missing labels.jsonl")
    records = []
    for lineno, line in enumerate(label_path.read_text().splitlines(), start=1):
        where = f"{label_path}:{lineno}"
        try:
            obj = json.loads(line)
            rid, labels, boxes = int(obj["id"]), [int(v) for v in obj["labels"]], obj["boxes"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: malformed label line ({exc})") from None
        if rid != lineno - 1:
            raise DatasetError(f"{where}: id {rid} out of sequence")
        if any(not 0 <= c < k for c in labels):
            raise DatasetError(f"{where}: label outside [0, {k})")
        parsed = []
        for b in boxes:
            if len(b) != 5:
                raise DatasetError(f"{where}: box {b} must be [x, y, w, h, category]")
            x, y, bw, bh, c = (int(v) for v in b)
            if not 0 <= c < k:
                raise DatasetError(f"{where}: box category {c} outside [0, {k})")
            if bw < 1 or bh < 1 or x < 0 or y < 0 or x + bw > w or y + bh > h:
                raise DatasetError(f"{where}: box {b} outside {w}×{h} canvas")
            parsed.append((x, y, bw, bh, c))
        if sorted(set(labels)) != sorted({b[4] for b in parsed}) or len(set(labels)) != len(labels):
            raise DatasetError(f"{where}: labels {labels} inconsistent with boxes")
        image = read_ppm(root / "images" / f"{rid:06d}.ppm")
        if image.shape != (h, w, 3):
            raise DatasetError(f"image {rid:06d}.ppm is {image.shape[:2]}, meta says {(h, w)}")
        y_vec = np.zeros(k, dtype=np.int64)
        y_vec[labels] = 1
        records.append(SampleRecord(rid, image, y_vec, parsed))
    if "n_samples" in meta and int(meta["n_samples"]) != len(records):
        raise DatasetError(f"{root}: meta lists {meta['n_samples']} samples, found {len(records)}")
    return Dataset(root, meta, records)


# -- size buckets ----------------------------------------------------------------

def size_bucket(area: int, small_area: int, medium_area: int) -> str:
    """Small if area <= small_area, medium if <= medium_area, else large."""
    if area <= small_area:
        return "small"
    if area <= medium_area:
        return "medium"
    return "large"


@dataclass
class BucketView:
    name: str
    mask: np.ndarray  # N×K: pairs entering this bucket's AP computation
    positive_pairs: int


def size_bucket_eval_split(dataset: Dataset | list[SampleRecord], n_classes: int | None = None,
                           thresholds: tuple[int, int] | None = None) -> dict[str, BucketView]:
    """Assign each positive (sample, category) pair to the bucket of that
    category's largest object in the sample.

    Each view's mask holds its positive pairs plus every negative pair, so
    per-bucket AP ranks bucket positives against all absent-category images.
    """
    if isinstance(dataset, Dataset):
        records = dataset.records
        n_classes = n_classes or dataset.n_classes
        thresholds = thresholds or dataset.thresholds()
    else:
        records = dataset
        if n_classes is None or thresholds is None:
            raise ValueError("n_classes and thresholds are required for a bare record list")
    a_s, a_m = thresholds
    n = len(records)
    y = np.zeros((n, n_classes), dtype=bool)
    which = np.full((n, n_classes), -1)
    for i, rec in enumerate(records):
        y[i] = np.asarray(rec.y, dtype=bool)
        largest: dict[int, int] = {}
        for x0, y0, bw, bh, c in rec.boxes:
            largest[c] = max(largest.get(c, 0), bw * bh)
        for c in np.flatnonzero(y[i]):
            if int(c) not in largest:
                raise ValueError(f"sample {rec.id}: category {int(c)} has no box")
            which[i, c] = SIZE_BUCKETS.index(size_bucket(largest[int(c)], a_s, a_m))
    views = {}
    for b, name in enumerate(SIZE_BUCKETS):
        pos = which == b
        views[name] = BucketView(name, pos | ~y, int(pos.sum()))
    return views
