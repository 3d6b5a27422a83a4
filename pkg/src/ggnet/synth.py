"""Deterministic synthetic scene generator.

Each verb has a distinct spatial signature (mean human->object displacement
direction, directions evenly spaced on the circle) and a distinct object
texture; each object class has a distinct color and is meaningful for exactly
two verbs, so inferred hard negatives always exist. Scenes are rectangles on
a noisy background; annotation boxes bound the drawn rectangles pixel-exactly.

Placement draws the displacement first and then positions the whole pair
jointly, so border rejection does not bias the displacement statistics.
"""

from __future__ import annotations

import colorsys
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .losses import HoiAnnotation, HoiCategoryTable, format_annotation, parse_annotations, save_table
from .tensor import ConfigError, Tensor, load_ggt, save_ggt


def worker_count() -> int:
    """Thread cap from GGNET_THREADS; defaults to 1 (fully deterministic)."""
    try:
        return max(1, int(os.environ.get("GGNET_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class SceneSpec:
    """Scene distribution parameters; (seed, image index) pins every image."""

    seed: int = 0
    image_size: int = 64
    num_verbs: int = 4
    num_objects: int = 4
    min_instances: int = 1
    max_instances: int = 3
    displacement: float = 16.0
    jitter: float = 2.0
    rare_fraction: float = 0.2
    rare_cap: int = 8

    def __post_init__(self):
        if not (1 <= self.num_verbs <= 12):
            # directions are spaced 360/num_verbs degrees apart and need >= 30
            raise ConfigError(f"num_verbs must be in 1..12, got {self.num_verbs}")
        if self.num_objects < 1:
            raise ConfigError("need at least one object class")
        if self.image_size < 48:
            raise ConfigError("image_size below 48 leaves no room for a pair")
        if not (1 <= self.min_instances <= self.max_instances):
            raise ConfigError("bad instance count range")
        if self.displacement <= 0 or self.jitter < 0:
            raise ConfigError("displacement must be positive, jitter nonnegative")
        if not (0.0 <= self.rare_fraction < 1.0) or self.rare_cap < 1 or self.rare_cap >= 10:
            raise ConfigError("rare_fraction in [0,1), rare_cap in 1..9")


def verb_direction(verb: int, num_verbs: int) -> tuple[float, float]:
    angle = 2.0 * math.pi * verb / num_verbs
    return math.cos(angle), math.sin(angle)


def meaningful_pairs(spec: SceneSpec) -> list[tuple[int, int]]:
    pairs = set()
    for ocls in range(spec.num_objects):
        pairs.add((ocls % spec.num_verbs, ocls))
        pairs.add(((ocls + 1) % spec.num_verbs, ocls))
    return sorted(pairs)


def build_table(spec: SceneSpec) -> HoiCategoryTable:
    pairs = meaningful_pairs(spec)
    rare_count = int(round(spec.rare_fraction * len(pairs)))
    rare = frozenset()
    if rare_count:
        rng = np.random.default_rng([spec.seed, 104729])
        picked = rng.choice(len(pairs), size=rare_count, replace=False)
        rare = frozenset(pairs[i] for i in sorted(int(j) for j in picked))
    return HoiCategoryTable(spec.num_verbs, spec.num_objects, frozenset(pairs), rare)


def _place_pair(spec: SceneSpec, rng, verb: int):
    """Integer human/object rectangles with the verb's displacement; None if
    no in-bounds placement found."""
    size = spec.image_size
    hw = int(rng.integers(10, 15))
    hh = int(rng.integers(14, 19))
    ow = int(rng.integers(8, 13))
    oh = int(rng.integers(8, 13))
    dir_x, dir_y = verb_direction(verb, spec.num_verbs)
    for _ in range(100):
        dx = dir_x * spec.displacement + rng.normal(0.0, spec.jitter)
        dy = dir_y * spec.displacement + rng.normal(0.0, spec.jitter)
        # object corner relative to human corner, keeping centers dx/dy apart
        rel_x = round((hw - ow) / 2.0 + dx)
        rel_y = round((hh - oh) / 2.0 + dy)
        lo_x, hi_x = max(0, -rel_x), min(size - hw, size - ow - rel_x)
        lo_y, hi_y = max(0, -rel_y), min(size - hh, size - oh - rel_y)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        hx1 = int(rng.integers(lo_x, hi_x + 1))
        hy1 = int(rng.integers(lo_y, hi_y + 1))
        ox1, oy1 = hx1 + rel_x, hy1 + rel_y
        return (hx1, hy1, hx1 + hw, hy1 + hh), (ox1, oy1, ox1 + ow, oy1 + oh)
    return None


def _draw_human(img: np.ndarray, box) -> None:
    x1, y1, x2, y2 = box
    img[:, y1:y2, x1:x2] = 0.55
    img[:, y1:y1 + max(1, (y2 - y1) // 4), x1:x2] = 0.85


def _draw_object(img: np.ndarray, box, ocls: int, verb: int, num_objects: int) -> None:
    x1, y1, x2, y2 = box
    r, g, b = colorsys.hsv_to_rgb((ocls / num_objects) % 1.0, 0.9, 1.0)
    base = np.array([r, g, b], np.float32).reshape(3, 1, 1)
    pattern = np.ones((y2 - y1, x2 - x1), np.float32)
    style = verb % 4
    if style == 1:
        pattern[0::2, :] = 0.35
    elif style == 2:
        pattern[:, 0::2] = 0.35
    elif style == 3:
        yy, xx = np.indices(pattern.shape)
        pattern[(yy + xx) % 2 == 1] = 0.35
    img[:, y1:y2, x1:x2] = base * pattern


def generate_scene(spec: SceneSpec, rng, pairs=None, draw_once=frozenset()):
    """One rendered scene: (image Tensor (1,3,s,s), annotations).

    pairs restricts the sampled (verb, object) pool; pairs listed in draw_once
    are removed from the pool after their first instance in this scene.
    """
    size = spec.image_size
    img = rng.uniform(0.0, 0.08, (3, size, size)).astype(np.float32)
    pool = list(pairs) if pairs is not None else meaningful_pairs(spec)
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    annos = []
    for _ in range(count):
        if not pool:
            break
        verb, ocls = pool[int(rng.integers(len(pool)))]
        if (verb, ocls) in draw_once:
            pool.remove((verb, ocls))
        placed = _place_pair(spec, rng, verb)
        if placed is None:
            continue
        human, obj = placed
        _draw_human(img, human)
        _draw_object(img, obj, ocls, verb, spec.num_objects)
        annos.append(HoiAnnotation(tuple(float(v) for v in human),
                                   tuple(float(v) for v in obj), verb, ocls))
    image = Tensor((1, 3, size, size), img, requires_grad=False)
    return image, annos


def make_dataset(spec: SceneSpec, out_dir, n_train: int = 200, n_test: int = 50) -> HoiCategoryTable:
    """Write images/*.ggt, annos/*.txt, table.txt, manifest.txt.

    Rare categories are capped under 10 training instances by pre-assigning
    each one rare_cap train images where it may appear (at most once each);
    that keeps generation independent per image, so threading cannot change
    the output.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annos").mkdir(parents=True, exist_ok=True)
    table = build_table(spec)
    save_table(out / "table.txt", table)
    pairs = sorted(table.meaningful)
    alloc_rng = np.random.default_rng([spec.seed, 7919])
    allowance = {}
    for pair in sorted(table.rare):
        picked = alloc_rng.choice(n_train, size=min(spec.rare_cap, n_train), replace=False)
        allowance[pair] = frozenset(int(i) for i in picked)

    jobs = []
    manifest_lines = []
    for split_tag, split, count in ((0, "train", n_train), (1, "test", n_test)):
        for idx in range(count):
            image_id = f"{split}_{idx:04d}"
            manifest_lines.append(f"{split} {image_id}")
            jobs.append((split_tag, split, idx, image_id))

    def build(job) -> None:
        split_tag, split, idx, image_id = job
        rng = np.random.default_rng([spec.seed, split_tag, idx])
        if split == "train":
            allowed = [p for p in pairs if p not in table.rare or idx in allowance[p]]
            once = table.rare
        else:
            allowed, once = pairs, frozenset()
        image, annos = generate_scene(spec, rng, allowed, once)
        save_ggt(out / "images" / f"{image_id}.ggt", image)
        with open(out / "annos" / f"{image_id}.txt", "w") as f:
            for a in annos:
                f.write(format_annotation(image_id, a) + "\n")

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_exec:
            list(pool_exec.map(build, jobs))
    else:
        for job in jobs:
            build(job)
    with open(out / "manifest.txt", "w") as f:
        f.write("\n".join(manifest_lines) + "\n")
    return table


@dataclass
class SceneSample:
    image_id: str
    image: Tensor | None
    annotations: list


def load_manifest(data_dir) -> dict[str, list[str]]:
    splits: dict[str, list[str]] = {}
    with open(Path(data_dir) / "manifest.txt") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ConfigError(f"bad manifest line: {line.strip()!r}")
            splits.setdefault(parts[0], []).append(parts[1])
    return splits


def load_sample(data_dir, image_id: str, with_image: bool = True) -> SceneSample:
    root = Path(data_dir)
    image = load_ggt(root / "images" / f"{image_id}.ggt") if with_image else None
    if image is not None:
        image.requires_grad = False
    with open(root / "annos" / f"{image_id}.txt") as f:
        annos = parse_annotations(f).get(image_id, [])
    return SceneSample(image_id, image, annos)


def load_split(data_dir, split: str, with_images: bool = True) -> list[SceneSample]:
    splits = load_manifest(data_dir)
    if split not in splits:
        raise ConfigError(f"split {split!r} not in manifest (have {sorted(splits)})")
    return [load_sample(data_dir, image_id, with_images) for image_id in splits[split]]
