"""Synthetic relation datasets, annotation files, and split statistics.

Each generated image renders persons as colored rectangles on a noisy
background. The relation class of a pair is a fixed function of the two
person colors and their center distance (hashed through splitmix64 and
mapped through the requested class profile), so labels are symmetric,
learnable from pixels, and match the profile marginals. Everything is
reproducible byte-for-byte from the seed.

Annotation files are JSON: a top-level list of objects
{"id", "image", "persons", "relations"} where "image" is either a relative
.npy path or a "synthetic:..." token that re-renders the pixels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .backbone import PersonBox
from .errors import DataError
from .loss import ClassWeights, compute_class_weights

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.10],
        [0.15, 0.25, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.15, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.55, 0.10, 0.95],
        [0.60, 0.40, 0.20],
        [0.80, 0.80, 0.80],
    ],
    dtype=np.float32,
)

# distance enters the label hash at sub-pixel granularity so that class
# marginals track the requested profile over thousands of hash cells
_DIST_QUANTUM = 0.004
_MAX_DIST_CELL = (1 << 14) - 1


@dataclass
class AnnotatedImage:
    image_id: str
    image: np.ndarray                      # [3,H,W] float32 in [0,1]
    persons: list
    relations: list                        # (i, j, class) with i < j
    source: str = ""

    @property
    def num_persons(self) -> int:
        return len(self.persons)


@dataclass
class DatasetStats:
    num_images: int
    num_classes: int
    class_counts: np.ndarray
    persons_hist: dict
    unique_relations_hist: dict
    max_persons: int
    pair_count: int
    weights: ClassWeights | None = field(default=None)


def _splitmix64(z: np.uint64) -> np.uint64:
    z = np.uint64(z) + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def pair_class(color_a: int, color_b: int, distance: float, cum_profile: np.ndarray) -> int:
    """Deterministic symmetric class for a person pair."""
    lo, hi = (color_a, color_b) if color_a <= color_b else (color_b, color_a)
    cell = min(int(distance / _DIST_QUANTUM), _MAX_DIST_CELL)
    key = (np.uint64(lo) * np.uint64(1 << 40)
           + np.uint64(hi) * np.uint64(1 << 28)
           + np.uint64(cell))
    with np.errstate(over="ignore"):
        u = _splitmix64(key)
    v = float(u) / float(1 << 64)
    return int(np.searchsorted(cum_profile, v, side="right"))


def _validate_profile(profile, num_classes: int) -> np.ndarray:
    if profile is None:
        profile = np.full(num_classes, 1.0 / num_classes)
    profile = np.asarray(profile, dtype=np.float64)
    if len(profile) != num_classes:
        raise DataError(f"profile has {len(profile)} entries for {num_classes} classes")
    if (profile <= 0).any() or abs(profile.sum() - 1.0) > 1e-6:
        raise DataError("imbalance profile must be positive and sum to 1")
    return profile


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


def _synth_layout(rng, size: int, p_lo: int, p_hi: int, num_colors: int):
    p = int(rng.integers(p_lo, p_hi + 1))
    colors = rng.integers(0, num_colors, size=p)
    boxes = []
    centers = []
    for _ in range(p):
        for _attempt in range(20):
            bw = rng.uniform(0.18, 0.36)
            bh = rng.uniform(0.18, 0.36)
            x1 = rng.uniform(0.0, 1.0 - bw)
            y1 = rng.uniform(0.0, 1.0 - bh)
            cx, cy = x1 + bw / 2, y1 + bh / 2
            if all((cx - ox) ** 2 + (cy - oy) ** 2 >= 0.20 ** 2 for ox, oy in centers):
                break
        boxes.append(PersonBox.from_floats(x1, y1, x1 + bw, y1 + bh))
        centers.append((cx, cy))
    return p, colors, boxes, centers


def _render(rng, size: int, colors, boxes) -> np.ndarray:
    img = rng.uniform(0.25, 0.45, size=(3, size, size)).astype(np.float32)
    for color_idx, box in zip(colors, boxes):
        px1 = min(int(np.floor(box.x1 * size)), size - 1)
        px2 = max(min(int(np.ceil(box.x2 * size)), size), px1 + 1)
        py1 = min(int(np.floor(box.y1 * size)), size - 1)
        py2 = max(min(int(np.ceil(box.y2 * size)), size), py1 + 1)
        img[:, py1:py2, px1:px2] = PALETTE[color_idx][:, None, None]
    return img


def _synth_image(seed: int, index: int, size: int, p_lo: int, p_hi: int, num_colors: int):
    rng = _image_rng(seed, index)
    p, colors, boxes, centers = _synth_layout(rng, size, p_lo, p_hi, num_colors)
    img = _render(rng, size, colors, boxes)
    return img, colors, boxes, centers


def synthetic_token(seed, index, size, p_lo, p_hi, num_colors) -> str:
    return f"synthetic:{seed}:{index}:{size}:{p_lo}:{p_hi}:{num_colors}"


def render_from_token(token: str) -> tuple[np.ndarray, list]:
    parts = token.split(":")
    if len(parts) != 7 or parts[0] != "synthetic":
        raise DataError(f"bad synthetic image token {token!r}")
    seed, index, size, p_lo, p_hi, num_colors = (int(v) for v in parts[1:])
    img, _, boxes, _ = _synth_image(seed, index, size, p_lo, p_hi, num_colors)
    return img, boxes


def generate_synthetic(num_images: int, num_classes: int, p_range=(2, 4), profile=None,
                       seed: int = 0, image_size: int = 32, num_colors: int = 6):
    """Deterministic synthetic dataset; identical seeds give identical bytes."""
    if num_classes < 2:
        raise DataError(f"need at least 2 classes, got {num_classes}")
    if num_images < 1:
        raise DataError("need at least one image")
    p_lo, p_hi = int(p_range[0]), int(p_range[1])
    if p_lo < 2 or p_hi < p_lo:
        raise DataError(f"invalid person range {p_range}")
    if num_colors > len(PALETTE):
        raise DataError(f"at most {len(PALETTE)} colors supported")
    profile = _validate_profile(profile, num_classes)
    cum = np.cumsum(profile)

    dataset = []
    for idx in range(num_images):
        img, colors, boxes, centers = _synth_image(seed, idx, image_size, p_lo, p_hi, num_colors)
        relations = []
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                dx = centers[i][0] - centers[j][0]
                dy = centers[i][1] - centers[j][1]
                # sqrt of exact-rounded products keeps the value platform-stable
                dist = float(np.sqrt(dx * dx + dy * dy))
                cls = pair_class(int(colors[i]), int(colors[j]), dist, cum)
                relations.append((i, j, cls))
        dataset.append(
            AnnotatedImage(
                image_id=f"syn-{seed}-{idx:05d}",
                image=img,
                persons=boxes,
                relations=relations,
                source=synthetic_token(seed, idx, image_size, p_lo, p_hi, num_colors),
            )
        )
    return dataset


# ---------------------------------------------------------------------------
# Annotation files
# ---------------------------------------------------------------------------

def save_annotations(dataset, path, store_pixels: bool = False):
    """Write the JSON annotation list; synthetic images stay as tokens
    unless store_pixels forces .npy sidecar files."""
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    entries = []
    for img in dataset:
        ref = img.source
        if store_pixels or not ref.startswith("synthetic:"):
            ref = f"{img.image_id}.npy"
            np.save(os.path.join(base, ref), img.image)
        entries.append(
            {
                "id": img.image_id,
                "image": ref,
                "persons": [[b.x1, b.y1, b.x2, b.y2] for b in img.persons],
                "relations": [[i, j, c] for i, j, c in img.relations],
            }
        )
    with open(path, "w", encoding="utf-8") as f:
        json.dump(entries, f)


def load_annotations(path):
    """Parse and validate an annotation file into AnnotatedImage records."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            entries = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read annotations {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed JSON in {path} at line {e.lineno}: {e.msg}") from e
    if not isinstance(entries, list):
        raise DataError(f"{path}: top level must be a list of image objects")

    base = os.path.dirname(os.path.abspath(path))
    dataset = []
    seen_ids = set()
    for pos, entry in enumerate(entries):
        where = f"{path}[{pos}]"
        if not isinstance(entry, dict):
            raise DataError(f"{where}: entry is not an object")
        try:
            image_id = str(entry["id"])
            ref = str(entry["image"])
            persons_raw = entry["persons"]
            relations_raw = entry["relations"]
        except KeyError as e:
            raise DataError(f"{where}: missing field {e.args[0]!r}") from e
        if image_id in seen_ids:
            raise DataError(f"{where}: duplicate image id {image_id!r}")
        seen_ids.add(image_id)

        persons = []
        for k, quad in enumerate(persons_raw):
            if len(quad) != 4:
                raise DataError(f"image {image_id!r}: person {k} is not a 4-float box")
            try:
                persons.append(PersonBox.from_floats(*quad))
            except DataError as e:
                raise DataError(f"image {image_id!r}: person {k}: {e}") from e

        relations = []
        seen_pairs = set()
        for rel in relations_raw:
            if len(rel) != 3:
                raise DataError(f"image {image_id!r}: relation {rel} is not [i, j, class]")
            i, j, cls = (int(v) for v in rel)
            if i == j:
                raise DataError(f"image {image_id!r}: self-pair ({i},{j}) rejected")
            if not (0 <= i < len(persons) and 0 <= j < len(persons)):
                raise DataError(f"image {image_id!r}: pair ({i},{j}) out of range")
            if cls < 0:
                raise DataError(f"image {image_id!r}: negative class {cls}")
            a, b = (i, j) if i < j else (j, i)
            if (a, b) in seen_pairs:
                raise DataError(f"image {image_id!r}: duplicate label for pair ({a},{b})")
            seen_pairs.add((a, b))
            relations.append((a, b, cls))

        if ref.startswith("synthetic:"):
            img, _ = render_from_token(ref)
        else:
            full = os.path.join(base, ref)
            try:
                img = np.load(full)
            except OSError as e:
                raise DataError(f"image {image_id!r}: cannot load pixels {full}: {e}") from e
            if img.ndim != 3 or img.shape[0] != 3:
                raise DataError(f"image {image_id!r}: pixel array must be [3,H,W], got {img.shape}")
            img = img.astype(np.float32)
        dataset.append(AnnotatedImage(image_id=image_id, image=img, persons=persons,
                                      relations=relations, source=ref))
    return dataset


def compute_stats(dataset, num_classes: int | None = None) -> DatasetStats:
    """Exact split statistics plus the class weights they imply."""
    if not dataset:
        raise DataError("empty dataset")
    max_cls = max((c for img in dataset for _, _, c in img.relations), default=-1)
    if num_classes is None:
        num_classes = max_cls + 1
    elif max_cls >= num_classes:
        raise DataError(f"relation class {max_cls} exceeds configured {num_classes} classes")
    counts = np.zeros(num_classes, dtype=np.int64)
    persons_hist: dict[int, int] = {}
    unique_hist: dict[int, int] = {}
    pair_count = 0
    max_persons = 0
    for img in dataset:
        persons_hist[img.num_persons] = persons_hist.get(img.num_persons, 0) + 1
        max_persons = max(max_persons, img.num_persons)
        classes = set()
        for _, _, c in img.relations:
            counts[c] += 1
            classes.add(c)
            pair_count += 1
        unique_hist[len(classes)] = unique_hist.get(len(classes), 0) + 1
    weights = compute_class_weights(counts) if (counts >= 1).all() and num_classes else None
    return DatasetStats(
        num_images=len(dataset),
        num_classes=num_classes,
        class_counts=counts,
        persons_hist=dict(sorted(persons_hist.items())),
        unique_relations_hist=dict(sorted(unique_hist.items())),
        max_persons=max_persons,
        pair_count=pair_count,
        weights=weights,
    )


def stats_table(stats: DatasetStats) -> str:
    lines = [f"images: {stats.num_images}   labeled pairs: {stats.pair_count}   max persons: {stats.max_persons}"]
    header = ["class"] + [f"c{c}" for c in range(stats.num_classes)]
    rows = [["pairs"] + [int(v) for v in stats.class_counts]]
    if stats.weights is not None:
        rows.append(["weight"] + [float(w) for w in stats.weights.w])
    from .report import format_table

    lines.append(format_table(header, rows))
    lines.append("persons per image: " + ", ".join(f"{k}: {v}" for k, v in stats.persons_hist.items()))
    lines.append("unique relations per image: " + ", ".join(f"{k}: {v}" for k, v in stats.unique_relations_hist.items()))
    return "\n".join(lines) + "\n"


def stats_mapping(stats: DatasetStats) -> dict:
    out = {
        "images": stats.num_images,
        "pairs": stats.pair_count,
        "max_persons": stats.max_persons,
        "class_counts": [int(v) for v in stats.class_counts],
    }
    if stats.weights is not None:
        out["class_weights"] = [float(w) for w in stats.weights.w]
    for k, v in stats.persons_hist.items():
        out[f"persons_hist.{k}"] = v
    for k, v in stats.unique_relations_hist.items():
        out[f"unique_relations_hist.{k}"] = v
    return out
