"""Small on-disk benchmarks built from the toy visual concepts.

The classification set holds single-concept images; the detection set
holds larger scenes with a few concepts each, one ground-truth box per
concept. Everything is a pure function of the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .attack_forge import (DetectionRecord, ImageRecord, build_classification_attacks,
                           build_detection_attacks, hash64, save_png, write_manifest)
from .toy import TOY_NOUNS, render_concept

SCENE_SIZE = 448


@dataclass(frozen=True)
class ClassificationBench:
    classes: list[str]
    clean_manifest: Path
    attack_manifest: Path


@dataclass(frozen=True)
class DetectionBench:
    classes: list[str]
    clean_manifest: Path
    attack_manifest: Path   # detection records pointing at attacked scenes
    attack_records: Path    # per-box attack parameters


def toy_classes(n_classes: int) -> list[str]:
    if not 2 <= n_classes <= len(TOY_NOUNS):
        raise ValueError(f"n_classes must be in [2, {len(TOY_NOUNS)}]")
    return list(TOY_NOUNS[:n_classes])


def build_classification_bench(out_dir, n_images: int = 500, n_classes: int = 10,
                               seed: int = 0) -> ClassificationBench:
    """``n_images`` clean/attacked pairs, classes balanced round-robin."""
    out_dir = Path(out_dir)
    classes = toy_classes(n_classes)
    clean = []
    for i in range(n_images):
        k = i % n_classes
        rng = np.random.default_rng(hash64(seed, f"clean:{i}"))
        path = out_dir / "clean" / f"{i:06d}_{classes[k]}.png"
        save_png(render_concept(classes[k], rng), path)
        clean.append(ImageRecord(str(path), k))
    clean_manifest = out_dir / "clean.jsonl"
    write_manifest(clean, clean_manifest, classes)
    attacks = build_classification_attacks(clean, classes, out_dir / "attacked", seed)
    attack_manifest = out_dir / "attacked.jsonl"
    write_manifest(attacks, attack_manifest, classes)
    return ClassificationBench(classes, clean_manifest, attack_manifest)


def _scene(rng: np.random.Generator, classes, n_objects: int):
    """Grey noisy canvas with up to four concepts, one per 224x224 quadrant."""
    base = rng.uniform(90, 170)
    canvas = np.clip(base + rng.normal(0, 12, size=(SCENE_SIZE, SCENE_SIZE, 3)), 0, 255)
    img = Image.fromarray(canvas.astype(np.uint8), "RGB")
    half = SCENE_SIZE // 2
    boxes = []
    for q in rng.permutation(4)[:n_objects]:
        k = int(rng.integers(len(classes)))
        side = int(rng.integers(140, half - 8))
        w = side
        h = int(np.clip(round(side * rng.uniform(0.85, 1.15)), 120, half - 4))
        ox, oy = (q % 2) * half, (q // 2) * half
        x0 = ox + int(rng.integers(2, half - w - 1))
        y0 = oy + int(rng.integers(2, half - h - 1))
        patch = render_concept(classes[k], rng).resize((w, h), Image.BICUBIC)
        img.paste(patch, (x0, y0))
        boxes.append((k, x0, y0, x0 + w, y0 + h))
    return img, boxes


def build_detection_bench(out_dir, n_boxes: int = 200, n_classes: int = 10,
                          seed: int = 0) -> DetectionBench:
    """Scenes with 1-4 boxes each until ``n_boxes`` boxes exist."""
    out_dir = Path(out_dir)
    classes = toy_classes(n_classes)
    records, total, i = [], 0, 0
    while total < n_boxes:
        rng = np.random.default_rng(hash64(seed, f"scene:{i}"))
        n_obj = min(int(rng.integers(1, 5)), n_boxes - total)
        img, boxes = _scene(rng, classes, n_obj)
        path = out_dir / "clean" / f"{i:06d}.png"
        save_png(img, path)
        records.append(DetectionRecord(str(path), boxes))
        total += len(boxes)
        i += 1
    clean_manifest = out_dir / "clean.jsonl"
    write_manifest(records, clean_manifest, classes)
    det, attacks = build_detection_attacks(records, classes, out_dir / "attacked", seed)
    attack_manifest = out_dir / "attacked.jsonl"
    write_manifest(det, attack_manifest, classes)
    attack_records = out_dir / "attack_records.jsonl"
    write_manifest(attacks, attack_records, classes)
    return DetectionBench(classes, clean_manifest, attack_manifest, attack_records)
