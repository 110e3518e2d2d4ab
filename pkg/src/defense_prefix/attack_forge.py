"""Typographic attack synthesis and line-delimited manifests.

Classification attacks write one wrong class name anywhere in the image.
Detection attacks write one wrong class name inside each ground-truth box,
at the largest size whose width stays under 80% of the box width.

Text anchors are the top-left corner of the tight ink box. Font sizes are
PIL pixel sizes (points at 72 dpi).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import InputShapeError, ManifestError, MissingImageError, RenderError
from .gateway import IMAGE_SIZE
from .render import (CLASSIFICATION_FONTS, COLOR_NAMES, DETECTION_FONT, SHADOW_PX,
                     draw_shadowed_text, load_font, text_extent)

FONT_NAMES = tuple(CLASSIFICATION_FONTS)
MIN_SIZE_PT, MAX_SIZE_PT = 20, 40
MIN_DETECTION_SIZE = 6
DETECTION_WIDTH_RATIO = 0.8


def hash64(dataset_seed: int, image_id: str) -> int:
    """Per-record seed mixed from the dataset seed and an image id."""
    digest = hashlib.blake2b(f"{dataset_seed}:{image_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def preprocess_image(image: Image.Image, size: int = IMAGE_SIZE) -> Image.Image:
    """Bicubic resize of the short side to ``size``, then a centre crop."""
    w, h = image.size
    if w < 1 or h < 1:
        raise InputShapeError(f"degenerate image of size {w}x{h}")
    image = image.convert("RGB")
    if (w, h) != (size, size):
        if w <= h:
            new = (size, max(size, int(h * size / w)))
        else:
            new = (max(size, int(w * size / h)), size)
        if new != (w, h):
            image = image.resize(new, Image.BICUBIC)
        left = (new[0] - size) // 2
        top = (new[1] - size) // 2
        image = image.crop((left, top, left + size, top + size))
    return image


def load_image(path) -> Image.Image:
    path = Path(path)
    if not path.is_file():
        raise MissingImageError(path)
    with Image.open(path) as im:
        return im.convert("RGB")


# -- records -----------------------------------------------------------------

@dataclass(frozen=True)
class ImageRecord:
    image: str
    true_class: int
    kind = "image"


@dataclass(frozen=True)
class DetectionRecord:
    image: str
    boxes: tuple[tuple[int, int, int, int, int], ...]  # (class, x0, y0, x1, y1)
    kind = "detection"

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(tuple(int(v) for v in b) for b in self.boxes))


@dataclass(frozen=True)
class AttackRecord:
    """One rendered attack text. ``box`` is set for detection attacks."""

    image: str | None
    source_image: str
    true_class: int
    attack_class: int
    text: str
    seed: int
    font: str
    size_pt: int
    color: str
    shadow_color: str
    x: int
    y: int
    width: int
    height: int
    box: tuple[int, int, int, int] | None = None
    skipped: bool = False
    kind = "attack"

    def __post_init__(self):
        if self.box is not None:
            object.__setattr__(self, "box", tuple(int(v) for v in self.box))

    @property
    def text_box(self) -> tuple[int, int, int, int]:
        return self.x, self.y, self.x + self.width, self.y + self.height

    @property
    def footprint_box(self) -> tuple[int, int, int, int]:
        """Text box grown by the shadow outline: every pixel the attack may touch."""
        x0, y0, x1, y1 = self.text_box
        return x0 - SHADOW_PX, y0 - SHADOW_PX, x1 + SHADOW_PX, y1 + SHADOW_PX


_KINDS = {cls.kind: cls for cls in (ImageRecord, DetectionRecord, AttackRecord)}
_PATH_FIELDS = ("image", "source_image")


# -- sampling ----------------------------------------------------------------

def _other_index(rng: np.random.Generator, n: int, exclude: int) -> int:
    """Uniform over ``range(n)`` minus ``exclude``."""
    k = int(rng.integers(n - 1))
    return k + 1 if k >= exclude else k


def _check_classes(true_class: int, class_names: Sequence[str]):
    if len(class_names) < 2:
        raise ValueError("at least two class names are needed to pick a wrong label")
    if not 0 <= true_class < len(class_names):
        raise ValueError(f"true_class {true_class} out of range for {len(class_names)} classes")


def synth_classification_attack(image: Image.Image, true_class: int, class_names: Sequence[str],
                                seed: int, source_image: str = "") -> tuple[Image.Image, AttackRecord]:
    """Write one wrong class name somewhere fully inside ``image``."""
    _check_classes(true_class, class_names)
    rng = np.random.default_rng(seed)
    attack_class = _other_index(rng, len(class_names), true_class)
    font_name = FONT_NAMES[rng.integers(len(FONT_NAMES))]
    size = int(rng.integers(MIN_SIZE_PT, MAX_SIZE_PT + 1))
    ci = int(rng.integers(len(COLOR_NAMES)))
    si = _other_index(rng, len(COLOR_NAMES), ci)
    text = class_names[attack_class]
    W, H = image.size
    while True:
        w, h = text_extent(load_font(font_name, size), text)
        if w + 2 * SHADOW_PX <= W and h + 2 * SHADOW_PX <= H:
            break
        size -= 1
        if size < MIN_SIZE_PT:
            raise RenderError(f"text {text!r} does not fit a {W}x{H} image at {MIN_SIZE_PT} pt")
    x = int(rng.integers(SHADOW_PX, W - SHADOW_PX - w + 1))
    y = int(rng.integers(SHADOW_PX, H - SHADOW_PX - h + 1))
    record = AttackRecord(None, source_image, true_class, attack_class, text, int(seed), font_name,
                          size, COLOR_NAMES[ci], COLOR_NAMES[si], x, y, w, h)
    return render_attacks(image, [record]), record


def _max_detection_size(text: str, bw: int, bh: int) -> int | None:
    def fits(size):
        w, h = text_extent(load_font(DETECTION_FONT, size), text)
        return w + 2 * SHADOW_PX < DETECTION_WIDTH_RATIO * bw and h + 2 * SHADOW_PX <= bh

    if not fits(MIN_DETECTION_SIZE):
        return None
    lo, hi = MIN_DETECTION_SIZE, max(MIN_DETECTION_SIZE, bh * 2)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def synth_detection_attack(image: Image.Image, boxes: Sequence, class_names: Sequence[str],
                           seed: int, source_image: str = "") -> tuple[Image.Image, list[AttackRecord]]:
    """Write one wrong class name inside every box ``(class, x0, y0, x1, y1)``.

    Boxes too small for any text are returned with ``skipped=True``.
    """
    W, H = image.size
    records = []
    for i, (cls, x0, y0, x1, y1) in enumerate(boxes):
        if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
            raise ValueError(f"box {i} {(x0, y0, x1, y1)} lies outside the {W}x{H} image")
        _check_classes(cls, class_names)
        rng = np.random.default_rng([seed, i])
        attack_class = _other_index(rng, len(class_names), cls)
        ci = int(rng.integers(len(COLOR_NAMES)))
        si = _other_index(rng, len(COLOR_NAMES), ci)
        text = class_names[attack_class]
        size = _max_detection_size(text, x1 - x0, y1 - y0)
        if size is None:
            records.append(AttackRecord(None, source_image, cls, attack_class, text, int(seed),
                                        DETECTION_FONT, 0, COLOR_NAMES[ci], COLOR_NAMES[si], 0, 0, 0,
                                        0, (x0, y0, x1, y1), skipped=True))
            continue
        w, h = text_extent(load_font(DETECTION_FONT, size), text)
        x = int(rng.integers(x0 + SHADOW_PX, x1 - SHADOW_PX - w + 1))
        y = int(rng.integers(y0 + SHADOW_PX, y1 - SHADOW_PX - h + 1))
        records.append(AttackRecord(None, source_image, cls, attack_class, text, int(seed),
                                    DETECTION_FONT, size, COLOR_NAMES[ci], COLOR_NAMES[si], x, y, w, h,
                                    (x0, y0, x1, y1)))
    return render_attacks(image, records), records


def render_attacks(image: Image.Image, records: Iterable[AttackRecord]) -> Image.Image:
    """Re-create an attacked image from its source and records."""
    out = image.convert("RGB").copy()
    for r in records:
        if not r.skipped:
            draw_shadowed_text(out, r.x, r.y, r.text, load_font(r.font, r.size_pt), r.color,
                               r.shadow_color)
    return out


def save_png(image: Image.Image, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG")


# -- dataset builders ----------------------------------------------------------

def build_classification_attacks(records: Sequence, class_names: Sequence[str], out_dir,
                                 dataset_seed: int) -> list[AttackRecord]:
    """Attack every clean ``ImageRecord``; images go to ``out_dir`` as PNG."""
    out_dir = Path(out_dir)
    result = []
    for i, rec in enumerate(records):
        image_id = f"{i:06d}_{Path(rec.image).stem}"
        src = preprocess_image(load_image(rec.image))
        img, attack = synth_classification_attack(src, rec.true_class, class_names,
                                                  hash64(dataset_seed, image_id), rec.image)
        path = out_dir / "images" / f"{image_id}.png"
        save_png(img, path)
        result.append(dataclasses.replace(attack, image=str(path)))
    return result


def build_detection_attacks(records: Sequence[DetectionRecord], class_names: Sequence[str], out_dir,
                            dataset_seed: int) -> tuple[list[DetectionRecord], list[AttackRecord]]:
    """Attack every box of every detection record.

    Returns detection records pointing at the attacked images (same boxes)
    and the per-box attack records.
    """
    out_dir = Path(out_dir)
    det_out, attacks = [], []
    for i, rec in enumerate(records):
        image_id = f"{i:06d}_{Path(rec.image).stem}"
        img, recs = synth_detection_attack(load_image(rec.image), rec.boxes, class_names,
                                           hash64(dataset_seed, image_id), rec.image)
        path = out_dir / "images" / f"{image_id}.png"
        save_png(img, path)
        det_out.append(DetectionRecord(str(path), rec.boxes))
        attacks.extend(dataclasses.replace(r, image=str(path)) for r in recs)
    return det_out, attacks


# -- manifests -----------------------------------------------------------------

class Manifest(list):
    """Records read from a manifest, plus its optional class list."""

    def __init__(self, records=(), classes=None, path=None):
        super().__init__(records)
        self.classes = list(classes) if classes is not None else None
        self.path = Path(path) if path is not None else None


def _to_json(record, root: Path) -> dict:
    out = {"type": record.kind}
    for f in dataclasses.fields(record):
        value = getattr(record, f.name)
        if f.name in _PATH_FIELDS and value:
            p = Path(value).resolve()
            try:
                value = p.relative_to(root).as_posix()
            except ValueError:
                value = str(p)
        if isinstance(value, tuple):
            value = [list(v) if isinstance(v, tuple) else v for v in value]
        out[f.name] = value
    return out


def _from_json(obj: dict, root: Path, line: int):
    kind = obj.pop("type", None)
    cls = _KINDS.get(kind)
    if cls is None:
        raise ManifestError(f"unknown record type {kind!r}", line)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ManifestError(f"unknown fields {sorted(unknown)} for {kind} record", line)
    for name in _PATH_FIELDS:
        if obj.get(name):
            p = Path(obj[name])
            obj[name] = str(p if p.is_absolute() else (root / p))
    if obj.get("box") is not None:
        obj["box"] = tuple(obj["box"])
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"bad {kind} record: {exc}", line) from None


def write_manifest(records: Iterable, path, classes: Sequence[str] | None = None) -> None:
    """Write records as JSON lines. Paths inside the manifest's directory are stored relative."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    lines = []
    if classes is not None:
        lines.append(json.dumps({"type": "header", "classes": list(classes)}))
    lines.extend(json.dumps(_to_json(r, root)) for r in records)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path) -> Manifest:
    """Parse a manifest; relative paths resolve against its directory. Images are not opened."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent.resolve()
    records, classes = [], None
    with path.open(encoding="utf-8") as fh:
        for n, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", n) from None
            if not isinstance(obj, dict):
                raise ManifestError("record is not a JSON object", n)
            if obj.get("type") == "header":
                classes = obj.get("classes")
                continue
            records.append(_from_json(obj, root, n))
    return Manifest(records, classes, path)
