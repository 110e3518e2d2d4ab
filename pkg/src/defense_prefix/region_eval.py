"""Region classification on ground-truth boxes, a stand-in for detection.

Each box is cropped with no margin, preprocessed like a whole image and
classified on its own. The metric is per-box top-1 accuracy.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import torch

from .attack_forge import DetectionRecord, load_image, preprocess_image, read_manifest
from .errors import ManifestError
from .eval_bench import EvalReport, accuracy_report, check_labels, data_digest
from .gateway import EncoderHandle
from .templates import DEFAULT_PROMPT


def box_crops(records: Sequence[DetectionRecord]):
    """Yield ``(crop, class)`` for every box, crops already at 224x224."""
    for rec in records:
        if not isinstance(rec, DetectionRecord):
            raise ManifestError(f"expected detection records, got {type(rec).__name__}")
        image = load_image(rec.image)
        W, H = image.size
        for cls, x0, y0, x1, y1 in rec.boxes:
            if not (0 <= x0 < x1 <= W and 0 <= y0 < y1 <= H):
                raise ManifestError(f"box {(x0, y0, x1, y1)} outside {W}x{H} image {rec.image}")
            yield preprocess_image(image.crop((x0, y0, x1, y1))), cls


def encode_regions(h: EncoderHandle, manifest, n_classes: int, batch: int = 64):
    records = list(read_manifest(manifest)) if isinstance(manifest, (str, Path)) else list(manifest)
    if not records or not any(r.boxes for r in records if isinstance(r, DetectionRecord)):
        raise ManifestError("detection manifest contains no boxes")
    feats, labels, crops = [], [], []
    with torch.no_grad():
        for crop, cls in box_crops(records):
            crops.append(crop)
            labels.append(int(cls))
            if len(crops) == batch:
                feats.append(h.encode_images(crops))
                crops = []
        if crops:
            feats.append(h.encode_images(crops))
    check_labels(labels, n_classes)
    return torch.cat(feats), torch.tensor(labels, dtype=torch.long), data_digest(records)


def eval_regions_gt(h: EncoderHandle, detection_manifest, class_names: Sequence[str],
                    prompt=DEFAULT_PROMPT, dp=None, baseline: bool = False, *,
                    dataset_id: str = "") -> EvalReport:
    """Per-box top-1 accuracy; ``n_images`` in the report counts boxes."""
    x, labels, digest = encode_regions(h, detection_manifest, len(class_names))
    if not dataset_id and isinstance(detection_manifest, (str, Path)):
        dataset_id = Path(detection_manifest).stem
    return accuracy_report(h, x, labels, class_names, prompt, dp, baseline, dataset_id=dataset_id,
                           data_digest_=digest, task="regions")
