"""Prompt templates used for training and per-dataset inference."""

from __future__ import annotations

import hashlib

CLS_SLOT = "<CLS>"

# Hand-crafted training templates; one is drawn per training iteration.
TRAINING_TEMPLATES: tuple[str, ...] = (
    '<CLS>.',
    'a photo of a <CLS>.',
    'a bad photo of a <CLS>.',
    'a photo of many <CLS>.',
    'a sculpture of a <CLS>.',
    'a photo of the hard to see <CLS>.',
    'a low resolution photo of the <CLS>.',
    'a rendering of a <CLS>.',
    'graffiti of a <CLS>.',
    'a bad photo of the <CLS>.',
    'a cropped photo of the <CLS>.',
    'a tattoo of a <CLS>.',
    'the embroidered <CLS>.',
    'a photo of a hard to see <CLS>.',
    'a bright photo of a <CLS>.',
    'a photo of a clean <CLS>.',
    'a photo of a dirty <CLS>.',
    'a dark photo of the <CLS>.',
    'a drawing of a <CLS>.',
    'a photo of my <CLS>.',
    'the plastic <CLS>.',
    'a photo of the cool <CLS>.',
    'a close-up photo of a <CLS>.',
    'a black and white photo of the <CLS>.',
    'a painting of the <CLS>.',
    'a painting of a <CLS>.',
    'a pixelated photo of the <CLS>.',
    'a sculpture of the <CLS>.',
    'a bright photo of the <CLS>.',
    'a cropped photo of a <CLS>.',
    'a plastic <CLS>.',
    'a photo of the dirty <CLS>.',
    'a jpeg corrupted photo of a <CLS>.',
    'a blurry photo of the <CLS>.',
    'a photo of the <CLS>.',
    'a good photo of the <CLS>.',
    'a rendering of the <CLS>.',
    'a <CLS> in a video game.',
    'a photo of one <CLS>.',
    'a doodle of a <CLS>.',
    'a close-up photo of the <CLS>.',
    'the origami <CLS>.',
    'the <CLS> in a video game.',
    'a sketch of a <CLS>.',
    'a doodle of the <CLS>.',
    'a origami <CLS>.',
    'a low resolution photo of a <CLS>.',
    'the toy <CLS>.',
    'a rendition of the <CLS>.',
    'a photo of the clean <CLS>.',
    'a photo of a large <CLS>.',
    'a rendition of a <CLS>.',
    'a photo of a nice <CLS>.',
    'a photo of a weird <CLS>.',
    'a blurry photo of a <CLS>.',
    'a cartoon <CLS>.',
    'art of a <CLS>.',
    'a sketch of the <CLS>.',
    'a embroidered <CLS>.',
    'a pixelated photo of a <CLS>.',
    'itap of the <CLS>.',
    'a jpeg corrupted photo of the <CLS>.',
    'a good photo of a <CLS>.',
    'a plushie <CLS>.',
    'a photo of the nice <CLS>.',
    'a photo of the small <CLS>.',
    'a photo of the weird <CLS>.',
    'the cartoon <CLS>.',
    'art of the <CLS>.',
    'a drawing of the <CLS>.',
    'a photo of the large <CLS>.',
    'a black and white photo of a <CLS>.',
    'the plushie <CLS>.',
    'a dark photo of a <CLS>.',
    'itap of a <CLS>.',
    'graffiti of the <CLS>.',
    'a toy <CLS>.',
    'itap of my <CLS>.',
    'a photo of a cool <CLS>.',
    'a photo of a small <CLS>.',
    'a tattoo of the <CLS>.',
)

# Single inference prompt per evaluation dataset.
INFERENCE_PROMPTS: dict[str, str] = {
    "imagenet": "a photo of a <CLS>.",
    "caltech101": "a photo of a <CLS>.",
    "oxford_pets": "a photo of a <CLS>, a type of pet.",
    "stanford_cars": "a photo of a <CLS>.",
    "flowers102": "a photo of a <CLS>, a type of flower.",
    "food101": "a photo of a <CLS>, a type of food.",
    "fgvc_aircraft": "a photo of a <CLS>, a type of aircraft.",
    "dtd": "<CLS> texture.",
    "sun397": "a photo of a <CLS>.",
    "eurosat": "a centered satellite photo of a <CLS>.",
    "real_world": "a photo of a <CLS>.",
}

DEFAULT_PROMPT = "a photo of a <CLS>."


def inference_prompt(dataset_id: str) -> str:
    """Prompt for a known dataset id, falling back to the generic photo prompt."""
    return INFERENCE_PROMPTS.get(dataset_id.lower(), DEFAULT_PROMPT)


def template_set_hash(templates=TRAINING_TEMPLATES) -> str:
    h = hashlib.sha256()
    for t in templates:
        h.update(t.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()[:16]
