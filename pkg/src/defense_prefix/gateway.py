"""Uniform access to a frozen dual-encoder model.

Two backends share one handle interface: ``pretrained`` wraps a CLIP
checkpoint on disk, ``toy`` builds a small deterministic model in memory so
everything can run offline.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import CapabilityError, InputShapeError, SequenceLengthError, TemplateError
from .templates import CLS_SLOT

IMAGE_SIZE = 224


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt with exactly one ``<CLS>`` slot, e.g. ``"a photo of a <CLS>."``."""

    text: str

    def __post_init__(self):
        if self.text.count(CLS_SLOT) != 1:
            raise TemplateError(f"template must contain exactly one {CLS_SLOT} slot: {self.text!r}")

    @property
    def parts(self) -> tuple[str, str]:
        pre, post = self.text.split(CLS_SLOT)
        return pre, post

    def fill(self, class_name: str) -> str:
        return self.text.replace(CLS_SLOT, class_name)


def as_template(template) -> PromptTemplate:
    return template if isinstance(template, PromptTemplate) else PromptTemplate(str(template))


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]
    class_span: tuple[int, int]

    def __post_init__(self):
        start, end = self.class_span
        if not 0 <= start < end <= len(self.token_ids):
            raise ValueError(f"class_span {self.class_span} outside sequence of length {len(self.token_ids)}")

    def __len__(self):
        return len(self.token_ids)


@dataclass(frozen=True)
class EmbeddingSequence:
    """Word-embedding vectors ``[L, d]`` ready for the text encoder."""

    vectors: torch.Tensor
    class_span: tuple[int, int]

    def __len__(self):
        return self.vectors.shape[0]


class EncoderHandle:
    """Frozen dual encoder. Subclasses fill in the model-specific pieces."""

    backend: str = ""

    def __init__(self, model_id: str, d: int, m: int, temperature: float, context_length: int,
                 dtype: torch.dtype):
        self.model_id = model_id
        self.d = d
        self.m = m
        self.temperature = float(temperature)
        self.context_length = context_length
        self.dtype = dtype

    def __repr__(self):
        return (f"{type(self).__name__}(model_id={self.model_id!r}, d={self.d}, m={self.m}, "
                f"temperature={self.temperature:.4g}, context_length={self.context_length})")

    # -- text side -------------------------------------------------------
    def _encode_words(self, text: str) -> list[int]:
        raise NotImplementedError

    @property
    def bos_id(self) -> int:
        raise NotImplementedError

    @property
    def eos_id(self) -> int:
        raise NotImplementedError

    @property
    def vocab_size(self) -> int:
        raise NotImplementedError

    def tokenize(self, template, class_name: str) -> TokenSequence:
        template = as_template(template)
        if not class_name or not class_name.strip():
            raise TemplateError("class name must be nonempty")
        pre, post = template.parts
        pre_ids = self._encode_words(pre)
        cls_ids = self._encode_words(class_name)
        if not cls_ids:
            raise TemplateError(f"class name {class_name!r} produced no tokens")
        post_ids = self._encode_words(post)
        ids = [self.bos_id, *pre_ids, *cls_ids, *post_ids, self.eos_id]
        if len(ids) > self.context_length:
            raise SequenceLengthError(
                f"prompt needs {len(ids)} tokens but context_length is {self.context_length}")
        start = 1 + len(pre_ids)
        return TokenSequence(tuple(ids), (start, start + len(cls_ids)))

    def embedding_table(self) -> torch.Tensor:
        raise NotImplementedError

    def embed_tokens(self, t: TokenSequence) -> EmbeddingSequence:
        ids = torch.as_tensor(t.token_ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise IndexError(f"token id out of range for vocabulary of size {self.vocab_size}")
        with torch.no_grad():
            vectors = self.embedding_table()[ids].clone()
        return EmbeddingSequence(vectors, t.class_span)

    def check_length(self, length: int):
        if length > self.context_length:
            raise SequenceLengthError(
                f"sequence of length {length} exceeds context_length {self.context_length}")

    def encode_text_from_embeddings(self, e: EmbeddingSequence) -> torch.Tensor:
        return self.encode_texts_from_embeddings([e])[0]

    def encode_texts_from_embeddings(self, seqs: Sequence[EmbeddingSequence]) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, text: str) -> torch.Tensor:
        """Native text path: raw prompt string straight through the model."""
        raise NotImplementedError

    # -- image side ------------------------------------------------------
    def encode_images(self, images: Iterable) -> torch.Tensor:
        raise NotImplementedError

    def encode_image(self, image) -> torch.Tensor:
        return self.encode_images([image])[0]

    # -- frozen state ----------------------------------------------------
    def named_state(self) -> dict[str, torch.Tensor]:
        """Every parameter and buffer that defines the model."""
        raise NotImplementedError

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.named_state().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def image_array(image) -> np.ndarray:
    """Coerce a PIL image or array to a contiguous ``uint8 [224, 224, 3]`` array."""
    arr = np.asarray(image.convert("RGB")) if hasattr(image, "convert") else np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputShapeError(f"expected an RGB image, got array of shape {arr.shape}")
    if arr.shape[:2] != (IMAGE_SIZE, IMAGE_SIZE):
        raise InputShapeError(
            f"expected a {IMAGE_SIZE}x{IMAGE_SIZE} image (run preprocess_image first), "
            f"got {arr.shape[1]}x{arr.shape[0]}")
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return np.ascontiguousarray(arr)


def model_cache_dir() -> str | None:
    return os.environ.get("MODEL_CACHE_DIR") or None


def load_model(model_id: str, backend: str = "toy") -> EncoderHandle:
    """Load a frozen handle. ``backend`` is ``"toy"`` or ``"pretrained"``."""
    if backend == "toy":
        from .toy import load_toy

        return load_toy(model_id)
    if backend == "pretrained":
        from .pretrained import load_pretrained

        return load_pretrained(model_id)
    raise CapabilityError(f"unsupported backend {backend!r}")


def tokenize(h: EncoderHandle, template, class_name: str) -> TokenSequence:
    return h.tokenize(template, class_name)


def embed_tokens(h: EncoderHandle, t: TokenSequence) -> EmbeddingSequence:
    return h.embed_tokens(t)


def encode_text_from_embeddings(h: EncoderHandle, e: EmbeddingSequence) -> torch.Tensor:
    return h.encode_text_from_embeddings(e)


def encode_image(h: EncoderHandle, image) -> torch.Tensor:
    return h.encode_image(image)
