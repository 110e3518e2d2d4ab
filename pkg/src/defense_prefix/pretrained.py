"""CLIP checkpoints in Hugging Face format, loaded from local disk only.

``model_id`` is a directory, a name under ``MODEL_CACHE_DIR``, or an alias
such as ``vit-b-32``. The text path from embeddings mirrors the library's
own forward: position embeddings, causal encoder, final layer norm, the
state at the end sentinel, then the text projection.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapabilityError, ModelLoadError
from .gateway import EmbeddingSequence, EncoderHandle, image_array, model_cache_dir

log = logging.getLogger(__name__)

ALIASES = {
    "vit-b-32": "clip-vit-base-patch32",
    "vit-b-16": "clip-vit-base-patch16",
    "vit-l-14": "clip-vit-large-patch14",
}
CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def resolve_checkpoint(model_id: str) -> Path:
    candidates = [Path(model_id)]
    root = model_cache_dir()
    if root:
        name = ALIASES.get(model_id, model_id)
        candidates += [Path(root) / name, Path(root) / "openai" / name]
    for c in candidates:
        if (c / "config.json").is_file():
            return c
    raise ModelLoadError(
        f"no checkpoint for model {model_id!r}: looked in {', '.join(str(c) for c in candidates)} "
        "(set MODEL_CACHE_DIR to the directory holding local checkpoints)")


class PretrainedCLIP(EncoderHandle):
    backend = "pretrained"

    def __init__(self, model_id: str, model, tokenizer, mean, std):
        cfg = model.config
        super().__init__(model_id, cfg.text_config.hidden_size, cfg.projection_dim,
                         float(1.0 / model.logit_scale.detach().exp()),
                         cfg.text_config.max_position_embeddings, torch.float32)
        self.model = model.eval().requires_grad_(False)
        self.tokenizer = tokenizer
        self.image_size = cfg.vision_config.image_size
        self._mean = torch.tensor(mean).view(1, 3, 1, 1)
        self._std = torch.tensor(std).view(1, 3, 1, 1)

    @property
    def bos_id(self):
        return self.tokenizer.bos_token_id

    @property
    def eos_id(self):
        return self.tokenizer.eos_token_id

    @property
    def vocab_size(self):
        return self.model.text_model.embeddings.token_embedding.num_embeddings

    def _encode_words(self, text: str) -> list[int]:
        if not text.strip():
            return []
        return list(self.tokenizer(text, add_special_tokens=False)["input_ids"])

    def embedding_table(self):
        return self.model.text_model.embeddings.token_embedding.weight

    def encode_texts_from_embeddings(self, seqs: Sequence[EmbeddingSequence]) -> torch.Tensor:
        from transformers.masking_utils import create_causal_mask

        lengths = [len(s) for s in seqs]
        L = max(lengths)
        self.check_length(L)
        # Right padding is harmless under a causal mask: real positions never see it.
        E = torch.stack([F.pad(s.vectors.to(self.dtype), (0, 0, 0, L - len(s))) for s in seqs])
        tm = self.model.text_model
        hidden = tm.embeddings(inputs_embeds=E)
        mask = create_causal_mask(config=tm.config, inputs_embeds=hidden, attention_mask=None,
                                  past_key_values=None)
        out = tm.encoder(inputs_embeds=hidden, attention_mask=mask, is_causal=True)
        hidden = tm.final_layer_norm(out.last_hidden_state)
        pooled = hidden[torch.arange(len(seqs)), torch.tensor(lengths) - 1]
        return self.model.text_projection(pooled)

    def encode_text(self, text: str) -> torch.Tensor:
        ids = self.tokenizer(text, return_tensors="pt")["input_ids"]
        self.check_length(ids.shape[1])
        with torch.no_grad():
            out = self.model.get_text_features(input_ids=ids)
        feats = out.pooler_output if hasattr(out, "pooler_output") else out
        return feats[0]

    def encode_images(self, images: Iterable) -> torch.Tensor:
        arrays = [image_array(im) for im in images]
        if not arrays:
            return torch.empty((0, self.m), dtype=self.dtype)
        x = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float() / 255.0
        if x.shape[-1] != self.image_size:
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bicubic",
                              align_corners=False)
        x = (x - self._mean) / self._std
        with torch.no_grad():
            out = self.model.get_image_features(pixel_values=x)
        return out.pooler_output if hasattr(out, "pooler_output") else out

    def named_state(self) -> dict[str, torch.Tensor]:
        return dict(self.model.state_dict())


def _normalization(path: Path):
    cfg = path / "preprocessor_config.json"
    if cfg.is_file():
        data = json.loads(cfg.read_text())
        return tuple(data.get("image_mean", CLIP_MEAN)), tuple(data.get("image_std", CLIP_STD))
    return CLIP_MEAN, CLIP_STD


def load_pretrained(model_id: str) -> PretrainedCLIP:
    try:
        from transformers import AutoConfig, CLIPModel, CLIPTokenizer
    except ImportError as exc:
        raise CapabilityError("the pretrained backend needs the 'transformers' package") from exc
    path = resolve_checkpoint(model_id)
    config = AutoConfig.from_pretrained(path)
    if config.model_type != "clip":
        raise CapabilityError(f"unsupported model family {config.model_type!r} for {model_id!r}; "
                              "only CLIP dual encoders are supported")
    try:
        model = CLIPModel.from_pretrained(path)
        tokenizer = CLIPTokenizer.from_pretrained(path)
    except (OSError, ValueError) as exc:
        raise ModelLoadError(f"failed to load checkpoint for {model_id!r} from {path}: {exc}") from exc
    mean, std = _normalization(path)
    return PretrainedCLIP(model_id, model, tokenizer, mean, std)
