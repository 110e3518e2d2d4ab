"""Deterministic toy dual encoder for offline work.

Model ids look like ``toy-<d>`` (``toy-16``: d=16, m=8, tau=0.07). Every
weight is drawn from a seed derived from the id.

Text side: a word-level tokenizer over a fixed vocabulary plus hashed
buckets, and a bag-of-tokens encoder in which each token's *spelling*
component is scaled by a sigmoid gate driven by the preceding context::

    r_k    = e_k / sqrt(mean(e_k^2) + eps)
    gate_k = sigmoid(g0 + gain * sum_{j<k} decay^(k-1-j) <g, r_j> / sqrt(d))
    w      = b + sum_k (A_vis e_k + gate_k * A_spell e_k)

Image side: a fixed random-feature extractor (oriented-gradient field,
random 5x5 filter banks, colour grid) followed by a linear readout. The
readout is calibrated once per process by ridge regression on rendered toy
scenes so that an image of concept ``c`` carrying the written word ``w``
lands near ``mean_text + A_vis e_c + kappa A_spell e_c + alpha A_spell e_w``.
That makes written words pull image features toward their class text,
which is the behaviour typographic attacks exploit.
"""

from __future__ import annotations

import hashlib
import logging
import math
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw

from . import kernels
from .errors import CapabilityError, SequenceLengthError
from .gateway import EmbeddingSequence, EncoderHandle, image_array, model_cache_dir
from .render import COLOR_NAMES, COLORS, draw_shadowed_text, footprint, load_font
from .templates import CLS_SLOT, INFERENCE_PROMPTS, TRAINING_TEMPLATES

log = logging.getLogger(__name__)

TOY_NOUNS = (
    "dog", "cat", "bird", "fish", "horse", "tree", "car", "boat",
    "apple", "clock", "cup", "shoe", "chair", "bike", "lamp", "house",
)
N_HASH_BUCKETS = 64
CONTEXT_LENGTH = 32
TEMPERATURE = 0.07
CALIBRATION_VERSION = 1

_WORD_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_TOY_ID_RE = re.compile(r"^toy-(\d+)(?:-([a-z0-9]+))?$")


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def derive_seed(*parts) -> int:
    digest = hashlib.blake2b("|".join(map(str, parts)).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class ToyConstants:
    gate_bias: float = 1.0
    gate_gain: float = 2.0
    context_decay: float = 0.3
    norm_eps: float = 1e-2
    content_scale: float = 1.5
    function_scale: float = 0.5
    text_bias_std: float = 0.1
    # image calibration
    spelling_weight: float = 1.5
    own_spelling_weight: float = 0.25
    text_probability: float = 0.6
    n_calibration: int = 3200
    ridge: float = 3.0
    n_filters: tuple[int, int] = (192, 96)
    filter_threshold: tuple[float, float] = (0.05, 0.03)


def _build_vocab() -> tuple[list[str], set[str]]:
    function_words = set()
    for t in (*TRAINING_TEMPLATES, *INFERENCE_PROMPTS.values()):
        function_words.update(words(t.replace(CLS_SLOT, " ")))
    function_words -= set(TOY_NOUNS)
    vocab = ["<start>", "<end>", *sorted(function_words), *TOY_NOUNS]
    vocab += [f"<hash{i}>" for i in range(N_HASH_BUCKETS)]
    content = set(TOY_NOUNS) | {f"<hash{i}>" for i in range(N_HASH_BUCKETS)}
    return vocab, content


def render_concept(name: str, rng: np.random.Generator, size: int = 224) -> Image.Image:
    """One random instance of the toy visual concept ``name``.

    Each concept is a fixed prototype (corner-colour gradient plus three
    discs) seeded by its name; instances jitter colours, positions and radii.
    """
    proto = np.random.default_rng(derive_seed("concept", name))
    corners = proto.uniform(0, 255, size=(4, 3)) + rng.normal(0, 20, size=(4, 3))
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    weights = np.stack([(1 - xx) * (1 - yy), xx * (1 - yy), (1 - xx) * yy, xx * yy], axis=-1)
    pixels = np.clip(weights @ corners, 0, 255).astype(np.uint8)
    img = Image.fromarray(pixels, "RGB")
    draw = ImageDraw.Draw(img)
    for _ in range(3):
        base = proto.uniform(0, 255, size=3)
        center = proto.uniform(0.2, 0.8, size=2) * size
        radius = proto.uniform(0.09, 0.22) * size
        col = np.clip(base + rng.normal(0, 20, size=3), 0, 255).astype(int)
        cx, cy = center + rng.normal(0, 0.045 * size, size=2)
        r = radius * rng.uniform(0.8, 1.2)
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=tuple(int(v) for v in col))
    return img


def _random_caption(img: Image.Image, text: str, rng: np.random.Generator) -> None:
    """Write ``text`` somewhere on ``img`` at a random scale, font and colour."""
    fonts = ("roman", "courier", "times", "DejaVuSans")
    font_name = fonts[rng.integers(len(fonts))]
    size = int(round(math.exp(rng.uniform(math.log(14), math.log(110)))))
    W, H = img.size
    while True:
        font = load_font(font_name, size)
        fw, fh = footprint(font, text)
        if (fw <= W - 2 and fh <= H - 2) or size <= 8:
            break
        size -= 2
    ci = int(rng.integers(len(COLOR_NAMES)))
    si = (ci + 1 + int(rng.integers(len(COLOR_NAMES) - 1))) % len(COLOR_NAMES)
    x = int(rng.integers(1, max(2, W - fw + 2)))
    y = int(rng.integers(1, max(2, H - fh + 2)))
    draw_shadowed_text(img, x, y, text, font, COLORS[COLOR_NAMES[ci]], COLORS[COLOR_NAMES[si]])


class _RandomFeatures:
    """Fixed random-feature map from a 224x224 RGB image to a flat vector."""

    def __init__(self, seed: int, constants: ToyConstants):
        rng = np.random.default_rng(seed)
        self.banks = []
        for k, thr in zip(constants.n_filters, constants.filter_threshold):
            w = rng.standard_normal((k, 3, 5, 5))
            w -= w.mean(axis=(1, 2, 3), keepdims=True)
            w /= np.linalg.norm(w.reshape(k, -1), axis=1)[:, None, None, None]
            self.banks.append((torch.from_numpy(w.astype(np.float32)), thr))
        self.dim = sum(constants.n_filters) + 48

    def __call__(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        fields = torch.from_numpy(np.stack([kernels.orientation_field(a, 4) for a in arrays]))
        feats = []
        with torch.no_grad():
            x = fields
            for i, (w, thr) in enumerate(self.banks):
                if i:
                    x = F.avg_pool2d(x, 2)
                feats.append(torch.relu(F.conv2d(x, w) - thr).mean(dim=(2, 3)))
            rgb = torch.from_numpy(np.stack(arrays)).permute(0, 3, 1, 2).float() / 255.0
            feats.append(F.adaptive_avg_pool2d(rgb, 4).flatten(1))
        return torch.cat(feats, dim=1).double().numpy()


class ToyEncoder(EncoderHandle):
    backend = "toy"

    def __init__(self, model_id: str, d: int, m: int, constants: ToyConstants | None = None):
        super().__init__(model_id, d, m, TEMPERATURE, CONTEXT_LENGTH, torch.float64)
        self.constants = c = constants or ToyConstants()
        self.vocab, content = _build_vocab()
        self.word_to_id = {w: i for i, w in enumerate(self.vocab)}
        self._n_known = len(self.vocab) - N_HASH_BUCKETS

        rng = np.random.default_rng(derive_seed(model_id, "text"))
        scale = np.array([c.content_scale if w in content else c.function_scale for w in self.vocab])
        table = rng.standard_normal((len(self.vocab), d)) / math.sqrt(d) * scale[:, None]
        self._table = torch.from_numpy(table)
        self._A_vis = torch.from_numpy(rng.standard_normal((m, d)))
        self._A_spell = torch.from_numpy(rng.standard_normal((m, d)))
        self._gate_dir = torch.from_numpy(rng.standard_normal(d))
        self._text_bias = torch.from_numpy(rng.standard_normal(m) * c.text_bias_std)
        k = torch.arange(CONTEXT_LENGTH, dtype=torch.float64)
        lag = k[:, None] - 1 - k[None, :]
        self._decay = torch.where(lag >= 0, c.context_decay ** lag.clamp_min(0), torch.zeros(()))

        self._features = _RandomFeatures(derive_seed(model_id, "vision"), c)
        self._readout: tuple[torch.Tensor, torch.Tensor] | None = None
        self._lock = threading.Lock()

    # -- tokenizer -------------------------------------------------------
    @property
    def bos_id(self):
        return 0

    @property
    def eos_id(self):
        return 1

    @property
    def vocab_size(self):
        return len(self.vocab)

    def _word_id(self, word: str) -> int:
        idx = self.word_to_id.get(word)
        if idx is None or idx >= self._n_known:
            idx = self._n_known + derive_seed("bucket", word) % N_HASH_BUCKETS
        return idx

    def _encode_words(self, text: str) -> list[int]:
        return [self._word_id(w) for w in words(text)]

    def embedding_table(self):
        return self._table

    # -- text encoder ----------------------------------------------------
    def _text_forward(self, E: torch.Tensor) -> torch.Tensor:
        """``E``: ``[B, L, d]`` zero-padded at the end; returns ``[B, m]``."""
        c = self.constants
        L = E.shape[1]
        r = E / torch.sqrt((E * E).mean(dim=-1, keepdim=True) + c.norm_eps)
        s = r @ self._gate_dir / math.sqrt(self.d)
        ctx = s @ self._decay[:L, :L].T
        gate = torch.sigmoid(c.gate_bias + c.gate_gain * ctx)
        u = E @ self._A_vis.T + gate.unsqueeze(-1) * (E @ self._A_spell.T)
        return self._text_bias + u.sum(dim=1)

    def encode_texts_from_embeddings(self, seqs: Sequence[EmbeddingSequence]) -> torch.Tensor:
        # One sequence at a time: keeps batched results bit-identical to the
        # native single-prompt path.
        out = []
        for s in seqs:
            self.check_length(len(s))
            v = s.vectors.to(self.dtype)
            if v.shape[-1] != self.d:
                raise ValueError(f"embedding dimension {v.shape[-1]} != d={self.d}")
            out.append(self._text_forward(v.unsqueeze(0))[0])
        return torch.stack(out)

    def encode_text(self, text: str) -> torch.Tensor:
        ids = [self.bos_id, *self._encode_words(text), self.eos_id]
        if len(ids) > self.context_length:
            raise SequenceLengthError(f"{len(ids)} tokens exceed context_length {self.context_length}")
        with torch.no_grad():
            return self._text_forward(self._table[torch.tensor(ids)].unsqueeze(0))[0]

    # -- image encoder ---------------------------------------------------
    def raw_features(self, arrays: Sequence[np.ndarray]) -> np.ndarray:
        return self._features(arrays)

    def _ensure_readout(self):
        if self._readout is None:
            with self._lock:
                if self._readout is None:
                    W, b = self._load_or_calibrate()
                    self._readout = (torch.from_numpy(W), torch.from_numpy(b))
        return self._readout

    def _cache_path(self) -> Path | None:
        root = model_cache_dir()
        if root is None:
            return None
        return Path(root) / f"{self.model_id}.readout-v{CALIBRATION_VERSION}.npz"

    def _load_or_calibrate(self):
        path = self._cache_path()
        if path is not None and path.exists():
            with np.load(path) as data:
                return data["W"], data["b"]
        W, b = self.calibrate()
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(path, W=W, b=b)
        return W, b

    def calibration_targets(self) -> dict[str, np.ndarray]:
        """Visual and spelling target vectors per toy noun."""
        with torch.no_grad():
            feats = []
            for t in TRAINING_TEMPLATES:
                seqs = [self.embed_tokens(self.tokenize(t, n)) for n in TOY_NOUNS]
                feats.append(self.encode_texts_from_embeddings(seqs))
            mean_text = torch.stack(feats).mean(dim=(0, 1)).numpy()
            ids = torch.tensor([self._word_id(n) for n in TOY_NOUNS])
            E = self._table[ids]
            vis = (E @ self._A_vis.T).numpy()
            spell = (E @ self._A_spell.T).numpy()
        return {"mean_text": mean_text, "visual": vis, "spelling": spell}

    def calibrate(self) -> tuple[np.ndarray, np.ndarray]:
        """Fit the image readout; deterministic for a given model id."""
        c = self.constants
        log.info("calibrating toy image readout for %s (%d scenes)", self.model_id, c.n_calibration)
        tg = self.calibration_targets()
        rng = np.random.default_rng(derive_seed(self.model_id, "calibration"))
        n = len(TOY_NOUNS)
        phis, targets = [], []
        batch = []
        for i in range(c.n_calibration):
            k = int(rng.integers(n))
            img = render_concept(TOY_NOUNS[k], rng)
            y = tg["mean_text"] + tg["visual"][k] + c.own_spelling_weight * tg["spelling"][k]
            if rng.random() < c.text_probability:
                j = (k + 1 + int(rng.integers(n - 1))) % n
                _random_caption(img, TOY_NOUNS[j], rng)
                y = y + c.spelling_weight * tg["spelling"][j]
            batch.append(np.asarray(img))
            targets.append(y)
            if len(batch) == 64 or i == c.n_calibration - 1:
                phis.append(self._features(batch))
                batch = []
        Phi = np.concatenate(phis)
        Y = np.stack(targets)
        mu = Phi.mean(axis=0)
        sd = Phi.std(axis=0) + 1e-8
        A = (Phi - mu) / sd
        y_mean = Y.mean(axis=0)
        B = np.linalg.solve(A.T @ A + c.ridge * np.eye(A.shape[1]), A.T @ (Y - y_mean))
        W = (B / sd[:, None]).T
        b = y_mean - W @ mu
        return np.ascontiguousarray(W), np.ascontiguousarray(b)

    def encode_images(self, images: Iterable) -> torch.Tensor:
        arrays = [image_array(im) for im in images]
        W, b = self._ensure_readout()
        if not arrays:
            return torch.empty((0, self.m), dtype=self.dtype)
        phi = torch.from_numpy(self._features(arrays))
        return phi @ W.T + b

    @property
    def image_bias(self) -> torch.Tensor:
        return self._ensure_readout()[1]

    def named_state(self) -> dict[str, torch.Tensor]:
        W, b = self._ensure_readout()
        state = {
            "token_embedding": self._table,
            "text.A_vis": self._A_vis,
            "text.A_spell": self._A_spell,
            "text.gate_dir": self._gate_dir,
            "text.bias": self._text_bias,
            "image.readout_W": W,
            "image.readout_b": b,
        }
        for i, (w, _) in enumerate(self._features.banks):
            state[f"image.filters{i}"] = w
        return state


_CACHE: dict[str, ToyEncoder] = {}
_CACHE_LOCK = threading.Lock()


def load_toy(model_id: str) -> ToyEncoder:
    m = _TOY_ID_RE.match(model_id)
    if not m:
        raise CapabilityError(f"unsupported toy model id {model_id!r}; expected 'toy-<d>'")
    d = int(m.group(1))
    if d < 4 or d % 2:
        raise CapabilityError(f"toy embedding dimension must be an even number >= 4, got {d}")
    with _CACHE_LOCK:
        if model_id not in _CACHE:
            _CACHE[model_id] = ToyEncoder(model_id, d, d // 2)
        return _CACHE[model_id]
