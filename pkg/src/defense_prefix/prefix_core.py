"""The defense prefix: insertion, losses, training and persistence.

A prefix is ``token_count`` learnable word-embedding rows placed in front of
the class name. Training minimises::

    L = L0 + lambda * L1
    L0 = -log p0[y]          p0: attacked image vs prefixed class features
    L1 = KL(p1 || p2)        p1: clean image vs plain features (teacher)
                             p2: clean image vs prefixed features

with plain SGD and a per-step cosine-annealed learning rate.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .attack_forge import AttackRecord, load_image, preprocess_image, read_manifest
from .errors import (CompatibilityError, ConfigError, DivergenceError, DPFormatError, NumericError,
                     PairingError, SequenceLengthError)
from .gateway import EmbeddingSequence, EncoderHandle, as_template
from .templates import TRAINING_TEMPLATES, template_set_hash

log = logging.getLogger(__name__)

POSITIONS = ("beginning", "before_class", "end")
CLAMP_FLOOR = 1e-12
DP_MAGIC = b"DPV1"


# -- prefix vector -------------------------------------------------------------

@dataclass(frozen=True)
class DefensePrefixVector:
    """Learned prefix rows ``[token_count, d]`` stored as float32."""

    values: torch.Tensor
    model_id: str
    template_set_hash: str = ""
    training_config_digest: str = ""

    def __post_init__(self):
        v = torch.as_tensor(self.values).detach().to(torch.float32)
        if v.ndim == 1:
            v = v.unsqueeze(0)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"prefix values must have shape [token_count, d], got {tuple(v.shape)}")
        object.__setattr__(self, "values", v.contiguous())

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def token_count(self) -> int:
        return self.values.shape[0]


def _prefix_rows(dp) -> torch.Tensor:
    rows = dp.values if isinstance(dp, DefensePrefixVector) else torch.as_tensor(dp)
    return rows.unsqueeze(0) if rows.ndim == 1 else rows


def insert_prefix(e: EmbeddingSequence, dp, position: str = "before_class",
                  context_length: int | None = None) -> EmbeddingSequence:
    """Insert the prefix rows into ``e``; gradients flow only into ``dp``.

    ``dp`` is a :class:`DefensePrefixVector` or a tensor of shape ``[d]`` or
    ``[k, d]``. Positions: after the begin sentinel (``beginning``), right
    before the first class token (``before_class``) or right before the end
    sentinel (``end``).
    """
    rows = _prefix_rows(dp)
    L, d = e.vectors.shape
    if rows.shape[1] != d:
        raise CompatibilityError(f"prefix dimension {rows.shape[1]} does not match embeddings d={d}")
    k = rows.shape[0]
    if context_length is not None and L + k > context_length:
        raise SequenceLengthError(
            f"inserting {k} prefix token(s) gives length {L + k} > context_length {context_length}")
    start, end = e.class_span
    if position == "before_class":
        idx = start
    elif position == "beginning":
        idx = 1
    elif position == "end":
        idx = L - 1
    else:
        raise ValueError(f"unknown prefix position {position!r}; choose from {POSITIONS}")
    vectors = torch.cat([e.vectors[:idx], rows.to(e.vectors.dtype), e.vectors[idx:]])
    span = (start + k, end + k) if idx <= start else (start, end)
    return EmbeddingSequence(vectors, span)


# -- class features and probabilities -------------------------------------------

@dataclass(frozen=True)
class ClassFeatureBank:
    features: torch.Tensor  # [n, m]
    temperature: float
    with_prefix: bool
    class_names: tuple[str, ...]
    template: str

    def __post_init__(self):
        if self.features.shape[0] != len(self.class_names):
            raise ValueError("one feature per class name is required")

    def __len__(self):
        return len(self.class_names)


def build_class_features(h: EncoderHandle, class_names: Sequence[str], template, dp=None,
                         position: str = "before_class") -> ClassFeatureBank:
    """``{w_i}`` without ``dp``, ``{w_i^DP}`` with it (differentiable in ``dp``)."""
    template = as_template(template)
    seqs = []
    for name in class_names:
        e = h.embed_tokens(h.tokenize(template, name))
        if dp is not None:
            e = insert_prefix(e, dp, position, h.context_length)
        seqs.append(e)
    return ClassFeatureBank(h.encode_texts_from_embeddings(seqs), h.temperature, dp is not None,
                            tuple(class_names), template.text)


def _unit(v: torch.Tensor, what: str) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise NumericError(f"zero-norm {what}: cosine similarity is undefined")
    return v / norm


def classify_probs(bank: ClassFeatureBank, x: torch.Tensor) -> torch.Tensor:
    """softmax_i(cos(w_i, x) / tau) for an image feature ``[m]`` or a batch ``[B, m]``."""
    w = bank.features
    if x.shape[-1] != w.shape[-1]:
        raise ValueError(f"image feature dimension {x.shape[-1]} != class feature dimension {w.shape[-1]}")
    cos = _unit(x.to(w.dtype), "image feature") @ _unit(w, "class feature").T
    return torch.softmax(cos / bank.temperature, dim=-1)


def predict(probs: torch.Tensor) -> torch.Tensor:
    """Argmax with ties broken toward the lowest class index."""
    return torch.argmax(probs, dim=-1)


# -- losses ----------------------------------------------------------------------

def _clamped_log(p: torch.Tensor, floor: float, what: str) -> torch.Tensor:
    if bool((p < floor).any()):
        log.warning("%s below %.0e clamped inside log", what, floor)
    return torch.log(p.clamp_min(floor))


def defense_loss(p0: torch.Tensor, true_class, floor: float = CLAMP_FLOOR) -> torch.Tensor:
    """-log p0[true_class]; per row for a batch ``[B, n]``."""
    idx = torch.as_tensor(true_class, dtype=torch.long, device=p0.device)
    p = p0.gather(-1, idx.reshape(*p0.shape[:-1], 1)).squeeze(-1)
    return -_clamped_log(p, floor, "true-class probability")


def identity_loss(p1: torch.Tensor, p2: torch.Tensor, floor: float = CLAMP_FLOOR) -> torch.Tensor:
    """KL(p1 || p2) with ``p1`` held constant; per row for a batch."""
    p1 = p1.detach()
    terms = torch.xlogy(p1, p1.clamp_min(floor)) - p1 * _clamped_log(p2, floor, "student probability")
    return terms.sum(dim=-1)


def total_loss(l0, l1, lam: float):
    return l0 + lam * l1


# -- training config -------------------------------------------------------------

@dataclass
class TrainingConfig:
    lr: float = 0.002
    schedule: str = "cosine"
    optimizer: str = "sgd"
    momentum: float = 0.0
    epochs: int = 10
    batch_size: int = 512
    lam: float = 3.0
    init_std: float = 0.02
    seed: int = 0
    prefix_position: str = "before_class"
    token_count: int = 1
    use_defense_loss: bool = True
    clamp_floor: float = CLAMP_FLOOR

    # YAML / JSON spelling of field names that are Python keywords
    _ALIASES = {"lambda": "lam"}

    def problems(self) -> list[str]:
        out = []
        if not self.lr > 0:
            out.append(f"lr must be > 0 (got {self.lr})")
        if self.schedule != "cosine":
            out.append(f"schedule must be 'cosine' (got {self.schedule!r})")
        if self.optimizer != "sgd":
            out.append(f"optimizer must be 'sgd' (got {self.optimizer!r})")
        if not 0 <= self.momentum < 1:
            out.append(f"momentum must be in [0, 1) (got {self.momentum})")
        if not (isinstance(self.epochs, int) and self.epochs >= 1):
            out.append(f"epochs must be an integer >= 1 (got {self.epochs})")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            out.append(f"batch_size must be an integer >= 1 (got {self.batch_size})")
        if not self.lam >= 0:
            out.append(f"lambda must be >= 0 (got {self.lam})")
        if not self.init_std > 0:
            out.append(f"init_std must be > 0 (got {self.init_std})")
        if self.prefix_position not in POSITIONS:
            out.append(f"prefix_position must be one of {POSITIONS} (got {self.prefix_position!r})")
        if not (isinstance(self.token_count, int) and self.token_count >= 1):
            out.append(f"token_count must be an integer >= 1 (got {self.token_count})")
        if not 0 < self.clamp_floor < 1:
            out.append(f"clamp_floor must be in (0, 1) (got {self.clamp_floor})")
        return out

    def validate(self) -> "TrainingConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, data: dict | None) -> "TrainingConfig":
        data = dict(data or {})
        for alias, name in cls._ALIASES.items():
            if alias in data:
                data[name] = data.pop(alias)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        kwargs = {k: v for k, v in data.items() if k in names}
        cfg = cls(**kwargs)
        problems = [f"unknown training option {k!r}" for k in unknown] + cfg.problems()
        if problems:
            raise ConfigError(problems)
        return cfg

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]



def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- training data ---------------------------------------------------------------

@dataclass
class PairedFeatures:
    """Image features of clean/attacked pairs, computed once (images are data)."""

    clean: torch.Tensor   # [N, m]
    attack: torch.Tensor  # [N, m]
    labels: torch.Tensor  # [N]


def _as_records(manifest):
    if isinstance(manifest, (str, Path)):
        return list(read_manifest(manifest))
    return list(manifest)


def pair_records(clean_records, attack_records):
    """Match each attack record to the clean record of its source image."""
    clean = {}
    for r in clean_records:
        clean[str(Path(r.image).resolve())] = r
    pairs, offending, used = [], [], set()
    for a in attack_records:
        if not isinstance(a, AttackRecord):
            offending.append(f"not an attack record: {a}")
            continue
        key = str(Path(a.source_image).resolve())
        c = clean.get(key)
        if c is None:
            offending.append(f"attack image {a.image} has no clean source {a.source_image}")
        elif c.true_class != a.true_class:
            offending.append(f"attack image {a.image} labelled {a.true_class}, clean source {c.image} "
                             f"labelled {c.true_class}")
        else:
            pairs.append((c, a))
            used.add(key)
    offending += [f"clean image {k} has no attacked counterpart" for k in clean if k not in used]
    if offending:
        raise PairingError(f"{len(offending)} unpaired record(s): " + "; ".join(offending[:5]),
                           offending)
    if not pairs:
        raise PairingError("no image pairs to train on")
    return pairs


def encode_manifest_images(h: EncoderHandle, paths: Sequence[str], batch: int = 64) -> torch.Tensor:
    chunks = []
    for i in range(0, len(paths), batch):
        imgs = [preprocess_image(load_image(p)) for p in paths[i:i + batch]]
        chunks.append(h.encode_images(imgs))
    return torch.cat(chunks) if chunks else torch.empty((0, h.m), dtype=h.dtype)


def paired_features(h: EncoderHandle, clean_manifest, attack_manifest, n_classes: int) -> PairedFeatures:
    pairs = pair_records(_as_records(clean_manifest), _as_records(attack_manifest))
    labels = torch.tensor([c.true_class for c, _ in pairs], dtype=torch.long)
    if int(labels.min()) < 0 or int(labels.max()) >= n_classes:
        raise PairingError("true_class outside the class list", [])
    with torch.no_grad():
        xc = encode_manifest_images(h, [c.image for c, _ in pairs])
        xa = encode_manifest_images(h, [a.image for _, a in pairs])
    return PairedFeatures(xc, xa, labels)


# -- objective -------------------------------------------------------------------

class PlainFeatureCache:
    """Prefix-free class features per template; constant during training."""

    def __init__(self, h: EncoderHandle, class_names: Sequence[str]):
        self.h, self.class_names, self._banks = h, tuple(class_names), {}

    def __call__(self, template: str) -> ClassFeatureBank:
        bank = self._banks.get(template)
        if bank is None:
            with torch.no_grad():
                bank = build_class_features(self.h, self.class_names, template)
            self._banks[template] = bank
        return bank


def dp_objective(h: EncoderHandle, dp: torch.Tensor, class_names: Sequence[str], template,
                 x_clean: torch.Tensor, x_attack: torch.Tensor, labels: torch.Tensor,
                 cfg: TrainingConfig, plain_bank: ClassFeatureBank | None = None):
    """Batch-mean ``(L, L0, L1)`` for prefix rows ``dp`` on one template."""
    if plain_bank is None:
        with torch.no_grad():
            plain_bank = build_class_features(h, class_names, template)
    robust = build_class_features(h, class_names, template, dp, cfg.prefix_position)
    p0 = classify_probs(robust, x_attack)
    p1 = classify_probs(plain_bank, x_clean)
    p2 = classify_probs(robust, x_clean)
    l0 = defense_loss(p0, labels, cfg.clamp_floor).mean()
    l1 = identity_loss(p1, p2, cfg.clamp_floor).mean()
    loss = total_loss(l0 if cfg.use_defense_loss else torch.zeros_like(l0), l1, cfg.lam)
    return loss, l0, l1


def init_prefix(h: EncoderHandle, cfg: TrainingConfig) -> torch.Tensor:
    rng = np.random.default_rng(cfg.seed)
    values = rng.normal(0.0, cfg.init_std, size=(cfg.token_count, h.d))
    return torch.tensor(values, dtype=h.dtype)


CHECKPOINT_NAME = "checkpoint.pt"


def train_dp(h: EncoderHandle, clean_manifest, attack_manifest, class_names: Sequence[str],
             cfg: TrainingConfig | None = None, *, features: PairedFeatures | None = None,
             templates: Sequence[str] = TRAINING_TEMPLATES, checkpoint_dir=None,
             resume: bool = False, loss_log=None,
             on_epoch_end: Callable[[int, torch.Tensor], None] | None = None) -> DefensePrefixVector:
    """Learn the prefix rows on clean/attacked image pairs.

    ``features`` skips image encoding when the caller already has it.
    With ``checkpoint_dir`` a checkpoint is written after every epoch;
    ``resume=True`` continues from it and reproduces the uninterrupted run.
    """
    cfg = (cfg or TrainingConfig()).validate()
    class_names = tuple(class_names)
    if features is None:
        features = paired_features(h, clean_manifest, attack_manifest, len(class_names))
    xc, xa, y = features.clean.to(h.dtype), features.attack.to(h.dtype), features.labels
    n = len(y)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    dp = init_prefix(h, cfg).requires_grad_(True)
    opt = torch.optim.SGD([dp], lr=cfg.lr, momentum=cfg.momentum)
    start_epoch = 0
    ckpt_path = Path(checkpoint_dir) / CHECKPOINT_NAME if checkpoint_dir is not None else None
    if resume:
        if ckpt_path is None or not ckpt_path.exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {ckpt_path}")
        state = torch.load(ckpt_path, weights_only=True)
        if state["config_digest"] != cfg.digest() or state["model_id"] != h.model_id:
            raise CompatibilityError("checkpoint was written for a different config or model")
        with torch.no_grad():
            dp.copy_(state["dp"])
        opt.load_state_dict(state["optimizer"])
        start_epoch = int(state["epoch"])
        log.info("resuming from epoch %d", start_epoch)

    log_fh = open(loss_log, "a" if resume else "w", encoding="utf-8") if loss_log else None
    plain = PlainFeatureCache(h, class_names)
    try:
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(n)
            picks = rng.integers(len(templates), size=steps_per_epoch)
            for s in range(steps_per_epoch):
                step = epoch * steps_per_epoch + s
                lr = cosine_lr(cfg.lr, step, total_steps)
                for group in opt.param_groups:
                    group["lr"] = lr
                idx = torch.from_numpy(order[s * cfg.batch_size:(s + 1) * cfg.batch_size])
                template = templates[picks[s]]
                loss, l0, l1 = dp_objective(h, dp, class_names, template, xc[idx], xa[idx], y[idx],
                                            cfg, plain(template))
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}",
                                          str(ckpt_path) if ckpt_path and ckpt_path.exists() else None)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if log_fh:
                    log_fh.write(json.dumps({"epoch": epoch, "step": step, "L0": float(l0.detach()),
                                             "L1": float(l1.detach()), "L": float(loss.detach()), "lr": lr}) + "\n")
            if log_fh:
                log_fh.flush()
            log.info("epoch %d/%d done (L=%.4f)", epoch + 1, cfg.epochs, float(loss.detach()))
            if ckpt_path is not None:
                ckpt_path.parent.mkdir(parents=True, exist_ok=True)
                torch.save({"dp": dp.detach().clone(), "epoch": epoch + 1,
                            "config_digest": cfg.digest(), "model_id": h.model_id,
                            "optimizer": opt.state_dict()}, ckpt_path)
            if on_epoch_end is not None:
                on_epoch_end(epoch, dp.detach().clone())
    finally:
        if log_fh:
            log_fh.close()
    return DefensePrefixVector(dp.detach(), h.model_id, template_set_hash(templates), cfg.digest())


# -- persistence -----------------------------------------------------------------

def save_dp(dp: DefensePrefixVector, path) -> None:
    """Magic, u32 header length, JSON header, then float32 little-endian values."""
    header = json.dumps({
        "model_id": dp.model_id, "d": dp.d, "token_count": dp.token_count,
        "template_set_hash": dp.template_set_hash,
        "training_config_digest": dp.training_config_digest, "dtype": "<f4",
    }, sort_keys=True).encode("utf-8")
    body = dp.values.numpy().astype("<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(DP_MAGIC + struct.pack("<I", len(header)) + header + body)


def load_dp(path) -> DefensePrefixVector:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"defense prefix file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 8 or blob[:4] != DP_MAGIC:
        raise DPFormatError(f"{path}: not a defense prefix file")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise DPFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8:8 + hlen])
        d, k = int(header["d"]), int(header["token_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DPFormatError(f"{path}: bad header ({exc})") from None
    body = blob[8 + hlen:]
    if len(body) != 4 * d * k:
        raise DPFormatError(f"{path}: expected {4 * d * k} value bytes, found {len(body)}")
    values = torch.from_numpy(np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(k, d))
    return DefensePrefixVector(values, header["model_id"], header.get("template_set_hash", ""),
                               header.get("training_config_digest", ""))


def check_compatible(dp: DefensePrefixVector, h: EncoderHandle, allow_model_mismatch: bool = False):
    """Refuse a prefix trained for another model unless explicitly overridden."""
    if dp.d != h.d:
        raise CompatibilityError(f"prefix has d={dp.d} but model {h.model_id} has d={h.d}")
    if dp.model_id != h.model_id:
        msg = f"prefix was trained for model {dp.model_id!r}, not {h.model_id!r}"
        if not allow_model_mismatch:
            raise CompatibilityError(msg + " (pass the override flag to use it anyway)")
        warnings.warn(msg, stacklevel=2)
    return dp
