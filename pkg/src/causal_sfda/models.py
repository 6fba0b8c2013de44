"""Target classifier, prompt context and the vision-language encoder interface.

The real pipeline puts a frozen CLIP-style model behind :class:`VilEncoder`.
For desk-scale runs :class:`ToyVilEncoder` stands in for it: a frozen linear
image projection and one text anchor per class, scored by temperature-scaled
cosine similarity against ``anchor + mean(prompt tokens)``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
DEFAULT_TEMPLATE = "a photo of a [CLS]."
CLS_TOKENS = {"[cls]", "[class]"}


def as_float_tensor(x) -> torch.Tensor:
    """``torch.as_tensor`` that copies read-only arrays instead of aliasing them."""
    if isinstance(x, np.ndarray) and not x.flags.writeable:
        x = x.copy()
    return torch.as_tensor(x, dtype=DTYPE)


def param_hash(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of ``tensors`` in iteration order."""
    h = hashlib.sha256()
    for t in tensors:
        a = t.detach().cpu().contiguous().numpy()
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# -- prompt context -------------------------------------------------------------

@dataclass
class PromptContext:
    tokens: torch.Tensor
    init_template: str = DEFAULT_TEMPLATE

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def mean(self) -> torch.Tensor:
        return self.tokens.mean(dim=0)

    def hash(self) -> str:
        return param_hash([self.tokens])


def template_words(template: str) -> list[str]:
    """Lower-cased context words of ``template``; the class slot is dropped."""
    words = []
    for raw in template.split():
        w = raw.lower()
        if w.rstrip(".,;:!?") in CLS_TOKENS:
            continue
        w = re.sub(r"[^\w'-]", "", w)
        if w:
            words.append(w)
    return words


def word_vector(word: str, d: int, seed: int, scale: float) -> np.ndarray:
    """Gaussian vector seeded by ``sha256(f"{seed}:{word}")``."""
    digest = hashlib.sha256(f"{seed}:{word}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.normal(0.0, scale, size=d)


def init_prompt(template: str = DEFAULT_TEMPLATE, n_tokens: int = 4, width: int = 32, seed: int = 0,
                scale: float = 0.05) -> PromptContext:
    """Embed the words of ``template`` as context tokens.

    Rows beyond the template's word count are zero; extra words are truncated.
    """
    if n_tokens < 1 or width < 1:
        raise ValueError("need at least one token of width >= 1")
    words = template_words(template)
    if not words:
        raise ValueError(f"template {template!r} has no context words")
    rows = np.zeros((n_tokens, width))
    for i, w in enumerate(words[:n_tokens]):
        rows[i] = word_vector(w, width, seed, scale)
    return PromptContext(torch.tensor(rows, dtype=DTYPE, requires_grad=True), template)


# -- vision-language encoders -----------------------------------------------------

@runtime_checkable
class VilEncoder(Protocol):
    class_names: Sequence[str]

    def image_embed(self, x: torch.Tensor) -> torch.Tensor: ...

    def class_logits(self, x: torch.Tensor, ctx: PromptContext) -> torch.Tensor: ...

    def parameter_hash(self) -> str: ...


class ToyVilEncoder(nn.Module):
    def __init__(self, image_proj, anchors, class_names: Sequence[str] | None = None,
                 temperature: float = 10.0):
        super().__init__()
        image_proj = torch.as_tensor(image_proj, dtype=DTYPE)
        anchors = torch.as_tensor(anchors, dtype=DTYPE)
        if image_proj.ndim != 2 or anchors.ndim != 2 or anchors.shape[1] != image_proj.shape[0]:
            raise ValueError("expected image_proj (d x D) and anchors (C x d)")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.register_buffer("image_proj", image_proj.clone())
        self.register_buffer("anchors", anchors.clone())
        self.temperature = float(temperature)
        self.class_names = list(class_names or [f"class{c}" for c in range(anchors.shape[0])])
        self.requires_grad_(False)

    @property
    def in_dim(self) -> int:
        return self.image_proj.shape[1]

    @property
    def width(self) -> int:
        return self.image_proj.shape[0]

    @property
    def n_classes(self) -> int:
        return self.anchors.shape[0]

    def image_embed(self, x: torch.Tensor) -> torch.Tensor:
        x = as_float_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected images of dimension {self.in_dim}, got {tuple(x.shape)}")
        return x @ self.image_proj.T

    def text_embed(self, ctx: PromptContext) -> torch.Tensor:
        if ctx.width != self.width:
            raise ValueError(f"prompt width {ctx.width} does not match encoder width {self.width}")
        return self.anchors + ctx.mean()

    def class_logits(self, x: torch.Tensor, ctx: PromptContext) -> torch.Tensor:
        img = nn.functional.normalize(self.image_embed(x), dim=1, eps=1e-12)
        txt = nn.functional.normalize(self.text_embed(ctx), dim=1, eps=1e-12)
        return self.temperature * img @ txt.T

    def parameter_hash(self) -> str:
        return param_hash([self.image_proj, self.anchors, torch.tensor([self.temperature])])

    @classmethod
    def from_prototypes(cls, prototypes, width: int = 32, attend=None, anchor_noise: float = 0.0,
                        seed: int = 0, temperature: float = 10.0, class_names=None) -> "ToyVilEncoder":
        """Encoder whose anchors are noisy embeddings of known class prototypes.

        ``attend`` is an optional ``D x k`` orthonormal basis; the image
        projection only sees that subspace, which is how the toy model is made
        blind to style directions.
        """
        protos = np.asarray(prototypes, dtype=np.float64)
        D = protos.shape[1]
        rng = np.random.default_rng(seed)
        G = rng.normal(0.0, 1.0 / np.sqrt(D), size=(width, D))
        if attend is not None:
            B = np.asarray(attend, dtype=np.float64)
            G = G @ B @ B.T
        anchors = protos @ G.T
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True).clip(1e-12)
        anchors += anchor_noise * rng.normal(0.0, 1.0 / np.sqrt(width), size=anchors.shape)
        return cls(G, anchors, class_names, temperature)

    @classmethod
    def for_synthetic(cls, spec, seed: int, width: int = 32, anchor_noise: float = 1.5,
                      temperature: float = 10.0) -> "ToyVilEncoder":
        """Encoder that knows the semantic class layout of a synthetic family.

        It attends only to the semantic plane, so it is indifferent to the
        style rotation that separates domains of the family.
        """
        from .data import make_geometry

        geom = make_geometry(spec, seed)
        return cls.from_prototypes(geom.semantic_means[:spec.n_classes], width, geom.semantic_basis,
                                   anchor_noise, seed + 1, temperature, spec.class_names(False))

    @classmethod
    def from_class_names(cls, class_names: Sequence[str], in_dim: int, width: int = 32, seed: int = 0,
                         temperature: float = 10.0) -> "ToyVilEncoder":
        """Knowledge-free encoder: anchors are hashed from the class names."""
        rng = np.random.default_rng(seed)
        G = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(width, in_dim))
        anchors = np.stack([word_vector(n, width, seed, 1.0) for n in class_names])
        anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
        return cls(G, anchors, class_names, temperature)


def vil_class_logits(enc: VilEncoder, batch, ctx: PromptContext) -> torch.Tensor:
    batch = as_float_tensor(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty n x D matrix")
    return enc.class_logits(batch, ctx)


# -- target model -------------------------------------------------------------------

class TargetModel(nn.Module):
    """Small MLP feature extractor followed by a linear classifier."""

    def __init__(self, in_dim: int, n_classes: int, hidden: int = 64, depth: int = 1, seed: int = 0):
        super().__init__()
        if depth < 0 or hidden < 1:
            raise ValueError("depth must be >= 0 and hidden >= 1")
        self.in_dim, self.n_classes, self.hidden, self.depth = in_dim, n_classes, hidden, depth
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers: list[nn.Module] = []
            width = in_dim
            for _ in range(depth):
                layers += [nn.Linear(width, hidden, dtype=DTYPE), nn.Tanh()]
                width = hidden
            self.features = nn.Sequential(*layers)
            self.classifier = nn.Linear(width, n_classes, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.features(x))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameter_hash(self) -> str:
        return param_hash(self.parameters())


def target_logits(m: TargetModel, batch) -> torch.Tensor:
    batch = as_float_tensor(batch)
    if batch.ndim != 2 or batch.shape[1] != m.in_dim:
        raise ValueError(f"expected inputs of dimension {m.in_dim}, got {tuple(batch.shape)}")
    return m(batch)


def clone_model(m: TargetModel) -> TargetModel:
    return copy.deepcopy(m)


# -- checkpoints ------------------------------------------------------------------------
#
# Layout (see docs/formats.md):
#   b"CSFDA-CKPT\n"
#   one line of UTF-8 JSON header terminated by b"\n"
#   float64 little-endian arrays, row-major, in header order

CKPT_MAGIC = b"CSFDA-CKPT\n"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: TargetModel, class_names: Sequence[str], seed: int,
                    prompt: PromptContext | None = None, sigma=None) -> None:
    arrays = [(name, p.detach().numpy()) for name, p in model.named_parameters()]
    if prompt is not None:
        arrays.append(("prompt.tokens", prompt.tokens.detach().numpy()))
    if sigma is not None:
        arrays.append(("cov.sigma", np.asarray(sigma.detach() if torch.is_tensor(sigma) else sigma)))
    header = {
        "format_version": CKPT_VERSION,
        "seed": int(seed),
        "class_names": list(class_names),
        "model": {"in_dim": model.in_dim, "n_classes": model.n_classes,
                  "hidden": model.hidden, "depth": model.depth},
        "prompt_template": prompt.init_template if prompt is not None else None,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict:
    """Return ``{"header", "model", "prompt", "sigma"}`` (missing parts are ``None``)."""
    data = Path(path).read_bytes()
    if not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = data.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(data[len(CKPT_MAGIC):end])
    if header.get("format_version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    offset = end + 1
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arrays[spec["name"]] = np.frombuffer(data, "<f8", count, offset).reshape(spec["shape"]).copy()
        offset += 8 * count
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    cfg = header["model"]
    model = TargetModel(cfg["in_dim"], cfg["n_classes"], cfg["hidden"], cfg["depth"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[name]))
    prompt = None
    if "prompt.tokens" in arrays:
        prompt = PromptContext(torch.tensor(arrays["prompt.tokens"], dtype=DTYPE, requires_grad=True),
                               header.get("prompt_template") or DEFAULT_TEMPLATE)
    return {"header": header, "model": model, "prompt": prompt, "sigma": arrays.get("cov.sigma")}


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
