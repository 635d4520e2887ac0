"""Hard prompt recovery by projected gradient search over a token codebook.

The encoder side of PIC: find ``L`` vocabulary tokens whose text embedding is
closest (in cosine) to the image embedding.  Each step projects the continuous
prompt onto its nearest codebook rows, evaluates the objective and gradient at
the projected prompt, and applies that gradient to the continuous prompt.
"""
from __future__ import annotations

import abc
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import Image, TokenSequence
from .errors import BackendError, ConfigError, NumericalError, ShapeError

log = logging.getLogger(__name__)


class Embedder(abc.ABC):
    """Joint text/image embedding model with a token codebook.

    ``codebook`` is a ``(V, d)`` tensor.  ``encode_text`` maps a batch of token
    embedding sequences ``(B, L, d)`` to features ``(B, D)`` and must be
    differentiable in its input; ``encode_image`` maps an :class:`Image` to a
    ``(D,)`` feature vector.
    """

    codebook: torch.Tensor
    name: str = "embedder"

    @property
    def vocab_size(self) -> int:
        return self.codebook.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.codebook.shape[1]

    @abc.abstractmethod
    def encode_image(self, image: Image) -> torch.Tensor: ...

    @abc.abstractmethod
    def encode_text(self, embeds: torch.Tensor) -> torch.Tensor: ...

    def encode_ids(self, ids) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.ndim == 1:
            ids = ids[None]
        return self.encode_text(self.codebook[ids])


def image_statistics(image: Image, grid: int = 8) -> np.ndarray:
    """Coarse luminance, edge-energy and colour features of an image.

    Block means over a ``grid x grid`` partition of luminance and of gradient
    magnitude (each centred), followed by the three channel means.
    """
    from .sketch.edges import gradient_magnitude

    lum = image.luminance()
    grad = gradient_magnitude(lum)

    def blocks(a: np.ndarray) -> np.ndarray:
        rows = np.array_split(np.arange(a.shape[0]), grid)
        cols = np.array_split(np.arange(a.shape[1]), grid)
        out = np.array([[a[np.ix_(r, c)].mean() for c in cols] for r in rows]).ravel()
        return out - out.mean()

    g = blocks(grad)
    scale = np.abs(g).max()
    if scale > 0:
        g = g / scale
    return np.concatenate([blocks(lum), 2.0 * g, image.data.reshape(-1, 3).mean(0) - 0.5])


class ToyEmbedder(Embedder):
    """Closed-form embedder used for tests and offline pipelines.

    Text features are the mean of the token embeddings (optionally followed by a
    fixed linear map); image features are a fixed random projection of
    :func:`image_statistics`.  Everything is float64 and seeded.
    """

    name = "toy"

    def __init__(
        self,
        vocab_size: int = 49408,
        embed_dim: int = 32,
        seed: int = 0,
        codebook: Optional[np.ndarray] = None,
        text_projection: Optional[np.ndarray] = None,
        image_encoder: Optional[Callable[[Image], np.ndarray]] = None,
    ):
        rng = np.random.default_rng(seed)
        if codebook is None:
            codebook = rng.standard_normal((vocab_size, embed_dim))
        codebook = np.asarray(codebook, dtype=np.float64)
        if codebook.ndim != 2 or not np.all(np.isfinite(codebook)):
            raise ShapeError("codebook must be a finite V x d matrix")
        self.codebook = torch.from_numpy(codebook)
        self.text_projection = None if text_projection is None else torch.as_tensor(text_projection, dtype=torch.float64)
        self.feature_dim = self.embed_dim if text_projection is None else self.text_projection.shape[0]
        self._image_encoder = image_encoder
        self._image_proj = rng.standard_normal((self.feature_dim, 2 * 64 + 3)) / np.sqrt(131)
        self.seed = seed

    def encode_image(self, image: Image) -> torch.Tensor:
        if self._image_encoder is not None:
            feat = np.asarray(self._image_encoder(image), dtype=np.float64)
        else:
            feat = self._image_proj @ image_statistics(image)
        if feat.shape != (self.feature_dim,):
            raise ShapeError(f"image feature has shape {feat.shape}, expected ({self.feature_dim},)")
        return torch.from_numpy(feat)

    def encode_text(self, embeds: torch.Tensor) -> torch.Tensor:
        pooled = embeds.mean(dim=-2)
        if self.text_projection is not None:
            pooled = pooled @ self.text_projection.T
        return pooled


class ClipEmbedder(Embedder):
    """Adapter around a Hugging Face ``CLIPModel``.

    Soft prompts are wrapped as ``[BOS] p_1 .. p_L [EOS]`` and run through the
    text tower with a causal mask; the feature is the projected EOS state.
    """

    name = "clip"

    _MEAN = (0.48145466, 0.4578275, 0.40821073)
    _STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model, bos_id: Optional[int] = None, eos_id: Optional[int] = None, image_size: Optional[int] = None):
        self.model = model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        text_cfg = model.config.text_config
        self.bos_id = text_cfg.bos_token_id if bos_id is None else bos_id
        self.eos_id = text_cfg.eos_token_id if eos_id is None else eos_id
        self.image_size = image_size or model.config.vision_config.image_size
        self.codebook = model.text_model.embeddings.token_embedding.weight.detach()
        self.name = f"clip:{getattr(model.config, '_name_or_path', '') or 'custom'}"

    @classmethod
    def from_pretrained(cls, name: str = "openai/clip-vit-large-patch14") -> "ClipEmbedder":
        try:
            from transformers import CLIPModel

            model = CLIPModel.from_pretrained(name)
        except Exception as exc:  # noqa: BLE001 - any loader failure is a backend failure
            raise BackendError(f"could not load CLIP model {name!r}: {exc}") from exc
        return cls(model)

    def _pixels(self, image: Image) -> torch.Tensor:
        x = torch.from_numpy(image.data).permute(2, 0, 1)[None].float()
        size = self.image_size
        h, w = x.shape[-2:]
        scale = size / min(h, w)
        x = F.interpolate(x, size=(max(size, round(h * scale)), max(size, round(w * scale))), mode="bicubic", align_corners=False)
        top = (x.shape[-2] - size) // 2
        left = (x.shape[-1] - size) // 2
        x = x[..., top:top + size, left:left + size].clamp(0, 1)
        mean = torch.tensor(self._MEAN).view(1, 3, 1, 1)
        std = torch.tensor(self._STD).view(1, 3, 1, 1)
        return (x - mean) / std

    def encode_image(self, image: Image) -> torch.Tensor:
        out = self.model.get_image_features(pixel_values=self._pixels(image))
        feats = out if isinstance(out, torch.Tensor) else out.pooler_output
        return feats[0].double()

    def encode_text(self, embeds: torch.Tensor) -> torch.Tensor:
        tm = self.model.text_model
        table = tm.embeddings.token_embedding.weight
        b = embeds.shape[0]
        bos = table[self.bos_id].expand(b, 1, -1)
        eos = table[self.eos_id].expand(b, 1, -1)
        seq = torch.cat([bos, embeds.to(table.dtype), eos], dim=1)
        hidden = tm.embeddings(inputs_embeds=seq)
        n = seq.shape[1]
        mask = torch.full((n, n), torch.finfo(hidden.dtype).min, dtype=hidden.dtype).triu(1)
        hidden = tm.encoder(inputs_embeds=hidden, attention_mask=mask.expand(b, 1, n, n)).last_hidden_state
        hidden = tm.final_layer_norm(hidden)
        return self.model.text_projection(hidden[:, -1]).double()


@dataclass
class PiConfig:
    prompt_length: int = 16
    step_count: int = 1000
    learning_rate: float = 0.1
    restart_count: int = 3
    random_seed: int = 0

    def __post_init__(self):
        if self.prompt_length < 1:
            raise ConfigError("prompt_length must be >= 1")
        if self.step_count < 1:
            raise ConfigError("step_count must be >= 1")
        if self.restart_count < 1:
            raise ConfigError("restart_count must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class InversionResult:
    tokens: TokenSequence
    objective: float
    trace: list[float] = field(default_factory=list)  # best objective over restarts at each step
    best_trace: list[float] = field(default_factory=list)  # running maximum of ``trace``
    restart: int = 0
    step: int = 0


def _nearest_rows(soft: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    # squared distances via |a|^2 - 2ab + |b|^2; ties resolved to the lowest index by argmin
    flat = soft.reshape(-1, soft.shape[-1]).to(codebook.dtype)
    d2 = (flat * flat).sum(1, keepdim=True) - 2.0 * flat @ codebook.T + (codebook * codebook).sum(1)[None]
    return d2.argmin(dim=1).reshape(soft.shape[:-1])


def project_to_codebook(soft, embedder: Embedder) -> tuple[TokenSequence, torch.Tensor]:
    """Replace every row of an ``L x d`` prompt with its nearest codebook row.

    Distance is Euclidean; on exact ties the lowest token id wins.
    """
    soft = torch.as_tensor(soft)
    if soft.ndim != 2 or soft.shape[1] != embedder.embed_dim:
        raise ShapeError(f"soft prompt must be L x {embedder.embed_dim}, got {tuple(soft.shape)}")
    with torch.no_grad():
        ids = _nearest_rows(soft, embedder.codebook)
        hard = embedder.codebook[ids].clone()
    return TokenSequence(tuple(ids.tolist()), embedder.vocab_size), hard


def invert_prompt(image: Image, embedder: Embedder, config: PiConfig | None = None) -> InversionResult:
    """Search for the hard prompt maximising cosine(text features, image features).

    Restarts run as one batch.  The returned tokens are the best projected prompt
    seen at any step of any restart (ties go to the lower restart index, then to
    the earlier step), not the final iterate.
    """
    config = config or PiConfig()
    codebook = embedder.codebook
    try:
        target = embedder.encode_image(image).detach().to(codebook.dtype)
    except (BackendError, ShapeError):
        raise
    except Exception as exc:  # noqa: BLE001
        raise BackendError(f"image encoder failed: {exc}") from exc
    if not torch.all(torch.isfinite(target)) or float(target.norm()) == 0.0:
        raise NumericalError("image embedding is zero or non-finite")

    gen = torch.Generator().manual_seed(config.random_seed)
    R, L = config.restart_count, config.prompt_length
    init = torch.randint(embedder.vocab_size, (R, L), generator=gen)
    soft = codebook[init].clone().requires_grad_(True)
    opt = torch.optim.Adam([soft], lr=config.learning_rate)

    best_obj, best_ids, best_where = -np.inf, None, (0, 0)
    trace: list[float] = []
    best_trace: list[float] = []

    # one extra evaluation scores the prompt produced by the final update
    for step in range(config.step_count + 1):
        with torch.no_grad():
            ids = _nearest_rows(soft, codebook)
        hard = codebook[ids].detach().requires_grad_(True)
        try:
            feats = embedder.encode_text(hard)
        except Exception as exc:  # noqa: BLE001
            raise BackendError(f"text encoder failed at step {step}: {exc}") from exc
        obj = F.cosine_similarity(feats, target.to(feats.dtype)[None], dim=-1, eps=1e-12)
        if not torch.all(torch.isfinite(obj)):
            raise NumericalError("non-finite objective", step)

        vals = obj.detach().double().cpu().numpy()
        r = int(np.argmax(vals))  # argmax returns the first maximum
        if vals[r] > best_obj:
            best_obj, best_ids, best_where = float(vals[r]), ids[r].tolist(), (r, step)
        trace.append(float(vals[r]))
        best_trace.append(best_obj)
        if step == config.step_count:
            break

        (grad,) = torch.autograd.grad(-obj.sum(), hard)
        if not torch.all(torch.isfinite(grad)):
            raise NumericalError("non-finite gradient", step)
        soft.grad = grad.to(soft.dtype)
        opt.step()
        opt.zero_grad(set_to_none=True)

    log.debug("prompt inversion: objective %.6f at restart %d step %d", best_obj, *best_where)
    return InversionResult(
        tokens=TokenSequence(tuple(best_ids), embedder.vocab_size),
        objective=best_obj,
        trace=trace,
        best_trace=best_trace,
        restart=best_where[0],
        step=best_where[1],
    )
