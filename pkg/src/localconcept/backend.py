"""Latent diffusion backend contract and a deterministic toy implementation.

Every other module in this package talks to a diffusion model through a
small adapter surface: an image codec, a prompt encoder, a noise predictor
that exposes its cross-attention maps, a variance-preserving forward process
and a deterministic reverse sampler step. ``ToyBackend`` implements that
surface at desk scale (identity codec, one genuine multi-head cross-attention
layer plus a linear head, float64, bit-reproducible per seed) so that losses,
guidance and sampling can be verified without a GPU or a pretrained
checkpoint. Adapters for real pretrained models implement the same surface
and are registered via :func:`register_backend_factory` in ``config``.
"""

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import torch

DTYPE = torch.float64

# Sinusoidal timestep features appended to each query token.
_TIME_FREQS = (0.1, 0.02)
_NUM_TIME_FEATURES = 2 * len(_TIME_FREQS)

# Scale of the frozen output head init. Deliberately generous so an untrained
# toy denoiser starts with a clearly suboptimal noise prediction.
_HEAD_INIT_GAIN = 3.0


class ShapeMismatchError(ValueError):
    pass


class UnknownPlaceholderError(ValueError):
    pass


def derive_seed(master: int, label: str) -> int:
    """Deterministic child seed: leading 8 bytes of sha256("{master}:{label}")."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def _as_double(data: torch.Tensor) -> torch.Tensor:
    return data.to(DTYPE) if data.dtype != DTYPE else data


@dataclass
class LatentImage:
    """Latent-space image tensor [channels, height, width]."""

    data: torch.Tensor
    scale_factor: int = 1

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"latent must be [C,H,W], got {tuple(self.data.shape)}")
        if min(self.data.shape[1:]) < 1:
            raise ShapeMismatchError("latent spatial dims must be >= 1")
        if not torch.isfinite(self.data.detach()).all():
            raise ValueError("latent contains non-finite entries")

    @property
    def spatial(self) -> tuple[int, int]:
        return (int(self.data.shape[1]), int(self.data.shape[2]))


@dataclass
class ConceptToken:
    """A learned pseudo-word embedding, addressable as "[name]" in prompts."""

    name: str
    embedding: torch.Tensor
    init_source: str = ""

    def __post_init__(self):
        if self.embedding.ndim != 1:
            raise ShapeMismatchError("token embedding must be a vector")
        if not torch.isfinite(self.embedding.detach()).all():
            raise ValueError(f"token {self.name!r} embedding is non-finite")

    def clone(self, name: str | None = None, requires_grad: bool = False) -> "ConceptToken":
        emb = self.embedding.detach().clone().requires_grad_(requires_grad)
        return ConceptToken(name=name or self.name, embedding=emb, init_source=self.init_source)


@dataclass
class TextEmbedding:
    """Encoded prompt: per-token embedding rows plus slot bookkeeping.

    ``token_slots`` maps each position to either the ``ConceptToken`` that
    produced it or the vocabulary word it was looked up from. Rows backed by
    a ConceptToken keep the autograd connection to the token embedding.
    """

    data: torch.Tensor
    token_slots: list

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ShapeMismatchError("text embedding must be [num_tokens, embed_dim]")

    @property
    def num_tokens(self) -> int:
        return int(self.data.shape[0])

    def concept_slot(self, name: str) -> int:
        for pos, ref in self.token_slots:
            if isinstance(ref, ConceptToken) and ref.name == name:
                return pos
        raise UnknownPlaceholderError(f"token {name!r} does not occur in this prompt")


@dataclass
class NoiseSample:
    """A noise draw with provenance; shape must match the latent it perturbs."""

    data: torch.Tensor
    seed: int = -1


def make_noise(shape: Sequence[int], seed: int) -> NoiseSample:
    gen = torch.Generator().manual_seed(seed)
    return NoiseSample(data=torch.randn(tuple(shape), generator=gen, dtype=DTYPE), seed=seed)


@dataclass
class DiffusionSchedule:
    """Cumulative signal-retention schedule for the forward/reverse process.

    ``alphas_bar`` has T+1 entries, ``alphas_bar[0] == 1`` exactly, strictly
    positive and nonincreasing. ``sampler`` names the reverse update family;
    only the deterministic one is implemented.
    """

    T: int
    alphas_bar: torch.Tensor
    sampler: str = "deterministic_ddim"

    def __post_init__(self):
        ab = _as_double(self.alphas_bar)
        if ab.ndim != 1 or ab.shape[0] != self.T + 1:
            raise ShapeMismatchError("alphas_bar must have T+1 entries")
        if float(ab[0]) != 1.0:
            raise ValueError("alphas_bar[0] must equal 1 exactly")
        if not bool((ab > 0).all()):
            raise ValueError("alphas_bar must be strictly positive")
        if not bool((ab[1:] <= ab[:-1] + 1e-15).all()):
            raise ValueError("alphas_bar must be nonincreasing")
        if self.sampler != "deterministic_ddim":
            raise ValueError(f"unsupported sampler {self.sampler!r}")
        self.alphas_bar = ab


def make_schedule(T: int = 50, kind: str = "cosine") -> DiffusionSchedule:
    """Build a T-step schedule. ``cosine`` is the default used throughout."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if kind == "cosine":
        s = 0.008
        t = torch.arange(T + 1, dtype=DTYPE)
        f = torch.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2
        ab = (f / f[0]).clamp_min(1e-6)
        ab = torch.cummin(ab, dim=0).values  # clamping must not break monotonicity
    elif kind == "linear":
        betas = torch.linspace(1e-4, 0.2, T, dtype=DTYPE)
        ab = torch.cat([torch.ones(1, dtype=DTYPE), torch.cumprod(1.0 - betas, dim=0)])
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    ab[0] = 1.0
    return DiffusionSchedule(T=T, alphas_bar=ab)


@dataclass
class CrossAttentionRecord:
    """Per-layer cross-attention probabilities, shaped [heads, tokens, h, w]."""

    maps: list
    layer_tags: list

    def __post_init__(self):
        if len(self.maps) != len(self.layer_tags):
            raise ShapeMismatchError("one tag per recorded layer required")
        for m in self.maps:
            md = m.detach()
            if m.ndim != 4:
                raise ShapeMismatchError("attention maps must be [heads, tokens, h, w]")
            if not bool((md >= 0).all()):
                raise ValueError("attention maps must be nonnegative")
            sums = md.sum(dim=1)
            if not bool(((sums - 1.0).abs() <= 1e-5).all()):
                raise ValueError("attention maps must sum to 1 over text tokens")

    def resolutions(self) -> list[tuple[int, int]]:
        return [(int(m.shape[2]), int(m.shape[3])) for m in self.maps]

    def smallest_resolution(self) -> tuple[int, int]:
        return min(self.resolutions(), key=lambda hw: hw[0] * hw[1])

    def token_maps(self, slot: int) -> list[torch.Tensor]:
        """Head-averaged map of one text token, one [h, w] tensor per layer."""
        ntok = int(self.maps[0].shape[1])
        if not 0 <= slot < ntok:
            raise UnknownPlaceholderError(f"token slot {slot} outside prompt of {ntok} tokens")
        return [m[:, slot].mean(dim=0) for m in self.maps]


@dataclass
class BackendDescriptor:
    kind: str
    latent_shape: tuple[int, int, int]
    attention_resolutions: list
    trainable_selector: str = "cross-attention K/V projections + registered concept tokens"


@dataclass
class TrainableSelector:
    """Which denoiser parameters an optimization run may update.

    ``token_names=None`` selects every registered concept token;
    an empty tuple selects none.
    """

    cross_attention_kv: bool = True
    token_names: Sequence[str] | None = None


def freeze_all_but_tokens(token_names: Sequence[str] | None = None) -> TrainableSelector:
    return TrainableSelector(cross_attention_kv=False, token_names=token_names)


@runtime_checkable
class Backend(Protocol):
    """Adapter contract over a latent text-to-image diffusion model.

    Implementations must be deterministic given (inputs, parameters, seed),
    keep every parameter outside ``trainable_params`` frozen, and record
    cross-attention maps from the decoder/upsampling half of the denoiser.
    """

    descriptor: BackendDescriptor

    def encode_image(self, image: torch.Tensor) -> LatentImage: ...

    def decode_latent(self, latent: LatentImage) -> torch.Tensor: ...

    def encode_prompt(self, prompt: str, tokens: Sequence[ConceptToken]) -> TextEmbedding: ...

    def predict_noise(
        self, x_t: LatentImage, c: TextEmbedding, t: int
    ) -> tuple[NoiseSample, CrossAttentionRecord]: ...

    def trainable_params(self, selector: TrainableSelector | None = None) -> list: ...


# --------------------------------------------------------------------------
# forward process / deterministic reverse step (schedule-level, backend-free)
# --------------------------------------------------------------------------


def add_noise(x0: LatentImage, eps: NoiseSample, t: int, sched: DiffusionSchedule) -> LatentImage:
    """Variance-preserving forward step:
    x_t = sqrt(ab[t]) * x0 + sqrt(1 - ab[t]) * eps.
    """
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside schedule range [0, {sched.T}]")
    if eps.data.shape != x0.data.shape:
        raise ShapeMismatchError("noise shape must match the latent")
    if t == 0:
        return LatentImage(data=x0.data.clone(), scale_factor=x0.scale_factor)
    ab = float(sched.alphas_bar[t])
    data = math.sqrt(ab) * x0.data + math.sqrt(1.0 - ab) * eps.data
    return LatentImage(data=data, scale_factor=x0.scale_factor)


def denoise_step(
    x_t: LatentImage, eps_pred: NoiseSample, t: int, sched: DiffusionSchedule
) -> LatentImage:
    """One deterministic reverse update from level t to t-1.

    With the true forward noise as ``eps_pred`` this inverts ``add_noise``
    exactly, so chaining from T down to 0 recovers x0.
    """
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside sampler range [1, {sched.T}]")
    if eps_pred.data.shape != x_t.data.shape:
        raise ShapeMismatchError("prediction shape must match the latent")
    ab_t = float(sched.alphas_bar[t])
    ab_prev = float(sched.alphas_bar[t - 1])
    x0_hat = (x_t.data - math.sqrt(1.0 - ab_t) * eps_pred.data) / math.sqrt(ab_t)
    data = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_pred.data
    return LatentImage(data=data, scale_factor=x_t.scale_factor)


# --------------------------------------------------------------------------
# toy backend
# --------------------------------------------------------------------------

_WORD_STRIP = " \t\n,.;:!?\"'"
_LAYER_TAG = "up.cross.0"


class ToyBackend:
    """Miniature deterministic diffusion backend for desk-scale verification.

    Identity image codec. The denoiser is a single genuine cross-attention
    layer: queries come from latent positions (plus sinusoidal timestep
    features), keys and values from the prompt embedding, scaled dot-product
    softmax over text tokens, and a frozen linear head mapping the attention
    context back to a per-position noise prediction. Only the K/V projections
    and registered concept-token embeddings are trainable.

    Tests may plant an additive logit bias for a prompt slot via
    :meth:`plant_attention_bias` to make the attention maps controllable;
    the bias is a frozen buffer and never trained.

    Instances are safe to use from one thread at a time; share work across
    threads by giving each its own instance (construction is cheap and
    seed-deterministic).
    """

    def __init__(
        self,
        seed: int,
        latent_shape: tuple[int, int, int] = (3, 8, 8),
        embed_dim: int = 8,
        num_heads: int = 2,
    ):
        c, h, w = latent_shape
        if min(c, h, w, embed_dim, num_heads) < 1:
            raise ValueError("all toy backend dimensions must be >= 1")
        self.seed = int(seed)
        self.latent_shape = (int(c), int(h), int(w))
        self.embed_dim = int(embed_dim)
        self.num_heads = int(num_heads)
        self.head_dim = int(embed_dim)
        inner = self.num_heads * self.head_dim

        g = torch.Generator().manual_seed(derive_seed(self.seed, "init"))

        def _randn(*shape, scale):
            return (torch.randn(shape, generator=g, dtype=DTYPE) * scale).requires_grad_(True)

        q_in = c + _NUM_TIME_FEATURES
        self.params: dict[str, torch.Tensor] = {
            f"{_LAYER_TAG}.to_q.weight": _randn(inner, q_in, scale=1.0 / math.sqrt(q_in)),
            f"{_LAYER_TAG}.to_q.bias": torch.zeros(inner, dtype=DTYPE).requires_grad_(True),
            f"{_LAYER_TAG}.to_k.weight": _randn(inner, embed_dim, scale=1.0 / math.sqrt(embed_dim)),
            f"{_LAYER_TAG}.to_k.bias": torch.zeros(inner, dtype=DTYPE).requires_grad_(True),
            f"{_LAYER_TAG}.to_v.weight": _randn(inner, embed_dim, scale=1.0 / math.sqrt(embed_dim)),
            f"{_LAYER_TAG}.to_v.bias": torch.zeros(inner, dtype=DTYPE).requires_grad_(True),
            "head.weight": _randn(c, inner, scale=_HEAD_INIT_GAIN / math.sqrt(inner)),
            "head.bias": torch.zeros(c, dtype=DTYPE).requires_grad_(True),
        }
        self._vocab_cache: dict[str, torch.Tensor] = {}
        self._tokens: dict[str, ConceptToken] = {}
        self._attention_bias: dict[int, torch.Tensor] = {}

    # -- descriptors ------------------------------------------------------

    @property
    def descriptor(self) -> BackendDescriptor:
        _, h, w = self.latent_shape
        return BackendDescriptor(
            kind="toy",
            latent_shape=self.latent_shape,
            attention_resolutions=[(h, w)],
        )

    def to_config(self) -> dict:
        return {
            "kind": "toy",
            "seed": self.seed,
            "latent_shape": list(self.latent_shape),
            "embed_dim": self.embed_dim,
            "num_heads": self.num_heads,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ToyBackend":
        if cfg.get("kind") != "toy":
            raise ValueError(f"not a toy backend config: {cfg.get('kind')!r}")
        return cls(
            seed=int(cfg["seed"]),
            latent_shape=tuple(cfg["latent_shape"]),
            embed_dim=int(cfg["embed_dim"]),
            num_heads=int(cfg["num_heads"]),
        )

    # -- codec ------------------------------------------------------------

    def encode_image(self, image: torch.Tensor) -> LatentImage:
        """Identity codec: the latent is the image itself (scale factor 1)."""
        if tuple(image.shape) != self.latent_shape:
            raise ShapeMismatchError(
                f"toy codec expects image shaped {self.latent_shape}, got {tuple(image.shape)}"
            )
        return LatentImage(data=_as_double(image).clone(), scale_factor=1)

    def decode_latent(self, latent: LatentImage) -> torch.Tensor:
        if tuple(latent.data.shape) != self.latent_shape:
            raise ShapeMismatchError(
                f"latent shaped {tuple(latent.data.shape)}, backend expects {self.latent_shape}"
            )
        return latent.data.detach().clamp(0.0, 1.0)

    # -- prompt encoding ---------------------------------------------------

    def vocab_embedding(self, word: str) -> torch.Tensor:
        """Frozen embedding for a vocabulary word, deterministic per backend seed."""
        key = word.lower()
        if key not in self._vocab_cache:
            gen = torch.Generator().manual_seed(derive_seed(self.seed, f"vocab:{key}"))
            self._vocab_cache[key] = torch.randn(self.embed_dim, generator=gen, dtype=DTYPE)
        return self._vocab_cache[key]

    def encode_prompt(self, prompt: str, tokens: Sequence[ConceptToken] = ()) -> TextEmbedding:
        by_name = {tok.name: tok for tok in tokens}
        rows: list[torch.Tensor] = []
        slots: list = []
        for raw in prompt.split():
            word = raw.strip(_WORD_STRIP)
            if not word:
                continue
            pos = len(rows)
            if word.startswith("[") and word.endswith("]"):
                name = word[1:-1]
                if name not in by_name:
                    raise UnknownPlaceholderError(
                        f"placeholder [{name}] has no matching concept token"
                    )
                if any(isinstance(r, ConceptToken) and r.name == name for _, r in slots):
                    raise UnknownPlaceholderError(
                        f"placeholder [{name}] occurs more than once in the prompt"
                    )
                tok = by_name[name]
                if tok.embedding.shape[0] != self.embed_dim:
                    raise ShapeMismatchError(
                        f"token {name!r} has dim {tok.embedding.shape[0]}, backend expects {self.embed_dim}"
                    )
                rows.append(tok.embedding)
                slots.append((pos, tok))
            else:
                rows.append(self.vocab_embedding(word))
                slots.append((pos, word.lower()))
        if not rows:
            raise UnknownPlaceholderError("prompt encodes to zero tokens")
        return TextEmbedding(data=torch.stack(rows), token_slots=slots)

    # -- denoiser ----------------------------------------------------------

    @staticmethod
    def _time_features(t: int) -> torch.Tensor:
        feats = []
        for f in _TIME_FREQS:
            feats.extend([math.sin(f * t), math.cos(f * t)])
        return torch.tensor(feats, dtype=DTYPE)

    def predict_noise(
        self, x_t: LatentImage, c: TextEmbedding, t: int
    ) -> tuple[NoiseSample, CrossAttentionRecord]:
        if t < 1:
            raise ValueError(f"t={t}; the denoiser operates on t >= 1")
        if tuple(x_t.data.shape) != self.latent_shape:
            raise ShapeMismatchError(
                f"latent shaped {tuple(x_t.data.shape)}, backend expects {self.latent_shape}"
            )
        ch, h, w = self.latent_shape
        n_pos, n_tok = h * w, c.num_tokens
        p = self.params

        x_flat = x_t.data.reshape(ch, n_pos).transpose(0, 1)  # [pos, C]
        tfeat = self._time_features(t).expand(n_pos, _NUM_TIME_FEATURES)
        q_in = torch.cat([x_flat, tfeat], dim=1)

        q = q_in @ p[f"{_LAYER_TAG}.to_q.weight"].T + p[f"{_LAYER_TAG}.to_q.bias"]
        k = c.data @ p[f"{_LAYER_TAG}.to_k.weight"].T + p[f"{_LAYER_TAG}.to_k.bias"]
        v = c.data @ p[f"{_LAYER_TAG}.to_v.weight"].T + p[f"{_LAYER_TAG}.to_v.bias"]

        def split_heads(m, n):
            return m.reshape(n, self.num_heads, self.head_dim).permute(1, 0, 2)

        qh, kh, vh = split_heads(q, n_pos), split_heads(k, n_tok), split_heads(v, n_tok)
        logits = qh @ kh.transpose(1, 2) / math.sqrt(self.head_dim)  # [heads, pos, tok]
        if self._attention_bias:
            bias = torch.zeros(n_pos, n_tok, dtype=DTYPE)
            for slot, bias_map in self._attention_bias.items():
                if slot < n_tok:
                    bias[:, slot] = bias_map.reshape(n_pos)
            logits = logits + bias
        attn = torch.softmax(logits, dim=-1)

        ctx = attn @ vh  # [heads, pos, head_dim]
        ctx = ctx.permute(1, 0, 2).reshape(n_pos, self.num_heads * self.head_dim)
        eps = (ctx @ p["head.weight"].T + p["head.bias"]).transpose(0, 1).reshape(ch, h, w)

        maps = attn.permute(0, 2, 1).reshape(self.num_heads, n_tok, h, w)
        record = CrossAttentionRecord(maps=[maps], layer_tags=[_LAYER_TAG])
        return NoiseSample(data=eps, seed=-1), record

    # -- controllable attention (test instrumentation) ---------------------

    def plant_attention_bias(self, slot: int, logit_map: torch.Tensor) -> None:
        _, h, w = self.latent_shape
        if tuple(logit_map.shape) != (h, w):
            raise ShapeMismatchError(f"bias map must be shaped {(h, w)}")
        self._attention_bias[int(slot)] = _as_double(logit_map).clone()

    def clear_attention_bias(self) -> None:
        self._attention_bias = {}

    # -- parameters ---------------------------------------------------------

    def register_token(self, token: ConceptToken) -> None:
        if token.embedding.shape[0] != self.embed_dim:
            raise ShapeMismatchError("token embedding dim does not match backend")
        self._tokens[token.name] = token

    @property
    def registered_tokens(self) -> dict[str, ConceptToken]:
        return dict(self._tokens)

    def trainable_params(self, selector: TrainableSelector | None = None) -> list:
        """Named (name, tensor) handles the optimizer may update."""
        sel = selector or TrainableSelector()
        handles: list[tuple[str, torch.Tensor]] = []
        if sel.cross_attention_kv:
            for name in sorted(self.params):
                if ".to_k." in name or ".to_v." in name:
                    handles.append((name, self.params[name]))
        names = sorted(self._tokens) if sel.token_names is None else list(sel.token_names)
        for name in names:
            if name not in self._tokens:
                raise KeyError(f"no registered token named {name!r}")
            tok = self._tokens[name]
            tok.embedding.requires_grad_(True)
            handles.append((f"token:{name}", tok.embedding))
        return handles

    def param_digest(self, names: Sequence[str] | None = None) -> str:
        """sha256 over named parameter values (all core params by default)."""
        chosen = sorted(self.params) if names is None else list(names)
        hasher = hashlib.sha256()
        for name in chosen:
            if name.startswith("token:"):
                tensor = self._tokens[name.split(":", 1)[1]].embedding
            else:
                tensor = self.params[name]
            hasher.update(name.encode())
            hasher.update(tensor.detach().numpy().tobytes())
        return hasher.hexdigest()

    def frozen_param_names(self, selector: TrainableSelector | None = None) -> list[str]:
        trainable = {name for name, _ in self.trainable_params(selector)}
        return [name for name in sorted(self.params) if name not in trainable]

    # -- serialization -------------------------------------------------------

    def save_params(self, path: str | Path) -> None:
        """Flat little-endian float64 blob plus a JSON shape manifest."""
        path = Path(path)
        manifest: dict[str, dict] = {}
        blob = bytearray()
        for name in sorted(self.params):
            arr = self.params[name].detach().numpy()
            manifest[name] = {"offset": len(blob), "shape": list(arr.shape)}
            blob.extend(arr.astype("<f8").tobytes())
        path.write_bytes(bytes(blob))
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps({"dtype": "<f8", "tensors": manifest}, sort_keys=True, indent=2)
        )

    def load_params(self, path: str | Path) -> None:
        path = Path(path)
        manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        blob = path.read_bytes()
        for name, meta in manifest["tensors"].items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r} in manifest")
            shape = tuple(meta["shape"])
            count = int(torch.tensor(shape).prod()) if shape else 1
            start = meta["offset"]
            values = struct.unpack(f"<{count}d", blob[start : start + 8 * count])
            with torch.no_grad():
                self.params[name].copy_(torch.tensor(values, dtype=DTYPE).reshape(shape))


def make_toy_backend(
    seed: int,
    latent_shape: tuple[int, int, int] = (3, 8, 8),
    embed_dim: int = 8,
    num_heads: int = 2,
) -> ToyBackend:
    return ToyBackend(seed=seed, latent_shape=latent_shape, embed_dim=embed_dim, num_heads=num_heads)
