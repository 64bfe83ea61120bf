"""Dual-encoder model abstraction, toy encoders, and the zero-shot head."""

import hashlib
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

from ..models.vlm import (
    ClassSet,
    EncoderConfig,
    ModelRole,
    ProbabilityDistribution,
    TokenSequence,
)
from ..utils.errors import (
    ConfigurationError,
    ContractViolation,
    DegenerateInputError,
    ShapeError,
    UnsupportedBackboneError,
)

PAD_ID = 0
CLASS_PLACEHOLDER = "{}"


class ToyTokenizer:
    """Lowercase whitespace tokenizer with a fixed hash-to-id map."""

    def __init__(self, vocab_size: int) -> None:
        if vocab_size < 2:
            raise ConfigurationError("vocab_size must leave room for padding")
        self.vocab_size = vocab_size

    def token_id(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return 1 + int.from_bytes(digest, "little") % (self.vocab_size - 1)

    def tokenize(self, text: str) -> list[int]:
        return [self.token_id(word) for word in text.lower().split()]


@dataclass
class TextPromptHook:
    """Deep text prompts: tokens written to positions [0, num_tokens) per layer."""

    num_tokens: int
    layers: dict[int, torch.Tensor]


@dataclass
class VisualPromptPlan:
    """Visual prompt tokens: inserted after CLS at layer 0, replaced deeper."""

    num_tokens: int
    layers: dict[int, torch.Tensor]


@dataclass
class PaddedTokens:
    """A batch of token sequences padded to a common length."""

    embeddings: torch.Tensor  # (..., L, d_w)
    mask: torch.Tensor  # (..., L), True on real tokens


def pad_token_sequences(sequences: Sequence[TokenSequence]) -> PaddedTokens:
    if not sequences:
        raise ContractViolation("No token sequences to pad")
    length = max(seq.length for seq in sequences)
    first = sequences[0].embeddings
    embeddings = first.new_zeros(len(sequences), length, first.shape[-1])
    mask = torch.zeros(len(sequences), length, dtype=torch.bool, device=first.device)
    for i, seq in enumerate(sequences):
        embeddings[i, : seq.length] = seq.embeddings
        mask[i, : seq.length] = True
    return PaddedTokens(embeddings, mask)


class SelfAttention(nn.Module):
    """Multi-head self-attention with a key padding mask."""

    def __init__(self, dim: int, num_heads: int) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, valid: torch.Tensor | None = None
    ) -> torch.Tensor:
        batch, length, dim = x.shape
        head_dim = dim // self.num_heads
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (
            t.reshape(batch, length, self.num_heads, head_dim).transpose(1, 2)
            for t in (q, k, v)
        )
        attn_mask = None if valid is None else valid[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.out_proj(out.transpose(1, 2).reshape(batch, length, dim))


class ResidualAttentionBlock(nn.Module):
    """Pre-norm transformer block; LayerNorm lives inside the residual branches."""

    def __init__(
        self, dim: int, num_heads: int, mlp_ratio: int, use_layer_norm: bool
    ) -> None:
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim) if use_layer_norm else nn.Identity()
        self.attn = SelfAttention(dim, num_heads)
        self.ln_2 = nn.LayerNorm(dim) if use_layer_norm else nn.Identity()
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(
        self, x: torch.Tensor, valid: torch.Tensor | None = None
    ) -> torch.Tensor:
        x = x + self.attn(self.ln_1(x), valid)
        return x + self.mlp(self.ln_2(x))


class DualEncoder(ABC):
    """Contract every backbone (toy or adapted pretrained) must satisfy."""

    config: EncoderConfig
    role: ModelRole
    tokenizer: ToyTokenizer

    @abstractmethod
    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        """Map token ids to the token embedding space W."""
        ...

    @abstractmethod
    def encode_text(
        self,
        tokens: torch.Tensor,
        mask: torch.Tensor | None = None,
        text_hook: TextPromptHook | None = None,
    ) -> torch.Tensor:
        """Encode (..., L, d_w) token embeddings into (..., d) features."""
        ...

    @abstractmethod
    def encode_image(
        self, images: torch.Tensor, visual_plan: VisualPromptPlan | None = None
    ) -> torch.Tensor:
        """Encode a batch of images or feature vectors into (B, d) features."""
        ...

    @property
    @abstractmethod
    def frozen(self) -> bool: ...


class ToyDualEncoder(nn.Module, DualEncoder):
    """Desk-scale CLIP-style dual encoder trainable from scratch."""

    def __init__(
        self,
        config: EncoderConfig,
        role: ModelRole = ModelRole.STUDENT,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.config = config
        self.role = ModelRole(role)
        self.tokenizer = ToyTokenizer(config.vocab_size)
        self._frozen = False

        d_w, d_v, d = config.text_token_dim, config.patch_dim, config.shared_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.token_embedding = nn.Embedding(config.vocab_size, d_w)
            nn.init.normal_(self.token_embedding.weight, std=0.02)
            self.text_positional = nn.Parameter(
                torch.randn(config.max_text_len, d_w) * 0.01
            )
            self.text_blocks = self._make_blocks(d_w)
            self.text_projection = nn.Linear(d_w, d, bias=False)

            if config.is_vit:
                self.patch_embedding = nn.Linear(
                    config.patch_input_dim, d_v, bias=False
                )
                self.class_embedding = nn.Parameter(torch.randn(d_v) * d_v**-0.5)
                self.image_positional = nn.Parameter(
                    torch.randn(config.num_patches + 1, d_v) * d_v**-0.5
                )
                self.image_blocks = self._make_blocks(d_v)
            else:
                self.image_mlp = nn.Sequential(
                    nn.Linear(self._mlp_input_dim(), d_v),
                    nn.GELU(),
                    nn.Linear(d_v, d_v),
                )
            self.image_projection = nn.Linear(d_v, d, bias=False)

        self.to(dtype)
        if self.role is ModelRole.TEACHER:
            self.freeze()
        logger.debug(
            f"Built {self.role.value} encoder: d={config.shared_dim} "
            f"layers={config.num_layers} image_arch={config.image_arch} "
            f"params={sum(p.numel() for p in self.parameters())}"
        )

    def _make_blocks(self, dim: int) -> nn.ModuleList:
        return nn.ModuleList(
            ResidualAttentionBlock(
                dim,
                self.config.num_heads,
                self.config.mlp_ratio,
                self.config.use_layer_norm,
            )
            for _ in range(self.config.num_layers)
        )

    def _mlp_input_dim(self) -> int:
        if self.config.input_kind == "features":
            return self.config.feature_dim
        return self.config.in_channels * 7 * 7

    # -- freezing ---------------------------------------------------------

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "ToyDualEncoder":
        for param in self.parameters():
            param.requires_grad_(False)
        self._frozen = True
        self.eval()
        return self

    def unfreeze(self) -> "ToyDualEncoder":
        if self.role is ModelRole.TEACHER:
            raise ContractViolation("A teacher model must stay frozen")
        for param in self.parameters():
            param.requires_grad_(True)
        self._frozen = False
        return self

    def train(self, mode: bool = True) -> "ToyDualEncoder":
        # Frozen encoders never leave eval mode.
        return super().train(mode and not self._frozen)

    @property
    def dtype(self) -> torch.dtype:
        return self.text_projection.weight.dtype

    # -- text -------------------------------------------------------------

    def embed_tokens(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(token_ids)

    def embed_text(self, text: str) -> TokenSequence:
        ids = torch.tensor(self.tokenizer.tokenize(text), dtype=torch.long)
        if ids.numel() == 0:
            raise ContractViolation(f"Text '{text}' produced no tokens")
        return TokenSequence(self.embed_tokens(ids))

    def encode_text(
        self,
        tokens: torch.Tensor,
        mask: torch.Tensor | None = None,
        text_hook: TextPromptHook | None = None,
    ) -> torch.Tensor:
        d_w = self.config.text_token_dim
        if tokens.dim() < 2 or tokens.shape[-1] != d_w:
            raise ShapeError(
                f"Expected token embeddings (..., L, {d_w}), got {tuple(tokens.shape)}"
            )
        length = tokens.shape[-2]
        if length > self.config.max_text_len:
            raise ShapeError(
                f"Sequence length {length} exceeds max_text_len "
                f"{self.config.max_text_len}"
            )
        lead = tokens.shape[:-2]
        x = tokens.reshape(-1, length, d_w)
        if mask is None:
            valid = torch.ones(x.shape[:2], dtype=torch.bool, device=x.device)
        else:
            valid = mask.reshape(-1, length)

        x = x + self.text_positional[:length]
        for layer, block in enumerate(self.text_blocks):
            if text_hook is not None and layer > 0 and layer in text_hook.layers:
                x = _replace_prefix(x, text_hook.layers[layer], 0, text_hook.num_tokens)
            x = block(x, valid)

        weights = valid.to(x.dtype).unsqueeze(-1)
        pooled = (x * weights).sum(dim=1) / weights.sum(dim=1)
        return self.text_projection(pooled).reshape(*lead, self.config.shared_dim)

    # -- image ------------------------------------------------------------

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """Split images or feature vectors into (B, U, patch_input_dim)."""
        cfg = self.config
        if cfg.input_kind == "features":
            if images.dim() != 2 or images.shape[1] != cfg.feature_dim:
                raise ShapeError(
                    f"Expected features (B, {cfg.feature_dim}), got {tuple(images.shape)}"
                )
            return images.reshape(images.shape[0], cfg.num_patches, -1)
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(
                f"Expected images (B, {expected}), got {tuple(images.shape)}"
            )
        p = cfg.patch_size
        patches = images.unfold(2, p, p).unfold(3, p, p)
        patches = patches.permute(0, 2, 3, 1, 4, 5)
        return patches.reshape(images.shape[0], cfg.num_patches, -1)

    def encode_image(
        self, images: torch.Tensor, visual_plan: VisualPromptPlan | None = None
    ) -> torch.Tensor:
        if not self.config.is_vit:
            if visual_plan is not None:
                raise UnsupportedBackboneError(
                    "Visual prompts need a ViT image encoder"
                )
            return self._encode_image_mlp(images)

        x = self.patch_embedding(self.patchify(images))
        batch = x.shape[0]
        cls = self.class_embedding.expand(batch, 1, -1)
        x = torch.cat([cls, x], dim=1) + self.image_positional

        num_prompts = 0
        if visual_plan is not None and 0 in visual_plan.layers:
            num_prompts = visual_plan.num_tokens
            prompts = _expand_tokens(visual_plan.layers[0], batch)
            x = torch.cat([x[:, :1], prompts, x[:, 1:]], dim=1)

        for layer, block in enumerate(self.image_blocks):
            if visual_plan is not None and layer > 0 and layer in visual_plan.layers:
                tokens = visual_plan.layers[layer]
                if num_prompts:
                    x = _replace_prefix(x, tokens, 1, num_prompts)
                else:
                    num_prompts = visual_plan.num_tokens
                    x = torch.cat(
                        [x[:, :1], _expand_tokens(tokens, batch), x[:, 1:]], dim=1
                    )
            x = block(x)

        return self.image_projection(x[:, 0])

    def _encode_image_mlp(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        if cfg.input_kind == "features":
            if images.dim() != 2 or images.shape[1] != cfg.feature_dim:
                raise ShapeError(
                    f"Expected features (B, {cfg.feature_dim}), got {tuple(images.shape)}"
                )
            flat = images
        else:
            if images.dim() != 4 or images.shape[1] != cfg.in_channels:
                raise ShapeError(f"Expected images (B, C, H, W), got {tuple(images.shape)}")
            flat = F.adaptive_avg_pool2d(images, 7).flatten(1)
        return self.image_projection(self.image_mlp(flat))


def _expand_tokens(tokens: torch.Tensor, batch: int) -> torch.Tensor:
    if tokens.dim() == 2:
        return tokens.unsqueeze(0).expand(batch, -1, -1)
    return tokens


def _replace_prefix(
    x: torch.Tensor, tokens: torch.Tensor, start: int, count: int
) -> torch.Tensor:
    """Swap positions [start, start + count) for fresh prompt tokens."""
    fresh = _expand_tokens(tokens, x.shape[0])
    return torch.cat([x[:, :start], fresh, x[:, start + count :]], dim=1)


# -- operations -------------------------------------------------------------


def build_handcrafted_prompts(
    model: ToyDualEncoder, class_set: ClassSet, template: str
) -> list[TokenSequence]:
    """One token sequence per class: the template with the name filled in."""
    if template.count(CLASS_PLACEHOLDER) != 1:
        raise ConfigurationError(
            f"Template '{template}' must contain exactly one '{CLASS_PLACEHOLDER}'"
        )
    return [model.embed_text(template.format(name)) for name in class_set.names]


def encode_text(
    model: DualEncoder,
    tokens: TokenSequence | Sequence[TokenSequence],
    prompt_hook: TextPromptHook | None = None,
) -> torch.Tensor:
    """Encode one sequence to (d,) or a list of sequences to (C, d)."""
    if isinstance(tokens, TokenSequence):
        return model.encode_text(tokens.embeddings.unsqueeze(0), None, prompt_hook)[0]
    padded = pad_token_sequences(tokens)
    return model.encode_text(padded.embeddings, padded.mask, prompt_hook)


def encode_image(
    model: DualEncoder,
    images: torch.Tensor,
    visual_prompt_hook: VisualPromptPlan | None = None,
) -> torch.Tensor:
    return model.encode_image(images, visual_prompt_hook)


def cosine_logits(
    image_emb: torch.Tensor, text_embs: torch.Tensor, temperature: float
) -> torch.Tensor:
    """cos(image, text_i) / tau for (..., d) images against (C, d) or (..., C, d)."""
    if temperature <= 0:
        raise ContractViolation("temperature must be > 0")
    if text_embs.dim() < 2 or text_embs.shape[-2] < 2:
        raise ContractViolation("At least 2 text embeddings are required")
    image_norm = image_emb.norm(dim=-1, keepdim=True)
    text_norm = text_embs.norm(dim=-1, keepdim=True)
    if (image_norm == 0).any() or (text_norm == 0).any():
        raise DegenerateInputError("Cannot classify with a zero-norm embedding")
    image_unit = image_emb / image_norm
    text_unit = text_embs / text_norm
    if text_unit.dim() == 2:
        cosines = image_unit @ text_unit.transpose(0, 1)
    else:
        cosines = (image_unit.unsqueeze(-2) * text_unit).sum(dim=-1)
    return cosines / temperature


def compute_class_probabilities(
    image_emb: torch.Tensor,
    text_embs: torch.Tensor | Sequence[torch.Tensor],
    temperature: float,
) -> torch.Tensor:
    """Zero-shot head: softmax over cosine similarities scaled by 1/tau."""
    if not isinstance(text_embs, torch.Tensor):
        text_embs = torch.stack(list(text_embs))
    logits = cosine_logits(image_emb, text_embs, temperature)
    return torch.log_softmax(logits, dim=-1).exp()


def class_distribution(
    image_emb: torch.Tensor,
    text_embs: torch.Tensor,
    class_set: ClassSet,
    temperature: float,
) -> ProbabilityDistribution:
    class_set.require_classifiable()
    probs = compute_class_probabilities(image_emb, text_embs, temperature)
    return ProbabilityDistribution(probs, class_set)


def normalized(features: torch.Tensor) -> torch.Tensor:
    return features / features.norm(dim=-1, keepdim=True)

