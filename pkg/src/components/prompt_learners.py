"""Prompt-parameter families and how they are injected into a frozen student."""

from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass

import torch
from loguru import logger
from torch import nn

from ..models.experiment import PromptConfig, PromptMethod
from ..models.vlm import ClassSet, EncoderConfig, ProbabilityDistribution, TokenSequence
from ..utils.errors import ConfigurationError, ContractViolation, UnsupportedBackboneError
from .distillation import kl_divergence
from .vlm_core import (
    PaddedTokens,
    TextPromptHook,
    ToyDualEncoder,
    VisualPromptPlan,
    build_handcrafted_prompts,
    normalized,
    pad_token_sequences,
)


def resolve_depth(requested: int, num_layers: int, what: str) -> int:
    """Clamp a prompt depth to the layers the backbone actually has."""
    if requested < 1:
        raise ConfigurationError(f"{what} depth must be >= 1, got {requested}")
    available = max(1, num_layers)
    if requested > available:
        logger.warning(
            f"{what} depth {requested} exceeds {num_layers} encoder layers; "
            f"clamping to {available}"
        )
        return available
    return requested


class PromptLearner(nn.Module, ABC):
    """
    Base class for the trainable prompt state (gamma) of one method.

    A learner never registers the encoder it prompts; every call receives the
    frozen student explicitly so `parameters()` is exactly gamma.
    """

    method: PromptMethod

    def __init__(self, encoder_config: EncoderConfig, config: PromptConfig) -> None:
        super().__init__()
        self.encoder_config = encoder_config
        self.config = config
        self._class_tokens: dict[str, torch.Tensor] = {}

    # -- text ---------------------------------------------------------------

    def class_tokens(self, encoder: ToyDualEncoder, name: str) -> TokenSequence:
        """Frozen token embeddings of a class name, memoised per name."""
        if name not in self._class_tokens:
            with torch.no_grad():
                self._class_tokens[name] = encoder.embed_text(name).embeddings
        return TokenSequence(self._class_tokens[name])

    def class_batch(self, encoder: ToyDualEncoder, class_set: ClassSet) -> PaddedTokens:
        return pad_token_sequences(
            [self.class_tokens(encoder, name) for name in class_set.names]
        )

    @abstractmethod
    def encode_classes(
        self,
        encoder: ToyDualEncoder,
        class_set: ClassSet,
        image_features: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Prompted text features, (C, d) or (B, C, d) for image-conditioned methods."""
        ...

    def prompted_sequence(
        self, class_tokens: TokenSequence, image_features: torch.Tensor | None = None
    ) -> TokenSequence:
        raise ContractViolation(f"{self.method} has no learned text contexts")

    # -- image --------------------------------------------------------------

    def visual_plan(self) -> VisualPromptPlan | None:
        return None

    @property
    def needs_image_features(self) -> bool:
        return False

    # -- bookkeeping --------------------------------------------------------

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def load_snapshot(self, state: dict[str, torch.Tensor]) -> None:
        self.load_state_dict(state)

    def norm(self) -> float:
        params = self.trainable_parameters()
        if not params:
            return 0.0
        return float(torch.sqrt(sum((p.detach() ** 2).sum() for p in params)))


def _context_init(
    encoder: ToyDualEncoder,
    init_text: str,
    count: int,
    std: float,
    generator: torch.Generator,
) -> torch.Tensor:
    """Embed `init_text` into `count` contexts; missing slots are drawn at random."""
    d_w = encoder.config.text_token_dim
    ctx = torch.randn(count, d_w, generator=generator, dtype=torch.float64) * std
    ctx = ctx.to(encoder.dtype)
    if init_text:
        with torch.no_grad():
            init = encoder.embed_text(init_text).embeddings
        used = min(count, init.shape[0])
        ctx[:used] = init[:used]
    return ctx


def _random_tokens(
    shape: tuple[int, ...], std: float, generator: torch.Generator, dtype: torch.dtype
) -> torch.Tensor:
    return (torch.randn(*shape, generator=generator, dtype=torch.float64) * std).to(dtype)


class HandcraftedText:
    """Mixin for learners whose text side is the fixed student template."""

    template: str

    def encode_handcrafted(
        self, encoder: ToyDualEncoder, class_set: ClassSet
    ) -> torch.Tensor:
        padded = pad_token_sequences(
            build_handcrafted_prompts(encoder, class_set, self.template)
        )
        return encoder.encode_text(padded.embeddings, padded.mask)


class ZeroShotLearner(HandcraftedText, PromptLearner):
    """No parameters: the student's hand-crafted zero-shot classifier."""

    method = PromptMethod.ZEROSHOT

    def __init__(
        self, encoder_config: EncoderConfig, config: PromptConfig, template: str
    ) -> None:
        super().__init__(encoder_config, config)
        self.template = template

    def encode_classes(self, encoder, class_set, image_features=None):
        return self.encode_handcrafted(encoder, class_set)


class CoOpLearner(PromptLearner):
    """M shared context vectors prepended to every class name."""

    method = PromptMethod.COOP

    def __init__(
        self,
        encoder: ToyDualEncoder,
        config: PromptConfig,
        generator: torch.Generator,
    ) -> None:
        super().__init__(encoder.config, config)
        self.ctx = nn.Parameter(
            _context_init(encoder, config.ctx_init, config.n_ctx, config.init_std, generator)
        )

    @property
    def n_ctx(self) -> int:
        return self.ctx.shape[0]

    def contexts(self, image_features: torch.Tensor | None = None) -> torch.Tensor:
        return self.ctx

    def prompted_sequence(self, class_tokens, image_features=None):
        return TokenSequence(torch.cat([self.contexts(image_features), class_tokens.embeddings]))

    def _with_contexts(
        self, ctx: torch.Tensor, classes: PaddedTokens
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Prepend (..., M, d_w) contexts to (C, L, d_w) class tokens."""
        lead = ctx.shape[:-2]
        num_classes, length, d_w = classes.embeddings.shape
        ctx = ctx.unsqueeze(-3).expand(*lead, num_classes, self.n_ctx, d_w)
        tokens = classes.embeddings.expand(*lead, num_classes, length, d_w)
        mask = torch.cat(
            [
                torch.ones(num_classes, self.n_ctx, dtype=torch.bool, device=ctx.device),
                classes.mask,
            ],
            dim=-1,
        ).expand(*lead, num_classes, self.n_ctx + length)
        return torch.cat([ctx, tokens], dim=-2), mask

    def text_hook(self) -> TextPromptHook | None:
        return None

    def encode_classes(self, encoder, class_set, image_features=None):
        tokens, mask = self._with_contexts(
            self.contexts(image_features), self.class_batch(encoder, class_set)
        )
        return encoder.encode_text(tokens, mask, self.text_hook())


class CoCoOpLearner(CoOpLearner):
    """CoOp contexts shifted per image by a meta-network bias pi = h(image)."""

    method = PromptMethod.COCOOP

    def __init__(self, encoder, config, generator) -> None:
        super().__init__(encoder, config, generator)
        d = encoder.config.shared_dim
        hidden = max(1, d // config.meta_net_ratio)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(2**31, (1,), generator=generator)))
            self.meta_net = nn.Sequential(
                nn.Linear(d, hidden),
                nn.ReLU(),
                nn.Linear(hidden, encoder.config.text_token_dim),
            )
        nn.init.zeros_(self.meta_net[2].weight)
        nn.init.zeros_(self.meta_net[2].bias)
        self.meta_net.to(encoder.dtype)

    @property
    def needs_image_features(self) -> bool:
        return True

    def contexts(self, image_features=None):
        if image_features is None:
            raise ContractViolation("CoCoOp contexts need the image features")
        bias = self.meta_net(normalized(image_features))
        return self.ctx + bias.unsqueeze(-2)


class VisualPromptLearner(HandcraftedText, PromptLearner):
    """VPT: P learned tokens after CLS at the first layer (shallow) or at every layer (deep)."""

    def __init__(
        self,
        encoder: ToyDualEncoder,
        config: PromptConfig,
        generator: torch.Generator,
        template: str,
    ) -> None:
        super().__init__(encoder.config, config)
        if not encoder.config.is_vit:
            raise UnsupportedBackboneError(
                "Visual prompting can only be applied to a ViT image encoder"
            )
        self.method = config.method
        self.template = template
        if config.method is PromptMethod.VPT_SHALLOW:
            layers = 1
        else:
            layers = resolve_depth(config.depth, encoder.config.num_layers, "Vision")
        self.visual_tokens = nn.Parameter(
            _random_tokens(
                (layers, config.n_visual, encoder.config.patch_dim),
                config.init_std,
                generator,
                encoder.dtype,
            )
        )

    def visual_plan(self):
        tokens = self.visual_tokens
        return VisualPromptPlan(
            tokens.shape[1], {layer: tokens[layer] for layer in range(tokens.shape[0])}
        )

    def encode_classes(self, encoder, class_set, image_features=None):
        return self.encode_handcrafted(encoder, class_set)


class DeepTextLearner(CoOpLearner):
    """Text contexts at the input plus fresh contexts at each deeper layer."""

    def __init__(
        self,
        encoder: ToyDualEncoder,
        config: PromptConfig,
        generator: torch.Generator,
    ) -> None:
        PromptLearner.__init__(self, encoder.config, config)
        if not encoder.config.is_vit:
            raise UnsupportedBackboneError(
                f"{self.method} prompts the vision branch and needs a ViT image encoder"
            )
        depth = resolve_depth(config.depth, encoder.config.num_layers, "Prompt")
        first = _context_init(
            encoder, config.ctx_init, config.n_ctx, config.init_std, generator
        )
        deeper = _random_tokens(
            (depth - 1, config.n_ctx, encoder.config.text_token_dim),
            config.init_std,
            generator,
            encoder.dtype,
        )
        self.text_ctx = nn.Parameter(torch.cat([first.unsqueeze(0), deeper]))

    @property
    def n_ctx(self) -> int:
        return self.text_ctx.shape[1]

    @property
    def depth(self) -> int:
        return self.text_ctx.shape[0]

    def contexts(self, image_features=None):
        return self.text_ctx[0]

    def text_hook(self):
        if self.depth == 1:
            return None
        return TextPromptHook(
            self.n_ctx, {layer: self.text_ctx[layer] for layer in range(1, self.depth)}
        )


class MaPLeLearner(DeepTextLearner):
    """Deep text contexts; visual tokens are a linear map F of the text contexts."""

    method = PromptMethod.MAPLE

    def __init__(self, encoder, config, generator) -> None:
        super().__init__(encoder, config, generator)
        depth = self.depth
        d_w, d_v = encoder.config.text_token_dim, encoder.config.patch_dim
        count = 1 if config.shared_coupling else depth
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(torch.randint(2**31, (1,), generator=generator)))
            self.coupling = nn.ModuleList(nn.Linear(d_w, d_v) for _ in range(count))
        self.coupling.to(encoder.dtype)

    def coupling_for(self, layer: int) -> nn.Linear:
        return self.coupling[0 if len(self.coupling) == 1 else layer]

    def visual_plan(self):
        layers = {
            layer: self.coupling_for(layer)(self.text_ctx[layer])
            for layer in range(self.depth)
        }
        return VisualPromptPlan(self.n_ctx, layers)


class PromptSRCLearner(DeepTextLearner):
    """Independent deep text and visual prompts, regularised toward the frozen model."""

    method = PromptMethod.PROMPTSRC

    def __init__(self, encoder, config, generator) -> None:
        super().__init__(encoder, config, generator)
        depth = self.depth
        self.visual_tokens = nn.Parameter(
            _random_tokens(
                (depth, config.n_visual, encoder.config.patch_dim),
                config.init_std,
                generator,
                encoder.dtype,
            )
        )

    def visual_plan(self):
        tokens = self.visual_tokens
        return VisualPromptPlan(
            tokens.shape[1], {layer: tokens[layer] for layer in range(tokens.shape[0])}
        )

    def aggregation_schedule(self, epochs: int) -> tuple[float, float]:
        """Gaussian mean/std, rescaled when training is not 20 epochs long."""
        scale = epochs / 20.0
        return self.config.gaussian_mean * scale, max(self.config.gaussian_std * scale, 1e-3)


def build_prompt_learner(
    encoder: ToyDualEncoder,
    config: PromptConfig,
    seed: int = 1,
    student_template: str = "a photo of a {}",
) -> PromptLearner:
    """Instantiate the learner named by `config.method` for a student encoder."""
    generator = torch.Generator().manual_seed(seed)
    match config.method:
        case PromptMethod.ZEROSHOT:
            learner = ZeroShotLearner(encoder.config, config, student_template)
        case PromptMethod.COOP:
            learner = CoOpLearner(encoder, config, generator)
        case PromptMethod.COCOOP:
            learner = CoCoOpLearner(encoder, config, generator)
        case PromptMethod.VPT_SHALLOW | PromptMethod.VPT_DEEP:
            learner = VisualPromptLearner(encoder, config, generator, student_template)
        case PromptMethod.MAPLE:
            learner = MaPLeLearner(encoder, config, generator)
        case PromptMethod.PROMPTSRC:
            learner = PromptSRCLearner(encoder, config, generator)
        case _:
            raise ConfigurationError(f"Unknown prompt method: {config.method}")
    logger.debug(
        f"Built {learner.method} learner with {trainable_parameter_count(learner)} "
        f"trainable parameters"
    )
    return learner


# -- operations -------------------------------------------------------------


def build_prompted_text_input(
    learner: PromptLearner,
    class_tokens: TokenSequence,
    image_emb: torch.Tensor | None = None,
) -> TokenSequence:
    """Contexts prepended to one class-name sequence."""
    if learner.needs_image_features and image_emb is None:
        raise ContractViolation("CoCoOp needs an image embedding")
    return learner.prompted_sequence(class_tokens, image_emb)


def build_visual_injection_plan(learner: PromptLearner) -> VisualPromptPlan:
    if not learner.encoder_config.is_vit:
        raise UnsupportedBackboneError("Visual prompts need a ViT image encoder")
    plan = learner.visual_plan()
    if plan is None:
        raise ContractViolation(f"{learner.method} does not inject visual tokens")
    return plan


def trainable_parameter_count(learner: PromptLearner) -> int:
    return sum(p.numel() for p in learner.trainable_parameters())


@dataclass(frozen=True)
class RegularizerWeights:
    text_l1: float = 1.0
    image_l1: float = 1.0
    kl: float = 1.0

    @classmethod
    def from_config(cls, config: PromptConfig) -> "RegularizerWeights":
        return cls(config.text_l1_weight, config.image_l1_weight, config.kl_weight)

    def scaled(self, factor: float) -> "RegularizerWeights":
        return RegularizerWeights(
            self.text_l1 * factor, self.image_l1 * factor, self.kl * factor
        )


def promptsrc_regularizer(
    prompted_img_emb: torch.Tensor,
    prompted_txt_emb: torch.Tensor,
    frozen_img_emb: torch.Tensor,
    frozen_txt_emb: torch.Tensor,
    prompted_probs: ProbabilityDistribution | torch.Tensor,
    frozen_probs: ProbabilityDistribution | torch.Tensor,
    weights: RegularizerWeights = RegularizerWeights(),
) -> torch.Tensor:
    """L1 feature agreement on both modalities plus KL(frozen || prompted)."""
    if prompted_txt_emb.shape[-1] != frozen_txt_emb.shape[-1] or (
        prompted_img_emb.shape[-1] != frozen_img_emb.shape[-1]
    ):
        raise ContractViolation("Prompted and frozen features differ in dimension")
    frozen_txt = frozen_txt_emb.expand_as(prompted_txt_emb)
    text_gap = (prompted_txt_emb - frozen_txt).abs().mean()
    image_gap = (prompted_img_emb - frozen_img_emb).abs().mean()
    agreement = kl_divergence(frozen_probs, prompted_probs).mean()
    return weights.text_l1 * text_gap + weights.image_l1 * image_gap + weights.kl * agreement


def gaussian_weights(num_epochs: int, mean: float, std: float) -> torch.Tensor:
    """Normalised w_e proportional to exp(-(e - mean)^2 / (2 std^2)), e = 1..E."""
    if num_epochs < 1:
        raise ContractViolation("At least one epoch is required")
    if std <= 0:
        raise ContractViolation("Gaussian std must be > 0")
    epochs = torch.arange(1, num_epochs + 1, dtype=torch.float64)
    log_weights = -((epochs - mean) ** 2) / (2 * std**2)
    return torch.softmax(log_weights, dim=0)


def gaussian_aggregate(
    snapshots: Sequence[dict[str, torch.Tensor]], mean: float, std: float
) -> dict[str, torch.Tensor]:
    """Gaussian-weighted average of per-epoch prompt snapshots."""
    if not snapshots:
        raise ContractViolation("No prompt snapshots to aggregate")
    weights = gaussian_weights(len(snapshots), mean, std)
    if len(snapshots) == 1:
        return {k: v.clone() for k, v in snapshots[0].items()}
    aggregated = {}
    for key, reference in snapshots[0].items():
        total = sum(
            w * snap[key].to(torch.float64) for w, snap in zip(weights, snapshots)
        )
        aggregated[key] = total.to(reference.dtype)
    return aggregated
