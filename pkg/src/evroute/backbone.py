"""
Hierarchical transformer backbone with optional uncertainty-gated routing.

Layout: a two-convolution stride-4 stem turns the image into a token grid;
each stage optionally halves the grid by 2x2 patch merging and then applies
``depth`` pre-norm blocks (attention + MLP, both residual). From stage
``ugtr_from_stage`` on, every block in ``ug2rlpr`` mode also carries an
evidential head and a routing/refinement branch that corrects the attention
output. The final grid is layer-normalized; the pooled mean feeds a linear
classifier, or the normalized tokens feed a prototype head.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .evidential import DirichletState, EvidentialHead, compute_evidence, dirichlet_state
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, dropout
from .prototypes import PrototypeBank, class_logits, similarity
from .routing import RoutingBlockParams, RoutingOutputs, effective_mask, refine, routing_loss, routing_mask
from .tensor import Tensor, as_tensor

MODES = ("baseline", "ug2rlpr")
STEM_STRIDE = 4


@dataclass(frozen=True)
class StageConfig:
    depth: int
    dim: int
    heads: int
    downsample: bool


@dataclass
class BackboneConfig:
    """Architecture and head settings.

    Stage settings are parallel lists so every field stays a flat scalar or
    list (addressable as ``model.<field>`` from the command line).
    """

    in_channels: int = 1
    num_classes: int = 3
    stem_channels: int = 8
    dims: List[int] = field(default_factory=lambda: [16, 32])
    depths: List[int] = field(default_factory=lambda: [1, 1])
    heads: List[int] = field(default_factory=lambda: [2, 2])
    downsample: List[bool] = field(default_factory=lambda: [False, True])
    mlp_ratio: float = 2.0
    attention_kind: str = "full"
    topk_ratio: float = 1.0
    ugtr_from_stage: int = 1
    beta_schedule: List[float] = field(default_factory=lambda: [0.0, 0.8])
    dropout: float = 0.1
    ln_affine: bool = True
    detach_sigma: bool = True
    lambda_ref_init: float = 0.1
    head: str = "auto"
    prototypes_per_class: int = 3
    log_temperature: float = math.log(10.0)
    use_cosine: bool = True
    agg_mode: str = "logsumexp"
    div_scope: str = "within_class"
    div_power: float = 2.0

    @property
    def stages(self) -> List[StageConfig]:
        return [StageConfig(*row) for row in zip(self.depths, self.dims, self.heads, self.downsample)]

    def validate(self) -> None:
        n = len(self.dims)
        if n == 0 or any(len(x) != n for x in (self.depths, self.heads, self.downsample, self.beta_schedule)):
            raise ContractError("dims, depths, heads, downsample and beta_schedule must have equal, nonzero length")
        for s in self.stages:
            if s.dim % s.heads:
                raise ContractError(f"dim {s.dim} not divisible by heads {s.heads}")
            if s.depth < 1:
                raise ContractError("stage depth must be >= 1")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ContractError(f"topk_ratio must lie in (0, 1], got {self.topk_ratio}")
        if self.attention_kind not in ("full", "topk_sparse"):
            raise ContractError(f"unknown attention_kind {self.attention_kind!r}")
        if self.ugtr_from_stage < 1:
            raise ContractError("ugtr_from_stage must be >= 1")
        if any(not 0.0 <= b <= 1.0 for b in self.beta_schedule):
            raise ContractError("beta_schedule entries must lie in [0, 1]")
        if self.head not in ("auto", "linear", "prototype"):
            raise ContractError(f"unknown head {self.head!r}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def preset(name: str, **overrides) -> BackboneConfig:
    """Named architectures: ``toy`` (2 stages) and ``paper4stage``."""
    if name == "toy":
        cfg = BackboneConfig()
    elif name == "paper4stage":
        cfg = BackboneConfig(
            stem_channels=16,
            dims=[32, 64, 128, 256],
            depths=[2, 2, 2, 2],
            heads=[1, 2, 4, 8],
            downsample=[False, True, True, True],
            beta_schedule=[0.0, 0.4, 0.6, 0.8],
        )
    else:
        raise ContractError(f"unknown preset {name!r}; choose 'toy' or 'paper4stage'")
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


@dataclass
class TokenGrid:
    """Stage feature map ``B x H x W x D`` kept in flattened ``B x N x D`` form."""

    tokens: Tensor
    H: int
    W: int

    @property
    def D(self) -> int:
        return self.tokens.shape[-1]

    @property
    def features(self) -> Tensor:
        B = self.tokens.shape[0]
        return T.reshape(self.tokens, (B, self.H, self.W, self.D))

    @classmethod
    def from_features(cls, features) -> "TokenGrid":
        features = as_tensor(features)
        B, H, W, D = features.shape
        return cls(T.reshape(features, (B, H * W, D)), H, W)


# ------------------------------------------------------------------ stem
class PatchEmbed(Module):
    def __init__(self, in_channels: int, stem_channels: int, dim: int, rng: np.random.Generator):
        self.conv1 = Conv2d(in_channels, stem_channels, 3, 2, 1, rng)
        self.conv2 = Conv2d(stem_channels, dim, 3, 2, 1, rng)

    def __call__(self, image: Tensor) -> TokenGrid:
        return patch_embed(image, self)


def patch_embed(image, stem: PatchEmbed) -> TokenGrid:
    """Stride-4 convolutional stem: ``B x C x H0 x W0`` -> grid ``H0/4 x W0/4``."""
    image = as_tensor(image)
    if image.ndim != 4:
        raise DimensionError(f"image batch must be B x C x H x W, got {image.shape}")
    H0, W0 = image.shape[2:]
    if H0 % STEM_STRIDE or W0 % STEM_STRIDE:
        raise DimensionError(f"image size {H0}x{W0} not divisible by stem stride {STEM_STRIDE}")
    x = stem.conv2(T.gelu(stem.conv1(image)))
    return TokenGrid.from_features(T.transpose(x, (0, 2, 3, 1)))


class PatchMerge(Module):
    """2x2 neighbourhood concatenation followed by a linear map ``4D -> D'``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.proj = Linear(4 * d_in, d_out, rng)

    def __call__(self, grid: TokenGrid) -> TokenGrid:
        if grid.H % 2 or grid.W % 2:
            raise DimensionError(f"cannot downsample odd grid {grid.H}x{grid.W}")
        B, D = grid.tokens.shape[0], grid.D
        H2, W2 = grid.H // 2, grid.W // 2
        x = T.reshape(grid.tokens, (B, H2, 2, W2, 2, D))
        x = T.transpose(x, (0, 1, 3, 2, 4, 5))
        x = T.reshape(x, (B, H2 * W2, 4 * D))
        return TokenGrid(self.proj(x), H2, W2)


# ------------------------------------------------------------- attention
def topk_keep_mask(scores: np.ndarray, ratio: float) -> np.ndarray:
    """Boolean mask keeping, per query row, the ``ceil(ratio * N)`` largest scores.

    Ties go to the lower key index.
    """
    N = scores.shape[-1]
    k = min(N, max(1, math.ceil(ratio * N)))
    keep = np.zeros(scores.shape, dtype=bool)
    if k == N:
        keep[...] = True
        return keep
    order = np.argsort(-scores, axis=-1, kind="stable")
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    return keep


def attention_weights(q: Tensor, k: Tensor, kind: str = "full", ratio: float = 1.0) -> Tensor:
    """Row-stochastic attention weights ``... x N x N``."""
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    if kind == "topk_sparse" and ratio < 1.0:
        keep = topk_keep_mask(scores.data, ratio)
        if not keep.all():
            scores = T.masked_fill(scores, ~keep, -np.inf)
    return T.softmax(scores, axis=-1)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kind: str = "full", topk_ratio: float = 1.0):
        if dim % heads:
            raise DimensionError(f"dim {dim} not divisible by heads {heads}")
        self.qkv = Linear(dim, 3 * dim, rng)
        self.out = Linear(dim, dim, rng)
        self.heads = heads
        self.kind = kind
        self.topk_ratio = topk_ratio

    def split_heads(self, x: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        B, N, D3 = x.shape
        D = D3 // 3
        h, dh = self.heads, D // self.heads
        x = T.transpose(T.reshape(x, (B, N, 3, h, dh)), (2, 0, 3, 1, 4))
        return x[0], x[1], x[2]

    def __call__(self, x: Tensor, return_weights: bool = False):
        B, N, D = x.shape
        q, k, v = self.split_heads(self.qkv(x))
        w = attention_weights(q, k, self.kind, self.topk_ratio)
        ctx = T.reshape(T.transpose(w @ v, (0, 2, 1, 3)), (B, N, D))
        out = self.out(ctx)
        return (out, w) if return_weights else out


# ---------------------------------------------------------------- blocks
@dataclass
class ForwardContext:
    mode: str = "ug2rlpr"
    rng: Optional[np.random.Generator] = None
    dropout: float = 0.0
    beta: Optional[float] = None
    zero_evidence: bool = False
    sigma_override: Optional[List[np.ndarray]] = None
    _routed_index: int = 0


@dataclass
class BlockAux:
    state: DirichletState
    routing: RoutingOutputs
    loss: Tensor


class Block(Module):
    """Pre-norm transformer block; ``routed`` blocks add the gated refinement path."""

    def __init__(self, dim: int, heads: int, cfg: BackboneConfig, beta: float, routed: bool, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, cfg.attention_kind, cfg.topk_ratio)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, max(1, int(round(dim * cfg.mlp_ratio))), dim, rng)
        self.routed = routed
        self.detach_sigma = cfg.detach_sigma
        if routed:
            self.evidential = EvidentialHead(dim, cfg.num_classes, rng)
            self.routing = RoutingBlockParams(dim, beta, rng, cfg.lambda_ref_init)

    def __call__(self, grid: TokenGrid, ctx: ForwardContext, tissue, has_mask):
        x = grid.tokens
        h = self.norm1(x)
        A = self.attn(h)
        aux = None
        if self.routed and ctx.mode == "ug2rlpr":
            A, aux = self._route(h, A, ctx, tissue, has_mask)
        x = x + dropout(A, ctx.dropout, ctx.rng)
        x = x + self.mlp(self.norm2(x), ctx.rng, ctx.dropout)
        return TokenGrid(x, grid.H, grid.W), aux

    def _route(self, h, A, ctx, tissue, has_mask):
        if ctx.zero_evidence:
            evidence = Tensor(np.zeros(h.shape[:-1] + (self.evidential.num_classes,)))
        else:
            evidence = compute_evidence(h, self.evidential)
        state = dirichlet_state(evidence)
        sigma_tok = state.token_uncertainty
        if ctx.sigma_override is not None:
            sigma_tok = Tensor(ctx.sigma_override[ctx._routed_index])
        elif self.detach_sigma:
            sigma_tok = sigma_tok.detach()
        ctx._routed_index += 1
        sigma = sigma_tok.mean(axis=-1)
        params = self.routing
        beta = params.beta if ctx.beta is None else ctx.beta
        logits, mask = routing_mask(h, params.routing_predictor)
        m_eff = effective_mask(mask, tissue, sigma_tok)
        R = params.refinement_branch(h)
        delta, delta_g, routed = refine(A, R, m_eff, params.lambda_ref, beta, sigma)
        loss = routing_loss(logits, tissue, has_mask)
        return routed, BlockAux(state, RoutingOutputs(logits, mask, m_eff, delta, delta_g, routed), loss)


# ---------------------------------------------------------------- model
def resample_mask(masks: np.ndarray, H: int, W: int) -> np.ndarray:
    """Nearest-neighbour resampling of ``B x H0 x W0`` binary masks to a token grid."""
    H0, W0 = masks.shape[1:]
    rows = np.minimum(((np.arange(H) + 0.5) * H0 / H).astype(int), H0 - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * W0 / W).astype(int), W0 - 1)
    return masks[:, rows][:, :, cols]


def global_average_pool(grid: TokenGrid, norm: Optional[LayerNorm] = None) -> Tensor:
    """Channel-normalize (when ``norm`` is given) and average over all tokens -> ``B x D``."""
    tokens = norm(grid.tokens) if norm is not None else grid.tokens
    return tokens.mean(axis=1)


@dataclass
class ForwardOutput:
    logits: Tensor
    pooled: Tensor
    tokens: Tensor
    grids: List[TokenGrid]
    aux: List[BlockAux]
    routing_loss: Tensor
    similarity: Optional[Tensor]

    @property
    def states(self) -> List[DirichletState]:
        return [a.state for a in self.aux]

    @property
    def global_uncertainty(self) -> Optional[np.ndarray]:
        """Per-sample uncertainty of the deepest routed block."""
        if not self.aux:
            return None
        return self.aux[-1].state.global_uncertainty.data.copy()


class Model(Module):
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        stages = cfg.stages
        self.stem = PatchEmbed(cfg.in_channels, cfg.stem_channels, stages[0].dim, rng)
        self.transitions = []
        self.blocks = []
        prev = stages[0].dim
        for si, st in enumerate(stages):
            if st.downsample:
                self.transitions.append(PatchMerge(prev, st.dim, rng))
            elif st.dim != prev:
                self.transitions.append(Linear(prev, st.dim, rng))
            else:
                self.transitions.append(None)
            routed = si >= cfg.ugtr_from_stage
            self.blocks.append(
                [Block(st.dim, st.heads, cfg, cfg.beta_schedule[si], routed, rng) for _ in range(st.depth)]
            )
            prev = st.dim
        self.final_norm = LayerNorm(prev, affine=cfg.ln_affine)
        if cfg.head == "linear":
            self.classifier = Linear(prev, cfg.num_classes, rng)
        else:
            self.prototype_head = PrototypeBank(
                cfg.num_classes,
                prev,
                rng,
                per_class=cfg.prototypes_per_class,
                log_temperature=cfg.log_temperature,
                use_cosine=cfg.use_cosine,
                agg_mode=cfg.agg_mode,
                div_scope=cfg.div_scope,
                q=cfg.div_power,
            )

    @property
    def has_prototypes(self) -> bool:
        return hasattr(self, "prototype_head")

    def routed_positions(self) -> List[Tuple[int, int]]:
        """``(stage, block)`` of each routed block, in the order of ``ForwardOutput.aux``."""
        return [(si, bi) for si, blocks in enumerate(self.blocks) for bi, blk in enumerate(blocks) if blk.routed]

    def named_parameters(self, prefix: str = ""):
        # transitions may hold None placeholders; blocks is a list of lists
        yield from self.stem.named_parameters(prefix + "stem.")
        for si, (tr, blocks) in enumerate(zip(self.transitions, self.blocks)):
            if tr is not None:
                yield from tr.named_parameters(f"{prefix}stage{si}.transition.")
            for bi, blk in enumerate(blocks):
                yield from blk.named_parameters(f"{prefix}stage{si}.block{bi}.")
        yield from self.final_norm.named_parameters(prefix + "final_norm.")
        if self.has_prototypes:
            yield from self.prototype_head.named_parameters(prefix + "prototype_head.")
        else:
            yield from self.classifier.named_parameters(prefix + "classifier.")

    def forward(
        self,
        images,
        mode: str = "ug2rlpr",
        masks: Optional[np.ndarray] = None,
        has_mask: Optional[np.ndarray] = None,
        rng: Optional[np.random.Generator] = None,
        dropout_rate: Optional[float] = None,
        beta: Optional[float] = None,
        zero_evidence: bool = False,
        sigma_override: Optional[Sequence[np.ndarray]] = None,
    ) -> ForwardOutput:
        """Run the network.

        Args:
            images: ``B x C x H0 x W0`` batch.
            mode: ``baseline`` skips routing entirely; ``ug2rlpr`` routes in enabled stages.
            masks: Optional ``B x H0 x W0`` binary tissue masks.
            has_mask: ``B`` flags marking which rows of ``masks`` are real; rows
                without a mask use an all-ones tissue mask and no routing loss.
            rng: Dropout randomness; ``None`` disables dropout.
            dropout_rate: Overrides the configured rate when ``rng`` is given.
            beta: Overrides every routed block's gate coefficient.
            zero_evidence: Replace all evidential outputs by zeros (sigma = 1).
            sigma_override: Per routed block ``B x N`` token uncertainties used as constants.
        """
        if mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
        if beta is not None and not 0.0 <= beta <= 1.0:
            raise ContractError(f"beta must lie in [0, 1], got {beta}")
        images = as_tensor(images)
        B = images.shape[0]
        if masks is not None:
            masks = np.asarray(masks, dtype=np.float64)
            has_mask = np.ones(B) if has_mask is None else np.asarray(has_mask, dtype=np.float64)
            masks = np.where(has_mask[:, None, None] > 0, masks, 1.0)
        ctx = ForwardContext(
            mode=mode,
            rng=rng,
            dropout=(self.cfg.dropout if dropout_rate is None else dropout_rate) if rng is not None else 0.0,
            beta=beta,
            zero_evidence=zero_evidence,
            sigma_override=list(sigma_override) if sigma_override is not None else None,
        )
        grid = self.stem(images)
        grids, aux = [], []
        for tr, blocks in zip(self.transitions, self.blocks):
            if tr is not None:
                grid = tr(grid) if isinstance(tr, PatchMerge) else TokenGrid(tr(grid.tokens), grid.H, grid.W)
            tissue = None
            if masks is not None:
                tissue = resample_mask(masks, grid.H, grid.W).reshape(B, -1)
            for blk in blocks:
                grid, a = blk(grid, ctx, tissue, has_mask if masks is not None else None)
                if a is not None:
                    aux.append(a)
            grids.append(grid)
        tokens = self.final_norm(grid.tokens)
        pooled = tokens.mean(axis=1)
        sim = None
        if self.has_prototypes:
            sim = similarity(tokens, self.prototype_head)
            logits = class_logits(sim, self.prototype_head)
        else:
            logits = self.classifier(pooled)
        rloss = Tensor(0.0)
        for a in aux:
            rloss = rloss + a.loss
        return ForwardOutput(logits, pooled, tokens, grids, aux, rloss, sim)

    __call__ = forward
