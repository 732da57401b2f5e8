"""Feature encoders for the two frequency bands.

The high-frequency band goes through a purely convolutional local encoder
(lfe).  The low-frequency band goes through attention stages whose keys and
values come from pyramid-pooled tokens, capturing global self-correlation
(gsce); local features are infused into each stage through a 1x1 projection.
Both encoders emit stage features at 1/4 and 1/8 resolution.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .autodiff import Tensor, concat, gelu, matmul, softmax
from .errors import ConfigError, ContractError
from .netops import avg_pool2d
from .nn import Conv2d, LayerNorm, Linear, Module


@dataclass(frozen=True)
class EncoderConfig:
    """Channel widths, attention layout and pooling ratios for the pipeline.

    ``stage_dims`` are the encoder channels at 1/4 and 1/8 resolution,
    ``corr_dims`` the correspondence channels at 1/16 and 1/32.  ``divisor``
    records how much a toy configuration shrank the default widths.
    """

    stage_dims: tuple[int, int] = (48, 96)
    corr_dims: tuple[int, int] = (192, 384)
    heads: int = 4
    self_ratios: tuple[tuple[int, ...], tuple[int, ...]] = ((12, 16, 20, 24), (6, 8, 10, 12))
    cross_ratios: tuple[tuple[int, ...], tuple[int, ...]] = ((3, 4, 5, 6), (1, 2, 3, 4))
    mlp_ratio: int = 4
    dw_kernel: int = 7
    frb_hidden: int = 64
    levels: int = 5
    guided_radius: int = 8
    guided_eps: float = 1e-3
    divisor: int = 1

    def validate(self) -> "EncoderConfig":
        dims = (*self.stage_dims, *self.corr_dims)
        if any(d < 1 for d in dims) or self.frb_hidden < 2:
            raise ConfigError(f"channel widths must be positive, got {dims}, {self.frb_hidden}")
        for d in dims:
            if d % self.heads:
                raise ConfigError(f"channel width {d} not divisible by {self.heads} heads")
        for group in (*self.self_ratios, *self.cross_ratios):
            if not group or any(r < 1 for r in group):
                raise ConfigError(f"pooling ratios must be positive, got {group}")
        if self.dw_kernel % 2 != 1:
            raise ConfigError(f"depthwise kernel must be odd, got {self.dw_kernel}")
        if self.levels != 5:
            raise ConfigError(f"decoder is built for 5 refinement levels, got {self.levels}")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "EncoderConfig":
        """Rebuild from a JSON payload, coercing lists back into tuples."""
        try:
            cfg = cls(
                stage_dims=tuple(payload["stage_dims"]),
                corr_dims=tuple(payload["corr_dims"]),
                heads=payload["heads"],
                self_ratios=tuple(tuple(g) for g in payload["self_ratios"]),
                cross_ratios=tuple(tuple(g) for g in payload["cross_ratios"]),
                mlp_ratio=payload["mlp_ratio"],
                dw_kernel=payload["dw_kernel"],
                frb_hidden=payload["frb_hidden"],
                levels=payload["levels"],
                guided_radius=payload["guided_radius"],
                guided_eps=payload["guided_eps"],
                divisor=payload["divisor"],
            )
        except KeyError as exc:
            raise ConfigError(f"encoder config missing field {exc}") from None
        return cfg.validate()

    @classmethod
    def scaled(cls, divisor: int, **overrides) -> "EncoderConfig":
        """Shrink every channel width by ``divisor`` (pooling ratios unchanged)."""
        base = cls()
        dims = tuple(d // divisor for d in base.stage_dims)
        corr = tuple(d // divisor for d in base.corr_dims)
        hidden = max(2, base.frb_hidden // divisor)
        heads = overrides.pop("heads", None)
        if heads is None:
            heads = next(h for h in (4, 2, 1) if all(d % h == 0 for d in dims + corr))
        cfg = replace(
            base,
            stage_dims=dims,
            corr_dims=corr,
            frb_hidden=hidden,
            heads=heads,
            divisor=divisor,
            **overrides,
        )
        return cfg.validate()

    def fitted(self, h: int, w: int) -> "EncoderConfig":
        """Clamp pooled-token grids to the feature sides of an (h, w) input.

        Attention runs at 1/4 and 1/8 of the input in the self stages and at
        1/16 and 1/32 in the cross stages; each pooling grid side shrinks to
        fit, with duplicates dropped.
        """
        if h < 32 or w < 32:
            raise ConfigError(f"inputs below 32x32 are unsupported, got {h}x{w}")

        def clamp(group, side):
            fitted = []
            for r in group:
                r = min(r, side)
                if r not in fitted:
                    fitted.append(r)
            return tuple(fitted)

        side = min(h, w)
        cfg = replace(
            self,
            self_ratios=(clamp(self.self_ratios[0], side // 4), clamp(self.self_ratios[1], side // 8)),
            cross_ratios=(clamp(self.cross_ratios[0], side // 16), clamp(self.cross_ratios[1], side // 32)),
        )
        return cfg.validate()


@dataclass
class FeatureMap:
    """A (C, h, w) feature tensor together with its downscale denominator."""

    data: Tensor
    scale: int


def map_to_tokens(x: Tensor) -> Tensor:
    """(C, h, w) -> (h*w, C) token matrix."""
    c, h, w = x.shape
    return x.reshape(c, h * w).transpose(1, 0)


def tokens_to_map(tokens: Tensor, h: int, w: int) -> Tensor:
    """(h*w, C) -> (C, h, w) feature map."""
    n, c = tokens.shape
    if n != h * w:
        raise ContractError(f"token count {n} does not match {h}x{w}")
    return tokens.transpose(1, 0).reshape(c, h, w)


class ConvBlock(Module):
    """Depthwise 7x7 mixing, channel layer norm and a pointwise MLP, residual."""

    def __init__(self, rng, dim: int, dw_kernel: int = 7, mlp_ratio: int = 4):
        self.dw = Conv2d(rng, dim, dim, dw_kernel, 1, dw_kernel // 2, groups=dim)
        self.norm = LayerNorm(dim, axis=0)
        self.fc1 = Conv2d(rng, dim, dim * mlp_ratio, 1)
        self.fc2 = Conv2d(rng, dim * mlp_ratio, dim, 1)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.dw(x))
        y = self.fc2(gelu(self.fc1(y)))
        return x + y


class LocalFeatureEncoder(Module):
    """Two strided conv stages over the high-frequency band (lfe)."""

    def __init__(self, rng, in_ch: int, cfg: EncoderConfig):
        d1, d2 = cfg.stage_dims
        self.embed1 = Conv2d(rng, in_ch, d1, 4, stride=4, padding=0)
        self.block1 = ConvBlock(rng, d1, cfg.dw_kernel, cfg.mlp_ratio)
        # stage 2 keeps the 8-wide kernel but strides by 2 so the cumulative
        # downsample lands on 1/8 after the 1/4 of stage 1
        self.embed2 = Conv2d(rng, d1, d2, 8, stride=2, padding=3)
        self.block2 = ConvBlock(rng, d2, cfg.dw_kernel, cfg.mlp_ratio)

    def forward(self, hf: Tensor) -> tuple[Tensor, Tensor]:
        s1 = self.block1(self.embed1(hf))
        s2 = self.block2(self.embed2(s1))
        return s1, s2


class PyramidPoolTokens(Module):
    """Adaptive pooling at several ratios, flattened into one token sequence."""

    def __init__(self, rng, dim: int, ratios: tuple[int, ...]):
        self.proj = Linear(rng, dim, dim)
        self.ratios = tuple(ratios)

    def forward(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        if max(self.ratios) > min(h, w):
            raise ContractError(
                f"pooling ratio {max(self.ratios)} exceeds feature side {min(h, w)}"
            )
        token_groups = []
        for r in self.ratios:
            pooled = avg_pool2d(x, r, r)
            token_groups.append(pooled.reshape(c, r * r).transpose(1, 0))
        return self.proj(concat(token_groups, axis=0))


class TokenAttention(Module):
    """Multi-head attention: queries from one token set, keys/values from another."""

    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)

    def forward(self, queries: Tensor, memory: Tensor) -> Tensor:
        n, c = queries.shape
        m = memory.shape[0]
        h, d = self.heads, c // self.heads
        qh = self.q(queries).reshape(n, h, d).transpose(1, 0, 2)
        kh = self.k(memory).reshape(m, h, d).transpose(1, 2, 0)
        vh = self.v(memory).reshape(m, h, d).transpose(1, 0, 2)
        weights = softmax(matmul(qh, kh) * self.scale, axis=-1)
        mixed = matmul(weights, vh).transpose(1, 0, 2).reshape(n, c)
        return self.out(mixed)


class InvertedBottleneck(Module):
    """Pointwise expand, depthwise 7x7, gelu, pointwise project."""

    def __init__(self, rng, dim: int, ratio: int = 4, kernel: int = 7):
        hidden = dim * ratio
        self.expand = Conv2d(rng, dim, hidden, 1)
        self.dw = Conv2d(rng, hidden, hidden, kernel, 1, kernel // 2, groups=hidden)
        self.project = Conv2d(rng, hidden, dim, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.project(gelu(self.dw(self.expand(x))))


class AttentionStage(Module):
    """One patch-embedding stage with pooled-token attention and an FFN.

    Works in two modes: self mode attends a stream to its own pooled tokens;
    cross mode attends each of two streams to the other's pooled tokens.
    Auxiliary features enter right after embedding via a 1x1 projection.
    """

    def __init__(
        self,
        rng,
        in_ch: int,
        dim: int,
        kernel: int,
        stride: int,
        padding: int,
        ratios: tuple[int, ...],
        heads: int,
        mlp_ratio: int,
        dw_kernel: int,
    ):
        self.embed = Conv2d(rng, in_ch, dim, kernel, stride, padding)
        self.infuse = Conv2d(rng, dim, dim, 1)
        self.pool_tokens = PyramidPoolTokens(rng, dim, ratios)
        self.attn = TokenAttention(rng, dim, heads)
        self.norm = LayerNorm(dim, axis=-1)
        self.ffn = InvertedBottleneck(rng, dim, mlp_ratio, dw_kernel)

    def _embed(self, x: Tensor, infusion: Optional[Tensor]) -> Tensor:
        x = self.embed(x)
        if infusion is not None:
            if infusion.shape != x.shape:
                raise ContractError(
                    f"infusion shape {infusion.shape} does not match stage {x.shape}"
                )
            x = x + self.infuse(infusion)
        return x

    def _mix(self, x: Tensor, memory_tokens: Tensor) -> Tensor:
        c, h, w = x.shape
        tokens = map_to_tokens(x)
        tokens = self.norm(tokens + self.attn(tokens, memory_tokens))
        mixed = tokens_to_map(tokens, h, w)
        return mixed + self.ffn(mixed)

    def forward_self(self, x: Tensor, infusion: Optional[Tensor] = None) -> Tensor:
        x = self._embed(x, infusion)
        return self._mix(x, self.pool_tokens(x))

    def forward_cross(
        self,
        xa: Tensor,
        xb: Tensor,
        infusion_a: Optional[Tensor] = None,
        infusion_b: Optional[Tensor] = None,
    ) -> tuple[Tensor, Tensor]:
        xa = self._embed(xa, infusion_a)
        xb = self._embed(xb, infusion_b)
        mem_a = self.pool_tokens(xa)
        mem_b = self.pool_tokens(xb)
        return self._mix(xa, mem_b), self._mix(xb, mem_a)


class GlobalSelfEncoder(Module):
    """Two attention stages over the low-frequency band (gsce)."""

    def __init__(self, rng, in_ch: int, cfg: EncoderConfig):
        d1, d2 = cfg.stage_dims
        common = dict(heads=cfg.heads, mlp_ratio=cfg.mlp_ratio, dw_kernel=cfg.dw_kernel)
        self.stage1 = AttentionStage(rng, in_ch, d1, 8, 4, 2, cfg.self_ratios[0], **common)
        self.stage2 = AttentionStage(rng, d1, d2, 4, 2, 1, cfg.self_ratios[1], **common)

    def forward(
        self, lf: Tensor, local_stages: tuple[Tensor, Tensor]
    ) -> tuple[Tensor, Tensor]:
        s1 = self.stage1.forward_self(lf, infusion=local_stages[0])
        s2 = self.stage2.forward_self(s1, infusion=local_stages[1])
        return s1, s2
