"""Cross-modal correspondence encoders.

Both encoders consume features of the two modalities jointly and emit one
feature map per matching direction at 1/32 resolution.  The local encoder
(lcce) runs conv stages over channel-concatenated pairs; the global encoder
(gcce) cross-attends each modality's stream to the other's pooled tokens,
with the local directional features infused per stage.  Weights are shared
between the two directions, so swapping the inputs swaps the outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import Tensor, concat
from .encoders import AttentionStage, ConvBlock, EncoderConfig
from .errors import ContractError
from .nn import Conv2d, Module


@dataclass
class CorrespondencePair:
    """Directional correspondence features: visible-to-thermal and back."""

    v_to_t: Tensor
    t_to_v: Tensor


@dataclass
class CorrespondenceStages:
    """Per-direction stage features kept for infusion into the global encoder."""

    v_to_t: tuple[Tensor, Tensor]
    t_to_v: tuple[Tensor, Tensor]


class LocalCorrespondenceEncoder(Module):
    """Conv stages over concatenated directional feature pairs (lcce)."""

    def __init__(self, rng, in_ch: int, cfg: EncoderConfig):
        d1, d2 = cfg.corr_dims
        self.embed1 = Conv2d(rng, in_ch, d1, 4, stride=2, padding=1)
        self.block1 = ConvBlock(rng, d1, cfg.dw_kernel, cfg.mlp_ratio)
        self.embed2 = Conv2d(rng, d1, d2, 4, stride=2, padding=1)
        self.block2 = ConvBlock(rng, d2, cfg.dw_kernel, cfg.mlp_ratio)

    def _run(self, first: Tensor, second: Tensor) -> tuple[Tensor, Tensor]:
        if first.shape != second.shape:
            raise ContractError(f"modal features differ in shape: {first.shape}, {second.shape}")
        x = concat([first, second], axis=0)
        s1 = self.block1(self.embed1(x))
        s2 = self.block2(self.embed2(s1))
        return s1, s2

    def forward(
        self, f_visible: Tensor, f_thermal: Tensor
    ) -> tuple[CorrespondencePair, CorrespondenceStages]:
        vt1, vt2 = self._run(f_visible, f_thermal)
        tv1, tv2 = self._run(f_thermal, f_visible)
        pair = CorrespondencePair(v_to_t=vt2, t_to_v=tv2)
        stages = CorrespondenceStages(v_to_t=(vt1, vt2), t_to_v=(tv1, tv2))
        return pair, stages


class GlobalCorrespondenceEncoder(Module):
    """Cross-attention stages between the two modal streams (gcce)."""

    def __init__(self, rng, in_ch: int, cfg: EncoderConfig):
        d1, d2 = cfg.corr_dims
        common = dict(heads=cfg.heads, mlp_ratio=cfg.mlp_ratio, dw_kernel=cfg.dw_kernel)
        self.stage1 = AttentionStage(rng, in_ch, d1, 4, 2, 1, cfg.cross_ratios[0], **common)
        self.stage2 = AttentionStage(rng, d1, d2, 4, 2, 1, cfg.cross_ratios[1], **common)

    def forward(
        self,
        visible_stream: Tensor,
        thermal_stream: Tensor,
        local_stages: CorrespondenceStages,
    ) -> CorrespondencePair:
        a, b = self.stage1.forward_cross(
            visible_stream,
            thermal_stream,
            infusion_a=local_stages.v_to_t[0],
            infusion_b=local_stages.t_to_v[0],
        )
        a, b = self.stage2.forward_cross(
            a,
            b,
            infusion_a=local_stages.v_to_t[1],
            infusion_b=local_stages.t_to_v[1],
        )
        return CorrespondencePair(v_to_t=a, t_to_v=b)
