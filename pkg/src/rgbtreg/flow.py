"""Differentiable matching and hierarchical flow refinement.

The matching layer turns two feature maps into a dense displacement field:
global correlation, softmax over all memory positions, then the expected
coordinate (soft argmax) minus the query coordinate.  Displacements from the
two frequency streams are merged with learnable weights and refined through
five upsampling blocks from 1/32 to full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor, gelu, matmul, softmax
from .correspondence import CorrespondencePair
from .errors import ContractError
from .nn import Conv2d, Module, param
from .netops import upsample2x


@dataclass
class FlowField:
    """A (2, H, W) displacement field; [0] is dx, [1] is dy, in pixels at
    the field's own resolution.  ``scale`` is the downscale denominator."""

    data: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ContractError(f"flow data must be (2, H, W), got {self.data.shape}")


@dataclass
class FlowPyramid:
    """Decoder outputs from coarse to fine; scales are [16, 8, 4, 2, 1]."""

    levels: list[Tensor]
    scales: list[int]

    def finest(self) -> Tensor:
        return self.levels[-1]


def grid_coords(h: int, w: int) -> np.ndarray:
    """(h*w, 2) array of (x, y) pixel coordinates in row-major order."""
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def matching_layer(
    query_feats: Tensor, memory_feats: Tensor, temperature: Optional[float] = None
) -> Tensor:
    """Dense soft-argmax matching from query grid into the memory grid.

    Correlates every query position with every memory position, softmaxes at
    ``temperature`` (default sqrt(C)) and returns the probability-weighted
    expected memory coordinate minus the query coordinate as a (2, h, w)
    displacement field on the query grid.
    """
    if query_feats.shape != memory_feats.shape:
        raise ContractError(
            f"matching needs equal shapes, got {query_feats.shape}, {memory_feats.shape}"
        )
    c, h, w = query_feats.shape
    if temperature is None:
        temperature = float(np.sqrt(c))
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    q = query_feats.reshape(c, h * w).transpose(1, 0)
    m = memory_feats.reshape(c, h * w)
    probs = softmax(matmul(q, m) * (1.0 / temperature), axis=-1)
    coords = grid_coords(h, w)
    expected = matmul(probs, Tensor(coords))
    flow_tokens = expected - Tensor(coords)
    return flow_tokens.transpose(1, 0).reshape(2, h, w)


def hard_argmax_flow(query_feats: np.ndarray, memory_feats: np.ndarray) -> np.ndarray:
    """Non-differentiable argmax counterpart of the matching layer."""
    c, h, w = query_feats.shape
    q = query_feats.reshape(c, -1).T
    m = memory_feats.reshape(c, -1)
    best = np.argmax(q @ m, axis=1)
    coords = grid_coords(h, w)
    return (coords[best] - coords).T.reshape(2, h, w)


def downscale_flow(field: FlowField, factor: int) -> FlowField:
    """Area-mean downscale by an integer factor.

    Displacement values are divided by the factor as well, so the field stays
    expressed in pixels at its own resolution.
    """
    _, h, w = field.data.shape
    if factor < 1 or h % factor or w % factor:
        raise ContractError(f"factor {factor} must divide flow dims {(h, w)}")
    if factor == 1:
        return FlowField(field.data.copy(), scale=field.scale)
    blocks = field.data.reshape(2, h // factor, factor, w // factor, factor)
    return FlowField(blocks.mean(axis=(2, 4)) / factor, scale=field.scale * factor)


def merge_flows(a: Tensor, b: Tensor, weight_a: Tensor, weight_b: Tensor) -> Tensor:
    """Weighted elementwise combination of two displacement fields."""
    if a.shape != b.shape:
        raise ContractError(f"merge needs equal shapes, got {a.shape}, {b.shape}")
    return a * weight_a + b * weight_b


class WeightedFlowMerge(Module):
    """Learnable scalar weights for combining the two stream flows."""

    def __init__(self):
        self.weight_local = param(np.full((1, 1, 1), 0.5))
        self.weight_global = param(np.full((1, 1, 1), 0.5))

    def forward(self, local_flow: Tensor, global_flow: Tensor) -> Tensor:
        return merge_flows(local_flow, global_flow, self.weight_local, self.weight_global)


class FlowRefineBlock(Module):
    """Double the flow's resolution and values, then refine with three convs.

    The last conv starts at zero, so an untrained block is exactly the
    doubling upsampler.
    """

    def __init__(self, rng, hidden: int):
        self.conv1 = Conv2d(rng, 2, hidden, 3, 1, 1)
        self.conv2 = Conv2d(rng, hidden, hidden, 3, 1, 1)
        self.conv3 = Conv2d(rng, hidden, 2, 3, 1, 1, zero_init=True)

    def forward(self, flow: Tensor) -> Tensor:
        up = upsample2x(flow) * 2.0
        y = gelu(self.conv1(up))
        y = gelu(self.conv2(y))
        return up + self.conv3(y)


class FlowDecoder(Module):
    """Matching on both stream pairs, weighted merge, five refinement blocks."""

    def __init__(self, rng, hidden: int, levels: int = 5):
        self.merge = WeightedFlowMerge()
        self.blocks = [FlowRefineBlock(rng, hidden) for _ in range(levels)]

    def forward(
        self, local_pair: CorrespondencePair, global_pair: CorrespondencePair
    ) -> tuple[FlowPyramid, dict]:
        # the reference grid is the thermal one, so queries come from the
        # thermal-to-visible features and memory from the opposite direction
        local_flow = matching_layer(local_pair.t_to_v, local_pair.v_to_t)
        global_flow = matching_layer(global_pair.t_to_v, global_pair.v_to_t)
        merged = self.merge(local_flow, global_flow)
        levels = []
        scales = []
        flow = merged
        scale = 32
        for block in self.blocks:
            flow = block(flow)
            scale //= 2
            levels.append(flow)
            scales.append(scale)
        trace = {"local_flow": local_flow, "global_flow": global_flow, "merged": merged}
        return FlowPyramid(levels=levels, scales=scales), trace


def forward_backward_residual(pair: CorrespondencePair) -> np.ndarray:
    """Diagnostic: warp the reverse-direction flow onto the reference grid and
    add; near-zero values indicate cyclically consistent matches."""
    from .netops import grid_sample

    ref = matching_layer(pair.t_to_v, pair.v_to_t)
    rev = matching_layer(pair.v_to_t, pair.t_to_v)
    _, h, w = ref.shape
    base = grid_coords(h, w).T.reshape(2, h, w)
    coords = Tensor(base + ref.data)
    pulled = grid_sample(rev, coords)
    return ref.data + pulled.data
