"""End-to-end registration pipeline.

Wiring, in dataflow order: each image is split into frequency bands; the
high-frequency band feeds a convolutional local encoder and the low-frequency
band an attention-based global encoder (infused with the local stages).  The
per-modality stage-2 features then enter two correspondence encoders, one
convolutional over concatenated pairs and one cross-attentional, whose outputs
the flow decoder matches, merges, and refines to full resolution.

Any of the four encoders can be ablated, in which case a shape-preserving
pass-through (strided pooling plus trainable 1x1 projections) stands in so
the rest of the network is untouched.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat
from .correspondence import (
    CorrespondencePair,
    CorrespondenceStages,
    GlobalCorrespondenceEncoder,
    LocalCorrespondenceEncoder,
)
from .decompose import FrequencyPair, Image, decompose
from .encoders import EncoderConfig, GlobalSelfEncoder, LocalFeatureEncoder
from .errors import ConfigError, ContractError, SchemaError
from .fileio import load_checkpoint, save_checkpoint
from .flow import FlowDecoder, FlowField, FlowPyramid
from .netops import avg_pool2d
from .nn import Conv2d, Module

ABLATABLE = ("lfe", "gsce", "lcce", "gcce")
CHECKPOINT_KIND = "registration-pipeline"


def check_ablation(ablate) -> tuple:
    """Validate a collection of encoder names to disable."""
    names = tuple(sorted(set(ablate)))
    for name in names:
        if name not in ABLATABLE:
            raise ConfigError(f"unknown ablation {name!r}; options are {ABLATABLE}")
    if "lfe" in names and "gsce" in names:
        raise ConfigError("cannot disable both feature encoders; no stream would remain")
    return names


class PassThroughStages(Module):
    """Stand-in for a disabled feature encoder.

    Pools the input to the two stage resolutions and projects channels with
    1x1 convs, so downstream consumers see the usual shapes.
    """

    def __init__(self, rng, in_ch: int, cfg: EncoderConfig):
        d1, d2 = cfg.stage_dims
        self.proj1 = Conv2d(rng, in_ch, d1, 1)
        self.proj2 = Conv2d(rng, d1, d2, 1)

    def forward(self, x: Tensor, infusion=None) -> tuple[Tensor, Tensor]:
        _, h, w = x.shape
        s1 = self.proj1(avg_pool2d(x, h // 4, w // 4))
        s2 = self.proj2(avg_pool2d(s1, h // 8, w // 8))
        return s1, s2


class PassThroughLocalCorr(Module):
    """Stand-in for the disabled pairwise conv encoder: concatenation plus
    shared 1x1 projections at the two correspondence resolutions.

    ``in_ch`` counts the concatenated channels, as for the real encoder.
    """

    def __init__(self, rng, in_ch: int, cfg: EncoderConfig):
        d1, d2 = cfg.corr_dims
        self.proj1 = Conv2d(rng, in_ch, d1, 1)
        self.proj2 = Conv2d(rng, d1, d2, 1)

    def _run(self, first: Tensor, second: Tensor) -> tuple[Tensor, Tensor]:
        _, h, w = first.shape
        x = concat([first, second], axis=0)
        s1 = self.proj1(avg_pool2d(x, h // 2, w // 2))
        s2 = self.proj2(avg_pool2d(s1, h // 4, w // 4))
        return s1, s2

    def forward(self, f_visible, f_thermal):
        vt1, vt2 = self._run(f_visible, f_thermal)
        tv1, tv2 = self._run(f_thermal, f_visible)
        pair = CorrespondencePair(v_to_t=vt2, t_to_v=tv2)
        return pair, CorrespondenceStages(v_to_t=(vt1, vt2), t_to_v=(tv1, tv2))


class PassThroughGlobalCorr(Module):
    """Stand-in for the disabled cross-attention encoder, mirroring its
    interface but ignoring the infusion stages."""

    def __init__(self, rng, in_ch: int, cfg: EncoderConfig):
        self.inner = PassThroughLocalCorr(rng, 2 * in_ch, cfg)

    def forward(self, visible_stream, thermal_stream, local_stages):
        pair, _ = self.inner(visible_stream, thermal_stream)
        return pair


class RegistrationPipeline(Module):
    """The full visible-thermal dense registration network."""

    def __init__(self, rng, cfg: EncoderConfig, ablate=()):
        cfg.validate()
        self.cfg = cfg
        self.ablate = check_ablation(ablate)
        d2 = cfg.stage_dims[1]
        if "lfe" in self.ablate:
            self.local_visible = PassThroughStages(rng, 3, cfg)
            self.local_thermal = PassThroughStages(rng, 3, cfg)
        else:
            self.local_visible = LocalFeatureEncoder(rng, 3, cfg)
            self.local_thermal = LocalFeatureEncoder(rng, 3, cfg)
        if "gsce" in self.ablate:
            self.global_visible = PassThroughStages(rng, 3, cfg)
            self.global_thermal = PassThroughStages(rng, 3, cfg)
        else:
            self.global_visible = GlobalSelfEncoder(rng, 3, cfg)
            self.global_thermal = GlobalSelfEncoder(rng, 3, cfg)
        if "lcce" in self.ablate:
            self.local_corr = PassThroughLocalCorr(rng, 2 * d2, cfg)
        else:
            self.local_corr = LocalCorrespondenceEncoder(rng, 2 * d2, cfg)
        if "gcce" in self.ablate:
            self.global_corr = PassThroughGlobalCorr(rng, d2, cfg)
        else:
            self.global_corr = GlobalCorrespondenceEncoder(rng, d2, cfg)
        self.decoder = FlowDecoder(rng, cfg.frb_hidden, cfg.levels)

    def decompose_image(self, img: Image) -> FrequencyPair:
        return decompose(img, self.cfg.guided_radius, self.cfg.guided_eps)

    def forward_bands(
        self, visible_bands: FrequencyPair, thermal_bands: FrequencyPair
    ) -> tuple[FlowPyramid, dict]:
        """Run the network on precomputed frequency bands.

        Training loops call this directly so the (fixed, unlearned)
        decomposition can be cached per sample.
        """
        local_v = self.local_visible(Tensor(visible_bands.hf))
        local_t = self.local_thermal(Tensor(thermal_bands.hf))
        global_v = self.global_visible(Tensor(visible_bands.lf), local_v)
        global_t = self.global_thermal(Tensor(thermal_bands.lf), local_t)
        local_pair, local_stages = self.local_corr(local_v[1], local_t[1])
        global_pair = self.global_corr(global_v[1], global_t[1], local_stages)
        return self.decoder(local_pair, global_pair)

    def forward_images(self, visible: Image, thermal: Image) -> tuple[FlowPyramid, dict]:
        if visible.shape != thermal.shape:
            raise ContractError(f"image shapes differ: {visible.shape} vs {thermal.shape}")
        _, h, w = visible.shape
        if h % 32 or w % 32:
            raise ContractError(f"height and width must be divisible by 32, got {h}x{w}")
        return self.forward_bands(self.decompose_image(visible), self.decompose_image(thermal))

    def register(self, visible: Image, thermal: Image) -> FlowField:
        """Predict the flow that warps the visible image onto the thermal grid.

        Accepts any image size: inputs are edge-padded on the bottom and
        right to the next multiple of 32 and the result is cropped back.
        """
        if visible.shape != thermal.shape:
            raise ContractError(f"image shapes differ: {visible.shape} vs {thermal.shape}")
        _, h, w = visible.shape
        pad_h, pad_w = (-h) % 32, (-w) % 32
        if pad_h or pad_w:
            pad = ((0, 0), (0, pad_h), (0, pad_w))
            visible = Image(np.pad(visible.data, pad, mode="edge"), visible.modality)
            thermal = Image(np.pad(thermal.data, pad, mode="edge"), thermal.modality)
        pyramid, _ = self.forward_images(visible, thermal)
        return FlowField(pyramid.finest().data[:, :h, :w], scale=1)


def save_pipeline(path, model: RegistrationPipeline) -> None:
    arrays = {name: tensor.data for name, tensor in model.named_params().items()}
    meta = {
        "kind": CHECKPOINT_KIND,
        "encoder": model.cfg.to_json(),
        "ablate": list(model.ablate),
    }
    save_checkpoint(path, arrays, meta)


def load_pipeline(path) -> RegistrationPipeline:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND or "encoder" not in meta:
        raise SchemaError(f"not a pipeline checkpoint: {path}")
    try:
        cfg = EncoderConfig.from_json(meta["encoder"])
    except ConfigError as exc:
        raise SchemaError(f"bad encoder config in checkpoint: {exc}") from None
    model = RegistrationPipeline(np.random.default_rng(0), cfg, tuple(meta.get("ablate", ())))
    params = model.named_params()
    if set(params) != set(arrays):
        missing = set(params) ^ set(arrays)
        raise SchemaError(f"checkpoint parameters do not match the model: {sorted(missing)[:4]}")
    for name, tensor in params.items():
        if tensor.data.shape != arrays[name].shape:
            raise SchemaError(
                f"shape mismatch for {name}: {arrays[name].shape} vs {tensor.data.shape}"
            )
        tensor.data[...] = arrays[name]
    return model
