"""The hemisphere segmentation network.

Encoder-decoder with an output stride of 16: four encoder stages of
depthwise-separable convolutions with residual projections (the last stage
dilated), an atrous pyramid over the deepest features, and three decoder
stages that upsample, merge the matching encoder skip, and pass through a
dense conv + residual block + spatial attention.  The first two attention
blocks carry auxiliary class heads at 1/8 and 1/4 resolution for deep
supervision; the third decoder stage works at 1/2 resolution and a final
x2 upsample feeds the full-resolution pointwise classifier.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor
from .volumes import LabelVolume, VolumeGrid, standardize

__all__ = [
    "NetworkConfig",
    "SegmentationOutput",
    "Model",
    "build_model",
    "encoder_forward",
    "aspp_forward",
    "attention_block",
    "count_parameters",
    "segment",
    "ensemble_predict",
]

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _scaled(channels: int, rate: float) -> int:
    value = int(round(channels * rate))
    if value < 1:
        raise ValueError(
            f"filter_rate {rate} rounds a width of {channels} channels to zero"
        )
    return value


@dataclass(frozen=True)
class NetworkConfig:
    filter_rate: float = 1.0
    base_filters: int = 32
    num_classes: int = 3
    aspp_dilation_rates: tuple[int, ...] = (2, 4, 6)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.filter_rate <= 1.0:
            raise ValueError(f"filter_rate must lie in (0, 1], got {self.filter_rate}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.aspp_dilation_rates or any(r < 1 for r in self.aspp_dilation_rates):
            raise ValueError("aspp_dilation_rates must be positive ints")

    @property
    def encoder_stage_channels(self) -> tuple[int, ...]:
        return tuple(_scaled(self.base_filters * 2 ** s, self.filter_rate) for s in range(4))


@dataclass
class SegmentationOutput:
    main_probs: Tensor
    aux_probs: list[Tensor] = field(default_factory=list)
    attention_maps: list[Tensor] = field(default_factory=list)


class _Module:
    """Minimal parameter/buffer registry shared by all layers."""

    def __init__(self, name: str):
        self.name = name
        self._params: list[tuple[str, Tensor]] = []
        self._buffers: list[tuple[str, np.ndarray]] = []
        self._children: list["_Module"] = []

    def _param(self, suffix: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self._params.append((f"{self.name}.{suffix}", t))
        return t

    def _buffer(self, suffix: str, array: np.ndarray) -> np.ndarray:
        self._buffers.append((f"{self.name}.{suffix}", array))
        return array

    def _child(self, module: "_Module") -> "_Module":
        self._children.append(module)
        return module

    def named_parameters(self):
        yield from self._params
        for child in self._children:
            yield from child.named_parameters()

    def named_buffers(self):
        yield from self._buffers
        for child in self._children:
            yield from child.named_buffers()


class Conv3d(_Module):
    def __init__(self, rng, name, cin, cout, kernel=3, *, stride=1, padding=0,
                 dilation=1, bias=True):
        super().__init__(name)
        fan_in = cin * kernel ** 3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, kernel, kernel, kernel))
        self.weight = self._param("weight", w)
        self.bias = self._param("bias", np.zeros(cout)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, dilation=self.dilation)


class SepConv3d(_Module):
    """Depthwise 3^3 conv plus pointwise channel mixer (bias on the pointwise)."""

    def __init__(self, rng, name, cin, cout, *, stride=1, padding=1, dilation=1, bias=True):
        super().__init__(name)
        dw = rng.normal(0.0, np.sqrt(2.0 / 27), (cin, 1, 3, 3, 3))
        pw = rng.normal(0.0, np.sqrt(2.0 / cin), (cout, cin, 1, 1, 1))
        self.dw_weight = self._param("dw_weight", dw)
        self.pw_weight = self._param("pw_weight", pw)
        self.bias = self._param("bias", np.zeros(cout)) if bias else None
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_separable_conv3d(
            x, self.dw_weight, self.pw_weight, self.bias,
            stride=self.stride, padding=self.padding, dilation=self.dilation)


class BatchNorm(_Module):
    def __init__(self, name, channels):
        super().__init__(name)
        self.gamma = self._param("gamma", np.ones(channels))
        self.beta = self._param("beta", np.zeros(channels))
        self.running_mean = self._buffer("running_mean", np.zeros(channels))
        self.running_var = self._buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, train=train,
                              momentum=BN_MOMENTUM, eps=BN_EPS)


class EncoderStage(_Module):
    """Two separable convs with a projected residual, then stride-2 downsampling."""

    def __init__(self, rng, name, cin, width, *, dilation=1):
        super().__init__(name)
        self.conv1 = self._child(SepConv3d(rng, f"{name}.conv1", cin, width,
                                           padding=dilation, dilation=dilation, bias=False))
        self.bn1 = self._child(BatchNorm(f"{name}.bn1", width))
        self.conv2 = self._child(SepConv3d(rng, f"{name}.conv2", width, width,
                                           padding=dilation, dilation=dilation, bias=False))
        self.bn2 = self._child(BatchNorm(f"{name}.bn2", width))
        self.proj = self._child(Conv3d(rng, f"{name}.proj", cin, width, 1, bias=False))
        self.bn_proj = self._child(BatchNorm(f"{name}.bn_proj", width))
        self.down = self._child(SepConv3d(rng, f"{name}.down", width, width,
                                          stride=2, padding=1, bias=False))
        self.bn_down = self._child(BatchNorm(f"{name}.bn_down", width))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x), train))
        h = self.bn2(self.conv2(h), train)
        r = self.bn_proj(self.proj(x), train)
        h = ops.relu(ops.elementwise_add(h, r))
        return ops.relu(self.bn_down(self.down(h), train))


class Aspp(_Module):
    """Pointwise + dilated 3^3 branches + pooled branch, concatenated and fused."""

    def __init__(self, rng, name, channels, rates):
        super().__init__(name)
        self.rates = tuple(rates)
        self.point = self._child(Conv3d(rng, f"{name}.point", channels, channels, 1, bias=False))
        self.bn_point = self._child(BatchNorm(f"{name}.bn_point", channels))
        self.branches = []
        for i, r in enumerate(self.rates):
            conv = self._child(Conv3d(rng, f"{name}.dil{i}", channels, channels, 3,
                                      padding=r, dilation=r, bias=False))
            bn = self._child(BatchNorm(f"{name}.bn_dil{i}", channels))
            self.branches.append((conv, bn))
        # the pooled branch sees a 1x1x1 map, where batch statistics degenerate,
        # so it runs without normalization
        self.pool_conv = self._child(Conv3d(rng, f"{name}.pool_conv", channels, channels, 1))
        n_branches = len(self.rates) + 2
        self.fuse = self._child(Conv3d(rng, f"{name}.fuse", channels * n_branches,
                                       channels, 1, bias=False))
        self.bn_fuse = self._child(BatchNorm(f"{name}.bn_fuse", channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        parts = [ops.relu(self.bn_point(self.point(x), train))]
        for conv, bn in self.branches:
            parts.append(ops.relu(bn(conv(x), train)))
        pooled = ops.relu(self.pool_conv(ops.global_avg_pool(x)))
        # pooled extents are all 1, so the factor equals the target extent
        parts.append(ops.trilinear_upsample(pooled, tuple(x.shape[2:])))
        fused = self.fuse(ops.concat_channels(parts))
        return ops.relu(self.bn_fuse(fused, train))


class ResBlock(_Module):
    def __init__(self, rng, name, channels):
        super().__init__(name)
        self.conv1 = self._child(Conv3d(rng, f"{name}.conv1", channels, channels, 3,
                                        padding=1, bias=False))
        self.bn1 = self._child(BatchNorm(f"{name}.bn1", channels))
        self.conv2 = self._child(Conv3d(rng, f"{name}.conv2", channels, channels, 3,
                                        padding=1, bias=False))
        self.bn2 = self._child(BatchNorm(f"{name}.bn2", channels))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x), train))
        h = self.bn2(self.conv2(h), train)
        return ops.relu(ops.elementwise_add(h, x))


class AttentionBlock(_Module):
    """Spatial attention from a separable conv, with an optional class head.

    The attention map is sigmoid(channel-mean(sepconv(x))); the aux head, when
    present, reads the same pre-sigmoid pathway through a pointwise conv.
    """

    def __init__(self, rng, name, channels, aux_classes=None):
        super().__init__(name)
        self.conv = self._child(SepConv3d(rng, f"{name}.conv", channels, channels, padding=1))
        self.aux_head = None
        if aux_classes is not None:
            self.aux_head = self._child(Conv3d(rng, f"{name}.aux_head", channels, aux_classes, 1))

    def __call__(self, x: Tensor):
        pre = self.conv(x)
        amap = ops.sigmoid(ops.channel_mean(pre))
        attended = ops.scale_by_map(x, amap)
        aux = self.aux_head(pre) if self.aux_head is not None else None
        return attended, amap, aux


class DecoderStage(_Module):
    """Upsample x2, merge the skip, halve channels, refine, attend."""

    def __init__(self, rng, name, cin, skip_ch, *, aux_classes=None):
        super().__init__(name)
        merged = cin + skip_ch
        self.out_channels = merged // 2
        if self.out_channels < 1:
            raise ValueError(f"decoder stage {name} would have 0 output channels")
        self.conv = self._child(Conv3d(rng, f"{name}.conv", merged, self.out_channels, 3,
                                       padding=1, bias=False))
        self.bn = self._child(BatchNorm(f"{name}.bn", self.out_channels))
        self.res = self._child(ResBlock(rng, f"{name}.res", self.out_channels))
        self.attention = self._child(AttentionBlock(rng, f"{name}.att", self.out_channels,
                                                    aux_classes))

    def __call__(self, x: Tensor, skip: Tensor, train: bool):
        up = ops.trilinear_upsample(x, 2)
        merged = ops.concat_channels([up, skip])
        h = ops.relu(self.bn(self.conv(merged), train))
        h = self.res(h, train)
        return self.attention(h)


class Model(_Module):
    """Configured network with seed-deterministic initialization."""

    def __init__(self, config: NetworkConfig):
        super().__init__("net")
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.encoder_stage_channels
        self.stage1 = self._child(EncoderStage(rng, "net.enc1", 1, w[0]))
        self.stage2 = self._child(EncoderStage(rng, "net.enc2", w[0], w[1]))
        self.stage3 = self._child(EncoderStage(rng, "net.enc3", w[1], w[2]))
        self.stage4 = self._child(EncoderStage(rng, "net.enc4", w[2], w[3], dilation=2))
        self.aspp = self._child(Aspp(rng, "net.aspp", w[3], config.aspp_dilation_rates))
        self.dec1 = self._child(DecoderStage(rng, "net.dec1", w[3], w[2],
                                             aux_classes=config.num_classes))
        self.dec2 = self._child(DecoderStage(rng, "net.dec2", self.dec1.out_channels, w[1],
                                             aux_classes=config.num_classes))
        self.dec3 = self._child(DecoderStage(rng, "net.dec3", self.dec2.out_channels, w[0]))
        self.classifier = self._child(Conv3d(rng, "net.classifier",
                                             self.dec3.out_channels, config.num_classes, 1))

    def encoder_forward(self, volume: Tensor, train: bool = False):
        """Deep features at 1/16 resolution plus skips at 1/8, 1/4, 1/2."""
        _check_extents(volume.shape[2:])
        skip_half = self.stage1(volume, train)
        skip_quarter = self.stage2(skip_half, train)
        skip_eighth = self.stage3(skip_quarter, train)
        deep = self.stage4(skip_eighth, train)
        return deep, (skip_eighth, skip_quarter, skip_half)

    def forward(self, volume: Tensor, train: bool = False) -> SegmentationOutput:
        deep, (skip8, skip4, skip2) = self.encoder_forward(volume, train)
        fused = self.aspp(deep, train)
        d1, amap1, aux1 = self.dec1(fused, skip8, train)
        d2, amap2, aux2 = self.dec2(d1, skip4, train)
        d3, amap3, _ = self.dec3(d2, skip2, train)
        full = ops.trilinear_upsample(d3, 2)
        main = ops.softmax_channels(self.classifier(full))
        aux_probs = [ops.softmax_channels(aux1), ops.softmax_channels(aux2)]
        return SegmentationOutput(main_probs=main, aux_probs=aux_probs,
                                  attention_maps=[amap1, amap2, amap3])

    def predict_probs(self, grid: VolumeGrid) -> np.ndarray:
        """Standardize, run in eval mode, return (C, D, H, W) probabilities."""
        x = Tensor(standardize(grid).values[None, None])
        return self.forward(x, train=False).main_probs.data[0]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def _check_extents(spatial) -> None:
    if any(e % 16 for e in spatial):
        padded = tuple(-(-e // 16) * 16 for e in spatial)
        raise ValueError(
            f"spatial extents {tuple(spatial)} must be divisible by 16; "
            f"pad the volume to {padded}"
        )


def build_model(config: NetworkConfig) -> Model:
    return Model(config)


def encoder_forward(model: Model, volume: Tensor, train: bool = False):
    """Deep features at 1/16 resolution plus skips at (1/8, 1/4, 1/2)."""
    return model.encoder_forward(volume, train)


def aspp_forward(model: Model, deep_features: Tensor, train: bool = False) -> Tensor:
    return model.aspp(deep_features, train)


def attention_block(model: Model, features: Tensor, with_aux: bool):
    """Apply the decoder attention block matching the feature width.

    with_aux selects among the two deep-supervision blocks; otherwise the
    final stage's plain block is used.  The channel count of features picks
    the block.
    """
    if with_aux:
        blocks = [model.dec1.attention, model.dec2.attention]
    else:
        blocks = [model.dec3.attention]
    for block in blocks:
        if block.conv.dw_weight.shape[0] == features.shape[1]:
            return block(features)
    widths = [b.conv.dw_weight.shape[0] for b in blocks]
    raise ValueError(
        f"no attention block with {features.shape[1]} channels "
        f"(with_aux={with_aux} offers widths {widths})"
    )


def count_parameters(config: NetworkConfig) -> int:
    """Number of trainable scalars; depends on config only, not on the seed."""
    return build_model(config).parameter_count()


def segment(model: Model, grid: VolumeGrid) -> LabelVolume:
    """Per-voxel argmax decode; ties resolve to the lower class index."""
    probs = model.predict_probs(grid)
    labels = probs.argmax(axis=0).astype(np.uint8)
    return LabelVolume(labels=labels, spacing=grid.spacing)


def ensemble_predict(models: list[Model], grid: VolumeGrid) -> LabelVolume:
    """Per-voxel majority vote; full disagreement falls back to mean softmax.

    Identical members therefore reproduce the single-model segmentation, and
    both the vote and the fallback are invariant to model order.
    """
    if len(models) < 2:
        raise ValueError(f"ensemble_predict needs at least 2 models, got {len(models)}")
    classes = {m.config.num_classes for m in models}
    if len(classes) != 1:
        raise ValueError(f"ensemble members disagree on num_classes: {sorted(classes)}")
    num_classes = classes.pop()
    probs = np.stack([m.predict_probs(grid) for m in models])   # (K, C, D, H, W)
    votes = probs.argmax(axis=1)                                # (K, D, H, W)
    counts = np.stack([(votes == c).sum(axis=0) for c in range(num_classes)])
    winner = counts.argmax(axis=0)
    fallback = probs.mean(axis=0).argmax(axis=0)
    labels = np.where(counts.max(axis=0) >= 2, winner, fallback).astype(np.uint8)
    return LabelVolume(labels=labels, spacing=grid.spacing)
