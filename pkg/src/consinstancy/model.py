"""Dual-decoder fully convolutional network for panoptic particle scenes.

The backbone is a small encoder of residual two-path blocks: a strided
convolution summed with a convolution -> depthwise-separable convolution ->
max-pool path. Two structurally independent decoders consume the bottleneck
embedding: a semantic decoder ending in a per-pixel softmax and an instance
decoder whose head emits a unit-vector orientation field plus the paired
distance maps through a sigmoid. There are no encoder-decoder skip
connections; the decoders share nothing but the embedding.

Checkpoints are deterministic zip containers holding the config as JSON and
every parameter, buffer, and optimizer moment as a named tensor entry, so a
save/load round trip is bit-exact.
"""

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .tensorio import read_array_archive, write_array_archive

VARIANTS = ("Seg", "Inst", "ConsInst")


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 4
    base_width: int = 8
    n_classes: int = 2
    n_thing_classes: int = 1
    variant: str = "ConsInst"
    head_channels: int = 32

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.base_width < 1 or self.head_channels < 1:
            raise ValueError("channel widths must be >= 1")
        if self.n_thing_classes > self.n_classes - 1:
            raise ValueError(
                f"n_thing_classes {self.n_thing_classes} leaves no stuff class "
                f"(n_classes {self.n_classes})"
            )
        if self.n_thing_classes < 1:
            raise ValueError("need at least one thing class")
        return self

    def widths(self):
        return [self.base_width * (2 ** i) for i in range(self.n_blocks)]

    def to_dict(self):
        return {
            "n_blocks": self.n_blocks,
            "base_width": self.base_width,
            "n_classes": self.n_classes,
            "n_thing_classes": self.n_thing_classes,
            "variant": self.variant,
            "head_channels": self.head_channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()

    def with_variant(self, variant):
        return replace(self, variant=variant).validate()


def _conv_bn(in_ch, out_ch, stride=1):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _separable_conv_bn(ch):
    """Depthwise 3x3 followed by pointwise 1x1, each with norm + ReLU."""
    return nn.Sequential(
        nn.Conv2d(ch, ch, 3, padding=1, groups=ch),
        nn.BatchNorm2d(ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(ch, ch, 1),
        nn.BatchNorm2d(ch),
        nn.ReLU(inplace=True),
    )


class EncoderBlock(nn.Module):
    """Residual downsampling block: stride-2 conv path summed with a
    conv -> depthwise-separable conv -> max-pool path."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.down = _conv_bn(in_ch, out_ch, stride=2)
        self.conv = _conv_bn(in_ch, out_ch)
        self.separable = _separable_conv_bn(out_ch)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        return self.down(x) + self.pool(self.separable(self.conv(x)))


class DecoderBlock(nn.Module):
    """Residual upsampling block: upsample -> conv path summed with a
    conv -> depthwise-separable conv -> upsample path."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.post_conv = _conv_bn(in_ch, out_ch)
        self.conv = _conv_bn(in_ch, out_ch)
        self.separable = _separable_conv_bn(out_ch)

    def forward(self, x):
        return self.post_conv(self.up(x)) + self.up(self.separable(self.conv(x)))


def unit_normalize(x, dim=1, eps=1e-8):
    """Scale vectors along ``dim`` to unit Euclidean norm.

    The epsilon sits under the square root, so the all-zero vector maps to
    the all-zero vector instead of NaN; every other input comes out with
    norm 1 up to epsilon-induced rounding.
    """
    return x / torch.sqrt((x * x).sum(dim=dim, keepdim=True) + eps)


class UnitNormalize(nn.Module):
    def __init__(self, dim=1, eps=1e-8):
        super().__init__()
        self.dim = dim
        self.eps = eps

    def forward(self, x):
        return unit_normalize(x, dim=self.dim, eps=self.eps)


class DualDecoderNet(nn.Module):
    """Shared encoder with a semantic decoder and (except for the Seg
    variant) an instance decoder.

    Inputs are (B, 1, H, W) grayscale tensors in [0, 1] with H and W
    divisible by 2**n_blocks.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        widths = config.widths()

        blocks, in_ch = [], 1
        for w in widths:
            blocks.append(EncoderBlock(in_ch, w))
            in_ch = w
        self.encoder = nn.Sequential(*blocks)

        self.seg_decoder = self._make_decoder(widths)
        self.seg_head = nn.Conv2d(config.head_channels, config.n_classes, 1)

        if config.variant != "Seg":
            self.inst_decoder = self._make_decoder(widths)
            self.orient_conv = nn.Conv2d(config.head_channels, config.head_channels, 3, padding=1)
            self.orient_proj = nn.Conv2d(config.head_channels, 3, 1)
            self.normalize = UnitNormalize(dim=1)
            self.dist_head = nn.Conv2d(config.head_channels + 3, 2 * config.n_thing_classes, 1)

    def _make_decoder(self, widths):
        # mirror the encoder widths on the way up; the last block widens to
        # the head feature width consumed by both heads
        outs = list(reversed(widths))[1:] + [self.config.head_channels]
        blocks, in_ch = [], widths[-1]
        for out_ch in outs:
            blocks.append(DecoderBlock(in_ch, out_ch))
            in_ch = out_ch
        return nn.Sequential(*blocks)

    def encode(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {tuple(x.shape)}")
        factor = 2 ** self.config.n_blocks
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValueError(
                f"input {tuple(x.shape[2:])} not divisible by 2**n_blocks = {factor}"
            )
        return self.encoder(x)

    def decode_segmentation(self, z):
        return torch.softmax(self.seg_head(self.seg_decoder(z)), dim=1)

    def decode_instance(self, z):
        """Orientation field plus (delta_plus, delta_minus), all full-res."""
        if self.config.variant == "Seg":
            raise RuntimeError("variant Seg builds no instance decoder")
        feat = self.inst_decoder(z)
        h = F.relu(self.orient_conv(feat))
        theta = self.normalize(self.orient_proj(h))
        dist = torch.sigmoid(self.dist_head(torch.cat([theta, feat], dim=1)))
        t = self.config.n_thing_classes
        return theta, (dist[:, :t], dist[:, t:])

    def forward(self, x):
        z = self.encode(x)
        out = {"semantic": self.decode_segmentation(z)}
        if self.config.variant != "Seg":
            theta, (dpos, dneg) = self.decode_instance(z)
            out["orientation"] = theta
            out["delta_plus"] = dpos
            out["delta_minus"] = dneg
        return out


def init_parameters(net: DualDecoderNet, seed: int) -> DualDecoderNet:
    """He-normal conv kernels (std = sqrt(2 / fan_in)), zero biases, unit
    norm scales; deterministic given the seed."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = (m.in_channels // m.groups) * m.kernel_size[0] * m.kernel_size[1]
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return net


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def split_decay_parameters(net: nn.Module):
    """Partition named parameters into (conv kernels, everything else).

    Only the first group receives the decoupled L2 penalty; biases and norm
    affine parameters stay unregularized. The concatenated order of the two
    groups is the canonical parameter order for optimizer serialization.
    """
    conv_weights = {
        f"{name}.weight" if name else "weight"
        for name, m in net.named_modules()
        if isinstance(m, nn.Conv2d)
    }
    decay, other = [], []
    for name, p in net.named_parameters():
        (decay if name in conv_weights else other).append((name, p))
    return decay, other


def make_optimizer(net: nn.Module, lr, beta1, beta2, l2_factor):
    """Adam with decoupled weight decay on conv kernels only."""
    decay, other = split_decay_parameters(net)
    return torch.optim.AdamW(
        [
            {"params": [p for _, p in decay], "weight_decay": l2_factor},
            {"params": [p for _, p in other], "weight_decay": 0.0},
        ],
        lr=lr,
        betas=(beta1, beta2),
    )


def _optimizer_param_names(net):
    decay, other = split_decay_parameters(net)
    return [name for name, _ in decay] + [name for name, _ in other]


@dataclass
class ModelState:
    """Everything needed to continue or reproduce a run: the network, the
    optimizer moments, and the bookkeeping counters."""

    config: ModelConfig
    net: DualDecoderNet
    optimizer: torch.optim.Optimizer = None
    epoch: int = 0
    seed: int = 0


def save_checkpoint(path, state: ModelState, extra_meta=None):
    arrays = {}
    for name, tensor in state.net.state_dict().items():
        arrays[f"net.{name}"] = tensor.detach().cpu().numpy()

    meta = {
        "kind": "checkpoint",
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "seed": state.seed,
    }
    if extra_meta:
        meta.update(extra_meta)

    if state.optimizer is not None:
        names = _optimizer_param_names(state.net)
        opt_sd = state.optimizer.state_dict()
        groups = []
        for group in opt_sd["param_groups"]:
            hyper = {k: v for k, v in group.items() if k != "params"}
            hyper["betas"] = list(hyper["betas"])
            groups.append({"hyper": hyper, "n_params": len(group["params"])})
        meta["optimizer"] = {"param_groups": groups, "param_names": names}
        for idx, slot in opt_sd["state"].items():
            for key, value in slot.items():
                arrays[f"opt.{names[idx]}.{key}"] = np.asarray(
                    value.detach().cpu().numpy() if torch.is_tensor(value) else value
                )
    write_array_archive(path, arrays, meta)


def load_checkpoint(path) -> ModelState:
    arrays, meta = read_array_archive(path)
    config = ModelConfig.from_dict(meta["config"])
    net = DualDecoderNet(config)
    net_sd = {
        name[len("net."):]: torch.from_numpy(arr.copy())
        for name, arr in arrays.items()
        if name.startswith("net.")
    }
    net.load_state_dict(net_sd, strict=True)

    optimizer = None
    if "optimizer" in meta:
        spec = meta["optimizer"]
        hyper0 = spec["param_groups"][0]["hyper"]
        optimizer = make_optimizer(
            net,
            lr=hyper0["lr"],
            beta1=hyper0["betas"][0],
            beta2=hyper0["betas"][1],
            l2_factor=hyper0["weight_decay"],
        )
        names = spec["param_names"]
        index_of = {name: i for i, name in enumerate(names)}
        opt_state = {}
        for name, arr in arrays.items():
            if not name.startswith("opt."):
                continue
            pname, key = name[len("opt."):].rsplit(".", 1)
            opt_state.setdefault(index_of[pname], {})[key] = torch.from_numpy(arr.copy())
        groups, start = [], 0
        for group in spec["param_groups"]:
            hyper = dict(group["hyper"])
            hyper["betas"] = tuple(hyper["betas"])
            hyper["params"] = list(range(start, start + group["n_params"]))
            groups.append(hyper)
            start += group["n_params"]
        optimizer.load_state_dict({"state": opt_state, "param_groups": groups})

    return ModelState(
        config=config,
        net=net,
        optimizer=optimizer,
        epoch=int(meta["epoch"]),
        seed=int(meta["seed"]),
    )
