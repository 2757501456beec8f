"""Shared-encoder, dual-decoder network with mutual guidance.

The encoder ``E`` and both decoders follow a U-Net layout. A half-width
guidance encoder embeds a one-channel guidance map; its deepest feature is
concatenated to the image bottleneck ``E_I`` before decoding. The recurrent
guidance loop is unrolled into two stages that share every weight:

    Stage 1:  O_S = D_S(E_I, e_B),   O_B = D_B(E_I, e_S)
    Stage 2:  O'_S = D_S(E_I, O_B),  O'_B = D_B(E_I, O_S)

Batch-norm layers keep separate running statistics per stage (the affine
parameters are shared), since Stage-1 and Stage-2 guidances come from very
different distributions.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigError, InputError, ValidationError

BRANCHES = ("skin", "body")
N_STAGES = 2
CHECKPOINT_MAGIC = "DUALSKIN-CHECKPOINT 1"


@dataclass
class ModelConfig:
    input_size: int = 64
    base_channels: int = 16
    depth: int = 4
    guidance_channel_ratio: float = 0.5
    # constant Stage-1 guidance values (e_S, e_B)
    initial_guidance: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.initial_guidance = tuple(float(v) for v in self.initial_guidance)
        if self.input_size < 8 or self.base_channels < 1 or self.depth < 1:
            raise ConfigError("input_size >= 8, base_channels >= 1 and depth >= 1 required")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(f"input_size {self.input_size} not divisible by 2**{self.depth}")
        if self.guidance_channel_ratio != 0.5:
            raise ConfigError("guidance_channel_ratio is fixed at 1/2")
        if self.base_channels % 2:
            raise ConfigError("base_channels must be even (the guidance encoder uses half)")

    def channels(self, level):
        return self.base_channels * 2 ** level

    def guidance_channels(self, level):
        return int(self.channels(level) * self.guidance_channel_ratio)

    @property
    def bottleneck_shape(self):
        """(height, width, channels) of ``E_I``; pure arithmetic, nothing allocated."""
        side = self.input_size // 2 ** self.depth
        return (side, side, self.channels(self.depth))

    @property
    def guidance_bottleneck_shape(self):
        side = self.input_size // 2 ** self.depth
        return (side, side, self.guidance_channels(self.depth))

    @classmethod
    def paper_scale(cls):
        return cls(input_size=512, base_channels=64, depth=4)

    def to_dict(self):
        d = asdict(self)
        d["initial_guidance"] = list(self.initial_guidance)
        return d


class StageBatchNorm(nn.Module):
    """BatchNorm2d with shared affine parameters and one set of running stats per stage."""

    def __init__(self, channels, n_stages=N_STAGES, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.stage = 0
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        for k in range(n_stages):
            self.register_buffer(f"running_mean_{k}", torch.zeros(channels))
            self.register_buffer(f"running_var_{k}", torch.ones(channels))

    def forward(self, x):
        return F.batch_norm(
            x,
            getattr(self, f"running_mean_{self.stage}"),
            getattr(self, f"running_var_{self.stage}"),
            self.weight,
            self.bias,
            self.training,
            self.momentum,
            self.eps,
        )


class ConvBlock(nn.Module):
    """Two 3x3 conv + norm + ReLU layers."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = StageBatchNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = StageBatchNorm(cout)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class Encoder(nn.Module):
    def __init__(self, in_channels, widths):
        super().__init__()
        chans = [in_channels] + list(widths)
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(len(widths)))

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i < len(self.blocks) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        return x, skips


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn = StageBatchNorm(cout)
        self.block = ConvBlock(2 * cout, cout)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.relu(self.bn(self.conv(x)))
        return self.block(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.depth
        cin = config.channels(d) + config.guidance_channels(d)
        ups = []
        for level in reversed(range(d)):
            ups.append(UpBlock(cin, config.channels(level)))
            cin = config.channels(level)
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(config.channels(0), 1, 1)

    def forward(self, bottleneck, skips, guidance_feature):
        x = torch.cat([bottleneck, guidance_feature], dim=1)
        for up, skip in zip(self.ups, reversed(skips)):
            x = up(x, skip)
        return torch.sigmoid(self.head(x))


class DualTaskNet(nn.Module):
    """All trainable state: encoder, guidance encoder and the two decoders."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        levels = range(config.depth + 1)
        self.encoder = Encoder(3, [config.channels(k) for k in levels])
        self.guidance_encoder = Encoder(1, [config.guidance_channels(k) for k in levels])
        self.decoders = nn.ModuleDict({b: Decoder(config) for b in BRANCHES})

    def set_stage(self, stage):
        """Select running statistics for the guidance encoder and decoders."""
        _set_stage(self.guidance_encoder, stage)
        _set_stage(self.decoders, stage)


def _set_stage(module, stage):
    for m in module.modules():
        if isinstance(m, StageBatchNorm):
            m.stage = stage


class FeatureMap(NamedTuple):
    bottleneck: torch.Tensor
    skips: list


@dataclass
class ForwardTrace:
    O_S: torch.Tensor
    O_B: torch.Tensor
    O2_S: Optional[torch.Tensor] = None
    O2_B: Optional[torch.Tensor] = None
    guidance_stage2: Optional[tuple] = None
    grad_stop: bool = True

    @property
    def two_stage(self):
        return self.O2_S is not None

    def final(self):
        """(skin, body) of the last stage that ran."""
        if self.two_stage:
            return self.O2_S, self.O2_B
        return self.O_S, self.O_B


def init_params(config: ModelConfig, seed=0) -> DualTaskNet:
    """Build a network with fan-in scaled (He) conv weights; deterministic in ``seed``."""
    net = DualTaskNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    for name, p in sorted(net.named_parameters()):
        if p.ndim == 4:
            with torch.no_grad():
                nn.init.kaiming_normal_(p, mode="fan_in", nonlinearity="relu", generator=gen)
        elif name.endswith("head.bias"):
            with torch.no_grad():
                p.zero_()
    return net


def param_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def _check_image(net, image):
    size = net.config.input_size
    if image.ndim != 4 or image.shape[1] != 3 or tuple(image.shape[2:]) != (size, size):
        raise ValidationError(
            f"expected images of shape (N, 3, {size}, {size}), got {tuple(image.shape)}"
        )


def _check_guidance(image, g, name="guidance"):
    if g.ndim != 4 or g.shape[1] != 1 or g.shape[2:] != image.shape[2:] or g.shape[0] != image.shape[0]:
        raise ValidationError(
            f"{name} must have shape (N, 1, H, W) matching the image, got {tuple(g.shape)}"
        )


def encode(net: DualTaskNet, image: torch.Tensor) -> FeatureMap:
    """Shared encoder pass; the same ``FeatureMap`` serves both decoders."""
    _check_image(net, image)
    _set_stage(net.encoder, 0)
    bottleneck, skips = net.encoder(image)
    return FeatureMap(bottleneck, skips)


def decode(net: DualTaskNet, branch: str, features: FeatureMap, guidance: torch.Tensor, stage=0):
    """Run decoder ``branch`` on ``features`` with a guidance map; returns N x 1 x H x W in (0, 1)."""
    if branch not in BRANCHES:
        raise ValidationError(f"unknown branch {branch!r}; expected one of {BRANCHES}")
    side = features.skips[0].shape[2:] if features.skips else features.bottleneck.shape[2:]
    if guidance.ndim != 4 or guidance.shape[1] != 1 or tuple(guidance.shape[2:]) != tuple(side):
        raise ValidationError(f"guidance shape {tuple(guidance.shape)} does not match the input")
    net.set_stage(stage)
    g_feat, _ = net.guidance_encoder(guidance)
    return net.decoders[branch](features.bottleneck, features.skips, g_feat)


def initial_guidance(net: DualTaskNet, image: torch.Tensor):
    """Constant (e_S, e_B) maps from the config."""
    n, _, h, w = image.shape
    e_s, e_b = net.config.initial_guidance
    return (image.new_full((n, 1, h, w), e_s), image.new_full((n, 1, h, w), e_b))


def forward_stage1(net, image, init_guidance=None, features=None):
    """Stage 1: ``O_S = D_S(E_I, e_B)``, ``O_B = D_B(E_I, e_S)``.

    ``init_guidance`` is an optional ``(e_S, e_B)`` pair of maps overriding the
    config constants.
    """
    if features is None:
        features = encode(net, image)
    e_s, e_b = init_guidance if init_guidance is not None else initial_guidance(net, image)
    _check_guidance(image, e_s, "e_S")
    _check_guidance(image, e_b, "e_B")
    o_s = decode(net, "skin", features, e_b, stage=0)
    o_b = decode(net, "body", features, e_s, stage=0)
    return o_s, o_b


def forward_two_stage(
    net,
    image,
    guidance_override=None,
    grad_stop=True,
    init_guidance=None,
    stage1_net=None,
    guidance_fn=None,
) -> ForwardTrace:
    """Both stages. Stage-2 guidances default to ``(O_B, O_S)``.

    ``guidance_override`` is an optional ``(G'_S, G'_B)`` pair; either entry
    may be None to keep the default for that branch. ``guidance_fn(O_S, O_B)``
    may instead compute the pair from the Stage-1 outputs. With ``grad_stop``
    the Stage-1 outputs enter Stage 2 detached. ``stage1_net``, when given,
    supplies the guidance encoder and decoders for Stage 1 (the encoder is
    always ``net``'s); it exists to attribute gradients to the Stage-1 use of
    shared weights.
    """
    features = encode(net, image)
    o_s, o_b = forward_stage1(stage1_net or net, image, init_guidance, features=features)
    src_s, src_b = (o_s.detach(), o_b.detach()) if grad_stop else (o_s, o_b)
    g_s, g_b = guidance_fn(src_s, src_b) if guidance_fn is not None else (src_b, src_s)
    if guidance_override is not None:
        ov_s, ov_b = guidance_override
        if ov_s is not None:
            _check_guidance(image, ov_s, "G'_S override")
            g_s = ov_s
        if ov_b is not None:
            _check_guidance(image, ov_b, "G'_B override")
            g_b = ov_b
    o2_s = decode(net, "skin", features, g_s, stage=1)
    o2_b = decode(net, "body", features, g_b, stage=1)
    return ForwardTrace(o_s, o_b, o2_s, o2_b, (g_s, g_b), grad_stop)


def images_to_tensor(images) -> torch.Tensor:
    """N x H x W x 3 (or H x W x 3) float array -> N x 3 x H x W float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def masks_to_tensor(masks) -> torch.Tensor:
    arr = np.asarray(masks, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr))[:, None]


def save_checkpoint(path, net: DualTaskNet, epoch=0, seed=0, phase="stage1", metrics=None, extra=None):
    """Write named tensors as little-endian float32 after a plain-text index header."""
    state = net.state_dict()
    meta = {
        "config": net.config.to_dict(),
        "epoch": int(epoch),
        "seed": int(seed),
        "phase": phase,
        "metrics": metrics or {},
    }
    if extra:
        meta.update(extra)
    lines = [CHECKPOINT_MAGIC, "meta " + json.dumps(meta, sort_keys=True)]
    blobs, offset = [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"tensor {name} {shape} {offset} {arr.size}")
        blobs.append(arr.tobytes())
        offset += arr.size * 4
    lines.append("end")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(lines) + "\n").encode("utf-8"))
            for b in blobs:
                fh.write(b)
    except OSError as exc:
        raise InputError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Read a checkpoint; returns ``(net, meta)`` with the net in eval mode."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise ValidationError(f"{path} is not a checkpoint")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(marker):]
    meta, tensors = {}, {}
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, shape, offset, count = rest.split(" ")
            shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            offset, count = int(offset), int(count)
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            tensors[name] = torch.from_numpy(arr.reshape(shape).astype(np.float32))
    config = ModelConfig(**meta["config"])
    net = DualTaskNet(config)
    try:
        net.load_state_dict(tensors)
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint {path} does not match its config: {exc}") from exc
    net.eval()
    return net, meta


def clone(net: DualTaskNet) -> DualTaskNet:
    return copy.deepcopy(net)
