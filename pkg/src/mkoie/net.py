"""Network blocks and the assembled multi-task enhancer.

Layout (channels shown for ``base_channels=C`` and two encoder stages)::

    stem 3->C
    encoder  [RLB x n, down C->2C]  [RLB x n, down 2C->4C]
    TNL      task-specific RLB -> task sub-node(s) (-> attention + fusion for NHIE)
    decoder  [up 4C->2C, +skip, RLB x n]  [up 2C->C, +skip, RLB x n]
    head     C->3, sigmoid
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tasks import TaskKind

PRELU_INIT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 32
    rlb_per_stage: int = 2
    encoder_stages: int = 2
    dilations: tuple = (1, 3, 5)
    attn_dk: int | None = None
    norm_groups: int = 4
    task_count: int = 3

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.rlb_per_stage < 1:
            raise ValueError("rlb_per_stage must be >= 1")
        if self.encoder_stages < 1:
            raise ValueError("encoder_stages must be >= 1")
        if self.dilations != (1, 3, 5):
            raise ValueError(f"dilations are fixed to (1, 3, 5), got {self.dilations}")
        if self.attn_dk is not None and self.attn_dk < 1:
            raise ValueError("attn_dk must be >= 1")
        if self.task_count != 3:
            raise ValueError("task_count is fixed to 3")
        if self.base_channels % self.norm_groups:
            raise ValueError("base_channels must be divisible by norm_groups")

    @property
    def tnl_channels(self) -> int:
        return self.base_channels * 2**self.encoder_stages

    @property
    def dk(self) -> int:
        return self.attn_dk if self.attn_dk is not None else self.tnl_channels

    @property
    def size_divisor(self) -> int:
        """Input height/width must be a multiple of this."""
        return 2 ** (self.encoder_stages + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _check_channels(x: torch.Tensor, channels: int, block: str):
    if x.dim() != 4:
        raise ValueError(f"{block}: expected B×C×H×W input, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(f"{block}: expected {channels} channels, got {x.shape[1]}")


class RLB(nn.Module):
    """Residual learning block: ``x + PReLU(LayerNorm(conv3x3(x)))``.

    LayerNorm normalises over channels and space of each sample; implemented as
    a single-group GroupNorm so the affine terms are per channel and the block
    works at any spatial size.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm = nn.GroupNorm(1, channels)
        self.act = nn.PReLU(channels, init=PRELU_INIT)

    def forward(self, x):
        _check_channels(x, self.channels, "RLB")
        return x + self.act(self.norm(self.conv(x)))


class DepthwiseSeparable(nn.Module):
    """Dilated 3x3 depthwise conv followed by a 1x1 pointwise conv."""

    def __init__(self, channels: int, dilation: int):
        super().__init__()
        self.depthwise = nn.Conv2d(
            channels, channels, 3, padding=dilation, dilation=dilation, groups=channels
        )
        self.pointwise = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class MRFE(nn.Module):
    """Multi-receptive-field enhancement.

    Three depthwise-separable branches with dilations 1/3/5 (3x3, 7x7 and
    11x11 footprints) are concatenated, fused by a pointwise conv, group
    normalised, activated and added back to the input.
    """

    def __init__(self, channels: int, dilations=(1, 3, 5), groups: int = 4):
        super().__init__()
        self.channels = channels
        self.branches = nn.ModuleList(DepthwiseSeparable(channels, d) for d in dilations)
        self.fuse = nn.Conv2d(channels * len(dilations), channels, 1)
        self.norm = nn.GroupNorm(groups, channels)
        self.act = nn.PReLU(channels, init=PRELU_INIT)

    def spatial(self, x):
        """The convolutional part of the block, before normalisation."""
        _check_channels(x, self.channels, "MRFE")
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))

    def forward(self, x):
        return x + self.act(self.norm(self.spatial(x)))


def downsample(x):
    return F.avg_pool2d(x, 2)


def upsample(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class SubNode(nn.Module):
    """Small encoder-decoder of four MRFE blocks around one resampling step."""

    def __init__(self, channels: int, dilations=(1, 3, 5), groups: int = 4):
        super().__init__()
        self.m1, self.m2, self.m3, self.m4 = (MRFE(channels, dilations, groups) for _ in range(4))

    def encode(self, x):
        return self.m2(downsample(self.m1(x)))

    def decode(self, f):
        return self.m4(upsample(self.m3(f)))

    def forward(self, x):
        if x.dim() != 4 or x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError(
                f"sub-node needs even spatial dims, got {tuple(x.shape[-2:])}"
            )
        return self.decode(self.encode(x))


class SelfAttention(nn.Module):
    """Single-head spatial attention with a gated residual.

    Queries and values come from the enhanced features, keys from the
    task-specific reference features.  ``gamma`` starts at zero so the block
    is initially an identity.
    """

    def __init__(self, channels: int, dk: int):
        super().__init__()
        self.dk = dk
        self.query = nn.Conv2d(channels, dk, 1)
        self.key = nn.Conv2d(channels, dk, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma = nn.Parameter(torch.zeros(()))

    def attention_weights(self, f_d, f_ts):
        q = self.query(f_d).flatten(2).transpose(1, 2)  # B×N×dk
        k = self.key(f_ts).flatten(2)  # B×dk×N
        return torch.softmax(torch.bmm(q, k) / math.sqrt(self.dk), dim=-1)

    def forward(self, f_d, f_ts, return_weights: bool = False):
        if f_d.shape != f_ts.shape:
            raise ValueError(
                f"attention inputs differ in shape: {tuple(f_d.shape)} vs {tuple(f_ts.shape)}"
            )
        b, c, h, w = f_d.shape
        attn = self.attention_weights(f_d, f_ts)
        v = self.value(f_d).flatten(2).transpose(1, 2)  # B×N×C
        out = torch.bmm(attn, v).transpose(1, 2).reshape(b, c, h, w)
        out = self.gamma * out + f_d
        return (out, attn) if return_weights else out


class TaskSpecific(nn.Module):
    """One residual block per task; only the selected one runs."""

    def __init__(self, channels: int, task_count: int = 3):
        super().__init__()
        self.branches = nn.ModuleList(RLB(channels) for _ in range(task_count))

    def forward(self, f_e, task):
        task = TaskKind.parse(task)
        return self.branches[int(task) - 1](f_e)


class TNL(nn.Module):
    """Task-oriented node learning.

    Dehazing and low-light tasks run their own sub-node on the task-specific
    features.  Nighttime haze runs both of those sub-nodes, refines each with
    attention against the task-specific features, mixes them with a
    sigmoid-bounded weight and feeds the mix to its own sub-node.
    """

    def __init__(self, channels: int, dk: int, dilations=(1, 3, 5), groups: int = 4):
        super().__init__()
        self.tsm = TaskSpecific(channels)
        self.subnodes = nn.ModuleDict(
            {t.slug: SubNode(channels, dilations, groups) for t in TaskKind}
        )
        self.attention = SelfAttention(channels, dk)
        self.fusion_logit = nn.Parameter(torch.zeros(()))

    @property
    def alpha(self):
        return torch.sigmoid(self.fusion_logit)

    def fuse(self, a_llie, a_id):
        alpha = self.alpha
        return alpha * a_llie + (1 - alpha) * a_id

    def forward(self, f_e, task):
        task = TaskKind.parse(task)
        f_ts = self.tsm(f_e, task)
        if task != TaskKind.NHIE:
            return self.subnodes[task.slug](f_ts)
        a_llie = self.attention(self.subnodes["llie"](f_ts), f_ts)
        a_id = self.attention(self.subnodes["id"](f_ts), f_ts)
        return self.subnodes["nhie"](self.fuse(a_llie, a_id))


class MKoIE(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        c = cfg.base_channels
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        widths = [c * 2**i for i in range(cfg.encoder_stages)]
        for w in widths:
            self.enc.append(nn.Sequential(*(RLB(w) for _ in range(cfg.rlb_per_stage))))
            self.down.append(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1))
        self.tnl = TNL(cfg.tnl_channels, cfg.dk, cfg.dilations, cfg.norm_groups)
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(2 * w, w, 2, stride=2))
            self.dec.append(nn.Sequential(*(RLB(w) for _ in range(cfg.rlb_per_stage))))
        self.head = nn.Conv2d(c, 3, 3, padding=1)

    def check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B×3×H×W input, got shape {tuple(x.shape)}")
        k = self.config.size_divisor
        if x.shape[-2] % k or x.shape[-1] % k:
            raise ValueError(
                f"input size {tuple(x.shape[-2:])} is not divisible by {k}; "
                "pad the image first (see enhance())"
            )

    def encode(self, x):
        f = self.stem(x)
        skips = []
        for block, down in zip(self.enc, self.down):
            f = block(f)
            skips.append(f)
            f = down(f)
        return f, skips

    def decode(self, f, skips):
        for up, block, skip in zip(self.up, self.dec, reversed(skips)):
            f = block(up(f) + skip)
        return torch.sigmoid(self.head(f))

    def forward(self, x, task):
        task = TaskKind.parse(task)
        self.check_input(x)
        f_e, skips = self.encode(x)
        return self.decode(self.tnl(f_e, task), skips)


def init_weights(module: nn.Module, seed: int = 0) -> nn.Module:
    """Fan-in Kaiming init for every conv, zero biases. Does not touch global RNG."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(
                    m.weight, a=PRELU_INIT, mode="fan_in", nonlinearity="leaky_relu", generator=gen
                )
                if m.bias is not None:
                    m.bias.zero_()
    return module


def build_model(config: ModelConfig | None = None, seed: int = 0) -> MKoIE:
    return init_weights(MKoIE(config), seed)


def enhance(model: MKoIE, image: torch.Tensor, task) -> torch.Tensor:
    """Run ``model`` on a B×3×H×W batch of any size.

    The batch is reflection-padded up to the model's size divisor and the
    result cropped back to H×W.
    """
    k = model.config.size_divisor
    h, w = image.shape[-2:]
    ph, pw = (-h) % k, (-w) % k
    x = image
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(image, (0, pw, 0, ph), mode=mode)
    with torch.no_grad():
        out = model(x, task)
    return out[..., :h, :w]


def param_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_params(model: MKoIE, path) -> None:
    """Write model parameters with a config echo to a single checkpoint file."""
    from .checkpoint import write_arrays

    write_arrays(
        path,
        {f"model/{k}": v for k, v in param_arrays(model).items()},
        {"kind": "params", "model_config": model.config.to_dict()},
    )


def load_params(path, config: ModelConfig | None = None) -> MKoIE:
    from .checkpoint import read_arrays

    arrays, meta = read_arrays(path)
    stored = ModelConfig.from_dict(meta["model_config"])
    model = MKoIE(config or stored)
    load_model_arrays(model, {k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    return model


def load_model_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    from .checkpoint import CheckpointShapeError

    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise CheckpointShapeError(
            f"parameter names differ from model: missing={missing[:5]} unexpected={extra[:5]}"
        )
    for name, target in state.items():
        if tuple(arrays[name].shape) != tuple(target.shape):
            raise CheckpointShapeError(
                f"{name}: checkpoint shape {arrays[name].shape} != model shape {tuple(target.shape)}"
            )
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
