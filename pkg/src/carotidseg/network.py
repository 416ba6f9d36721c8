"""DBF-UNet: a lightweight 3D encoder-decoder for lumen/wall segmentation.

Building blocks:

* :class:`DSDBlock` - dense strided downsampling with an average-pool residual.
* :class:`MSDABlock` - densely connected multi-scale depthwise-separable
  convolutions re-weighted by channel attention computed from global
  statistics (mean, std, max).
* :class:`MLKBlock` - transformer-style block wrapping MSDA and an MLP with
  layer-scale gating.
* :class:`BFFBlock` - deep-to-shallow fusion between adjacent encoder levels.

All tensors are ``(B, C, D, H, W)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = "carotidseg-checkpoint"
CHECKPOINT_VERSION = 1
STD_EPS = 1e-6

_ACTIVATIONS = {"gelu": nn.GELU, "silu": nn.SiLU}


@dataclass
class NetConfig:
    in_channels: int = 1
    num_classes: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128)
    mlk_per_level: int = 1
    layer_scale_init: float = 1e-2
    mlp_ratio: int = 4
    activation: str = "gelu"
    msda_kernels: tuple[int, ...] = (3, 5, 7)
    use_bff: bool = True
    use_msda: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.msda_kernels = tuple(int(k) for k in self.msda_kernels)
        if len(self.channels) < 2:
            raise ValueError("need at least 2 levels")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be strictly increasing, got {self.channels}")
        if self.mlk_per_level < 1 or self.mlp_ratio < 1:
            raise ValueError("mlk_per_level and mlp_ratio must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["msda_kernels"] = list(self.msda_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


# Full-size reference configuration, about 3.3M params.
PAPER_SCALE_CONFIG = NetConfig(channels=(32, 64, 128, 256))

def make_activation(tag: str) -> nn.Module:
    return _ACTIVATIONS[tag]()


class Pointwise(nn.Conv3d):
    """1x1x1 convolution evaluated as a channel matmul (much faster on CPU)."""

    def __init__(self, in_channels: int, out_channels: int, bias: bool = True):
        super().__init__(in_channels, out_channels, kernel_size=1, bias=bias)

    def forward(self, x):
        w = self.weight.view(self.out_channels, self.in_channels)
        y = F.linear(x.movedim(1, -1), w, self.bias)
        return y.movedim(-1, 1)


def pointwise(c_in: int, c_out: int, bias: bool = True) -> Pointwise:
    return Pointwise(c_in, c_out, bias=bias)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis at every voxel."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = (x - mean).pow(2).mean(dim=1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None, None] + self.bias[:, None, None, None]


class DepthwiseSeparableConv3d(nn.Module):
    def __init__(self, channels: int, kernel_size: int):
        super().__init__()
        self.depthwise = nn.Conv3d(channels, channels, kernel_size,
                                   padding=kernel_size // 2, groups=channels)
        self.pointwise = pointwise(channels, channels)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class DSDBlock(nn.Module):
    """Stride-2 downsampling: ``pw([dw(x), pw4(dw(x))]) + avgpool(x)``."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.dw = nn.Conv3d(in_channels, in_channels, 3, stride=2, padding=1,
                            groups=in_channels)
        self.expand = pointwise(in_channels, 4 * in_channels)
        self.fuse = pointwise(5 * in_channels, out_channels)
        self.pool = nn.AvgPool3d(2, stride=2, ceil_mode=True)
        self.proj = (pointwise(in_channels, out_channels, bias=False)
                     if in_channels != out_channels else nn.Identity())

    def forward(self, x):
        if min(x.shape[2:]) < 2:
            raise ValueError(f"DSDBlock needs spatial dims >= 2, got {tuple(x.shape[2:])}")
        x1 = self.dw(x)
        x2 = self.expand(x1)
        y = self.fuse(torch.cat([x1, x2], dim=1))
        return y + self.proj(self.pool(x))


class MSDABlock(nn.Module):
    def __init__(self, channels: int, kernels=(3, 5, 7), activation: str = "gelu"):
        super().__init__()
        self.convs = nn.ModuleList(DepthwiseSeparableConv3d(channels, k) for k in kernels)
        n = len(kernels) * channels
        self.attn = nn.Linear(3 * n, n)
        self.pw_attended = pointwise(n, n)
        self.pw_plain = pointwise(n, n)
        self.pw_out = pointwise(n, channels)
        self.act = make_activation(activation)
        self.norm = ChannelLayerNorm(channels)

    def multiscale(self, x):
        feats = [self.convs[0](x)]
        for conv in self.convs[1:]:
            feats.append(conv(feats[-1]) + sum(feats))
        return torch.cat(feats, dim=1)

    def attention(self, feats):
        flat = feats.flatten(2)
        mean = flat.mean(dim=2)
        std = torch.sqrt(flat.var(dim=2, unbiased=False) + STD_EPS)
        peak = flat.amax(dim=2)
        stats = torch.cat([mean, std, peak], dim=1)
        return torch.softmax(self.attn(stats), dim=1)

    def forward(self, x):
        feats = self.multiscale(x)
        a = self.attention(feats)[:, :, None, None, None]
        y = self.pw_out(self.pw_attended(feats * a) + self.pw_plain(feats))
        return self.norm(self.act(y))


class MLP(nn.Module):
    def __init__(self, channels: int, ratio: int = 4, activation: str = "gelu"):
        super().__init__()
        self.fc1 = pointwise(channels, ratio * channels)
        self.act = make_activation(activation)
        self.fc2 = pointwise(ratio * channels, channels)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class MLKBlock(nn.Module):
    """``z = x + g1*MSDA(LN(x))``; ``y = pw(z + g2*MLP(LN(z)))``."""

    def __init__(self, channels: int, cfg: NetConfig):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        if cfg.use_msda:
            self.mixer = MSDABlock(channels, cfg.msda_kernels, cfg.activation)
        else:
            self.mixer = DepthwiseSeparableConv3d(channels, 3)
        self.gamma1 = nn.Parameter(torch.full((channels,), cfg.layer_scale_init))
        self.norm2 = ChannelLayerNorm(channels)
        self.mlp = MLP(channels, cfg.mlp_ratio, cfg.activation)
        self.gamma2 = nn.Parameter(torch.full((channels,), cfg.layer_scale_init))
        self.proj = pointwise(channels, channels)

    def forward(self, x):
        z = x + self.gamma1[:, None, None, None] * self.mixer(self.norm1(x))
        return self.proj(z + self.gamma2[:, None, None, None] * self.mlp(self.norm2(z)))


def upsample_to(x, size):
    """Nearest x2 upsampling, then crop to ``size`` (needed for odd sizes)."""
    x = F.interpolate(x, scale_factor=2, mode="nearest")
    return x[:, :, :size[0], :size[1], :size[2]]


class BFFBlock(nn.Module):
    """``F_i = up(pw(E_deep)) + E_shallow``."""

    def __init__(self, deep_channels: int, shallow_channels: int):
        super().__init__()
        self.proj = pointwise(deep_channels, shallow_channels)

    def forward(self, deep, shallow):
        if deep.shape[1] != self.proj.in_channels or shallow.shape[1] != self.proj.out_channels:
            raise ValueError(
                f"BFF channel plan {self.proj.in_channels}->{self.proj.out_channels} does not "
                f"match inputs {deep.shape[1]}, {shallow.shape[1]}")
        return upsample_to(self.proj(deep), shallow.shape[2:]) + shallow


class Head(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, activation: str = "gelu"):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.norm = ChannelLayerNorm(out_channels)
        self.act = make_activation(activation)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class UpBlock(nn.Module):
    """Nearest x2 upsample followed by a pointwise channel match."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.proj = pointwise(in_channels, out_channels)

    def forward(self, x, size):
        return self.proj(upsample_to(x, size))


class DBFUNet(nn.Module):
    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        cfg = cfg or NetConfig()
        self.cfg = cfg
        ch = cfg.channels
        L = cfg.levels

        def mlk_stack(c):
            return nn.Sequential(*(MLKBlock(c, cfg) for _ in range(cfg.mlk_per_level)))

        self.head = Head(cfg.in_channels, ch[0], cfg.activation)
        # the deepest level is the last DSD output; MLK stages only above it
        self.encoders = nn.ModuleList(mlk_stack(c) for c in ch[:-1])
        self.downs = nn.ModuleList(DSDBlock(ch[i], ch[i + 1]) for i in range(L - 1))
        if cfg.use_bff:
            # bffs[i] fuses encoder level i+1 into level i
            self.bffs = nn.ModuleList(BFFBlock(ch[i + 1], ch[i]) for i in range(L - 1))
            self.shallow_mlk = MLKBlock(ch[0], cfg)
        else:
            self.bffs = None
            self.shallow_mlk = None
        self.ups = nn.ModuleList(UpBlock(ch[i + 1], ch[i]) for i in range(L - 1))
        self.decoders = nn.ModuleList(MLKBlock(ch[i], cfg) for i in range(L - 1))
        self.out = pointwise(ch[0], cfg.num_classes)
        # depthwise 3D convs are several times faster channels-last on CPU
        self.to(memory_format=torch.channels_last_3d)

    def encode(self, x):
        enc = []
        h = self.head(x)
        for block, down in zip(self.encoders, self.downs):
            h = block(h)
            enc.append(h)
            h = down(h)
        enc.append(h)
        return enc

    def skips(self, enc):
        if self.bffs is None:
            return list(enc[:-1])
        fused = [bff(enc[i + 1], enc[i]) for i, bff in enumerate(self.bffs)]
        fused[0] = self.shallow_mlk(fused[0])
        return fused

    def forward(self, x):
        d = self.cfg.divisor
        if any(s % d for s in x.shape[2:]):
            raise ValueError(f"input spatial dims {tuple(x.shape[2:])} not divisible by {d}")
        enc = self.encode(x.contiguous(memory_format=torch.channels_last_3d))
        skips = self.skips(enc)
        h = enc[-1]
        for i in reversed(range(len(skips))):
            h = self.decoders[i](skips[i] + self.ups[i](h, skips[i].shape[2:]))
        return self.out(h)


def build_model(cfg: NetConfig | None = None, seed: int | None = None) -> DBFUNet:
    if seed is not None:
        torch.manual_seed(seed)
    return DBFUNet(cfg)


@dataclass
class ParamReport:
    total: int
    breakdown: dict[str, int]
    macs: int | None = None
    within_paper_budget: bool = field(init=False)

    def __post_init__(self):
        self.within_paper_budget = self.total <= 5_000_000

    def to_dict(self) -> dict:
        return asdict(self)


def _count_macs(model: nn.Module, input_shape) -> int:
    macs = 0

    def conv_hook(m, inp, out):
        nonlocal macs
        per_out = (m.in_channels // m.groups) * int(torch.tensor(m.kernel_size).prod())
        macs += out.numel() * per_out

    def linear_hook(m, inp, out):
        nonlocal macs
        macs += out.numel() * m.in_features

    handles = []
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            handles.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(linear_hook))
    try:
        with torch.no_grad():
            model(torch.zeros(input_shape))
    finally:
        for h in handles:
            h.remove()
    return macs


def param_report(model: nn.Module, input_shape=None) -> ParamReport:
    """Exact parameter counts per top-level submodule; optional MAC estimate."""
    breakdown = {}
    for name, child in model.named_children():
        n = sum(p.numel() for p in child.parameters())
        if n:
            breakdown[name] = n
    direct = sum(p.numel() for p in model.parameters(recurse=False))
    if direct:
        breakdown["<root>"] = direct
    macs = _count_macs(model, input_shape) if input_shape is not None else None
    return ParamReport(total=sum(breakdown.values()), breakdown=breakdown, macs=macs)


def save_checkpoint(model: DBFUNet, path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DBFUNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = NetConfig.from_dict(json.loads(payload["config"]))
    model = DBFUNet(cfg)
    expected = model.state_dict()
    state = payload["state_dict"]
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    bad_shape = [k for k in expected if k in state and state[k].shape != expected[k].shape]
    if missing or unexpected or bad_shape:
        raise ValueError(f"{path}: incompatible checkpoint (missing={missing[:5]}, "
                         f"unexpected={unexpected[:5]}, shape mismatch={bad_shape[:5]})")
    model.load_state_dict(state)
    return model, json.loads(payload["extra"])
