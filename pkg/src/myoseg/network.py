"""Two-stage cascaded 3D U-Net with per-stage, per-group output heads.

Stage 1 consumes the three canonical image channels (missing sequences are
zero) and predicts coarse anatomy. Its pre-activation logits are scattered
into a fixed six-channel layout aligned with the full label schema (channels
without a stage-1 label stay zero, mirroring the zero-filled missing
sequences), concatenated with the image, and refined by Stage 2 into the
viability-resolved labels. The two trunks share no weights; each (stage,
group) pair owns a 1x1x1 head with one output channel per available label.
"""

import math
import os
import tempfile
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import schema as sch

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 5
    convs_per_level: int = 2
    filters: int = 64
    kernel: tuple = (3, 3, 3)
    dropout_rate: float = 0.1
    leaky_slope: float = 0.1
    pre_convs: int = 2
    post_convs: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.filters < 1:
            raise ValueError(f"filters must be >= 1, got {self.filters}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.convs_per_level < 1 or self.pre_convs < 0 or self.post_convs < 0:
            raise ValueError("convolution counts out of range")


def _dropout(x, p, training, generator):
    if not training or p <= 0:
        return x
    if generator is None:
        mask = (torch.rand_like(x) >= p).to(x.dtype)
    else:
        mask = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p).to(x.dtype)
    return x * mask / (1.0 - p)


class _LevelBlock(nn.Module):
    """convs_per_level convolutions with dropout between the first two."""

    def __init__(self, in_ch, cfg):
        super().__init__()
        pad = tuple(k // 2 for k in cfg.kernel)
        chans = [in_ch] + [cfg.filters] * cfg.convs_per_level
        self.convs = nn.ModuleList(
            nn.Conv3d(a, b, cfg.kernel, padding=pad) for a, b in zip(chans, chans[1:])
        )
        self.slope = cfg.leaky_slope
        self.p = cfg.dropout_rate

    def forward(self, x, training=False, generator=None):
        for i, conv in enumerate(self.convs):
            x = F.leaky_relu(conv(x), self.slope)
            if i == 0 and len(self.convs) > 1:
                x = _dropout(x, self.p, training, generator)
        return x


class UNet3d(nn.Module):
    """Contracting/expanding trunk with skip connections, plus the extra
    convolutions before and after the U. Output is a filters-wide feature
    map at input resolution; heads are applied by the caller."""

    def __init__(self, in_channels, cfg):
        super().__init__()
        self.cfg = cfg
        f = cfg.filters
        pad = tuple(k // 2 for k in cfg.kernel)

        chans = [in_channels] + [f] * cfg.pre_convs
        self.pre = nn.ModuleList(
            nn.Conv3d(a, b, cfg.kernel, padding=pad) for a, b in zip(chans, chans[1:])
        )
        down_in = in_channels if cfg.pre_convs == 0 else f
        self.down = nn.ModuleList(
            _LevelBlock(down_in if i == 0 else f, cfg) for i in range(cfg.levels)
        )
        self.up = nn.ModuleList(_LevelBlock(2 * f, cfg) for _ in range(cfg.levels - 1))
        self.post = nn.ModuleList(
            nn.Conv3d(f, f, cfg.kernel, padding=pad) for _ in range(cfg.post_convs)
        )

    def forward(self, x, training=False, generator=None):
        factor = 2 ** (self.cfg.levels - 1)
        for axis, size in enumerate(x.shape[-3:]):
            if size % factor:
                raise ValueError(
                    f"spatial axis {axis} has size {size}, not divisible by {factor}"
                )
        for conv in self.pre:
            x = F.leaky_relu(conv(x), self.cfg.leaky_slope)
        skips = []
        for i, block in enumerate(self.down):
            x = block(x, training, generator)
            if i < self.cfg.levels - 1:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = torch.cat([skips.pop(), x], dim=1)
            x = block(x, training, generator)
        for conv in self.post:
            x = F.leaky_relu(conv(x), self.cfg.leaky_slope)
        return x


@dataclass
class LogitVolume:
    """Pre-activation model output for one stage and group: (C, D, H, W)."""

    data: torch.Tensor
    stage: int
    group: str


class CascadeModel(nn.Module):
    def __init__(self, cfg=None, schema=None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        self.schema = schema or sch.LabelSchema()
        n_image = len(sch.SEQUENCES)
        n_slots = len(sch.FULL_LABELS)
        self.stage1 = UNet3d(n_image, self.cfg)
        self.stage2 = UNet3d(n_slots + n_image, self.cfg)
        heads = {}
        for group in sch.GROUPS:
            for stage in (1, 2):
                n_out = len(self.schema.stage_labels(stage, group))
                heads[f"s{stage}_{group}"] = nn.Conv3d(self.cfg.filters, n_out, 1)
        self.heads = nn.ModuleDict(heads)

    def head(self, stage, group):
        key = f"s{stage}_{group}"
        if key not in self.heads:
            raise KeyError(f"no output head for stage {stage}, group {group}")
        return self.heads[key]


def init_weights(model, seed):
    """He initialization (normal, variance 2/fan_in) for every convolution
    kernel; biases start at zero. Deterministic for a fixed seed."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    with torch.no_grad():
        for _, module in sorted(model.named_modules()):
            if isinstance(module, nn.Conv3d):
                fan_in = module.in_channels * math.prod(module.kernel_size)
                std = math.sqrt(2.0 / fan_in)
                noise = torch.randn(module.weight.shape, generator=gen, dtype=torch.float64)
                module.weight.copy_((noise * std).to(module.weight.dtype))
                module.bias.zero_()
    return model


def build_cascade(cfg=None, schema=None, seed=0):
    return init_weights(CascadeModel(cfg, schema), seed)


def stage_forward(model, x, stage, group, training=False, generator=None):
    """Run one stage's trunk and its (stage, group) head on a (C, D, H, W)
    input. Dropout is active only when training is true."""
    trunk = model.stage1 if stage == 1 else model.stage2
    xb = torch.as_tensor(x).unsqueeze(0)
    features = trunk(xb, training, generator)
    logits = model.head(stage, group)(features)[0]
    return LogitVolume(data=logits, stage=stage, group=group)


def cascade_forward(model, x, group, training=False, generator=None):
    """Full cascade pass: stage-1 logits, then stage 2 on logits + image.

    x is the canonical (3, D, H, W) image stack, zero-filled where a sequence
    is missing. Returns the pre-activation LogitVolumes of both stages.
    """
    xb = torch.as_tensor(x).unsqueeze(0)
    feats1 = model.stage1(xb, training, generator)
    y1 = model.head(1, group)(feats1)

    slots = [model.schema.full_slot(n) for n in model.schema.stage1_labels(group)]
    canon = xb.new_zeros((1, len(sch.FULL_LABELS)) + xb.shape[-3:])
    canon[:, slots] = y1
    x2 = torch.cat([canon, xb], dim=1)

    feats2 = model.stage2(x2, training, generator)
    y2 = model.head(2, group)(feats2)
    return (
        LogitVolume(data=y1[0], stage=1, group=group),
        LogitVolume(data=y2[0], stage=2, group=group),
    )


def softmax_labels(logits):
    """Channel-wise softmax per voxel; accepts a LogitVolume or raw tensor."""
    data = logits.data if isinstance(logits, LogitVolume) else logits
    return torch.softmax(data, dim=0)


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(path, payload):
    """Atomic checkpoint write (write-then-rename)."""
    payload = dict(payload)
    payload["version"] = CHECKPOINT_VERSION
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path}")
    return payload


def model_from_checkpoint(payload, use_ema=True):
    cfg = UNetConfig(**payload["unet_config"])
    schema = sch.LabelSchema(codes=dict(payload["label_codes"]))
    model = CascadeModel(cfg, schema)
    state = payload["ema_state"] if use_ema else payload["model_state"]
    model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_meta(model):
    return {
        "unet_config": asdict(model.cfg),
        "label_codes": dict(model.schema.codes),
    }
