"""Two-path residual super-resolution network for 3-component velocity patches.

Tensors are ``(batch, channels, X, Y, Z)``; channel 0/1/2 of a velocity
tensor are the x/y/z components.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import FormatError, NumericError, TruncatedFileError, ValidationError

CHECKPOINT_MAGIC = b"F4DW"
MIN_PATCH = 8


@dataclass
class NetConfig:
    base_filters: int = 64
    lr_resblocks: int = 8
    hr_resblocks: int = 4
    leaky_slope: float = 0.2
    kernel: int = 3

    def __post_init__(self):
        if self.base_filters < 1:
            raise ValidationError("base_filters must be >= 1")
        if self.lr_resblocks < 0 or self.hr_resblocks < 0:
            raise ValidationError("residual block counts must be >= 0")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError("kernel must be a positive odd size")

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_anatomy_channels(mags, vels, axis: int = 0):
    """(mag, speed, pcmra) from three magnitude and three velocity volumes.

    Works on numpy arrays and torch tensors; ``axis`` is the component axis.
    """
    if tuple(mags.shape) != tuple(vels.shape):
        raise ValidationError(f"magnitude shape {tuple(mags.shape)} != velocity shape {tuple(vels.shape)}")
    if mags.shape[axis] != 3:
        raise ValidationError("expected three components along the channel axis")
    mag = (mags**2).sum(axis) ** 0.5
    speed = (vels**2).sum(axis) ** 0.5
    return mag, speed, mag * speed


def anatomy_stack(mags: np.ndarray, vels: np.ndarray, axis: int = 0) -> np.ndarray:
    return np.stack(compute_anatomy_channels(mags, vels, axis), axis=axis)


def symmetric_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Edge-inclusive mirror padding of the three spatial dims: [1,2,3] -> [1,1,2,3,3]."""
    if pad == 0:
        return x
    if pad == 1:
        # a one-voxel edge-inclusive mirror is the edge value itself
        return F.pad(x, (1, 1) * 3, mode="replicate")
    for dim in (-3, -2, -1):
        n = x.shape[dim]
        if pad > n:
            raise ValidationError(f"pad {pad} exceeds spatial size {n}")
        lo = x.narrow(dim, 0, pad).flip(dim)
        hi = x.narrow(dim, n - pad, pad).flip(dim)
        x = torch.cat([lo, x, hi], dim=dim)
    return x


def conv3d_symmetric(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None,
                     stride: int = 1, groups: int = 1) -> torch.Tensor:
    if x.dim() != 5:
        raise ValidationError(f"expected a 5D tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != weight.shape[1] * groups:
        raise ValidationError(f"input has {x.shape[1]} channels, weights expect {weight.shape[1] * groups}")
    return F.conv3d(symmetric_pad(x, weight.shape[-1] // 2), weight, bias, stride=stride, groups=groups)


def upsample_trilinear2x(x: torch.Tensor) -> torch.Tensor:
    """Trilinear x2 with half-pixel centres (align_corners=False), edge clamped."""
    if min(x.shape[2:]) < 2:
        raise ValidationError("trilinear upsampling needs spatial dims >= 2")
    return F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)


class SymConv3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(out_ch))

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in = self.weight[0].numel()
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.weight.uniform_(-bound, bound, generator=generator)
            self.bias.zero_()

    def forward(self, x):
        return conv3d_symmetric(x, self.weight, self.bias)


class ResBlock(nn.Module):
    def __init__(self, channels: int, kernel: int = 3, slope: float = 0.2):
        super().__init__()
        self.conv1 = SymConv3d(channels, channels, kernel)
        self.conv2 = SymConv3d(channels, channels, kernel)
        self.slope = slope

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), self.slope))


class Branch(nn.Module):
    """Per-component output path: conv + ReLU, then a 1-channel conv + tanh."""

    def __init__(self, channels: int, kernel: int = 3):
        super().__init__()
        self.hidden = SymConv3d(channels, channels, kernel)
        self.out = SymConv3d(channels, 1, kernel)

    def forward(self, x):
        return torch.tanh(self.out(F.relu(self.hidden(x))))


class FlowNet(nn.Module):
    def __init__(self, config: NetConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or NetConfig()
        f, k = config.base_filters, config.kernel
        self.velocity_entry = SymConv3d(3, f, k)
        self.anatomy_entry = SymConv3d(3, f, k)
        self.fusion = SymConv3d(2 * f, f, k)
        self.lr_blocks = nn.ModuleList(ResBlock(f, k, config.leaky_slope) for _ in range(config.lr_resblocks))
        self.hr_blocks = nn.ModuleList(ResBlock(f, k, config.leaky_slope) for _ in range(config.hr_resblocks))
        self.branches = nn.ModuleList(Branch(f, k) for _ in range(3))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if isinstance(m, SymConv3d):
                m.reset_parameters(g)

    def _heads(self, x):
        # The three branches share no weights; running their convolutions as
        # one wide conv and one grouped conv is only a batching of the same
        # arithmetic.
        w1 = torch.cat([b.hidden.weight for b in self.branches])
        b1 = torch.cat([b.hidden.bias for b in self.branches])
        w2 = torch.cat([b.out.weight for b in self.branches])
        b2 = torch.cat([b.out.bias for b in self.branches])
        h = F.relu(conv3d_symmetric(x, w1, b1))
        return torch.tanh(conv3d_symmetric(h, w2, b2, groups=3))

    def forward(self, velocity: torch.Tensor, anatomy: torch.Tensor) -> torch.Tensor:
        check_inputs(velocity, anatomy)
        if velocity.dtype == torch.float32:
            # channels-last lets the float32 CPU conv kernels skip layout reorders
            velocity = velocity.contiguous(memory_format=torch.channels_last_3d)
            anatomy = anatomy.contiguous(memory_format=torch.channels_last_3d)
        v = F.relu(self.velocity_entry(velocity))
        a = F.relu(self.anatomy_entry(anatomy))
        x = F.relu(self.fusion(torch.cat([v, a], dim=1)))
        for block in self.lr_blocks:
            x = block(x)
        x = upsample_trilinear2x(x)
        for block in self.hr_blocks:
            x = block(x)
        return self._heads(x)

    def parameters_dict(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())


def check_inputs(velocity: torch.Tensor, anatomy: torch.Tensor) -> None:
    for name, t in (("velocity", velocity), ("anatomy", anatomy)):
        if t.dim() != 5 or t.shape[1] != 3:
            raise ValidationError(f"{name} must be (batch, 3, n, n, n), got {tuple(t.shape)}")
        sx, sy, sz = t.shape[2:]
        if not sx == sy == sz:
            raise ValidationError(f"{name} patch must be a cube, got {(sx, sy, sz)}")
        if sx < MIN_PATCH:
            raise ValidationError(f"{name} patch size {sx} below minimum {MIN_PATCH}")
    if velocity.shape != anatomy.shape:
        raise ValidationError("velocity and anatomy inputs differ in shape")


def parameter_gradients(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar loss w.r.t. every named parameter.

    Parameters the loss does not depend on get an exact zero gradient.
    """
    if loss.dim() != 0:
        raise ValidationError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


# --- checkpoints -----------------------------------------------------------------------

def save_checkpoint(path, model: FlowNet, iteration: int = 0, validation_metric: float | None = None) -> None:
    params = [(n, p.detach().cpu()) for n, p in model.named_parameters()]
    header = {
        "net_config": model.config.to_dict(),
        "iteration": int(iteration),
        "validation_metric": None if validation_metric is None else float(validation_metric),
        "params": [[n, list(p.shape)] for n, p in params],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for _, p in params:
            f.write(p.numpy().astype("<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[FlowNet, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an F4DW checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    model = FlowNet(NetConfig.from_dict(header["net_config"]))
    pos = 8 + hlen
    state = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) * 4
        if pos + n > len(raw):
            raise TruncatedFileError(f"{path}: parameter {name} truncated")
        state[name] = torch.from_numpy(np.frombuffer(raw[pos:pos + n], dtype="<f4").reshape(shape).copy())
        pos += n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    model.load_state_dict(state)
    return model, header
