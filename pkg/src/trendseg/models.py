"""Parallel multi-frame ASPP encoder-decoder and the comparison baselines.

Every model maps a batch of ``N`` price frames ``[B, N, T_in, 4]`` to a trend
probability map ``[B, 1, T_out, 4]``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import StructuralError, Tensor

ARCHITECTURES = ("proposed", "fcn_mini", "unet_mini", "mlp", "cnn_fc")
ASPP_RATES = (1, 2, 3)


class ConfigError(ValueError):
    """Invalid model hyperparameters."""


@dataclass
class ModelConfig:
    T_in: int = 20
    T_out: int = 20
    N: int = 1
    base_channels: int = 16
    fusion_channels: Optional[int] = None
    kernel_size: int = 3
    seed: int = 0
    arch: str = "proposed"
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self) -> "ModelConfig":
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.T_in not in (self.T_out, 2 * self.T_out):
            raise ConfigError(f"T_in must be T_out or 2*T_out (T_in={self.T_in}, T_out={self.T_out})")
        if self.T_in % 4:
            raise ConfigError(f"T_in must be divisible by 4, got {self.T_in}")
        if self.N < 1:
            raise ConfigError(f"N must be >= 1, got {self.N}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.fusion_channels is not None and self.fusion_channels < 1:
            raise ConfigError(f"fusion_channels must be >= 1, got {self.fusion_channels}")
        if self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be >= 1, got {self.kernel_size}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# layers


class Module:
    """Attribute-discovered parameter container, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel=3, stride=1, dilation: int = 1):
        kh, kw = T._pair(kernel)
        self.weight = _uniform(rng, (cout, cin, kh, kw), cin * kh * kw)
        self.bias = _zeros(cout)
        self.stride = T._pair(stride)
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.dilation)


class TransposedConv2d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel=3, stride=(2, 1)):
        kh, kw = T._pair(kernel)
        self.weight = _uniform(rng, (cin, cout, kh, kw), cin * kh * kw)
        self.bias = _zeros(cout)
        self.stride = T._pair(stride)

    def forward(self, x: Tensor) -> Tensor:
        return T.transposed_conv2d(x, self.weight, self.bias, self.stride)


class Dense(Module):
    def __init__(self, rng, n_in: int, n_out: int):
        self.weight = _uniform(rng, (n_in, n_out), n_in)
        self.bias = _zeros(n_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


# proposed architecture


class ASPPBlock(Module):
    """Parallel atrous branches at rates 1, 2, 3, fused by a 1x1 conv and ReLU."""

    def __init__(self, rng, cin: int, cout: int, kernel: int = 3, rates: Sequence[int] = ASPP_RATES):
        self.branches = [Conv2d(rng, cin, cout, kernel, dilation=r) for r in rates]
        self.fuse = Conv2d(rng, cout * len(rates), cout, 1)
        self.in_channels = cin
        self.out_channels = cout

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise StructuralError(f"ASPP expects {self.in_channels} channels, got {x.shape[1]}")
        return T.relu(self.fuse(T.concat([b(x) for b in self.branches], axis=1)))


class EncoderStream(Module):
    """Three ASPP stages for one input frame, halving time between stages.

    Returns the stage outputs ``(s1, s2, s3)`` with ``C, 2C, 4C`` channels at
    time resolutions ``T, T/2, T/4``; the price axis (width 4) is never reduced.
    """

    def __init__(self, rng, C: int, kernel: int = 3):
        self.aspp1 = ASPPBlock(rng, 1, C, kernel)
        self.down1 = Conv2d(rng, C, C, kernel, stride=(2, 1))
        self.aspp2 = ASPPBlock(rng, C, 2 * C, kernel)
        self.down2 = Conv2d(rng, 2 * C, 2 * C, kernel, stride=(2, 1))
        self.aspp3 = ASPPBlock(rng, 2 * C, 4 * C, kernel)

    def forward(self, frame: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        s1 = self.aspp1(frame)
        s2 = self.aspp2(T.relu(self.down1(s1)))
        s3 = self.aspp3(T.relu(self.down2(s2)))
        return s1, s2, s3


def decoder_stages(T_in: int, T_out: int) -> int:
    """Number of stride-2 upsampling steps from ``T_in/4`` up to ``T_out``."""
    t, stages = T_in // 4, 0
    while t < T_out:
        t *= 2
        stages += 1
    if t != T_out or stages == 0:
        raise ConfigError(f"no upsampling sequence takes {T_in // 4} to {T_out}")
    return stages


class ProposedNet(Module):
    """N parallel ASPP encoder streams, per-scale fusion, skip-connected decoder."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        C, k, N = config.base_channels, config.kernel_size, config.N
        F = config.fusion_channels or C
        widths = (C, 2 * C, 4 * C)
        fused = (F, 2 * F, 4 * F)
        self.n_up = decoder_stages(config.T_in, config.T_out)
        # scales consumed by the decoder: h3 always, then h2, h1 per upsampling step
        used = [3 - i for i in range(self.n_up + 1)]

        self.streams = [EncoderStream(rng, C, k) for _ in range(N)]
        self.fusion = [Conv2d(rng, N * widths[s - 1], fused[s - 1], k) if s in used else None
                       for s in (1, 2, 3)]
        self.up = []
        ch = fused[2]
        for i in range(self.n_up):
            skip = fused[1 - i]
            self.up.append(TransposedConv2d(rng, ch, skip, k, stride=(2, 1)))
            ch = 2 * skip
        self.head = Conv2d(rng, ch, 1, 1)

    def encode(self, x: Tensor) -> list[tuple[Tensor, Tensor, Tensor]]:
        if x.ndim != 4 or x.shape[1] != self.config.N:
            raise ValueError(f"expected input [B, {self.config.N}, T, 4], got {x.shape}")
        if x.shape[2] != self.config.T_in:
            raise ValueError(f"expected frames of {self.config.T_in} days, got {x.shape[2]}")
        return [stream(_select_frame(x, i)) for i, stream in enumerate(self.streams)]

    def fuse(self, streams: Sequence[tuple[Tensor, Tensor, Tensor]]) -> list[Optional[Tensor]]:
        """Per scale: concatenate the N streams in order, 3x3 conv, ReLU."""
        out = []
        for s, conv in enumerate(self.fusion):
            if conv is None:
                out.append(None)
                continue
            shapes = {st[s].shape for st in streams}
            if len(shapes) != 1:
                raise StructuralError(f"scale-{s + 1} stream shapes differ: {sorted(shapes)}")
            out.append(T.relu(conv(T.concat([st[s] for st in streams], axis=1))))
        return out

    def decode(self, h: Sequence[Optional[Tensor]]) -> Tensor:
        x = h[2]
        for i, up in enumerate(self.up):
            x = T.relu(up(x))
            x = T.concat([x, h[1 - i]], axis=1)
        return T.sigmoid(self.head(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.fuse(self.encode(x)))

    def encoder_param_count(self) -> int:
        return sum(p.size for s in self.streams for p in s.parameters())


def _select_frame(x: Tensor, i: int) -> Tensor:
    """Differentiable slice ``x[:, i:i+1]``."""
    out = np.ascontiguousarray(x.data[:, i:i + 1])
    shape = x.shape

    def _back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, i:i + 1] = g
        return (gx,)

    return T._emit("select", (x,), out, _back)


# baselines; all treat the N frames as input channels


class MLP(Module):
    """Dense layers with ReLU on the flattened input, sigmoid output reshaped to the mask."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        sizes = [config.N * config.T_in * 4, *config.hidden, config.T_out * 4]
        self.layers = [Dense(rng, a, b) for a, b in zip(sizes, sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        h = T.reshape(x, (B, -1))
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = T.relu(h)
        return T.reshape(T.sigmoid(h), (B, 1, self.config.T_out, 4))


class CNNFC(Module):
    """Two conv + max-pool stages followed by a dense head."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        C, k = config.base_channels, config.kernel_size
        self.conv1 = Conv2d(rng, config.N, C, k)
        self.conv2 = Conv2d(rng, C, 2 * C, k)
        flat = 2 * C * (config.T_in // 4) * 4
        self.fc1 = Dense(rng, flat, config.hidden[0])
        self.fc2 = Dense(rng, config.hidden[0], config.T_out * 4)

    def forward(self, x: Tensor) -> Tensor:
        B = x.shape[0]
        h = T.max_pool2d(T.relu(self.conv1(x)), (2, 1))
        h = T.max_pool2d(T.relu(self.conv2(h)), (2, 1))
        h = T.relu(self.fc1(T.reshape(h, (B, -1))))
        return T.reshape(T.sigmoid(self.fc2(h)), (B, 1, self.config.T_out, 4))


class FCNMini(Module):
    """Three conv stages (two pooled) and a single transposed-conv upsampling head."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        C, k = config.base_channels, config.kernel_size
        self.conv1 = Conv2d(rng, config.N, C, k)
        self.conv2 = Conv2d(rng, C, 2 * C, k)
        self.conv3 = Conv2d(rng, 2 * C, 4 * C, k)
        self.score = Conv2d(rng, 4 * C, C, 1)
        factor = config.T_out // (config.T_in // 4)
        self.up = TransposedConv2d(rng, C, 1, (2 * factor - 1, k), stride=(factor, 1))

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.conv1(x))
        h = T.relu(self.conv2(T.max_pool2d(h, (2, 1))))
        h = T.relu(self.conv3(T.max_pool2d(h, (2, 1))))
        return T.sigmoid(self.up(T.relu(self.score(h))))


class UNetMini(Module):
    """Three-level encoder-decoder with skip concatenation."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        rng = np.random.default_rng(config.seed)
        C, k = config.base_channels, config.kernel_size
        self.n_up = decoder_stages(config.T_in, config.T_out)
        self.enc1 = Conv2d(rng, config.N, C, k)
        self.enc2 = Conv2d(rng, C, 2 * C, k)
        self.bottom = Conv2d(rng, 2 * C, 4 * C, k)
        widths = (C, 2 * C)
        self.up = []
        self.dec = []
        ch = 4 * C
        for i in range(self.n_up):
            w = widths[1 - i]
            self.up.append(TransposedConv2d(rng, ch, w, k, stride=(2, 1)))
            self.dec.append(Conv2d(rng, 2 * w, w, k))
            ch = w
        self.head = Conv2d(rng, ch, 1, 1)

    def forward(self, x: Tensor) -> Tensor:
        e1 = T.relu(self.enc1(x))
        e2 = T.relu(self.enc2(T.max_pool2d(e1, (2, 1))))
        h = T.relu(self.bottom(T.max_pool2d(e2, (2, 1))))
        skips = (e1, e2)
        for i in range(self.n_up):
            h = T.relu(self.up[i](h))
            h = T.relu(self.dec[i](T.concat([h, skips[1 - i]], axis=1)))
        return T.sigmoid(self.head(h))


_BUILDERS = {
    "proposed": ProposedNet,
    "fcn_mini": FCNMini,
    "unet_mini": UNetMini,
    "mlp": MLP,
    "cnn_fc": CNNFC,
}


def build_model(config: ModelConfig) -> Module:
    config.validate()
    return _BUILDERS[config.arch](config)


def budget_matched(config: ModelConfig, max_width: int = 4096) -> ModelConfig:
    """Copy of a baseline ``config`` resized to the proposed model's parameter count.

    Conv baselines vary ``base_channels``; the MLP varies a uniform hidden width
    and keeps its layer count. The width whose count is closest in ratio wins.
    """
    config.validate()
    if config.arch == "proposed":
        return config
    target = param_count(build_model(dataclasses.replace(config, arch="proposed")))
    field_name = "hidden" if config.arch == "mlp" else "base_channels"

    def sized(w):
        value = (w,) * len(config.hidden) if field_name == "hidden" else w
        return dataclasses.replace(config, **{field_name: value})

    def count(w):
        return param_count(build_model(sized(w)))

    # counts grow with width: double until past the target, then bisect,
    # so no model much larger than the target is ever built
    hi = 1
    while hi < max_width and count(hi) < target:
        hi *= 2
    lo, hi = hi // 2 + 1 if hi > 1 else 1, min(hi, max_width)
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid) < target:
            lo = mid + 1
        else:
            hi = mid
    best = min({max(lo - 1, 1), lo}, key=lambda w: abs(math.log(count(w) / target)))
    return sized(best)


def forward(model: Module, frames) -> Tensor:
    """Run ``model`` on ``frames`` ``[B, N, T_in, 4]`` (array or Tensor)."""
    x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float32))
    if x.ndim != 4 or x.shape[1] != model.config.N:
        raise ValueError(f"model expects {model.config.N} frames, got input shape {x.shape}")
    if x.shape[2] != model.config.T_in or x.shape[3] != 4:
        raise ValueError(f"model expects frames of shape ({model.config.T_in}, 4), got {x.shape[2:]}")
    return model(x)


def param_count(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


# checkpoint container: "TSCK", version, u32 JSON length, JSON {config, meta},
# u32 tensor count, then per tensor: u16 name length, name, u8 rank,
# u32 dims, f32 data; little-endian

CHECKPOINT_MAGIC = b"TSCK"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Module, **meta) -> "Checkpoint":
        return cls(model.config, {n: p.data.copy() for n, p in model.named_parameters()}, dict(meta))

    def param_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def to_model(self) -> Module:
        model = build_model(self.config)
        self.load_into(model)
        return model

    def load_into(self, model: Module) -> None:
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            missing = sorted(set(named) ^ set(self.params))
            raise StructuralError(f"checkpoint parameters do not match model: {missing[:5]}")
        for name, p in named.items():
            arr = self.params[name]
            if arr.shape != p.shape:
                raise StructuralError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data[...] = arr

    def to_bytes(self) -> bytes:
        header = json.dumps({"config": self.config.to_dict(), "meta": self.meta},
                            sort_keys=True).encode()
        parts = [CHECKPOINT_MAGIC, struct.pack("<B", CHECKPOINT_VERSION),
                 struct.pack("<I", len(header)), header, struct.pack("<I", len(self.params))]
        for name, arr in self.params.items():
            nb = name.encode()
            parts.append(struct.pack("<H", len(nb)) + nb)
            parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint file")
        (version,) = struct.unpack_from("<B", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", buf, 5)
        off = 9
        header = json.loads(buf[off: off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off: off + nlen].decode()
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(buf, "<f4", size, off).reshape(dims).astype(np.float32)
            off += 4 * size
        return cls(ModelConfig.from_dict(header["config"]), params, header.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
