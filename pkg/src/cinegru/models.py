"""Frame-pair baseline and ResNet-encoder + ConvGRU hybrid classifiers."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .nn import BasicBlock, BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor


class ConfigError(ValueError):
    pass


_STAGES = {"resnet18": [64, 128, 256, 512], "tiny": [16, 32, 64]}
_BLOCKS = {"resnet18": 2, "tiny": 1}


@dataclass
class EncoderConfig:
    variant: str = "tiny"
    in_channels: int = 2
    stage_channels: list[int] = field(default_factory=list)
    blocks_per_stage: int = 0

    def __post_init__(self):
        if self.variant not in _STAGES:
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if not self.stage_channels:
            self.stage_channels = list(_STAGES[self.variant])
        if not self.blocks_per_stage:
            self.blocks_per_stage = _BLOCKS[self.variant]
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    def stage_strides(self) -> list[int]:
        if self.variant == "resnet18":
            return [1] + [2] * (len(self.stage_channels) - 1)
        return [2] * len(self.stage_channels)

    def feature_shape(self, h: int, w: int) -> tuple[int, int]:
        """Spatial extent of the encoder output for an ``h`` x ``w`` input."""

        def down(n, k, s, p):
            return (n + 2 * p - k) // s + 1

        dims = [(h, w)]
        if self.variant == "resnet18":
            h, w = down(h, 7, 2, 3), down(w, 7, 2, 3)
            dims.append((h, w))
            h, w = down(h, 3, 2, 1), down(w, 3, 2, 1)
            dims.append((h, w))
        for s in self.stage_strides():
            h, w = down(h, 3, s, 1), down(w, 3, s, 1)
            dims.append((h, w))
        if min(min(d) for d in dims) < 1 or min(h, w) < 2:
            raise ConfigError(f"encoder output must be at least 2x2; extents per stage: {dims}")
        return h, w


@dataclass
class ConvGRUConfig:
    input_channels: int = 64
    hidden_channels: int = 32
    kernel: int = 3

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise ConfigError("hidden_channels must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("ConvGRU kernel must be a positive odd integer")


class Encoder(Module):
    """ResNet-style feature extractor; ``frames_encoded`` counts input pairs seen."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        if cfg.variant == "resnet18":
            self.stem_conv = Conv2d(cfg.in_channels, c0, 7, rng, stride=2, padding=3, dtype=dtype)
        else:
            self.stem_conv = Conv2d(cfg.in_channels, c0, 3, rng, stride=1, padding=1, dtype=dtype)
        self.stem_bn = BatchNorm2d(c0, dtype)
        blocks = []
        cin = c0
        for cout, stride in zip(cfg.stage_channels, cfg.stage_strides()):
            for b in range(cfg.blocks_per_stage):
                blocks.append(BasicBlock(cin, cout, stride if b == 0 else 1, rng, dtype))
                cin = cout
        self.blocks = blocks
        self.frames_encoded = 0

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise T.ShapeError(f"encoder expects [N,{self.cfg.in_channels},H,W] input, got {x.shape}")
        self.frames_encoded += x.shape[0]
        out = T.relu(self.stem_bn(self.stem_conv(x)))
        if self.cfg.variant == "resnet18":
            out = T.maxpool2d(out, 3, 2, 1)
        for block in self.blocks:
            out = block(out)
        return out


class BaselineModel(Module):
    """Encoder, global average pool, linear layer to one logit, sigmoid."""

    def __init__(self, encoder: Encoder, head: Linear):
        self.encoder = encoder
        self.head = head

    def logits(self, x: Tensor) -> Tensor:
        if self.head is None:
            raise RuntimeError("model head has been stripped")
        return T.reshape(self.head(T.global_avg_pool(self.encoder(x))), (x.shape[0],))

    def forward(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.logits(x))


def build_baseline(cfg: EncoderConfig, seed: int, dtype=np.float32, input_hw: tuple[int, int] | None = None) -> BaselineModel:
    if input_hw is not None:
        cfg.feature_shape(*input_hw)
    encoder = Encoder(cfg, rngmod.stream(seed, "baseline", "encoder"), dtype)
    head = Linear(cfg.out_channels, 1, rngmod.stream(seed, "baseline", "head"), dtype)
    return BaselineModel(encoder, head)


def strip_head(model: BaselineModel) -> Encoder:
    """Detach the classification head; the returned encoder shares parameters."""
    if model.head is None:
        raise RuntimeError("model head already stripped")
    model.head = None
    return model.encoder


def attach_head(encoder: Encoder, head: Linear) -> BaselineModel:
    return BaselineModel(encoder, head)


def forward_baseline(frame_pair, model: BaselineModel) -> float:
    """Probability for one ``[2,H,W]`` frame pair."""
    x = frame_pair.data if isinstance(frame_pair, Tensor) else np.asarray(frame_pair)
    if x.ndim != 3 or x.shape[0] != model.encoder.cfg.in_channels:
        raise T.ShapeError(f"frame pair must have shape [{model.encoder.cfg.in_channels},H,W], got {x.shape}")
    dtype = model.head.weight.dtype
    with T.no_grad():
        return model(Tensor(x[None].astype(dtype))).item()


class ConvGRU(Module):
    """Convolutional GRU cell plus a pooled linear probability head."""

    def __init__(self, cfg: ConvGRUConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        cin, hid, k = cfg.input_channels, cfg.hidden_channels, cfg.kernel

        def kern(c):
            return Tensor((rng.standard_normal((hid, c, k, k)) * np.sqrt(2.0 / (c * k * k))).astype(dtype), True)

        self.w_z, self.w_r, self.w_c = kern(cin), kern(cin), kern(cin)
        self.u_z, self.u_r, self.u_c = kern(hid), kern(hid), kern(hid)
        self.b_z = Tensor(np.zeros(hid, dtype), True)
        self.b_r = Tensor(np.zeros(hid, dtype), True)
        self.b_c = Tensor(np.zeros(hid, dtype), True)
        self.head = Linear(hid, 1, rng, dtype)
        self.steps = 0

    @property
    def pad(self) -> int:
        return (self.cfg.kernel - 1) // 2

    def init_hidden(self, n: int, h: int, w: int) -> Tensor:
        return Tensor(np.zeros((n, self.cfg.hidden_channels, h, w), dtype=self.b_z.dtype))

    def input_projection(self, x: Tensor) -> Tensor:
        """Gate and candidate input terms for a batch of inputs in one convolution."""
        w = T.concat([self.w_z, self.w_r, self.w_c], axis=0)
        b = T.concat([self.b_z, self.b_r, self.b_c], axis=0)
        return T.conv2d(x, w, b, 1, self.pad)

    def step_projected(self, xp: Tensor, h_prev: Tensor) -> tuple[Tensor, dict]:
        """One recurrence step given pre-projected inputs ``xp[N,3*hid,h,w]``."""
        hid = self.cfg.hidden_channels
        if xp.shape[0] != h_prev.shape[0] or xp.shape[2:] != h_prev.shape[2:] or h_prev.shape[1] != hid:
            raise T.ShapeError(f"convgru: input shape {xp.shape} incompatible with hidden shape {h_prev.shape}")
        hzr = T.conv2d(h_prev, T.concat([self.u_z, self.u_r], axis=0), None, 1, self.pad)
        z = T.sigmoid(xp[:, :hid] + hzr[:, :hid])
        r = T.sigmoid(xp[:, hid : 2 * hid] + hzr[:, hid:])
        c = T.tanh(xp[:, 2 * hid :] + T.conv2d(r * h_prev, self.u_c, None, 1, self.pad))
        h = (1.0 - z) * h_prev + z * c
        self.steps += 1
        return h, {"z": z, "r": r, "c": c}

    def classify(self, h: Tensor) -> Tensor:
        return T.sigmoid(T.reshape(self.head(T.global_avg_pool(h)), (h.shape[0],)))


def convgru_step(x_t: Tensor, h_prev: Tensor, gru: ConvGRU, return_gates: bool = False):
    """``h_t`` from input ``x_t[N,Cin,h,w]`` and the previous hidden state."""
    if x_t.ndim != 4 or h_prev.ndim != 4 or x_t.shape[0] != h_prev.shape[0] or x_t.shape[2:] != h_prev.shape[2:]:
        raise T.ShapeError(f"convgru: input shape {x_t.shape} incompatible with hidden shape {h_prev.shape}")
    h, gates = gru.step_projected(gru.input_projection(x_t), h_prev)
    return (h, gates) if return_gates else h


class HybridModel(Module):
    """Pretrained encoder on consecutive frame pairs feeding a ConvGRU.

    With ``encoder_bn_frozen`` the encoder's batch-norm layers keep using
    their pretrained running statistics (once they exist) even in training
    mode. A batch is
    the frame pairs of a single series, so batch statistics would otherwise
    normalize away everything that distinguishes one series from another.
    """

    def __init__(self, encoder: Encoder, gru: ConvGRU, encoder_bn_frozen: bool = True):
        self.encoder = encoder
        self.gru = gru
        self.encoder_bn_frozen = encoder_bn_frozen

    def train(self, mode: bool = True) -> "HybridModel":
        super().train(mode)
        if mode and self.encoder_bn_frozen:
            for _, m in self.encoder.named_modules():
                if isinstance(m, BatchNorm2d) and m.running_mean is not None:
                    m.training = False
        return self

    def forward(self, frames) -> Tensor:
        """Probability (shape ``[1]``) for one ``[T,H,W]`` series."""
        x = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        if x.ndim != 3:
            raise T.ShapeError(f"series must have shape [T,H,W], got {x.shape}")
        if x.shape[0] < 2:
            raise ValueError(f"series needs at least 2 frames, got {x.shape[0]}")
        x = x.astype(self.gru.b_z.dtype, copy=False)
        pairs = Tensor(np.stack([x[:-1], x[1:]], axis=1))
        # encoder calls for all T-1 consecutive pairs are batched
        feats = self.encoder(pairs)
        proj = self.gru.input_projection(feats)
        n_steps = x.shape[0] - 1
        h = self.gru.init_hidden(1, feats.shape[2], feats.shape[3])
        for t in range(n_steps):
            h, _ = self.gru.step_projected(proj[t : t + 1], h)
        return self.gru.classify(h)


def build_hybrid(encoder: Encoder, cfg: ConvGRUConfig, seed: int, dtype=None) -> HybridModel:
    if cfg.input_channels != encoder.cfg.out_channels:
        raise ConfigError(
            f"ConvGRU input_channels {cfg.input_channels} != encoder output channels {encoder.cfg.out_channels}"
        )
    if dtype is None:
        dtype = encoder.stem_conv.weight.dtype
    return HybridModel(encoder, ConvGRU(cfg, rngmod.stream(seed, "hybrid", "convgru"), dtype))


def forward_hybrid(frames, model: HybridModel) -> float:
    with T.no_grad():
        return model(frames).item()


def param_ratio(baseline: BaselineModel | Encoder, gru: ConvGRU) -> float:
    """ConvGRU + head parameter count relative to the full baseline classifier.

    ``baseline`` may be an encoder whose head was stripped; the head
    (``C_last + 1`` weights) is then added back to the denominator.
    """
    if isinstance(baseline, Encoder):
        base = T.count_params(baseline.parameters()) + baseline.cfg.out_channels + 1
    else:
        base = T.count_params(baseline.parameters())
    return T.count_params(gru.parameters()) / base


def config_dict(enc: EncoderConfig, gru: ConvGRUConfig | None = None) -> dict:
    d = {"encoder": asdict(enc)}
    if gru is not None:
        d["convgru"] = asdict(gru)
    return d
