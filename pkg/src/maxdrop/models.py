"""Residual CNNs with named regularizer slots.

Two families, scaled down for CPU training:

``resnet-mini``
    conv stem, then stages of basic blocks (conv-BN-ReLU-conv-BN + shortcut,
    ReLU). Each block has a slot ``stageS.blockB`` applied to the block output,
    i.e. between blocks. With ``slot_position="pre"`` the slot instead acts on
    the residual branch before the addition.

``wideresnet-mini``
    conv stem, then pre-activation wide blocks (BN-ReLU-conv-[slot]-BN-ReLU-conv
    + shortcut), final BN-ReLU. The slot ``stageS.blockB.inner`` sits between
    the two convolutions, where the wide architecture places its Dropout.

Both end with global average pooling and a dense classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .regularizers import DropConfig, MaskReport, dropout, max_dropout
from .rng import Rng
from .tensor import Tensor

FAMILIES = ("resnet-mini", "wideresnet-mini")
SLOT_KINDS = ("none", "dropout", "maxdropout")
SLOT_POSITIONS = ("post", "pre")
WILDCARD = "*"


@dataclass
class ModelSpec:
    family: str = "resnet-mini"
    depth_per_stage: list[int] = field(default_factory=lambda: [1, 1, 1])
    base_width: int = 8
    widen_factor: int = 1
    num_classes: int = 10
    in_channels: int = 3
    slot_assignment: dict[str, str] = field(default_factory=lambda: {WILDCARD: "none"})
    slot_position: str = "post"
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    drop_config: DropConfig = field(default_factory=DropConfig)
    dtype: str = "float32"

    def __post_init__(self):
        self.depth_per_stage = [int(d) for d in self.depth_per_stage]
        self.slot_assignment = dict(self.slot_assignment)
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError("family", f"must be one of {FAMILIES}, got {self.family!r}")
        if not self.depth_per_stage or any(d < 1 for d in self.depth_per_stage):
            raise ConfigError("depth_per_stage", f"needs at least one stage, each depth >= 1, got {self.depth_per_stage}")
        if self.base_width < 1:
            raise ConfigError("base_width", f"must be positive, got {self.base_width}")
        if self.widen_factor < 1:
            raise ConfigError("widen_factor", f"must be positive, got {self.widen_factor}")
        if self.num_classes < 2:
            raise ConfigError("num_classes", f"must be >= 2, got {self.num_classes}")
        if self.in_channels < 1:
            raise ConfigError("in_channels", f"must be positive, got {self.in_channels}")
        if self.slot_position not in SLOT_POSITIONS:
            raise ConfigError("slot_position", f"must be one of {SLOT_POSITIONS}, got {self.slot_position!r}")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ConfigError("bn_momentum", f"must be in (0, 1], got {self.bn_momentum}")
        if self.bn_eps <= 0:
            raise ConfigError("bn_eps", f"must be positive, got {self.bn_eps}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", f"must be float32 or float64, got {self.dtype!r}")
        resolve_slots(self)

    def slot_names(self) -> list[str]:
        suffix = ".inner" if self.family == "wideresnet-mini" else ""
        return [
            f"stage{s + 1}.block{b + 1}{suffix}"
            for s, depth in enumerate(self.depth_per_stage)
            for b in range(depth)
        ]

    def stage_widths(self) -> list[int]:
        return [self.base_width * self.widen_factor * 2**s for s in range(len(self.depth_per_stage))]


def resolve_slots(spec: ModelSpec) -> dict[str, str]:
    """Expand the slot assignment (``"*"`` applies to every slot) and validate it."""
    names = spec.slot_names()
    out = {n: "none" for n in names}
    default = spec.slot_assignment.get(WILDCARD)
    if default is not None:
        out = {n: default for n in names}
    for name, kind in spec.slot_assignment.items():
        if name == WILDCARD:
            continue
        if name not in out:
            raise ConfigError(
                "slot_assignment",
                f"unknown slot {name!r} for {spec.family}; valid slots: {', '.join(names)}",
            )
        out[name] = kind
    for name, kind in out.items():
        if kind not in SLOT_KINDS:
            raise ConfigError("slot_assignment", f"slot {name!r} has unknown kind {kind!r}; expected one of {SLOT_KINDS}")
    return out


class Conv:
    def __init__(self, name, cin, cout, k, stride, pad, rng: Rng, dtype):
        fan_in = cin * k * k
        w = rng.split(name).normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k))
        self.weight = Tensor(w, tracked=True, dtype=dtype)
        self.stride, self.pad = stride, pad
        self.params = [(f"{name}.weight", self.weight)]

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.stride, self.pad)


class BatchNorm:
    def __init__(self, name, c, momentum, eps, dtype):
        self.gamma = Tensor(np.ones(c), tracked=True, dtype=dtype)
        self.beta = Tensor(np.zeros(c), tracked=True, dtype=dtype)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        self.params = [(f"{name}.gamma", self.gamma), (f"{name}.beta", self.beta)]
        self.buffers = [(f"{name}.running_mean", self.running_mean), (f"{name}.running_var", self.running_var)]

    def __call__(self, x, mode):
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             mode, self.momentum, self.eps)


class Slot:
    """A named regularizer position. ``kind`` is one of none/dropout/maxdropout."""

    def __init__(self, name: str, kind: str, cfg: DropConfig):
        self.name, self.kind, self.cfg = name, kind, cfg
        self.force_rate: Optional[float] = None
        self.last_report: Optional[MaskReport] = None

    def __call__(self, x: Tensor, mode: str, rng: Optional[Rng]) -> Tensor:
        self.last_report = None
        if self.kind == "none" or mode == "eval":
            return x
        sub = rng.split(self.name) if rng is not None else None
        if self.kind == "dropout":
            return dropout(x, self.cfg, sub, mode)
        out, self.last_report = max_dropout(x, self.cfg, sub, mode, rate=self.force_rate)
        return out


class BasicBlock:
    def __init__(self, name, cin, cout, stride, slot, spec: ModelSpec, rng, dtype):
        m, e = spec.bn_momentum, spec.bn_eps
        self.conv1 = Conv(f"{name}.conv1", cin, cout, 3, stride, 1, rng, dtype)
        self.bn1 = BatchNorm(f"{name}.bn1", cout, m, e, dtype)
        self.conv2 = Conv(f"{name}.conv2", cout, cout, 3, 1, 1, rng, dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", cout, m, e, dtype)
        self.proj = self.proj_bn = None
        if stride != 1 or cin != cout:
            self.proj = Conv(f"{name}.shortcut", cin, cout, 1, stride, 0, rng, dtype)
            self.proj_bn = BatchNorm(f"{name}.shortcut_bn", cout, m, e, dtype)
        self.slot = slot
        self.pre = spec.slot_position == "pre"
        parts = [self.conv1, self.bn1, self.conv2, self.bn2, self.proj, self.proj_bn]
        self.params = [p for part in parts if part is not None for p in part.params]
        self.buffers = [b for part in parts if isinstance(part, BatchNorm) for b in part.buffers]

    def __call__(self, x, mode, rng):
        h = T.relu(self.bn1(self.conv1(x), mode))
        h = self.bn2(self.conv2(h), mode)
        if self.pre:
            h = self.slot(h, mode, rng)
        short = x if self.proj is None else self.proj_bn(self.proj(x), mode)
        out = T.relu(h + short)
        if not self.pre:
            out = self.slot(out, mode, rng)
        return out


class WideBlock:
    def __init__(self, name, cin, cout, stride, slot, spec: ModelSpec, rng, dtype):
        m, e = spec.bn_momentum, spec.bn_eps
        self.bn1 = BatchNorm(f"{name}.bn1", cin, m, e, dtype)
        self.conv1 = Conv(f"{name}.conv1", cin, cout, 3, stride, 1, rng, dtype)
        self.bn2 = BatchNorm(f"{name}.bn2", cout, m, e, dtype)
        self.conv2 = Conv(f"{name}.conv2", cout, cout, 3, 1, 1, rng, dtype)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = Conv(f"{name}.shortcut", cin, cout, 1, stride, 0, rng, dtype)
        self.slot = slot
        parts = [self.bn1, self.conv1, self.bn2, self.conv2, self.proj]
        self.params = [p for part in parts if part is not None for p in part.params]
        self.buffers = [b for part in parts if isinstance(part, BatchNorm) for b in part.buffers]

    def __call__(self, x, mode, rng):
        a = T.relu(self.bn1(x, mode))
        h = self.conv1(a)
        h = self.slot(T.relu(self.bn2(h, mode)), mode, rng)
        h = self.conv2(h)
        # pre-activation convention: projection shortcut reads the activated input
        short = x if self.proj is None else self.proj(a)
        return h + short


class Model:
    """An ordered stack of layers built from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        self.spec = spec
        self.mode = "train"
        dtype = np.dtype(spec.dtype)
        self.dtype = dtype
        kinds = resolve_slots(spec)
        widths = spec.stage_widths()
        wide = spec.family == "wideresnet-mini"
        init = rng.split("init")

        self.stem = Conv("stem", spec.in_channels, spec.base_width, 3, 1, 1, init, dtype)
        self.stem_bn = None if wide else BatchNorm("stem_bn", spec.base_width, spec.bn_momentum, spec.bn_eps, dtype)
        self.blocks = []
        self.slots: dict[str, Slot] = {}
        cin = spec.base_width
        names = iter(spec.slot_names())
        block_cls = WideBlock if wide else BasicBlock
        for s, (depth, cout) in enumerate(zip(spec.depth_per_stage, widths)):
            for b in range(depth):
                stride = 2 if (s > 0 and b == 0) else 1
                slot_name = next(names)
                slot = Slot(slot_name, kinds[slot_name], spec.drop_config)
                self.slots[slot_name] = slot
                self.blocks.append(block_cls(f"stage{s + 1}.block{b + 1}", cin, cout, stride, slot, spec, init, dtype))
                cin = cout
        self.final_bn = BatchNorm("final_bn", cin, spec.bn_momentum, spec.bn_eps, dtype) if wide else None
        fc = init.split("fc")
        self.fc_weight = Tensor(fc.normal(0.0, np.sqrt(1.0 / cin), (cin, spec.num_classes)), tracked=True, dtype=dtype)
        self.fc_bias = Tensor(np.zeros(spec.num_classes), tracked=True, dtype=dtype)

        self.params: list[tuple[str, Tensor]] = list(self.stem.params)
        self.buffers: list[tuple[str, np.ndarray]] = []
        for part in [self.stem_bn, *self.blocks, self.final_bn]:
            if part is not None:
                self.params.extend(part.params)
                self.buffers.extend(part.buffers)
        self.params += [("fc.weight", self.fc_weight), ("fc.bias", self.fc_bias)]

    def describe(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes, in registration order."""
        return [(name, p.shape) for name, p in self.params]

    def num_parameters(self) -> int:
        return int(sum(p.size for _, p in self.params))

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer."""
        out = {name: p.data.copy() for name, p in self.params}
        out.update({name: b.copy() for name, b in self.buffers})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params:
            if state[name].shape != p.shape:
                raise T.ShapeError(f"load_state: {name} has shape {state[name].shape}, expected {p.shape}")
            p.data[...] = state[name]
        for name, b in self.buffers:
            b[...] = state[name]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def mask_reports(self) -> dict[str, MaskReport]:
        return {n: s.last_report for n, s in self.slots.items() if s.last_report is not None}

    def force_rate(self, rate: Optional[float]) -> None:
        """Pin every MaxDropout slot's rate (``None`` restores sampling)."""
        for s in self.slots.values():
            s.force_rate = rate

    def __call__(self, batch, mode: str = "train", rng: Optional[Rng] = None) -> Tensor:
        return forward(self, batch, mode, rng)


def build(spec: ModelSpec, rng: Rng) -> Model:
    spec.validate()
    return Model(spec, rng)


def forward(model: Model, batch, mode: str = "train", rng: Optional[Rng] = None) -> Tensor:
    """Logits ``(N, num_classes)``. In eval mode slots are identity and BN uses running stats."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = T.as_tensor(batch, dtype=model.dtype)
    if x.dtype != model.dtype:
        x = Tensor(x.data, dtype=model.dtype)
    spec = model.spec
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise T.ShapeError(f"forward: expected (N, {spec.in_channels}, H, W) input, got {x.shape}")
    if mode == "train" and rng is None and any(s.kind != "none" for s in model.slots.values()):
        raise ValueError("forward: train mode with active regularizer slots needs an Rng")
    model.mode = mode
    h = model.stem(x)
    if model.stem_bn is not None:
        h = T.relu(model.stem_bn(h, mode))
    for block in model.blocks:
        h = block(h, mode, rng)
    if model.final_bn is not None:
        h = T.relu(model.final_bn(h, mode))
    h = T.global_avg_pool2d(h)
    return T.dense(h, model.fc_weight, model.fc_bias)
