"""MaxDropout and the comparison regularizers (Dropout, Cutout, RandomErasing).

MaxDropout samples a rate from U(0, r), normalizes the activation tensor so
its largest value is (about) one, and zeroes every element at or above
``(1 - rate) * max(normalized)``. Only elements strictly below the threshold
survive. Kept activations are not rescaled.

Dropout and MaxDropout act on differentiable :class:`~maxdrop.tensor.Tensor`
activations. Cutout and RandomErasing act on single ``C, H, W`` images as
plain numpy arrays, since they run in the input pipeline.

In ``eval`` mode every regularizer returns its input unchanged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import ConfigError
from .rng import Rng
from .tensor import Tensor, multiply

NORM_MODES = ("maxabs", "l2")
MODES = ("train", "eval")


@dataclass
class DropConfig:
    r: float = 0.3
    p: float = 0.5
    cutout_size: int = 16
    erase_area_range: tuple[float, float] = (0.02, 0.4)
    erase_aspect_range: tuple[float, float] = (0.3, 3.333)
    erase_prob: float = 0.5
    erase_value_range: tuple[float, float] = (0.0, 1.0)
    norm: str = "maxabs"
    per_sample: bool = True

    def __post_init__(self):
        self.erase_area_range = tuple(float(v) for v in self.erase_area_range)
        self.erase_aspect_range = tuple(float(v) for v in self.erase_aspect_range)
        self.erase_value_range = tuple(float(v) for v in self.erase_value_range)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.r < 1.0:
            raise ConfigError("r", f"must be in [0, 1), got {self.r}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError("p", f"must be in [0, 1), got {self.p}")
        if int(self.cutout_size) != self.cutout_size or self.cutout_size < 1:
            raise ConfigError("cutout_size", f"must be a positive integer, got {self.cutout_size}")
        lo, hi = _pair("erase_area_range", self.erase_area_range)
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError("erase_area_range", f"need 0 < low < high < 1, got {self.erase_area_range}")
        lo, hi = _pair("erase_aspect_range", self.erase_aspect_range)
        if not 0.0 < lo < hi:
            raise ConfigError("erase_aspect_range", f"need 0 < low < high, got {self.erase_aspect_range}")
        lo, hi = _pair("erase_value_range", self.erase_value_range)
        if not lo < hi:
            raise ConfigError("erase_value_range", f"need low < high, got {self.erase_value_range}")
        if not 0.0 <= self.erase_prob <= 1.0:
            raise ConfigError("erase_prob", f"must be in [0, 1], got {self.erase_prob}")
        if self.norm not in NORM_MODES:
            raise ConfigError("norm", f"must be one of {NORM_MODES}, got {self.norm!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("erase_area_range", "erase_aspect_range", "erase_value_range"):
            d[k] = list(d[k])
        return d


def _pair(name, value):
    if len(value) != 2:
        raise ConfigError(name, f"expected a pair, got {value}")
    return value


@dataclass
class MaskReport:
    """What one MaxDropout application did.

    For per-sample application ``threshold`` holds one value per sample.
    """

    sampled_rate: float
    threshold: Union[float, np.ndarray]
    dropped_count: int
    mask: np.ndarray = field(repr=False)

    @property
    def dropped_fraction(self) -> float:
        return self.dropped_count / self.mask.size if self.mask.size else 0.0


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _values(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def max_dropout_mask(t, rate: float, norm: str = "maxabs") -> MaskReport:
    """Mask for a single MaxDropout application at an already-sampled ``rate``.

    The whole of ``t`` is one population. ``mask[i] = 1`` iff the normalized
    value is strictly below ``(1 - rate) * max(normalized)``. Comparisons run
    in float64. An all-zero tensor keeps everything (threshold 0).
    """
    x = _values(t).astype(np.float64, copy=False)
    if x.size == 0:
        raise ValueError("max_dropout_mask: empty tensor")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"max_dropout_mask: rate must be in [0, 1), got {rate}")
    if norm not in NORM_MODES:
        raise ValueError(f"max_dropout_mask: norm must be one of {NORM_MODES}, got {norm!r}")
    scale = np.abs(x).max()
    if norm == "l2" and scale > 0:
        # scaled form avoids under/overflow in the squares
        scale = scale * np.sqrt(np.square(x / scale).sum())
    if scale == 0.0:
        return MaskReport(float(rate), 0.0, 0, np.ones(x.shape, dtype=x.dtype))
    normed = x / scale
    threshold = (1.0 - rate) * normed.max()
    mask = (normed < threshold).astype(np.float64)
    return MaskReport(float(rate), float(threshold), int(mask.size - np.count_nonzero(mask)), mask)


def _per_sample_mask(x: np.ndarray, rate: float, norm: str) -> MaskReport:
    # vectorized equivalent of max_dropout_mask applied to each x[i]
    x = x.astype(np.float64, copy=False)
    flat = x.reshape(x.shape[0], -1)
    if norm not in NORM_MODES:
        raise ValueError(f"norm must be one of {NORM_MODES}, got {norm!r}")
    scale = np.abs(flat).max(axis=1, keepdims=True)
    zero = scale == 0.0
    if norm == "l2":
        safe = np.where(zero, 1.0, scale)
        scale = safe * np.sqrt(np.square(flat / safe).sum(axis=1, keepdims=True))
    normed = flat / np.where(zero, 1.0, scale)
    threshold = (1.0 - rate) * normed.max(axis=1, keepdims=True)
    mask = (normed < threshold) | zero
    threshold = np.where(zero, 0.0, threshold)[:, 0]
    mask = mask.reshape(x.shape).astype(np.float64)
    return MaskReport(float(rate), threshold, int(mask.size - np.count_nonzero(mask)), mask)


def max_dropout(
    t: Tensor,
    cfg: DropConfig,
    rng: Optional[Rng],
    mode: str = "train",
    rate: Optional[float] = None,
) -> tuple[Tensor, Optional[MaskReport]]:
    """Apply MaxDropout to an activation tensor.

    Draws one rate from U(0, cfg.r) per call unless ``rate`` is given. With
    ``cfg.per_sample`` each leading-axis slice is normalized on its own;
    otherwise the whole batch is one population. Gradients flow through the
    multiply with the mask held constant.
    """
    _check_mode(mode)
    if mode == "eval":
        return t, None
    if rate is None:
        rate = float(rng.uniform(0.0, cfg.r)) if cfg.r > 0 else 0.0
    if cfg.per_sample and t.ndim >= 2:
        report = _per_sample_mask(t.data, rate, cfg.norm)
    else:
        report = max_dropout_mask(t, rate, cfg.norm)
    return multiply(t, Tensor(report.mask, dtype=t.dtype)), report


def dropout(t: Tensor, cfg: DropConfig, rng: Optional[Rng], mode: str = "train") -> Tensor:
    """Inverted dropout: zero with probability ``cfg.p``, scale survivors by 1/(1-p)."""
    _check_mode(mode)
    if mode == "eval" or cfg.p == 0.0:
        return t
    keep = rng.random(t.shape) >= cfg.p
    scale = t.dtype.type(1.0 / (1.0 - cfg.p))
    return multiply(t, Tensor(keep.astype(t.dtype) * scale, dtype=t.dtype))


def cutout(
    img: np.ndarray,
    size: int,
    rng: Optional[Rng],
    mode: str = "train",
    center: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    """Zero a ``size x size`` square centred on a uniformly drawn pixel, clipped to the image."""
    _check_mode(mode)
    if mode == "eval":
        return img
    if size < 1:
        raise ValueError(f"cutout: size must be >= 1, got {size}")
    h, w = img.shape[-2:]
    if center is None:
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
    else:
        cy, cx = center
    y1, x1 = cy - size // 2, cx - size // 2
    y1c, y2c = max(y1, 0), min(y1 + size, h)
    x1c, x2c = max(x1, 0), min(x1 + size, w)
    out = img.copy()
    if y2c > y1c and x2c > x1c:
        out[..., y1c:y2c, x1c:x2c] = 0
    return out


def random_erasing(
    img: np.ndarray,
    cfg: DropConfig,
    rng: Optional[Rng],
    mode: str = "train",
    rect: Optional[tuple[int, int, int, int]] = None,
    max_attempts: int = 100,
) -> np.ndarray:
    """Fill a random rectangle with i.i.d. uniform values, with probability ``cfg.erase_prob``.

    ``rect = (top, left, height, width)`` bypasses the sampling (the fill is
    still random). Gives up and returns ``img`` after ``max_attempts`` failed
    placements.
    """
    _check_mode(mode)
    if mode == "eval":
        return img
    lo, hi = cfg.erase_value_range
    c, h, w = img.shape[-3:]
    if rect is None:
        if cfg.erase_prob == 0.0 or rng.random() >= cfg.erase_prob:
            return img
        area = h * w
        for _ in range(max_attempts):
            target = area * rng.uniform(*cfg.erase_area_range)
            aspect = rng.uniform(*cfg.erase_aspect_range)
            eh = int(round(np.sqrt(target * aspect)))
            ew = int(round(np.sqrt(target / aspect)))
            if 0 < eh < h and 0 < ew < w:
                top = int(rng.integers(0, h - eh + 1))
                left = int(rng.integers(0, w - ew + 1))
                rect = (top, left, eh, ew)
                break
        else:
            return img
    top, left, eh, ew = rect
    out = img.copy()
    region = out[..., top : top + eh, left : left + ew]
    region[...] = rng.uniform(lo, hi, region.shape).astype(img.dtype)
    return out
