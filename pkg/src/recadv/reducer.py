"""Pooling-based perturbation simplification.

The dimension reducer maps a perturbation through a stride-k down-sample
followed by a matching up-sample (optionally with an additive skip
connection), flattening fine structure so a paired recovery network can
estimate the perturbation with less error. For the average-pooling
variant this is provably never worse: the replicated window means are at
least as close to any target as the raw values are, which
``delta_pair``/``lemma_check`` verify numerically.

down/up methods:
  avg  - window mean on the way down, nearest-neighbor replication up
  max  - window max (indices kept) down, scatter-to-index up
  conv - learnable k-by-k stride-k convolution / transposed convolution
         (weights owned by whoever trains the surrounding model)
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

METHODS = ("avg", "max", "conv")


@dataclass(frozen=True)
class ReducerConfig:
    down_method: str = "avg"
    up_method: str = "avg"
    kernel: int = 2
    stride: int = 0  # 0 means "same as kernel"
    skip: bool = False

    def __post_init__(self):
        if self.down_method not in METHODS:
            raise ConfigError(f"unknown down_method {self.down_method!r}")
        if self.up_method not in METHODS:
            raise ConfigError(f"unknown up_method {self.up_method!r}")
        if self.kernel < 1:
            raise ConfigError("kernel must be a positive integer")
        if self.stride == 0:
            object.__setattr__(self, "stride", self.kernel)
        if self.stride != self.kernel:
            raise ConfigError("stride must equal kernel (paired pooling windows)")
        if self.up_method == "max" and self.down_method != "max":
            raise ConfigError("max up-sample needs pooling indices from a max down-sample")


def _check_rank4(p):
    if p.ndim != 4:
        raise ShapeError(f"expected rank-4 perturbation, got shape {tuple(p.shape)}")


def downsample(p, cfg, weight=None):
    """Reduce spatial dims by cfg.kernel. Returns (low, indices-or-None).

    Height and width must be divisible by the kernel; callers that need
    padding handle it before calling (see dimension_reduce). ``weight``
    is the [C, C, k, k] kernel for the conv method.
    """
    _check_rank4(p)
    k = cfg.kernel
    _, _, h, w = p.shape
    if h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by kernel {k}")
    if cfg.down_method == "avg":
        return F.avg_pool2d(p, k, stride=k), None
    if cfg.down_method == "max":
        low, idx = F.max_pool2d(p, k, stride=k, return_indices=True)
        return low, idx
    if weight is None:
        raise ConfigError("conv down-sample requires a weight tensor")
    return F.conv2d(p, weight, stride=k), None


def upsample(p_low, cfg, target_hw, indices=None, weight=None):
    """Expand spatial dims back to ``target_hw`` (= kernel * low dims)."""
    _check_rank4(p_low)
    k = cfg.kernel
    h, w = target_hw
    if (h, w) != (p_low.shape[2] * k, p_low.shape[3] * k):
        raise ShapeError(
            f"target {h}x{w} is not kernel x low dims "
            f"{p_low.shape[2]}x{p_low.shape[3]} (k={k})"
        )
    if cfg.up_method == "avg":
        # every cell of a window receives the window value
        return p_low.repeat_interleave(k, dim=2).repeat_interleave(k, dim=3)
    if cfg.up_method == "max":
        if indices is None:
            raise ConfigError("max up-sample requires the down-sample indices")
        return F.max_unpool2d(p_low, indices, kernel_size=k, stride=k, output_size=(h, w))
    if weight is None:
        raise ConfigError("conv up-sample requires a weight tensor")
    return F.conv_transpose2d(p_low, weight, stride=k)


def dimension_reduce(p, cfg, down_weight=None, up_weight=None):
    """down-sample -> up-sample (-> + p when cfg.skip). Output shape == input shape.

    Dims not divisible by the kernel are reflect-padded to the next
    multiple and the result is cropped back (e.g. kernel 3 on 28x28 runs
    at 30x30), so the op is total and deterministic for any input size.
    """
    _check_rank4(p)
    k = cfg.kernel
    _, _, h, w = p.shape
    pad_h = (-h) % k
    pad_w = (-w) % k
    q = F.pad(p, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else p
    low, idx = downsample(q, cfg, weight=down_weight)
    up = upsample(low, cfg, (h + pad_h, w + pad_w), indices=idx, weight=up_weight)
    if pad_h or pad_w:
        up = up[:, :, :h, :w]
    return up + p if cfg.skip else up


class DimensionReducer(torch.nn.Module):
    """Module wrapper owning the conv weights, when the config needs any.

    Conv kernels are initialized at the averaging kernel (identity per
    channel, 1/k^2 down / 1.0 up) plus small noise, so the learnable
    variant starts out close to the provably-recoverable average pooling.
    """

    def __init__(self, cfg, channels=1):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        k = cfg.kernel
        if cfg.down_method == "conv":
            w = torch.zeros(channels, channels, k, k)
            for c in range(channels):
                w[c, c] = 1.0 / (k * k)
            self.down_weight = torch.nn.Parameter(w + 0.01 * torch.randn_like(w))
        else:
            self.down_weight = None
        if cfg.up_method == "conv":
            w = torch.zeros(channels, channels, k, k)
            for c in range(channels):
                w[c, c] = 1.0
            self.up_weight = torch.nn.Parameter(w + 0.01 * torch.randn_like(w))
        else:
            self.up_weight = None

    def forward(self, p):
        return dimension_reduce(p, self.cfg, self.down_weight, self.up_weight)


def delta_pair(r, r_star, kernel):
    """Euclidean distances (recovered vs raw, recovered vs reduced).

    Returns (delta, delta_prime) where delta = ||r* - r||_2 and
    delta_prime = ||r* - r'||_2 with r' the average down/up reduction of
    r (no skip). For average pooling delta_prime <= delta always holds;
    both values are returned so callers can check the slack.
    """
    r = torch.as_tensor(r, dtype=torch.float64)
    r_star = torch.as_tensor(r_star, dtype=torch.float64)
    if r.shape != r_star.shape:
        raise ShapeError(f"shape mismatch {tuple(r.shape)} vs {tuple(r_star.shape)}")
    cfg = ReducerConfig(down_method="avg", up_method="avg", kernel=kernel)
    _, _, h, w = r.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by kernel {kernel}")
    r_prime = dimension_reduce(r, cfg)
    delta = torch.linalg.vector_norm(r_star - r).item()
    delta_prime = torch.linalg.vector_norm(r_star - r_prime).item()
    return delta, delta_prime


def delta_pair_per_image(r, r_star, kernel):
    """Batched delta_pair: per-image (delta, delta_prime) tensors."""
    r = torch.as_tensor(r, dtype=torch.float64)
    r_star = torch.as_tensor(r_star, dtype=torch.float64)
    if r.shape != r_star.shape:
        raise ShapeError(f"shape mismatch {tuple(r.shape)} vs {tuple(r_star.shape)}")
    cfg = ReducerConfig(down_method="avg", up_method="avg", kernel=kernel)
    r_prime = dimension_reduce(r, cfg)
    flat = lambda t: t.reshape(t.shape[0], -1)
    delta = torch.linalg.vector_norm(flat(r_star - r), dim=1)
    delta_prime = torch.linalg.vector_norm(flat(r_star - r_prime), dim=1)
    return delta, delta_prime


def lemma_check(trials, kernels=(2, 4), hw=(28, 28), seed=0, tol=1e-6, chunk=5000):
    """Monte-Carlo sweep of the reduction inequality delta' <= delta.

    Draws ``trials`` random (r, r*) pairs per kernel on ``hw`` maps and
    counts violations beyond ``tol``. Returns a dict with per-kernel
    violation counts and the worst observed excess.
    """
    h, w = hw
    gen = torch.Generator().manual_seed(seed)
    report = {"trials": trials, "tol": tol, "kernels": {}, "violations": 0}
    for k in kernels:
        if h % k or w % k:
            raise ShapeError(f"map {h}x{w} not divisible by kernel {k}")
        violations = 0
        max_excess = -math.inf
        done = 0
        while done < trials:
            n = min(chunk, trials - done)
            r = torch.randn(n, 1, h, w, generator=gen, dtype=torch.float64)
            r_star = torch.randn(n, 1, h, w, generator=gen, dtype=torch.float64)
            delta, delta_prime = delta_pair_per_image(r, r_star, k)
            excess = delta_prime - delta
            violations += int((excess > tol).sum())
            max_excess = max(max_excess, float(excess.max()))
            done += n
        report["kernels"][k] = {"violations": violations, "max_excess": max_excess}
        report["violations"] += violations
    return report
