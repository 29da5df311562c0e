"""Shared test utilities: tiny model parts and float64 loss twins."""

import copy

import torch
import torch.nn as nn

from recadv.losses import AdvLossMode, LossWeights
from recadv.models import Discriminator, GeneratorConfig, PerturbationNet, RecoverConfig
from recadv.reducer import DimensionReducer, ReducerConfig
from recadv.train import set_seed


def double_twin(*modules_and_tensors):
    """float64 deep copies, preserving parameter order and values."""
    out = []
    for item in modules_and_tensors:
        if isinstance(item, nn.Module):
            out.append(copy.deepcopy(item).double())
        else:
            out.append(item.detach().double())
    return out


def smooth_point(seed=0, hw=16, out_bound=0.1, batch=4):
    """Tiny model parts at an operating point away from clamp/kink regions.

    Pixels sit in [0.3, 0.7] and the generator bound keeps x + perturbation
    inside (0, 1), so the composed losses are differentiable where the
    finite-difference probe lands.
    """
    set_seed(seed)
    gen = PerturbationNet(GeneratorConfig(base_width=4, bottleneck_depth=1,
                                          out_bound=out_bound))
    rec = PerturbationNet(RecoverConfig(base_width=4, bottleneck_depth=1,
                                        out_bound=2 * out_bound))
    red = DimensionReducer(ReducerConfig("conv", "avg", 2, skip=True), 1)
    dis = Discriminator(1, base_width=4)
    clf = nn.Sequential(nn.Flatten(), nn.Linear(hw * hw, 10))
    x = torch.rand(batch, 1, hw, hw) * 0.4 + 0.3
    y = torch.randint(0, 10, (batch,))
    return gen, rec, red, dis, clf, x, y


def attack_mode(kappa=5.0):
    # nonzero margin keeps the hinge active so its gradient is not trivially 0
    return AdvLossMode(kind="cw_margin", kappa=kappa)


DEFAULT_WEIGHTS = LossWeights(10.0, 1.0)
