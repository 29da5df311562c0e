"""Gradient-sign baseline attacks and the cross-model transfer matrix."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .data import batches


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8.0 / 255.0  # L-inf budget on the [0,1] pixel scale
    steps: int = 1
    step_size: float = 0.0  # 0 means "use epsilon"
    random_start: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in [0, 1]")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.step_size == 0.0:
            object.__setattr__(self, "step_size", self.epsilon)


def _grad_sign_step(x_cur, x, y, classifier, step_size, epsilon):
    """One signed-gradient ascent step followed by ball projection and clamp.

    torch.sign maps zero gradients to zero, so untouched pixels stay put.
    """
    x_cur = x_cur.detach().requires_grad_(True)
    loss = F.cross_entropy(classifier(x_cur), y)
    (grad,) = torch.autograd.grad(loss, x_cur)
    stepped = x_cur.detach() + step_size * torch.sign(grad)
    projected = torch.clamp(stepped, x - epsilon, x + epsilon)
    return torch.clamp(projected, 0.0, 1.0)


def pgd(x, y, classifier, cfg):
    """Iterative signed-gradient attack with L-inf projection each step."""
    if x.shape[0] != y.shape[0]:
        raise ShapeError("images and labels disagree on batch size")
    x = x.detach()
    x_adv = x
    if cfg.random_start:
        noise = torch.empty_like(x).uniform_(-cfg.epsilon, cfg.epsilon)
        x_adv = torch.clamp(x + noise, 0.0, 1.0)
    for _ in range(cfg.steps):
        x_adv = _grad_sign_step(x_adv, x, y, classifier, cfg.step_size, cfg.epsilon)
    return x_adv


def fgsm(x, y, classifier, epsilon):
    """Single signed-gradient step: clamp(x + eps * sign(grad CE), 0, 1).

    Identical (bitwise) to pgd with steps=1, step_size=epsilon and no
    random start, of which it is the degenerate case.
    """
    return pgd(x, y, classifier, AttackConfig(epsilon=epsilon, steps=1,
                                              step_size=epsilon, random_start=False))


def attack_success_rate(classifier, x_adv, y):
    """Percent of adversarial examples the classifier gets wrong."""
    with torch.no_grad():
        pred = classifier(x_adv).argmax(dim=1)
    return 100.0 * float((pred != y).sum()) / y.shape[0]


def transfer_matrix(zoo, attack_fn, dataset, batch_size=256):
    """ASR of examples crafted on model i (row) against model j (column).

    Evaluated over the full provided split, so a zero-budget attack
    degenerates to each column model's plain error rate. ``attack_fn``
    maps (x, y, classifier) to adversarial examples.
    """
    n = len(zoo)
    wrong = np.zeros((n, n), dtype=np.int64)
    total = 0
    probe = dataset.images[:1]
    with torch.no_grad():
        widths = {tuple(m(probe).shape) for m in zoo}
    if len(widths) != 1:
        raise ShapeError(f"zoo models disagree on output shape: {sorted(widths)}")
    for x, y in batches(dataset, batch_size, shuffle=False):
        total += x.shape[0]
        for i, source in enumerate(zoo):
            x_adv = attack_fn(x, y, source)
            with torch.no_grad():
                for j, target in enumerate(zoo):
                    pred = target(x_adv).argmax(dim=1)
                    wrong[i, j] += int((pred != y).sum())
    return 100.0 * wrong / total


def family_transfer_means(matrix, families):
    """(within-family mean, cross-family mean) over off-diagonal entries.

    ``families`` labels each zoo model; the diagonal (white-box) entries
    are excluded so the comparison is about transfer only.
    """
    matrix = np.asarray(matrix)
    within, cross = [], []
    n = matrix.shape[0]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            (within if families[i] == families[j] else cross).append(matrix[i, j])
    return float(np.mean(within)), float(np.mean(cross))
