"""Loss terms for the joint attack/recovery training.

Generator objective: attack term + lambda1 * realism term + lambda2 *
intensity term, evaluated on the clamped adversarial example
x_adv = clamp(x + reduce(gen(x))). The recovery net regresses the
reduced perturbation (its gradients never reach the generator), and the
discriminator gets the usual real/fake log loss.

Squared-norm terms are per-image sums of squares averaged over the
batch, never per-pixel means.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

LOG_CLAMP = 1e-6  # probabilities are kept in [LOG_CLAMP, 1 - LOG_CLAMP] before logs


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 10.0  # realism (discriminator) weight
    lambda2: float = 1.0   # perturbation intensity weight

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass(frozen=True)
class RecoverLossWeights:
    alpha: float = 1.0  # regression term
    beta: float = 0.0   # classification term on the recovered example

    def __post_init__(self):
        if self.alpha == 0 and self.beta == 0:
            raise ConfigError("alpha and beta cannot both be zero")


@dataclass(frozen=True)
class AdvLossMode:
    kind: str = "cw_margin"
    kappa: float = 0.0
    target: int | None = None

    def __post_init__(self):
        if self.kind not in ("cw_margin", "neg_cross_entropy", "targeted_cross_entropy"):
            raise ConfigError(f"unknown attack loss {self.kind!r}")
        if not math.isfinite(self.kappa):
            raise ConfigError("kappa must be finite")
        if self.kind == "targeted_cross_entropy" and self.target is None:
            raise ConfigError("targeted mode needs a target label")


def adv_loss(logits, y, mode=AdvLossMode()):
    """Attack objective on classifier logits; smaller means a stronger attack.

    cw_margin: mean of max(0, z_y - max_{j != y} z_j + kappa).
    """
    if logits.ndim != 2 or logits.shape[0] != y.shape[0]:
        raise ShapeError("logits must be [batch, classes] matching labels")
    num_classes = logits.shape[1]
    if int(y.min()) < 0 or int(y.max()) >= num_classes:
        raise ValueError("label out of range")
    if mode.kind == "neg_cross_entropy":
        return -F.cross_entropy(logits, y)
    if mode.kind == "targeted_cross_entropy":
        tgt = torch.full_like(y, mode.target)
        return F.cross_entropy(logits, tgt)
    one_hot = F.one_hot(y, num_classes).to(logits.dtype)
    true_logit = (logits * one_hot).sum(dim=1)
    best_other = (logits - 1e9 * one_hot).max(dim=1).values
    return torch.clamp(true_logit - best_other + mode.kappa, min=0.0).mean()


def generator_dis_loss(prob_adv_real):
    """mean log(1 - D(x_adv)); the generator minimizes this, pushing D -> 1."""
    p = torch.clamp(prob_adv_real, LOG_CLAMP, 1.0 - LOG_CLAMP)
    return torch.log(1.0 - p).mean()


def generator_mse_loss(perturbation):
    """Mean over the batch of each image's summed squared perturbation."""
    if perturbation.ndim != 4:
        raise ShapeError("perturbation must be rank 4")
    return perturbation.pow(2).sum(dim=(1, 2, 3)).mean()


def generator_loss(x, y, generator, reducer, discriminator, classifier,
                   weights=LossWeights(), mode=AdvLossMode()):
    """Full generator objective. Returns (total, components dict).

    Components are detached floats: adv, dis, mse, total.
    """
    raw = generator(x)
    reduced = reducer(raw)
    x_adv = torch.clamp(x + reduced, 0.0, 1.0)
    adv = adv_loss(classifier(x_adv), y, mode)
    dis = generator_dis_loss(discriminator(x_adv))
    mse = generator_mse_loss(reduced)
    total = adv + weights.lambda1 * dis + weights.lambda2 * mse
    components = {
        "adv": adv.item(),
        "dis": dis.item(),
        "mse": mse.item(),
        "total": total.item(),
    }
    return total, components


def recover_mse_loss(x, x_adv, dr_perturbation, recover):
    """Regression of the reduced perturbation from the adversarial example.

    x_adv and dr_perturbation are treated as constants (detached), so
    gradients flow into the recovery net only.
    """
    if x.shape != x_adv.shape or x.shape != dr_perturbation.shape:
        raise ShapeError("x, x_adv and dr_perturbation must share a shape")
    x_adv = x_adv.detach()
    target = dr_perturbation.detach()
    est = recover(x_adv)
    return (est - target).pow(2).sum(dim=(1, 2, 3)).mean()


def recover_adv_loss(x_adv, y, recover, classifier):
    """Cross-entropy of the recovered example against the true label.

    Small values mean the recovered example is classified correctly
    again: recovered = clamp(x_adv - recover(x_adv), 0, 1).
    """
    x_adv = x_adv.detach()
    recovered = torch.clamp(x_adv - recover(x_adv), 0.0, 1.0)
    return F.cross_entropy(classifier(recovered), y)


def recover_combined_loss(x, x_adv, dr_perturbation, y, recover, classifier,
                          weights=RecoverLossWeights()):
    """alpha * regression + beta * recovered-example classification loss."""
    total = x.new_zeros(())
    if weights.alpha != 0:
        total = total + weights.alpha * recover_mse_loss(x, x_adv, dr_perturbation, recover)
    if weights.beta != 0:
        total = total + weights.beta * recover_adv_loss(x_adv, y, recover, classifier)
    return total


def discriminator_loss(prob_real_clean, prob_real_adv):
    """-(mean log D(x) + mean log(1 - D(x_adv))), minimized by D."""
    p_clean = torch.clamp(prob_real_clean, LOG_CLAMP, 1.0 - LOG_CLAMP)
    p_adv = torch.clamp(prob_real_adv, LOG_CLAMP, 1.0 - LOG_CLAMP)
    return -(torch.log(p_clean).mean() + torch.log(1.0 - p_adv).mean())


def grad_check(loss_fn, params, eps=1e-6, n_samples=30, seed=0, floor=1e-2,
               ref=None):
    """Compare autograd gradients with central finite differences.

    A random subsample of up to ``n_samples`` coordinates per parameter
    tensor is perturbed by +/- h (h = eps scaled by coordinate magnitude)
    and the symmetric difference quotient is compared against the
    analytic gradient. The returned figure is
    max |g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, floor).

    Single-precision difference quotients are dominated by rounding
    noise, so for float32 models pass ``ref=(ref_loss_fn, ref_params)``,
    a float64 twin of the same loss at the same point (for example a
    deep-copied ``.double()`` model); the finite differences then run on
    the twin while the analytic side stays the production gradient.
    """
    params = [p for p in params]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise ValueError("loss is not finite at the evaluation point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    if ref is None:
        ref_fn, ref_params = loss_fn, params
    else:
        ref_fn, ref_params = ref
        ref_params = [p for p in ref_params]
        if len(ref_params) != len(params):
            raise ValueError("reference parameter list does not match")
    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    for p, g, rp in zip(params, grads, ref_params):
        if p.shape != rp.shape:
            raise ValueError("reference parameter shapes do not match")
        flat = rp.detach().view(-1)  # shared storage: writes perturb the twin
        n = flat.numel()
        idx = torch.randperm(n, generator=rng)[: min(n_samples, n)]
        g_flat = torch.zeros_like(p) if g is None else g.detach()
        g_flat = g_flat.reshape(-1)
        for i in idx.tolist():
            orig = flat[i].item()
            h = eps * max(1.0, abs(orig))
            with torch.no_grad():
                flat[i] = orig + h
                loss_plus = float(ref_fn())
                flat[i] = orig - h
                loss_minus = float(ref_fn())
                flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            analytic = float(g_flat[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, rel)
    return worst
