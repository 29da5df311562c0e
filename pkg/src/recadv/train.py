"""Classifier pretraining, the joint three-player training loop, the
learning-rate schedule, seeding, and checkpoint persistence.

Checkpoint container format (version 1): an 8-byte little-endian length,
a JSON manifest (format version, tensor names/shapes/dtype/offsets,
config snapshot, epoch, RNG digest, payload sha256), then the raw
little-endian float32 tensor payloads in manifest order. Round-trips are
bitwise: save -> load -> forward reproduces the pre-save forward exactly.
"""

import hashlib
import json
import os
import random
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .errors import CheckpointCorruptError, CheckpointVersionError, ConfigError
from .data import batches
import torch.nn.functional as F

from .losses import (AdvLossMode, LossWeights, RecoverLossWeights, adv_loss,
                     discriminator_loss, generator_dis_loss,
                     generator_mse_loss)
from .models import (ClassifierSpec, Discriminator, GeneratorConfig,
                     PerturbationNet, build_classifier,
                     homologous_recover_config)
from .reducer import DimensionReducer, ReducerConfig

FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    base_lr: float = 1e-3
    lr_decay: float = 0.1
    lr_decay_every: int = 50
    batch_size: int = 128
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    reducer: ReducerConfig | None = field(
        default_factory=lambda: ReducerConfig("conv", "avg", kernel=2, skip=True)
    )
    adv_mode: AdvLossMode = field(default_factory=AdvLossMode)
    recover_weights: RecoverLossWeights = field(default_factory=RecoverLossWeights)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    recover_depth: int | None = None  # None -> same depth as the generator

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")


def desk_profile(**overrides):
    """Short training preset: 30 epochs, decay every 10."""
    base = dict(epochs=30, lr_decay_every=10)
    base.update(overrides)
    return TrainConfig(**base)


def set_seed(seed):
    """Seed every stochastic source (init, shuffling, torch ops)."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def lr_schedule(epoch, cfg):
    """base_lr * decay^(epoch // every); piecewise constant, non-increasing."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def _set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def _named_float32(modules):
    """Flatten {module_name: module} into ordered (name, float32 ndarray)."""
    out = []
    for mod_name, module in modules.items():
        for p_name, p in module.state_dict().items():
            arr = p.detach().cpu().numpy()
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
            out.append((f"{mod_name}.{p_name}", arr))
    return out


def _rng_digest():
    return hashlib.sha256(torch.get_rng_state().numpy().tobytes()).hexdigest()


def save_checkpoint(modules, config_snapshot, path, epoch=0):
    """Write all module parameters plus metadata to ``path``.

    ``modules`` maps names (e.g. "generator") to nn.Modules; the config
    snapshot must be JSON-serializable and carry enough to rebuild them.
    """
    tensors = _named_float32(modules)
    payload = b"".join(arr.tobytes() for _, arr in tensors)
    entries = []
    offset = 0
    for name, arr in tensors:
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "config": config_snapshot,
        "epoch": epoch,
        "rng_digest": _rng_digest(),
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)


def load_checkpoint(path):
    """Read a checkpoint, returning (manifest, {name: float32 tensor}).

    Raises CheckpointVersionError on a format mismatch and
    CheckpointCorruptError on truncation or checksum failure.
    """
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) != 8:
            raise CheckpointCorruptError(f"{path}: truncated header")
        (blob_len,) = struct.unpack("<Q", head)
        blob = f.read(blob_len)
        if len(blob) != blob_len:
            raise CheckpointCorruptError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointCorruptError(f"{path}: unreadable manifest: {e}")
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, reader supports {FORMAT_VERSION}"
            )
        payload = f.read()
    expected = sum(t["nbytes"] for t in manifest["tensors"])
    if len(payload) != expected:
        raise CheckpointCorruptError(
            f"{path}: payload is {len(payload)} bytes, manifest says {expected}"
        )
    if hashlib.sha256(payload).hexdigest() != manifest["checksum"]:
        raise CheckpointCorruptError(f"{path}: payload checksum mismatch")
    tensors = {}
    for t in manifest["tensors"]:
        chunk = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").reshape(t["shape"]).copy()
        tensors[t["name"]] = torch.from_numpy(arr)
    return manifest, tensors


def _load_into(module, tensors, prefix):
    state = {
        name[len(prefix) + 1:]: value
        for name, value in tensors.items()
        if name.startswith(prefix + ".")
    }
    module.load_state_dict(state)


def save_classifier(classifier, spec, path, epoch=0, extra=None):
    snapshot = {"kind": "classifier", "spec": spec.to_dict()}
    if extra:
        snapshot.update(extra)
    save_checkpoint({"classifier": classifier}, snapshot, path, epoch=epoch)


def load_classifier(path):
    """Rebuild a frozen classifier from a checkpoint. Returns (model, spec)."""
    manifest, tensors = load_checkpoint(path)
    if manifest["config"].get("kind") != "classifier":
        raise CheckpointCorruptError(f"{path}: not a classifier checkpoint")
    spec = ClassifierSpec.from_dict(manifest["config"]["spec"])
    model = build_classifier(spec)
    _load_into(model, tensors, "classifier")
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, spec


@dataclass
class JointBundle:
    """The five trained parts plus the configs that rebuilt them."""
    generator: PerturbationNet
    reducer: torch.nn.Module
    recover: PerturbationNet
    discriminator: Discriminator
    classifier: torch.nn.Module
    classifier_spec: ClassifierSpec
    train_config: TrainConfig

    def eval(self):
        for m in (self.generator, self.reducer, self.recover,
                  self.discriminator, self.classifier):
            m.eval()
        return self

    def adversarial(self, x):
        """clamp(x + reduce(gen(x)), 0, 1) without building a graph."""
        with torch.no_grad():
            return torch.clamp(x + self.reducer(self.generator(x)), 0.0, 1.0)

    def recovered(self, x_adv):
        """clamp(x_adv - recover(x_adv), 0, 1) without building a graph."""
        with torch.no_grad():
            return torch.clamp(x_adv - self.recover(x_adv), 0.0, 1.0)


class _IdentityReducer(torch.nn.Module):
    # stands in when training without any dimension reduction
    def forward(self, p):
        return p


def _train_config_snapshot(cfg):
    return asdict(cfg)  # nested dataclasses become plain dicts


def _train_config_from_snapshot(snap):
    snap = dict(snap)
    snap["loss_weights"] = LossWeights(**snap["loss_weights"])
    snap["recover_weights"] = RecoverLossWeights(**snap["recover_weights"])
    adv = dict(snap["adv_mode"])
    snap["adv_mode"] = AdvLossMode(**adv)
    snap["reducer"] = ReducerConfig(**snap["reducer"]) if snap["reducer"] else None
    snap["generator"] = GeneratorConfig(**snap["generator"])
    return TrainConfig(**snap)


def save_joint(bundle, path, epoch=0):
    snapshot = {
        "kind": "joint",
        "classifier_spec": bundle.classifier_spec.to_dict(),
        "train": _train_config_snapshot(bundle.train_config),
    }
    modules = {
        "generator": bundle.generator,
        "reducer": bundle.reducer,
        "recover": bundle.recover,
        "discriminator": bundle.discriminator,
        "classifier": bundle.classifier,
    }
    save_checkpoint(modules, snapshot, path, epoch=epoch)


def load_joint(path):
    """Rebuild a trained bundle from a checkpoint."""
    manifest, tensors = load_checkpoint(path)
    if manifest["config"].get("kind") != "joint":
        raise CheckpointCorruptError(f"{path}: not a joint checkpoint")
    spec = ClassifierSpec.from_dict(manifest["config"]["classifier_spec"])
    cfg = _train_config_from_snapshot(manifest["config"]["train"])
    bundle = _build_bundle(build_classifier(spec), spec, cfg)
    _load_into(bundle.generator, tensors, "generator")
    if any(name.startswith("reducer.") for name in tensors):
        _load_into(bundle.reducer, tensors, "reducer")
    _load_into(bundle.recover, tensors, "recover")
    _load_into(bundle.discriminator, tensors, "discriminator")
    _load_into(bundle.classifier, tensors, "classifier")
    for p in bundle.classifier.parameters():
        p.requires_grad_(False)
    return bundle.eval()


def _build_bundle(classifier, spec, cfg):
    channels = spec.input_shape[0]
    generator = PerturbationNet(cfg.generator)
    recover = PerturbationNet(
        homologous_recover_config(cfg.generator, depth=cfg.recover_depth)
    )
    reducer = (DimensionReducer(cfg.reducer, channels)
               if cfg.reducer is not None else _IdentityReducer())
    discriminator = Discriminator(channels, cfg.generator.base_width)
    return JointBundle(generator, reducer, recover, discriminator,
                       classifier, spec, cfg)


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def _check_finite(value, what, epoch):
    if not np.isfinite(value):
        raise RuntimeError(f"{what} diverged (non-finite) at epoch {epoch}")


def train_classifier(dataset, spec, cfg, eval_dataset=None, log=None):
    """Train a classifier with Adam + cross-entropy. Returns (model, telemetry).

    Telemetry rows carry the per-epoch mean loss and, when an eval split
    is given, the test classification error rate in percent.
    """
    set_seed(cfg.seed)
    model = build_classifier(spec)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
    telemetry = []
    for epoch in range(cfg.epochs):
        _set_lr(opt, lr_schedule(epoch, cfg))
        model.train()
        total, count = 0.0, 0
        for x, y in batches(dataset, cfg.batch_size, seed=cfg.seed + epoch):
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(model(x), y)
            loss.backward()
            opt.step()
            total += loss.item() * x.shape[0]
            count += x.shape[0]
        row = {"epoch": epoch, "loss": total / count, "lr": lr_schedule(epoch, cfg)}
        _check_finite(row["loss"], "classifier loss", epoch)
        if eval_dataset is not None:
            row["test_cer"] = classifier_error(model, eval_dataset, cfg.batch_size)
        telemetry.append(row)
        if log:
            log(f"[classifier] epoch {epoch}: " +
                " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "epoch"))
    model.eval()
    return model, telemetry


def classifier_error(model, dataset, batch_size=256):
    """Classification error rate in percent over a dataset."""
    model.eval()
    wrong = 0
    with torch.no_grad():
        for x, y in batches(dataset, batch_size, shuffle=False):
            wrong += int((model(x).argmax(dim=1) != y).sum())
    return 100.0 * wrong / len(dataset)


def train_joint(dataset, classifier, classifier_spec, cfg, log=None):
    """Joint loop: per batch, discriminator step, generator(+reducer) step,
    then recovery step with gradients stopped at the adversarial example.

    The classifier stays frozen; passing one with trainable parameters is
    a config error. Returns (bundle, telemetry) where telemetry rows hold
    the epoch means of every loss component.
    """
    if any(p.requires_grad for p in classifier.parameters()):
        raise ConfigError("classifier must be frozen before joint training")
    classifier.eval()
    set_seed(cfg.seed)
    bundle = _build_bundle(classifier, classifier_spec, cfg)

    g_params = list(bundle.generator.parameters()) + list(bundle.reducer.parameters())
    opt_g = torch.optim.Adam(g_params, lr=cfg.base_lr)
    opt_d = torch.optim.Adam(bundle.discriminator.parameters(), lr=cfg.base_lr)
    opt_r = torch.optim.Adam(bundle.recover.parameters(), lr=cfg.base_lr)

    w = cfg.loss_weights
    rw = cfg.recover_weights
    telemetry = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        for opt in (opt_g, opt_d, opt_r):
            _set_lr(opt, lr)
        sums = {k: 0.0 for k in ("g_adv", "g_dis", "g_mse", "g_total", "d_loss",
                                 "r_mse", "r_adv", "d_real", "d_fake")}
        count = 0
        for x, y in batches(dataset, cfg.batch_size, seed=cfg.seed + epoch):
            raw = bundle.generator(x)
            reduced = bundle.reducer(raw)
            x_adv = torch.clamp(x + reduced, 0.0, 1.0)

            # 1) discriminator
            opt_d.zero_grad()
            p_real = bundle.discriminator(x)
            p_fake = bundle.discriminator(x_adv.detach())
            d_loss = discriminator_loss(p_real, p_fake)
            d_loss.backward()
            opt_d.step()

            # 2) generator (+ reducer weights), against the updated discriminator
            opt_g.zero_grad()
            g_adv = adv_loss(bundle.classifier(x_adv), y, cfg.adv_mode)
            g_dis = generator_dis_loss(bundle.discriminator(x_adv))
            g_mse = generator_mse_loss(reduced)
            g_total = g_adv + w.lambda1 * g_dis + w.lambda2 * g_mse
            g_total.backward()
            opt_g.step()

            # 3) recovery, gradients stopped at x_adv / the reduced perturbation.
            # The regression target is the effective (post-clamp) perturbation
            # x_adv - x: the quantity whose residual IS the recovered-example
            # error, and identical to the reducer output wherever no clipping
            # occurred.
            opt_r.zero_grad()
            x_adv_const = x_adv.detach()
            estimate = bundle.recover(x_adv_const)
            r_mse = (estimate - (x_adv_const - x)).pow(2).sum(dim=(1, 2, 3)).mean()
            if rw.beta != 0:
                recovered = torch.clamp(x_adv_const - estimate, 0.0, 1.0)
                r_adv = F.cross_entropy(bundle.classifier(recovered), y)
            else:
                # tracked for telemetry only; keep it out of the graph
                with torch.no_grad():
                    recovered = torch.clamp(x_adv_const - estimate, 0.0, 1.0)
                    r_adv = F.cross_entropy(bundle.classifier(recovered), y)
            r_total = x.new_zeros(())
            if rw.alpha != 0:
                r_total = r_total + rw.alpha * r_mse
            if rw.beta != 0:
                r_total = r_total + rw.beta * r_adv
            r_total.backward()
            opt_r.step()

            n = x.shape[0]
            count += n
            for key, val in (("g_adv", g_adv), ("g_dis", g_dis), ("g_mse", g_mse),
                             ("g_total", g_total), ("d_loss", d_loss),
                             ("r_mse", r_mse), ("r_adv", r_adv),
                             ("d_real", p_real.mean()), ("d_fake", p_fake.mean())):
                sums[key] += val.item() * n

        row = {"epoch": epoch, "lr": lr}
        row.update({k: v / count for k, v in sums.items()})
        _check_finite(row["g_total"], "generator loss", epoch)
        _check_finite(row["d_loss"], "discriminator loss", epoch)
        _check_finite(row["r_mse"], "recovery loss", epoch)
        telemetry.append(row)
        if log:
            log(f"[joint] epoch {epoch}: " +
                " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch"))
    return bundle.eval(), telemetry
