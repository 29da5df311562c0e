"""Metrics, the image-transformation suite, and report/ablation harnesses.

Conventions: PSNR is computed on 8-bit quantized images against MAX=255
(per-image, averaged; a batch with zero total error gets the +inf
sentinel); the L2 column is the mean per-image Euclidean pixel error on
the [0,1] scale. Attack success rates are measured on the subset the
classifier originally got right; plain error rates use the whole split.

Reports materialize adversarial examples through the 8-bit
representation they would be stored in on disk, so in-memory evaluation
agrees exactly with the attack -> recover file pipeline.
"""

import io
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ShapeError
from .data import dequantize_8bit, materialize_8bit, quantize_8bit
from .losses import RecoverLossWeights
from .reducer import ReducerConfig
from .train import train_joint

CSV_HEADER = "method,l2,psnr_db,cer_pct,asr_pct"

TRANSFORM_KINDS = ("none", "gaussian_blur", "jpeg", "center_crop", "flip", "resize")


@dataclass(frozen=True)
class MetricsRow:
    method: str
    l2: float
    psnr_db: float
    cer_pct: float
    asr_pct: float | None = None


@dataclass(frozen=True)
class TransformKind:
    kind: str = "none"
    sigma: float = 2.0        # gaussian_blur
    quality: int = 70         # jpeg
    proportion: float = 0.9   # center_crop
    scale: float = 0.5        # resize

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unsupported transform {self.kind!r}")


def default_transforms():
    return [TransformKind(kind=k) for k in TRANSFORM_KINDS]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a, b):
    """Mean per-image PSNR in dB on the 8-bit scale; +inf when identical.

    Images whose quantized MSE is zero are left out of the mean so the
    result stays finite whenever any pixel differs.
    """
    _check_same_shape(a, b)
    qa = quantize_8bit(a).to(torch.float64)
    qb = quantize_8bit(b).to(torch.float64)
    mse = (qa - qb).pow(2).flatten(1).mean(dim=1)
    nonzero = mse[mse > 0]
    if nonzero.numel() == 0:
        return math.inf
    vals = 10.0 * torch.log10(255.0 ** 2 / nonzero)
    return float(vals.mean())


def l2_error(a, b):
    """Mean per-image Euclidean pixel error on the [0,1] scale."""
    _check_same_shape(a, b)
    diff = (torch.as_tensor(a, dtype=torch.float64)
            - torch.as_tensor(b, dtype=torch.float64))
    return float(diff.flatten(1).norm(dim=1).mean())


def _predictions(classifier, x, batch_size=512):
    preds = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            preds.append(classifier(x[start:start + batch_size]).argmax(dim=1))
    return torch.cat(preds)


def cer(classifier, x, y):
    """Classification error rate in percent."""
    return 100.0 * float((_predictions(classifier, x) != y).sum()) / y.shape[0]


def asr(classifier, x_adv, y):
    """Attack success rate in percent.

    Callers pass the originally-correct subset with its true labels; the
    value is then the fraction of those the attack flips.
    """
    return cer(classifier, x_adv, y)


# --------------------------------------------------------------------------
# transformation suite
# --------------------------------------------------------------------------

def _jpeg_roundtrip(x, quality):
    out = torch.empty_like(x)
    arr = quantize_8bit(x).numpy()
    for i in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            img = Image.fromarray(arr[i, c], mode="L")
            buf = io.BytesIO()
            img.save(buf, format="JPEG", quality=quality)
            buf.seek(0)
            back = np.asarray(Image.open(buf), dtype=np.uint8)
            out[i, c] = dequantize_8bit(torch.from_numpy(back.copy()))
    return out


def apply_transform(x, kind):
    """Deterministic image transformation; output shape equals input shape.

    Crop and resize variants are restored to the original resolution with
    bilinear interpolation so fixed-input classifiers can consume them.
    """
    if x.ndim != 4:
        raise ShapeError("expected rank-4 image batch")
    if kind.kind == "none":
        return x
    if kind.kind == "flip":
        return torch.flip(x, dims=(2, 3))
    if kind.kind == "gaussian_blur":
        blurred = ndimage.gaussian_filter(
            x.numpy(), sigma=(0, 0, kind.sigma, kind.sigma), mode="reflect"
        )
        return torch.from_numpy(blurred)
    if kind.kind == "jpeg":
        return _jpeg_roundtrip(x, kind.quality)
    h, w = x.shape[2], x.shape[3]
    if kind.kind == "center_crop":
        ch = max(1, round(h * kind.proportion))
        cw = max(1, round(w * kind.proportion))
        top = (h - ch) // 2
        left = (w - cw) // 2
        cropped = x[:, :, top:top + ch, left:left + cw]
        return F.interpolate(cropped, size=(h, w), mode="bilinear", align_corners=False)
    if kind.kind == "resize":
        small = F.interpolate(
            x, size=(max(1, int(h * kind.scale)), max(1, int(w * kind.scale))),
            mode="bilinear", align_corners=False,
        )
        return F.interpolate(small, size=(h, w), mode="bilinear", align_corners=False)
    raise ConfigError(f"unsupported transform {kind.kind!r}")


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _batched_map(fn, x, batch_size=256):
    return torch.cat([fn(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])


def materialized_adversarial(bundle, x, batch_size=256):
    """Adversarial examples as they would come back off disk (8-bit)."""
    return materialize_8bit(_batched_map(bundle.adversarial, x, batch_size))


def materialized_recovered(bundle, x_adv, batch_size=256):
    return materialize_8bit(_batched_map(bundle.recovered, x_adv, batch_size))


def recoverability_report(bundle, dataset, batch_size=256):
    """L2 / PSNR / CER rows for the adversarial and recovered test images.

    ASR is reported for the adversarial row, over the subset the frozen
    classifier originally classified correctly.
    """
    y = dataset.labels
    x = materialize_8bit(dataset.images)  # the stored clean reference
    x_adv = materialized_adversarial(bundle, dataset.images, batch_size)
    x_rec = materialized_recovered(bundle, x_adv, batch_size)
    correct = _predictions(bundle.classifier, x) == y
    adv_row = MetricsRow(
        method="adversarial",
        l2=l2_error(x_adv, x),
        psnr_db=psnr(x_adv, x),
        cer_pct=cer(bundle.classifier, x_adv, y),
        asr_pct=asr(bundle.classifier, x_adv[correct], y[correct]),
    )
    rec_row = MetricsRow(
        method="recovered",
        l2=l2_error(x_rec, x),
        psnr_db=psnr(x_rec, x),
        cer_pct=cer(bundle.classifier, x_rec, y),
    )
    return adv_row, rec_row


def clean_row(classifier, dataset):
    """Reference row for the unmodified (stored-representation) split."""
    return MetricsRow(
        method="clean",
        l2=0.0,
        psnr_db=math.inf,
        cer_pct=cer(classifier, materialize_8bit(dataset.images), dataset.labels),
    )


def robustness_report(bundle, dataset, kinds=None, batch_size=256):
    """ASR of the adversarial split after each disturbance, as MetricsRows."""
    kinds = default_transforms() if kinds is None else kinds
    y = dataset.labels
    x = materialize_8bit(dataset.images)
    x_adv = materialized_adversarial(bundle, dataset.images, batch_size)
    correct = _predictions(bundle.classifier, x) == y
    rows = []
    for kind in kinds:
        xt = apply_transform(x_adv, kind)
        rows.append(MetricsRow(
            method=kind.kind,
            l2=l2_error(xt, x),
            psnr_db=psnr(xt, x),
            cer_pct=cer(bundle.classifier, xt, y),
            asr_pct=asr(bundle.classifier, xt[correct], y[correct]),
        ))
    return rows


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.6f}"
    return str(value)


def write_metrics_csv(rows, path):
    """Emit MetricsRows using the fixed `method,l2,psnr_db,cer_pct,asr_pct`
    header, UTF-8, '.' decimals, `inf` sentinel for infinite PSNR."""
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join([
            r.method, _fmt(r.l2), _fmt(r.psnr_db), _fmt(r.cer_pct), _fmt(r.asr_pct),
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def write_table_csv(rows, columns, path):
    """Generic deterministic CSV for the ablation tables."""
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def plot_heatmap(matrix, labels, path, title="transfer ASR (%)"):
    """Render a labelled matrix to a raster image file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matrix = np.asarray(matrix)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(labels), 1.0 + 0.8 * len(labels)))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(labels)), labels, fontsize=8)
    ax.set_xlabel("target model")
    ax.set_ylabel("source model")
    ax.set_title(title)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.0f}", ha="center", va="center",
                    color="white", fontsize=7)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_matrix_csv(matrix, labels, path):
    matrix = np.asarray(matrix)
    lines = ["source," + ",".join(labels)]
    for label, row in zip(labels, matrix):
        lines.append(label + "," + ",".join(f"{v:.6f}" for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# ablation harnesses (reduced-budget trainings; orderings, not magnitudes)
# --------------------------------------------------------------------------

REDUCER_COMBOS = [
    (skip, down, up)
    for skip in (False, True)
    for down in ("avg", "max", "conv")
    for up in ("avg", "max", "conv")
]


def _final(telemetry, key):
    return telemetry[-1][key]


def ablate_reducer(dataset, classifier, spec, base_cfg, combos=None, log=None):
    """Train one model per reducer combination (plus the no-reducer row)
    and tabulate the final generator/recovery loss components.

    Combinations that cannot be built (max up-sample without max
    down-sample) are marked not_conductible; diverging runs are marked
    accordingly instead of aborting the sweep.
    """
    combos = REDUCER_COMBOS if combos is None else combos
    rows = []

    def run(cfg, label_skip, label_down, label_up):
        row = {"skip": label_skip, "down": label_down, "up": label_up,
               "status": "ok", "g_adv": None, "g_mse": None,
               "r_adv": None, "r_mse": None}
        try:
            _, telemetry = train_joint(dataset, classifier, spec, cfg, log=log)
        except RuntimeError:
            row["status"] = "diverged"
            return row
        row.update(g_adv=_final(telemetry, "g_adv"), g_mse=_final(telemetry, "g_mse"),
                   r_adv=_final(telemetry, "r_adv"), r_mse=_final(telemetry, "r_mse"))
        return row

    rows.append(run(replace(base_cfg, reducer=None), "NA", "NA", "NA"))
    for skip, down, up in combos:
        try:
            rcfg = ReducerConfig(down_method=down, up_method=up,
                                 kernel=base_cfg.reducer.kernel if base_cfg.reducer else 2,
                                 skip=skip)
        except ConfigError:
            rows.append({"skip": skip, "down": down, "up": up,
                         "status": "not_conductible", "g_adv": None,
                         "g_mse": None, "r_adv": None, "r_mse": None})
            continue
        rows.append(run(replace(base_cfg, reducer=rcfg), skip, down, up))
    return rows


def ablate_depth(dataset, classifier, spec, base_cfg, pairs, log=None):
    """Recovery losses across (generator depth, recovery depth) pairs."""
    rows = []
    for d_g, d_r in pairs:
        cfg = replace(base_cfg,
                      generator=replace(base_cfg.generator, bottleneck_depth=d_g),
                      recover_depth=d_r)
        _, telemetry = train_joint(dataset, classifier, spec, cfg, log=log)
        rows.append({
            "depth_g": d_g, "depth_r": d_r,
            "depth_diff": d_g - d_r, "total_depth": d_g + d_r,
            "r_mse": _final(telemetry, "r_mse"),
            "r_adv": _final(telemetry, "r_adv"),
        })
    return rows


RECOVER_LOSS_GRID = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (10.0, 1.0), (100.0, 1.0)]


def ablate_recover_loss(dataset, classifier, spec, base_cfg, eval_dataset,
                        grid=None, log=None):
    """PSNR/ACC of adversarial and recovered examples per (alpha, beta)."""
    grid = RECOVER_LOSS_GRID if grid is None else grid
    rows = []
    for alpha, beta in grid:
        cfg = replace(base_cfg, recover_weights=RecoverLossWeights(alpha, beta))
        bundle, _ = train_joint(dataset, classifier, spec, cfg, log=log)
        adv_row, rec_row = recoverability_report(bundle, eval_dataset)
        rows.append({
            "alpha": alpha, "beta": beta,
            "adv_psnr": adv_row.psnr_db, "adv_acc": 100.0 - adv_row.cer_pct,
            "rec_psnr": rec_row.psnr_db, "rec_acc": 100.0 - rec_row.cer_pct,
        })
    return rows


def ablate_perturbation_weight(dataset, classifier, spec, base_cfg, values, log=None):
    """Final intensity/attack losses as the intensity weight grows."""
    rows = []
    for lam2 in values:
        cfg = replace(base_cfg,
                      loss_weights=replace(base_cfg.loss_weights, lambda2=lam2))
        _, telemetry = train_joint(dataset, classifier, spec, cfg, log=log)
        rows.append({
            "lambda2": lam2,
            "g_mse": _final(telemetry, "g_mse"),
            "g_adv": _final(telemetry, "g_adv"),
        })
    return rows
