"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest -s tests/test_acceptance.py` to see the lines live. The
expensive artifacts (clean classifier, the desk-profile joint model, the
matched-budget pair, the ablation grid, the classifier zoo) are built
once per session by module fixtures; the full suite is a long run
(roughly 1.5 to 2 hours on a 2-core desktop-class machine).
"""

import math
import time

import pytest
import torch

from helpers import double_twin
from recadv.attacks import AttackConfig, family_transfer_means, fgsm, pgd, \
    transfer_matrix
from recadv.data import load_mnist
from recadv.evaluate import (TransformKind, ablate_recover_loss, clean_row,
                             psnr, recoverability_report, robustness_report,
                             write_metrics_csv)
from recadv.losses import (AdvLossMode, LossWeights, RecoverLossWeights,
                           adv_loss, discriminator_loss, generator_dis_loss,
                           generator_loss, generator_mse_loss, grad_check,
                           recover_adv_loss, recover_combined_loss,
                           recover_mse_loss)
from recadv.models import ClassifierSpec
from recadv.reducer import ReducerConfig, lemma_check
from recadv.train import (TrainConfig, desk_profile, load_joint, save_joint,
                          train_classifier, train_joint)

from conftest import MNIST_DIR
from test_attacks import LogisticPair

# -- shared acceptance settings ------------------------------------------------

CLEAN_SEED = 7
DESK_SEED = 0
DESK_TRAIN = 32768
DESK_WEIGHTS = LossWeights(lambda1=10.0, lambda2=0.3)
DESK_MODE = AdvLossMode(kind="cw_margin", kappa=20.0)
DESK_REDUCER = ReducerConfig("conv", "avg", kernel=2, skip=True)

PAIR_EPOCHS = 8
PAIR_TRAIN = 8192
ABLATE_EPOCHS = 3
ABLATE_TRAIN = 4096
ZOO_EPOCHS = 3
ZOO_TRAIN = 20000
ZOO_SEED = 100


def report(number, ok, detail):
    line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(f"\n{line}", flush=True)
    return ok


@pytest.fixture(scope="module")
def mnist():
    return load_mnist(MNIST_DIR, "train"), load_mnist(MNIST_DIR, "test")


@pytest.fixture(scope="module")
def clean_classifier(mnist):
    train, test = mnist
    t0 = time.time()
    model, telemetry = train_classifier(
        train, ClassifierSpec(),
        TrainConfig(epochs=8, batch_size=128, seed=CLEAN_SEED, lr_decay_every=4),
        eval_dataset=test,
    )
    for p in model.parameters():
        p.requires_grad_(False)
    return model, ClassifierSpec(), telemetry[-1]["test_cer"], time.time() - t0


@pytest.fixture(scope="module")
def desk_bundle(mnist, clean_classifier):
    train, _ = mnist
    model, spec, _, _ = clean_classifier
    cfg = desk_profile(batch_size=128, seed=DESK_SEED,
                       loss_weights=DESK_WEIGHTS, adv_mode=DESK_MODE,
                       reducer=DESK_REDUCER)
    t0 = time.time()
    bundle, telemetry = train_joint(train.subset(DESK_TRAIN), model, spec, cfg)
    return bundle, telemetry, time.time() - t0


# -- criterion 1: reduction inequality sweep -------------------------------------

def test_criterion_1_lemma_sweep():
    t0 = time.time()
    result = lemma_check(100000, kernels=(2, 4), hw=(28, 28), seed=123, tol=1e-6)
    elapsed = time.time() - t0
    ok = result["violations"] == 0 and elapsed < 60.0
    assert report(1, ok,
                  f"{result['trials']} trials x kernels (2,4): "
                  f"{result['violations']} violations, worst excess "
                  f"{max(k['max_excess'] for k in result['kernels'].values()):.2e}, "
                  f"{elapsed:.1f}s")


# -- criterion 2: gradient checks for every loss ----------------------------------

def _loss_suite(dtype_double=False):
    """(name, loss_fn, params, ref) triples at a smooth operating point."""
    from helpers import smooth_point
    gen, rec, red, dis, clf, x, y = smooth_point(seed=42)
    if dtype_double:
        gen, rec, red, dis, clf, x = double_twin(gen, rec, red, dis, clf, x)
        gen64 = red64 = dis64 = clf64 = rec64 = None
    else:
        gen64, rec64, red64, dis64, clf64, x64 = double_twin(gen, rec, red,
                                                             dis, clf, x)
    with torch.no_grad():
        q = red(gen(x))
        x_adv = torch.clamp(x + q, 0, 1)
    if not dtype_double:
        q64, x_adv64 = q.double(), x_adv.double()

    gen_params = list(gen.parameters()) + list(red.parameters())
    cw = AdvLossMode(kind="cw_margin", kappa=5.0)
    neg = AdvLossMode(kind="neg_cross_entropy")
    tgt = AdvLossMode(kind="targeted_cross_entropy", target=3)

    def entry(name, fn32, params, fn64, params64):
        if dtype_double:
            return (name, fn32, params, None)
        return (name, fn32, params, (fn64, params64))

    def g_adv(g, r, c, xx, mode):
        return lambda: adv_loss(c(torch.clamp(xx + r(g(xx)), 0, 1)), y, mode)

    def g_dis(g, r, d, xx):
        return lambda: generator_dis_loss(d(torch.clamp(xx + r(g(xx)), 0, 1)))

    def g_mse(g, r, xx):
        return lambda: generator_mse_loss(r(g(xx)))

    def g_total(g, r, d, c, xx):
        return lambda: generator_loss(xx, y, g, r, d, c,
                                      weights=DESK_WEIGHTS, mode=cw)[0]

    def r_mse(rr, xx, xa, qq):
        return lambda: recover_mse_loss(xx, xa, qq, rr)

    def r_adv(rr, c, xa):
        return lambda: recover_adv_loss(xa, y, rr, c)

    def r_comb(rr, c, xx, xa, qq):
        return lambda: recover_combined_loss(
            xx, xa, qq, y, rr, c, RecoverLossWeights(10.0, 1.0))

    def d_loss(d, xx, xa):
        return lambda: discriminator_loss(d(xx), d(xa))

    if dtype_double:
        suite = [
            ("adv_cw", g_adv(gen, red, clf, x, cw), gen_params, None),
            ("adv_neg_ce", g_adv(gen, red, clf, x, neg), gen_params, None),
            ("adv_targeted", g_adv(gen, red, clf, x, tgt), gen_params, None),
            ("dis", g_dis(gen, red, dis, x), gen_params, None),
            ("mse", g_mse(gen, red, x), gen_params, None),
            ("generator_total", g_total(gen, red, dis, clf, x), gen_params, None),
            ("recover_mse", r_mse(rec, x, x_adv, q), list(rec.parameters()), None),
            ("recover_adv", r_adv(rec, clf, x_adv), list(rec.parameters()), None),
            ("recover_combined", r_comb(rec, clf, x, x_adv, q),
             list(rec.parameters()), None),
            ("discriminator", d_loss(dis, x, x_adv), list(dis.parameters()), None),
        ]
    else:
        gen64_params = list(gen64.parameters()) + list(red64.parameters())
        suite = [
            ("adv_cw", g_adv(gen, red, clf, x, cw), gen_params,
             (g_adv(gen64, red64, clf64, x64, cw), gen64_params)),
            ("adv_neg_ce", g_adv(gen, red, clf, x, neg), gen_params,
             (g_adv(gen64, red64, clf64, x64, neg), gen64_params)),
            ("adv_targeted", g_adv(gen, red, clf, x, tgt), gen_params,
             (g_adv(gen64, red64, clf64, x64, tgt), gen64_params)),
            ("dis", g_dis(gen, red, dis, x), gen_params,
             (g_dis(gen64, red64, dis64, x64), gen64_params)),
            ("mse", g_mse(gen, red, x), gen_params,
             (g_mse(gen64, red64, x64), gen64_params)),
            ("generator_total", g_total(gen, red, dis, clf, x), gen_params,
             (g_total(gen64, red64, dis64, clf64, x64), gen64_params)),
            ("recover_mse", r_mse(rec, x, x_adv, q), list(rec.parameters()),
             (r_mse(rec64, x64, x_adv64, q64), list(rec64.parameters()))),
            ("recover_adv", r_adv(rec, clf, x_adv), list(rec.parameters()),
             (r_adv(rec64, clf64, x_adv64), list(rec64.parameters()))),
            ("recover_combined", r_comb(rec, clf, x, x_adv, q),
             list(rec.parameters()),
             (r_comb(rec64, clf64, x64, x_adv64, q64), list(rec64.parameters()))),
            ("discriminator", d_loss(dis, x, x_adv), list(dis.parameters()),
             (d_loss(dis64, x64, x_adv64), list(dis64.parameters()))),
        ]
    return suite


def test_criterion_2_gradient_checks():
    t0 = time.time()
    worst = {}
    for name, fn, params, ref in _loss_suite(dtype_double=False):
        worst[name] = grad_check(fn, params, n_samples=5, seed=11, ref=ref)
    single_ok = all(v < 1e-3 for v in worst.values())
    worst64 = {}
    for name, fn, params, _ in _loss_suite(dtype_double=True):
        worst64[name] = grad_check(fn, params, n_samples=5, seed=11)
    double_ok = all(v < 1e-6 for v in worst64.values())
    elapsed = time.time() - t0
    ok = single_ok and double_ok and elapsed < 300.0
    detail = (f"fp32 worst {max(worst.values()):.2e} "
              f"({max(worst, key=worst.get)}), fp64 worst "
              f"{max(worst64.values()):.2e}, {elapsed:.0f}s")
    assert report(2, ok, detail)


# -- criterion 3: closed-form attack oracle ----------------------------------------

def test_criterion_3_fgsm_oracle():
    torch.manual_seed(3)
    w = torch.randn(16)
    model = LogisticPair(w, b=-0.2)
    x = torch.rand(8, 1, 4, 4) * 0.6 + 0.2
    y = torch.tensor([0, 1] * 4)
    eps = 8.0 / 255.0
    with torch.no_grad():
        z1 = x.flatten(1) @ w - 0.2
        coeff = torch.sign(torch.sigmoid(z1) - y.float()).reshape(-1, 1)
        step = eps * (coeff * torch.sign(w).reshape(1, -1)).reshape(x.shape)
        expected = torch.clamp(x + step, 0.0, 1.0)
    got_fgsm = fgsm(x, y, model, eps)
    got_pgd = pgd(x, y, model, AttackConfig(epsilon=eps, steps=1,
                                            step_size=eps, random_start=False))
    exact = torch.equal(got_fgsm, expected)
    bitwise = torch.equal(got_fgsm, got_pgd)
    assert report(3, exact and bitwise,
                  f"closed-form match: {exact}, pgd(1)==fgsm bitwise: {bitwise}")


# -- criterion 4: clean classifier -------------------------------------------------

def test_criterion_4_clean_classifier(clean_classifier):
    _, _, test_cer, elapsed = clean_classifier
    ok = test_cer <= 1.5 and elapsed < 900.0
    assert report(4, ok, f"LeNet-5 test CER {test_cer:.2f}% "
                         f"(target <= 1.5%), trained in {elapsed:.0f}s")


# -- criterion 5: end-to-end desk-profile run ---------------------------------------

def test_criterion_5_end_to_end(mnist, clean_classifier, desk_bundle):
    _, test = mnist
    bundle, _, train_seconds = desk_bundle
    adv_row, rec_row = recoverability_report(bundle, test)
    clean = clean_row(bundle.classifier, test)
    checks = {
        "ASR >= 85": adv_row.asr_pct >= 85.0,
        "recovered PSNR >= 30": rec_row.psnr_db >= 30.0,
        "recovered L2 <= 1.0": rec_row.l2 <= 1.0,
        "recovered CER <= clean + 1.0": rec_row.cer_pct <= clean.cer_pct + 1.0,
        "runtime <= 2h": train_seconds <= 7200.0,
    }
    detail = (f"ASR {adv_row.asr_pct:.1f}%, recovered PSNR {rec_row.psnr_db:.2f} dB, "
              f"L2 {rec_row.l2:.3f}, CER {rec_row.cer_pct:.2f}% vs clean "
              f"{clean.cer_pct:.2f}%, train {train_seconds/60:.0f} min")
    failed = [k for k, v in checks.items() if not v]
    assert report(5, not failed, detail + (f"; failed: {failed}" if failed else ""))


# -- criterion 6: reducer improves JPEG robustness -----------------------------------

@pytest.fixture(scope="module")
def matched_pair(mnist, clean_classifier):
    train, _ = mnist
    model, spec, _, _ = clean_classifier
    bundles = {}
    for name, reducer in (("with_dr", DESK_REDUCER), ("no_dr", None)):
        cfg = TrainConfig(epochs=PAIR_EPOCHS, lr_decay_every=4, batch_size=128,
                          seed=DESK_SEED, loss_weights=DESK_WEIGHTS,
                          adv_mode=DESK_MODE, reducer=reducer)
        bundles[name], _ = train_joint(train.subset(PAIR_TRAIN), model, spec, cfg)
    return bundles


def test_criterion_6_reducer_jpeg_robustness(mnist, matched_pair):
    _, test = mnist
    eval_set = test.subset(2000)
    jpeg = [TransformKind("jpeg")]
    asr_dr = robustness_report(matched_pair["with_dr"], eval_set, jpeg)[0].asr_pct
    asr_na = robustness_report(matched_pair["no_dr"], eval_set, jpeg)[0].asr_pct
    ok = asr_dr >= asr_na
    assert report(6, ok, f"JPEG(70) ASR with reducer {asr_dr:.1f}% vs "
                         f"without {asr_na:.1f}% (matched budget)")


# -- criterion 7: recovery-loss ablation ordering ------------------------------------

def test_criterion_7_recover_loss_ordering(mnist, clean_classifier):
    train, test = mnist
    model, spec, _, _ = clean_classifier
    base = TrainConfig(epochs=ABLATE_EPOCHS, batch_size=128, seed=DESK_SEED,
                       loss_weights=DESK_WEIGHTS, adv_mode=DESK_MODE,
                       reducer=DESK_REDUCER)
    rows = ablate_recover_loss(train.subset(ABLATE_TRAIN), model, spec, base,
                               test.subset(1000))
    best = max(rows, key=lambda r: r["rec_psnr"])
    ok = (best["alpha"], best["beta"]) == (1.0, 0.0)
    table = ", ".join(f"({r['alpha']:g},{r['beta']:g})={r['rec_psnr']:.1f}dB"
                      for r in rows)
    assert report(7, ok, f"recovered PSNR by (alpha,beta): {table}")


# -- criterion 8: within-family transfer dominance -----------------------------------

def test_criterion_8_transferability(mnist):
    train, test = mnist
    zoo, families = [], []
    for arch in ("convnet", "mlp", "resnetlite"):
        for depth in (2, 4):
            spec = ClassifierSpec(arch=arch, depth=depth)
            model, _ = train_classifier(
                train.subset(ZOO_TRAIN), spec,
                TrainConfig(epochs=ZOO_EPOCHS, batch_size=128, seed=ZOO_SEED))
            for p in model.parameters():
                p.requires_grad_(False)
            zoo.append(model)
            families.append(arch)
    matrix = transfer_matrix(
        zoo, lambda x, y, m: fgsm(x, y, m, 8.0 / 255.0), test.subset(2000))
    within, cross = family_transfer_means(matrix, families)
    ok = within > cross
    assert report(8, ok, f"mean transfer ASR within family {within:.2f}% "
                         f"> cross family {cross:.2f}%: {ok}")


# -- criterion 9: infrastructure ------------------------------------------------------

def test_criterion_9_infrastructure(mnist, desk_bundle, tmp_path):
    _, test = mnist
    bundle, _, _ = desk_bundle
    probe = test.images[:16]
    adv_before = bundle.adversarial(probe)
    rec_before = bundle.recovered(adv_before)
    path = str(tmp_path / "desk.ckpt")
    save_joint(bundle, path)
    loaded = load_joint(path)
    roundtrip = (torch.equal(loaded.adversarial(probe), adv_before)
                 and torch.equal(loaded.recovered(adv_before), rec_before))

    eval_set = test.subset(500)
    rows_a = recoverability_report(bundle, eval_set)
    rows_b = recoverability_report(loaded, eval_set)
    csv_a, csv_b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(list(rows_a), str(csv_a))
    write_metrics_csv(list(rows_b), str(csv_b))
    reproducible = csv_a.read_bytes() == csv_b.read_bytes()
    assert report(9, roundtrip and reproducible,
                  f"checkpoint forward round-trip bitwise: {roundtrip}, "
                  f"CSV byte-identical across runs: {reproducible}")


# -- telemetry observations from the desk run (paper-style sanity checks) --------

def test_discriminator_separates_early(desk_bundle):
    _, telemetry, _ = desk_bundle
    early = telemetry[1:4]
    ok = all(row["d_real"] > row["d_fake"] for row in early)
    assert ok, "discriminator should score clean above adversarial early on"


def test_recovery_loss_improves_over_training(desk_bundle):
    _, telemetry, _ = desk_bundle
    assert telemetry[-1]["r_mse"] < telemetry[0]["r_mse"]
