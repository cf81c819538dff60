"""Acceptance criteria, one PASS/FAIL line each (collected in the terminal summary)."""
import math

import numpy as np
import pytest

import conftest
from conftest import mnist_dir, random_mlp_instance, requires_mnist
from sgrlab.attacks import deepfool_rho, fgm, fgsm, lrc_covariance, lrc_sample, pgd, rand_noise
from sgrlab.autodiff import Tensor, grad
from sgrlab.cli import main
from sgrlab.covariance import (CovEstimator, batch_second_moment, dataset_diag_constant, radial_estimate,
                               scale_factor)
from sgrlab.data import load_mnist, prepare, standardize
from sgrlab.evaluation import whitebox_value
from sgrlab.models import MLP, LinearSoftmax, cross_entropy, input_log_prob_grad, log_probs
from sgrlab.regularizers import gn_omega, onelayer_closed_form, sgr_omega, sgr_omega_logit
from sgrlab.training import TrainConfig, train

N_INSTANCES = 50


def report(tag, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {tag}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


# -- 1. algebraic identities ---------------------------------------------------

def test_c1_identity_suite():
    worst_gn = worst_logit = worst_cf = 0.0
    for seed in range(N_INSTANCES):
        model, x, y, S = random_mlp_instance(1000 + seed)
        d = x.shape[1]
        worst_gn = max(worst_gn, abs(sgr_omega(model, x, y, np.eye(d)).item() - gn_omega(model, x, y).item()))
        a = sgr_omega(model, x, y, S).item()
        b = sgr_omega_logit(model, x, y, S).item()
        worst_logit = max(worst_logit, abs(a - b) / (1 + abs(a)))

        r = np.random.default_rng(seed)
        k = int(r.integers(2, 6))
        lin = LinearSoftmax(d, k, seed=seed, biases=r.normal(size=k))
        yk = r.integers(0, k, len(x))
        om, dW, db = onelayer_closed_form(lin, x, yk, S, sigma=0.9, with_grad=True)
        auto = sgr_omega(lin, x, yk, S, sigma=0.9)
        gW, gb = grad(auto, [lin.params["W"], lin.params["b"]])
        worst_cf = max(worst_cf, abs(om - auto.item()), np.abs(gW.data - dW).max(), np.abs(gb.data - db).max())
    ok = [report("1a identity cov equals GN", worst_gn <= 1e-12, f"max |diff| {worst_gn:.2e} (tol 1e-12)"),
          report("1b logit form", worst_logit <= 1e-8, f"max |diff|/(1+|omega|) {worst_logit:.2e} (tol 1e-8)"),
          report("1c one-layer closed form", worst_cf <= 1e-10, f"max |diff| value/grad {worst_cf:.2e} (tol 1e-10)")]
    assert all(ok)


# -- 2. gradient correctness ---------------------------------------------------

def _rel(a, n):
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)


def test_c2_gradient_correctness():
    r = np.random.default_rng(2)
    d = 30
    model = MLP([d, 12, 5], seed=4)
    x, y = r.normal(size=(8, d)), r.integers(0, 5, 8)
    A = r.normal(size=(d, d))
    S = A @ A.T / d
    lam, h = 0.8, 1e-5

    def objective():
        return cross_entropy(model, x, y) + sgr_omega(model, x, y, S, sigma=1.1) * lam

    worst = 0.0
    params = model.parameters()
    analytic = [g.data for g in grad(objective(), params)]
    for p, ga in zip(params, analytic):
        base = p.data.copy()
        num = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            for s in (1, -1):
                w = base.copy()
                w[idx] += s * h
                p.data = w
                num[idx] += s * objective().item() / (2 * h)
        p.data = base
        worst = max(worst, _rel(ga, num).max())
    ok1 = report("2a FD of CE + lambda*Omega", worst < 1e-4, f"max rel err {worst:.2e} (tol 1e-4)")

    # mixed derivative: d/dW0 of the input gradient, contracted with a fixed direction
    v = r.normal(size=x.shape)
    W = model.params["W0"]

    def inner():
        return (input_log_prob_grad(model, Tensor(x, requires_grad=True), y, create_graph=True) * v).sum()

    mixed = grad(inner(), W).data
    base = W.data.copy()
    num = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        for s in (1, -1):
            w = base.copy()
            w[idx] += s * h
            W.data = w
            num[idx] += s * inner().item() / (2 * h)
    W.data = base
    err = _rel(mixed, num).max()
    ok2 = report("2b double-backprop mixed derivative", err < 1e-4, f"max rel err {err:.2e} (tol 1e-4)")
    assert ok1 and ok2


# -- 3. covariance machinery ---------------------------------------------------

def test_c3_covariance_machinery():
    r = np.random.default_rng(3)
    g = (6, 6, 1)
    xi = r.normal(size=(9, 36))
    S = xi.T @ xi / len(xi)
    rc = radial_estimate(xi, g)
    bins = {}
    for a in range(36):
        for b in range(36):
            bins.setdefault(int(np.rint(math.hypot(a // 6 - b // 6, a % 6 - b % 6))), []).append(S[a, b])
    worst = max(abs(rc.values[0, 0, dist] - np.mean(vals)) for dist, vals in bins.items())
    ok_a = report("3a radial equals bin average (6x6)", worst < 1e-13, f"max |diff| {worst:.2e}")

    beta = 0.1
    est = CovEstimator(beta=beta)
    batches = [r.normal(size=(5, 7)) for _ in range(6)]
    for b in batches:
        est.update(b)
    Bs = [b.T @ b / len(b) for b in batches]
    T = len(Bs)
    closed = (1 - beta) ** (T - 1) * Bs[0] + sum(beta * (1 - beta) ** (T - 1 - t) * Bs[t] for t in range(1, T))
    e_ewma = np.abs(est.estimate.matrix - closed).max()
    ok_b = report("3b EWMA closed form", e_ewma < 1e-14, f"max |diff| {e_ewma:.2e}")

    c = dataset_diag_constant(r.uniform(size=(20, 6, 6, 1)))
    sigma = scale_factor(est.estimate, c)
    e_sig = abs(sigma * est.estimate.avg_diag() - c) / c
    ok_c = report("3c sigma * avg-diag = c", e_sig < 1e-15, f"rel diff {e_sig:.2e}")

    worst_sum = 0.0
    for seed in range(10):
        model, x, _, _ = random_mlp_instance(500 + seed)
        k = model.num_classes
        p = np.exp(log_probs(model, x).data)
        total = sum(p[:, [j]] * input_log_prob_grad(model, x, np.full(len(x), j)).data for j in range(k))
        worst_sum = max(worst_sum, np.abs(total).max())
    ok_d = report("3d sum_y grad_x phi_y = 0", worst_sum < 1e-10, f"max |sum| {worst_sum:.2e} (tol 1e-10)")
    assert ok_a and ok_b and ok_c and ok_d


# -- 4. LRC sampler -----------------------------------------------------------

def test_c4_lrc_sampler_fidelity():
    g, zeta, n = (16, 16, 1), 4.0, 10_000
    s = lrc_sample(g, zeta, np.random.default_rng(4), n).reshape(n, -1)
    emp = batch_second_moment(s).matrix
    target = lrc_covariance(g, zeta)
    err = np.linalg.norm(emp - target) / np.linalg.norm(target)
    assert report("4 LRC empirical covariance", err < 0.05, f"rel Frobenius err {err:.4f} (tol 0.05)")


# -- desk-scale runs ------------------------------------------------------------

DESK = dict(epochs=10, augment=False, batch_size=128)
SGR_LAMBDAS = (0.5, 1.0, 2.0)
LRC_LAMBDAS = (0.1, 1.0, 5.0)
N_RHO = 500


@pytest.fixture(scope="module")
def desk():
    src = mnist_dir()
    tr, te = load_mnist(src, "train"), load_mnist(src, "test")
    z, space = prepare(te)
    runs = {"clean": dict(method="clean"), "fgsm_aug": dict(method="adv_augment", mix=0.5)}
    for lam in SGR_LAMBDAS:
        runs[f"sgr_sign_{lam}"] = dict(method="sgr", lam=lam, pert_source="loss_grad_sign")
    for lam in LRC_LAMBDAS:
        runs[f"gn_{lam}"] = dict(method="gn", lam=lam)
        runs[f"sgr_lrc_{lam}"] = dict(method="sgr", lam=lam, pert_source="lrc")
        runs[f"sgr_dataset_{lam}"] = dict(method="sgr", lam=lam, pert_source="dataset_cov")
    models, logs = {}, {}
    for name, kw in runs.items():
        res = train(tr, None, TrainConfig(**DESK, **kw))
        models[name], logs[name] = res.model, res.log
    cache = {}

    def value(name, attack, eps=32.0):
        key = (name, attack, eps)
        if key not in cache:
            cache[key] = whitebox_value(models[name], z, te.labels, space, attack, eps, seed=0, nb_iter=10,
                                        rho_samples=N_RHO)
        return cache[key]

    return {"models": models, "logs": logs, "value": value, "z": z, "y": te.labels, "space": space,
            "n_train": len(tr), "n_test": len(te)}


def _best_sgr_sign(desk):
    v = desk["value"]
    clean = v("clean", "test")
    names = [f"sgr_sign_{lam}" for lam in SGR_LAMBDAS]
    eligible = [n for n in names if clean - v(n, "test") <= 0.01] or names
    return max(eligible, key=lambda n: v(n, "pgd"))


@requires_mnist
def test_c5_desk_robustness(desk):
    v = desk["value"]
    clean = v("clean", "test")
    best = _best_sgr_sign(desk)
    sizes = f"{desk['n_train']}/{desk['n_test']} subset"
    gain = v(best, "pgd") - v("clean", "pgd")
    grid = ", ".join(f"lam={lam}: test {v(f'sgr_sign_{lam}', 'test'):.4f} pgd {v(f'sgr_sign_{lam}', 'pgd'):.4f}"
                     for lam in SGR_LAMBDAS)
    print("SGR-sign grid:", grid)
    ok = [report("5a clean test accuracy", clean >= 0.97, f"{clean:.4f} (need >= 0.97, {sizes})"),
          report("5b SGR-sign PGD gain", gain >= 0.25,
                 f"{best}: pgd {v(best, 'pgd'):.4f} vs clean {v('clean', 'pgd'):.4f}, gain {gain * 100:.1f} pts "
                 "(need >= 25)"),
          report("5c SGR test accuracy near clean", abs(clean - v(best, "test")) <= 0.01,
                 f"{v(best, 'test'):.4f} vs {clean:.4f}")]
    assert all(ok)


@requires_mnist
def test_c6_lrc_defense_ordering(desk):
    from sgrlab.attacks import AttackConfig, run_attack
    from sgrlab.models import accuracy
    models, z, y, space = desk["models"], desk["z"], desk["y"], desk["space"]
    acc = {}
    for name in [f"{kind}_{lam}" for kind in ("gn", "sgr_lrc", "sgr_dataset") for lam in LRC_LAMBDAS]:
        cfg = AttackConfig("lrc", eps=0.3, zeta=8.0, k=20)
        acc[name] = accuracy(models[name], run_attack(models[name], z, y, cfg, np.random.default_rng(0), space), y)
    best = {kind: max((n for n in acc if n.startswith(kind + "_")), key=acc.get) for kind in ("gn", "sgr_lrc",
                                                                                              "sgr_dataset")}
    print("LRC worst-of-20 accuracies:", {k: round(a, 4) for k, a in acc.items()})
    sgr_best = max(best["sgr_lrc"], best["sgr_dataset"], key=acc.get)
    margin = acc[sgr_best] - acc[best["gn"]]
    ok = report("6 SGR beats GN under LRC (zeta=8, eps=0.3, k=20)", margin >= 0.05,
                f"{sgr_best} {acc[sgr_best]:.4f} vs {best['gn']} {acc[best['gn']]:.4f}, margin "
                f"{margin * 100:.1f} pts (need >= 5); dataset cov best {acc[best['sgr_dataset']]:.4f}")
    assert ok


@requires_mnist
def test_c7a_attack_ordering_on_every_checkpoint(desk):
    v = desk["value"]
    bad = []
    for name in desk["models"]:
        t, f, p = v(name, "test"), v(name, "fgsm"), v(name, "pgd")
        if not p <= f <= t:
            bad.append(f"{name}: pgd {p:.4f} fgsm {f:.4f} test {t:.4f}")
    assert report("7a PGD <= FGSM <= test", not bad,
                  f"{len(desk['models'])} checkpoints" + (f"; violations {bad}" if bad else ""))


def test_c7b_norm_ball_and_clip_invariants():
    geom, per_batch, batches = (6, 6, 1), 50, 200
    failures = 0
    for b in range(batches):
        r = np.random.default_rng(70_000 + b)
        model = MLP([36, 10, 3], input_shape=geom, seed=b)
        z, space = standardize(r.uniform(0, 1, size=(per_batch,) + geom) ** r.uniform(0.3, 3))
        eps = float(r.uniform(0, 0.5))
        kind = ("rand", "fgm", "fgsm", "pgd")[b % 4]
        if kind == "rand":
            adv = rand_noise(z, eps, r, space)
        elif kind == "fgm":
            adv = fgm(model, z, eps, space)
        elif kind == "fgsm":
            adv = fgsm(model, z, eps, space)
        else:
            adv = pgd(model, z, eps, 3, eps / 3, r, space)
        p0, p = space.to_pixel(z), space.to_pixel(adv)
        delta = (p - p0).reshape(per_batch, -1)
        size = np.linalg.norm(delta, axis=1) if kind == "fgm" else np.abs(delta).max(1)
        inside = (size <= eps + 1e-9) & (p.reshape(per_batch, -1).min(1) >= -1e-9) & \
                 (p.reshape(per_batch, -1).max(1) <= 1 + 1e-9)
        failures += int((~inside).sum())
    n = per_batch * batches
    assert report("7b norm-ball and clip invariants", failures == 0, f"{failures} violations in {n} cases")


@requires_mnist
def test_c8_deepfool_direction(desk):
    v = desk["value"]
    best = _best_sgr_sign(desk)
    a, b = v(best, "fool"), v("clean", "fool")
    assert report("8 rho(SGR) > rho(clean)", a > b, f"{best} {a:.4f} vs clean {b:.4f} on {N_RHO} test images")


@requires_mnist
def test_adv_augment_fgsm_margin(desk):
    v = desk["value"]
    gain = v("fgsm_aug", "fgsm") - v("clean", "fgsm")
    assert report("extra FGSM-augmented vs clean under FGSM", gain >= 0.20,
                  f"{v('fgsm_aug', 'fgsm'):.4f} vs {v('clean', 'fgsm'):.4f} (need +20 pts)")


@requires_mnist
def test_penalty_is_nonnegative_in_desk_runs(desk):
    omegas = [row["omega"] for name, log in desk["logs"].items() if not name.startswith(("clean", "fgsm"))
              for row in log]
    assert report("extra Omega >= 0 on desk runs", min(omegas) >= 0, f"min logged Omega {min(omegas):.3e}")


# -- 9. reproducibility ----------------------------------------------------------

def _all_commands(data, out):
    base = ["--data-dir", str(data), "--out-dir", str(out), "--seed", "11"]
    cks = [str(out / "clean.npz"), str(out / "sgr.npz")]
    return [
        ["train", "--epochs", "2", *base],
        ["train", "--method", "sgr", "--lambda", "1", "--epochs", "2", "--name", "sgr", *base],
        ["whitebox", *cks, "--eps", "0", "16", "--rho-samples", "20", *base],
        ["transfer", *cks, "--nb-iter", "5", *base],
        ["lrc-sweep", *cks, "--zeta", "2", "8", "--eps", "0", "0.3", "--k", "3", *base],
        ["export-cov", "--checkpoint", cks[0], "--source", "pgd", "--n", "40", *base],
        ["export-cov", "--source", "lrc", "--n", "40", *base],
        ["trajectory", cks[1], "--index", "2", "--steps", "11", *base],
    ]


def test_c9_byte_identical_reruns(tiny_mnist_dir, tmp_path):
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for cmd in _all_commands(tiny_mnist_dir, out):
            assert main(cmd) == 0, cmd
    files = sorted(p.name for p in outs[0].glob("*.csv"))
    differ = [f for f in files if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes()]
    ok = bool(files) and not differ and files == sorted(p.name for p in outs[1].glob("*.csv"))
    assert report("9 byte-identical CSVs on rerun", ok, f"{len(files)} CSVs compared; differing: {differ or 'none'}")
