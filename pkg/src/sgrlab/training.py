"""Training loops: clean, weight decay, adversarial augmentation, GN and SGR.

Random streams are split by purpose (model init, data order/augmentation,
attacks) so that methods which reduce to clean training under some setting
(lambda = 0, zero weight decay, zero mixture weight) reproduce the clean
parameter trajectory bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, PerturbationSource, perturbations_for_cov, run_attack
from .autodiff import Tensor, grad
from .covariance import CovEstimator, dataset_diag_constant, scale_factor
from .data import Dataset, augment_batch, prepare, standardize
from .errors import ConfigError, ContractError, DegenerateEstimateError
from .models import Classifier, accuracy, build_model, cross_entropy, input_log_prob_grad, save_checkpoint
from .regularizers import _quadratic, sgr_omega, uncentered_correction, weight_decay

log = logging.getLogger(__name__)

METHODS = ("clean", "wdecay", "adv_augment", "gn", "sgr")
LOG_FIELDS = ("epoch", "step", "loss", "omega", "sigma_t", "test_acc", "avg_diag")
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    method: str = "clean"
    lam: float = 1.0
    beta: float = 0.1
    batch_size: int = 128
    epochs: int = 50
    lr: float = 0.001
    weight_decay: float = 0.0
    pert_source: str = "loss_grad_sign"
    pert_eps: float = 8.0
    pert_zeta: float = 8.0
    mix: float = 0.5
    adv_attack: str = "fgsm"
    adv_eps: float = 32.0
    cov_update_every: float = 1
    cov_mode: str = "dense"
    uncentered: bool = False
    augment: bool = True
    seed: int = 0
    model: dict = field(default_factory=lambda: {"kind": "mlp", "widths": [784, 256, 256, 10],
                                                 "input_shape": [28, 28, 1]})

    def __post_init__(self):
        problems = self.validate()
        if problems:
            raise ConfigError(problems)

    def validate(self) -> list[str]:
        p = []
        if self.method not in METHODS:
            p.append(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.lam >= 0:
            p.append("lambda must be >= 0")
        if not 0 < self.beta <= 1:
            p.append("beta must lie in (0, 1]")
        if self.batch_size < 1:
            p.append("batch_size must be >= 1")
        if self.epochs < 0:
            p.append("epochs must be >= 0")
        if not self.lr > 0:
            p.append("lr must be > 0")
        if self.weight_decay < 0:
            p.append("weight_decay must be >= 0")
        if not 0 <= self.mix <= 1:
            p.append("mix must lie in [0, 1]")
        if self.adv_attack not in ("fgsm", "pgd"):
            p.append("adv_attack must be fgsm or pgd")
        if self.cov_mode not in ("dense", "radial"):
            p.append("cov_mode must be dense or radial")
        if not self.cov_update_every >= 1 and self.cov_update_every not in (0,):
            p.append("cov_update_every must be >= 1 (or 0/inf for never)")
        try:
            PerturbationSource.parse(self.pert_source)
        except ConfigError as exc:
            p.append(str(exc))
        return p

    def hyper(self) -> dict:
        d = asdict(self)
        d["adam"] = {"beta1": ADAM_BETA1, "beta2": ADAM_BETA2, "eps": ADAM_EPS}
        return d


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrs = [np.asarray(p.data if isinstance(p, Tensor) else p) for p in params]
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs])


def adam_update(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam step, in place on Tensor params (arrays are returned updated)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g.data if isinstance(g, Tensor) else g)
        cur = p.data if isinstance(p, Tensor) else np.asarray(p)
        if g.shape != cur.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {cur.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        new = cur - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        if isinstance(p, Tensor):
            p.data = new
        out.append(new)
    return out


# -- steps ------------------------------------------------------------------

@dataclass
class StepInfo:
    loss: float
    omega: float = float("nan")
    sigma: float = float("nan")


def _apply(model, objective, adam, lr):
    params = model.parameters()
    grads = grad(objective, params)
    adam_update(params, grads, adam, lr)


def clean_step(model, z, y, adam, lr, wd: float = 0.0) -> StepInfo:
    obj = cross_entropy(model, z, y)
    reg = weight_decay(model, wd)
    if reg is not None:
        obj = obj + reg
    _apply(model, obj, adam, lr)
    return StepInfo(obj.item())


def adv_augmented_step(model, z, y, attack: AttackConfig, mix: float, adam, lr, rng, space=None) -> StepInfo:
    """(1 - mix) * CE(clean) + mix * CE(attacked); attacked samples keep their true labels."""
    obj = None
    if mix < 1:
        obj = cross_entropy(model, z, y)
        if mix > 0:
            obj = obj * (1 - mix)
    if mix > 0:
        z_adv = run_attack(model, z, y, attack, rng, space)
        adv = cross_entropy(model, z_adv, y)
        adv = adv * mix if mix < 1 else adv
        obj = adv if obj is None else obj + adv
    _apply(model, obj, adam, lr)
    return StepInfo(obj.item())


def _gn_term(model, z, y, sigma):
    zt = Tensor(z, requires_grad=True)
    g = input_log_prob_grad(model, zt, y, create_graph=True)
    return _quadratic(g, None, sigma)


def gn_step(model, z, y, lam, c, adam, lr) -> StepInfo:
    """Identity covariance scaled like SGR: sigma = c / avg-diag(I) = c."""
    obj = cross_entropy(model, z, y)
    omega = None
    if lam > 0:
        omega = _gn_term(model, z, y, c)
        obj = obj + omega * lam
    _apply(model, obj, adam, lr)
    return StepInfo(obj.item(), omega.item() if omega is not None else 0.0, c)


def sgr_training_step(model, z, y, estimator: CovEstimator, cfg: TrainConfig, adam, c: float, step: int,
                      rng=None, space=None, dataset_mean=None, attack: AttackConfig | None = None) -> StepInfo:
    """One pass of adversarial SGR: perturbations, EWMA, scaling, penalty, Adam.

    The covariance estimate is a constant in the gradient.  When it carries
    no signal yet the step falls back to the gradient-norm penalty.
    """
    obj = cross_entropy(model, z, y)
    if cfg.lam == 0:
        _apply(model, obj, adam, cfg.lr)
        return StepInfo(obj.item(), 0.0)
    every = cfg.cov_update_every
    never = every == 0 or math.isinf(every)
    if not never and (estimator.estimate is None or step % int(every) == 0):
        xi = perturbations_for_cov(model, z, cfg.pert_source, rng, space, attack, dataset_mean)
        estimator.update(xi)
    try:
        sigma = scale_factor(estimator, c)
        omega = sgr_omega(model, z, y, estimator.estimate, sigma)
        if cfg.uncentered:
            # perturbations rescaled by sqrt(sigma) have second moment sigma * Sigma
            omega = omega + uncentered_correction(model, z, y, np.sqrt(sigma) * estimator.mean)
    except DegenerateEstimateError as exc:
        log.warning("step %d: %s; using gradient-norm penalty for this step", step, exc)
        sigma = c
        omega = _gn_term(model, z, y, c)
    obj = obj + omega * cfg.lam
    _apply(model, obj, adam, cfg.lr)
    return StepInfo(obj.item(), omega.item(), sigma)


# -- full training ----------------------------------------------------------

@dataclass
class TrainResult:
    model: Classifier
    log: list[dict]
    estimator: CovEstimator | None
    c: float
    seconds: float = 0.0


def _streams(seed):
    init, data, attack = np.random.SeedSequence(seed).spawn(3)
    return int(init.generate_state(1)[0]), np.random.default_rng(data), np.random.default_rng(attack)


def train(train_ds: Dataset, test_ds: Dataset | None, cfg: TrainConfig, model: Classifier | None = None,
          estimator: CovEstimator | None = None, log_path=None, checkpoint_path=None,
          progress=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of the configured method; one log row per epoch."""
    t0 = time.time()
    init_seed, data_rng, attack_rng = _streams(cfg.seed)
    if model is None:
        model = build_model(cfg.model, seed=init_seed)
    if tuple(model.input_shape) != tuple(train_ds.sample_shape):
        raise ContractError(f"model input {model.input_shape} does not match data {train_ds.sample_shape}")
    policy = "none" if train_ds.kind == "synthetic" else "per_image"
    z_train, _ = prepare(train_ds, policy)
    c = dataset_diag_constant(z_train)
    dataset_mean = z_train.mean(axis=0)
    z_test, y_test = (prepare(test_ds, policy)[0], test_ds.labels) if test_ds is not None else (None, None)

    if estimator is None and cfg.method == "sgr":
        estimator = CovEstimator(mode=cfg.cov_mode, beta=cfg.beta, geometry=train_ds.geometry,
                                 track_mean=cfg.uncentered)
    src = PerturbationSource.parse(cfg.pert_source)
    pert_attack = None
    if src in (PerturbationSource.FGSM, PerturbationSource.PGD):
        pert_attack = AttackConfig(src.value, eps=cfg.pert_eps)
    elif src is PerturbationSource.LRC:
        pert_attack = AttackConfig("lrc", eps=1.0, zeta=cfg.pert_zeta)
    adv_attack = AttackConfig(cfg.adv_attack, eps=cfg.adv_eps)

    adam = AdamState.zeros_like(model.parameters())
    n = len(train_ds)
    rows = []
    step = 0
    do_aug = cfg.augment and train_ds.is_image
    for epoch in range(1, cfg.epochs + 1):
        order = data_rng.permutation(n)
        losses, omegas = [], []
        info = StepInfo(float("nan"))
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            pix = train_ds.images[idx]
            if do_aug:
                pix = augment_batch(pix, data_rng, train_ds.kind)
            z, space = standardize(pix, policy, train_ds.pixel_range)
            y = train_ds.labels[idx]
            if cfg.method == "clean":
                info = clean_step(model, z, y, adam, cfg.lr)
            elif cfg.method == "wdecay":
                info = clean_step(model, z, y, adam, cfg.lr, cfg.weight_decay)
            elif cfg.method == "adv_augment":
                info = adv_augmented_step(model, z, y, adv_attack, cfg.mix, adam, cfg.lr, attack_rng, space)
            elif cfg.method == "gn":
                info = gn_step(model, z, y, cfg.lam, c, adam, cfg.lr)
            else:
                info = sgr_training_step(model, z, y, estimator, cfg, adam, c, step, attack_rng, space,
                                         dataset_mean, pert_attack)
            losses.append(info.loss)
            omegas.append(info.omega)
            step += 1
        acc = accuracy(model, z_test, y_test) if z_test is not None else float("nan")
        avg_diag = float("nan")
        if estimator is not None and estimator.estimate is not None:
            avg_diag = estimator.avg_diag()
        row = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)),
               "omega": float(np.mean(omegas)) if omegas else float("nan"),
               "sigma_t": info.sigma, "test_acc": acc, "avg_diag": avg_diag}
        rows.append(row)
        log.info("epoch %d loss %.4f omega %.4g test_acc %.4f", epoch, row["loss"], row["omega"], acc)
        if progress is not None:
            progress(row)
    if log_path is not None:
        write_log(log_path, rows)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(model, rows, estimator, c, time.time() - t0)


def write_log(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_FIELDS)
        for r in rows:
            wr.writerow([r["epoch"], r["step"]] + [repr(float(r[k])) for k in LOG_FIELDS[2:]])
    return path
