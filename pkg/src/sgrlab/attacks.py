"""Perturbation generators: random, FGM, FGSM, PGD, DeepFool and LRC noise.

Inputs and outputs live in model space (what the classifier consumes).  The
budget ``eps`` is given in pixel units and every update, projection and clip
is carried out in pixel space through the per-sample :class:`InputSpace`
map, so the pixel-space norm-ball and rgb-range guarantees hold exactly.
Attack labels are always the model's own predictions.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, enable_grad, grad, no_grad
from .covariance import radial_from_function, radial_to_dense
from .data import InputSpace
from .errors import ConfigError, ContractError, NumericError
from .models import log_prob, logit_input_grads, per_sample_loss, predict

log = logging.getLogger(__name__)

ATTACK_KINDS = ("rand", "fgm", "fgsm", "pgd", "deepfool", "lrc")


class PerturbationSource(str, enum.Enum):
    LOSS_GRAD = "loss_grad"
    LOSS_GRAD_SIGN = "loss_grad_sign"
    FGSM = "fgsm"
    PGD = "pgd"
    LRC = "lrc"
    DATASET_COV = "dataset_cov"

    @classmethod
    def parse(cls, value) -> "PerturbationSource":
        aliases = {"sign": "loss_grad_sign", "grad": "loss_grad", "dataset": "dataset_cov"}
        try:
            return cls(aliases.get(str(value), str(value)))
        except ValueError:
            raise ConfigError(f"unknown perturbation source {value!r}; valid: {[s.value for s in cls]}") from None


@dataclass
class AttackConfig:
    """Declarative attack description.

    ``eps`` is in 1/255 pixel units for gradient and random attacks and in
    raw noise multiples for ``lrc``.
    """

    kind: str = "pgd"
    eps: float = 32.0
    nb_iter: int = 10
    eps_iter: float | None = None
    overshoot: float = 0.02
    max_iter: int = 100
    zeta: float = 8.0
    k: int = 20
    rand_init: bool = True

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack {self.kind!r}; valid: {list(ATTACK_KINDS)}")
        if self.eps < 0:
            raise ConfigError("eps must be >= 0")
        if self.kind == "pgd" and self.nb_iter < 1:
            raise ConfigError("pgd needs nb_iter >= 1")
        if self.kind == "lrc" and not self.zeta > 0:
            raise ConfigError("lrc needs zeta > 0")

    @property
    def eps_pixel(self) -> float:
        return self.eps if self.kind == "lrc" else self.eps / 255.0

    @property
    def eps_iter_pixel(self) -> float:
        return (self.eps_iter / 255.0) if self.eps_iter is not None else self.eps_pixel / 5.0


def _space(x, space):
    if space is None:
        n = x.shape[0]
        return InputSpace(np.zeros(n), np.ones(n), -np.inf, np.inf)
    if len(space) != x.shape[0]:
        raise ContractError(f"input space covers {len(space)} samples, batch has {x.shape[0]}")
    return space


def _bcast(v, ndim):
    return np.asarray(v).reshape((-1,) + (1,) * (ndim - 1))


def loss_input_grad(model, z, labels) -> np.ndarray:
    """Gradient of the per-sample cross-entropy w.r.t. model input ``z``."""
    zt = Tensor(np.asarray(z, dtype=np.float64), requires_grad=True)
    with enable_grad():
        lp = log_prob(model, zt, labels)
        return -grad(lp.sum(), zt).data


def _pixel_grad(model, p, space, labels):
    # dL/dp = dL/dz / scale; the positive per-sample scale leaves signs and L2 directions alone
    g = loss_input_grad(model, space.to_model(p), labels)
    return g / _bcast(space.scale, g.ndim)


def _clip(p, space):
    return np.clip(p, space.lo, space.hi)


def rand_noise(x, eps: float, rng, space: InputSpace | None = None) -> np.ndarray:
    """Add Uniform[-eps, eps] pixel noise per coordinate, then clip to range."""
    x = np.asarray(x, dtype=np.float64)
    space = _space(x, space)
    p = space.to_pixel(x)
    return space.to_model(_clip(p + rng.uniform(-eps, eps, size=p.shape), space))


def fgm(model, x, eps: float, space: InputSpace | None = None) -> np.ndarray:
    """L2 fast gradient step of length eps; zero-gradient samples are returned unchanged."""
    x = np.asarray(x, dtype=np.float64)
    space = _space(x, space)
    labels = predict(model, x)
    p = space.to_pixel(x)
    g = _pixel_grad(model, p, space, labels)
    norms = np.sqrt((g.reshape(len(g), -1) ** 2).sum(axis=1))
    dead = norms < 1e-12
    if dead.any():
        log.debug("fgm: %d samples with zero gradient left unchanged", int(dead.sum()))
    step = g / _bcast(np.where(dead, 1.0, norms), g.ndim) * _bcast(~dead, g.ndim)
    return space.to_model(_clip(p + eps * step, space))


def fgsm(model, x, eps: float, space: InputSpace | None = None) -> np.ndarray:
    """L-infinity fast gradient sign step; sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    space = _space(x, space)
    labels = predict(model, x)
    p = space.to_pixel(x)
    return space.to_model(_clip(p + eps * np.sign(_pixel_grad(model, p, space, labels)), space))


def pgd(model, x, eps: float, nb_iter: int = 10, eps_iter: float | None = None, rng=None,
        space: InputSpace | None = None, rand_init: bool = True) -> np.ndarray:
    """Iterated sign steps projected onto the L-infinity ball of radius eps.

    Starts uniformly inside the ball when ``rand_init`` (needs ``rng``).
    """
    if nb_iter < 1:
        raise ContractError("nb_iter must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    space = _space(x, space)
    eps_iter = eps / 5.0 if eps_iter is None else eps_iter
    labels = predict(model, x)
    p0 = space.to_pixel(x)
    lo, hi = p0 - eps, p0 + eps
    p = p0.copy()
    if rand_init:
        if rng is None:
            raise ContractError("random start needs an rng")
        p = np.clip(_clip(p0 + rng.uniform(-eps, eps, size=p0.shape), space), lo, hi)
    for _ in range(nb_iter):
        g = _pixel_grad(model, p, space, labels)
        p = np.clip(_clip(p + eps_iter * np.sign(g), space), lo, hi)
    return space.to_model(p)


@dataclass
class DeepFoolResult:
    x_adv: np.ndarray          # model space
    perturbation: np.ndarray   # pixel space, x_adv - x after clipping
    flipped: np.ndarray        # bool per sample
    iterations: np.ndarray


def deepfool(model, x, overshoot: float = 0.02, max_iter: int = 100,
             space: InputSpace | None = None) -> DeepFoolResult:
    """Multiclass DeepFool on logits, batched over samples.

    Each step moves to the nearest linearised class boundary; the
    accumulated step is scaled by (1 + overshoot).  Samples that do not flip
    within ``max_iter`` come back with ``flipped = False``.
    """
    if model.num_classes < 2:
        raise ContractError("DeepFool needs at least two classes")
    x = np.asarray(x, dtype=np.float64)
    space = _space(x, space)
    n = x.shape[0]
    orig = np.atleast_1d(predict(model, x))
    p0 = space.to_pixel(x)
    r_tot = np.zeros_like(p0)
    p_adv = p0.copy()
    flipped = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    for _ in range(max_iter):
        if active.size == 0:
            break
        sub = space.take(active)
        zt = Tensor(sub.to_model(p0[active] + r_tot[active]), requires_grad=True)
        z, gks = logit_input_grads(model, zt)
        f = z.data
        G = np.stack([gk.data.reshape(active.size, -1) for gk in gks], axis=1)  # n, K, d
        G = G / sub.scale[:, None, None]
        a = orig[active]
        fp = f - f[np.arange(active.size), a][:, None]
        wp = G - G[np.arange(active.size), a][:, None, :]
        wn = np.sqrt((wp ** 2).sum(-1))
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(fp) / wn
        dist[np.arange(active.size), a] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        best = np.argmin(dist, axis=1)
        ok = np.isfinite(dist[np.arange(active.size), best])
        w = wp[np.arange(active.size), best]
        idx = np.arange(active.size)
        coef = np.where(ok, np.abs(fp[idx, best]) / np.where(ok, wn[idx, best] ** 2, 1.0), 0.0)
        r_tot[active] += (coef[:, None] * w).reshape((active.size,) + p0.shape[1:])
        iters[active] += 1
        p_adv[active] = _clip(p0[active] + (1 + overshoot) * r_tot[active], space.take(active))
        now = np.atleast_1d(predict(model, space.take(active).to_model(p_adv[active])))
        done = (now != a) | ~ok
        flipped[active[now != a]] = True
        active = active[~done]
    return DeepFoolResult(space.to_model(p_adv), p_adv - p0, flipped, iters)


def deepfool_rho(model, x, space: InputSpace | None = None, overshoot: float = 0.02, max_iter: int = 100,
                 result: DeepFoolResult | None = None) -> float:
    """Mean of ||r(x)||_2 / ||x||_2 over the batch, both in pixel space."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ContractError("empty dataset")
    space = _space(x, space)
    res = result if result is not None else deepfool(model, x, overshoot, max_iter, space)
    pn = np.sqrt((space.to_pixel(x).reshape(len(x), -1) ** 2).sum(1))
    rn = np.sqrt((res.perturbation.reshape(len(x), -1) ** 2).sum(1))
    keep = pn > 0
    if not keep.all():
        warnings.warn(f"deepfool_rho: excluded {int((~keep).sum())} zero-norm samples")
    if not keep.any():
        return float("nan")
    return float(np.mean(rn[keep] / pn[keep]))


def rho_from_norms(r_norms, x_norms) -> float:
    r = np.asarray(r_norms, dtype=np.float64)
    xn = np.asarray(x_norms, dtype=np.float64)
    keep = xn > 0
    return float(np.mean(r[keep] / xn[keep]))


# -- long-range correlated noise -------------------------------------------

@lru_cache(maxsize=32)
def lrc_factor(geometry: tuple[int, int, int], zeta: float, inter: float = 0.5) -> np.ndarray:
    """Matrix L with L L^T equal to the exp(-r/zeta) covariance, negative eigenvalues clipped."""
    if not zeta > 0:
        raise ContractError("zeta must be > 0")
    rc = radial_from_function(geometry, lambda r: np.exp(-r / zeta), inter_scale=inter)
    S = radial_to_dense(rc).matrix
    try:
        vals, vecs = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed for d={S.shape[0]}, zeta={zeta}: {exc}",
                           op="lrc_factor") from exc
    if not np.all(np.isfinite(vals)):
        raise NumericError(f"non-finite eigenvalues (min {np.nanmin(vals)}) for zeta={zeta}", op="lrc_factor")
    L = vecs * np.sqrt(np.clip(vals, 0.0, None))
    L.setflags(write=False)
    return L


def lrc_covariance(geometry, zeta: float, inter: float = 0.5) -> np.ndarray:
    rc = radial_from_function(tuple(geometry), lambda r: np.exp(-r / zeta), inter_scale=inter)
    return radial_to_dense(rc).matrix


def lrc_sample(geometry, zeta: float, rng, n: int = 1, inter: float = 0.5) -> np.ndarray:
    """Draw ``n`` noise images from N(0, Sigma_zeta); shape (n, H, W, C)."""
    geometry = tuple(int(g) for g in geometry)
    L = lrc_factor(geometry, float(zeta), float(inter))
    z = rng.standard_normal(size=(n, L.shape[0]))
    return (z @ L.T).reshape((n,) + geometry)


def worst_of_k(model, x, y_true, sampler, k: int, eps: float, rng, space: InputSpace | None = None):
    """Keep, per sample, the noisy draw with the highest cross-entropy against ``y_true``.

    ``sampler(rng, n)`` returns ``n`` pixel-space noise arrays shaped like
    ``x``.  Returns ``(x_adv, losses)``.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    space = _space(x, space)
    y_true = np.asarray(y_true, dtype=np.int64)
    p0 = space.to_pixel(x)
    best = None
    best_loss = np.full(len(x), -np.inf)
    for _ in range(k):
        cand = space.to_model(_clip(p0 + eps * sampler(rng, len(x)), space))
        loss = per_sample_loss(model, cand, y_true)
        better = loss > best_loss
        if best is None:
            best = cand.copy()
        else:
            best[better] = cand[better]
        best_loss = np.where(better, loss, best_loss)
    return best, best_loss


# -- dispatch ---------------------------------------------------------------

def run_attack(model, x, y, cfg: AttackConfig, rng, space: InputSpace | None = None) -> np.ndarray:
    """Apply the configured attack to a batch; returns model-space inputs."""
    x = np.asarray(x, dtype=np.float64)
    eps = cfg.eps_pixel
    if cfg.kind == "rand":
        return rand_noise(x, eps, rng, space)
    if cfg.kind == "fgm":
        return fgm(model, x, eps, space)
    if cfg.kind == "fgsm":
        return fgsm(model, x, eps, space)
    if cfg.kind == "pgd":
        return pgd(model, x, eps, cfg.nb_iter, cfg.eps_iter_pixel, rng, space, cfg.rand_init)
    if cfg.kind == "deepfool":
        return deepfool(model, x, cfg.overshoot, cfg.max_iter, space).x_adv
    if cfg.kind == "lrc":
        geometry = x.shape[1:]
        sampler = lambda r, n: lrc_sample(geometry, cfg.zeta, r, n)  # noqa: E731
        return worst_of_k(model, x, y, sampler, cfg.k, eps, rng, space)[0]
    raise ConfigError(f"unknown attack {cfg.kind!r}")


def perturbations_for_cov(model, x, source, rng=None, space: InputSpace | None = None,
                          attack: AttackConfig | None = None, dataset_mean=None) -> np.ndarray:
    """Perturbations (m x d, model space) whose second moments feed the estimator."""
    source = PerturbationSource.parse(source)
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    if source in (PerturbationSource.LOSS_GRAD, PerturbationSource.LOSS_GRAD_SIGN):
        with no_grad():
            labels = predict(model, x)
        g = loss_input_grad(model, x, labels)
        out = np.sign(g) if source is PerturbationSource.LOSS_GRAD_SIGN else g
    elif source is PerturbationSource.FGSM:
        cfg = attack or AttackConfig("fgsm", eps=8.0)
        out = fgsm(model, x, cfg.eps_pixel, space) - x
    elif source is PerturbationSource.PGD:
        cfg = attack or AttackConfig("pgd", eps=8.0)
        out = pgd(model, x, cfg.eps_pixel, cfg.nb_iter, cfg.eps_iter_pixel, rng, space, cfg.rand_init) - x
    elif source is PerturbationSource.LRC:
        cfg = attack or AttackConfig("lrc", eps=1.0)
        sp = _space(x, space)
        noise = lrc_sample(x.shape[1:], cfg.zeta, rng, m)
        out = sp.to_model(sp.to_pixel(x) + cfg.eps_pixel * noise) - x
    else:
        if dataset_mean is None:
            raise ConfigError("dataset_cov source needs the dataset mean")
        out = x - np.asarray(dataset_mean)[None]
    return out.reshape(m, -1)
