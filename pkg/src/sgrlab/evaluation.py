"""Experiment protocols behind the CLI: white-box tables, transfer matrices,
LRC sweeps, covariance exports and softmax trajectories.

Every function here is a pure function of (models, data, seed) and returns
plain rows; writing CSVs is left to ``write_rows`` so the byte layout is
fixed in one place.  Each attack invocation draws from a fresh generator
seeded by ``seed``, which makes a transfer diagonal reproduce the matching
white-box entry exactly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .attacks import (AttackConfig, deepfool, deepfool_rho, fgsm, lrc_sample, pgd, perturbations_for_cov,
                      run_attack, worst_of_k)
from .autodiff import no_grad, softmax
from .covariance import (batch_second_moment, decay_length, normalized_center_crop, radial_estimate,
                         write_covfun_csv, write_dense_csv)
from .data import InputSpace
from .errors import ConfigError, ContractError
from .models import Classifier, accuracy, logits

WHITEBOX_COLUMNS = ("test", "rand", "fgm", "fgsm", "pgd", "fool")
EXPORT_SOURCES = ("pgd", "fgsm", "deepfool", "loss_grad", "loss_grad_sign", "lrc", "dataset_cov")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, header, rows) -> Path:
    """CSV with a header row, ``\\n`` line endings and ``repr`` floats."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(r[h]) for h in header])
    return path


def _rng(seed):
    return np.random.default_rng(seed)


def check_attack_names(names):
    bad = [a for a in names if a not in WHITEBOX_COLUMNS]
    if bad:
        raise ConfigError(f"unknown attack(s) {bad}; valid names: {list(WHITEBOX_COLUMNS)}")


def whitebox_value(model, z, y, space, attack: str, eps: float, seed: int, nb_iter: int = 10,
                   rho_samples: int | None = None) -> float:
    """One table cell: accuracy under ``attack`` at ``eps`` (1/255 units), or rho for ``fool``."""
    if attack == "test":
        return accuracy(model, z, y)
    if attack == "fool":
        n = len(z) if rho_samples is None else min(rho_samples, len(z))
        return deepfool_rho(model, z[:n], space.take(np.arange(n)))
    cfg = AttackConfig(attack, eps=eps, nb_iter=nb_iter)
    return accuracy(model, run_attack(model, z, y, cfg, _rng(seed), space), y)


def whitebox_table(models: dict[str, Classifier], z, y, space: InputSpace, eps_list, attacks=WHITEBOX_COLUMNS,
                   seed: int = 0, nb_iter: int = 10, rho_samples: int | None = None) -> list[dict]:
    """One row per (model, eps); one column per attack.

    ``test`` and ``fool`` ignore ``eps`` and are computed once per model.
    """
    check_attack_names(attacks)
    rows = []
    for name, model in models.items():
        fixed = {}
        for a in attacks:
            if a in ("test", "fool"):
                fixed[a] = whitebox_value(model, z, y, space, a, 0.0, seed, nb_iter, rho_samples)
        for eps in eps_list:
            row = {"model": name, "eps": float(eps)}
            for a in attacks:
                row[a] = fixed[a] if a in fixed else whitebox_value(model, z, y, space, a, eps, seed, nb_iter)
            rows.append(row)
    return rows


def _check_compatible(models: dict[str, Classifier]):
    shapes = {(tuple(m.input_shape), m.num_classes) for m in models.values()}
    if len(shapes) > 1:
        raise ContractError(f"checkpoints disagree on input shape / class count: {sorted(shapes)}")


def transfer_matrix(models: dict[str, Classifier], z, y, space, eps: float, nb_iter: int = 40,
                    seed: int = 0) -> list[dict]:
    """Entry (i, j): accuracy of model i on PGD samples crafted against model j."""
    if len(models) < 2:
        raise ContractError("transfer needs at least two checkpoints")
    _check_compatible(models)
    names = list(models)
    adv = {}
    for j in names:
        adv[j] = pgd(models[j], z, eps / 255.0, nb_iter, eps / 255.0 / 5.0, _rng(seed), space, True)
    rows = []
    for i in names:
        row = {"model": i}
        for j in names:
            row[j] = accuracy(models[i], adv[j], y)
        rows.append(row)
    return rows


def lrc_sweep(models: dict[str, Classifier], z, y, space, zetas, eps_list, k: int = 20, seed: int = 0) -> list[dict]:
    """Worst-of-k LRC accuracy per (model, zeta, eps); eps in raw noise multiples."""
    for zeta in zetas:
        if not zeta > 0:
            raise ConfigError(f"zeta must be > 0, got {zeta}")
    _check_compatible(models)
    rows = []
    for name, model in models.items():
        geometry = tuple(model.input_shape)
        if len(geometry) != 3:
            raise ContractError(f"{name}: LRC noise needs image inputs, model takes {geometry}")
        for zeta in zetas:
            sampler = lambda r, n, _z=float(zeta): lrc_sample(geometry, _z, r, n)  # noqa: E731
            for eps in eps_list:
                x_adv, _ = worst_of_k(model, z, y, sampler, k, float(eps), _rng(seed), space)
                rows.append({"model": name, "zeta": float(zeta), "eps": float(eps), "k": int(k),
                             "accuracy": accuracy(model, x_adv, y)})
    return rows


def collect_perturbations(model, z, space, source: str, eps: float = 8.0, seed: int = 0, nb_iter: int = 10,
                          zeta: float = 8.0) -> np.ndarray:
    """Perturbations (n x d, pixel space) for covariance export."""
    if source not in EXPORT_SOURCES:
        raise ConfigError(f"unknown perturbation source {source!r}; valid: {list(EXPORT_SOURCES)}")
    if model is None and source not in ("lrc", "dataset_cov"):
        raise ConfigError(f"source {source!r} needs a checkpoint")
    rng = _rng(seed)
    n = len(z)
    if source == "deepfool":
        return deepfool(model, z, space=space).perturbation.reshape(n, -1)
    if source == "pgd":
        adv = pgd(model, z, eps / 255.0, nb_iter, eps / 255.0 / 5.0, rng, space, True)
    elif source == "fgsm":
        adv = fgsm(model, z, eps / 255.0, space)
    elif source == "lrc":
        return lrc_sample(z.shape[1:], zeta, rng, n).reshape(n, -1)
    elif source == "dataset_cov":
        pix = space.to_pixel(z).reshape(n, -1)
        return pix - pix.mean(axis=0)
    else:
        xi = perturbations_for_cov(model, z, source, rng, space)
        return xi * space.scale[:, None]
    return (space.to_pixel(adv) - space.to_pixel(z)).reshape(n, -1)


def export_covariance(perturbations, geometry, out_dir, stem: str, crop: float | None = 0.25) -> dict:
    """Write the dense matrix (normalized, center-cropped) and the radial covfun.

    Returns artifact paths and the decay length of the channel-averaged profile.
    """
    out_dir = Path(out_dir)
    xi = np.asarray(perturbations, dtype=np.float64)
    out = {}
    if geometry is None or int(np.prod(geometry)) <= 4096:
        S = batch_second_moment(xi).matrix
        mat = normalized_center_crop(S, crop) if crop is not None else S
        out["matrix"] = write_dense_csv(out_dir / f"{stem}-matrix.csv", mat)
    decay = float("nan")
    if geometry is not None:
        rc = radial_estimate(xi, geometry)
        out["covfun"] = write_covfun_csv(out_dir / f"{stem}-covfun.csv", rc)
        decay = decay_length(rc.profile())
    return {"paths": out, "decay_length": decay}


def trajectory(model, x, xi, ts) -> np.ndarray:
    """Softmax activations phi(x + t xi) for every t; shape (len(ts), K).

    The path is not clipped: it probes the function, not the pixel box.
    """
    x = np.asarray(x, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if x.shape != xi.shape or x.shape != tuple(model.input_shape):
        raise ContractError("trajectory needs one input and a perturbation of the same shape")
    ts = np.asarray(ts, dtype=np.float64)
    pts = x[None] + ts.reshape((-1,) + (1,) * x.ndim) * xi[None]
    with no_grad():
        return softmax(logits(model, pts)).data


def trajectory_rows(probs, ts) -> list[dict]:
    rows = []
    for t, p in zip(ts, probs):
        row = {"t": float(t)}
        row.update({f"p{k}": float(v) for k, v in enumerate(p)})
        rows.append(row)
    return rows


def total_variation(values) -> float:
    return float(np.abs(np.diff(np.asarray(values, dtype=np.float64))).sum())


def t_grid(t_min: float = -5.0, t_max: float = 5.0, steps: int = 101) -> np.ndarray:
    if steps < 2 or not t_max > t_min:
        raise ConfigError("trajectory grid needs steps >= 2 and t_max > t_min")
    # rounding keeps t = 0 exact on symmetric grids
    return np.round(np.linspace(t_min, t_max, steps), 12)
