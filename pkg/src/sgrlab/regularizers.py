"""Gradient penalties built on the input gradient of the log-probability.

``sgr_omega`` is the structured penalty: half the mean quadratic form of the
per-sample input gradient of log phi_y under a perturbation second-moment
matrix, times a scale factor.  ``gn_omega`` is the identity-matrix case.
``sgr_omega_logit`` evaluates the same quantity from class-logit gradients and
exists as an independent cross-check, as does the one-layer closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, softmax
from .covariance import sigma_vecmul
from .errors import ConfigError, ContractError
from .models import LinearSoftmax, input_log_prob_grad, logit_input_grads, one_hot

REG_KINDS = ("none", "gn", "sgr")


@dataclass
class RegularizerSpec:
    kind: str = "sgr"
    lam: float = 1.0
    uncentered: bool = False

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ConfigError(f"reg.kind must be one of {REG_KINDS}, got {self.kind!r}")
        if not self.lam >= 0:
            raise ConfigError(f"reg.lambda must be >= 0, got {self.lam}")


def _leaf(x) -> Tensor:
    # an input that already tracks gradients stays in the graph, so the
    # penalty can also be differentiated with respect to x
    x = as_tensor(x)
    return x if x.requires_grad else Tensor(x.data, requires_grad=True)


def _flat(g: Tensor) -> Tensor:
    return g.reshape(g.shape[0], -1)


def _quadratic(g: Tensor, cov, sigma: float, cutoff=None) -> Tensor:
    m = g.shape[0]
    gf = _flat(g)
    if cov is None:
        sg = gf
    else:
        sg = _flat(sigma_vecmul(cov, gf, cutoff=cutoff))
    return (gf * sg).sum() * (sigma / (2.0 * m))


def sgr_omega(model, x, y, cov, sigma: float = 1.0, cutoff=None) -> Tensor:
    """(sigma / 2m) sum_i g_i^T Sigma g_i with g_i = grad_x log phi_{y_i}(x_i).

    The result is differentiable with respect to the model parameters;
    ``cov`` is treated as a constant.
    """
    xt = _leaf(x)
    if xt.ndim < 2:
        raise ContractError("sgr_omega expects a batch of inputs")
    g = input_log_prob_grad(model, xt, y, create_graph=True)
    return _quadratic(g, cov, sigma, cutoff)


def gn_omega(model, x, y) -> Tensor:
    """Gradient-norm penalty (1/2m) sum_i ||g_i||^2."""
    xt = _leaf(x)
    g = input_log_prob_grad(model, xt, y, create_graph=True)
    return _quadratic(g, None, 1.0)


def uncentered_correction(model, x, y, mean) -> Tensor:
    """Linear term -(1/m) sum_i g_i^T mu for perturbations with nonzero mean mu."""
    if mean is None:
        raise ConfigError("uncentered correction needs a tracked perturbation mean")
    xt = _leaf(x)
    g = _flat(input_log_prob_grad(model, xt, y, create_graph=True))
    mu = np.asarray(mean, dtype=np.float64).reshape(1, -1)
    if mu.shape[1] != g.shape[1]:
        raise ContractError(f"mean of length {mu.shape[1]} does not match input dimension {g.shape[1]}")
    return (g * Tensor(mu)).sum() * (-1.0 / g.shape[0])


def sgr_omega_logit(model, x, y, cov, sigma: float = 1.0, cutoff=None) -> Tensor:
    """Same penalty from logit gradients: grad phi_y minus its softmax-weighted class average."""
    xt = _leaf(x)
    z, grads = logit_input_grads(model, xt, create_graph=True)
    p = softmax(z)
    m = xt.shape[0]
    y = np.asarray(y, dtype=np.int64)
    Y = one_hot(y, model.num_classes)
    avg = None
    sel = None
    for k, gk in enumerate(grads):
        gk = _flat(gk)
        pk = p.reshape(m, model.num_classes)
        col = np.zeros((model.num_classes, 1))
        col[k, 0] = 1.0
        term = gk * (pk @ Tensor(col))
        avg = term if avg is None else avg + term
        chosen = gk * Tensor(Y[:, k:k + 1])
        sel = chosen if sel is None else sel + chosen
    return _quadratic(sel - avg, cov, sigma, cutoff)


def onelayer_closed_form(lin: LinearSoftmax, x, y, cov, sigma: float = 1.0, with_grad: bool = False):
    """Closed-form penalty for a linear softmax model, in plain numpy.

    Per sample a = w_y - W^T p(x); penalty (sigma / 2m) sum a^T Sigma a.
    With ``with_grad`` also returns (dW, db), derived by hand.
    """
    if not isinstance(lin, LinearSoftmax):
        raise ContractError("closed form applies to LinearSoftmax only")
    W = lin.params["W"].data
    b = lin.params["b"].data
    X = np.asarray(as_tensor(x).data, dtype=np.float64).reshape(-1, W.shape[1])
    y = np.asarray(y, dtype=np.int64)
    S = np.asarray(cov, dtype=np.float64) if not hasattr(cov, "matrix") else cov.matrix
    m = X.shape[0]
    z = X @ W.T + b
    z -= z.max(axis=1, keepdims=True)
    P = np.exp(z)
    P /= P.sum(axis=1, keepdims=True)
    A = W[y] - P @ W  # rows: w_y - <w>
    U = A @ S.T
    omega = sigma / (2 * m) * float(np.sum(A * U))
    if not with_grad:
        return omega
    # d/dW of 1/2 a^T S a through w_y, <w> = W^T p and p = softmax(W x + b)
    U = 0.5 * (A @ S + A @ S.T)
    dW = np.zeros_like(W)
    np.add.at(dW, y, U)
    dW -= P.T @ U
    V = U @ W.T
    s = P * (V - np.sum(P * V, axis=1, keepdims=True))
    dW -= s.T @ X
    db = -s.sum(axis=0)
    scale = sigma / m
    return omega, scale * dW, scale * db


def weight_decay(model, coef: float) -> Tensor | None:
    if coef == 0:
        return None
    total = None
    for p in model.weight_parameters():
        t = (p * p).sum()
        total = t if total is None else total + t
    return total * coef
