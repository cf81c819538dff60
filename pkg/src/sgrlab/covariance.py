"""Second-moment estimates of perturbations.

Two storage forms are supported: a dense ``d x d`` matrix of raw second
moments, and a radial covariance function that keeps, for every channel
pair, one number per integer pixel displacement.  Both are aggregated with an
exponentially weighted moving average and can be applied to gradient batches
as a constant linear map inside the autodiff graph.

Images are flattened in (row, column, channel) order.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .autodiff import Tensor, as_tensor, linear_operator
from .errors import CapacityError, ContractError, DegenerateEstimateError

MAX_DENSE_DIM = 4096


@dataclass
class DenseCov:
    matrix: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def avg_diag(self) -> float:
        return float(np.mean(np.diag(self.matrix)))

    def scaled(self, s: float) -> "DenseCov":
        return DenseCov(self.matrix * s)


@dataclass
class RadialCovFun:
    """``values[c1, c2, r]``: mean second moment over pixel pairs at rounded distance r."""

    values: np.ndarray
    counts: np.ndarray
    geometry: tuple[int, int, int]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def max_r(self) -> int:
        return self.values.shape[-1] - 1

    @property
    def dim(self) -> int:
        h, w, c = self.geometry
        return h * w * c

    def avg_diag(self) -> float:
        c = self.geometry[2]
        return float(np.mean([self.values[k, k, 0] for k in range(c)]))

    def scaled(self, s: float) -> "RadialCovFun":
        return RadialCovFun(self.values * s, self.counts.copy(), self.geometry)

    def profile(self) -> np.ndarray:
        """Channel-averaged intra-channel covariance function."""
        c = self.geometry[2]
        return np.mean([self.values[k, k] for k in range(c)], axis=0)


def _check_geometry(geometry):
    geometry = tuple(int(g) for g in geometry)
    if len(geometry) == 2:
        geometry = geometry + (1,)
    if len(geometry) != 3 or min(geometry) < 1:
        raise ContractError(f"geometry must be (H, W, C), got {geometry}")
    return geometry


def max_displacement(geometry) -> int:
    h, w, _ = _check_geometry(geometry)
    return int(np.rint(np.hypot(h - 1, w - 1)))


@lru_cache(maxsize=16)
def _pair_bins(geometry):
    """Rounded displacement and channel index for every flattened coordinate pair."""
    h, w, c = geometry
    rows, cols, chans = np.meshgrid(np.arange(h), np.arange(w), np.arange(c), indexing="ij")
    rows, cols, chans = rows.ravel(), cols.ravel(), chans.ravel()
    dist = np.rint(np.hypot(rows[:, None] - rows[None, :], cols[:, None] - cols[None, :])).astype(np.int64)
    return dist, chans


@lru_cache(maxsize=16)
def _offset_bins(geometry):
    """Rounded distance and pair count for every 2-D displacement (dy, dx)."""
    h, w, _ = geometry
    dy = np.arange(-(h - 1), h)[:, None]
    dx = np.arange(-(w - 1), w)[None, :]
    r = np.rint(np.hypot(dy, dx)).astype(np.int64)
    n_pairs = (h - np.abs(dy)) * (w - np.abs(dx))
    return r, n_pairs


def _as_matrix(perturbations) -> np.ndarray:
    xi = np.asarray(as_tensor(perturbations).data, dtype=np.float64)
    if xi.ndim == 0 or xi.shape[0] == 0:
        raise ContractError("need at least one perturbation")
    return xi.reshape(xi.shape[0], -1)


def batch_second_moment(perturbations) -> DenseCov:
    """(1/m) sum_i xi_i xi_i^T."""
    xi = _as_matrix(perturbations)
    m = xi.shape[0]
    if xi.shape[1] > MAX_DENSE_DIM:
        raise CapacityError(f"dense covariance of dimension {xi.shape[1]} exceeds cap {MAX_DENSE_DIM}")
    S = xi.T @ xi / m
    return DenseCov(0.5 * (S + S.T))


def radial_estimate(perturbations, geometry) -> RadialCovFun:
    """Bin-averaged second moments keyed by (channel pair, rounded pixel distance).

    Empty bins hold value 0 with count 0.
    """
    geometry = _check_geometry(geometry)
    h, w, c = geometry
    xi = _as_matrix(perturbations)
    if xi.shape[1] != h * w * c:
        raise ContractError(f"perturbations of length {xi.shape[1]} do not match geometry {geometry}")
    R = max_displacement(geometry)
    if h * w * c <= MAX_DENSE_DIM:
        return _radial_from_dense(batch_second_moment(xi).matrix, geometry)
    return _radial_from_fft(xi, geometry, R)


def _radial_from_dense(S, geometry):
    h, w, c = geometry
    R = max_displacement(geometry)
    dist, chans = _pair_bins(geometry)
    key = ((chans[:, None] * c + chans[None, :]) * (R + 1) + dist).ravel()
    nb = c * c * (R + 1)
    sums = np.bincount(key, weights=S.ravel(), minlength=nb).reshape(c, c, R + 1)
    counts = np.bincount(key, minlength=nb).reshape(c, c, R + 1)
    return _finish_radial(sums, counts, geometry)


def _radial_from_fft(xi, geometry, R):
    h, w, c = geometry
    m = xi.shape[0]
    imgs = xi.reshape(m, h, w, c)
    r_off, n_pairs = _offset_bins(geometry)
    sums = np.zeros((c, c, R + 1))
    counts = np.zeros((c, c, R + 1), dtype=np.int64)
    for c1 in range(c):
        for c2 in range(c):
            # sum_p a(p) b(p + delta) == correlation of a with b
            corr = fftconvolve(imgs[:, ::-1, ::-1, c1], imgs[:, :, :, c2], axes=(1, 2)).sum(axis=0)
            sums[c1, c2] = np.bincount(r_off.ravel(), weights=corr.ravel(), minlength=R + 1)
            counts[c1, c2] = np.bincount(r_off.ravel(), weights=n_pairs.ravel(), minlength=R + 1)
    return _finish_radial(sums / m, counts, geometry)


def _finish_radial(sums, counts, geometry):
    with np.errstate(invalid="ignore", divide="ignore"):
        vals = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    vals = 0.5 * (vals + vals.transpose(1, 0, 2))
    return RadialCovFun(vals, counts.astype(np.int64), geometry)


def radial_from_function(geometry, fn, inter_scale: float = 1.0) -> RadialCovFun:
    """Covariance function ``fn(r)`` within a channel and ``inter_scale * fn(r)`` across."""
    geometry = _check_geometry(geometry)
    c = geometry[2]
    R = max_displacement(geometry)
    base = np.asarray(fn(np.arange(R + 1, dtype=np.float64)), dtype=np.float64)
    vals = np.empty((c, c, R + 1))
    for a in range(c):
        for b in range(c):
            vals[a, b] = base if a == b else inter_scale * base
    return RadialCovFun(vals, bin_counts(geometry), geometry)


def bin_counts(geometry) -> np.ndarray:
    geometry = _check_geometry(geometry)
    c = geometry[2]
    R = max_displacement(geometry)
    r_off, n_pairs = _offset_bins(geometry)
    per = np.bincount(r_off.ravel(), weights=n_pairs.ravel(), minlength=R + 1).astype(np.int64)
    return np.broadcast_to(per, (c, c, R + 1)).copy()


def radial_to_dense(rc: RadialCovFun, cutoff: int | None = None, max_dim: int = MAX_DENSE_DIM) -> DenseCov:
    """Expand a covariance function to the full matrix; entries beyond ``cutoff`` are zero."""
    d = rc.dim
    if d > max_dim:
        raise CapacityError(f"dense expansion of dimension {d} exceeds cap {max_dim}")
    dist, chans = _pair_bins(rc.geometry)
    M = rc.values[chans[:, None], chans[None, :], dist]
    if cutoff is not None:
        M = np.where(dist <= cutoff, M, 0.0)
    return DenseCov(M)


def default_cutoff(rc: RadialCovFun, rel: float = 1e-3) -> int:
    """Smallest displacement where the profile falls below ``rel`` of its zero-lag value."""
    prof = rc.profile()
    small = np.nonzero(np.abs(prof) < rel * abs(prof[0]))[0]
    small = small[small > 0]
    return int(min(small[0], rc.max_r)) if small.size else rc.max_r


def decay_length(profile) -> float:
    """Displacement where a covariance function first reaches 1/e of its zero-lag value.

    Linear interpolation between integer bins; NaN if it never gets there.
    """
    prof = np.asarray(profile, dtype=np.float64)
    if prof.size == 0 or prof[0] <= 0:
        return float("nan")
    target = prof[0] / np.e
    below = np.nonzero(prof <= target)[0]
    if below.size == 0:
        return float("nan")
    r = int(below[0])
    if r == 0:
        return 0.0
    p0, p1 = prof[r - 1], prof[r]
    return float(r - 1 + (p0 - target) / (p0 - p1))


# -- estimator ------------------------------------------------------------

@dataclass
class CovEstimator:
    """Running EWMA of batch second moments (dense matrix or radial function)."""

    mode: str = "dense"
    beta: float = 0.1
    geometry: tuple[int, int, int] | None = None
    track_mean: bool = False
    estimate: DenseCov | RadialCovFun | None = None
    mean: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        if self.mode not in ("dense", "radial"):
            raise ContractError(f"mode must be 'dense' or 'radial', got {self.mode!r}")
        if not 0.0 < self.beta <= 1.0:
            raise ContractError(f"beta must lie in (0, 1], got {self.beta}")
        if self.mode == "radial":
            if self.geometry is None:
                raise ContractError("radial mode needs image geometry")
            self.geometry = _check_geometry(self.geometry)

    def batch_cov(self, perturbations):
        if self.mode == "dense":
            return batch_second_moment(perturbations)
        return radial_estimate(perturbations, self.geometry)

    def update(self, perturbations) -> "CovEstimator":
        """Fold one batch of perturbations into the running estimate (in place)."""
        xi = _as_matrix(perturbations)
        new = ewma_update(self, self.batch_cov(xi))
        if self.track_mean:
            mu = xi.mean(axis=0)
            new.mean = mu if self.mean is None else (1 - self.beta) * self.mean + self.beta * mu
        self.estimate, self.t, self.mean = new.estimate, new.t, new.mean
        return self

    def avg_diag(self) -> float:
        if self.estimate is None:
            raise DegenerateEstimateError("no covariance estimate yet")
        return self.estimate.avg_diag()


def ewma_update(est: CovEstimator, batch_cov) -> CovEstimator:
    """Return a copy of ``est`` with (1 - beta) * old + beta * batch.

    With no prior estimate the first batch is taken as-is.
    """
    if est.mode == "dense" and not isinstance(batch_cov, DenseCov):
        raise ContractError("dense estimator needs a DenseCov batch")
    if est.mode == "radial" and not isinstance(batch_cov, RadialCovFun):
        raise ContractError("radial estimator needs a RadialCovFun batch")
    if est.estimate is None:
        new = _copy_cov(batch_cov)
    elif est.mode == "dense":
        if batch_cov.matrix.shape != est.estimate.matrix.shape:
            raise ContractError(f"shape mismatch {batch_cov.matrix.shape} vs {est.estimate.matrix.shape}")
        new = DenseCov((1 - est.beta) * est.estimate.matrix + est.beta * batch_cov.matrix)
    else:
        if batch_cov.values.shape != est.estimate.values.shape:
            raise ContractError(f"shape mismatch {batch_cov.values.shape} vs {est.estimate.values.shape}")
        new = RadialCovFun((1 - est.beta) * est.estimate.values + est.beta * batch_cov.values,
                           np.maximum(est.estimate.counts, batch_cov.counts), est.geometry)
    return dataclasses.replace(est, estimate=new, t=est.t + 1)


def _copy_cov(cov):
    if isinstance(cov, DenseCov):
        return DenseCov(cov.matrix.copy())
    return RadialCovFun(cov.values.copy(), cov.counts.copy(), cov.geometry)


def _resolve(cov):
    if isinstance(cov, CovEstimator):
        if cov.estimate is None:
            raise DegenerateEstimateError("estimator has not seen any perturbations")
        return cov.estimate
    if isinstance(cov, (DenseCov, RadialCovFun)):
        return cov
    return DenseCov(np.asarray(cov, dtype=np.float64))


def scale_factor(cov, c: float) -> float:
    """sigma such that sigma * (average diagonal of cov) == c."""
    avg = _resolve(cov).avg_diag()
    if not avg > 0:
        raise DegenerateEstimateError(f"average diagonal {avg} is not positive; no perturbation signal yet")
    return float(c) / avg


def dataset_diag_constant(inputs) -> float:
    """Mean over coordinates of the per-coordinate population variance."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] < 2:
        raise ContractError("need at least two samples")
    return float(np.var(x.reshape(x.shape[0], -1), axis=0).mean())


def sigma_vecmul(cov, g, cutoff: int | None = None) -> Tensor:
    """Apply the (constant) second-moment matrix to each row of ``g``.

    ``g`` may be a single vector/image or a batch.  In radial mode only pixel
    pairs with rounded distance <= ``cutoff`` contribute (default: the radial
    function's own cutoff).  The covariance is never differentiated.
    """
    cov = _resolve(cov)
    g = as_tensor(g)
    d = cov.dim
    if g.size == 0 or g.size % d or (g.size != d and g.shape[0] * d != g.size):
        raise ContractError(f"gradient of shape {g.shape} does not match covariance dimension {d}")
    shape = g.shape
    if isinstance(cov, DenseCov):
        M = cov.matrix
        fn = lambda a: (a.reshape(-1, d) @ M).reshape(shape)  # noqa: E731
        adj = lambda a: (a.reshape(-1, d) @ M.T).reshape(shape)  # noqa: E731
        return linear_operator(g, fn, adj, name="sigma_vecmul")
    if cutoff is None:
        cutoff = default_cutoff(cov)
    if d <= MAX_DENSE_DIM:
        key = ("dense", cutoff)
        if key not in cov._cache:
            cov._cache[key] = radial_to_dense(cov, cutoff).matrix
        M = cov._cache[key]
        fn = lambda a: (a.reshape(-1, d) @ M).reshape(shape)  # noqa: E731
        adj = lambda a: (a.reshape(-1, d) @ M.T).reshape(shape)  # noqa: E731
        return linear_operator(g, fn, adj, name="sigma_vecmul")
    kernel = _radial_kernel(cov, cutoff)
    fn = lambda a: _radial_apply(a, kernel, cov.geometry).reshape(shape)  # noqa: E731
    adj = lambda a: _radial_apply(a, kernel.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1], cov.geometry).reshape(shape)  # noqa: E731
    return linear_operator(g, fn, adj, name="sigma_vecmul")


def _radial_kernel(rc: RadialCovFun, cutoff: int) -> np.ndarray:
    """kernel[ci, cj, dy + K, dx + K] = cov[ci, cj][round(|(dy, dx)|)] within the cutoff."""
    h, w, _ = rc.geometry
    k = min(cutoff, max(h, w) - 1)
    dy = np.arange(-k, k + 1)[:, None]
    dx = np.arange(-k, k + 1)[None, :]
    r = np.rint(np.hypot(dy, dx)).astype(np.int64)
    inside = r <= cutoff
    r = np.minimum(r, rc.max_r)
    ker = rc.values[:, :, r] * inside
    return ker


def _radial_apply(a, kernel, geometry):
    h, w, c = geometry
    imgs = a.reshape(-1, h, w, c)
    k = kernel.shape[-1] // 2
    out = np.zeros_like(imgs)
    for ci in range(c):
        for cj in range(c):
            # out_i = sum_j K(p_j - p_i) g_j, i.e. correlation with the kernel
            full = fftconvolve(imgs[:, :, :, cj], kernel[ci, cj][None, ::-1, ::-1], axes=(1, 2))
            out[:, :, :, ci] += full[:, k:k + h, k:k + w]
    return out


# -- export ---------------------------------------------------------------

def write_dense_csv(path, matrix) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        m = np.asarray(matrix)
        wr.writerow([f"c{j}" for j in range(m.shape[1])])
        for row in m:
            wr.writerow([repr(float(v)) for v in row])
    return path


def write_covfun_csv(path, rc: RadialCovFun) -> Path:
    path = Path(path)
    c = rc.geometry[2]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["channel_pair", "r", "value", "count"])
        for a in range(c):
            for b in range(c):
                for r in range(rc.max_r + 1):
                    wr.writerow([f"{a}-{b}", r, repr(float(rc.values[a, b, r])), int(rc.counts[a, b, r])])
    return path


def normalized_center_crop(matrix, trim: float = 0.25) -> np.ndarray:
    """Trim ``trim`` of the rows/columns on each side, then scale so max |entry| == 1."""
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    lo = int(np.floor(n * trim))
    hi = n - lo
    sub = m[lo:hi, lo:hi]
    peak = np.max(np.abs(sub)) if sub.size else 0.0
    return sub / peak if peak > 0 else sub
