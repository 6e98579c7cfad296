"""Exact Gaussian-process regression with a squared-exponential kernel.

Zero-mean prior on centred targets, ARD or single-lengthscale kernel,
hyperparameters fitted by multi-start bounded L-BFGS-B on the negative
log-likelihood in log-space with analytic gradients.  Inference uses a
Cholesky factorisation with geometric jitter escalation.

Inputs are expected pre-scaled to the unit box; the optimisation layer
owns that scaling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import FitError, MicroforgeError

JITTER_START = 1e-8
JITTER_MAX = 1e-4

LOG_W_BOUNDS = (-10.0, 10.0)
LOG_SF2_BOUNDS = (-10.0, 10.0)
LOG_SE2_BOUNDS = (-15.0, 5.0)


class IllConditionedError(MicroforgeError):
    """Covariance stayed indefinite after maximal jitter escalation."""


@dataclass(frozen=True)
class GPHyperparameters:
    """Kernel and noise hyperparameters, stored in log-space.

    w_d = exp(log_w[d]) are inverse squared lengthscales; sf2 the signal
    variance; se2 the observation noise variance.
    """

    log_w: np.ndarray
    log_sf2: float
    log_se2: float

    def __post_init__(self):
        log_w = np.atleast_1d(np.asarray(self.log_w, dtype=np.float64)).copy()
        log_w.setflags(write=False)
        object.__setattr__(self, "log_w", log_w)

    @classmethod
    def from_values(cls, w, sf2: float, se2: float) -> "GPHyperparameters":
        w = np.atleast_1d(np.asarray(w, dtype=np.float64))
        if np.any(w <= 0) or sf2 <= 0 or se2 < 0:
            raise ValueError("w and sf2 must be positive, se2 non-negative")
        with np.errstate(divide="ignore"):
            return cls(np.log(w), float(np.log(sf2)), float(np.log(se2)))

    @property
    def w(self) -> np.ndarray:
        return np.exp(self.log_w)

    @property
    def sf2(self) -> float:
        return float(np.exp(self.log_sf2))

    @property
    def se2(self) -> float:
        return float(np.exp(self.log_se2))

    @property
    def dim(self) -> int:
        return self.log_w.size


def kernel_se(x_i, x_j, theta: GPHyperparameters) -> float:
    """sf2 * exp(-0.5 (x_i-x_j)^T W (x_i-x_j)) with W = diag(w)."""
    x_i = np.asarray(x_i, dtype=np.float64).ravel()
    x_j = np.asarray(x_j, dtype=np.float64).ravel()
    if x_i.size != x_j.size:
        raise ValueError("kernel inputs must share a dimension")
    d2 = float(np.sum(theta.w * (x_i - x_j) ** 2))
    return theta.sf2 * float(np.exp(-0.5 * d2))


def _kernel_matrix(xa: np.ndarray, xb: np.ndarray, theta: GPHyperparameters):
    """Noise-free kernel matrix between row sets, plus the weighted
    squared-distance matrix it derives from."""
    w = theta.w
    d2 = np.zeros((xa.shape[0], xb.shape[0]))
    for d in range(xa.shape[1]):
        diff = xa[:, d, None] - xb[None, :, d]
        d2 += w[d] * diff * diff
    return theta.sf2 * np.exp(-0.5 * d2), d2


def _chol_with_jitter(k_noisy: np.ndarray):
    """Lower Cholesky factor after geometric jitter escalation."""
    jitter = JITTER_START
    eye = np.eye(k_noisy.shape[0])
    while True:
        try:
            return cholesky(k_noisy + jitter * eye, lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        if jitter >= JITTER_MAX:
            raise IllConditionedError(
                f"covariance not positive definite at jitter {jitter:g}"
            )
        jitter = min(jitter * 10.0, JITTER_MAX)


def nll(x: np.ndarray, y: np.ndarray, theta: GPHyperparameters) -> float:
    """Negative log marginal likelihood via Cholesky factorisation."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    k_se, _ = _kernel_matrix(x, x, theta)
    k = k_se + theta.se2 * np.eye(len(y))
    chol, _ = _chol_with_jitter(k)
    alpha = cho_solve((chol, True), y)
    return float(
        0.5 * len(y) * np.log(2.0 * np.pi)
        + np.sum(np.log(np.diag(chol)))
        + 0.5 * y @ alpha
    )


def _theta_from_vector(vec: np.ndarray, dim: int, ard: bool) -> GPHyperparameters:
    if ard:
        return GPHyperparameters(vec[:dim].copy(), float(vec[dim]), float(vec[dim + 1]))
    return GPHyperparameters(np.full(dim, vec[0]), float(vec[1]), float(vec[2]))


def _nll_and_grad(vec, x, y, dim, ard):
    """NLL and its gradient in the packed log-hyperparameter vector."""
    theta = _theta_from_vector(np.asarray(vec), dim, ard)
    n = len(y)
    k_se, d2w = _kernel_matrix(x, x, theta)
    k = k_se + theta.se2 * np.eye(n)
    try:
        chol, _ = _chol_with_jitter(k)
    except IllConditionedError:
        return 1e25, np.zeros(len(vec))
    alpha = cho_solve((chol, True), y)
    value = (
        0.5 * n * np.log(2.0 * np.pi)
        + np.sum(np.log(np.diag(chol)))
        + 0.5 * y @ alpha
    )
    k_inv = cho_solve((chol, True), np.eye(n))
    a_mat = k_inv - np.outer(alpha, alpha)

    grad = np.empty(len(vec))
    if ard:
        w = theta.w
        for d in range(dim):
            diff = x[:, d, None] - x[None, :, d]
            dk = k_se * (-0.5 * w[d] * diff * diff)
            grad[d] = 0.5 * np.sum(a_mat * dk)
        grad[dim] = 0.5 * np.sum(a_mat * k_se)
        grad[dim + 1] = 0.5 * np.trace(a_mat) * theta.se2
    else:
        grad[0] = 0.5 * np.sum(a_mat * (k_se * (-0.5 * d2w)))
        grad[1] = 0.5 * np.sum(a_mat * k_se)
        grad[2] = 0.5 * np.trace(a_mat) * theta.se2
    return float(value), grad


class _ClampCounter:
    """Mutable tally of negative-variance clamps on a frozen model."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0


@dataclass(frozen=True)
class GPModel:
    """Immutable fitted model; shareable across threads for prediction."""

    x_train: np.ndarray  # N x D, already in the unit box
    y_centered: np.ndarray
    y_offset: float
    theta: GPHyperparameters
    chol: np.ndarray
    alpha_vec: np.ndarray
    jitter: float
    variance_clamps: _ClampCounter = field(
        default_factory=_ClampCounter, repr=False, compare=False
    )

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def build_model(x, y, theta: GPHyperparameters) -> GPModel:
    """Condition a model on (x, y) at fixed hyperparameters."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    y = np.asarray(y, dtype=np.float64).ravel().copy()
    if x.shape[0] != y.size:
        raise ValueError("x and y row counts differ")
    offset = float(np.mean(y))
    yc = y - offset
    k_se, _ = _kernel_matrix(x, x, theta)
    k = k_se + theta.se2 * np.eye(len(yc))
    chol, jitter = _chol_with_jitter(k)
    alpha = cho_solve((chol, True), yc)
    for arr in (x, yc, chol, alpha):
        arr.setflags(write=False)
    return GPModel(
        x_train=x,
        y_centered=yc,
        y_offset=offset,
        theta=theta,
        chol=chol,
        alpha_vec=alpha,
        jitter=jitter,
    )


def fit(
    x,
    y,
    starts: int = 5,
    ard: bool = False,
    seed: int = 0,
    warm_start: GPHyperparameters | None = None,
) -> GPModel:
    """Fit hyperparameters by multi-start bounded gradient descent.

    Start points are a seeded Latin hypercube over the log-space box, so
    repeated calls return identical models.  `warm_start` adds one start
    at a previous optimum.  Raises FitError when every start fails.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] < 2:
        raise ValueError("fitting needs at least two observations")
    if x.shape[0] != y.size:
        raise ValueError("x and y row counts differ")
    dim = x.shape[1]
    offset = float(np.mean(y))
    yc = y - offset

    n_ls = dim if ard else 1
    lows = np.array([LOG_W_BOUNDS[0]] * n_ls + [LOG_SF2_BOUNDS[0], LOG_SE2_BOUNDS[0]])
    highs = np.array([LOG_W_BOUNDS[1]] * n_ls + [LOG_SF2_BOUNDS[1], LOG_SE2_BOUNDS[1]])
    bounds = list(zip(lows, highs))

    rng = np.random.default_rng(seed)
    n_par = n_ls + 2
    starts_mat = np.empty((starts, n_par))
    for j in range(n_par):
        cells = (rng.permutation(starts) + rng.random(starts)) / starts
        starts_mat[:, j] = lows[j] + cells * (highs[j] - lows[j])
    start_points = list(starts_mat)
    if warm_start is not None:
        if ard:
            vec = np.concatenate(
                [warm_start.log_w, [warm_start.log_sf2, warm_start.log_se2]]
            )
        else:
            vec = np.array(
                [float(np.mean(warm_start.log_w)), warm_start.log_sf2,
                 warm_start.log_se2]
            )
        start_points.append(np.clip(vec, lows, highs))

    best = None
    failures = []
    for point in start_points:
        try:
            res = minimize(
                _nll_and_grad,
                point,
                args=(x, yc, dim, ard),
                method="L-BFGS-B",
                jac=True,
                bounds=bounds,
            )
        except Exception as exc:  # defensive: scipy internals
            failures.append(f"start {np.round(point, 3)}: {exc}")
            continue
        if not np.isfinite(res.fun):
            failures.append(f"start {np.round(point, 3)}: non-finite NLL")
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise FitError(
            "every hyperparameter start failed: " + "; ".join(failures)
        )
    theta = _theta_from_vector(best.x, dim, ard)
    return build_model(x, y, theta)


def predict(model: GPModel, x_new) -> tuple[float, float]:
    """Posterior mean and variance at `x_new`.

    Variance is the noise-free posterior, clamped at zero (clamps are
    tallied on the model).  For a 2-D batch input, returns arrays.
    """
    x_arr = np.asarray(x_new, dtype=np.float64)
    single = x_arr.ndim == 1
    pts = np.atleast_2d(x_arr)
    k_star, _ = _kernel_matrix(pts, model.x_train, model.theta)
    mu = k_star @ model.alpha_vec + model.y_offset
    v = solve_triangular(model.chol, k_star.T, lower=True)
    var = model.theta.sf2 - np.sum(v * v, axis=0)
    negative = var < 0
    if np.any(negative):
        model.variance_clamps.count += int(np.count_nonzero(negative))
        var = np.where(negative, 0.0, var)
    if single:
        return float(mu[0]), float(var[0])
    return mu, var


def predict_gradient(model: GPModel, x_new) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of the posterior mean and standard deviation.

    The sigma gradient is defined as zero wherever sigma vanishes.
    """
    x_arr = np.asarray(x_new, dtype=np.float64).ravel()
    pts = x_arr[None, :]
    k_star, _ = _kernel_matrix(pts, model.x_train, model.theta)
    k_star = k_star[0]
    diffs = x_arr[None, :] - model.x_train  # N x D
    w = model.theta.w
    dk = -(k_star[:, None] * diffs * w[None, :])  # N x D, rows dk_i/dx

    grad_mu = dk.T @ model.alpha_vec

    beta = cho_solve((model.chol, True), k_star)
    var = model.theta.sf2 - float(k_star @ beta)
    grad_var = -2.0 * (dk.T @ beta)
    sigma = np.sqrt(max(var, 0.0))
    if sigma <= 0.0:
        grad_sigma = np.zeros_like(grad_var)
    else:
        grad_sigma = grad_var / (2.0 * sigma)
    return grad_mu, grad_sigma


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_model(model: GPModel, path) -> None:
    """Text checkpoint; reload reproduces predictions to 1e-12."""
    lines = ["gp-checkpoint v1"]
    lines.append(f"d={model.dim}")
    lines.append(f"n={model.n_train}")
    lines.append(f"offset={float(model.y_offset)!r}")
    lines.append("log_w=" + " ".join(repr(float(v)) for v in model.theta.log_w))
    lines.append(f"log_sf2={float(model.theta.log_sf2)!r}")
    lines.append(f"log_se2={float(model.theta.log_se2)!r}")
    for row in model.x_train:
        lines.append("x= " + " ".join(repr(float(v)) for v in row))
    lines.append(
        "y= " + " ".join(repr(float(v + model.y_offset)) for v in model.y_centered)
    )
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> GPModel:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines or lines[0] != "gp-checkpoint v1":
        raise ValueError(f"{path}: not a recognised model checkpoint")
    fields: dict[str, str] = {}
    x_rows = []
    y_row = None
    for ln in lines[1:]:
        key, _, value = ln.partition("=")
        key = key.strip()
        if key == "x":
            x_rows.append([float(v) for v in value.split()])
        elif key == "y":
            y_row = [float(v) for v in value.split()]
        else:
            fields[key] = value.strip()
    try:
        dim = int(fields["d"])
        n = int(fields["n"])
        theta = GPHyperparameters(
            np.array([float(v) for v in fields["log_w"].split()]),
            float(fields["log_sf2"]),
            float(fields["log_se2"]),
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint ({exc})") from exc
    x = np.array(x_rows)
    if y_row is None or x.shape != (n, dim) or len(y_row) != n:
        raise ValueError(f"{path}: checkpoint dimensions are inconsistent")
    return build_model(x, np.array(y_row), theta)
