"""POD of snapshot matrices and Gaussian-process regression of modal coefficients.

The POD basis is computed with the method of snapshots: the small M x M Gram
matrix of the centered snapshots is diagonalized instead of the N x M
snapshot matrix, which is much cheaper when M << N.

Each modal coefficient gets its own GP with a Matérn-5/2 ARD kernel; the
hyperparameters (log lengthscales, log signal variance, log noise variance)
maximize the log marginal likelihood from several starting points.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

log = logging.getLogger(__name__)

SQRT5 = np.sqrt(5.0)
MIN_NOISE = 1e-10
MAX_JITTER = 1e-6


class PodError(ValueError):
    pass


class GprError(ValueError):
    pass


# ---------------------------------------------------------------------------
# POD
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PodBasis:
    mean: np.ndarray            # (N,)
    modes: np.ndarray           # (N, r), orthonormal columns
    singular_values: np.ndarray  # (r,), non-increasing

    @property
    def r(self) -> int:
        return self.modes.shape[1]

    @property
    def n_points(self) -> int:
        return self.mean.shape[0]

    def state(self):
        return {}, {"mean": self.mean, "modes": self.modes, "singular_values": self.singular_values}

    @classmethod
    def from_state(cls, cfg, arrays) -> "PodBasis":
        return cls(arrays["mean"], arrays["modes"].reshape(arrays["mean"].shape[0], -1),
                   arrays["singular_values"])


def fit_pod(snapshots, r: int = 50, rtol: float = 1e-7) -> PodBasis:
    """Top-``r`` POD modes of an (M, N) snapshot matrix (one snapshot per row).

    Singular values below ``rtol * s_1`` are treated as zero; asking for more
    modes than the numerical rank truncates the basis with a warning.
    """
    S = np.asarray(snapshots, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] < 1:
        raise PodError("snapshots must be a non-empty (M, N) matrix")
    M, N = S.shape
    if r < 1 or r > min(M, N):
        raise PodError(f"r must be in [1, min(M, N)] = [1, {min(M, N)}], got {r}")
    mean = S.mean(axis=0)
    X = S - mean
    G = X @ X.T
    lam, V = np.linalg.eigh(G)
    lam, V = lam[::-1], V[:, ::-1]
    s = np.sqrt(np.clip(lam, 0.0, None))
    rank = int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0
    if rank == 0:
        raise PodError("snapshots have zero variance; no modes to extract")
    if r > rank:
        warnings.warn(f"requested {r} modes but numerical rank is {rank}; truncating")
        r = rank
    s, V = s[:r], V[:, :r]
    U = (X.T @ V) / s
    # small modes lose orthogonality in the Gram route; one QR pass restores it
    Q, R = np.linalg.qr(U)
    U = Q * np.sign(np.diag(R))
    # deterministic sign: largest-magnitude entry of each mode positive
    pivot = np.argmax(np.abs(U), axis=0)
    U = U * np.sign(U[pivot, np.arange(r)])
    return PodBasis(mean, U, s)


def project(basis: PodBasis, field) -> np.ndarray:
    """Modal coefficients ``modes^T (field - mean)``; accepts (N,) or (k, N)."""
    f = np.asarray(field, dtype=np.float64)
    if f.shape[-1] != basis.n_points:
        raise PodError(f"field length {f.shape[-1]} != basis length {basis.n_points}")
    return (f - basis.mean) @ basis.modes


def reconstruct(basis: PodBasis, coeffs) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64)
    if c.shape[-1] != basis.r:
        raise PodError(f"got {c.shape[-1]} coefficients for a rank-{basis.r} basis")
    return basis.mean + c @ basis.modes.T


# ---------------------------------------------------------------------------
# GPR
# ---------------------------------------------------------------------------

def matern52(X1, X2, lengthscales, signal_var) -> np.ndarray:
    D = (X1[:, None, :] - X2[None, :, :]) / lengthscales
    r = np.sqrt(np.sum(D * D, axis=-1))
    return signal_var * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)


def _cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    jitter = 0.0
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K))), jitter
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 100.0
            if jitter > MAX_JITTER:
                raise GprError(f"kernel matrix not positive definite with jitter up to {MAX_JITTER:g}")


def _neg_lml(theta, X, y, fixed_noise):
    d = X.shape[1]
    ell = np.exp(theta[:d])
    sf2 = np.exp(theta[d])
    sn2 = fixed_noise if fixed_noise is not None else max(np.exp(theta[d + 1]), MIN_NOISE)
    Dsq = ((X[:, None, :] - X[None, :, :]) / ell) ** 2
    r = np.sqrt(Dsq.sum(-1))
    e = np.exp(-SQRT5 * r)
    Kf = sf2 * (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * e
    n = len(y)
    try:
        L, _ = _cholesky(Kf + sn2 * np.eye(n))
    except GprError:
        return 1e25, np.zeros_like(theta)
    alpha = cho_solve((L, True), y)
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(n))
    g = np.empty_like(theta)
    common = sf2 * (5.0 / 3.0) * (1.0 + SQRT5 * r) * e
    for j in range(d):
        g[j] = -0.5 * np.sum(W * (common * Dsq[:, :, j]))
    g[d] = -0.5 * np.sum(W * Kf)
    if fixed_noise is None:
        g[d + 1] = -0.5 * np.trace(W) * sn2
    return float(nll), g


@dataclass(frozen=True)
class GprModel:
    """Independent GPs, one per output column, on standardized inputs/targets."""

    X: np.ndarray            # (M, d) standardized training inputs
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray       # (k,)
    y_std: np.ndarray
    lengthscales: np.ndarray  # (k, d), standardized input units
    signal_var: np.ndarray   # (k,)
    noise_var: np.ndarray    # (k,)
    chol: np.ndarray         # (k, M, M)
    alpha: np.ndarray        # (k, M)

    @property
    def n_outputs(self) -> int:
        return len(self.y_mean)

    def log_marginal_likelihood(self, j: int = 0) -> float:
        ys = self._ys(j)
        L = self.chol[j]
        n = len(ys)
        return float(-0.5 * ys @ self.alpha[j] - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi))

    def _ys(self, j):
        # standardized training targets recovered from alpha: y = K alpha
        return self.chol[j] @ (self.chol[j].T @ self.alpha[j])

    def predict(self, mu, return_var: bool = False):
        Xs = (np.atleast_2d(np.asarray(mu, dtype=np.float64)) - self.x_mean) / self.x_std
        if Xs.shape[1] != self.X.shape[1]:
            raise GprError(f"input dim {Xs.shape[1]} != {self.X.shape[1]}")
        mean = np.empty((len(Xs), self.n_outputs))
        var = np.empty_like(mean)
        for j in range(self.n_outputs):
            Ks = matern52(Xs, self.X, self.lengthscales[j], self.signal_var[j])
            mean[:, j] = Ks @ self.alpha[j]
            if return_var:
                v = solve_triangular(self.chol[j], Ks.T, lower=True)
                var[:, j] = np.clip(self.signal_var[j] - np.sum(v * v, axis=0), 0.0, None)
        mean = mean * self.y_std + self.y_mean
        if return_var:
            return mean, var * self.y_std ** 2
        return mean

    def state(self):
        return {}, {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_state(cls, cfg, arrays) -> "GprModel":
        return cls(**{k: arrays[k] for k in cls.__dataclass_fields__})


def fit_gpr(mu, targets, restarts: int = 5, noise: float | None = None,
            seed: int = 0) -> GprModel:
    """Fit one Matérn-5/2 ARD GP per target column.

    Parameters
    ----------
    mu : (M, d) training inputs, standardized internally.
    targets : (M,) or (M, k) outputs, standardized internally per column.
    restarts : number of optimizer starts (the first is a fixed default start).
    noise : fix the noise variance (standardized units) instead of fitting it.
    """
    X = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 2 or X.shape[0] != Y.shape[0]:
        raise GprError("need >= 2 training points with matching target rows")
    if noise is not None and noise < MIN_NOISE:
        raise GprError(f"noise variance must be >= {MIN_NOISE:g}")
    x_mean, x_std = X.mean(0), X.std(0)
    x_std = np.where(x_std > 0, x_std, 1.0)
    y_mean, y_std = Y.mean(0), Y.std(0)
    y_std = np.where(y_std > 0, y_std, 1.0)
    Xs = (X - x_mean) / x_std
    Ys = (Y - y_mean) / y_std
    M, d = Xs.shape
    n_theta = d + 1 + (noise is None)
    bounds = [(np.log(1e-2), np.log(1e3))] * d + [(np.log(1e-4), np.log(1e4))]
    if noise is None:
        bounds.append((np.log(MIN_NOISE), np.log(1.0)))
    rng = np.random.default_rng(seed)
    starts = [np.array([0.0] * d + [0.0] + ([np.log(1e-4)] if noise is None else []))]
    for _ in range(max(restarts, 1) - 1):
        starts.append(np.array([rng.uniform(lo, hi) for lo, hi in bounds]))

    k = Y.shape[1]
    ells, sf2s, sn2s = np.empty((k, d)), np.empty(k), np.empty(k)
    chols, alphas = np.empty((k, M, M)), np.empty((k, M))
    for j in range(k):
        y = Ys[:, j]
        best = None
        for t0 in starts:
            res = minimize(_neg_lml, t0, args=(Xs, y, noise), jac=True,
                           method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        th = best.x
        ells[j] = np.exp(th[:d])
        sf2s[j] = np.exp(th[d])
        sn2s[j] = noise if noise is not None else max(np.exp(th[d + 1]), MIN_NOISE)
        K = matern52(Xs, Xs, ells[j], sf2s[j]) + sn2s[j] * np.eye(M)
        chols[j], _ = _cholesky(K)
        alphas[j] = cho_solve((chols[j], True), y)
        log.debug("gp %d: ell=%s sf2=%.3g sn2=%.3g nll=%.4g", j, ells[j], sf2s[j], sn2s[j], best.fun)
    return GprModel(Xs, x_mean, x_std, y_mean, y_std, ells, sf2s, sn2s, chols, alphas)


# ---------------------------------------------------------------------------
# combined surrogate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PodGprModel:
    basis: PodBasis
    gpr: GprModel

    def state(self):
        cfg = {}
        arrays = {}
        for name, obj in (("basis", self.basis), ("gpr", self.gpr)):
            _, a = obj.state()
            arrays.update({f"{name}.{k}": v for k, v in a.items()})
        return cfg, arrays

    @classmethod
    def from_state(cls, cfg, arrays) -> "PodGprModel":
        part = lambda p: {k[len(p) + 1:]: v for k, v in arrays.items() if k.startswith(p + ".")}
        return cls(PodBasis.from_state({}, part("basis")), GprModel.from_state({}, part("gpr")))


def fit_pod_gpr(mu, snapshots, r: int = 50, restarts: int = 5, noise: float | None = None,
                seed: int = 0) -> PodGprModel:
    basis = fit_pod(snapshots, r)
    coeffs = project(basis, snapshots)
    return PodGprModel(basis, fit_gpr(mu, coeffs, restarts=restarts, noise=noise, seed=seed))


def pod_gpr_predict(basis: PodBasis, gpr: GprModel, mu_star, return_var: bool = False):
    """Field(s) at new parameters; optionally the diagonal field variance."""
    mu_star = np.atleast_2d(np.asarray(mu_star, dtype=np.float64))
    lo = gpr.X.min(0) - 3 * gpr.lengthscales[0]
    hi = gpr.X.max(0) + 3 * gpr.lengthscales[0]
    ms = (mu_star - gpr.x_mean) / gpr.x_std
    if np.any(ms < lo) or np.any(ms > hi):
        warnings.warn("query parameters lie more than 3 lengthscales outside the training hull")
    if return_var:
        c, cv = gpr.predict(mu_star, return_var=True)
        return reconstruct(basis, c), cv @ (basis.modes ** 2).T
    return reconstruct(basis, gpr.predict(mu_star))
