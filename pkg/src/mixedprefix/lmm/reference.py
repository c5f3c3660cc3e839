"""
mixedprefix.lmm.reference

Gaussian linear mixed model with group-level random effects:

    y_j = X_j μ + Z_j b_j + e,   b_j ~ N(0, G),   e ~ N(0, ε² I)

Z_j is the intercept column (random intercepts) or the full design
(random intercepts and slopes); G is diagonal. With known variances μ is
the GLS estimate and b_j the BLUP; in estimated mode the log-variances are
fitted by gradient ascent on the marginal log-likelihood (μ profiled out).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Sequence, Union

import numpy as np
from scipy import linalg

from mixedprefix.autodiff.rng import RngStream
from mixedprefix.errors import ConvergenceError, CorpusFormatError, RankDeficientError
from mixedprefix.utils.files import read_csv, write_json
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.lmm")

VarianceMode = Literal["known", "estimated"]


@dataclass
class GroupedDataset:
    X: np.ndarray
    y: np.ndarray
    groups: list[str]
    columns: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        self.groups = [str(g) for g in self.groups]
        if self.X.shape[0] != self.y.size or len(self.groups) != self.y.size:
            raise ValueError("X, y and groups must have one row per observation")
        if not self.columns:
            self.columns = ["intercept", *(f"x{i}" for i in range(1, self.X.shape[1]))]

    @classmethod
    def intercept_only(cls, y: Sequence[float], groups: Sequence[Any]) -> "GroupedDataset":
        return cls(np.ones((len(y), 1)), np.asarray(y, dtype=np.float64), list(groups), ["intercept"])

    @classmethod
    def from_csv(
        cls,
        path: Path,
        x_columns: Sequence[str] = (),
        y_column: str = "y",
        group_column: str = "group",
        add_intercept: bool = True,
    ) -> "GroupedDataset":
        rows = read_csv(Path(path))
        if not rows:
            raise CorpusFormatError(f"{path}: no observations")
        needed = [*x_columns, y_column, group_column]
        missing = [c for c in needed if c not in rows[0]]
        if missing:
            raise CorpusFormatError(f"{path}: missing columns {missing}", {"missing": missing})
        try:
            xs = [[float(r[c]) for c in x_columns] for r in rows]
            y = [float(r[y_column]) for r in rows]
        except ValueError as exc:
            raise CorpusFormatError(f"{path}: non-numeric value ({exc})") from exc
        X = np.asarray(xs, dtype=np.float64).reshape(len(rows), len(x_columns))
        columns = list(x_columns)
        if add_intercept:
            X = np.hstack([np.ones((len(rows), 1)), X])
            columns = ["intercept", *columns]
        return cls(X, np.asarray(y), [r[group_column] for r in rows], columns)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def group_names(self) -> list[str]:
        return list(dict.fromkeys(self.groups))

    def group_rows(self) -> Dict[str, np.ndarray]:
        rows: Dict[str, list[int]] = {}
        for i, g in enumerate(self.groups):
            rows.setdefault(g, []).append(i)
        return {g: np.asarray(r) for g, r in rows.items()}

    def sizes(self) -> Dict[str, int]:
        return {g: len(r) for g, r in self.group_rows().items()}


def _lstsq(X: np.ndarray, y: np.ndarray, what: str) -> np.ndarray:
    if X.shape[0] == 0 or np.linalg.matrix_rank(X) < X.shape[1]:
        raise RankDeficientError(f"{what}: design of shape {X.shape} is rank deficient", {"shape": list(X.shape)})
    coef, *_ = linalg.lstsq(X, y)
    return coef


def fit_complete_pool(data: GroupedDataset) -> np.ndarray:
    """Ordinary least squares on all observations."""
    return _lstsq(data.X, data.y, "complete pool")


@dataclass
class NoPoolFit:
    coefficients: Dict[str, np.ndarray]
    flagged: list[str]

    def to_dict(self) -> Dict[str, Any]:
        return {"coefficients": {g: c.tolist() for g, c in self.coefficients.items()}, "flagged": self.flagged}


def fit_no_pool(data: GroupedDataset) -> NoPoolFit:
    """Independent least squares per group; underdetermined groups are flagged and omitted."""
    coefs: Dict[str, np.ndarray] = {}
    flagged: list[str] = []
    for g, rows in data.group_rows().items():
        try:
            coefs[g] = _lstsq(data.X[rows], data.y[rows], f"group {g}")
        except RankDeficientError:
            flagged.append(g)
            log.warning("group %s is underdetermined (%d observations); no coefficient", g, len(rows))
    return NoPoolFit(coefs, flagged)


@dataclass
class GroupCoefficients:
    mu: np.ndarray
    sigma: np.ndarray
    noise: float
    offsets: Dict[str, np.ndarray]
    columns: list[str]
    mode: str = "known"
    iterations: int = 0
    log_likelihood: Optional[float] = None
    trace: list[float] = field(default_factory=list)

    def coefficients(self, group: str) -> np.ndarray:
        """β_j = μ + b_j; a group without data gets μ."""
        beta = self.mu.copy()
        b = self.offsets.get(group)
        if b is not None:
            beta[: b.size] += b
        return beta

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "columns": self.columns,
            "mu": self.mu.tolist(),
            "sigma": self.sigma.tolist(),
            "noise": self.noise,
            "offsets": {g: b.tolist() for g, b in self.offsets.items()},
            "coefficients": {g: self.coefficients(g).tolist() for g in self.offsets},
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
        }


def _random_design(data: GroupedDataset, random_slopes: bool) -> int:
    return data.n_features if random_slopes else 1


def _gls(data: GroupedDataset, sigma: np.ndarray, noise: float, q: int) -> tuple[np.ndarray, Dict[str, np.ndarray], float]:
    """GLS μ, BLUP offsets and the marginal log-likelihood at given variances."""
    G_inv = np.diag(1.0 / sigma**2)
    e2 = noise**2
    XtVX = np.zeros((data.n_features, data.n_features))
    XtVy = np.zeros(data.n_features)
    parts = []
    logdet = 0.0
    for g, rows in data.group_rows().items():
        X, y = data.X[rows], data.y[rows]
        Z = X[:, :q]
        M = linalg.cho_factor(Z.T @ Z + e2 * G_inv)
        # V^{-1} = (I - Z M^{-1} Z') / ε²
        def vinv(A: np.ndarray, Z=Z, M=M) -> np.ndarray:
            return (A - Z @ linalg.cho_solve(M, Z.T @ A)) / e2

        XtVX += X.T @ vinv(X)
        XtVy += X.T @ vinv(y)
        # log|V| = n log ε² + log|G| + log|M| - q log ε²
        logdet += (len(rows) - q) * math.log(e2) + float(np.sum(np.log(sigma**2))) + 2.0 * float(np.sum(np.log(np.diag(M[0]))))
        parts.append((g, X, y, Z, M, vinv))
    # lstsq tolerates the near-singular XtVX of very wide priors
    mu, *_ = linalg.lstsq(XtVX, XtVy)
    offsets: Dict[str, np.ndarray] = {}
    quad = 0.0
    n = 0
    for g, X, y, Z, M, vinv in parts:
        r = y - X @ mu
        vr = vinv(r)
        offsets[g] = linalg.cho_solve(M, Z.T @ r)
        quad += float(r @ vr)
        n += len(r)
    loglik = -0.5 * (n * math.log(2 * math.pi) + logdet + quad)
    return mu, offsets, loglik


def _loglik_grad(data: GroupedDataset, theta: np.ndarray, q: int) -> tuple[float, np.ndarray, np.ndarray, Dict[str, np.ndarray]]:
    """Log-likelihood and its gradient in θ = (log σ²_1..q, log ε²), μ at its GLS value."""
    sigma = np.exp(0.5 * theta[:q])
    noise = math.exp(0.5 * theta[q])
    mu, offsets, loglik = _gls(data, sigma, noise, q)
    grad = np.zeros(q + 1)
    for g, rows in data.group_rows().items():
        X, y = data.X[rows], data.y[rows]
        Z = X[:, :q]
        V = Z @ np.diag(sigma**2) @ Z.T + noise**2 * np.eye(len(rows))
        cV = linalg.cho_factor(V)
        Vinv = linalg.cho_solve(cV, np.eye(len(rows)))
        a = Vinv @ (y - X @ mu)
        for k in range(q):
            dV = sigma[k] ** 2 * np.outer(Z[:, k], Z[:, k])
            grad[k] += 0.5 * (a @ dV @ a - np.sum(Vinv * dV))
        grad[q] += 0.5 * noise**2 * (a @ a - np.trace(Vinv))
    return loglik, grad, mu, offsets


def fit_mixed(
    data: GroupedDataset,
    mode: VarianceMode = "known",
    sigma: Union[float, Sequence[float], None] = None,
    noise: Optional[float] = None,
    random_slopes: bool = False,
    mu: Optional[Sequence[float]] = None,
    tol: float = 1e-8,
    max_iter: int = 5000,
    learning_rate: float = 0.1,
) -> GroupCoefficients:
    """
    Known mode needs `sigma` (per random column or one value) and `noise`.
    σ = 0 reduces to complete pooling. Offsets are posterior means around the
    complete-pool estimate, or around `mu` when one is given, so every group
    lands between the pooled and its own least-squares estimate. The reported
    log-likelihood is the marginal one at the GLS μ.
    """
    q = _random_design(data, random_slopes)
    if np.linalg.matrix_rank(data.X) < data.n_features:
        raise RankDeficientError("mixed model: fixed-effect design is rank deficient", {"shape": list(data.X.shape)})
    if mode == "known":
        if sigma is None or noise is None:
            raise ValueError("known-variance mode needs sigma and noise")
        if noise <= 0:
            raise ValueError("noise scale must be positive")
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (q,)).copy()
        if np.any(sig < 0):
            raise ValueError("sigma must be non-negative")
        if np.all(sig == 0):
            pooled = fit_complete_pool(data)
            zero = {g: np.zeros(q) for g in data.group_names()}
            return GroupCoefficients(pooled, sig, float(noise), zero, data.columns, "known")
        if np.any(sig == 0):
            raise ValueError("mixing zero and non-zero random-effect scales is not supported")
        if mu is not None:
            return _posterior_around(data, np.asarray(mu, dtype=np.float64), sig, float(noise), q)
        fit = _posterior_around(data, fit_complete_pool(data), sig, float(noise), q)
        fit.log_likelihood = _gls(data, sig, float(noise), q)[2]
        return fit

    if mode != "estimated":
        raise ValueError(f"unknown variance mode '{mode}'")
    resid = data.y - data.X @ fit_complete_pool(data)
    start = max(float(np.var(resid)), 1e-6)
    theta = np.full(q + 1, math.log(start / 2.0))
    ll, grad, m, offsets = _loglik_grad(data, theta, q)
    trace = [ll]
    lr = learning_rate
    for it in range(1, max_iter + 1):
        cand = theta + lr * grad
        ll_new, grad_new, m_new, off_new = _loglik_grad(data, cand, q)
        if not math.isfinite(ll_new) or ll_new < ll:
            lr *= 0.5
            if lr < 1e-12:
                raise ConvergenceError("step size collapsed before convergence", trace)
            continue
        improvement = ll_new - ll
        theta, ll, grad, m, offsets = cand, ll_new, grad_new, m_new, off_new
        trace.append(ll)
        lr = min(lr * 1.2, 10.0)
        if improvement < tol:
            sig = np.exp(0.5 * theta[:q])
            log.info("mixed model converged after %d iterations (loglik=%.6f)", it, ll)
            return GroupCoefficients(
                m, sig, math.exp(0.5 * theta[q]), offsets, data.columns, "estimated", it, ll, trace
            )
    raise ConvergenceError(f"no convergence within {max_iter} iterations", trace)


def _posterior_around(data: GroupedDataset, mu: np.ndarray, sigma: np.ndarray, noise: float, q: int) -> GroupCoefficients:
    G_inv = np.diag(1.0 / sigma**2)
    offsets = {}
    for g, rows in data.group_rows().items():
        X, y = data.X[rows], data.y[rows]
        Z = X[:, :q]
        M = linalg.cho_factor(Z.T @ Z + noise**2 * G_inv)
        offsets[g] = linalg.cho_solve(M, Z.T @ (y - X @ mu))
    return GroupCoefficients(mu.copy(), sigma, noise, offsets, data.columns, "known")


def shrinkage_weight(n: Union[int, float, np.ndarray], sigma: float, noise: float) -> Union[float, np.ndarray]:
    """w(n) = nσ² / (nσ² + ε²)."""
    n = np.asarray(n, dtype=np.float64)
    w = n * sigma**2 / (n * sigma**2 + noise**2)
    return float(w) if w.ndim == 0 else w


def shrinkage_curve(
    sizes: Sequence[int],
    sigma: float = 1.0,
    noise: float = 1.0,
    mu: float = 0.0,
    seed: int = 0,
) -> list[Dict[str, float]]:
    """
    One group per size, drawn from the random-intercept generator; each row
    compares the mixed offset b̂_j with the no-pool offset ȳ_j − μ̂ and with
    the pooled offset 0, next to the shrinkage weight w(n_j).
    """
    if not sizes or any(int(n) < 1 for n in sizes):
        raise ValueError("group sizes must be positive")
    rng = RngStream(seed, "lmm/shrinkage")
    ys: list[float] = []
    groups: list[str] = []
    for i, n in enumerate(sizes):
        b = float(rng.normal(0.0, sigma))
        ys.extend(mu + b + rng.normal(0.0, noise, int(n)))
        groups.extend([f"n{n}_{i}"] * int(n))
    data = GroupedDataset.intercept_only(ys, groups)
    fit = fit_mixed(data, "known", sigma=sigma, noise=noise)
    pooled = float(fit.mu[0])
    rows = []
    for i, n in enumerate(sizes):
        g = f"n{n}_{i}"
        group_mean = float(np.mean(data.y[data.group_rows()[g]]))
        b_hat = float(fit.offsets[g][0])
        no_pool = group_mean - pooled
        rows.append(
            {
                "n": int(n),
                "weight": shrinkage_weight(n, sigma, noise),
                "pooled": pooled,
                "group_mean": group_mean,
                "mixed": pooled + b_hat,
                "offset": b_hat,
                "distance_to_no_pool": abs(b_hat - no_pool),
                "distance_to_pooled": abs(b_hat),
            }
        )
    return rows


def write_fit(path: Path, fit: Union[GroupCoefficients, NoPoolFit, np.ndarray], columns: Optional[Sequence[str]] = None) -> Path:
    if isinstance(fit, np.ndarray):
        payload: Dict[str, Any] = {"mode": "complete-pool", "columns": list(columns or []), "coefficients": fit.tolist()}
    else:
        payload = fit.to_dict()
    return write_json(Path(path), payload)
