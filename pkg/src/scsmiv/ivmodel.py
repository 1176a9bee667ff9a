"""Instrument-centering models E(Z|L) and their influence functions.

Three modes: a design-known randomization probability, the empirical mean,
and logistic regression on baseline covariates. Each fitted model exposes the
centered instrument Z - E(Z|L) and the per-subject influence of the fitted
parameter, used downstream for the plug-in variance correction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateInstrument, NonConvergence, ValidationError

KNOWN = "known"
EMPIRICAL = "empirical"
LOGISTIC = "logistic"
_MODES = (KNOWN, EMPIRICAL, LOGISTIC)


def _expit(x):
    return 1.0 / (1.0 + np.exp(-x))


def _design(covariates: np.ndarray) -> np.ndarray:
    """Intercept plus covariate columns."""
    return np.column_stack([np.ones(covariates.shape[0]), covariates])


@dataclass(frozen=True)
class IvModel:
    """Fitted instrument model.

    ``theta`` is the parameter vector (length 1 for known/empirical modes),
    ``theta_influence`` the (n, p) per-subject influence values eps_i^theta
    satisfying sqrt(n)(theta_hat - theta) ~ n^{-1/2} sum_i eps_i^theta.
    For the known mode the influence is identically zero.
    """

    mode: str
    theta: np.ndarray
    theta_influence: np.ndarray

    def conditional_mean(self, covariates: np.ndarray | None, n: int) -> np.ndarray:
        """E(Z|L; theta) for each subject."""
        if self.mode in (KNOWN, EMPIRICAL):
            return np.full(n, self.theta[0])
        if covariates is None:
            raise ValidationError("logistic instrument model requires covariates")
        return _expit(_design(covariates) @ self.theta)

    def centered(self, z: np.ndarray, covariates: np.ndarray | None) -> np.ndarray:
        """Z^c = Z - E(Z|L; theta) for every subject."""
        z = np.asarray(z, dtype=float)
        return z - self.conditional_mean(covariates, z.shape[0])

    def with_theta(self, theta: np.ndarray) -> "IvModel":
        """Same mode with an overridden parameter (finite-difference reruns)."""
        return replace(self, theta=np.asarray(theta, dtype=float))

    @property
    def has_estimated_theta(self) -> bool:
        return self.mode != KNOWN


def fit_iv_model(records, mode: str = EMPIRICAL, pz: float | None = None) -> IvModel:
    """Fit the instrument model on validated subject records.

    ``mode='known'`` requires ``pz`` in (0, 1) and carries zero influence;
    ``'empirical'`` uses the sample mean of z; ``'logistic'`` fits by damped
    Newton on the score equation (tolerance 1e-10, at most 100 iterations).
    """
    if mode not in _MODES:
        raise ValidationError(f"unknown instrument model mode {mode!r}")
    z = np.array([r.z for r in records], dtype=float)
    n = z.shape[0]
    if n == 0:
        raise ValidationError("cannot fit an instrument model on no subjects")
    if np.all(z == z[0]):
        raise DegenerateInstrument()

    if mode == KNOWN:
        if pz is None or not 0.0 < pz < 1.0:
            raise ValidationError("known mode needs a randomization probability in (0, 1)")
        return IvModel(KNOWN, np.array([pz]), np.zeros((n, 1)))

    if mode == EMPIRICAL:
        theta = z.mean()
        return IvModel(EMPIRICAL, np.array([theta]), (z - theta)[:, None])

    if any(r.covariates is None for r in records):
        raise ValidationError("logistic instrument model requires covariates for all subjects")
    covariates = np.array([r.covariates for r in records], dtype=float)
    x = _design(covariates)
    theta = _fit_logistic(x, z)
    mu = _expit(x @ theta)
    score = (z - mu)[:, None] * x
    info = (x * (mu * (1.0 - mu))[:, None]).T @ x / n
    influence = np.linalg.solve(info, score.T).T
    return IvModel(LOGISTIC, theta, influence)


def _fit_logistic(x: np.ndarray, z: np.ndarray, tol: float = 1e-10,
                  max_iter: int = 100) -> np.ndarray:
    theta = np.zeros(x.shape[1])
    grad = x.T @ (z - _expit(x @ theta))
    for _ in range(max_iter):
        if np.linalg.norm(grad) < tol:
            return theta
        mu = _expit(x @ theta)
        hess = (x * (mu * (1.0 - mu))[:, None]).T @ x
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError as exc:
            raise NonConvergence(f"singular information matrix: {exc}") from exc
        # halve the step until the score norm decreases
        lam = 1.0
        for _ in range(30):
            cand = theta + lam * step
            cand_grad = x.T @ (z - _expit(x @ cand))
            if np.linalg.norm(cand_grad) < np.linalg.norm(grad):
                theta, grad = cand, cand_grad
                break
            lam /= 2.0
        else:
            raise NonConvergence("logistic fit: damped Newton made no progress")
    if np.linalg.norm(grad) < tol:
        return theta
    raise NonConvergence("logistic fit: gradient norm above tolerance after 100 iterations")


def center_instrument(model: IvModel, record) -> float:
    """Centered instrument z - E(Z|L) for a single subject record."""
    cov = None
    if record.covariates is not None:
        cov = np.asarray(record.covariates, dtype=float)[None, :]
    return float(model.centered(np.array([record.z]), cov)[0])
