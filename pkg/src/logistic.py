"""Iteratively reweighted least squares for logistic models with fixed offsets."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from errors import ValidationError

MAX_ITERATIONS = 50
CONVERGENCE_TOL = 1e-8
# Coefficients this large on the log-odds scale indicate (quasi-)separation.
SEPARATION_BOUND = 25.0
BATCH_RIDGE = 1e-9
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OffsetFit:
    coefficients: np.ndarray
    standard_errors: np.ndarray
    offsets: np.ndarray
    converged: bool
    iterations: int
    separated: bool = False
    log_likelihood: float = float("nan")

    def z(self, index: int) -> float:
        se = self.standard_errors[index]
        return float(self.coefficients[index] / se) if se > 0.0 else 0.0

    def confidence_interval(self, index: int, z_crit: float = 1.959963984540054) -> tuple[float, float]:
        coef = float(self.coefficients[index])
        half = z_crit * float(self.standard_errors[index])
        return coef - half, coef + half


def _validate(design: np.ndarray, outcome: np.ndarray, offsets: np.ndarray) -> None:
    if design.ndim != 2 or outcome.ndim != 1 or design.shape[0] != outcome.shape[0]:
        raise ValidationError("design", design.shape, "design rows must match outcome length")
    if offsets.shape != outcome.shape:
        raise ValidationError("offsets", offsets.shape, "offsets must match outcome length")
    if not np.all(np.isfinite(offsets)):
        raise ValidationError("offsets", "non-finite", "offsets must be finite")
    if not np.all((outcome == 0) | (outcome == 1)):
        raise ValidationError("outcome", "non-binary", "outcome must be coded 0/1")


def offset_logistic_fit(
    design: np.ndarray,
    outcome: np.ndarray,
    offsets: np.ndarray | None = None,
    *,
    max_iterations: int = MAX_ITERATIONS,
    tol: float = CONVERGENCE_TOL,
) -> OffsetFit:
    """Maximum-likelihood logistic fit with fixed per-observation offsets."""
    x = np.asarray(design, dtype=float)
    y = np.asarray(outcome, dtype=float)
    off = np.zeros_like(y) if offsets is None else np.asarray(offsets, dtype=float)
    _validate(x, y, off)
    n_params = x.shape[1]
    beta = np.zeros(n_params)
    converged = False
    separated = False
    information = np.eye(n_params)
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        mu = expit(x @ beta + off)
        weights = mu * (1.0 - mu)
        information = x.T @ (x * weights[:, np.newaxis])
        score = x.T @ (y - mu)
        try:
            step = np.linalg.solve(information, score)
        except np.linalg.LinAlgError:
            separated = True
            break
        beta = beta + step
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            separated = True
            break
        if np.max(np.abs(step)) < tol:
            converged = True
            break
    if separated:
        logger.warning("Logistic fit flagged separation after %s iterations.", iteration)
    elif not converged:
        logger.warning("Logistic fit did not converge in %s iterations.", max_iterations)

    eta = x @ beta + off
    mu = expit(eta)
    information = x.T @ (x * (mu * (1.0 - mu))[:, np.newaxis])
    try:
        covariance = np.linalg.inv(information)
        standard_errors = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    except np.linalg.LinAlgError:
        standard_errors = np.full(n_params, np.inf)
    log_likelihood = float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))
    return OffsetFit(
        coefficients=beta,
        standard_errors=standard_errors,
        offsets=off,
        converged=converged and not separated,
        iterations=iteration,
        separated=separated,
        log_likelihood=log_likelihood,
    )


def plain_logistic_fit(design: np.ndarray, outcome: np.ndarray) -> OffsetFit:
    return offset_logistic_fit(design, outcome, None)


def with_intercept(*columns: np.ndarray) -> np.ndarray:
    n = len(columns[0])
    return np.column_stack([np.ones(n), *[np.asarray(c, dtype=float) for c in columns]])


def interaction_wald_batch(
    dosages: np.ndarray,
    exposure: np.ndarray,
    outcome: np.ndarray,
    *,
    chunk_size: int = 256,
    max_iterations: int = 25,
    tol: float = CONVERGENCE_TOL,
) -> np.ndarray:
    """Wald z for the G x E term of logit(Y) ~ 1 + G + E + G*E, fitted per marker column.

    Markers whose design is degenerate (no variation in G or G*E) get z = 0.
    """
    g_all = np.asarray(dosages, dtype=float)
    e = np.asarray(exposure, dtype=float)
    y = np.asarray(outcome, dtype=float)
    n_subjects, n_markers = g_all.shape
    z_values = np.zeros(n_markers)
    for start in range(0, n_markers, chunk_size):
        g = g_all[:, start : start + chunk_size].T
        ge = g * e[np.newaxis, :]
        usable = (g.std(axis=1) > 0.0) & (ge.std(axis=1) > 0.0)
        if not np.any(usable):
            continue
        g, ge = g[usable], ge[usable]
        count = g.shape[0]
        x = np.empty((count, n_subjects, 4))
        x[:, :, 0] = 1.0
        x[:, :, 1] = g
        x[:, :, 2] = e[np.newaxis, :]
        x[:, :, 3] = ge
        beta = np.zeros((count, 4))
        ridge = BATCH_RIDGE * np.eye(4)
        # Each marker stops on its own step size, so results do not depend on chunk mates.
        active = np.ones(count, dtype=bool)
        for _ in range(max_iterations):
            xa = x[active]
            mu = expit(np.einsum("knp,kp->kn", xa, beta[active]))
            weights = mu * (1.0 - mu)
            information = np.einsum("knp,kn,knq->kpq", xa, weights, xa) + ridge
            score = np.einsum("knp,kn->kp", xa, y[np.newaxis, :] - mu)
            step = np.linalg.solve(information, score[:, :, np.newaxis])[:, :, 0]
            beta[active] = np.clip(beta[active] + step, -SEPARATION_BOUND, SEPARATION_BOUND)
            done = np.max(np.abs(step), axis=1) < tol
            active[np.flatnonzero(active)[done]] = False
            if not active.any():
                break
        mu = expit(np.einsum("knp,kp->kn", x, beta))
        information = np.einsum("knp,kn,knq->kpq", x, mu * (1.0 - mu), x) + ridge
        variance = np.linalg.inv(information)[:, 3, 3]
        chunk_z = beta[:, 3] / np.sqrt(np.clip(variance, 1e-300, None))
        target = np.arange(start, min(start + chunk_size, n_markers))[usable]
        z_values[target] = chunk_z
    return z_values
