"""Sparse Bayesian regression over a fixed candidate library.

``rvm_fit`` maximizes the type-II marginal likelihood of a linear model with
independent Gaussian coefficient priors by the fast sequential algorithm:
each iteration adds, deletes, or re-estimates the single basis function whose
update most increases the evidence.  Coefficients whose optimal prior
precision diverges are pruned exactly, which is what makes the recovered
equations sparse.

``st_sparse_bayes`` wraps the per-state fits in an outer loop that zeroes
coefficients below a magnitude threshold and refits on the surviving terms
until the support stops changing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DiscoveryFailure

__all__ = ["RvmModel", "SparseResult", "rvm_fit", "st_sparse_bayes"]


@dataclass(frozen=True)
class RvmModel:
    """Converged sparse posterior for one regression target."""

    support: np.ndarray          # active column indices, ascending
    mean: np.ndarray             # posterior mean over the active columns
    covariance: np.ndarray      # posterior covariance over the active columns
    alpha: np.ndarray            # prior precisions over the active columns
    noise_var: float
    log_ml: float
    history: tuple[float, ...]   # log marginal likelihood after each update


def _posterior(PtP, Ptt, active, alpha, sig2):
    H = np.diag(alpha) + PtP[np.ix_(active, active)] / sig2
    chol = cho_factor(H, lower=True)
    cov = cho_solve(chol, np.eye(len(active)))
    mean = cho_solve(chol, Ptt[active]) / sig2
    logdet_H = 2.0 * np.sum(np.log(np.diag(chol[0])))
    return mean, cov, logdet_H


def _log_ml(n, tt, Ptt, active, mean, alpha, sig2, logdet_H):
    # |C| = sig2^n |H| / prod(alpha) for C = sig2 I + Phi A^-1 Phi^T
    logdet_c = n * np.log(sig2) + logdet_H - np.sum(np.log(alpha))
    quad = (tt - Ptt[active] @ mean) / sig2
    return -0.5 * (n * np.log(2 * np.pi) + logdet_c + quad)


def rvm_fit(
    design: np.ndarray,
    target: np.ndarray,
    noise_var: float | None = None,
    max_iter: int = 1000,
    tol: float = 1e-8,
    alpha_cap: float = 1e12,
) -> RvmModel:
    """Fit one target by fast marginal-likelihood maximization.

    ``noise_var`` fixes the observation noise variance; when omitted it is
    re-estimated from the residual each iteration.  Raises
    :class:`DiscoveryFailure` if no candidate term carries evidence or if
    every term is pruned.
    """
    design = np.asarray(design, dtype=float)
    target = np.asarray(target, dtype=float).ravel()
    n, m = design.shape
    if target.shape[0] != n:
        raise ValueError(f"design has {n} rows, target has {target.shape[0]}")
    # unit-norm columns keep the add/delete scores comparable; results are
    # rescaled to the original columns on exit
    scales = np.linalg.norm(design, axis=0)
    safe = np.where(scales > 0, scales, 1.0)
    Phi = design / safe
    PtP = Phi.T @ Phi
    Ptt = Phi.T @ target
    tt = target @ target

    estimate_noise = noise_var is None
    sig2 = max(0.1 * target.var(), 1e-12) if estimate_noise else float(noise_var)

    # seed with the column carrying the largest evidence increase over the
    # empty model; with unit columns that is the largest |projection|
    j0 = int(np.argmax(np.abs(Ptt) * (scales > 0)))
    S0, Q0 = 1.0 / sig2, Ptt[j0] / sig2
    if Q0 * Q0 <= S0:
        raise DiscoveryFailure("no candidate term explains the target")
    active = [j0]
    alpha = np.array([S0 * S0 / (Q0 * Q0 - S0)])

    history = []
    for _ in range(max_iter):
        mean, cov, logdet_H = _posterior(PtP, Ptt, active, alpha, sig2)
        history.append(_log_ml(n, tt, Ptt, active, mean, alpha, sig2, logdet_H))

        G = PtP[:, active] / sig2
        S_all = np.diag(PtP) / sig2 - np.einsum("ij,ij->i", G @ cov, G)
        Q_all = Ptt / sig2 - G @ mean
        s, q = S_all.copy(), Q_all.copy()
        in_model = np.zeros(m, dtype=bool)
        in_model[active] = True
        for k, j in enumerate(active):
            denom = alpha[k] - S_all[j]
            if denom > 1e-300:
                s[j] = alpha[k] * S_all[j] / denom
                q[j] = alpha[k] * Q_all[j] / denom
            else:
                # numerically absorbed basis: force the delete branch
                s[j], q[j] = np.inf, 0.0
        relevance = q * q - s

        # score the single best action by its exact evidence change;
        # non-finite gains from degenerate candidates are filtered below
        best_gain, best_action = 0.0, None
        for j in range(m):
            if scales[j] == 0.0:
                continue
            S, Q = S_all[j], Q_all[j]
            if not in_model[j] and relevance[j] > 0:
                gain = 0.5 * ((Q * Q - S) / S + np.log(S / (Q * Q)))
                action = ("add", j, s[j] * s[j] / relevance[j])
            elif in_model[j] and relevance[j] > 0:
                k = active.index(j)
                new_alpha = min(s[j] * s[j] / relevance[j], alpha_cap)
                if not new_alpha > 0:
                    continue
                diff = 1.0 / new_alpha - 1.0 / alpha[k]
                if abs(diff) < 1e-300 or S * diff <= -1.0:
                    continue
                gain = 0.5 * (Q * Q * diff / (S * diff + 1.0) - np.log1p(S * diff))
                action = ("reestimate", j, new_alpha)
            elif in_model[j] and len(active) > 1:
                k = active.index(j)
                if S >= alpha[k]:
                    continue
                gain = 0.5 * (Q * Q / (S - alpha[k]) - np.log1p(-S / alpha[k]))
                action = ("delete", j, None)
            else:
                continue
            if np.isfinite(gain) and gain > best_gain:
                best_gain, best_action = gain, action

        if best_action is None or best_gain < tol * max(1.0, abs(history[-1])):
            break
        kind, j, value = best_action
        if kind == "add":
            active.append(j)
            alpha = np.append(alpha, value)
        elif kind == "reestimate":
            alpha[active.index(j)] = value
        else:
            k = active.index(j)
            active.pop(k)
            alpha = np.delete(alpha, k)

        if estimate_noise:
            mean, cov, _ = _posterior(PtP, Ptt, active, alpha, sig2)
            sub = PtP[np.ix_(active, active)]
            rss = tt - 2.0 * mean @ Ptt[active] + mean @ sub @ mean
            dof = n - len(active) + float(alpha @ np.diag(cov))
            sig2 = max(rss / max(dof, 1.0), 1e-14 * tt / n)

    order = np.argsort(active)
    support = np.asarray(active, dtype=int)[order]
    mean, cov, logdet_H = _posterior(PtP, Ptt, active, alpha, sig2)
    log_ml = _log_ml(n, tt, Ptt, active, mean, alpha, sig2, logdet_H)
    mean = mean[order] / safe[support]
    cov = cov[np.ix_(order, order)] / np.outer(safe[support], safe[support])
    return RvmModel(
        support=support,
        mean=mean,
        covariance=cov,
        alpha=alpha[order] * safe[support] ** 2,
        noise_var=sig2,
        log_ml=log_ml,
        history=tuple(history),
    )


@dataclass(frozen=True)
class SparseResult:
    """Thresholded multi-state sparse regression."""

    coefficients: np.ndarray            # (num_terms, num_states)
    support: np.ndarray                 # rows active for at least one state
    models: tuple[RvmModel | None, ...]  # per-state fit on the final support
    residual_var: np.ndarray             # per-state mean squared residual


def st_sparse_bayes(
    design: np.ndarray,
    targets: np.ndarray,
    threshold: float = 0.05,
    noise_var=None,
    max_outer: int = 20,
    **rvm_kwargs,
) -> SparseResult:
    """Sequentially thresholded sparse Bayesian regression.

    Every state is regressed on the shared library; coefficients smaller in
    magnitude than ``threshold`` are zeroed and the fit repeats on the
    surviving terms until the support is stable.  ``noise_var`` may be a
    scalar or one value per state.
    """
    design = np.asarray(design, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    m, d = design.shape[1], targets.shape[1]
    if noise_var is None or np.ndim(noise_var) == 0:
        noise = [noise_var] * d
    else:
        noise = [float(v) for v in noise_var]
        if len(noise) != d:
            raise ValueError(f"need {d} noise variances, got {len(noise)}")

    support = np.arange(m)
    models: list[RvmModel | None] = [None] * d
    for _ in range(max_outer):
        coeffs = np.zeros((m, d))
        models = []
        for j in range(d):
            try:
                model = rvm_fit(
                    design[:, support], targets[:, j],
                    noise_var=noise[j], **rvm_kwargs,
                )
            except DiscoveryFailure:
                models.append(None)
                continue
            coeffs[support[model.support], j] = model.mean
            models.append(model)
        coeffs[np.abs(coeffs) < threshold] = 0.0
        new_support = np.flatnonzero(np.any(coeffs != 0.0, axis=1))
        if new_support.size == 0:
            raise DiscoveryFailure(
                "sparse regression pruned every candidate term")
        if np.array_equal(new_support, support):
            break
        support = new_support
    resid = targets - design @ coeffs
    return SparseResult(coeffs, support, tuple(models),
                        np.mean(resid * resid, axis=0))
