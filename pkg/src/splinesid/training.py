"""Bayesian training of control points, coefficients, and noise diagonals.

The negative log posterior couples a data-fit residual at measurement
points and an equation residual at collocation points, each weighted by a
learned diagonal noise variance whose log-determinant keeps it
identifiable, plus Gaussian priors on control points and coefficients.
Training alternates adaptive-moment gradient descent over all blocks with
sparse Bayesian pruning of the library, retains the best state seen, then
approximates the posterior near the plateau by the running mean and a
low-rank PCA of late iterates, from which parameter sets are sampled.

Noise variances are trained as log-variances, so positivity is structural.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

import scipy.sparse as sp

from .errors import (
    ConfigError,
    DiscoveryFailure,
    DivergenceError,
    SingularBasisError,
    TrainingError,
)
from .library import (
    evaluate_library,
    polynomial_rhs,
    reconstruct_fields,
    term_partials,
)
from .problem import DiscoveryProblem
from .sparse_bayes import st_sparse_bayes
from .splines import fit_least_squares, fit_ridge

__all__ = [
    "Hyperparams",
    "TrainState",
    "SwagPosterior",
    "EnsembleForecast",
    "initialize_state",
    "neg_log_posterior",
    "optimize",
    "ado_train",
    "swag_collect",
    "swag_sample",
    "run_discovery",
    "propagate_uncertainty",
]


@dataclass(frozen=True)
class Hyperparams:
    """Training settings; epoch counts follow the per-benchmark configs."""

    lr: float = 1e-2
    swag_lr: float = 1e-3
    ado_iters: int = 5
    ado_epochs: int = 2000
    post_epochs: int = 500
    swag_epochs: int = 400
    snapshot_every: int = 1
    swag_rank: int = 20
    threshold: float = 0.05
    collocation_factor: float = 4.0
    scale_columns: bool = False
    anchor_noise: bool = False
    alpha: float = 1e-6          # coefficient prior precision
    beta: float = 1e-6           # control-point prior precision
    gamma_a0: float = 1e-6       # Gamma hyperprior on alpha
    gamma_b0: float = 1e-6
    gamma_a1: float = 1e-6       # Gamma hyperprior on beta
    gamma_b1: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "swag_lr", "threshold", "collocation_factor",
                     "alpha", "beta", "gamma_a0", "gamma_b0", "gamma_a1",
                     "gamma_b1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"hyperparameter {name} must be nonnegative")
        for name in ("ado_iters", "ado_epochs", "post_epochs", "swag_epochs",
                     "snapshot_every", "swag_rank"):
            if getattr(self, name) < 0 or (
                    name in ("ado_iters", "snapshot_every")
                    and getattr(self, name) < 1):
                raise ConfigError(f"hyperparameter {name} out of range")


@dataclass
class TrainState:
    """All trainable blocks; ``coeffs`` is full-size with pruned rows zero."""

    theta: np.ndarray            # (num_basis, num_states)
    coeffs: np.ndarray           # (num_terms, num_states)
    active: np.ndarray           # sorted indices of retained terms
    log_b: np.ndarray            # log observation-noise variances (d,)
    log_p: np.ndarray            # log process-noise variances (d,)

    def copy(self) -> "TrainState":
        return TrainState(
            self.theta.copy(), self.coeffs.copy(), self.active.copy(),
            self.log_b.copy(), self.log_p.copy())


def _gamma_terms(hyper: Hyperparams) -> float:
    # negative log Gamma densities of the fixed prior precisions; constant
    # during training but kept so the loss is the full negative log posterior
    return (
        -(hyper.gamma_a0 - 1.0) * np.log(hyper.alpha)
        + hyper.gamma_b0 * hyper.alpha
        - (hyper.gamma_a1 - 1.0) * np.log(hyper.beta)
        + hyper.gamma_b1 * hyper.beta
    )


def _second_difference_noise(values: np.ndarray) -> np.ndarray:
    """Per-state noise-variance estimate from second differences.

    Noise carries into second differences with variance 6 sigma^2 while a
    smooth signal contributes only O(dt^2); the median absolute deviation
    keeps grid-boundary rows of flattened plane datasets from inflating
    the estimate.
    """
    if values.shape[0] < 3:
        return np.zeros(values.shape[1])
    d2 = np.diff(values, n=2, axis=0)
    mad = np.median(np.abs(d2 - np.median(d2, axis=0)), axis=0)
    return (1.4826 * mad) ** 2 / 6.0


def initialize_state(problem: DiscoveryProblem, hyper: Hyperparams) -> TrainState:
    """Least-squares spline fit, then ridge regression for coefficients."""
    values = problem.dataset.values
    try:
        theta = fit_least_squares(problem.basis_measure, values)
    except SingularBasisError:
        theta = fit_ridge(problem.basis_measure, values)
    if theta.ndim == 1:
        theta = theta[:, None]

    resid = problem.basis_measure.matrix @ theta - values
    scale = np.mean(values * values)
    floor = 1e-12 * max(scale, 1.0)
    # A basis rich enough to interpolate the data leaves a zero residual;
    # the difference-based estimate keeps the initial data weight sane.
    b = np.maximum.reduce([
        np.mean(resid * resid, axis=0),
        _second_difference_noise(values),
        np.full(values.shape[1], floor),
    ])

    lib = evaluate_library(
        problem.descriptors, theta, problem.basis_by_deriv,
        coords=problem.colloc_coords)
    lhs = problem.lhs_basis.matrix @ theta
    gram = lib.values.T @ lib.values
    damping = 1e-6 * np.trace(gram) / max(gram.shape[0], 1)
    coeffs = np.linalg.solve(
        gram + damping * np.eye(gram.shape[0]), lib.values.T @ lhs)
    p = np.maximum(
        np.mean((lhs - lib.values @ coeffs) ** 2, axis=0), floor)
    return TrainState(
        theta=theta,
        coeffs=coeffs,
        active=np.arange(len(problem.descriptors)),
        log_b=np.log(b),
        log_p=np.log(p),
    )


def neg_log_posterior(
    state: TrainState,
    problem: DiscoveryProblem,
    hyper: Hyperparams,
    want_grads: bool = True,
):
    """Loss and exact gradients for every block.

    The equation residual is differentiated through the library columns via
    the pointwise term partials, so no finite differencing is involved.
    """
    values = problem.dataset.values
    n, d = values.shape
    n_colloc = problem.num_colloc
    basis_m = problem.basis_measure.matrix
    basis_l = problem.lhs_basis.matrix
    active_desc = tuple(problem.descriptors[i] for i in state.active)
    W = state.coeffs[state.active]
    b = np.exp(state.log_b)
    p = np.exp(state.log_p)

    fields = reconstruct_fields(active_desc, state.theta, problem.basis_by_deriv)
    lib = evaluate_library(
        active_desc, state.theta, problem.basis_by_deriv,
        coords=problem.colloc_coords, fields=fields)
    resid_m = basis_m @ state.theta - values
    resid_c = basis_l @ state.theta - lib.values @ W
    sq_m = np.sum(resid_m * resid_m, axis=0)
    sq_c = np.sum(resid_c * resid_c, axis=0)
    loss = (
        0.5 * np.sum(sq_m / b) + 0.5 * n * np.sum(state.log_b)
        + 0.5 * np.sum(sq_c / p) + 0.5 * n_colloc * np.sum(state.log_p)
        + 0.5 * hyper.alpha * np.sum(W * W)
        + 0.5 * hyper.beta * np.sum(state.theta * state.theta)
        + _gamma_terms(hyper)
    )
    if not np.isfinite(loss):
        raise TrainingError(
            "non-finite loss: "
            f"data residual {sq_m}, equation residual {sq_c}, "
            f"log_b {state.log_b}, log_p {state.log_p}")
    if not want_grads:
        return loss, None

    scaled_c = resid_c / p
    g_theta = basis_m.T @ (resid_m / b) + basis_l.T @ scaled_c
    g_theta += hyper.beta * state.theta
    # equation residual depends on theta through the library columns too:
    # d(loss)/d(phi_j at point c) = -(scaled residual @ W_j) there
    lib_down = scaled_c @ W.T
    field_grad: dict = {}
    partials = term_partials(active_desc, fields, coords=problem.colloc_coords)
    for j, rows in enumerate(partials):
        for state_idx, deriv, part in rows:
            key = (state_idx, deriv)
            contrib = lib_down[:, j] * part
            if key in field_grad:
                field_grad[key] += contrib
            else:
                field_grad[key] = contrib
    for (state_idx, deriv), grad in field_grad.items():
        g_theta[:, state_idx] -= problem.basis_by_deriv[deriv].matrix.T @ grad

    g_w = -lib.values.T @ scaled_c + hyper.alpha * W
    g_log_b = -0.5 * sq_m / b + 0.5 * n
    g_log_p = -0.5 * sq_c / p + 0.5 * n_colloc
    grads = {"theta": g_theta, "W": g_w, "log_b": g_log_b, "log_p": g_log_p}
    return loss, grads


class _Sgd:
    """Plain constant-rate gradient steps."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict, grads: dict) -> None:
        for key, g in grads.items():
            params[key] -= self.lr * g


class _Adam:
    """Adaptive-moment gradient descent over a dict of arrays."""

    def __init__(self, params: dict, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for key, g in grads.items():
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            params[key] -= self.lr * (self.m[key] / c1) / (
                np.sqrt(self.v[key] / c2) + self.eps)


def _params_of(state: TrainState) -> dict:
    return {
        "theta": state.theta.copy(),
        "W": state.coeffs[state.active].copy(),
        "log_b": state.log_b.copy(),
        "log_p": state.log_p.copy(),
    }


def _state_of(params: dict, template: TrainState) -> TrainState:
    coeffs = np.zeros_like(template.coeffs)
    coeffs[template.active] = params["W"]
    return TrainState(params["theta"], coeffs, template.active.copy(),
                      params["log_b"], params["log_p"])


def optimize(
    state: TrainState,
    problem: DiscoveryProblem,
    hyper: Hyperparams,
    epochs: int,
    lr: float,
    loss_fn=None,
    freeze: tuple = (),
):
    """Gradient steps at fixed active set; returns (state, loss history).

    ``loss_fn(state) -> (loss, grads)`` defaults to the negative log
    posterior of ``problem``.  Blocks named in ``freeze`` keep their entry
    values.  On divergence (loss growing tenfold over a 100-step window)
    the learning rate is halved once from the best state seen; a second
    divergence aborts.
    """
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    scale = None
    if loss_fn is None:
        def loss_fn(s):
            return neg_log_posterior(s, problem, hyper)
        # Step W in column-normalized coordinates: candidate columns built
        # from high-order derivatives of a still-noisy spline can sit many
        # decades above the target, and a raw step along one of them dwarfs
        # the residual.  The loss itself stays in physical units.
        if hyper.scale_columns and state.active.size:
            lib = evaluate_library(
                tuple(problem.descriptors[i] for i in state.active),
                state.theta, problem.basis_by_deriv,
                coords=problem.colloc_coords)
            scale = np.sqrt(np.mean(lib.values ** 2, axis=0))[:, None]
            scale = np.maximum(scale, 1e-12 * max(scale.max(), 1.0))

    def to_state(ps):
        if scale is None:
            return _state_of(ps, state)
        phys = dict(ps)
        phys["W"] = ps["W"] / scale
        return _state_of(phys, state)

    params = _params_of(state)
    if scale is not None:
        params["W"] = params["W"] * scale
    opt = _Adam(params, lr)
    current = to_state(params)
    history = []
    best_loss = np.inf
    best_params = {k: v.copy() for k, v in params.items()}
    halved = False
    elevated = 0
    for step in range(epochs):
        try:
            loss, grads = loss_fn(current)
        except TrainingError:
            loss, grads = np.inf, None
        history.append(loss)
        if loss < best_loss:
            best_loss = loss
            best_params = {k: v.copy() for k, v in params.items()}
        # Divergence = the loss sits tenfold above the best seen for 100
        # consecutive steps (or goes non-finite); single transient spikes
        # of the adaptive-moment iteration must not trip the guard.
        ceiling = best_loss + 10.0 * max(abs(best_loss), 1.0)
        elevated = elevated + 1 if loss > ceiling else 0
        if elevated >= 100 or not np.isfinite(loss):
            if halved:
                raise DivergenceError(
                    f"optimization diverged at step {step}", step=step)
            halved = True
            elevated = 0
            params = {k: v.copy() for k, v in best_params.items()}
            opt = _Adam(params, lr / 2.0)
            current = to_state(params)
            continue
        if grads is not None:
            if freeze:
                grads = {k: g for k, g in grads.items() if k not in freeze}
            if scale is not None and "W" in grads:
                grads = dict(grads)
                grads["W"] = grads["W"] / scale
        opt.step(params, grads)
        current = to_state(params)
    return current, history


def _prune(state: TrainState, problem: DiscoveryProblem, hyper: Hyperparams):
    """Sparse reselection over the full library at the current spline.

    Every candidate is reconsidered, so a term lost to one noisy pass can
    return once the spline improves; only the support size is monotone,
    capped at the incoming active count.  The equation noise is
    re-estimated inside the sparse step rather than pinned to exp(log_p):
    the trained value tracks the active set's overfit residual and would
    make every candidate look significant.
    """
    lib = evaluate_library(
        problem.descriptors, state.theta, problem.basis_by_deriv,
        coords=problem.colloc_coords)
    lhs = problem.lhs_basis.matrix @ state.theta
    try:
        result = st_sparse_bayes(lib.values, lhs, threshold=hyper.threshold)
    except DiscoveryFailure as exc:
        raise DiscoveryFailure("all terms pruned") from exc
    support = np.asarray(result.support)
    coeffs = result.coefficients.copy()
    residual_var = result.residual_var
    cap = int(state.active.size)
    if support.size > cap:
        strength = np.max(np.abs(coeffs[support]), axis=1)
        support = np.sort(support[np.argsort(-strength)[:cap]])
        sub = lib.values[:, support]
        w, *_ = np.linalg.lstsq(sub, lhs, rcond=None)
        coeffs = np.zeros_like(state.coeffs)
        coeffs[support] = w
        residual_var = np.mean((lhs - sub @ w) ** 2, axis=0)
    scale = np.mean(lhs * lhs)
    log_p = np.log(np.maximum(residual_var, 1e-12 * max(scale, 1.0)))
    return TrainState(state.theta.copy(), coeffs, support,
                      state.log_b.copy(), log_p)


def ado_train(problem: DiscoveryProblem, hyper: Hyperparams,
              state: TrainState | None = None):
    """Alternate gradient optimization with library pruning.

    Keeps the best post-prune state by loss; exits early once pruning
    removes nothing and the loss stops improving.  Returns the best state
    and a report with per-iteration losses and active-set sizes.
    """
    if state is None:
        state = initialize_state(problem, hyper)
    # Prune once at the pretrained state: with every candidate active the
    # first joint burst drags the spline off the data before any pruning
    # can see clean structure.  Later reselections may swap members back
    # in, so a noisy first cut is not fatal.  At high noise the pretrained
    # derivative may support no term at all; then the loop starts with the
    # full library.
    try:
        state = _prune(state, problem, hyper)
    except DiscoveryFailure:
        pass
    best_state, best_loss = None, np.inf
    losses, active_sizes = [], []
    prev_loss = None
    # With a weak derivative signal the posterior trades data fit for
    # equation certainty by inflating the data noise; anchoring B at its
    # initialization keeps the trajectory on the measurements while the
    # structure search runs.
    freeze = ("log_b",) if hyper.anchor_noise else ()
    for _ in range(hyper.ado_iters):
        state, _history = optimize(
            state, problem, hyper, hyper.ado_epochs, hyper.lr,
            freeze=freeze)
        state = _prune(state, problem, hyper)
        loss, _ = neg_log_posterior(state, problem, hyper, want_grads=False)
        losses.append(loss)
        active_sizes.append(int(state.active.size))
        if loss < best_loss:
            best_loss, best_state = loss, state.copy()
        same_support = active_sizes[-1] == (
            active_sizes[-2] if len(active_sizes) > 1 else -1)
        improved = prev_loss is None or loss < prev_loss - 1e-4 * abs(prev_loss)
        prev_loss = loss
        if same_support and not improved:
            break
    report = {
        "ado_losses": losses,
        "active_sizes": active_sizes,
        "best_loss": float(best_loss),
    }
    return best_state, report


@dataclass(frozen=True)
class SwagPosterior:
    """Running mean and low-rank covariance factor per parameter block."""

    mean: dict = field(repr=False)        # block name -> flat mean
    factors: dict = field(repr=False)     # block name -> (dim, rank) factor
    shapes: dict = field(repr=False)
    active: np.ndarray = field(repr=False)
    num_terms: int = 0
    rank: int = 0


def swag_collect(
    state: TrainState,
    problem: DiscoveryProblem,
    hyper: Hyperparams,
    epochs: int | None = None,
    lr: float | None = None,
    snapshot_every: int | None = None,
    rank: int | None = None,
    loss_fn=None,
    adaptive: bool = True,
) -> SwagPosterior:
    """Constant-learning-rate collection of iterates near the plateau.

    The running mean follows ``(i*mean + x)/(i+1)``; the covariance factor
    is the top-``rank`` PCA square root of the snapshot deviations.
    ``adaptive=False`` switches to plain gradient steps, whose iterate
    spread reflects the loss curvature directly.
    """
    epochs = hyper.swag_epochs if epochs is None else epochs
    lr = hyper.swag_lr if lr is None else lr
    snapshot_every = (hyper.snapshot_every if snapshot_every is None
                      else snapshot_every)
    rank = hyper.swag_rank if rank is None else rank
    if loss_fn is None:
        def loss_fn(s):
            return neg_log_posterior(s, problem, hyper)

    params = _params_of(state)
    opt = _Adam(params, lr) if adaptive else _Sgd(lr)
    current = _state_of(params, state)
    keys = list(params)
    running = {k: params[k].ravel().copy() for k in keys}
    snapshots = {k: [params[k].ravel().copy()] for k in keys}
    count = 1
    for step in range(1, epochs + 1):
        _loss, grads = loss_fn(current)
        opt.step(params, grads)
        current = _state_of(params, state)
        if step % snapshot_every == 0:
            for k in keys:
                flat = params[k].ravel().copy()
                running[k] = (count * running[k] + flat) / (count + 1)
                snapshots[k].append(flat)
            count += 1

    if rank > count:
        warnings.warn(
            f"rank {rank} clipped to {count} collected snapshots",
            stacklevel=2)
        rank = count
    mean, factors, shapes = {}, {}, {}
    for k in keys:
        stack = np.asarray(snapshots[k])
        deviations = stack - running[k]
        _u, sv, vt = np.linalg.svd(deviations, full_matrices=False)
        r = min(rank, sv.size)
        denom = np.sqrt(max(count - 1, 1))
        mean[k] = running[k]
        factors[k] = (vt[:r].T * sv[:r]) / denom
        shapes[k] = params[k].shape
    return SwagPosterior(
        mean=mean, factors=factors, shapes=shapes,
        active=state.active.copy(), num_terms=state.coeffs.shape[0],
        rank=rank)


def swag_sample(posterior: SwagPosterior, n: int, seed: int) -> list[TrainState]:
    """Draw parameter sets ``mean + factor @ z``; pruned coefficients stay 0."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    out = []
    num_states = posterior.shapes["theta"][1]
    for _ in range(n):
        blocks = {}
        for key, mean in posterior.mean.items():
            z = rng.standard_normal(posterior.factors[key].shape[1])
            blocks[key] = (mean + posterior.factors[key] @ z).reshape(
                posterior.shapes[key])
        coeffs = np.zeros((posterior.num_terms, num_states))
        coeffs[posterior.active] = blocks["W"]
        out.append(TrainState(
            theta=blocks["theta"], coeffs=coeffs,
            active=posterior.active.copy(),
            log_b=blocks["log_b"], log_p=blocks["log_p"]))
    return out


def run_discovery(problem: DiscoveryProblem, hyper: Hyperparams):
    """Full pipeline: ADO loop, decayed refinement, SWAG collection.

    Returns ``(state, posterior, report)`` where ``state`` is the refined
    training state and ``posterior`` the sampled-around plateau.  The
    refinement stages rerun the optimizer at decade-decayed learning rates
    with a sparse refit after each stage: the optimizer's stationary jitter
    at the base rate dominates the coefficient error once the support has
    settled.
    """
    state, report = ado_train(problem, hyper)
    if hyper.post_epochs > 0:
        stage = max(hyper.post_epochs // 4, 1)
        for frac in (0.3, 0.1, 0.03, 0.01):
            state, _ = optimize(state, problem, hyper, stage, hyper.lr * frac)
            state = _prune(state, problem, hyper)
        post_loss, _ = neg_log_posterior(
            state, problem, hyper, want_grads=False)
        report["post_loss"] = float(post_loss)
        report["best_loss"] = min(report["best_loss"], float(post_loss))
    posterior = swag_collect(state, problem, hyper)
    return state, posterior, report


@dataclass(frozen=True)
class EnsembleForecast:
    """Forward simulations of sampled models plus per-time quantiles."""

    times: np.ndarray = field(repr=False)
    members: np.ndarray = field(repr=False)    # (kept, nt, d) or (kept, nt, nx)
    quantiles: dict = field(repr=False)        # level -> (nt, ...) array
    dropped: int = 0
    x: np.ndarray | None = field(default=None, repr=False)


# Interior central stencils (2nd order) and one-sided edge stencils for
# spatial derivatives; edge rows anchor the stencil at their own index.
_FD_STENCILS = {
    1: ([-0.5, 0.0, 0.5], [-1.5, 2.0, -0.5]),
    2: ([1.0, -2.0, 1.0], [2.0, -5.0, 4.0, -1.0]),
    3: ([-0.5, 1.0, 0.0, -1.0, 0.5], [-2.5, 9.0, -12.0, 7.0, -1.5]),
    4: ([1.0, -4.0, 6.0, -4.0, 1.0], [3.0, -14.0, 26.0, -24.0, 11.0, -2.0]),
}

# On periodic grids low orders afford 4th-order central stencils, which
# cut the dispersion error that dominates advective forecasts.
_FD_PERIODIC = {
    1: [1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12],
    2: [-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12],
}


def _fd_matrix(
    num_points: int, dx: float, order: int, periodic: bool = False
) -> sp.csr_matrix:
    """Sparse differentiation matrix on a uniform grid.

    Periodic operators wrap the central stencil; open ones switch to
    one-sided stencils of matching width at the boundary rows.
    """
    if order not in _FD_STENCILS:
        raise ConfigError(f"no finite-difference stencil for order {order}")
    central, edge = _FD_STENCILS[order]
    half = len(central) // 2
    if num_points < len(edge):
        raise ConfigError(
            f"grid of {num_points} points too small for order-{order} stencil")
    if periodic:
        stencil = _FD_PERIODIC.get(order, central)
        half = len(stencil) // 2
        idx = np.arange(num_points)
        rows, cols, vals = [], [], []
        for off, c in enumerate(stencil):
            if c != 0.0:
                rows.append(idx)
                cols.append((idx + off - half) % num_points)
                vals.append(np.full(num_points, c))
        mat = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(num_points, num_points),
        ).tocsr()
        return mat / dx**order
    mat = sp.lil_matrix((num_points, num_points))
    for off, c in enumerate(central):
        if c != 0.0:
            mat.setdiag(c, off - half)
    for i in range(half):
        mat.rows[i], mat.data[i] = list(range(i, i + len(edge))), list(edge)
        j = num_points - 1 - i
        back = [c * (-1) ** order for c in reversed(edge)]
        mat.rows[j] = list(range(j - len(edge) + 1, j + 1))
        mat.data[j] = back
    return sp.csr_matrix(mat) / dx**order


def _rk4_segments(rhs, u0, times, substeps_for):
    """RK4 between consecutive output times; raises on non-finite state."""
    u = np.asarray(u0, dtype=float).copy()
    out = np.empty((len(times), u.size))
    out[0] = u
    total = 0
    for seg in range(len(times) - 1):
        t0, t1 = times[seg], times[seg + 1]
        n_sub = substeps_for(u, t1 - t0)
        total += n_sub
        if total > 500_000:
            raise DivergenceError(
                "stability limit demands too many internal steps", step=total)
        h = (t1 - t0) / n_sub
        t = t0
        for _ in range(n_sub):
            k1 = rhs(t, u)
            k2 = rhs(t + h / 2, u + h / 2 * k1)
            k3 = rhs(t + h / 2, u + h / 2 * k2)
            k4 = rhs(t + h, u + h * k3)
            u = u + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
            if not np.all(np.isfinite(u)):
                raise DivergenceError(
                    f"forecast diverged near t={t:.4g}", step=seg + 1)
        out[seg + 1] = u
    return out


def _coefficients_of(sample) -> np.ndarray:
    coeffs = sample.coeffs if isinstance(sample, TrainState) else sample
    return np.atleast_2d(np.asarray(coeffs, dtype=float))


def _pde_stiffness(descriptors, weights, amplitude, dx):
    """Bound on the method-of-lines Jacobian spectral radius.

    The per-axis symbol of every stencil in use is below (2.45/dx)^order.
    """
    lam = 1e-12
    amp = max(float(amplitude), 1e-12)
    for w, term in zip(weights, descriptors):
        total_exp = sum(exp for _, _, exp in term.factors)
        eff_ord = sum(sum(deriv) * exp for _, deriv, exp in term.factors)
        lam += abs(w) * amp ** max(total_exp - 1, 0) * (2.45 / dx) ** eff_ord
    return lam


def propagate_uncertainty(
    samples,
    descriptors,
    benchmark,
    init: np.ndarray,
    times: np.ndarray,
    x: np.ndarray | None = None,
    quantiles=(0.05, 0.5, 0.95),
    dt_max: float | None = None,
    boundary: str = "periodic",
) -> EnsembleForecast:
    """Simulate every sampled model forward and summarize the ensemble.

    ODE systems integrate the recovered polynomial right-hand side with
    RK4; evolution PDEs advance a method-of-lines discretization whose
    spatial derivatives use the stencils in :data:`_FD_STENCILS` and whose
    internal step obeys an RK4 stability bound.  With the default
    ``boundary="periodic"`` the grid ``x`` must span one full period
    including both endpoints; the duplicated endpoint is folded away
    during integration.  ``boundary="open"`` switches to one-sided
    stencils instead.  Members whose state stops being finite are dropped
    and counted in ``dropped``.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2:
        raise ConfigError("need at least two output times")
    coeff_sets = [_coefficients_of(s) for s in samples]
    if not coeff_sets:
        raise ConfigError("need at least one parameter sample")
    init = np.asarray(init, dtype=float)

    if benchmark.kind == "ode":
        def make_member(coeffs):
            def substeps_for(u, span):
                if dt_max is not None:
                    return max(1, int(np.ceil(span / dt_max)))
                return 4

            return polynomial_rhs(descriptors, coeffs), substeps_for
    elif benchmark.kind == "evolution" and benchmark.axes[-1] == "t":
        if x is None:
            raise ConfigError("spatial grid x is required for PDE forecasts")
        if boundary not in ("periodic", "open"):
            raise ConfigError(
                f"boundary must be 'periodic' or 'open', got {boundary!r}")
        x = np.asarray(x, dtype=float)
        if init.shape != x.shape:
            raise ConfigError(
                f"initial field shape {init.shape} does not match grid "
                f"{x.shape}")
        dx = float(x[1] - x[0])
        periodic = boundary == "periodic"
        x_work = x[:-1] if periodic else x
        orders = sorted({
            sum(deriv) for term in descriptors
            for _, deriv, _ in term.factors if sum(deriv) > 0})
        for term in descriptors:
            for _, deriv, _ in term.factors:
                if deriv[-1] != 0:
                    raise ConfigError(
                        "right-hand side with time derivatives cannot be "
                        "advanced by the method of lines")
        fd_ops = {k: _fd_matrix(len(x_work), dx, k, periodic) for k in orders}

        def make_member(coeffs):
            w = coeffs[:, 0]

            def rhs(t, u):
                fields = {(0, (0, 0)): u}
                for k, op in fd_ops.items():
                    fields[(0, (k, 0))] = op @ u
                coords = np.column_stack([x_work, np.full(len(x_work), t)])
                lib = evaluate_library(
                    descriptors, None, None, coords=coords, fields=fields)
                return lib.values @ w

            def substeps_for(u, span):
                lam = _pde_stiffness(descriptors, w, np.max(np.abs(u)), dx)
                n_sub = int(np.ceil(span * lam / 2.5))
                if dt_max is not None:
                    n_sub = max(n_sub, int(np.ceil(span / dt_max)))
                return max(1, n_sub)

            return rhs, substeps_for
    else:
        raise ConfigError(
            f"benchmark {benchmark.name!r} has no time axis to forecast")

    fold = benchmark.kind == "evolution" and boundary == "periodic"
    u0 = init[:-1] if fold else init
    kept, dropped = [], 0
    for coeffs in coeff_sets:
        rhs, substeps_for = make_member(coeffs)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                traj = _rk4_segments(rhs, u0, times, substeps_for)
        except DivergenceError:
            dropped += 1
            continue
        if fold:
            traj = np.concatenate([traj, traj[:, :1]], axis=1)
        kept.append(traj)
    if not kept:
        raise DivergenceError(
            "every ensemble member diverged during the forecast", step=0)
    members = np.stack(kept)
    qs = {
        float(q): np.quantile(members, q, axis=0) for q in quantiles
    }
    return EnsembleForecast(
        times=times, members=members, quantiles=qs, dropped=dropped, x=x)
