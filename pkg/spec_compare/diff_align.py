"""
SPEC-diff (spectral radius of Gamma), its gradient for a linear trainable
embedding psi_W(x) = W x, and a plain gradient-descent alignment loop.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from spec_compare.config import AlignConfig
from spec_compare.errors import (
    AlignDivergenceError,
    DegenerateEigenvalueError,
    NumericalError,
    PowerIterationError,
    ValidationError,
)
from spec_compare.io_model import PairedDataset
from spec_compare.kernels import FeatureMap
from spec_compare.spec_core import GammaMatrix, accumulate, build_gamma, covariance_from_features

logger = logging.getLogger(__name__)

# ||Gamma v - lambda v|| must also be this small (relative to max(1, ||Gamma||_F))
RESIDUAL_TOL = 1e-9
NULL_TOL = 1e-14
DEGENERACY_TOL = 1e-6
AGREEMENT_TOL = 1e-7

TaskLoss = Callable[[np.ndarray], Tuple[float, np.ndarray]]
TRAJECTORY_COLUMNS = ["iteration", "spec_diff", "task_loss", "grad_norm"]


@dataclass(frozen=True)
class SpecDiffResult:
    rho: float
    lambda_top: float
    u_left: np.ndarray
    u_right: np.ndarray
    iterations: int
    converged: bool
    degenerate: bool = False
    second: float = 0.0  # |lambda_2|, used for the degeneracy flag

    def to_dict(self):
        return {
            "rho": self.rho,
            "lambda_top": self.lambda_top,
            "iterations": self.iterations,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "second_abs_eigenvalue": self.second,
            "u_left": [float(x) for x in self.u_left],
            "u_right": [float(x) for x in self.u_right],
        }


@dataclass
class AlignState:
    W: np.ndarray
    beta: float
    step: float
    history: List[Tuple[int, float, float, float]] = field(default_factory=list)
    spec_diff: float = 0.0
    u_left: Optional[np.ndarray] = None
    u_right: Optional[np.ndarray] = None
    gradient: Optional[np.ndarray] = None
    retries: int = 0

    @property
    def initial_spec_diff(self) -> float:
        return self.history[0][1] if self.history else self.spec_diff


def _as_dense(gamma: Union[GammaMatrix, np.ndarray]) -> np.ndarray:
    return gamma.dense if isinstance(gamma, GammaMatrix) else np.asarray(gamma, dtype=np.float64)


def _power(A: np.ndarray, tol: float, max_iter: int, seed: int) -> Tuple[float, np.ndarray, int]:
    size = A.shape[0]
    scale = max(1.0, float(np.linalg.norm(A)))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(size)
    x /= np.linalg.norm(x)

    lam_prev = None
    residual = np.inf
    for it in range(1, max_iter + 1):
        y = A @ x
        norm_y = np.linalg.norm(y)
        if norm_y <= NULL_TOL * scale:
            return 0.0, x, it
        lam = float(x @ y)
        residual = float(np.linalg.norm(y - lam * x))
        if lam_prev is not None and abs(lam - lam_prev) < tol * max(1.0, abs(lam)) and residual <= RESIDUAL_TOL * scale:
            return lam, x, it
        lam_prev = lam
        x = y / norm_y

    raise PowerIterationError(
        f"power iteration did not converge in {max_iter} iterations (residual {residual:.3g})",
        residual=residual,
        iterations=max_iter,
    )


def power_top_eigenpair(
    gamma: Union[GammaMatrix, np.ndarray],
    side: str = "right",
    tol: float = 1e-12,
    max_iter: int = 5000,
    seed: int = 0,
) -> Tuple[float, np.ndarray]:
    """
    Dominant-|lambda| eigenpair of Gamma (right) or Gamma^T (left).

    Converged when successive Rayleigh quotients differ by < tol and the
    residual is small; a vanishing iterate means lambda = 0.
    """
    if tol <= 0:
        raise ValidationError(f"tol must be positive, got {tol}")
    if side not in ("right", "left"):
        raise ValidationError(f"side must be 'right' or 'left', got '{side}'")
    A = _as_dense(gamma)
    if side == "left":
        A = A.T
    lam, vec, _ = _power(A, tol, max_iter, seed)
    return lam, vec


def _dense_top(A: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    try:
        w, vl, vr = linalg.eig(A, left=True, right=True)
    except linalg.LinAlgError as e:
        raise NumericalError(f"dense eigensolver failed: {e}")
    mags = np.abs(w.real)
    top = mags.max()
    # on a +/- tie prefer the positive eigenvalue
    candidates = np.flatnonzero(mags >= top - 1e-12 * max(1.0, top))
    idx = max(candidates, key=lambda i: w.real[i])
    return float(w.real[idx]), vl[:, idx].real, vr[:, idx].real


def _second_abs_eigenvalue(A: np.ndarray, lam: float, u_left: np.ndarray, u_right: np.ndarray,
                           tol: float, max_iter: int, seed: int) -> float:
    deflated = A - lam * np.outer(u_right, u_left)
    try:
        second, _, _ = _power(deflated, tol, max_iter, seed + 1)
        return abs(second)
    except PowerIterationError:
        mags = np.sort(np.abs(linalg.eigvals(A).real))[::-1]
        return float(mags[1]) if mags.size > 1 else 0.0


def spec_diff_from_gamma(
    gamma: Union[GammaMatrix, np.ndarray],
    tol: float = 1e-12,
    max_iter: int = 5000,
    seed: int = 0,
) -> SpecDiffResult:
    A = _as_dense(gamma)
    scale = max(1.0, float(np.linalg.norm(A)))

    converged = True
    try:
        lam_r, u_right, it_r = _power(A, tol, max_iter, seed)
        lam_l, u_left, it_l = _power(A.T, tol, max_iter, seed)
        iterations = it_r + it_l
        if abs(lam_r - lam_l) > AGREEMENT_TOL * max(1.0, abs(lam_r)):
            raise PowerIterationError(f"left/right power iterations disagree ({lam_r:.6g} vs {lam_l:.6g})")
    except PowerIterationError as e:
        logger.debug(f"Falling back to dense eigensolve: {e}")
        converged = False
        iterations = max_iter
        lam_r, u_left, u_right = _dense_top(A)

    if abs(lam_r) <= NULL_TOL * scale:
        zero = np.zeros(A.shape[0])
        return SpecDiffResult(rho=0.0, lambda_top=0.0, u_left=zero, u_right=zero,
                              iterations=iterations, converged=converged)

    u_right = u_right / np.linalg.norm(u_right)
    overlap = float(u_left @ u_right)
    if abs(overlap) <= NULL_TOL:
        raise NumericalError("left and right top eigenvectors are orthogonal, eigenvalue is defective")
    u_left = u_left / overlap

    # two-sided Rayleigh quotient, exact for u_left^T u_right = 1
    lam = float(u_left @ A @ u_right)
    rho = abs(lam)

    second = _second_abs_eigenvalue(A, lam, u_left, u_right, tol, max_iter, seed)
    degenerate = (rho - second) < DEGENERACY_TOL * rho
    if degenerate:
        logger.warning(f"Top eigenvalue of Gamma is degenerate (|lambda_1|={rho:.6g}, |lambda_2|={second:.6g})")

    return SpecDiffResult(
        rho=rho,
        lambda_top=lam,
        u_left=u_left,
        u_right=u_right,
        iterations=iterations,
        converged=converged,
        degenerate=degenerate,
        second=second,
    )


def spec_diff(
    paired: PairedDataset,
    map1: FeatureMap,
    map2: FeatureMap,
    chunk_size: int = 4096,
    tol: float = 1e-12,
    max_iter: int = 5000,
    seed: int = 0,
) -> SpecDiffResult:
    """SPEC-diff rho(Lambda), computed on Gamma after one accumulation pass."""
    gamma = build_gamma(accumulate(paired, map1, map2, chunk_size=chunk_size))
    return spec_diff_from_gamma(gamma, tol=tol, max_iter=max_iter, seed=seed)


def _check_linear_inputs(X, W, F) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if X.ndim != 2 or F.ndim != 2 or W.ndim != 2:
        raise ValidationError("raw inputs, W and reference features must be 2-D")
    if X.shape[0] != F.shape[0]:
        raise ValidationError(f"sample count mismatch: {X.shape[0]} vs {F.shape[0]}")
    if W.shape[1] != X.shape[1]:
        raise ValidationError(f"W has {W.shape[1]} columns, raw inputs have width {X.shape[1]}")
    return X, W, F


def linear_spec_diff(X, W, F, tol: float = 1e-12, max_iter: int = 5000, seed: int = 0) -> SpecDiffResult:
    """SPEC-diff between psi_W(x) = W x and reference features F, both under the linear kernel."""
    X, W, F = _check_linear_inputs(X, W, F)
    gamma = build_gamma(covariance_from_features(X @ W.T, F))
    return spec_diff_from_gamma(gamma, tol=tol, max_iter=max_iter, seed=seed)


def gradient_from_result(X, W, F, result: SpecDiffResult, batch: Optional[np.ndarray] = None) -> np.ndarray:
    """
    d rho / d W with u_left = [a; c], u_right = [b; e] held fixed:

        u_left^T Gamma u_right = a^T W S W^T b + a^T W M e - c^T M^T W^T b - c^T C2 e
        grad = sign(lambda) * ((a b^T + b a^T) W S + a (M e)^T - b (M c)^T)

    with S = X^T X / n and M = X^T F / n, averaged over `batch` rows when given.
    """
    X, W, F = _check_linear_inputs(X, W, F)
    if result.rho == 0.0:
        return np.zeros_like(W)
    if batch is not None:
        X, F = X[batch], F[batch]

    d1 = W.shape[0]
    a, c = result.u_left[:d1], result.u_left[d1:]
    b, e = result.u_right[:d1], result.u_right[d1:]
    n = X.shape[0]
    S = X.T @ X / n
    M = X.T @ F / n

    grad = (np.outer(a, b) + np.outer(b, a)) @ W @ S + np.outer(a, M @ e) - np.outer(b, M @ c)
    return np.sign(result.lambda_top) * grad


def spec_diff_gradient(raw_inputs, W, reference_features, batch: Optional[np.ndarray] = None,
                       tol: float = 1e-12, max_iter: int = 5000, seed: int = 0) -> np.ndarray:
    result = linear_spec_diff(raw_inputs, W, reference_features, tol=tol, max_iter=max_iter, seed=seed)
    if result.rho == 0.0:
        return np.zeros_like(np.asarray(W, dtype=np.float64))
    if result.degenerate:
        raise DegenerateEigenvalueError(
            f"top eigenvalue is not unique (|lambda_1|={result.rho:.6g}, |lambda_2|={result.second:.6g})"
        )
    return gradient_from_result(raw_inputs, W, reference_features, result, batch=batch)


def zero_task_loss(W: np.ndarray) -> Tuple[float, np.ndarray]:
    return 0.0, np.zeros_like(W)


def weight_decay_loss(coef: float) -> TaskLoss:
    def loss(W):
        return 0.5 * coef * float(np.sum(W * W)), coef * W
    return loss


def align_descent(
    raw_inputs,
    reference_features,
    config: AlignConfig,
    W0: Optional[np.ndarray] = None,
    task_loss: Optional[TaskLoss] = None,
) -> AlignState:
    """
    W <- W - step * (grad task + beta * grad SPEC-diff).

    History holds one row per evaluated iterate, starting with the initial W.
    """
    X = np.asarray(raw_inputs, dtype=np.float64)
    F = np.asarray(reference_features, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    n, dx = X.shape

    if W0 is None:
        out_dim = config.out_dim or F.shape[1]
        W = rng.standard_normal((out_dim, dx)) * config.init_scale / np.sqrt(dx)
    else:
        W = np.array(W0, dtype=np.float64, copy=True)
    if task_loss is None:
        task_loss = weight_decay_loss(config.weight_decay) if config.weight_decay > 0 else zero_task_loss

    state = AlignState(W=W, beta=config.beta, step=config.step)
    use_spec = config.beta > 0 and config.step > 0

    def evaluate(W):
        return linear_spec_diff(X, W, F, tol=config.power_tol, max_iter=config.power_max_iter, seed=config.seed)

    for it in range(config.iterations + 1):
        result = evaluate(state.W)

        retries = 0
        while use_spec and result.degenerate:
            if retries >= config.max_retries:
                raise DegenerateEigenvalueError(f"top eigenvalue still degenerate after {retries} jitter retries")
            retries += 1
            state.retries += 1
            logger.warning(f"iteration {it}: degenerate top eigenvalue, retrying with jitter {config.jitter:g}")
            state.W = state.W + config.jitter * rng.standard_normal(state.W.shape)
            result = evaluate(state.W)

        loss, grad = task_loss(state.W)
        if use_spec and result.rho > 0:
            batch = None
            if config.batch_size is not None and config.batch_size < n:
                batch = np.sort(rng.choice(n, size=config.batch_size, replace=False))
            grad = grad + config.beta * gradient_from_result(X, state.W, F, result, batch=batch)

        state.spec_diff = result.rho
        state.u_left, state.u_right = result.u_left, result.u_right
        state.gradient = grad
        state.history.append((it, result.rho, float(loss), float(np.linalg.norm(grad))))
        logger.debug(f"iteration {it}: spec_diff={result.rho:.6g} task_loss={loss:.6g}")

        initial = state.initial_spec_diff
        if initial > 0 and result.rho > config.divergence_factor * initial:
            raise AlignDivergenceError(
                f"spec_diff {result.rho:.6g} exceeded {config.divergence_factor:g}x the initial {initial:.6g} at iteration {it}",
                state=state,
            )
        if config.early_stop_ratio > 0 and result.rho <= config.early_stop_ratio * initial:
            logger.info(f"✓ Reached {config.early_stop_ratio:g}x initial spec_diff at iteration {it}")
            break
        if it == config.iterations:
            break
        state.W = state.W - config.step * grad

    return state


def write_trajectory(state: AlignState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(state.history, columns=TRAJECTORY_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.12g")
    logger.info(f"Trajectory ({len(frame)} rows) saved to {path}")
