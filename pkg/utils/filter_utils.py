"""Kalman and H-infinity filters written as (regularized) least-squares solutions.

Both filters share one weighted linear-regression core. The H-infinity filter adds
a negative-weight block to the regression, which is why its information matrix
can stop being positive definite when alpha is too large.
"""

import logging
import numpy as np
from dataclasses import dataclass, replace
from typing import List
from scipy.linalg import (
    LinAlgError,
    block_diag,
    cho_factor,
    cho_solve,
    inv,
    lu_factor,
    lu_solve,
)

from ltv_sentinel.exceptions import ConfigError, InfeasibleError, NumericalError
from utils.enums import FilterKind, tolerances
from utils.model_utils import (
    Dimensions,
    LtvSystem,
    MatrixSchedule,
    SimulationTrace,
    SystemMatrices,
    as_matrix,
    as_schedule,
    as_vector,
    is_symmetric,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FilterState:
    """Prior/posterior estimate and covariance at step k, plus the gain used."""

    k: int
    x_prior: np.ndarray
    P_prior: np.ndarray
    x_post: np.ndarray = None
    P_post: np.ndarray = None
    gain: np.ndarray = None


def initial_state(n: int, x0=None, P0=None) -> FilterState:
    """Returns the step-0 prior, x̂_{0|-1} = 0 and P_{0|-1} = I unless overridden."""
    x_prior = np.zeros(n) if x0 is None else as_vector(x0, n, "x0")
    P_prior = np.eye(n) if P0 is None else as_matrix(P0, n, n, "P0")
    if not is_symmetric(P_prior):
        raise ConfigError("P0 must be symmetric")
    return FilterState(k=0, x_prior=x_prior, P_prior=P_prior)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return (P + P.T) / 2


def spd_inverse(M: np.ndarray, what: str = "matrix", step: int = None) -> np.ndarray:
    try:
        factor = cho_factor(M)
    except LinAlgError as e:
        where = f" at step {step}" if step is not None else ""
        raise NumericalError(f"{what} is not positive definite{where}: {e}") from e
    return cho_solve(factor, np.eye(M.shape[0]))


@dataclass(frozen=True, eq=False)
class HinfConfig:
    """H-infinity design parameters.

    Args:
        alpha (float): Performance parameter, non-negative. Zero gives the Kalman filter.
        S (MatrixSchedule, array-like): Symmetric positive-definite weight. Defaults to identity (optional).
        L (MatrixSchedule, array-like): Full-rank combination matrix, z_k = L_k x_k. Defaults to identity (optional).
    """

    alpha: float = 0.0
    S: MatrixSchedule = None
    L: MatrixSchedule = None

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be a finite non-negative number, got {self.alpha}")
        if self.L is not None:
            L = as_schedule(self.L, name="L")
            for key, value in L.breakpoints():
                if np.linalg.matrix_rank(value) != min(value.shape):
                    raise ConfigError(f"L[{key}] is not full rank")
            object.__setattr__(self, "L", L)
        if self.S is not None:
            S = as_schedule(self.S, name="S")
            for key, value in S.breakpoints():
                if not is_symmetric(value) or np.linalg.eigvalsh(value).min() <= tolerances["pd_eigenvalue"]:
                    raise ConfigError(f"S[{key}] is not symmetric positive definite")
            object.__setattr__(self, "S", S)

    def L_at(self, k: int, n: int) -> np.ndarray:
        return np.eye(n) if self.L is None else self.L.at(k)

    def S_at(self, k: int, n: int) -> np.ndarray:
        rows = self.L_at(k, n).shape[0]
        return np.eye(rows) if self.S is None else self.S.at(k)

    def to_config(self) -> dict:
        config = {"alpha": float(self.alpha)}
        if self.S is not None:
            config["S"] = self.S.to_config()
        if self.L is not None:
            config["L"] = self.L.to_config()
        return config


def kf_update(state: FilterState, y, C, D, R, u) -> FilterState:
    """Measurement update of the Kalman filter.

    K_k = P C^T (C P C^T + R)^-1, x̂_{k|k} = x̂ + K (y - C x̂ - D u), P_{k|k} = (I - K C) P.

    Raises:
        NumericalError: If C P C^T + R is not positive definite.
    """
    x, P = state.x_prior, state.P_prior
    S = C @ P @ C.T + R
    try:
        factor = cho_factor(S)
    except LinAlgError as e:
        raise NumericalError(f"Innovation covariance is singular at step {state.k}: {e}") from e
    K = cho_solve(factor, C @ P).T
    x_post = x + K @ (y - C @ x - D @ u)
    P_post = symmetrize((np.eye(x.shape[0]) - K @ C) @ P)
    return replace(state, x_post=x_post, P_post=P_post, gain=K)


def hinf_information(P_prior, cfg: HinfConfig, C, R, k: int = 0) -> np.ndarray:
    """Returns P^-1 - alpha L^T S L + C^T R^-1 C, symmetrized."""
    n = P_prior.shape[0]
    L = cfg.L_at(k, n)
    S = cfg.S_at(k, n)
    info = (
        spd_inverse(P_prior, "Prior covariance", k)
        - cfg.alpha * L.T @ S @ L
        + C.T @ spd_inverse(R, "Measurement covariance", k) @ C
    )
    return symmetrize(info)


def hinf_feasible(P_prior, cfg: HinfConfig, C, R, k: int = 0) -> bool:
    """True iff the H-infinity information matrix is positive definite at step k."""
    try:
        info = hinf_information(P_prior, cfg, C, R, k)
    except NumericalError:
        return False
    return bool(np.linalg.eigvalsh(info).min() > tolerances["pd_eigenvalue"])


def hinf_update(state: FilterState, cfg: HinfConfig, y, C, D, R, u) -> FilterState:
    """Measurement update of the H-infinity filter.

    P_{k|k} = (P^-1 - alpha L^T S L + C^T R^-1 C)^-1, K_k = P_{k|k} C^T R^-1,
    x̂_{k|k} = x̂ + K (y - C x̂ - D u). With alpha = 0 this is the Kalman update.

    Raises:
        InfeasibleError: If the information matrix is not positive definite.
    """
    if cfg.alpha == 0:
        return kf_update(state, y, C, D, R, u)
    x = state.x_prior
    info = hinf_information(state.P_prior, cfg, C, R, state.k)
    smallest = np.linalg.eigvalsh(info).min()
    if smallest <= tolerances["pd_eigenvalue"]:
        raise InfeasibleError(
            f"H-infinity information matrix is not positive definite for alpha={cfg.alpha} "
            f"(smallest eigenvalue {smallest:.3e})",
            step=state.k,
        )
    cond = np.linalg.cond(info)
    if cond > tolerances["condition_cap"]:
        logger.warning(f"Ill-conditioned H-infinity information matrix at step {state.k} (cond {cond:.2e})")
    P_post = symmetrize(lu_solve(lu_factor(info), np.eye(x.shape[0])))
    K = P_post @ C.T @ spd_inverse(R, "Measurement covariance", state.k)
    x_post = x + K @ (y - C @ x - D @ u)
    return replace(state, x_post=x_post, P_post=P_post, gain=K)


def predict(state: FilterState, A, B, Q, u) -> FilterState:
    """Time update: x̂_{k+1|k} = A x̂_{k|k} + B u, P_{k+1|k} = A P_{k|k} A^T + Q."""
    return FilterState(
        k=state.k + 1,
        x_prior=A @ state.x_post + B @ u,
        P_prior=symmetrize(A @ state.P_post @ A.T + Q),
    )


@dataclass(eq=False)
class RegressionProblem:
    """m = H x + e with block-diagonal weight W = diag(blocks); blocks may be indefinite."""

    m: np.ndarray
    H: np.ndarray
    blocks: List[np.ndarray]

    @property
    def W(self) -> np.ndarray:
        return block_diag(*self.blocks)


def solve_weighted_regression(problem: RegressionProblem, step: int = 0):
    """Returns the stationary point (H^T W^-1 H)^-1 H^T W^-1 m and (H^T W^-1 H)^-1.

    Raises:
        NumericalError: If a weight block is singular.
        InfeasibleError: If H^T W^-1 H is not positive definite.
    """
    try:
        W_inv = block_diag(*[inv(block) for block in problem.blocks])
    except LinAlgError as e:
        raise NumericalError(f"Regression weight is singular at step {step}: {e}") from e
    info = symmetrize(problem.H.T @ W_inv @ problem.H)
    smallest = np.linalg.eigvalsh(info).min()
    if smallest <= tolerances["pd_eigenvalue"]:
        raise InfeasibleError(
            f"Regression information matrix is not positive definite (smallest eigenvalue {smallest:.3e})",
            step=step,
        )
    factor = cho_factor(info)
    covariance = symmetrize(cho_solve(factor, np.eye(info.shape[0])))
    estimate = cho_solve(factor, problem.H.T @ W_inv @ problem.m)
    return estimate, covariance


def kf_regression(state: FilterState, y, C, D, R, u) -> RegressionProblem:
    n = state.x_prior.shape[0]
    return RegressionProblem(
        m=np.concatenate([state.x_prior, y - D @ u]),
        H=np.vstack([np.eye(n), C]),
        blocks=[state.P_prior, R],
    )


def hinf_regression(state: FilterState, cfg: HinfConfig, y, C, D, R, u) -> RegressionProblem:
    if cfg.alpha == 0:
        return kf_regression(state, y, C, D, R, u)
    n = state.x_prior.shape[0]
    L = cfg.L_at(state.k, n)
    S = cfg.S_at(state.k, n)
    return RegressionProblem(
        m=np.concatenate([state.x_prior, L @ state.x_prior, y - D @ u]),
        H=np.vstack([np.eye(n), L, C]),
        blocks=[state.P_prior, -spd_inverse(S, "S", state.k) / cfg.alpha, R],
    )


@dataclass(frozen=True, eq=False)
class FilterSpec:
    """Which filter to run and how to initialize it.

    Args:
        kind (FilterKind): kalman or hinf.
        hinf (HinfConfig): H-infinity parameters, ignored for kalman (optional).
        x0 (array-like): Initial prior estimate. Defaults to zero (optional).
        P0 (array-like): Initial prior covariance. Defaults to identity (optional).
    """

    kind: FilterKind = FilterKind.KALMAN
    hinf: HinfConfig = None
    x0: np.ndarray = None
    P0: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "kind", FilterKind(self.kind))
        if self.hinf is None:
            object.__setattr__(self, "hinf", HinfConfig())

    @property
    def alpha(self) -> float:
        return self.hinf.alpha if self.kind is FilterKind.HINF else 0.0

    @property
    def name(self) -> str:
        if self.kind is FilterKind.KALMAN:
            return "kalman"
        return f"hinf(alpha={self.hinf.alpha:g})"

    def with_alpha(self, alpha: float) -> "FilterSpec":
        return replace(self, kind=FilterKind.HINF, hinf=replace(self.hinf, alpha=alpha))

    def to_config(self) -> dict:
        config = {"kind": self.kind.value}
        if self.kind is FilterKind.HINF:
            config.update(self.hinf.to_config())
        if self.x0 is not None:
            config["x0"] = np.asarray(self.x0, dtype=float).tolist()
        if self.P0 is not None:
            config["P0"] = np.asarray(self.P0, dtype=float).tolist()
        return config


class LtvFilter:
    """Runs a Kalman or H-infinity filter one step at a time.

    Args:
        spec (FilterSpec): Filter kind and initialization.
        dims (Dimensions): System sizes.
        check (bool): Verify covariance symmetry and positive definiteness every step. Defaults to False (optional).
        logger (logging.Logger): Logger instance for logging. Defaults to None (optional).
    """

    def __init__(self, spec: FilterSpec, dims: Dimensions, check: bool = False, logger=None):
        self.spec = spec
        self.dims = dims
        self.check = check
        self.logger = logger or logging.getLogger(__name__)
        self.state = initial_state(dims.n, spec.x0, spec.P0)

    def update(self, y, u, mats: SystemMatrices) -> FilterState:
        if self.spec.kind is FilterKind.HINF:
            self.state = hinf_update(self.state, self.spec.hinf, y, mats.C, mats.D, mats.R, u)
        else:
            self.state = kf_update(self.state, y, mats.C, mats.D, mats.R, u)
        if self.check:
            self._check_covariance(self.state.P_post, "posterior")
        return self.state

    def predict(self, u, mats: SystemMatrices) -> FilterState:
        self.state = predict(self.state, mats.A, mats.B, mats.Q, u)
        if self.check:
            self._check_covariance(self.state.P_prior, "prior")
        return self.state

    def _check_covariance(self, P: np.ndarray, which: str) -> None:
        if not is_symmetric(P) or np.linalg.eigvalsh(P).min() <= 0:
            raise NumericalError(f"The {which} covariance lost positive definiteness at step {self.state.k}")


@dataclass(eq=False)
class FilterTrajectory:
    """Per-step filter history; arrays are indexed by step k."""

    x_prior: np.ndarray
    P_prior: np.ndarray
    x_post: np.ndarray
    P_post: np.ndarray
    gain: np.ndarray


def run_filter(system: LtvSystem, trace: SimulationTrace, spec: FilterSpec, check: bool = False) -> FilterTrajectory:
    """Filters a recorded trace and returns the full prior/posterior history."""
    dims = system.dims
    N = trace.N
    history = FilterTrajectory(
        x_prior=np.zeros((N, dims.n)),
        P_prior=np.zeros((N, dims.n, dims.n)),
        x_post=np.zeros((N, dims.n)),
        P_post=np.zeros((N, dims.n, dims.n)),
        gain=np.zeros((N, dims.n, dims.p)),
    )
    ltv_filter = LtvFilter(spec, dims, check=check)
    for k in range(N):
        mats = system.matrices_at(k)
        history.x_prior[k] = ltv_filter.state.x_prior
        history.P_prior[k] = ltv_filter.state.P_prior
        posterior = ltv_filter.update(trace.y[k], trace.u[k], mats)
        history.x_post[k] = posterior.x_post
        history.P_post[k] = posterior.P_post
        history.gain[k] = posterior.gain
        ltv_filter.predict(trace.u[k], mats)
    return history
