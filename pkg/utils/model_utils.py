import bisect
import logging
import numpy as np
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Tuple

from ltv_sentinel.exceptions import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FactorizationError,
)
from utils.enums import ControllerKind, FaultKind, NoiseKind, tolerances

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dimensions:
    """Sizes of the state (n), input (l), output (p) and fault vector (m)."""

    n: int
    l: int
    p: int
    m: int

    def __post_init__(self):
        for name in ("n", "l", "p", "m"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise DimensionError(f"Dimension '{name}' must be an integer, got {value!r}")
        if self.n < 1 or self.p < 1 or self.m < 1:
            raise DimensionError("Dimensions n, p and m must be at least 1")
        if self.l < 0:
            raise DimensionError("Input size l must be non-negative")
        if self.m > self.n:
            raise DimensionError(f"Fault size m={self.m} exceeds state size n={self.n}")


def as_matrix(value, rows: int = None, cols: int = None, name: str = "matrix") -> np.ndarray:
    """Converts a scalar or nested sequence into a 2-D float array, checking its shape.

    Scalars broadcast to a 1x1 matrix; one-dimensional input becomes a single row,
    unless an explicit column count of 1 asks for a column.

    Args:
        value: Scalar, nested list or array.
        rows (int): Expected row count (optional).
        cols (int): Expected column count (optional).
        name (str): Name used in error messages. Defaults to 'matrix' (optional).

    Returns:
        np.ndarray: The 2-D array.

    Raises:
        DimensionError: If the shape does not match.
    """
    arr = np.array(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if cols == 1 and rows != 1 else arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if arr.size == 0 and rows is not None and cols is not None and rows * cols == 0:
        arr = arr.reshape(rows, cols)
    if (rows is not None and arr.shape[0] != rows) or (cols is not None and arr.shape[1] != cols):
        raise DimensionError(f"{name} must have shape ({rows}, {cols}), got {arr.shape}")
    return arr


def as_vector(value, size: int = None, name: str = "vector") -> np.ndarray:
    arr = np.atleast_1d(np.array(value, dtype=float)).ravel()
    if size is not None and arr.shape[0] != size:
        raise DimensionError(f"{name} must have length {size}, got {arr.shape[0]}")
    return arr


class MatrixSchedule:
    """Piecewise-constant matrix sequence indexed by step.

    The entry with the largest key not exceeding k applies at step k, so a
    single entry at key 0 is a constant matrix.

    Args:
        table (Mapping[int, array-like]): Step index to matrix. Key 0 is required.
        rows (int): Expected row count (optional).
        cols (int): Expected column count (optional).
        name (str): Name used in error messages (optional).
    """

    def __init__(self, table: Mapping[int, object], rows: int = None, cols: int = None, name: str = "matrix"):
        if not table:
            raise ConfigError(f"{name} schedule is empty")
        keys = sorted(int(k) for k in table)
        if keys[0] != 0:
            raise ConfigError(f"{name} schedule must define step 0")
        self.name = name
        self._keys = keys
        self._values = []
        for key in keys:
            value = table[key] if key in table else table[str(key)]
            matrix = as_matrix(value, rows, cols, name=f"{name}[{key}]")
            rows, cols = matrix.shape
            matrix.setflags(write=False)
            self._values.append(matrix)
        self.shape = (rows, cols)

    @classmethod
    def constant(cls, value, rows: int = None, cols: int = None, name: str = "matrix") -> "MatrixSchedule":
        return cls({0: value}, rows, cols, name)

    @property
    def is_constant(self) -> bool:
        return len(self._keys) == 1

    def breakpoints(self):
        return list(zip(self._keys, self._values))

    def at(self, k: int) -> np.ndarray:
        if k < 0:
            raise ValueError(f"Step index must be non-negative, got {k}")
        return self._values[bisect.bisect_right(self._keys, k) - 1]

    def to_config(self):
        if self.is_constant:
            return self._values[0].tolist()
        return {"table": {key: value.tolist() for key, value in zip(self._keys, self._values)}}


def as_schedule(value, rows: int = None, cols: int = None, name: str = "matrix") -> MatrixSchedule:
    if isinstance(value, MatrixSchedule):
        if (rows is not None and value.shape[0] != rows) or (cols is not None and value.shape[1] != cols):
            raise DimensionError(f"{name} must have shape ({rows}, {cols}), got {value.shape}")
        return value
    if isinstance(value, Mapping):
        return MatrixSchedule(value.get("table", value), rows, cols, name)
    return MatrixSchedule.constant(value, rows, cols, name)


class SystemMatrices(NamedTuple):
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    R: np.ndarray


class LtvSystem:
    """Discrete linear time-varying system with its noise covariances.

    Args:
        dims (Dimensions): Declared sizes.
        A, B, C, D, Q, R: Matrices or MatrixSchedules of shapes n×n, n×l, p×n, p×l, n×n, p×p.
    """

    def __init__(self, dims: Dimensions, A, B, C, D, Q, R):
        n, l, p = dims.n, dims.l, dims.p
        self.dims = dims
        self.A = as_schedule(A, n, n, "A")
        self.B = as_schedule(B, n, l, "B")
        self.C = as_schedule(C, p, n, "C")
        self.D = as_schedule(D, p, l, "D")
        self.Q = as_schedule(Q, n, n, "Q")
        self.R = as_schedule(R, p, p, "R")
        for schedule in (self.Q, self.R):
            for key, value in schedule.breakpoints():
                if not is_symmetric(value):
                    raise ConfigError(f"{schedule.name}[{key}] is not symmetric")

    def matrices_at(self, k: int) -> SystemMatrices:
        return SystemMatrices(
            self.A.at(k), self.B.at(k), self.C.at(k), self.D.at(k), self.Q.at(k), self.R.at(k)
        )

    def covariances_valid(self) -> bool:
        """Checks Q_k positive semidefinite and R_k positive definite at every breakpoint."""
        tol = tolerances["pd_eigenvalue"]
        for _, Q in self.Q.breakpoints():
            if np.linalg.eigvalsh(Q).min() < -tol:
                return False
        for _, R in self.R.breakpoints():
            if np.linalg.eigvalsh(R).min() <= tol:
                return False
        return True

    def to_config(self) -> dict:
        return {
            "dims": {"n": self.dims.n, "l": self.dims.l, "p": self.dims.p, "m": self.dims.m},
            "system": {
                name: getattr(self, name).to_config() for name in ("A", "B", "C", "D", "Q", "R")
            },
        }


def is_symmetric(matrix: np.ndarray, tol: float = None) -> bool:
    tol = tolerances["symmetry"] if tol is None else tol
    return matrix.shape[0] == matrix.shape[1] and bool(
        np.max(np.abs(matrix - matrix.T), initial=0.0) <= tol * max(1.0, np.max(np.abs(matrix), initial=0.0))
    )


def psd_factor(matrix: np.ndarray) -> np.ndarray:
    """Returns F with F @ F.T == matrix for a symmetric positive semidefinite matrix.

    Zero and rank-deficient covariances are accepted; they produce degenerate draws.

    Raises:
        FactorizationError: If the matrix is not symmetric or has a negative eigenvalue.
    """
    if not is_symmetric(matrix):
        raise FactorizationError("Covariance is not symmetric")
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    scale = max(1.0, float(np.max(np.abs(eigenvalues), initial=0.0)))
    if eigenvalues.min(initial=0.0) < -tolerances["psd_factor"] * scale:
        raise FactorizationError(
            f"Covariance is not positive semidefinite (min eigenvalue {eigenvalues.min():.3e})"
        )
    return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


@dataclass(frozen=True, eq=False)
class FaultModel:
    """Additive fault entering the state equation through Ψ_k(r)θ.

    Use the `none`, `impulse` and `step` constructors rather than building it directly.
    """

    kind: FaultKind
    n: int
    onset: int = 0
    theta: np.ndarray = None
    profile: MatrixSchedule = None

    def __post_init__(self):
        kind = FaultKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.onset < 0:
            raise ConfigError(f"Fault onset must be non-negative, got {self.onset}")
        if kind is FaultKind.STEP:
            if self.profile is None:
                raise ConfigError("A step fault needs a profile")
            profile = as_schedule(self.profile, self.n, None, "fault profile")
            m = profile.shape[1]
            if m > self.n:
                raise DimensionError(f"Fault size m={m} exceeds state size n={self.n}")
            object.__setattr__(self, "profile", profile)
        else:
            if self.profile is not None:
                raise ConfigError(f"A {kind.value} fault takes no profile")
            m = self.n
        theta = np.zeros(m) if self.theta is None else as_vector(self.theta, m, "theta")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def none(cls, n: int) -> "FaultModel":
        return cls(FaultKind.NONE, n)

    @classmethod
    def impulse(cls, onset: int, theta) -> "FaultModel":
        theta = as_vector(theta)
        return cls(FaultKind.IMPULSE, theta.shape[0], onset, theta)

    @classmethod
    def step(cls, onset: int, theta, profile) -> "FaultModel":
        profile = as_schedule(profile, name="fault profile")
        return cls(FaultKind.STEP, profile.shape[0], onset, theta, profile)

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    def with_onset(self, onset: int) -> "FaultModel":
        return replace(self, onset=onset)

    def with_theta(self, theta) -> "FaultModel":
        return replace(self, theta=as_vector(theta))

    def to_config(self) -> dict:
        config = {"kind": self.kind.value, "onset": self.onset, "theta": self.theta.tolist()}
        if self.profile is not None:
            config["profile"] = self.profile.to_config()
        return config


def effective_profile(fault: FaultModel, k: int) -> np.ndarray:
    """Returns Ψ_k(r): Ψ̃_k·1{k≥r} for a step fault, δ(k,r)·I for an impulse, zero otherwise."""
    if k < 0:
        raise ValueError(f"Step index must be non-negative, got {k}")
    if fault.kind is FaultKind.STEP and k >= fault.onset:
        return fault.profile.at(k)
    if fault.kind is FaultKind.IMPULSE and k == fault.onset:
        return np.eye(fault.n)
    return np.zeros((fault.n, fault.m))


def _check_vector(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (size,):
        raise DimensionError(f"{name} must have shape ({size},), got {arr.shape}")
    return arr


def step_state(system: LtvSystem, fault: FaultModel, k: int, x, u, w) -> np.ndarray:
    """Returns x_{k+1} = A_k x_k + B_k u_k + w_k + Ψ_k(r) θ."""
    dims = system.dims
    x = _check_vector(x, dims.n, "x")
    u = _check_vector(u, dims.l, "u")
    w = _check_vector(w, dims.n, "w")
    if fault.n != dims.n:
        raise DimensionError(f"Fault acts on {fault.n} states, system has {dims.n}")
    mats = system.matrices_at(k)
    return mats.A @ x + mats.B @ u + w + effective_profile(fault, k) @ fault.theta


def measure(system: LtvSystem, k: int, x, u, v) -> np.ndarray:
    """Returns y_k = C_k x_k + D_k u_k + v_k."""
    dims = system.dims
    x = _check_vector(x, dims.n, "x")
    u = _check_vector(u, dims.l, "u")
    v = _check_vector(v, dims.p, "v")
    mats = system.matrices_at(k)
    return mats.C @ x + mats.D @ u + v


@dataclass
class NoiseModel:
    """Process/measurement noise generator with its own seeded stream.

    Args:
        kind (NoiseKind): gaussian draws w ~ N(0, Q_k), v ~ N(0, R_k); paper_random_walk
            draws v ~ N(0, R_k) and integrates w_k = w_{k-1} + coupling v_k.
        seed (int): Default seed when the simulation does not override it.
        coupling (array-like): n×p coupling for the random walk, all-ones by default.
        independent_driver (bool): Drive the random walk with a second, independent N(0, R_k)
            draw instead of reusing v_k.
        scale (float): Multiplies every draw; 0 gives a noise-free run.
    """

    kind: NoiseKind = NoiseKind.GAUSSIAN
    seed: int = 0
    coupling: np.ndarray = None
    independent_driver: bool = False
    scale: float = 1.0
    _rng: np.random.Generator = field(default=None, init=False, repr=False)
    _w_prev: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.kind = NoiseKind(self.kind)
        if self.scale < 0:
            raise ConfigError(f"Noise scale must be non-negative, got {self.scale}")

    def reset(self, seed: int = None) -> None:
        self._rng = np.random.default_rng(self.seed if seed is None else seed)
        self._w_prev = None

    def coupling_for(self, dims: Dimensions) -> np.ndarray:
        if self.coupling is None:
            return np.ones((dims.n, dims.p))
        return as_matrix(self.coupling, dims.n, dims.p, "coupling")

    def to_config(self) -> dict:
        config = {
            "kind": self.kind.value,
            "seed": int(self.seed),
            "independent_driver": self.independent_driver,
            "scale": float(self.scale),
        }
        if self.coupling is not None:
            config["coupling"] = np.asarray(self.coupling, dtype=float).tolist()
        return config


def random_walk_step(w_prev: np.ndarray, coupling: np.ndarray, driver: np.ndarray) -> np.ndarray:
    """Returns w_k = w_{k-1} + coupling @ driver_k."""
    return w_prev + coupling @ driver


def draw_noise(noise: NoiseModel, system: LtvSystem, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Draws (w_k, v_k) from the noise model's stream.

    Each step consumes p standard normals for v, then n (gaussian) or p (independent
    random-walk driver) more, so a given seed always yields the same sequence.

    Raises:
        FactorizationError: If Q_k or R_k cannot be factored.
    """
    if noise._rng is None:
        noise.reset()
    dims = system.dims
    mats = system.matrices_at(k)
    v = noise.scale * (psd_factor(mats.R) @ noise._rng.standard_normal(dims.p))
    if noise.kind is NoiseKind.GAUSSIAN:
        w = noise.scale * (psd_factor(mats.Q) @ noise._rng.standard_normal(dims.n))
    else:
        if noise._w_prev is None:
            noise._w_prev = np.zeros(dims.n)
        driver = v
        if noise.independent_driver:
            driver = noise.scale * (psd_factor(mats.R) @ noise._rng.standard_normal(dims.p))
        w = random_walk_step(noise._w_prev, noise.coupling_for(dims), driver)
        noise._w_prev = w
    if noise.scale == 0:
        return np.zeros(dims.n), np.zeros(dims.p)
    return w, v


@dataclass
class Controller:
    """Output-feedback controller; discrete_pi realizes u_k = sign·(kp·y_k + ki·Σ_{j≤k} y_j).

    Args:
        kind (ControllerKind): none gives u ≡ 0.
        kp (float): Proportional gain.
        ki (float): Integral gain.
        sign (float): Feedback sign, -1 for negative feedback.
    """

    kind: ControllerKind = ControllerKind.NONE
    kp: float = 0.0
    ki: float = 0.0
    sign: float = -1.0
    accumulator: np.ndarray = field(default=None, init=False)
    size: int = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.kind = ControllerKind(self.kind)
        if self.sign not in (-1.0, 1.0):
            raise ConfigError(f"Controller sign must be -1 or 1, got {self.sign}")

    def reset(self, dims: Dimensions) -> None:
        if self.kind is ControllerKind.DISCRETE_PI and dims.l != dims.p:
            raise DimensionError(
                f"The PI controller maps outputs to inputs one-to-one (l={dims.l}, p={dims.p})"
            )
        self.size = dims.l
        self.accumulator = np.zeros(dims.p)

    def to_config(self) -> dict:
        return {"kind": self.kind.value, "kp": self.kp, "ki": self.ki, "sign": self.sign}


def control_step(controller: Controller, feedback) -> np.ndarray:
    """Returns u_k for the current feedback and advances the integral accumulator."""
    feedback = np.asarray(feedback, dtype=float).ravel()
    if controller.accumulator is None:
        controller.accumulator = np.zeros(feedback.shape[0])
        controller.size = feedback.shape[0] if controller.size is None else controller.size
    if controller.kind is ControllerKind.NONE:
        return np.zeros(controller.size)
    controller.accumulator = controller.accumulator + feedback
    return controller.sign * (controller.kp * feedback + controller.ki * controller.accumulator)


@dataclass(eq=False)
class SimulationTrace:
    """Ground-truth run: x has N+1 rows (x_0..x_N), the other sequences N rows."""

    x: np.ndarray
    u: np.ndarray
    y: np.ndarray
    w: np.ndarray
    v: np.ndarray
    fault: FaultModel
    seed: int

    @property
    def N(self) -> int:
        return self.y.shape[0]


def simulate(
    system: LtvSystem,
    controller: Controller,
    noise: NoiseModel,
    fault: FaultModel,
    N: int,
    seed: int = None,
    x0=None,
) -> SimulationTrace:
    """Runs the closed loop forward for N steps.

    The controller and noise model are copied before use, so the caller's objects are
    never advanced and concurrent runs share no state.

    Args:
        system (LtvSystem): The plant.
        controller (Controller): Feedback law; it sees C_k x_k + v_k.
        noise (NoiseModel): Noise generator.
        fault (FaultModel): Fault injected into the state equation.
        N (int): Number of steps, at least 1.
        seed (int): Overrides the noise model's seed (optional).
        x0 (array-like): Initial state. Defaults to zero (optional).

    Returns:
        SimulationTrace: The recorded run.

    Raises:
        DivergenceError: If the state stops being finite.
    """
    if N < 1:
        raise ValueError(f"Horizon must be at least 1, got {N}")
    dims = system.dims
    seed = noise.seed if seed is None else seed
    noise = replace(noise)
    controller = replace(controller)
    noise.reset(seed)
    controller.reset(dims)

    x = np.zeros((N + 1, dims.n))
    u = np.zeros((N, dims.l))
    y = np.zeros((N, dims.p))
    w = np.zeros((N, dims.n))
    v = np.zeros((N, dims.p))
    x[0] = np.zeros(dims.n) if x0 is None else _check_vector(x0, dims.n, "x0")

    for k in range(N):
        w[k], v[k] = draw_noise(noise, system, k)
        mats = system.matrices_at(k)
        u[k] = control_step(controller, mats.C @ x[k] + v[k])
        y[k] = measure(system, k, x[k], u[k], v[k])
        x[k + 1] = step_state(system, fault, k, x[k], u[k], w[k])
        if not np.all(np.isfinite(x[k + 1])):
            raise DivergenceError("State became non-finite", step=k + 1)

    logger.debug(f"Simulated {N} steps (seed {seed}, fault {fault.kind.value})")
    return SimulationTrace(x=x, u=u, y=y, w=w, v=v, fault=fault, seed=int(seed))


def simulate_pair(
    system: LtvSystem,
    controller: Controller,
    noise: NoiseModel,
    fault: FaultModel,
    N: int,
    seed: int = None,
    x0=None,
) -> Tuple[SimulationTrace, SimulationTrace]:
    """Simulates the faulty run and its fault-free twin on the same noise realization."""
    faulty = simulate(system, controller, noise, fault, N, seed, x0)
    fault_free = simulate(system, controller, noise, FaultModel.none(fault.n), N, seed, x0)
    return faulty, fault_free
