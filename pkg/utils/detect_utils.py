"""Fault detection on filter innovations.

The fault vector enters the innovation linearly, eps_k = eps0_k + C_k Gamma_k theta,
so theta is estimated by weighted least squares over the innovation history and the
generalized innovation ratio h_k = d_k^T E_k^-1 d_k measures how much of the
innovation energy the fault explains. With an unknown onset time every candidate r
in a sliding window carries its own Gamma_k(r), E_k(r), d_k(r).
"""

import logging
import math
import numpy as np
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Sequence, Tuple
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ltv_sentinel.exceptions import (
    ConfigError,
    DimensionError,
    InsufficientDataError,
    NoCandidateError,
    NotIdentifiableError,
    NumericalError,
)
from utils.enums import FaultKind, FilterKind, TauStatistic, scenario_defaults, tolerances
from utils.filter_utils import FilterSpec, LtvFilter, symmetrize
from utils.model_utils import FaultModel, LtvSystem, SimulationTrace

logger = logging.getLogger(__name__)


def innovation(y, x_prior, C, D, u) -> np.ndarray:
    """Returns eps_k = y_k - C_k x̂_{k|k-1} - D_k u_k."""
    y = np.asarray(y, dtype=float)
    x_prior = np.asarray(x_prior, dtype=float)
    u = np.asarray(u, dtype=float)
    if C.shape != (y.shape[0], x_prior.shape[0]) or D.shape != (y.shape[0], u.shape[0]):
        raise DimensionError(
            f"Innovation shapes disagree: y {y.shape}, x {x_prior.shape}, u {u.shape}, C {C.shape}, D {D.shape}"
        )
    return y - C @ x_prior - D @ u


def innovation_covariance(C, P_prior, R) -> np.ndarray:
    """Returns Sigma_k = C_k P_{k|k-1} C_k^T + R_k."""
    return symmetrize(C @ P_prior @ C.T + R)


def _factor_sigma(sigma: np.ndarray):
    try:
        return cho_factor(sigma)
    except LinAlgError as e:
        raise NumericalError(f"Innovation covariance is singular: {e}") from e


@dataclass(frozen=True, eq=False)
class GammaTracker:
    """Fault-effect accumulators for one onset candidate r.

    gamma holds Gamma_k(r) for the step k the tracker has reached; E, d and energy
    sum over j = r+1..k.
    """

    r: int
    k: int
    gamma: np.ndarray
    E: np.ndarray
    d: np.ndarray
    energy: float = 0.0
    count: int = 0


def new_tracker(r: int, n: int, m: int) -> GammaTracker:
    return GammaTracker(r=r, k=r, gamma=np.zeros((n, m)), E=np.zeros((m, m)), d=np.zeros(m))


def gamma_step(tracker: GammaTracker, A, K, C, psi_k) -> GammaTracker:
    """Gamma_{k+1} = A_k (I - K_k C_k) Gamma_k + Psi_k, using the gain the filter applied at k."""
    n = tracker.gamma.shape[0]
    gamma = A @ (np.eye(n) - K @ C) @ tracker.gamma + psi_k
    return replace(tracker, k=tracker.k + 1, gamma=gamma)


def accumulate(tracker: GammaTracker, C, sigma, epsilon) -> GammaTracker:
    """E += Gamma^T C^T Sigma^-1 C Gamma and d += Gamma^T C^T Sigma^-1 eps.

    Raises:
        NumericalError: If Sigma is singular.
    """
    factor = _factor_sigma(sigma)
    G = C @ tracker.gamma
    weighted = cho_solve(factor, G)
    active = tracker.k > tracker.r
    energy = tracker.energy
    if active:
        energy += float(epsilon @ cho_solve(factor, epsilon))
    return replace(
        tracker,
        E=symmetrize(tracker.E + G.T @ weighted),
        d=tracker.d + weighted.T @ epsilon,
        energy=energy,
        count=tracker.count + int(active),
    )


def _check_identifiable(E: np.ndarray) -> None:
    cond = np.linalg.cond(E)
    if not np.isfinite(cond) or cond > tolerances["condition_cap"]:
        raise NotIdentifiableError(f"Fault vector is not identifiable (cond(E) = {cond:.3e})")


def estimate_theta(tracker: GammaTracker) -> np.ndarray:
    """Returns theta_hat = E^-1 d, the weighted least-squares fault estimate.

    Raises:
        NotIdentifiableError: If E is singular or its condition number exceeds the cap.
    """
    _check_identifiable(tracker.E)
    try:
        factor = cho_factor(tracker.E)
    except LinAlgError as e:
        raise NotIdentifiableError(f"Fault vector is not identifiable: {e}") from e
    return cho_solve(factor, tracker.d)


def gir(tracker: GammaTracker) -> float:
    """Returns h = d^T E^-1 d, the generalized innovation ratio."""
    theta_hat = estimate_theta(tracker)
    return max(float(tracker.d @ theta_hat), 0.0)


def gir_log_ratio(tracker: GammaTracker) -> float:
    """Returns e·ln(energy / (energy - h)), the logarithmic form of the ratio.

    Diagnostic only: it does not equal d^T E^-1 d in general.
    """
    h = gir(tracker)
    return _log_ratio(tracker.energy, h)


def _log_ratio(energy: float, h: float) -> float:
    if energy <= 0:
        return math.nan
    residual = energy - h
    if residual <= tolerances["psd_factor"] * energy:
        return math.inf
    return math.e * math.log(energy / residual)


def persistent_excitation(history: Sequence[Tuple[np.ndarray, np.ndarray, np.ndarray]], gamma_threshold: float, s: int) -> bool:
    """Checks sum_{j=k-s+1}^{k} Gamma_j^T C_j^T Sigma_j^-1 C_j Gamma_j >= gamma·I.

    Args:
        history (Sequence): (Gamma_j, C_j, Sigma_j) records, oldest first; the last s are used.
        gamma_threshold (float): Lower bound on the smallest eigenvalue, positive.
        s (int): Window length, at least 1.

    Returns:
        bool: Whether the windowed information sum clears the bound.

    Raises:
        InsufficientDataError: If fewer than s records are available.
    """
    if s < 1:
        raise ValueError(f"Window s must be at least 1, got {s}")
    if gamma_threshold <= 0:
        raise ValueError(f"gamma must be positive, got {gamma_threshold}")
    if len(history) < s:
        raise InsufficientDataError(f"Persistent excitation needs {s} records, got {len(history)}")
    records = list(history)[-s:]
    m = records[0][0].shape[1]
    total = np.zeros((m, m))
    for gamma, C, sigma in records:
        G = C @ gamma
        total += G.T @ cho_solve(_factor_sigma(sigma), G)
    return bool(np.linalg.eigvalsh(symmetrize(total)).min() >= gamma_threshold)


class ScanResult(NamedTuple):
    r_hat: int
    h: float
    theta_hat: np.ndarray
    candidates: np.ndarray
    h_values: np.ndarray
    energy: float


class OnsetBank:
    """Onset candidates advanced together as stacked arrays.

    In scan mode a candidate r is opened at step r and retired once r < k - window.
    In known-onset mode there is a single candidate that is never retired.

    Args:
        template (FaultModel): Fault structure (kind and profile); its onset and theta are ignored.
        window (int): Search window length.
        known_onset (int): Fixed onset time, switching the bank to known-onset mode (optional).
    """

    def __init__(self, template: FaultModel, window: int, known_onset: int = None):
        if template.kind is FaultKind.NONE:
            raise ConfigError("The detector needs a step or impulse fault structure")
        if window < 1:
            raise ConfigError(f"Search window must be at least 1, got {window}")
        self.template = template
        self.window = window
        self.known_onset = known_onset
        n, m = template.n, template.m
        self.rs = np.zeros(0, dtype=int)
        self.gammas = np.zeros((0, n, m))
        self.E = np.zeros((0, m, m))
        self.d = np.zeros((0, m))
        self.energy = np.zeros(0)

    def __len__(self) -> int:
        return self.rs.shape[0]

    def spawn(self, k: int) -> None:
        if self.known_onset is None:
            if k < 1:
                return
        elif k != self.known_onset:
            return
        n, m = self.template.n, self.template.m
        self.rs = np.append(self.rs, k)
        self.gammas = np.concatenate([self.gammas, np.zeros((1, n, m))])
        self.E = np.concatenate([self.E, np.zeros((1, m, m))])
        self.d = np.concatenate([self.d, np.zeros((1, m))])
        self.energy = np.append(self.energy, 0.0)

    def retire(self, k: int) -> None:
        if self.known_onset is not None:
            return
        keep = self.rs >= k - self.window
        if not keep.all():
            self.rs = self.rs[keep]
            self.gammas = self.gammas[keep]
            self.E = self.E[keep]
            self.d = self.d[keep]
            self.energy = self.energy[keep]

    def accumulate(self, C, sigma, epsilon, k: int) -> None:
        factor = _factor_sigma(sigma)
        if not len(self):
            return
        G = np.matmul(C, self.gammas)
        weighted = np.matmul(cho_solve(factor, np.eye(C.shape[0])), G)
        E = self.E + np.matmul(np.swapaxes(G, 1, 2), weighted)
        self.E = (E + np.swapaxes(E, 1, 2)) / 2
        self.d = self.d + np.einsum("rpm,p->rm", weighted, epsilon)
        energy = float(epsilon @ cho_solve(factor, epsilon))
        self.energy = self.energy + np.where(self.rs < k, energy, 0.0)

    def advance(self, A, K, C, k: int) -> None:
        n = self.template.n
        transition = A @ (np.eye(n) - K @ C)
        gammas = np.matmul(transition, self.gammas)
        if self.template.kind is FaultKind.IMPULSE:
            gammas[self.rs == k] += np.eye(n)
        else:
            active = (self.rs <= k)[:, None, None]
            gammas = gammas + np.where(active, self.template.profile.at(k), 0.0)
        self.gammas = gammas

    def admissible(self, k: int, s: int) -> np.ndarray:
        mask = self.rs <= k - s
        if self.known_onset is None:
            mask &= self.rs >= max(1, k - self.window)
        return mask


def onset_scan(bank: OnsetBank, k: int, s: int) -> ScanResult:
    """Picks r_hat = argmax h_k(r) over admissible, identifiable candidates.

    Admissible candidates satisfy max(1, k - window) <= r <= k - s. Ties go to the smallest r.

    Raises:
        NoCandidateError: If no candidate is admissible and identifiable.
    """
    mask = bank.admissible(k, s)
    if not mask.any():
        raise NoCandidateError(f"No admissible onset candidate at step {k}")
    rs, E, d, energy = bank.rs[mask], bank.E[mask], bank.d[mask], bank.energy[mask]
    cond = np.linalg.cond(E)
    ok = np.isfinite(cond) & (cond <= tolerances["condition_cap"])
    if not ok.any():
        raise NoCandidateError(f"No identifiable onset candidate at step {k}")
    rs, E, d, energy = rs[ok], E[ok], d[ok], energy[ok]
    try:
        lower = np.linalg.cholesky(E)
    except np.linalg.LinAlgError:
        keep = [i for i in range(len(rs)) if np.linalg.eigvalsh(E[i]).min() > 0]
        if not keep:
            raise NoCandidateError(f"No identifiable onset candidate at step {k}")
        rs, E, d, energy = rs[keep], E[keep], d[keep], energy[keep]
        lower = np.linalg.cholesky(E)
    whitened = np.linalg.solve(lower, d[..., None])
    h_values = np.sum(whitened[..., 0] ** 2, axis=1)
    theta = np.linalg.solve(np.swapaxes(lower, 1, 2), whitened)[..., 0]
    best = int(np.argmax(h_values))
    return ScanResult(
        r_hat=int(rs[best]),
        h=float(h_values[best]),
        theta_hat=theta[best],
        candidates=rs,
        h_values=h_values,
        energy=float(energy[best]),
    )


def threshold_alarms(h, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """Applies threshold tau to an h series.

    A step alarms when h_k >= tau and h_k > 0; every other value is zeroed.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Alarm step indices and the thresholded series.
    """
    if tau < 0 or math.isnan(tau):
        raise ValueError(f"Threshold must be non-negative, got {tau}")
    h = np.asarray(h, dtype=float)
    with np.errstate(invalid="ignore"):
        alarm = (h >= tau) & (h > 0)
    return np.flatnonzero(alarm), np.where(alarm, h, 0.0)


def calibration_samples(h_runs: Sequence[np.ndarray], statistic: TauStatistic = TauStatistic.POOLED) -> np.ndarray:
    """Reduces fault-free h series to the samples a threshold is calibrated on.

    Args:
        h_runs (Sequence[np.ndarray]): One h series per fault-free run.
        statistic (TauStatistic): pooled keeps every value, run_max keeps each run's largest h.

    Returns:
        np.ndarray: Flat sample array.
    """
    statistic = TauStatistic(statistic)
    runs = [np.asarray(h, dtype=float).ravel() for h in h_runs]
    if statistic is TauStatistic.RUN_MAX:
        return np.array([h.max() for h in runs if h.size])
    return np.concatenate(runs) if runs else np.zeros(0)


def calibrate_threshold(samples, scale: float = 3.0, percentile: float = 99.0) -> float:
    """Returns tau = scale × the given percentile of fault-free h samples."""
    samples = np.asarray(samples, dtype=float).ravel()
    samples = samples[np.isfinite(samples)]
    if samples.size == 0:
        raise InsufficientDataError("No fault-free h samples to calibrate against")
    return float(scale * np.percentile(samples, percentile))


@dataclass(frozen=True)
class DetectorConfig:
    """Detector parameters.

    Args:
        tau (float): Alarm threshold, None until calibrated (optional).
        s (int): Minimum post-onset steps before a candidate is admissible; also the
            persistent-excitation window.
        gamma (float): Persistent-excitation bound.
        window (int): Onset search window length.
        tau_scale (float): Multiplier applied to the calibration percentile.
        percentile (float): Calibration percentile of fault-free h.
        tau_statistic (TauStatistic): Whether the percentile runs over pooled h values or per-run maxima.
        known_onset (int): Fixed onset time; disables the onset search (optional).
    """

    tau: float = None
    s: int = scenario_defaults["pe_window"]
    gamma: float = scenario_defaults["pe_gamma"]
    window: int = scenario_defaults["search_window"]
    tau_scale: float = scenario_defaults["tau_scale"]
    percentile: float = scenario_defaults["tau_percentile"]
    tau_statistic: TauStatistic = TauStatistic(scenario_defaults["tau_statistic"])
    known_onset: int = None

    def __post_init__(self):
        if self.s < 1:
            raise ConfigError(f"s must be at least 1, got {self.s}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.window < 1:
            raise ConfigError(f"window must be at least 1, got {self.window}")
        if self.tau is not None and self.tau < 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if self.tau_scale <= 0:
            raise ConfigError(f"tau_scale must be positive, got {self.tau_scale}")
        if not 0 <= self.percentile <= 100:
            raise ConfigError(f"percentile must lie in [0, 100], got {self.percentile}")
        try:
            object.__setattr__(self, "tau_statistic", TauStatistic(self.tau_statistic))
        except ValueError as e:
            raise ConfigError(f"Unknown tau_statistic '{self.tau_statistic}'") from e

    def to_config(self) -> dict:
        return {
            "tau": self.tau,
            "s": self.s,
            "gamma": self.gamma,
            "window": self.window,
            "tau_scale": self.tau_scale,
            "percentile": self.percentile,
            "tau_statistic": self.tau_statistic.value,
            "known_onset": self.known_onset,
        }


@dataclass(eq=False)
class DetectionReport:
    """Per-step detector output for one trace.

    h[k] is h_k(r_hat_k); before any candidate is admissible h is 0, theta_hat is NaN
    and r_hat is -1.
    """

    h: np.ndarray
    theta_hat: np.ndarray
    r_hat: np.ndarray
    h_log_ratio: np.ndarray
    innovations: np.ndarray
    sigmas: np.ndarray
    x_prior: np.ndarray
    P_prior: np.ndarray
    gains: np.ndarray
    gammas: np.ndarray
    candidate_h: List[Tuple[np.ndarray, np.ndarray]]
    pe_satisfied: bool
    config: DetectorConfig
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.h.shape[0]

    @property
    def k(self) -> np.ndarray:
        return np.arange(self.N)

    @property
    def tau(self) -> float:
        return self.config.tau

    def with_tau(self, tau: float) -> "DetectionReport":
        report = replace(self, config=replace(self.config, tau=tau))
        report.metadata = {**self.metadata, "tau": tau}
        return report

    def thresholded(self) -> np.ndarray:
        if self.tau is None:
            return self.h.copy()
        return threshold_alarms(self.h, self.tau)[1]

    @property
    def alarm_mask(self) -> np.ndarray:
        if self.tau is None:
            return np.zeros(self.N, dtype=bool)
        mask = np.zeros(self.N, dtype=bool)
        mask[threshold_alarms(self.h, self.tau)[0]] = True
        return mask

    @property
    def alarms(self) -> List[Tuple[int, int, float]]:
        return [(int(k), int(self.r_hat[k]), float(self.h[k])) for k in np.flatnonzero(self.alarm_mask)]


class FaultDetector:
    """Runs a filter over a trace and tracks the fault effect on its innovations.

    Args:
        system (LtvSystem): The plant model the filter uses.
        filter_spec (FilterSpec): Kalman or H-infinity filter.
        template (FaultModel): Fault structure to test for (kind and profile).
        config (DetectorConfig): Detector parameters. Defaults to DetectorConfig() (optional).
        check (bool): Check covariances at every step. Defaults to False (optional).
        logger (logging.Logger): Logger instance for logging. Defaults to None (optional).
    """

    def __init__(
        self,
        system: LtvSystem,
        filter_spec: FilterSpec,
        template: FaultModel,
        config: DetectorConfig = None,
        check: bool = False,
        logger=None,
    ):
        if template.n != system.dims.n:
            raise ConfigError(f"Fault structure acts on {template.n} states, system has {system.dims.n}")
        self.system = system
        self.filter_spec = filter_spec
        self.template = template
        self.config = config or DetectorConfig()
        self.check = check
        self.logger = logger or logging.getLogger(__name__)

    def run(self, trace: SimulationTrace) -> DetectionReport:
        """Filters the trace and returns the detection report.

        Raises:
            InfeasibleError: If the H-infinity filter becomes infeasible.
            NumericalError: If an innovation covariance is singular.
        """
        dims = self.system.dims
        n, p, m = dims.n, dims.p, self.template.m
        N = trace.N
        cfg = self.config
        ltv_filter = LtvFilter(self.filter_spec, dims, check=self.check, logger=self.logger)
        bank = OnsetBank(self.template, cfg.window, cfg.known_onset)
        recent = deque(maxlen=cfg.s)

        h = np.zeros(N)
        theta_hat = np.full((N, m), np.nan)
        r_hat = np.full(N, -1, dtype=int)
        h_log_ratio = np.full(N, np.nan)
        innovations = np.zeros((N, p))
        sigmas = np.zeros((N, p, p))
        x_prior = np.zeros((N, n))
        P_prior = np.zeros((N, n, n))
        gains = np.zeros((N, n, p))
        gammas = np.zeros((N, n, m))
        candidate_h = []

        for k in range(N):
            mats = self.system.matrices_at(k)
            prior = ltv_filter.state
            x_prior[k], P_prior[k] = prior.x_prior, prior.P_prior
            innovations[k] = innovation(trace.y[k], prior.x_prior, mats.C, mats.D, trace.u[k])
            sigmas[k] = innovation_covariance(mats.C, prior.P_prior, mats.R)

            bank.retire(k)
            bank.spawn(k)
            bank.accumulate(mats.C, sigmas[k], innovations[k], k)
            recent.append((bank.rs.copy(), bank.gammas.copy(), mats.C, sigmas[k]))
            if cfg.known_onset is not None and len(bank):
                gammas[k] = bank.gammas[0]

            try:
                scan = onset_scan(bank, k, cfg.s)
            except NoCandidateError:
                candidate_h.append((np.zeros(0, dtype=int), np.zeros(0)))
            else:
                h[k], theta_hat[k], r_hat[k] = scan.h, scan.theta_hat, scan.r_hat
                h_log_ratio[k] = _log_ratio(scan.energy, scan.h)
                candidate_h.append((scan.candidates, scan.h_values))

            posterior = ltv_filter.update(trace.y[k], trace.u[k], mats)
            gains[k] = posterior.gain
            bank.advance(mats.A, posterior.gain, mats.C, k)
            ltv_filter.predict(trace.u[k], mats)

        pe_satisfied = self._persistent_excitation(recent, r_hat)
        self.logger.debug(
            f"Detector ({self.filter_spec.name}) finished {N} steps, final bank size {len(bank)}"
        )
        return DetectionReport(
            h=h,
            theta_hat=theta_hat,
            r_hat=r_hat,
            h_log_ratio=h_log_ratio,
            innovations=innovations,
            sigmas=sigmas,
            x_prior=x_prior,
            P_prior=P_prior,
            gains=gains,
            gammas=gammas,
            candidate_h=candidate_h,
            pe_satisfied=pe_satisfied,
            config=cfg,
            metadata={
                "filter": self.filter_spec.kind.value,
                "alpha": self.filter_spec.alpha,
                "tau": cfg.tau,
                "s": cfg.s,
                "gamma": cfg.gamma,
                "window": cfg.window,
                "known_onset": cfg.known_onset,
                "seed": trace.seed,
                "sigma_source": (
                    "design covariance of the H-infinity filter"
                    if self.filter_spec.kind is FilterKind.HINF
                    else "Kalman innovation covariance"
                ),
            },
        )

    def _persistent_excitation(self, recent, r_hat: np.ndarray) -> bool:
        valid = r_hat[r_hat >= 0]
        if valid.size == 0:
            return False
        r = valid[-1]
        n, m = self.template.n, self.template.m
        history = []
        for rs, stacked, C, sigma in recent:
            match = np.flatnonzero(rs == r)
            gamma = stacked[match[0]] if match.size else np.zeros((n, m))
            history.append((gamma, C, sigma))
        try:
            return persistent_excitation(history, self.config.gamma, self.config.s)
        except InsufficientDataError:
            return False
