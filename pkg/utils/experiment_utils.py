"""Monte-Carlo experiments comparing Kalman-based GLR with H-infinity-based GIR detection.

Every seed is an independent closed-loop run; faulty and fault-free runs of the same
seed share one noise realization, and every filter configuration sees the same seeds.
"""

import hashlib
import logging
import numpy as np
import pandas as pd
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from ltv_sentinel import __version__
from ltv_sentinel.exceptions import ConfigError, InfeasibleError, LtvSentinelError, StepError
from ltv_sentinel.helpers import get_thread_cap, write_files_atomic
from ltv_sentinel.scenarios import paper_scenario
from utils.config_utils import Scenario, config_hash, load_yaml, parse_scenario
from utils.dataframe_utils import (
    frame_to_csv,
    innovation_frame,
    metrics_frame,
    report_to_frame,
    to_json,
    trace_to_frame,
)
from utils.detect_utils import DetectionReport, FaultDetector, calibrate_threshold, calibration_samples
from utils.enums import FaultKind, FilterKind
from utils.filter_utils import FilterSpec, LtvFilter
from utils.model_utils import FaultModel, SimulationTrace, simulate, simulate_pair

logger = logging.getLogger(__name__)

MIN_COMPARE_SEEDS = 20


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """A scenario plus the filter configurations and seeds to run it with.

    Args:
        scenario (Scenario): Plant, noise, fault, controller and detector parameters.
        filters (Sequence[FilterSpec]): Filter configurations, compared on identical seeds.
        seeds (Sequence[int]): Seeds of the faulty/fault-free run pairs.
        calibration_seeds (Sequence[int]): Seeds of the fault-free runs used to calibrate tau.
        theta_cases (Sequence): Fault vectors to run; defaults to the scenario's theta (optional).
        figure_seed (int): Seed of the single-realization figure datasets.
    """

    scenario: Scenario
    filters: Tuple[FilterSpec, ...]
    seeds: Tuple[int, ...]
    calibration_seeds: Tuple[int, ...]
    theta_cases: Tuple[Tuple[float, ...], ...] = ()
    figure_seed: int = 0

    def __post_init__(self):
        if not self.filters:
            raise ConfigError("An experiment needs at least one filter configuration")
        if not self.seeds:
            raise ConfigError("An experiment needs at least one seed")
        if self.scenario.fault.kind is FaultKind.NONE:
            raise ConfigError("An experiment needs a fault structure to detect")
        if not self.theta_cases:
            object.__setattr__(self, "theta_cases", (tuple(self.scenario.fault.theta.tolist()),))

    @classmethod
    def from_scenario(cls, scenario: Scenario, filters: Sequence[FilterSpec] = None, seeds: Sequence[int] = None):
        """Builds the experiment described by a scenario's experiment section.

        Without explicit filters the Kalman filter is compared against the scenario's
        filter at every alpha listed in the experiment section.
        """
        section = scenario.experiment
        if filters is None:
            filters = default_filters(scenario)
        return cls(
            scenario=scenario,
            filters=tuple(filters),
            seeds=tuple(section.get("seeds", range(100)) if seeds is None else seeds),
            calibration_seeds=tuple(section.get("calibration_seeds", range(10_000, 10_050))),
            theta_cases=tuple(tuple(theta) for theta in section.get("theta_cases", [])),
            figure_seed=int(section.get("figure_seed", 0)),
        )


def default_filters(scenario: Scenario) -> List[FilterSpec]:
    kalman = replace(scenario.filter, kind=FilterKind.KALMAN)
    alphas = scenario.experiment.get("alphas", [])
    if alphas:
        return [kalman] + [scenario.filter.with_alpha(alpha) for alpha in alphas]
    if scenario.filter.kind is FilterKind.KALMAN:
        return [kalman]
    return [kalman, scenario.filter]


def paper_config() -> Scenario:
    return parse_scenario(load_yaml(paper_scenario))


@dataclass(eq=False)
class RunManifest:
    """Everything needed to reproduce a set of outputs.

    The resolved config includes every default the run used; feeding `config`
    back through the scenario parser reproduces the outputs bit for bit.
    """

    command: str
    config: dict
    resolved_defaults: dict
    seeds: List[int]
    tau: Dict[str, float] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)
    version: str = __version__

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.config,
            "resolved_defaults": self.resolved_defaults,
            "seeds": [int(seed) for seed in self.seeds],
            "tau": self.tau,
            "outputs": self.outputs,
            "extra": self.extra,
            "version": self.version,
        }

    def to_json(self) -> str:
        return to_json(self.to_dict())


def resolved_defaults(scenario: Scenario, tau: float = None) -> dict:
    n = scenario.dims.n
    spec = scenario.filter
    return {
        "x0": (np.zeros(n) if scenario.x0 is None else scenario.x0).tolist(),
        "w_prev": np.zeros(n).tolist(),
        "P0": (np.eye(n) if spec.P0 is None else np.asarray(spec.P0, dtype=float)).tolist(),
        "Q": scenario.system.Q.to_config(),
        "controller_sign": scenario.controller.sign,
        "tau": tau,
    }


def build_manifest(command: str, scenario: Scenario, seeds: Sequence[int], files: Dict[str, str], **kwargs) -> RunManifest:
    tau = kwargs.pop("tau", {})
    manifest = RunManifest(
        command=command,
        config=scenario.to_config(),
        resolved_defaults=resolved_defaults(scenario, scenario.detector.tau),
        seeds=list(seeds),
        tau=tau,
        outputs={name: hashlib.sha256(content.encode("utf-8")).hexdigest() for name, content in sorted(files.items())},
        extra=kwargs,
    )
    return manifest


def _named(sub_experiment: str, error: LtvSentinelError) -> LtvSentinelError:
    if isinstance(error, StepError):
        return type(error)(f"{sub_experiment}: {error.message}", error.step)
    return type(error)(f"{sub_experiment}: {error}")


def _map_seeds(func, seeds: Sequence[int]) -> list:
    threads = min(get_thread_cap(), len(seeds)) or 1
    if threads == 1:
        return [func(seed) for seed in seeds]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, seeds))


def detect(scenario: Scenario, spec: FilterSpec, trace: SimulationTrace, tau: float = None, logger=None) -> DetectionReport:
    """Runs the fault detector configured by the scenario over one trace."""
    config = scenario.detector if tau is None else replace(scenario.detector, tau=tau)
    detector = FaultDetector(scenario.system, spec, scenario.fault, config, logger=logger)
    return detector.run(trace)


def fault_free_h(scenario: Scenario, spec: FilterSpec, seed: int) -> np.ndarray:
    trace = simulate(
        scenario.system,
        scenario.controller,
        scenario.noise,
        FaultModel.none(scenario.dims.n),
        scenario.horizon,
        seed=seed,
        x0=scenario.x0,
    )
    return detect(scenario, spec, trace).h


def calibrate(scenario: Scenario, spec: FilterSpec, seeds: Sequence[int] = None) -> float:
    """Calibrates tau on fault-free runs: scale × percentile of their h values.

    The detector section picks the scale, the percentile and whether the percentile
    is taken over the pooled h values or over each run's maximum.

    Args:
        scenario (Scenario): Scenario whose detector section gives the calibration rule.
        spec (FilterSpec): Filter driving the detector.
        seeds (Sequence[int]): Calibration seeds. Defaults to the scenario's calibration seeds (optional).

    Returns:
        float: The calibrated threshold.
    """
    seeds = list(scenario.experiment.get("calibration_seeds", range(10_000, 10_050)) if seeds is None else seeds)
    samples = _map_seeds(lambda seed: fault_free_h(scenario, spec, seed), seeds)
    detector = scenario.detector
    tau = calibrate_threshold(
        calibration_samples(samples, detector.tau_statistic), scale=detector.tau_scale, percentile=detector.percentile
    )
    logger.debug(f"Calibrated tau={tau:.6g} for {spec.name} over {len(seeds)} fault-free runs")
    return tau


@dataclass(frozen=True)
class RunSummary:
    seed: int
    detected: bool
    false_alarm: bool
    r_hat: int
    onset_error: float
    h_jump: float


def summarize_run(faulty: DetectionReport, fault_free: DetectionReport, onset: int, window: int, seed: int = 0) -> RunSummary:
    """Scores one paired run.

    A fault counts as detected when any step in (r, r + window] alarms; any alarm on the
    fault-free run is a false alarm. The onset estimate is read at the step of maximal h
    in that range, the earliest such step on ties.
    """
    lo, hi = onset + 1, min(onset + window + 1, faulty.N)
    if lo >= hi:
        return RunSummary(seed, False, bool(fault_free.alarm_mask.any()), -1, float("nan"), float("nan"))
    detected = bool(faulty.alarm_mask[lo:hi].any())
    false_alarm = bool(fault_free.alarm_mask.any())
    segment = faulty.h[lo:hi]
    peak = lo + int(np.argmax(segment))
    r_hat = int(faulty.r_hat[peak])
    onset_error = float(abs(r_hat - onset)) if r_hat >= 0 else float("nan")
    faulty_max = float(segment.max())
    free_max = float(fault_free.h[lo:hi].max())
    if free_max > 0:
        h_jump = faulty_max / free_max
    else:
        h_jump = float("inf") if faulty_max > 0 else float("nan")
    return RunSummary(int(seed), detected, false_alarm, r_hat, onset_error, h_jump)


def run_seed(scenario: Scenario, spec: FilterSpec, fault: FaultModel, seed: int, tau: float) -> RunSummary:
    faulty_trace, free_trace = simulate_pair(
        scenario.system, scenario.controller, scenario.noise, fault, scenario.horizon, seed=seed, x0=scenario.x0
    )
    faulty = detect(scenario, spec, faulty_trace, tau)
    free = detect(scenario, spec, free_trace, tau)
    return summarize_run(faulty, free, fault.onset, scenario.detector.window, seed)


def _theta_label(theta: Sequence[float]) -> str:
    return "/".join(f"{value:g}" for value in theta)


def aggregate(label: str, summaries: Sequence[RunSummary]) -> dict:
    errors = np.array([summary.onset_error for summary in summaries], dtype=float)
    jumps = np.array([summary.h_jump for summary in summaries], dtype=float)
    errors = errors[np.isfinite(errors)]
    jumps = jumps[~np.isnan(jumps)]
    return {
        "config": label,
        "seeds": len(summaries),
        "detect_rate": float(np.mean([summary.detected for summary in summaries])),
        "false_alarm_rate": float(np.mean([summary.false_alarm for summary in summaries])),
        "mean_abs_onset_err": float(errors.mean()) if errors.size else float("nan"),
        "median_h_jump": float(np.median(jumps)) if jumps.size else float("nan"),
    }


def compare_detectors(config: ExperimentConfig, out_dir: Path | str = None, min_seeds: int = MIN_COMPARE_SEEDS) -> pd.DataFrame:
    """Scores every filter configuration on the same paired seeds.

    Args:
        config (ExperimentConfig): Filters, seeds and theta cases to run.
        out_dir (Path, str): Directory for metrics.csv and manifest.json (optional).
        min_seeds (int): Smallest accepted seed count. Defaults to 20 (optional).

    Returns:
        pd.DataFrame: One metrics row per (filter, theta case), in configuration order.

    Raises:
        ConfigError: If fewer than two filters or too few seeds are given.
    """
    if len(config.filters) < 2:
        raise ConfigError("Comparing detectors needs at least two filter configurations")
    if len(config.seeds) < min_seeds:
        raise ConfigError(f"Comparing detectors needs at least {min_seeds} seeds, got {len(config.seeds)}")
    scenario = config.scenario
    rows, taus = [], {}
    for spec in config.filters:
        try:
            tau = scenario.detector.tau
            if tau is None:
                tau = calibrate(scenario, spec, config.calibration_seeds)
            taus[spec.name] = tau
            for theta in config.theta_cases:
                fault = scenario.fault.with_theta(theta)
                label = f"{spec.name} theta={_theta_label(theta)}"
                summaries = _map_seeds(lambda seed: run_seed(scenario, spec, fault, seed, tau), config.seeds)
                rows.append(aggregate(label, summaries))
                logger.info(f"{label}: detect rate {rows[-1]['detect_rate']:.2f}, false alarms {rows[-1]['false_alarm_rate']:.2f}")
        except LtvSentinelError as e:
            raise _named(spec.name, e) from e
    metrics = metrics_frame(rows)
    if out_dir is not None:
        files = {"metrics.csv": frame_to_csv(metrics)}
        manifest = build_manifest("compare", scenario, config.seeds, files, tau=taus)
        files["manifest.json"] = manifest.to_json()
        write_files_atomic(out_dir, files)
        logger.debug(f"Wrote comparison metrics to {out_dir}")
    return metrics


def reproduce_paper(out_dir: Path | str = None, scenario: Scenario = None, calibration_seeds: Sequence[int] = None) -> Dict[str, str]:
    """Renders the figure datasets of the two-state study.

    For the Kalman filter and the scenario's H-infinity filter, and for each theta case,
    emits the innovation series and the thresholded h series of one pinned seed, plus
    a manifest carrying the calibrated thresholds.

    Args:
        out_dir (Path, str): Output directory; nothing is written when omitted (optional).
        scenario (Scenario): Scenario to use. Defaults to the built-in paper scenario (optional).
        calibration_seeds (Sequence[int]): Overrides the calibration seeds (optional).

    Returns:
        Dict[str, str]: File name to file content.
    """
    scenario = scenario or paper_config()
    config = ExperimentConfig.from_scenario(scenario, filters=[replace(scenario.filter, kind=FilterKind.KALMAN), scenario.filter])
    seeds = list(config.calibration_seeds if calibration_seeds is None else calibration_seeds)
    files, taus, thetas = {}, {}, {}
    for spec in config.filters:
        tag = spec.kind.value
        try:
            taus[spec.name] = tau = calibrate(scenario, spec, seeds)
        except LtvSentinelError as e:
            raise _named(f"{tag} calibration", e) from e
        for i, theta in enumerate(config.theta_cases, start=1):
            sub_experiment = f"{tag} theta={_theta_label(theta)}"
            try:
                trace = simulate(
                    scenario.system,
                    scenario.controller,
                    scenario.noise,
                    scenario.fault.with_theta(theta),
                    scenario.horizon,
                    seed=config.figure_seed,
                    x0=scenario.x0,
                )
                report = detect(scenario, spec, trace, tau)
            except LtvSentinelError as e:
                raise _named(sub_experiment, e) from e
            files[f"innovation_{tag}_theta{i}.csv"] = frame_to_csv(innovation_frame(report))
            files[f"gir_{tag}_theta{i}.csv"] = frame_to_csv(report_to_frame(report, thresholded=True))
            thetas[f"theta{i}"] = list(theta)
    manifest = build_manifest(
        "reproduce-paper", scenario, [config.figure_seed], files, tau=taus, theta_cases=thetas, calibration_seeds=seeds
    )
    files["manifest.json"] = manifest.to_json()
    if out_dir is not None:
        write_files_atomic(out_dir, files)
        logger.debug(f"Wrote {len(files)} files to {out_dir}")
    return files


def first_infeasible_step(scenario: Scenario, spec: FilterSpec, N: int = None) -> int:
    """Runs the covariance recursion alone and returns the first infeasible step, or -1.

    The filter covariances do not depend on the data, so a zero measurement sequence
    gives the same answer as any seed.
    """
    N = scenario.horizon if N is None else N
    dims = scenario.dims
    ltv_filter = LtvFilter(spec, dims)
    y, u = np.zeros(dims.p), np.zeros(dims.l)
    for k in range(N):
        mats = scenario.system.matrices_at(k)
        try:
            ltv_filter.update(y, u, mats)
        except InfeasibleError as e:
            return e.step
        ltv_filter.predict(u, mats)
    return -1


def feasibility_limit(scenario: Scenario, spec: FilterSpec, lo: float = 0.0, hi: float = 1000.0, iterations: int = 40, N: int = None) -> float:
    """Bisects for the largest alpha whose covariance recursion stays feasible for N steps.

    Raises:
        ValueError: If lo is infeasible or hi is feasible.
    """
    def feasible(alpha: float) -> bool:
        return first_infeasible_step(scenario, spec.with_alpha(alpha), N) < 0

    if not feasible(lo):
        raise ValueError(f"alpha={lo} is already infeasible")
    if feasible(hi):
        raise ValueError(f"alpha={hi} is still feasible")
    for _ in range(iterations):
        mid = (lo + hi) / 2
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def with_seed(scenario: Scenario, seed: int = None) -> Scenario:
    """Returns the scenario with seed recorded as its noise seed, so a manifest reload replays the same run."""
    if seed is None or seed == scenario.noise.seed:
        return scenario
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    return replace(scenario, noise=replace(scenario.noise, seed=int(seed)))


def simulate_outputs(scenario: Scenario, seed: int = None) -> Dict[str, str]:
    """Renders the trace CSV and manifest of one simulated run."""
    scenario = with_seed(scenario, seed)
    seed = scenario.noise.seed
    trace = simulate(
        scenario.system, scenario.controller, scenario.noise, scenario.fault, scenario.horizon, seed=seed, x0=scenario.x0
    )
    files = {"trace.csv": frame_to_csv(trace_to_frame(trace))}
    files["manifest.json"] = build_manifest("simulate", scenario, [seed], files).to_json()
    return files


def detect_outputs(scenario: Scenario, seed: int = None, tau: float = None) -> Dict[str, str]:
    """Renders the detection report, innovation series and sidecars of one run."""
    scenario = with_seed(scenario, seed)
    seed = scenario.noise.seed
    spec = scenario.filter
    if tau is None:
        tau = scenario.detector.tau
    if tau is None:
        tau = calibrate(scenario, spec)
    trace = simulate(
        scenario.system, scenario.controller, scenario.noise, scenario.fault, scenario.horizon, seed=seed, x0=scenario.x0
    )
    report = detect(scenario, spec, trace, tau)
    files = {
        "detection.csv": frame_to_csv(report_to_frame(report)),
        "innovations.csv": frame_to_csv(innovation_frame(report)),
    }
    files["detection_meta.json"] = to_json(
        {**report.metadata, "pe_satisfied": report.pe_satisfied, "alarms": report.alarms}
    )
    files["manifest.json"] = build_manifest("detect", scenario, [seed], files, tau={spec.name: tau}).to_json()
    return files
