import hashlib
import json
import logging
import numpy as np
import yaml
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping

from ltv_sentinel.exceptions import ConfigError, DimensionError
from utils.detect_utils import DetectorConfig
from utils.dataframe_utils import jsonable
from utils.enums import FaultKind, scenario_defaults
from utils.filter_utils import FilterSpec, HinfConfig
from utils.model_utils import (
    Controller,
    Dimensions,
    FaultModel,
    LtvSystem,
    NoiseModel,
    as_vector,
)

logger = logging.getLogger(__name__)

SECTIONS = (
    "dims",
    "system",
    "noise",
    "fault",
    "controller",
    "simulation",
    "filter",
    "detector",
    "experiment",
)


@dataclass(eq=False)
class Scenario:
    """A fully resolved scenario document."""

    system: LtvSystem
    noise: NoiseModel
    fault: FaultModel
    controller: Controller
    horizon: int
    filter: FilterSpec
    detector: DetectorConfig
    x0: np.ndarray = None
    experiment: Dict[str, object] = field(default_factory=dict)

    @property
    def dims(self) -> Dimensions:
        return self.system.dims

    def to_config(self) -> dict:
        """Returns the resolved scenario as plain data, defaults filled in."""
        config = self.system.to_config()
        config["noise"] = self.noise.to_config()
        config["fault"] = self.fault.to_config()
        config["controller"] = self.controller.to_config()
        config["simulation"] = {
            "horizon": self.horizon,
            "x0": (np.zeros(self.dims.n) if self.x0 is None else self.x0).tolist(),
        }
        config["filter"] = self.filter.to_config()
        config["detector"] = self.detector.to_config()
        config["experiment"] = dict(self.experiment)
        return config


def config_hash(config: Mapping) -> str:
    """SHA-256 of the canonical JSON rendering of a config mapping."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=jsonable)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _section(doc: Mapping, name: str, required: bool = False) -> dict:
    section = doc.get(name)
    if section is None:
        if required:
            raise ConfigError(f"Scenario is missing the '{name}' section")
        return {}
    if not isinstance(section, Mapping):
        raise ConfigError(f"Section '{name}' must be a mapping")
    return dict(section)


def _seed_list(value, name: str, default: List[int]) -> List[int]:
    if value is None:
        return list(default)
    if isinstance(value, int) and not isinstance(value, bool):
        if value < 1:
            raise ConfigError(f"{name} count must be positive, got {value}")
        return list(range(value))
    if isinstance(value, Mapping):
        if "count" not in value:
            raise ConfigError(f"{name} needs a count when given as a mapping")
        start, count = int(value.get("start", 0)), int(value["count"])
        if count < 1:
            raise ConfigError(f"{name} count must be positive, got {count}")
        value = range(start, start + count)
    seeds = [int(seed) for seed in value]
    if not seeds:
        raise ConfigError(f"{name} must not be empty")
    if any(seed < 0 or seed >= 2**64 for seed in seeds):
        raise ConfigError(f"{name} must be unsigned 64-bit integers")
    return seeds


def _noise_seed(value) -> int:
    seed = int(value)
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"noise.seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def parse_system(doc: Mapping) -> LtvSystem:
    dims_section = _section(doc, "dims", required=True)
    system_section = _section(doc, "system", required=True)
    missing = [name for name in ("A", "B", "C", "D", "Q", "R") if name not in system_section]
    if missing:
        raise ConfigError(f"Section 'system' is missing {', '.join(missing)}")
    try:
        dims = Dimensions(
            n=dims_section["n"],
            l=dims_section["l"],
            p=dims_section["p"],
            m=dims_section.get("m", dims_section["n"]),
        )
    except KeyError as e:
        raise ConfigError(f"Section 'dims' is missing {e}") from e
    system = LtvSystem(dims, **{name: system_section[name] for name in ("A", "B", "C", "D", "Q", "R")})
    if not system.covariances_valid():
        raise ConfigError("Q must be positive semidefinite and R positive definite at every breakpoint")
    return system


def parse_fault(section: Mapping, n: int) -> FaultModel:
    kind = FaultKind(section.get("kind", FaultKind.NONE.value))
    if kind is FaultKind.NONE:
        return FaultModel.none(n)
    onset = int(section.get("onset", 0))
    if kind is FaultKind.IMPULSE:
        theta = as_vector(section.get("theta", np.zeros(n)), n, "theta")
        return FaultModel.impulse(onset, theta)
    if "profile" not in section:
        raise ConfigError("A step fault needs a profile")
    return FaultModel(FaultKind.STEP, n, onset, section.get("theta"), section["profile"])


def parse_filter(section: Mapping) -> FilterSpec:
    hinf = HinfConfig(
        alpha=float(section.get("alpha", 0.0)),
        S=section.get("S"),
        L=section.get("L"),
    )
    return FilterSpec(
        kind=section.get("kind", "kalman"),
        hinf=hinf,
        x0=section.get("x0"),
        P0=section.get("P0"),
    )


def parse_detector(section: Mapping) -> DetectorConfig:
    tau = section.get("tau")
    known_onset = section.get("known_onset")
    return DetectorConfig(
        tau=None if tau is None else float(tau),
        s=int(section.get("s", scenario_defaults["pe_window"])),
        gamma=float(section.get("gamma", scenario_defaults["pe_gamma"])),
        window=int(section.get("window", scenario_defaults["search_window"])),
        tau_scale=float(section.get("tau_scale", scenario_defaults["tau_scale"])),
        percentile=float(section.get("percentile", scenario_defaults["tau_percentile"])),
        tau_statistic=section.get("tau_statistic", scenario_defaults["tau_statistic"]),
        known_onset=None if known_onset is None else int(known_onset),
    )


def parse_experiment(section: Mapping, m: int) -> Dict[str, object]:
    seeds = _seed_list(section.get("seeds"), "seeds", range(100))
    calibration_seeds = _seed_list(
        section.get("calibration_seeds"), "calibration_seeds", range(10_000, 10_050)
    )
    theta_cases = [as_vector(theta, m, "theta case").tolist() for theta in section.get("theta_cases", [])]
    alphas = [float(alpha) for alpha in section.get("alphas", [])]
    if any(alpha < 0 for alpha in alphas):
        raise ConfigError("Experiment alphas must be non-negative")
    return {
        "seeds": seeds,
        "calibration_seeds": calibration_seeds,
        "theta_cases": theta_cases,
        "alphas": alphas,
        "figure_seed": int(section.get("figure_seed", scenario_defaults["figure_seed"])),
    }


def parse_scenario(doc: Mapping) -> Scenario:
    """Builds a Scenario from a parsed YAML document.

    Args:
        doc (Mapping): The document, with the sections listed in SECTIONS.

    Returns:
        Scenario: The resolved scenario.

    Raises:
        ConfigError: If a section is missing, malformed or inconsistent.
    """
    if not isinstance(doc, Mapping):
        raise ConfigError("Scenario document must be a mapping")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown scenario sections: {', '.join(unknown)}")
    try:
        system = parse_system(doc)
        n = system.dims.n
        noise_section = _section(doc, "noise")
        noise = NoiseModel(
            kind=noise_section.get("kind", "gaussian"),
            seed=_noise_seed(noise_section.get("seed", 0)),
            coupling=noise_section.get("coupling"),
            independent_driver=bool(noise_section.get("independent_driver", False)),
            scale=float(noise_section.get("scale", 1.0)),
        )
        if noise.coupling is not None:
            noise.coupling_for(system.dims)
        fault = parse_fault(_section(doc, "fault"), n)
        controller_section = _section(doc, "controller")
        controller = Controller(
            kind=controller_section.get("kind", "none"),
            kp=float(controller_section.get("kp", 0.0)),
            ki=float(controller_section.get("ki", 0.0)),
            sign=float(controller_section.get("sign", -1.0)),
        )
        controller.reset(system.dims)
        simulation = _section(doc, "simulation")
        horizon = int(simulation.get("horizon", scenario_defaults["horizon"]))
        x0 = simulation.get("x0")
        x0 = None if x0 is None else as_vector(x0, n, "x0")
        filter_spec = parse_filter(_section(doc, "filter"))
        detector = parse_detector(_section(doc, "detector"))
        experiment = parse_experiment(_section(doc, "experiment"), system.dims.m)
    except (ValueError, TypeError, KeyError, DimensionError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"Invalid scenario: {e}") from e

    if horizon < 1:
        raise ConfigError(f"Horizon must be at least 1, got {horizon}")
    if fault.kind is not FaultKind.NONE and horizon <= fault.onset + detector.s:
        raise ConfigError(
            f"Horizon {horizon} leaves fewer than s={detector.s} steps after onset {fault.onset}"
        )
    if fault.kind is not FaultKind.NONE and fault.m != system.dims.m:
        raise ConfigError(f"Fault size {fault.m} disagrees with dims.m={system.dims.m}")
    return Scenario(
        system=system,
        noise=noise,
        fault=fault,
        controller=controller,
        horizon=horizon,
        filter=filter_spec,
        detector=detector,
        x0=x0,
        experiment=experiment,
    )


def load_yaml(text: str) -> Mapping:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Scenario is not valid YAML: {e}") from e
    return doc or {}


def load_scenario(path: Path | str) -> Scenario:
    """Reads and resolves a YAML scenario file.

    Raises:
        ConfigError: If the file cannot be read or does not describe a valid scenario.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read scenario {path}: {e}") from e
    logger.debug(f"Loading scenario from {path}")
    doc = load_yaml(text)
    # A run manifest carries its resolved scenario under "config".
    if isinstance(doc, Mapping) and "config_hash" in doc:
        doc = doc["config"]
    return parse_scenario(doc)
