import json
import pandas as pd
import numpy as np
from typing import Dict, List, Mapping

from utils.detect_utils import DetectionReport
from utils.model_utils import SimulationTrace

CSV_FLOAT_FORMAT = "%.17g"

METRICS_COLUMNS = [
    "config",
    "seeds",
    "detect_rate",
    "false_alarm_rate",
    "mean_abs_onset_err",
    "median_h_jump",
]


def numbered_columns(prefix: str, count: int) -> List[str]:
    """Returns prefix1..prefixN column names.

    Args:
        prefix (str): Column name stem, e.g. 'x' or 'theta_hat_'.
        count (int): Number of columns.

    Returns:
        List[str]: The column names, empty when count is 0.
    """
    return [f"{prefix}{i}" for i in range(1, count + 1)]


def matrix_frame(values: np.ndarray, prefix: str) -> pd.DataFrame:
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    return pd.DataFrame(values, columns=numbered_columns(prefix, values.shape[1]))


def trace_to_frame(trace: SimulationTrace) -> pd.DataFrame:
    """Builds the k,x1..xn,u1..ul,y1..yp,w1..wn,v1..vp table for steps 0..N-1.

    Args:
        trace (SimulationTrace): The simulated run.

    Returns:
        pd.DataFrame: One row per step; the terminal state x_N is not included.
    """
    N = trace.N
    parts = [
        pd.DataFrame({"k": np.arange(N)}),
        matrix_frame(trace.x[:N], "x"),
        matrix_frame(trace.u, "u") if trace.u.shape[1] else pd.DataFrame(index=range(N)),
        matrix_frame(trace.y, "y"),
        matrix_frame(trace.w, "w"),
        matrix_frame(trace.v, "v"),
    ]
    return pd.concat(parts, axis=1)


def report_to_frame(report: DetectionReport, thresholded: bool = False) -> pd.DataFrame:
    """Builds the k,h,theta_hat_1..m,r_hat,alarm table of a detection report.

    Args:
        report (DetectionReport): The detector output.
        thresholded (bool): Zero h wherever it does not alarm. Defaults to False (optional).

    Returns:
        pd.DataFrame: One row per step.
    """
    h = report.thresholded() if thresholded else report.h
    df = pd.concat(
        [
            pd.DataFrame({"k": report.k, "h": h}),
            matrix_frame(report.theta_hat, "theta_hat_"),
            pd.DataFrame({"r_hat": report.r_hat, "alarm": report.alarm_mask.astype(int)}),
        ],
        axis=1,
    )
    return df


def innovation_frame(report: DetectionReport) -> pd.DataFrame:
    """Builds the k,eps1..epsp,sigma1..sigmap table (sigma is the diagonal of Sigma_k)."""
    sigma_diag = np.diagonal(report.sigmas, axis1=1, axis2=2)
    return pd.concat(
        [
            pd.DataFrame({"k": report.k}),
            matrix_frame(report.innovations, "eps"),
            matrix_frame(sigma_diag, "sigma"),
        ],
        axis=1,
    )


def metrics_frame(rows: List[Mapping]) -> pd.DataFrame:
    """Builds the metrics table, one row per detector configuration, in the given order."""
    df = pd.DataFrame(list(rows), columns=METRICS_COLUMNS)
    df["seeds"] = df["seeds"].astype(int)
    return df


def frame_to_csv(df: pd.DataFrame) -> str:
    """Renders a frame as CSV text with round-trip float precision."""
    return df.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")


def to_json(payload: Dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, default=jsonable) + "\n"


def jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
