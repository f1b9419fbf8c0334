"""Run metrics: bisection bandwidth, convergence, reordering and completion times."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from difsim.difs import INFORMATIONAL_SCOPES
from difsim.tcp import ReorderStats
from difsim.types import to_seconds

if TYPE_CHECKING:
    from difsim.fabric import DataCenter

THROUGHPUT_COLUMNS = ["time_s", "host", "rx_bps"]
FLOW_COLUMNS = ["time_s", "flow", "rx_bps"]
EAR_COLUMNS = ["time_s", "origin", "flow", "recommendation", "target"]
MARGIN_COLUMNS = ["time_s", "scope", "pod", "observed", "bound"]
LINK_COLUMNS = [
    "link",
    "enqueued_packets",
    "dropped_packets",
    "dropped_bytes",
    "delivered_bytes",
    "utilization",
]


@dataclass
class MetricsReport:
    """Everything a run produces, as tables plus a JSON-ready summary."""

    throughput: pd.DataFrame
    flows: pd.DataFrame
    ears: pd.DataFrame
    margins: pd.DataFrame
    links: pd.DataFrame
    convergence: pd.DataFrame
    summary: Dict[str, Any] = field(default_factory=dict)
    violations: List[Dict[str, Any]] = field(default_factory=list)
    topology_json: Optional[str] = None

    @property
    def bisection_bandwidth(self) -> float:
        return float(self.summary.get("bisection_bandwidth_bps", 0.0))


def aggregate_series(throughput: pd.DataFrame) -> pd.Series:
    """Network-wide receive rate per sample time."""
    if throughput.empty:
        return pd.Series(dtype=float)
    return throughput.groupby("time_s", sort=True)["rx_bps"].sum()


def measurement_window(
    throughput: pd.DataFrame, start_s: float, end_s: float, interval_s: float
) -> pd.DataFrame:
    """Samples whose interval lies fully inside ``[start_s, end_s]``."""
    eps = 1e-9
    mask = (throughput["time_s"] >= start_s - eps) & (
        throughput["time_s"] + interval_s <= end_s + eps
    )
    return throughput[mask]


def bisection_bandwidth(
    throughput: pd.DataFrame, start_s: float, end_s: float, interval_s: float
) -> float:
    """Sum over hosts of each host's mean receive rate inside the window."""
    window = measurement_window(throughput, start_s, end_s, interval_s)
    if window.empty:
        return 0.0
    return float(window.groupby("host")["rx_bps"].mean().sum())


def convergence_time(
    series: pd.Series, fraction: float = 0.95, duration_s: float | None = None
) -> Tuple[float, bool]:
    """Earliest time after which the series stays at or above ``fraction`` of steady state.

    Steady state is the mean of the final quartile of samples.

    Returns:
        ``(time_s, converged)``; a run that never settles reports its
        duration with ``converged`` False.
    """
    if series.empty:
        raise ValueError("throughput series is empty")
    values = series.to_numpy(dtype=float)
    times = series.index.to_numpy(dtype=float)
    tail = values[-max(1, len(values) // 4) :]
    threshold = fraction * float(np.mean(tail))
    below = np.flatnonzero(values < threshold)
    end = float(duration_s) if duration_s is not None else float(times[-1])
    if below.size == 0:
        return float(times[0]), True
    last = int(below[-1])
    if last == len(values) - 1:
        return end, False
    return float(times[last + 1]), True


def convergence_curve(series: pd.Series) -> pd.DataFrame:
    """Achieved fraction of final throughput over time."""
    if series.empty:
        return pd.DataFrame(columns=["time_s", "fraction"])
    tail = series.iloc[-max(1, len(series) // 4) :]
    steady = float(tail.mean())
    fraction = series / steady if steady > 0 else series * 0.0
    return pd.DataFrame({"time_s": series.index.to_numpy(), "fraction": fraction.to_numpy()})


def reorder_summary(per_flow: Iterable[ReorderStats]) -> Dict[str, Optional[float]]:
    """Average and maximum reorder ratio and window over flows that delivered data."""
    ratios = [s.ratio for s in per_flow if s.ratio is not None]
    return {
        "avg_ratio": float(np.mean(ratios)) if ratios else None,
        "max_ratio": float(np.max(ratios)) if ratios else None,
        "flows": len(ratios),
    }


def _windows(per_flow: Iterable[ReorderStats]) -> Dict[str, Optional[float]]:
    windows = [s.window for s in per_flow if s.window is not None]
    return {
        "avg_window": float(np.mean(windows)) if windows else None,
        "max_window": float(np.max(windows)) if windows else None,
    }


def collect(dc: DataCenter) -> MetricsReport:
    """Build the report of a finished run."""
    cfg = dc.config
    interval = cfg.sample_interval_s
    start_s = cfg.warmup
    end_s = cfg.duration_s - cfg.cooldown
    window_s = end_s - start_s

    throughput = pd.DataFrame(dc.samples, columns=THROUGHPUT_COLUMNS)
    flows = pd.DataFrame(dc.flow_samples, columns=FLOW_COLUMNS)
    ear_rows: List[Dict[str, Any]] = []
    if dc.controller is not None:
        ear_rows = [
            {
                "time_s": to_seconds(int(r["time_ns"])),  # type: ignore[arg-type]
                **{c: r[c] for c in EAR_COLUMNS[1:]},
            }
            for r in dc.controller.stats.ear_log
        ]
    ears = pd.DataFrame(ear_rows, columns=EAR_COLUMNS)
    margins = pd.DataFrame(dc.margin_rows, columns=MARGIN_COLUMNS)
    links = pd.DataFrame(dc.network.link_rows(dc.sim.now), columns=LINK_COLUMNS)

    series = aggregate_series(throughput)
    bisection = bisection_bandwidth(throughput, start_s, end_s, interval)
    if series.empty:
        conv_time, converged = cfg.duration_s, False
    else:
        conv_time, converged = convergence_time(series, cfg.convergence_fraction, cfg.duration_s)

    # payload delivered inside the window, from cumulative counters
    cum = pd.Series(
        [b for _, b in dc.cumulative_rx], index=[t for t, _ in dc.cumulative_rx], dtype=float
    )
    in_window = cum[(cum.index >= start_s - 1e-9) & (cum.index <= end_s + 1e-9)]
    if len(in_window) >= 2:
        span = float(in_window.index[-1] - in_window.index[0])
        payload_rate = float(in_window.iloc[-1] - in_window.iloc[0]) * 8 / span
    else:
        payload_rate = 0.0
    rel_error = abs(bisection - payload_rate) / payload_rate if payload_rate > 0 else 0.0

    tflows = list(dc.transport.flows.values())
    per_flow = [f.receiver.stats for f in tflows]
    reorder = {**reorder_summary(per_flow), **_windows(per_flow)}
    totals = dc.transport.reorder_totals()
    reorder["out_of_order_pkts"] = totals.out_of_order_pkts
    reorder["in_order_pkts"] = totals.in_order_pkts

    completions = [
        to_seconds(f.completion_time) for f in tflows if f.completion_time is not None
    ]
    summary: Dict[str, Any] = {
        "label": cfg.label,
        "k": cfg.k,
        "hosts": len(dc.topology.hosts),
        "scheduler": cfg.scheduler,
        "metric_mode": cfg.metric_mode,
        "pattern": cfg.pattern,
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "window_s": [start_s, end_s],
        "link_bps": cfg.capacity_bps,
        "bisection_bandwidth_bps": bisection,
        "bisection_fraction": bisection / (len(dc.topology.hosts) * cfg.capacity_bps),
        "accounting": {
            "sum_host_rates_bps": bisection,
            "payload_rate_bps": payload_rate,
            "relative_error": rel_error,
            "window_s": window_s,
        },
        "convergence_time_s": conv_time,
        "converged": converged,
        "reorder": reorder,
        "flows": {
            "opened": len(tflows),
            "completed": len(completions),
            "failed": [k.name for k in dc.failed_flows],
            "mean_completion_s": float(np.mean(completions)) if completions else None,
        },
        "tcp": {
            "retransmits": sum(f.sender.retransmits for f in tflows),
            "fast_retransmits": sum(f.sender.fast_retransmits for f in tflows),
            "timeouts": sum(f.sender.timeouts for f in tflows),
            "ignored_acks": sum(f.sender.ignored_acks for f in tflows),
            "integrity_errors": sum(f.receiver.integrity_errors for f in tflows),
            "duplicates": sum(f.receiver.duplicates for f in tflows),
        },
        "network": {
            **dc.network.totals(),
            "control_messages": dc.network.control_messages,
            "control_bytes": dc.network.control_bytes,
            "unroutable_drops": sum(s.counters.unroutable_drops for s in dc.switches.values()),
            "implicit_pars": sum(s.counters.implicit_pars for s in dc.switches.values()),
        },
        "ears": dc.controller.stats.summary() if dc.controller is not None else None,
        "events_dispatched": dc.sim.dispatched,
        "trace_digest": dc.sim.trace_digest(),
    }
    if dc.shuffle is not None:
        job = dc.shuffle
        host_done = [to_seconds(t) for t in job.completed_at.values()]
        summary["shuffle"] = {
            "bytes_per_transfer": job.bytes_per_transfer,
            "transfers": job.total_transfers,
            "hosts_completed": len(host_done),
            "total_time_s": max(host_done) if job.finished else None,
            "mean_host_completion_s": float(np.mean(host_done)) if host_done else None,
            "host_completion_s": {n.name: to_seconds(t) for n, t in sorted(job.completed_at.items())},
            "bytes_delivered": sum(f.receiver.delivered for f in tflows),
        }

    return MetricsReport(
        throughput=throughput,
        flows=flows,
        ears=ears,
        margins=margins,
        links=links,
        convergence=convergence_curve(series),
        summary=summary,
        violations=list(dc.violations),
        topology_json=dc.topology.to_json(),
    )


def validate_bounds(report: MetricsReport) -> Tuple[bool, pd.DataFrame]:
    """Worst observed spread per scope against its bound.

    Scopes in ``INFORMATIONAL_SCOPES`` are listed but do not decide ``passed``.

    Returns:
        ``(passed, table)`` with columns scope, observed, bound, snapshots, validated.
    """
    margins = report.margins
    if margins.empty:
        table = pd.DataFrame(columns=["scope", "observed", "bound", "snapshots", "validated"])
        return not report.violations, table
    table = (
        margins.groupby("scope", sort=True)
        .agg(observed=("observed", "max"), bound=("bound", "min"), snapshots=("time_s", "nunique"))
        .reset_index()
    )
    table["validated"] = ~table["scope"].isin(sorted(INFORMATIONAL_SCOPES))
    checked = table[table["validated"]]
    passed = bool((checked["observed"] <= checked["bound"]).all()) and not report.violations
    return passed, table


def summarize_sweep(summaries: List[Dict[str, Any]], confidence: float = 0.95) -> pd.DataFrame:
    """Mean, spread and t-interval of bisection bandwidth per scheduler and pattern."""
    df = pd.DataFrame(
        [
            {
                "scheduler": s["scheduler"],
                "metric_mode": s["metric_mode"],
                "pattern": s["pattern"],
                "seed": s["seed"],
                "bisection_bandwidth_bps": s["bisection_bandwidth_bps"],
            }
            for s in summaries
        ]
    )
    rows = []
    for (sched, mode, pattern), group in df.groupby(["scheduler", "metric_mode", "pattern"], sort=True):
        values = group["bisection_bandwidth_bps"].to_numpy(dtype=float)
        mean = float(values.mean())
        std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
        if len(values) > 1 and std > 0:
            low, high = stats.t.interval(
                confidence, len(values) - 1, loc=mean, scale=std / np.sqrt(len(values))
            )
        else:
            low = high = mean
        rows.append(
            {
                "scheduler": sched,
                "metric_mode": mode,
                "pattern": pattern,
                "runs": len(values),
                "mean_bps": mean,
                "std_bps": std,
                "ci_low_bps": float(low),
                "ci_high_bps": float(high),
            }
        )
    return pd.DataFrame(rows)
