"""Experiment pipeline.

One run is a LangGraph workflow:

- build_fabric: topology, network, hosts, switches and (for DiFS) agents
- install_traffic: the configured pattern's flows
- simulate: run to the configured duration
- collect_metrics: throughput, bisection bandwidth, reordering, EAR overhead
- check_bounds: balance bounds over steady-state snapshots (when enabled)
- write_outputs: CSV and JSON files (when an output directory is set)
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import anyio
from langgraph.graph import StateGraph
from langgraph.runtime import Runtime
from loguru import logger

from difsim.config import ExperimentConfig
from difsim.fabric import DataCenter, InvariantViolation
from difsim.metrics import MetricsReport, collect, validate_bounds
from difsim.output import write_report
from difsim.types import Context, State, to_seconds


def _context(runtime: Runtime[Context]) -> Dict[str, Any]:
    return dict(runtime.context or {}) if runtime is not None else {}


async def build_fabric(state: State, runtime: Runtime[Context]) -> Dict[str, Any]:
    """Assemble the simulated data center for ``state.config``."""
    cfg = state.config
    if cfg is None:
        raise ValueError("no experiment config in state")
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.model_validate(cfg)
    return {"config": cfg, "fabric": DataCenter(cfg)}


async def install_traffic(state: State, runtime: Runtime[Context]) -> Dict[str, Any]:
    return {"flows_installed": state.fabric.install_traffic()}


async def simulate(state: State, runtime: Runtime[Context]) -> Dict[str, Any]:
    dc: DataCenter = state.fabric
    try:
        now = dc.run()
    except InvariantViolation as exc:
        logger.error("invariant violated: {}", exc)
        for ev in exc.trace_tail:
            logger.error("  {}", ev)
        raise
    return {"finished_at_s": to_seconds(now)}


async def collect_metrics(state: State, runtime: Runtime[Context]) -> Dict[str, Any]:
    report = collect(state.fabric)
    s = report.summary
    logger.info(
        "{}: bisection {:.3f} Gbps ({:.1%}), converged at {:.2f}s",
        s["label"],
        s["bisection_bandwidth_bps"] / 1e9,
        s["bisection_fraction"],
        s["convergence_time_s"],
    )
    return {"report": report, "violations": list(report.violations)}


async def check_bounds(state: State, runtime: Runtime[Context]) -> Dict[str, Any]:
    """Compare worst steady-state spreads against their bounds."""
    if not state.config.validate_bounds:
        return {}
    report: MetricsReport = state.report
    passed, table = validate_bounds(report)
    report.summary["bounds"] = {
        "passed": passed,
        "table": table.to_dict(orient="records"),
    }
    if not passed:
        scopes = sorted({v["scope"] for v in report.violations})
        logger.warning("balance bounds violated in scope(s): {}", ", ".join(scopes))
    return {"bounds_passed": passed}


async def write_outputs(state: State, runtime: Runtime[Context]) -> Dict[str, Any]:
    ctx = _context(runtime)
    if ctx.get("write_outputs") is False:
        return {}
    out_dir = ctx.get("out_dir") or state.config.out_dir
    if not out_dir:
        return {}
    files = await anyio.to_thread.run_sync(write_report, state.report, out_dir)
    return {"written_files": files}


# Define the graph
builder = StateGraph(State, context_schema=Context)

builder.add_node("build_fabric", build_fabric)
builder.add_node("install_traffic", install_traffic)
builder.add_node("simulate", simulate)
builder.add_node("collect_metrics", collect_metrics)
builder.add_node("check_bounds", check_bounds)
builder.add_node("write_outputs", write_outputs)

builder.add_edge("__start__", "build_fabric")
builder.add_edge("build_fabric", "install_traffic")
builder.add_edge("install_traffic", "simulate")
builder.add_edge("simulate", "collect_metrics")
builder.add_edge("collect_metrics", "check_bounds")
builder.add_edge("check_bounds", "write_outputs")

# Compile the graph
graph = builder.compile(name="DiFS vs ECMP fat-tree experiment")


def _inputs(cfg: ExperimentConfig, out_dir: Optional[str], write: bool) -> tuple[State, Context]:
    return State(config=cfg), Context(out_dir=out_dir, write_outputs=write)


async def arun_experiment(
    cfg: ExperimentConfig, out_dir: Optional[str] = None, write: bool = True
) -> MetricsReport:
    """Run one experiment through the pipeline graph."""
    state, context = _inputs(cfg, out_dir, write)
    result = await graph.ainvoke(state, context=context)
    return result["report"]


def run_experiment(
    cfg: ExperimentConfig, out_dir: Optional[str] = None, write: bool = True
) -> MetricsReport:
    """Synchronous :func:`arun_experiment`; the graph nodes are coroutines."""
    return anyio.run(arun_experiment, cfg, out_dir, write)


def _sweep_worker(payload: str, out_dir: Optional[str]) -> Dict[str, Any]:
    cfg = ExperimentConfig.model_validate_json(payload)
    target = str(Path(out_dir) / cfg.label) if out_dir else None
    report = run_experiment(cfg, out_dir=target, write=target is not None)
    return report.summary


def run_sweep(
    configs: Sequence[ExperimentConfig],
    max_workers: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> List[Dict[str, Any]]:
    """Run independent experiments in worker processes.

    Each run writes under ``out_dir/<label>`` when ``out_dir`` is given.

    Returns:
        Run summaries in the order of ``configs``.
    """
    payloads = [c.model_dump_json() for c in configs]
    if max_workers == 1 or len(payloads) <= 1:
        return [_sweep_worker(p, out_dir) for p in payloads]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(_sweep_worker, p, out_dir) for p in payloads]
        return [f.result() for f in futures]
