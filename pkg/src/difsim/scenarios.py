"""Scripted two-flow collisions on a k=4 fat-tree.

``local`` puts two flows on one edge switch and relies on path allocation.
``remote1`` pins two flows through the same core into one aggregate;
``remote2`` pins them through the same aggregate into one edge. Both
remote cases are left to the control loop and its adaptation requests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from loguru import logger

from difsim.config import ExperimentConfig
from difsim.fabric import DataCenter
from difsim.types import FlowKey, LinkId, NodeId, seconds, to_seconds

ScenarioName = Literal["local", "remote1", "remote2"]
SCENARIOS: Tuple[ScenarioName, ...] = ("local", "remote1", "remote2")

CHECK_AT_S = 0.1
GOODPUT_WINDOW_S = (0.2, 0.6)
GOODPUT_FRACTION = 0.9

# (src, dst, pinned route between them or None)
_Placement = Tuple[str, str, Optional[Sequence[str]]]

PLACEMENTS: Dict[ScenarioName, Tuple[_Placement, _Placement]] = {
    "local": (
        ("h0_0_0", "h1_0_0", None),
        ("h0_0_1", "h2_0_0", None),
    ),
    "remote1": (
        ("h2_0_0", "h1_0_0", ("e2_0", "a2_0", "c0_1", "a1_0", "e1_0")),
        ("h3_0_0", "h1_1_0", ("e3_0", "a3_0", "c0_1", "a1_0", "e1_1")),
    ),
    "remote2": (
        ("h2_0_0", "h1_0_0", ("e2_0", "a2_1", "c1_0", "a1_1", "e1_0")),
        ("h3_0_0", "h1_0_1", ("e3_0", "a3_1", "c1_1", "a1_1", "e1_0")),
    ),
}


@dataclass
class ScenarioResult:
    name: str
    passed: bool
    disjoint: bool
    paths: Dict[str, List[str]]
    goodput_bps: Dict[str, float]
    link_bps: float
    ear_log: List[Dict[str, Any]] = field(default_factory=list)
    reason: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "passed": self.passed,
            "disjoint": self.disjoint,
            "paths": self.paths,
            "goodput_bps": self.goodput_bps,
            "link_bps": self.link_bps,
            "reason": self.reason,
            "ear_log": self.ear_log,
        }


def scenario_config(**overrides: Any) -> ExperimentConfig:
    """k=4 DiFS config for scripted runs: every data packet is an elephant."""
    values: Dict[str, Any] = {
        "k": 4,
        "scheduler": "difs",
        "duration_s": GOODPUT_WINDOW_S[1],
        "warmup_s": GOODPUT_WINDOW_S[0],
        "cooldown_s": 0.0,
        "elephant_threshold_bytes": 0,
        "out_dir": None,
    }
    values.update(overrides)
    return ExperimentConfig(**values)


def _route(src: str, dst: str, hops: Sequence[str]) -> Tuple[NodeId, ...]:
    return tuple(NodeId.parse(n) for n in (src, *hops, dst))


def _names(path: Sequence[LinkId]) -> List[str]:
    return [l.name for l in path]


def scenario_check(name: str, **overrides: Any) -> ScenarioResult:
    """Run one scripted collision and check that DiFS separates the flows.

    The two flows must be on link-disjoint paths by the tenth control tick
    and each must carry at least 90% of the link rate afterwards.
    """
    if name not in PLACEMENTS:
        raise ValueError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    cfg = scenario_config(**overrides)
    dc = DataCenter(cfg)
    flows: List[FlowKey] = []
    for src, dst, hops in PLACEMENTS[name]:  # type: ignore[index]
        key = FlowKey(NodeId.parse(src), NodeId.parse(dst))
        route = _route(src, dst, hops) if hops is not None else None
        dc.open_flow(key, None, 0, route=route)
        flows.append(key)

    dc.run(seconds(CHECK_AT_S))
    paths = {k.name: dc.flow_path(k) for k in flows}
    a, b = (set(paths[k.name]) for k in flows)
    disjoint = not (a & b)

    tflows = dc.transport.flows
    dc.run(seconds(GOODPUT_WINDOW_S[0]))
    delivered_at = {k: tflows[k].receiver.delivered for k in flows}
    dc.run(seconds(GOODPUT_WINDOW_S[1]))
    span = GOODPUT_WINDOW_S[1] - GOODPUT_WINDOW_S[0]
    goodput = {
        k.name: (tflows[k].receiver.delivered - delivered_at[k]) * 8 / span for k in flows
    }

    link_bps = float(cfg.capacity_bps)
    slow = [n for n, g in goodput.items() if g < GOODPUT_FRACTION * link_bps]
    ear_log = (
        [{**row, "time_s": to_seconds(int(row["time_ns"]))} for row in dc.controller.stats.ear_log]  # type: ignore[arg-type]
        if dc.controller is not None
        else []
    )
    reasons = []
    if not disjoint:
        shared = sorted(l.name for l in a & b)
        reasons.append(f"paths still share {', '.join(shared)} at {CHECK_AT_S}s")
    if slow:
        reasons.append(f"below {GOODPUT_FRACTION:.0%} of link rate: {', '.join(slow)}")
    result = ScenarioResult(
        name=name,
        passed=not reasons,
        disjoint=disjoint,
        paths={n: _names(p) for n, p in paths.items()},
        goodput_bps=goodput,
        link_bps=link_bps,
        ear_log=ear_log,
        reason="; ".join(reasons),
    )
    if result.passed:
        logger.info("scenario {} passed: {}", name, {n: f"{g / 1e6:.0f}Mbps" for n, g in goodput.items()})
    else:
        logger.warning("scenario {} failed: {}; EARs: {}", name, result.reason, ear_log)
    return result
