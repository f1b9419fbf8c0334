"""DiFS control plane.

Each switch runs a :class:`DifsAgent`: path allocation for new elephant
flows, a periodic control loop (expiry, SIMO rebalance, imbalance detection)
and explicit adaptation of flows on request from downstream switches. Agents
talk to each other only through EAR and PAR messages carried by the network.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Deque, Dict, Iterable, List, Literal, Optional, Sequence, Tuple

from loguru import logger

from difsim.engine import DIFS_TIEBREAK, EAR_TARGET_PICK, Simulator
from difsim.network import Network
from difsim.switch import FlowTableEntry, Switch
from difsim.tcp import RttMonitor
from difsim.topology import Topology
from difsim.types import (
    NS_PER_MS,
    FlowKey,
    Layer,
    LinkId,
    NodeId,
    PathSpec,
    SimTime,
    aggregate,
    core,
)

EAR_SIZE_BYTES = 26
PAR_SIZE_BYTES = 26
# Set by where hosts send, not by the scheduler; reported but never checked.
INFORMATIONAL_SCOPES = frozenset({"edge"})

MetricMode = Literal["count", "measured_rate"]


class AllocationError(RuntimeError):
    """No feasible outgoing link for a path allocation request."""


@dataclass(frozen=True)
class ControlLoopConfig:
    """Control-loop parameters shared by every agent.

    In ``measured_rate`` mode ``delta`` is a rate in bits per second.
    """

    period: SimTime = 10 * NS_PER_MS
    delta: float = 1.0
    metric_mode: MetricMode = "count"
    max_ears_per_tick: int = 1
    expiry_multiplier: float = 3.0
    rebalance_cap: int | None = None
    reservation: bool = False

    def __post_init__(self) -> None:
        if self.period <= 0:
            raise ValueError("control period must be positive")
        if self.metric_mode == "count" and self.delta < 1:
            raise ValueError("delta must be >= 1 in count mode")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.max_ears_per_tick < 1:
            raise ValueError("max_ears_per_tick must be >= 1")
        if self.rebalance_cap is not None and self.rebalance_cap < 0:
            raise ValueError("rebalance_cap must be >= 0")


@dataclass
class EarMessage:
    """Explicit Adaptation Request travelling the reverse path of ``flow``."""

    flow: FlowKey
    recommendation: PathSpec
    origin: NodeId
    hop_trace: List[NodeId] = field(default_factory=list)
    issued_at: SimTime = 0
    failure: bool = False


@dataclass
class ParMessage:
    """Path Allocation Request.

    ``route`` pins the full host-to-host node sequence; without it every
    switch on the way runs path allocation.
    """

    flow: FlowKey
    implicit: bool = True
    route: Tuple[NodeId, ...] | None = None


@dataclass
class DifsStats:
    ears_emitted: int = 0
    failure_ears: int = 0
    ear_hops: int = 0
    ears_applied: int = 0
    ears_discarded_no_entry: int = 0
    ears_discarded_at_source: int = 0
    swaps: int = 0
    simo_moves: int = 0
    explicit_pars: int = 0
    failure_reallocations: int = 0
    ticks: int = 0
    last_ear_at: SimTime | None = None
    ear_log: List[Dict[str, object]] = field(default_factory=list)
    unreachable: List[FlowKey] = field(default_factory=list)

    @property
    def ear_overhead_bytes(self) -> int:
        return self.ears_emitted * EAR_SIZE_BYTES

    def summary(self) -> Dict[str, int]:
        return {
            "ears_emitted": self.ears_emitted,
            "failure_ears": self.failure_ears,
            "ear_overhead_bytes": self.ear_overhead_bytes,
            "ear_hops": self.ear_hops,
            "ears_applied": self.ears_applied,
            "ears_discarded_no_entry": self.ears_discarded_no_entry,
            "ears_discarded_at_source": self.ears_discarded_at_source,
            "swaps": self.swaps,
            "simo_moves": self.simo_moves,
            "explicit_pars": self.explicit_pars,
            "failure_reallocations": self.failure_reallocations,
            "control_ticks": self.ticks,
        }


class DifsController:
    """Wires agents to switches and holds the run-wide configuration and counters."""

    def __init__(
        self,
        sim: Simulator,
        topology: Topology,
        network: Network,
        config: ControlLoopConfig | None = None,
        monitor: RttMonitor | None = None,
    ):
        self.sim = sim
        self.topology = topology
        self.network = network
        self.config = config or ControlLoopConfig()
        self.monitor = monitor or RttMonitor(self.config.period)
        self.tiebreak = sim.streams[DIFS_TIEBREAK]
        self.target_pick = sim.streams[EAR_TARGET_PICK]
        self.agents: Dict[NodeId, DifsAgent] = {}
        self.stats = DifsStats()
        self.unreachable_listeners: List[Callable[[FlowKey], None]] = []
        self.ear_observers: List[Callable[[EarMessage, LinkId], None]] = []

    def attach(self, switch: Switch) -> DifsAgent:
        agent = DifsAgent(switch, self)
        switch.agent = agent
        self.agents[switch.node] = agent
        return agent

    def start(self) -> None:
        """Schedule every agent's first tick at a random phase within one period."""
        for node in sorted(self.agents):
            phase = int(self.tiebreak.integers(self.config.period))
            self.sim.schedule(self.sim.now + phase, self.agents[node].control_tick)

    def steady(self, now: SimTime, ticks: int) -> bool:
        """True once no EAR has been emitted for ``ticks`` periods."""
        last = self.stats.last_ear_at
        if last is None:
            return now >= ticks * self.config.period
        return now - last >= ticks * self.config.period

    def reserve(self, par: ParMessage) -> None:
        """Send an explicit PAR from the flow's source host toward its edge switch."""
        src = par.flow.src_host
        uplinks = self.network.usable_next_hops(src, par.flow.dst_host)
        if not uplinks:
            self.report_unreachable(par.flow)
            return
        link = uplinks[0]
        self.stats.explicit_pars += 1
        self.network.send_control(link, self.agents[link.dst].receive_par, par, PAR_SIZE_BYTES)

    def report_unreachable(self, key: FlowKey) -> None:
        if key in self.stats.unreachable:
            return
        self.stats.unreachable.append(key)
        for listener in self.unreachable_listeners:
            listener(key)

    def log_ear(self, ear: EarMessage) -> None:
        self.stats.ear_log.append(
            {
                "time_ns": ear.issued_at,
                "origin": ear.origin.name,
                "flow": ear.flow.name,
                "recommendation": "core" if ear.recommendation.core is not None else "aggregate",
                "target": ear.recommendation.target.name,
            }
        )


class DifsAgent:
    """DiFS logic attached to one switch."""

    def __init__(self, switch: Switch, controller: DifsController):
        self.switch = switch
        self.controller = controller
        self.node = switch.node
        self.topology = switch.topology
        self.network = switch.network
        self.sim = switch.sim
        self.config = controller.config
        self.pending_ears: Deque[EarMessage] = deque()
        self.ears_this_tick = 0

    # ------------------------------------------------------------------
    # Path allocation
    # ------------------------------------------------------------------
    def _least_loaded(self, links: Sequence[LinkId]) -> LinkId:
        metric = self.switch.out_metric(links)
        low = min(metric.values())
        ties = sorted(l for l in links if metric[l] == low)
        if len(ties) == 1:
            return ties[0]
        return ties[int(self.controller.tiebreak.integers(len(ties)))]

    def path_allocation(
        self, par: ParMessage, in_link: LinkId, candidates: Sequence[LinkId] | None = None
    ) -> LinkId:
        """Choose and install the outgoing link of a new elephant flow.

        Raises:
            AllocationError: if no outgoing link leads to the destination.
        """
        if candidates is None:
            candidates = self.network.usable_next_hops(self.node, par.flow.dst_host)
        if not candidates:
            raise AllocationError(f"{self.node}: no path for {par.flow}")
        chosen = candidates[0] if len(candidates) == 1 else self._least_loaded(candidates)
        self.switch.install(par.flow, in_link, chosen)
        return chosen

    def allocate_implicit(
        self, key: FlowKey, in_link: LinkId, candidates: Sequence[LinkId]
    ) -> LinkId:
        return self.path_allocation(ParMessage(key, implicit=True), in_link, candidates)

    def receive_par(self, par: ParMessage, link: LinkId) -> None:
        """Handle an explicit PAR and pass it on toward the destination."""
        dst = par.flow.dst_host
        if par.route is not None:
            route = par.route
            nxt = route[route.index(self.node) + 1]
            chosen = self.topology.link(self.node, nxt)
            self.switch.install(par.flow, link, chosen)
        else:
            try:
                chosen = self.path_allocation(par, link)
            except AllocationError:
                self.controller.report_unreachable(par.flow)
                return
        if chosen.dst == dst:
            return
        peer = self.controller.agents[chosen.dst]
        self.network.send_control(chosen, peer.receive_par, par, PAR_SIZE_BYTES)

    # ------------------------------------------------------------------
    # Control loop
    # ------------------------------------------------------------------
    def expiry(self) -> SimTime:
        avg = self.controller.monitor.average
        return max(int(self.config.expiry_multiplier * avg), self.config.period)

    def control_tick(self) -> None:
        now = self.sim.now
        if not self.network.node_up(self.node):
            return
        self.controller.stats.ticks += 1
        self.ears_this_tick = 0
        self.switch.expire_flows(now, self.expiry())
        self.rebalance_simo()
        ear = self._next_failure_ear()
        if ear is None:
            ear = self.imbalance_detect(now)
        if ear is not None:
            self.emit(ear)
        self.sim.schedule(now + self.config.period, self.control_tick)

    def _weight(self, entry: FlowTableEntry) -> float:
        """What moving ``entry`` shifts between two port metrics."""
        return entry.measured_rate if self.switch.settings.measured_rate else 1.0

    def rebalance_simo(self) -> List[Tuple[FlowKey, LinkId, LinkId]]:
        """Even out elephant counts over the uplinks, a bounded number of moves per tick."""
        links = [l for l in self.topology.uplinks(self.node) if self.network.link_up(l)]
        if len(links) < 2:
            return []
        cap = self.config.rebalance_cap
        if cap is None:
            cap = self.topology.half
        moves: List[Tuple[FlowKey, LinkId, LinkId]] = []
        while len(moves) < cap:
            metric = self.switch.out_metric(links)
            hi = max(links, key=lambda l: (metric[l], l))
            lo = min(links, key=lambda l: (metric[l], l))
            spread = metric[hi] - metric[lo]
            if spread <= self.config.delta:
                break
            # a move must strictly narrow the spread
            victims = [
                e
                for e in self.switch.entries_on(hi)
                if self._weight(e) < spread
                and lo in self.network.usable_next_hops(self.node, e.key.dst_host)
            ]
            if not victims:
                break
            victim = max(victims, key=lambda e: (e.installed_at, e.key))
            self.switch.move(victim.key, lo)
            moves.append((victim.key, hi, lo))
            logger.debug("{} rebalance: {} {} -> {}", self.node, victim.key, hi.dst, lo.dst)
        self.controller.stats.simo_moves += len(moves)
        return moves

    def imbalance_detect(self, now: SimTime) -> Optional[EarMessage]:
        """Find a flow arriving on an overloaded incoming link and build an EAR for it."""
        if self.node.layer == Layer.CORE:
            return None
        incoming = sorted(
            l
            for l in self.topology.in_links(self.node)
            if l.src.layer > self.node.layer and self.network.link_up(l)
        )
        if len(incoming) < 2:
            return None
        metric = self.switch.in_metric(incoming)
        low = min(metric.values())
        violators = sorted(
            (
                e
                for e in self.switch.flow_table.values()
                if e.L_i in metric
                and metric[e.L_i] - low > self.config.delta
                and self._weight(e) < metric[e.L_i] - low
            ),
            key=lambda e: e.key,
        )
        if not violators:
            return None
        flow = violators[int(self.controller.target_pick.integers(len(violators)))]
        lows = [l for l in incoming if metric[l] == low]
        target = lows[0] if len(lows) == 1 else lows[int(self.controller.tiebreak.integers(len(lows)))]
        recommendation = self.topology.mirror_uplink(self.node, target, flow.key.src_host.pod)
        return EarMessage(flow.key, recommendation, self.node, [self.node], now)

    # ------------------------------------------------------------------
    # EAR handling
    # ------------------------------------------------------------------
    def emit(self, ear: EarMessage) -> bool:
        """Send ``ear`` upstream along the flow's incoming link."""
        entry = self.switch.flow_table.get(ear.flow)
        if entry is None or self.ears_this_tick >= self.config.max_ears_per_tick:
            return False
        self.ears_this_tick += 1
        stats = self.controller.stats
        stats.ears_emitted += 1
        stats.failure_ears += int(ear.failure)
        stats.last_ear_at = self.sim.now
        ear.issued_at = self.sim.now
        self.controller.log_ear(ear)
        logger.debug("{} EAR for {} recommending {}", self.node, ear.flow, ear.recommendation)
        self._send_upstream(ear, entry)
        return True

    def _send_upstream(self, ear: EarMessage, entry: FlowTableEntry) -> None:
        upstream = entry.L_i.src
        peer = self.controller.agents[upstream]
        self.network.send_control(entry.L_i, peer.receive_ear, ear, EAR_SIZE_BYTES)

    def receive_ear(self, ear: EarMessage, link: LinkId) -> None:
        self.controller.stats.ear_hops += 1
        for observer in self.controller.ear_observers:
            observer(ear, link)
        ear.hop_trace.append(self.node)
        self.explicit_adapt(ear)

    def explicit_adapt(self, ear: EarMessage) -> str:
        """Apply ``ear`` here if possible, else pass it further upstream.

        Returns:
            ``"applied"``, ``"forwarded"`` or ``"discarded"``.
        """
        stats = self.controller.stats
        entry = self.switch.flow_table.get(ear.flow)
        if entry is None:
            stats.ears_discarded_no_entry += 1
            logger.warning("{} discarded EAR for {}: no flow entry", self.node, ear.flow)
            return "discarded"

        target = ear.recommendation.target
        dst = ear.flow.dst_host
        if self.topology.has_link(self.node, target):
            link = self.topology.link(self.node, target)
            if link in self.network.usable_next_hops(self.node, dst):
                self._adapt(entry, link)
                stats.ears_applied += 1
                return "applied"

        if entry.L_i.src.layer == Layer.HOST:
            stats.ears_discarded_at_source += 1
            logger.warning("{} discarded EAR for {}: not applicable", self.node, ear.flow)
            return "discarded"
        self._send_upstream(ear, entry)
        return "forwarded"

    def _adapt(self, entry: FlowTableEntry, link: LinkId) -> None:
        current = entry.L_o
        if link == current:
            return
        metric = self.switch.out_metric([link, current])
        if metric[link] >= metric[current]:
            victims = [
                e
                for e in self.switch.entries_on(link)
                if e.key != entry.key
                and current in self.network.usable_next_hops(self.node, e.key.dst_host)
            ]
            if victims:
                victim = max(victims, key=lambda e: (e.installed_at, e.key))
                self.switch.move(victim.key, current)
                self.controller.stats.swaps += 1
        self.switch.move(entry.key, link)
        logger.debug("{} moved {} {} -> {}", self.node, entry.key, current.dst, link.dst)

    # ------------------------------------------------------------------
    # Failures
    # ------------------------------------------------------------------
    def on_link_failure(self, failed: Iterable[LinkId]) -> List[FlowKey]:
        """Rehome flows whose outgoing link failed or no longer reaches their destination.

        Returns:
            Flows for which a failure EAR was queued.
        """
        failed = set(failed)
        queued: List[FlowKey] = []
        for entry in sorted(self.switch.flow_table.values(), key=lambda e: e.key):
            survivors = self.network.usable_next_hops(self.node, entry.key.dst_host)
            if entry.L_o not in failed and entry.L_o in survivors:
                continue
            if survivors:
                self.switch.move(entry.key, self._least_loaded(survivors))
                self.controller.stats.failure_reallocations += 1
                continue
            recommendation = self._failure_recommendation(entry)
            if recommendation is None or entry.L_i.src.layer == Layer.HOST:
                self.switch.remove(entry.key)
                self.controller.report_unreachable(entry.key)
                continue
            self.pending_ears.append(
                EarMessage(entry.key, recommendation, self.node, [self.node], failure=True)
            )
            queued.append(entry.key)
        return queued

    def _failure_recommendation(self, entry: FlowTableEntry) -> PathSpec | None:
        dst = entry.key.dst_host
        if self.node.layer == Layer.CORE:
            group = self.node.group
            for i in range(self.topology.half):
                alt = core(group, i)
                if alt != self.node and self.network.reachable(alt, dst):
                    return PathSpec(core=alt)
            return None
        src_pod = entry.key.src_host.pod
        avoid = self.node.position if self.node.layer == Layer.AGGREGATE else None
        for p in range(self.topology.half):
            alt = aggregate(src_pod, p)
            if p != avoid and self.network.reachable(alt, dst):
                return PathSpec(uphill_aggregate=alt)
        return None

    def _next_failure_ear(self) -> EarMessage | None:
        while self.pending_ears:
            ear = self.pending_ears.popleft()
            if ear.flow in self.switch.flow_table:
                ear.hop_trace = [self.node]
                return ear
        return None


@dataclass(frozen=True)
class MarginRow:
    scope: str
    pod: int | None
    observed: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.observed <= self.bound

    @property
    def validated(self) -> bool:
        return self.scope not in INFORMATIONAL_SCOPES


def bo_bi_margins(
    topology: Topology, switches: Iterable[Switch], delta: float = 1.0
) -> List[MarginRow]:
    """Spread of elephant counts per scope, with the bound each must respect.

    Scopes: ``aggregate`` (flows from a pod's edges into each aggregate,
    per pod), ``core`` (flows into each core, global), ``edge`` (flows from
    a pod's aggregates into each edge, per pod) and ``aggregate_rx`` (flows
    each aggregate receives from cores and delivers into its pod, per pod).
    """
    k = topology.k
    half = topology.half
    into: Dict[NodeId, int] = {n: 0 for n in topology.nodes if n.is_switch}
    rx: Dict[NodeId, int] = {a: 0 for a in topology.aggregates}
    for sw in switches:
        layer = sw.node.layer
        if layer == Layer.CORE:
            continue
        for e in sw.flow_table.values():
            nxt = e.L_o.dst
            if nxt.layer == Layer.HOST:
                continue
            if layer == Layer.EDGE and nxt.layer == Layer.AGGREGATE:
                into[nxt] += 1
            elif layer == Layer.AGGREGATE:
                into[nxt] += 1
                if nxt.layer == Layer.EDGE and e.L_i.src.layer == Layer.CORE:
                    rx[sw.node] += 1

    def spread(values: List[int]) -> float:
        return float(max(values) - min(values)) if values else 0.0

    rows: List[MarginRow] = []
    for pod in range(k):
        aggs = [aggregate(pod, j) for j in range(half)]
        rows.append(MarginRow("aggregate", pod, spread([into[a] for a in aggs]), delta * half))
    rows.append(MarginRow("core", None, spread([into[c] for c in topology.cores]), 3.0 * k))
    for pod in range(k):
        edges = [n for n in topology.edges if n.pod == pod]
        rows.append(MarginRow("edge", pod, spread([into[e] for e in edges]), float(half)))
    for pod in range(k):
        aggs = [aggregate(pod, j) for j in range(half)]
        rows.append(MarginRow("aggregate_rx", pod, spread([rx[a] for a in aggs]), float(half)))
    return rows
