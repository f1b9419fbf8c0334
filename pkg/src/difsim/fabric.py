"""Assembly of one simulated data center and its run-time bookkeeping."""

from __future__ import annotations

from typing import Any, Callable, Dict, List, Optional, Sequence

from loguru import logger

from difsim.config import ExperimentConfig, FailureSpec
from difsim.difs import DifsController, EarMessage, MarginRow, ParMessage, bo_bi_margins
from difsim.engine import ECMP_HASH_SALT, TRAFFIC_GEN, Simulator
from difsim.network import Network
from difsim.switch import FabricSettings, Switch
from difsim.tcp import RttMonitor, TcpFlow, Transport
from difsim.topology import Topology, build_fat_tree
from difsim.traffic import ShuffleJob, workload
from difsim.types import FlowKey, Layer, LinkId, NodeId, SimTime, seconds, to_seconds


class InvariantViolation(AssertionError):
    """A runtime consistency check failed; carries the event-trace tail."""

    def __init__(self, message: str, trace_tail: Sequence[tuple] = ()):
        super().__init__(message)
        self.trace_tail = list(trace_tail)


class DataCenter:
    """Topology, network, hosts, switches and (for DiFS) agents of one run."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.sim = Simulator(config.seed, record_trace=config.record_trace)
        self.topology: Topology = build_fat_tree(config.k, config.capacity_bps, config.delay_ns)
        self.network = Network(self.sim, self.topology, config.queue_packets_min)
        base_rtt = 12 * config.delay_ns
        self.monitor = RttMonitor(fallback=base_rtt)
        self.transport = Transport(self.sim, self.network, config.tcp(), self.monitor)

        salt = int(self.sim.streams[ECMP_HASH_SALT].integers(2**63))
        settings = FabricSettings(
            elephant_threshold=config.elephant_threshold_bytes,
            measured_rate=config.metric_mode == "measured_rate",
            salt=salt,
        )
        self.switches: Dict[NodeId, Switch] = {}
        for node in self.topology.edges + self.topology.aggregates + self.topology.cores:
            sw = Switch(node, self.topology, self.network, settings)
            self.switches[node] = sw
            self.network.attach(node, sw)

        self.controller: Optional[DifsController] = None
        if config.scheduler == "difs":
            self.controller = DifsController(
                self.sim, self.topology, self.network, config.control_loop(), self.monitor
            )
            for sw in self.switches.values():
                self.controller.attach(sw)
            self.controller.unreachable_listeners.append(self._check_reachable)
            if config.debug_checks:
                self.controller.ear_observers.append(self._check_ear_hop)

        self.network.failure_listeners.append(self._on_failure)
        self.shuffle: Optional[ShuffleJob] = None
        self.failed_flows: List[FlowKey] = []

        self.samples: List[Dict[str, Any]] = []
        self.flow_samples: List[Dict[str, Any]] = []
        self.cumulative_rx: List[tuple[float, int]] = []
        self.margin_rows: List[Dict[str, Any]] = []
        self.violations: List[Dict[str, Any]] = []
        self._last_host_rx: Dict[NodeId, int] = {}
        self._last_flow_rx: Dict[FlowKey, int] = {}
        self._started = False
        logger.info(
            "built k={} fat-tree: {} hosts, {} switches, scheduler={}",
            config.k,
            len(self.topology.hosts),
            len(self.switches),
            config.scheduler,
        )

    # ------------------------------------------------------------------
    # Traffic
    # ------------------------------------------------------------------
    def open_flow(
        self,
        key: FlowKey,
        bytes_total: int | None,
        start: SimTime = 0,
        on_complete: Optional[Callable[[TcpFlow], None]] = None,
        route: Optional[Sequence[NodeId]] = None,
    ) -> TcpFlow:
        """Open a TCP flow; with ``route`` the path is pinned by an explicit PAR."""
        flow = self.transport.open_flow(key, bytes_total, start, on_complete)
        if self.controller is not None and (route is not None or self.config.reservation):
            par = ParMessage(key, implicit=False, route=tuple(route) if route else None)
            self.sim.schedule(start, self.controller.reserve, par)
        return flow

    def install_traffic(self) -> int:
        """Open the configured pattern's initial flows; returns how many."""
        rng = self.sim.streams[TRAFFIC_GEN]
        specs, self.shuffle = workload(self.config.pattern_spec, self.topology, rng)
        callback = self._next_shuffle if self.shuffle is not None else None
        for spec in specs:
            self.open_flow(spec.key, spec.bytes_total, spec.start, callback)
        logger.info("installed {} flow(s) for pattern {}", len(specs), self.config.pattern)
        return len(specs)

    def _next_shuffle(self, flow: TcpFlow) -> None:
        assert self.shuffle is not None
        receiver = flow.key.dst_host
        key = self.shuffle.next_shuffle_transfer(receiver, self.sim.now)
        if key is not None:
            self.open_flow(key, self.shuffle.bytes_per_transfer, self.sim.now, self._next_shuffle)

    # ------------------------------------------------------------------
    # Failures
    # ------------------------------------------------------------------
    def schedule_failures(self) -> None:
        for spec in self.config.failures:
            self.sim.schedule(seconds(spec.at_s), self._apply_failure, spec)

    def _apply_failure(self, spec: FailureSpec) -> None:
        if spec.link is not None:
            a, b = (NodeId.parse(n) for n in spec.link)
            self.network.fail_link(a, b)
        else:
            assert spec.node is not None
            self.network.fail_node(NodeId.parse(spec.node))

    def _on_failure(self, links: List[LinkId]) -> None:
        if self.controller is not None:
            # every switch sees the new link state, not only the endpoints
            for node in sorted(self.controller.agents):
                if self.network.node_up(node):
                    self.controller.agents[node].on_link_failure(links)
        for key in list(self.transport.flows):
            self._check_reachable(key)

    def _check_reachable(self, key: FlowKey) -> None:
        flow = self.transport.flows.get(key)
        if flow is None or flow.failed or flow.sender.done:
            return
        if not self.network.reachable(key.src_host, key.dst_host):
            self.transport.fail_flow(key)
            self.failed_flows.append(key)

    # ------------------------------------------------------------------
    # Running
    # ------------------------------------------------------------------
    def start(self) -> None:
        if self._started:
            return
        self._started = True
        self.schedule_failures()
        if self.controller is not None:
            self.controller.start()
        self.sim.schedule(0, self._sample)
        if self.config.debug_checks and self.controller is not None:
            self.sim.schedule(0, self._debug_tick)

    def run(self, until: SimTime | None = None) -> SimTime:
        """Run to ``until`` (default: the configured duration)."""
        self.start()
        deadline = self.config.duration_ns if until is None else until
        now = self.sim.run_until(deadline)
        logger.info(
            "run reached {:.3f}s after {} events", to_seconds(now), self.sim.dispatched
        )
        return now

    def _sample(self) -> None:
        now = self.sim.now
        interval = seconds(self.config.sample_interval_s)
        t = to_seconds(now)
        if now > 0:
            start_s = to_seconds(now - interval)
            for node, host in self.transport.hosts.items():
                delta = host.rx_bytes - self._last_host_rx.get(node, 0)
                self.samples.append(
                    {"time_s": start_s, "host": node.name, "rx_bps": delta * 8 / (interval / 1e9)}
                )
            for key, flow in self.transport.flows.items():
                if flow.bytes_total is not None:
                    continue
                delta = flow.receiver.delivered - self._last_flow_rx.get(key, 0)
                self.flow_samples.append(
                    {"time_s": start_s, "flow": key.name, "rx_bps": delta * 8 / (interval / 1e9)}
                )
        for node, host in self.transport.hosts.items():
            self._last_host_rx[node] = host.rx_bytes
        for key, flow in self.transport.flows.items():
            self._last_flow_rx[key] = flow.receiver.delivered
        self.cumulative_rx.append((t, sum(self._last_host_rx.values())))
        if self.controller is not None and self.controller.steady(now, self.config.steady_ticks):
            self.snapshot_margins()
        if now + interval <= self.config.duration_ns:
            self.sim.schedule(now + interval, self._sample)

    # ------------------------------------------------------------------
    # Balance bounds
    # ------------------------------------------------------------------
    @property
    def bound_delta(self) -> float:
        return self.config.delta if self.config.metric_mode == "count" else 1.0

    def margins(self) -> List[MarginRow]:
        return bo_bi_margins(self.topology, self.switches.values(), self.bound_delta)

    def snapshot_margins(self) -> List[MarginRow]:
        """Record the current margins and any bound they exceed."""
        t = to_seconds(self.sim.now)
        rows = self.margins()
        for row in rows:
            self.margin_rows.append(
                {"time_s": t, "scope": row.scope, "pod": row.pod, "observed": row.observed, "bound": row.bound}
            )
            if row.validated and not row.ok:
                logger.warning(
                    "t={:.3f}s: {} margin {} exceeds bound {} (pod {})",
                    t,
                    row.scope,
                    row.observed,
                    row.bound,
                    row.pod,
                )
                self.violations.append(
                    {
                        "time_s": t,
                        "scope": row.scope,
                        "pod": row.pod,
                        "observed": row.observed,
                        "bound": row.bound,
                        "flow_tables": self._scope_dump(row),
                    }
                )
        return rows

    def _scope_dump(self, row: MarginRow) -> List[Dict[str, Any]]:
        if row.pod is None:
            nodes = self.topology.aggregates
        else:
            nodes = tuple(
                n for n in self.topology.edges + self.topology.aggregates if n.pod == row.pod
            )
        return [self.switches[n].dump() for n in nodes]

    # ------------------------------------------------------------------
    # Inspection
    # ------------------------------------------------------------------
    def flow_path(self, key: FlowKey) -> List[LinkId]:
        """Links a data packet of ``key`` would traverse right now."""
        node = key.src_host
        path: List[LinkId] = []
        for _ in range(8):
            if node == key.dst_host:
                return path
            hops = self.network.usable_next_hops(node, key.dst_host)
            if not hops:
                break
            if node.layer == Layer.HOST:
                link = hops[0]
            else:
                sw = self.switches[node]
                entry = sw.flow_table.get(key)
                link = entry.L_o if entry is not None else sw.ecmp_choice(key, hops)
            path.append(link)
            node = link.dst
        return path

    def dump_state(self) -> List[Dict[str, Any]]:
        return [sw.dump() for sw in self.switches.values() if sw.flow_table]

    # ------------------------------------------------------------------
    # Debug checks
    # ------------------------------------------------------------------
    def _fail(self, message: str) -> None:
        raise InvariantViolation(message, self.sim.trace_tail())

    def _debug_tick(self) -> None:
        assert self.controller is not None
        for sw in self.switches.values():
            if not sw.psv_consistent():
                self._fail(f"{sw.node}: port state vectors disagree with the flow table")
            agent = self.controller.agents[sw.node]
            if agent.ears_this_tick > self.controller.config.max_ears_per_tick:
                self._fail(f"{sw.node}: {agent.ears_this_tick} EARs in one tick")
        self.sim.schedule(self.sim.now + self.controller.config.period, self._debug_tick)

    def _check_ear_hop(self, ear: EarMessage, link: LinkId) -> None:
        # the EAR crossed ``link`` backwards; the receiver must forward the flow on it
        receiver = self.switches.get(link.src)
        if receiver is None:
            return
        entry = receiver.flow_table.get(ear.flow)
        if entry is not None and entry.L_o != link:
            self._fail(f"EAR for {ear.flow} left the reverse path at {link.name}")
