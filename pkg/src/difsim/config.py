"""Experiment configuration."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from difsim.difs import ControlLoopConfig
from difsim.network import DEFAULT_PACKETS_MIN
from difsim.switch import DEFAULT_ELEPHANT_THRESHOLD
from difsim.tcp import TcpConfig
from difsim.traffic import PatternError, TrafficPattern, parse_pattern
from difsim.types import NS_PER_MS, NS_PER_US, NodeId, SimTime, seconds

load_dotenv()


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


def default_seed() -> int:
    return _env_int("DIFSIM_SEED", 1)


def default_out_dir() -> Optional[str]:
    return os.getenv("DIFSIM_OUT_DIR") or None


def default_log_level() -> str:
    return os.getenv("DIFSIM_LOG_LEVEL", "INFO")


# ========================================
# FAILURES
# ========================================


class FailureSpec(BaseModel):
    """A link or node failure injected at ``at_s`` simulated seconds."""

    model_config = ConfigDict(extra="forbid")

    at_s: float = Field(..., ge=0)
    link: Optional[Tuple[str, str]] = None
    node: Optional[str] = None

    @model_validator(mode="after")
    def _one_target(self) -> FailureSpec:
        if (self.link is None) == (self.node is None):
            raise ValueError("a failure names exactly one of 'link' or 'node'")
        for name in self.link or (self.node,):
            NodeId.parse(name)  # type: ignore[arg-type]
        return self


# ========================================
# EXPERIMENT
# ========================================


class ExperimentConfig(BaseModel):
    """Everything that determines one simulation run."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    k: int = Field(4, ge=4, description="Switch port count of the fat-tree (even)")
    scheduler: Literal["difs", "ecmp"] = "difs"
    metric_mode: Literal["count", "measured_rate"] = "count"
    pattern: str = Field("random", description="Pattern string, e.g. stride:4 or shuffle:5MB")
    duration_s: float = Field(60.0, gt=0, description="Simulated seconds")
    warmup_s: Optional[float] = Field(None, ge=0, description="Trimmed from the start; default duration/6")
    cooldown_s: Optional[float] = Field(None, ge=0, description="Trimmed from the end; default duration/6")
    seed: int = Field(default_factory=default_seed, ge=0, lt=2**64)

    link_gbps: float = Field(1.0, gt=0)
    link_delay_us: float = Field(10.0, gt=0)
    queue_packets_min: int = Field(DEFAULT_PACKETS_MIN, ge=1)

    elephant_threshold_bytes: int = Field(DEFAULT_ELEPHANT_THRESHOLD, ge=0)
    control_period_s: float = Field(0.01, gt=0)
    delta: float = Field(1.0, gt=0, description="Imbalance threshold in flows (count mode)")
    delta_link_fraction: float = Field(
        0.1, gt=0, le=1, description="Measured-rate threshold as a fraction of link capacity"
    )
    expiry_rtt_multiplier: float = Field(3.0, gt=0)
    rebalance_cap: Optional[int] = Field(None, ge=0, description="Moves per tick; default k/2")
    reservation: bool = Field(False, description="Send explicit PARs at flow start")

    init_cwnd_segments: int = Field(2, ge=1)
    init_ssthresh_bytes: int = Field(64 * 1024, ge=2 * 1460)
    min_rto_ms: float = Field(10.0, gt=0)
    initial_rto_ms: float = Field(50.0, gt=0)
    max_rto_s: float = Field(1.0, gt=0)

    sample_interval_s: float = Field(0.1, gt=0)
    steady_ticks: int = Field(10, ge=1)
    convergence_fraction: float = Field(0.95, gt=0, le=1)
    failures: List[FailureSpec] = Field(default_factory=list)
    validate_bounds: bool = False
    debug_checks: bool = False
    record_trace: bool = False
    out_dir: Optional[str] = Field(default_factory=default_out_dir)

    @field_validator("k")
    @classmethod
    def _even_k(cls, v: int) -> int:
        if v % 2:
            raise ValueError("k must be even")
        return v

    @field_validator("pattern")
    @classmethod
    def _parses(cls, v: str) -> str:
        try:
            parse_pattern(v)
        except PatternError as exc:
            raise ValueError(str(exc)) from exc
        return v

    @model_validator(mode="after")
    def _cross_checks(self) -> ExperimentConfig:
        if self.warmup + self.cooldown >= self.duration_s:
            raise ValueError("duration_s must exceed warmup_s + cooldown_s")
        if self.metric_mode == "count" and self.delta < 1:
            raise ValueError("delta must be >= 1 in count mode")
        if self.metric_mode == "measured_rate" and self.scheduler != "difs":
            raise ValueError("metric_mode measured_rate needs scheduler difs")
        if not self.min_rto_ms <= self.initial_rto_ms <= self.max_rto_s * 1000:
            raise ValueError("need min_rto_ms <= initial_rto_ms <= max_rto_s")
        if self.pattern_spec.kind == "stride" and self.pattern_spec.stride >= self.num_hosts:
            raise ValueError(f"stride must be < number of hosts ({self.num_hosts})")
        return self

    # ------------------------------------------------------------------
    @property
    def warmup(self) -> float:
        return self.duration_s / 6 if self.warmup_s is None else self.warmup_s

    @property
    def cooldown(self) -> float:
        return self.duration_s / 6 if self.cooldown_s is None else self.cooldown_s

    @property
    def num_hosts(self) -> int:
        return self.k**3 // 4

    @property
    def pattern_spec(self) -> TrafficPattern:
        return parse_pattern(self.pattern)

    @property
    def capacity_bps(self) -> int:
        return int(round(self.link_gbps * 1e9))

    @property
    def delay_ns(self) -> SimTime:
        return int(round(self.link_delay_us * NS_PER_US))

    @property
    def duration_ns(self) -> SimTime:
        return seconds(self.duration_s)

    def control_loop(self) -> ControlLoopConfig:
        rate_mode = self.metric_mode == "measured_rate"
        return ControlLoopConfig(
            period=seconds(self.control_period_s),
            delta=self.delta_link_fraction * self.capacity_bps if rate_mode else self.delta,
            metric_mode=self.metric_mode,
            expiry_multiplier=self.expiry_rtt_multiplier,
            rebalance_cap=self.rebalance_cap,
            reservation=self.reservation,
        )

    def tcp(self) -> TcpConfig:
        return TcpConfig(
            init_cwnd_segments=self.init_cwnd_segments,
            init_ssthresh=self.init_ssthresh_bytes,
            min_rto=int(self.min_rto_ms * NS_PER_MS),
            initial_rto=int(self.initial_rto_ms * NS_PER_MS),
            max_rto=seconds(self.max_rto_s),
        )

    @property
    def label(self) -> str:
        mode = "-fm" if self.metric_mode == "measured_rate" else ""
        return f"k{self.k}-{self.scheduler}{mode}-{self.pattern.replace(':', '_')}-s{self.seed}"

    @classmethod
    def from_json_file(cls, path: str | Path) -> ExperimentConfig:
        """Load a config from a JSON document with the same field names."""
        with open(path, encoding="utf-8") as fh:
            return cls.model_validate(json.load(fh))
