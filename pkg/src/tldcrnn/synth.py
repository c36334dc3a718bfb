"""Synthetic highway speeds for desk-scale transfer experiments.

Speed at a node is a diurnal free-flow profile with two rush-hour dips,
minus congestion events, plus a slow mean-reverting drift and white noise.
Events start at one sensor and back up along reverse edges, losing a factor
``propagation_decay`` and arriving ``spread_steps`` later per hop.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .graph import KernelConfig, SensorGraph, build_adjacency
from .timeseries import STEP, TimeSeriesFrame

STEPS_PER_DAY = 288


@dataclass(frozen=True)
class SynthConfig:
    free_flow_speed: float = 65.0
    free_flow_spread: float = 4.0
    morning_amplitude: float = 25.0
    evening_amplitude: float = 30.0
    amplitude_spread: float = 0.3
    morning_peak_hour: float = 7.75
    evening_peak_hour: float = 17.5
    rush_jitter_minutes: float = 20.0
    weekend_factor: float = 0.25
    event_rate: float = 1.0
    severity_mean: float = 15.0
    severity_shape: float = 2.0
    event_duration: float = 12.0
    propagation_decay: float = 0.5
    spread_steps: int = 1
    max_hops: int = 4
    drift_std: float = 2.0
    drift_time_constant: float = 144.0
    noise_std: float = 0.5
    start: str = "2024-01-01T00:00"
    seed: int = 0

    def __post_init__(self):
        if self.free_flow_speed <= 0:
            raise ValueError("free_flow_speed must be positive")
        if self.event_rate < 0:
            raise ValueError("event_rate must be non-negative")
        if not 0 <= self.propagation_decay <= 1:
            raise ValueError("propagation_decay must lie in [0, 1]")
        for name in ("severity_mean", "severity_shape", "event_duration", "drift_time_constant"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("noise_std", "drift_std", "free_flow_spread", "amplitude_spread", "rush_jitter_minutes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.spread_steps < 0 or self.max_hops < 0:
            raise ValueError("spread_steps and max_hops must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class CongestionEvent:
    node: int
    step: int
    severity: float
    duration: float


def timestamps_for(days: int, start: str = "2024-01-01T00:00") -> np.ndarray:
    t0 = np.datetime64(start, "ns")
    return t0 + np.arange(days * STEPS_PER_DAY) * STEP.astype("timedelta64[ns]")


def upstream_hops(graph: SensorGraph, source: int, max_hops: int) -> dict[int, int]:
    """Hop count from ``source`` to every node that feeds into it, up to ``max_hops``.

    Node i is one hop upstream of j when the graph has an edge i -> j.
    """
    adj = graph.adjacency.tocsc()
    hops = {source: 0}
    frontier = [source]
    for h in range(1, max_hops + 1):
        nxt = []
        for j in frontier:
            for i in adj.indices[adj.indptr[j]:adj.indptr[j + 1]]:
                i = int(i)
                if i not in hops:
                    hops[i] = h
                    nxt.append(i)
        frontier = nxt
    return hops


def event_dips(graph: SensorGraph, events: Sequence[CongestionEvent], n_steps: int, cfg: SynthConfig) -> np.ndarray:
    """Speed reduction [T, N] caused by ``events``.

    The dip at the source is ``severity * exp(-s / duration)`` for ``s`` steps
    after onset; a node ``h`` hops upstream sees it ``h * spread_steps`` later,
    scaled by ``propagation_decay ** h``.
    """
    dips = np.zeros((n_steps, graph.n_nodes))
    cache: dict[int, dict[int, int]] = {}
    for ev in events:
        if ev.node not in cache:
            cache[ev.node] = upstream_hops(graph, ev.node, cfg.max_hops)
        length = int(np.ceil(6 * ev.duration))
        shape = ev.severity * np.exp(-np.arange(length) / ev.duration)
        for node, h in cache[ev.node].items():
            scale = cfg.propagation_decay ** h
            if scale == 0:
                continue
            t0 = ev.step + h * cfg.spread_steps
            if t0 >= n_steps:
                continue
            stop = min(n_steps, t0 + length)
            dips[t0:stop, node] += scale * shape[: stop - t0]
    return dips


def sample_events(n_nodes: int, n_steps: int, cfg: SynthConfig, rng: np.random.Generator) -> list[CongestionEvent]:
    days = n_steps / STEPS_PER_DAY
    counts = rng.poisson(cfg.event_rate * days, size=n_nodes)
    events = []
    for node, c in enumerate(counts):
        steps = np.sort(rng.integers(0, n_steps, size=c))
        sev = rng.gamma(cfg.severity_shape, cfg.severity_mean / cfg.severity_shape, size=c)
        dur = cfg.event_duration * rng.uniform(0.5, 1.5, size=c)
        events += [CongestionEvent(node, int(s), float(v), float(d)) for s, v, d in zip(steps, sev, dur)]
    return events


def diurnal_profile(timestamps: np.ndarray, free_flow: np.ndarray, amp_m: np.ndarray, amp_e: np.ndarray,
                    shift_h: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    ts = timestamps.astype("datetime64[m]")
    hours = (ts - ts.astype("datetime64[D]")).astype(np.int64)[:, None] / 60.0
    weekday = (ts.astype("datetime64[D]").astype(np.int64) + 3) % 7
    day_factor = np.where(weekday >= 5, cfg.weekend_factor, 1.0)[:, None]
    h = hours - shift_h[None, :]
    morning = amp_m * np.exp(-0.5 * ((h - cfg.morning_peak_hour) / 1.0) ** 2)
    evening = amp_e * np.exp(-0.5 * ((h - cfg.evening_peak_hour) / 1.25) ** 2)
    return free_flow[None, :] - day_factor * (morning + evening)


def generate(graph: SensorGraph, days: int, cfg: SynthConfig = SynthConfig(),
             events: Sequence[CongestionEvent] | None = None) -> TimeSeriesFrame:
    """Speed frame over ``days`` days for every node of ``graph``; deterministic per ``cfg.seed``.

    Passing ``events`` replaces the sampled Poisson events.
    """
    if days < 1:
        raise ValueError(f"days must be at least 1, got {days}")
    n = graph.n_nodes
    if n == 0:
        raise ValueError("graph has no nodes")
    rng = np.random.default_rng(cfg.seed)
    ts = timestamps_for(days, cfg.start)
    T = len(ts)
    free_flow = cfg.free_flow_speed + cfg.free_flow_spread * rng.standard_normal(n)
    amp_m = cfg.morning_amplitude * (1 + cfg.amplitude_spread * rng.uniform(-1, 1, n))
    amp_e = cfg.evening_amplitude * (1 + cfg.amplitude_spread * rng.uniform(-1, 1, n))
    shift_h = cfg.rush_jitter_minutes / 60.0 * rng.standard_normal(n)
    speed = diurnal_profile(ts, free_flow, amp_m, amp_e, shift_h, cfg)

    if events is None:
        events = sample_events(n, T, cfg, rng)
    speed -= event_dips(graph, events, T, cfg)

    if cfg.drift_std > 0:
        phi = np.exp(-1.0 / cfg.drift_time_constant)
        shocks = rng.standard_normal((T, n)) * cfg.drift_std * np.sqrt(1 - phi * phi)
        shocks[0] = rng.standard_normal(n) * cfg.drift_std
        speed += lfilter([1.0], [1.0, -phi], shocks, axis=0)
    if cfg.noise_std > 0:
        speed += cfg.noise_std * rng.standard_normal((T, n))
    np.clip(speed, 0.0, 1.1 * cfg.free_flow_speed, out=speed)
    return TimeSeriesFrame.from_speed(speed, ts, graph.node_ids)


def inject_missing(frame: TimeSeriesFrame, fraction: float, seed: int = 0) -> TimeSeriesFrame:
    """Mark each speed cell missing independently with probability ``fraction``."""
    if not 0 <= fraction < 1:
        raise ValueError(f"fraction must lie in [0, 1), got {fraction}")
    if fraction == 0:
        return frame
    rng = np.random.default_rng(seed)
    drop = rng.random(frame.speed.shape) < fraction
    speed = np.where(drop, np.nan, frame.speed)
    out = frame.with_speed(speed)
    return replace(out, missing_mask=frame.missing_mask | drop)


# -- corridor graphs ----------------------------------------------------------


def corridor(region: int, n_nodes: int = 48, rng: np.random.Generator | None = None,
             interchange_every: int = 6):
    """A two-way highway segment: returns (node ids, coords, distance triples in meters).

    Half the sensors sit on the northbound carriageway and half on the
    southbound one; sensors link to the next two downstream sensors, and the
    carriageways meet at interchanges.
    """
    if n_nodes < 4 or n_nodes % 2:
        raise ValueError("corridor needs an even number of at least 4 sensors")
    rng = rng or np.random.default_rng(region)
    half = n_nodes // 2
    gaps = rng.uniform(600.0, 1200.0, size=half - 1)
    pos = np.concatenate([[0.0], np.cumsum(gaps)])
    north = [f"r{region}-n{i:02d}" for i in range(half)]
    south = [f"r{region}-s{i:02d}" for i in range(half)]
    x0 = region * 100_000.0
    coords = np.array([(x0, p) for p in pos] + [(x0 + 30.0, p) for p in pos])
    dist = []
    for i in range(half):
        for step in (1, 2):
            if i + step < half:
                d = pos[i + step] - pos[i]
                dist.append((north[i], north[i + step], d))
                dist.append((south[i + step], south[i], d))
        if i % interchange_every == interchange_every // 2:
            dist.append((north[i], south[i], 400.0))
            dist.append((south[i], north[i], 400.0))
    return north + south, coords, dist


def regional_configs(base: SynthConfig, n_regions: int, seed: int) -> list[SynthConfig]:
    """Per-region variations of ``base``: same dynamics family, different local regime."""
    rng = np.random.default_rng(seed)
    out = []
    for r in range(n_regions):
        out.append(replace(
            base,
            event_rate=base.event_rate * float(rng.uniform(0.6, 1.6)),
            severity_mean=base.severity_mean * float(rng.uniform(0.8, 1.25)),
            morning_peak_hour=base.morning_peak_hour + float(rng.uniform(-0.75, 0.75)),
            evening_peak_hour=base.evening_peak_hour + float(rng.uniform(-0.75, 0.75)),
            free_flow_speed=base.free_flow_speed + float(rng.uniform(-5, 5)),
            spread_steps=int(rng.integers(1, 3)),
            seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return out


@dataclass(frozen=True)
class Corpus:
    graph: SensorGraph
    distances: list
    frame: TimeSeriesFrame
    region_of: dict
    configs: list


def make_corpus(n_regions: int = 6, nodes_per_region: int = 48, days: int = 28,
                base: SynthConfig = SynthConfig(), seed: int = 0, sigma: float = 1500.0) -> Corpus:
    """Disconnected corridor regions, each generated under its own regime."""
    rng = np.random.default_rng(seed)
    ids, coords, dist, region_of = [], [], [], {}
    for r in range(n_regions):
        rid, rc, rd = corridor(r, nodes_per_region, np.random.default_rng(rng.integers(0, 2**31 - 1)))
        ids += rid
        coords.append(rc)
        dist += rd
        region_of.update({i: r for i in rid})
    graph = build_adjacency(dist, ids, KernelConfig(sigma=sigma, tau=0.1), np.vstack(coords))
    cfgs = regional_configs(base, n_regions, seed + 1)
    speed = np.empty((days * STEPS_PER_DAY, len(ids)))
    ts = None
    for r, cfg in enumerate(cfgs):
        cols = [i for i, nid in enumerate(ids) if region_of[nid] == r]
        sub = graph.subgraph([ids[i] for i in cols])
        fr = generate(sub, days, cfg)
        speed[:, cols] = fr.speed
        ts = fr.timestamps
    frame = TimeSeriesFrame.from_speed(speed, ts, ids)
    return Corpus(graph, dist, frame, region_of, cfgs)
