"""Engine configuration and the plain-text key/value config format.

Every field can be overridden from the CLI.  Config lines are
``key = value``; ``#`` starts a comment.  Device-specific keys use a
``device.`` prefix, e.g. ``npu.invocation_us_lo = 150``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .backends import DeviceProfile, default_profiles
from .buffers import TileSpec
from .costmodel import CostModel
from .errors import InputError
from .pipeline import staging_fits


@dataclass
class EngineConfig:
    tile_spec: TileSpec = field(default_factory=TileSpec)
    staging_capacity_bytes: int = 8 << 20  # on-chip staging budget
    invocation_cost_us: tuple[float, float] = (200.0, 700.0)
    window_size: int = 16
    device_profiles: list[DeviceProfile] = field(default_factory=default_profiles)
    seed: int = 0
    update_aging_us: float | None = None  # off: keeps hybrid priority strict
    rebuild_tombstone_ratio: float | None = 0.25
    kmeans_iterations: int = 20
    kmeans_tolerance: float = 1e-4
    assign_chunk_rows: int = 4096

    def __post_init__(self):
        if not staging_fits(self.tile_spec, self.staging_capacity_bytes):
            raise InputError(
                f"staging capacity {self.staging_capacity_bytes} cannot hold two "
                f"tile pairs of {self.tile_spec.pair_bytes()} bytes")
        if self.window_size < len(self.device_profiles):
            raise InputError(
                f"window size {self.window_size} < worker count "
                f"{len(self.device_profiles)}")
        lo, hi = self.invocation_cost_us
        if lo < 0 or hi < lo:
            raise InputError("invocation cost range must satisfy 0 <= lo <= hi")

    def fingerprint(self) -> str:
        text = repr((self.tile_spec, self.staging_capacity_bytes,
                     self.invocation_cost_us, self.window_size, self.seed,
                     self.update_aging_us, self.rebuild_tombstone_ratio,
                     self.kmeans_iterations, self.kmeans_tolerance,
                     [(p.name, p.cost) for p in self.device_profiles]))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
    return values


def _as_int(values, key, default):
    try:
        return int(values[key]) if key in values else default
    except ValueError:
        raise InputError(f"config key {key} must be an integer") from None


def _as_float(values, key, default):
    try:
        return float(values[key]) if key in values else default
    except ValueError:
        raise InputError(f"config key {key} must be a number") from None


def config_from_mapping(values: dict[str, str]) -> EngineConfig:
    base = EngineConfig()
    tile = TileSpec(_as_int(values, "tile_m", base.tile_spec.m_tile),
                    _as_int(values, "tile_n", base.tile_spec.n_tile),
                    _as_int(values, "tile_k", base.tile_spec.k_tile))
    lo = _as_float(values, "invocation_us_lo", base.invocation_cost_us[0])
    hi = _as_float(values, "invocation_us_hi", base.invocation_cost_us[1])
    aging = values.get("update_aging_us")
    ratio = values.get("rebuild_tombstone_ratio")

    profiles = []
    for prof in default_profiles():
        dev = prof.kind.value
        cost = prof.cost
        cost = CostModel(
            heatmap=cost.heatmap,
            stream_bandwidth=_as_float(values, f"{dev}.stream_bandwidth",
                                       cost.stream_bandwidth),
            dma_bandwidth=_as_float(values, f"{dev}.dma_bandwidth",
                                    cost.dma_bandwidth),
            invocation_us=(_as_float(values, f"{dev}.invocation_us_lo",
                                     cost.invocation_us[0]),
                           _as_float(values, f"{dev}.invocation_us_hi",
                                     cost.invocation_us[1])),
            smt_speedup=_as_float(values, f"{dev}.smt_speedup", cost.smt_speedup),
            memcpy_penalty=_as_float(values, f"{dev}.memcpy_penalty",
                                     cost.memcpy_penalty),
            conversion_bandwidth=_as_float(values, f"{dev}.conversion_bandwidth",
                                           cost.conversion_bandwidth))
        profiles.append(replace(prof, cost=cost))
    wanted = [d.strip() for d in values.get("devices", "cpu,gpu,npu").split(",") if d.strip()]
    profiles = [p for p in profiles if p.kind.value in wanted]
    if not profiles:
        raise InputError("config enables no devices")

    return EngineConfig(
        tile_spec=tile,
        staging_capacity_bytes=_as_int(values, "staging_capacity_bytes",
                                       base.staging_capacity_bytes),
        invocation_cost_us=(lo, hi),
        window_size=_as_int(values, "window_size", base.window_size),
        device_profiles=profiles,
        seed=_as_int(values, "seed", base.seed),
        update_aging_us=float(aging) if aging not in (None, "", "none") else None,
        rebuild_tombstone_ratio=(float(ratio) if ratio not in (None, "", "none")
                                 else base.rebuild_tombstone_ratio),
        kmeans_iterations=_as_int(values, "kmeans_iterations", base.kmeans_iterations),
        kmeans_tolerance=_as_float(values, "kmeans_tolerance", base.kmeans_tolerance),
        assign_chunk_rows=_as_int(values, "assign_chunk_rows", base.assign_chunk_rows))


def load_config(path=None, overrides: dict[str, str] | None = None) -> EngineConfig:
    values = parse_config_file(path) if path else {}
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_mapping(values)
