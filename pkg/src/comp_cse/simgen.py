"""Synthetic drive-test generator for a two-BS joint-transmission downlink.

The UE alternates between single transmission (ST, primary BS only) on even
seconds and joint transmission (JT, primary + secondary BS sending the same
symbols) on odd seconds. Channels are flat Rayleigh with distance pathloss and
log-normal shadowing, precoded with per-BS zero-forcing. Every random draw is
taken from a generator keyed by ``(seed, purpose, second, stream)`` so any
second can be regenerated on its own.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import InvalidArgumentError, SingularChannelError

ST = "ST"
JT = "JT"

NUM_BEAMS_REPORTED = 8

# Purpose tags mixed into the seed sequence.
_TRACE, _CHANNEL, _FRAMES = 1, 2, 3

RSRP_P_COLUMNS = [f"rsrp_p_{i}" for i in range(1, NUM_BEAMS_REPORTED + 1)]
RSRP_S_COLUMNS = [f"rsrp_s_{i}" for i in range(1, NUM_BEAMS_REPORTED + 1)]
RSRP_COLUMNS = RSRP_P_COLUMNS + RSRP_S_COLUMNS
FRAME_COLUMNS = [
    "timestamp_ms",
    "primary_bs_id",
    "secondary_bs_id",
    "mode",
    "data_volume_bits",
    *RSRP_COLUMNS,
]


@dataclass(frozen=True)
class SystemConfig:
    """Radio and measurement parameters of the simulated CoMP link.

    Powers are linear watts. ``noise_power`` is the variance of the additive
    interference-plus-noise term and ``per_stream_power`` the power of each
    transmitted symbol.
    """

    num_tx_antennas: int = 8
    num_rx_antennas: int = 2
    num_streams: int = 2
    bandwidth_hz: float = 100e6
    noise_power: float = 5e-11
    per_stream_power: float = 0.01
    pathloss_exponent: float = 3.0
    shadowing_sigma_db: float = 4.0
    codebook_size: int = 16
    frames_per_second: int = 100
    corruption_fraction: float = 0.1
    rsrp_floor_dbm: float = -140.0
    seed: int = 0
    # trace geometry
    min_distance_m: float = 40.0
    max_distance_m: float = 300.0
    secondary_gap_min_m: float = 60.0
    secondary_gap_max_m: float = 300.0
    walk_step_m: float = 2.0
    handover_interval_s: int = 60
    num_bs: int = 8
    # measurement impairments
    impairment: float = 0.75
    volume_noise_sigma: float = 0.05
    rsrp_noise_db: float = 1.0

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise InvalidArgumentError(msg)

        need(self.num_streams >= 1, "num_streams must be >= 1")
        need(self.num_tx_antennas >= self.num_streams, "num_tx_antennas must be >= num_streams")
        need(self.num_rx_antennas >= self.num_streams, "num_rx_antennas must be >= num_streams")
        need(self.codebook_size >= NUM_BEAMS_REPORTED, "codebook_size must be >= 8")
        need(self.frames_per_second >= 1, "frames_per_second must be >= 1")
        need(self.bandwidth_hz > 0, "bandwidth_hz must be > 0")
        need(self.noise_power > 0, "noise_power must be > 0")
        need(self.per_stream_power > 0, "per_stream_power must be > 0")
        need(self.shadowing_sigma_db >= 0, "shadowing_sigma_db must be >= 0")
        need(0.0 <= self.corruption_fraction <= 1.0, "corruption_fraction must be in [0, 1]")
        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(0 < self.min_distance_m < self.max_distance_m, "need 0 < min_distance_m < max_distance_m")
        need(0 <= self.secondary_gap_min_m < self.secondary_gap_max_m,
             "need 0 <= secondary_gap_min_m < secondary_gap_max_m")
        need(0 <= self.walk_step_m <= 5.0, "walk_step_m must be in [0, 5]")
        # BS pairs must be constant over each ST/JT cycle
        need(self.handover_interval_s >= 2 and self.handover_interval_s % 2 == 0,
             "handover_interval_s must be an even number >= 2")
        need(self.num_bs >= 2, "num_bs must be >= 2")
        need(self.impairment > 0, "impairment must be > 0")
        need(self.volume_noise_sigma >= 0, "volume_noise_sigma must be >= 0")
        need(self.rsrp_noise_db >= 0, "rsrp_noise_db must be >= 0")

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TracePoint:
    second_index: int
    ue_distance_primary_m: float
    ue_distance_secondary_m: float
    primary_bs_id: int
    secondary_bs_id: int


@dataclass(frozen=True)
class ChannelRealization:
    h_primary: np.ndarray
    h_secondary: np.ndarray


@dataclass(frozen=True)
class Beamformer:
    v: np.ndarray
    owner: str = "primary"


@dataclass(frozen=True)
class RawFrame:
    """One per-frame measurement row, as written to the frame CSV."""

    timestamp_ms: int
    primary_bs_id: int
    secondary_bs_id: Optional[int]
    mode: str
    data_volume_bits: float
    rsrps_dbm: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in (ST, JT):
            raise InvalidArgumentError(f"unknown mode {self.mode!r}")
        if self.data_volume_bits < 0:
            raise InvalidArgumentError("data_volume_bits must be >= 0")
        if self.mode == ST:
            if self.secondary_bs_id is not None or self.rsrps_dbm is not None:
                raise InvalidArgumentError("ST frames carry no secondary BS and no RSRPs")
        else:
            if self.secondary_bs_id is None or self.rsrps_dbm is None:
                raise InvalidArgumentError("JT frames need a secondary BS and 16 RSRPs")
            if len(self.rsrps_dbm) != 2 * NUM_BEAMS_REPORTED:
                raise InvalidArgumentError("JT frames carry exactly 16 RSRPs")
            for group in (self.rsrps_dbm[:8], self.rsrps_dbm[8:]):
                if any(a < b for a, b in zip(group, group[1:])):
                    raise InvalidArgumentError("each RSRP group must be non-increasing")


def _rng(seed, purpose, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose, *map(int, keys)]))


def _reflect(x, lo, hi):
    if x > hi:
        x = 2 * hi - x
    if x < lo:
        x = 2 * lo - x
    return x


def gen_trace(config: SystemConfig, num_seconds: int) -> list[TracePoint]:
    """Random-walk UE trajectory with a serving BS pair per handover interval."""
    if num_seconds < 1:
        raise InvalidArgumentError("num_seconds must be >= 1")
    rng = _rng(config.seed, _TRACE)
    lo, hi = config.min_distance_m, config.max_distance_m
    glo, ghi = config.secondary_gap_min_m, config.secondary_gap_max_m
    step = config.walk_step_m

    d = rng.uniform(lo, hi)
    gap = rng.uniform(glo, ghi)
    d_steps = rng.uniform(-step, step, size=num_seconds)
    g_steps = rng.uniform(-step, step, size=num_seconds)
    n_epochs = (num_seconds - 1) // config.handover_interval_s + 1
    primaries = rng.integers(0, config.num_bs, size=n_epochs)
    offsets = rng.integers(1, config.num_bs, size=n_epochs)

    points = []
    for s in range(num_seconds):
        if s > 0:
            d_new = _reflect(d + d_steps[s], lo, hi)
            gap_new = _reflect(gap + g_steps[s], glo, ghi)
            # keep the secondary leg inside the step bound as well
            if abs((d_new + gap_new) - (d + gap)) > step:
                gap_new = gap
            d, gap = d_new, gap_new
        e = s // config.handover_interval_s
        p = int(primaries[e])
        q = int((p + offsets[e]) % config.num_bs)
        points.append(TracePoint(s, float(d), float(d + gap), p, q))
    return points


def draw_channel(config: SystemConfig, point: TracePoint, stream_id: int = 0) -> ChannelRealization:
    rng = _rng(config.seed, _CHANNEL, point.second_index, stream_id)
    shape = (config.num_rx_antennas, config.num_tx_antennas)
    links = []
    for distance in (point.ue_distance_primary_m, point.ue_distance_secondary_m):
        g = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
        shadow_db = config.shadowing_sigma_db * rng.standard_normal()
        gain = distance ** (-config.pathloss_exponent) * 10.0 ** (shadow_db / 10.0)
        links.append(np.sqrt(gain) * g)
    return ChannelRealization(links[0], links[1])


def zf_beamformer(h: np.ndarray, d: int, owner: str = "primary") -> Beamformer:
    """Zero-forcing precoder for the first ``d`` receive rows of ``h``."""
    h = np.asarray(h)
    if not 1 <= d <= min(h.shape):
        raise InvalidArgumentError(f"need 1 <= d <= min{h.shape}, got d={d}")
    rows = h[:d]
    sv = np.linalg.svd(rows, compute_uv=False)
    if sv[0] == 0 or sv[-1] < 1e-12 * sv[0]:
        raise SingularChannelError("channel row block is rank deficient")
    v = np.linalg.pinv(rows)
    v = v / np.linalg.norm(v, axis=0, keepdims=True)
    return Beamformer(v, owner)


def _phase_align(hp, vp, hs, vs, d):
    """Rotate the columns of ``vs`` so each stream adds coherently at the UE."""
    dp = np.einsum("ij,ji->i", hp[:d], vp)
    ds = np.einsum("ij,ji->i", hs[:d], vs)
    rot = np.ones(d, dtype=complex)
    ok = (np.abs(dp) > 0) & (np.abs(ds) > 0)
    rot[ok] = (dp[ok] / np.abs(dp[ok])) / (ds[ok] / np.abs(ds[ok]))
    return vs * rot


def achievable_rate(hp, vp, hs, vs, config: SystemConfig, mode: str) -> float:
    """Shannon rate log2 det(I + snr * E E^H) in bit/s/Hz."""
    if mode not in (ST, JT):
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    hp = np.asarray(hp)
    vp = np.asarray(vp)
    arrays = [hp, vp]
    if mode == JT:
        hs, vs = np.asarray(hs), np.asarray(vs)
        arrays += [hs, vs]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise InvalidArgumentError("non-finite channel or precoder entries")
    eff = hp @ vp
    if mode == JT:
        d = vp.shape[1]
        eff = eff + hs @ _phase_align(hp, vp, hs, vs, d)
    snr = config.per_stream_power / config.noise_power
    gram = np.eye(eff.shape[0]) + snr * (eff @ eff.conj().T)
    sign, logdet = np.linalg.slogdet(gram)
    return max(float(logdet / np.log(2.0)), 0.0)


def dft_codebook(num_tx: int, size: int) -> np.ndarray:
    """Oversampled DFT beams as unit-norm columns, shape ``(num_tx, size)``."""
    n = np.arange(num_tx)[:, None]
    k = np.arange(size)[None, :]
    return np.exp(2j * np.pi * n * k / size) / np.sqrt(num_tx)


def _to_dbm(power_w, floor_dbm):
    with np.errstate(divide="ignore"):
        dbm = 10.0 * np.log10(power_w) + 30.0
    return np.maximum(dbm, floor_dbm)


def beam_rsrps(h, config: SystemConfig, codebook=None) -> np.ndarray:
    """Eight strongest beam RSRPs in dBm, sorted descending."""
    h = np.asarray(h)
    if codebook is None:
        codebook = dft_codebook(h.shape[1], config.codebook_size)
    if codebook.shape[1] < NUM_BEAMS_REPORTED:
        raise InvalidArgumentError("codebook must hold at least 8 beams")
    power = config.per_stream_power * np.sum(np.abs(h @ codebook) ** 2, axis=0) / h.shape[0]
    dbm = _to_dbm(power, config.rsrp_floor_dbm)
    return np.sort(dbm)[::-1][:NUM_BEAMS_REPORTED]


def _second_frames(config: SystemConfig, point: TracePoint, anchor: TracePoint):
    """Rate-derived volumes and RSRPs for every frame of one second."""
    F = config.frames_per_second
    d = config.num_streams
    mode = ST if point.second_index % 2 == 0 else JT
    # block fading: both seconds of an ST/JT cycle see the same channel draw
    ch = draw_channel(config, anchor, 0)
    vp = zf_beamformer(ch.h_primary, d).v
    if mode == ST:
        rate = achievable_rate(ch.h_primary, vp, None, None, config, ST)
    else:
        vs = zf_beamformer(ch.h_secondary, d, "secondary").v
        rate = achievable_rate(ch.h_primary, vp, ch.h_secondary, vs, config, JT)

    rng = _rng(config.seed, _FRAMES, point.second_index)
    corrupted = rng.random() < config.corruption_fraction
    degradation = rng.uniform(0.2, 0.8)
    noise = np.exp(config.volume_noise_sigma * rng.standard_normal(F))
    volume = rate * config.bandwidth_hz / F * config.impairment * noise
    if mode == JT and corrupted:
        volume = volume * degradation

    rsrps = None
    if mode == JT:
        base = np.concatenate([beam_rsrps(ch.h_primary, config), beam_rsrps(ch.h_secondary, config)])
        jitter = config.rsrp_noise_db * rng.standard_normal((F, 2 * NUM_BEAMS_REPORTED))
        rsrps = np.maximum(base + jitter, config.rsrp_floor_dbm)
        rsrps[:, :8] = -np.sort(-rsrps[:, :8], axis=1)
        rsrps[:, 8:] = -np.sort(-rsrps[:, 8:], axis=1)
    return mode, volume, rsrps


def emit_frames(config: SystemConfig, trace: Sequence[TracePoint]) -> pd.DataFrame:
    """Per-frame measurement table for a trace; columns follow ``FRAME_COLUMNS``.

    Even seconds are ST, odd seconds JT. ST rows leave the secondary BS id and
    all RSRP columns missing.
    """
    if len(trace) == 0:
        raise InvalidArgumentError("trace is empty")
    F = config.frames_per_second
    by_second = {p.second_index: p for p in trace}
    n = len(trace) * F

    timestamps = np.empty(n, dtype=np.int64)
    primary = np.empty(n, dtype=np.int64)
    secondary = np.full(n, -1, dtype=np.int64)
    modes = np.empty(n, dtype=object)
    volume = np.empty(n)
    rsrp = np.full((n, 2 * NUM_BEAMS_REPORTED), np.nan)
    frame_offsets = (np.arange(F) * 1000) // F

    for i, point in enumerate(trace):
        s = point.second_index
        anchor = by_second.get(s - s % 2, point)
        mode, vol, rs = _second_frames(config, point, anchor)
        sl = slice(i * F, (i + 1) * F)
        timestamps[sl] = s * 1000 + frame_offsets
        primary[sl] = point.primary_bs_id
        modes[sl] = mode
        volume[sl] = vol
        if mode == JT:
            secondary[sl] = point.secondary_bs_id
            rsrp[sl] = rs

    frames = pd.DataFrame(
        {
            "timestamp_ms": timestamps,
            "primary_bs_id": primary,
            "secondary_bs_id": pd.array(np.where(secondary < 0, None, secondary), dtype="Int64"),
            "mode": modes.astype(str),
            "data_volume_bits": volume,
        }
    )
    rsrp_df = pd.DataFrame(rsrp, columns=RSRP_COLUMNS)
    return pd.concat([frames, rsrp_df], axis=1)


def iter_frame_chunks(config: SystemConfig, num_seconds: int, chunk_seconds: int = 2000) -> Iterable[pd.DataFrame]:
    """Frames for a fresh trace, yielded in whole-second blocks to bound memory."""
    trace = gen_trace(config, num_seconds)
    chunk_seconds += chunk_seconds % 2
    for start in range(0, num_seconds, chunk_seconds):
        yield emit_frames(config, trace[start:start + chunk_seconds])


def frames_to_records(frames: pd.DataFrame) -> list[RawFrame]:
    records = []
    for row in frames.itertuples(index=False):
        jt = row.mode == JT
        rsrps = tuple(float(x) for x in row[5:5 + 16]) if jt else None
        records.append(
            RawFrame(
                int(row.timestamp_ms),
                int(row.primary_bs_id),
                int(row.secondary_bs_id) if jt else None,
                row.mode,
                float(row.data_volume_bits),
                rsrps,
            )
        )
    return records


def frames_from_records(records: Iterable[RawFrame]) -> pd.DataFrame:
    rows = []
    for r in records:
        rs = list(r.rsrps_dbm) if r.rsrps_dbm is not None else [np.nan] * 16
        rows.append([r.timestamp_ms, r.primary_bs_id, r.secondary_bs_id, r.mode, float(r.data_volume_bits), *rs])
    frames = pd.DataFrame(rows, columns=FRAME_COLUMNS)
    frames["timestamp_ms"] = frames["timestamp_ms"].astype(np.int64)
    frames["primary_bs_id"] = frames["primary_bs_id"].astype(np.int64)
    frames["secondary_bs_id"] = frames["secondary_bs_id"].astype("Int64")
    frames[RSRP_COLUMNS] = frames[RSRP_COLUMNS].astype(float)
    return frames


def write_frames_csv(frames: pd.DataFrame, fh, header_lines=(), write_header=True):
    """Append frames to an open text handle using 9 significant digits."""
    for line in header_lines:
        fh.write(f"# {line}\n")
    frames.to_csv(fh, index=False, header=write_header, float_format="%.9g", lineterminator="\n")


def read_frames_csv(path_or_fh, chunksize=None):
    dtypes = {"timestamp_ms": np.int64, "primary_bs_id": np.int64, "secondary_bs_id": "Int64", "mode": str}
    return pd.read_csv(path_or_fh, comment="#", dtype=dtypes, chunksize=chunksize)
