"""Simplified urban micro/macro cell channel generator.

Per-slot CSI grids come from a tapped-delay-line surrogate: 8 taps on a
uniform delay grid scaled to the cell type's RMS delay spread (100 ns
micro, 300 ns macro), an exponential power-delay profile normalized to
unit average power, and no line-of-sight component. Each tap gain
evolves in time as a deterministic, seedable sum of 32 sinusoids whose
Doppler shifts follow the classical isotropic-scattering (Jakes)
distribution, so the temporal autocorrelation converges to
J0(2 pi f_D dt). Transmit antennas form a half-wavelength uniform
linear array steered by a per-tap departure angle. These constants are
surrogates chosen to preserve the micro/macro contrast, not calibrated
ray-tracing values.

Grid generation is a pure function of (config, seed, slot index) and is
bit-for-bit reproducible.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np

from .numkit import ShapeError

__all__ = [
    "SPEED_OF_LIGHT",
    "SNR_SET",
    "SPEED_SET",
    "DELAY_SPREAD",
    "ScenarioConfig",
    "TapSet",
    "CsiGrid",
    "max_doppler",
    "make_taps",
    "tap_gains",
    "gen_slot",
    "add_awgn",
    "save_grid",
    "load_grid",
    "FormatError",
]

SPEED_OF_LIGHT = 299_792_458.0

# benchmark grids for SNR (dB) and user speed (m/s)
SNR_SET = (-30.0, -10.0, 0.0, 10.0, 30.0)
SPEED_SET = (0.0, 10.0, 20.0, 30.0)

# surrogate tapped-delay-line constants
DELAY_SPREAD = {"UMi": 100e-9, "UMa": 300e-9}
N_TAPS = 8
N_SINUSOIDS = 32
MAX_AOD_RAD = np.deg2rad(60.0)

# 30 kHz subcarrier spacing: 0.5 ms slots of 14 symbols
BASE_SPACING = 30e3
BASE_SLOT = 0.5e-3


class FormatError(ValueError):
    """A serialized container is malformed or truncated."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One train/test condition of the benchmark.

    ``snr_db`` is a level in dB, the string "all" (drawn per sample), or
    None for a noise-free observation. Each user has one receive
    antenna; ``n_tx`` transmit antennas form the array.
    """

    channel_type: str = "UMi"
    speed: float = 0.0
    snr_db: float | str | None = 30.0
    carrier_freq: float = 5e9
    subcarrier_spacing: float = BASE_SPACING
    n_subcarriers: int = 72
    n_symbols: int = 14
    n_tx: int = 1
    n_users: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.channel_type not in DELAY_SPREAD:
            raise ValueError(f"unknown channel type {self.channel_type!r}")

    @property
    def slot_duration(self):
        return BASE_SLOT * (BASE_SPACING / self.subcarrier_spacing)

    @property
    def symbol_duration(self):
        return self.slot_duration / self.n_symbols

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class TapSet:
    """Frozen tap process: delays/powers shared, fading state per (user, tap)."""

    delays: np.ndarray          # (taps,) seconds, ascending
    powers: np.ndarray          # (taps,), sums to 1
    doppler_freqs: np.ndarray   # (users, taps, sinusoids) Hz, f_D * cos(angle)
    phases: np.ndarray          # (users, taps, sinusoids) radians
    aod: np.ndarray             # (users, taps) radians
    max_doppler_hz: float

    @property
    def n_users(self):
        return self.doppler_freqs.shape[0]

    @property
    def n_taps(self):
        return self.delays.shape[0]

    def rms_delay_spread(self):
        mean = float(np.sum(self.powers * self.delays))
        return float(np.sqrt(np.sum(self.powers * (self.delays - mean) ** 2)))


@dataclass(frozen=True)
class CsiGrid:
    """Complex channel grid of one slot, shape (symbols, subcarriers, users, tx)."""

    h: np.ndarray
    slot_index: int
    time_origin: float = 0.0


def max_doppler(speed, carrier_freq):
    """Maximum Doppler shift v * f_c / c in Hz."""
    if speed < 0 or carrier_freq <= 0:
        raise ValueError("speed must be >= 0 and carrier frequency > 0")
    return speed * carrier_freq / SPEED_OF_LIGHT


def make_taps(cfg):
    """Draw the tap process for one scenario; deterministic per cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    spread = DELAY_SPREAD[cfg.channel_type]
    delays = np.arange(N_TAPS) * (0.5 * spread)
    powers = np.exp(-delays / spread)
    powers = powers / powers.sum()
    f_d = max_doppler(cfg.speed, cfg.carrier_freq)
    shape = (cfg.n_users, N_TAPS, N_SINUSOIDS)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=shape)
    aod = rng.uniform(-MAX_AOD_RAD, MAX_AOD_RAD, size=(cfg.n_users, N_TAPS))
    return TapSet(
        delays=delays,
        powers=powers,
        doppler_freqs=f_d * np.cos(angles),
        phases=phases,
        aod=aod,
        max_doppler_hz=f_d,
    )


def tap_gains(taps, times):
    """Complex tap gains at the given times, shape (users, taps, len(times)).

    Each gain is sqrt(p_l / M) * sum_m exp(j(2 pi f_m t + phi_m)); mean
    square is p_l and the time autocorrelation tends to
    p_l * J0(2 pi f_D dt) over the sinusoid ensemble.
    """
    times = np.asarray(times, dtype=np.float64)
    arg = (
        2.0 * np.pi * taps.doppler_freqs[..., None] * times
        + taps.phases[..., None]
    )
    g = np.exp(1j * arg).sum(axis=2) / np.sqrt(N_SINUSOIDS)
    return np.sqrt(taps.powers)[None, :, None] * g


def gen_slot(taps, cfg, slot_index, time_origin=0.0):
    """Generate the CSI grid of one slot.

    H[s, k, u, a] = sum_l g_{u,l}(t_s) steer(aod_{u,l}, a) exp(-2j pi f_k tau_l)
    with t_s the symbol times of the slot and f_k the subcarrier offsets.
    The tap process is continuous across slot and subframe boundaries.
    """
    if slot_index < 0:
        raise ValueError("slot index must be >= 0")
    times = (
        time_origin
        + slot_index * cfg.slot_duration
        + np.arange(cfg.n_symbols) * cfg.symbol_duration
    )
    gains = tap_gains(taps, times)                                      # (U, L, S)
    freqs = np.arange(cfg.n_subcarriers) * cfg.subcarrier_spacing
    delay_phase = np.exp(-2j * np.pi * np.outer(freqs, taps.delays))    # (K, L)
    ant = np.arange(cfg.n_tx)
    steer = np.exp(-1j * np.pi * np.sin(taps.aod)[..., None] * ant)     # (U, L, A)
    h = np.einsum("uls,kl,ula->skua", gains, delay_phase, steer, optimize=True)
    return CsiGrid(h=h, slot_index=slot_index, time_origin=time_origin)


def add_awgn(grid, snr_db, seed):
    """Add circularly-symmetric complex noise calibrated to the grid power.

    Per-entry noise variance is mean(|H|^2) / 10^(snr_db/10);
    ``snr_db`` of None or +inf returns the grid unchanged.
    """
    if snr_db is None or snr_db == np.inf:
        return grid
    rng = np.random.default_rng(seed)
    sig_power = float(np.mean(np.abs(grid.h) ** 2))
    var = sig_power / (10.0 ** (snr_db / 10.0))
    scale = np.sqrt(var / 2.0)
    noise = scale * (
        rng.standard_normal(grid.h.shape) + 1j * rng.standard_normal(grid.h.shape)
    )
    return CsiGrid(h=grid.h + noise, slot_index=grid.slot_index, time_origin=grid.time_origin)


_MAGIC = b"CSIG"
_VERSION = 1


def save_grid(grid, path, cfg=None):
    """Write a grid as the flat binary container plus a text sidecar.

    Layout: magic "CSIG", u32 version, 4 x u32 shape, then row-major
    little-endian float64 pairs (re, im). The sidecar ``<path>.meta``
    holds slot index, time origin and the full scenario config as
    ``key = value`` lines.
    """
    h = np.ascontiguousarray(grid.h, dtype=np.complex128)
    if h.ndim != 4:
        raise ShapeError(f"grid must be 4-d (symbols, subcarriers, users, tx), got {h.shape}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<4I", *h.shape))
        inter = np.empty(h.shape + (2,), dtype="<f8")
        inter[..., 0] = h.real
        inter[..., 1] = h.imag
        fh.write(inter.tobytes())
    meta = {"slot_index": grid.slot_index, "time_origin": grid.time_origin}
    if cfg is not None:
        meta.update(cfg.to_dict())
    with open(f"{path}.meta", "w", encoding="utf-8") as fh:
        for key, value in meta.items():
            fh.write(f"{key} = {value}\n")


def load_grid(path):
    """Read a grid container; returns (CsiGrid, sidecar dict or None)."""
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) < 8 or head[:4] != _MAGIC:
            raise FormatError(f"{path}: not a CSI grid container")
        (version,) = struct.unpack("<I", head[4:8])
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported container version {version}")
        raw_shape = fh.read(16)
        if len(raw_shape) < 16:
            raise FormatError(f"{path}: truncated header")
        shape = struct.unpack("<4I", raw_shape)
        count = int(np.prod(shape)) * 2
        payload = fh.read(count * 8)
        if len(payload) != count * 8:
            raise FormatError(f"{path}: truncated payload")
    flat = np.frombuffer(payload, dtype="<f8").reshape(shape + (2,))
    h = flat[..., 0] + 1j * flat[..., 1]
    meta = None
    slot_index, time_origin = 0, 0.0
    try:
        with open(f"{path}.meta", "r", encoding="utf-8") as fh:
            meta = {}
            for line in fh:
                if "=" in line:
                    key, _, value = line.partition("=")
                    meta[key.strip()] = value.strip()
        slot_index = int(meta.get("slot_index", 0))
        time_origin = float(meta.get("time_origin", 0.0))
    except OSError:
        pass
    return CsiGrid(h=h, slot_index=slot_index, time_origin=time_origin), meta
