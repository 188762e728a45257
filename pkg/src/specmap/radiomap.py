"""Ground-truth 3D spectrum maps from the log-distance propagation model.

Maps are dense ``(N_L, N_W, N_H)`` arrays of received power in dBm, one value
per block.  Superposition and the additive power noise are applied in watts,
then converted back to dBm.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError

SPEED_OF_LIGHT = 299_792_458.0
EMPTY_DBM = -200.0
POWER_FLOOR_W = 1e-15
DEFAULT_POWER_POOL_DBM = (26.0, 28.0, 30.0, 30.0, 28.0, 26.0)


@dataclass(frozen=True)
class GridSpec:
    extent_m: tuple[float, float, float] = (160.0, 160.0, 120.0)
    blocks: tuple[int, int, int] = (16, 16, 8)

    def __post_init__(self):
        ext = tuple(float(v) for v in self.extent_m)
        blk = tuple(int(v) for v in self.blocks)
        if len(ext) != 3 or len(blk) != 3:
            raise ValidationError("grid needs three extents and three block counts")
        if min(ext) <= 0:
            raise ValidationError(f"extents must be positive, got {ext}")
        if min(blk) < 1:
            raise ValidationError(f"block counts must be >= 1, got {blk}")
        object.__setattr__(self, "extent_m", ext)
        object.__setattr__(self, "blocks", blk)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.blocks

    @property
    def n_blocks(self) -> int:
        return int(np.prod(self.blocks))

    @property
    def block_size(self) -> np.ndarray:
        return np.asarray(self.extent_m) / np.asarray(self.blocks)

    def center(self, cell: Sequence[int]) -> np.ndarray:
        return (np.asarray(cell, dtype=float) + 0.5) * self.block_size

    def centers(self) -> np.ndarray:
        """Block centers, shape ``(N_L, N_W, N_H, 3)`` in meters."""
        axes = [(np.arange(n) + 0.5) * s for n, s in zip(self.blocks, self.block_size)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def contains(self, cell: Sequence[int]) -> bool:
        return all(0 <= int(c) < n for c, n in zip(cell, self.blocks))

    def to_dict(self) -> dict:
        return {"extent_m": list(self.extent_m), "blocks": list(self.blocks)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["extent_m"]), tuple(d["blocks"]))


DESK_GRID = GridSpec((160.0, 160.0, 120.0), (16, 16, 8))
FULL_GRID = GridSpec((160.0, 160.0, 120.0), (64, 64, 24))


@dataclass(frozen=True)
class Transmitter:
    cell: tuple[int, int, int]
    power_dbm: float

    def __post_init__(self):
        object.__setattr__(self, "cell", tuple(int(c) for c in self.cell))
        object.__setattr__(self, "power_dbm", float(self.power_dbm))


TransmitterSet = Sequence[Transmitter]


@dataclass(frozen=True)
class PropagationParams:
    freq_hz: float = 75e6
    antenna_gain: float = 1.0
    shadow_sigma_db: float = 0.0
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.freq_hz <= 0:
            raise ValidationError("freq_hz must be positive")
        if self.antenna_gain <= 0:
            raise ValidationError("antenna_gain must be positive")
        if self.shadow_sigma_db < 0 or self.noise_sigma < 0:
            raise ValidationError("noise and shadowing deviations must be >= 0")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.freq_hz

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SpectrumMap:
    grid: GridSpec
    values_dbm: np.ndarray

    def __post_init__(self):
        self.values_dbm = np.asarray(self.values_dbm)
        if self.values_dbm.shape != self.grid.shape:
            raise ValidationError(
                f"map shape {self.values_dbm.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values_dbm)):
            raise ValidationError("map contains non-finite values")


@dataclass
class SampleMask:
    grid: GridSpec
    measured: np.ndarray
    sampling_ratio: float
    mode: str = "trajectory"
    # (start cell, axis, length) of every flight leg, trajectory mode only
    segments: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return int(self.measured.sum())


def dbm_to_watt(p_dbm):
    return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(p_w):
    return 10.0 * np.log10(np.asarray(p_w, dtype=float)) + 30.0


def path_loss_db(d_m, params: PropagationParams, shadow_sample=0.0):
    """Log-distance path loss in dB, ``-10 log10(G_t λ² / (4π d)²) + G_θ``."""
    d = np.asarray(d_m, dtype=float)
    if np.any(d <= 0):
        raise ValidationError("path loss is undefined for distances <= 0")
    lam = params.wavelength
    pl = -10.0 * np.log10(params.antenna_gain * lam**2 / (4.0 * math.pi * d) ** 2)
    pl = pl + shadow_sample
    return float(pl) if pl.ndim == 0 else pl


def _check_transmitters(grid: GridSpec, txs: TransmitterSet):
    if len(txs) < 1:
        raise ValidationError("at least one transmitter is required")
    cells = [tx.cell for tx in txs]
    for c in cells:
        if not grid.contains(c):
            raise ValidationError(f"transmitter cell {c} outside grid {grid.shape}")
    if len(set(cells)) != len(cells):
        raise ValidationError(f"duplicate transmitter cells: {cells}")


def propagation_gains(grid: GridSpec, tx: Transmitter, params: PropagationParams,
                      shadow=None) -> np.ndarray:
    """Linear gain φ from one transmitter to every block; 1 at its own block."""
    d = np.linalg.norm(grid.centers() - grid.center(tx.cell), axis=-1)
    own = d == 0
    d_safe = np.where(own, 1.0, d)
    pl = path_loss_db(d_safe, params, 0.0 if shadow is None else shadow)
    phi = 10.0 ** (-pl / 10.0)
    phi[own] = 1.0
    return phi


def synthesize_map(grid: GridSpec, txs: TransmitterSet,
                   params: PropagationParams) -> SpectrumMap:
    _check_transmitters(grid, txs)
    rng = np.random.default_rng(params.rng_seed)
    total = np.zeros(grid.shape)
    for tx in txs:
        shadow = None
        if params.shadow_sigma_db > 0:
            shadow = rng.normal(0.0, params.shadow_sigma_db, size=grid.shape)
        total += propagation_gains(grid, tx, params, shadow) * dbm_to_watt(tx.power_dbm)
    if params.noise_sigma > 0:
        total = total + rng.normal(0.0, params.noise_sigma, size=grid.shape)
    total = np.maximum(total, POWER_FLOOR_W)
    return SpectrumMap(grid, watt_to_dbm(total))


def _trajectory_mask(grid: GridSpec, target: int, rng: np.random.Generator):
    measured = np.zeros(grid.shape, dtype=bool)
    segments = []
    count = 0
    while count < target:
        axis = int(rng.integers(0, 2))  # horizontal legs only: along x or y
        n_axis = grid.shape[axis]
        length = int(rng.integers(max(1, n_axis // 2), n_axis + 1))
        start = [int(rng.integers(0, n)) for n in grid.shape]
        start[axis] = int(rng.integers(0, n_axis - length + 1))
        used = 0
        for k in range(length):
            cell = list(start)
            cell[axis] += k
            cell = tuple(cell)
            used = k + 1
            if not measured[cell]:
                measured[cell] = True
                count += 1
                if count == target:
                    break
        segments.append((tuple(start), axis, used))
    return measured, segments


def generate_mask(grid: GridSpec, tau: float, mode: str = "trajectory",
                  rng_seed: int = 0) -> SampleMask:
    """UAV sampling mask with ``round(tau * N_B)`` measured blocks."""
    if not (0.0 < tau <= 1.0):
        raise ValidationError(f"sampling ratio must be in (0, 1], got {tau}")
    rng = np.random.default_rng(rng_seed)
    target = max(1, int(round(tau * grid.n_blocks)))
    if mode == "trajectory":
        measured, segments = _trajectory_mask(grid, target, rng)
    elif mode == "uniform":
        flat = np.zeros(grid.n_blocks, dtype=bool)
        flat[rng.choice(grid.n_blocks, size=target, replace=False)] = True
        measured, segments = flat.reshape(grid.shape), []
    else:
        raise ValidationError(f"unknown mask mode {mode!r}")
    return SampleMask(grid, measured, float(tau), mode, segments)


def apply_mask(smap: SpectrumMap, mask: SampleMask) -> SpectrumMap:
    if mask.measured.shape != smap.values_dbm.shape:
        raise ValidationError(
            f"mask shape {mask.measured.shape} != map shape {smap.values_dbm.shape}")
    return SpectrumMap(smap.grid, np.where(mask.measured, smap.values_dbm, EMPTY_DBM))


# ---------------------------------------------------------------------------
# datasets on disk: <id>.json sidecar + <id>.f32 (full map, then masked map)
# ---------------------------------------------------------------------------

@dataclass
class Record:
    record_id: str
    grid: GridSpec
    params: PropagationParams
    transmitters: list[Transmitter]
    tau: float
    seed: int
    values_dbm: np.ndarray
    masked_dbm: np.ndarray

    @property
    def measured(self) -> np.ndarray:
        return self.masked_dbm != EMPTY_DBM

    @property
    def spectrum_map(self) -> SpectrumMap:
        return SpectrumMap(self.grid, self.values_dbm)


def random_transmitters(grid: GridSpec, n_tx: int, rng: np.random.Generator,
                        power_pool_dbm=DEFAULT_POWER_POOL_DBM,
                        ground_layers: int = 1) -> list[Transmitter]:
    nl, nw, nh = grid.shape
    band = min(ground_layers, nh)
    flat = rng.choice(nl * nw * band, size=n_tx, replace=False)
    cells = np.stack(np.unravel_index(flat, (nl, nw, band)), axis=-1)
    powers = rng.choice(np.asarray(power_pool_dbm, dtype=float), size=n_tx)
    return [Transmitter(tuple(c), p) for c, p in zip(cells, powers)]


def make_record(index: int, grid: GridSpec, tx_count_range=(1, 3),
                power_pool_dbm=DEFAULT_POWER_POOL_DBM,
                params: PropagationParams = PropagationParams(), tau: float = 0.15,
                rng_seed: int = 0, mode: str = "trajectory",
                ground_layers: int = 1) -> Record:
    rng = np.random.default_rng([rng_seed, index])
    lo, hi = tx_count_range
    n_tx = int(rng.integers(lo, hi + 1))
    txs = random_transmitters(grid, n_tx, rng, power_pool_dbm, ground_layers)
    sub_seeds = rng.integers(0, 2**31 - 1, size=2)
    rec_params = PropagationParams(params.freq_hz, params.antenna_gain,
                                   params.shadow_sigma_db, params.noise_sigma,
                                   int(sub_seeds[0]))
    smap = synthesize_map(grid, txs, rec_params)
    mask = generate_mask(grid, tau, mode, int(sub_seeds[1]))
    masked = apply_mask(smap, mask)
    return Record(f"map_{index:05d}", grid, rec_params, txs, tau, rng_seed,
                  smap.values_dbm.astype(np.float32), masked.values_dbm.astype(np.float32))


def save_record(directory, rec: Record, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "id": rec.record_id,
        "grid": rec.grid.to_dict(),
        "params": rec.params.to_dict(),
        "transmitters": [{"cell": list(t.cell), "power_dbm": t.power_dbm}
                         for t in rec.transmitters],
        "tau": rec.tau,
        "seed": rec.seed,
        "empty_dbm": EMPTY_DBM,
        "dtype": "<f4",
        "order": "x-major, then y, then z",
        "arrays": ["map", "masked"],
    }
    if extra:
        meta.update(extra)
    json_path = directory / f"{rec.record_id}.json"
    blob_path = directory / f"{rec.record_id}.f32"
    try:
        json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        blob = np.concatenate([rec.values_dbm.ravel(), rec.masked_dbm.ravel()])
        blob.astype("<f4").tofile(blob_path)
    except OSError as exc:
        raise OSError(f"failed writing record {rec.record_id} to {directory}: {exc}") from exc
    return json_path


def load_record(json_path) -> Record:
    json_path = Path(json_path)
    try:
        meta = json.loads(json_path.read_text())
        blob = np.fromfile(json_path.with_suffix(".f32"), dtype="<f4")
    except OSError as exc:
        raise OSError(f"failed reading record {json_path}: {exc}") from exc
    grid = GridSpec.from_dict(meta["grid"])
    n = grid.n_blocks
    if blob.size != 2 * n:
        raise ValidationError(f"{json_path}: expected {2 * n} floats, found {blob.size}")
    if float(meta.get("empty_dbm", EMPTY_DBM)) != EMPTY_DBM:
        raise ValidationError(f"{json_path}: unsupported EMPTY sentinel {meta['empty_dbm']}")
    return Record(
        meta["id"], grid, PropagationParams(**meta["params"]),
        [Transmitter(tuple(t["cell"]), t["power_dbm"]) for t in meta["transmitters"]],
        float(meta["tau"]), int(meta["seed"]),
        blob[:n].reshape(grid.shape), blob[n:].reshape(grid.shape))


def sample_dataset(out_dir, count: int, grid: GridSpec = DESK_GRID, tx_count_range=(1, 3),
                   power_pool_dbm=DEFAULT_POWER_POOL_DBM,
                   params: PropagationParams = PropagationParams(), tau: float = 0.15,
                   rng_seed: int = 0, mode: str = "trajectory",
                   ground_layers: int = 1, start: int = 0) -> list[Path]:
    """Write ``count`` records to ``out_dir``; record i depends only on (seed, i)."""
    if count < 1 or start < 0:
        raise ValidationError("count must be >= 1 and start >= 0")
    paths = []
    for i in range(start, start + count):
        rec = make_record(i, grid, tx_count_range, power_pool_dbm, params, tau,
                          rng_seed, mode, ground_layers)
        paths.append(save_record(out_dir, rec))
    return paths


def list_records(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    return sorted(directory.glob("*.json"))


def load_dataset(directory) -> list[Record]:
    return [load_record(p) for p in list_records(directory)]


def records_in_memory(count: int, start: int = 0, grid: GridSpec = DESK_GRID,
                      **kwargs) -> list[Record]:
    """Same records ``sample_dataset`` would write, kept in memory."""
    return [make_record(start + i, grid, **kwargs) for i in range(count)]
