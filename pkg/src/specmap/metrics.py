"""Physics-aware scoring: MSE, KMSE/RKMSE and the knowledge losses.

Knowledge terms compare power *differences* between a transmitter block and
the blocks of its correlation region.  For a block ``x`` inside region ``i``
the reference set is every transmitter whose region also contains ``x``
(just transmitter ``i`` on the exclusive part), so both the exclusive and the
overlapped sums reduce to one sparse linear operator applied to the map.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .radiomap import GridSpec, PropagationParams, SpectrumMap, Transmitter, path_loss_db


@dataclass
class CorrelationRegion:
    tx_index: int
    tx_cell: tuple[int, int, int]
    cells: np.ndarray          # (n, 3) block indices of B_i
    exclusive: np.ndarray      # (n,) bool, True where no other region overlaps
    dims: tuple[int, int, int]  # clipped box size (n_l, n_w, n_h)

    @property
    def exclusive_cells(self) -> np.ndarray:
        return self.cells[self.exclusive]

    @property
    def n_pairs(self) -> int:
        return len(self.cells) - 1


@dataclass
class EstimatedTransmitterSet:
    peaks: list = field(default_factory=list)  # [(cell, value_dbm)], descending value
    varphi: int = 2
    zeta: float = 3.0

    @property
    def cells(self) -> list[tuple[int, int, int]]:
        return [c for c, _ in self.peaks]

    def __len__(self):
        return len(self.peaks)


@dataclass(frozen=True)
class LossWeights:
    kappa: float = 0.5
    w_k: float = 0.5
    w_c: float = 1.0
    gamma: float = 0.25

    def __post_init__(self):
        if not (0.0 <= self.kappa < 1.0):
            raise ValidationError("kappa must lie in [0, 1)")
        if min(self.w_k, self.w_c, self.gamma) < 0:
            raise ValidationError("loss weights must be non-negative")


def _as_array(m) -> np.ndarray:
    return m.values_dbm if isinstance(m, SpectrumMap) else np.asarray(m, dtype=float)


def _tx_cells(txs) -> list[tuple[int, int, int]]:
    if isinstance(txs, EstimatedTransmitterSet):
        return txs.cells
    out = []
    for t in txs:
        out.append(t.cell if isinstance(t, Transmitter) else tuple(int(c) for c in t))
    return out


def mse(truth, recon) -> float:
    a, b = _as_array(truth), _as_array(recon)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def build_regions(txs, grid: GridSpec | tuple, radius: int) -> list[CorrelationRegion]:
    """Axis-aligned boxes of Chebyshev ``radius`` around each transmitter."""
    shape = grid.shape if isinstance(grid, GridSpec) else tuple(grid)
    cells = _tx_cells(txs)
    if not cells:
        return []
    boxes = []
    cover = np.zeros(shape, dtype=np.int32)
    for c in cells:
        lo = [max(0, c[k] - radius) for k in range(3)]
        hi = [min(shape[k], c[k] + radius + 1) for k in range(3)]
        boxes.append((lo, hi))
        cover[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += 1
    regions = []
    for i, (c, (lo, hi)) in enumerate(zip(cells, boxes)):
        grids = np.meshgrid(*[np.arange(lo[k], hi[k]) for k in range(3)], indexing="ij")
        box = np.stack([g.ravel() for g in grids], axis=-1)
        exclusive = cover[box[:, 0], box[:, 1], box[:, 2]] == 1
        dims = tuple(int(hi[k] - lo[k]) for k in range(3))
        regions.append(CorrelationRegion(i, tuple(c), box, exclusive, dims))
    return regions


@dataclass
class KnowledgeOperator:
    """Rows are (region, block) pairs; ``matrix @ map`` gives the decay Δ per pair."""
    matrix: sp.csr_matrix
    weights: np.ndarray     # 1 / pair count of the owning region
    pl_sum: np.ndarray      # Σ_j ρ_j PL(d_j) over the reference transmitters
    region: np.ndarray

    @property
    def n_terms(self) -> int:
        return self.matrix.shape[0]


def knowledge_operator(regions: Sequence[CorrelationRegion], shape,
                       params: PropagationParams | None = None,
                       grid: GridSpec | None = None) -> KnowledgeOperator:
    shape = tuple(shape)
    n_vox = int(np.prod(shape))
    tx_flat = [np.ravel_multi_index(r.tx_cell, shape) for r in regions]
    member = [set(np.ravel_multi_index(r.cells.T, shape).tolist()) for r in regions]
    centers = grid.centers().reshape(-1, 3) if grid is not None else None
    rows, cols, vals = [], [], []
    weights, pl_sum, owner = [], [], []
    term = 0
    for i, reg in enumerate(regions):
        if reg.n_pairs <= 0:
            continue
        w = 1.0 / reg.n_pairs
        flat = np.ravel_multi_index(reg.cells.T, shape)
        for x, excl in zip(flat.tolist(), reg.exclusive.tolist()):
            if x == tx_flat[i]:
                continue
            refs = [i] if excl else [j for j in range(len(regions)) if x in member[j]]
            for j in refs:
                rows.append(term)
                cols.append(tx_flat[j])
                vals.append(1.0)
            rows.append(term)
            cols.append(x)
            vals.append(-1.0)
            pl = 0.0
            if params is not None:
                for j in refs:
                    d = float(np.linalg.norm(centers[x] - centers[tx_flat[j]]))
                    pl += path_loss_db(d, params) if d > 0 else 0.0
            weights.append(w)
            pl_sum.append(pl)
            owner.append(i)
            term += 1
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(term, n_vox))
    matrix.sum_duplicates()
    return KnowledgeOperator(matrix, np.asarray(weights), np.asarray(pl_sum),
                             np.asarray(owner, dtype=int))


def decay_sign(op: KnowledgeOperator, truth) -> np.ndarray:
    return np.sign(op.matrix @ _as_array(truth).ravel())


def knowledge_loss_supervised(truth, recon, regions: Sequence[CorrelationRegion],
                              form: str = "direction") -> float:
    """Supervised knowledge loss over ground-truth correlation regions.

    ``form="direction"`` penalizes the squared part of the reconstructed decay
    that points against the true decay direction; ``form="magnitude"`` is the
    squared difference of the true and reconstructed decays.  Each region is
    normalized by its number of (transmitter, block) pairs.
    """
    a, b = _as_array(truth), _as_array(recon)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    if not regions:
        return 0.0
    op = knowledge_operator(regions, a.shape)
    if op.n_terms == 0:
        return 0.0
    true_decay = op.matrix @ a.ravel()
    rec_decay = op.matrix @ b.ravel()
    if form == "direction":
        wrong = np.maximum(-np.sign(true_decay) * rec_decay, 0.0)
        return float(np.sum(op.weights * wrong**2))
    if form == "magnitude":
        return float(np.sum(op.weights * (true_decay - rec_decay) ** 2))
    raise ValidationError(f"unknown knowledge loss form {form!r}")


def kmse(truth, recon, regions, form: str = "direction") -> float:
    return mse(truth, recon) + knowledge_loss_supervised(truth, recon, regions, form)


def rkmse(truth, recon, regions, form: str = "direction") -> float:
    return float(np.sqrt(kmse(truth, recon, regions, form)))


def data_loss(truth, recon, measured: np.ndarray, kappa: float) -> float:
    a, b = _as_array(truth), _as_array(recon)
    m = np.asarray(measured, dtype=bool)
    if a.shape != b.shape or m.shape != a.shape:
        raise ValidationError("truth, recon and mask shapes must agree")
    sq = (a - b) ** 2
    return float((sq[m].sum() + kappa * sq[~m].sum()) / a.size)


def estimate_transmitters(recon, varphi: int = 2, zeta: float = 3.0,
                          params: PropagationParams = PropagationParams(),
                          grid: GridSpec | None = None) -> EstimatedTransmitterSet:
    """Local peaks whose drop to every neighbor within ``varphi`` blocks follows PL.

    A block qualifies when it strictly exceeds each neighbor in the Chebyshev
    ball and each drop matches the shadow-free path loss within ``zeta`` dB.
    """
    if varphi < 1 or zeta <= 0:
        raise ValidationError("varphi must be >= 1 and zeta > 0")
    if isinstance(recon, SpectrumMap):
        grid = recon.grid
    v = _as_array(recon)
    if grid is None:
        raise ValidationError("a grid is needed to convert offsets to distances")
    shape = v.shape
    ok = np.ones(shape, dtype=bool)
    pad = np.pad(v, varphi, mode="constant", constant_values=-np.inf)
    bsize = grid.block_size
    rng = range(-varphi, varphi + 1)
    for dx in rng:
        for dy in rng:
            for dz in rng:
                if dx == dy == dz == 0:
                    continue
                nb = pad[varphi + dx:varphi + dx + shape[0],
                         varphi + dy:varphi + dy + shape[1],
                         varphi + dz:varphi + dz + shape[2]]
                inside = np.isfinite(nb)
                pl = path_loss_db(float(np.linalg.norm(np.array([dx, dy, dz]) * bsize)), params)
                drop = v - nb
                ok &= ~inside | ((drop > 0) & (np.abs(drop - pl) < zeta))
                if not ok.any():
                    return EstimatedTransmitterSet([], varphi, zeta)
    cells = np.argwhere(ok)
    peaks = sorted(((tuple(int(c) for c in cell), float(v[tuple(cell)])) for cell in cells),
                   key=lambda p: (-p[1], p[0]))
    return EstimatedTransmitterSet(peaks, varphi, zeta)


class OnlineLoss(NamedTuple):
    value: float
    status: str  # "ok" or "no_peaks"


def knowledge_loss_unsupervised(recon, est: EstimatedTransmitterSet,
                                regions: Sequence[CorrelationRegion],
                                params: PropagationParams,
                                grid: GridSpec | None = None) -> OnlineLoss:
    """Label-free knowledge loss around estimated transmitters."""
    if isinstance(recon, SpectrumMap):
        grid = recon.grid
    v = _as_array(recon)
    if len(est) == 0 or not regions:
        return OnlineLoss(0.0, "no_peaks")
    op = knowledge_operator(regions, v.shape, params, grid)
    if op.n_terms == 0:
        return OnlineLoss(0.0, "ok")
    resid = op.matrix @ v.ravel() - op.pl_sum
    return OnlineLoss(float(np.sum(op.weights * resid**2)), "ok")


@dataclass
class MetricReport:
    mse: float
    kmse: float
    rkmse: float
    knowledge_supervised: float
    knowledge_unsupervised: float
    n_estimated_tx: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


def score_map(truth, recon, transmitters, grid: GridSpec, params: PropagationParams,
              region_radius: int = 3, varphi: int = 2, zeta: float = 3.0,
              form: str = "direction") -> MetricReport:
    """Full report; supervised terms use the true transmitters."""
    regions = build_regions(transmitters, grid, region_radius)
    m = mse(truth, recon)
    ks = knowledge_loss_supervised(truth, recon, regions, form)
    est = estimate_transmitters(recon, varphi, zeta, params, grid)
    ku = knowledge_loss_unsupervised(recon, est, build_regions(est, grid, region_radius),
                                     params, grid).value
    return MetricReport(m, m + ks, float(np.sqrt(m + ks)), ks, ku, len(est))
