"""Two-stage training: offline codec training, predictor distillation, online tuning."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .channel import ChannelConfig, transmit_indices
from .codec import Codec, CodecConfig, Predictor, nearest_codes, soft_semantics
from .errors import NumericalError, ValidationError
from .metrics import (build_regions, estimate_transmitters, knowledge_operator,
                      score_map)
from .radiomap import EMPTY_DBM, GridSpec, PropagationParams, Record

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    kappa: float = 0.5
    w_k: float = 0.5
    w_c: float = 1.0
    gamma: float = 0.25
    snr_db: float | list = 12.0
    seed: int = 0
    online_steps: int = 50
    online_lr: float = 1e-4
    region_radius: int = 3
    knowledge_form: str = "direction"
    varphi: int = 2
    zeta: float = 3.0
    online_skip_below: float = 1e-12
    codebook_init: str = "data"     # "data": seed codebooks from encoder features; "random": keep init

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.online_lr < 0:
            raise ValidationError("learning rates must be >= 0")
        if not (0.0 <= self.kappa < 1.0):
            raise ValidationError("kappa must lie in [0, 1)")
        if self.codebook_init not in ("data", "random"):
            raise ValidationError(f"unknown codebook_init {self.codebook_init!r}")

    def snr_for_epoch(self, epoch: int) -> float:
        if isinstance(self.snr_db, (list, tuple)):
            return float(self.snr_db[epoch % len(self.snr_db)])
        return float(self.snr_db)


# ------------------------------------------------------------------- data

@dataclass
class MapSet:
    """Stacked arrays for a list of records."""
    grid: GridSpec
    params: PropagationParams
    values: np.ndarray      # (n, NL, NW, NH) dBm
    masked: np.ndarray      # (n, NL, NW, NH) with EMPTY sentinel
    transmitters: list
    ids: list

    @classmethod
    def from_records(cls, records: Sequence[Record]) -> "MapSet":
        if not records:
            raise ValidationError("empty dataset")
        return cls(records[0].grid, records[0].params,
                   np.stack([r.values_dbm for r in records]).astype(float),
                   np.stack([r.masked_dbm for r in records]).astype(float),
                   [list(r.transmitters) for r in records], [r.record_id for r in records])

    def __len__(self):
        return len(self.values)

    @property
    def measured(self) -> np.ndarray:
        return self.masked != EMPTY_DBM


class KnowledgeCache:
    """Supervised knowledge operators per map, keyed by map id."""

    def __init__(self, maps: MapSet, radius: int):
        self.maps = maps
        self.radius = radius
        self._ops = {}

    def get(self, i: int):
        if i not in self._ops:
            regions = build_regions(self.maps.transmitters[i], self.maps.grid, self.radius)
            op = knowledge_operator(regions, self.maps.grid.shape)
            sign = np.sign(op.matrix @ self.maps.values[i].ravel())
            self._ops[i] = (op, sign)
        return self._ops[i]


def knowledge_term(recon: ad.Tensor, truth: np.ndarray, ops: list, form: str) -> ad.Tensor:
    """Supervised knowledge loss averaged over the batch, as a graph node."""
    B = truth.shape[0]
    mats = [op.matrix for op, _ in ops]
    A = sp.block_diag(mats, format="csr")
    w = np.concatenate([op.weights for op, _ in ops])
    if A.shape[0] == 0:
        return ad.constant(0.0)
    flat = ad.reshape(recon, (recon.size,))
    rec_decay = ad.sparse_apply(A, flat)
    sw = ad.constant(np.sqrt(w / B))
    if form == "direction":
        s = np.concatenate([sign for _, sign in ops])
        wrong = ad.relu(ad.mul(rec_decay, ad.constant(-s)))
        z = ad.mul(wrong, sw)
    elif form == "magnitude":
        true_decay = A @ truth.ravel()
        z = ad.mul(ad.sub(ad.constant(true_decay), rec_decay), sw)
    else:
        raise ValidationError(f"unknown knowledge loss form {form!r}")
    return ad.sum_all(ad.mul(z, z))


def data_term(recon: ad.Tensor, truth: np.ndarray, measured: np.ndarray,
              kappa: float) -> ad.Tensor:
    w = np.where(measured, 1.0, kappa)
    diff = ad.sub(recon, ad.constant(truth))
    return ad.mean_sq(ad.mul(diff, ad.constant(np.sqrt(w))))


# ---------------------------------------------------------------- stage 1

@dataclass
class Stage1Step:
    loss: ad.Tensor
    parts: dict
    frozen: dict
    recon: ad.Tensor


def stage1_loss(codec: Codec, maps: MapSet, batch: np.ndarray, cfg: TrainConfig,
                channel: ChannelConfig | None, cache: KnowledgeCache,
                frozen: dict | None = None) -> Stage1Step:
    """Offline loss L_D + w_K L_K + w_C L_C for one batch.

    ``frozen`` pins every non-differentiable choice (indices, channel output,
    stop-gradient values) to those of an earlier call, turning the loss into a
    smooth function whose gradient is exactly what backward computes.
    """
    values = maps.values[batch]
    measured = maps.measured[batch]
    B = len(batch)
    feats = codec.encode(values)
    fz = frozen or {}
    new = {"indices": [], "received": [], "offset": [], "sg_feats": [], "sg_vec": []}
    comm = None
    dec_in = []
    qdist = []
    for r, f in enumerate(feats, start=1):
        cb = codec.codebook(r)
        idx = fz["indices"][r - 1] if frozen else nearest_codes(f.data, cb.data)
        sel = ad.gather_rows(cb, idx)
        sg_f = fz["sg_feats"][r - 1] if frozen else f.data.copy()
        sg_v = fz["sg_vec"][r - 1] if frozen else sel.data.copy()
        C = f.shape[1]
        cb_term = ad.scale(ad.mean_sq(ad.sub(ad.constant(sg_f), sel)), C)
        cm_term = ad.scale(ad.mean_sq(ad.sub(f, ad.constant(sg_v))), C)
        term = ad.add(cb_term, ad.scale(cm_term, cfg.gamma))
        comm = term if comm is None else ad.add(comm, term)
        new["indices"].append(idx)
        new["sg_feats"].append(sg_f)
        new["sg_vec"].append(sg_v)
        qdist.append(float(np.sqrt(((f.data - sel.data) ** 2).sum(axis=1)).mean()))
    if frozen is None:
        if channel is None:
            received = new["indices"]
        else:
            received = transmit_indices(new["indices"], channel, codec.config.codebook_size)
    else:
        received = fz["received"]
    new["received"] = received
    for r, f in enumerate(feats, start=1):
        target = codec.codebook(r).data[received[r - 1]]
        off = fz["offset"][r - 1] if frozen else None
        st = ad.straight_through(f, target, offset=off)
        new["offset"].append(st.data - f.data if frozen is None else off)
        dec_in.append(st)
    recon = codec.decode(dec_in, B)
    l_d = data_term(recon, values, measured, cfg.kappa)
    l_k = knowledge_term(recon, values, [cache.get(int(i)) for i in batch], cfg.knowledge_form)
    total = ad.add(l_d, ad.add(ad.scale(l_k, cfg.w_k), ad.scale(comm, cfg.w_c)))
    parts = {"loss": float(total.data), "data": float(l_d.data),
             "knowledge": float(l_k.data), "comm": float(comm.data),
             "quant_dist": float(np.mean(qdist))}
    return Stage1Step(total, parts, new, recon)


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[s:s + size] for s in range(0, n, size)]


def seed_codebooks(codec: Codec, values: np.ndarray, rng: np.random.Generator) -> None:
    """Overwrite each codebook with encoder features drawn from ``values``.

    Rows are sampled with replacement when a scale has fewer tokens than codes,
    plus a small jitter so duplicates separate.
    """
    feats = codec.encode(values)
    for r, f in enumerate(feats, start=1):
        cb = codec.codebook(r)
        L = cb.shape[0]
        rows = rng.choice(len(f.data), size=L, replace=len(f.data) < L)
        jitter = 1e-2 * f.data.std() * rng.standard_normal(cb.shape)
        cb.data[...] = f.data[rows] + jitter


def train_stage1(maps: MapSet, codec: Codec, channel: ChannelConfig | None,
                 cfg: TrainConfig) -> list[dict]:
    """Offline training of encoders, decoders and codebooks on complete maps."""
    params = list(codec.params.values())
    if cfg.codebook_init == "data" and cfg.lr > 0:
        init_rng = np.random.default_rng([cfg.seed, 7])
        seed_codebooks(codec, maps.values[init_rng.permutation(len(maps))[:cfg.batch_size]],
                       init_rng)
    opt = ad.Adam(params, lr=cfg.lr)
    cache = KnowledgeCache(maps, cfg.region_radius)
    rng = np.random.default_rng([cfg.seed, 11])
    history = []
    for epoch in range(cfg.epochs):
        acc = {}
        batches = _batches(len(maps), cfg.batch_size, rng)
        for b, batch in enumerate(batches):
            ch = None
            if channel is not None:
                ch = channel.with_snr(cfg.snr_for_epoch(epoch)).with_seed(
                    int(rng.integers(0, 2**31 - 1)))
            step = stage1_loss(codec, maps, batch, cfg, ch, cache)
            if not np.isfinite(step.loss.data):
                raise NumericalError(f"stage 1: non-finite loss at epoch {epoch + 1}, "
                                     f"batch {b + 1}")
            opt.zero_grad()
            ad.backward(step.loss)
            opt.step()
            for k, v in step.parts.items():
                acc[k] = acc.get(k, 0.0) + v * len(batch)
        row = {"epoch": epoch + 1, **{k: v / len(maps) for k, v in acc.items()}}
        history.append(row)
        log.info("stage1 epoch %d loss %.4f", row["epoch"], row["loss"])
    return history


# ---------------------------------------------------------------- stage 2

def teacher_indices(codec: Codec, values: np.ndarray, batch_size: int = 32) -> list[np.ndarray]:
    """Teacher codebook indices per scale, each (n_maps, n_tokens_r)."""
    out = [[] for _ in range(codec.config.scales)]
    for s in range(0, len(values), batch_size):
        v = values[s:s + batch_size]
        feats = codec.encode(v)
        for r, f in enumerate(feats, start=1):
            idx = nearest_codes(f.data, codec.codebook(r).data)
            out[r - 1].append(idx.reshape(len(v), -1))
    return [np.concatenate(o) for o in out]


def cross_entropy_loss(logits: list[ad.Tensor], targets: list[np.ndarray]) -> ad.Tensor:
    """Σ over scales and tokens of the token cross-entropy."""
    total = None
    for lg, t in zip(logits, targets):
        ce = ad.cross_entropy_logits(lg, np.asarray(t).ravel())
        total = ce if total is None else ad.add(total, ce)
    return total


def train_stage2_offline(maps: MapSet, codec: Codec, predictor: Predictor,
                         cfg: TrainConfig) -> list[dict]:
    """Distill the frozen teacher's indices into a predictor fed masked maps."""
    targets = teacher_indices(codec, maps.values)
    opt = ad.Adam(list(predictor.params.values()), lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 22])
    history = []
    for epoch in range(cfg.epochs):
        tot, correct, count = 0.0, 0, 0
        for b, batch in enumerate(_batches(len(maps), cfg.batch_size, rng)):
            logits = predictor.logits(maps.masked[batch])
            tg = [t[batch].ravel() for t in targets]
            loss = ad.scale(cross_entropy_loss(logits, tg), 1.0 / len(batch))
            if not np.isfinite(loss.data):
                raise NumericalError(f"stage 2: non-finite loss at epoch {epoch + 1}, "
                                     f"batch {b + 1}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            tot += float(loss.data) * len(batch)
            for lg, t in zip(logits, tg):
                correct += int((np.argmax(lg.data, axis=1) == t).sum())
                count += t.size
        row = {"epoch": epoch + 1, "loss": tot / len(maps), "accuracy": correct / count}
        history.append(row)
        log.info("stage2 epoch %d loss %.4f acc %.3f", row["epoch"], row["loss"],
                 row["accuracy"])
    return history


def index_accuracy(codec: Codec, predictor: Predictor, maps: MapSet) -> float:
    targets = teacher_indices(codec, maps.values)
    correct = count = 0
    for s in range(0, len(maps), 32):
        pred = predictor.predict_indices(maps.masked[s:s + 32])
        for p, t in zip(pred, targets):
            tt = t[s:s + 32].ravel()
            correct += int((p == tt).sum())
            count += tt.size
    return correct / count


# ------------------------------------------------------------- online tuning

def online_forward(codec: Codec, predictor: Predictor, masked: np.ndarray,
                   channel: ChannelConfig | None):
    """Predict -> transport -> decode for one or more masked maps, keeping the graph."""
    B = masked.shape[0]
    logits = predictor.logits(masked)
    idx = [np.argmax(lg.data, axis=1) for lg in logits]
    received = idx if channel is None else transmit_indices(idx, channel,
                                                            codec.config.codebook_size)
    dec_in = []
    for r, (lg, rx) in enumerate(zip(logits, received), start=1):
        cb = codec.codebook(r)
        dec_in.append(ad.straight_through(soft_semantics(lg, cb), cb.data[rx]))
    return codec.decode(dec_in, B)


def online_loss_tensor(recon: ad.Tensor, grid: GridSpec, params: PropagationParams,
                       cfg: TrainConfig):
    """L_Onl of a single reconstructed map as a graph node, plus peak count."""
    v = recon.data.reshape(grid.shape)
    est = estimate_transmitters(v, cfg.varphi, cfg.zeta, params, grid)
    if len(est) == 0:
        return None, 0
    regions = build_regions(est, grid, cfg.region_radius)
    op = knowledge_operator(regions, grid.shape, params, grid)
    if op.n_terms == 0:
        return None, len(est)
    flat = ad.reshape(recon, (recon.size,))
    resid = ad.sub(ad.sparse_apply(op.matrix, flat), ad.constant(op.pl_sum))
    z = ad.mul(resid, ad.constant(np.sqrt(op.weights)))
    return ad.sum_all(ad.mul(z, z)), len(est)


@dataclass
class OnlineTrace:
    losses: list = field(default_factory=list)
    peaks: list = field(default_factory=list)
    skipped: int = 0
    steps: int = 0


def tune_online(codec: Codec, predictor: Predictor, stream: np.ndarray, grid: GridSpec,
                params: PropagationParams, cfg: TrainConfig,
                channel: ChannelConfig | None = None) -> OnlineTrace:
    """Unsupervised updates of predictor, decoder and codebooks from masked maps only."""
    tuned = list(predictor.params.values()) + list(codec.family("decoder").values()) + \
        list(codec.family("codebook").values())
    opt = ad.Adam(tuned, lr=cfg.online_lr)
    rng = np.random.default_rng([cfg.seed, 33])
    trace = OnlineTrace()
    n = len(stream)
    for step in range(cfg.online_steps):
        m = stream[step % n][None]
        ch = None if channel is None else channel.with_seed(int(rng.integers(0, 2**31 - 1)))
        recon = online_forward(codec, predictor, m, ch)
        loss, n_peaks = online_loss_tensor(recon, grid, params, cfg)
        trace.peaks.append(n_peaks)
        if loss is None or float(loss.data) <= cfg.online_skip_below:
            trace.skipped += 1
            trace.losses.append(0.0 if loss is None else float(loss.data))
            continue
        if not np.isfinite(loss.data):
            raise NumericalError(f"online tuning: non-finite loss at step {step + 1}")
        trace.losses.append(float(loss.data))
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        trace.steps += 1
    return trace


def mean_online_loss(codec: Codec, predictor: Predictor, stream: np.ndarray, grid: GridSpec,
                     params: PropagationParams, cfg: TrainConfig,
                     channel: ChannelConfig | None = None) -> float:
    vals = []
    for i in range(len(stream)):
        ch = None if channel is None else channel.with_seed(1000 + i)
        recon = online_forward(codec, predictor, stream[i][None], ch)
        loss, _ = online_loss_tensor(recon, grid, params, cfg)
        vals.append(0.0 if loss is None else float(loss.data))
    return float(np.mean(vals))


# -------------------------------------------------------------- evaluation

def reconstruct(codec: Codec, predictor: Predictor | None, maps: MapSet,
                channel: ChannelConfig | None, seed: int = 0,
                batch_size: int = 32) -> np.ndarray:
    """Full pipeline reconstructions; the teacher path is used when no predictor."""
    out = []
    for k, s in enumerate(range(0, len(maps), batch_size)):
        sl = slice(s, s + batch_size)
        if predictor is None:
            feats = codec.encode(maps.values[sl])
            idx = [q.indices for q in codec.quantize(feats)]
        else:
            idx = predictor.predict_indices(maps.masked[sl])
        if channel is not None:
            idx = transmit_indices(idx, channel.with_seed(seed * 7919 + k),
                                   codec.config.codebook_size)
        out.append(codec.decode_indices(idx, len(maps.values[sl])))
    return np.concatenate(out)


def evaluate_maps(maps: MapSet, recon: np.ndarray, cfg: TrainConfig) -> list[dict]:
    rows = []
    for i in range(len(maps)):
        rep = score_map(maps.values[i], recon[i], maps.transmitters[i], maps.grid,
                        maps.params, cfg.region_radius, cfg.varphi, cfg.zeta,
                        cfg.knowledge_form)
        rows.append({"id": maps.ids[i], **rep.__dict__})
    return rows


def aggregate(rows: list[dict]) -> dict:
    keys = ("mse", "kmse", "knowledge_supervised", "knowledge_unsupervised")
    agg = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    agg["rkmse"] = float(np.mean([r["rkmse"] for r in rows]))
    agg["n_maps"] = len(rows)
    return agg


# -------------------------------------------------------------- checkpoints

def save_checkpoint(directory, codec: Codec, predictor: Predictor | None = None,
                    meta: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ad.save_params(directory / "codec", codec.params)
    if predictor is not None:
        ad.save_params(directory / "predictor", predictor.params)
    info = dict(meta or {})
    info.update(codec_config=codec.config.to_dict(), has_predictor=predictor is not None)
    (directory / "checkpoint.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    try:
        info = json.loads((directory / "checkpoint.json").read_text())
    except OSError as exc:
        raise FileNotFoundError(f"no checkpoint at {directory}: {exc}") from exc
    cfg = CodecConfig(**info["codec_config"])
    codec = Codec(cfg, ad.load_params(directory / "codec"))
    predictor = None
    if info.get("has_predictor"):
        predictor = Predictor(cfg, ad.load_params(directory / "predictor"))
    return codec, predictor, info


def params_checksum(params: dict) -> str:
    import hashlib
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
