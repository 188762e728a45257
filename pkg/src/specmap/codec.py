"""Multi-scale vector-quantized transformer codec over 3D token grids.

Tokens of a batch are stacked row-wise, ``(B * n_tokens, C)``, in x-major
order inside each map.  Attention is restricted to occupied tokens within a
Chebyshev window, so batching is just a block-diagonal neighborhood.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import TransportError, ValidationError
from .radiomap import EMPTY_DBM


@dataclass(frozen=True)
class CodecConfig:
    grid_shape: tuple[int, int, int] = (16, 16, 8)
    patch: int = 4
    scales: int = 2
    channels: int = 64
    heads: int = 4
    depth: int = 4
    n_win: int = 8
    codebook_size: int = 256
    ffn_mult: int = 2
    value_offset_dbm: float = -20.0
    value_scale_db: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(v) for v in self.grid_shape))
        if self.scales < 1 or self.n_win < 1 or self.patch < 1:
            raise ValidationError("scales, n_win and patch must be >= 1")
        if self.channels % self.heads:
            raise ValidationError("channels must be divisible by heads")

    @property
    def window_radius(self) -> int:
        """Chebyshev radius of the n_win x n_win x n_win window, in tokens."""
        return self.n_win // 2

    def token_shape(self, r: int) -> tuple[int, int, int]:
        step = self.patch * 2 ** (r - 1)
        return tuple(-(-n // step) for n in self.grid_shape)

    def n_tokens(self, r: int) -> int:
        return int(np.prod(self.token_shape(r)))

    @property
    def bits_per_index(self) -> int:
        return int(math.ceil(math.log2(self.codebook_size)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        return d


# ----------------------------------------------------------------- neighborhoods

@dataclass
class Neighborhood:
    query: np.ndarray    # (Q,) rows that attend
    index: np.ndarray    # (Q, K) key rows, padded
    valid: np.ndarray    # (Q, K)
    scatter: np.ndarray  # (T,) position in ``query``, Q for pass-through rows

    @property
    def n_pairs(self) -> int:
        return int(self.valid.sum())


def build_neighborhood(occupied: np.ndarray, radius: int) -> Neighborhood:
    """Window neighbors for a batch of token grids ``occupied`` (B, n1, n2, n3)."""
    occ = np.asarray(occupied, dtype=bool)
    if occ.ndim == 3:
        occ = occ[None]
    B, n1, n2, n3 = occ.shape
    n = n1 * n2 * n3
    coords = np.stack(np.meshgrid(np.arange(n1), np.arange(n2), np.arange(n3),
                                  indexing="ij"), axis=-1).reshape(-1, 3)
    r1, r2, r3 = (min(radius, s - 1) for s in (n1, n2, n3))
    offsets = np.array([(a, b, c) for a in range(-r1, r1 + 1)
                        for b in range(-r2, r2 + 1) for c in range(-r3, r3 + 1)])
    nb = coords[:, None, :] + offsets[None, :, :]
    inside = np.all((nb >= 0) & (nb < np.array([n1, n2, n3])), axis=-1)
    nb_flat = np.where(inside, (nb[..., 0] * n2 + nb[..., 1]) * n3 + nb[..., 2], 0)

    flat_occ = occ.reshape(B, n)
    q_list, idx_list, val_list = [], [], []
    for b in range(B):
        q = np.flatnonzero(flat_occ[b])
        if q.size == 0:
            continue
        cand = nb_flat[q]
        ok = inside[q] & flat_occ[b][cand]
        q_list.append(q + b * n)
        idx_list.append(cand + b * n)
        val_list.append(ok)
    T = B * n
    if not q_list:
        return Neighborhood(np.zeros(0, int), np.zeros((0, 1), int), np.zeros((0, 1), bool),
                            np.zeros(T, int))
    query = np.concatenate(q_list)
    index = np.concatenate(idx_list)
    valid = np.concatenate(val_list)
    # pack valid keys to the left and drop all-padding columns
    order = np.argsort(~valid, axis=1, kind="stable")
    index = np.take_along_axis(index, order, axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    k = max(1, int(valid.sum(axis=1).max()))
    index, valid = index[:, :k], valid[:, :k]
    index = np.where(valid, index, query[:, None])
    scatter = np.full(T, len(query))
    scatter[query] = np.arange(len(query))
    return Neighborhood(query, index, valid, scatter)


def count_attention_pairs(occupied: np.ndarray, n_win: int) -> int:
    return build_neighborhood(occupied, n_win // 2).n_pairs


# ------------------------------------------------------------------- patches

def patchify(values: np.ndarray, patch: int, fill: float):
    """(B, NL, NW, NH) -> (B * n_tokens, patch**3), padding with ``fill``."""
    B = values.shape[0]
    grid = values.shape[1:]
    tok = tuple(-(-n // patch) for n in grid)
    padded = np.full((B,) + tuple(t * patch for t in tok), fill, dtype=float)
    padded[:, :grid[0], :grid[1], :grid[2]] = values
    x = padded.reshape(B, tok[0], patch, tok[1], patch, tok[2], patch)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6)
    return x.reshape(B * int(np.prod(tok)), patch**3), tok


def unpatchify_index(grid_shape, patch: int, batch: int) -> np.ndarray:
    """Row of the flattened patch matrix that holds each voxel, (B*NL*NW*NH,)."""
    tok = tuple(-(-n // patch) for n in grid_shape)
    n_tok = int(np.prod(tok))
    rows = np.arange(batch * n_tok * patch**3).reshape(
        batch, tok[0], tok[1], tok[2], patch, patch, patch)
    rows = rows.transpose(0, 1, 4, 2, 5, 3, 6).reshape(
        batch, tok[0] * patch, tok[1] * patch, tok[2] * patch)
    return rows[:, :grid_shape[0], :grid_shape[1], :grid_shape[2]].ravel()


def token_occupancy(measured: np.ndarray, patch: int) -> np.ndarray:
    """(B, NL, NW, NH) bool -> (B, n1, n2, n3): any measured voxel in the patch."""
    m, tok = patchify(measured.astype(float), patch, 0.0)
    return (m.max(axis=1) > 0).reshape((measured.shape[0],) + tok)


def merge_occupancy(occ: np.ndarray, out_shape) -> np.ndarray:
    B = occ.shape[0]
    out = np.zeros((B,) + tuple(out_shape), dtype=bool)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                sub = occ[:, a::2, b::2, c::2]
                out[:, :sub.shape[1], :sub.shape[2], :sub.shape[3]] |= sub
    return out


def merge_index(child_shape, parent_shape, batch: int) -> np.ndarray:
    """(B * n_parent, 8) child rows per parent token; missing children -> pad row."""
    n_child = int(np.prod(child_shape))
    pad = batch * n_child
    p = np.stack(np.meshgrid(*[np.arange(s) for s in parent_shape], indexing="ij"),
                 axis=-1).reshape(-1, 3)
    cols = []
    for a in range(2):
        for b in range(2):
            for c in range(2):
                ch = p * 2 + np.array([a, b, c])
                ok = np.all(ch < np.array(child_shape), axis=1)
                flat = (ch[:, 0] * child_shape[1] + ch[:, 1]) * child_shape[2] + ch[:, 2]
                cols.append(np.where(ok, flat, -1))
    base = np.stack(cols, axis=1)
    out = []
    for bi in range(batch):
        out.append(np.where(base >= 0, base + bi * n_child, pad))
    return np.concatenate(out, axis=0)


# -------------------------------------------------------------------- layers

def _lin(rng, fan_in, fan_out, gain=1.0):
    return rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_block(rng, prefix: str, C: int, ffn_mult: int, depth: int) -> dict:
    out_gain = 1.0 / math.sqrt(2 * depth)
    return {
        f"{prefix}.wq": _lin(rng, C, C), f"{prefix}.wk": _lin(rng, C, C),
        f"{prefix}.wv": _lin(rng, C, C), f"{prefix}.wo": _lin(rng, C, C, out_gain),
        f"{prefix}.bo": np.zeros(C),
        f"{prefix}.w1": _lin(rng, C, ffn_mult * C), f"{prefix}.b1": np.zeros(ffn_mult * C),
        f"{prefix}.w2": _lin(rng, ffn_mult * C, C, out_gain), f"{prefix}.b2": np.zeros(C),
    }


def attention_block(x: ad.Tensor, P: dict, prefix: str, nbr: Neighborhood,
                    heads: int) -> ad.Tensor:
    """Pre-norm sparse-window attention + feed-forward; unoccupied rows pass through."""
    T, C = x.shape
    Q, K = nbr.index.shape
    if Q == 0:
        return x
    dk = C // heads
    h = ad.layer_norm(x)
    q = ad.reshape(ad.matmul(ad.gather_rows(h, nbr.query), P[f"{prefix}.wq"]), (Q, heads, dk))
    k = ad.matmul(h, P[f"{prefix}.wk"])
    v = ad.matmul(h, P[f"{prefix}.wv"])
    kn = ad.reshape(ad.gather_rows(k, nbr.index), (Q, K, heads, dk))
    vn = ad.reshape(ad.gather_rows(v, nbr.index), (Q, K, heads, dk))
    scores = ad.scale(ad.einsum("qhd,qkhd->qhk", q, kn), 1.0 / math.sqrt(dk))
    attn = ad.softmax(scores, axis=-1, mask=nbr.valid[:, None, :])
    o = ad.reshape(ad.einsum("qhk,qkhd->qhd", attn, vn), (Q, C))
    o = ad.add(ad.matmul(o, P[f"{prefix}.wo"]), P[f"{prefix}.bo"])
    zero = ad.constant(np.zeros((1, C)))
    x = ad.add(x, ad.gather_rows(ad.concat([o, zero], axis=0), nbr.scatter))
    hq = ad.gather_rows(ad.layer_norm(x), nbr.query)
    f = ad.relu(ad.add(ad.matmul(hq, P[f"{prefix}.w1"]), P[f"{prefix}.b1"]))
    f = ad.add(ad.matmul(f, P[f"{prefix}.w2"]), P[f"{prefix}.b2"])
    return ad.add(x, ad.gather_rows(ad.concat([f, zero], axis=0), nbr.scatter))


def dense_attention_block_reference(x: np.ndarray, P: dict, prefix: str,
                                    heads: int) -> np.ndarray:
    """Full attention over every row, plain numpy; used as an oracle."""
    T, C = x.shape
    dk = C // heads

    def ln(z):
        mu = z.mean(-1, keepdims=True)
        var = ((z - mu) ** 2).mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-5)

    g = {k: (v.data if isinstance(v, ad.Tensor) else v) for k, v in P.items()}
    h = ln(x)
    q = (h @ g[f"{prefix}.wq"]).reshape(T, heads, dk)
    k = (h @ g[f"{prefix}.wk"]).reshape(T, heads, dk)
    v = (h @ g[f"{prefix}.wv"]).reshape(T, heads, dk)
    out = np.zeros((T, heads, dk))
    for hd in range(heads):
        s = q[:, hd] @ k[:, hd].T / math.sqrt(dk)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        out[:, hd] = w @ v[:, hd]
    x = x + out.reshape(T, C) @ g[f"{prefix}.wo"] + g[f"{prefix}.bo"]
    f = np.maximum(ln(x) @ g[f"{prefix}.w1"] + g[f"{prefix}.b1"], 0.0)
    return x + f @ g[f"{prefix}.w2"] + g[f"{prefix}.b2"]


# -------------------------------------------------------------------- encoders

def _init_trunk(rng, cfg: CodecConfig, prefix: str) -> dict:
    C, p3 = cfg.channels, cfg.patch**3
    P = {f"{prefix}.empty": np.zeros((1, 1)),
         f"{prefix}.embed.w": _lin(rng, p3, C), f"{prefix}.embed.b": np.zeros(C)}
    for r in range(1, cfg.scales + 1):
        P[f"{prefix}.pos{r}"] = rng.normal(0.0, 0.02, size=(cfg.n_tokens(r), C))
        if r > 1:
            P[f"{prefix}.merge{r}.w"] = _lin(rng, 8 * C, C)
            P[f"{prefix}.merge{r}.b"] = np.zeros(C)
        for i in range(cfg.depth):
            P.update(init_block(rng, f"{prefix}.s{r}.blk{i}", C, cfg.ffn_mult, cfg.depth))
    return P


def _embed(P: dict, prefix: str, cfg: CodecConfig, values: np.ndarray,
           measured: np.ndarray) -> ad.Tensor:
    B = values.shape[0]
    norm = np.where(measured, (values - cfg.value_offset_dbm) / cfg.value_scale_db, 0.0)
    vals, _ = patchify(norm, cfg.patch, 0.0)
    empty, _ = patchify((~measured).astype(float), cfg.patch, 1.0)
    fill = ad.reshape(ad.matmul(ad.constant(empty.reshape(-1, 1)), P[f"{prefix}.empty"]),
                      vals.shape)
    x = ad.add(ad.constant(vals), fill)
    x = ad.add(ad.matmul(x, P[f"{prefix}.embed.w"]), P[f"{prefix}.embed.b"])
    pos = ad.gather_rows(P[f"{prefix}.pos1"], np.tile(np.arange(cfg.n_tokens(1)), B))
    return ad.add(x, pos)


def run_trunk(P: dict, prefix: str, cfg: CodecConfig, values: np.ndarray,
              measured: np.ndarray, occupancy: np.ndarray | None = None):
    """Encoder pyramid; returns per-scale token features and token occupancy.

    ``occupancy`` None marks every token occupied (complete maps).
    """
    B = values.shape[0]
    x = _embed(P, prefix, cfg, values, measured)
    occ = (np.ones((B,) + cfg.token_shape(1), dtype=bool) if occupancy is None
           else np.asarray(occupancy, dtype=bool))
    feats, occs = [], []
    for r in range(1, cfg.scales + 1):
        if r > 1:
            child, parent = cfg.token_shape(r - 1), cfg.token_shape(r)
            idx = merge_index(child, parent, B)
            zero = ad.constant(np.zeros((1, cfg.channels)))
            g = ad.gather_rows(ad.concat([x, zero], axis=0), idx)
            x = ad.reshape(g, (idx.shape[0], 8 * cfg.channels))
            x = ad.add(ad.matmul(x, P[f"{prefix}.merge{r}.w"]), P[f"{prefix}.merge{r}.b"])
            pos = ad.gather_rows(P[f"{prefix}.pos{r}"], np.tile(np.arange(cfg.n_tokens(r)), B))
            x = ad.add(x, pos)
            occ = merge_occupancy(occ, parent)
        nbr = build_neighborhood(occ, cfg.window_radius)
        for i in range(cfg.depth):
            x = attention_block(x, P, f"{prefix}.s{r}.blk{i}", nbr, cfg.heads)
        feats.append(x)
        occs.append(occ)
    return feats, occs


# ------------------------------------------------------------------ quantizer

def nearest_codes(feats: np.ndarray, codebook: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Index of the closest codebook row per feature row; ties go to the lowest index."""
    out = np.empty(len(feats), dtype=np.int64)
    for s in range(0, len(feats), chunk):
        f = feats[s:s + chunk]
        d = ((f[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


@dataclass
class Quantized:
    indices: np.ndarray      # (rows,)
    vectors: ad.Tensor       # codebook rows selected (carry codebook gradient)
    codebook_term: ad.Tensor  # ||tg[d] - d~||^2, mean over rows
    commit_term: ad.Tensor   # ||d - tg[d~]||^2, mean over rows (unweighted)


def quantize(feats: ad.Tensor, codebook: ad.Tensor, indices=None) -> Quantized:
    if feats.shape[1] != codebook.shape[1]:
        raise ValidationError(f"feature width {feats.shape[1]} != codebook width "
                              f"{codebook.shape[1]}")
    idx = nearest_codes(feats.data, codebook.data) if indices is None else np.asarray(indices)
    sel = ad.gather_rows(codebook, idx)
    cb = ad.scale(ad.mean_sq(ad.sub(ad.stop_gradient(feats), sel)), feats.shape[1])
    cm = ad.scale(ad.mean_sq(ad.sub(feats, ad.stop_gradient(sel))), feats.shape[1])
    return Quantized(idx, sel, cb, cm)


# ---------------------------------------------------------------------- model

class Codec:
    """Teacher encoder, per-scale codebooks and the multi-scale decoder."""

    def __init__(self, config: CodecConfig, params: dict | None = None):
        self.config = config
        if params is None:
            params = self._init_params()
        self.params = {k: ad.parameter(v, name=k) for k, v in params.items()}

    def _init_params(self) -> dict:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 1])
        C, p3 = cfg.channels, cfg.patch**3
        P = _init_trunk(rng, cfg, "enc")
        for r in range(1, cfg.scales + 1):
            P[f"shift{r}.w"] = _lin(rng, C, C)
            P[f"shift{r}.b"] = np.zeros(C)
            P[f"codebook{r}"] = rng.normal(0.0, 1.0, size=(cfg.codebook_size, C))
            P[f"dec.pos{r}"] = rng.normal(0.0, 0.02, size=(cfg.n_tokens(r), C))
            if r < cfg.scales:
                P[f"dec.fuse{r}.w"] = _lin(rng, 2 * C, C)
                P[f"dec.fuse{r}.b"] = np.zeros(C)
            for i in range(cfg.depth):
                P.update(init_block(rng, f"dec.s{r}.blk{i}", C, cfg.ffn_mult, cfg.depth))
        P["dec.out.w"] = _lin(rng, C, p3, 0.5)
        P["dec.out.b"] = np.zeros(p3)
        return P

    # parameter families ---------------------------------------------------
    def family(self, name: str) -> dict:
        pick = {
            "encoder": lambda k: k.startswith(("enc.", "shift")),
            "decoder": lambda k: k.startswith("dec."),
            "codebook": lambda k: k.startswith("codebook"),
        }[name]
        return {k: v for k, v in self.params.items() if pick(k)}

    def codebook(self, r: int) -> ad.Tensor:
        return self.params[f"codebook{r}"]

    # forward pieces -----------------------------------------------------
    def encode(self, values: np.ndarray) -> list[ad.Tensor]:
        """Complete maps (B, NL, NW, NH) -> pre-quantization features per scale."""
        values = np.asarray(values, dtype=float)
        measured = np.ones(values.shape, dtype=bool)
        feats, _ = run_trunk(self.params, "enc", self.config, values, measured)
        out = []
        for r, x in enumerate(feats, start=1):
            y = ad.matmul(ad.layer_norm(x), self.params[f"shift{r}.w"])
            out.append(ad.add(y, self.params[f"shift{r}.b"]))
        return out

    def quantize(self, feats: list[ad.Tensor]) -> list[Quantized]:
        return [quantize(f, self.codebook(r)) for r, f in enumerate(feats, start=1)]

    def lookup(self, indices: list[np.ndarray]) -> list[ad.Tensor]:
        out = []
        for r, idx in enumerate(indices, start=1):
            idx = np.asarray(idx).ravel()
            L = self.config.codebook_size
            if idx.size and (idx.min() < 0 or idx.max() >= L):
                raise TransportError(f"scale {r}: index outside [0, {L})")
            out.append(ad.gather_rows(self.codebook(r), idx))
        return out

    def decode(self, inputs: list[ad.Tensor], batch: int) -> ad.Tensor:
        """Per-scale token semantics -> reconstructed maps (B, NL, NW, NH) in dBm."""
        cfg, P = self.config, self.params
        R = cfg.scales
        if len(inputs) != R:
            raise ValidationError(f"expected {R} scales, got {len(inputs)}")
        x = None
        for r in range(R, 0, -1):
            tok = cfg.token_shape(r)
            pos = ad.gather_rows(P[f"dec.pos{r}"], np.tile(np.arange(cfg.n_tokens(r)), batch))
            if r == R:
                x = ad.add(inputs[r - 1], pos)
            else:
                coarse = ad.reshape(x, (batch,) + cfg.token_shape(r + 1) + (cfg.channels,))
                up = ad.reshape(ad.nearest_upsample_3d(coarse, tok),
                                (batch * cfg.n_tokens(r), cfg.channels))
                fused = ad.concat([up, inputs[r - 1]], axis=-1)
                x = ad.add(ad.matmul(fused, P[f"dec.fuse{r}.w"]), P[f"dec.fuse{r}.b"])
                x = ad.add(x, pos)
            nbr = build_neighborhood(np.ones((batch,) + tok, dtype=bool), cfg.window_radius)
            for i in range(cfg.depth):
                x = attention_block(x, P, f"dec.s{r}.blk{i}", nbr, cfg.heads)
        y = ad.add(ad.matmul(ad.layer_norm(x), P["dec.out.w"]), P["dec.out.b"])
        y = ad.reshape(y, (y.size, 1))
        vox = ad.gather_rows(y, unpatchify_index(cfg.grid_shape, cfg.patch, batch))
        shape = (batch,) + cfg.grid_shape
        vox = ad.scale(ad.reshape(vox, shape), cfg.value_scale_db)
        return ad.add(vox, ad.constant(np.full(shape, cfg.value_offset_dbm)))

    def decode_indices(self, indices: list[np.ndarray], batch: int) -> np.ndarray:
        return self.decode(self.lookup(indices), batch).data.copy()

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}


class Predictor:
    """Masked map -> per-scale logits over codebook entries."""

    def __init__(self, config: CodecConfig, params: dict | None = None):
        self.config = config
        if params is None:
            rng = np.random.default_rng([config.seed, 2])
            params = _init_trunk(rng, config, "pred")
            for r in range(1, config.scales + 1):
                params[f"pred.head{r}.w"] = _lin(rng, config.channels, config.codebook_size)
                params[f"pred.head{r}.b"] = np.zeros(config.codebook_size)
        self.params = {k: ad.parameter(v, name=k) for k, v in params.items()}

    def logits(self, masked: np.ndarray) -> list[ad.Tensor]:
        masked = np.asarray(masked, dtype=float)
        measured = masked != EMPTY_DBM
        occ = token_occupancy(measured, self.config.patch)
        feats, _ = run_trunk(self.params, "pred", self.config, masked, measured, occ)
        out = []
        for r, x in enumerate(feats, start=1):
            y = ad.matmul(ad.layer_norm(x), self.params[f"pred.head{r}.w"])
            out.append(ad.add(y, self.params[f"pred.head{r}.b"]))
        return out

    def predict_indices(self, masked: np.ndarray) -> list[np.ndarray]:
        return [np.argmax(lg.data, axis=1) for lg in self.logits(masked)]

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}


def soft_semantics(logits: ad.Tensor, codebook: ad.Tensor) -> ad.Tensor:
    """Probability-weighted codebook rows; differentiable stand-in for argmax lookup."""
    return ad.matmul(ad.softmax(logits, axis=-1), codebook)
