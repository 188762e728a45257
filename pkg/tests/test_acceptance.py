"""Acceptance criteria 1-10; each test records a one-line verdict in conftest.ACCEPTANCE."""
import time

import numpy as np
import pytest

import test_autodiff
import test_baselines
import test_channel
from conftest import ACCEPTANCE
from helpers import directional_check
from specmap import autodiff as ad
from specmap.channel import ChannelConfig
from specmap.codec import (Codec, CodecConfig, Predictor, attention_block, build_neighborhood,
                           count_attention_pairs, dense_attention_block_reference, init_block,
                           token_occupancy)
from specmap.harness import DEFAULTS, codec_config, main, read_sweep_csv, train_config
from specmap.metrics import build_regions, estimate_transmitters, kmse, mse
from specmap.radiomap import (DESK_GRID, FULL_GRID, PropagationParams, Transmitter,
                              dbm_to_watt, generate_mask, path_loss_db, random_transmitters,
                              records_in_memory, synthesize_map)
from specmap.training import (KnowledgeCache, MapSet, aggregate, evaluate_maps, index_accuracy,
                              mean_online_loss, reconstruct, stage1_loss, train_stage1,
                              train_stage2_offline, tune_online)

CLEAN = PropagationParams()


def record(key, ok, detail):
    ACCEPTANCE[str(key)] = (bool(ok), detail)
    assert ok, detail


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# ----------------------------------------------------------------------------- 1
def test_criterion_1_kmse_worked_example():
    with Timer() as t:
        truth = np.array([1.0, 0.8]).reshape(2, 1, 1)
        a = np.array([1.6, 0.2]).reshape(2, 1, 1)
        b = np.array([0.4, 1.4]).reshape(2, 1, 1)
        regs = build_regions([(0, 0, 0)], (2, 1, 1), radius=1)
        got = (mse(truth, a), mse(truth, b), kmse(truth, a, regs), kmse(truth, b, regs))
    want = (0.36, 0.36, 0.36, 1.36)
    err = max(abs(g - w) for g, w in zip(got, want))
    record(1, err < 1e-12 and t.elapsed < 1.0,
           f"MSE(A,B)={got[0]:.12g},{got[1]:.12g} KMSE(A,B)={got[2]:.12g},{got[3]:.12g} "
           f"max err {err:.1e}, {t.elapsed:.3f}s")


# ----------------------------------------------------------------------------- 2
def _physics_failures(seed):
    rng = np.random.default_rng(seed)
    txs = random_transmitters(DESK_GRID, int(rng.integers(1, 4)), rng, ground_layers=8)
    total = synthesize_map(DESK_GRID, txs, CLEAN).values_dbm
    singles = [synthesize_map(DESK_GRID, [tx], CLEAN).values_dbm for tx in txs]
    bad = []
    summed = sum(dbm_to_watt(s) for s in singles)
    if np.max(np.abs(dbm_to_watt(total) - summed) / summed) > 1e-10:
        bad.append("superposition")
    centers = DESK_GRID.centers()
    for tx, single in zip(txs, singles):
        d = np.linalg.norm(centers - DESK_GRID.center(tx.cell), axis=-1)
        order = np.argsort(d, axis=None, kind="stable")
        dv, vv = d.ravel()[order], single.ravel()[order]
        strictly_farther = dv[1:] > dv[:-1] * (1 + 1e-12)
        if np.any(np.diff(vv)[strictly_farther] > 1e-10 * np.abs(vv[1:][strictly_farther])):
            bad.append("monotone decay")
        far = d > 0
        drop = tx.power_dbm - single[far]
        pl = path_loss_db(d[far], CLEAN)
        if np.max(np.abs(drop - pl) / np.abs(pl)) > 1e-10:
            bad.append("fading consistency")
    return bad


def test_criterion_2_propagation_physics():
    with Timer() as t:
        failures = {s: f for s in range(50) if (f := _physics_failures(s))}
    record(2, not failures and t.elapsed < 10.0,
           f"50 random maps with 1-3 tx, failures {failures or 'none'}, {t.elapsed:.2f}s")


# ----------------------------------------------------------------------------- 3
def test_criterion_3_sparse_dense_equivalence():
    tok, C, heads = (4, 4, 2), 32, 4
    radius = max(tok) - 1
    worst = 0.0
    with Timer() as t:
        nbr = build_neighborhood(np.ones((1,) + tok, bool), radius)
        for draw in range(10):
            rng = np.random.default_rng(draw)
            P = {k: ad.parameter(v + 0.1 * rng.standard_normal(v.shape))
                 for k, v in init_block(rng, "b", C, 2, 1).items()}
            x = rng.standard_normal((int(np.prod(tok)), C))
            got = attention_block(ad.tensor(x), P, "b", nbr, heads).data
            want = dense_attention_block_reference(x, P, "b", heads)
            worst = max(worst, float(np.max(np.abs(got - want) / np.abs(want))))
    record(3, worst < 1e-10 and t.elapsed < 30.0,
           f"10 draws, worst elementwise rel err {worst:.2e}, {t.elapsed:.2f}s")


# ----------------------------------------------------------------------------- 4
def test_criterion_4_attention_pair_complexity():
    cfg = CodecConfig(grid_shape=FULL_GRID.shape)
    with Timer() as t:
        mask = generate_mask(FULL_GRID, 0.15, "trajectory", rng_seed=0)
        occ = token_occupancy(mask.measured[None], cfg.patch)
        counted = count_attention_pairs(occ, cfg.n_win)
        n_occ = int(occ.sum())
    volume = int(np.prod(cfg.token_shape(1)))
    ratio = counted / n_occ**2
    bound = cfg.n_win**3 / volume
    record(4, ratio < bound and t.elapsed < 60.0,
           f"{n_occ}/{volume} tokens occupied, pairs {counted} vs dense {n_occ**2}: "
           f"ratio {ratio:.4f} < bound {bound:.4f} (vs all-token dense {counted / volume**2:.4f}), "
           f"{t.elapsed:.2f}s")


# ----------------------------------------------------------------------------- 5
OP_CHECKS = [name for name in dir(test_autodiff)
             if name.startswith("test_") and name.endswith("_grad")]


def _stage1_fd_error():
    cfg = CodecConfig(channels=8, heads=2, depth=1, n_win=4, codebook_size=16)
    codec = Codec(cfg)
    maps = MapSet.from_records(records_in_memory(2, rng_seed=1))
    tc = train_config(dict(DEFAULTS, w_k=0.7))
    cache = KnowledgeCache(maps, tc.region_radius)
    batch = np.arange(2)
    ch = ChannelConfig(snr_db=10.0, rng_seed=3)
    first = stage1_loss(codec, maps, batch, tc, ch, cache)

    def loss():
        return stage1_loss(codec, maps, batch, tc, ch, cache, frozen=first.frozen).loss
    return directional_check(loss, list(codec.params.values()), np.random.default_rng(0), h=1e-6)


def test_criterion_5_gradient_correctness():
    failed = []
    with Timer() as t:
        for name in OP_CHECKS:
            try:
                getattr(test_autodiff, name)()
            except AssertionError:
                failed.append(name)
        err = _stage1_fd_error()
    record(5, not failed and err < 1e-6 and t.elapsed < 120.0,
           f"{len(OP_CHECKS)} op families x 20 draws, failures {failed or 'none'}; "
           f"stage-1 loss rel err {err:.2e}, {t.elapsed:.1f}s")


# ----------------------------------------------------------------------------- 6
IDW_CHECKS = ["test_three_sample_toy_hand_computed", "test_single_sample_fills_everything",
              "test_nearest_neighbor_limit", "test_convex_bounds_and_exactness"]


def test_criterion_6_idw_oracles():
    failed = []
    with Timer() as t:
        for name in IDW_CHECKS:
            try:
                getattr(test_baselines, name)()
            except AssertionError:
                failed.append(name)
        for p in (0.5, 1.0, 2.0, 5.0):
            try:
                test_baselines.test_symmetric_midpoint(p)
            except AssertionError:
                failed.append(f"midpoint p={p}")
    record(6, not failed and t.elapsed < 10.0,
           f"exactness, convexity, midpoint, nearest neighbour; failures {failed or 'none'}, "
           f"{t.elapsed:.2f}s")


# ----------------------------------------------------------------------------- 7
def test_criterion_7_channel():
    failed = []
    with Timer() as t:
        for name in ("test_lossless_at_infinite_snr_many_payloads",
                     "test_gray_adjacent_points_differ_in_one_bit",
                     "test_ser_30db_matches_closed_form", "test_index_error_monotone_in_snr"):
            try:
                getattr(test_channel, name)()
            except AssertionError:
                failed.append(name)
        bands = {}
        for snr in (14.0, 18.0, 22.0):
            ref = test_channel.qam64_ser(snr)
            got = test_channel._measured_ser(snr, 100_000, int(snr))
            bands[snr] = got / ref
            if not ref / 3 <= got <= 3 * ref:
                failed.append(f"SER at {snr} dB")
    ser30 = test_channel._measured_ser(30.0, 100_000, 0)
    record(7, not failed and t.elapsed < 120.0,
           f"1e4 lossless payloads, Gray adjacency, SER@30dB {ser30:.1e} "
           f"(closed form {test_channel.qam64_ser(30.0):.1e}), measured/closed form at 14/18/22 dB "
           f"{', '.join(f'{v:.2f}' for v in bands.values())}, monotone index error; "
           f"failures {failed or 'none'}, {t.elapsed:.1f}s")


# ----------------------------------------------------------------------------- 8
def test_criterion_8_transmitter_estimation():
    with Timer() as t:
        misses = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            cell = (int(rng.integers(16)), int(rng.integers(16)), int(rng.integers(8)))
            m = synthesize_map(DESK_GRID, [Transmitter(cell, float(rng.choice([26, 28, 30])))],
                               CLEAN)
            if estimate_transmitters(m, 2, 3.0, CLEAN).cells != [cell]:
                misses += 1
        false_peaks = sum(len(estimate_transmitters(np.full(DESK_GRID.shape, c), 2, 3.0, CLEAN,
                                                    DESK_GRID)) for c in (-80.0, -20.0, 10.0))
    record(8, misses == 0 and false_peaks == 0 and t.elapsed < 30.0,
           f"{50 - misses}/50 clean single-tx cells recovered, {false_peaks} false peaks on "
           f"constant maps, {t.elapsed:.2f}s")


# ----------------------------------------------------------------------------- 9
SEEDS = (0, 1, 2)


def _run_seed(seed):
    cfg = dict(DEFAULTS, seed=seed)
    train = MapSet.from_records(records_in_memory(cfg["n_train"], rng_seed=seed))
    test = MapSet.from_records(records_in_memory(cfg["n_test"], start=10_000, rng_seed=seed))
    ood = MapSet.from_records(records_in_memory(16, start=20_000, rng_seed=seed,
                                                tx_count_range=(4, 4)))
    channel = ChannelConfig(snr_db=cfg["eval_snr_db"])
    out = {}
    for name, w_k in (("ke", cfg["w_k"]), ("vq", 0.0)):
        tc = train_config(dict(cfg, w_k=w_k))
        codec, pred = Codec(codec_config(cfg)), Predictor(codec_config(cfg))
        h1 = train_stage1(train, codec, channel, tc)
        train_stage2_offline(train, codec, pred, tc)
        out[name] = dict(codec=codec, pred=pred, tc=tc, s1_first=h1[0]["loss"],
                         s1_last=h1[-1]["loss"], lk_last=h1[-1]["knowledge"],
                         acc=index_accuracy(codec, pred, test))
    ke = out["ke"]

    def score(maps):
        recon = reconstruct(ke["codec"], ke["pred"], maps, channel, seed)
        return (mean_online_loss(ke["codec"], ke["pred"], maps.masked, maps.grid, maps.params,
                                 ke["tc"], channel),
                aggregate(evaluate_maps(maps, recon, ke["tc"]))["rkmse"])
    ke["ood_before"] = score(ood)
    ood_trace = tune_online(ke["codec"], ke["pred"], ood.masked, ood.grid, ood.params, ke["tc"],
                            channel)
    ke["ood_after"] = score(ood)
    ke["ood_skipped"] = ood_trace.skipped
    tune_online(ke["codec"], ke["pred"], test.masked, test.grid, test.params, ke["tc"], channel)
    for name in ("ke", "vq"):
        v = out[name]
        v["test_rkmse"] = aggregate(evaluate_maps(
            test, reconstruct(v["codec"], v["pred"], test, channel, seed), v["tc"]))["rkmse"]
    return out


@pytest.fixture(scope="module")
def desk_runs():
    t0 = time.perf_counter()
    runs = {s: _run_seed(s) for s in SEEDS}
    return runs, time.perf_counter() - t0


def _majority(votes):
    return sum(votes) >= 2


def test_criterion_9a_stage1_descent(desk_runs):
    runs, elapsed = desk_runs
    ratios = [runs[s]["ke"]["s1_first"] / runs[s]["ke"]["s1_last"] for s in SEEDS]
    record("9a", _majority([r >= 10 for r in ratios]) and elapsed < 1800,
           f"epoch-1/final stage-1 loss ratio per seed {', '.join(f'{r:.1f}' for r in ratios)} "
           f"(need >= 10); 3-seed run {elapsed / 60:.1f} min")


def test_criterion_9b_knowledge_weight(desk_runs):
    runs, _ = desk_runs
    pairs = [(runs[s]["ke"]["lk_last"], runs[s]["vq"]["lk_last"]) for s in SEEDS]
    record("9b", _majority([a < b for a, b in pairs]),
           "final supervised knowledge loss w_K>0 vs w_K=0 per seed "
           + ", ".join(f"{a:.3f} < {b:.3f}" for a, b in pairs))


def test_criterion_9c_predictor_accuracy(desk_runs):
    runs, _ = desk_runs
    accs = [runs[s]["ke"]["acc"] for s in SEEDS]
    floor = 5.0 / DEFAULTS["codebook_size"]
    record("9c", _majority([a > floor for a in accs]),
           f"test index accuracy per seed {', '.join(f'{a:.3f}' for a in accs)} "
           f"(need > {floor:.4f})")


def test_criterion_9d_online_tuning(desk_runs):
    runs, _ = desk_runs
    rows = [(runs[s]["ke"]["ood_before"], runs[s]["ke"]["ood_after"], runs[s]["ke"]["ood_skipped"])
            for s in SEEDS]
    votes = [(a[1] <= b[1]) and (a[0] < b[0]) for b, a, _ in rows]
    record("9d", _majority(votes),
           "OOD (L_Onl, RKMSE) before -> after per seed "
           + "; ".join(f"({b[0]:.3g}, {b[1]:.3f}) -> ({a[0]:.3g}, {a[1]:.3f}) skipped {k}/"
                       f"{DEFAULTS['online_steps']}" for b, a, k in rows))


def test_criterion_9e_ke_vs_vq(desk_runs):
    runs, _ = desk_runs
    pairs = [(runs[s]["ke"]["test_rkmse"], runs[s]["vq"]["test_rkmse"]) for s in SEEDS]
    record("9e", _majority([a <= b for a, b in pairs]),
           "test RKMSE KE vs VQ per seed " + ", ".join(f"{a:.3f} vs {b:.3f}" for a, b in pairs))


# ---------------------------------------------------------------------------- 10
def test_criterion_10_cli_smoke(tmp_path):
    d = tmp_path
    steps = [
        ["gen-dataset", "--out", str(d / "train")],
        ["gen-dataset", "--out", str(d / "test"), "--split", "test"],
        ["train-stage1", "--data", str(d / "train"), "--out", str(d / "ck")],
        ["train-stage2", "--data", str(d / "train"), "--ckpt", str(d / "ck")],
        ["evaluate", "--data", str(d / "test"), "--ckpt", str(d / "ck"),
         "--out", str(d / "eval.json")],
        ["sweep", "--data", str(d / "test"), "--ckpt", str(d / "ck"), "--axis", "snr",
         "--values", "0,12", "--out", str(d / "sweep.csv")],
        ["report", "--csv", str(d / "sweep.csv"), "--out", str(d / "report.md")],
    ]
    small = ["--set", "n_train=64", "--set", "epochs=10"]
    codes = []
    with Timer() as t:
        for argv in steps:
            codes.append(main(argv + (small if argv[0] in ("gen-dataset", "train-stage1",
                                                           "train-stage2") else [])))
            if codes[-1] != 0:
                break
    rows = read_sweep_csv(d / "sweep.csv") if all(c == 0 for c in codes) else []
    ok = codes == [0] * len(steps) and len(rows) == 2 and t.elapsed < 600
    record(10, ok, f"exit codes {codes}, {len(rows)} schema-valid sweep rows, {t.elapsed:.0f}s")
