"""End-to-end acceptance criteria 1 to 11; each records a PASS/FAIL line in the terminal summary."""

import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE, DESK_DEPTH, desk_train_config
from gradcheck import max_rel_error, scalarize
from oracles import dense_conv
from octlatent import coder
from octlatent.entropy import FactorizedDensity, occupancy_bits, residual_rate, total_loss
from octlatent.metrics import RdPoint, bd_rate, bpip, chamfer, d1_psnr, d2_psnr
from octlatent.model import LatentModel, ModelConfig, OccupancyEmbedding, OccupancyHead, SoftOp
from octlatent.octree import build_octree, octree_to_voxels
from octlatent.pcio import QuantizedCloud, QuantParams, dequantize, quantize, round_half_away
from octlatent.pipeline import (
    SEG_TOP,
    CompressedFrame,
    bit_breakdown,
    compress,
    compress_quantized,
    decompress,
    decompress_voxels,
    model_bytes,
    occupancy_segment,
)
from octlatent.synthetic import structured_cloud
from octlatent.tensor import CUBE_OFFSETS, Coords, KernelWeights, ParamStore, SparseTensor, Tensor
from octlatent.tensor import downsample_conv, kernel_offsets, sparse_conv, upsample_conv
from octlatent.tensor.layers import IRNBlock, add, sub
from octlatent.train import TrainConfig, evaluate, train

MODES = [(2, True), (2, False), (1, True), (1, False)]


def _record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (ok, detail)


# 1 to 3: round trips on a structured corpus --------------------------------------


@pytest.fixture(scope="module")
def roundtrips():
    models = {m: LatentModel(ModelConfig.desk(markov_order=m[0], soft_ops=m[1], seed=17)) for m in MODES}
    sizes = np.geomspace(1000, 50000, 50).astype(int)
    results = []
    start = time.perf_counter()
    for i, n in enumerate(sizes):
        cloud = structured_cloud(3000 + i, int(n))
        depth = 4 + i % 5
        q = quantize(cloud, depth)
        for mode, model in models.items():
            frame = compress(cloud, model, depth)
            blob = frame.to_bytes()
            vox = decompress_voxels(CompressedFrame.from_bytes(blob), model)
            results.append(dict(cloud=cloud, q=q, depth=depth, mode=mode, frame=frame, vox=vox))
    return results, time.perf_counter() - start


def test_criterion_01_lossless_roundtrip(roundtrips):
    results, seconds = roundtrips
    exact = sum(np.array_equal(r["vox"], r["q"].voxels) for r in results)
    depths = sorted({r["depth"] for r in results})
    sizes = [len(r["cloud"]) for r in results]
    ok = exact == len(results) == 200 and seconds < 300 and depths == [4, 5, 6, 7, 8]
    _record(1, ok, f"{exact}/{len(results)} exact (50 clouds x 4 modes, {min(sizes)}-{max(sizes)} points, "
                   f"L {depths[0]}-{depths[-1]}) in {seconds:.0f} s")
    assert ok


def test_criterion_02_distortion_bound(roundtrips):
    results, _ = roundtrips
    worst_axis, worst_cd = 0.0, 0.0
    ok = True
    for r in results[::4]:  # geometry is identical across modes once criterion 1 holds
        cloud, q = r["cloud"], r["q"]
        rec = dequantize(type(q)(r["vox"], q.params)).points
        qs = q.params.qs
        idx = np.clip(round_half_away((cloud.points - np.asarray(q.params.bias)) / qs), 0, 2**r["depth"] - 1)
        centers = np.asarray(q.params.bias) + qs * idx
        axis = float(np.max(np.abs(cloud.points - centers)))
        cd = chamfer(cloud.points, rec)
        worst_axis = max(worst_axis, axis / qs)
        worst_cd = max(worst_cd, cd / qs)
        ok &= axis <= qs / 2 + 1e-9 and cd <= qs * np.sqrt(3) / 2
        # every point's own voxel center is in the reconstruction
        ok &= len(np.unique(np.vstack([rec, centers]), axis=0)) == len(rec)
    _record(2, bool(ok), f"max axis error {worst_axis:.3f} qs (bound 0.5), max chamfer {worst_cd:.3f} qs "
                         f"(bound {np.sqrt(3) / 2:.3f})")
    assert ok


def test_criterion_03_coder_tightness(roundtrips, trained_model, held_out):
    results, _ = roundtrips
    slack = []
    for r in results:
        for sid, n, table_bits, _ in r["frame"].stats:
            slack.append(8 * len(r["frame"].segment(sid)) - table_bits)
    penalty = []
    for tree in held_out:
        frame = compress_quantized(_quantized(tree), trained_model)
        for sid, n, table_bits, model_bits in frame.stats:
            slack.append(8 * len(frame.segment(sid)) - table_bits)
            if sid != SEG_TOP:
                penalty.append((table_bits - model_bits) / n)
    ok = max(slack) <= 64 and max(penalty) <= 0.01
    _record(3, ok, f"max overhead {max(slack):.1f} bits/segment (bound 64), max table penalty "
                   f"{max(penalty):.5f} bit/symbol on the trained model (bound 0.01)")
    assert ok


def _quantized(tree):
    return QuantizedCloud(octree_to_voxels(tree), QuantParams((0.0, 0.0, 0.0), 1.0, tree.depth))


# 4: gradients --------------------------------------------------------------------


# ReLU nets: small steps, two of them, so a difference straddling a kink is not mistaken for an error
KINK_STEP = (1e-5, 1e-6)


def _sparse(r, n, c, span=4):
    coords = Coords.from_points(r.integers(0, span, (n, 3)))
    return SparseTensor(coords, Tensor(r.normal(size=(len(coords), c))))


def _fd_sparse_conv(seed):
    r = np.random.default_rng(seed)
    x = _sparse(r, 12, 2)
    kw = KernelWeights(kernel_offsets(3), Tensor(r.normal(size=(27, 2, 2))), Tensor(r.normal(size=2)))
    return max_rel_error(lambda: scalarize(sparse_conv(x, kw).features, seed), [x.features, kw.weight, kw.bias])


def _fd_down(seed):
    r = np.random.default_rng(seed)
    x = _sparse(r, 20, 2, span=6)
    kw = KernelWeights(CUBE_OFFSETS, Tensor(r.normal(size=(8, 2, 3))))
    return max_rel_error(lambda: scalarize(downsample_conv(x, kw).features, seed), [x.features, kw.weight])


def _fd_up(seed):
    r = np.random.default_rng(seed)
    fine = Coords.from_points(r.integers(0, 8, (25, 3)))
    x = SparseTensor(fine.parents(), Tensor(r.normal(size=(len(fine.parents()), 2))))
    kw = KernelWeights(CUBE_OFFSETS, Tensor(r.normal(size=(8, 2, 3))))
    return max_rel_error(lambda: scalarize(upsample_conv(x, kw, fine).features, seed), [x.features, kw.weight])


def _store_params(store):
    return [t for _, t in store.items()]


def _randomize(store, r, scale=0.5):
    for _, t in store.items():
        t.data = r.normal(scale=scale, size=t.data.shape)


def _fd_irn(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    block = IRNBlock(store, "irn", 4, r)
    _randomize(store, r)
    x = _sparse(r, 10, 4)
    return max_rel_error(lambda: scalarize(block(x).features, seed), [x.features] + _store_params(store), step=KINK_STEP)


def _fd_embedding(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    emb = OccupancyEmbedding(store, 2, r)
    _randomize(store, r)
    coords = Coords.from_points(r.integers(0, 4, (10, 3)))
    occ = r.integers(1, 256, len(coords))
    return max_rel_error(lambda: scalarize(emb(coords, occ).features, seed), _store_params(store), step=KINK_STEP)


def _fd_soft_ops(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    op = SoftOp(store, "h", 2, r, pass_first=True)
    _randomize(store, r)
    a = _sparse(r, 10, 2)
    b = SparseTensor(a.coords, Tensor(r.normal(size=a.F.shape)))
    def build():
        h = op(a, b)
        return scalarize(sub(a, h).features, seed) + scalarize(add(b, h).features, seed + 1)

    return max_rel_error(build, [a.features, b.features] + _store_params(store), step=KINK_STEP)


def _fd_density(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    d = FactorizedDensity(store, "d", 2)
    for _, t in store.items():
        t.data = t.data + r.normal(scale=0.3, size=t.data.shape)
    v = Tensor(r.normal(scale=2, size=(5, 2)))
    return max_rel_error(lambda: residual_rate(v, d, "train"), [v] + _store_params(store))


def _fd_head(seed):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(k=1, D=2, E=2, hidden=2, irn_count=0)
    store = ParamStore()
    head = OccupancyHead(store, "head", cfg, r)
    _randomize(store, r, 0.3)
    fine = Coords.from_points(r.integers(0, 8, (12, 3)))
    mid = fine.parents()
    coarse = mid.parents()
    mk = lambda c, ch: SparseTensor(c, Tensor(r.normal(size=(len(c), ch))))
    fhat, e1, f1, e2 = mk(fine, 2), mk(mid, 2), mk(mid, 2), mk(coarse, 2)
    sym = r.integers(1, 256, len(fine))
    tensors = [fhat.features, e1.features, f1.features, e2.features] + _store_params(store)
    return max_rel_error(lambda: occupancy_bits(head(fhat, e1, f1, e2), sym), tensors, step=KINK_STEP)


def _fd_loss(seed):
    model = LatentModel(ModelConfig(k=2, D=2, E=2, hidden=2, irn_count=0, seed=seed))
    r = np.random.default_rng(seed)
    vox = np.unique(r.integers(0, 16, (25, 3)), axis=0)
    tree = build_octree(QuantizedCloud(vox, QuantParams((0.0, 0.0, 0.0), 1.0, 4)))
    for _, t in model.store.items():  # move off the exact kinks of zero-initialized biases
        t.data = t.data + r.normal(scale=0.05, size=t.data.shape)
    picks = [model.store[n] for n in ("emb.b0", "pred1.out.b", "pred2.out.b", "density0.b2", "density2.b0",
                                      "hs1.c2.b", "ha2.c2.b", "enc0.fuse.b", "head2.c2.b")]

    def build():
        rep, _ = model.forward(tree, "train", np.random.default_rng(seed))
        return total_loss(rep, 0.5)

    return max_rel_error(build, picks, step=KINK_STEP)


PRIMITIVES = {
    "sparse conv": _fd_sparse_conv,
    "downsample": _fd_down,
    "upsample": _fd_up,
    "IRN": _fd_irn,
    "embedding": _fd_embedding,
    "soft add/sub": _fd_soft_ops,
    "factorized density": _fd_density,
    "softmax head": _fd_head,
    "loss": _fd_loss,
}


def test_criterion_04_gradients():
    worst = {name: max(fn(seed) for seed in range(20)) for name, fn in PRIMITIVES.items()}
    ok = all(v < 1e-4 for v in worst.values())
    name = max(worst, key=worst.get)
    _record(4, ok, f"{len(worst)} primitives x 20 instances, worst relative error {worst[name]:.1e} ({name})")
    assert ok, worst


# 5: dense oracle -----------------------------------------------------------------


def test_criterion_05_dense_oracle():
    grid = Coords(np.array([[x, y, z] for x in range(4) for y in range(4) for z in range(4)]))
    worst = 0.0
    for draw in range(100):
        r = np.random.default_rng(draw)
        size = (1, 3, 5)[draw % 3]
        cin, cout = int(r.integers(1, 4)), int(r.integers(1, 4))
        kw = KernelWeights(kernel_offsets(size), Tensor(r.normal(size=(size**3, cin, cout))),
                           Tensor(r.normal(size=cout)) if draw % 2 else None)
        x = SparseTensor(grid, Tensor(r.normal(size=(64, cin))))
        dense = dense_conv(x.F.reshape(4, 4, 4, cin), kw, size).reshape(64, cout)
        got = sparse_conv(x, kw).F
        worst = max(worst, float(np.max(np.abs(got - dense)) / max(1.0, np.max(np.abs(dense)))))
    ok = worst <= 1e-9
    _record(5, ok, f"100 draws, worst relative deviation {worst:.1e}")
    assert ok


# 6, 7: learning on the desk corpus -----------------------------------------------


@pytest.fixture(scope="module")
def held_out_frames(trained_model, held_out):
    return [compress_quantized(_quantized(t), trained_model) for t in held_out]


def test_criterion_06_learning_effectiveness(trained_model, held_out, held_out_frames):
    top = trained_model.top_layer(DESK_DEPTH)
    learned, baseline, nodes = 0, 0, 0
    for tree, frame in zip(held_out, held_out_frames):
        learned += sum(8 * len(frame.segment(occupancy_segment(j))) for j in range(1, trained_model.cfg.k + 1))
        layer_bytes = np.concatenate([tree.layer(l).occupancy for l in range(top + 1, DESK_DEPTH + 1)])
        baseline += 8 * len(coder.adaptive_encode(layer_bytes))
        nodes += len(layer_bytes)
    steps = trained_model.train_state.step
    per_node = learned / nodes
    gain = 100.0 * (1 - learned / baseline)
    minutes = trained_model.train_seconds / 60
    ok = per_node < 8.0 and gain >= 10.0 and steps <= 5000 and minutes < 20
    _record(6, ok, f"{per_node:.2f} bits/node on layers {top + 1}-{DESK_DEPTH}, {gain:.1f}% below adaptive "
                   f"order-0 ({learned} vs {baseline} bits) after {steps} steps ({minutes:.1f} min)")
    assert ok


def test_criterion_07_latent_utility(trained_model, held_out):
    with_latent = evaluate(trained_model, held_out).occupancy_total
    without = evaluate(trained_model, held_out, drop_latent=True).occupancy_total
    rise = 100.0 * (without / with_latent - 1)
    ok = rise >= 5.0
    _record(7, ok, f"occupancy cross-entropy +{rise:.1f}% without latents ({with_latent:.0f} -> {without:.0f} bits)")
    assert ok


# 8: single-pass decoding ---------------------------------------------------------


def test_criterion_08_single_pass():
    seen = []
    for depth in (4, 6, 8):
        for mode in MODES:
            for k in (1, 3):
                model = LatentModel(ModelConfig.desk(k=k, markov_order=mode[0], soft_ops=mode[1]))
                frame = compress(structured_cloud(depth + k, 3000), model, depth)
                model.counters = {"head": -5, "predict": 7}
                decompress_voxels(frame, model)
                seen.append(model.counters == {"head": k, "predict": k})
    ok = all(seen)
    _record(8, ok, f"{sum(seen)}/{len(seen)} decodes ran exactly k head and k prediction passes")
    assert ok


# 9: ablations (soft gate) --------------------------------------------------------


def _validation_loss(model, trees) -> float:
    rep = evaluate(model, trees)
    return total_loss(rep, desk_train_config().alpha_late) / rep.n_points


def test_criterion_09_ablation_direction(trained_model, desk_corpus, held_out):
    base = _validation_loss(trained_model, held_out)
    hard, _ = train(desk_corpus, ModelConfig.desk(soft_ops=False), desk_train_config())
    first, _ = train(desk_corpus, ModelConfig.desk(markov_order=1), desk_train_config())
    plain, order1 = _validation_loss(hard, held_out), _validation_loss(first, held_out)
    soft_ok, order_ok = base <= plain * 1.02, base <= order1 * 1.02
    ok = soft_ok and order_ok
    detail = (f"soft on {base:.4f} vs off {plain:.4f} bpop ({'ok' if soft_ok else 'reversed'}), "
              f"order 2 {base:.4f} vs order 1 {order1:.4f} bpop ({'ok' if order_ok else 'reversed'}); report only")
    _record(9, ok, detail)
    if not ok:
        warnings.warn(f"ablation direction not reproduced at desk scale: {detail}")


# 10: metrics ---------------------------------------------------------------------


def test_criterion_10_metrics():
    checks = {}
    o = np.zeros((1, 3))
    checks["chamfer identical"] = chamfer(o, o) == 0.0
    checks["chamfer 3-4-5"] = chamfer(o, np.array([[3.0, 4.0, 0.0]])) == 5.0
    checks["chamfer directed means"] = chamfer(np.array([[0.0, 0, 0], [10.0, 0, 0]]), o) == 5.0
    checks["d1 identical"] = d1_psnr(o, o, 1.0) == float("inf")
    d, p = 0.7, 30000.0
    checks["d1 closed form"] = abs(d1_psnr(o, o + [d, 0, 0], p) - 10 * np.log10(3 * p * p / d**2)) <= 1e-9
    plane = np.array([[x, y, 0.0] for x in range(5) for y in range(5)])
    checks["d2 identical"] = d2_psnr(plane, plane, 1.0) == float("inf")
    checks["d2 in-plane shift"] = d2_psnr(plane, plane + [0.2, 0, 0], 1.0) == float("inf")
    lifted = plane + [0, 0, 0.3]
    checks["d2 parallel shift"] = abs(d2_psnr(plane, lifted, 1.0) - d1_psnr(plane, lifted, 1.0)) <= 1e-9
    checks["bpip"] = bpip(b"\x00" * 1000, 1000) == 8.0 and bpip(1000, 2000) == 4.0
    model = LatentModel(ModelConfig.desk())
    frame = compress(structured_cloud(1, 2000), model, 6)
    checks["bpip vs breakdown"] = abs(bpip(frame, 2000) - bit_breakdown(frame).total / 2000) <= 1e-9
    dist = np.array([30.0, 33.0, 36.0, 39.0, 42.0])
    a = [RdPoint(float(np.exp(0.1 * x)), x) for x in dist]
    b = [RdPoint(0.8 * pt.rate, pt.d1) for pt in a]
    checks["bd identical"] = bd_rate(a, a) == 0.0
    shift = bd_rate(a, b)
    checks["bd -20%"] = abs(shift + 20.0) <= 0.02
    failed = [k for k, v in checks.items() if not v]
    ok = not failed
    _record(10, ok, f"{len(checks) - len(failed)}/{len(checks)} metric examples exact; bd shift {shift:.4f}%"
            + (f"; failed {failed}" if failed else ""))
    assert ok


# 11: determinism -----------------------------------------------------------------


def _seeded_run():
    clouds = [structured_cloud(s, 3000) for s in range(700, 720)]
    cfg = TrainConfig(depth=DESK_DEPTH, epochs=10, max_steps=200, lr=3e-3, seed=3)
    model, state = train(clouds, ModelConfig.desk(seed=3), cfg)
    probe = structured_cloud(999, 5000)
    blob = compress(probe, model, DESK_DEPTH).to_bytes()
    rec = decompress(CompressedFrame.from_bytes(blob), model)
    return model_bytes(model), blob, rec.points, state.step


def test_criterion_11_determinism():
    ck_a, frame_a, rec_a, steps = _seeded_run()
    ck_b, frame_b, rec_b, _ = _seeded_run()
    ok = ck_a == ck_b and frame_a == frame_b and np.array_equal(rec_a, rec_b) and steps == 200
    _record(11, ok, f"{steps} steps x 2 runs: checkpoints ({len(ck_a)} B) and frames ({len(frame_a)} B) "
                    f"{'identical' if ok else 'differ'}")
    assert ok
