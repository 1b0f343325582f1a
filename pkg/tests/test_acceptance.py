"""Acceptance criteria 1-8, each at its stated tolerance and time budget."""
import json

import numpy as np
from scipy.stats import spearmanr

from dlapprox import GraphBuilder, compare_models, load_model, model_cost, read_model, save_model, write_model
from dlapprox.cli import main
from dlapprox.evaluator import MultiplyCounter, conv2d_naive, deconv2d_naive, fully_connected_naive
from dlapprox.factorization import (
    BUILDERS,
    CHAIN_INNER_KINDS,
    FILTER_WISE,
    SINGLE_KINDS,
    Layer,
    SearchOptions,
    applicable,
    chain,
    chain_sublayer,
    enumerate_candidates,
    is_power_of_two,
    max_rank,
)
from dlapprox.flops import layer_flops
from dlapprox.fusion import run_lossless_pass_logged
from dlapprox.model_ir import ConvParams, LayerKind, infer_shapes
from dlapprox.selector import (
    SHARED_INPUT,
    SelectorConfig,
    apply_candidate,
    find_approximation_groups,
    group_candidate,
    optimize_model,
)
from dlapprox.tensor_core import svd, truncate

from _acceptance_log import criterion
from _models import branch_net, fusion_net, residual_net, shared_input_net, six_layer_cnn


def test_c1_fusion_exactness():
    with criterion(1, "fusion exactness", budget_s=10) as info:
        worst = 0.0
        for seed in range(10):
            m = fusion_net(seed)
            fused, events = run_lossless_pass_logged(m)
            assert {e.pattern for e in events} == {"bn-scale-after", "bn-scale-before", "adjacent-representation"}
            worst = max(worst, compare_models(m, fused, n_inputs=16, seed=seed)["max_abs"])
        info["max_abs"] = f"{worst:.2e}"
        assert worst <= 1e-4


def _layer_shape(rng):
    co, ci = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    k = int(rng.choice([2, 3, 5]))
    s = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k // 2 + 1))
    h = int(rng.integers(k + 1, 11))
    b = GraphBuilder(ci, h, h, seed=int(rng.integers(1 << 30)))
    b.conv("L", "data", co, k, stride=s, pad=pad)
    m = b.build()
    return m, Layer.from_model(m, "L")


def test_c2_full_rank_round_trips():
    with criterion(2, "full-rank round trips", budget_s=30) as info:
        rng = np.random.default_rng(2024)
        worst_single = worst_chain = 0.0
        n_checked = 0
        for i in range(20):
            m, layer = _layer_shape(rng)
            for kind in SINGLE_KINDS:
                assert applicable(layer, kind)
                c = BUILDERS[kind](layer, max_rank(layer, kind), require_reduction=False)
                err = compare_models(m, apply_candidate(m, "L", c), n_inputs=8, seed=i)["max_abs"]
                worst_single = max(worst_single, err)
                n_checked += 1
            for inner in CHAIN_INNER_KINDS:
                b2 = max_rank(layer, inner)
                _, _, sub = chain_sublayer(layer, inner, b2)
                for outer in SINGLE_KINDS:
                    if not applicable(sub, outer):
                        continue
                    c = chain(layer, outer, max_rank(sub, outer), inner, b2, require_reduction=False)
                    err = compare_models(m, apply_candidate(m, "L", c), n_inputs=8, seed=i)["max_abs"]
                    worst_chain = max(worst_chain, err)
                    n_checked += 1
        info.update(replacements=n_checked, single=f"{worst_single:.2e}", chain=f"{worst_chain:.2e}")
        assert worst_single <= 1e-4
        assert worst_chain <= 2e-4


def test_c3_eckart_young():
    with criterion(3, "Eckart-Young optimality", budget_s=10) as info:
        rng = np.random.default_rng(3)
        worst_rel = 0.0
        for _ in range(10):
            a = rng.standard_normal((12, 9))
            r = svd(a)
            sigma = np.linalg.svd(a, compute_uv=False)
            for b in (1, 2, 4):
                left, right = truncate(r, b)
                err = np.linalg.norm(a - left.astype(np.float64) @ right)
                tail = np.sqrt(np.sum(sigma[b:] ** 2))
                worst_rel = max(worst_rel, abs(err - tail) / tail)
                # random left factor, best possible right factor for it
                xs = rng.standard_normal((1000, 12, b))
                ys = np.linalg.pinv(xs) @ a
                random_errs = np.linalg.norm(a - xs @ ys, axis=(1, 2))
                assert err <= random_errs.min() + 1e-9
        info["tail_rel_err"] = f"{worst_rel:.2e}"
        assert worst_rel <= 1e-5


def _count(kind, p, shape, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    w = rng.standard_normal(p.weight_dims(kind)).astype(np.float32)
    counter = MultiplyCounter()
    fn = {LayerKind.CONVOLUTION: conv2d_naive, LayerKind.DECONVOLUTION: deconv2d_naive,
          LayerKind.FULLY_CONNECTED: fully_connected_naive}[kind]
    fn(x, w, None, p, counter)
    return counter.count


def _sample_config(rng, i):
    """Configurations where the closed form counts every multiply: convolutions
    whose output grid is exactly the input grid divided by the stride, stride-1
    deconvolutions, and fully-connected layers."""
    kind = [LayerKind.CONVOLUTION] * 4 + [LayerKind.DECONVOLUTION, LayerKind.FULLY_CONNECTED]
    kind = kind[i % len(kind)]
    g = int(rng.choice([1, 2, 4]))
    ci, co = g * int(rng.integers(1, 4)), g * int(rng.integers(1, 4))
    if kind is LayerKind.FULLY_CONNECTED:
        c, h = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        return kind, ConvParams(co, c * h * h), (c, h, h)
    k = int(rng.choice([1, 3, 5]))
    if kind is LayerKind.DECONVOLUTION:
        h, pad = int(rng.integers(2, 6)), int(rng.integers(0, k // 2 + 1))
        return kind, ConvParams(co, ci, k, k, 1, 1, pad, pad, g), (ci, h, h)
    s = int(rng.choice([1, 2]))
    h = s * int(rng.integers(2, 5))
    return kind, ConvParams(co, ci, k, k, s, s, k // 2, k // 2, g), (ci, h, h)


def test_c4_flop_oracle():
    with criterion(4, "FLOP oracle equivalence") as info:
        rng = np.random.default_rng(4)
        seen = set()
        for i in range(30):
            kind, p, shape = _sample_config(rng, i)
            seen.add((kind.value, p.s_h, p.g))
            assert layer_flops(kind, p, shape) == _count(kind, p, shape, rng), (kind, p, shape)
        b = GraphBuilder(8, 8, 8, seed=4)
        b.conv("L", "data", 16, 3, pad=1)
        layer = Layer.from_model(b.build(), "L")
        cands = enumerate_candidates(layer, SearchOptions(rank_grid="all", max_chain=1))
        fw = sorted(c.b[0] for c in cands if c.kind == FILTER_WISE)
        assert fw == list(range(1, 14))
        info.update(configs=30, distinct=len(seen), filter_wise_ranks=f"1..{fw[-1]}")


P_SWEEP = (0.9, 0.8, 0.7, 0.6, 0.5, 0.4)


def test_c5_p_sweep_trend():
    with criterion(5, "p-sweep trend", budget_s=60) as info:
        m = six_layer_cnn()
        flops, errs = [], []
        for p in P_SWEEP:
            out, rep = optimize_model(m, SelectorConfig(p=p))
            flops.append(rep.totals["flops_after"])
            errs.append(compare_models(m, out, n_inputs=16, seed=0)["mean_rel"])
        step = np.arange(len(P_SWEEP))
        rho_flops = spearmanr(step, flops)[0]
        rho_err = spearmanr(step, errs)[0]
        info.update(flops=flops, mean_rel=[round(e, 4) for e in errs],
                    rho_flops=round(float(rho_flops), 3), rho_err=round(float(rho_err), 3))
        assert all(a >= b for a, b in zip(flops, flops[1:]))
        assert rho_flops <= 0
        assert rho_err >= 0


def _audit(m, cfg):
    out, rep = optimize_model(m, cfg)
    doc = json.loads(rep.dumps())
    assert doc["totals"]["flops_after"] <= doc["totals"]["flops_before"]
    assert model_cost(out).total_flops <= model_cost(m).total_flops
    for rec in doc["layers"]:
        if rec["action"] == "factorized":
            assert rec["A"] >= rec["threshold"], rec
    before, after = infer_shapes(m), infer_shapes(out)
    for edge in set(before) & set(after):
        assert before[edge] == after[edge], edge
    assert out.terminal_edges() == m.terminal_edges()
    return out, rep


def test_c6_invariants(tmp_path):
    with criterion(6, "invariant suite") as info:
        runs = 0
        models = [fusion_net(0), fusion_net(7), six_layer_cnn(), residual_net(), shared_input_net(), branch_net()]
        for m in models:
            manifest, blob = save_model(m)
            again = load_model(manifest, blob)
            assert again.graph_equal(m) and save_model(again) == (manifest, blob)
            write_model(m, tmp_path / "m.json", tmp_path / "m.bin")
            assert read_model(tmp_path / "m.json", tmp_path / "m.bin").graph_equal(m)
            for p in (0.9, 0.5, 0.2):
                for target in ("cpu", "gpu"):
                    outs = [_audit(m, SelectorConfig(p=p, target=target, workers=w)) for w in (1, 1, 4)]
                    runs += len(outs)
                    model_bytes = {save_model(o) for o, _ in outs}
                    report_bytes = {r.dumps() for _, r in outs}
                    assert len(model_bytes) == 1 and len(report_bytes) == 1
        info["optimize_runs"] = runs


def test_c7_group_factorization():
    with criterion(7, "group factorization") as info:
        m = shared_input_net()
        (group,) = find_approximation_groups(m)
        assert group.kind == SHARED_INPUT
        full = group_candidate(m, group, group.max_rank)
        err = compare_models(m, apply_candidate(m, "left", full))["max_abs"]
        assert err <= 1e-4

        m = branch_net()
        out, rep = optimize_model(m, SelectorConfig(p=0.5))
        records = {r["name"]: r for r in rep.layers}
        assert records["left"]["group"]["kind"] == SHARED_INPUT
        b = records["left"]["b"]
        branch_group = next(g for g in find_approximation_groups(m) if g.kind == SHARED_INPUT)
        assert b < branch_group.max_rank
        shared = [n for n in out.nodes if n.name in records["left"]["nodes"] and n.name in records["right"]["nodes"]]
        assert len(shared) == 1
        consumers = out.consumers()[shared[0].output]
        assert len(consumers) == 2
        info.update(full_rank_max_abs=f"{err:.2e}", reduced_rank=b, consumers=len(consumers))


def _intermediate_channels(out, report):
    """Channel counts of every edge created by a factorization."""
    shapes = infer_shapes(out)
    originals = {r["name"] for r in report["layers"]}
    counts = []
    for rec in report["layers"]:
        if rec["action"] != "factorized":
            continue
        for name in rec["nodes"]:
            node = out.node(name)
            if node.output not in originals:
                counts.append(shapes[node.output][0])
    return counts


def test_c8_gpu_target(tmp_path):
    with criterion(8, "GPU power-of-two intermediates") as info:
        total = 0
        for i, m in enumerate([six_layer_cnn(), branch_net(), residual_net(), fusion_net(3)]):
            write_model(m, tmp_path / "in.json", tmp_path / "in.bin")
            for p in ("0.6", "0.3"):
                code = main(["optimize", "--model", str(tmp_path / "in.json"), "--weights", str(tmp_path / "in.bin"),
                             "-p", p, "--target", "gpu", "--out-model", str(tmp_path / "o.json"),
                             "--out-weights", str(tmp_path / "o.bin"), "--report", str(tmp_path / "r.json")])
                assert code == 0
                out = read_model(tmp_path / "o.json", tmp_path / "o.bin")
                doc = json.loads((tmp_path / "r.json").read_text(encoding="utf-8"))
                counts = _intermediate_channels(out, doc)
                assert all(is_power_of_two(c) for c in counts), counts
                total += len(counts)
        assert total > 0
        info["intermediate_edges_checked"] = total
