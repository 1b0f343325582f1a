import json
import subprocess
import sys

import numpy as np
import pytest

from dlapprox import GraphBuilder, compare_models, model_cost, read_model, run_lossless_pass, write_model
from dlapprox.cli import main
from dlapprox.serialization import decode_tensors, encode_tensors

from _models import fusion_net


@pytest.fixture
def files(tmp_path):
    def save(m, stem):
        paths = tmp_path / f"{stem}.json", tmp_path / f"{stem}.bin"
        write_model(m, *paths)
        return [str(p) for p in paths]
    return save


def conv_bn_scale():
    b = GraphBuilder(3, 6, 6, seed=0)
    x = b.conv("conv", "data", 4, 3, pad=1)
    x = b.bn("bn", x)
    b.scale("sc", x)
    return b.build()


def test_fuse(files, tmp_path, capsys):
    model, weights = files(conv_bn_scale(), "in")
    out = [str(tmp_path / "f.json"), str(tmp_path / "f.bin")]
    assert main(["fuse", "--model", model, "--weights", weights, "--out-model", out[0], "--out-weights", out[1]]) == 0
    text = capsys.readouterr().out
    assert "nodes: 4 → 2" in text
    fused = read_model(*out)
    assert compare_models(conv_bn_scale(), fused)["max_abs"] <= 1e-4
    # second pass changes nothing
    assert main(["fuse", "--model", out[0], "--weights", out[1], "--out-model", out[0], "--out-weights", out[1]]) == 0
    assert "nodes: 2 → 2" in capsys.readouterr().out


def test_missing_weights_is_usage_error(files, capsys):
    model, _ = files(conv_bn_scale(), "in")
    assert main(["fuse", "--model", model, "--out-model", "x", "--out-weights", "y"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_files_exit_2(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert main(["flops", "--model", missing, "--weights", missing]) == 2
    (tmp_path / "bad.bin").write_bytes(b"JUNK")
    (tmp_path / "m.json").write_text("{}")
    assert main(["flops", "--model", str(tmp_path / "m.json"), "--weights", str(tmp_path / "bad.bin")]) == 2
    assert "error" in capsys.readouterr().err


def optimize_args(model, weights, tmp_path, *extra):
    return ["optimize", "--model", model, "--weights", weights, "--out-model", str(tmp_path / "o.json"),
            "--out-weights", str(tmp_path / "o.bin"), "--report", str(tmp_path / "r.json"), *extra]


def test_optimize(files, tmp_path, capsys):
    m = fusion_net(0)
    model, weights = files(m, "in")
    assert main(optimize_args(model, weights, tmp_path, "-p", "0.5")) == 0
    report = json.loads((tmp_path / "r.json").read_text(encoding="utf-8"))
    assert report["totals"]["flops_after"] <= report["totals"]["flops_before"]
    out = read_model(tmp_path / "o.json", tmp_path / "o.bin")
    assert model_cost(out).total_flops == report["totals"]["flops_after"]
    table = capsys.readouterr().out
    assert "FLOP delta" in table and "total flops" in table


def test_optimize_rejects_p_out_of_range(files, tmp_path):
    model, weights = files(fusion_net(0), "in")
    assert main(optimize_args(model, weights, tmp_path, "-p", "1.5")) == 2


def test_optimize_p_one_matches_fused(files, tmp_path):
    m = fusion_net(2)
    model, weights = files(m, "in")
    assert main(optimize_args(model, weights, tmp_path, "-p", "1.0", "--start-threshold", "1.0")) == 0
    out = read_model(tmp_path / "o.json", tmp_path / "o.bin")
    assert compare_models(run_lossless_pass(m), out)["max_abs"] <= 1e-4


def test_optimize_is_deterministic(files, tmp_path):
    model, weights = files(fusion_net(1), "in")
    outputs = []
    for workers in ("1", "3"):
        assert main(optimize_args(model, weights, tmp_path, "-p", "0.4", "--workers", workers)) == 0
        outputs.append([(tmp_path / f).read_bytes() for f in ("o.json", "o.bin", "r.json")])
    assert outputs[0] == outputs[1]


def test_flops_delegates_to_model_cost(files, capsys):
    m = fusion_net(0)
    model, weights = files(m, "in")
    assert main(["flops", "--model", model, "--weights", weights, "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["totals"]["flops"] == model_cost(m).total_flops
    assert main(["flops", "--model", model, "--weights", weights]) == 0
    assert str(model_cost(m).total_flops) in capsys.readouterr().out


def test_eval(files, tmp_path):
    m = fusion_net(0)
    model, weights = files(m, "in")
    x = np.random.default_rng(0).standard_normal(m.input_shape).astype(np.float32)
    (tmp_path / "x.bin").write_bytes(encode_tensors({"x": x}))
    assert main(["eval", "--model", model, "--weights", weights, "--input", str(tmp_path / "x.bin"),
                 "--out", str(tmp_path / "y.bin")]) == 0
    from dlapprox import forward
    got = decode_tensors((tmp_path / "y.bin").read_bytes())
    assert set(got) == {"fc2"}
    np.testing.assert_array_equal(got["fc2"], forward(m, x)["fc2"])
    for _ in range(2):
        assert main(["eval", "--model", model, "--weights", weights, "--random", "--seed", "3",
                     "--out", str(tmp_path / f"r{_}.bin")]) == 0
    assert (tmp_path / "r0.bin").read_bytes() == (tmp_path / "r1.bin").read_bytes()
    assert main(["eval", "--model", model, "--weights", weights, "--out", str(tmp_path / "z.bin")]) == 2


def test_diff(files, tmp_path, capsys):
    m = fusion_net(0)
    a = files(m, "a")
    b = files(run_lossless_pass(m), "b")
    args = ["diff", "--model-a", a[0], "--weights-a", a[1]]
    assert main(args + ["--model-b", a[0], "--weights-b", a[1]]) == 0
    assert json.loads(capsys.readouterr().out)["max_abs"] == 0.0
    assert main(args + ["--model-b", b[0], "--weights-b", b[1], "--tol", "1e-4"]) == 0
    capsys.readouterr()
    other_files = files(m, "c")
    # perturb one weight tensor to force a tolerance failure
    mm = read_model(*other_files)
    tensors = dict(mm.tensors)
    tensors["fc2_w"] = tensors["fc2_w"] + 1.0
    write_model(mm.with_nodes(mm.nodes, tensors), *other_files)
    assert main(args + ["--model-b", other_files[0], "--weights-b", other_files[1], "--n-inputs", "2"]) == 1


def test_module_entry_point(files):
    model, weights = files(conv_bn_scale(), "in")
    proc = subprocess.run([sys.executable, "-m", "dlapprox", "flops", "--model", model, "--weights", weights],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "total" in proc.stdout
