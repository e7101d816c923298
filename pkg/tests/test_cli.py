import numpy as np
import pytest

from cpflow import cli, flow_io, network, pnm, synth


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen", "--count", "3", "--seed", "1", "--out", str(root / "train"), "--height", "32", "--width", "32", "--max-objects", "3", "--min-size", "8", "--max-size", "14"]) == 0
    assert cli.main(["gen", "--count", "2", "--seed", "2", "--out", str(root / "val"), "--height", "32", "--width", "32", "--max-objects", "3", "--min-size", "8", "--max-size", "14"]) == 0
    return root


def test_gen(tmp_path, capsys):
    assert cli.main(["gen", "--count", "10", "--seed", "1", "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out.strip()
    assert out.endswith("manifest.txt")
    assert len((tmp_path / "a" / "manifest.txt").read_text().splitlines()) == 10
    assert len(list((tmp_path / "a").glob("scene_*.ppm"))) == 10
    assert cli.main(["gen", "--count", "10", "--seed", "1", "--out", str(tmp_path / "b")]) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")


def test_gen_count_zero(tmp_path, capsys):
    assert cli.main(["gen", "--count", "0", "--out", str(tmp_path)]) != 0
    assert "count must be ≥ 1" in capsys.readouterr().err


def test_unknown_option_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen", "--count", "1", "--out", str(tmp_path), "--colour", "red"])
    assert exc.value.code != 0


def test_train_and_reproducible(dataset, tmp_path):
    args = ["train", "--train", str(dataset / "train/manifest.txt"), "--val", str(dataset / "val/manifest.txt"),
            "--max-steps", "4", "--val-interval", "2", "--n-s", "32", "--batch-size", "2", "--seed", "3"]
    assert cli.main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "r2")]) == 0
    assert _files(tmp_path / "r1") == _files(tmp_path / "r2")
    rows = (tmp_path / "r1" / "train_log.csv").read_text().splitlines()
    assert rows[0] == "step,train_loss,val_loss,sigma_sq"
    assert np.isfinite(float(rows[-1].split(",")[2]))
    params = network.load_checkpoint(tmp_path / "r1" / "model.cpm")
    assert "kernel.rho" in params


def test_train_baseline(dataset, tmp_path):
    args = ["train-baseline", "--train", str(dataset / "train/manifest.txt"), "--val", str(dataset / "val/manifest.txt"),
            "--max-steps", "2", "--val-interval", "2", "--n-s", "32", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    assert network.is_baseline(network.load_checkpoint(tmp_path / "model.cpm"))


def test_train_lr_defaults():
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--train", "a", "--val", "b"])
    assert args.lr is None
    from cpflow.trainer import TrainConfig

    assert TrainConfig(loss="similarity", lr=args.lr).lr == 1e-4
    assert TrainConfig(loss="baseline", lr=args.lr).lr == 0.01


def test_train_missing_manifest(tmp_path, capsys):
    code = cli.main(["train", "--train", str(tmp_path / "nope.txt"), "--val", str(tmp_path / "v.txt"), "--out", str(tmp_path)])
    assert code != 0
    assert "nope.txt" in capsys.readouterr().err


def test_grad_check(capsys):
    assert cli.main(["grad-check", "--seeds", "2"]) == 0
    out = capsys.readouterr().out
    assert "loss-level max rel err" in out and "≤ 0.0001: PASS" in out
    assert "full-chain" in out and "FAIL" not in out


def test_grad_check_five_seeds():
    assert cli.main(["grad-check", "--seeds", "5"]) == 0


def test_grad_check_corrupted(capsys):
    assert cli.main(["grad-check", "--seeds", "1", "--corrupt-loss", "rho"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "failing block: rho" in out
    assert cli.main(["grad-check", "--seeds", "1", "--corrupt-chain", "head.w1"]) == 1
    assert "failing block: head.w1" in capsys.readouterr().out


def test_embed(dataset, tmp_path):
    ckpt = tmp_path / "m.cpm"
    network.save_checkpoint(network.init_params(0), ckpt)
    image = dataset / "train" / "scene_00000.ppm"
    for name in ("a.ppm", "b.ppm"):
        assert cli.main(["embed", "--checkpoint", str(ckpt), "--image", str(image), "--out", str(tmp_path / name), "--seed", "4"]) == 0
    a = pnm.read_pnm(tmp_path / "a.ppm")
    assert a.shape == (32, 32, 3)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()


def test_constant_embedding_is_uniform():
    rgb = cli.embeddings_to_rgb(np.tile(np.eye(16)[3], (20, 1)), 4, 5, 0)
    assert np.all(rgb == cli.MID_GRAY)
    P = cli.random_projection(16, 9)
    np.testing.assert_allclose(np.linalg.norm(P, axis=1), 1.0)


def test_kernel_row_flow(dataset, tmp_path):
    flow_path = dataset / "train" / "scene_00000.flo16"
    out = tmp_path / "row.pgm"
    assert cli.main(["kernel-row", "--kernel", "flow", "--flow", str(flow_path), "--pixel", "16,16", "--out", str(out)]) == 0
    heat = pnm.read_pnm(out)
    assert heat.shape == (32, 32)
    assert heat[16, 16] == 255
    raw = flow_io.decode_flow(flow_io.read_flow_file(flow_path))
    row = cli.kernel_row("flow", (16, 16), flow=flow_io.normalize_values(raw.data))
    assert row[16, 16] == 1.0


def test_kernel_row_constant_flow(tmp_path):
    enc = flow_io.encode_flow(flow_io.FlowField(np.full((16, 16, 2), 2.5)))
    flow_io.write_flow_file(enc, tmp_path / "c.flo16")
    assert cli.main(["kernel-row", "--flow", str(tmp_path / "c.flo16"), "--pixel", "3,4", "--out", str(tmp_path / "h.pgm")]) == 0
    heat = pnm.read_pnm(tmp_path / "h.pgm")
    assert np.all(heat == heat[0, 0])


def test_kernel_row_embedding(dataset, tmp_path):
    params = network.init_params(0)
    ckpt = tmp_path / "m.cpm"
    network.save_checkpoint(params, ckpt)
    image = pnm.read_pnm(dataset / "train" / "scene_00000.ppm") / 255.0
    row = cli.kernel_row("embedding", (2, 3), image=image, params=params)
    assert row.min() >= -0.25 and row.max() <= 0.25
    assert row[2, 3] == 0.25
    out = tmp_path / "e.pgm"
    args = ["kernel-row", "--kernel", "embedding", "--checkpoint", str(ckpt), "--image", str(dataset / "train" / "scene_00000.ppm"), "--pixel", "2,3", "--out", str(out)]
    assert cli.main(args) == 0
    assert cli.main(args[:-2] + ["--pixel", "40,0", "--out", str(out)]) != 0


def test_eval_grouping(dataset, tmp_path, capsys):
    ckpt = tmp_path / "m.cpm"
    network.save_checkpoint(network.init_params(0), ckpt)
    assert cli.main(["eval-grouping", "--checkpoint", str(ckpt), "--manifest", str(dataset / "val/manifest.txt"), "--n-s", "128"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "scene,margin"
    assert len(lines) == 4
    assert lines[-1].startswith("mean,")
    assert len(lines[-1].split(",")[1].split(".")[1]) == 6

    base = tmp_path / "b.cpm"
    network.save_checkpoint(network.init_baseline_params(0), base)
    args = ["eval-grouping", "--checkpoint", str(base), "--manifest", str(dataset / "val/manifest.txt"), "--n-s", "128"]
    assert cli.main(args + ["--features", "hypercolumn"]) == 0
    capsys.readouterr()
    empty = tmp_path / "manifest.txt"
    empty.write_text("")
    assert cli.main(["eval-grouping", "--checkpoint", str(ckpt), "--manifest", str(empty)]) != 0


def test_flow_enc_dec(tmp_path, capsys):
    rng = np.random.default_rng(0)
    data = rng.uniform(-50, 50, (3, 4, 2))
    text = cli.format_flow_text(flow_io.FlowField(data))
    (tmp_path / "f.txt").write_text(text)
    assert cli.main(["flow-enc", "--input", str(tmp_path / "f.txt"), "--out", str(tmp_path / "f.flo16")]) == 0
    assert cli.main(["flow-dec", "--input", str(tmp_path / "f.flo16"), "--out", str(tmp_path / "g.txt")]) == 0
    back = cli.parse_flow_text((tmp_path / "g.txt").read_text())
    assert np.abs(back.data - data).max() <= 1 / 128


@pytest.mark.parametrize(
    "text, message",
    [
        ("", "empty"),
        ("2 1\n0 0 1.0 2.0\n", "header says"),
        ("1 1\n0 0 1.0\n", "line 2"),
        ("1 1\n0 0 a b\n", "line 2"),
    ],
)
def test_flow_enc_errors(tmp_path, capsys, text, message):
    (tmp_path / "bad.txt").write_text(text)
    assert cli.main(["flow-enc", "--input", str(tmp_path / "bad.txt"), "--out", str(tmp_path / "x.flo16")]) != 0
    assert message in capsys.readouterr().err


def test_inputs_not_mutated(dataset, tmp_path):
    before = _files(dataset / "val")
    ckpt = tmp_path / "m.cpm"
    network.save_checkpoint(network.init_params(0), ckpt)
    cli.main(["eval-grouping", "--checkpoint", str(ckpt), "--manifest", str(dataset / "val/manifest.txt"), "--n-s", "64"])
    assert _files(dataset / "val") == before


def test_kernel_row_matches_full_matrix():
    from cpflow.kernels import KernelParams, embedding_kernel_matrix, flow_kernel_matrix

    rng = np.random.default_rng(5)
    flow = rng.uniform(-1, 1, (6, 5, 2))

    full = flow_kernel_matrix(flow.reshape(-1, 2), KernelParams.from_sigma_sq(0.04))
    np.testing.assert_allclose(cli.kernel_row("flow", (2, 3), flow=flow, sigma_sq=0.04).ravel(), full[13], atol=1e-15)

    params = network.init_params(1)
    image = rng.uniform(0, 1, (16, 16, 3))
    K = embedding_kernel_matrix(network.embed_image(image, params))
    np.testing.assert_allclose(cli.kernel_row("embedding", (4, 7), image=image, params=params).ravel(), K[4 * 16 + 7], atol=1e-15)
