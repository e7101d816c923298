"""Command-line entry point: ``cpflow <subcommand> --key value ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import flow_io, gradcheck, network, pnm, synth, trainer
from .kernels import EMBED_SCALE, KernelParams, unit_rows

MID_GRAY = 128


class CliError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    return p


def _scene_config(args) -> synth.SceneConfig:
    return synth.SceneConfig(
        height=args.height,
        width=args.width,
        min_objects=args.min_objects,
        max_objects=args.max_objects,
        min_size=args.min_size,
        max_size=args.max_size,
        noise=args.noise,
        flow_min=args.flow_min,
        flow_max=args.flow_max,
        bg_flow_max=args.bg_flow_max,
    )


def cmd_gen(args) -> int:
    if args.count < 1:
        raise CliError("count must be ≥ 1")
    if args.out is None:
        raise CliError("--out is required")
    manifest = synth.generate_dataset(_scene_config(args), args.count, args.seed, args.out)
    print(manifest)
    return 0


def _train_common(args, loss: str) -> int:
    if args.out is None:
        raise CliError("--out is required")
    for path in (args.train, args.val):
        if not Path(path).is_file():
            raise CliError(f"manifest not found: {path}")
    cfg = trainer.TrainConfig(
        loss=loss,
        lr=args.lr,
        batch_size=args.batch_size,
        n_s=args.n_s,
        max_steps=args.max_steps,
        val_interval=args.val_interval,
        patience=args.patience,
        seed=args.seed,
        M=args.M,
        flip=args.flip,
    )
    ckpt, csv = trainer.run_training(cfg, args.train, args.val, args.out)
    print(ckpt)
    print(csv)
    return 0


def cmd_train(args) -> int:
    return _train_common(args, trainer.SIMILARITY)


def cmd_train_baseline(args) -> int:
    return _train_common(args, trainer.BASELINE)


def cmd_grad_check(args) -> int:
    ok = True
    loss_res = gradcheck.loss_level_suite(args.seeds, args.seed, args.corrupt_loss)
    status = "PASS" if loss_res.ok else "FAIL"
    print(f"loss-level max rel err {loss_res.max_error:.3e} ≤ {gradcheck.LOSS_TOL:g}: {status}")
    for block in loss_res.failing:
        print(f"  failing block: {block} ({loss_res.block_errors[block]:.3e})")
    ok &= loss_res.ok
    worst, failing = 0.0, {}
    for k in range(args.seeds):
        res = gradcheck.full_chain_check(args.seed + k, corrupt=args.corrupt_chain)
        worst = max(worst, res.max_error)
        for block in res.failing:
            failing[block] = max(failing.get(block, 0.0), res.block_errors[block])
    status = "PASS" if not failing else "FAIL"
    print(f"full-chain max rel err {worst:.3e} ≤ {gradcheck.CHAIN_TOL:g}: {status}")
    for block, err in failing.items():
        print(f"  failing block: {block} ({err:.3e})")
    ok &= not failing
    return 0 if ok else 1


def minmax_to_u8(values: np.ndarray) -> np.ndarray:
    """Affinely map ``[min, max]`` to ``[0, 255]``; a constant input maps to mid-gray."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.full(values.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def random_projection(D: int, seed: int) -> np.ndarray:
    P = np.random.default_rng(seed).standard_normal((3, D))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def embeddings_to_rgb(emb: np.ndarray, H: int, W: int, seed: int) -> np.ndarray:
    proj = emb @ random_projection(emb.shape[1], seed).T
    channels = [minmax_to_u8(proj[:, c]) for c in range(3)]
    return np.stack(channels, axis=1).reshape(H, W, 3)


def _load_image(path) -> np.ndarray:
    img = pnm.read_pnm(path)
    if img.ndim != 3:
        raise CliError(f"{path}: expected a P6 color image")
    return img.astype(np.float64) / 255.0


def _load_similarity_checkpoint(path):
    params = network.load_checkpoint(path)
    if network.is_baseline(params):
        raise CliError(f"{path}: baseline checkpoint has no embedding head")
    return params


def cmd_embed(args) -> int:
    if args.out is None:
        raise CliError("--out is required")
    params = _load_similarity_checkpoint(args.checkpoint)
    image = _load_image(args.image)
    H, W, _ = image.shape
    emb = network.embed_image(image, params)
    pnm.write_pnm(args.out, embeddings_to_rgb(emb, H, W, args.seed))
    print(args.out)
    return 0


def _parse_pixel(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"--pixel must be 'row,col', got {text!r}") from None
    return r, c


def kernel_row(kind: str, p: tuple[int, int], *, flow=None, image=None, params=None, sigma_sq=None) -> np.ndarray:
    """Row ``K(p, .)`` over the full pixel grid, shape (H, W)."""
    if kind == "flow":
        if flow is None:
            raise CliError("flow kernel needs --flow")
        H, W = flow.shape[:2]
        vectors = flow.reshape(-1, 2)
        if sigma_sq is None:
            sigma_sq = np.exp(2 * params["kernel.rho"][0]) if params is not None else 0.0036
        kp = KernelParams.from_sigma_sq(float(sigma_sq))
    else:
        if image is None or params is None:
            raise CliError("embedding kernel needs --checkpoint and --image")
        H, W = image.shape[:2]
        vectors = network.embed_image(image, params)
    r, c = p
    if not (0 <= r < H and 0 <= c < W):
        raise CliError(f"pixel ({r}, {c}) outside {H}x{W} grid")
    i = r * W + c
    if kind == "flow":
        d2 = np.sum((vectors - vectors[i]) ** 2, axis=1)
        row = np.exp(-0.5 * d2 / kp.sigma_sq)
    else:
        U, _ = unit_rows(vectors)
        row = np.clip(EMBED_SCALE * (U @ U[i]), -EMBED_SCALE, EMBED_SCALE)
        row[i] = EMBED_SCALE
    return row.reshape(H, W)


def cmd_kernel_row(args) -> int:
    if args.out is None:
        raise CliError("--out is required")
    params = _load_similarity_checkpoint(args.checkpoint) if args.checkpoint else None
    flow = image = None
    if args.kernel == "flow":
        if args.flow is None:
            raise CliError("--flow is required for the flow kernel")
        raw = flow_io.decode_flow(flow_io.read_flow_file(args.flow))
        flow = flow_io.normalize_values(raw.data, args.M)
    elif args.image is not None:
        image = _load_image(args.image)
    row = kernel_row(args.kernel, _parse_pixel(args.pixel), flow=flow, image=image, params=params, sigma_sq=args.sigma_sq)
    pnm.write_pnm(args.out, minmax_to_u8(row))
    print(args.out)
    return 0


def cmd_eval_grouping(args) -> int:
    params = network.load_checkpoint(args.checkpoint)
    if not Path(args.manifest).is_file():
        raise CliError(f"manifest not found: {args.manifest}")
    if not synth.read_manifest(args.manifest):
        raise CliError(f"empty manifest: {args.manifest}")
    mean, margins = trainer.evaluate_grouping_run(params, args.manifest, args.n_s, args.seed, args.features)
    print("scene,margin")
    for i, m in enumerate(margins):
        print(f"{i},{m:.6f}")
    print(f"mean,{mean:.6f}")
    return 0


def parse_flow_text(text: str) -> flow_io.FlowField:
    """``width height`` header then one ``x y fx fy`` line per pixel."""
    lines = [(i, ln) for i, ln in enumerate(text.splitlines(), start=1) if ln.strip()]
    if not lines:
        raise CliError("empty flow listing")
    lineno, header = lines[0]
    try:
        W, H = (int(v) for v in header.split())
    except ValueError:
        raise CliError(f"line {lineno}: header must be 'width height'") from None
    if W < 1 or H < 1:
        raise CliError(f"line {lineno}: dimensions must be positive")
    if len(lines) - 1 != W * H:
        raise CliError(f"header says {W}x{H}={W * H} pixels but listing has {len(lines) - 1} lines")
    data = np.zeros((H, W, 2))
    seen = np.zeros((H, W), dtype=bool)
    for lineno, ln in lines[1:]:
        parts = ln.split()
        try:
            if len(parts) != 4:
                raise ValueError
            x, y = int(parts[0]), int(parts[1])
            fx, fy = float(parts[2]), float(parts[3])
        except ValueError:
            raise CliError(f"line {lineno}: expected 'x y fx fy'") from None
        if not (0 <= x < W and 0 <= y < H):
            raise CliError(f"line {lineno}: pixel ({x}, {y}) outside {W}x{H}")
        if seen[y, x]:
            raise CliError(f"line {lineno}: duplicate pixel ({x}, {y})")
        if not (np.isfinite(fx) and np.isfinite(fy)):
            raise CliError(f"line {lineno}: non-finite flow")
        seen[y, x] = True
        data[y, x] = fx, fy
    return flow_io.FlowField(data)


def format_flow_text(flow: flow_io.FlowField) -> str:
    rows = [f"{flow.width} {flow.height}"]
    for y in range(flow.height):
        for x in range(flow.width):
            fx, fy = flow.data[y, x]
            rows.append(f"{x} {y} {float(fx)!r} {float(fy)!r}")
    return "\n".join(rows) + "\n"


def cmd_flow_enc(args) -> int:
    if args.out is None:
        raise CliError("--out is required")
    flow = parse_flow_text(Path(args.input).read_text())
    enc = flow_io.encode_flow(flow)
    flow_io.write_flow_file(enc, args.out)
    if enc.saturated:
        print(f"warning: {enc.saturated} components saturated", file=sys.stderr)
    print(args.out)
    return 0


def cmd_flow_dec(args) -> int:
    text = format_flow_text(flow_io.decode_flow(flow_io.read_flow_file(args.input)))
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="cpflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic scene dataset")
    p.add_argument("--count", type=int, required=True)
    defaults = synth.SceneConfig()
    p.add_argument("--height", type=int, default=defaults.height)
    p.add_argument("--width", type=int, default=defaults.width)
    p.add_argument("--min-objects", type=int, default=defaults.min_objects)
    p.add_argument("--max-objects", type=int, default=defaults.max_objects)
    p.add_argument("--min-size", type=int, default=defaults.min_size)
    p.add_argument("--max-size", type=int, default=defaults.max_size)
    p.add_argument("--noise", type=float, default=defaults.noise)
    p.add_argument("--flow-min", type=float, default=defaults.flow_min)
    p.add_argument("--flow-max", type=float, default=defaults.flow_max)
    p.add_argument("--bg-flow-max", type=float, default=defaults.bg_flow_max)
    p.set_defaults(func=cmd_gen)

    tdef = trainer.TrainConfig()
    for name, func in (("train", cmd_train), ("train-baseline", cmd_train_baseline)):
        p = sub.add_parser(name, parents=[common], help=f"{name} on a scene manifest")
        p.add_argument("--train", type=Path, required=True)
        p.add_argument("--val", type=Path, required=True)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=tdef.batch_size)
        p.add_argument("--n-s", type=int, default=tdef.n_s)
        p.add_argument("--max-steps", type=int, default=tdef.max_steps)
        p.add_argument("--val-interval", type=int, default=tdef.val_interval)
        p.add_argument("--patience", type=int, default=tdef.patience)
        p.add_argument("--M", type=float, default=flow_io.DEFAULT_M)
        p.add_argument("--flip", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--corrupt-loss", choices=["embeddings", "rho"], help=argparse.SUPPRESS)
    p.add_argument("--corrupt-chain", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("embed", parents=[common], help="random RGB projection of dense embeddings")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("kernel-row", parents=[common], help="heatmap of one kernel row")
    p.add_argument("--kernel", choices=["flow", "embedding"], default="flow")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--flow", type=Path)
    p.add_argument("--pixel", required=True, help="row,col")
    p.add_argument("--sigma-sq", type=float)
    p.add_argument("--M", type=float, default=flow_io.DEFAULT_M)
    p.set_defaults(func=cmd_kernel_row)

    p = sub.add_parser("eval-grouping", parents=[common], help="grouping margin on held-out scenes")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--n-s", type=int, default=512)
    p.add_argument("--features", choices=["embedding", "hypercolumn"], default="embedding")
    p.set_defaults(func=cmd_eval_grouping)

    p = sub.add_parser("flow-enc", parents=[common], help="text flow listing -> .flo16")
    p.add_argument("--input", type=Path, required=True)
    p.set_defaults(func=cmd_flow_enc)

    p = sub.add_parser("flow-dec", parents=[common], help=".flo16 -> text flow listing")
    p.add_argument("--input", type=Path, required=True)
    p.set_defaults(func=cmd_flow_dec)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
