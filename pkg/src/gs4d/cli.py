"""Command-line surface binding the library into reproducible workflows.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Reports are emitted as JSON so downstream tooling can parse them.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import metrics, sceneio, tensorio
from .errors import DataError, NumericalError
from .losses import LossWeights
from .motion import TAU_M_DEFAULT, warp_gaussians
from .optim import FitConfig, fit_motion, fit_semantics
from .renderer import RenderOptions, render
from .semantics import TextEmbeddingBank, query
from .streaming import StreamState, ingest_frame

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _build_parser() -> _Parser:
    p = _Parser(prog="gs4d", description="4D Gaussian splatting toolkit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--config", type=str, default=None,
                   help="JSON file with fit configuration overrides")
    sub = p.add_subparsers(dest="command")

    sp = sub.add_parser("render", help="render a scene at a time instant")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--camera", type=int, default=0)
    sp.add_argument("--time", type=float, default=0.0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--depth-out", default=None)
    sp.add_argument("--alpha-out", default=None)

    sp = sub.add_parser("fit-motion", help="fit motion parameters to frames")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", default=None)

    sp = sub.add_parser("fit-semantics", help="fit semantic features/decoder")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--bank", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", default=None)

    sp = sub.add_parser("stream", help="causal streaming over per-frame scenes")
    sp.add_argument("--scenes", nargs="+", required=True)
    sp.add_argument("--stride", type=int, default=5)
    sp.add_argument("--tau-m", type=float, default=TAU_M_DEFAULT)
    sp.add_argument("--camera", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--report", default=None)

    sp = sub.add_parser("eval-flow", help="scene-flow metrics")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("eval-seg", help="segmentation metrics")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--classes", type=int, required=True)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("eval-photo", help="photometric/depth metrics")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--pred-depth", default=None)
    sp.add_argument("--gt-depth", default=None)
    sp.add_argument("--depth-mask", default=None)
    sp.add_argument("--out", default=None)

    sp = sub.add_parser("query", help="text-query a rendered feature map")
    sp.add_argument("--features", required=True, help="G4DT H x W x c feature map")
    sp.add_argument("--bank", required=True)
    sp.add_argument("--prompt", required=True, help="label present in the bank")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    return p


def _load_fit_config(args) -> FitConfig:
    overrides = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            overrides = json.load(f)
    weights = LossWeights(**overrides.pop("weights", {}))
    cfg = FitConfig(weights=weights, seed=args.seed, threads=args.threads, **overrides)
    return cfg


def _emit(doc: dict, path: Optional[str]) -> None:
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _cmd_render(args) -> int:
    gaussians, cameras, anchor = sceneio.load_scene(args.scene)
    if not cameras or not (0 <= args.camera < len(cameras)):
        raise DataError(f"camera index {args.camera} out of range")
    moved = warp_gaussians(gaussians, args.time - anchor)
    out = render(moved, cameras[args.camera], RenderOptions(threads=args.threads))
    if not np.all(np.isfinite(out.rgb)):
        raise NumericalError("render produced non-finite pixels")
    sceneio.write_image(args.out, out.rgb)
    if args.depth_out:
        tensorio.write_tensor(args.depth_out, out.depth)
    if args.alpha_out:
        tensorio.write_tensor(args.alpha_out, out.alpha)
    return EXIT_OK


def _cmd_fit_motion(args) -> int:
    gaussians, cameras, anchor = sceneio.load_scene(args.scene)
    frames, _ = sceneio.load_manifest(args.manifest)
    cfg = _load_fit_config(args)
    if cfg.ref_time is None:
        cfg.ref_time = anchor
    fitted, report = fit_motion(gaussians, frames, cfg)
    if report.diagnostic:
        _emit(report.as_dict(), args.report)
        raise NumericalError(report.diagnostic)
    sceneio.save_scene(args.out, fitted, cameras, anchor_time=anchor)
    _emit(report.as_dict(), args.report)
    return EXIT_OK


def _cmd_fit_semantics(args) -> int:
    gaussians, cameras, anchor = sceneio.load_scene(args.scene)
    frames, _ = sceneio.load_manifest(args.manifest)
    cfg = _load_fit_config(args)
    if cfg.ref_time is None:
        cfg.ref_time = anchor
    if cfg.stage_sem_iters + cfg.stage_cls_iters == 0:
        cfg.stage_sem_iters = cfg.iterations
    bank = TextEmbeddingBank.load(args.bank) if args.bank else None
    fitted, _decoder, report = fit_semantics(gaussians, frames, cfg, bank=bank)
    if report.diagnostic:
        _emit(report.as_dict(), args.report)
        raise NumericalError(report.diagnostic)
    sceneio.save_scene(args.out, fitted, cameras, anchor_time=anchor)
    _emit(report.as_dict(), args.report)
    return EXIT_OK


def _cmd_stream(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = StreamState(stride=args.stride, tau_m=args.tau_m)
    records: List[dict] = []
    camera = None
    for i, scene_path in enumerate(args.scenes):
        gaussians, cameras, anchor = sceneio.load_scene(scene_path)
        if camera is None:
            if not cameras:
                raise DataError(f"{scene_path}: streaming needs a camera in the first scene")
            camera = cameras[args.camera]
        t0 = time.perf_counter()
        state, composed = ingest_frame(state, gaussians, anchor)
        latency = time.perf_counter() - t0
        out = render(composed.at(composed.t_curr), camera,
                     RenderOptions(threads=args.threads))
        sceneio.write_image(out_dir / f"frame_{i:05d}.png", out.rgb)
        records.append({"frame": i, "time": anchor, "latency_s": latency,
                        "retained_gaussians": state.retained_gaussians,
                        "peak_gaussians": state.peak_gaussians})
    _emit({"frames": records}, args.report)
    return EXIT_OK


def _cmd_eval_flow(args) -> int:
    pred = tensorio.read_tensor(args.pred).astype(np.float64)
    gt = tensorio.read_tensor(args.gt).astype(np.float64)
    res = metrics.eval_flow(pred.reshape(-1, 3), gt.reshape(-1, 3))
    _emit(res.as_dict(), args.out)
    return EXIT_OK


def _cmd_eval_seg(args) -> int:
    pred = np.round(tensorio.read_tensor(args.pred)).astype(np.int64)
    gt = np.round(tensorio.read_tensor(args.gt)).astype(np.int64)
    res = metrics.eval_seg(pred, gt, args.classes)
    _emit(res.as_dict(), args.out)
    return EXIT_OK


def _cmd_eval_photo(args) -> int:
    pred = sceneio.read_image(args.pred)
    gt = sceneio.read_image(args.gt)
    doc = {"PSNR": metrics.psnr(pred, gt), "SSIM": metrics.ssim(pred, gt)}
    if args.pred_depth and args.gt_depth:
        dp = tensorio.read_tensor(args.pred_depth).astype(np.float64)
        dg = tensorio.read_tensor(args.gt_depth).astype(np.float64)
        mask = tensorio.read_tensor(args.depth_mask) > 0.5 if args.depth_mask \
            else np.ones_like(dg, dtype=bool)
        doc["D-RMSE"] = metrics.depth_rmse(dp, dg, mask)
    _emit(doc, args.out)
    return EXIT_OK


def _cmd_query(args) -> int:
    feat = tensorio.read_tensor(args.features).astype(np.float64)
    bank = TextEmbeddingBank.load(args.bank)
    if args.prompt not in bank.labels:
        raise DataError(f"prompt {args.prompt!r} not in bank labels {bank.labels}")
    emb = bank.embeddings[bank.labels.index(args.prompt)]
    mask = query(feat, emb, args.threshold)
    tensorio.write_tensor(args.out, mask.astype(np.float32))
    return EXIT_OK


_COMMANDS = {
    "render": _cmd_render,
    "fit-motion": _cmd_fit_motion,
    "fit-semantics": _cmd_fit_semantics,
    "stream": _cmd_stream,
    "eval-flow": _cmd_eval_flow,
    "eval-seg": _cmd_eval_seg,
    "eval-photo": _cmd_eval_photo,
    "query": _cmd_query,
}


def cli_dispatch(argv: List[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    np.random.seed(args.seed % (2 ** 32))
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
