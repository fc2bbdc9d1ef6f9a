"""Command-line entry point: ``svis {gen-data, train, infer, eval, dump-attn}``.

Exit status is 0 on success, 1 on contract errors (bad config, incompatible
checkpoint, mismatched clip sets) and 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data
from .data import ClipSpec
from .evaluation import APReport, count_identity_switches, evaluate_ap
from .frame import assign_checkpoint, load_checkpoint, save_checkpoint
from .inference import infer_video, tracks_from_json, write_result
from .model import OnlineSegmenter, init_params
from .tensor import ContractError
from .train import train


def _on_off(text: str) -> bool:
    low = text.lower()
    if low not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return low == "on"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    ab = common.add_argument_group("ablations")
    ab.add_argument("--n-ref", type=int)
    ab.add_argument("--alt-layers", type=int)
    ab.add_argument("--slots", type=int)
    ab.add_argument("--disable-inter-p2c", action="store_true")
    ab.add_argument("--disable-inter-c2c-c2p", action="store_true")
    ab.add_argument("--pairwise-matching", type=_on_off, metavar="on|off")

    parser = argparse.ArgumentParser(prog="svis", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--train", type=int, default=32)
    p.add_argument("--test", type=int, default=16)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--max-instances", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--palette", choices=data.PALETTES, default="random")

    p = sub.add_parser("train", parents=[common], help="train on a dataset, write checkpoint and metrics")
    p.add_argument("--data", type=Path, help="dataset root (default: data_dir)")
    p.add_argument("--out", type=Path, help="output directory (default: out_dir)")
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("infer", parents=[common], help="online inference on one clip or a dataset split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True, help="clip directory or dataset root")
    p.add_argument("--split", default="test", help="split to run when --clip is a dataset root")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="score predicted tracks against a dataset")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--split", default="test")

    p = sub.add_parser("dump-attn", parents=[common], help="write inter-frame attention maps as PGM images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--clip", type=Path, required=True)
    p.add_argument("--frame", type=int, default=-1, help="target frame (default: last)")
    p.add_argument("--out", type=Path, required=True)
    return parser


def resolve_config(args: argparse.Namespace) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    cfg = C.apply_overrides(cfg, args.overrides)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.n_ref is not None:
        changes["n_ref"] = args.n_ref
    if args.alt_layers is not None:
        changes["n_alt"] = args.alt_layers
    if args.slots is not None:
        changes["slots"] = args.slots
    if args.disable_inter_p2c:
        changes["inter_p2c"] = False
    if args.disable_inter_c2c_c2p:
        changes["inter_c2c_c2p"] = False
    if args.pairwise_matching is not None:
        changes["pairwise_matching"] = args.pairwise_matching
    if getattr(args, "iterations", None) is not None:
        changes["iterations"] = args.iterations
    return cfg.replace(**changes)


def _load_model(cfg: C.RunConfig, path: Path):
    params = init_params(cfg.stack(), cfg.seed)
    assign_checkpoint(params, load_checkpoint(path))
    return params


def _is_dataset(path: Path) -> bool:
    return (path / "manifest.json").exists()


def cmd_gen_data(args, cfg: C.RunConfig) -> int:
    scale = cfg.image_size / ClipSpec.size  # keep shapes proportionate on other canvas sizes
    extent = tuple(e * scale for e in ClipSpec.extent)
    clips = data.make_benchmark(args.train, args.test, seed=cfg.seed, num_frames=args.frames,
                                size=cfg.image_size, extent=extent, max_instances=args.max_instances,
                                noise=args.noise, max_slots=cfg.slots, palette=args.palette)
    data.write_dataset(args.out, clips)
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_train(args, cfg: C.RunConfig) -> int:
    root = args.data or Path(cfg.data_dir)
    out = args.out or Path(cfg.out_dir)
    clips = data.read_dataset(root, "train")
    if not clips:
        raise ContractError(f"dataset {root} has no train clips")
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / "config.toml")
    with open(out / "metrics.jsonl", "w") as log:
        params = train(cfg, clips, log=log)
    save_checkpoint(out / "model.ckpt", params)
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_infer(args, cfg: C.RunConfig) -> int:
    params = _load_model(cfg, args.checkpoint)
    if _is_dataset(args.clip):
        names = [c["name"] for c in data.read_manifest(args.clip)["clips"] if c["split"] == args.split]
        dirs = [args.clip / n for n in names]
    else:
        dirs = [args.clip]
    for d in dirs:
        frames = data.read_frames(d)
        write_result(args.out, d.name, infer_video(frames, params, cfg))
    print(f"wrote tracks for {len(dirs)} clip(s) to {args.out}")
    return 0


def cmd_eval(args, cfg: C.RunConfig) -> int:
    gt_clips = data.read_dataset(args.gt, args.split)
    missing = [c.name for c in gt_clips if not (args.pred / c.name / "tracks.json").exists()]
    if missing:
        print("missing predictions for clips: " + ", ".join(missing), file=sys.stderr)
        return 1
    preds, gts, switches = {}, {}, 0
    for c in gt_clips:
        doc = json.loads((args.pred / c.name / "tracks.json").read_text())
        preds[c.name] = tracks_from_json(doc)
        gts[c.name] = c.ann
        switches += count_identity_switches(preds[c.name], c.ann, cfg.iou_threshold)
    report = evaluate_ap(preds, gts, interp_points=cfg.interp_points)
    print(APReport.header())
    print(report.row())
    print(f"identity switches: {switches}")
    return 0


def cmd_dump_attn(args, cfg: C.RunConfig) -> int:
    params = _load_model(cfg, args.checkpoint)
    frames = data.read_frames(args.clip)
    target = args.frame % len(frames)
    stack = cfg.stack()
    h = w = stack.feat_size
    maps: list[tuple[str, np.ndarray]] = []

    def trace(layer: str, op: str, weights: np.ndarray) -> None:
        if op == "inter_c2c_c2p":
            maps.append((layer, weights))

    seg = OnlineSegmenter(params, stack)
    for t in range(target + 1):
        seg.trace = trace if t == target else None
        seg.step(frames[t])
    if not maps:
        raise ContractError(f"frame {target} has no reference frames; pick a later frame")
    args.out.mkdir(parents=True, exist_ok=True)
    count = 0
    for layer, weights in maps:
        avg = weights.mean(axis=0)  # over heads: [L, n * L + n * H * W]
        n = avg.shape[1] // (stack.slots + h * w)
        pix = avg[:, n * stack.slots:].reshape(stack.slots, n, h, w)
        for slot in range(stack.slots):
            for k in range(n):
                img = pix[slot, k]
                img = img / img.max() if img.max() > 0 else img
                name = f"{layer.replace('.', '_')}_slot{slot:02d}_ref{k + 1}.pgm"
                data.write_image(args.out / name, img)
                count += 1
    print(f"wrote {count} attention maps to {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "dump-attn": cmd_dump_attn,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
