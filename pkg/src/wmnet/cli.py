"""Command-line entry point: ``wmnet <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from PIL import Image

from wmnet import checkpoint as ckpt_io
from wmnet.bench import DatasetSpec, to_uint8, write_dataset
from wmnet.config import ExperimentConfig
from wmnet.validation import ValidationError

log = logging.getLogger("wmnet")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def cmd_gen_data(args) -> int:
    dspec = DatasetSpec.load(args.spec)
    write_dataset(dspec, Path(args.out))
    print(f"wrote {dspec.n_train} train / {dspec.n_val} val pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    from wmnet.plotting import plot_history, read_jsonl
    from wmnet.train import train

    cfg = _load_config(args)
    result = train(cfg)
    log_path = Path(cfg.output_dir) / "metrics.jsonl"
    figure = plot_history([r for r in read_jsonl(log_path) if r.get("config_hash") == cfg.hash()],
                          Path(cfg.output_dir) / "history.png")
    last = result.checkpoint.history[-1]
    print(json.dumps({"checkpoint": str(result.path), "config_hash": cfg.hash(), "figure": str(figure), **last}))
    return 0


def cmd_eval(args) -> int:
    from wmnet.train import evaluate

    log_path = args.log or Path(args.ckpt).with_name("metrics.jsonl")
    print(json.dumps(evaluate(args.ckpt, args.split, oracle=args.oracle, log_path=log_path)))
    return 0


def cmd_ablate(args) -> int:
    from wmnet.experiments import ablate, to_markdown

    table = ablate(_load_config(args))
    print(to_markdown(table, ["wunet", "sawf", "cfm"]), end="")
    return 0


def cmd_sweep_w(args) -> int:
    from wmnet.experiments import sweep_w, to_markdown

    table = sweep_w(_load_config(args))
    print(to_markdown(table, ["w2", "w1"]), end="")
    return 0


def cmd_plot(args) -> int:
    from wmnet.plotting import plot_history, read_jsonl

    print(plot_history(read_jsonl(args.log), args.out))
    return 0


def _read_image(path: str, mode: str) -> torch.Tensor:
    img = np.asarray(Image.open(path).convert(mode), dtype=np.float32) / 255.0
    if img.ndim == 2:
        img = img[..., None]
    return torch.from_numpy(img).permute(2, 0, 1)[None].contiguous()


def cmd_wavelet_roundtrip(args) -> int:
    from wmnet.wavelet import dwt2, idwt2, pad_even

    x = _read_image(args.image, "L" if args.gray else "RGB").double()
    s = dwt2(x)
    err = float((idwt2(s) - x).abs().max())
    # odd sizes are padded before the transform, so energy is compared on the padded map
    energy = float((pad_even(x) ** 2).sum())
    drift = abs(sum(float((b**2).sum()) for b in s[:4]) - energy) / max(energy, 1e-300)
    print(json.dumps({"image": args.image, "shape": list(x.shape[1:]), "max_abs_error": err,
                      "relative_energy_error": drift}))
    return 0


def cmd_wunet_enhance(args) -> int:
    from wmnet.wunet import WUNet

    torch.manual_seed(args.seed)
    net = WUNet()
    if args.ckpt:
        state = ckpt_io.load(args.ckpt).state_dict()
        prefix = "wunet."
        own = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        if not own:
            raise ValidationError(f"{args.ckpt} holds no WU-Net parameters")
        net.load_state_dict(own)
    rgb, ir = _read_image(args.rgb, "RGB"), _read_image(args.ir, "L")
    if rgb.shape[-2:] != ir.shape[-2:]:
        ir = torch.nn.functional.interpolate(ir, size=rgb.shape[-2:], mode="bilinear", align_corners=False)
    with torch.no_grad():
        out = net.eval()(rgb, ir)
    Image.fromarray(to_uint8(out[0].permute(1, 2, 0).numpy())).save(args.out)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmnet", description="Misalignment-robust RGB/IR fusion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic paired dataset")
    p.add_argument("--spec", required=True, help="key=value spec file or preset name (neutral, heavy)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--log", help="JSONL log to append to (default: next to the checkpoint)")
    p.add_argument("--oracle", action="store_true", help="debug: score the ground truth as predictions")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (("ablate", cmd_ablate, "component ablation"), ("sweep-w", cmd_sweep_w, "W1/W2 sweep")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", help="override output_dir")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="plot a metrics.jsonl history")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("wavelet", help="wavelet debugging")
    wsub = p.add_subparsers(dest="action", required=True)
    q = wsub.add_parser("roundtrip", help="print Haar reconstruction error for an image")
    q.add_argument("image")
    q.add_argument("--gray", action="store_true")
    q.set_defaults(func=cmd_wavelet_roundtrip)

    p = sub.add_parser("wunet", help="WU-Net debugging")
    wsub = p.add_subparsers(dest="action", required=True)
    q = wsub.add_parser("enhance", help="run the RGB enhancer on one image pair")
    q.add_argument("--rgb", required=True)
    q.add_argument("--ir", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--ckpt", help="model checkpoint to take WU-Net weights from")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_wunet_enhance)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ckpt_io.CheckpointError, FileNotFoundError) as exc:
        print(f"wmnet: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
