"""Command-line entry point.

    backbone-export export --input clip.mp4 --backbone resnet50 \
        --stride 5 --out clip.rgb.avfx

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
import argparse
import sys

import torch

from .avfx import AvfxError
from .export import BACKBONE_DIMS, ExportError, ExportJob, export_features
from .frames import FrameError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser():
    parser = _Parser(prog="backbone-export", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("export", help="export one clip's features to AVFX")
    p.add_argument("--input", required=True,
                   help="video file or directory of frame images")
    p.add_argument("--out", required=True, help="output AVFX path")
    p.add_argument("--backbone", default="resnet50",
                   choices=sorted(BACKBONE_DIMS))
    p.add_argument("--stride", type=int, default=5)
    p.add_argument("--weights", default="pretrained",
                   choices=("pretrained", "random"),
                   help="random = seeded untrained backbone (offline use)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--fps-cap", type=float, default=None)
    p.add_argument("--threads", type=int, default=1,
                   help="torch CPU threads (1 = deterministic mode)")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    torch.set_num_threads(max(1, args.threads))
    try:
        job = ExportJob(input=args.input, out=args.out, backbone=args.backbone,
                        stride=args.stride, weights=args.weights, seed=args.seed,
                        batch_size=args.batch, device=args.device,
                        fps_cap=args.fps_cap)
    except ExportError as err:  # bad flag values are usage errors
        print(f"backbone-export: error: {err}", file=sys.stderr)
        return 1
    try:
        path = export_features(job)
    except (ExportError, FrameError, AvfxError, OSError) as err:
        print(f"backbone-export: error: {err}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
