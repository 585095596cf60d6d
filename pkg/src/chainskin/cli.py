"""Command-line interface.

Subcommands: repose, fit, recover, eval, serve. Exit code 0 on success,
1 on validation errors, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats
from .chain import recover_chain
from .errors import ChainError, ConfigError, FitDivergedError, ParseError
from .fitting import FitConfig, fit_stage1, fit_stage2, trace_to_table
from .metrics import evaluate
from .service import create_server
from .skinning import build_associations, repose


def _cmd_repose(args) -> int:
    mesh = formats.load_mesh(args.mesh)
    chain = formats.load_chain(args.chain)
    anchors = formats.load_anchors(args.anchors)
    pose = formats.load_pose(args.pose, chain)
    associations = build_associations(chain, anchors)
    result = repose(mesh, chain, anchors, associations, pose)
    formats.save_mesh(result.mesh, args.out)
    return 0


def _cmd_fit(args) -> int:
    mesh = formats.load_mesh(args.mesh)
    chain = formats.load_chain(args.chain)
    anchors = formats.load_anchors(args.anchors)
    frames = formats.load_frames(args.frames)
    config = formats.load_config(args.config) if args.config else FitConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)

    stage1 = fit_stage1(mesh, anchors, frames, config)
    stage2 = fit_stage2(mesh, chain, anchors, stage1, frames, config)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "transforms.json").write_text(
        formats.dump_json(formats.transforms_to_document(stage2.transforms))
    )
    formats.save_chain(stage2.chain, out / "chain_fitted.json")
    (out / "loss_trace.tsv").write_text(
        trace_to_table(list(stage1.trace) + list(stage2.trace))
    )
    if stage2.trace:
        last = stage2.trace[-1]
        print(
            f"fit finished: recon={last.recon!r} cycle={last.cycle!r} "
            f"anchors={last.anchors!r} total={last.total_after_step!r}"
        )
    return 0


def _cmd_recover(args) -> int:
    chain = formats.load_chain(args.chain)
    doc = formats._read_json(args.joints)
    try:
        unconstrained = np.array(
            [[float(v) for v in p] for p in doc["positions"]]
        )
    except (TypeError, KeyError, ValueError):
        raise ParseError(
            "unconstrained joints document must contain a 'positions' list "
            "of 3-vectors"
        ) from None
    revised = recover_chain(chain, unconstrained)
    Path(args.out).write_text(
        formats.dump_json({"positions": [formats._floats(p) for p in revised]})
    )
    return 0


def _cmd_eval(args) -> int:
    reconstructed = formats.load_mesh(args.reconstructed)
    reference = formats.load_mesh(args.reference)
    thresholds = args.threshold if args.threshold else [0.02]
    report = evaluate(reconstructed.vertices, reference.vertices, thresholds)
    sys.stdout.write(report.to_text())
    if args.out:
        Path(args.out).write_text(
            formats.dump_json(
                {
                    "chamfer": report.chamfer,
                    "f_scores": {f"{k:g}": v for k, v in sorted(report.f_scores.items())},
                }
            )
        )
    return 0


def _cmd_serve(args) -> int:
    bundle = formats.load_model_bundle(args.model)
    server = create_server(bundle, port=args.port, static_dir=args.static)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chainskin",
        description="Kinematic-chain driven mesh re-posing, fitting, and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("repose", help="deform a mesh with a pose file")
    p.add_argument("--mesh", required=True)
    p.add_argument("--chain", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--pose", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_repose)

    p = sub.add_parser("fit", help="fit per-frame transforms to observed point clouds")
    p.add_argument("--mesh", required=True)
    p.add_argument("--chain", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--frames", required=True, help="directory of per-frame OBJ files")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("recover", help="repair unconstrained joints to a proper chain")
    p.add_argument("joints", help="JSON file with a 'positions' list")
    p.add_argument("--chain", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_recover)

    p = sub.add_parser("eval", help="Chamfer distance and F-scores between two OBJs")
    p.add_argument("reconstructed")
    p.add_argument("reference")
    p.add_argument("--threshold", type=float, action="append")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("serve", help="HTTP re-posing service")
    p.add_argument("--model", required=True, help="directory with mesh.obj, chain.json, anchors.json")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--static", help="directory of static UI files to serve at /")
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ChainError, ConfigError, FitDivergedError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
