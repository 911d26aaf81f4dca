"""Command-line surface for the whole pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Diagnostics go to stderr; results go to stdout or --out files. Every
command accepts --seed and --out; flags override --config values.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    exit_code = 1


class DataError(Exception):
    exit_code = 2


class NumericError(Exception):
    exit_code = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="canobody",
                description="two-layer implicit clothed-body pipeline",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_text):
        c = sub.add_parser(name, help=help_text,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        c.add_argument("--seed", type=int, default=0, help="root seed for all randomness")
        c.add_argument("--out", type=str, default=None, help="output file or directory")
        c.add_argument("--config", type=str, default=None, help="JSON training config")
        return c

    c = cmd("synth", "generate the synthetic image/scan dataset")
    c.add_argument("--subjects", type=int, default=4)
    c.add_argument("--outfits", type=int, default=2)
    c.add_argument("--poses", type=int, default=4)
    c.add_argument("--scan-points", type=int, default=20000)
    c.add_argument("--bones", type=int, default=3)

    c = cmd("pretrain", "stage 1: supervised autodecoding on point scans")
    c.add_argument("--data", type=str, required=True)
    c.add_argument("--steps", type=int, default=None)
    c.add_argument("--resume", type=str, default=None, help="resume checkpoint")

    c = cmd("finetune", "stage 2: self-supervised encoder/texture fitting")
    c.add_argument("--data", type=str, required=True)
    c.add_argument("--checkpoint", type=str, required=True, help="stage-1 checkpoint")
    c.add_argument("--steps", type=int, default=None)
    c.add_argument("--resume", type=str, default=None)

    c = cmd("render", "render one dataset record with a trained model")
    c.add_argument("--checkpoint", type=str, required=True)
    c.add_argument("--data", type=str, required=True)
    c.add_argument("--record", type=int, default=0, help="record id in the manifest")
    c.add_argument("--codes", choices=["encoder", "codebook"], default="encoder")
    c.add_argument("--codebook-index", type=int, default=0)
    c.add_argument("--mask-out", type=str, default=None, help="optional PGM mask path")

    c = cmd("extract-mesh", "level-set mesh of a trained model")
    c.add_argument("--checkpoint", type=str, required=True)
    c.add_argument("--codebook-index", type=int, default=0)
    c.add_argument("--field", choices=["clothed", "body"], default="clothed")
    c.add_argument("--resolution", type=int, default=64)

    c = cmd("extract-features", "identity features for every dataset image")
    c.add_argument("--checkpoint", type=str, required=True)
    c.add_argument("--data", type=str, required=True)
    c.add_argument("--head", choices=["id", "cloth", "tex"], default="id")

    c = cmd("match", "cosine score matrix from a feature file")
    c.add_argument("--features", type=str, required=True)
    c.add_argument("--fuse", type=str, default=None, help="score JSON to fuse in")
    c.add_argument("--fuse-mode", choices=["sum", "znorm-sum"], default="sum")

    c = cmd("eval", "CMC/mAP report from features or scores")
    c.add_argument("--features", type=str, default=None)
    c.add_argument("--scores", type=str, default=None, help="score JSON (needs --features for labels)")
    c.add_argument("--protocol", choices=["standard", "cloth-change"], default="standard")
    c.add_argument("--max-rank", type=int, default=20)

    cmd("selfcheck", "gradient-check and skinning round-trip suites")
    return p


def _load_cfg(args):
    from .config import TrainConfig, load_config
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg.seed = args.seed
    return cfg


def _require_out(args):
    if not args.out:
        raise UsageError("--out is required for this command")
    return args.out


def _cmd_synth(args):
    from .synth import generate_image_set
    out = _require_out(args)
    manifest = generate_image_set(out, n_subjects=args.subjects, n_outfits=args.outfits,
                                  n_poses=args.poses, seed=args.seed,
                                  scan_points=args.scan_points, n_bones=args.bones)
    print(json.dumps({"records": len(manifest["records"]),
                      "scans": len(manifest["scans"]), "out": str(out)}))
    return 0


def _cmd_pretrain(args):
    from .train import run_pretrain
    cfg = _load_cfg(args)
    ckpt = run_pretrain(args.data, _require_out(args), cfg, steps=args.steps,
                        resume=args.resume)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def _cmd_finetune(args):
    from .train import run_finetune
    cfg = _load_cfg(args)
    ckpt = run_finetune(args.data, _require_out(args), cfg, args.checkpoint,
                        steps=args.steps, resume=args.resume)
    print(json.dumps({"checkpoint": str(ckpt)}))
    return 0


def _cmd_render(args):
    from . import ppm
    from .body import LatentCodes
    from .render import render_image
    from .synth import load_manifest
    from .train import ImageData, load_bundle

    bundle, codebook, enc, _, _, _ = load_bundle(args.checkpoint)
    data = ImageData.load(args.data)
    manifest = load_manifest(args.data)
    rec = next((r for r in data.records if r.rec_id == args.record), None)
    if rec is None:
        raise DataError(f"record {args.record} not in {args.data}/manifest.json "
                        f"({len(manifest['records'])} records)")
    if args.codes == "encoder":
        if enc is None:
            raise DataError("checkpoint has no encoder; use --codes codebook")
        zi, zc, zt = enc.forward_np(rec.image)
        codes = LatentCodes(zi, zc, zt)
    else:
        if codebook is None:
            raise DataError("checkpoint has no codebook; use --codes encoder")
        if not 0 <= args.codebook_index < len(codebook):
            raise DataError(f"codebook index {args.codebook_index} out of range "
                            f"({len(codebook)} entries)")
        codes = codebook.codes_np(args.codebook_index)
    res = render_image(bundle.model, codes, rec.theta, rec.camera, bundle.cfg.march,
                       bundle.skinning_model(data.rigs[rec.subject]))
    out = _require_out(args)
    ppm.write_ppm(out, res.rgb)
    if args.mask_out:
        ppm.write_pgm(args.mask_out, res.mask_soft)
    print(json.dumps({"image": str(out), "hit_pixels": int(res.hit.sum())}))
    return 0


def _cmd_extract_mesh(args):
    from .mesh import extract_mesh, write_obj
    from .train import load_bundle

    bundle, codebook, _, _, _, _ = load_bundle(args.checkpoint)
    if codebook is None:
        raise DataError("checkpoint has no codebook entries to mesh")
    if not 0 <= args.codebook_index < len(codebook):
        raise DataError(f"codebook index {args.codebook_index} out of range")
    codes = codebook.codes_np(args.codebook_index)
    volume = bundle.model.generate_volume_np(codes.z_id)

    if args.field == "clothed":
        def occ(pts):
            return bundle.model.clothed_occupancy_np(codes, pts, volume=volume)
    else:
        def occ(pts):
            return bundle.model.query_identity_np(volume, pts)[0]

    mesh = extract_mesh(occ, bundle.cfg.model.tau, args.resolution)
    out = _require_out(args)
    write_obj(out, mesh)
    print(json.dumps({"mesh": str(out), "vertices": len(mesh.vertices),
                      "triangles": len(mesh.triangles)}))
    return 0


def _cmd_extract_features(args):
    from .reid import extract_features
    from .train import load_bundle

    _, _, enc, _, _, _ = load_bundle(args.checkpoint)
    if enc is None:
        raise DataError("checkpoint has no encoder (run finetune first)")
    feats = extract_features(enc, args.data, head=args.head)
    out = _require_out(args)
    feats.save(out)
    print(json.dumps({"features": str(out), "count": len(feats),
                      "dim": int(feats.vectors.shape[1])}))
    return 0


def _cmd_match(args):
    from .reid import FeatureSet, ScoreMatrix, cosine_scores, fuse

    feats = FeatureSet.load(args.features)
    scores = cosine_scores(feats.queries, feats.gallery)
    if args.fuse:
        scores = fuse(scores, ScoreMatrix.load(args.fuse), mode=args.fuse_mode)
    out = _require_out(args)
    scores.save(out)
    print(json.dumps({"scores": str(out), "shape": list(scores.scores.shape)}))
    return 0


def _cmd_eval(args):
    from .reid import FeatureSet, ScoreMatrix, evaluate, evaluate_features

    if not args.features:
        raise UsageError("eval needs --features")
    feats = FeatureSet.load(args.features)
    if args.scores:
        sm = ScoreMatrix.load(args.scores)
        q, g = feats.queries, feats.gallery
        report = evaluate(sm, q.subjects, g.subjects, protocol=args.protocol,
                          q_outfits=q.outfits, g_outfits=g.outfits,
                          max_rank=args.max_rank)
    else:
        report = evaluate_features(feats, protocol=args.protocol, max_rank=args.max_rank)
    payload = report.to_json_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=1))
    print(json.dumps({"mAP": payload["mAP"], "rank1": payload["cmc"][0],
                      "n_queries": payload["n_queries"]}))
    return 0


def _cmd_selfcheck(args):
    from .selfcheck import run_all

    rows, ok = run_all(seed=args.seed)
    width = max(len(name) for name, _, _ in rows)
    for name, passed, detail in rows:
        print(f"{name:<{width}}  {'PASS' if passed else 'FAIL'}  {detail}")
    print(f"{'overall':<{width}}  {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 3


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "render": _cmd_render,
    "extract-mesh": _cmd_extract_mesh,
    "extract-features": _cmd_extract_features,
    "match": _cmd_match,
    "eval": _cmd_eval,
    "selfcheck": _cmd_selfcheck,
}


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
