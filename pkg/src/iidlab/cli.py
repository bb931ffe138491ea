"""Single command-line entry point: synth, priors, train, eval, infer, gradcheck.

Configuration is one JSON document with sections {synth, model, train,
loss, paths}; unknown keys are rejected and every default is owned by the
corresponding module's dataclass. All randomness flows from config seeds.

Exit codes: 0 success, 1 internal failure, 2 bad input. Errors print one
machine-parsable line on stderr: `error:<Code>: <message>`.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import gradsuite, metrics, priors, signet, synthgen
from .errors import IidLabError, InputError, InvalidConfig, MissingFile
from .imagecore import GrayImage, ImageRGB, load_pfm, load_png, load_segments, save_pfm, save_png
from .losses import LossWeights
from .signet import ModelConfig, TrainConfig
from .synthgen import SynthConfig


def default_config() -> dict:
    return {
        "synth": asdict(SynthConfig()),
        "model": asdict(ModelConfig()),
        "train": asdict(TrainConfig()),
        "loss": asdict(LossWeights()),
        "paths": {"data_dir": "data", "out_dir": "out"},
    }


def _merge_checked(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise InvalidConfig(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise InvalidConfig(f"config key {here} must be an object")
            out[key] = _merge_checked(base[key], value, here)
        else:
            out[key] = _check_leaf(here, base[key], value)
    return out


def _check_leaf(path: str, default, value):
    if value is None and path == "train.max_iters":
        return None
    if default is None:  # nullable int
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvalidConfig(f"config key {path} must be an integer or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InvalidConfig(f"config key {path} must be a boolean")
        return value
    if isinstance(default, int):
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvalidConfig(f"config key {path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidConfig(f"config key {path} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise InvalidConfig(f"config key {path} must be a string")
        return value
    raise InvalidConfig(f"config key {path} has unsupported type")


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingFile(f"no such config: {p}")
        try:
            with open(p, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidConfig("config root must be a JSON object")
        cfg = _merge_checked(cfg, doc)
    for item in overrides or []:
        if "=" not in item:
            raise InvalidConfig(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node: dict = {}
        leaf = node
        parts = key.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = value
        cfg = _merge_checked(cfg, node)
    return cfg


def _model_config(cfg: dict, args) -> ModelConfig:
    doc = dict(cfg["model"])
    if getattr(args, "no_priors", False):
        doc["no_priors"] = True
    if getattr(args, "no_edge_module", False):
        doc["no_edge_module"] = True
    if getattr(args, "image_edges", False):
        doc["image_edges"] = True
    return ModelConfig(**doc)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.set)
    synth_cfg = SynthConfig(**cfg["synth"])
    out_dir = Path(args.out_dir or cfg["paths"]["data_dir"])
    synthgen.generate_dataset(synth_cfg, args.count, out_dir)
    print(out_dir / synthgen.MANIFEST_NAME)
    return 0


_PRIOR_MEMBERS = ("ccr_strength", "r_est", "s_est", "nrgb", "edge_256", "edge_128", "edge_64")


def cmd_priors(args) -> int:
    manifest, base = synthgen.load_manifest(args.manifest)
    out_dir = Path(args.out_dir) if args.out_dir else base / "priors"
    out_dir.mkdir(parents=True, exist_ok=True)
    for row in manifest["samples"]:
        stem = Path(row["image"]).stem
        image = load_png(base / row["image"])
        segments = load_segments(base / row["segments"])
        gt_r = load_pfm(base / row["reflectance"])
        bundle = priors.compute_bundle(image, segments, gt_reflectance=gt_r)
        members = {
            "ccr_strength": bundle.ccr.strength,
            "r_est": bundle.r_est,
            "s_est": bundle.s_est,
            "nrgb": bundle.nrgb,
            "edge_256": bundle.edge_pyramid[0],
            "edge_128": bundle.edge_pyramid[1],
            "edge_64": bundle.edge_pyramid[2],
        }
        for name, raster in members.items():
            save_pfm(raster, out_dir / f"{stem}.{name}.pfm")
            save_png(raster, out_dir / f"{stem}.{name}.png")
    print(out_dir)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    model_cfg = _model_config(cfg, args)
    train_cfg = TrainConfig(**cfg["train"])
    weights = LossWeights(**cfg["loss"])
    manifest = args.manifest or (Path(cfg["paths"]["data_dir"]) / synthgen.MANIFEST_NAME)
    out_dir = Path(args.out_dir or cfg["paths"]["out_dir"])
    net = signet.build(model_cfg)
    summary = signet.train_loop(net, manifest, train_cfg, out_dir,
                                weights=weights, resume_from=args.resume)
    print(json.dumps({k: v for k, v in summary.items() if k != "elapsed_seconds"},
                     sort_keys=True))
    return 0


def _load_reflectance(path) -> ImageRGB:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        raster = load_pfm(path)
        if not isinstance(raster, ImageRGB):
            raise InvalidConfig("reflectance PFM must be 3-channel")
        return raster
    return load_png(path)


def cmd_eval(args) -> int:
    if args.judgments:
        if args.reflectance:
            pred = _load_reflectance(args.reflectance)
        elif args.checkpoint and args.image and args.segments:
            net, _ = signet.net_from_checkpoint(args.checkpoint)
            outputs = signet.predict(net, load_png(args.image), load_segments(args.segments))
            pred = ImageRGB(outputs.r_final.values[0].transpose(1, 2, 0))
        else:
            raise InvalidConfig(
                "eval --judgments needs --reflectance, or --checkpoint/--image/--segments")
        judgments = metrics.load_judgments(args.judgments, pred.width, pred.height)
        score = metrics.whdr(pred, judgments)
        if args.out:
            with open(args.out, "w", encoding="ascii") as fh:
                json.dump({"whdr": score}, fh, sort_keys=True)
                fh.write("\n")
        print(f"{score:.6f}")
        return 0
    if not args.manifest:
        raise InvalidConfig("eval needs --manifest or --judgments")
    report = metrics.evaluate(args.manifest, checkpoint_path=args.checkpoint,
                              split=args.split, bypass_gt=args.bypass_gt,
                              out_path=args.out)
    print(json.dumps(report["aggregate"], sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    net, _ = signet.net_from_checkpoint(args.checkpoint)
    image = load_png(args.image)
    segments = load_segments(args.segments) if args.segments else None
    outputs = signet.predict(net, image, segments)
    stem = Path(args.out_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    rasters = {
        "r_final": ImageRGB(outputs.r_final.values[0].transpose(1, 2, 0)),
        "s_final": GrayImage(outputs.s_final.values[0, 0]),
    }
    if outputs.edge_full is not None:
        rasters["edge"] = GrayImage(outputs.edge_full.values[0, 0])
    for name, raster in rasters.items():
        save_pfm(raster, Path(f"{stem}.{name}.pfm"))
        save_png(raster, Path(f"{stem}.{name}.png"))
    print(stem)
    return 0


def cmd_gradcheck(args) -> int:
    rows = gradsuite.run_all(seed=args.seed)
    width = max(len(r["name"]) for r in rows)
    failures = 0
    for row in rows:
        status = "PASS" if row["passed"] else "FAIL"
        if not row["passed"]:
            failures += 1
        print(f"{row['name']:<{width}}  {row['max_rel_error']:.3e}  {status}")
    print(f"{len(rows) - failures}/{len(rows)} gradient checks passed")
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iidlab",
                                     description="intrinsic image decomposition lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (dotted path)")

    p = sub.add_parser("synth", help="generate a procedural dataset")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("priors", help="write prior bundles for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_priors)

    p = sub.add_parser("train", help="train the network")
    common(p)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--no-priors", action="store_true")
    p.add_argument("--no-edge-module", action="store_true")
    p.add_argument("--image-edges", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or judgments file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--bypass-gt", action="store_true",
                   help="score the ground truth against itself (oracle pass)")
    p.add_argument("--judgments", default=None)
    p.add_argument("--reflectance", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--segments", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="decompose a single image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--segments", default=None)
    p.add_argument("--out-stem", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("gradcheck", help="run all gradient-check suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InputError as exc:
        print(f"error:{exc.code}: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error:InvalidConfig: {exc}", file=sys.stderr)
        return 2
    except IidLabError as exc:
        print(f"error:{exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
