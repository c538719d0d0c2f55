"""Command-line entry point: ``m2gan {synthesize,train,derain,evaluate}``.

Exit codes: 0 success, 1 validation failure, 2 runtime failure.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .data import (DatasetManifest, IMAGE_SUFFIXES, load_image, load_manifest, procedural_scene,
                   save_image, save_manifest, synthesize_raindrops, to_image, to_tensor)
from .errors import CheckpointVersionError, ConfigurationError, M2GANError, ValidationError
from .evaluation import evaluate_dirs

log = logging.getLogger("m2gan")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _resolve(args, base=None):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
        overrides.append(f"synthesis.seed={args.seed}")
    if getattr(args, "ablation", None):
        overrides.append(f"train.ablation={args.ablation}")
    if getattr(args, "adv_mode", None):
        overrides.append(f"train.adv_mode={args.adv_mode}")
    if getattr(args, "deterministic", False):
        overrides.append("train.deterministic=true")
    return config_mod.load_config(args.config, overrides, base=base)


def cmd_synthesize(args):
    cfg = _resolve(args)
    out = Path(args.out_dir)
    (out / "rain").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    sources = []
    if args.procedural:
        h, w = (int(v) for v in args.size.lower().split("x"))
        sources = [(f"scene_{i:04d}", lambda i=i: procedural_scene(h, w, seed=cfg.synthesis.seed * 100003 + i))
                   for i in range(args.procedural)]
    else:
        clean_dir = Path(args.clean_dir)
        files = sorted(p for p in clean_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        sources = [(p.stem, lambda p=p: load_image(p)) for p in files]
    ids = []
    for i, (pid, read) in enumerate(sources):
        try:
            clean = read()
        except Exception as exc:  # unreadable image: warn and keep going
            log.warning("skipping %s: %s", pid, exc)
            continue
        scfg = dataclasses.replace(cfg.synthesis, seed=int(np.random.SeedSequence(
            [cfg.synthesis.seed, i]).generate_state(1)[0]))
        save_image(out / "rain" / f"{pid}.png", synthesize_raindrops(clean, scfg))
        save_image(out / "gt" / f"{pid}.png", clean)
        ids.append(pid)
    if not ids:
        print("no pairs written", file=sys.stderr)
        return EXIT_VALIDATION
    save_manifest(DatasetManifest(out, ids, args.split))
    config_mod.dump_config(cfg, out / "synthesis_config.yaml")
    print(f"wrote {len(ids)} pairs to {out}")
    return EXIT_OK


def cmd_train(args):
    from .training import Trainer, latest_checkpoint, load_checkpoint

    run_dir = Path(args.run_dir)
    ckpt = latest_checkpoint(run_dir) if args.resume else None
    if ckpt is not None:
        trainer = load_checkpoint(ckpt)
        log.info("resuming from %s at epoch %d", ckpt, trainer.epoch)
    else:
        cfg = _resolve(args)
        if args.stages:
            cfg.pipeline.num_stages = args.stages
        trainer = Trainer(cfg)
    manifest = load_manifest(args.data)
    pairs = manifest.load_pairs()
    print(f"training on {manifest.n_tr} pairs, {trainer.models.num_parameters()} parameters, "
          f"ablation={trainer.cfg.train.ablation}")
    trainer.fit(pairs, run_dir)
    print(f"run directory: {run_dir}")
    return EXIT_OK


def cmd_derain(args):
    from .training import load_checkpoint

    trainer = load_checkpoint(args.checkpoint)
    gen = trainer.models.generator.eval()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in Path(args.in_dir).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValidationError(f"no images in {args.in_dir}")
    for p in files:
        x = to_tensor(load_image(p))[None]
        with torch.no_grad():
            outputs = gen(x, num_stages=args.stages)
        save_image(out / f"{p.stem}.png", to_image(outputs[-1].estimate[0]))
        if args.all_stages or args.dump_maps:
            for k, o in enumerate(outputs, 1):
                if args.all_stages:
                    save_image(out / f"{p.stem}_stage{k}.png", to_image(o.estimate[0]))
                if args.dump_maps:
                    rain = o.rain_map[0].expand(3, -1, -1)
                    save_image(out / f"{p.stem}_rainmap{k}.png", to_image(rain))
    print(f"derained {len(files)} images into {out}")
    return EXIT_OK


def cmd_evaluate(args):
    report = evaluate_dirs(args.pred_dir, args.gt_dir, out_dir=args.out)
    print(report.table())
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="m2gan", description="multi-stage raindrop removal GAN")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", parents=[common], help="build a paired rain/gt dataset")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--clean-dir")
    src.add_argument("--procedural", type=int, metavar="N", help="generate N procedural scenes")
    s.add_argument("--size", default="128x96", help="HxW for procedural scenes")
    s.add_argument("--split", default="train", choices=["train", "test"])
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_synthesize)

    t = sub.add_parser("train", parents=[common], help="train on a rain/gt dataset")
    t.add_argument("data", help="dataset root with rain/ and gt/")
    t.add_argument("run_dir")
    t.add_argument("--stages", type=int)
    t.add_argument("--ablation", choices=config_mod.ABLATIONS)
    t.add_argument("--adv-mode", choices=["standard", "literal"])
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in run_dir")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("derain", parents=[common], help="run a trained model on a directory")
    d.add_argument("checkpoint")
    d.add_argument("in_dir")
    d.add_argument("out_dir")
    d.add_argument("--stages", type=int)
    d.add_argument("--all-stages", action="store_true", help="also write every stage's estimate")
    d.add_argument("--dump-maps", action="store_true", help="write the attention rain map of every stage")
    d.set_defaults(func=cmd_derain)

    e = sub.add_parser("evaluate", parents=[common], help="PSNR/SSIM/FID of predictions vs ground truth")
    e.add_argument("pred_dir")
    e.add_argument("gt_dir")
    e.add_argument("--out", help="directory for report.json / report.txt")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.print_config:
            import yaml
            print(yaml.safe_dump(config_mod.to_dict(_resolve(args)), sort_keys=False), end="")
            return EXIT_OK
        return args.func(args)
    except (ValidationError, ConfigurationError, CheckpointVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except M2GANError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
