"""Train the smoke configuration under each ablation and tabulate the result.

    python3 scripts/ablation.py [--steps 200] [--set key=value ...]
"""
import argparse
import csv
from pathlib import Path

import torch

from m2gan.config import load_config
from m2gan.data import procedural_pairs, to_image, to_tensor
from m2gan.evaluation import RandomEmbedder, evaluate_pairs
from m2gan.training import Trainer

ROOT = Path(__file__).resolve().parents[1]


def derain(gen, pairs):
    with torch.no_grad():
        return [(p.id, to_image(gen(to_tensor(p.rain)[None])[-1].estimate[0]), p.clean) for p in pairs]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "smoke.yaml")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--run-dir", default="runs/ablation")
    args = ap.parse_args()

    rows = []
    for ablation in ("no-disc", "no-seg", "full"):
        cfg = load_config(args.config, args.set + [f"train.ablation={ablation}", f"train.epochs={args.steps}"])
        pairs = procedural_pairs(4, 64, cfg.synthesis)
        trainer = Trainer(cfg)
        run = Path(args.run_dir) / ablation
        trainer.fit(pairs, run)
        with open(run / "loss_log.csv") as fh:
            logged = [k for k, v in next(csv.DictReader(fh)).items() if v != ""]
        rep = evaluate_pairs(derain(trainer.models.generator.eval(), pairs), RandomEmbedder())
        rows.append((ablation, rep.fid, rep.mean_psnr, rep.mean_ssim, " ".join(
            k for k in ("d_img", "d_seg", "g_adv") if k in logged)))
    print(f"{'ablation':<8} {'FID':>9} {'PSNR':>7} {'SSIM':>7}  logged adversarial terms")
    for name, f, p, s, logged in rows:
        print(f"{name:<8} {f:9.4f} {p:7.2f} {s:7.4f}  {logged or '-'}")


if __name__ == "__main__":
    main()
