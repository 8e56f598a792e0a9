"""Dev probe for the acceptance trend: builds the smoke pipeline and prints
per-cell PSNR/SSIM for unimodal vs crossmodal. Not part of the package."""

import sys
import time

import numpy as np

sys.path.insert(0, "src")

from xmct import config, gridio, harness, metrics

t0 = time.time()


def log(msg):
    print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)


OUT = sys.argv[1] if len(sys.argv) > 1 else "/tmp/tune1"
VOLS = int(sys.argv[2]) if len(sys.argv) > 2 else 1

cfg = config.default_config(seed=1234, out_dir=OUT, **{
    "phantoms": {"volume_side": 64, "depth": 32},
    "data": {"train_volumes": 6, "test_volumes": VOLS, "pair_count": 144,
             "prior_slices": 360, "view_budget": 256},
    "prior": {"epochs": 14, "batch": 4, "lr": 2e-3},
    "xmodal": {"epochs": 45, "batch": 8, "lr": 0.1, "base_channels": 16},
    "sweep": {"views": [8, 16, 32], "steps": [10], "noise": [0.0],
              "modes": ["unimodal", "crossmodal"]},
})

import pathlib
if not (pathlib.Path(OUT) / "data" / "manifest.jsonl").exists():
    log("generate-data ...")
    harness.cmd_generate_data(cfg)
    log("data done")
if not (pathlib.Path(OUT) / "checkpoints" / "prior.ckpt").exists():
    log("train-prior ...")
    _, res = harness.cmd_train_prior(cfg)
    log(f"prior done: epoch losses {[round(v, 4) for v in res.epoch_losses]}")
if not (pathlib.Path(OUT) / "checkpoints" / "xmodal.ckpt").exists():
    log("train-xmodal ...")
    _, res, gate = harness.cmd_train_xmodal(cfg)
    log(f"xmodal done: gate {gate}")

log("reconstruct ...")
statuses, failed = harness.cmd_reconstruct(cfg)
log(f"cells done, failed: {failed}")
reports = harness.cmd_evaluate(cfg)
by_key = {}
for r in reports:
    by_key.setdefault((r.views, r.mode), []).append((r.mean_psnr, r.mean_ssim))
for views in cfg.raw["sweep"]["views"]:
    uni = np.mean([v for v, _ in by_key[(views, "unimodal")]])
    cro = np.mean([v for v, _ in by_key[(views, "crossmodal")]])
    us = np.mean([s for _, s in by_key[(views, "unimodal")]])
    cs = np.mean([s for _, s in by_key[(views, "crossmodal")]])
    log(f"views {views:3d}: uni {uni:6.2f}/{us:.3f}  cross {cro:6.2f}/{cs:.3f}  "
        f"dPSNR {cro - uni:+.2f} dSSIM {cs - us:+.3f}")
