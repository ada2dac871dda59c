"""One desk-scale train/eval cycle for init and generator tuning."""

import argparse
import tempfile
import time

from flowad.config import TrainConfig
from flowad.infer import evaluate
from flowad.records import load_images, load_manifest
from flowad.rng import Rng
from flowad.synth import SyntheticGenConfig, generate_synthetic
from flowad.train import build_model_for, train_loop

ap = argparse.ArgumentParser()
ap.add_argument("--shift", type=float, default=1.4)
ap.add_argument("--cls-shift", type=float, default=2.0)
ap.add_argument("--noise", type=float, default=0.05)
ap.add_argument("--fmin", type=int, default=3)
ap.add_argument("--fmax", type=int, default=6)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--quiet", action="store_true")
args = ap.parse_args()

tmp = tempfile.mkdtemp()
mpath = generate_synthetic(
    SyntheticGenConfig(seed=args.seed, shift=args.shift, cls_shift=args.cls_shift,
                       noise=args.noise, footprint_min=args.fmin, footprint_max=args.fmax),
    tmp,
)
man = load_manifest(mpath)
tc = TrainConfig(B=3, K=4, P=5, Q=5, seed=args.seed)
train_images = load_images(man, "train")
test_images = load_images(man, "test")

untrained = build_model_for(train_images, tc)
rep0, _ = evaluate(untrained, test_images, tc.R_infer, "image", Rng(args.seed, path=(4,)))
t0 = time.time()
res = train_loop(man, tc, verbose=not args.quiet)
rep, _ = evaluate(res["model"], test_images, tc.R_infer, "image", Rng(args.seed, path=(4,)))
print(f"shift={args.shift} noise={args.noise} fp={args.fmin}-{args.fmax} seed={args.seed} "
      f"time={time.time()-t0:.0f}s epochs={len(res['history'])}")
for line in (res["log_lines"][1], res["log_lines"][len(res["log_lines"]) // 2], res["log_lines"][-1]):
    print("  log:", line)
print(f"  untrained: pixel={rep0.mean.pixel_auroc:.4f} image={rep0.mean.image_auroc:.4f}")
print(f"  trained:   pixel={rep.mean.pixel_auroc:.4f} image={rep.mean.image_auroc:.4f} "
      f"pro={rep.mean.pixel_pro:.4f}")
for name, row in rep.per_category.items():
    print(f"    {name}: pixel={row.pixel_auroc:.4f} image={row.image_auroc:.4f}")
