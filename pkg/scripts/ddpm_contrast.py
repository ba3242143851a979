"""Train the default tenth-scale DDPM and report per-class lesion contrast of its samples.

    python scripts/ddpm_contrast.py [--samples 200] [--width 16] [--steps 1500]
"""

import argparse
import time

import numpy as np

from fedsynth import busgen, diffusion, gan
from fedsynth.config import RunConfig


def contrast(img: np.ndarray, frame: int = 4, inner: int = 6) -> float:
    c = img.shape[0] // 2
    border = np.ones(img.shape, bool)
    border[frame:-frame, frame:-frame] = False
    return float(img[border].mean() - img[c - inner : c + inner, c - inner : c + inner].mean())


if __name__ == "__main__":
    defaults = RunConfig()
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--width", type=int, default=defaults.ddpm_width)
    ap.add_argument("--steps", type=int, default=defaults.ddpm_steps)
    ap.add_argument("--w-g", type=float, default=defaults.w_g)
    args = ap.parse_args()
    cfg = RunConfig(scale_fraction=0.1, ddpm_width=args.width, ddpm_steps=args.steps, w_g=args.w_g)

    pooled = gan.pooled_training_set(busgen.build_federation(cfg.seed, cfg.scale_fraction))
    x = np.stack(pooled.images)[:, None]
    t0 = time.perf_counter()
    model, losses = diffusion.train_ddpm(x, np.array(pooled.labels), cfg.ddpm(), cfg.schedule(), cfg.guidance())
    tenth = max(1, len(losses) // 10)
    print(f"trained {args.steps} steps in {time.perf_counter() - t0:.0f}s; loss {np.mean(losses[:tenth]):.4f} -> {np.mean(losses[-tenth:]):.4f}")
    for cls, name in busgen.CLASS_NAMES.items():
        t0 = time.perf_counter()
        out = diffusion.ddpm_sample(model, cfg.schedule(), args.samples, cls, cfg.guidance(), seed=cfg.gen_seed)
        c = np.array([contrast(img) for img, _ in out])
        real = np.array([contrast(img) for img, lbl in zip(pooled.images, pooled.labels) if lbl == cls])
        print(
            f"{name:>9}: correct sign {np.mean(c > 0):.3f} (real {np.mean(real > 0):.3f}), "
            f"median contrast {np.median(c):.3f} (real {np.median(real):.3f}), {time.perf_counter() - t0:.0f}s"
        )
