"""Autoencoder capacity run: train on one scene, report held-out and train PSNR.

Usage: python3 scripts/ae_capacity.py --widths 32 64 96 --steps 6000 --batch 8 --lr 2e-3
"""
import argparse
import time

import numpy as np
import torch

from windowgen.data import build_scene_records
from windowgen.latent_video import FrameAutoencoder
from windowgen.metrics import psnr
from windowgen.training import pretrain_autoencoder


@torch.no_grad()
def frame_psnrs(ae, frames):
    x = torch.as_tensor(frames)
    y = ae.decode(ae.encode(x)).clamp(0, 1).numpy()
    return np.array([psnr(a, b) for a, b in zip(y, frames)])


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--widths", type=int, nargs=3, default=[32, 64, 96])
    p.add_argument("--steps", type=int, default=6000)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--save", default=None, help="optional path for the AE state dict")
    args = p.parse_args()
    torch.manual_seed(0)
    _, train = build_scene_records(0, length=97)
    _, held = build_scene_records(0, kinds=("lawnmower", "random-walk"), length=41, traj_seed=5)
    frames = np.concatenate([r.images for r in train])
    test = np.concatenate([r.images for r in held])
    ae = FrameAutoencoder(tuple(args.widths))
    t0 = time.time()
    pretrain_autoencoder(ae, frames, args.steps, batch=args.batch, lr=args.lr)
    dt = time.time() - t0
    h, t = frame_psnrs(ae, test), frame_psnrs(ae, frames[::4])
    print(f"widths {args.widths} steps {args.steps}: {dt / max(args.steps, 1):.3f}s/step, "
          f"held-out {h.mean():.2f} dB (min {h.min():.2f}), train {t.mean():.2f} dB "
          f"(min {t.min():.2f})")
    if args.save:
        torch.save(ae.state_dict(), args.save)


if __name__ == "__main__":
    main()
