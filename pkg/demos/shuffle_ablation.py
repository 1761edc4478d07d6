"""One seed of the MAE / pixel-shuffle ablation on oriented local patterns.

Four fine-tunes: {scratch, MAE-init} x {natural order, fixed pixel shuffle}.
Groups cover contiguous rows, so a shuffle scatters each group over the image.

Run:  python demos/shuffle_ablation.py --seed 0
"""
import argparse
import tempfile
import time
from dataclasses import replace
from pathlib import Path

from hiperceiver.cli import RunConfig, datasets_for, model_for
from hiperceiver.datasets import DatasetSpec
from hiperceiver.mae import MaskSpec
from hiperceiver.train import TrainConfig, finetune_classify, init_from_checkpoint, pretrain_mae, save_training

p = argparse.ArgumentParser()
p.add_argument("--seed", type=int, default=0)
p.add_argument("--mae-steps", type=int, default=400)
p.add_argument("--ft-steps", type=int, default=250)
args = p.parse_args()

data = DatasetSpec("local-pattern", grid=32, train_size=2048, val_size=256, noise=0.1)
tmp = Path(tempfile.mkdtemp())
t0 = time.perf_counter()
for shuffle in (False, True):
    cfg = RunConfig(seed=args.seed, task="classify", dataset=data, shuffle_pixels=shuffle)
    train, val = datasets_for(cfg)
    mae = model_for(replace(cfg, task="mae"))
    state = pretrain_mae(mae, train, None, MaskSpec(0.85, seed=args.seed),
                         TrainConfig(steps=args.mae_steps, batch_size=8, base_lr=1e-3, warmup_steps=50, seed=args.seed))
    ckpt = save_training(tmp / f"mae_{int(shuffle)}.hipckpt", mae, state)
    for init in ("scratch", "mae"):
        model = model_for(cfg)
        if init == "mae":
            init_from_checkpoint(model, ckpt)
        acc = finetune_classify(model, train, val, TrainConfig(steps=args.ft_steps, batch_size=16, base_lr=3e-4,
                                                               warmup_steps=30, beta2=0.999, seed=args.seed))
        label = "shuffled" if shuffle else "natural "
        print(f"{label} {init:7s} accuracy {acc:.3f}   ({time.perf_counter() - t0:.0f}s)", flush=True)
