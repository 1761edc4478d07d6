"""Steps per second of grouped hip16-toy against its all-groups-1 twin.

Run:  python demos/efficiency.py --tokens 4096,16384,50176
"""
import argparse
import statistics

import numpy as np

from hiperceiver.attn import count_costs
from hiperceiver.cli import RunConfig, bench_step_time, model_for
from hiperceiver.datasets import DatasetSpec

p = argparse.ArgumentParser()
p.add_argument("--tokens", default="4096,16384,50176")
p.add_argument("--batch", type=int, default=2)
args = p.parse_args()

cfg = RunConfig(task="classify", dataset=DatasetSpec("local-pattern", grid=224))
for m in [int(v) for v in args.tokens.split(",")]:
    x = np.random.default_rng(0).standard_normal((args.batch, m, 1)).astype(np.float32)
    rates, macs = {}, {}
    for name in ("hip16-toy", "hip16-toy-flat"):
        model = model_for(cfg, name, tokens=m)
        macs[name] = count_costs(model.config.encoder_config(), m).total
        rates[name] = 1.0 / statistics.median(bench_step_time(model, x, warmup=1, steps=3))
    print(f"M={m:6d}  grouped {rates['hip16-toy']:.3f} steps/s  flat {rates['hip16-toy-flat']:.3f} steps/s  "
          f"speedup {rates['hip16-toy'] / rates['hip16-toy-flat']:.2f}x  "
          f"MAC ratio {macs['hip16-toy-flat'] / macs['hip16-toy']:.2f}")
