"""
A two-dimensional density with joint and independent decoders
=============================================================

Each sample is a pair of grid coordinates (L = 2 tokens, C = side classes).
We train a small MLP denoiser with l = 3 digits per coordinate twice: once
with a joint softmax over codes and once with a product of per-digit
softmaxes, then compare sample histograms against the data.

Runs in a few minutes on a laptop CPU. Pass a step count to train longer.
"""

import sys

import numpy as np

from primemdm import get_schedule, make_codec
from primemdm.data import builtin_density, grid_sampler, histogram_image, sample_histogram
from primemdm.data import tv_distance, write_pgm
from primemdm.model import Model
from primemdm.net import NetConfig, init
from primemdm.sampler import SamplerConfig, generate_batch
from primemdm.trainer import TrainConfig, eval_nll, fit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
side = 64
grid = builtin_density("gaussians", side)
sch = get_schedule("linear")
data = grid_sampler(grid)
write_pgm("density.pgm", histogram_image(grid.probs))

for head in ("joint", "independent"):
    codec = make_codec(side, 3)
    cfg = NetConfig(2, 3, codec.base, side, embed_dim=48, hidden_dim=256, num_layers=4, head=head)
    model = Model(cfg, codec)
    params = init(cfg, np.random.default_rng(0))
    params, hist = fit(params, model, data, sch,
                       TrainConfig(batch_size=1024, steps=steps, seed=0),
                       log=lambda msg: print(f"  [{head}] {msg}"))
    if head == "joint":
        rep = eval_nll(params, model, data, sch, 4096, np.random.default_rng(1))
        print(f"  bound {rep.nats_per_token:.3f} +- {rep.stderr:.3f} nats/token")
    for T in (6, 64):
        out = generate_batch(params, model, SamplerConfig(num_steps=T), 50_000,
                             np.random.default_rng(2))
        print(f"  {head:11s} T={T:3d}: TV {tv_distance(grid, out.tokens):.3f}, "
              f"mean idle steps {out.idle_step_counts.mean():.2f}")
    write_pgm(f"samples_{head}.pgm", histogram_image(sample_histogram(out.tokens, side)))

print("histograms written to density.pgm, samples_joint.pgm, samples_independent.pgm")
