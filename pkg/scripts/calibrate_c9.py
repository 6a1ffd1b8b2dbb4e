"""Calibration for the cluster-vs-pixel-token direction (not shipped in tests)."""
import sys, time
import numpy as np
import torch

torch.set_num_threads(2)

from urlost.datasets import synthesize_image_set, downsample_grayscale, make_global_permutation, apply_permutation
from urlost.affinity import affinity_matrix, normalize_unit_range, density
from urlost.spectral import cluster_signal_dimensions, singleton_assignment
from urlost.training import TrainConfig, train, encode_signals
from urlost.model import ModelConfig
from urlost.evaluation import linear_probe
from urlost.pipeline import train_test_split

t0 = time.time()
def tick(msg):
    print(f"[{time.time()-t0:7.1f}s] {msg}", flush=True)

N = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 20
M = int(sys.argv[3]) if len(sys.argv) > 3 else 16

ims = synthesize_image_set(N, seed=0)
gray = downsample_grayscale(ims.images, 4)  # (N, 64)
perm = make_global_permutation(0, 64)
signals = apply_permutation(gray, perm)
y = ims.labels
tr, te = train_test_split(N, 0.8, seed=0)
tick(f"data {signals.shape}")

norm = normalize_unit_range(signals, fit_rows=tr)
aff = affinity_matrix(norm.values[tr], 16)
assign_cluster, _, _ = cluster_signal_dimensions(aff, M, density(None, aff, 0, 0), "yu-shi", 0)
tick(f"clusters sizes: {sorted(assign_cluster.sizes.tolist())}")
assign_pixel = singleton_assignment(64)

for name, assign, ratio in [("cluster", assign_cluster, 0.6), ("pixel", assign_pixel, 0.6)]:
    accs = []
    for seed in (0, 1, 2):
        mc = ModelConfig(d_model=32, enc_depth=2, dec_depth=1, n_heads=4, d_dec=16, dec_heads=4)
        tc = TrainConfig(epochs=EPOCHS, batch_size=128, mask_ratio=ratio, precision="f32",
                         seed=seed, warmup_epochs=2, learning_rate=1.5e-3, weight_decay=0.01)
        res = train(signals[tr], assign, mc, tc)
        reps = encode_signals(res.model, signals, assign)
        acc = linear_probe(reps[tr], y[tr], reps[te], y[te]).accuracy
        accs.append(acc)
        tick(f"  {name} seed {seed}: loss {res.loss_curve[-1]:.4f} acc {acc:.4f}")
    tick(f"{name}: mean {np.mean(accs):.4f}")
