"""Calibration for the foveated density-ablation direction (not shipped in tests)."""
import sys, time
import numpy as np
import torch

torch.set_num_threads(2)

from urlost import *
from urlost.datasets import synthesize_image_set, make_global_permutation, apply_permutation
from urlost.retina import (build_retina_lattice, default_lattice_config, foveate_batch,
                           kernel_major_signals, dim_eccentricities)
from urlost.affinity import affinity_matrix, normalize_unit_range, density
from urlost.spectral import cluster_signal_dimensions
from urlost.training import TrainConfig, train, encode_signals
from urlost.model import ModelConfig
from urlost.evaluation import linear_probe
from urlost.pipeline import train_test_split

t0 = time.time()
def tick(msg):
    print(f"[{time.time()-t0:7.1f}s] {msg}", flush=True)

N = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 15

import os
CACHE = f"/tmp/c8_cache_{N}.npz"
ims = synthesize_image_set(N, seed=0)
y = ims.labels
if os.path.exists(CACHE):
    blob = np.load(CACHE)
    signals, ecc, aff_values = blob["signals"], blob["ecc"], blob["aff"]
    tick("loaded cache")
else:
    tick(f"synthesized {N}")
    big = np.repeat(np.repeat(ims.images, 3, axis=1), 3, axis=2)
    lat = build_retina_lattice(default_lattice_config(96), 96)
    resp = foveate_batch(big, lat)
    signals = kernel_major_signals(resp)
    ecc = dim_eccentricities(lat, 3)
    perm = make_global_permutation(0, signals.shape[1])
    signals = apply_permutation(signals, perm)
    ecc = ecc[perm.mapping]
    tick(f"foveated {signals.shape}")
    tr, te = train_test_split(N, 0.8, seed=0)
    norm = normalize_unit_range(signals, fit_rows=tr)
    aff = affinity_matrix(norm.values[tr], 16)
    aff_values = aff.values
    np.savez(CACHE, signals=signals, ecc=ecc, aff=aff_values)
    tick("affinity done")

from urlost.affinity import AffinityMatrix
aff = AffinityMatrix(aff_values, 16)
tr, te = train_test_split(N, 0.8, seed=0)
results = {}
for (alpha, beta) in [(0.0, 0.0), (0.5, 2.0)]:
    dens = density(ecc, aff, alpha, beta)
    assign, emb, _ = cluster_signal_dimensions(aff, 64, dens, "yu-shi", seed=0)
    tick(f"clustered ({alpha},{beta}): sizes min {assign.sizes.min()} max {assign.sizes.max()}")
    accs = []
    for seed in (0, 1, 2):
        mc = ModelConfig(d_model=64, enc_depth=2, dec_depth=1, n_heads=4, d_dec=32, dec_heads=4)
        tc = TrainConfig(epochs=EPOCHS, batch_size=128, mask_ratio=0.6, precision="f32",
                         seed=seed, warmup_epochs=2, learning_rate=1e-3, weight_decay=0.01)
        res = train(signals[tr], assign, mc, tc)
        reps = encode_signals(res.model, signals, assign)
        acc = linear_probe(reps[tr], y[tr], reps[te], y[te]).accuracy
        accs.append(acc)
        tick(f"  ({alpha},{beta}) seed {seed}: loss {res.loss_curve[-1]:.4f} acc {acc:.4f}")
    results[(alpha, beta)] = np.mean(accs)
tick(f"RESULT uniform={results[(0.0,0.0)]:.4f} density={results[(0.5,2.0)]:.4f} "
     f"diff={results[(0.5,2.0)]-results[(0.0,0.0)]:+.4f}")
