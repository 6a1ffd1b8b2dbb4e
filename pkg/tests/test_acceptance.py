"""Acceptance suite: one test per criterion, each printing a PASS line.

Oracle-equivalence and invariant criteria run at the stated tolerances; the
training-based criteria (6-9) run the full pipeline at desk scale on the
seeded synthetic image corpus and check the documented directional gaps.
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from urlost import io
from urlost.affinity import (
    affinity_matrix,
    density,
    mutual_information,
    normalize_unit_range,
)
from urlost.config import config_from_dict
from urlost.datasets import (
    apply_permutation,
    downsample_grayscale,
    make_global_permutation,
    make_local_permutations,
    locally_permuted_signals,
    synthesize_image_set,
)
from urlost.evaluation import ProbeConfig, linear_probe
from urlost.model import ClusterMae, ModelConfig, collect_gradients
from urlost.pipeline import (
    stage_affinity,
    stage_cluster,
    stage_eval,
    stage_synth,
    stage_train,
    train_test_split,
)
from urlost.rng import substream
from urlost.spectral import (
    ClusterAssignment,
    adjusted_rand_index,
    classic_spectral_partition,
    cluster_signal_dimensions,
    singleton_assignment,
    top_k_eigenvectors,
)
from urlost.training import TrainConfig, train, encode_signals

torch.set_num_threads(2)


def report_pass(number: int, name: str, started: float, budget: float) -> None:
    elapsed = time.time() - started
    assert elapsed < budget, f"criterion {number} exceeded its {budget}s budget ({elapsed:.0f}s)"
    print(f"\n[ACCEPTANCE] criterion {number:2d} {name}: PASS ({elapsed:.1f}s)")


def planted_signals(n_blocks, per_block, n_samples, seed, noise=0.03):
    rng = substream(seed, "acc-planted")
    latents = rng.random((n_samples, n_blocks))
    cols, truth = [], []
    for blk in range(n_blocks):
        for _ in range(per_block):
            cols.append(np.clip(latents[:, blk] + noise * rng.standard_normal(n_samples), 0, 1))
            truth.append(blk)
    return np.array(cols).T, np.array(truth)


def probe_accuracy(model, assignment, signals, labels, train_rows, test_rows):
    reps = encode_signals(model, signals, assignment)
    report = linear_probe(reps[train_rows], labels[train_rows],
                          reps[test_rows], labels[test_rows], ProbeConfig())
    return report.accuracy


# ---------------------------------------------------------------------------
# 1. MI oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_01_mi_oracle_equivalence():
    started = time.time()

    def brute_force(ci, cj, bins):
        joint: dict[tuple, int] = {}
        n = len(ci)
        for a, b in zip(ci, cj):
            key = (min(int(a * bins), bins - 1), min(int(b * bins), bins - 1))
            joint[key] = joint.get(key, 0) + 1
        row: dict[int, int] = {}
        col: dict[int, int] = {}
        for (l, k), c in joint.items():
            row[l] = row.get(l, 0) + c
            col[k] = col.get(k, 0) + c
        return math.fsum(
            (c / n) * math.log2((c / n) / ((row[l] / n) * (col[k] / n)))
            for (l, k), c in joint.items()
        )

    rng = substream(0, "acc-mi")
    for pair in range(50):
        n = int(rng.integers(200, 1500))
        bins = int(rng.choice([4, 8, 16]))
        a = rng.uniform(size=n)
        b = np.clip(a + rng.normal(0, rng.uniform(0.05, 0.8), size=n), 0, 1)
        assert abs(mutual_information(a, b, bins) - brute_force(a, b, bins)) < 1e-12
    report_pass(1, "MI oracle equivalence (50 pairs, 1e-12)", started, budget=5.0)


# ---------------------------------------------------------------------------
# 2. Planted-partition recovery
# ---------------------------------------------------------------------------


def test_criterion_02_planted_partition_recovery():
    started = time.time()
    signals, truth = planted_signals(4, 16, 800, seed=1)
    aff = affinity_matrix(normalize_unit_range(signals).values, 16)
    within = np.mean([aff.values[i, j] for i in range(16) for j in range(16) if i != j])
    across = np.mean([aff.values[i, j] for i in range(16) for j in range(16, 32)])
    assert within > 5 * across  # within-block MI >> cross-block
    assign, _, _ = cluster_signal_dimensions(aff, 4, density(None, aff, 0.0, 0.0), "yu-shi", 0)
    assert adjusted_rand_index(assign.labels, truth) == 1.0

    # 10-dimension / 2-block instance: exhaustive normalized-cut optimality
    small, small_truth = planted_signals(2, 5, 600, seed=2)
    aff_small = affinity_matrix(normalize_unit_range(small).values, 16)
    assign_small, _, _ = cluster_signal_dimensions(
        aff_small, 2, density(None, aff_small, 0.0, 0.0), "yu-shi", 0)
    assert adjusted_rand_index(assign_small.labels, small_truth) == 1.0

    def ncut(a, labels):
        total = 0.0
        for side in (0, 1):
            mask = labels == side
            total += a[np.ix_(mask, ~mask)].sum() / a[mask].sum()
        return total

    best = min(
        ncut(aff_small.values, np.array((0,) + bits))
        for bits in itertools.product([0, 1], repeat=9)
        if any(bits)  # dim 0 pinned to side 0; both sides non-empty
    )
    assert abs(ncut(aff_small.values, assign_small.labels) - best) < 1e-12
    report_pass(2, "planted-partition recovery + exhaustive optimality", started, budget=10.0)


# ---------------------------------------------------------------------------
# 3. Uniform-density equivalence
# ---------------------------------------------------------------------------


def test_criterion_03_uniform_density_equals_classic():
    started = time.time()
    for seed in range(20):
        rng = substream(seed, "acc-uniform")
        d = int(rng.integers(10, 24))
        m = int(rng.integers(2, 6))
        raw = rng.random((d, d))
        aff_values = raw + raw.T + 1e-6
        from urlost.affinity import AffinityMatrix

        aff = AffinityMatrix(aff_values, 8)
        adjusted, _, _ = cluster_signal_dimensions(
            aff, m, density(None, aff, 0.0, 0.0), "yu-shi", seed)
        classic = classic_spectral_partition(aff, m, "yu-shi", seed)
        assert np.array_equal(adjusted.labels, classic.labels), f"seed {seed}"
    report_pass(3, "uniform-density path == classic path (20 seeds, exact)", started, budget=60.0)


# ---------------------------------------------------------------------------
# 4. Eigensolver residuals
# ---------------------------------------------------------------------------


def test_criterion_04_eigensolver_residuals():
    started = time.time()
    for trial in range(100):
        rng = substream(trial, "acc-eig")
        d = int(rng.integers(2, 129))
        raw = rng.standard_normal((d, d)) * rng.uniform(0.1, 10)
        mat = raw + raw.T
        k = int(rng.integers(1, d + 1))
        emb = top_k_eigenvectors(mat, k)
        fro = np.linalg.norm(mat, "fro")
        residuals = np.linalg.norm(mat @ emb.X - emb.X * emb.eigenvalues[None, :], axis=0)
        assert residuals.max() < 1e-8 * fro
        gram = emb.X.T @ emb.X
        assert np.abs(gram - np.eye(k)).max() < 1e-8
    report_pass(4, "eigen residuals + orthonormality (100 seeded matrices)", started, budget=30.0)


# ---------------------------------------------------------------------------
# 5. Gradient check
# ---------------------------------------------------------------------------


def test_criterion_05_gradient_check_every_parameter():
    started = time.time()
    sizes = [3, 3, 3, 3]
    cfg = ModelConfig(d_model=8, enc_depth=1, dec_depth=1, n_heads=2, d_dec=8,
                      dec_heads=2, mlp_ratio=2)
    model = ClusterMae(sizes, cfg).to(torch.float64)
    from urlost.model import init_parameters

    init_parameters(model, seed=0)
    rng = substream(1, "acc-grad")
    clusters = [torch.from_numpy(rng.random((2, s))) for s in sizes]
    mask = np.array([[True, True, False, False], [False, False, True, True]])
    grads = collect_gradients(model, model.loss(clusters, mask))

    step = 1e-5
    worst = 0.0
    for name, param in model.named_parameters():
        flat = param.detach().view(-1)
        analytic = grads[name].ravel()
        for idx in range(len(flat)):
            with torch.no_grad():
                keep = float(flat[idx])
                flat[idx] = keep + step
                up = float(model.loss(clusters, mask).detach())
                flat[idx] = keep - step
                down = float(model.loss(clusters, mask).detach())
                flat[idx] = keep
            numeric = (up - down) / (2 * step)
            scale = max(abs(analytic[idx]), abs(numeric))
            if scale > 1e-6:
                worst = max(worst, abs(analytic[idx] - numeric) / scale)
            else:
                assert abs(analytic[idx] - numeric) < 1e-9
    assert worst < 1e-5, f"max relative gradient error {worst:.2e}"
    report_pass(5, f"gradient check, every parameter (max rel err {worst:.1e})",
                started, budget=60.0)


# ---------------------------------------------------------------------------
# shared desk-scale corpus for the training criteria
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def local_permuted_2000():
    images = synthesize_image_set(2000, seed=0)
    perms = make_local_permutations(7, 4, 32, 32, 3)
    signals, cluster_of_dim = locally_permuted_signals(images.images, perms, 4)
    assignment = ClusterAssignment(cluster_of_dim, 64)
    train_rows, test_rows = train_test_split(2000, 0.8, seed=0)
    return signals, images.labels, assignment, perms, train_rows, test_rows


DESK_MODEL = ModelConfig(d_model=64, enc_depth=2, dec_depth=1, n_heads=4, d_dec=32, dec_heads=4)


def desk_train_cfg(seed, epochs=20, **kw):
    return TrainConfig(epochs=epochs, batch_size=128, mask_ratio=kw.pop("mask_ratio", 0.6),
                       precision="f32", seed=seed, warmup_epochs=2,
                       learning_rate=kw.pop("learning_rate", 1e-3),
                       weight_decay=kw.pop("weight_decay", 0.01), **kw)


# ---------------------------------------------------------------------------
# 6. Alignment emergence
# ---------------------------------------------------------------------------


def test_criterion_06_alignment_emergence(local_permuted_2000):
    started = time.time()
    signals, labels, assignment, perms, train_rows, _ = local_permuted_2000
    cfg = desk_train_cfg(seed=0, epochs=12, learning_rate=2e-3, weight_decay=0.05,
                         mask_ratio=0.75)
    result = train(signals[train_rows], assignment, DESK_MODEL, cfg, perms=perms)
    curve = np.array(result.alignment_curve)
    assert curve[-1] > 3.0 * curve[0], f"final {curve[-1]:.3f} vs epoch-1 {curve[0]:.3f}"
    assert curve[-1] > 0.3, f"final alignment {curve[-1]:.3f}"
    rho = spearmanr(np.arange(len(curve)), curve).statistic
    assert rho > 0.8, f"Spearman rho {rho:.3f}, curve {np.round(curve, 3)}"
    report_pass(6, f"alignment emergence (final {curve[-1]:.2f}, rho {rho:.2f})",
                started, budget=7200.0)


# ---------------------------------------------------------------------------
# 7. Ablation direction: non-shared vs shared projections
# ---------------------------------------------------------------------------


def test_criterion_07_nonshared_beats_shared(local_permuted_2000):
    started = time.time()
    signals, labels, assignment, _, train_rows, test_rows = local_permuted_2000
    means = {}
    for shared in (False, True):
        accs = []
        for seed in (0, 1, 2):
            model_cfg = ModelConfig(**{**DESK_MODEL.to_dict(), "shared_projection": shared})
            result = train(signals[train_rows], assignment, model_cfg, desk_train_cfg(seed))
            accs.append(probe_accuracy(result.model, assignment, signals, labels,
                                       train_rows, test_rows))
        means[shared] = float(np.mean(accs))
    gap = means[False] - means[True]
    assert gap >= 0.02, f"non-shared {means[False]:.3f} vs shared {means[True]:.3f}"
    report_pass(7, f"non-shared {means[False]:.3f} > shared {means[True]:.3f} by {gap:.3f}",
                started, budget=21600.0)


# ---------------------------------------------------------------------------
# 8. Ablation direction: density-adjusted vs uniform clustering
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def foveated_5000():
    from urlost.datasets import make_global_permutation
    from urlost.retina import (build_retina_lattice, default_lattice_config,
                               dim_eccentricities, foveate_batch, kernel_major_signals)

    images = synthesize_image_set(5000, seed=0)
    big = np.repeat(np.repeat(images.images, 3, axis=1), 3, axis=2)
    lattice = build_retina_lattice(default_lattice_config(96), 96)
    signals = kernel_major_signals(foveate_batch(big, lattice))
    ecc = dim_eccentricities(lattice, 3)
    perm = make_global_permutation(0, signals.shape[1])
    signals = apply_permutation(signals, perm)
    ecc = ecc[perm.mapping]
    train_rows, test_rows = train_test_split(5000, 0.8, seed=0)
    return signals, images.labels, ecc, train_rows, test_rows


def test_criterion_08_density_adjusted_vs_uniform(foveated_5000):
    started = time.time()
    signals, labels, ecc, train_rows, test_rows = foveated_5000
    normalized = normalize_unit_range(signals, fit_rows=train_rows)
    aff = affinity_matrix(normalized.values[train_rows], 16)
    means = {}
    for alpha, beta in ((0.0, 0.0), (0.5, 2.0)):
        dens = density(ecc, aff, alpha, beta)
        assignment, _, _ = cluster_signal_dimensions(aff, 64, dens, "yu-shi", 0)
        accs = []
        for seed in (0, 1, 2):
            result = train(signals[train_rows], assignment, DESK_MODEL,
                           desk_train_cfg(seed, epochs=15))
            accs.append(probe_accuracy(result.model, assignment, signals, labels,
                                       train_rows, test_rows))
        means[(alpha, beta)] = float(np.mean(accs))
    assert means[(0.5, 2.0)] >= means[(0.0, 0.0)], (
        f"density-adjusted {means[(0.5, 2.0)]:.4f} < uniform {means[(0.0, 0.0)]:.4f}")
    report_pass(8, f"density-adjusted {means[(0.5, 2.0)]:.3f} >= uniform "
                   f"{means[(0.0, 0.0)]:.3f}", started, budget=28800.0)


# ---------------------------------------------------------------------------
# 9. Cluster-vs-pixel direction
# ---------------------------------------------------------------------------


def test_criterion_09_cluster_tokens_beat_pixel_tokens():
    started = time.time()
    images = synthesize_image_set(3000, seed=0)
    gray = downsample_grayscale(images.images, 4)  # 8x8 -> 64 dims
    perm = make_global_permutation(0, 64)
    signals = apply_permutation(gray, perm)
    labels = images.labels
    train_rows, test_rows = train_test_split(3000, 0.8, seed=0)
    normalized = normalize_unit_range(signals, fit_rows=train_rows)
    aff = affinity_matrix(normalized.values[train_rows], 16)
    cluster_assign, _, _ = cluster_signal_dimensions(
        aff, 16, density(None, aff, 0.0, 0.0), "yu-shi", 0)
    pixel_assign = singleton_assignment(64)
    small_model = ModelConfig(d_model=32, enc_depth=2, dec_depth=1, n_heads=4,
                              d_dec=16, dec_heads=4)
    means = {}
    for name, assignment in (("cluster", cluster_assign), ("pixel", pixel_assign)):
        accs = []
        for seed in (0, 1, 2):
            result = train(signals[train_rows], assignment, small_model,
                           desk_train_cfg(seed, epochs=20, learning_rate=1.5e-3))
            accs.append(probe_accuracy(result.model, assignment, signals, labels,
                                       train_rows, test_rows))
        means[name] = float(np.mean(accs))
    gap = means["cluster"] - means["pixel"]
    assert gap >= 0.03, f"cluster {means['cluster']:.3f} vs pixel {means['pixel']:.3f}"
    report_pass(9, f"cluster tokens {means['cluster']:.3f} > pixel {means['pixel']:.3f} "
                   f"by {gap:.3f}", started, budget=21600.0)


# ---------------------------------------------------------------------------
# 10. Permutation equivariance end-to-end
# ---------------------------------------------------------------------------


def test_criterion_10_permutation_equivariance_exact():
    started = time.time()
    signals, _ = planted_signals(4, 8, 600, seed=3)
    perm = make_global_permutation(5, signals.shape[1])
    ecc = substream(6, "acc-ecc").uniform(1.0, 10.0, size=signals.shape[1])

    aff = affinity_matrix(signals, 16)
    aff_p = affinity_matrix(apply_permutation(signals, perm), 16)
    mapping = perm.mapping
    assert np.array_equal(aff_p.values, aff.values[np.ix_(mapping, mapping)])

    assign, _, _ = cluster_signal_dimensions(
        aff, 4, density(ecc, aff, 0.5, 2.0), "yu-shi", 0)
    assign_p, _, _ = cluster_signal_dimensions(
        aff_p, 4, density(ecc[mapping], aff_p, 0.5, 2.0), "yu-shi", 0)
    assert adjusted_rand_index(assign_p.labels, assign.labels[mapping]) == 1.0
    report_pass(10, "end-to-end permutation equivariance (affinity bitwise)",
                started, budget=30.0)


# ---------------------------------------------------------------------------
# 11. Determinism of every stage
# ---------------------------------------------------------------------------


def test_criterion_11_stage_determinism(tmp_path):
    started = time.time()
    raw = {
        "dataset": {"source": "synthetic", "variant": "permuted", "n_images": 80,
                    "downsample_factor": 4, "grayscale": True},
        "affinity": {"bins": 8},
        "clustering": {"clusters": 8},
        "model": {"d_model": 8, "enc_depth": 1, "dec_depth": 1, "n_heads": 2,
                  "d_dec": 8, "dec_heads": 2, "mlp_ratio": 2},
        "train": {"epochs": 3, "batch_size": 32, "mask_ratio": 0.5,
                  "learning_rate": 1e-3, "precision": "f64", "warmup_epochs": 1},
        "eval": {"protocol": "probe"},
    }
    cfg = config_from_dict(raw)
    dirs = [tmp_path / "a", tmp_path / "b"]
    for out in dirs:
        out.mkdir()
        stage_synth(cfg, out)
        stage_affinity(cfg, out)
        stage_cluster(cfg, out)
        stage_train(cfg, out)
        stage_eval(cfg, out)
    artifacts = ["signals.urlm", "labels.csv", "permutation.json", "affinity.urlm",
                 "clusters.json", "density.csv", "model.ckpt", "training_log.csv",
                 "eval_report.json", "eval_report.csv"]
    for name in artifacts:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name
    report_pass(11, "byte-identical artifacts for every stage rerun (f64)",
                started, budget=600.0)


# ---------------------------------------------------------------------------
# 12. Training progress on the toy set
# ---------------------------------------------------------------------------


def test_criterion_12_training_progress():
    started = time.time()
    rng = substream(2, "acc-toy")
    latent = rng.random((64, 4))
    signals = np.clip(np.repeat(latent, 3, axis=1) + 0.05 * rng.random((64, 12)), 0, 1)
    assignment = ClusterAssignment(np.repeat(np.arange(4), 3), 4)
    cfg = TrainConfig(epochs=20, batch_size=32, mask_ratio=0.5, learning_rate=3e-3,
                      precision="f64", seed=0, warmup_epochs=2, weight_decay=0.01)
    model_cfg = ModelConfig(d_model=8, enc_depth=1, dec_depth=1, n_heads=2, d_dec=8,
                            dec_heads=2, mlp_ratio=2)
    result = train(signals, assignment, model_cfg, cfg)
    assert result.loss_curve[19] < 0.5 * result.loss_curve[0], (
        f"epoch-20 {result.loss_curve[19]:.4f} vs epoch-1 {result.loss_curve[0]:.4f}")
    report_pass(12, f"toy training progress ({result.loss_curve[0]:.3f} -> "
                    f"{result.loss_curve[19]:.3f})", started, budget=300.0)
