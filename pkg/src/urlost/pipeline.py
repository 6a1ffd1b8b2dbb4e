"""Stage implementations behind the CLI verbs.

Each stage reads its inputs from the run directory, writes its artifacts
there, and records a provenance file with SHA-256 hashes of everything it
consumed and produced. A stage refuses to run when an input's hash no longer
matches what the upstream stage recorded.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import io
from .affinity import (
    abs_correlation_matrix,
    affinity_matrix,
    AffinityMatrix,
    density,
    normalize_unit_range,
)
from .config import PipelineConfig
from .datasets import (
    LabeledImageSet,
    Permutation,
    apply_permutation,
    downsample_grayscale,
    flatten_images,
    load_cifar,
    locally_permuted_signals,
    make_global_permutation,
    make_local_permutations,
    synthesize_image_set,
    upsample,
)
from .errors import InvalidConfigError, StaleArtifactError, UrlostError
from .evaluation import EvalReport, ProbeConfig, fit_probe, kfold_cv, linear_probe, pair_decoding_accuracy
from .model import ModelConfig
from .retina import (
    LatticeConfig,
    RingSpec,
    SamplingLattice,
    build_retina_lattice,
    default_lattice_config,
    dim_eccentricities,
    foveate_batch,
    kernel_major_signals,
)
from .rng import substream
from .spectral import ClusterAssignment, cluster_signal_dimensions, singleton_assignment
from .training import TrainConfig, encode_signals, load_checkpoint_model, train

log = logging.getLogger(__name__)

SIGNALS_FILE = "signals.urlm"
LABELS_FILE = "labels.csv"
AFFINITY_FILE = "affinity.urlm"
CLUSTERS_FILE = "clusters.json"
DENSITY_FILE = "density.csv"
CHECKPOINT_FILE = "model.ckpt"
ECCENTRICITY_FILE = "eccentricity.csv"


def train_test_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, first round(fraction*n) rows train, rest test."""
    order = substream(seed, "split").permutation(n)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _prov_path(out: Path, stage: str) -> Path:
    return out / f"{stage}.prov.json"


def _write_prov(out: Path, stage: str, cfg: PipelineConfig, inputs: dict, outputs: list[str],
                params: dict | None = None) -> dict:
    prov = {
        "stage": stage,
        "config_hash": io.config_hash(cfg.to_dict()),
        "inputs": inputs,
        "outputs": {name: io.sha256_file(out / name) for name in outputs},
        "params": params or {},
    }
    io.write_json(_prov_path(out, stage), prov)
    return prov


def _require_fresh(out: Path, filename: str, upstream_stage: str) -> str:
    """Hash ``filename`` and compare with what the upstream stage recorded."""
    prov_file = _prov_path(out, upstream_stage)
    if not prov_file.exists():
        raise UrlostError(f"{upstream_stage} stage has not run in {out} (missing {prov_file.name})")
    recorded = io.read_json(prov_file)["outputs"].get(filename)
    if recorded is None:
        raise UrlostError(f"{upstream_stage} stage did not record {filename}")
    actual = io.sha256_file(out / filename)
    if actual != recorded:
        raise StaleArtifactError(
            f"{filename} hash {actual[:12]} != {recorded[:12]} recorded by {upstream_stage}; rerun stages"
        )
    return actual


def _lattice_from_config(cfg: PipelineConfig, image_size: int) -> tuple[LatticeConfig, SamplingLattice]:
    section = cfg.dataset.lattice
    if section.rings == "default":
        lat_cfg = default_lattice_config(image_size)
        lat_cfg.sigma0 = section.sigma0
        lat_cfg.include_center = section.include_center
        if section.gamma is not None:
            lat_cfg.gamma = section.gamma
    else:
        gamma = section.gamma
        if gamma is None:
            gamma = float(np.log(5.0) / (0.46 * image_size))
        lat_cfg = LatticeConfig(
            rings=[RingSpec(float(e), int(c), float(p)) for e, c, p in section.rings],
            sigma0=section.sigma0,
            gamma=gamma,
            include_center=section.include_center,
        )
    return lat_cfg, build_retina_lattice(lat_cfg, image_size)


def _load_images(cfg: PipelineConfig) -> LabeledImageSet:
    ds = cfg.dataset
    if ds.source == "synthetic":
        return synthesize_image_set(ds.n_images or 1000, cfg.seeds.synth)
    images = load_cifar(ds.source)
    if ds.n_images is not None and len(images) > ds.n_images:
        images = LabeledImageSet(images.images[: ds.n_images], images.labels[: ds.n_images])
    return images


def _pixel_matrix(images: LabeledImageSet, cfg: PipelineConfig) -> np.ndarray:
    ds = cfg.dataset
    if ds.downsample_factor:
        if ds.grayscale:
            return downsample_grayscale(images.images, ds.downsample_factor)
        f = ds.downsample_factor
        n, h, w, c = images.images.shape
        x = images.images.astype(np.float64).reshape(n, h // f, f, w // f, f, c)
        return (x.mean(axis=(2, 4)) / 255.0).reshape(n, -1)
    return flatten_images(images.images)


def stage_synth(cfg: PipelineConfig, out: Path) -> dict:
    """Materialize the dataset variant: signals, labels, geometry sidecars."""
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset
    extras: list[str] = []
    params: dict = {"variant": ds.variant}
    if ds.variant == "tabular":
        if ds.source.endswith(".urlm"):
            values = io.read_matrix(ds.source).astype(np.float64)
        else:
            values = np.loadtxt(ds.source, delimiter=",", dtype=np.float64, ndmin=2)
        labels = io.read_labels(ds.labels) if ds.labels else np.zeros(len(values), dtype=np.int64)
        if ds.n_images is not None:
            values, labels = values[: ds.n_images], labels[: ds.n_images]
        signals = values
    else:
        images = _load_images(cfg)
        labels = images.labels
        if ds.variant == "plain":
            signals = _pixel_matrix(images, cfg)
        elif ds.variant == "permuted":
            base = _pixel_matrix(images, cfg)
            perm = make_global_permutation(cfg.seeds.synth, base.shape[1])
            signals = apply_permutation(base, perm)
            io.write_json(out / "permutation.json",
                          {"seed": perm.seed, "mapping": perm.mapping.tolist()})
            extras.append("permutation.json")
        elif ds.variant == "local-permuted":
            h, w, c = images.images.shape[1:]
            perms = make_local_permutations(cfg.seeds.synth, ds.patch_size, h, w, c)
            signals, cluster_of_dim = locally_permuted_signals(images.images, perms, ds.patch_size)
            io.write_json(out / "local_perms.json", {
                "seed": cfg.seeds.synth,
                "patch_size": ds.patch_size,
                "n_patches": len(perms),
                "block": int(perms[0].size),
                "mappings": [p.mapping.tolist() for p in perms],
            })
            extras.append("local_perms.json")
            params["n_patches"] = len(perms)
        elif ds.variant == "foveated":
            factor = ds.lattice.upsample
            big = np.repeat(np.repeat(images.images, factor, axis=1), factor, axis=2)
            lat_cfg, lattice = _lattice_from_config(cfg, big.shape[1])
            responses = foveate_batch(big, lattice)
            signals = kernel_major_signals(responses)
            ecc = dim_eccentricities(lattice, responses.shape[2])
            if ds.permute:
                perm = make_global_permutation(cfg.seeds.synth, signals.shape[1])
                signals = apply_permutation(signals, perm)
                ecc = ecc[perm.mapping]
                io.write_json(out / "permutation.json",
                              {"seed": perm.seed, "mapping": perm.mapping.tolist()})
                extras.append("permutation.json")
            io.write_json(out / "lattice.json",
                          {"config": lat_cfg.to_dict(), "lattice": lattice.to_dict()})
            np.savetxt(out / ECCENTRICITY_FILE, ecc, fmt="%.17g")
            extras += ["lattice.json", ECCENTRICITY_FILE]
            params["n_kernels"] = lattice.n_kernels
        else:  # pragma: no cover - guarded by validate()
            raise InvalidConfigError(f"unhandled variant {ds.variant}")
    io.write_matrix(out / SIGNALS_FILE, np.asarray(signals, dtype=np.float64))
    io.write_labels(out / LABELS_FILE, labels)
    params["n_samples"], params["n_dims"] = int(signals.shape[0]), int(signals.shape[1])
    params["seed"] = cfg.seeds.synth
    return _write_prov(out, "synth", cfg, inputs={}, outputs=[SIGNALS_FILE, LABELS_FILE] + extras,
                       params=params)


def stage_affinity(cfg: PipelineConfig, out: Path) -> dict:
    """Mutual-information affinity over the training split's dimensions."""
    signals_sha = _require_fresh(out, SIGNALS_FILE, "synth")
    values = io.read_matrix(out / SIGNALS_FILE)
    train_rows, _ = train_test_split(len(values), cfg.eval.train_fraction, cfg.seeds.split)
    normalized = normalize_unit_range(values, fit_rows=train_rows)
    if cfg.affinity.method == "mi":
        aff = affinity_matrix(normalized.values[train_rows], cfg.affinity.bins)
    elif cfg.affinity.method == "abs-correlation":
        aff = abs_correlation_matrix(values[train_rows])
    else:
        raise InvalidConfigError(f"unknown affinity method {cfg.affinity.method!r}")
    io.write_matrix(out / AFFINITY_FILE, aff.values)
    return _write_prov(
        out, "affinity", cfg,
        inputs={SIGNALS_FILE: signals_sha},
        outputs=[AFFINITY_FILE],
        params={"bins": cfg.affinity.bins, "method": cfg.affinity.method,
                "split_seed": cfg.seeds.split, "train_fraction": cfg.eval.train_fraction,
                "n_train": int(len(train_rows))},
    )


def _patch_assignment(out: Path) -> ClusterAssignment:
    meta = io.read_json(out / "local_perms.json")
    labels = np.repeat(np.arange(meta["n_patches"], dtype=np.int64), meta["block"])
    return ClusterAssignment(labels, int(meta["n_patches"]))


def stage_cluster(cfg: PipelineConfig, out: Path) -> dict:
    """Partition dimensions: density -> operator -> embedding -> labels."""
    method = cfg.clustering.method
    inputs: dict[str, str] = {}
    params = {
        "alpha": cfg.clustering.alpha, "beta": cfg.clustering.beta,
        "K": cfg.affinity.bins, "k": cfg.clustering.clusters, "method": method,
    }
    signals_sha = _require_fresh(out, SIGNALS_FILE, "synth")
    inputs[SIGNALS_FILE] = signals_sha
    n_dims = io.read_json(_prov_path(out, "synth"))["params"]["n_dims"]
    if method == "patches":
        assign = _patch_assignment(out)
        prov_extra = {"signals_sha256": signals_sha}
    elif method == "singleton":
        assign = singleton_assignment(n_dims)
        prov_extra = {"signals_sha256": signals_sha}
    else:
        affinity_sha = _require_fresh(out, AFFINITY_FILE, "affinity")
        inputs[AFFINITY_FILE] = affinity_sha
        aff = AffinityMatrix(io.read_matrix(out / AFFINITY_FILE), cfg.affinity.bins)
        ecc = None
        if (out / ECCENTRICITY_FILE).exists():
            ecc = np.loadtxt(out / ECCENTRICITY_FILE, ndmin=1)
        dens = density(ecc, aff, cfg.clustering.alpha, cfg.clustering.beta)
        assign, _, _ = cluster_signal_dimensions(
            aff, cfg.clustering.clusters, dens, method, cfg.seeds.clustering,
            cfg.clustering.restarts,
        )
        q_col = dens.q if dens.q is not None else np.full(aff.n_dims, np.nan)
        rows = np.column_stack([np.arange(aff.n_dims, dtype=np.float64), q_col, dens.n, dens.p])
        np.savetxt(out / DENSITY_FILE, rows, fmt="%.17g", delimiter=",",
                   header="index,q,n,p", comments="")
        prov_extra = {"signals_sha256": signals_sha, "affinity_sha256": affinity_sha}
    io.write_json(out / CLUSTERS_FILE, assign.to_dict(params=params, provenance=prov_extra))
    outputs = [CLUSTERS_FILE] + ([DENSITY_FILE] if (out / DENSITY_FILE).exists() and method not in ("patches", "singleton") else [])
    return _write_prov(out, "cluster", cfg, inputs=inputs, outputs=outputs, params=params)


def _load_assignment(out: Path) -> tuple[ClusterAssignment, dict]:
    blob = io.read_json(out / CLUSTERS_FILE)
    return ClusterAssignment.from_dict(blob), blob


def stage_train(cfg: PipelineConfig, out: Path, resume: bool = False) -> dict:
    """Fit the masked autoencoder on the training split."""
    signals_sha = _require_fresh(out, SIGNALS_FILE, "synth")
    clusters_sha = _require_fresh(out, CLUSTERS_FILE, "cluster")
    assign, blob = _load_assignment(out)
    if blob["provenance"].get("signals_sha256") not in (None, signals_sha):
        raise StaleArtifactError("clusters.json was built from a different signals file")
    values = io.read_matrix(out / SIGNALS_FILE)
    train_rows, _ = train_test_split(len(values), cfg.eval.train_fraction, cfg.seeds.split)
    perms = None
    if (out / "local_perms.json").exists():
        meta = io.read_json(out / "local_perms.json")
        perms = [Permutation(np.array(m, dtype=np.int64), meta["seed"]) for m in meta["mappings"]]
    log_file = out / "training_log.csv"
    if log_file.exists() and not resume:
        log_file.unlink()
    result = train(
        values[train_rows], assign, cfg.model, cfg.train, out_dir=out, perms=perms,
        resume_from=(out / CHECKPOINT_FILE) if resume else None,
        provenance={SIGNALS_FILE: signals_sha, CLUSTERS_FILE: clusters_sha},
    )
    return _write_prov(
        out, "train", cfg,
        inputs={SIGNALS_FILE: signals_sha, CLUSTERS_FILE: clusters_sha},
        outputs=[CHECKPOINT_FILE, "training_log.csv"],
        params={"epochs": cfg.train.epochs, "final_loss": result.loss_curve[-1],
                "n_train": int(len(train_rows))},
    )


def _report_csv(report: EvalReport, path: Path) -> None:
    cols = ["task", "accuracy", "seed"]
    vals = [report.task, f"{report.accuracy:.17g}", str(report.seed)]
    for i, acc in enumerate(report.folds):
        cols.append(f"fold{i}")
        vals.append(f"{acc:.17g}")
    for cls in sorted(report.per_class, key=int):
        cols.append(f"class_{cls}")
        vals.append(f"{report.per_class[cls]:.17g}")
    path.write_text(",".join(cols) + "\n" + ",".join(vals) + "\n")


def stage_eval(cfg: PipelineConfig, out: Path) -> dict:
    """Score representations with the configured protocol."""
    signals_sha = _require_fresh(out, SIGNALS_FILE, "synth")
    labels_sha = _require_fresh(out, LABELS_FILE, "synth")
    values = io.read_matrix(out / SIGNALS_FILE)
    labels = io.read_labels(out / LABELS_FILE)
    protocol = cfg.eval.protocol
    probe_cfg = ProbeConfig(l2=cfg.eval.l2, max_epochs=cfg.eval.max_epochs,
                            seed=cfg.seeds.evaluation)
    inputs = {SIGNALS_FILE: signals_sha, LABELS_FILE: labels_sha}
    if protocol == "kfold":
        report = kfold_cv(values, labels, cfg.eval.folds,
                          _kfold_fit_predict(cfg, probe_cfg), cfg.seeds.evaluation)
    else:
        ckpt_sha = _require_fresh(out, CHECKPOINT_FILE, "train")
        inputs[CHECKPOINT_FILE] = ckpt_sha
        model, assign, _, _, _, _ = load_checkpoint_model(out / CHECKPOINT_FILE)
        reps = encode_signals(model, values, assign)
        if protocol == "probe":
            train_rows, test_rows = train_test_split(
                len(values), cfg.eval.train_fraction, cfg.seeds.split)
            report = linear_probe(reps[train_rows], labels[train_rows],
                                  reps[test_rows], labels[test_rows], probe_cfg)
        elif protocol == "pair-decode":
            if len(reps) % 2:
                raise InvalidConfigError("pair-decode needs an even row count (two presentations)")
            half = len(reps) // 2
            acc = pair_decoding_accuracy(reps[:half], reps[half:])
            report = EvalReport(task="pair-decode", accuracy=acc, per_class={},
                                config={"n_pairs": half}, seed=cfg.seeds.evaluation)
        else:
            raise InvalidConfigError(f"unknown eval protocol {protocol!r}")
    io.write_json(out / "eval_report.json", report.to_dict())
    _report_csv(report, out / "eval_report.csv")
    return _write_prov(out, "eval", cfg, inputs=inputs,
                       outputs=["eval_report.json", "eval_report.csv"],
                       params={"protocol": protocol, "accuracy": report.accuracy})


def _kfold_fit_predict(cfg: PipelineConfig, probe_cfg: ProbeConfig):
    """Full per-fold refit: affinity -> clusters -> MAE -> probe."""

    def fit_predict(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray) -> np.ndarray:
        normalized = normalize_unit_range(train_x)
        if cfg.affinity.method == "abs-correlation":
            aff = abs_correlation_matrix(train_x)
        else:
            aff = affinity_matrix(normalized.values, cfg.affinity.bins)
        dens = density(None, aff, cfg.clustering.alpha, cfg.clustering.beta)
        method = cfg.clustering.method if cfg.clustering.method in ("yu-shi", "kmeans") else "yu-shi"
        assign, _, _ = cluster_signal_dimensions(
            aff, cfg.clustering.clusters, dens, method, cfg.seeds.clustering)
        result = train(train_x, assign, cfg.model, cfg.train)
        reps_train = encode_signals(result.model, train_x, assign)
        reps_test = encode_signals(result.model, test_x, assign)
        probe = fit_probe(reps_train, train_y, probe_cfg)
        return probe.predict(reps_test)

    return fit_predict
