import numpy as np
import pytest
import yaml

from urlost import io
from urlost.cli import main
from urlost.config import config_from_dict, load_config
from urlost.errors import InvalidConfigError, StaleArtifactError, UrlostError
from urlost.pipeline import (
    stage_affinity,
    stage_cluster,
    stage_eval,
    stage_synth,
    stage_train,
    train_test_split,
)

TINY_MODEL = {"d_model": 8, "enc_depth": 1, "dec_depth": 1, "n_heads": 2,
              "d_dec": 8, "dec_heads": 2, "mlp_ratio": 2}
TINY_TRAIN = {"epochs": 2, "batch_size": 32, "mask_ratio": 0.5,
              "learning_rate": 1e-3, "precision": "f64", "warmup_epochs": 1}


def base_config(**overrides):
    raw = {
        "dataset": {"source": "synthetic", "variant": "plain", "n_images": 80,
                    "downsample_factor": 4, "grayscale": True},
        "affinity": {"bins": 8},
        "clustering": {"clusters": 8, "alpha": 0.0, "beta": 0.0, "method": "yu-shi"},
        "model": dict(TINY_MODEL),
        "train": dict(TINY_TRAIN),
        "eval": {"protocol": "probe", "train_fraction": 0.8},
        "seeds": {"synth": 0, "clustering": 0, "train": 0, "evaluation": 0, "split": 0},
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return config_from_dict(raw)


def run_all(cfg, out):
    stage_synth(cfg, out)
    stage_affinity(cfg, out)
    stage_cluster(cfg, out)
    stage_train(cfg, out)
    stage_eval(cfg, out)


class TestConfig:
    def test_yaml_round_trip(self, tmp_path):
        raw = {"dataset": {"variant": "permuted", "n_images": 10},
               "clustering": {"clusters": 4}}
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump(raw))
        cfg = load_config(path)
        assert cfg.dataset.variant == "permuted"
        assert cfg.clustering.clusters == 4
        assert cfg.train.seed == cfg.seeds.train

    def test_unknown_key_rejected(self):
        with pytest.raises(InvalidConfigError, match="typo"):
            config_from_dict({"dataset": {"typo": 1}})

    def test_variant_checked(self):
        with pytest.raises(InvalidConfigError):
            base_config(dataset={"variant": "florp"}).validate()

    def test_alpha_needs_foveated(self):
        cfg = base_config(clustering={"alpha": 0.5})
        with pytest.raises(InvalidConfigError):
            cfg.validate()

    def test_missing_source_path(self):
        cfg = base_config(dataset={"source": "/nonexistent/batch.bin"})
        with pytest.raises(InvalidConfigError):
            cfg.validate()


class TestSynthVariants:
    def test_plain_is_flattened_pixels(self, tmp_path):
        cfg = base_config(dataset={"downsample_factor": None, "grayscale": False})
        stage_synth(cfg, tmp_path)
        signals = io.read_matrix(tmp_path / "signals.urlm")
        assert signals.shape == (80, 3072)
        from urlost.datasets import flatten_images, synthesize_image_set
        expected = flatten_images(synthesize_image_set(80, 0).images)
        assert np.array_equal(signals, expected)

    def test_permuted_rerun_byte_identical(self, tmp_path):
        cfg = base_config(dataset={"variant": "permuted"})
        a = tmp_path / "a"; b = tmp_path / "b"
        a.mkdir(); b.mkdir()
        stage_synth(cfg, a)
        stage_synth(cfg, b)
        assert (a / "signals.urlm").read_bytes() == (b / "signals.urlm").read_bytes()
        assert (a / "permutation.json").exists()

    def test_foveated_default_lattice_dimension(self, tmp_path):
        cfg = base_config(dataset={"variant": "foveated", "n_images": 2,
                                   "downsample_factor": None})
        stage_synth(cfg, tmp_path)
        signals = io.read_matrix(tmp_path / "signals.urlm")
        assert signals.shape == (2, 1038 * 3)
        ecc = np.loadtxt(tmp_path / "eccentricity.csv")
        assert len(ecc) == 1038 * 3

    def test_local_permuted_writes_perms(self, tmp_path):
        cfg = base_config(dataset={"variant": "local-permuted", "patch_size": 8,
                                   "downsample_factor": None})
        stage_synth(cfg, tmp_path)
        meta = io.read_json(tmp_path / "local_perms.json")
        assert meta["n_patches"] == 16
        assert len(meta["mappings"]) == 16

    def test_tabular_csv(self, tmp_path):
        rng = np.random.default_rng(0)
        table = rng.random((30, 6))
        np.savetxt(tmp_path / "data.csv", table, delimiter=",")
        io.write_labels(tmp_path / "labels.csv", rng.integers(0, 2, 30))
        cfg = base_config(dataset={"variant": "tabular", "source": str(tmp_path / "data.csv"),
                                   "labels": str(tmp_path / "labels.csv"), "n_images": None,
                                   "downsample_factor": None})
        out = tmp_path / "run"
        out.mkdir()
        stage_synth(cfg, out)
        assert io.read_matrix(out / "signals.urlm").shape == (30, 6)


class TestPipelineEndToEnd:
    def test_probe_protocol_full_run(self, tmp_path):
        cfg = base_config()
        run_all(cfg, tmp_path)
        report = io.read_json(tmp_path / "eval_report.json")
        assert 0.0 <= report["accuracy"] <= 1.0
        assert (tmp_path / "eval_report.csv").exists()
        clusters = io.read_json(tmp_path / "clusters.json")
        assert clusters["M"] == 8
        assert min(clusters["sizes"]) >= 1
        assert (tmp_path / "density.csv").exists()

    def test_patches_method_on_local_permuted(self, tmp_path):
        cfg = base_config(
            dataset={"variant": "local-permuted", "patch_size": 16, "downsample_factor": None},
            clustering={"method": "patches", "clusters": 4},
        )
        stage_synth(cfg, tmp_path)
        stage_cluster(cfg, tmp_path)  # patches method skips affinity
        clusters = io.read_json(tmp_path / "clusters.json")
        assert clusters["M"] == 4
        assert clusters["sizes"] == [768, 768, 768, 768]
        stage_train(cfg, tmp_path)
        stage_eval(cfg, tmp_path)
        log = (tmp_path / "training_log.csv").read_text()
        assert "alignment" in log.splitlines()[0]
        assert log.splitlines()[1].split(",")[3] != ""

    def test_singleton_method(self, tmp_path):
        cfg = base_config(clustering={"method": "singleton", "clusters": 64},
                          train={"mask_ratio": 0.75})
        stage_synth(cfg, tmp_path)
        stage_cluster(cfg, tmp_path)
        clusters = io.read_json(tmp_path / "clusters.json")
        assert clusters["M"] == 64
        assert clusters["sizes"] == [1] * 64

    def test_pair_decode_protocol(self, tmp_path):
        cfg = base_config(eval={"protocol": "pair-decode"})
        run_all(cfg, tmp_path)
        report = io.read_json(tmp_path / "eval_report.json")
        assert report["task"] == "pair-decode"

    def test_kfold_protocol_tabular(self, tmp_path):
        rng = np.random.default_rng(1)
        latent = rng.random((40, 2))
        table = np.repeat(latent, 4, axis=1) + 0.05 * rng.random((40, 8))
        labels = (latent[:, 0] > 0.5).astype(int)
        np.savetxt(tmp_path / "data.csv", table, delimiter=",")
        io.write_labels(tmp_path / "labels.csv", labels)
        cfg = base_config(
            dataset={"variant": "tabular", "source": str(tmp_path / "data.csv"),
                     "labels": str(tmp_path / "labels.csv"), "n_images": None,
                     "downsample_factor": None},
            clustering={"clusters": 2},
            eval={"protocol": "kfold", "folds": 3},
        )
        out = tmp_path / "run"
        out.mkdir()
        stage_synth(cfg, out)
        stage_eval(cfg, out)
        report = io.read_json(out / "eval_report.json")
        assert len(report["folds"]) == 3

    def test_full_rerun_byte_identical(self, tmp_path):
        cfg = base_config()
        a = tmp_path / "a"; b = tmp_path / "b"
        a.mkdir(); b.mkdir()
        run_all(cfg, a)
        run_all(cfg, b)
        for name in ("signals.urlm", "labels.csv", "affinity.urlm", "clusters.json",
                     "model.ckpt", "training_log.csv", "eval_report.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_split_is_deterministic_partition(self):
        train_rows, test_rows = train_test_split(50, 0.8, seed=4)
        assert len(train_rows) == 40
        assert sorted(np.concatenate([train_rows, test_rows]).tolist()) == list(range(50))
        again, _ = train_test_split(50, 0.8, seed=4)
        assert np.array_equal(train_rows, again)


class TestProvenance:
    def test_stale_signals_detected(self, tmp_path):
        cfg = base_config()
        stage_synth(cfg, tmp_path)
        stage_affinity(cfg, tmp_path)
        # tamper with the signals file after affinity recorded its hash
        raw = bytearray((tmp_path / "signals.urlm").read_bytes())
        raw[-1] ^= 0xFF
        (tmp_path / "signals.urlm").write_bytes(bytes(raw))
        with pytest.raises(StaleArtifactError):
            stage_cluster(cfg, tmp_path)

    def test_missing_stage_reported(self, tmp_path):
        cfg = base_config()
        with pytest.raises(UrlostError, match="synth"):
            stage_affinity(cfg, tmp_path)

    def test_train_rejects_foreign_clusters(self, tmp_path):
        cfg = base_config()
        stage_synth(cfg, tmp_path)
        stage_affinity(cfg, tmp_path)
        stage_cluster(cfg, tmp_path)
        blob = io.read_json(tmp_path / "clusters.json")
        blob["provenance"]["signals_sha256"] = "0" * 64
        io.write_json(tmp_path / "clusters.json", blob)
        # cluster.prov.json now disagrees with the rewritten file
        with pytest.raises(StaleArtifactError):
            stage_train(cfg, tmp_path)


class TestCliMain:
    def _write_config(self, tmp_path):
        raw = {
            "dataset": {"source": "synthetic", "variant": "plain", "n_images": 60,
                        "downsample_factor": 4, "grayscale": True},
            "affinity": {"bins": 8},
            "clustering": {"clusters": 6},
            "model": dict(TINY_MODEL),
            "train": dict(TINY_TRAIN),
            "eval": {"protocol": "probe"},
            "output": str(tmp_path / "run"),
        }
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump(raw))
        return path

    def test_stages_and_report(self, tmp_path, capsys):
        cfg_path = self._write_config(tmp_path)
        for verb in ("synth", "affinity", "cluster", "train", "eval"):
            assert main([verb, "--config", str(cfg_path)]) == 0
        out = tmp_path / "report"
        assert main(["report", "--runs", str(tmp_path / "run"), "--out", str(out)]) == 0
        assert (out / "summary.csv").exists()
        assert (out / "figures" / "loss_curves.png").exists()
        table = (out / "summary.csv").read_text()
        assert "accuracy" in table.splitlines()[0]

    def test_failure_exit_code(self, tmp_path):
        cfg_path = self._write_config(tmp_path)
        assert main(["eval", "--config", str(cfg_path)]) == 1  # nothing synthesized yet

    def test_seed_override_changes_artifacts(self, tmp_path):
        cfg_path = self._write_config(tmp_path)
        out_a = tmp_path / "a"; out_b = tmp_path / "b"
        assert main(["synth", "--config", str(cfg_path), "--out", str(out_a)]) == 0
        assert main(["synth", "--config", str(cfg_path), "--out", str(out_b), "--seed", "99"]) == 0
        assert (out_a / "signals.urlm").read_bytes() != (out_b / "signals.urlm").read_bytes()
