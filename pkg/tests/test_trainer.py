import json

import numpy as np
import pytest
import torch

from p2v import ingest, trainer
from p2v.errors import InvalidInputError, NumericalError
from p2v.model import init_params, load_checkpoint

from conftest import random_cloud, tiny_arch


def toy_dataset(seed=0, scenes=3, per_scene=4, n_points=16, labels=("box", "ball")):
    rng = np.random.default_rng(seed)
    instances, split = [], {}
    for s in range(scenes):
        scene_id = f"scene_{s:03d}"
        split[scene_id] = "train"
        for i in range(per_scene):
            instances.append(ingest.InstanceRecord(
                scene_id=scene_id,
                instance_id=f"obj_{i:02d}",
                label=labels[i % len(labels)],
                centroid=rng.normal(size=3),
                cloud=random_cloud(rng, n_points),
            ))
    return ingest.Dataset(instances, split)


def tiny_config(**overrides):
    base = dict(
        learning_rate=1e-3, batch_size=4, epochs=3, code_size=4,
        decoder_points=8, rng_seed=0, k_close=2, k_similar=2,
        grid_steps=8, refine_tol=None, checkpoint_every=2, arch=tiny_arch(),
    )
    base.update(overrides)
    return trainer.TrainConfig(**base)


def read_log(run_dir):
    lines = (run_dir / "train_log.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines]


def strip_wall_time(records):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in records]


class TestConfig:
    def test_defaults_validate(self):
        trainer.TrainConfig().validate()

    @pytest.mark.parametrize("bad", [
        dict(learning_rate=0.0),
        dict(batch_size=0),
        dict(epochs=0),
        dict(alpha=-0.5),
        dict(margin_weight=-1.0),
        dict(mode="both"),
        dict(dtype="float16"),
    ])
    def test_rejects_bad_values(self, bad):
        with pytest.raises(InvalidInputError):
            tiny_config(**bad).validate()

    def test_round_trip(self):
        cfg = tiny_config(mode="margin_only", margin_weight=3.5)
        back = trainer.TrainConfig.from_dict(cfg.to_dict())
        assert back == cfg

    def test_lambda_alias(self):
        cfg = trainer.TrainConfig.from_dict({"lambda": 5.0})
        assert cfg.margin_weight == 5.0

    def test_unknown_field(self):
        with pytest.raises(InvalidInputError):
            trainer.TrainConfig.from_dict({"momentum": 0.9})


class TestModes:
    def test_autoencoder_only_skips_margin(self, tmp_path):
        dataset = toy_dataset()
        model, records = trainer.train(dataset, tiny_config(mode="autoencoder_only"),
                                       tmp_path / "run")
        assert all(r["margin_loss"] == 0.0 for r in records)
        assert all(r["reconstruction_loss"] > 0.0 for r in records)
        # no quadruples are sampled, so no similarity cache is built
        assert not (tmp_path / "run" / "cache").exists()
        fresh = init_params(4, 8, rng_seed=0, arch=tiny_arch())
        changed = any(not torch.equal(a, b) for (_, a), (_, b) in zip(
            sorted(model.decoder.state_dict().items()),
            sorted(fresh.decoder.state_dict().items())))
        assert changed

    def test_margin_only_leaves_decoder_untouched(self, tmp_path):
        dataset = toy_dataset()
        model, records = trainer.train(dataset, tiny_config(mode="margin_only"),
                                       tmp_path / "run")
        assert all(r["reconstruction_loss"] == 0.0 for r in records)
        fresh = init_params(4, 8, rng_seed=0, arch=tiny_arch())
        for (ka, va), (kb, vb) in zip(sorted(model.decoder.state_dict().items()),
                                      sorted(fresh.decoder.state_dict().items())):
            assert ka == kb and torch.equal(va, vb), ka

    def test_points2vec_trains_both_terms(self, tmp_path):
        dataset = toy_dataset()
        model, records = trainer.train(dataset, tiny_config(), tmp_path / "run")
        assert all(r["reconstruction_loss"] > 0.0 for r in records)
        assert all(np.isfinite(r["total"]) for r in records)
        fresh = init_params(4, 8, rng_seed=0, arch=tiny_arch())
        changed = any(not torch.equal(a, b) for (_, a), (_, b) in zip(
            sorted(model.state_dict().items()), sorted(fresh.state_dict().items())))
        assert changed


class TestDeterminism:
    def test_same_seed_bit_identical(self, tmp_path):
        dataset = toy_dataset()
        trainer.train(dataset, tiny_config(), tmp_path / "a")
        trainer.train(dataset, tiny_config(), tmp_path / "b")
        fa = (tmp_path / "a" / "checkpoints" / "final.p2vk").read_bytes()
        fb = (tmp_path / "b" / "checkpoints" / "final.p2vk").read_bytes()
        assert fa == fb
        assert strip_wall_time(read_log(tmp_path / "a")) == \
            strip_wall_time(read_log(tmp_path / "b"))

    def test_different_seed_differs(self, tmp_path):
        dataset = toy_dataset()
        trainer.train(dataset, tiny_config(rng_seed=0), tmp_path / "a")
        trainer.train(dataset, tiny_config(rng_seed=1), tmp_path / "b")
        fa = (tmp_path / "a" / "checkpoints" / "final.p2vk").read_bytes()
        fb = (tmp_path / "b" / "checkpoints" / "final.p2vk").read_bytes()
        assert fa != fb

    def test_labels_do_not_influence_training(self, tmp_path):
        plain = toy_dataset(labels=("box", "ball"))
        renamed = toy_dataset(labels=("xyz", "qrs"))
        trainer.train(plain, tiny_config(), tmp_path / "a")
        trainer.train(renamed, tiny_config(), tmp_path / "b")
        fa = (tmp_path / "a" / "checkpoints" / "final.p2vk").read_bytes()
        fb = (tmp_path / "b" / "checkpoints" / "final.p2vk").read_bytes()
        assert fa == fb


class TestRunArtifacts:
    def test_layout_and_log_schema(self, tmp_path):
        dataset = toy_dataset()
        config = tiny_config(epochs=5, checkpoint_every=2)
        trainer.train(dataset, config, tmp_path / "run")
        ckpt_dir = tmp_path / "run" / "checkpoints"
        assert sorted(p.name for p in ckpt_dir.iterdir()) == [
            "epoch_000002.p2vk", "epoch_000004.p2vk", "final.p2vk"]
        assert json.loads((tmp_path / "run" / "config.json").read_text()) == config.to_dict()
        records = read_log(tmp_path / "run")
        assert [r["epoch"] for r in records] == [1, 2, 3, 4, 5]
        for r in records:
            assert set(r) == {"epoch", "margin_loss", "reconstruction_loss",
                              "total", "wall_time"}
            assert r["wall_time"] >= 0.0

    def test_final_checkpoint_reloads(self, tmp_path):
        dataset = toy_dataset()
        model, _ = trainer.train(dataset, tiny_config(), tmp_path / "run")
        back, header = load_checkpoint(tmp_path / "run" / "checkpoints" / "final.p2vk")
        assert header["epoch"] == 3
        for (ka, va), (kb, vb) in zip(sorted(model.state_dict().items()),
                                      sorted(back.state_dict().items())):
            assert ka == kb and torch.equal(va, vb)

    def test_shared_cache_dir_is_reused(self, tmp_path):
        dataset = toy_dataset()
        cache_dir = tmp_path / "cache"
        trainer.train(dataset, tiny_config(epochs=1), tmp_path / "a", cache_dir=cache_dir)
        files = list(cache_dir.iterdir())
        assert len(files) == 1
        stamp = files[0].stat().st_mtime_ns
        trainer.train(dataset, tiny_config(epochs=1, rng_seed=9), tmp_path / "b",
                      cache_dir=cache_dir)
        assert files[0].stat().st_mtime_ns == stamp

    def test_too_few_instances(self, tmp_path):
        dataset = toy_dataset(scenes=1, per_scene=3)
        with pytest.raises(InvalidInputError):
            trainer.train(dataset, tiny_config(), tmp_path / "run")


class TestFailure:
    def test_nonfinite_loss_aborts_and_keeps_checkpoints(self, tmp_path):
        dataset = toy_dataset()
        # a divergent learning rate blows the parameters up after a few epochs
        config = tiny_config(mode="autoencoder_only", learning_rate=1e4,
                             epochs=50, checkpoint_every=1)
        with pytest.raises(NumericalError) as err:
            trainer.train(dataset, config, tmp_path / "run")
        assert err.value.layer is not None
        kept = sorted((tmp_path / "run" / "checkpoints").glob("epoch_*.p2vk"))
        assert kept
        load_checkpoint(kept[0])


class TestProgressAndEmbedding:
    def test_reconstruction_improves(self, tmp_path):
        dataset = toy_dataset(scenes=3, per_scene=4, n_points=32)
        config = tiny_config(mode="autoencoder_only", epochs=60,
                             learning_rate=1e-3, batch_size=6,
                             code_size=8, decoder_points=16)
        _, records = trainer.train(dataset, config, tmp_path / "run")
        first = np.mean([r["reconstruction_loss"] for r in records[:6]])
        last = np.mean([r["reconstruction_loss"] for r in records[-6:]])
        assert last < first

    def test_embed_dataset(self, tmp_path):
        dataset = toy_dataset()
        model, _ = trainer.train(dataset, tiny_config(), tmp_path / "run")
        pairs = trainer.embed_dataset(model, dataset, "train")
        assert len(pairs) == len(dataset.instances)
        again = trainer.embed_dataset(model, dataset, "train")
        for (rec, vec), (rec2, vec2) in zip(pairs, again):
            assert rec is rec2
            assert abs(np.linalg.norm(vec) - 1.0) <= 1e-6
            assert np.array_equal(vec, vec2)
