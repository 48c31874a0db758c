"""Tests for the two-phase trainer, its schedule and resume behaviour."""

import json
import math
import os

import numpy as np
import pytest
import torch
from torch.utils.data import default_collate

from src.core.errors import ConfigError, DataError, TrainingError
from src.core.imaging import load_image, save_image
from src.core.utils import read_jsonl
from src.networks.checkpoint import load_checkpoint
from src.networks.features import FeatureTap, load_extractor
from src.networks.objectives import LossWeights
from src.networks.srgan import DiscriminatorConfig, GeneratorConfig
from src.services.synthetic import SceneSpec, generate_corpus
from src.services.trainer import (
    PatchPairDataset,
    Phase,
    Trainer,
    TrainSchedule,
    load_manifest,
    lr_at,
    run,
    super_resolve,
)

G_CFG = GeneratorConfig(n_residual_blocks=2, base_channels=16)
D_CFG = DiscriminatorConfig(channels=(8, 8), strides=(1, 2), dense_width=16, input_size=32)


def small_schedule(**overrides) -> TrainSchedule:
    params = dict(pretrain_epochs=1, main_epochs=2, batch_size=2, patch_size=32, seed=7, decay_every=2)
    params.update(overrides)
    return TrainSchedule(**params)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out_dir = str(tmp_path_factory.mktemp("corpus"))
    return generate_corpus(4, SceneSpec(size=48, seed=0), out_dir)


@pytest.fixture
def dataset(manifest):
    return PatchPairDataset(load_manifest(manifest), seed=7, patch_size=32)


def parameters_of(module):
    return [p.detach().clone() for p in module.parameters()]


class TestSchedule:
    def test_lr_at(self):
        schedule = TrainSchedule()
        assert lr_at(schedule, 0) == pytest.approx(1e-3)
        assert lr_at(schedule, 19) == pytest.approx(1e-3)
        assert lr_at(schedule, 20) == pytest.approx(1e-4)
        assert lr_at(schedule, 79) == pytest.approx(1e-6)
        with pytest.raises(ConfigError):
            lr_at(schedule, -1)

    def test_phase_of(self):
        schedule = TrainSchedule()
        assert schedule.total_epochs == 80
        assert schedule.phase_of(24) is Phase.PRETRAIN
        assert schedule.phase_of(25) is Phase.ADVERSARIAL

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainSchedule(batch_size=0)
        with pytest.raises(ConfigError):
            TrainSchedule(main_epochs=-1)

    def test_discriminator_must_match_patch(self, surrogate_fx):
        with pytest.raises(ConfigError):
            Trainer(small_schedule(patch_size=48), LossWeights(), surrogate_fx, G_CFG, D_CFG)


class TestDataset:
    def test_item_layout(self, dataset):
        item = dataset[1]
        assert item["index"] == 1
        assert item["lr"].shape == (3, 8, 8)
        assert item["hr"].shape == (3, 32, 32)
        total = item["object"] + item["background"] + item["boundary"]
        assert item["boundary"].shape == (1, 32, 32)
        assert torch.all(total == 1)

    def test_epoch_order_is_seeded(self, dataset):
        assert dataset.epoch_order(3) == dataset.epoch_order(3)
        assert sorted(dataset.epoch_order(3)) == [0, 1, 2, 3]

    def test_same_epoch_same_patches(self, dataset):
        dataset.set_epoch(2)
        a = dataset[0]["hr"]
        dataset.set_epoch(2)
        assert torch.equal(a, dataset[0]["hr"])


class TestManifest:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_manifest(str(tmp_path / "none.jsonl"))

    def test_missing_obb_key(self, tmp_path, manifest):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"hr": os.path.join(os.path.dirname(manifest), "hr", "scene_0000.png")}) + "\n")
        with pytest.raises(DataError, match="obb"):
            load_manifest(str(path))

    def test_missing_file(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"hr": "hr/a.png", "obb": "obb/a.png"}) + "\n")
        with pytest.raises(DataError, match="not found"):
            load_manifest(str(path))

    def test_relative_paths(self, manifest):
        entries = load_manifest(manifest)
        assert len(entries) == 4
        assert all(os.path.isabs(e["hr"]) and os.path.isfile(e["obb"]) for e in entries)


class TestSteps:
    def test_step_count_and_log(self, tmp_path, manifest, surrogate_fx):
        result = run(small_schedule(main_epochs=0), manifest, str(tmp_path), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        records = read_jsonl(str(tmp_path / "train_log.jsonl"))

        assert result["success"] and result["epochs_completed"] == 1
        assert result["global_step"] == 2
        assert [r["step"] for r in records] == [1, 2]
        assert os.path.basename(result["checkpoint"]) == "epoch_0001.ckpt"

    def test_zero_lr_keeps_parameters(self, dataset, surrogate_fx):
        trainer = Trainer(small_schedule(lr0=0.0), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(0)
        before = parameters_of(trainer.generator)
        trainer.pretrain_step(default_collate([dataset[0], dataset[1]]))
        assert all(torch.equal(a, b) for a, b in zip(before, parameters_of(trainer.generator)))

    def test_non_finite_loss(self, dataset, surrogate_fx):
        trainer = Trainer(small_schedule(), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(0)
        batch = default_collate([dataset[2]])
        batch["hr"][:] = float("nan")
        with pytest.raises(TrainingError, match=r"batch ids \[2\]"):
            trainer.pretrain_step(batch)

    def test_wrong_phase(self, dataset, surrogate_fx):
        trainer = Trainer(small_schedule(), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        batch = default_collate([dataset[0], dataset[1]])
        trainer.begin_epoch(1)
        with pytest.raises(TrainingError):
            trainer.pretrain_step(batch)
        trainer.begin_epoch(0)
        with pytest.raises(TrainingError):
            trainer.adversarial_step(batch)

    def test_probe_mode(self, dataset, surrogate_fx):
        trainer = Trainer(small_schedule(), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(1)
        before = parameters_of(trainer.generator)
        record = trainer.adversarial_step(default_collate([dataset[0], dataset[1]]), probe=True)

        assert record["mse"] == 0.0
        assert record["perc_boundary"] == 0.0 and record["perc_background"] == 0.0
        assert math.isfinite(record["adv_g"]) and math.isfinite(record["adv_d"])
        assert all(torch.equal(a, b) for a, b in zip(before, parameters_of(trainer.generator)))

    def test_object_only_batch(self, dataset, surrogate_fx):
        trainer = Trainer(small_schedule(), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(1)
        batch = default_collate([dataset[0], dataset[1]])
        batch["object"] = torch.ones_like(batch["object"])
        batch["background"] = torch.zeros_like(batch["background"])
        batch["boundary"] = torch.zeros_like(batch["boundary"])
        record = trainer.adversarial_step(batch)
        assert record["perc_boundary"] == 0.0 and record["perc_background"] == 0.0
        assert record["mse"] > 0.0


class TestLayerUpdates:
    """One optimizer step moves at least one parameter of every layer it trains."""

    @staticmethod
    def layer_snapshot(module):
        return {
            name: [p.detach().clone() for p in layer.parameters(recurse=False)]
            for name, layer in module.named_modules()
            if any(True for _ in layer.parameters(recurse=False))
        }

    @staticmethod
    def unchanged_layers(module, before):
        after = TestLayerUpdates.layer_snapshot(module)
        return [name for name in before if all(torch.equal(a, b) for a, b in zip(before[name], after[name]))]

    def test_pretrain_step_moves_every_generator_layer(self, dataset, surrogate_fx):
        trainer = Trainer(small_schedule(), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(0)
        before = self.layer_snapshot(trainer.generator)
        trainer.pretrain_step(default_collate([dataset[0], dataset[1]]))
        assert self.unchanged_layers(trainer.generator, before) == []

    def test_adversarial_step_moves_every_layer(self, dataset, surrogate_fx):
        trainer = Trainer(small_schedule(), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(1)
        g_before = self.layer_snapshot(trainer.generator)
        d_before = self.layer_snapshot(trainer.discriminator)
        assert len(g_before) > 5 and len(d_before) > 3

        trainer.adversarial_step(default_collate([dataset[0], dataset[1]]))
        assert self.unchanged_layers(trainer.generator, g_before) == []
        assert self.unchanged_layers(trainer.discriminator, d_before) == []


class TestPhases:
    def test_phase_boundary_and_lr(self, tmp_path, manifest, surrogate_fx):
        schedule = small_schedule()
        run(schedule, manifest, str(tmp_path), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        records = read_jsonl(str(tmp_path / "train_log.jsonl"))

        assert len(records) == 6
        for record in records:
            assert record["lr"] == lr_at(schedule, record["epoch"])
            if record["epoch"] < schedule.pretrain_epochs:
                assert record["phase"] == "pretrain"
                assert record["adv_g"] == 0.0 and record["adv_d"] == 0.0
                assert record["perc_boundary"] == 0.0 and record["perc_background"] == 0.0
            else:
                assert record["phase"] == "adversarial"
                assert record["adv_g"] > 0.0 and record["adv_d"] > 0.0
        assert records[-1]["lr"] == pytest.approx(schedule.lr0 * schedule.decay_factor)


class TestDeterminismAndResume:
    def _final_generator(self, path):
        return load_checkpoint(path).generator

    def test_same_seed_same_result(self, tmp_path, manifest, surrogate_fx):
        schedule = small_schedule(main_epochs=1)
        a = run(schedule, manifest, str(tmp_path / "a"), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        b = run(schedule, manifest, str(tmp_path / "b"), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        ga, gb = self._final_generator(a["checkpoint"]), self._final_generator(b["checkpoint"])
        assert all(torch.equal(ga[name], gb[name]) for name in ga)

    def test_resume_matches_uninterrupted(self, tmp_path, manifest, surrogate_fx):
        schedule = small_schedule(main_epochs=3)
        full = run(schedule, manifest, str(tmp_path / "full"), LossWeights(), surrogate_fx, G_CFG, D_CFG)

        out = str(tmp_path / "split")
        first = run(schedule, manifest, out, LossWeights(), surrogate_fx, G_CFG, D_CFG, stop_after=2)
        assert first["epochs_completed"] == 2
        resumed = run(schedule, manifest, out, LossWeights(), surrogate_fx, G_CFG, D_CFG, resume=first["checkpoint"])

        assert resumed["global_step"] == full["global_step"]
        ga, gb = self._final_generator(full["checkpoint"]), self._final_generator(resumed["checkpoint"])
        assert all(torch.equal(ga[name], gb[name]) for name in ga)

        records = read_jsonl(os.path.join(out, "train_log.jsonl"))
        after_resume = [r for r in records if r["epoch"] == 2]
        assert after_resume and after_resume[0]["lr"] == lr_at(schedule, 2)

    def test_resume_mismatch(self, tmp_path, manifest, surrogate_fx):
        first = run(small_schedule(main_epochs=0), manifest, str(tmp_path / "a"), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        with pytest.raises(ConfigError, match="seed"):
            run(
                small_schedule(seed=8), manifest, str(tmp_path / "b"), LossWeights(), surrogate_fx, G_CFG, D_CFG,
                resume=first["checkpoint"],
            )

    @pytest.mark.parametrize(
        "weights, fx_seed, field",
        [
            (LossWeights(alpha=5.0, beta=0.0, w_adv=0.9), 1234, "weights"),
            (LossWeights(boundary_tap=FeatureTap.RELU_1_2), 1234, "weights"),
            (LossWeights(), 99, "extractor"),
        ],
    )
    def test_resume_objective_mismatch(self, tmp_path, manifest, surrogate_fx, weights, fx_seed, field):
        schedule = small_schedule()
        first = run(schedule, manifest, str(tmp_path / "a"), LossWeights(), surrogate_fx, G_CFG, D_CFG, stop_after=2)
        fx = surrogate_fx if fx_seed == 1234 else load_extractor("surrogate", seed=fx_seed)
        with pytest.raises(ConfigError, match=field):
            run(schedule, manifest, str(tmp_path / "b"), weights, fx, G_CFG, D_CFG, resume=first["checkpoint"])


class TestSuperResolve:
    def test_output_dimensions(self, tmp_path, manifest, surrogate_fx):
        result = run(small_schedule(main_epochs=0), manifest, str(tmp_path / "run"), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        lr_path = str(tmp_path / "small.png")
        save_image(np.random.default_rng(0).random((10, 12, 3)).astype(np.float32), lr_path)

        written = super_resolve(result["checkpoint"], [lr_path], str(tmp_path / "sr"))
        assert [os.path.basename(p) for p in written] == ["small.png"]
        assert load_image(written[0]).shape == (40, 48, 3)


@pytest.mark.slow
class TestAdversarialSmoke:
    def test_two_hundred_steps_stay_finite(self, dataset, surrogate_fx):
        schedule = small_schedule(pretrain_epochs=0, main_epochs=1, lr0=1e-4)
        trainer = Trainer(schedule, LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(0)
        batches = [default_collate([dataset[0], dataset[1]]), default_collate([dataset[2], dataset[3]])]

        for i in range(200):
            batch = batches[i % 2]
            record = trainer.adversarial_step(batch)
            assert record["phase"] == "adversarial"
            values = [v for k, v in record.items() if isinstance(v, float)]
            assert all(math.isfinite(v) for v in values), record
            if i % 20 == 19:
                d = trainer.discriminator
                with torch.no_grad():
                    images = [b["hr"] for b in batches] + [trainer.generator(b["lr"]) for b in batches]
                    logits = torch.cat([d.classifier[:-1](d.features(x)).view(-1) for x in images])
                    probs = torch.cat([d(x) for x in images])
                assert torch.all(torch.isfinite(logits))
                assert torch.equal(probs, torch.sigmoid(logits))
                assert torch.all((probs >= 0) & (probs <= 1))
        assert trainer.state.step == 200


@pytest.mark.slow
class TestOverfit:
    def test_single_batch_mse_drops(self, dataset, surrogate_fx):
        """Reduced generator on two 32x32 patches; the full-size run follows."""
        trainer = Trainer(small_schedule(), LossWeights(), surrogate_fx, G_CFG, D_CFG)
        trainer.begin_epoch(0)
        batch = default_collate([dataset[0], dataset[1]])
        first = trainer.pretrain_step(batch)["mse"]
        for _ in range(499):
            last = trainer.pretrain_step(batch)["mse"]
        assert last * 10 <= first

    def test_default_generator_single_full_patch(self, tmp_path, surrogate_fx):
        manifest_path = generate_corpus(1, SceneSpec(size=96, seed=3), str(tmp_path / "one"))
        patch = PatchPairDataset(load_manifest(manifest_path), seed=0, patch_size=96)
        schedule = TrainSchedule(pretrain_epochs=1, main_epochs=0, batch_size=1, patch_size=96, seed=0)
        trainer = Trainer(schedule, LossWeights(), surrogate_fx, GeneratorConfig(), DiscriminatorConfig())
        trainer.begin_epoch(0)
        batch = default_collate([patch[0]])
        assert batch["hr"].shape == (1, 3, 96, 96)

        first = trainer.pretrain_step(batch)["mse"]
        for _ in range(499):
            last = trainer.pretrain_step(batch)["mse"]
        assert trainer.state.step == 500
        assert last * 10 <= first
