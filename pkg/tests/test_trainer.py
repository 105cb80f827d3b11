import json

import numpy as np
import pytest
import torch

from cached_det.context import ContextConfig
from cached_det.detector import DetectorConfig, cascade_infer, load_checkpoint
from cached_det.synthcharts import generate_corpus, load_config
from cached_det.trainer import (SEED_ENV, TrainConfig, TrainingDivergedError, effective_seed,
                                learning_rate, load_samples, train)

SMALL_CHARTS = {**load_config(), "width": [224, 256], "height": [192, 224]}
TINY = DetectorConfig(rois_per_image=32, max_proposals=200,
                      context=ContextConfig(pad_to_block=False))


@pytest.fixture(scope="module")
def corpus4(tmp_path_factory):
    return generate_corpus(4, 100, tmp_path_factory.mktemp("c4"), SMALL_CHARTS)


@pytest.fixture(scope="module")
def samples4(corpus4):
    return load_samples(corpus4)


def tiny_cfg(out_dir, dataset="", **kw):
    base = dict(dataset=str(dataset), out_dir=str(out_dir), epochs=1, batch_size=2,
                lr=0.01, warmup_steps=2, detector=TINY)
    base.update(kw)
    return TrainConfig(**base)


def read_log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


class TestConfig:
    def test_json_round_trip(self):
        cfg = TrainConfig(dataset="d.json", epochs=3, lr_steps=(2,), detector=TINY)
        again = TrainConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"epochz": 3})

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)

    def test_schedule(self):
        cfg = TrainConfig(lr=0.1, lr_steps=(2, 3), lr_gamma=0.1, warmup_steps=4)
        assert learning_rate(cfg, 0, 0) == pytest.approx(0.025)
        assert learning_rate(cfg, 10, 1) == pytest.approx(0.1)
        assert learning_rate(cfg, 10, 2) == pytest.approx(0.01)
        assert learning_rate(cfg, 10, 3) == pytest.approx(0.001)


class TestSeed:
    def test_env_override(self, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        assert effective_seed(3) == 3
        monkeypatch.setenv(SEED_ENV, "11")
        assert effective_seed(3) == 11
        monkeypatch.setenv(SEED_ENV, "eleven")
        with pytest.raises(ValueError, match=SEED_ENV):
            effective_seed(3)


class TestTrain:
    def test_one_epoch_smoke(self, corpus4, tmp_path):
        res = train(tiny_cfg(tmp_path, corpus4))
        assert res.steps == 2
        assert res.checkpoint is not None and res.checkpoint.exists()
        records = read_log(res.log_path)
        assert [r["step"] for r in records] == [0, 1]
        assert {"total", "rpn_cls", "rpn_loc", "s1_cls", "s3_loc", "lr"} <= set(records[0])
        assert json.loads((tmp_path / "train_config.json").read_text())["epochs"] == 1
        model = load_checkpoint(res.checkpoint)
        for p, q in zip(model.parameters(), res.model.parameters()):
            assert torch.equal(p, q)
        image = load_samples(corpus4)[0].image
        assert cascade_infer(image, model) == cascade_infer(image, res.model)

    def test_deterministic_logs(self, samples4, tmp_path, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        a = train(tiny_cfg(tmp_path / "a", max_steps=3, seed=7), samples4)
        b = train(tiny_cfg(tmp_path / "b", max_steps=3, seed=7), samples4)
        assert a.log_path.read_bytes() == b.log_path.read_bytes()
        c = train(tiny_cfg(tmp_path / "c", max_steps=3, seed=8), samples4)
        assert a.losses != c.losses

    def test_env_seed_applies(self, samples4, tmp_path, monkeypatch):
        monkeypatch.delenv(SEED_ENV, raising=False)
        ref = train(tiny_cfg(tmp_path / "ref", max_steps=2, seed=5), samples4)
        monkeypatch.setenv(SEED_ENV, "5")
        env = train(tiny_cfg(tmp_path / "env", max_steps=2, seed=0), samples4)
        assert env.losses == ref.losses

    def test_nan_loss_dumps_batch(self, samples4, tmp_path, monkeypatch):
        from cached_det.detector import CascadeDetector
        real = CascadeDetector.forward_train
        calls = {"n": 0}

        def poisoned(self, *args, **kw):
            out = real(self, *args, **kw)
            calls["n"] += 1
            if calls["n"] == 2:
                out["total"] = out["total"] * float("nan")
            return out

        monkeypatch.setattr(CascadeDetector, "forward_train", poisoned)
        with pytest.raises(TrainingDivergedError, match="step 1"):
            train(tiny_cfg(tmp_path, batch_size=1), samples4)
        dump = json.loads((tmp_path / "nan_dump_step1.json").read_text())
        assert dump["step"] == 1
        assert len(dump["image_ids"]) == 1
        assert np.isnan(dump["losses"]["total"])

    def test_empty_training_set(self, tmp_path):
        with pytest.raises(ValueError, match="empty"):
            train(tiny_cfg(tmp_path), [])

    @pytest.mark.slow
    def test_loss_halves_in_200_steps(self, tmp_path_factory, tmp_path):
        path = generate_corpus(16, 300, tmp_path_factory.mktemp("c16"), SMALL_CHARTS)
        cfg = tiny_cfg(tmp_path, path, epochs=13, batch_size=1, lr=0.02, warmup_steps=20,
                       max_steps=200, checkpoint_every=100)
        res = train(cfg)
        assert res.steps == 200
        first, last = np.mean(res.losses[:10]), np.mean(res.losses[-20:])
        assert last <= 0.5 * first, (first, last)
