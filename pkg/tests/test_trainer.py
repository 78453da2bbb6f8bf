import json

import numpy as np
import pytest

from serlab import model
from serlab import numerics as nm
from serlab.dataio import SynthConfig, gen_synthetic
from serlab.trainer import (
    AdamState,
    Checkpoint,
    TrainConfig,
    adam_step,
    frozen_tensor_hashes,
    predict,
    train_stage1,
    train_stage2,
)


@pytest.fixture(scope="module")
def tiny_records():
    cfg = SynthConfig(
        class_counts=(14,) * 8, separation=1.5, noise_sigma=0.3,
        split_fractions=(0.7, 0.3, 0.0), seed=77,
    )
    return gen_synthetic(cfg)


def _quick_cfg(**kw):
    base = dict(
        stage=1, task="categorical", modality="speech", loss="focal",
        learning_rate=0.01, epochs=2, seed=1, batch_size=16,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def _store(self, values):
        store = nm.ParamStore()
        store.add("w", values)
        return store

    def test_zero_gradients_leave_params_and_moments_unchanged(self):
        store = self._store(np.array([1.5, -2.0]))
        before = store.value("w").copy()
        state = AdamState.for_params(store, ["w"])
        adam_step(store, {"w": np.zeros(2)}, state, lr=0.1)
        assert np.array_equal(store.value("w"), before)
        assert np.array_equal(state.m["w"], np.zeros(2))
        assert np.array_equal(state.v["w"], np.zeros(2))

    def test_first_step_with_unit_gradient_is_minus_lr(self):
        store = self._store(np.array([0.0]))
        state = AdamState.for_params(store, ["w"])
        adam_step(store, {"w": np.ones(1)}, state, lr=0.01)
        # bias-corrected m_hat / sqrt(v_hat) == 1 exactly on the first step
        expected = -0.01 * 1.0 / (1.0 + 1e-8)
        assert abs(store.value("w")[0] - expected) < 1e-15

    def test_identical_gradient_sequences_give_identical_trajectories(self):
        rng = np.random.default_rng(9)
        grads = [rng.normal(size=3) for _ in range(20)]

        def run():
            store = self._store(np.zeros(3))
            state = AdamState.for_params(store, ["w"])
            for g in grads:
                adam_step(store, {"w": g}, state, lr=0.05)
            return store.value("w").copy()

        assert np.array_equal(run(), run())

    def test_shape_mismatch_rejected(self):
        store = self._store(np.zeros(3))
        state = AdamState.for_params(store, ["w"])
        with pytest.raises(ValueError, match="shape"):
            adam_step(store, {"w": np.zeros(4)}, state, lr=0.1)


class TestStage1:
    def test_zero_lr_keeps_initialization(self, tiny_records):
        cfg = _quick_cfg(learning_rate=0.0, epochs=2, seed=13)
        ckpt = train_stage1(cfg, tiny_records)
        # replicate the seeded initialization order: encoder first, head second
        dim = tiny_records[0].speech_frames.shape[1]
        enc_cfg = model.SpeechEncoderCfg(dim, cfg.hidden_dim, cfg.out_dim)
        rng = np.random.default_rng(cfg.seed)
        expected = {
            f"speech.{n}": a for n, a in model.init_encoder_params(enc_cfg, rng).items()
        }
        expected.update(
            {f"head.{n}": a for n, a in model.init_head_params(cfg.out_dim, 8, rng).items()}
        )
        assert set(ckpt.tensors) == set(expected)
        for name, arr in expected.items():
            assert np.array_equal(ckpt.tensors[name], arr), name

    def test_same_seed_bit_identical_checkpoints(self, tiny_records, tmp_path):
        cfg = _quick_cfg(seed=21)
        p1, p2 = tmp_path / "a.fckp", tmp_path / "b.fckp"
        train_stage1(cfg, tiny_records).save(p1)
        train_stage1(_quick_cfg(seed=21), tiny_records).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seed_differs(self, tiny_records, tmp_path):
        p1, p2 = tmp_path / "a.fckp", tmp_path / "b.fckp"
        train_stage1(_quick_cfg(seed=1), tiny_records).save(p1)
        train_stage1(_quick_cfg(seed=2), tiny_records).save(p2)
        assert p1.read_bytes() != p2.read_bytes()

    def test_loss_task_mismatch_rejected(self):
        with pytest.raises(ValueError, match="does not fit"):
            TrainConfig(stage=1, task="attributes", modality="speech", loss="wce")

    def test_empty_split_rejected(self, tiny_records):
        train_only = [r for r in tiny_records if r.split == "train"]
        with pytest.raises(ValueError, match="empty dev split"):
            train_stage1(_quick_cfg(), train_only)

    def test_stage_guard(self, tiny_records):
        cfg = TrainConfig(stage=2, task="categorical", fusion="concat", seed=0)
        with pytest.raises(ValueError, match="stage == 1"):
            train_stage1(cfg, tiny_records)

    def test_jsonl_log_written(self, tiny_records, tmp_path):
        log = tmp_path / "train.jsonl"
        train_stage1(_quick_cfg(epochs=3), tiny_records, log_path=log)
        lines = [json.loads(line) for line in log.read_text().splitlines()]
        assert [e["epoch"] for e in lines] == [0, 1, 2]
        assert all("train_loss" in e and "dev" in e for e in lines)

    def test_balanced_sampler_runs(self, tiny_records):
        cfg = _quick_cfg(sampler="balanced", epochs=1)
        ckpt = train_stage1(cfg, tiny_records)
        assert ckpt.metadata["config"]["sampler"] == "balanced"

    def test_attribute_training_with_mse(self, tiny_records):
        cfg = _quick_cfg(task="attributes", loss="mse", epochs=2)
        ckpt = train_stage1(cfg, tiny_records)
        assert "ccc_avg" in ckpt.metadata["dev_metrics"]


@pytest.fixture(scope="module")
def stage1_pair(tiny_records):
    speech = train_stage1(_quick_cfg(seed=31, epochs=4), tiny_records)
    text = train_stage1(_quick_cfg(modality="text", seed=32, epochs=4), tiny_records)
    return speech, text


class TestStage2:
    def _cfg(self, **kw):
        base = dict(
            stage=2, task="attributes", fusion="concat", activation="mish",
            learning_rate=0.005, epochs=2, seed=5, batch_size=16,
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_frozen_encoders_bit_identical(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        before = {**frozen_tensor_hashes(speech), **frozen_tensor_hashes(text)}
        ckpt = train_stage2(self._cfg(), speech, text, tiny_records)
        after = frozen_tensor_hashes(ckpt)
        assert before == after

    def test_head_parameters_move(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        cfg = self._cfg()
        ckpt = train_stage2(cfg, speech, text, tiny_records)
        rng = np.random.default_rng(cfg.seed)
        head_in = speech.metadata["encoder"]["out_dim"] + text.metadata["encoder"]["out_dim"]
        init = model.init_head_params(head_in, 3, rng)
        assert not np.array_equal(ckpt.tensors["head.fc1.W"], init["fc1.W"])

    def test_cross_attention_fusion_trains(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        ckpt = train_stage2(self._cfg(fusion="cross_attention"), speech, text, tiny_records)
        assert "fusion.q.W" in ckpt.tensors
        before = {**frozen_tensor_hashes(speech), **frozen_tensor_hashes(text)}
        assert frozen_tensor_hashes(ckpt) == before

    def test_activation_choice_changes_results_with_shared_seed(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        a = train_stage2(self._cfg(activation="mish"), speech, text, tiny_records)
        b = train_stage2(self._cfg(activation="relu"), speech, text, tiny_records)
        assert not np.array_equal(a.tensors["head.fc1.W"], b.tensors["head.fc1.W"])

    def test_stage_mismatch_in_sources_rejected(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        stage2 = train_stage2(self._cfg(), speech, text, tiny_records)
        with pytest.raises(ValueError, match="stage-1"):
            train_stage2(self._cfg(), stage2, text, tiny_records)

    def test_modality_mismatch_rejected(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        with pytest.raises(ValueError, match="speech checkpoint"):
            train_stage2(self._cfg(), text, text, tiny_records)

    def test_missing_tensor_rejected(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        broken = Checkpoint(
            tensors={k: v for k, v in speech.tensors.items() if k != "speech.att.v"},
            metadata=speech.metadata,
        )
        with pytest.raises(ValueError, match="speech.att.v"):
            train_stage2(self._cfg(), broken, text, tiny_records)

    def test_sources_recorded(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        ckpt = train_stage2(self._cfg(), speech, text, tiny_records)
        assert ckpt.metadata["sources"] == {
            "speech": speech.content_id,
            "text": text.content_id,
        }
        assert ckpt.metadata["concat_order"] == ["speech", "text"]


class TestPredict:
    def test_categorical_argmax_and_determinism(self, tiny_records, stage1_pair):
        speech, _ = stage1_pair
        dev = [r for r in tiny_records if r.split == "dev"]
        p1 = predict(speech, dev)
        p2 = predict(speech, dev)
        assert p1.labels == p2.labels
        assert p1.ids == [r.id for r in dev]
        for rid in p1.ids:
            logits = p1.logits[rid]
            assert p1.labels[rid] == "ACDFHNSU"[int(np.argmax(logits))]

    def test_attribute_clamping(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        cfg = TrainConfig(
            stage=2, task="attributes", fusion="concat", learning_rate=0.005,
            epochs=1, seed=6, batch_size=16,
        )
        ckpt = train_stage2(cfg, speech, text, tiny_records)
        dev = [r for r in tiny_records if r.split == "dev"]
        clamped = predict(ckpt, dev, clamp=True)
        raw = predict(ckpt, dev, clamp=False)
        for rid in clamped.ids:
            assert all(1.0 <= v <= 7.0 for v in clamped.attributes[rid])
        assert clamped.clamped == {
            rid for rid in raw.ids
            if any(not 1.0 <= v <= 7.0 for v in raw.attributes[rid])
        }

    def test_missing_modality_features_rejected(self, tiny_records, stage1_pair):
        speech, text = stage1_pair
        cfg = TrainConfig(
            stage=2, task="categorical", fusion="concat", learning_rate=0.005,
            epochs=1, seed=7, batch_size=16,
        )
        ckpt = train_stage2(cfg, speech, text, tiny_records)
        crippled = [
            type(r)(
                id=r.id, split=r.split, speech_frames=r.speech_frames,
                text_tokens=None, emotion=r.emotion, attributes=r.attributes,
            )
            for r in tiny_records[:3]
        ]
        with pytest.raises(ValueError, match="both feature sets"):
            predict(ckpt, crippled)

    def test_checkpoint_save_load_predict_identical(self, tiny_records, stage1_pair, tmp_path):
        speech, _ = stage1_pair
        path = tmp_path / "s1.fckp"
        speech.save(path)
        loaded = Checkpoint.load(path)
        dev = [r for r in tiny_records if r.split == "dev"]
        assert predict(speech, dev).labels == predict(loaded, dev).labels


class TestTrainingDynamics:
    def test_loss_non_increasing_after_warmup_on_separable_data(self, tiny_records):
        cfg = _quick_cfg(epochs=6, seed=3)
        ckpt = train_stage1(cfg, tiny_records)
        losses = [e["train_loss"] for e in ckpt.metadata["history"]]
        for a, b in zip(losses[2:], losses[3:]):
            assert b <= a + 1e-9
