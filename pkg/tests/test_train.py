from __future__ import annotations

import json

import numpy as np
import pytest

from dxrank.backends import (
    BackendError,
    TrainConfig,
    infer_logits,
    load_model,
    save_model,
    train,
)
from dxrank.backends.boxes import VolumeConfig
from dxrank.ehr import build_instances
from dxrank.synth import SyntheticConfig, generate_synthetic

CFG = SyntheticConfig(n_patients=40, n_ccs=12, visits_range=(2, 4), seed=6)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(CFG)


class TestTrainLoop:
    def test_zero_epochs_keeps_init(self, data):
        ds, onto = data
        a = train("box", ds, onto, TrainConfig(epochs=0, d=4, seed=3))
        b = train("box", ds, onto, TrainConfig(epochs=0, d=4, seed=3))
        assert len(a.losses) == 1
        for key, val in a.params.flat().items():
            np.testing.assert_array_equal(val, b.params.flat()[key])

    def test_zero_learning_rate_never_moves(self, data):
        ds, onto = data
        model = train(
            "retain", ds, onto,
            TrainConfig(epochs=3, learning_rate=0.0, d=4, seed=0),
        )
        assert len(model.losses) == 4
        assert all(l == model.losses[0] for l in model.losses)

    @pytest.mark.parametrize("kind", ["box", "retain"])
    def test_loss_decreases(self, data, kind):
        ds, onto = data
        model = train(kind, ds, onto, TrainConfig(epochs=5, d=8, seed=1))
        assert len(model.losses) == 6
        assert model.losses[-1] < model.losses[0]

    def test_deterministic_per_seed(self, data):
        ds, onto = data
        cfg = TrainConfig(epochs=2, d=4, seed=9)
        a = train("box", ds, onto, cfg)
        b = train("box", ds, onto, cfg)
        assert a.losses == b.losses
        for key, val in a.params.flat().items():
            np.testing.assert_array_equal(val, b.params.flat()[key])

    def test_seed_changes_training(self, data):
        ds, onto = data
        a = train("box", ds, onto, TrainConfig(epochs=1, d=4, seed=0))
        b = train("box", ds, onto, TrainConfig(epochs=1, d=4, seed=1))
        assert a.losses != b.losses

    def test_unknown_backend_rejected(self, data):
        ds, onto = data
        with pytest.raises(BackendError):
            train("transformer", ds, onto)

    def test_logit_vector_matches_infer(self, data):
        ds, onto = data
        model = train("box", ds, onto, TrainConfig(epochs=1, d=4, seed=2))
        inst = build_instances(ds)[0]
        via_model = model.logit_vector(inst)
        direct = infer_logits("box", model.params, inst, model.volume)
        np.testing.assert_array_equal(via_model.scores, direct.scores)


class TestSerialization:
    @pytest.mark.parametrize("kind", ["box", "retain"])
    def test_round_trip_preserves_logits(self, data, tmp_path, kind):
        ds, onto = data
        model = train(kind, ds, onto, TrainConfig(epochs=1, d=4, seed=5),
                      VolumeConfig(beta=0.2))
        path = tmp_path / "m.json"
        save_model(model, path)
        again = load_model(path, onto)
        assert again.backend == kind
        assert again.losses == model.losses
        assert again.volume == model.volume
        inst = build_instances(ds)[0]
        np.testing.assert_array_equal(
            again.logit_vector(inst).scores, model.logit_vector(inst).scores
        )

    def test_save_is_deterministic(self, data, tmp_path):
        ds, onto = data
        model = train("box", ds, onto, TrainConfig(epochs=1, d=4, seed=5))
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_model(model, a)
        save_model(model, b)
        assert a.read_bytes() == b.read_bytes()

    def test_vocab_mismatch_rejected(self, data, tmp_path):
        ds, onto = data
        other_ds, other_onto = generate_synthetic(
            SyntheticConfig(n_patients=5, n_ccs=9, seed=0)
        )
        model = train("box", ds, onto, TrainConfig(epochs=0, d=4))
        path = tmp_path / "m.json"
        save_model(model, path)
        with pytest.raises(BackendError):
            load_model(path, other_onto)

    def test_tampered_tensor_shape_rejected(self, data, tmp_path):
        ds, onto = data
        model = train("box", ds, onto, TrainConfig(epochs=0, d=4))
        path = tmp_path / "m.json"
        save_model(model, path)
        doc = json.loads(path.read_text())
        doc["tensors"]["attn_query"] = [0.0, 0.0]
        path.write_text(json.dumps(doc))
        with pytest.raises(BackendError):
            load_model(path, onto)

    def test_unknown_format_version_rejected(self, data, tmp_path):
        ds, onto = data
        model = train("box", ds, onto, TrainConfig(epochs=0, d=4))
        path = tmp_path / "m.json"
        save_model(model, path)
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(BackendError):
            load_model(path, onto)
