import json

import numpy as np
import pytest

from pcm3 import tensor as T
from pcm3.data import LabeledDataset, SynthConfig, generate_synthetic
from pcm3.errors import CapabilityError, ContractError, ShapeError
from pcm3.evaluation import (FeatureBank, append_report, attach_untrained_decoder, config_hash, extract_features,
                             knn_eval, knn_predict, linear_probe, masked_pred_error, occlude, occlusion_eval)
from pcm3.model import ModelConfig, PCM3Model

TRAIN, TEST = generate_synthetic(SynthConfig(classes=3, train_per_class=6, test_per_class=4, frames=8))
SMALL = ModelConfig(frames=8, hidden=6, embed=5, prompt_dim=3, decoder_hidden=6, queue_size=8)


def bank(x, y, split="train"):
    return FeatureBank(np.asarray(x, dtype=float), np.asarray(y), split)


# -- KNN -------------------------------------------------------------------------------


def test_knn_on_train_duplicates_is_perfect():
    g = np.random.default_rng(0)
    f, y = g.normal(size=(20, 4)), g.integers(0, 3, 20)
    assert knn_eval(bank(f, y), bank(f.copy(), y, "test")).accuracy == 1.0


def test_knn_cosine_is_scale_invariant():
    g = np.random.default_rng(1)
    tr, te = bank(g.normal(size=(30, 5)), g.integers(0, 4, 30)), g.normal(size=(10, 5))
    scaled = bank(tr.features * g.uniform(0.1, 10, (30, 1)), tr.labels)
    np.testing.assert_array_equal(knn_predict(tr, te), knn_predict(scaled, te * 3.0))


def test_knn_tie_goes_to_lowest_train_index():
    tr = bank([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]], [2, 0, 1])
    assert knn_predict(tr, np.array([[1.0, 0.0]])).tolist() == [2]


def test_knn_small_perturbation_is_stable():
    g = np.random.default_rng(2)
    tr = bank(np.eye(4) * 5, [0, 1, 2, 3])
    te = np.eye(4) * 5 + g.normal(scale=1e-3, size=(4, 4))
    assert knn_predict(tr, te).tolist() == [0, 1, 2, 3]


def test_knn_empty_bank():
    with pytest.raises(ContractError):
        knn_predict(bank(np.zeros((0, 2)), []), np.ones((1, 2)))


def test_per_class_accuracy():
    tr = bank([[1.0, 0.0], [0.0, 1.0]], [0, 1])
    te = bank([[1.0, 0.1], [0.9, 0.2], [0.0, 1.0]], [0, 1, 1], "test")
    r = knn_eval(tr, te)
    assert r.accuracy == pytest.approx(2 / 3) and r.per_class == {0: 1.0, 1: 0.5}


# -- linear probe ----------------------------------------------------------------------


def test_linear_probe_separable():
    g = np.random.default_rng(3)
    centres = np.eye(3) * 4
    y = np.repeat(np.arange(3), 20)
    f = centres[y] + g.normal(scale=0.3, size=(60, 3))
    r = linear_probe(bank(f, y), bank(f, y, "test"))
    assert r.accuracy == 1.0 and r.extra["train_accuracy"] == 1.0


def test_linear_probe_zero_features_predict_majority():
    y = np.array([0, 0, 0, 1, 2])
    r = linear_probe(bank(np.zeros((5, 4)), y), bank(np.zeros((5, 4)), y, "test"))
    assert r.accuracy == pytest.approx(3 / 5)


def test_linear_probe_permutation_invariant():
    g = np.random.default_rng(4)
    f, y = g.normal(size=(40, 3)), g.integers(0, 2, 40)
    te = bank(g.normal(size=(10, 3)), g.integers(0, 2, 10), "test")
    perm = g.permutation(40)
    a = linear_probe(bank(f, y), te)
    b = linear_probe(bank(f[perm], y[perm]), te)
    np.testing.assert_allclose(a.extra["weights"], b.extra["weights"], atol=1e-10)
    assert a.accuracy == b.accuracy


def test_linear_probe_single_class():
    with pytest.raises(ContractError):
        linear_probe(bank(np.ones((3, 2)), [1, 1, 1]), bank(np.ones((1, 2)), [1], "test"))


# -- feature extraction ----------------------------------------------------------------


def test_extract_features_leaves_model_untouched():
    model = PCM3Model(SMALL)
    for p in model.prompts.values():
        p.data[:] = 0.5
    before = model.checksum()
    fb = extract_features(model, TEST)
    assert model.checksum() == before and model.prompts_enabled
    assert fb.features.shape == (len(TEST), 12)
    np.testing.assert_array_equal(fb.features, model.encode(TEST.sequences, prompts_enabled=False).data)


def test_extract_features_shape_mismatch():
    with pytest.raises(ShapeError):
        extract_features(PCM3Model(ModelConfig(frames=6, hidden=4, embed=3, prompt_dim=2, decoder_hidden=3)), TEST)


# -- occlusion -------------------------------------------------------------------------


@pytest.mark.parametrize("strategy", ["spatial", "temporal"])
def test_occlude_zero_ratio_and_full(strategy):
    x = TEST.sequences[0]
    out, r = occlude(x, strategy, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out, x)
    assert r == 0.0
    out, r = occlude(x, strategy, 1.0, np.random.default_rng(0))
    assert r == 1.0 and not out.any()


def test_occlude_spatial_zeroes_whole_parts():
    out, r = occlude(TEST.sequences[0], "spatial", 0.4, np.random.default_rng(5))
    zero = ~out.any(axis=(0, 2))
    assert zero.sum() == 6 and r == 0.4
    for start in range(0, 15, 3):
        assert len(set(zero[start:start + 3])) == 1


def test_occlusion_zero_ratio_has_zero_delta():
    model = PCM3Model(SMALL)
    res = occlusion_eval(model, TRAIN, TEST, trials=2, ratio_range=(0.0, 0.0))
    for r in res.values():
        assert r.extra["delta"] == 0.0


def test_occlusion_full_ratio_collapses_to_one_class():
    model = PCM3Model(SMALL)
    res = occlusion_eval(model, TRAIN, TEST, trials=1, ratio_range=(1.0, 1.0))
    # Every occluded input is all zeros, so all test samples share one prediction.
    assert res["spatial"].accuracy == pytest.approx(1 / 3)


def test_occlusion_ratios_in_range_and_reproducible():
    model = PCM3Model(SMALL)
    a = occlusion_eval(model, TRAIN, TEST, trials=3, seed=7)
    b = occlusion_eval(model, TRAIN, TEST, trials=3, seed=7)
    for s in ("spatial", "temporal"):
        ratios = np.array(a[s].extra["ratios"])
        assert len(ratios) == 3 * len(TEST)
        assert np.all((ratios >= 0.3 - 1e-12) & (ratios <= 0.7 + 1e-12))
        assert a[s].accuracy == b[s].accuracy and a[s].extra["ratios"] == b[s].extra["ratios"]


def test_linear_occlusion_probe():
    model = PCM3Model(SMALL)
    res = occlusion_eval(model, TRAIN, TEST, trials=1, ratio_range=(0.0, 0.0), probe="linear")
    assert res["spatial"].extra["delta"] == 0.0 and res["spatial"].config["probe"] == "linear"
    with pytest.raises(ValueError):
        occlusion_eval(model, TRAIN, TEST, probe="svm")


# -- masked prediction -----------------------------------------------------------------


class Oracle(PCM3Model):
    """Decoder that returns the clean input, threaded through a side channel."""

    def encode(self, x, *a, **kw):
        self._x = TEST.sequences[self._i:self._i + len(x)]
        return super().encode(x, *a, **kw)

    def decode(self, feat):
        return T.Tensor(self._x.copy())


def test_maskpred_oracle_is_zero():
    m = Oracle(SMALL)
    m._i = 0
    assert masked_pred_error(m, TEST, trials=2, batch_size=len(TEST)) == 0.0


def test_maskpred_zero_prediction_is_mean_norm():
    model = PCM3Model(SMALL)
    for p in model.decoder.values():
        p.data[:] = 0.0
    err = masked_pred_error(model, TEST, trials=2)
    norms = np.linalg.norm(TEST.sequences, axis=-1)
    # Topology masks hide whole parts, so only an approximate match to the overall mean is expected.
    assert err == pytest.approx(norms.mean(), rel=0.15)
    single = masked_pred_error(model, LabeledDataset(TEST.sequences[:1] * 0 + 1.0, TEST.labels[:1], 3), trials=1)
    assert single == pytest.approx(np.sqrt(3.0), rel=1e-12)


def test_maskpred_needs_decoder():
    m = PCM3Model(ModelConfig(**{**SMALL.__dict__, "has_decoder": False}))
    with pytest.raises(CapabilityError):
        masked_pred_error(m, TEST)
    proxy = attach_untrained_decoder(m, seed=0)
    assert proxy.has_decoder and not m.has_decoder
    assert masked_pred_error(proxy, TEST, trials=1) > 0


# -- reports ---------------------------------------------------------------------------


def test_report_append_and_hash(tmp_path):
    path = tmp_path / "report.json"
    append_report(path, [{"task": "knn", "value": 0.5}])
    append_report(path, [{"task": "linear", "value": 0.6}])
    assert [e["task"] for e in json.loads(path.read_text())] == ["knn", "linear"]
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
