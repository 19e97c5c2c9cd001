import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import Pipeline

from machan.estimators import (
    MultichannelLSTMRegressor,
    PotFeatures,
    PotSVR,
    check_sequences,
)
from machan.model import ModelConfig
from tests.test_data import make_record
from tests.test_model import make_sequence


def sequence_batch(n=12, t=4, dims=(4, 4, 4), seed0=0):
    cfg = ModelConfig(d_f=dims[0], d_p=dims[1], d_c=dims[2], m=4, n=2, d_s=4)
    return [make_sequence(cfg, t=t, seed=seed0 + i, vid=f"v{seed0 + i}") for i in range(n)]


class TestMultichannelLSTMRegressor:
    def test_get_set_params_roundtrip(self):
        est = MultichannelLSTMRegressor(fusion="soft", m=8, epochs=3)
        params = est.get_params()
        assert params["fusion"] == "soft"
        assert params["m"] == 8
        est2 = clone(est)
        assert est2.get_params() == params

    def test_fit_predict_shapes(self):
        est = MultichannelLSTMRegressor(m=4, n=2, d_s=4, epochs=2, batch_size=8,
                                        fusion="soft")
        seqs = sequence_batch()
        est.fit(seqs)
        preds = est.predict(seqs)
        assert preds.shape == (len(seqs),)
        assert np.all(np.isfinite(preds))

    def test_fit_with_explicit_targets(self):
        est = MultichannelLSTMRegressor(m=4, n=2, d_s=4, epochs=2, fusion="soft")
        seqs = sequence_batch()
        y = np.linspace(-1, 1, len(seqs))
        est.fit(seqs, y)
        assert est.params_ is not None

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            MultichannelLSTMRegressor().predict(sequence_batch(3))

    def test_seed_reproducibility(self):
        seqs = sequence_batch()
        kw = dict(m=4, n=2, d_s=4, epochs=2, seed=3, fusion="soft")
        a = MultichannelLSTMRegressor(**kw).fit(seqs).predict(seqs)
        b = MultichannelLSTMRegressor(**kw).fit(seqs).predict(seqs)
        np.testing.assert_array_equal(a, b)

    def test_attention_traces(self):
        est = MultichannelLSTMRegressor(m=4, n=2, d_s=4, epochs=2, fusion="hard")
        seqs = sequence_batch()
        est.fit(seqs)
        traces = est.attention_traces(seqs[:3])
        assert len(traces) == 3
        assert all(len(tr.steps) == 4 for tr in traces)

    def test_rejects_mixed_dims(self):
        seqs = sequence_batch(4) + sequence_batch(2, dims=(5, 4, 4), seed0=50)
        with pytest.raises(ValueError, match="dims"):
            check_sequences(seqs)

    def test_rejects_wrong_type(self):
        with pytest.raises(TypeError):
            check_sequences([1, 2, 3])

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            check_sequences([])


class TestPotPipeline:
    def test_transform_shape(self):
        records = [make_record(20, dims=(3, 2, 2), vid=f"r{i}") for i in range(4)]
        X = PotFeatures().transform(records)
        assert X.shape == (4, 7 * 155)

    def test_channel_subset(self):
        records = [make_record(20, dims=(3, 2, 2), vid=f"r{i}") for i in range(2)]
        X = PotFeatures(channels=("face",)).transform(records)
        assert X.shape == (2, 3 * 155)

    def test_pipeline_composes_and_learns(self):
        rng = np.random.default_rng(0)
        records = []
        targets = []
        for i in range(80):
            rec = make_record(16, dims=(2, 2, 2), rng=rng, vid=f"r{i}")
            records.append(rec)
            # target: mean of face coordinate 0, linearly readable from PoT
            targets.append(4.0 * np.mean([f[0] for f in rec.frames["face"]]))
        pipe = Pipeline([
            ("pot", PotFeatures(levels=2)),
            ("svr", PotSVR(epsilon=0.0, lam=1e-6, steps=3000, learning_rate=0.05)),
        ])
        pipe.fit(records[:60], np.asarray(targets[:60]))
        preds = pipe.predict(records[60:])
        corr = np.corrcoef(preds, targets[60:])[0, 1]
        assert corr > 0.9

    def test_svr_not_fitted(self):
        with pytest.raises(NotFittedError):
            PotSVR().predict(np.zeros((2, 3)))

    def test_svr_get_params(self):
        est = PotSVR(epsilon=0.2, steps=10)
        cloned = clone(est)
        assert cloned.get_params()["epsilon"] == 0.2
        assert cloned.get_params()["steps"] == 10
