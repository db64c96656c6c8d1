"""Estimator facade: parameter plumbing, fit/predict/score, persistence."""

import numpy as np
import pytest

from partprompt.data import build_splits, ingest_dataset, sample_episode
from partprompt.determinism import numpy_rng_for
from partprompt.errors import NotFittedError
from partprompt.estimator import FewShotPartSegmenter


def make_estimator(**overrides):
    settings = dict(
        channels=16, token_dim=8, n_specific=2, n_shared=2, n_text=2, max_steps=4
    )
    settings.update(overrides)
    return FewShotPartSegmenter(**settings)


class TestParams:
    def test_get_params_round_trips_constructor(self):
        est = make_estimator(design="lpp", momentum=0.5)
        params = est.get_params()
        clone = FewShotPartSegmenter(**params)
        assert clone.get_params() == params

    def test_set_params_returns_self(self):
        est = make_estimator()
        assert est.set_params(alpha=0.25) is est
        assert est.alpha == 0.25

    def test_set_params_rejects_unknown(self):
        with pytest.raises(ValueError, match="invalid parameter"):
            make_estimator().set_params(gamma=1.0)


class TestNotFitted:
    def test_predict_before_fit(self, small_dataset):
        index = ingest_dataset(small_dataset)
        split = build_splits(index, 0, 0)
        episode = sample_episode(index, split, "novel", 1, numpy_rng_for(0, "e"))
        with pytest.raises(NotFittedError):
            make_estimator().predict(episode)

    def test_score_before_fit(self):
        with pytest.raises(NotFittedError):
            make_estimator().score()


@pytest.fixture(scope="module")
def fitted(small_dataset):
    return make_estimator(seed=2).fit(small_dataset, split_id=0)


class TestFitPredictScore:
    def test_fit_returns_self_and_records_history(self, fitted):
        assert len(fitted.loss_history_) == 4

    def test_predict_shape_and_range(self, fitted, small_dataset):
        episode = sample_episode(
            fitted.index_, fitted.split_, "novel", 1, numpy_rng_for(1, "e")
        )
        labels = fitted.predict(episode)
        assert labels.shape == episode.query.mask.shape
        assert labels.max() <= episode.category.num_parts

    def test_score_in_unit_interval(self, fitted):
        score = fitted.score(episodes=3)
        assert 0.0 <= score <= 1.0

    def test_score_episode(self, fitted):
        episode = sample_episode(
            fitted.index_, fitted.split_, "novel", 1, numpy_rng_for(2, "e")
        )
        assert 0.0 <= fitted.score_episode(episode) <= 1.0

    def test_save_load_reproduces_predictions(self, fitted, tmp_path):
        episode = sample_episode(
            fitted.index_, fitted.split_, "novel", 1, numpy_rng_for(3, "e")
        )
        reference = fitted.predict(episode)
        path = fitted.save(tmp_path / "est.ckpt")
        loaded = FewShotPartSegmenter.load(path)
        np.testing.assert_array_equal(loaded.predict(episode), reference)
        assert loaded.get_params()["design"] == fitted.design
