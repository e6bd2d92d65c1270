import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from conftest import TINY
from satdino.estimators import LinearProbe, SatDINO, WeightedKNNClassifier, check_images
from satdino.evaluation import FeatureMatrix, knn_classify
from satdino.exceptions import DataError

ARCH = {"embed_dim": 16, "depth": 1, "heads": 2, "global_out": 32, "local_out": 16,
        "n_local": 2, "batch_size": 6, "epochs": 1}
HEAD = {k: v for k, v in TINY.items() if k.startswith("head.") or k == "optim.warmup_epochs"}


def test_get_params_and_clone():
    est = SatDINO(gamma=0.0, overrides={"views.strategy": "random"})
    params = est.get_params()
    assert params["gamma"] == 0.0 and params["overrides"] == {"views.strategy": "random"}
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert clone(WeightedKNNClassifier(n_neighbors=3)).n_neighbors == 3


def test_fit_transform_and_gsd(tiny_dataset, tmp_path):
    samples = tiny_dataset.load_samples("train")
    X = [s.image for s in samples]
    gsd = [s.gsd for s in samples]
    est = SatDINO(**ARCH, overrides=HEAD)
    with pytest.raises(NotFittedError):
        est.transform(X)
    est.fit(X, gsd=gsd, run_dir=tmp_path)
    feats = est.transform(X)
    assert feats.shape == (len(X), 16) and np.isfinite(feats).all()
    assert est.transform(X, scale=0.5).shape == feats.shape
    assert est.predict_gsd(X[:3]).shape == (3,)
    assert len(est.history_) == est.state_.step

    loaded = SatDINO.from_checkpoint(tmp_path)
    np.testing.assert_array_equal(loaded.transform(X), feats)
    assert loaded.embed_dim == 16


def test_input_validation():
    with pytest.raises(DataError):
        check_images(np.zeros((2, 8, 8)))
    with pytest.raises(DataError):
        check_images([np.zeros((8, 8, 3), np.float32)])
    with pytest.raises(DataError):
        check_images([])
    with pytest.raises(DataError):
        SatDINO(**ARCH).fit([np.zeros((32, 32, 3), np.uint8)], gsd=-1.0)


def test_knn_estimator_matches_functional_knn():
    gen = np.random.default_rng(4)
    xt, yt = gen.normal(size=(80, 6)), gen.integers(0, 4, 80)
    xq, yq = gen.normal(size=(20, 6)), gen.integers(0, 4, 20)
    clf = WeightedKNNClassifier(n_neighbors=7).fit(xt, yt + 10)
    ref = knn_classify(FeatureMatrix(xt, yt), FeatureMatrix(xq, yq), k=7, n_classes=4)
    np.testing.assert_array_equal(clf.predict(xq), ref.predictions + 10)
    np.testing.assert_allclose(clf.predict_proba(xq).sum(axis=1), 1.0)
    assert clf.score(xq, yq + 10) == ref.top1


def test_linear_probe_estimator():
    gen = np.random.default_rng(0)
    y = np.repeat(["a", "b", "c"], 20)
    x = np.eye(3)[np.repeat(np.arange(3), 20)] * 5 + gen.normal(0, 0.1, (60, 3))
    probe = LinearProbe(epochs=200, lr=1e-2).fit(x, y)
    assert probe.score(x, y) == 1.0
    assert probe.decision_function(x).shape == (60, 3)
    with pytest.raises(DataError):
        probe.fit(x, y[:5])
