import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cddmsl.estimator import CDDMSLDetector, check_images, check_labels
from cddmsl.synthdomains import ObjectInstance, StyleSpec, render, sample_scene, GeneratorConfig


def _corpus(n, style_params, start=0):
    gen = GeneratorConfig(canvas=(64, 64), max_box=28)
    scenes = [sample_scene(start + i, gen) for i in range(n)]
    return [np.stack([render(s, StyleSpec(k, p)).image for s in scenes]) for k, p in style_params] + \
        [[list(s.objects) for s in scenes]]


@pytest.fixture(scope="module")
def fitted():
    X, Xb, y = _corpus(12, [("A", {}), ("B", {"channel_perm": (1, 2, 0)})])
    est = CDDMSLDetector(burnup_steps=4, joint_steps=4, batch_size=4, lr=0.01)
    return est.fit(X, y, X_stylized={"B": Xb}), X, y


def test_params_round_trip_and_clone():
    est = CDDMSLDetector(method="dva", tau=0.2)
    params = est.get_params()
    assert params["method"] == "dva" and params["tau"] == 0.2
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(omega=0.5).omega == 0.5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        CDDMSLDetector().predict(np.zeros((1, 64, 64, 3)))


def test_image_validation():
    with pytest.raises(ValueError, match="shape"):
        check_images(np.zeros((2, 8, 8)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        check_images(np.full((1, 8, 8, 3), 2.0))
    with pytest.raises(ValueError):
        check_images(np.full((1, 8, 8, 3), np.nan))
    assert check_images(np.full((1, 2, 2, 3), 255, dtype=np.uint8)).max() == 1.0


def test_label_validation():
    ok = [[ObjectInstance((0, 0, 10, 10), 1)]]
    assert check_labels([[((0, 0, 10, 10), 1)]], 1, (32, 32), 4) == ok
    with pytest.raises(ValueError, match="one label list"):
        check_labels(ok, 2, (32, 32), 4)
    with pytest.raises(ValueError, match="canvas"):
        check_labels([[((0, 0, 40, 10), 1)]], 1, (32, 32), 4)
    with pytest.raises(ValueError, match="num_classes"):
        check_labels([[((0, 0, 10, 10), 5)]], 1, (32, 32), 4)
    with pytest.raises(ValueError, match="no objects"):
        check_labels([[]], 1, (32, 32), 4)


def test_fit_requires_stylized_views():
    X, y = _corpus(4, [("A", {})])
    with pytest.raises(ValueError, match="X_stylized"):
        CDDMSLDetector(burnup_steps=1, joint_steps=1).fit(X, y)
    with pytest.raises(ValueError, match="row-aligned"):
        CDDMSLDetector(burnup_steps=1, joint_steps=1).fit(X, y, X_stylized=X[:2])


def test_source_only_fits_without_stylized_views():
    X, y = _corpus(4, [("A", {})])
    est = CDDMSLDetector(method="source_only", burnup_steps=2, joint_steps=2, batch_size=2).fit(X, y)
    assert est.state_.step == 4


def test_fit_predict_score_transform(fitted):
    est, X, y = fitted
    assert est.n_features_in_ == 64 * 64 * 3 and est.canvas_ == (64, 64)
    dets = est.predict(X[:3])
    assert len(dets) == 3
    for per_image in dets:
        for d in per_image:
            assert 0 <= d.category < 4 and d.confidence >= est.score_threshold
    score = est.score(X, y)
    assert 0.0 <= score <= 1.0
    feats = est.transform(X[:5])
    assert feats.shape == (5, 64)
    assert np.allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-5)


def test_predict_rejects_other_canvas(fitted):
    est, _, _ = fitted
    with pytest.raises(ValueError, match="fit on"):
        est.predict(np.zeros((1, 32, 32, 3)))


def test_fit_is_deterministic(fitted):
    est, X, y = fitted
    _, Xb, _ = _corpus(12, [("A", {}), ("B", {"channel_perm": (1, 2, 0)})])
    again = clone(est).fit(X, y, X_stylized={"B": Xb})
    assert np.array_equal(again.transform(X[:4]), est.transform(X[:4]))
