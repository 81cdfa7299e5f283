import numpy as np
import pytest
from sklearn.base import clone

from dmlcsr import EdgeLabeler, FaceParser
from dmlcsr.data import build_splits, generate_sample
from dmlcsr.config import SceneConfig
from dmlcsr.edge_labels import binary_edges, category_edges
from dmlcsr.validation import check_images, check_label_maps

TINY = dict(base_width=8, init_epochs=2, cycles=1, cycle_epochs=1, batch_size=4,
            overrides=("model.context_width=32", "model.head_width=16", "model.edge_width=16",
                       "model.ddgcn_node_dim=16", "model.ddgcn_feature_nodes=16", "csr.select_last=2"))


def test_check_images_layouts():
    x = np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32)
    assert check_images(x).shape == (2, 3, 32, 32)
    u8 = (x.transpose(0, 2, 3, 1) * 255).astype(np.uint8)
    assert np.allclose(check_images(u8), x, atol=1 / 255)
    assert check_images(x[0]).shape == (1, 3, 32, 32)


@pytest.mark.parametrize("bad", [
    np.zeros((2, 32, 32, 3), np.float32),       # float must be channel-first
    np.zeros((2, 3, 32, 32), np.uint8),         # uint8 must be channel-last
    np.full((1, 3, 32, 32), 2.0),               # out of range
    np.full((1, 3, 32, 32), np.nan),
    np.zeros((1, 3, 40, 40)),                   # not divisible by 16
    np.zeros((0, 3, 32, 32)),
    np.zeros((3, 32)),
])
def test_check_images_rejects(bad):
    with pytest.raises(ValueError):
        check_images(bad)


def test_check_label_maps():
    y = np.zeros((2, 8, 8), np.uint8)
    assert check_label_maps(y, 11).dtype == np.int64
    for bad, kw in [(np.full((2, 8, 8), 11), {}), (np.full((2, 8, 8), 0.5), {}),
                    (y, {"n": 3}), (y, {"shape": (4, 4)}), (np.zeros((2, 2, 8, 8)), {})]:
        with pytest.raises(ValueError):
            check_label_maps(bad, 11, **kw)


def test_get_params_and_clone():
    est = FaceParser(lr=0.05, cycles=0)
    params = est.get_params()
    assert params["lr"] == 0.05 and params["cycles"] == 0
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    cfg = FaceParser(cycles=0, overrides=("loss.lambda3=2.5",)).make_config()
    assert cfg.csr.K == 0 and cfg.loss.lambda3 == 2.5


def test_unfitted_predict_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        FaceParser().predict(np.zeros((1, 3, 32, 32), np.float32))


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    data = build_splits(6, 3, 0.2, seed=5, config=SceneConfig(image_size=32))
    ckpt = tmp_path_factory.mktemp("ckpt")
    est = FaceParser(**TINY).fit(data.train_images, data.train_labels,
                                 eval_set=(data.val_images, data.val_labels), checkpoint_dir=ckpt)
    return est, data, ckpt


def test_fit_predict_score(fitted):
    est, data, _ = fitted
    pred = est.predict(data.val_images)
    proba = est.predict_proba(data.val_images)
    assert pred.shape == (3, 32, 32) and pred.dtype == np.uint8
    assert proba.shape == (3, 11, 32, 32)
    assert np.allclose(proba.sum(1), 1.0, atol=1e-5)
    assert np.array_equal(proba.argmax(1), pred)
    score = est.score(data.val_images, data.val_labels)
    assert score == pytest.approx(est.best_score_)
    assert 0.0 <= score <= 1.0
    assert set(est.report(data.val_images, data.val_labels)) >= {"mean_f1", "overall_f1", "miou"}


def test_from_checkpoint_matches(fitted):
    est, data, ckpt = fitted
    restored = FaceParser.from_checkpoint(ckpt / "best.bin")
    assert np.array_equal(restored.predict(data.val_images), est.predict(data.val_images))


def test_edge_labeler():
    labels = np.stack([generate_sample(s, SceneConfig(image_size=32)).labels for s in range(3)])
    out = EdgeLabeler().fit_transform(labels)
    assert out.shape == (3, 12, 32, 32)
    for i in range(3):
        assert np.array_equal(out[i, 0], binary_edges(labels[i]))
        assert np.array_equal(out[i, 1:], category_edges(labels[i], 11))
    with pytest.raises(ValueError):
        EdgeLabeler(thickness=0).fit(labels)
