import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from dualid.base import ValidationError
from dualid.data.synth import CompositionParams, render_face, sample_dataset
from dualid.face import (AttributeClassifier, FaceEncoder, cosine_rows, degrade, identity_similarity,
                         train_attribute_classifier, train_encoder)


@pytest.fixture(scope="module")
def small_data():
    return sample_dataset(6, 8, seed=0)


@pytest.fixture(scope="module")
def small_encoder(small_data):
    return train_encoder(small_data, epochs=3, seed=0, width=8)


def test_similarity_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert identity_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert identity_similarity(v, -v) == pytest.approx(-1.0, abs=1e-12)
    assert identity_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0


def test_similarity_symmetric_and_scale_invariant():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = rng.standard_normal(32), rng.standard_normal(32)
        k = float(10 ** rng.uniform(-3, 3))
        s = identity_similarity(a, b)
        assert abs(s - identity_similarity(b, a)) < 1e-6
        assert abs(s - identity_similarity(k * a, b)) < 1e-6
        assert -1.0 <= s <= 1.0


def test_zero_vector_similarity_warns_and_is_zero():
    with pytest.warns(RuntimeWarning, match="zero-norm"):
        assert identity_similarity(np.zeros(4), np.ones(4)) == 0.0
    with pytest.raises(ValidationError):
        identity_similarity(np.ones(3), np.ones(4))


def test_cosine_rows_batch():
    a = np.eye(3)
    np.testing.assert_allclose(cosine_rows(a, a), 1.0)


def test_minimum_viable_dataset_trains():
    ds = sample_dataset(2, 4, seed=1)
    enc = train_encoder(ds, epochs=1, seed=0, width=4)
    assert enc.transform(ds.images).shape == (8, 32)


def test_degenerate_dataset_rejected():
    ds = sample_dataset(2, 3, seed=1)
    with pytest.raises(ValidationError):
        train_encoder(ds, epochs=1)
    with pytest.raises(ValidationError):
        FaceEncoder(epochs=1).fit(np.zeros((8, 32, 32, 3)), np.zeros(8))
    with pytest.raises(ValidationError):
        FaceEncoder(epochs=1).fit(np.zeros((8, 32, 32, 3)), np.zeros(7))


def test_same_seed_bit_identical(small_data, small_encoder, tmp_path):
    other = train_encoder(small_data, epochs=3, seed=0, width=8)
    small_encoder.save(tmp_path / "a.uidc")
    other.save(tmp_path / "b.uidc")
    assert (tmp_path / "a.uidc").read_bytes() == (tmp_path / "b.uidc").read_bytes()


def test_frozen_and_round_trip(small_data, small_encoder, tmp_path):
    assert all(p.frozen for p in small_encoder.net_.parameters())
    small_encoder.save(tmp_path / "e.uidc")
    back = FaceEncoder.load(tmp_path / "e.uidc")
    assert all(p.frozen for p in back.net_.parameters())
    assert np.array_equal(back.transform(small_data.images), small_encoder.transform(small_data.images))
    assert back.separation_margin_ == small_encoder.separation_margin_
    assert np.array_equal(back.classes_, small_encoder.classes_)


def test_embed_face_contract(small_data, small_encoder):
    img = small_data.images[0]
    a, b = small_encoder.embed_face(img), small_encoder.embed_face(img)
    assert a.shape == (32,) and np.array_equal(a, b)
    assert np.isfinite(small_encoder.embed_face(np.zeros((32, 32, 3)))).all()
    with pytest.raises(ValidationError):
        small_encoder.embed_face(np.zeros((16, 16, 3)))
    with pytest.raises(ValueError):
        small_encoder.transform(np.full((1, 32, 32, 3), np.nan))


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        FaceEncoder().transform(np.zeros((1, 32, 32, 3)))


def test_separation_is_recorded(small_encoder):
    assert small_encoder.separation_margin_ == pytest.approx(
        small_encoder.intra_similarity_ - small_encoder.inter_similarity_)


def test_get_params_round_trip():
    enc = FaceEncoder(width=4, epochs=2)
    assert FaceEncoder(**enc.get_params()).get_params() == enc.get_params()


@pytest.fixture(scope="module")
def trained_encoder():
    ds = sample_dataset(64, 32, seed=3)
    per_id = {}
    for i, ident in enumerate(ds.identity_ids):
        per_id.setdefault(int(ident), []).append(i)
    test_idx = np.array([i for v in per_id.values() for i in v[-4:]])
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    enc = FaceEncoder(epochs=20, seed=0).fit(ds.images[train_idx], ds.identity_ids[train_idx])
    return enc, ds, test_idx


def test_trained_encoder_heldout_image_accuracy(trained_encoder):
    enc, ds, test_idx = trained_encoder
    acc = np.mean(enc.predict(ds.images[test_idx]) == ds.identity_ids[test_idx])
    assert acc > 0.9


def test_same_identity_more_similar_than_different(trained_encoder):
    enc, ds, _ = trained_encoder
    assert enc.separation_margin_ > 0
    rng = np.random.default_rng(0)
    same, diff = [], []
    for _ in range(100):
        i, j = rng.choice(list(ds.identities), 2, replace=False)
        bg = rng.choice(["red", "green", "blue", "gray"], 2, replace=False)
        fa = enc.embed_face(render_face(ds.identities[i], CompositionParams(bg[0])).pixels)
        fb = enc.embed_face(render_face(ds.identities[i], CompositionParams(bg[1])).pixels)
        fc = enc.embed_face(render_face(ds.identities[j], CompositionParams(bg[0])).pixels)
        same.append(identity_similarity(fa, fb))
        diff.append(identity_similarity(fa, fc))
    assert np.mean(same) > np.mean(diff)


def test_attribute_classifier_heldout_accuracy():
    ds = sample_dataset(320, 16, seed=4)
    clf = train_attribute_classifier(ds, epochs=6, seed=0)
    test = sample_dataset(32, 8, seed=5)
    assert clf.score(test.images, test.attribute_labels()) > 0.95
    pred = clf.predict(test.images[:3])
    assert set(pred) == {"background", "style", "accessory", "framing"}
    with pytest.raises(ValidationError):
        AttributeClassifier(epochs=1).fit(ds.images, {"background": np.zeros(len(ds))})


def test_degrade_cutouts_use_the_corner_colour():
    ds = sample_dataset(4, 4, seed=0)
    out = degrade(ds.images, np.random.default_rng(0), 0.0, 0.0, cutout_px=10)
    assert out.shape == ds.images.shape and out.dtype == np.float32
    changed = np.any(out != ds.images, axis=-1)
    assert changed.any()
    corner = ds.images[:, :1, :1]
    assert np.allclose(np.where(changed[..., None], out, corner), np.broadcast_to(corner, out.shape))
    assert np.array_equal(degrade(ds.images, np.random.default_rng(0), 0.0, 0.0), ds.images)
