from __future__ import annotations

import numpy as np
import pytest
import torch

from signsynth.classifier import (CROP_SIZE, CropSet, ToyClassifier, crops_from_manifest, extract_features, predict,
                                  predict_logits, softmax_head, train_toy_classifier, weights_hash)
from signsynth.core import TaxonomyError, resize
from signsynth.metrics import accuracy
from signsynth.toy import make_icon, write_toy_corpus


def icon_crops(classes, per_class, rng) -> CropSet:
    """Noisy, slightly shifted renderings of toy icons over gray."""
    images, labels = [], []
    for c in classes:
        icon = make_icon(c, 48)
        for _ in range(per_class):
            img = np.full((CROP_SIZE, CROP_SIZE, 3), 0.5, np.float32)
            dx, dy = (int(v) for v in rng.integers(4, 13, 2))
            a = icon.alpha[..., None]
            img[dy:dy + 48, dx:dx + 48] = a * icon.rgb + (1 - a) * img[dy:dy + 48, dx:dx + 48]
            images.append(np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1).astype(np.float32))
            labels.append(c)
    return CropSet(np.stack(images), np.array(labels))


def test_shapes_and_feature_width():
    model = ToyClassifier(num_classes=7, widths=(4, 8, 12))
    x = np.zeros((3, CROP_SIZE, CROP_SIZE, 3), np.float32)
    assert extract_features(model, x).shape == (3, 12)
    assert predict_logits(model, x).shape == (3, 7)
    with pytest.raises(ValueError):
        predict(model, np.zeros((1, 32, 32, 3)))


def test_five_class_toy_set_fits(rng):
    data = icon_crops(range(5), 20, rng)
    model, index = train_toy_classifier(data, num_classes=5, steps=150, seed=0, widths=(8, 16, 32))
    assert accuracy(predict(model, data.images), data.labels) > 0.9
    assert index.features.shape == (100, model.feature_dim)


def test_training_is_deterministic(rng):
    data = icon_crops(range(3), 4, rng)
    hashes = {weights_hash(train_toy_classifier(data, 3, steps=5, seed=2, widths=(4, 4, 4))[0]) for _ in range(2)}
    assert len(hashes) == 1
    other = train_toy_classifier(data, 3, steps=5, seed=3, widths=(4, 4, 4))[0]
    assert weights_hash(other) not in hashes


def test_labels_outside_head_rejected(rng):
    data = icon_crops([0, 6], 1, rng)
    with pytest.raises(TaxonomyError):
        train_toy_classifier(data, num_classes=5, steps=1)
    with pytest.raises(ValueError):
        train_toy_classifier(CropSet(np.zeros((0, 64, 64, 3), np.float32), np.zeros(0, np.int64)), steps=1)


def test_masked_prediction_stays_in_allowed_set(rng):
    model = ToyClassifier(num_classes=6, widths=(4, 4, 4))
    x = rng.random((10, CROP_SIZE, CROP_SIZE, 3)).astype(np.float32)
    assert set(predict(model, x, allowed=[1, 4]).tolist()) <= {1, 4}
    feats = extract_features(model, x)
    head = softmax_head(model, allowed=[2])
    assert np.all(np.argmax(head(feats), axis=1) == 2)
    # the unmasked head agrees with the full forward pass
    with torch.no_grad():
        assert np.allclose(softmax_head(model)(feats), predict_logits(model, x), atol=1e-5)


def test_crops_from_manifest(tmp_path):
    corpus = write_toy_corpus(tmp_path, n_train=2, n_test=1, seed=0)
    crops = crops_from_manifest(corpus.train, corpus.root)
    assert len(crops) == corpus.train.sign_count and crops.images.shape[1:] == (64, 64, 3)
    assert crops.images.dtype == np.float32
    both = CropSet.concat([crops, crops])
    assert len(both) == 2 * len(crops)


def test_resize_to_crop_size_preserves_constant_image():
    img = np.full((10, 30, 3), 0.25, np.float32)
    assert np.allclose(resize(img, CROP_SIZE, CROP_SIZE), 0.25)
