import json

import numpy as np
import pytest

from pavc.augment import ConditionLabel, apply_darkness, apply_rain, AugmentParams
from pavc.classifier import (ClassifierModel, ConditionClassifier, ConfusionMatrix, FeatureExtractor,
                             classify, confusion_from_labels, evaluate, extract_features, fit,
                             split_counts, timed_classify, train_val_test_split)
from pavc.errors import ChannelError, CoverageError, EmptyDatasetError
from pavc.media import Frame
from pavc.scenes import sunny_dataset

# distinct lightness per class; the features are hue-blind
COLORS = [(v, v, v) for v in (0, 40, 80, 120, 160, 200, 240)]


def constant_set():
    frames = [Frame(np.full((16, 16, 3), c, np.uint8)) for c in COLORS]
    return [(f, code) for code, f in enumerate(frames) for _ in range(2)]


def test_black_frame_features():
    fv = extract_features(np.zeros((20, 30, 3), np.uint8))
    assert fv.mean_lightness == 0 and fv.edge_density == 0
    assert sum(fv.lightness_histogram) == pytest.approx(1.0, abs=1e-9)
    assert np.all(np.isfinite(fv.to_array()))


def test_features_need_rgb():
    with pytest.raises(ChannelError):
        extract_features(np.zeros((8, 8), np.uint8))


def test_features_comparable_across_sizes():
    import cv2

    big = sunny_dataset(1, 256, seed=2)[0][0].pixels
    small = cv2.resize(big, (128, 128), interpolation=cv2.INTER_AREA)
    a, b = extract_features(big), extract_features(small)
    assert abs(a.mean_lightness - b.mean_lightness) < 0.01
    assert np.abs(np.subtract(a.lightness_histogram, b.lightness_histogram)).sum() < 0.1


def test_darkening_lowers_mean_lightness():
    f = sunny_dataset(1, 128, seed=4)[0][0]
    base = extract_features(f).mean_lightness
    for level in ("light", "medium", "heavy"):
        assert extract_features(apply_darkness(f, level)).mean_lightness < base


def test_rain_raises_streak_energy():
    for f, _ in sunny_dataset(3, 256, seed=6):
        before = extract_features(f).vertical_streak_energy
        for level in ("drizzle", "moderate", "torrential"):
            after = extract_features(apply_rain(f, level, AugmentParams(seed=1))).vertical_streak_energy
            assert after > before


def test_separable_degenerate_training_set():
    data = constant_set()
    model = fit(data)
    for frame, code in data:
        assert classify(model, frame)[0] == code


def test_fit_is_order_free():
    data = constant_set()
    a = fit(data)
    b = fit(list(reversed(data)))
    assert np.allclose(a.centroids, b.centroids, rtol=0, atol=1e-12)
    assert np.allclose(a.weights, b.weights, rtol=1e-12)


def test_missing_class_is_named():
    data = [d for d in constant_set() if d[1] != 5]
    with pytest.raises(CoverageError, match="moderate-rain"):
        fit(data)


def test_classify_returns_seven_scores_and_is_repeatable(small_model, clip):
    label, scores = classify(small_model, clip[0])
    assert scores.shape == (7,)
    label2, scores2 = classify(small_model, clip[0])
    assert label == label2 and np.array_equal(scores, scores2)
    _, _, seconds = timed_classify(small_model, clip[0])
    assert seconds > 0


def test_centroid_frame_classifies_as_its_class():
    model = fit(constant_set())
    assert classify(model, np.full((40, 40, 3), COLORS[3], np.uint8))[0] == 3


def test_ties_go_to_lowest_code():
    model = fit(constant_set())
    tied = ClassifierModel(np.zeros_like(model.centroids), model.weights, model.priors)
    assert classify(tied, np.zeros((8, 8, 3), np.uint8))[0] == ConditionLabel.SUNNY


def test_two_fits_agree(small_model):
    ds = sunny_dataset(3, 96, seed=11)
    for f, _ in ds:
        assert classify(small_model, f)[0] == classify(small_model, f)[0]


def test_split_counts():
    assert split_counts(2387) == (1790, 358, 239)
    tr, va, te = train_val_test_split(list(range(2387)), seed=1)
    assert (len(tr), len(va), len(te)) == (1790, 358, 239)
    assert sorted(tr + va + te) == list(range(2387))


def test_confusion_bookkeeping():
    y = [0, 1, 2, 3, 4, 5, 6, 0, 1, 2]
    pred = list(y)
    pred[4] = 5
    cm = confusion_from_labels(y, pred)
    assert np.trace(cm.counts) == 9 and cm.accuracy == 0.9
    assert cm.counts.sum(axis=1).tolist() == [2, 2, 2, 1, 1, 1, 1]
    perfect = confusion_from_labels(y, y)
    assert perfect.is_diagonal()


def test_evaluate_matches_classify_calls():
    data = constant_set()
    model = fit(data)
    cm = evaluate(model, data)
    assert cm.is_diagonal() and cm.accuracy == 1.0
    with pytest.raises(EmptyDatasetError):
        evaluate(model, [])


def test_model_json_round_trip(tmp_path, small_model):
    path = small_model.save(tmp_path / "m.json")
    back = ClassifierModel.load(path)
    assert json.loads(path.read_text())["version"] == back.version
    f = np.full((10, 10, 3), 90, np.uint8)
    assert np.array_equal(classify(back, f)[1], classify(small_model, f)[1])


def test_confusion_csv(tmp_path):
    cm = confusion_from_labels([0, 1], [0, 1])
    text = cm.write_csv(tmp_path / "cm.csv").read_text().splitlines()
    assert text[0].startswith("true\\predicted,sunny") and len(text) == 8


def test_estimator_api(small_model):
    data = constant_set()
    X = [f.pixels for f, _ in data]
    y = [c for _, c in data]
    clf = ConditionClassifier().fit(X, y)
    assert clf.score(X, y) == 1.0
    assert clf.decision_function(X).shape == (len(X), 7)
    assert FeatureExtractor().fit_transform(X).shape == (len(X), 20)
    wrapped = ConditionClassifier.from_model(small_model)
    assert wrapped.predict([X[0]]).shape == (1,)
