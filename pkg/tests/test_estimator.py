import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from itmn import ITMNDetector, QuantizedDetector
from itmn.synthdata import generate_dataset


@pytest.fixture(scope="module")
def data():
    return generate_dataset(12, seed=31), generate_dataset(6, seed=32)


@pytest.fixture(scope="module")
def fitted(data):
    return ITMNDetector(epochs=1, micro_batch=4, accumulation_steps=1, random_state=2).fit(data[0])


def test_params_and_clone():
    est = ITMNDetector(strategy="visual", epochs=3)
    params = est.get_params()
    assert params["strategy"] == "visual" and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")


def test_unfitted_predict_raises(data):
    with pytest.raises(NotFittedError):
        ITMNDetector().predict(data[1])


def test_fit_predict_transform_score(fitted, data):
    test = data[1]
    dets = fitted.predict(test)
    assert len(dets) == len(test)
    assert all(d.boxes.shape[1] == 4 and len(d.scores) == len(d.boxes) for d in dets)
    w = fitted.transform(test)
    assert w.shape == (len(test), 2) and np.all((w > 0) & (w < 1))
    s = fitted.score(test)
    assert 0.0 <= s <= 1.0
    assert len(fitted.history_) == 1


def test_fit_is_deterministic(fitted, data):
    again = clone(fitted).fit(data[0])
    assert again.to_checkpoint().to_bytes() == fitted.to_checkpoint().to_bytes()


def test_array_input(fitted, data):
    test = data[1]
    visual = np.stack([p.visual for p in test])
    thermal = np.stack([p.thermal for p in test])
    a, b = fitted.predict((visual, thermal)), fitted.predict(test)
    assert all(np.array_equal(x.boxes, y.boxes) for x, y in zip(a, b))


@pytest.mark.parametrize("bad", [
    lambda d: (np.zeros((2, 64, 64, 3), np.float32), np.zeros((2, 64, 64), np.uint8)),
    lambda d: (np.zeros((2, 32, 32, 3), np.uint8), np.zeros((2, 32, 32), np.uint8)),
    lambda d: (np.zeros((2, 64, 64, 3), np.uint8), np.zeros((3, 64, 64), np.uint8)),
])
def test_invalid_input_rejected(fitted, data, bad):
    with pytest.raises(ValueError):
        fitted.predict(bad(data))


def test_invalid_hyperparameters_rejected(data):
    with pytest.raises(ValueError):
        ITMNDetector(strategy="diagonal").fit(data[0])
    with pytest.raises(ValueError):
        ITMNDetector(epochs=-1).fit(data[0])


def test_transform_needs_late_fusion(data):
    est = ITMNDetector(strategy="visual", epochs=0).fit(data[0])
    with pytest.raises(ValueError):
        est.transform(data[1])


def test_quantized_detector(fitted, data):
    q = QuantizedDetector(fitted, finetune_epochs=0).fit(data[0][:4])
    dets = q.predict(data[1])
    assert len(dets) == len(data[1])
    assert q.to_checkpoint().meta["kind"] == "int8"
    assert 0.0 <= q.score(data[1]) <= 1.0
    with pytest.raises(ValueError):
        QuantizedDetector(fitted, rounding="up").fit(data[0][:4])
    with pytest.raises(NotFittedError):
        QuantizedDetector(ITMNDetector()).fit(data[0][:4])
