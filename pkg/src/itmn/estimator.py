"""scikit-learn style wrappers around the detector.

``X`` is always a sequence of :class:`~itmn.synthdata.ImagePair` (or a
:class:`~itmn.synthdata.Dataset`); ground truth travels with the pairs, so
``y`` is accepted for API compatibility and ignored.

>>> from itmn.synthdata import generate_dataset
>>> est = ITMNDetector(epochs=1).fit(generate_dataset(16, seed=0))   # doctest: +SKIP
>>> detections = est.predict(generate_dataset(4, seed=1))            # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .anchors import BoxConfig
from .checkpoint import Checkpoint
from .config import PYRAMIDS
from .evaluation import CONF_THRESHOLD, detect, evaluate_detections
from .fusion import AWARENESS, STRATEGIES, Detector, ModelConfig
from .quant import ROUNDING_MODES, quantize_model
from .synthdata import to_model_input
from .tensor import Tensor, no_grad
from .trainer import DESK_TRAIN, TrainConfig, fit
from .validation import check_choice, check_nonnegative_int, check_pairs


class ITMNDetector(BaseEstimator):
    """Dual-stream pedestrian detector trained from scratch on paired images.

    Parameters mirror :class:`~itmn.fusion.ModelConfig` and
    :class:`~itmn.trainer.TrainConfig`; defaults are the desk-scale presets.
    After :meth:`fit`, ``model_`` holds the trained network and
    ``history_`` the per-epoch loss rows.
    """

    def __init__(self, strategy="late", awareness="both", box_variant="improved", input_size=64, fwn_downsample=2,
                 epochs=DESK_TRAIN.epochs, base_lr=DESK_TRAIN.base_lr, micro_batch=DESK_TRAIN.micro_batch,
                 accumulation_steps=DESK_TRAIN.accumulation_steps, momentum=DESK_TRAIN.momentum,
                 weight_decay=DESK_TRAIN.weight_decay, augment=DESK_TRAIN.augment, gamma=DESK_TRAIN.gamma,
                 alpha=DESK_TRAIN.alpha, conf_threshold=CONF_THRESHOLD, batch_size=16, random_state=0):
        self.strategy = strategy
        self.awareness = awareness
        self.box_variant = box_variant
        self.input_size = input_size
        self.fwn_downsample = fwn_downsample
        self.epochs = epochs
        self.base_lr = base_lr
        self.micro_batch = micro_batch
        self.accumulation_steps = accumulation_steps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.augment = augment
        self.gamma = gamma
        self.alpha = alpha
        self.conf_threshold = conf_threshold
        self.batch_size = batch_size
        self.random_state = random_state

    # -- configuration -----------------------------------------------------
    def _model_config(self) -> ModelConfig:
        check_choice(self.strategy, STRATEGIES, "strategy")
        check_choice(self.awareness, AWARENESS, "awareness")
        check_choice(self.input_size, PYRAMIDS, "input_size")
        pyramid = PYRAMIDS[self.input_size]
        box = BoxConfig(extents=pyramid.level_extents, variant=self.box_variant)
        return ModelConfig(strategy=self.strategy, awareness=self.awareness, pyramid=pyramid, box=box,
                           fwn_downsample=self.fwn_downsample)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(base_lr=self.base_lr, epochs=check_nonnegative_int(self.epochs, "epochs"),
                           micro_batch=self.micro_batch, accumulation_steps=self.accumulation_steps,
                           seed=check_nonnegative_int(self.random_state, "random_state"), momentum=self.momentum,
                           weight_decay=self.weight_decay, augment=self.augment, gamma=self.gamma, alpha=self.alpha)

    # -- estimator API -----------------------------------------------------
    def fit(self, X, y=None):
        mc = self._model_config()
        tc = self._train_config()
        pairs = check_pairs(X, mc.pyramid.input_size)
        model = Detector(mc, seed=tc.seed)
        self.trainer_, self.history_ = fit(tc, pairs, model=model)
        self.model_ = self.trainer_.model
        self.model_.eval()
        return self

    def predict(self, X) -> list:
        """Post-NMS :class:`~itmn.evaluation.Detections`, one per pair."""
        check_is_fitted(self, "model_")
        pairs = check_pairs(X, self.model_.config.pyramid.input_size)
        return detect(self.model_, pairs, self.batch_size, conf_threshold=self.conf_threshold)

    def transform(self, X) -> np.ndarray:
        """Fusion weights ``[N, 2]`` as columns ``(w_c, w_l)``.

        Models without a fusion weight network report the fixed 0.5 they fuse with.
        """
        check_is_fitted(self, "model_")
        pairs = check_pairs(X, self.model_.config.pyramid.input_size)
        if self.model_.config.strategy != "late":
            raise ValueError(f"strategy {self.model_.config.strategy!r} has no fusion weights")
        dtype = next(iter(self.model_.parameters())).dtype
        rows = []
        self.model_.eval()
        with no_grad():
            for start in range(0, len(pairs), self.batch_size):
                v, t = to_model_input(pairs[start : start + self.batch_size], dtype)
                w = self.model_.fusion_weights(Tensor(v), Tensor(t))
                rows.append(np.stack([w.w_c.data.reshape(-1), w.w_l.data.reshape(-1)], axis=1))
        return np.concatenate(rows).astype(np.float64)

    def evaluate(self, X, splits=("all", "day", "night"), mode="log"):
        """Full :class:`~itmn.evaluation.EvalReport` on labelled pairs."""
        pairs = check_pairs(X)
        return evaluate_detections(self.predict(pairs), pairs, splits, mode)

    def score(self, X, y=None) -> float:
        """1 - log-average miss rate over all pairs (higher is better)."""
        return 1.0 - self.evaluate(X, ("all",)).fields["MR (All)"]

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "model_")
        return self.trainer_.checkpoint()


class QuantizedDetector(BaseEstimator):
    """Int8 post-training quantization of a fitted :class:`ITMNDetector`.

    ``fit`` calibrates activation ranges on ``X`` (and fine-tunes with
    simulated quantization for ``finetune_epochs``); ``predict`` then runs
    the integer kernels, or float-simulated quantization with
    ``inference="fake"``.
    """

    def __init__(self, detector=None, rounding="half-even", finetune_epochs=5, inference="int", batch_size=16):
        self.detector = detector
        self.rounding = rounding
        self.finetune_epochs = finetune_epochs
        self.inference = inference
        self.batch_size = batch_size

    def fit(self, X, y=None):
        if self.detector is None:
            raise ValueError("QuantizedDetector needs a fitted ITMNDetector")
        check_is_fitted(self.detector, "model_")
        check_choice(self.rounding, ROUNDING_MODES, "rounding")
        check_choice(self.inference, ("int", "fake"), "inference")
        pairs = check_pairs(X, self.detector.model_.config.pyramid.input_size)
        epochs = check_nonnegative_int(self.finetune_epochs, "finetune_epochs")
        self.qmodel_ = quantize_model(self.detector.to_checkpoint(), pairs, self.rounding, epochs,
                                      batch_size=self.batch_size)
        return self

    def predict(self, X) -> list:
        check_is_fitted(self, "qmodel_")
        pairs = check_pairs(X, self.qmodel_.config.pyramid.input_size)
        self.qmodel_.use(self.inference)
        return detect(self.qmodel_, pairs, self.batch_size, conf_threshold=self.detector.conf_threshold)

    def score(self, X, y=None) -> float:
        pairs = check_pairs(X)
        return 1.0 - evaluate_detections(self.predict(pairs), pairs, ("all",)).fields["MR (All)"]

    def to_checkpoint(self) -> Checkpoint:
        check_is_fitted(self, "qmodel_")
        return self.qmodel_.to_checkpoint()
