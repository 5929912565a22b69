"""scikit-learn compatible wrapper around the network and trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import DataConfig, TrainConfig
from .data import SequenceSet
from .loss import LossConfig
from .network import PPNetConfig
from .tensor import no_grad
from .train import evaluate_next_frame, model_from_checkpoint, train
from .validation import check_frame_shape, check_sequences


class PPNetPredictor(BaseEstimator):
    """Next-frame video predictor.

    ``fit`` takes videos shaped (N, T, C, H, W) (or (N, T, H, W)) with pixel
    values in [0, 1]. ``predict`` continues each video ``horizon`` frames
    past its end. ``score`` is the mean teacher-forced next-frame SSIM.

    Parameters mirror the flat training config; see ``ppnet.config``.
    """

    def __init__(self, num_layers=4, channels=(16, 32, 64, 128), kernel_size=3, schedule="pyramidal",
                 upward_content="error_and_input", upward_weighting="raw", p=1000.0, lambda0=0.5,
                 detach_weight=True, layer_scope="layer0_only", epochs=20, learning_rate=2e-4,
                 batch_size=4, clip_norm=5.0, random_state=0):
        self.num_layers = num_layers
        self.channels = channels
        self.kernel_size = kernel_size
        self.schedule = schedule
        self.upward_content = upward_content
        self.upward_weighting = upward_weighting
        self.p = p
        self.lambda0 = lambda0
        self.detach_weight = detach_weight
        self.layer_scope = layer_scope
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _make_config(self, X: np.ndarray) -> TrainConfig:
        net = PPNetConfig(num_layers=self.num_layers, channels=list(self.channels),
                          kernel_size=self.kernel_size, input_channels=X.shape[2],
                          input_size=tuple(X.shape[3:]), schedule=self.schedule,
                          upward_content=self.upward_content, upward_weighting=self.upward_weighting,
                          p=self.p, lambda0=self.lambda0)
        loss = LossConfig(p=self.p, lambda0=self.lambda0, detach_weight=self.detach_weight,
                          layer_scope=self.layer_scope)
        data = DataConfig(count=X.shape[0], seq_len=X.shape[1], heldout=0)
        return TrainConfig(net=net, loss=loss, data=data, epochs=self.epochs,
                           learning_rate=self.learning_rate, batch_size=self.batch_size,
                           seed=int(self.random_state or 0), clip_norm=self.clip_norm)

    def fit(self, X, y=None):
        X = check_sequences(X)
        config = self._make_config(X)
        self.checkpoint_, self.log_ = train(config, SequenceSet(X, {"source": "array"}))
        self.model_ = model_from_checkpoint(self.checkpoint_)
        self.config_ = config
        self.n_frames_in_ = X.shape[1]
        return self

    def _check_input(self, X, min_len=2):
        check_is_fitted(self, "model_")
        X = check_sequences(X, min_len=min_len)
        cfg = self.config_.net
        check_frame_shape(X, cfg.input_channels, cfg.input_size)
        return X

    def predict(self, X, horizon: int = 1) -> np.ndarray:
        """Closed-loop continuation, shaped (N, horizon, C, H, W)."""
        X = self._check_input(X)
        out = self.model_.rollout(X.transpose(1, 0, 2, 3, 4), horizon)
        return out.transpose(1, 0, 2, 3, 4)

    def predict_next(self, X) -> np.ndarray:
        """Teacher-forced predictions: entry ``t`` predicts frame ``t + 1``."""
        X = self._check_input(X)
        with no_grad():
            trace = self.model_.forward_sequence(X.transpose(1, 0, 2, 3, 4))
        return trace.next_frame_predictions().transpose(1, 0, 2, 3, 4)

    def score(self, X, y=None) -> float:
        X = self._check_input(X, min_len=3)
        return evaluate_next_frame(self.model_, SequenceSet(X), batch_size=self.batch_size)["ssim"]
