"""scikit-learn compatible front end for magnitude-pruned MLP regression."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import model_io
from .exceptions import ConfigurationError
from .nn_core import TrainingParams, forward, init_model, mlp_specs, train
from .pruning import (
    CONSTANT,
    DYNAMIC,
    PruneRunConfig,
    PruningSchedule,
    achieved_sparsity,
    prunable_names,
    run_pruned_training,
)


class PrunedMLPRegressor(RegressorMixin, BaseEstimator):
    """Dense relu MLP trained with Adam on MAE, pruned by weight magnitude.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the relu hidden layers. The identity output layer is sized
        from ``y``.
    schedule : {"dynamic", "constant"} or None
        Pruning schedule kind. ``None`` trains without pruning.
    initial_sparsity, final_sparsity : float
        Ramp endpoints of the dynamic schedule. A constant schedule holds
        ``final_sparsity`` over the whole window.
    begin_epoch, end_epoch, frequency : int
        Pruning window ``[begin_epoch, end_epoch]`` and mask update interval.
    excluded_layers : tuple of str
        Layer names never pruned (``dense_0``, ``dense_1``, ..., ``head``).
    random_state : int
        Seed for the weight initialiser. Only integers are accepted since
        initialisation uses the package's own generator.
    """

    def __init__(
        self,
        hidden_layer_sizes=(64, 64),
        schedule=DYNAMIC,
        initial_sparsity=0.0,
        final_sparsity=0.5,
        begin_epoch=0,
        end_epoch=60,
        frequency=1,
        excluded_layers=(),
        epochs=80,
        batch_size=128,
        learning_rate=1e-3,
        patience=3,
        factor=0.5,
        min_lr=1e-5,
        shuffle_seed=None,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.schedule = schedule
        self.initial_sparsity = initial_sparsity
        self.final_sparsity = final_sparsity
        self.begin_epoch = begin_epoch
        self.end_epoch = end_epoch
        self.frequency = frequency
        self.excluded_layers = excluded_layers
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.shuffle_seed = shuffle_seed
        self.random_state = random_state

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.target_tags.multi_output = True
        return tags

    def _training_params(self):
        return TrainingParams(
            lr=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            patience=self.patience, factor=self.factor, min_lr=self.min_lr,
            shuffle_seed=self.shuffle_seed,
        )

    def _pruning_schedule(self):
        if self.schedule is None:
            return None
        if self.schedule == CONSTANT:
            return PruningSchedule.constant(
                self.final_sparsity, self.begin_epoch, self.end_epoch, self.frequency)
        if self.schedule == DYNAMIC:
            return PruningSchedule.dynamic(
                self.initial_sparsity, self.final_sparsity,
                self.begin_epoch, self.end_epoch, self.frequency)
        raise ConfigurationError(f"unknown schedule {self.schedule!r}")

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; validation MAE drives the plateau scheduler.

        Without ``X_val``/``y_val`` the training set doubles as validation set.
        """
        if not isinstance(self.random_state, (int, np.integer)):
            raise ConfigurationError("random_state must be an integer seed")
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        self._y_1d = y.ndim == 1
        y2 = y.reshape(len(y), -1)
        if X_val is None:
            X_val, y_val = X, y2
        else:
            X_val, y_val = check_X_y(X_val, y_val, multi_output=True, y_numeric=True,
                                     dtype=np.float64)
            y_val = y_val.reshape(len(y_val), -1)
            if X_val.shape[1] != X.shape[1] or y_val.shape[1] != y2.shape[1]:
                raise ValueError("validation data does not match training data dimensions")

        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y2.shape[1]
        params = self._training_params()
        schedule = self._pruning_schedule()
        specs = mlp_specs(X.shape[1], tuple(self.hidden_layer_sizes), y2.shape[1])
        model = init_model(specs, int(self.random_state))
        data = (X, y2, X_val, y_val)
        if schedule is None:
            model, curve = train(model, data, params)
            masks = {}
        else:
            config = PruneRunConfig(schedule, params.epochs, tuple(self.excluded_layers))
            model, masks, curve = run_pruned_training(model, config, data, params)
        self.model_ = model
        self.masks_ = masks
        self.validation_curve_ = curve
        self.sparsity_ = achieved_sparsity(model, prunable_names(model, self.excluded_layers))
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, but {type(self).__name__} is expecting "
                f"{self.n_features_in_} features as input")
        out = forward(self.model_, X).astype(np.float64)
        return out.ravel() if self._y_1d else out

    def export(self, variant="pruned"):
        """Serialized bytes of the fitted model: ``pruned``, ``sparse`` or ``quantized``."""
        check_is_fitted(self, "model_")
        if variant == "pruned":
            return model_io.serialize_dense(self.model_)
        if variant == "sparse":
            return model_io.serialize_sparse(self.model_)
        if variant == "quantized":
            return model_io.serialize_quantized(model_io.quantize(self.model_))
        raise ValueError(f"unknown variant {variant!r}")
