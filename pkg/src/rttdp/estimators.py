"""scikit-learn style wrappers around the source model, the TTA victim and the poison forge.

These are thin adapters: they validate inputs with sklearn's helpers, expose
``get_params``/``set_params`` and keep the fitted state in trailing-underscore
attributes. The numerical work stays in the core modules.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted, check_random_state

from .data import fit_supervised
from .errors import ContractError, ShapeError
from .forge import AttackObjective, LagrangeState, PoisonBatch, synthesize
from .nn import TRAIN_STATS, ModelState, build_model, predict_proba
from .tta import TtaConfig, Victim


def _check_array(X, min_samples: int = 1) -> np.ndarray:
    """Float array with at least two axes and finite values (images keep their shape)."""
    X = np.asarray(X, dtype=float)
    if X.ndim < 2:
        raise ShapeError(f"expected a 2-D or image batch, got shape {X.shape}")
    if len(X) < min_samples:
        raise ShapeError(f"need at least {min_samples} samples, got {len(X)}")
    if not np.all(np.isfinite(X)):
        raise ContractError("input contains NaN or infinity")
    return X


def _model_of(source) -> ModelState:
    if isinstance(source, SourceClassifier):
        check_is_fitted(source, "model_")
        return source.model_
    if isinstance(source, ModelState):
        return source
    raise ContractError(f"expected a ModelState or fitted SourceClassifier, got {type(source).__name__}")


def _classes_of(source):
    return source.classes_ if isinstance(source, SourceClassifier) else None


class SourceClassifier(ClassifierMixin, BaseEstimator):
    """Supervised source model (``mlp`` for flat features, ``cnn`` for images)."""

    def __init__(self, architecture="auto", epochs=20, batch_size=64, lr=0.05, momentum=0.9,
                 target_acc=None, random_state=0):
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.target_acc = target_acc
        self.random_state = random_state

    def fit(self, X, y):
        X = _check_array(X, min_samples=2)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ShapeError(f"X has {len(X)} rows but y has {len(y)}")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ContractError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        arch = self.architecture
        if arch == "auto":
            arch = "cnn" if X.ndim == 4 else "mlp"
        rs = check_random_state(self.random_state)
        seed = int(rs.randint(0, 2**31 - 1))
        self.model_ = build_model(arch, X.shape[1:], len(self.classes_), seed=seed)
        self.train_accuracy_ = fit_supervised(self.model_, X, codes, epochs=self.epochs,
                                              batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                                              target_acc=self.target_acc, rng=np.random.default_rng(seed))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return predict_proba(self.model_, _check_array(X))

    def predict(self, X):
        codes = np.argmax(self.predict_proba(X), axis=1)
        return self.classes_[codes]


class TestTimeAdapter(BaseEstimator):
    """Online victim: ``partial_fit`` serves and adapts on one unlabeled batch.

    ``fit`` (re)starts from the source weights, so a fresh stream can be
    replayed without building a new estimator.
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, source=None, method="tent-lite", lr=0.01, entropy_threshold=False,
                 data_augmentation=False, ema_update=False, stochastic_restore=False, aug_flip=True,
                 random_state=0):
        self.source = source
        self.method = method
        self.lr = lr
        self.entropy_threshold = entropy_threshold
        self.data_augmentation = data_augmentation
        self.ema_update = ema_update
        self.stochastic_restore = stochastic_restore
        self.aug_flip = aug_flip
        self.random_state = random_state

    def _config(self) -> TtaConfig:
        return TtaConfig(method=self.method, lr=self.lr, entropy_threshold=self.entropy_threshold,
                         data_augmentation=self.data_augmentation, ema_update=self.ema_update,
                         stochastic_restore=self.stochastic_restore, aug_flip=self.aug_flip)

    def fit(self, X=None, y=None):
        seed = int(check_random_state(self.random_state).randint(0, 2**31 - 1))
        self.victim_ = Victim(_model_of(self.source), self._config(), seed=seed)
        self.n_batches_ = 0
        self.last_predictions_ = None
        return self

    def partial_fit(self, X, y=None):
        if not hasattr(self, "victim_"):
            self.fit()
        preds, _ = self.victim_.step(_check_array(X, min_samples=2), labels=y)
        self.last_predictions_ = preds
        self.n_batches_ += 1
        return self

    def predict_proba(self, X):
        """Posteriors of the current online model under the batch's own statistics, without adapting."""
        check_is_fitted(self, "victim_")
        return predict_proba(self.victim_.model, _check_array(X, min_samples=2), mode=TRAIN_STATS)

    def predict(self, X):
        codes = np.argmax(self.predict_proba(X), axis=1)
        classes = _classes_of(self.source)
        return codes if classes is None else classes[codes]


class PoisonForge(TransformerMixin, BaseEstimator):
    """Crafts budget-bounded poisons against a frozen reference model.

    ``transform(X, y)`` returns the poisoned batch; the perturbation itself
    is kept in ``eps_``. Stateful objectives (BLE) carry their running
    confusion estimate across calls until ``fit`` is called again.
    """

    def __init__(self, reference=None, kind="NHE", budget=0.3, step_size=0.01, steps=40, lagrange_rate=0.001,
                 feature_reg=None, reg_reduction="sum", clean_norm="poison", random_state=0):
        self.reference = reference
        self.kind = kind
        self.budget = budget
        self.step_size = step_size
        self.steps = steps
        self.lagrange_rate = lagrange_rate
        self.feature_reg = feature_reg
        self.reg_reduction = reg_reduction
        self.clean_norm = clean_norm
        self.random_state = random_state

    def fit(self, X=None, y=None):
        model = _model_of(self.reference)
        self.objective_ = AttackObjective(self.kind, feature_reg=self.feature_reg)
        self.objective_.reset(model.num_classes)
        self.rng_ = np.random.default_rng(int(check_random_state(self.random_state).randint(0, 2**31 - 1)))
        return self

    def transform(self, X, y=None):
        if not hasattr(self, "objective_"):
            self.fit()
        X = _check_array(X, min_samples=2)
        if X.min() < 0.0 or X.max() > 1.0:
            raise ContractError("poisons live in the unit box; scale inputs to [0, 1] first")
        classes = _classes_of(self.reference)
        if y is None:
            labels = np.zeros(len(X), dtype=np.int64)
        elif classes is not None:
            labels = np.searchsorted(classes, np.asarray(y))
        else:
            labels = np.asarray(y, dtype=np.int64)
        model = _model_of(self.reference)
        batch = PoisonBatch(X, labels, budget=self.budget, step_size=self.step_size, steps=self.steps)
        synthesize(batch, self.objective_, model, LagrangeState.zeros(model.n_bn, rate=self.lagrange_rate),
                   rng=self.rng_, reg_reduction=self.reg_reduction, clean_norm=self.clean_norm)
        self.eps_ = batch.eps
        return batch.poisoned

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)
