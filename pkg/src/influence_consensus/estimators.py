"""scikit-learn style wrappers around the selection pipeline.

The pieces compose like ordinary estimators::

    proj = RandomProjector(out_dim=64, seed=0).fit(train_grads)
    scorer = InfluenceScorer().fit(proj.transform(val_grads), val_task_labels)
    scores = scorer.transform(proj.transform(train_grads))      # N x K
    keep = ConsensusSelector(ratio=0.2).fit(scores).get_support()
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .aggregation import STRATEGIES, check_ratio
from .datastore import FeatureShard, ScoreTable
from .influence import stream_task_scores
from .projection import DESK_OUT_DIM, ProjectionSpec, normalize_rows, project_block
from .selection import BASELINES, select
from .synthbench import ModelParams, per_example_gradients, sgd, softmax


class RandomProjector(TransformerMixin, BaseEstimator):
    """Seeded Rademacher projection to ``out_dim`` features, optionally unit-normalized.

    Fitting only records the input width; the projection itself is a pure
    function of ``(seed, n_features_in_, out_dim)``.
    """

    def __init__(self, out_dim: int = DESK_OUT_DIM, seed: int = 0, normalize: bool = True, n_workers: Optional[int] = None):
        self.out_dim = out_dim
        self.seed = seed
        self.normalize = normalize
        self.n_workers = n_workers

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        self.n_features_in_ = X.shape[1]
        self.spec_ = ProjectionSpec(seed=self.seed, in_dim=self.n_features_in_, out_dim=self.out_dim)
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, projector was fit with {self.n_features_in_}")
        out = project_block(self.spec_, FeatureShard(X), self.n_workers)
        if self.normalize:
            out, _ = normalize_rows(out)
        return out.values


class InfluenceScorer(TransformerMixin, BaseEstimator):
    """Maps training gradients to per-task mean gradient-cosine influence.

    ``fit(X_val, tasks)`` stores validation gradients grouped by task label
    (tasks keep their order of first appearance); ``transform(X_train)``
    returns the ``N x K`` score matrix.
    """

    def __init__(self, raw: bool = False, block_rows: int = 4096, n_workers: Optional[int] = None):
        self.raw = raw
        self.block_rows = block_rows
        self.n_workers = n_workers

    def fit(self, X, y):
        X = check_array(X, dtype=np.float32)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must give one task label per validation row")
        _, first = np.unique(y, return_index=True)
        self.task_names_ = [str(t) for t in y[np.sort(first)]]
        self.val_sets_ = [FeatureShard(X[y.astype(str) == t]) for t in self.task_names_]
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "val_sets_")
        X = check_array(X, dtype=np.float32)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, scorer was fit with {self.n_features_in_}")
        blocks = [FeatureShard(X[s : s + self.block_rows], base_id=s) for s in range(0, X.shape[0], self.block_rows)]
        cols = [
            stream_task_scores(blocks, v, task_name=t, raw=self.raw, n_workers=self.n_workers).scores
            for t, v in zip(self.task_names_, self.val_sets_)
        ]
        return np.stack(cols, axis=1)

    def score_table(self, X) -> ScoreTable:
        return ScoreTable(self.transform(X), list(self.task_names_))


class ConsensusSelector(BaseEstimator):
    """Pick ``ceil(ratio * N)`` training examples from an ``N x K`` score matrix."""

    def __init__(self, ratio: float = 0.2, strategy: str = "vote", seed: Optional[int] = None):
        self.ratio = ratio
        self.strategy = strategy
        self.seed = seed

    def fit(self, X, y=None, task_names=None):
        if isinstance(X, ScoreTable):
            table = X
        else:
            X = check_array(X, dtype=np.float64)
            table = ScoreTable.from_array(X, task_names)
        check_ratio(self.ratio)
        if self.strategy not in STRATEGIES + BASELINES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        self.table_ = table
        self.n_features_in_ = table.k
        self.selection_ = select(table, self.ratio, self.strategy, seed=self.seed)
        self.selected_ids_ = self.selection_.selected_ids
        self.votes_ = self.selection_.provenance.get("votes")
        return self

    def get_support(self, indices: bool = False):
        check_is_fitted(self, "selection_")
        if indices:
            return self.selected_ids_.copy()
        mask = np.zeros(self.table_.n, dtype=bool)
        mask[self.selected_ids_] = True
        return mask


class SoftmaxRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression trained by batch-size-1 SGD from zero."""

    def __init__(self, learning_rate: float = 0.1, epochs: int = 3, schedule: str = "linear", seed: int = 0):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.schedule = schedule
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        init = ModelParams.zeros(len(self.classes_), X.shape[1])
        rng = np.random.default_rng(self.seed)
        self.params_ = sgd(init, X, y_idx, self.learning_rate, self.epochs, rng, self.schedule)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return softmax(X @ self.params_.weights.T + self.params_.bias)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def per_example_gradients(self, X, y):
        """Flattened cross-entropy gradient of each (x, y) pair at the fitted parameters."""
        check_is_fitted(self, "params_")
        X, y = check_X_y(X, y, dtype=np.float64)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels unseen during fit")
        return per_example_gradients(self.params_, X, idx)
