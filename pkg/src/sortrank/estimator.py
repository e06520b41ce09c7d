"""scikit-learn style wrappers around the ranking and pre-training networks.

``X`` is always a sequence of :class:`~sortrank.data.RequestSample`; labels
travel inside the candidates, so ``y`` is accepted and ignored.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import RequestSample, check_sample
from .model import ModelConfig, NextItemNetwork, SORTNetwork, click_sequences, transfer_sparse
from .tokenizer import TokenizerConfig, pack_requests
from .training import PretrainConfig, TrainConfig, compute_auc, predict_packed, pretrain, train_rank


def check_samples(X, n_items: int | None = None, allow_empty: bool = False) -> list[RequestSample]:
    """Validate ``X`` as a list of request samples and return it as a list.

    Raises:
        TypeError: when ``X`` is not a sequence of RequestSample.
        ValueError: when ``X`` is empty (unless allowed) or a sample breaks an invariant.
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__iter__"):
        raise TypeError(f"expected a sequence of RequestSample, got {type(X).__name__}")
    X = list(X)
    if not X and not allow_empty:
        raise ValueError("no samples given")
    for i, s in enumerate(X):
        if not isinstance(s, RequestSample):
            raise TypeError(f"X[{i}] is {type(s).__name__}, not RequestSample")
        check_sample(s, n_items)
    return X


def infer_tokenizer_config(X: Sequence[RequestSample], **overrides) -> TokenizerConfig:
    """Smallest vocabularies covering ``X``; explicit overrides win."""
    items = [c.item_id for s in X for c in s.candidates] + [e.item_id for s in X for e in s.history]
    scenes = [e.scene_id for s in X for e in s.history] + [s.scene_id for s in X]
    n_fields = len(X[0].user_profile)
    cards = tuple(max(s.user_profile[f] for s in X) + 1 for f in range(n_fields))
    base = dict(n_items=max(items) + 1, profile_cardinalities=cards, n_scenes=max(scenes) + 1)
    base.update(overrides)
    return TokenizerConfig(**base)


class SORTRanker(BaseEstimator):
    """Multi-objective ranker: per-candidate click / cart / purchase probabilities.

    Args:
        preset: Model scale, one of ``small``, ``base``, ``large``.
        model_params: Extra ModelConfig overrides (toggles, window, sparsity, ...).
        tokenizer_params: TokenizerConfig overrides; vocabularies default to the
            smallest covering the training data.
        epochs: Passes over the training requests (fractions allowed).
        batch_size: Requests per optimiser step.
        lr: Learning rate; None picks the preset default.
        history_max: Most recent history events kept per request.
        pretrained_items: Optional ``[n_items, item_dim]`` table copied into the model.
        freeze_items: Keep the copied item table fixed during training.
        seed: Seed for initialisation and batch order.
    """

    def __init__(self, preset="small", model_params=None, tokenizer_params=None, epochs=1.0, batch_size=256,
                 lr=None, history_max=256, pretrained_items=None, freeze_items=True, seed=0):
        self.preset = preset
        self.model_params = model_params
        self.tokenizer_params = tokenizer_params
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.history_max = history_max
        self.pretrained_items = pretrained_items
        self.freeze_items = freeze_items
        self.seed = seed

    def fit(self, X, y=None, eval_set=None):
        X = check_samples(X)
        self.tok_cfg_ = infer_tokenizer_config(X, **(self.tokenizer_params or {}))
        cfg = ModelConfig.from_preset(self.preset, **(self.model_params or {}))
        self.model_ = SORTNetwork(cfg, self.tok_cfg_, seed=self.seed)
        if self.pretrained_items is not None:
            table = torch.as_tensor(np.asarray(self.pretrained_items))
            transfer_sparse(table, self.model_, freeze=self.freeze_items)
        train = pack_requests(X, self.tok_cfg_, self.history_max)
        evals = pack_requests(check_samples(eval_set), self.tok_cfg_, self.history_max) if eval_set else None
        tcfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed)
        self.result_ = train_rank(self.model_, train, evals, tcfg)
        self.timeline_ = self.result_.timeline
        return self

    def predict_proba(self, X) -> np.ndarray:
        """``[total candidates, 3]`` probabilities, candidates in request order."""
        check_is_fitted(self, "model_")
        X = check_samples(X, self.tok_cfg_.n_items)
        return predict_packed(self.model_, pack_requests(X, self.tok_cfg_, self.history_max))

    def predict(self, X) -> np.ndarray:
        """Hard click decisions at probability 0.5."""
        return (self.predict_proba(X)[:, 0] >= 0.5).astype(np.int64)

    def score(self, X, y=None) -> float:
        """Click AUC over all candidates of ``X`` (NaN when only one class is present)."""
        X = check_samples(X)
        labels = np.asarray([c.click for s in X for c in s.candidates])
        auc = compute_auc(self.predict_proba(X)[:, 0], labels)
        return float("nan") if auc is None else auc


class ItemPretrainer(BaseEstimator, TransformerMixin):
    """Next-item pre-training over users' click sequences.

    ``transform`` maps requests to the learned embeddings of their candidates,
    and ``item_table_`` is what :class:`SORTRanker` takes as ``pretrained_items``.
    """

    def __init__(self, preset="small", model_params=None, tokenizer_params=None, epochs=1, batch_size=128,
                 lr=1e-3, max_len=256, seed=0):
        self.preset = preset
        self.model_params = model_params
        self.tokenizer_params = tokenizer_params
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.max_len = max_len
        self.seed = seed

    def fit(self, X, y=None):
        X = check_samples(X)
        self.tok_cfg_ = infer_tokenizer_config(X, **(self.tokenizer_params or {}))
        cfg = ModelConfig.from_preset(self.preset, **(self.model_params or {}))
        self.model_ = NextItemNetwork(cfg, self.tok_cfg_, seed=self.seed)
        seqs = click_sequences(X, self.max_len)
        pcfg = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                              max_len=self.max_len)
        self.loss_trace_ = pretrain(self.model_, seqs, pcfg)
        self.item_table_ = self.model_.item_table.detach().clone().numpy()
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "item_table_")
        X = check_samples(X, self.tok_cfg_.n_items)
        ids = np.asarray([c.item_id for s in X for c in s.candidates], dtype=np.int64)
        return self.item_table_[ids]
