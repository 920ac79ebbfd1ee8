"""Reference predictors for the collection trend task: majority class,
logistic regression on flattened price windows, and a price-only LSTM with
temporal attention (no graph, no wallets)."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .evaluation import metrics_classification
from .model import ModelConfig, _lstm_params, _lstm_step, _mlp, _mlp_params, _glorot


def build_price_windows(series, samples, collections, history: int):
    """(B, history+1) matrix of log1p median prices ending at each sample's
    target date, plus the label vector."""
    wins = np.zeros((len(samples), history + 1))
    labels = np.zeros(len(samples))
    for i, (t, ci, y) in enumerate(samples):
        s = series[collections[ci]]
        wins[i] = [math.log1p(s.price(d)) for d in range(t - history, t + 1)]
        labels[i] = y
    return wins, labels


def majority_class(train_labels) -> float:
    train_labels = np.asarray(train_labels)
    return 1.0 if train_labels.mean() >= 0.5 else 0.0


def logistic_baseline(train_windows, train_labels, eval_windows):
    """Logistic regression over standardized flattened windows."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    if len(set(np.asarray(train_labels).tolist())) < 2:
        return np.full(len(eval_windows), float(majority_class(train_labels)))
    scaler = StandardScaler().fit(train_windows)
    clf = LogisticRegression(max_iter=1000)
    clf.fit(scaler.transform(train_windows), train_labels)
    return clf.predict_proba(scaler.transform(eval_windows))[:, 1]


class PriceOnlyLSTM:
    """LSTM over the normalized price window with the same temporal
    attention readout as the full model, but no transaction graph."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        d = config.hidden_dim
        rng = np.random.default_rng(seed + 104729)
        p: dict[str, ad.Tensor] = {}
        _lstm_params(rng, p, "lstm", 1, d)
        p["tattn_w"] = _glorot(rng, (d, d))
        p["tattn_v"] = _glorot(rng, (d, 1))
        _mlp_params(rng, p, "pred", d, d, 1)
        self.params = p
        self.mean = 0.0
        self.std = 1.0

    def _logits(self, windows, train=False, rng=None):
        d = self.config.hidden_dim
        x = (windows - self.mean) / self.std
        b = x.shape[0]
        h = ad.Tensor(np.zeros((b, d)))
        c = ad.Tensor(np.zeros((b, d)))
        states = []
        for t in range(x.shape[1]):
            h, c = _lstm_step(self.params, "lstm", ad.Tensor(x[:, t:t + 1]), h, c, d)
            states.append(h)
        scores = [ad.matmul(ad.leaky_relu(ad.matmul(s, self.params["tattn_w"]), 0.2),
                            self.params["tattn_v"]) for s in states]
        alpha = ad.softmax(ad.concat(scores, axis=1), axis=1)
        out = states[-1]
        for t, s in enumerate(states):
            out = ad.add(out, ad.mul(ad.slice_cols(alpha, t, t + 1), s))
        rate = self.config.dropout if train else 0.0
        return _mlp(self.params, "pred", out, rate, rng)

    def fit(self, train_windows, train_labels, val_windows, val_labels, seed=0):
        cfg = self.config
        self.mean = train_windows.mean()
        self.std = max(train_windows.std(), 1e-6)
        rng = np.random.default_rng(seed)
        opt = ad.Adam(self.params, lr=cfg.lr)
        best_val = math.inf
        best = {k: p.data.copy() for k, p in self.params.items()}
        patience_left = cfg.patience
        n = len(train_windows)
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch):
                idx = order[start:start + cfg.batch]
                logits = self._logits(train_windows[idx], True, rng)
                loss = ad.bce_with_logits(logits, train_labels[idx].reshape(-1, 1))
                if cfg.l2_weight > 0:
                    l2 = None
                    for k in sorted(self.params):
                        term = ad.tsum(ad.mul(self.params[k], self.params[k]))
                        l2 = term if l2 is None else ad.add(l2, term)
                    loss = ad.add(loss, ad.scale(l2, cfg.l2_weight))
                opt.zero_grad()
                ad.backward(loss)
                opt.step()
            probs = self.predict(val_windows)
            eps = 1e-12
            val_loss = float(np.mean(-(val_labels * np.log(probs + eps) +
                                       (1 - val_labels) * np.log(1 - probs + eps))))
            if val_loss < best_val - 1e-9:
                best_val = val_loss
                best = {k: p.data.copy() for k, p in self.params.items()}
                patience_left = cfg.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    break
        for k, data in best.items():
            self.params[k].data = data
        return self

    def predict(self, windows):
        with ad.no_grad():
            return 1.0 / (1.0 + np.exp(-self._logits(windows).data[:, 0]))

    def evaluate(self, windows, labels):
        return metrics_classification(self.predict(windows), labels)
