"""The community-enhanced multi-behavior transaction graph network and its
hierarchical (collection-level, then frozen-backbone token-level) training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .community import CommunityAssignment
from .graphbuild import (FEATURED_RELATIONS, Relation, SnapshotGraph,
                         WALLET_WALLET_RELATIONS, FeatureSchema, Universe,
                         normalize_static)


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    gnn_layers: int = 2
    dropout: float = 0.5
    l2_weight: float = 0.0005
    lr: float = 0.001
    batch: int = 64
    history: int = 14
    step: int = 1
    tf_layers: int = 1
    tf_heads: int = 2
    max_seq_len: int = 16
    max_epochs: int = 100
    patience: int = 10

    def __post_init__(self):
        for name in ("hidden_dim", "gnn_layers", "l2_weight", "lr", "batch",
                     "history", "step", "tf_layers", "tf_heads", "max_seq_len",
                     "max_epochs", "patience"):
            if getattr(self, name) < 0 or (name not in ("history", "l2_weight")
                                           and getattr(self, name) == 0):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


ABLATION_TAGS = ("full", "wo-HE", "wo-TE", "wo-RE", "wo-IDE", "wo-CIF",
                 "wo-TAR", "wo-CE", "wo-TF")


@dataclass(frozen=True)
class Ablation:
    """Structural variants: each flag removes or replaces one component."""

    tag: str = "full"

    def __post_init__(self):
        if self.tag not in ABLATION_TAGS:
            raise ValueError(f"unknown ablation {self.tag!r}; choose from {ABLATION_TAGS}")

    @property
    def drop_hold_edges(self):
        return self.tag == "wo-HE"

    @property
    def drop_transaction_edges(self):
        # collection-wallet event edges
        return self.tag == "wo-TE"

    @property
    def drop_relationship_edges(self):
        # wallet-wallet edges
        return self.tag == "wo-RE"

    @property
    def freeze_zero_identity(self):
        return self.tag == "wo-IDE"

    @property
    def skip_community_fusion(self):
        return self.tag == "wo-CIF"

    @property
    def lstm_only_temporal(self):
        return self.tag == "wo-TAR"

    @property
    def drop_collection_embedding(self):
        return self.tag == "wo-CE"

    @property
    def lstm_sale_encoder(self):
        return self.tag == "wo-TF"


_TE_RELATIONS = {Relation.MINT, Relation.BURN, Relation.SALE_FROM,
                 Relation.SALE_TO, Relation.TRANSFER_IN, Relation.TRANSFER_OUT}


@dataclass
class PreparedDay:
    """Schema-normalized, ablation-filtered per-day arrays for the network.

    Relation arrays are bidirectional: each edge contributes both (i<-j)
    and (j<-i) in global node indexing (wallets first, then collections)."""

    day: int
    wallet_x: np.ndarray          # (Nw, 6) normalized
    coll_x: np.ndarray            # (Nc, 7) normalized, zeros where absent
    present: np.ndarray           # (Nc,) bool
    rels: dict[Relation, tuple]   # rel -> (i_idx, j_idx, feat (E2,1) | None)


def prepare_day(graph: SnapshotGraph, schema: FeatureSchema, universe: Universe,
                ablation: Ablation = Ablation()) -> PreparedDay:
    nw = len(universe.wallets)
    wallet_x = schema.normalize("wallet_dynamic", graph.wallet_feats)
    coll_x = schema.normalize("collection_dynamic", graph.collection_feats)
    coll_x[~graph.collection_present] = 0.0
    rels: dict[Relation, tuple] = {}
    for rel, e in graph.edges.items():
        if ablation.drop_hold_edges and rel is Relation.HOLD:
            continue
        if ablation.drop_transaction_edges and rel in _TE_RELATIONS:
            continue
        if ablation.drop_relationship_edges and rel in WALLET_WALLET_RELATIONS:
            continue
        src = e.src if rel in WALLET_WALLET_RELATIONS else e.src + nw
        dst = e.dst
        i_idx = np.concatenate([src, dst])
        j_idx = np.concatenate([dst, src])
        feat = None
        if e.feat is not None:
            block = "edge_price" if FEATURED_RELATIONS[rel] == "price" else "edge_count"
            f = schema.normalize(block, e.feat.reshape(-1, 1))
            feat = np.concatenate([f, f])
        rels[rel] = (i_idx, j_idx, feat)
    return PreparedDay(graph.day, wallet_x, coll_x, graph.collection_present, rels)


def prepare_days(snapshots, schema, universe, ablation=Ablation()):
    return {d: prepare_day(g, schema, universe, ablation)
            for d, g in snapshots.items()}


def _glorot(rng, shape):
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _zeros(shape):
    return ad.Tensor(np.zeros(shape), requires_grad=True)


def _mlp_params(rng, params, name, d_in, d_hidden, d_out):
    params[f"{name}.w1"] = _glorot(rng, (d_in, d_hidden))
    params[f"{name}.b1"] = _zeros((d_hidden,))
    params[f"{name}.w2"] = _glorot(rng, (d_hidden, d_out))
    params[f"{name}.b2"] = _zeros((d_out,))


def _lstm_params(rng, params, name, d_in, d):
    params[f"{name}.wx"] = _glorot(rng, (d_in, 4 * d))
    params[f"{name}.wh"] = _glorot(rng, (d, 4 * d))
    params[f"{name}.b"] = _zeros((4 * d,))


def _mlp(params, name, x, rate, rng):
    h = ad.relu(ad.add(ad.matmul(x, params[f"{name}.w1"]), params[f"{name}.b1"]))
    if rate > 0.0 and rng is not None:
        h = ad.dropout(h, rate, rng=rng)
    return ad.add(ad.matmul(h, params[f"{name}.w2"]), params[f"{name}.b2"])


def _lstm_step(params, name, x, h, c, d):
    gates = ad.add(ad.add(ad.matmul(x, params[f"{name}.wx"]),
                          ad.matmul(h, params[f"{name}.wh"])), params[f"{name}.b"])
    i = ad.sigmoid(ad.slice_cols(gates, 0, d))
    f = ad.sigmoid(ad.slice_cols(gates, d, 2 * d))
    g = ad.tanh(ad.slice_cols(gates, 2 * d, 3 * d))
    o = ad.sigmoid(ad.slice_cols(gates, 3 * d, 4 * d))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    return ad.mul(o, ad.tanh(c_new)), c_new


class CometModel:
    """Collection-level backbone: graph network over daily snapshots, LSTM
    with temporal attention over the window, and a trend predictor."""

    def __init__(self, config: ModelConfig, universe: Universe,
                 communities: CommunityAssignment, schema: FeatureSchema,
                 static_raw: np.ndarray, seed: int = 0,
                 ablation: Ablation = Ablation()):
        self.config = config
        self.universe = universe
        self.schema = schema
        self.ablation = ablation
        self.static_norm = normalize_static(schema, static_raw)
        nw, nc = len(universe.wallets), len(universe.collections)
        self.n_nodes = nw + nc
        self.coll_idx = np.arange(nw, nw + nc)

        # compact cluster ids over the wallet universe
        raw = [communities.membership.get(w, -1) for w in universe.wallets]
        next_free = max((c for c in raw if c >= 0), default=-1) + 1
        filled = []
        for c in raw:
            if c < 0:
                filled.append(next_free)
                next_free += 1
            else:
                filled.append(c)
        uniq = {c: i for i, c in enumerate(sorted(set(filled)))}
        self.cluster_ids = np.array([uniq[c] for c in filled], dtype=np.intp)
        self.n_clusters = len(uniq)
        sizes = np.bincount(self.cluster_ids, minlength=self.n_clusters)
        self.inv_cluster_sizes = (1.0 / sizes).reshape(-1, 1)

        d = config.hidden_dim
        rng = np.random.default_rng(seed)
        p: dict[str, ad.Tensor] = {}
        if ablation.freeze_zero_identity:
            p["emb_wallet"] = ad.Tensor(np.zeros((nw, d)), requires_grad=True)
            p["emb_coll"] = ad.Tensor(np.zeros((nc, d)), requires_grad=True)
        else:
            p["emb_wallet"] = ad.Tensor(rng.normal(0, 0.1, (nw, d)), requires_grad=True)
            p["emb_coll"] = ad.Tensor(rng.normal(0, 0.1, (nc, d)), requires_grad=True)
        _mlp_params(rng, p, "mlp_wd", 6, d, d)
        _mlp_params(rng, p, "mlp_cd", 7, d, d)
        _mlp_params(rng, p, "mlp_cs", static_raw.shape[1], d, d)
        _mlp_params(rng, p, "mlp_fuse", 2 * d, d, d)
        for rel in Relation:
            p[f"attn_w.{rel.value}"] = _glorot(rng, (d, d))
            p[f"attn_v.{rel.value}"] = _glorot(rng, (d, 1))
            if rel in FEATURED_RELATIONS:
                p[f"edge.{rel.value}"] = _glorot(rng, (1, d))
        _lstm_params(rng, p, "lstm", d, d)
        # day embeddings grow ~(1+#relations)x per layer through the residual
        # aggregate; shrink the input weights so the gates start unsaturated
        p["lstm.wx"].data /= float((1 + len(Relation)) ** config.gnn_layers)
        p["tattn_w"] = _glorot(rng, (d, d))
        p["tattn_v"] = _glorot(rng, (d, 1))
        _mlp_params(rng, p, "pred_c", d, d, 1)
        self.params = p
        self.trainable = sorted(
            k for k in p
            if not (ablation.freeze_zero_identity and k.startswith("emb_")))

    # ------------------------------------------------------------- pieces

    def _dropout_rate(self, train):
        return self.config.dropout if train else 0.0

    def init_nodes(self, prep: PreparedDay, train=False, rng=None,
                   static_override=None):
        """Initial embeddings: identity embedding + feature MLPs, with
        community-aware fusion on the wallet side."""
        p = self.params
        rate = self._dropout_rate(train)
        hw_tilde = ad.add(p["emb_wallet"],
                          _mlp(p, "mlp_wd", ad.Tensor(prep.wallet_x), rate, rng))
        if self.ablation.skip_community_fusion:
            hw = hw_tilde
        else:
            sums = ad.segment_sum(hw_tilde, self.cluster_ids, self.n_clusters)
            h_phi = ad.mul(sums, ad.Tensor(self.inv_cluster_sizes))
            hw = _mlp(p, "mlp_fuse",
                      ad.concat([hw_tilde, ad.gather(h_phi, self.cluster_ids)], axis=1),
                      rate, rng)
        static = self.static_norm if static_override is None else static_override
        hc = ad.add(ad.add(p["emb_coll"],
                           _mlp(p, "mlp_cd", ad.Tensor(prep.coll_x), rate, rng)),
                    _mlp(p, "mlp_cs", ad.Tensor(static), rate, rng))
        return hw, hc

    def relation_attention(self, h, prep: PreparedDay, rel: Relation):
        """Attentive aggregation under one relation; identity where the
        relation has no edges."""
        arrays = prep.rels.get(rel)
        if arrays is None:
            return h
        return ad.add(h, self._relation_message(h, arrays, rel))

    def _relation_message(self, h, arrays, rel: Relation):
        p = self.params
        i_idx, j_idx, feat = arrays
        hi = ad.gather(h, i_idx)
        hj = ad.gather(h, j_idx)
        hf = ad.add(hi, hj)
        if feat is not None:
            hf = ad.add(hf, ad.matmul(ad.Tensor(feat), p[f"edge.{rel.value}"]))
        score = ad.matmul(ad.leaky_relu(ad.matmul(hf, p[f"attn_w.{rel.value}"]), 0.2),
                          p[f"attn_v.{rel.value}"])
        alpha = ad.segment_softmax(score, i_idx, self.n_nodes)
        return ad.segment_sum(ad.mul(alpha, hj), i_idx, self.n_nodes)

    def layer_aggregate(self, h0, h, prep: PreparedDay, train=False, rng=None):
        """Sum-pool over all relation views plus the layer-0 residual."""
        total = ad.scale(h, float(len(Relation)))
        for rel in Relation:
            arrays = prep.rels.get(rel)
            if arrays is not None:
                total = ad.add(total, self._relation_message(h, arrays, rel))
        rate = self._dropout_rate(train)
        if rate > 0.0 and rng is not None:
            total = ad.dropout(total, rate, rng=rng)
        return ad.add(h0, total)

    def encode_day(self, prep: PreparedDay, train=False, rng=None,
                   static_override=None):
        """Full graph network for one day; returns collection embeddings."""
        hw, hc = self.init_nodes(prep, train, rng, static_override)
        h0 = ad.concat([hw, hc], axis=0)
        h = h0
        for _ in range(self.config.gnn_layers):
            h = self.layer_aggregate(h0, h, prep, train, rng)
        return ad.gather(h, self.coll_idx)

    def temporal_encode(self, states):
        """LSTM states -> attention-fused window representation."""
        p = self.params
        if self.ablation.lstm_only_temporal:
            return states[-1]
        scores = [ad.matmul(ad.leaky_relu(ad.matmul(h, p["tattn_w"]), 0.2),
                            p["tattn_v"]) for h in states]
        alpha = ad.softmax(ad.concat(scores, axis=1), axis=1)
        out = states[-1]
        for t, h in enumerate(states):
            out = ad.add(out, ad.mul(ad.slice_cols(alpha, t, t + 1), h))
        return out

    def encode_window(self, prepared, t_end, train=False, rng=None,
                      day_cache=None, static_override=None):
        """Window representation for every collection at target date t_end.

        Per-day encodings are memoized in day_cache and shared across all
        collections (and target dates) of the same forward pass."""
        d = self.config.hidden_dim
        nc = len(self.universe.collections)
        if day_cache is None:
            day_cache = {}
        states = []
        h = ad.Tensor(np.zeros((nc, d)))
        c = ad.Tensor(np.zeros((nc, d)))
        for day in range(t_end - self.config.history, t_end + 1):
            if day not in day_cache:
                day_cache[day] = self.encode_day(prepared[day], train, rng,
                                                 static_override)
            h, c = _lstm_step(self.params, "lstm", day_cache[day], h, c, d)
            states.append(h)
        return self.temporal_encode(states)

    def predict_collection(self, h_hat, train=False, rng=None):
        """(logits, probabilities) for rows of h_hat."""
        logits = _mlp(self.params, "pred_c", h_hat, self._dropout_rate(train), rng)
        return logits, ad.sigmoid(logits)

    # ------------------------------------------------------------ training

    def l2_penalty(self):
        total = None
        for k in self.trainable:
            p = self.params[k]
            term = ad.tsum(ad.mul(p, p))
            total = term if total is None else ad.add(total, term)
        return total

    def batch_loss(self, prepared, batch, train=True, rng=None):
        """batch: list of (t_end, collection index array, label array)."""
        cache = {}
        logit_rows, label_rows = [], []
        for t_end, coll_idx, labels in batch:
            h_hat = self.encode_window(prepared, t_end, train, rng, cache)
            logits, _ = self.predict_collection(ad.gather(h_hat, coll_idx),
                                                train, rng)
            logit_rows.append(logits)
            label_rows.append(labels.reshape(-1, 1))
        logits = ad.concat(logit_rows, axis=0) if len(logit_rows) > 1 else logit_rows[0]
        labels = np.concatenate(label_rows)
        loss = ad.bce_with_logits(logits, labels)
        if self.config.l2_weight > 0:
            loss = ad.add(loss, ad.scale(self.l2_penalty(), self.config.l2_weight))
        return loss, logits.data, labels

    def predict_samples(self, prepared, groups, static_override=None):
        """Deterministic probabilities for samples (no dropout). Accepts
        either raw (t_end, coll_index, label) samples or date groups."""
        if groups and np.ndim(groups[0][1]) == 0:
            groups = [g for b in group_samples(groups, len(groups)) for g in b]
        probs, labels = [], []
        with ad.no_grad():
            cache = {}
            for t_end, coll_idx, y in groups:
                h_hat = self.encode_window(prepared, t_end, False, None, cache,
                                           static_override)
                _, p = self.predict_collection(ad.gather(h_hat, coll_idx))
                probs.append(p.data[:, 0])
                labels.append(y)
        if not probs:
            return np.zeros(0), np.zeros(0)
        return np.concatenate(probs), np.concatenate(labels)


def group_samples(samples, batch_size):
    """Group (t_end, coll_idx, label) samples by target date, then pack
    consecutive dates into batches of at most batch_size samples so day
    encodings are shared within a batch."""
    by_t: dict[int, list] = {}
    for t_end, ci, y in samples:
        by_t.setdefault(t_end, []).append((ci, y))
    groups = []
    for t_end in sorted(by_t):
        ci = np.array([c for c, _ in by_t[t_end]], dtype=np.intp)
        y = np.array([y for _, y in by_t[t_end]], dtype=np.float64)
        groups.append((t_end, ci, y))
    batches, current, count = [], [], 0
    for g in groups:
        if current and count + len(g[1]) > batch_size:
            batches.append(current)
            current, count = [], 0
        current.append(g)
        count += len(g[1])
    if current:
        batches.append(current)
    return batches


@dataclass
class TrainLogRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    val_mcc: float


def train_collection(model: CometModel, prepared, train_samples, val_samples,
                     seed: int):
    """Adam on BCE + L2 with early stopping on validation loss; the
    best-validation parameters are restored into the model."""
    from .evaluation import metrics_classification

    if not train_samples:
        raise ValueError("empty training set")
    cfg = model.config
    rng = np.random.default_rng(seed)
    batches = group_samples(train_samples, cfg.batch)
    val_groups = group_samples(val_samples, cfg.batch)
    val_flat = [g for b in val_groups for g in b]
    trainable = {k: model.params[k] for k in model.trainable}
    opt = ad.Adam(trainable, lr=cfg.lr)
    best_val = math.inf
    best_state = {k: p.data.copy() for k, p in trainable.items()}
    patience_left = cfg.patience
    log: list[TrainLogRow] = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(batches))
        total, n = 0.0, 0
        for bi in order:
            loss, _, labels = model.batch_loss(prepared, batches[bi], True, rng)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(labels)
            n += len(labels)
        train_loss = total / max(n, 1)
        if val_flat:
            probs, labels = model.predict_samples(prepared, val_flat)
            eps = 1e-12
            val_loss = float(np.mean(-(labels * np.log(probs + eps)
                                       + (1 - labels) * np.log(1 - probs + eps))))
            acc, mcc = metrics_classification(probs, labels)
        else:
            val_loss, acc, mcc = train_loss, 0.0, 0.0
        log.append(TrainLogRow(epoch, train_loss, val_loss, acc, mcc))
        if val_loss < best_val - 1e-9:
            best_val = val_loss
            best_state = {k: p.data.copy() for k, p in trainable.items()}
            patience_left = cfg.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break
    for k, data in best_state.items():
        model.params[k].data = data
    return log


# ---------------------------------------------------------------- token head

TOKEN_EVENT_DIM = 3   # sale price, eth-usd rate, collection median that day
TOKEN_GLOBAL_DIM = 5  # rarity + lifetime mint/sale/transfer/burn counts


def _positional_encoding(length, d):
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


class TokenHead:
    """Sale-sequence encoder plus token price predictor, trained on top of a
    frozen collection backbone. Predictions are in log1p(ETH) space."""

    def __init__(self, config: ModelConfig, seed: int = 0,
                 ablation: Ablation = Ablation()):
        self.config = config
        self.ablation = ablation
        d = config.hidden_dim
        rng = np.random.default_rng(seed + 7919)
        p: dict[str, ad.Tensor] = {}
        p["tf_in.w"] = _glorot(rng, (TOKEN_EVENT_DIM, d))
        p["tf_in.b"] = _zeros((d,))
        if ablation.lstm_sale_encoder:
            _lstm_params(rng, p, "sale_lstm", d, d)
        else:
            for layer in range(config.tf_layers):
                pre = f"tf{layer}"
                for name in ("wq", "wk", "wv", "wo"):
                    p[f"{pre}.{name}"] = _glorot(rng, (d, d))
                p[f"{pre}.ln1_g"] = ad.Tensor(np.ones(d), requires_grad=True)
                p[f"{pre}.ln1_b"] = _zeros((d,))
                p[f"{pre}.ln2_g"] = ad.Tensor(np.ones(d), requires_grad=True)
                p[f"{pre}.ln2_b"] = _zeros((d,))
                _mlp_params(rng, p, f"{pre}.ffn", d, d, d)
        _mlp_params(rng, p, "mlp_global", TOKEN_GLOBAL_DIM, d, d)
        _mlp_params(rng, p, "pred_u", d, d, 1)
        self.params = p
        self.trainable = sorted(p)
        # event/global feature standardization, fitted on training samples
        self.event_mean = np.zeros(TOKEN_EVENT_DIM)
        self.event_std = np.ones(TOKEN_EVENT_DIM)
        self.global_mean = np.zeros(TOKEN_GLOBAL_DIM)
        self.global_std = np.ones(TOKEN_GLOBAL_DIM)

    def fit_norm(self, event_rows, global_rows):
        if len(event_rows):
            e = np.asarray(event_rows)
            self.event_mean = e.mean(axis=0)
            self.event_std = np.maximum(e.std(axis=0), 1e-6)
        g = np.asarray(global_rows)
        self.global_mean = g.mean(axis=0)
        self.global_std = np.maximum(g.std(axis=0), 1e-6)

    def _norm_events(self, rows):
        return (np.asarray(rows) - self.event_mean) / self.event_std

    def _norm_global(self, row):
        return (np.asarray(row) - self.global_mean) / self.global_std

    def encode_sales(self, event_rows, train=False, rng=None):
        """Mean-pooled encoder output over the (truncated) sale history;
        an empty history encodes to the exact zero vector."""
        d = self.config.hidden_dim
        if len(event_rows) == 0:
            return ad.Tensor(np.zeros((1, d)))
        rows = self._norm_events(event_rows)[-self.config.max_seq_len:]
        p = self.params
        x = ad.add(ad.matmul(ad.Tensor(rows), p["tf_in.w"]), p["tf_in.b"])
        if self.ablation.lstm_sale_encoder:
            h = ad.Tensor(np.zeros((1, d)))
            c = ad.Tensor(np.zeros((1, d)))
            for t in range(rows.shape[0]):
                h, c = _lstm_step(p, "sale_lstm", ad.gather(x, [t]), h, c, d)
            return h
        x = ad.add(x, ad.Tensor(_positional_encoding(rows.shape[0], d)))
        heads = self.config.tf_heads
        dh = d // heads
        inv_sqrt = 1.0 / math.sqrt(dh)
        rate = self.config.dropout if train else 0.0
        for layer in range(self.config.tf_layers):
            pre = f"tf{layer}"
            q = ad.matmul(x, p[f"{pre}.wq"])
            k = ad.matmul(x, p[f"{pre}.wk"])
            v = ad.matmul(x, p[f"{pre}.wv"])
            outs = []
            for hix in range(heads):
                lo, hi = hix * dh, (hix + 1) * dh
                qh = ad.slice_cols(q, lo, hi)
                kh = ad.slice_cols(k, lo, hi)
                vh = ad.slice_cols(v, lo, hi)
                att = ad.softmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt),
                                 axis=-1)
                outs.append(ad.matmul(att, vh))
            attn = ad.matmul(ad.concat(outs, axis=1), p[f"{pre}.wo"])
            if rate > 0.0 and rng is not None:
                attn = ad.dropout(attn, rate, rng=rng)
            x = ad.layer_norm(ad.add(x, attn), p[f"{pre}.ln1_g"], p[f"{pre}.ln1_b"])
            ff = _mlp(p, f"{pre}.ffn", x, rate, rng)
            x = ad.layer_norm(ad.add(x, ff), p[f"{pre}.ln2_g"], p[f"{pre}.ln2_b"])
        return ad.tmean(x, axis=0, keepdims=True)

    def predict_token(self, h_sales, global_row, h_coll, train=False, rng=None):
        """relu(MLP(sale encoding + global features + collection window))."""
        p = self.params
        h_g = _mlp(p, "mlp_global", ad.Tensor(self._norm_global(global_row)
                                              .reshape(1, -1)),
                   self.config.dropout if train else 0.0, rng)
        fused = ad.add(h_sales, h_g)
        if not self.ablation.drop_collection_embedding and h_coll is not None:
            fused = ad.add(fused, h_coll)
        return ad.relu(_mlp(p, "pred_u", fused,
                            self.config.dropout if train else 0.0, rng))

    def l2_penalty(self):
        total = None
        for k in self.trainable:
            p = self.params[k]
            term = ad.tsum(ad.mul(p, p))
            total = term if total is None else ad.add(total, term)
        return total


@dataclass
class TokenSample:
    collection: str
    token: str
    sale_day: int
    target_log_price: float
    event_rows: list          # prior-sale features, chronological
    global_row: np.ndarray    # rarity + lifetime counts as of the reference date
    ref_day: int              # window end = sale_day - step


def precompute_windows(model: CometModel, prepared, ref_days):
    """Frozen-backbone window encodings for every needed reference date.

    Day encodings are computed once and shared across all reference dates."""
    out = {}
    with ad.no_grad():
        cache = {}
        for t in sorted(ref_days):
            out[t] = model.encode_window(prepared, t, False, None, cache).data
    return out


def token_forward(head: TokenHead, sample: TokenSample, windows, coll_index,
                  train=False, rng=None):
    h_s = head.encode_sales(sample.event_rows, train, rng)
    h_c = None
    if not head.ablation.drop_collection_embedding:
        w = windows[sample.ref_day]
        h_c = ad.Tensor(w[coll_index[sample.collection]].reshape(1, -1))
    return head.predict_token(h_s, sample.global_row, h_c, train, rng)


def train_token(head: TokenHead, backbone: CometModel, prepared,
                train_samples, val_samples, seed: int):
    """Token-head optimization: the backbone stays frozen (gradients never
    reach it); Adam on MSE + L2 over head parameters only."""
    if not train_samples:
        raise ValueError("empty training set")
    cfg = head.config
    rng = np.random.default_rng(seed)
    coll_index = backbone.universe.collection_index
    ref_days = ({s.ref_day for s in train_samples} |
                {s.ref_day for s in val_samples})
    windows = precompute_windows(backbone, prepared, ref_days) \
        if not head.ablation.drop_collection_embedding else {}
    head.fit_norm([row for s in train_samples for row in s.event_rows],
                  [s.global_row for s in train_samples])
    trainable = {k: head.params[k] for k in head.trainable}
    opt = ad.Adam(trainable, lr=cfg.lr)
    best_val = math.inf
    best_state = {k: p.data.copy() for k, p in trainable.items()}
    patience_left = cfg.patience
    log = []
    idx = np.arange(len(train_samples))
    for epoch in range(cfg.max_epochs):
        rng.shuffle(idx)
        total = 0.0
        for start in range(0, len(idx), cfg.batch):
            chunk = idx[start:start + cfg.batch]
            preds = [token_forward(head, train_samples[i], windows, coll_index,
                                   True, rng) for i in chunk]
            targets = np.array([[train_samples[i].target_log_price] for i in chunk])
            pred = ad.concat(preds, axis=0) if len(preds) > 1 else preds[0]
            loss = ad.mse_loss(pred, targets)
            if cfg.l2_weight > 0:
                loss = ad.add(loss, ad.scale(head.l2_penalty(), cfg.l2_weight))
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item() * len(chunk)
        train_loss = total / len(idx)
        val_loss = train_loss
        if val_samples:
            preds, targets = predict_token_samples(head, val_samples, windows,
                                                   coll_index)
            val_loss = float(np.mean((preds - targets) ** 2))
        log.append((epoch, train_loss, val_loss))
        if val_loss < best_val - 1e-9:
            best_val = val_loss
            best_state = {k: p.data.copy() for k, p in trainable.items()}
            patience_left = cfg.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break
    for k, data in best_state.items():
        head.params[k].data = data
    return log, windows


def predict_token_samples(head: TokenHead, samples, windows, coll_index):
    preds = []
    with ad.no_grad():
        for s in samples:
            preds.append(token_forward(head, s, windows, coll_index).item())
    targets = np.array([s.target_log_price for s in samples])
    return np.array(preds), targets


def collection_labels(series, collection, t_end, step):
    """Trend label: 1 iff the median price strictly rises over `step` days."""
    s = series[collection]
    return 1.0 if s.price(t_end + step) - s.price(t_end) > 0 else 0.0


def build_token_samples(records, series, plan, rarity, rates, excluded,
                        history, step):
    """Token sale samples per split, aligned so the collection window ends
    `step` days before the sale. `excluded` holds flagged tx ids."""
    from .ingest import Kind

    by_token: dict[tuple, list] = {}
    for r in records:
        by_token.setdefault((r.collection, r.token), []).append(r)
    out = {"train": [], "val": [], "test": []}
    for (coll, tok), recs in sorted(by_token.items()):
        if coll not in plan.ranges or coll not in series:
            continue
        s = series[coll]
        ranges = plan.ranges[coll]
        sales = [r for r in recs if r.kind is Kind.SALE
                 and r.tx_id not in excluded]
        prefix = 0
        cnt = {"mint": 0, "sale": 0, "transfer": 0, "burn": 0}
        events = []
        for r in sales:
            ref = r.day - step
            if ref < s.first_day + history or ref > s.last_day:
                continue
            split = next((name for name in ("train", "val", "test")
                          if ranges[name].contains(r.day)), None)
            if split is None:
                continue
            # events/counts reflect only history up to the reference day,
            # so the sample never peeks past its collection window
            while prefix < len(recs) and recs[prefix].day <= ref:
                p = recs[prefix]
                cnt[p.kind.value] += 1
                if p.kind is Kind.SALE and p.tx_id not in excluded \
                        and s.covers(p.day):
                    events.append([math.log1p(p.price_eth), rates[p.day],
                                   math.log1p(s.price(p.day))])
                prefix += 1
            grow = np.array([rarity.token_score(coll, tok), cnt["mint"],
                             cnt["sale"], cnt["transfer"], cnt["burn"]],
                            dtype=float)
            grow[1:] = np.log1p(grow[1:])
            out[split].append(TokenSample(
                coll, tok, r.day, math.log1p(r.price_eth), list(events),
                grow, ref))
    return out
