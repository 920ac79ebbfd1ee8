"""Daily snapshot heterogeneous transaction graphs and feature normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .ingest import EmbeddingTable, Kind, TransactionRecord
from .preprocess import CollectionDailySeries, OwnershipLedger


class Relation(Enum):
    SALE_WW = "sale_ww"
    TRANSFER_WW = "transfer_ww"
    MINT = "mint"
    HOLD = "hold"
    BURN = "burn"
    SALE_FROM = "sale_from"
    SALE_TO = "sale_to"
    TRANSFER_IN = "transfer_in"
    TRANSFER_OUT = "transfer_out"


WALLET_WALLET_RELATIONS = {Relation.SALE_WW, Relation.TRANSFER_WW}
FEATURED_RELATIONS = {Relation.SALE_WW: "price", Relation.SALE_FROM: "price",
                      Relation.SALE_TO: "price", Relation.HOLD: "count"}

# wallet dynamic feature columns
WALLET_FEATURES = ["wallet_mint_count", "wallet_sale_count", "wallet_transfer_count",
                   "wallet_burn_count", "wallet_holding_count", "wallet_asset_value"]
# collection dynamic feature columns
COLLECTION_FEATURES = ["collection_price", "collection_mint_count",
                       "collection_sale_count", "collection_transfer_count",
                       "collection_burn_count", "collection_eth_usd",
                       "collection_sale_volume"]
# eth_usd passes through untransformed; everything else is log1p
_WALLET_LOG1P = np.ones(6, dtype=bool)
_COLLECTION_LOG1P = np.array([True, True, True, True, True, False, True])


@dataclass
class EdgeSet:
    """Parallel arrays; multigraph (duplicate events keep duplicate edges)."""

    src: np.ndarray  # wallet index for WW; collection index otherwise
    dst: np.ndarray  # wallet index
    feat: np.ndarray | None  # (E,) raw feature or None


@dataclass
class SnapshotGraph:
    day: int
    wallets: list[str]
    collections: list[str]
    wallet_feats: np.ndarray        # (Nw, 6) raw
    collection_feats: np.ndarray    # (Nc, 7) raw; zero rows where absent
    collection_present: np.ndarray  # (Nc,) bool: series covers this day
    edges: dict[Relation, EdgeSet]

    def edge_count(self, relation: Relation) -> int:
        e = self.edges.get(relation)
        return 0 if e is None else len(e.src)


@dataclass
class Universe:
    """Fixed node universe: everything active in the training window."""

    wallets: list[str]
    collections: list[str]
    wallet_index: dict[str, int] = field(default_factory=dict)
    collection_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.wallet_index:
            self.wallet_index = {w: i for i, w in enumerate(self.wallets)}
        if not self.collection_index:
            self.collection_index = {c: i for i, c in enumerate(self.collections)}


def build_universe(records: list[TransactionRecord], ledger: OwnershipLedger,
                   window: tuple[int, int]) -> Universe:
    lo, hi = window
    wallets: set[str] = set()
    collections: set[str] = set()
    for r in records:
        if lo <= r.day <= hi:
            collections.add(r.collection)
            if r.from_wallet:
                wallets.add(r.from_wallet)
            if r.to_wallet:
                wallets.add(r.to_wallet)
    for d in range(max(lo, ledger.first_day), min(hi, ledger.last_day) + 1):
        for (w, c) in ledger.holdings_on(d):
            wallets.add(w)
            collections.add(c)
    return Universe(sorted(wallets), sorted(collections))


def static_features(universe: Universe, visual: EmbeddingTable,
                    textual: EmbeddingTable, metas) -> np.ndarray:
    """(Nc, 2D+1): visual embedding, textual embedding, total supply (raw)."""
    rows = []
    for c in universe.collections:
        supply = metas[c].total_supply if c in metas else 0
        rows.append(np.concatenate([visual.get(c), textual.get(c), [supply]]))
    return np.array(rows)


def build_snapshot(day: int, day_records: list[TransactionRecord],
                   series: dict[str, CollectionDailySeries],
                   ledger: OwnershipLedger, universe: Universe,
                   wash: set[str]) -> SnapshotGraph:
    """One day's typed graph. Wash-flagged sales produce no sale edges but
    still count in the daily activity features. Collections whose series
    does not cover the day are dropped (no node features, no edges)."""
    widx, cidx = universe.wallet_index, universe.collection_index
    nw, nc = len(universe.wallets), len(universe.collections)

    present = np.zeros(nc, dtype=bool)
    coll_feats = np.zeros((nc, 7))
    for c, i in cidx.items():
        s = series.get(c)
        if s is not None and s.covers(day):
            present[i] = True
            row = s.rows[day]
            coll_feats[i] = [row.median_price_eth, row.mint_count, row.sale_count,
                             row.transfer_count, row.burn_count, row.eth_usd,
                             row.sale_volume_eth]

    wallet_feats = np.zeros((nw, 6))
    edge_lists: dict[Relation, list[tuple[int, int, float]]] = {r: [] for r in Relation}
    kind_col = {Kind.MINT: 0, Kind.SALE: 1, Kind.TRANSFER: 2, Kind.BURN: 3}
    for r in day_records:
        col = kind_col[r.kind]
        for w in (r.from_wallet, r.to_wallet):
            if w is not None and w in widx:
                wallet_feats[widx[w], col] += 1
        ci = cidx.get(r.collection)
        if ci is None or not present[ci]:
            continue
        fw = widx.get(r.from_wallet) if r.from_wallet else None
        tw = widx.get(r.to_wallet) if r.to_wallet else None
        if r.kind is Kind.SALE:
            if r.tx_id in wash:
                continue
            if fw is not None and tw is not None:
                edge_lists[Relation.SALE_WW].append((fw, tw, r.price_eth))
            if fw is not None:
                edge_lists[Relation.SALE_FROM].append((ci, fw, r.price_eth))
            if tw is not None:
                edge_lists[Relation.SALE_TO].append((ci, tw, r.price_eth))
        elif r.kind is Kind.TRANSFER:
            if fw is not None and tw is not None:
                edge_lists[Relation.TRANSFER_WW].append((fw, tw, 0.0))
            if tw is not None:
                edge_lists[Relation.TRANSFER_IN].append((ci, tw, 0.0))
            if fw is not None:
                edge_lists[Relation.TRANSFER_OUT].append((ci, fw, 0.0))
        elif r.kind is Kind.MINT:
            if tw is not None:
                edge_lists[Relation.MINT].append((ci, tw, 0.0))
        elif r.kind is Kind.BURN:
            if fw is not None:
                edge_lists[Relation.BURN].append((ci, fw, 0.0))

    # day-end holdings: hold edges plus wallet holding-count / asset-value
    for (w, c), n in sorted(ledger.holdings_on(day).items()):
        wi = widx.get(w)
        if wi is None:
            continue
        wallet_feats[wi, 4] += n
        ci = cidx.get(c)
        s = series.get(c)
        if s is not None and s.covers(day):
            wallet_feats[wi, 5] += n * s.price(day)
            if ci is not None and present[ci]:
                edge_lists[Relation.HOLD].append((ci, wi, float(n)))

    edges: dict[Relation, EdgeSet] = {}
    for rel, items in edge_lists.items():
        if not items:
            continue
        src = np.array([i[0] for i in items], dtype=np.intp)
        dst = np.array([i[1] for i in items], dtype=np.intp)
        feat = np.array([i[2] for i in items]) if rel in FEATURED_RELATIONS else None
        edges[rel] = EdgeSet(src, dst, feat)
    return SnapshotGraph(day, universe.wallets, universe.collections,
                         wallet_feats, coll_feats, present, edges)


def build_snapshots(records, series, ledger, universe, wash, days):
    by_day: dict[int, list[TransactionRecord]] = {}
    for r in records:
        by_day.setdefault(r.day, []).append(r)
    return {d: build_snapshot(d, by_day.get(d, []), series, ledger, universe, wash)
            for d in days}


@dataclass
class FeatureSchema:
    """Per-block transform + standardization fitted on training days only."""

    blocks: dict[str, dict]  # name -> {log1p: bool array, mean, std}

    def normalize(self, name: str, raw: np.ndarray) -> np.ndarray:
        b = self.blocks[name]
        x = np.where(b["log1p"], np.log1p(np.maximum(raw, 0.0)), raw)
        return (x - b["mean"]) / b["std"]

    def to_json(self) -> str:
        out = {name: {k: np.asarray(v).tolist() for k, v in b.items()}
               for name, b in self.blocks.items()}
        return json.dumps(out, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FeatureSchema":
        raw = json.loads(text)
        blocks = {name: {"log1p": np.array(b["log1p"], dtype=bool),
                         "mean": np.array(b["mean"]),
                         "std": np.array(b["std"])}
                  for name, b in raw.items()}
        return cls(blocks)


def _fit_block(rows: np.ndarray, log1p_mask) -> dict:
    x = np.where(log1p_mask, np.log1p(np.maximum(rows, 0.0)), rows)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-6)
    return {"log1p": np.asarray(log1p_mask, dtype=bool), "mean": mean, "std": std}


def fit_schema(training_days, snapshots: dict[int, SnapshotGraph],
               static: np.ndarray | None = None) -> FeatureSchema:
    """Fit normalization on training-day snapshots; validation and test
    days reuse these statistics (no leakage). `static` is the (Nc, 2D+1)
    static feature matrix whose last column (total supply) is standardized;
    embedding columns pass through untouched."""
    training_days = [d for d in training_days if d in snapshots]
    if not training_days:
        raise ValueError("empty training split: no snapshots to fit on")
    wallet_rows = np.concatenate([snapshots[d].wallet_feats for d in training_days])
    coll_rows = np.concatenate(
        [snapshots[d].collection_feats[snapshots[d].collection_present]
         for d in training_days])
    if coll_rows.size == 0:
        coll_rows = np.zeros((1, 7))
    prices, counts = [], []
    for d in training_days:
        g = snapshots[d]
        for rel, fname in FEATURED_RELATIONS.items():
            e = g.edges.get(rel)
            if e is not None and e.feat is not None:
                (prices if fname == "price" else counts).append(e.feat)
    price_rows = (np.concatenate(prices) if prices else np.zeros(1)).reshape(-1, 1)
    count_rows = (np.concatenate(counts) if counts else np.zeros(1)).reshape(-1, 1)
    supply_rows = (static[:, -1:] if static is not None and len(static)
                   else np.zeros((1, 1)))
    return FeatureSchema({
        "wallet_dynamic": _fit_block(wallet_rows, _WALLET_LOG1P),
        "collection_dynamic": _fit_block(coll_rows, _COLLECTION_LOG1P),
        "edge_price": _fit_block(price_rows, np.array([True])),
        "edge_count": _fit_block(count_rows, np.array([True])),
        "collection_supply": _fit_block(supply_rows, np.array([True])),
    })


def normalize_static(schema: FeatureSchema, static: np.ndarray) -> np.ndarray:
    """Embeddings pass through; the supply column is standardized."""
    out = static.copy()
    out[:, -1:] = schema.normalize("collection_supply", static[:, -1:])
    return out


def write_snapshot_csv(path, graph: SnapshotGraph):
    """Typed edge list for inspection and cross-implementation diffing."""
    with open(path, "w") as f:
        f.write("relation,src,dst,feature\n")
        for rel in Relation:
            e = graph.edges.get(rel)
            if e is None:
                continue
            src_names = (graph.wallets if rel in WALLET_WALLET_RELATIONS
                         else graph.collections)
            for i in range(len(e.src)):
                feat = "" if e.feat is None else repr(float(e.feat[i]))
                f.write(f"{rel.value},{src_names[e.src[i]]},"
                        f"{graph.wallets[e.dst[i]]},{feat}\n")


def feature_location(name: str, embed_dim: int):
    """Resolve a feature name to (block, column slice) for permutation
    importance. Embedding blocks permute as whole vectors."""
    if name in WALLET_FEATURES:
        return "wallet_dynamic", slice(WALLET_FEATURES.index(name),
                                       WALLET_FEATURES.index(name) + 1)
    if name in COLLECTION_FEATURES:
        return "collection_dynamic", slice(COLLECTION_FEATURES.index(name),
                                           COLLECTION_FEATURES.index(name) + 1)
    if name == "visual_embedding":
        return "collection_static", slice(0, embed_dim)
    if name == "textual_embedding":
        return "collection_static", slice(embed_dim, 2 * embed_dim)
    if name == "collection_supply":
        return "collection_static", slice(2 * embed_dim, 2 * embed_dim + 1)
    raise KeyError(f"unknown feature name {name!r}")
