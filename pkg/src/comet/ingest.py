"""Parsing and validation of raw market data files.

All ids are opaque, case-normalized (lowercased) strings. Day indices are
UTC calendar days: day = floor(timestamp / 86400).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

SECONDS_PER_DAY = 86400


class Kind(Enum):
    MINT = "mint"
    SALE = "sale"
    TRANSFER = "transfer"
    BURN = "burn"


@dataclass(frozen=True)
class TransactionRecord:
    tx_id: str
    timestamp: int
    kind: Kind
    from_wallet: str | None
    to_wallet: str | None
    collection: str
    token: str
    price_eth: float | None

    @property
    def day(self) -> int:
        return self.timestamp // SECONDS_PER_DAY


@dataclass(frozen=True)
class ParseError:
    line_no: int
    reason: str


@dataclass(frozen=True)
class ColumnSchema:
    """Declares column order and framing of a delimited transaction export."""

    columns: tuple[str, ...] = (
        "tx_id", "timestamp", "kind", "from_wallet", "to_wallet",
        "collection", "token", "price_eth",
    )
    delimiter: str = ","
    has_header: bool = False


@dataclass
class CollectionMeta:
    collection: str
    total_supply: int
    token_properties: dict[str, frozenset[str]] = field(default_factory=dict)


class EmbeddingSource(Enum):
    FILE = "file"
    HASH_FALLBACK = "hash_fallback"


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray]
    source: EmbeddingSource

    def get(self, ident: str) -> np.ndarray:
        ident = ident.lower()
        v = self.vectors.get(ident)
        if v is None:
            v = fallback_embedding(ident, self.dim)
            self.vectors[ident] = v
        return v


def _norm_id(s: str) -> str:
    return s.strip().lower()


def _parse_line(fields: list[str], schema: ColumnSchema) -> TransactionRecord:
    if len(fields) != len(schema.columns):
        raise ValueError(
            f"expected {len(schema.columns)} fields, got {len(fields)}")
    row = dict(zip(schema.columns, fields))
    tx_id = _norm_id(row["tx_id"])
    if not tx_id:
        raise ValueError("empty tx_id")
    try:
        timestamp = int(row["timestamp"])
    except ValueError:
        raise ValueError(f"bad timestamp {row['timestamp']!r}")
    try:
        kind = Kind(row["kind"].strip().lower())
    except ValueError:
        raise ValueError(f"unknown kind {row['kind']!r}")
    from_wallet = _norm_id(row["from_wallet"]) or None
    to_wallet = _norm_id(row["to_wallet"]) or None
    collection = _norm_id(row["collection"])
    token = _norm_id(row["token"])
    if not collection or not token:
        raise ValueError("collection and token are required")
    price_raw = row["price_eth"].strip()

    if kind is Kind.MINT and from_wallet is not None:
        raise ValueError("mint must not have a from_wallet")
    if kind is Kind.BURN and to_wallet is not None:
        raise ValueError("burn must not have a to_wallet")
    if kind is not Kind.MINT and from_wallet is None:
        raise ValueError(f"from_wallet required for {kind.value}")
    if kind is not Kind.BURN and to_wallet is None:
        raise ValueError(f"to_wallet required for {kind.value}")

    if kind is Kind.SALE:
        if not price_raw:
            raise ValueError("price required for sale")
        price = float(price_raw)
        if not np.isfinite(price) or price < 0:
            raise ValueError(f"price must be a nonnegative number, got {price_raw!r}")
    else:
        if price_raw:
            raise ValueError(f"price only allowed for sale, got {price_raw!r}")
        price = None
    return TransactionRecord(tx_id, timestamp, kind, from_wallet, to_wallet,
                             collection, token, price)


def parse_transactions(lines, schema: ColumnSchema | None = None):
    """Parse delimited transaction lines.

    Returns (records sorted by (timestamp, tx_id), parse errors). Malformed
    lines are reported with their 1-based line number, never dropped silently.
    """
    schema = schema or ColumnSchema()
    records: list[TransactionRecord] = []
    errors: list[ParseError] = []
    for line_no, line in enumerate(lines, start=1):
        if schema.has_header and line_no == 1:
            continue
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        try:
            records.append(_parse_line(line.split(schema.delimiter), schema))
        except ValueError as e:
            errors.append(ParseError(line_no, str(e)))
    records.sort(key=lambda r: (r.timestamp, r.tx_id))
    return records, errors


def load_rates(lines) -> dict[int, float]:
    """rates.csv: day, eth_usd. Coverage must be gap-free."""
    rates: dict[int, float] = {}
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("day,"):
            continue
        day_s, rate_s = line.split(",")
        day, rate = int(day_s), float(rate_s)
        if rate <= 0:
            raise ValueError(f"line {line_no}: rate must be positive, got {rate}")
        if day in rates:
            raise ValueError(f"line {line_no}: duplicate day {day}")
        rates[day] = rate
    if rates:
        days = sorted(rates)
        missing = set(range(days[0], days[-1] + 1)) - set(days)
        if missing:
            raise ValueError(f"rate table has gaps at days {sorted(missing)[:10]}")
    return rates


def load_collections(collections_lines, properties_lines) -> dict[str, CollectionMeta]:
    """collections.csv: collection, total_supply; properties.csv: collection, token, property_key."""
    metas: dict[str, CollectionMeta] = {}
    for line in collections_lines:
        line = line.strip()
        if not line or line.startswith("collection,"):
            continue
        coll, supply = line.split(",")
        coll = _norm_id(coll)
        metas[coll] = CollectionMeta(coll, int(supply))
    props: dict[str, dict[str, set[str]]] = {}
    for line in properties_lines:
        line = line.strip()
        if not line or line.startswith("collection,"):
            continue
        coll, token, key = line.split(",")
        coll, token = _norm_id(coll), _norm_id(token)
        if coll not in metas:
            raise ValueError(f"properties reference unknown collection {coll!r}")
        props.setdefault(coll, {}).setdefault(token, set()).add(key.strip())
    for coll, by_token in props.items():
        metas[coll].token_properties = {
            t: frozenset(keys) for t, keys in by_token.items()}
    return metas


def load_embeddings(lines, expected_dim: int | None = None) -> EmbeddingTable:
    """Embedding file: first line `dim=<D>`, then rows `id,v1,...,vD`."""
    it = iter(lines)
    try:
        header = next(it).strip()
    except StopIteration:
        raise ValueError("empty embedding file")
    if not header.startswith("dim="):
        raise ValueError(f"embedding file must start with 'dim=<D>', got {header!r}")
    dim = int(header[4:])
    if dim < 1:
        raise ValueError(f"dim must be positive, got {dim}")
    if expected_dim is not None and dim != expected_dim:
        raise ValueError(f"embedding dim {dim} does not match expected {expected_dim}")
    vectors: dict[str, np.ndarray] = {}
    for line_no, line in enumerate(it, start=2):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        ident = _norm_id(parts[0])
        if ident in vectors:
            raise ValueError(f"line {line_no}: duplicate id {ident!r}")
        values = parts[1:]
        if len(values) != dim:
            raise ValueError(
                f"line {line_no}: row for {ident!r} has {len(values)} values, expected {dim}")
        vectors[ident] = np.array([float(v) for v in values], dtype=np.float64)
    return EmbeddingTable(dim, vectors, EmbeddingSource.FILE)


def fallback_embedding(ident: str, dim: int) -> np.ndarray:
    """Deterministic unit vector from a stable hash of the id.

    Used when no pretrained embedding file is available; identical across
    runs and platforms.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    digest = hashlib.sha256(ident.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def fallback_table(ids, dim: int) -> EmbeddingTable:
    return EmbeddingTable(dim, {_norm_id(i): fallback_embedding(_norm_id(i), dim)
                                for i in ids},
                          EmbeddingSource.HASH_FALLBACK)
