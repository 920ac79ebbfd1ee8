"""Sale cleaning, collection daily series, rarity, and ownership replay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ingest import CollectionMeta, Kind, TransactionRecord


@dataclass
class DailyRow:
    median_price_eth: float
    interpolated: bool
    mint_count: int
    sale_count: int
    transfer_count: int
    burn_count: int
    sale_volume_eth: float
    eth_usd: float


@dataclass
class CollectionDailySeries:
    collection: str
    first_day: int
    last_day: int
    rows: dict[int, DailyRow]

    def price(self, day: int) -> float:
        return self.rows[day].median_price_eth

    def covers(self, day: int) -> bool:
        return self.first_day <= day <= self.last_day


@dataclass
class OwnershipLedger:
    """Day-end holdings from event replay; one holder per token per day-end."""

    first_day: int
    last_day: int
    # day -> {(wallet, collection): held token count}
    holdings: dict[int, dict[tuple[str, str], int]]
    warnings: list[tuple[str, str]] = field(default_factory=list)

    def holdings_on(self, day: int) -> dict[tuple[str, str], int]:
        return self.holdings.get(day, {})

    def holding_count(self, day: int, wallet: str) -> int:
        return sum(n for (w, _c), n in self.holdings_on(day).items() if w == wallet)

    def wallet_totals(self, day: int, series: dict[str, CollectionDailySeries]):
        """Per-wallet (total held count, total asset value in ETH) at day-end.

        Asset value prices each held token at its collection's daily median;
        collections whose series does not cover the day contribute zero.
        """
        totals: dict[str, tuple[int, float]] = {}
        for (w, c), n in self.holdings_on(day).items():
            cnt, val = totals.get(w, (0, 0.0))
            s = series.get(c)
            price = s.price(day) if s is not None and s.covers(day) else 0.0
            totals[w] = (cnt + n, val + n * price)
        return totals


@dataclass
class RarityTable:
    # collection -> {property key -> score}
    property_scores: dict[str, dict[str, float]]
    # collection -> {token -> score}
    token_scores: dict[str, dict[str, float]]

    def token_score(self, collection: str, token: str) -> float:
        return self.token_scores.get(collection, {}).get(token, 0.0)


def _tarjan_scc(nodes, edges):
    """Iterative Tarjan; returns node -> component id."""
    adj: dict[str, list[str]] = {n: [] for n in nodes}
    for u, v in edges:
        adj[u].append(v)
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    comp: dict[str, int] = {}
    counter = 0
    n_comp = 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, 0)]
        while work:
            node, ei = work[-1]
            if ei == 0:
                index[node] = low[node] = counter
                counter += 1
                stack.append(node)
                on_stack.add(node)
            advanced = False
            for i in range(ei, len(adj[node])):
                nxt = adj[node][i]
                if nxt not in index:
                    work[-1] = (node, i + 1)
                    work.append((nxt, 0))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if low[node] == index[node]:
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp[w] = n_comp
                    if w == node:
                        break
                n_comp += 1
            if work:
                parent, _ = work[-1]
                low[parent] = min(low[parent], low[node])
    return comp


def detect_wash_sales(records: list[TransactionRecord]) -> set[str]:
    """Flag sales whose endpoints share a size >= 2 strongly connected
    component of the per-token directed sale graph (ownership cycling
    among a wallet group via sales)."""
    by_token: dict[tuple[str, str], list[TransactionRecord]] = {}
    for r in records:
        if r.kind is Kind.SALE:
            by_token.setdefault((r.collection, r.token), []).append(r)
    flagged: set[str] = set()
    for sales in by_token.values():
        nodes = sorted({r.from_wallet for r in sales} | {r.to_wallet for r in sales})
        edges = [(r.from_wallet, r.to_wallet) for r in sales]
        comp = _tarjan_scc(nodes, edges)
        sizes: dict[int, int] = {}
        for c in comp.values():
            sizes[c] = sizes.get(c, 0) + 1
        for r in sales:
            cu, cv = comp[r.from_wallet], comp[r.to_wallet]
            if cu == cv and sizes[cu] >= 2:
                flagged.add(r.tx_id)
    return flagged


def box_whisker_filter(prices, k: float = 1.5):
    """Quartile fence outlier flagging on a time-ordered price list.

    Q1/Q3 use linear interpolation between order statistics (positions
    (n-1)*q). Returns (retained indices, flagged indices).
    """
    prices = np.asarray(prices, dtype=np.float64)
    if prices.size == 0:
        return [], []
    q1, q3 = np.quantile(prices, [0.25, 0.75])
    iqr = q3 - q1
    lo, hi = q1 - k * iqr, q3 + k * iqr
    flagged = [i for i, p in enumerate(prices) if p < lo or p > hi]
    retained = [i for i in range(len(prices)) if i not in set(flagged)]
    return retained, flagged


def clean_sales(records: list[TransactionRecord]):
    """Full sale-noise pass: wash rings first, then per-collection
    Box-Whisker on the surviving sale price series.

    Returns (wash tx ids, outlier tx ids).
    """
    wash = detect_wash_sales(records)
    outliers: set[str] = set()
    by_collection: dict[str, list[TransactionRecord]] = {}
    for r in records:
        if r.kind is Kind.SALE and r.tx_id not in wash:
            by_collection.setdefault(r.collection, []).append(r)
    for sales in by_collection.values():
        sales.sort(key=lambda r: (r.timestamp, r.tx_id))
        _, flagged = box_whisker_filter([r.price_eth for r in sales])
        for i in flagged:
            outliers.add(sales[i].tx_id)
    return wash, outliers


def aggregate_daily(collection: str, records: list[TransactionRecord],
                    excluded: set[str], rates: dict[int, float],
                    last_day: int | None = None) -> CollectionDailySeries:
    """Daily median price with interior linear interpolation and trailing
    carry-forward. The series starts at the collection's first retained
    sale day. Counts include every transaction (wash-flagged sales count
    as activity); volume sums non-wash sale prices.
    """
    mine = [r for r in records if r.collection == collection]
    day_prices: dict[int, list[float]] = {}
    for r in mine:
        if r.kind is Kind.SALE and r.tx_id not in excluded:
            day_prices.setdefault(r.day, []).append(r.price_eth)
    if not day_prices:
        raise ValueError(f"collection {collection!r}: no priceable days")
    sale_days = sorted(day_prices)
    first_day = sale_days[0]
    if last_day is None:
        last_day = max(r.day for r in mine)
    last_day = max(last_day, sale_days[-1])

    medians: dict[int, float] = {d: float(np.median(p)) for d, p in day_prices.items()}
    # interior gaps: linear interpolation between nearest sale days
    prices: dict[int, tuple[float, bool]] = {}
    for i, d in enumerate(sale_days):
        prices[d] = (medians[d], False)
        if i + 1 < len(sale_days):
            nxt = sale_days[i + 1]
            for g in range(d + 1, nxt):
                frac = (g - d) / (nxt - d)
                prices[g] = (medians[d] + frac * (medians[nxt] - medians[d]), True)
    for g in range(sale_days[-1] + 1, last_day + 1):
        prices[g] = (medians[sale_days[-1]], True)

    counts: dict[int, list] = {}
    for r in mine:
        c = counts.setdefault(r.day, [0, 0, 0, 0, 0.0])
        idx = {Kind.MINT: 0, Kind.SALE: 1, Kind.TRANSFER: 2, Kind.BURN: 3}[r.kind]
        c[idx] += 1
        if r.kind is Kind.SALE and r.tx_id not in excluded:
            c[4] += r.price_eth
    rows: dict[int, DailyRow] = {}
    for d in range(first_day, last_day + 1):
        price, interp = prices[d]
        c = counts.get(d, [0, 0, 0, 0, 0.0])
        if d not in rates:
            raise ValueError(f"no ETH-USD rate for day {d}")
        rows[d] = DailyRow(price, interp, c[0], c[1], c[2], c[3], c[4], rates[d])
    return CollectionDailySeries(collection, first_day, last_day, rows)


def build_daily_series(records, rates, excluded, last_day=None):
    """Per-collection daily series; collections with no priceable sales are
    skipped and reported."""
    series: dict[str, CollectionDailySeries] = {}
    skipped: list[str] = []
    for coll in sorted({r.collection for r in records}):
        try:
            series[coll] = aggregate_daily(coll, records, excluded, rates, last_day)
        except ValueError as e:
            if "no priceable days" in str(e):
                skipped.append(coll)
            else:
                raise
    return series, skipped


def rarity_scores(metas: dict[str, CollectionMeta]) -> RarityTable:
    """Property score = tokens in collection / tokens carrying the property;
    token score = sum over its properties."""
    prop_scores: dict[str, dict[str, float]] = {}
    token_scores: dict[str, dict[str, float]] = {}
    for coll, meta in metas.items():
        n_tokens = meta.total_supply or len(meta.token_properties)
        carriers: dict[str, int] = {}
        for props in meta.token_properties.values():
            for p in props:
                carriers[p] = carriers.get(p, 0) + 1
        prop_scores[coll] = {p: n_tokens / cnt for p, cnt in carriers.items()}
        token_scores[coll] = {
            t: sum(prop_scores[coll][p] for p in props)
            for t, props in meta.token_properties.items()}
    return RarityTable(prop_scores, token_scores)


def replay_ownership(records: list[TransactionRecord],
                     first_day: int | None = None,
                     last_day: int | None = None) -> OwnershipLedger:
    """Replay mint/sale/transfer/burn into day-end holdings.

    Chain data is ground truth: an event whose from_wallet does not hold
    the token is recorded as a consistency warning and applied anyway.
    """
    if not records:
        return OwnershipLedger(0, -1, {})
    if first_day is None:
        first_day = min(r.day for r in records)
    if last_day is None:
        last_day = max(r.day for r in records)
    owner: dict[tuple[str, str], str] = {}
    counts: dict[tuple[str, str], int] = {}
    warnings: list[tuple[str, str]] = []
    holdings: dict[int, dict[tuple[str, str], int]] = {}

    def bump(wallet, coll, delta):
        key = (wallet, coll)
        counts[key] = counts.get(key, 0) + delta
        if counts[key] <= 0:
            del counts[key]

    day = first_day
    for r in sorted(records, key=lambda x: (x.timestamp, x.tx_id)):
        while day < r.day:
            holdings[day] = dict(counts)
            day += 1
        tok = (r.collection, r.token)
        if r.kind is Kind.MINT:
            owner[tok] = r.to_wallet
            bump(r.to_wallet, r.collection, +1)
        else:
            holder = owner.get(tok)
            if holder != r.from_wallet:
                warnings.append(
                    (r.tx_id, f"{r.kind.value} from {r.from_wallet} but holder is {holder}"))
            if holder is not None:
                bump(holder, r.collection, -1)
            if r.kind is Kind.BURN:
                owner.pop(tok, None)
            else:
                owner[tok] = r.to_wallet
                bump(r.to_wallet, r.collection, +1)
    while day <= last_day:
        holdings[day] = dict(counts)
        day += 1
    return OwnershipLedger(first_day, last_day, holdings, warnings)


# ---------------------------------------------------------------- file io

def write_series_csv(path, series: dict[str, CollectionDailySeries]):
    with open(path, "w") as f:
        f.write("collection,day,median_price_eth,interpolated,mint_count,"
                "sale_count,transfer_count,burn_count,sale_volume_eth,eth_usd\n")
        for coll in sorted(series):
            s = series[coll]
            for d in range(s.first_day, s.last_day + 1):
                r = s.rows[d]
                f.write(f"{coll},{d},{r.median_price_eth!r},{int(r.interpolated)},"
                        f"{r.mint_count},{r.sale_count},{r.transfer_count},"
                        f"{r.burn_count},{r.sale_volume_eth!r},{r.eth_usd!r}\n")


def read_series_csv(lines) -> dict[str, CollectionDailySeries]:
    series: dict[str, CollectionDailySeries] = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("collection,"):
            continue
        coll, d, price, interp, mc, sc, tc, bc, vol, rate = line.split(",")
        row = DailyRow(float(price), bool(int(interp)), int(mc), int(sc),
                       int(tc), int(bc), float(vol), float(rate))
        s = series.get(coll)
        if s is None:
            s = series[coll] = CollectionDailySeries(coll, int(d), int(d), {})
        s.first_day = min(s.first_day, int(d))
        s.last_day = max(s.last_day, int(d))
        s.rows[int(d)] = row
    return series


def write_flags_csv(path, wash: set[str], outliers: set[str]):
    with open(path, "w") as f:
        f.write("tx_id,reason\n")
        for tx in sorted(wash):
            f.write(f"{tx},wash\n")
        for tx in sorted(outliers):
            f.write(f"{tx},outlier\n")


def read_flags_csv(lines):
    wash, outliers = set(), set()
    for line in lines:
        line = line.strip()
        if not line or line.startswith("tx_id,"):
            continue
        tx, reason = line.split(",")
        (wash if reason == "wash" else outliers).add(tx)
    return wash, outliers


def write_rarity_csv(path, table: RarityTable):
    with open(path, "w") as f:
        f.write("collection,token,rarity_score\n")
        for coll in sorted(table.token_scores):
            for tok in sorted(table.token_scores[coll]):
                f.write(f"{coll},{tok},{table.token_scores[coll][tok]!r}\n")


def read_rarity_csv(lines) -> RarityTable:
    token_scores: dict[str, dict[str, float]] = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("collection,"):
            continue
        coll, tok, score = line.split(",")
        token_scores.setdefault(coll, {})[tok] = float(score)
    return RarityTable({}, token_scores)


def write_ledger_csv(path, ledger: OwnershipLedger):
    with open(path, "w") as f:
        f.write(f"# first_day={ledger.first_day} last_day={ledger.last_day}\n")
        f.write("day,wallet,collection,count\n")
        for d in range(ledger.first_day, ledger.last_day + 1):
            for (w, c) in sorted(ledger.holdings_on(d)):
                f.write(f"{d},{w},{c},{ledger.holdings[d][(w, c)]}\n")


def read_ledger_csv(lines) -> OwnershipLedger:
    first_day, last_day = 0, -1
    holdings: dict[int, dict[tuple[str, str], int]] = {}
    for line in lines:
        line = line.strip()
        if line.startswith("#"):
            parts = dict(p.split("=") for p in line[1:].split())
            first_day, last_day = int(parts["first_day"]), int(parts["last_day"])
            continue
        if not line or line.startswith("day,"):
            continue
        d, w, c, n = line.split(",")
        holdings.setdefault(int(d), {})[(w, c)] = int(n)
    for d in range(first_day, last_day + 1):
        holdings.setdefault(d, {})
    return OwnershipLedger(first_day, last_day, holdings)
