"""Deterministic synthetic NFT market generator with planted phenomena.

The generator emits the same file formats as real ingestion plus a
`truth.json` manifest of everything it planted, so downstream behavior can
be checked against ground truth:

- collection prices follow seeded geometric random walks;
- designated "smart money" wallets occasionally buy into a collection and
  flip their purchases the next day; whenever their net buys on day d
  exceed the threshold, the latent price is multiplied by (1 + bump) on
  day d + lag. A disjoint "distributor" group runs the same flips ahead of
  price drops, so the direction of a planted move is readable only from
  which wallets transacted;
- wash rings cycle dedicated tokens among their members via sales, so the
  planted ring sales are exactly the cyclic ones;
- ordinary sales always go to a wallet that never owned the token before,
  which keeps every non-ring per-token sale graph acyclic;
- background buyer activity is drawn from a power law;
- token sale prices are the collection price times a rarity-linked
  multiplier plus noise.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np


@dataclass
class SyntheticSpec:
    collections: int = 20
    wallets: int = 500
    days: int = 365
    tokens_per_collection: int = 40
    daily_sales: int = 160
    activity_exponent: float = 2.5  # density exponent alpha, p(x) ~ x^-alpha
    smart_wallets: int = 25
    accumulation_threshold: int = 3
    lag: int = 3
    bump: float = 0.35
    burst_rate: float = 0.12        # per collection-day chance of a burst
    mean_reversion: float = 0.05    # pull of log price toward its base level
    wash_rings: int = 3
    ring_size: int = 3
    ring_cycles: int = 4
    outlier_rate: float = 0.01
    embed_dim: int = 8
    walk_sigma: float = 0.015
    sale_noise: float = 0.04

    def validate(self):
        if self.ring_size < 2:
            raise ValueError(f"ring size must be >= 2, got {self.ring_size}")
        if self.lag >= self.days:
            raise ValueError(f"lag {self.lag} must be < days {self.days}")
        if self.activity_exponent <= 1.0:
            raise ValueError("activity exponent must be > 1")
        reserved = self.smart_wallets + self.wash_rings * self.ring_size
        if reserved > self.wallets:
            raise ValueError(
                f"infeasible spec: {reserved} reserved wallets > {self.wallets} total")
        if self.collections < 1 or self.days < 10 or self.tokens_per_collection < 2:
            raise ValueError("spec too small to generate a market")


@dataclass
class _Token:
    coll: str
    token: str
    owner: str
    past_owners: set
    multiplier: float
    alive: bool = True
    is_ring: bool = False


_TIERS = ["rare", "uncommon", "common"]


def _tier_of(index: int, total: int) -> str:
    # first 10% rare, next 30% uncommon, rest common
    if index < max(1, total // 10):
        return "rare"
    if index < max(2, (4 * total) // 10):
        return "uncommon"
    return "common"


def gen_synthetic(spec: SyntheticSpec, seed: int, outdir) -> dict:
    """Generate the market into `outdir`; returns the truth manifest."""
    spec.validate()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    wallets = [f"w{i:04d}" for i in range(spec.wallets)]
    smart = wallets[:spec.smart_wallets]
    smart_set = set(smart)
    # first half buys ahead of pumps, second half ahead of drops
    bulls = smart[:(len(smart) + 1) // 2]
    bears = smart[(len(smart) + 1) // 2:]
    n_ring_wallets = spec.wash_rings * spec.ring_size
    ring_wallets = wallets[spec.wallets - n_ring_wallets:] if n_ring_wallets else []
    ring_set = set(ring_wallets)
    pool_wallets = [w for w in wallets if w not in smart_set and w not in ring_set]
    colls = [f"c{i:02d}" for i in range(spec.collections)]

    # transfer community structure: fixed-size groups over non-ring wallets
    group_size = max(5, spec.smart_wallets)
    groupable = [w for w in wallets if w not in ring_set]
    groups = [groupable[i:i + group_size] for i in range(0, len(groupable), group_size)]
    group_of = {w: gi for gi, g in enumerate(groups) for w in g}

    # tokens and rarity-linked price multipliers
    tokens: dict[str, _Token] = {}
    properties_rows = []
    for c in colls:
        n = spec.tokens_per_collection
        tier_counts = {t: 0 for t in _TIERS}
        tiers = [_tier_of(i, n) for i in range(n)]
        for t in tiers:
            tier_counts[t] += 1
        bgs = [f"bg{i % 4}" for i in range(n)]
        bg_counts = {}
        for b in bgs:
            bg_counts[b] = bg_counts.get(b, 0) + 1
        scores = []
        for i in range(n):
            tid = f"{c}_t{i:03d}"
            properties_rows.append((c, tid, f"tier:{tiers[i]}"))
            properties_rows.append((c, tid, bgs[i]))
            scores.append(n / tier_counts[tiers[i]] + n / bg_counts[bgs[i]])
        lo, hi = min(scores), max(scores)
        span = (hi - lo) or 1.0
        for i in range(n):
            tid = f"{c}_t{i:03d}"
            mult = 0.94 + 0.12 * (scores[i] - lo) / span
            tokens[tid] = _Token(c, tid, "", set(), mult)

    # dedicated wash-ring tokens
    ring_members: list[list[str]] = []
    ring_tokens: list[str] = []
    for r in range(spec.wash_rings):
        members = ring_wallets[r * spec.ring_size:(r + 1) * spec.ring_size]
        ring_members.append(members)
        c = colls[r % spec.collections]
        tid = f"{c}_wash{r}"
        tokens[tid] = _Token(c, tid, "", set(), 1.0, is_ring=True)
        ring_tokens.append(tid)
        properties_rows.append((c, tid, "tier:common"))
        properties_rows.append((c, tid, "bg0"))

    coll_tokens = {c: [t for t in tokens if tokens[t].coll == c and
                       not tokens[t].is_ring] for c in colls}

    # power-law buyer activity: pool of buyer slots, consumed sequentially
    alpha = spec.activity_exponent
    u = rng.random(len(pool_wallets))
    raw = np.power(1.0 - u, -1.0 / (alpha - 1.0))
    # 50% slack so burst buyers and skipped slots never drain the pool dry
    target_total = int(spec.daily_sales * (spec.days - 1) * 1.5)
    counts = np.maximum(1, np.rint(raw * target_total / raw.sum())).astype(int)
    buyer_pool = deque()
    slots = [w for w, n in zip(pool_wallets, counts) for _ in range(int(n))]
    order = rng.permutation(len(slots))
    for i in order:
        buyer_pool.append(slots[i])
    activity_counts = {w: int(n) for w, n in zip(pool_wallets, counts)}

    def pop_buyer(tok: _Token):
        for _ in range(min(len(buyer_pool), 50)):
            w = buyer_pool.popleft()
            if w not in tok.past_owners and w != tok.owner:
                return w
            buyer_pool.append(w)
        return None

    # wash-ring sale schedule: evenly spread cycles
    ring_schedule: dict[int, list[tuple[int, str, str, str]]] = {}
    for r, members in enumerate(ring_members):
        steps = spec.ring_size * spec.ring_cycles
        for s in range(steps):
            day = 1 + ((s + 1) * (spec.days - 2)) // (steps + 1)
            frm = members[s % spec.ring_size]
            to = members[(s + 1) % spec.ring_size]
            ring_schedule.setdefault(day, []).append((r, frm, to, ring_tokens[r]))

    events = []          # csv rows in chronological order
    tx_counter = 0
    wash_tx_ids = []
    truth_bumps = {c: [] for c in colls}
    truth_bursts = {c: [] for c in colls}
    latent_log = {c: [] for c in colls}

    def emit(day, seq, kind, frm, to, coll, token, price):
        nonlocal tx_counter
        tx = f"tx{tx_counter:07d}"
        tx_counter += 1
        ts = day * 86400 + seq
        p = "" if price is None else repr(float(price))
        events.append(f"{tx},{ts},{kind},{frm or ''},{to or ''},{coll},{token},{p}")
        return tx

    # day 0: mints. A slice of each collection goes to smart wallets so
    # they always show up as holders; the rest to random background wallets.
    seq = 0
    for c in colls:
        for i, tid in enumerate(coll_tokens[c]):
            if i % 7 == 0 and smart:
                owner = smart[(i + colls.index(c)) % len(smart)]
            else:
                owner = pool_wallets[int(rng.integers(0, len(pool_wallets)))]
            tokens[tid].owner = owner
            tokens[tid].past_owners.add(owner)
            emit(0, seq, "mint", None, owner, c, tid, None)
            seq += 1
    for r, tid in enumerate(ring_tokens):
        owner = ring_members[r][0]
        tokens[tid].owner = owner
        tokens[tid].past_owners.add(owner)
        emit(0, seq, "mint", None, owner, tokens[tid].coll, tid, None)
        seq += 1

    # latent log price = base + bump level + mean-reverting noise. The bump
    # level steps by the planted bursts (see the burst schedule below for
    # why the level stays in a narrow band with fixed occupancy).
    base_log = {c: rng.uniform(math.log(0.1), math.log(3.0)) for c in colls}
    noise_dev = {c: 0.0 for c in colls}
    level = {c: 0.0 for c in colls}          # applied log bump level
    latent = {c: math.exp(base_log[c]) for c in colls}
    for c in colls:
        latent_log[c].append(latent[c])      # day-0 entry: day == list index
    # bursts arrive at jittered regular intervals (mean 1/burst_rate days).
    # Directions come in shuffled up/down pairs: the first of each pair is
    # a pure coin flip readable only from who transacts, and the pairing
    # pins level occupancy to {-1: 25%, 0: 50%, +1: 25%} so the interquartile
    # fences always contain the whole band.
    burst_days: dict[str, dict[int, bool]] = {}
    for c in colls:
        days_c = []
        t = 4 + int(rng.integers(0, max(2, int(0.5 / spec.burst_rate))))
        while t + spec.lag < spec.days:
            days_c.append(t)
            mean_gap = 1.0 / spec.burst_rate
            t += max(2, int(round(mean_gap * (0.75 + 0.5 * rng.random()))))
        dirs = []
        while len(dirs) < len(days_c):
            pair = [True, False]
            if rng.integers(0, 2):
                pair.reverse()
            dirs.extend(pair)
        burst_days[c] = dict(zip(days_c, dirs))
    pending: dict[tuple[str, int], float] = {}
    rates = [2000.0]
    all_tokens_flat = sorted(t for t in tokens if not tokens[t].is_ring)
    # tokens bought during a burst, parked for next-day resale: the flip
    # keeps end-of-day holdings (and so hold edges) almost unchanged
    flip_hold: set[str] = set()
    resale_queue: dict[tuple[int, str], list] = {}  # (day, coll) -> [(w, tid)]

    sales_per_day = spec.daily_sales

    def do_sale(tok: _Token, buyer, day, seq, price):
        tx = emit(day, seq, "sale", tok.owner, buyer, tok.coll, tok.token, price)
        tok.owner = buyer
        tok.past_owners.add(buyer)
        return tx

    for day in range(1, spec.days):
        seq = 0
        rates.append(rates[-1] * math.exp(rng.normal(0.0, 0.005)))
        for c in colls:
            noise_dev[c] = (1.0 - spec.mean_reversion) * noise_dev[c] + \
                rng.normal(0.0, spec.walk_sigma)
            level[c] += math.log(pending.pop((c, day), 1.0))
            latent[c] = math.exp(base_log[c] + level[c] + noise_dev[c])
            latent_log[c].append(latent[c])

        # transfers keep the community graph alive and move inventory
        for _ in range(8):
            tid = all_tokens_flat[int(rng.integers(0, len(all_tokens_flat)))]
            tok = tokens[tid]
            if not tok.alive or tok.owner not in group_of or tid in flip_hold:
                continue
            g = groups[group_of[tok.owner]]
            to = g[int(rng.integers(0, len(g)))]
            if to == tok.owner:
                continue
            emit(day, seq, "transfer", tok.owner, to, tok.coll, tid, None)
            seq += 1
            tok.owner = to
            tok.past_owners.add(to)

        # smart wallets shuffle inventory among themselves every day, so a
        # single wallet's holding count is noisy; only the sale events they
        # place during bursts stand out from the churn
        if len(smart) >= 2:
            for _ in range(72):
                for _try in range(10):
                    tid = all_tokens_flat[int(rng.integers(0, len(all_tokens_flat)))]
                    tok = tokens[tid]
                    if tok.alive and tok.owner in smart_set \
                            and tid not in flip_hold:
                        break
                else:
                    continue
                to = smart[int(rng.integers(0, len(smart)))]
                if to == tok.owner:
                    continue
                emit(day, seq, "transfer", tok.owner, to, tok.coll, tid, None)
                seq += 1
                tok.owner = to
                tok.past_owners.add(to)

        # daily sales: every collection gets a guaranteed base so medians
        # always rest on sales; the remainder is spread with heavy-tailed
        # day-to-day noise. On burst days a few of the day's ordinary sales
        # are replaced by buys from one designated group (bulls before a
        # pump, bears before a drop), and those buys are flipped back into
        # the next day's ordinary sales — so counts, prices, and end-of-day
        # holdings all match the background, and the planted signal lives
        # only in who transacts.
        base = 5
        extras = max(0, sales_per_day - base * len(colls))
        weights = rng.gamma(1.0, size=len(colls))
        alloc = base + rng.multinomial(extras, weights / weights.sum())
        smart_buy: dict[str, list] = {}
        burst_up: dict[str, bool] = {}
        if day + spec.lag < spec.days:
            for c in colls:
                if day not in burst_days[c]:
                    continue
                up = burst_days[c][day]
                group = bulls if up else bears
                k = min(spec.accumulation_threshold + 2, base, len(group))
                smart_buy[c] = [group[i] for i in
                                rng.choice(len(group), size=k, replace=False)]
                burst_up[c] = up
        bought = {c: [] for c in smart_buy}
        day_colls = [c for c, k in zip(colls, alloc) for _ in range(int(k))]
        for c_sale in day_colls:
            if not buyer_pool:
                break
            pool = coll_tokens[c_sale]
            resales = resale_queue.get((day, c_sale))
            if resales:
                w, tid = resales.pop()
                tok = tokens[tid]
                buyer = pop_buyer(tok)
                if buyer is not None:
                    flip_hold.discard(tid)
                    price = latent[c_sale] * tok.multiplier * \
                        math.exp(rng.normal(0.0, spec.sale_noise))
                    do_sale(tok, buyer, day, seq, price)
                    seq += 1
                    continue
                resales.append((w, tid))
            if smart_buy.get(c_sale):
                b = smart_buy[c_sale][-1]
                tok = None
                for _ in range(20):
                    cand = tokens[pool[int(rng.integers(0, len(pool)))]]
                    if cand.alive and b not in cand.past_owners \
                            and cand.owner not in smart_set \
                            and cand.token not in flip_hold:
                        tok = cand
                        break
                if tok is not None:
                    smart_buy[c_sale].pop()
                    price = latent[c_sale] * tok.multiplier * \
                        math.exp(rng.normal(0.0, spec.sale_noise))
                    do_sale(tok, b, day, seq, price)
                    seq += 1
                    bought[c_sale].append((b, tok.token))
                    flip_hold.add(tok.token)
                    continue
            tok = None
            for _ in range(10):
                cand = tokens[pool[int(rng.integers(0, len(pool)))]]
                if cand.alive and cand.owner not in smart_set \
                        and cand.token not in flip_hold:
                    tok = cand
                    break
            if tok is None:
                continue
            buyer = pop_buyer(tok)
            if buyer is None:
                continue
            price = latent[tok.coll] * tok.multiplier * \
                math.exp(rng.normal(0.0, spec.sale_noise))
            if rng.random() < spec.outlier_rate:
                price *= 40.0
            do_sale(tok, buyer, day, seq, price)
            seq += 1

        # wash-ring sales scheduled for today
        for r, frm, to, tid in ring_schedule.get(day, []):
            tok = tokens[tid]
            price = latent[tok.coll] * math.exp(rng.normal(0.0, spec.sale_noise))
            tx = emit(day, seq, "sale", frm, to, tok.coll, tid, price)
            seq += 1
            tok.owner = to
            wash_tx_ids.append(tx)

        # the planted mechanic: when a designated group's net buys beyond
        # the threshold land, the latent price moves after the lag (up for
        # bulls, down for bears), and the buys are queued for resale
        for c, got in bought.items():
            if len(got) <= spec.accumulation_threshold:
                # token selection failed; abandon the half-burst
                for w, tid in got:
                    resale_queue.setdefault((day + 1, c), []).append((w, tid))
                continue
            up = burst_up[c]
            factor = (1.0 + spec.bump) if up else 1.0 / (1.0 + spec.bump)
            pending[(c, day + spec.lag)] = \
                pending.get((c, day + spec.lag), 1.0) * factor
            truth_bursts[c].append([day, len(got) if up else -len(got)])
            truth_bumps[c].append([day + spec.lag, factor])
            for w, tid in got:
                resale_queue.setdefault((day + 1, c), []).append((w, tid))

        # occasional burns near the end for event-type coverage
        if day == spec.days - 5:
            for c in colls:
                tid = coll_tokens[c][-1]
                tok = tokens[tid]
                if tok.alive and tok.owner and tid not in flip_hold:
                    emit(day, seq, "burn", tok.owner, None, c, tid, None)
                    seq += 1
                    tok.alive = False

    # ---------------------------------------------------------------- files
    with open(outdir / "transactions.csv", "w") as f:
        f.write("tx_id,timestamp,kind,from_wallet,to_wallet,collection,token,price_eth\n")
        f.write("\n".join(events) + "\n")
    with open(outdir / "rates.csv", "w") as f:
        f.write("day,eth_usd\n")
        for d, r in enumerate(rates):
            f.write(f"{d},{r!r}\n")
    supply = {c: len(coll_tokens[c]) for c in colls}
    for tid in ring_tokens:
        supply[tokens[tid].coll] += 1
    with open(outdir / "collections.csv", "w") as f:
        f.write("collection,total_supply\n")
        for c in colls:
            f.write(f"{c},{supply[c]}\n")
    with open(outdir / "properties.csv", "w") as f:
        f.write("collection,token,property_key\n")
        for c, tid, key in properties_rows:
            f.write(f"{c},{tid},{key}\n")
    for name in ("visual", "textual"):
        with open(outdir / f"{name}.emb", "w") as f:
            f.write(f"dim={spec.embed_dim}\n")
            for c in colls:
                vec = rng.standard_normal(spec.embed_dim)
                f.write(c + "," + ",".join(repr(float(v)) for v in vec) + "\n")

    truth = {
        "spec": asdict(spec),
        "seed": seed,
        "wash_tx_ids": sorted(wash_tx_ids),
        "smart_wallets": bulls,
        "bear_wallets": bears,
        "bump_days": truth_bumps,
        "burst_days": truth_bursts,
        "activity_counts": activity_counts,
        "latent_prices": {c: latent_log[c] for c in colls},
    }
    with open(outdir / "truth.json", "w") as f:
        json.dump(truth, f, sort_keys=True, indent=1)
    return truth


def clairvoyant_labels(truth: dict, t_end: int, step: int) -> dict[str, int]:
    """Oracle predictions from planted bumps alone: for each collection,
    the net planted multiplier over (t_end, t_end + step]; collections with
    no net move are omitted."""
    out = {}
    for c, bumps in truth["bump_days"].items():
        m = 1.0
        for day, factor in bumps:
            if t_end < day <= t_end + step:
                m *= factor
        if m > 1.0 + 1e-9:
            out[c] = 1
        elif m < 1.0 - 1e-9:
            out[c] = 0
    return out
