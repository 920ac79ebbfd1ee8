"""Generator tests: determinism, planted-phenomena bookkeeping, the
clairvoyant consistency oracle, and the activity power law."""

import math

import numpy as np
import pytest

from comet import ingest, preprocess, synth


SMALL = dict(collections=4, wallets=80, days=80, tokens_per_collection=12,
             daily_sales=40, smart_wallets=8, wash_rings=2, ring_size=3,
             ring_cycles=2, embed_dim=4)


def _read_all(d):
    out = {}
    for p in sorted(d.iterdir()):
        out[p.name] = p.read_bytes()
    return out


def test_same_spec_seed_byte_identical(tmp_path):
    spec = synth.SyntheticSpec(**SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    synth.gen_synthetic(spec, 7, a)
    synth.gen_synthetic(spec, 7, b)
    assert _read_all(a) == _read_all(b)


def test_different_seed_differs(tmp_path):
    spec = synth.SyntheticSpec(**SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    synth.gen_synthetic(spec, 7, a)
    synth.gen_synthetic(spec, 8, b)
    assert _read_all(a) != _read_all(b)


def test_validate_rejects_infeasible():
    with pytest.raises(ValueError):
        synth.SyntheticSpec(**{**SMALL, "ring_size": 1}).validate()
    with pytest.raises(ValueError):
        synth.SyntheticSpec(**{**SMALL, "lag": 100}).validate()
    with pytest.raises(ValueError):
        synth.SyntheticSpec(**{**SMALL, "wallets": 10}).validate()
    with pytest.raises(ValueError):
        synth.SyntheticSpec(**{**SMALL, "activity_exponent": 1.0}).validate()


def test_three_rings_of_two_one_cycle_lists_six_sales(tmp_path):
    spec = synth.SyntheticSpec(**{**SMALL, "wash_rings": 3, "ring_size": 2,
                                  "ring_cycles": 1})
    truth = synth.gen_synthetic(spec, 3, tmp_path)
    assert len(truth["wash_tx_ids"]) == 6


def test_ring_bookkeeping_counts(tmp_path):
    spec = synth.SyntheticSpec(**SMALL)
    truth = synth.gen_synthetic(spec, 5, tmp_path)
    assert len(truth["wash_tx_ids"]) == \
        spec.wash_rings * spec.ring_size * spec.ring_cycles


def test_detected_wash_equals_planted(tmp_path):
    spec = synth.SyntheticSpec(**SMALL)
    truth = synth.gen_synthetic(spec, 1, tmp_path)
    with open(tmp_path / "transactions.csv") as f:
        records, errors = ingest.parse_transactions(
            f, ingest.ColumnSchema(has_header=True))
    assert not errors
    wash, _ = preprocess.clean_sales(records)
    assert wash == set(truth["wash_tx_ids"])


def test_files_round_trip_through_ingest(tmp_path):
    spec = synth.SyntheticSpec(**SMALL)
    synth.gen_synthetic(spec, 2, tmp_path)
    with open(tmp_path / "transactions.csv") as f:
        records, errors = ingest.parse_transactions(
            f, ingest.ColumnSchema(has_header=True))
    assert not errors and records
    rates = ingest.load_rates(open(tmp_path / "rates.csv"))
    assert set(rates) == set(range(spec.days))
    metas = ingest.load_collections(open(tmp_path / "collections.csv"),
                                    open(tmp_path / "properties.csv"))
    assert len(metas) == spec.collections
    for name in ("visual", "textual"):
        table = ingest.load_embeddings(open(tmp_path / f"{name}.emb"))
        assert table.dim == spec.embed_dim


def test_clairvoyant_rule_is_exact_on_bump_days(tmp_path):
    """Replaying truth.json must predict realized label flips perfectly:
    the planted lag-3 signal is the only thing that moves 3-step medians."""
    spec = synth.SyntheticSpec()
    truth = synth.gen_synthetic(spec, 0, tmp_path)
    with open(tmp_path / "transactions.csv") as f:
        records, errors = ingest.parse_transactions(
            f, ingest.ColumnSchema(has_header=True))
    assert not errors
    rates = ingest.load_rates(open(tmp_path / "rates.csv"))
    wash, outliers = preprocess.clean_sales(records)
    series, _ = preprocess.build_daily_series(records, rates, wash | outliers)
    step = 3
    checked = wrong = 0
    for t in range(20, spec.days - step - 1):
        for coll, want in synth.clairvoyant_labels(truth, t, step).items():
            s = series[coll]
            if not (s.covers(t) and s.covers(t + step)):
                continue
            got = 1 if s.price(t + step) - s.price(t) > 0 else 0
            checked += 1
            wrong += got != want
    assert checked > 500
    assert wrong == 0


def test_labels_roughly_balanced(tmp_path):
    spec = synth.SyntheticSpec(**SMALL)
    truth = synth.gen_synthetic(spec, 9, tmp_path)
    ups = downs = 0
    for bumps in truth["bump_days"].values():
        for _, factor in bumps:
            if factor > 1:
                ups += 1
            else:
                downs += 1
    assert ups > 0 and downs > 0
    assert 0.25 < ups / (ups + downs) < 0.75


def test_activity_counts_fit_power_law(tmp_path):
    """Per-wallet buy-activity counts vs the configured Pareto CDF,
    KS < 0.1 at the default 500-wallet scale."""
    spec = synth.SyntheticSpec()  # n = 500 wallets
    truth = synth.gen_synthetic(spec, 0, tmp_path)
    x = np.sort(np.array(list(truth["activity_counts"].values()), dtype=float))
    x /= x.min()
    n = len(x)
    alpha = spec.activity_exponent
    cdf = 1.0 - np.power(x, 1.0 - alpha)
    ks = float(np.max(np.abs(np.arange(1, n + 1) / n - cdf)))
    assert n > 300
    assert ks < 0.1


def test_token_prices_track_collection_latent_times_multiplier(tmp_path):
    """Background sale prices stay within sale-noise bands of the latent
    collection price (rarity multiplier bounded)."""
    spec = synth.SyntheticSpec(**SMALL)
    truth = synth.gen_synthetic(spec, 4, tmp_path)
    with open(tmp_path / "transactions.csv") as f:
        records, errors = ingest.parse_transactions(
            f, ingest.ColumnSchema(has_header=True))
    wash = set(truth["wash_tx_ids"])
    latent = truth["latent_prices"]
    checked = 0
    for r in records:
        if r.kind is not ingest.Kind.SALE or r.tx_id in wash:
            continue
        base = latent[r.collection][r.day]
        ratio = r.price_eth / base
        if ratio > 5.0:  # planted outlier
            continue
        assert 0.5 < ratio < 2.0
        checked += 1
    assert checked > 1000
