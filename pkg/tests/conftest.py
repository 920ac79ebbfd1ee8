"""Shared pipeline assembly used by model, evaluation, and acceptance tests."""

from dataclasses import dataclass, field

import numpy as np
import pytest

from comet import community, evaluation, graphbuild, ingest, model, preprocess, synth


@dataclass
class Pipeline:
    """Everything downstream of raw files for one synthetic market."""

    spec: synth.SyntheticSpec
    truth: dict
    records: list
    rates: dict
    metas: dict
    wash: set
    outliers: set
    series: dict
    ledger: object
    plan: evaluation.SplitPlan
    universe: graphbuild.Universe
    communities: community.CommunityAssignment
    snapshots: dict
    schema: graphbuild.FeatureSchema
    static: np.ndarray
    rarity: object
    samples: dict = field(default_factory=dict)  # split -> [(t, ci, y)]


def build_pipeline(tmpdir, spec, seed, history, step):
    truth = synth.gen_synthetic(spec, seed, tmpdir)
    schema_csv = ingest.ColumnSchema(has_header=True)
    with open(tmpdir / "transactions.csv") as f:
        records, errors = ingest.parse_transactions(f, schema_csv)
    assert not errors
    rates = ingest.load_rates(open(tmpdir / "rates.csv"))
    metas = ingest.load_collections(open(tmpdir / "collections.csv"),
                                    open(tmpdir / "properties.csv"))
    wash, outliers = preprocess.clean_sales(records)
    series, _ = preprocess.build_daily_series(records, rates, wash | outliers)
    ledger = preprocess.replay_ownership(records)
    rarity = preprocess.rarity_scores(metas)
    plan = evaluation.make_split(series, history=history, step=step)
    train_end = plan.global_train_end()
    first_day = min(s.first_day for s in series.values())
    window = (first_day, train_end)
    universe = graphbuild.build_universe(records, ledger, window)
    tg = community.build_transfer_graph(records, window)
    comms = community.assign_communities(tg, universe.wallets, seed=seed)
    last_day = max(s.last_day for s in series.values())
    snapshots = graphbuild.build_snapshots(records, series, ledger, universe,
                                           wash, range(first_day, last_day + 1))
    visual = ingest.load_embeddings(open(tmpdir / "visual.emb"))
    textual = ingest.load_embeddings(open(tmpdir / "textual.emb"))
    static = graphbuild.static_features(universe, visual, textual, metas)
    feat_schema = graphbuild.fit_schema(range(first_day, train_end + 1),
                                        snapshots, static)
    pipe = Pipeline(spec, truth, records, rates, metas, wash, outliers, series,
                    ledger, plan, universe, comms, snapshots, feat_schema,
                    static, rarity)
    for split in ("train", "val", "test"):
        pipe.samples[split] = evaluation.split_samples(
            plan, split, series, universe.collection_index, history, step)
    return pipe


def token_dataset(pipe: Pipeline, history, step):
    """Token sale samples per split, aligned so the collection window ends
    `step` days before the sale."""
    return model.build_token_samples(pipe.records, pipe.series, pipe.plan,
                                     pipe.rarity, pipe.rates,
                                     pipe.wash | pipe.outliers, history, step)


@pytest.fixture(scope="session")
def tiny_pipeline(tmp_path_factory):
    spec = synth.SyntheticSpec(collections=4, wallets=60, days=60,
                               tokens_per_collection=10, daily_sales=30,
                               smart_wallets=8, wash_rings=2, ring_size=2,
                               ring_cycles=2, embed_dim=4)
    return build_pipeline(tmp_path_factory.mktemp("tiny"), spec, seed=11,
                          history=5, step=3)
