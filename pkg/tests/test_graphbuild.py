import numpy as np
import pytest

from comet import graphbuild, ingest, preprocess
from comet.graphbuild import Relation
from comet.ingest import Kind, TransactionRecord


RATES = {d: 1500.0 for d in range(0, 40)}


def rec(tx_id, day, kind, frm, to, coll="c1", token="1", price=None, offset=10):
    return TransactionRecord(tx_id, day * 86400 + offset, kind, frm, to,
                             coll, token, price)


def make_world(records, wash=frozenset(), last_day=None):
    series, _ = preprocess.build_daily_series(records, RATES, set(wash),
                                              last_day=last_day)
    ledger = preprocess.replay_ownership(records, last_day=last_day)
    lo = min(r.day for r in records)
    hi = max(r.day for r in records) if last_day is None else last_day
    universe = graphbuild.build_universe(records, ledger, (lo, hi))
    return series, ledger, universe


class TestBuildSnapshot:
    def test_single_sale_produces_three_sale_edges_plus_hold(self):
        records = [rec("m1", 0, Kind.MINT, None, "a"),
                   rec("s1", 0, Kind.SALE, "a", "b", price=2.0, offset=50)]
        series, ledger, universe = make_world(records)
        g = graphbuild.build_snapshot(0, records, series, ledger, universe, set())
        assert g.edge_count(Relation.SALE_WW) == 1
        assert g.edge_count(Relation.SALE_FROM) == 1
        assert g.edge_count(Relation.SALE_TO) == 1
        e = g.edges[Relation.SALE_WW]
        assert g.wallets[e.src[0]] == "a" and g.wallets[e.dst[0]] == "b"
        assert e.feat[0] == 2.0
        assert g.edges[Relation.SALE_TO].feat[0] == 2.0
        # b holds the token at day end
        hold = g.edges[Relation.HOLD]
        assert g.wallets[hold.dst[0]] == "b" and hold.feat[0] == 1.0

    def test_empty_day_has_only_hold_edges(self):
        records = [rec("m1", 0, Kind.MINT, None, "a"),
                   rec("s1", 0, Kind.SALE, "a", "b", price=2.0, offset=50)]
        series, ledger, universe = make_world(records, last_day=3)
        g = graphbuild.build_snapshot(2, [], series, ledger, universe, set())
        assert set(g.edges) == {Relation.HOLD}
        assert g.wallet_feats[:, :4].sum() == 0

    def test_hold_edge_feature_is_owned_count(self):
        records = [rec(f"m{i}", 0, Kind.MINT, None, "a", token=str(i)) for i in range(3)]
        records.append(rec("s1", 0, Kind.SALE, "x", "y", price=1.0, token="9", offset=99))
        series, ledger, universe = make_world(records)
        g = graphbuild.build_snapshot(0, records, series, ledger, universe, set())
        hold = g.edges[Relation.HOLD]
        idx = [i for i in range(len(hold.dst)) if g.wallets[hold.dst[i]] == "a"]
        assert [hold.feat[i] for i in idx] == [3.0]

    def test_transfer_produces_three_edges(self):
        records = [rec("m1", 0, Kind.MINT, None, "a"),
                   rec("s1", 0, Kind.SALE, "a", "b", price=1.0, offset=20),
                   rec("t1", 0, Kind.TRANSFER, "b", "c", offset=30)]
        series, ledger, universe = make_world(records)
        g = graphbuild.build_snapshot(0, records, series, ledger, universe, set())
        assert g.edge_count(Relation.TRANSFER_WW) == 1
        assert g.edge_count(Relation.TRANSFER_IN) == 1
        assert g.edge_count(Relation.TRANSFER_OUT) == 1
        assert g.edges[Relation.TRANSFER_WW].feat is None

    def test_wash_sale_excluded_from_edges_but_counts(self):
        records = [rec("s1", 0, Kind.SALE, "a", "b", price=1.0),
                   rec("s2", 0, Kind.SALE, "b", "a", price=1.0, offset=20),
                   rec("s3", 0, Kind.SALE, "c", "d", price=1.0, token="2", offset=30)]
        wash = {"s1", "s2"}
        series, ledger, universe = make_world(records, wash)
        g = graphbuild.build_snapshot(0, records, series, ledger, universe, wash)
        assert g.edge_count(Relation.SALE_WW) == 1
        wa = universe.wallet_index["a"]
        assert g.wallet_feats[wa, 1] == 2  # both wash sales count as activity

    def test_multigraph_duplicate_events_duplicate_edges(self):
        records = [rec("s1", 0, Kind.SALE, "a", "b", price=1.0),
                   rec("s2", 0, Kind.SALE, "a", "b", price=1.0, offset=20)]
        series, ledger, universe = make_world(records)
        g = graphbuild.build_snapshot(0, records, series, ledger, universe, set())
        assert g.edge_count(Relation.SALE_WW) == 2

    def test_absent_collection_dropped(self):
        records = [rec("s1", 5, Kind.SALE, "a", "b", price=1.0),
                   rec("s2", 0, Kind.SALE, "x", "y", coll="c2", price=1.0, offset=20)]
        series, ledger, universe = make_world(records)
        g = graphbuild.build_snapshot(0, records, series, ledger, universe, set())
        # c1's series starts at day 5; on day 0 it is not present
        assert not g.collection_present[universe.collection_index["c1"]]
        assert g.collection_present[universe.collection_index["c2"]]
        assert g.edge_count(Relation.SALE_FROM) == 1

    def test_pure_function_of_inputs(self):
        records = [rec("s1", 0, Kind.SALE, "a", "b", price=1.0),
                   rec("t1", 0, Kind.TRANSFER, "b", "c", offset=30),
                   rec("m1", 0, Kind.MINT, None, "d", token="7", offset=40)]
        series, ledger, universe = make_world(records)
        g1 = graphbuild.build_snapshot(0, records, series, ledger, universe, set())
        g2 = graphbuild.build_snapshot(0, list(reversed(records)), series, ledger,
                                       universe, set())
        for rel in Relation:
            e1, e2 = g1.edges.get(rel), g2.edges.get(rel)
            assert (e1 is None) == (e2 is None)
            if e1 is not None:
                pairs1 = sorted(zip(e1.src.tolist(), e1.dst.tolist()))
                pairs2 = sorted(zip(e2.src.tolist(), e2.dst.tolist()))
                assert pairs1 == pairs2
        assert np.array_equal(g1.wallet_feats, g2.wallet_feats)

    def test_edge_endpoints_always_in_node_sets(self):
        rng = np.random.default_rng(0)
        records = []
        for i in range(40):
            day = int(rng.integers(0, 5))
            kind = [Kind.MINT, Kind.SALE, Kind.TRANSFER][int(rng.integers(0, 3))]
            frm = None if kind is Kind.MINT else f"w{rng.integers(0, 8)}"
            to = f"w{rng.integers(0, 8)}"
            price = 1.0 if kind is Kind.SALE else None
            records.append(rec(f"e{i}", day, kind, frm, to,
                               coll=f"c{rng.integers(0, 3)}",
                               token=str(rng.integers(0, 5)), price=price, offset=i))
        series, ledger, universe = make_world(records)
        for day in range(5):
            day_records = [r for r in records if r.day == day]
            g = graphbuild.build_snapshot(day, day_records, series, ledger,
                                          universe, set())
            for rel, e in g.edges.items():
                assert (e.dst < len(g.wallets)).all()
                limit = len(g.wallets) if rel in graphbuild.WALLET_WALLET_RELATIONS \
                    else len(g.collections)
                assert (e.src < limit).all()
                if rel in graphbuild.FEATURED_RELATIONS:
                    assert e.feat is not None and len(e.feat) == len(e.src)
                else:
                    assert e.feat is None


class TestFeatureSchema:
    def make_snapshots(self):
        records = [rec("m1", 0, Kind.MINT, None, "a"),
                   rec("s1", 0, Kind.SALE, "a", "b", price=2.0, offset=20),
                   rec("s2", 1, Kind.SALE, "b", "c", price=4.0)]
        series, ledger, universe = make_world(records, last_day=2)
        snaps = graphbuild.build_snapshots(records, series, ledger, universe,
                                           set(), range(0, 3))
        return snaps, universe

    def test_constant_column_clamps_std(self):
        snaps, _ = self.make_snapshots()
        schema = graphbuild.fit_schema([0, 1], snaps)
        b = schema.blocks["collection_dynamic"]
        assert (b["std"] >= 1e-6).all()
        rate_col = graphbuild.COLLECTION_FEATURES.index("collection_eth_usd")
        assert b["std"][rate_col] == 1e-6
        g = snaps[0]
        norm = schema.normalize("collection_dynamic", g.collection_feats)
        assert np.allclose(norm[g.collection_present, rate_col], 0.0)

    def test_log1p_transform_values(self):
        schema = graphbuild.FeatureSchema({
            "x": {"log1p": np.array([True]), "mean": np.zeros(1), "std": np.ones(1)}})
        raw = np.array([[np.e - 1], [np.e ** 3 - 1]])
        assert np.allclose(schema.normalize("x", raw), [[1.0], [3.0]])

    def test_validation_days_reuse_training_stats(self):
        snaps, _ = self.make_snapshots()
        schema_train = graphbuild.fit_schema([0], snaps)
        schema_all = graphbuild.fit_schema([0, 1, 2], snaps)
        v = snaps[2].wallet_feats
        out = schema_train.normalize("wallet_dynamic", v)
        assert np.array_equal(
            out, (np.log1p(v) - schema_train.blocks["wallet_dynamic"]["mean"])
            / schema_train.blocks["wallet_dynamic"]["std"])
        assert not np.array_equal(schema_train.blocks["wallet_dynamic"]["mean"],
                                  schema_all.blocks["wallet_dynamic"]["mean"])

    def test_empty_training_split_rejected(self):
        snaps, _ = self.make_snapshots()
        with pytest.raises(ValueError, match="empty training split"):
            graphbuild.fit_schema([], snaps)

    def test_json_roundtrip(self):
        snaps, _ = self.make_snapshots()
        schema = graphbuild.fit_schema([0, 1], snaps)
        loaded = graphbuild.FeatureSchema.from_json(schema.to_json())
        for name, b in schema.blocks.items():
            assert np.allclose(loaded.blocks[name]["mean"], b["mean"])
            assert np.allclose(loaded.blocks[name]["std"], b["std"])

    def test_static_supply_normalized_embeddings_passthrough(self):
        records = [rec("s1", 0, Kind.SALE, "a", "b", price=2.0),
                   rec("s2", 0, Kind.SALE, "x", "y", coll="c2", price=1.0, offset=20)]
        series, ledger, universe = make_world(records)
        metas = {"c1": ingest.CollectionMeta("c1", 10),
                 "c2": ingest.CollectionMeta("c2", 100)}
        vis = ingest.fallback_table(universe.collections, 4)
        txt = ingest.fallback_table(universe.collections, 4)
        static = graphbuild.static_features(universe, vis, txt, metas)
        snaps = graphbuild.build_snapshots(records, series, ledger, universe,
                                           set(), [0])
        schema = graphbuild.fit_schema([0], snaps, static)
        norm = graphbuild.normalize_static(schema, static)
        assert np.array_equal(norm[:, :8], static[:, :8])
        assert not np.array_equal(norm[:, -1], static[:, -1])


class TestSnapshotExport:
    def test_csv_lists_typed_edges(self, tmp_path):
        records = [rec("m1", 0, Kind.MINT, None, "a"),
                   rec("s1", 0, Kind.SALE, "a", "b", price=2.0, offset=20)]
        series, ledger, universe = make_world(records)
        g = graphbuild.build_snapshot(0, records, series, ledger, universe, set())
        p = tmp_path / "snapshot_0.csv"
        graphbuild.write_snapshot_csv(p, g)
        lines = p.read_text().splitlines()
        assert lines[0] == "relation,src,dst,feature"
        assert "sale_ww,a,b,2.0" in lines
        assert "mint,c1,a," in lines


class TestFeatureLocation:
    def test_known_names(self):
        assert graphbuild.feature_location("collection_price", 4) == \
            ("collection_dynamic", slice(0, 1))
        assert graphbuild.feature_location("wallet_asset_value", 4) == \
            ("wallet_dynamic", slice(5, 6))
        assert graphbuild.feature_location("visual_embedding", 4) == \
            ("collection_static", slice(0, 4))
        assert graphbuild.feature_location("textual_embedding", 4) == \
            ("collection_static", slice(4, 8))

    def test_unknown_name(self):
        with pytest.raises(KeyError):
            graphbuild.feature_location("nope", 4)
