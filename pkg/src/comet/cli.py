"""Subcommand front end: stage-by-stage pipeline driver with a plain INI
config, content-hash manifests, and the synthetic market generator.

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 data validation
failure. Errors print one machine-parsable line to stderr.
"""

import configparser
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path
from types import SimpleNamespace

import click
import numpy as np

from . import community, evaluation, graphbuild, ingest, model, preprocess, \
    synth

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DATA = 4

RAW_FILES = ("transactions.csv", "rates.csv", "collections.csv",
             "properties.csv", "visual.emb", "textual.emb")
PREPROCESS_FILES = ("series.csv", "flags.csv", "rarity.csv", "ledger.csv")
GRAPH_FILES = ("schema.json", "static.npy", "universe.json")

# every legal config key with its default; unknown keys are rejected
DEFAULTS = {
    "paths": {"data_dir": "data", "output_dir": "out"},
    "model": {"hidden_dim": "64", "gnn_layers": "2", "dropout": "0.5",
              "l2_weight": "0.0005", "lr": "0.001", "batch": "64",
              "history": "14", "step": "1", "tf_layers": "1", "tf_heads": "2",
              "max_seq_len": "16", "max_epochs": "100", "patience": "10"},
    "run": {"seeds": "0", "ablation": "full", "task": "collection"},
    "split": {"train": "0.7", "val": "0.15", "test": "0.15"},
    "synth": {"collections": "20", "wallets": "500", "days": "365",
              "tokens_per_collection": "40", "daily_sales": "160",
              "activity_exponent": "2.5", "smart_wallets": "25",
              "accumulation_threshold": "3", "lag": "3", "bump": "0.35",
              "wash_rings": "3", "ring_size": "3", "ring_cycles": "4",
              "outlier_rate": "0.01", "embed_dim": "8", "seed": "0"},
}


def _fail(stage, code, kind, detail):
    click.echo(f"COMET-ERROR stage={stage} code={code} kind={kind} "
               f"detail={detail}", err=True)
    sys.exit(code)


# ------------------------------------------------------------- configuration


def _resolve_config(config_path, overrides, stage="config"):
    cfg = {s: dict(kv) for s, kv in DEFAULTS.items()}
    if config_path is not None:
        if not Path(config_path).is_file():
            _fail(stage, EXIT_MISSING, "missing_artifact", config_path)
        parser = configparser.ConfigParser()
        try:
            parser.read(config_path)
        except configparser.Error as e:
            _fail(stage, EXIT_CONFIG, "bad_config", str(e).replace("\n", " "))
        for section in parser.sections():
            if section not in cfg:
                _fail(stage, EXIT_CONFIG, "unknown_section", section)
            for key, value in parser.items(section):
                if key not in cfg[section]:
                    _fail(stage, EXIT_CONFIG, "unknown_key",
                          f"{section}.{key}")
                cfg[section][key] = value
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            _fail(stage, EXIT_CONFIG, "bad_override", item)
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            _fail(stage, EXIT_CONFIG, "unknown_key", dotted)
        cfg[section][key] = value
    root = os.environ.get("COMET_OUT_ROOT")
    if root and not Path(cfg["paths"]["output_dir"]).is_absolute():
        cfg["paths"]["output_dir"] = str(Path(root) / cfg["paths"]["output_dir"])
    return cfg


def _emit_resolved(cfg, stage):
    out = Path(cfg["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser()
    for section, kv in cfg.items():
        parser[section] = kv
    with open(out / f"resolved_{stage}.ini", "w") as f:
        parser.write(f)
    return out


def _typed(stage, cfg, section, key, cast):
    try:
        return cast(cfg[section][key])
    except ValueError:
        _fail(stage, EXIT_CONFIG, "bad_value",
              f"{section}.{key}={cfg[section][key]}")


def _model_config(stage, cfg):
    kw = {}
    for f in dataclasses.fields(model.ModelConfig):
        kw[f.name] = _typed(stage, cfg, "model", f.name,
                            float if "float" in str(f.type) else int)
    try:
        return model.ModelConfig(**kw)
    except ValueError as e:
        _fail(stage, EXIT_CONFIG, "bad_value", str(e))


def _seeds(stage, cfg):
    try:
        return [int(s) for s in cfg["run"]["seeds"].split(",") if s.strip()]
    except ValueError:
        _fail(stage, EXIT_CONFIG, "bad_value",
              f"run.seeds={cfg['run']['seeds']}")


def _ratios(stage, cfg):
    return tuple(_typed(stage, cfg, "split", k, float)
                 for k in ("train", "val", "test"))


def _ablation(stage, tag):
    try:
        return model.Ablation(tag)
    except ValueError:
        _fail(stage, EXIT_CONFIG, "bad_value", f"run.ablation={tag}")


# ----------------------------------------------------------------- manifests


def _hash_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(out):
    p = Path(out) / "manifest.json"
    return json.loads(p.read_text()) if p.is_file() else {}


def _record(out, names):
    m = _manifest(out)
    for name in names:
        m[name] = _hash_file(Path(out) / name)
    (Path(out) / "manifest.json").write_text(
        json.dumps(m, indent=1, sort_keys=True) + "\n")


def _require(stage, base, names):
    for name in names:
        if not (Path(base) / name).is_file():
            _fail(stage, EXIT_MISSING, "missing_artifact", name)


def _verify(stage, out, names):
    m = _manifest(out)
    for name in names:
        path = Path(out) / name
        if not path.is_file() or name not in m:
            _fail(stage, EXIT_MISSING, "missing_artifact", name)
        if _hash_file(path) != m[name]:
            _fail(stage, EXIT_DATA, "hash_mismatch", name)


# ------------------------------------------------------- pipeline assembly


def _read_records(stage, data):
    _require(stage, data, RAW_FILES)
    with open(Path(data) / "transactions.csv") as f:
        records, errors = ingest.parse_transactions(
            f, ingest.ColumnSchema(has_header=True))
    if errors:
        _fail(stage, EXIT_DATA, "parse_errors",
              f"{len(errors)}:first_line={errors[0].line_no}")
    rates = ingest.load_rates(open(Path(data) / "rates.csv"))
    metas = ingest.load_collections(open(Path(data) / "collections.csv"),
                                    open(Path(data) / "properties.csv"))
    return records, rates, metas


def _assemble(stage, cfg, ablation, verify=False):
    """Rebuild the in-memory pipeline from raw data plus stage artifacts."""
    data, out = cfg["paths"]["data_dir"], Path(cfg["paths"]["output_dir"])
    records, rates, metas = _read_records(stage, data)
    check = _verify if verify else _require
    check(stage, out, PREPROCESS_FILES + GRAPH_FILES + ("communities.csv",))
    series = preprocess.read_series_csv(open(out / "series.csv"))
    wash, outliers = preprocess.read_flags_csv(open(out / "flags.csv"))
    rarity = preprocess.read_rarity_csv(open(out / "rarity.csv"))
    ledger = preprocess.read_ledger_csv(open(out / "ledger.csv"))
    comms = community.read_communities_csv(open(out / "communities.csv"))
    schema = graphbuild.FeatureSchema.from_json((out / "schema.json").read_text())
    static = np.load(out / "static.npy")
    mc = _model_config(stage, cfg)
    try:
        plan = evaluation.make_split(series, _ratios(stage, cfg),
                                     history=mc.history, step=mc.step)
    except ValueError as e:
        _fail(stage, EXIT_CONFIG, "bad_value", str(e))
    if not plan.ranges:
        _fail(stage, EXIT_DATA, "empty_split", "no collection long enough")
    first_day = min(s.first_day for s in series.values())
    last_day = max(s.last_day for s in series.values())
    universe = graphbuild.build_universe(records, ledger,
                                         (first_day, plan.global_train_end()))
    snapshots = graphbuild.build_snapshots(records, series, ledger, universe,
                                           wash, range(first_day, last_day + 1))
    samples = {split: evaluation.split_samples(plan, split, series,
                                               universe.collection_index,
                                               mc.history, mc.step)
               for split in ("train", "val", "test")}
    prepared = model.prepare_days(snapshots, schema, universe, ablation)
    return SimpleNamespace(records=records, rates=rates, metas=metas,
                           series=series, wash=wash, outliers=outliers,
                           rarity=rarity, ledger=ledger, comms=comms,
                           schema=schema, static=static, plan=plan,
                           universe=universe, snapshots=snapshots,
                           samples=samples, prepared=prepared, config=mc,
                           out=out)


# --------------------------------------------------------------- checkpoints


def _checkpoint_name(task, tag, seed):
    return f"checkpoint_{task}_{tag}_seed{seed}.npz"


def _save_checkpoint(path, task, tag, seed, backbone, head=None):
    arrays = {f"p.{k}": t.data for k, t in backbone.params.items()}
    if head is not None:
        arrays.update({f"t.{k}": t.data for k, t in head.params.items()})
        arrays["n.event_mean"] = head.event_mean
        arrays["n.event_std"] = head.event_std
        arrays["n.global_mean"] = head.global_mean
        arrays["n.global_std"] = head.global_std
    meta = {"task": task, "ablation": tag, "seed": seed,
            "config": dataclasses.asdict(backbone.config)}
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def _load_checkpoint(stage, path, pipe):
    data = np.load(path, allow_pickle=False)
    meta = json.loads(str(data["meta"]))
    mc = model.ModelConfig(**meta["config"])
    ablation = model.Ablation(meta["ablation"])
    backbone = model.CometModel(mc, pipe.universe, pipe.comms, pipe.schema,
                                pipe.static, meta["seed"], ablation)
    head = None
    if any(k.startswith("t.") for k in data.files):
        head = model.TokenHead(mc, meta["seed"], ablation)
        head.event_mean = data["n.event_mean"]
        head.event_std = data["n.event_std"]
        head.global_mean = data["n.global_mean"]
        head.global_std = data["n.global_std"]
    for key in data.files:
        if key.startswith("p."):
            backbone.params[key[2:]].data = data[key]
        elif key.startswith("t."):
            head.params[key[2:]].data = data[key]
    return meta, backbone, head


# -------------------------------------------------------------------- group


@click.group()
@click.option("-c", "--config", "config_path", default=None,
              help="INI config file; CLI --set flags override it.")
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VAL",
              help="Override one config value.")
@click.pass_context
def main(ctx, config_path, overrides):
    """COMET pipeline driver."""
    ctx.obj = (config_path, overrides)


def _cfg(ctx_obj, stage):
    config_path, overrides = ctx_obj
    cfg = _resolve_config(config_path, overrides, stage)
    _emit_resolved(cfg, stage)
    return cfg


# ----------------------------------------------------------------- commands


@main.command("synth")
@click.pass_obj
def cmd_synth(obj):
    """Generate a synthetic market with planted signals into data_dir."""
    cfg = _cfg(obj, "synth")
    kw = {}
    for f in dataclasses.fields(synth.SyntheticSpec):
        if f.name in cfg["synth"]:
            kw[f.name] = _typed("synth", cfg, "synth", f.name,
                                float if "float" in str(f.type) else int)
    seed = _typed("synth", cfg, "synth", "seed", int)
    try:
        spec = synth.SyntheticSpec(**kw)
        spec.validate()
    except ValueError as e:
        _fail("synth", EXIT_CONFIG, "infeasible_spec", str(e))
    data = Path(cfg["paths"]["data_dir"])
    data.mkdir(parents=True, exist_ok=True)
    synth.gen_synthetic(spec, seed, data)
    click.echo(f"synth: wrote {len(RAW_FILES) + 1} files to {data}")


@main.command("ingest")
@click.pass_obj
def cmd_ingest(obj):
    """Validate raw inputs and record their content hashes."""
    cfg = _cfg(obj, "ingest")
    data = cfg["paths"]["data_dir"]
    records, rates, metas = _read_records("ingest", data)
    out = Path(cfg["paths"]["output_dir"])
    report = {"records": len(records), "collections": len(metas),
              "rate_days": len(rates),
              "raw_hashes": {n: _hash_file(Path(data) / n) for n in RAW_FILES}}
    (out / "ingest.json").write_text(json.dumps(report, indent=1,
                                                sort_keys=True) + "\n")
    _record(out, ["ingest.json"])
    click.echo(f"ingest: {len(records)} records, {len(metas)} collections")


@main.command("preprocess")
@click.pass_obj
def cmd_preprocess(obj):
    """Wash/outlier filtering, daily series, rarity, ownership ledger."""
    cfg = _cfg(obj, "preprocess")
    records, rates, metas = _read_records("preprocess", cfg["paths"]["data_dir"])
    out = Path(cfg["paths"]["output_dir"])
    wash, outliers = preprocess.clean_sales(records)
    series, dropped = preprocess.build_daily_series(records, rates,
                                                    wash | outliers)
    if not series:
        _fail("preprocess", EXIT_DATA, "no_series", f"dropped={len(dropped)}")
    preprocess.write_series_csv(out / "series.csv", series)
    preprocess.write_flags_csv(out / "flags.csv", wash, outliers)
    preprocess.write_rarity_csv(out / "rarity.csv",
                                preprocess.rarity_scores(metas))
    preprocess.write_ledger_csv(out / "ledger.csv",
                                preprocess.replay_ownership(records))
    _record(out, PREPROCESS_FILES)
    click.echo(f"preprocess: {len(series)} series, {len(wash)} wash, "
               f"{len(outliers)} outlier sales")


@main.command("build-graph")
@click.pass_obj
def cmd_build_graph(obj):
    """Node universe, static features, and the feature normalizer."""
    cfg = _cfg(obj, "build-graph")
    data = cfg["paths"]["data_dir"]
    records, rates, metas = _read_records("build-graph", data)
    out = Path(cfg["paths"]["output_dir"])
    _require("build-graph", out, PREPROCESS_FILES)
    series = preprocess.read_series_csv(open(out / "series.csv"))
    wash, outliers = preprocess.read_flags_csv(open(out / "flags.csv"))
    ledger = preprocess.read_ledger_csv(open(out / "ledger.csv"))
    mc = _model_config("build-graph", cfg)
    try:
        plan = evaluation.make_split(series, _ratios("build-graph", cfg),
                                     history=mc.history, step=mc.step)
    except ValueError as e:
        _fail("build-graph", EXIT_CONFIG, "bad_value", str(e))
    if not plan.ranges:
        _fail("build-graph", EXIT_DATA, "empty_split",
              "no collection long enough")
    first_day = min(s.first_day for s in series.values())
    window = (first_day, plan.global_train_end())
    universe = graphbuild.build_universe(records, ledger, window)
    visual = ingest.load_embeddings(open(Path(data) / "visual.emb"))
    textual = ingest.load_embeddings(open(Path(data) / "textual.emb"))
    static = graphbuild.static_features(universe, visual, textual, metas)
    snapshots = graphbuild.build_snapshots(records, series, ledger, universe,
                                           wash, range(window[0], window[1] + 1))
    schema = graphbuild.fit_schema(range(window[0], window[1] + 1),
                                   snapshots, static)
    (out / "schema.json").write_text(schema.to_json())
    np.save(out / "static.npy", static)
    (out / "universe.json").write_text(json.dumps(
        {"wallets": universe.wallets, "collections": universe.collections,
         "train_window": list(window)}, indent=1) + "\n")
    _record(out, GRAPH_FILES)
    click.echo(f"build-graph: {len(universe.wallets)} wallets, "
               f"{len(universe.collections)} collections, "
               f"train window {window[0]}..{window[1]}")


@main.command("communities")
@click.pass_obj
def cmd_communities(obj):
    """Louvain wallet communities on the train-window transfer graph."""
    cfg = _cfg(obj, "communities")
    records, _, _ = _read_records("communities", cfg["paths"]["data_dir"])
    out = Path(cfg["paths"]["output_dir"])
    _require("communities", out, ("universe.json",))
    info = json.loads((out / "universe.json").read_text())
    window = tuple(info["train_window"])
    graph = community.build_transfer_graph(records, window)
    seed = _seeds("communities", cfg)[0]
    assignment = community.assign_communities(graph, info["wallets"],
                                              seed=seed)
    community.write_communities_csv(out / "communities.csv", assignment)
    _record(out, ["communities.csv"])
    n = len(set(assignment.membership.values()))
    click.echo(f"communities: {n} communities, "
               f"modularity {assignment.modularity:.4f}")


@main.command("train")
@click.option("--ablate", default=None, help="Ablation tag override.")
@click.pass_obj
def cmd_train(obj, ablate):
    """Train the collection backbone (and token head for task=token)."""
    cfg = _cfg(obj, "train")
    tag = ablate if ablate is not None else cfg["run"]["ablation"]
    ablation = _ablation("train", tag)
    task = cfg["run"]["task"]
    if task not in ("collection", "token"):
        _fail("train", EXIT_CONFIG, "bad_value", f"run.task={task}")
    pipe = _assemble("train", cfg, ablation)
    if not pipe.samples["train"]:
        _fail("train", EXIT_DATA, "empty_split", "no training samples")
    tokens = None
    if task == "token":
        tokens = model.build_token_samples(
            pipe.records, pipe.series, pipe.plan, pipe.rarity, pipe.rates,
            pipe.wash | pipe.outliers, pipe.config.history, pipe.config.step)
        if not tokens["train"]:
            _fail("train", EXIT_DATA, "empty_split", "no token sales")
    names = []
    for seed in _seeds("train", cfg):
        backbone = model.CometModel(pipe.config, pipe.universe, pipe.comms,
                                    pipe.schema, pipe.static, seed, ablation)
        log = model.train_collection(backbone, pipe.prepared,
                                     pipe.samples["train"],
                                     pipe.samples["val"], seed)
        head = None
        if task == "token":
            head = model.TokenHead(pipe.config, seed, ablation)
            model.train_token(head, backbone, pipe.prepared,
                              tokens["train"], tokens["val"], seed)
        name = _checkpoint_name(task, tag, seed)
        _save_checkpoint(pipe.out / name, task, tag, seed, backbone, head)
        with open(pipe.out / f"trainlog_{task}_{tag}_seed{seed}.csv", "w") as f:
            f.write("epoch,train_loss,val_loss,val_acc,val_mcc\n")
            for row in log:
                f.write(f"{row.epoch},{row.train_loss:.6f},{row.val_loss:.6f},"
                        f"{row.val_acc:.6f},{row.val_mcc:.6f}\n")
        names.append(name)
        click.echo(f"train: seed {seed} done ({len(log)} epochs) -> {name}")
    _record(pipe.out, names)


@main.command("evaluate")
@click.option("--ablate", default=None, help="Ablation tag override.")
@click.pass_obj
def cmd_evaluate(obj, ablate):
    """Test-split metrics for every configured seed; writes report.csv."""
    cfg = _cfg(obj, "evaluate")
    tag = ablate if ablate is not None else cfg["run"]["ablation"]
    ablation = _ablation("evaluate", tag)
    task = cfg["run"]["task"]
    pipe = _assemble("evaluate", cfg, ablation, verify=True)
    seeds = _seeds("evaluate", cfg)
    names = [_checkpoint_name(task, tag, s) for s in seeds]
    _verify("evaluate", pipe.out, names)
    tokens = None
    if task == "token":
        tokens = model.build_token_samples(
            pipe.records, pipe.series, pipe.plan, pipe.rarity, pipe.rates,
            pipe.wash | pipe.outliers, pipe.config.history, pipe.config.step)
    rows = []
    for seed, name in zip(seeds, names):
        meta, backbone, head = _load_checkpoint("evaluate", pipe.out / name,
                                                pipe)
        if task == "collection":
            probs, labels = backbone.predict_samples(pipe.prepared,
                                                     pipe.samples["test"])
            acc, mcc = evaluation.metrics_classification(probs, labels)
            rows.append(evaluation.ReportRow("collection", pipe.config.step,
                                             tag, seed, acc, mcc, 0.0, 0.0,
                                             len(labels)))
        else:
            test = tokens["test"]
            windows = {} if ablation.drop_collection_embedding else \
                model.precompute_windows(backbone, pipe.prepared,
                                         {s.ref_day for s in test})
            preds, targets = model.predict_token_samples(
                head, test, windows, pipe.universe.collection_index)
            mae, mse = evaluation.metrics_regression(preds, targets)
            rows.append(evaluation.ReportRow("token", pipe.config.step, tag,
                                             seed, 0.0, 0.0, mae, mse,
                                             len(test)))
    evaluation.write_report_csv(pipe.out / "report.csv", rows)
    _record(pipe.out, ["report.csv"])
    for r in rows:
        click.echo(f"evaluate: {r.task} {r.ablation} seed {r.seed} "
                   f"acc {r.acc:.4f} mcc {r.mcc:.4f} mae {r.mae:.4f}")


@main.command("importance")
@click.option("--feature", "features", multiple=True, required=True,
              help="Feature name to permute (repeatable).")
@click.pass_obj
def cmd_importance(obj, features):
    """Permutation importance of named features on the test split."""
    cfg = _cfg(obj, "importance")
    tag = cfg["run"]["ablation"]
    ablation = _ablation("importance", tag)
    pipe = _assemble("importance", cfg, ablation)
    seed = _seeds("importance", cfg)[0]
    name = _checkpoint_name("collection", tag, seed)
    _require("importance", pipe.out, (name,))
    _, backbone, _ = _load_checkpoint("importance", pipe.out / name, pipe)
    with open(pipe.out / "importance.csv", "w") as f:
        f.write("feature,importance\n")
        for feature in features:
            try:
                imp = evaluation.permutation_importance(
                    backbone, pipe.prepared, pipe.samples["test"], feature,
                    seed=seed)
            except KeyError:
                _fail("importance", EXIT_CONFIG, "unknown_feature", feature)
            f.write(f"{feature},{imp:.6f}\n")
            click.echo(f"importance: {feature} {imp:+.4f}")
    _record(pipe.out, ["importance.csv"])


@main.command("report")
@click.pass_obj
def cmd_report(obj):
    """Render report.csv into a markdown summary and plot-ready means."""
    cfg = _cfg(obj, "report")
    out = Path(cfg["paths"]["output_dir"])
    _require("report", out, ("report.csv",))
    rows = evaluation.read_report_csv(open(out / "report.csv"))
    (out / "summary.md").write_text(evaluation.summarize_report(rows))
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.task, r.step, r.ablation), []).append(r)
    with open(out / "plot_data.csv", "w") as f:
        f.write("task,step,ablation,n_seeds,acc_mean,acc_std,mcc_mean,"
                "mcc_std,mae_mean,mae_std,mse_mean,mse_std\n")
        for (task, step, tag), rs in sorted(groups.items()):
            cols = []
            for attr in ("acc", "mcc", "mae", "mse"):
                vals = np.array([getattr(r, attr) for r in rs])
                cols += [vals.mean(), vals.std()]
            f.write(f"{task},{step},{tag},{len(rs)}," +
                    ",".join(f"{v:.6f}" for v in cols) + "\n")
    _record(out, ["summary.md", "plot_data.csv"])
    click.echo(f"report: {len(rows)} rows, {len(groups)} configurations")


if __name__ == "__main__":
    main()
