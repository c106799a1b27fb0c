"""End-to-end orchestration of the three-step method and the report tables.

For each repeat a fresh 8/3 participant split is drawn. The float CNN is fit
on the group's data, quantized, calibrated and retrained, then frozen as a
spiking feature extractor. Each held-out participant gets a binary edge
readout trained from a handful of their own segments.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .archive import read_dataset_archive, save_checkpoint, write_dataset_archive
from .csnn import convert_to_csnn, extract_features, infer_dense, infer_event
from .edge import EdgeLearnConfig, edge_train, init_edge_layer, num_weights_from_mean
from .eeg import (FCAS_CHANNELS, MONTAGE, GeneratorConfig, LabeledDataset, augment_noise,
                  build_dataset, compute_class_weights, derive_seed, duplicate_positives,
                  generate_participant, split_participants, stratified_split)
from .quantization import INPUT_SCALE, QatConfig, calibrate_thresholds, qat_retrain, quantize_cnn
from .stats import (CostModel, aggregate, compute_metrics, energy_proxy, latency_ratio,
                    percent_reduction, welch_t_test)
from .tensor import CnnModel, TrainConfig, fit_stage1

__all__ = [
    "EXPERIMENTS",
    "STUDIES",
    "ConfigError",
    "RunConfig",
    "load_corpus",
    "gen_data",
    "run_split",
    "full_run",
    "report",
]

EXPERIMENTS = {1: "countdown-nominal", 2: "countdown-stressed", 3: "stoplight"}
STUDIES = {"acs": MONTAGE, "fcas": FCAS_CHANNELS}
TABLE_STAGES = ("stage1", "stage2", "epoch3", "epoch5", "epoch7")
METRICS = ("accuracy", "tpr", "tnr")

RESULT_FIELDS = ("study", "split", "driver", "stage", "partition", "seed",
                 "accuracy", "tpr", "tnr", "tp", "tn", "fp", "fn")
CURVE_FIELDS = ("study", "split", "driver", "epoch", "accuracy", "tpr", "tnr")
ENERGY_FIELDS = ("study", "split", "driver", "path", "samples", "conv1_ops", "conv2_ops",
                 "readout_ops", "dense_macs", "event_accumulates", "weight_fetches", "energy")
LATENCY_FIELDS = ("study", "split", "driver", "path", "samples", "wall_clock")
PREDICTION_FIELDS = ("study", "split", "driver", "stage", "partition", "index", "trial_id",
                     "label", "prediction")


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 2)."""


def _desk_train() -> TrainConfig:
    return TrainConfig(epochs=12, learning_rate=2e-3)


def _desk_qat() -> QatConfig:
    return QatConfig()


@dataclass
class RunConfig:
    """Everything a run depends on. Defaults are the desk-scale benchmark."""

    experiment: int = 1
    studies: tuple = ("acs", "fcas")
    repeats: int = 10
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig.desk_scale)
    train: TrainConfig = field(default_factory=_desk_train)
    qat: QatConfig = field(default_factory=_desk_qat)
    edge: EdgeLearnConfig = field(default_factory=EdgeLearnConfig)
    edge_epochs: int = 25
    duplicate_copies: int = 3
    augment_copies: int = 4
    test_fraction: float = 0.2
    calibration_percentile: float = 50.0
    calibration_samples: int = 64
    energy_samples: int = 0  # 0 means every held-out individual segment
    cost: CostModel = field(default_factory=CostModel)
    out: str = "runs/latest"
    data: Optional[str] = None

    def __post_init__(self):
        self.studies = tuple(self.studies)
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {sorted(EXPERIMENTS)}")
        bad = [s for s in self.studies if s not in STUDIES]
        if bad or not self.studies:
            raise ConfigError(f"unknown studies {bad}; choose from {sorted(STUDIES)}")
        if self.repeats < 1 or self.edge_epochs < 0:
            raise ConfigError("repeats must be >= 1 and edge_epochs >= 0")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.generator.participants != 11:
            raise ConfigError("the 8/3 split protocol needs exactly 11 participants")

    @property
    def kind(self) -> str:
        return EXPERIMENTS[self.experiment]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["studies"] = list(self.studies)
        d["train"]["class_weights"] = list(self.train.class_weights)
        d["qat"]["class_weights"] = list(self.qat.class_weights)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        nested = {"generator": GeneratorConfig, "train": TrainConfig, "qat": QatConfig,
                  "edge": EdgeLearnConfig, "cost": CostModel}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        try:
            for key, value in raw.items():
                if key in nested:
                    base = asdict(getattr(cls(), key))
                    extra = set(value) - set(base)
                    if extra:
                        raise ConfigError(f"unknown keys in '{key}': {sorted(extra)}")
                    base.update(value)
                    # JSON has no tuples; every sequence field is a tuple
                    base = {k: tuple(v) if isinstance(v, list) else v for k, v in base.items()}
                    kwargs[key] = nested[key](**base)
                else:
                    kwargs[key] = value
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(raw)


def _noop(msg: str):
    pass


def load_corpus(config: RunConfig, log: Callable = _noop) -> dict:
    """``{study: {participant: LabeledDataset}}`` for the configured experiment.

    Reads archives from ``config.data`` when given, otherwise generates them.
    Channel restriction happens before the per-segment int8 quantization.
    """
    ids = range(config.generator.participants)
    corpus = {s: {} for s in config.studies}
    if config.data:
        for p in ids:
            root = Path(config.data) / config.kind / f"p{p:02d}"
            splits, _ = read_dataset_archive(root)
            for s in config.studies:
                if s not in splits:
                    raise FileNotFoundError(f"{root} has no '{s}' split")
                corpus[s][p] = splits[s]
        return corpus
    for p in ids:
        trials = generate_participant(config.generator, p, config.kind)
        for s in config.studies:
            rejected = []
            corpus[s][p] = build_dataset(trials, STUDIES[s], rejected)
            for reason in rejected:
                log(f"rejected trial {reason}")
    return corpus


def gen_data(config: RunConfig, log: Callable = _noop) -> Path:
    """Write one archive per (experiment kind, participant) holding every study's segments."""
    root = Path(config.out) / "data"
    for kind in EXPERIMENTS.values():
        for p in range(config.generator.participants):
            trials = generate_participant(config.generator, p, kind)
            splits = {s: build_dataset(trials, STUDIES[s]) for s in STUDIES}
            write_dataset_archive(root / kind / f"p{p:02d}", splits, {
                "kind": kind, "participant": p, "montage": list(MONTAGE),
                "fs": 500, "seed": config.generator.seed,
                "generator": _jsonable(asdict(config.generator)),
            })
        log(f"wrote {config.generator.participants} archives for {kind}")
    return root


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _float_input(ds: LabeledDataset) -> np.ndarray:
    return ds.as_input().astype(np.float32) * np.float32(INPUT_SCALE)


@dataclass
class SplitRecord:
    results: list = field(default_factory=list)
    curves: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    latency: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    info: dict = field(default_factory=dict)
    model: object = None  # the retrained group network, kept for the checkpoint


def _metric_row(study, split, driver, stage, partition, seed, report) -> dict:
    return {"study": study, "split": split, "driver": driver, "stage": stage, "partition": partition,
            "seed": seed, "accuracy": report.accuracy, "tpr": report.tpr, "tnr": report.tnr,
            "tp": report.tp, "tn": report.tn, "fp": report.fp, "fn": report.fn}


def _score(rec: SplitRecord, key: tuple, stage: str, partition: str, ds: LabeledDataset, preds):
    study, split, driver, seed = key
    report = compute_metrics(preds, ds.labels)
    rec.results.append(_metric_row(study, split, driver, stage, partition, seed, report))
    for i, (t, y, p) in enumerate(zip(ds.trial_ids, ds.labels, preds)):
        rec.predictions.append({"study": study, "split": split, "driver": driver, "stage": stage,
                                "partition": partition, "index": i, "trial_id": t,
                                "label": int(y), "prediction": int(p)})
    return report


def run_split(config: RunConfig, study: str, split: int, corpus: dict, group: list,
              individuals: list, log: Callable = _noop) -> SplitRecord:
    """One repeat of the method for one study."""
    seed = config.seed
    rec = SplitRecord(info={"group": list(group), "individuals": list(individuals)})
    data = corpus[study]
    key = (study, split, "group", seed)

    group_ds = LabeledDataset.concatenate([data[p] for p in group])
    tr, te = stratified_split(group_ds.labels, config.test_fraction, derive_seed(seed, "group-split", split))
    g_train, g_test = group_ds.subset(tr), group_ds.subset(te)
    weights = compute_class_weights(g_train)
    model = CnnModel(input_shape=(1,) + g_train.data.shape[1:], seed=derive_seed(seed, "init", study, split))
    train_cfg = replace(config.train, seed=derive_seed(seed, "stage1", study, split), class_weights=weights)
    t0 = time.perf_counter()
    best, losses = fit_stage1(model, _float_input(g_train), g_train.labels, train_cfg, log=log)
    rec.info["stage1_losses"] = losses
    rec.info["class_weights"] = list(weights)
    for part, ds in (("train", g_train), ("test", g_test)):
        _score(rec, key, "stage1", part, ds, best.predict(_float_input(ds)))

    q = quantize_cnn(best)
    calib = g_train.as_input()[: config.calibration_samples]
    q.thresholds = calibrate_thresholds(q, calib, config.calibration_percentile)
    for part, ds in (("train", g_train), ("test", g_test)):
        _score(rec, key, "quantized", part, ds, q.predict(ds.as_input()))
    qat_cfg = replace(config.qat, seed=derive_seed(seed, "qat", study, split), class_weights=weights)
    q2 = qat_retrain(q, g_train.as_input(), g_train.labels, qat_cfg, log=log)
    rec.info["qat_epochs"] = q2.history[-1][0]
    rec.info["thresholds"] = list(q2.thresholds.as_tuple())
    for part, ds in (("train", g_train), ("test", g_test)):
        _score(rec, key, "stage2", part, ds, q2.predict(ds.as_input()))
    log(f"[{study} split {split}] group stages done in {time.perf_counter() - t0:.1f}s")

    rec.model = q2
    headless = convert_to_csnn(q2)
    for p in individuals:
        _run_individual(config, rec, study, split, p, data[p], headless, log)
    return rec


def _run_individual(config, rec, study, split, p, data, headless, log):
    seed = config.seed
    driver = f"p{p:02d}"
    key = (study, split, driver, seed)
    tr, te = stratified_split(data.labels, config.test_fraction, derive_seed(seed, "ind-split", split, p))
    test = data.subset(te)
    train = duplicate_positives(data.subset(tr), config.duplicate_copies)
    train = augment_noise(train, config.augment_copies, derive_seed(seed, "augment", study, split, p))
    f_train = extract_features(headless, train.as_input())
    f_test = extract_features(headless, test.as_input())
    num_weights = min(num_weights_from_mean(float(f_train.sum(axis=1).mean())), headless.feature_dim)
    edge_cfg = replace(config.edge, seed=derive_seed(seed, "edge", study, split, p))
    layer = init_edge_layer(headless.feature_dim, num_weights, edge_cfg)

    def on_epoch(epoch, preds):
        report = compute_metrics(preds, test.labels)
        rec.curves.append({"study": study, "split": split, "driver": driver, "epoch": epoch,
                           "accuracy": report.accuracy, "tpr": report.tpr, "tnr": report.tnr})
        _score(rec, key, f"epoch{epoch}", "test", test, preds)

    layer, _ = edge_train(layer, f_train, train.labels, config.edge_epochs, f_test, test.labels,
                          seed=derive_seed(seed, "edge-order", study, split, p), on_epoch=on_epoch)
    rec.info.setdefault("num_weights", {})[driver] = num_weights

    model = convert_to_csnn(headless.q, layer)
    xs = test.as_input()
    if config.energy_samples:
        xs = xs[: config.energy_samples]
    t0 = time.perf_counter()
    dense = infer_dense(model, xs)
    t1 = time.perf_counter()
    event = infer_event(model, xs)
    t2 = time.perf_counter()
    for a, b in zip(dense, event):
        if not (np.array_equal(a.potentials, b.potentials) and a.trace == b.trace):
            raise RuntimeError(f"event and dense paths disagree for {driver}")
    for path, results, wall in (("dense", dense, t1 - t0), ("event", event, t2 - t1)):
        ops = results[0].ops
        for r in results[1:]:
            ops = ops + r.ops
        rep = energy_proxy(ops, config.cost)
        counted = {n: (l.event_accumulates if l.event_driven else l.dense_macs) for n, l in ops.layers.items()}
        rec.energy.append({"study": study, "split": split, "driver": driver, "path": path,
                           "samples": len(results), "conv1_ops": counted["conv1"],
                           "conv2_ops": counted["conv2"], "readout_ops": counted["readout"],
                           "dense_macs": ops.dense_macs, "event_accumulates": ops.event_accumulates,
                           "weight_fetches": ops.weight_fetches, "energy": rep.energy})
        rec.latency.append({"study": study, "split": split, "driver": driver, "path": path,
                            "samples": len(results), "wall_clock": wall})
    last = rec.curves[-1] if rec.curves else {}
    log(f"[{study} split {split}] {driver}: num_weights {num_weights}, final acc {last.get('accuracy')}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


def full_run(config: RunConfig, log: Callable = _noop) -> Path:
    """Run every repeat for every configured study and write the bundle CSVs."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(config, log)
    ids = list(range(config.generator.participants))
    splits = split_participants(ids, derive_seed(config.seed, "participants"), max(config.repeats, 4))
    splits = splits[: config.repeats]
    merged = SplitRecord()
    status = []
    for study in config.studies:
        for r, (group, individuals) in enumerate(splits):
            entry = {"study": study, "split": r, "group": group, "individuals": individuals}
            try:
                rec = run_split(config, study, r, corpus, group, individuals, log)
            except Exception as exc:  # a failed split is reported, not fatal
                log(f"[{study} split {r}] aborted: {exc!r}")
                entry.update(status="incomplete", reason=repr(exc))
                status.append(entry)
                continue
            entry.update(status="complete", **{k: v for k, v in rec.info.items()
                                               if k not in ("group", "individuals")})
            status.append(entry)
            save_checkpoint(out / "checkpoints" / f"{study}-split{r}", rec.model)
            for name in ("results", "curves", "energy", "latency", "predictions"):
                getattr(merged, name).extend(getattr(rec, name))
    _write_csv(out / "results.csv", RESULT_FIELDS, merged.results)
    _write_csv(out / "curves.csv", CURVE_FIELDS, merged.curves)
    _write_csv(out / "energy.csv", ENERGY_FIELDS, merged.energy)
    _write_csv(out / "latency.csv", LATENCY_FIELDS, merged.latency)
    _write_csv(out / "predictions.csv", PREDICTION_FIELDS, merged.predictions)
    bundle = {"config": _jsonable(config.to_dict()), "splits": _jsonable(status),
              "files": ["results.csv", "curves.csv", "energy.csv", "latency.csv", "predictions.csv"],
              "checkpoints": "checkpoints/<study>-split<r>",
              "note": "energy is an operation-count proxy in relative units, not joules; "
                      "latency.csv holds wall-clock times and is the only non-deterministic output"}
    (out / "bundle.json").write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n")
    return out


def _read_csv(path: Path) -> list[dict]:
    if not path.is_file():
        raise FileNotFoundError(f"missing bundle file {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _values(rows, study, stage, partition, metric) -> list[float]:
    return [float(r[metric]) for r in rows
            if r["study"] == study and r["stage"] == stage and r["partition"] == partition
            and r[metric] != ""]


def _table_partition(stage: str) -> str:
    return "train" if stage in ("stage1", "stage2") else "test"


def _p_value(a, b):
    if len(a) < 2 or len(b) < 2:
        return None
    try:
        return welch_t_test(a, b).p_value
    except ValueError:  # both samples constant
        return 1.0 if np.mean(a) == np.mean(b) else 0.0


def report(bundle_dir, log: Callable = _noop) -> dict:
    """Aggregate a bundle into ``tables.csv``, ``energy_table.csv`` and ``curves_summary.csv``."""
    root = Path(bundle_dir)
    if not (root / "bundle.json").is_file():
        raise FileNotFoundError(f"no bundle.json in {root}")
    results = _read_csv(root / "results.csv")
    curves = _read_csv(root / "curves.csv")
    energy = _read_csv(root / "energy.csv")
    latency = _read_csv(root / "latency.csv")
    studies = [s for s in STUDIES if any(r["study"] == s for r in results)]

    table = []
    for stage in TABLE_STAGES:
        part = _table_partition(stage)
        for metric in METRICS:
            vals = {s: _values(results, s, stage, part, metric) for s in studies}
            p = _p_value(vals["acs"], vals["fcas"]) if {"acs", "fcas"} <= set(vals) else None
            for s in studies:
                if not vals[s]:
                    continue
                mean, sd = aggregate(vals[s])
                table.append({"stage": stage, "study": s, "metric": metric, "mean": mean, "sd": sd,
                              "n": len(vals[s]), "p_value": p})
    _write_csv(root / "tables.csv", ("stage", "study", "metric", "mean", "sd", "n", "p_value"), table)

    etable = []
    for s in studies:
        e = {path: [float(r["energy"]) / int(r["samples"]) for r in energy
                    if r["study"] == s and r["path"] == path] for path in ("dense", "event")}
        t = {path: [float(r["wall_clock"]) / int(r["samples"]) for r in latency
                    if r["study"] == s and r["path"] == path] for path in ("dense", "event")}
        if not e["dense"] or not e["event"]:
            continue
        em = {k: aggregate(v) for k, v in e.items()}
        tm = {k: aggregate(v) for k, v in t.items()}
        etable.append({
            "study": s, "energy_dense_mean": em["dense"][0], "energy_dense_sd": em["dense"][1],
            "energy_event_mean": em["event"][0], "energy_event_sd": em["event"][1],
            "latency_dense_mean": tm["dense"][0], "latency_dense_sd": tm["dense"][1],
            "latency_event_mean": tm["event"][0], "latency_event_sd": tm["event"][1],
            "pr": percent_reduction(em["dense"][0], em["event"][0]),
            "lr": latency_ratio(tm["event"][0], tm["dense"][0]),
        })
    _write_csv(root / "energy_table.csv", ("study", "energy_dense_mean", "energy_dense_sd",
                                           "energy_event_mean", "energy_event_sd",
                                           "latency_dense_mean", "latency_dense_sd",
                                           "latency_event_mean", "latency_event_sd", "pr", "lr"), etable)

    summary = []
    epochs = sorted({int(r["epoch"]) for r in curves})
    for s in studies:
        for ep in epochs:
            rows = [r for r in curves if r["study"] == s and int(r["epoch"]) == ep]
            for metric in METRICS:
                vals = [float(r[metric]) for r in rows if r[metric] != ""]
                if vals:
                    mean, sd = aggregate(vals)
                    summary.append({"study": s, "epoch": ep, "metric": metric, "mean": mean,
                                    "sd": sd, "n": len(vals)})
    _write_csv(root / "curves_summary.csv", ("study", "epoch", "metric", "mean", "sd", "n"), summary)
    log(format_table(table))
    return {"tables": table, "energy": etable, "curves": summary}


def format_table(rows: list[dict]) -> str:
    lines = [f"{'stage':<8} {'study':<5} {'metric':<9} {'mean':>8} {'sd':>8} {'p':>8}"]
    for r in rows:
        p = "" if r["p_value"] is None else f"{r['p_value']:.3g}"
        lines.append(f"{r['stage']:<8} {r['study']:<5} {r['metric']:<9} "
                     f"{100 * r['mean']:8.2f} {100 * r['sd']:8.2f} {p:>8}")
    return "\n".join(lines)
