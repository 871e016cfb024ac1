"""Experiment harness: one configured run -> a directory of CSV results.

Files written by ``run_experiment`` (all listed in ``manifest.csv``):

  config.txt            resolved configuration, loadable with ``--config``
  rounds.csv            round,acc,t_c1_c1,t_c2_c2,t_c1_s,t_c2_s,t_s_s,t_broadcast,t_control,total
  timing.txt            the same timings as a fixed-width table plus totals
  links.csv             round,link,sent,detected,crc_ok,corrupted_fraction,airtime_s
  confusion.csv         final global confusion matrix, rows = true class
  cross_accuracy.csv    client,classes,accuracy,local_only_accuracy   (non-IID only)
  cross_confusion_client{1,2}.csv                                    (non-IID only)
  trace.txt             "<sim_time_s> <node> <event>" per protocol event
  plot.gp               gnuplot script for the accuracy curve
  manifest.csv          file,kind,rows

A sweep adds ``table1.csv`` (one row per config) and ``table1.txt``.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, parse_key_values
from .data import N_CLASSES, LabeledImage, PartitionMode, load_mnist_dir, partition
from .model import ModelParams, TrainConfig, evaluate, init_model, run_local_training
from .protocol import (SessionResult, _round_seed, format_trace, run_session, timing_report)

log = logging.getLogger(__name__)

NON_IID_CLASSES = {1: (0, 1), 2: (2, 3)}
CROSS_CLASSES = {1: NON_IID_CLASSES[2], 2: NON_IID_CLASSES[1]}


class ExperimentError(RuntimeError):
    pass


@dataclass
class CrossAccuracy:
    """Accuracy of one model on the test images of the classes a client never held."""

    client_id: int
    classes: tuple
    accuracy: float
    confusion: np.ndarray


def _restricted(test: list[LabeledImage], classes) -> list[LabeledImage]:
    keep = set(classes)
    return [s for s in test if s.label in keep]


def cross_accuracy(final_global: ModelParams, test: list[LabeledImage], partition_mode) -> tuple:
    """``(client1, client2)`` cross-accuracies of ``final_global``.

    Client 1 is scored on classes {2, 3}, client 2 on {0, 1}.
    """
    if PartitionMode.parse(partition_mode) is not PartitionMode.NON_IID:
        raise ExperimentError("cross-accuracy is only defined for the non-IID partition")
    out = []
    for cid in (1, 2):
        subset = _restricted(test, CROSS_CLASSES[cid])
        if not subset:
            raise ExperimentError(f"test set has no samples of classes {CROSS_CLASSES[cid]}")
        acc, conf = evaluate(final_global, subset)
        out.append(CrossAccuracy(cid, CROSS_CLASSES[cid], acc, conf))
    return tuple(out)


def local_only_baseline(config: ExperimentConfig, clients, test, rounds: int) -> tuple:
    """Train each client alone for ``rounds`` rounds (no aggregation) and score
    its model on the other client's classes, exactly as ``cross_accuracy`` does."""
    out = []
    for client in clients:
        params = init_model(config.init_seed, config.hidden)
        for r in range(1, rounds + 1):
            tc = TrainConfig(learning_rate=config.lr, epochs=config.epochs, batch_size=config.batch_size,
                             seed=_round_seed(config.init_seed, r, client.client_id))
            params = run_local_training(params, client, tc).params
        subset = _restricted(test, CROSS_CLASSES[client.client_id])
        acc, conf = evaluate(params, subset)
        out.append(CrossAccuracy(client.client_id, CROSS_CLASSES[client.client_id], acc, conf))
    return tuple(out)


@dataclass
class ResultBundle:
    config: ExperimentConfig
    session: SessionResult
    cross: tuple | None = None
    local_only: tuple | None = None
    output_dir: Path | None = None
    files: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> list[float]:
        return self.session.accuracies

    @property
    def confusion(self) -> np.ndarray:
        return self.session.confusions[-1]

    @property
    def timing(self):
        return timing_report(self.session.traces, self.session.accuracies, self.config.compute_timing)

    @property
    def corrupted_fraction(self) -> float:
        """Mean over every link transmission of the session."""
        fr = [ls.corrupted_fraction for tr in self.session.traces for ls in tr.links]
        return float(np.mean(fr)) if fr else 0.0


def load_data(config: ExperimentConfig):
    train, test = load_mnist_dir(config.data_dir, config.classes, config.data_seed, config.max_per_class)
    return partition(train, config.partition, config.data_seed), test


def run_experiment(config: ExperimentConfig, data=None, progress=None, baseline: bool = True) -> ResultBundle:
    """Load data, run the federated session, compute metrics and write outputs.

    ``data`` may be a preloaded ``(clients, test)`` pair.
    """
    config = config.resolved()
    clients, test = data if data is not None else load_data(config)
    session = run_session(config, clients, test, progress=progress)
    bundle = ResultBundle(config, session)
    if config.partition is PartitionMode.NON_IID:
        bundle.cross = cross_accuracy(session.final_model, test, config.partition)
        if baseline:
            bundle.local_only = local_only_baseline(config, clients, test, session.rounds)
    if config.output_dir:
        write_bundle(bundle, config.output_dir)
    return bundle


# -- output -------------------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _confusion_csv(conf: np.ndarray) -> str:
    return _csv(["true"] + [f"pred_{c}" for c in range(N_CLASSES)],
                [[t] + [int(v) for v in conf[t]] for t in range(N_CLASSES)])


_PLOT = """\
set datafile separator ','
set key autotitle columnhead
set xlabel 'round'
set ylabel 'test accuracy'
set yrange [0:1]
set grid
plot 'rounds.csv' using 1:2 with linespoints title '{title}'
"""


def write_bundle(bundle: ResultBundle, output_dir) -> dict:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = bundle.session
    report = bundle.timing
    files = {
        "config.txt": ("config", bundle.config.to_text()),
        "rounds.csv": ("csv", report.to_csv()),
        "timing.txt": ("text", report.to_text()),
        "links.csv": ("csv", _csv(
            ["round", "link", "sent", "detected", "crc_ok", "corrupted_fraction", "airtime_s"],
            [[tr.round_index, ls.link, ls.sent, ls.detected, ls.crc_ok,
              repr(round(ls.corrupted_fraction, 9)), repr(round(ls.airtime_s, 9))]
             for tr in s.traces for ls in tr.links])),
        "confusion.csv": ("csv", _confusion_csv(bundle.confusion)),
        "trace.txt": ("text", format_trace(s.traces)),
        "plot.gp": ("gnuplot", _PLOT.format(
            title=f"{bundle.config.partition.value}, {bundle.config.epochs} epochs, "
                  f"{bundle.config.tx_power_db:g} dB")),
    }
    if bundle.cross is not None:
        local = bundle.local_only or (None, None)
        rows = []
        for cross, base in zip(bundle.cross, local):
            rows.append([cross.client_id, " ".join(map(str, cross.classes)), repr(cross.accuracy),
                         "" if base is None else repr(base.accuracy)])
            files[f"cross_confusion_client{cross.client_id}.csv"] = ("csv", _confusion_csv(cross.confusion))
        files["cross_accuracy.csv"] = ("csv", _csv(
            ["client", "classes", "accuracy", "local_only_accuracy"], rows))
    manifest = []
    for name, (kind, text) in files.items():
        (out / name).write_text(text)
        n_rows = text.count("\n") - 1 if kind == "csv" else text.count("\n")
        manifest.append([name, kind, n_rows])
    (out / "manifest.csv").write_text(_csv(["file", "kind", "rows"], manifest))
    bundle.output_dir = out
    bundle.files = {name: out / name for name in files}
    return bundle.files


def read_manifest(directory) -> list[dict]:
    """Parse ``manifest.csv`` and check every listed file exists (CSV files must parse)."""
    d = Path(directory)
    path = d / "manifest.csv"
    if not path.is_file():
        raise ExperimentError(f"{d}: no manifest.csv")
    entries = list(csv.DictReader(path.read_text().splitlines()))
    for e in entries:
        f = d / e["file"]
        if not f.is_file():
            raise ExperimentError(f"{d}: manifest lists missing file {e['file']}")
        if e["kind"] == "csv":
            rows = list(csv.reader(f.read_text().splitlines()))
            if len(rows) - 1 != int(e["rows"]) or any(len(r) != len(rows[0]) for r in rows):
                raise ExperimentError(f"{f}: malformed CSV")
    return entries


# -- sweeps -------------------------------------------------------------------

TABLE_COLUMNS = ("index", "partition", "epochs", "tx_power_db", "data_seed", "init_seed", "channel_seed",
                 "best_accuracy", "final_accuracy", "rounds", "converged", "time_s",
                 "corrupted_fraction", "status", "error", "output_dir")

_TUPLE_KEYS = {"hidden", "classes"}


def expand_sweep(text: str, source: str = "<sweep>") -> list[ExperimentConfig]:
    """Cartesian product over every comma-separated value list.

    Tuple-valued keys (``hidden``, ``classes``) separate alternatives with ``;``.
    Keys are varied in file order, the last key fastest.
    """
    raw = parse_key_values(text, source)
    axes = []
    for key, value in raw.items():
        sep = ";" if key.replace("-", "_") in _TUPLE_KEYS else ","
        axes.append([(key, v.strip()) for v in value.split(sep) if v.strip()])
    configs = []
    for combo in itertools.product(*axes):
        configs.append(ExperimentConfig.from_mapping(dict(combo), source))
    if not configs:
        raise ConfigError(f"{source}: sweep expands to no configurations")
    return configs


def _label(i: int, c: ExperimentConfig) -> str:
    return f"{i:02d}-{c.partition.value}-e{c.epochs}-p{c.tx_power_db:g}-s{c.channel_seed}"


def _run_entry(args):
    i, config = args
    row = {
        "index": i, "partition": config.partition.value, "epochs": config.epochs,
        "tx_power_db": config.tx_power_db, "data_seed": config.data_seed, "init_seed": config.init_seed,
        "channel_seed": config.channel_seed, "output_dir": config.output_dir or "",
    }
    try:
        b = run_experiment(config)
    except Exception as exc:  # a failed entry is recorded, the sweep goes on
        log.debug("sweep entry %d failed:\n%s", i, traceback.format_exc())
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        return row
    row.update(
        best_accuracy=b.session.best_accuracy, final_accuracy=b.session.final_accuracy,
        rounds=b.session.rounds, converged=b.session.converged, time_s=b.session.total_time_s,
        corrupted_fraction=b.corrupted_fraction, status="ok", error="",
    )
    return row


def sweep(configs, output_dir=None, jobs: int = 1) -> list[dict]:
    """Run every config; returns one table row per config (failures included)."""
    configs = list(configs)
    if not configs:
        raise ConfigError("sweep needs at least one configuration")
    if output_dir is not None:
        root = Path(output_dir)
        configs = [c.replace(output_dir=str(root / "runs" / _label(i, c))) for i, c in enumerate(configs)]
    work = list(enumerate(configs))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_entry, work))
    else:
        rows = [_run_entry(w) for w in work]
    if output_dir is not None:
        write_table(rows, output_dir)
    return rows


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(round(v, 9))
    return str(v)


def table_csv(rows) -> str:
    return _csv(TABLE_COLUMNS, [[_cell(r.get(c)) for c in TABLE_COLUMNS] for r in rows])


def table_text(rows) -> str:
    """Epochs x power rows, one accuracy / rounds / time column group per partition."""
    parts = [m.value for m in PartitionMode]
    keys = sorted({(r["epochs"], r["tx_power_db"]) for r in rows})
    head = f"{'epochs':>6} {'power':>6} " + " ".join(
        f"| {p + ' acc(%)':>13} {'rounds':>6} {'time(s)':>9}" for p in parts)
    out = [head]
    for ep, pw in keys:
        line = f"{ep:>6} {pw:>6g} "
        for p in parts:
            match = [r for r in rows if (r["epochs"], r["tx_power_db"], r["partition"]) == (ep, pw, p)]
            ok = [r for r in match if r["status"] == "ok"]
            if ok:
                acc = 100 * np.mean([r["best_accuracy"] for r in ok])
                rounds = np.mean([r["rounds"] for r in ok])
                t = np.mean([r["time_s"] for r in ok])
                line += f"| {acc:>13.1f} {rounds:>6.1f} {t:>9.2f}"
            elif match:
                line += f"| {'failed':>13} {'':>6} {'':>9}"
            else:
                line += f"| {'-':>13} {'':>6} {'':>9}"
        out.append(line)
    return "\n".join(out) + "\n"


def write_table(rows, output_dir) -> None:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table1.csv").write_text(table_csv(rows))
    (out / "table1.txt").write_text(table_text(rows))


def read_table(path) -> list[dict]:
    return list(csv.DictReader(Path(path).read_text().splitlines()))

