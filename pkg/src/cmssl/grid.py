"""Pre-training x finetuning grid laid out like the published results table.

A row is a pre-training scenario (random init, or a modality set with or
without augmentations); a column is a finetuning modality set.  A cell is
runnable only when its modalities were all pre-trained (or the row is the
random-init baseline); everything else is rendered as a dash.
"""

from __future__ import annotations

import csv
import io
import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, GridRow, fingerprint_of
from .downstream import EvalReport, finetune, pretraining_pool
from .errors import ConfigError
from .trainer import pretrain
from .views import CLASS_NAMES, generate_synthetic, load_raw_dataset

DASH = "—"
THREADS_ENV = "CMSSL_THREADS"


def thread_count():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def column_label(column):
    return " + ".join(column)


def cell_legal(row: GridRow, column) -> bool:
    return row.pretrain is None or set(column) <= set(row.pretrain)


def load_dataset(config: ExperimentConfig):
    if config.manifest is not None:
        return load_raw_dataset(config.manifest)
    return generate_synthetic(config.synthetic, config.seed)


@dataclass
class CellResult:
    row: GridRow
    column: tuple
    seed: int
    report: EvalReport


class GridResults:
    def __init__(self, rows, columns, seeds, cells, fingerprint):
        self.rows = list(rows)
        self.columns = [tuple(c) for c in columns]
        self.seeds = list(seeds)
        self.cells = list(cells)
        self.fingerprint = fingerprint

    def accuracies(self, row: GridRow, column):
        column = tuple(column)
        return [c.report.accuracy for c in self.cells if c.row == row and c.column == column]

    def summary(self):
        """``{(row label, column label): (mean, std, n)}`` for every populated cell."""
        out = {}
        for row in self.rows:
            for col in self.columns:
                acc = self.accuracies(row, col)
                if acc:
                    std = float(np.std(acc, ddof=1)) if len(acc) > 1 else 0.0
                    out[(row.label, column_label(col))] = (float(np.mean(acc)), std, len(acc))
        return out

    def populated(self):
        return {(r.label, column_label(c)) for r in self.rows for c in self.columns if cell_legal(r, c)}

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pretrain_set", "finetune_set", "star_mode", "seed", "accuracy"]
                   + [f"acc_{n}" for n in CLASS_NAMES] + ["config_fingerprint"])
        for c in self.cells:
            pre = "None" if c.row.pretrain is None else "+".join(c.row.pretrain)
            w.writerow([pre, "+".join(c.column), int(c.row.star), c.seed, repr(c.report.accuracy)]
                       + [repr(a) for a in c.report.per_class_accuracy] + [self.fingerprint])
        return buf.getvalue()

    def table_text(self):
        summ = self.summary()
        header = ["Pre-training"] + [column_label(c) for c in self.columns]
        lines = []
        for row in self.rows:
            cells = [row.label]
            for col in self.columns:
                key = (row.label, column_label(col))
                if key in summ:
                    mean, std, _ = summ[key]
                    cells.append(f"{100 * mean:.2f}±{100 * std:.2f}")
                else:
                    cells.append(DASH)
            lines.append(cells)
        widths = [max(len(r[i]) for r in [header] + lines) for i in range(len(header))]
        fmt = lambda r: " | ".join(v.ljust(widths[i]) for i, v in enumerate(r)).rstrip()
        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(header), rule] + [fmt(r) for r in lines]) + "\n"

    @classmethod
    def from_csv(cls, path, rows, columns):
        """Rebuild results from a CSV written by :meth:`csv_text` (confusion matrices are not kept)."""
        cells, seeds, fingerprint = [], [], None
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                pre = None if rec["pretrain_set"] == "None" else tuple(rec["pretrain_set"].split("+"))
                row = GridRow(pre, bool(int(rec["star_mode"])))
                per_class = [float(rec[f"acc_{n}"]) for n in CLASS_NAMES]
                report = EvalReport(float(rec["accuracy"]), per_class, np.zeros((0, 0), dtype=np.int64))
                seed = int(rec["seed"])
                cells.append(CellResult(row, tuple(rec["finetune_set"].split("+")), seed, report))
                if seed not in seeds:
                    seeds.append(seed)
                fingerprint = rec["config_fingerprint"]
        return cls(rows, columns, seeds, cells, fingerprint)

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "grid_results.csv"), "w", newline="") as fh:
            fh.write(self.csv_text())
        with open(os.path.join(out_dir, "grid_table.txt"), "w") as fh:
            fh.write(f"# config {self.fingerprint}\n")
            fh.write(self.table_text())


class GridRunner:
    """Runs grid cells, pre-training each (row, seed) once and caching finished cells.

    With ``cache_dir`` every finished cell is stored under a hash of the
    compute-relevant config plus the cell coordinates, so an interrupted grid
    resumes without redoing work.
    """

    def __init__(self, config: ExperimentConfig, dataset=None, cache_dir=None, threads=None, progress=None):
        self.config = config
        self.dataset = load_dataset(config) if dataset is None else dataset
        self.cache_dir = cache_dir
        self.threads = thread_count() if threads is None else threads
        self.progress = progress
        self._bundles = {}
        # final-epoch collapse metrics of every pre-training run, keyed like the bundles
        self.pretrain_metrics = {}
        self._lock = threading.Lock()
        base = config.to_dict()
        base.pop("grid")
        base.pop("output_dir")
        self._base = base

    def cell_key(self, row: GridRow, column, seed):
        return fingerprint_of({"config": self._base, "row": row.to_dict(), "column": list(column), "seed": seed})

    def _cache_path(self, key):
        return os.path.join(self.cache_dir, "cells", f"{key}.json")

    def _cached(self, key):
        if self.cache_dir is None or not os.path.exists(self._cache_path(key)):
            return None
        with open(self._cache_path(key)) as fh:
            return EvalReport.from_dict(json.load(fh))

    def _store(self, key, report):
        if self.cache_dir is None:
            return
        os.makedirs(os.path.join(self.cache_dir, "cells"), exist_ok=True)
        tmp = self._cache_path(key) + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(report.to_dict(), fh, sort_keys=True)
        os.replace(tmp, self._cache_path(key))

    def bundle(self, row: GridRow, seed):
        """Pre-trained encoders for ``row`` (computed once per seed)."""
        key = (row.pretrain, row.star, seed)
        with self._lock:
            if key in self._bundles:
                return self._bundles[key]
        cfg = self.config
        aug = cfg.augmentation if not row.star else type(cfg.augmentation)(enabled=False)
        ids = self.dataset.modality_ids(row.pretrain)
        bundle, log = pretrain(self.dataset, ids, cfg.encoder_specs, cfg.contrastive, aug, cfg.pretrain_optimizer,
                               seed, samples=pretraining_pool(self.dataset))
        with self._lock:
            self._bundles[key] = bundle
            if log:
                self.pretrain_metrics[key] = {"losses": [r["mean_loss"] for r in log], "final": log[-1]["metrics"]}
        return bundle

    def run_cell(self, row: GridRow, column, seed) -> EvalReport:
        if not cell_legal(row, column):
            raise ConfigError(f"cell ({row.label}, {column_label(column)}) is not part of the grid: "
                              "finetune modalities must all be pre-trained")
        key = self.cell_key(row, column, seed)
        report = self._cached(key)
        if report is not None:
            return report
        checkpoint = None if row.pretrain is None else self.bundle(row, seed)
        fp = {"pretrain_modalities": None if row.pretrain is None else list(row.pretrain), "star": row.star,
              "config": self.config.fingerprint()}
        _, report = finetune(self.dataset, list(column), self.config.finetune_optimizer, seed,
                             checkpoint=checkpoint, encoder_specs=self.config.encoder_specs,
                             finetune_backbone=self.config.finetune_backbone, fingerprint=fp)
        self._store(key, report)
        if self.progress is not None:
            self.progress(row, column, seed, report)
        return report

    def _run_group(self, row, seed):
        out = []
        for col in self.config.grid.columns:
            if cell_legal(row, col):
                out.append(CellResult(row, tuple(col), seed, self.run_cell(row, col, seed)))
        # release the encoders once every cell of the row is done
        with self._lock:
            self._bundles.pop((row.pretrain, row.star, seed), None)
        return out

    def run(self) -> GridResults:
        grid = self.config.grid
        groups = [(row, seed) for row in grid.rows for seed in grid.seeds]
        if self.threads > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(lambda g: self._run_group(*g), groups))
        else:
            parts = [self._run_group(*g) for g in groups]
        cells = [c for part in parts for c in part]
        return GridResults(grid.rows, grid.columns, grid.seeds, cells, self.config.fingerprint())


def run_grid(config: ExperimentConfig, dataset=None, cache_dir=None, threads=None, progress=None) -> GridResults:
    return GridRunner(config, dataset, cache_dir, threads, progress).run()
