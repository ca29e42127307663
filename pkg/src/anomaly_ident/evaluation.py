"""Benchmark protocol: repeated stratified splits, per-method training, metrics, reports."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import crf, hmm, lstm
from .episode import ANOMALY_CLASSES, AnomalyClass, Episode
from .features import FeaturizerStats, fit_stats
from .pipeline import ReplayDetector, run_episode
from .simulator import derive_seed

log = logging.getLogger(__name__)

METHODS = ("hmm", "crf-lbfgs", "crf-arow", "lstm")
CLASS_COLUMNS = ("Safe", "Location", "Disappearance", "Unbalance")
N_CLASSES = len(AnomalyClass)


# --- splitting -----------------------------------------------------------------


def _quotas(sizes: Sequence[int], fraction: float) -> list[int]:
    """Per-class train counts summing to round(total * fraction) (largest remainder)."""
    total = sum(sizes)
    target = math.floor(total * fraction + 0.5)
    raw = [n * fraction for n in sizes]
    quota = [math.floor(r) for r in raw]
    order = sorted(range(len(sizes)), key=lambda k: (-(raw[k] - quota[k]), k))
    for k in order[: target - sum(quota)]:
        quota[k] += 1
    # keep both partitions non-empty for every class that can be split
    for k, n in enumerate(sizes):
        if n >= 2:
            quota[k] = min(max(quota[k], 1), n - 1)
        else:
            quota[k] = n
    return quota


def split(dataset: Sequence[Episode], train_fraction: float = 0.8, seed: int = 0) -> tuple[list[Episode], list[Episode]]:
    """Seeded split stratified by case label; both parts keep dataset order."""
    if not dataset:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    classes = [c for c in AnomalyClass if any(ep.case_label == c for ep in dataset)]
    members = [[i for i, ep in enumerate(dataset) if ep.case_label == c] for c in classes]
    for c, idx in zip(classes, members):
        if len(idx) < 2:
            log.warning("class %s has %d episode(s); placing it in the training set", c.name, len(idx))
    quotas = _quotas([len(m) for m in members], train_fraction)
    train_idx = set()
    for idx, q in zip(members, quotas):
        perm = rng.permutation(len(idx))
        train_idx.update(idx[j] for j in perm[:q])
    train = [ep for i, ep in enumerate(dataset) if i in train_idx]
    test = [ep for i, ep in enumerate(dataset) if i not in train_idx]
    return train, test


# --- metrics -------------------------------------------------------------------


def confusion_counts(gold: Sequence[int], pred: Sequence[int], n: int = N_CLASSES) -> np.ndarray:
    m = np.zeros((n, n), dtype=np.int64)
    np.add.at(m, (np.asarray(gold, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return m


def prf_from_confusion(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall and F; each is 0 when its denominator is 0."""
    tp = np.diag(m).astype(float)
    pred_count = m.sum(axis=0).astype(float)
    gold_count = m.sum(axis=1).astype(float)
    p = np.divide(tp, pred_count, out=np.zeros_like(tp), where=pred_count > 0)
    r = np.divide(tp, gold_count, out=np.zeros_like(tp), where=gold_count > 0)
    s = p + r
    f = np.divide(2 * p * r, s, out=np.zeros_like(tp), where=s > 0)
    return p, r, f


def row_normalize(m: np.ndarray) -> np.ndarray:
    rows = m.sum(axis=1, keepdims=True).astype(float)
    return np.divide(m, rows, out=np.zeros(m.shape), where=rows > 0)


def case_confusion(results: Sequence[tuple[AnomalyClass, AnomalyClass]]) -> np.ndarray:
    """(3, 4) counts: rows LOC, DIS, UNB gold; columns LOC, DIS, UNB, then SAFE spill."""
    m = np.zeros((len(ANOMALY_CLASSES), len(ANOMALY_CLASSES) + 1), dtype=np.int64)
    for gold, pred in results:
        if gold == AnomalyClass.SAFE:
            raise ValueError("case confusion covers anomalous episodes only")
        col = len(ANOMALY_CLASSES) if pred == AnomalyClass.SAFE else int(pred) - 1
        m[int(gold) - 1, col] += 1
    return m


@dataclass
class RunScores:
    """Per-run scores derived from a state confusion matrix."""

    precision: list
    recall: list
    f_score: list
    overall: dict  # precision/recall/f_score -> {"macro", "anomaly_macro", "micro"}

    @classmethod
    def from_confusion(cls, m: np.ndarray) -> "RunScores":
        p, r, f = prf_from_confusion(m)
        micro = float(np.trace(m) / m.sum()) if m.sum() else 0.0
        overall = {}
        for name, v in (("precision", p), ("recall", r), ("f_score", f)):
            overall[name] = {"macro": float(v.mean()), "anomaly_macro": float(v[1:].mean()), "micro": micro}
        return cls(p.tolist(), r.tolist(), f.tolist(), overall)


# --- benchmark -----------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkConfig:
    methods: tuple = METHODS
    runs: int = 10
    train_fraction: float = 0.8
    master_seed: int = 0
    hmm_smoothing: float = 1.0
    lbfgs: crf.LbfgsConfig = field(default_factory=crf.LbfgsConfig)
    arow: crf.ArowConfig = field(default_factory=crf.ArowConfig)
    lstm: lstm.LstmConfig = field(default_factory=lstm.LstmConfig)
    workers: int = 1

    def validate(self) -> None:
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {METHODS}")
        if self.runs < 1:
            raise ValueError("runs must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        del d["workers"]  # does not affect results
        return d


def run_seed(master_seed: int, run: int) -> int:
    return derive_seed(master_seed, run)


def train_method(method: str, train: Sequence[Episode], stats: FeaturizerStats, config: BenchmarkConfig, seed: int):
    """Returns (labeler, training info dict)."""
    if method == "hmm":
        return hmm.fit_supervised(train, stats, config.hmm_smoothing), {}
    if method == "crf-lbfgs":
        model = crf.train_lbfgs(train, stats, config.lbfgs)
        return model, {k: model.info[k] for k in ("iterations", "converged", "line_search_failed")}
    if method == "crf-arow":
        arow_cfg = crf.ArowConfig(config.arow.r, config.arow.epochs, derive_seed(seed, 2))
        return crf.train_arow(train, stats, arow_cfg), {}
    if method == "lstm":
        cfg = lstm.LstmConfig(**{**asdict(config.lstm), "init_seed": derive_seed(seed, 3)})
        params, curve = lstm.train(train, stats, cfg)
        return lstm.LstmLabeler(params, stats), {"curve": [asdict(p) for p in curve]}
    raise ValueError(f"unknown method {method!r}")


@dataclass
class MethodRun:
    method: str
    run: int
    state_counts: Optional[np.ndarray] = None  # (4, 4) gold x predicted
    cases: list = field(default_factory=list)  # (episode id, gold, predicted, per-step labels)
    info: dict = field(default_factory=dict)
    error: Optional[str] = None


def evaluate_labeler(labeler, test: Sequence[Episode]) -> tuple[np.ndarray, list]:
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    cases = []
    for ep in test:
        result = run_episode(labeler, ReplayDetector(), ep)
        gold = [int(y) for y in ep.labels[: len(result.labels)]]
        counts += confusion_counts(gold, [int(y) for y in result.labels])
        cases.append((ep.id, ep.case_label, result.final, result.labels))
    return counts, cases


def _one_run(args) -> list[MethodRun]:
    dataset, config, run = args
    seed = run_seed(config.master_seed, run)
    train, test = split(dataset, config.train_fraction, seed)
    stats = fit_stats(train)
    out = []
    for method in config.methods:
        try:
            labeler, info = train_method(method, train, stats, config, seed)
            counts, cases = evaluate_labeler(labeler, test)
            out.append(MethodRun(method, run, counts, cases, info))
        except Exception as err:  # a failed run is flagged, not fatal
            log.warning("run %d method %s failed: %s", run, method, err)
            out.append(MethodRun(method, run, error=f"{type(err).__name__}: {err}"))
    return out


@dataclass
class MethodReport:
    method: str
    runs: list  # MethodRun, by run index

    @property
    def ok_runs(self) -> list:
        return [r for r in self.runs if r.error is None]

    @property
    def failed_runs(self) -> list:
        return [r for r in self.runs if r.error is not None]

    def scores(self) -> list:
        return [RunScores.from_confusion(r.state_counts) for r in self.ok_runs]

    def per_class(self, metric: str) -> tuple[np.ndarray, np.ndarray]:
        """Across-run mean and population std of a per-class metric (4 values each)."""
        vals = np.array([getattr(s, metric) for s in self.scores()], dtype=float).reshape(-1, N_CLASSES)
        if len(vals) == 0:
            return np.full(N_CLASSES, np.nan), np.full(N_CLASSES, np.nan)
        return vals.mean(axis=0), vals.std(axis=0)

    def overall(self, metric: str, kind: str = "macro") -> tuple[float, float]:
        vals = np.array([s.overall[metric][kind] for s in self.scores()], dtype=float)
        if len(vals) == 0:
            return math.nan, math.nan
        return float(vals.mean()), float(vals.std())

    def state_counts(self) -> np.ndarray:
        return sum((r.state_counts for r in self.ok_runs), np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def state_confusion(self) -> np.ndarray:
        return row_normalize(self.state_counts())

    def case_confusion(self) -> np.ndarray:
        return case_confusion([(g, p) for r in self.ok_runs for _, g, p, _ in r.cases if g != AnomalyClass.SAFE])

    def case_accuracy(self) -> dict:
        m = self.case_confusion()
        return {c: (float(m[k, k] / m[k].sum()) if m[k].sum() else math.nan) for k, c in enumerate(ANOMALY_CLASSES)}

    def curves(self) -> list:
        return [(r.run, r.info["curve"]) for r in self.ok_runs if "curve" in r.info]


@dataclass
class BenchmarkReport:
    config: BenchmarkConfig
    seeds: list
    methods: dict  # name -> MethodReport, in config order
    dataset_fingerprint: str = ""


def run_benchmark(dataset: Sequence[Episode], config: BenchmarkConfig = BenchmarkConfig(),
                  dataset_fingerprint: str = "") -> BenchmarkReport:
    config.validate()
    present = {ep.case_label for ep in dataset}
    missing = [c.name for c in ANOMALY_CLASSES if c not in present]
    if missing:
        raise ValueError(f"dataset lacks anomaly classes {missing}")
    jobs = [(list(dataset), config, run) for run in range(config.runs)]
    if config.workers > 1 and config.runs > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.runs)) as pool:
            per_run = list(pool.map(_one_run, jobs))
    else:
        per_run = [_one_run(job) for job in jobs]
    methods = {m: MethodReport(m, [next(r for r in runs if r.method == m) for runs in per_run]) for m in config.methods}
    seeds = [run_seed(config.master_seed, run) for run in range(config.runs)]
    return BenchmarkReport(config, seeds, methods, dataset_fingerprint)


# --- report files ----------------------------------------------------------------


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def _header(report: BenchmarkReport) -> list[str]:
    return [
        "# config: " + json.dumps(report.config.to_dict(), sort_keys=True),
        "# seeds: " + " ".join(str(s) for s in report.seeds),
        "# dataset: " + (report.dataset_fingerprint or "unknown"),
    ]


def _write(path: Path, lines: list[str]) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as err:
        raise OSError(f"cannot write report file {path}: {err}") from err


def metrics_table(mr: MethodReport) -> list[str]:
    """Rows of mean and std per metric; columns follow the four classes then the overall aggregates."""
    rows = ["metric,statistic," + ",".join(CLASS_COLUMNS) + ",Overall,Overall_anomaly,Overall_micro"]
    for metric in ("precision", "recall", "f_score"):
        mean, std = mr.per_class(metric)
        agg = [mr.overall(metric, k) for k in ("macro", "anomaly_macro", "micro")]
        rows.append(",".join([metric, "mean"] + [_fmt(v) for v in mean] + [_fmt(a[0]) for a in agg]))
        rows.append(",".join([metric, "std"] + [_fmt(v) for v in std] + [_fmt(a[1]) for a in agg]))
    return rows


def emit_report(report: BenchmarkReport, out_dir: str | os.PathLike) -> list[Path]:
    """Write metric tables, confusion matrices, LSTM curves and a summary; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"cannot create report directory {out}: {err}") from err
    head = _header(report)
    written = []
    summary = head + [f"runs: {report.config.runs}", f"methods: {', '.join(report.methods) or 'none'}"]
    for name, mr in report.methods.items():
        _write(out / f"metrics_{name}.csv", head + metrics_table(mr))
        counts = mr.state_counts()
        norm = row_normalize(counts)
        rows = ["gold\\predicted," + ",".join(CLASS_COLUMNS)]
        rows += [CLASS_COLUMNS[k] + "," + ",".join(_fmt(v) for v in norm[k]) for k in range(N_CLASSES)]
        _write(out / f"state_confusion_{name}.csv", head + rows)
        cm = mr.case_confusion()
        rows = ["gold\\predicted," + ",".join(c.name for c in ANOMALY_CLASSES) + ",SAFE_spill"]
        rows += [c.name + "," + ",".join(str(int(v)) for v in cm[k]) for k, c in enumerate(ANOMALY_CLASSES)]
        _write(out / f"case_confusion_{name}.csv", head + rows)
        written += [out / f"metrics_{name}.csv", out / f"state_confusion_{name}.csv", out / f"case_confusion_{name}.csv"]
        if mr.curves():
            rows = ["run,epoch,loss,f_score"]
            for run, curve in mr.curves():
                rows += [f"{run},{p['epoch']},{_fmt(p['loss'])},{_fmt(p['f_score'])}" for p in curve]
            _write(out / f"loss_curve_{name}.csv", head + rows)
            written.append(out / f"loss_curve_{name}.csv")

        f_mean, f_std = mr.overall("f_score")
        fa_mean, fa_std = mr.overall("f_score", "anomaly_macro")
        acc = mr.case_accuracy()
        summary += [
            "",
            f"[{name}]",
            f"successful runs: {len(mr.ok_runs)}/{len(mr.runs)}",
            f"overall F (4-class macro): {_fmt(f_mean)} +- {_fmt(f_std)}",
            f"overall F (anomaly macro): {_fmt(fa_mean)} +- {_fmt(fa_std)}",
            "case accuracy: " + " ".join(f"{c.name}={_fmt(acc[c])}" for c in ANOMALY_CLASSES),
            f"SAFE spill predictions: {int(mr.case_confusion()[:, -1].sum())}",
        ]
        for r in mr.failed_runs:
            summary.append(f"FAILED run {r.run}: {r.error}")
        for r in mr.ok_runs:
            if r.info.get("line_search_failed"):
                summary.append(f"WARNING run {r.run}: L-BFGS line search failed; best weights kept")
    _write(out / "summary.txt", summary)
    written.append(out / "summary.txt")
    return written
