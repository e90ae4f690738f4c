"""Top-K selection, RSF/RawF baselines, seed repetition and report export."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .classifiers import classify_forest, classify_knn, classify_logreg
from .data_io import DatasetTable, SplitSpec, column_subset
from .fm_module import FeatureMask
from .tensor_core import make_rng
from .trainer import Ablation, TrainConfig, train

CLASSIFIERS = ("rf", "knn", "lr")
REPORT_COLUMNS = ("dataset", "method", "classifier", "k", "seed", "accuracy")


@dataclass
class SelectionResult:
    method: str
    k: int
    selected: np.ndarray
    mask: FeatureMask | None = None

    def __post_init__(self):
        self.selected = np.asarray(self.selected, dtype=np.int64)
        if self.selected.shape != (self.k,) or np.unique(self.selected).size != self.k:
            raise ValueError(f"{self.method}: selection must hold {self.k} distinct indices")

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "k": self.k,
                           "selected": [int(i) for i in self.selected]})


@dataclass
class RunReport:
    dataset: str
    classifier: str
    method: str
    k: int
    seeds: list[int]
    per_seed_accuracy: list[float]
    mean: float = field(init=False)
    std: float = field(init=False)
    config_digest: str = ""

    def __post_init__(self):
        self.mean, self.std = aggregate(self.per_seed_accuracy)


def aggregate(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(np.mean(a)), float(np.std(a))


def config_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- selection ---------------------------------------------------------------

def select_top_k(mask: FeatureMask, k: int, method: str = "FM") -> SelectionResult:
    if not 1 <= k <= mask.dims:
        raise ValueError(f"k must lie in [1, {mask.dims}], got {k}")
    return SelectionResult(method, k, mask.ranking[:k].copy(), mask)


def baseline_random(d: int, k: int, rng: np.random.Generator) -> SelectionResult:
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    return SelectionResult("RSF", k, rng.choice(d, size=k, replace=False))


def baseline_raw(d: int) -> SelectionResult:
    return SelectionResult("RawF", d, np.arange(d))


def evaluate_selection(trainset: DatasetTable, testset: DatasetTable, sel: SelectionResult,
                       classifier: str, seed: int = 0) -> float:
    """Test accuracy of ``classifier`` trained on the selected (unweighted) columns."""
    if sel.k < 1:
        raise ValueError("empty selection")
    if classifier not in CLASSIFIERS:
        raise ValueError(f"unknown classifier {classifier!r}; choose from {CLASSIFIERS}")
    # canonical column order: the score depends on the index set only
    cols = np.sort(sel.selected)
    tr, te = column_subset(trainset, cols), column_subset(testset, cols)
    if classifier == "knn":
        return classify_knn(tr, te)
    if classifier == "lr":
        return classify_logreg(tr, te)
    return classify_forest(tr, te, rng=make_rng(seed))


# --- experiments -------------------------------------------------------------

def _seed_job(args):
    split, cfg, ks, classifiers, seed = args
    model = train(split.train, replace(cfg, seed=seed))
    return seed, _score_mask(split, model.final_mask, ks, classifiers, seed)


def _score_mask(split: SplitSpec, mask: FeatureMask, ks, classifiers, seed):
    """Accuracies for FM top-k, a fresh RSF draw per k, and RawF under one seed."""
    d = split.train.n_features
    rsf_rng = make_rng(seed)
    rsf = {k: baseline_random(d, k, rsf_rng) for k in ks}
    out = {}
    for clf in classifiers:
        for k in ks:
            out[("FM", clf, k)] = evaluate_selection(split.train, split.test, select_top_k(mask, k), clf, seed)
            out[("RSF", clf, k)] = evaluate_selection(split.train, split.test, rsf[k], clf, seed)
        out[("RawF", clf, d)] = evaluate_selection(split.train, split.test, baseline_raw(d), clf, seed)
    return out


def _collect(per_seed: dict, dataset: str, digest: str, seeds) -> list[RunReport]:
    keys = list(per_seed[seeds[0]])
    return [RunReport(dataset, clf, method, k, list(seeds),
                      [per_seed[s][(method, clf, k)] for s in seeds], digest)
            for method, clf, k in keys]


def run_experiment(split: SplitSpec, cfg: TrainConfig, ks, classifiers, seeds,
                   dataset: str | None = None, jobs: int = 1) -> list[RunReport]:
    """Train one FM model per seed and score FM, RSF and RawF for every (k, classifier)."""
    if not ks or not classifiers or not seeds:
        raise ValueError("ks, classifiers and seeds must be non-empty")
    d = split.train.n_features
    for k in ks:
        if not 1 <= k <= d:
            raise ValueError(f"k={k} outside [1, {d}]")
    dataset = dataset or split.train.name
    digest = config_digest({"config": cfg.to_dict(), "ks": list(ks),
                            "classifiers": list(classifiers), "seeds": list(seeds),
                            "protocol": split.protocol})
    jobs_args = [(split, cfg, list(ks), list(classifiers), s) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = dict(ex.map(_seed_job, jobs_args))
    else:
        results = dict(map(_seed_job, jobs_args))
    return _collect(results, dataset, digest, list(seeds))


def evaluate_mask(split: SplitSpec, mask: FeatureMask, ks, classifiers, seeds,
                  dataset: str, digest: str = "") -> list[RunReport]:
    """Score an already trained mask; seeds drive RSF draws and forest randomness."""
    per_seed = {s: _score_mask(split, mask, ks, classifiers, s) for s in seeds}
    return _collect(per_seed, dataset, digest, list(seeds))


ABLATION_CELLS = [
    ("w/o BA", "w/o FMN", Ablation(False, False)),
    ("w/o BA", "w/ FMN", Ablation(False, True)),
    ("w/ BA", "w/o FMN", Ablation(True, False)),
    ("w/ BA", "w/ FMN", Ablation(True, True)),
]


def run_ablation(split: SplitSpec, cfg: TrainConfig, k: int, classifier: str, seeds,
                 dataset: str | None = None) -> list[RunReport]:
    """The 2x2 grid over batch-wise attenuation and mask normalization."""
    dataset = dataset or split.train.name
    reports = []
    for ba, fmn, ab in ABLATION_CELLS:
        acc = []
        for s in seeds:
            model = train(split.train, replace(cfg, seed=s, ablation=ab))
            acc.append(evaluate_selection(split.train, split.test,
                                          select_top_k(model.final_mask, k), classifier, s))
        digest = config_digest({"config": replace(cfg, ablation=ab).to_dict(), "k": k,
                                "classifier": classifier, "seeds": list(seeds)})
        reports.append(RunReport(dataset, classifier, f"FM[{ba}, {fmn}]", k, list(seeds), acc, digest))
    return reports


# --- export ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def reports_to_csv(reports: list[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        for s, acc in zip(r.seeds, r.per_seed_accuracy):
            w.writerow([r.dataset, r.method, r.classifier, r.k, s, _fmt(acc)])
    return buf.getvalue()


def reports_to_json(reports: list[RunReport], extra: dict | None = None) -> str:
    cells = [{"dataset": r.dataset, "method": r.method, "classifier": r.classifier, "k": r.k,
              "seeds": r.seeds, "per_seed_accuracy": r.per_seed_accuracy,
              "mean": r.mean, "std": r.std, "config_digest": r.config_digest}
             for r in reports]
    return json.dumps({"cells": cells, **(extra or {})}, indent=2) + "\n"


def ablation_table(reports: list[RunReport]) -> str:
    """Plain-text 2x2 table (rows: BA, columns: FMN) of mean (+- std)."""
    by = {}
    for r in reports:
        ba, fmn = r.method[3:-1].split(", ")
        by[(ba, fmn)] = f"{r.mean:.3f} (+- {r.std:.3f})"
    lines = [f"{'':8}{'w/o FMN':>20}{'w/ FMN':>20}"]
    for ba in ("w/o BA", "w/ BA"):
        lines.append(f"{ba:8}{by[(ba, 'w/o FMN')]:>20}{by[(ba, 'w/ FMN')]:>20}")
    return "\n".join(lines) + "\n"
