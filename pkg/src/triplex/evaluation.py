"""Per-slide metrics, cross-fold gene ranking and patient-grouped fold construction."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

TOP_GENES = 50


def mean_defined(values: np.ndarray) -> float:
    """Mean over finite entries; NaN when there are none."""
    values = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(values)
    return float(values[ok].mean()) if ok.any() else math.nan


def pcc_per_gene(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Pearson correlation of each gene column; NaN where either column is constant."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"pcc_per_gene: shapes {pred.shape} and {truth.shape} must match and be (n, m)")
    if pred.shape[0] < 2:
        raise ValueError("pcc_per_gene needs at least two spots")
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    st = np.sqrt((tc * tc).sum(axis=0))
    num = (pc * tc).sum(axis=0)
    out = np.full(pred.shape[1], np.nan)
    # relative threshold: a column is constant if its spread is at rounding level
    scale_p = np.abs(pred).max(axis=0) * np.sqrt(pred.shape[0]) + 1e-300
    scale_t = np.abs(truth).max(axis=0) * np.sqrt(truth.shape[0]) + 1e-300
    ok = (sp > 1e-12 * scale_p) & (st > 1e-12 * scale_t)
    out[ok] = np.clip(num[ok] / (sp[ok] * st[ok]), -1.0, 1.0)
    return out


@dataclass
class SlideMetrics:
    slide_id: str
    mse: float
    mae: float
    pcc: np.ndarray

    @property
    def pcc_mean(self) -> float:
        return mean_defined(self.pcc)


def slide_metrics(pred: np.ndarray, truth: np.ndarray, slide_id: str = "") -> SlideMetrics:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"slide_metrics: prediction shape {pred.shape} != truth shape {truth.shape}")
    err = pred - truth
    return SlideMetrics(slide_id, float((err * err).mean()), float(np.abs(err).mean()), pcc_per_gene(pred, truth))


@dataclass
class GeneRanking:
    gene_names: list[str]
    fold_ranks: list[np.ndarray]
    average_rank: np.ndarray
    top_genes: list[str]

    def top_indices(self) -> list[int]:
        pos = {g: i for i, g in enumerate(self.gene_names)}
        return [pos[g] for g in self.top_genes]


@dataclass
class MetricsReport:
    slides: list[SlideMetrics]
    gene_names: list[str]
    pcc_m: float
    pcc_h: float
    mse: float
    mae: float
    gene_pcc: np.ndarray
    top_genes: list[str] = field(default_factory=list)
    ranking: GeneRanking | None = None


def aggregate_metrics(
    reports: Sequence[SlideMetrics],
    gene_names: Sequence[str] | None = None,
    top_genes: Iterable[str] | None = None,
    ranking: GeneRanking | None = None,
) -> MetricsReport:
    """Unweighted means over slides.

    PCC(M) averages, over genes defined on at least one slide, each gene's mean
    PCC across slides; PCC(H) does the same restricted to ``top_genes``.
    """
    if not reports:
        raise ValueError("aggregate_metrics needs at least one slide report")
    m = len(reports[0].pcc)
    gene_names = list(gene_names) if gene_names is not None else [f"gene_{j}" for j in range(m)]
    if len(gene_names) != m or any(len(r.pcc) != m for r in reports):
        raise ValueError("slide reports disagree on gene count")
    table = np.stack([r.pcc for r in reports])
    defined = np.isfinite(table)
    counts = defined.sum(axis=0)
    gene_pcc = np.full(m, np.nan)
    has = counts > 0
    gene_pcc[has] = np.where(defined, table, 0.0).sum(axis=0)[has] / counts[has]
    top = list(top_genes) if top_genes is not None else []
    pos = {g: j for j, g in enumerate(gene_names)}
    missing = [g for g in top if g not in pos]
    if missing:
        raise KeyError(f"top genes not in gene list: {missing}")
    pcc_h = mean_defined(gene_pcc[[pos[g] for g in top]]) if top else math.nan
    return MetricsReport(
        slides=list(reports),
        gene_names=gene_names,
        pcc_m=mean_defined(gene_pcc),
        pcc_h=pcc_h,
        mse=float(np.mean([r.mse for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        gene_pcc=gene_pcc,
        top_genes=top,
        ranking=ranking,
    )


def rank_genes(fold_pccs: Sequence[np.ndarray], gene_names: Sequence[str], top: int = TOP_GENES) -> GeneRanking:
    """Rank genes per fold by descending PCC, average ranks across folds.

    Undefined PCCs rank last; ties go to the lexically smaller gene name.
    """
    gene_names = list(gene_names)
    m = len(gene_names)
    if not fold_pccs:
        raise ValueError("rank_genes needs at least one fold")
    fold_ranks = []
    for f, pcc in enumerate(fold_pccs):
        pcc = np.asarray(pcc, dtype=np.float64)
        if pcc.shape != (m,):
            raise ValueError(f"fold {f} supplies {pcc.shape} PCC values for {m} genes")
        order = sorted(range(m), key=lambda j: (not np.isfinite(pcc[j]), -pcc[j] if np.isfinite(pcc[j]) else 0.0, gene_names[j]))
        ranks = np.empty(m)
        ranks[order] = np.arange(1, m + 1)
        fold_ranks.append(ranks)
    avg = np.mean(fold_ranks, axis=0)
    best = sorted(range(m), key=lambda j: (avg[j], gene_names[j]))[: min(top, m)]
    return GeneRanking(gene_names, fold_ranks, avg, [gene_names[j] for j in best])


# ----------------------------------------------------------------------
# folds


@dataclass
class FoldSpec:
    fold_id: int
    train: list[str]
    test: list[str]
    patients: dict[str, str]

    @property
    def test_patients(self) -> set[str]:
        return {self.patients[s] for s in self.test}

    @property
    def train_patients(self) -> set[str]:
        return {self.patients[s] for s in self.train}


def _patient_map(datasets) -> dict[str, str]:
    """slide_id -> patient_id from SlideDatasets, (slide, patient) pairs or a mapping."""
    if isinstance(datasets, dict):
        return dict(datasets)
    out: dict[str, str] = {}
    for item in datasets:
        slide, patient = (item.slide_id, item.patient_id) if hasattr(item, "slide_id") else item
        if slide in out:
            raise ValueError(f"duplicate slide id {slide!r}")
        out[slide] = patient
    return out


def _slides_by_patient(patients: dict[str, str]) -> dict[str, list[str]]:
    by: dict[str, list[str]] = {}
    for slide, patient in patients.items():
        by.setdefault(patient, []).append(slide)
    return {p: sorted(s) for p, s in sorted(by.items())}


def _folds_from_groups(groups: list[list[str]], patients: dict[str, str], by: dict[str, list[str]]) -> list[FoldSpec]:
    # canonical order: by smallest patient id in the group
    groups = sorted((sorted(g) for g in groups if g), key=lambda g: g[0])
    folds = []
    all_slides = sorted(patients)
    for i, group in enumerate(groups):
        test = sorted(s for p in group for s in by[p])
        test_set = set(test)
        folds.append(FoldSpec(i, [s for s in all_slides if s not in test_set], test, dict(patients)))
    return folds


def make_lopcv_folds(datasets) -> list[FoldSpec]:
    """One fold per patient; that patient's slides form the test set."""
    patients = _patient_map(datasets)
    by = _slides_by_patient(patients)
    if len(by) < 2:
        raise ValueError("leave-one-patient-out needs at least two patients")
    return _folds_from_groups([[p] for p in by], patients, by)


def make_grouped_kfold(datasets, k: int, seed: int = 0) -> list[FoldSpec]:
    """k folds keeping each patient's slides together.

    Patients are placed largest-first (by slide count; equal sizes in seeded
    random order) into the fold with the fewest slides so far, lowest index
    winning ties.
    """
    patients = _patient_map(datasets)
    by = _slides_by_patient(patients)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(by):
        raise ValueError(f"k={k} exceeds the number of patients ({len(by)})")
    names = list(by)
    shuffle = np.random.default_rng(seed).permutation(len(names))
    tiebreak = {names[i]: r for r, i in enumerate(shuffle)}
    order = sorted(names, key=lambda p: (-len(by[p]), tiebreak[p]))
    loads = [0] * k
    groups: list[list[str]] = [[] for _ in range(k)]
    for p in order:
        target = min(range(k), key=lambda i: (loads[i], i))
        groups[target].append(p)
        loads[target] += len(by[p])
    return _folds_from_groups(groups, patients, by)


def holdout_patients(slides, fraction: float = 0.1, seed: int = 0) -> tuple[list[str], list[str]]:
    """Split slide ids into (train, validation) with whole patients held out.

    Patients are drawn in seeded order until at least ``fraction`` of the slides
    are held out; returns an empty validation set with fewer than two patients.
    """
    patients = _patient_map(slides)
    by = _slides_by_patient(patients)
    if len(by) < 2:
        return sorted(patients), []
    names = list(by)
    order = [names[i] for i in np.random.default_rng(seed).permutation(len(names))]
    need = max(1, math.ceil(fraction * len(patients)))
    held: list[str] = []
    for p in order[:-1]:
        if len(held) >= need:
            break
        held.extend(by[p])
    held_set = set(held)
    return sorted(s for s in patients if s not in held_set), sorted(held)


# ----------------------------------------------------------------------
# report files


def write_metrics_report(path, report: MetricsReport) -> None:
    """Per-slide rows (mse, mae, pcc_m) followed by an aggregate row."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "mse", "mae", "pcc_m", "pcc_h"])
        top_idx = [report.gene_names.index(g) for g in report.top_genes]
        for s in report.slides:
            pcc_h = mean_defined(s.pcc[top_idx]) if top_idx else math.nan
            w.writerow([s.slide_id, f"{s.mse:.9g}", f"{s.mae:.9g}", f"{s.pcc_mean:.9g}", f"{pcc_h:.9g}"])
        w.writerow(["aggregate", f"{report.mse:.9g}", f"{report.mae:.9g}", f"{report.pcc_m:.9g}", f"{report.pcc_h:.9g}"])


def write_summary(path, report: MetricsReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in ("pcc_m", "pcc_h", "mse", "mae"):
            fh.write(f"{key}={getattr(report, key):.9g}\n")
        fh.write(f"slides={len(report.slides)}\n")


def read_summary(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                key, value = line.split("=", 1)
                out[key.strip()] = float(value)
    return out


def write_gene_table(path, gene_names: Sequence[str], gene_pcc: np.ndarray, ranking: GeneRanking | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene", "pcc", "average_rank", "top"])
        top = set(ranking.top_genes) if ranking else set()
        for j, g in enumerate(gene_names):
            rank = f"{ranking.average_rank[j]:.6g}" if ranking else ""
            w.writerow([g, f"{gene_pcc[j]:.9g}", rank, int(g in top)])
