"""File-level pipeline steps behind the command line: prepare, train, cv,
predict, eval and heatmap export.

Every step writes into a staging directory and moves finished files into
place only once the step succeeds, so a failed run leaves no partial output.
"""
from __future__ import annotations

import csv
import difflib
import logging
import os
import shutil
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, dump_config
from .data import (
    DataFormatError,
    FeatureSet,
    SlideDataset,
    ToyExtractor,
    apply_gene_selection,
    extract_features,
    extract_target_images,
    load_dataset,
    load_features,
    normalize_expression,
    read_feature_file,
    read_matrix_csv,
    read_ppm,
    save_features,
    select_genes,
    smooth_expression,
    write_feature_file,
    write_matrix_csv,
    write_spots_csv,
)
from .evaluation import (
    FoldSpec,
    MetricsReport,
    aggregate_metrics,
    holdout_patients,
    make_grouped_kfold,
    make_lopcv_folds,
    rank_genes,
    slide_metrics,
    write_gene_table,
    write_metrics_report,
    write_summary,
)
from .model import TriplexModel, load_checkpoint, save_checkpoint
from .training import FitResult, fit

log = logging.getLogger(__name__)

LABELS = "labels.csv"
SMOOTHED_LABELS = "labels_smoothed.csv"
VOID = "NA"


class GeneMismatchError(ValueError):
    pass


class UnknownGeneError(KeyError):
    def __init__(self, gene: str, candidates: Sequence[str]):
        self.gene = gene
        self.nearest = difflib.get_close_matches(gene, list(candidates), n=5, cutoff=0.0)
        super().__init__(f"unknown gene {gene!r}; nearest names: {', '.join(self.nearest)}")

    def __str__(self) -> str:
        return self.args[0]


class Staging:
    """Collect output files in a temporary directory, publish them on success."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.root = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))
        self.files: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(Path(rel))
        return p

    def __enter__(self) -> "Staging":
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for rel in self.files:
                    dest = self.out / rel
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    os.replace(self.root / rel, dest)
        finally:
            shutil.rmtree(self.root, ignore_errors=True)
        return False


def _require(path, what: str, is_dir: bool = False) -> Path:
    if not path:
        raise FileNotFoundError(f"no {what} given")
    p = Path(path)
    if not (p.is_dir() if is_dir else p.is_file()):
        raise FileNotFoundError(f"no such {'directory' if is_dir else 'file'}: {p}")
    return p


# ----------------------------------------------------------------------
# prepare


def prepare(cfg: RunConfig, out_dir) -> dict[str, int]:
    """Load raw tables, attach features, select genes, normalise and optionally smooth.

    Writes ``spots.csv``, ``labels.csv`` (normalised), ``labels_smoothed.csv``
    when smoothing is on, ``genes.txt`` and ``features/``.
    """
    paths = cfg.paths
    spots = _require(paths.spots, "spots table")
    counts = _require(paths.counts, "counts table")
    if not paths.features and not paths.images:
        raise FileNotFoundError("need either a features directory or an images directory")
    datasets = load_dataset(spots, counts)
    with_images = cfg.encoder.target_mode == "image"
    if paths.features:
        fdir = _require(paths.features, "features directory", is_dir=True)
        datasets = [replace(ds, features=_aligned_features(fdir, ds)) for ds in datasets]
    if paths.images:
        idir = _require(paths.images, "images directory", is_dir=True)
        extractor = ToyExtractor(np.random.default_rng(cfg.seed))
        loaded = []
        for ds in datasets:
            image = read_ppm(_require(idir / f"{ds.slide_id}.ppm", "slide image"))
            feats = ds.features if ds.features is not None else extract_features(extractor, image, ds)
            loaded.append(replace(ds, features=feats, target_images=extract_target_images(image, ds) if with_images else None))
        datasets = loaded

    keep = select_genes(datasets, min(cfg.preprocess.m_keep, datasets[0].m))
    normalized = [normalize_expression(apply_gene_selection(ds, keep)) for ds in datasets]
    with Staging(out_dir) as st:
        write_spots_csv(st.path("spots.csv"), normalized)
        _write_labels(st.path(LABELS), normalized)
        if cfg.preprocess.smoothing:
            _write_labels(st.path(SMOOTHED_LABELS), [smooth_expression(ds, cfg.preprocess.neighborhood) for ds in normalized])
        st.path("genes.txt").write_text("".join(g + "\n" for g in normalized[0].gene_names), encoding="utf-8")
        for ds in normalized:
            names = (f"{ds.slide_id}.{kind}.feat" for kind in ("target", "neighbor", "global"))
            for rel in names:
                st.path(f"features/{rel}")
            save_features(st.root / "features", ds.slide_id, ds.features)
            if ds.target_images is not None:
                write_feature_file(st.path(f"features/{ds.slide_id}.image.feat"), ds.target_images.reshape(ds.n, -1, 3))
        st.path("config.ini").write_text(dump_config(cfg), encoding="utf-8")
    return {"slides": len(normalized), "spots": sum(ds.n for ds in normalized), "genes": len(keep)}


def _aligned_features(fdir: Path, ds: SlideDataset) -> FeatureSet:
    fs = load_features(fdir, ds.slide_id)
    if fs.n != ds.n:
        raise DataFormatError(f"feature files for slide {ds.slide_id!r} hold {fs.n} spots, spots table has {ds.n}", fdir)
    return fs


def _write_labels(path: Path, datasets: Sequence[SlideDataset]) -> None:
    ids = [s for ds in datasets for s in ds.spot_ids]
    write_matrix_csv(path, ids, datasets[0].gene_names, np.concatenate([ds.expression for ds in datasets]))


def load_prepared(prepared, smoothed: bool = False) -> list[SlideDataset]:
    """Slides of a prepared directory with features attached.

    ``smoothed`` selects the smoothed training labels when they were written.
    """
    root = _require(prepared, "prepared directory", is_dir=True)
    labels = root / SMOOTHED_LABELS if smoothed and (root / SMOOTHED_LABELS).is_file() else root / LABELS
    stage = "smoothed" if labels.name == SMOOTHED_LABELS else "normalized"
    datasets = load_dataset(_require(root / "spots.csv", "spots table"), _require(labels, "labels table"))
    out = []
    for ds in datasets:
        images = None
        image_file = root / "features" / f"{ds.slide_id}.image.feat"
        if image_file.is_file():
            images = read_feature_file(image_file).reshape(ds.n, 224, 224, 3)
        out.append(replace(ds, stage=stage, features=_aligned_features(root / "features", ds), target_images=images))
    return out


# ----------------------------------------------------------------------
# training and cross-validation


def split_validation(cfg: RunConfig, slides: list[SlideDataset]) -> tuple[list[SlideDataset], list[SlideDataset]]:
    """(train, validation) slides; whole patients are held out for early stopping."""
    if cfg.cv.val_fraction <= 0:
        return slides, []
    by = {ds.slide_id: ds for ds in slides}
    train_ids, val_ids = holdout_patients(slides, cfg.cv.val_fraction, cfg.seed)
    return [by[s] for s in train_ids], [by[s] for s in val_ids]


def train_model(cfg: RunConfig, train_slides: list[SlideDataset], log_path=None) -> tuple[TriplexModel, FitResult]:
    """Fit a fresh model; whole patients are held out for early stopping."""
    if not train_slides:
        raise ValueError("no training slides")
    train, val = split_validation(cfg, train_slides)
    model = TriplexModel(cfg.encoder, train_slides[0].m, seed=cfg.seed)
    result = fit(model, train, val, cfg.train, log_path)
    return model, result


def train(cfg: RunConfig, out_dir) -> FitResult:
    slides = load_prepared(cfg.paths.prepared, smoothed=cfg.preprocess.smoothing)
    with Staging(out_dir) as st:
        model, result = train_model(cfg, slides, st.path("train_log.csv"))
        save_checkpoint(st.path("model.ckpt"), model)
        st.path("config.ini").write_text(dump_config(cfg), encoding="utf-8")
    return result


def make_folds(cfg: RunConfig, slides: Sequence[SlideDataset]) -> list[FoldSpec]:
    k = cfg.cv.folds_k()
    return make_lopcv_folds(slides) if k is None else make_grouped_kfold(slides, k, cfg.seed)


def cross_validate(cfg: RunConfig, out_dir) -> MetricsReport:
    """Train and test every fold, then rank genes across folds and aggregate.

    Training uses the (optionally smoothed) training labels; test slides are
    always scored against the unsmoothed normalised labels.
    """
    train_slides = {ds.slide_id: ds for ds in load_prepared(cfg.paths.prepared, smoothed=cfg.preprocess.smoothing)}
    truth = {ds.slide_id: ds for ds in load_prepared(cfg.paths.prepared)}
    folds = make_folds(cfg, list(truth.values()))
    genes = next(iter(truth.values())).gene_names
    all_reports, fold_pccs = [], []
    with Staging(out_dir) as st:
        with open(st.path("folds.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "slide_id", "patient_id", "role"])
            for f in folds:
                for s in f.test:
                    w.writerow([f.fold_id, s, f.patients[s], "test"])
        for f in folds:
            name = f"fold_{f.fold_id:02d}"
            log.info("%s: %d train slides, test %s", name, len(f.train), ",".join(f.test))
            model, _ = train_model(cfg, [train_slides[s] for s in f.train], st.path(f"{name}/train_log.csv"))
            save_checkpoint(st.path(f"{name}/model.ckpt"), model)
            reports = []
            for s in f.test:
                ds = truth[s]
                pred = model.predict_slide(ds)
                write_matrix_csv(st.path(f"{name}/predictions/{s}.csv"), ds.spot_ids, genes, pred)
                reports.append(slide_metrics(pred, ds.expression, s))
            fold_report = aggregate_metrics(reports, genes)
            fold_pccs.append(fold_report.gene_pcc)
            write_metrics_report(st.path(f"{name}/metrics.csv"), fold_report)
            write_summary(st.path(f"{name}/summary.txt"), fold_report)
            all_reports.extend(reports)
        ranking = rank_genes(fold_pccs, genes)
        report = aggregate_metrics(all_reports, genes, ranking.top_genes, ranking)
        write_metrics_report(st.path("metrics.csv"), report)
        write_summary(st.path("summary.txt"), report)
        write_gene_table(st.path("genes.csv"), genes, report.gene_pcc, ranking)
        st.path("config.ini").write_text(dump_config(cfg), encoding="utf-8")
    return report


# ----------------------------------------------------------------------
# predict / eval


def _select_slides(slides: list[SlideDataset], wanted: Sequence[str] | None) -> list[SlideDataset]:
    if not wanted:
        return slides
    by = {ds.slide_id: ds for ds in slides}
    missing = [s for s in wanted if s not in by]
    if missing:
        raise KeyError(f"unknown slide(s) {missing}; available: {sorted(by)}")
    return [by[s] for s in wanted]


def predict(cfg: RunConfig, checkpoint, out_dir, slides: Sequence[str] | None = None) -> list[Path]:
    """Write ``<slide>.csv`` prediction tables for the chosen (default: all) slides."""
    model = load_checkpoint(_require(checkpoint, "checkpoint"))
    data = _select_slides(load_prepared(cfg.paths.prepared), slides)
    if model.m != data[0].m:
        raise GeneMismatchError(f"checkpoint predicts {model.m} genes but the prepared data has {data[0].m}")
    written = []
    with Staging(out_dir) as st:
        for ds in data:
            write_matrix_csv(st.path(f"{ds.slide_id}.csv"), ds.spot_ids, ds.gene_names, model.predict_slide(ds))
            written.append(Path(out_dir) / f"{ds.slide_id}.csv")
    return written


def read_predictions(paths: Sequence, truth: Sequence[SlideDataset]) -> dict[str, np.ndarray]:
    """Gather prediction rows by slide, aligned to the truth's spot order."""
    rows: dict[str, np.ndarray] = {}
    genes = truth[0].gene_names
    for p in paths:
        ids, names, values = read_matrix_csv(p)
        if names != genes:
            raise GeneMismatchError(f"{p}: gene columns differ from the prepared gene list")
        for sid, row in zip(ids, values):
            if sid in rows:
                raise DataFormatError(f"duplicate prediction for spot {sid!r}", p)
            rows[sid] = row
    out = {}
    for ds in truth:
        have = [s in rows for s in ds.spot_ids]
        if all(have):
            out[ds.slide_id] = np.stack([rows[s] for s in ds.spot_ids])
        elif any(have):
            missing = [s for s, h in zip(ds.spot_ids, have) if not h]
            raise DataFormatError(f"slide {ds.slide_id!r}: no prediction for {len(missing)} spot(s), e.g. {missing[0]!r}")
    known = {s for ds in truth for s in ds.spot_ids}
    stray = sorted(set(rows) - known)
    if stray:
        raise DataFormatError(f"predictions for unknown spots, e.g. {stray[0]!r}")
    if not out:
        raise DataFormatError("no predicted slides match the prepared data")
    return out


def read_top_genes(path) -> list[str]:
    with open(_require(path, "gene ranking"), newline="", encoding="utf-8") as fh:
        return [row["gene"] for row in csv.DictReader(fh) if row.get("top") == "1"]


def evaluate(cfg: RunConfig, prediction_files: Sequence, out_dir, ranking_file=None) -> MetricsReport:
    """Score prediction tables against the prepared normalised labels.

    PCC(H) uses the top genes of ``ranking_file`` (a cv ``genes.csv``) when
    given, otherwise a ranking computed from these predictions alone.
    """
    truth = load_prepared(cfg.paths.prepared)
    genes = truth[0].gene_names
    preds = read_predictions(prediction_files, truth)
    reports = [slide_metrics(preds[ds.slide_id], ds.expression, ds.slide_id) for ds in truth if ds.slide_id in preds]
    if ranking_file:
        top = read_top_genes(ranking_file)
        ranking = None
    else:
        ranking = rank_genes([aggregate_metrics(reports, genes).gene_pcc], genes)
        top = ranking.top_genes
    report = aggregate_metrics(reports, genes, top, ranking)
    with Staging(out_dir) as st:
        write_metrics_report(st.path("metrics.csv"), report)
        write_summary(st.path("summary.txt"), report)
        write_gene_table(st.path("genes.csv"), genes, report.gene_pcc, ranking)
    return report


# ----------------------------------------------------------------------
# heatmaps


def value_grid(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """(h, w) grid with each spot's value at (grid_x, grid_y) and NaN in voids."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    values = np.asarray(values, dtype=np.float64)
    if len(values) != len(coords) or len(coords) == 0:
        raise ValueError("value_grid needs one value per coordinate")
    h, w = coords.max(axis=0) + 1
    grid = np.full((h, w), np.nan)
    grid[coords[:, 0], coords[:, 1]] = values
    return grid


def to_graymap(grid: np.ndarray) -> np.ndarray:
    """Min-max scale occupied cells to 1..255; voids become 0 (black).

    A constant image maps to mid gray (128).
    """
    out = np.zeros(grid.shape, dtype=np.uint8)
    occupied = np.isfinite(grid)
    if not occupied.any():
        return out
    lo, hi = grid[occupied].min(), grid[occupied].max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        out[occupied] = 128
    else:
        out[occupied] = np.rint(1 + 254 * (grid[occupied] - lo) / (hi - lo)).astype(np.uint8)
    return out


def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_grid_csv(path, grid: np.ndarray, sentinel: str = VOID) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in grid:
            w.writerow([sentinel if not np.isfinite(v) else f"{v:.9g}" for v in row])


def export_heatmap(
    predictions: np.ndarray,
    truth: np.ndarray,
    gene_names: Sequence[str],
    gene: str,
    coords: np.ndarray,
    out_dir,
    stem: str = "",
) -> dict[str, Path]:
    """Write ``<stem><gene>.{pred,truth}.{csv,pgm}`` for one gene."""
    gene_names = list(gene_names)
    if gene not in gene_names:
        raise UnknownGeneError(gene, gene_names)
    j = gene_names.index(gene)
    written = {}
    with Staging(out_dir) as st:
        for kind, values in (("pred", predictions), ("truth", truth)):
            grid = value_grid(np.asarray(values)[:, j], coords)
            base = f"{stem}{gene}.{kind}"
            write_grid_csv(st.path(base + ".csv"), grid)
            write_pgm(st.path(base + ".pgm"), to_graymap(grid))
            written[f"{kind}_csv"] = Path(out_dir) / (base + ".csv")
            written[f"{kind}_pgm"] = Path(out_dir) / (base + ".pgm")
    return written


def heatmap(cfg: RunConfig, prediction_file, gene: str, out_dir, slide: str | None = None) -> dict[str, Path]:
    truth = load_prepared(cfg.paths.prepared)
    genes = truth[0].gene_names
    if gene not in genes:
        raise UnknownGeneError(gene, genes)
    preds = read_predictions([prediction_file], truth)
    if slide is None:
        if len(preds) != 1:
            raise KeyError(f"predictions cover several slides {sorted(preds)}; choose one with --slide")
        slide = next(iter(preds))
    if slide not in preds:
        raise KeyError(f"no predictions for slide {slide!r}")
    ds = next(d for d in truth if d.slide_id == slide)
    return export_heatmap(preds[slide], ds.expression, genes, gene, ds.grid, out_dir, stem=f"{slide}.")
