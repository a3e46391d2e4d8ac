"""Synthetic slides with a planted feature-to-expression map.

Each spot has a latent vector ``z``; its pooled global feature is ``g = A z``
plus a little isotropic noise, and its expression is ``g @ W + noise``.  The
map ``W`` is shared by all patients, so a model trained on some patients
should generalise to the others.

Target tokens are ``g`` plus zero-sum per-token deviations (their mean pool is
exactly ``g``).  Neighbor tile ``(r, c)`` carries the pooled feature of the spot
at grid offset ``(r - 2, c - 2)``, or zeros outside the tissue, which mirrors
tiling a 1120 px window when spots are 224 px apart.

Latents can be spatially correlated (Gaussian-smoothed white noise with
length scale ``spatial_scale`` grid cells), as in real tissue where nearby
spots look and express alike; without it the neighbor view carries no
information about the centre spot beyond its own tile.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import (
    FEATURE_DIM,
    NEIGHBOR_GRID,
    NEIGHBOR_TOKENS,
    PATCH,
    TARGET_TOKENS,
    FeatureSet,
    SlideDataset,
    save_features,
    write_matrix_csv,
    write_spots_csv,
)


@dataclass
class PlantedMap:
    basis: np.ndarray  # (latent, d_in)
    weights: np.ndarray  # (d_in, m)
    offset: np.ndarray  # (m,)


def planted_map(m: int, d_in: int = FEATURE_DIM, latent: int = 8, seed: int = 0) -> PlantedMap:
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(latent, d_in)) / np.sqrt(latent)
    weights = rng.normal(size=(d_in, m)) / np.sqrt(d_in)
    offset = np.zeros(m)
    return PlantedMap(basis, weights, offset)


def neighbor_tokens(grid: np.ndarray, pooled: np.ndarray) -> np.ndarray:
    """(n, 25, d): tile (r, c) holds the pooled feature at grid offset (r-2, c-2)."""
    n, d = pooled.shape
    where = {tuple(c): i for i, c in enumerate(grid.tolist())}
    half = NEIGHBOR_GRID // 2
    out = np.zeros((n, NEIGHBOR_TOKENS, d), dtype=np.float32)
    for i, (x, y) in enumerate(grid.tolist()):
        for t in range(NEIGHBOR_TOKENS):
            dr, dc = divmod(t, NEIGHBOR_GRID)
            j = where.get((x + dr - half, y + dc - half))
            if j is not None:
                out[i, t] = pooled[j]
    return out


def make_slide(
    slide_id: str,
    patient_id: str,
    side: int,
    planted: PlantedMap,
    rng: np.random.Generator,
    noise: float = 0.05,
    feature_noise: float = 0.05,
    token_spread: float = 0.5,
    occupancy: float = 1.0,
    spatial_scale: float = 0.0,
) -> SlideDataset:
    latent, d_in = planted.basis.shape
    field = rng.normal(size=(side, side, latent))
    if spatial_scale > 0:
        field = gaussian_filter(field, sigma=(spatial_scale, spatial_scale, 0), mode="reflect")
        field = (field - field.mean(axis=(0, 1))) / field.std(axis=(0, 1))
    xs, ys = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    if occupancy < 1.0:
        keep = rng.random(len(grid)) < occupancy
        keep[0] = True
        grid = grid[keep]
    n = len(grid)
    z = field[grid[:, 0], grid[:, 1]]
    g = z @ planted.basis + feature_noise * rng.normal(size=(n, d_in))
    dev = token_spread * rng.normal(size=(n, TARGET_TOKENS, d_in))
    dev -= dev.mean(axis=1, keepdims=True)
    target = g[:, None, :] + dev
    y = g @ planted.weights + planted.offset + noise * rng.normal(size=(n, planted.weights.shape[1]))
    m = y.shape[1]
    g32 = g.astype(np.float32)
    return SlideDataset(
        slide_id=slide_id,
        patient_id=patient_id,
        spot_ids=[f"{slide_id}_s{i}" for i in range(n)],
        grid=grid,
        pixels=grid[:, ::-1] * PATCH + PATCH * 3,
        expression=y,
        gene_names=[f"G{j:03d}" for j in range(m)],
        stage="normalized",
        features=FeatureSet(target.astype(np.float32), neighbor_tokens(grid, g32), g32),
    )


def make_cohort(
    patients: int = 4,
    slides_per_patient: int = 2,
    side: int = 8,
    m: int = 16,
    d_in: int = FEATURE_DIM,
    noise: float = 0.05,
    seed: int = 0,
    occupancy: float = 1.0,
    spatial_scale: float = 1.5,
) -> list[SlideDataset]:
    """Slides whose labels are a patient-independent linear map of the pooled feature."""
    planted = planted_map(m, d_in, seed=seed)
    rng = np.random.default_rng(seed + 1)
    slides = []
    for p in range(patients):
        for s in range(slides_per_patient):
            slides.append(
                make_slide(f"P{p}S{s}", f"P{p}", side, planted, rng, noise=noise, occupancy=occupancy, spatial_scale=spatial_scale)
            )
    return slides


def write_toy_dataset(
    directory,
    patients: int = 3,
    slides_per_patient: int = 2,
    side: int = 4,
    genes: int = 12,
    seed: int = 0,
) -> dict[str, Path]:
    """Write spots.csv, counts.csv and precomputed feature files for a small cohort.

    Counts are Poisson draws whose rates follow the planted map, so normalised
    labels remain predictable from the features.  A few extra low-expression
    genes are included so gene selection has something to discard.
    """
    directory = Path(directory)
    features_dir = directory / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    slides = make_cohort(patients, slides_per_patient, side, genes, seed=seed, occupancy=0.85)
    rng = np.random.default_rng(seed + 7)
    extra = 3
    names = [f"GENE{j:02d}" for j in range(genes + extra)]
    all_ids, all_counts = [], []
    for ds in slides:
        rates = 20.0 * np.exp(0.5 * np.clip(ds.expression, -4, 4))
        low = np.full((ds.n, extra), 0.3)
        counts = rng.poisson(np.concatenate([rates, low], axis=1)).astype(np.int64)
        all_ids.extend(ds.spot_ids)
        all_counts.append(counts)
        save_features(features_dir, ds.slide_id, ds.features)
    # spot ids in counts.csv are sorted differently from spots.csv on purpose
    counts = np.concatenate(all_counts)
    order = np.argsort(all_ids, kind="stable")
    write_matrix_csv(directory / "counts.csv", [all_ids[i] for i in order], names, counts[order])
    write_spots_csv(directory / "spots.csv", slides)
    return {"spots": directory / "spots.csv", "counts": directory / "counts.csv", "features": features_dir}
