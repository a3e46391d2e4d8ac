"""Slide datasets: CSV ingestion, gene selection, normalisation, smoothing,
patch geometry and the per-patch feature-extraction contract."""
from __future__ import annotations

import csv
import os
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .nn import Linear, Module, Parameter
from .tensor import Tensor, conv2d, no_grad, relu

PATCH = 224
NEIGHBOR_GRID = 5
NEIGHBOR_WINDOW = PATCH * NEIGHBOR_GRID
TARGET_TOKENS = 49
NEIGHBOR_TOKENS = NEIGHBOR_GRID * NEIGHBOR_GRID
FEATURE_DIM = 512

SPOTS_HEADER = ["slide_id", "patient_id", "spot_id", "grid_x", "grid_y", "pixel_x", "pixel_y"]
FEATURE_MAGIC = b"TPLXFEAT"
FEATURE_VERSION = 1

STAGES = ("raw", "selected", "normalized", "smoothed")


class DataFormatError(ValueError):
    """Malformed or inconsistent input data; carries the offending path and line."""

    def __init__(self, message: str, path: str | os.PathLike | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class SpotRecord:
    spot_id: str
    grid_x: int
    grid_y: int
    pixel_x: int
    pixel_y: int
    expression: np.ndarray


@dataclass
class FeatureSet:
    """Per-spot features: target (n, 49, 512), neighbor (n, 25, 512), global (n, 512)."""

    target: np.ndarray
    neighbor: np.ndarray
    global_: np.ndarray

    def __post_init__(self):
        n = self.target.shape[0]
        if self.target.ndim != 3 or self.target.shape[1] != TARGET_TOKENS:
            raise DataFormatError(f"target features must be (n, {TARGET_TOKENS}, d), got {self.target.shape}")
        if self.neighbor.shape[:2] != (n, NEIGHBOR_TOKENS) or self.neighbor.ndim != 3:
            raise DataFormatError(f"neighbor features must be ({n}, {NEIGHBOR_TOKENS}, d), got {self.neighbor.shape}")
        if self.global_.shape[0] != n or self.global_.ndim != 2:
            raise DataFormatError(f"global features must be ({n}, d), got {self.global_.shape}")
        dims = {self.target.shape[2], self.neighbor.shape[2], self.global_.shape[1]}
        if len(dims) != 1:
            raise DataFormatError(f"feature dimensions disagree: {sorted(dims)}")
        for name in ("target", "neighbor", "global_"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataFormatError(f"non-finite values in {name.rstrip('_')} features")

    @property
    def n(self) -> int:
        return self.target.shape[0]

    @property
    def dim(self) -> int:
        return self.global_.shape[1]

    def subset(self, rows) -> "FeatureSet":
        rows = np.asarray(rows)
        return FeatureSet(self.target[rows], self.neighbor[rows], self.global_[rows])


@dataclass
class SlideDataset:
    """All spots of one slide, stored column-wise.

    ``expression`` holds raw counts until ``normalize_expression`` runs; the
    ``stage`` tag records which preprocessing steps have been applied.
    """

    slide_id: str
    patient_id: str
    spot_ids: list[str]
    grid: np.ndarray  # (n, 2) int: grid_x, grid_y
    pixels: np.ndarray  # (n, 2) int: pixel_x, pixel_y
    expression: np.ndarray  # (n, m)
    gene_names: list[str]
    H: int = PATCH
    W: int = PATCH
    stage: str = "raw"
    features: FeatureSet | None = None
    target_images: np.ndarray | None = None  # (n, 224, 224, 3) float in [0, 1]

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64).reshape(-1, 2)
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        self.expression = np.asarray(self.expression)
        n = len(self.spot_ids)
        if n < 1:
            raise DataFormatError(f"slide {self.slide_id!r} has no spots")
        if self.grid.shape[0] != n or self.pixels.shape[0] != n or self.expression.shape != (n, len(self.gene_names)):
            raise DataFormatError(f"slide {self.slide_id!r}: inconsistent spot/gene dimensions")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def n(self) -> int:
        return len(self.spot_ids)

    @property
    def m(self) -> int:
        return len(self.gene_names)

    @property
    def spots(self) -> list[SpotRecord]:
        return [
            SpotRecord(sid, int(g[0]), int(g[1]), int(p[0]), int(p[1]), self.expression[i])
            for i, (sid, g, p) in enumerate(zip(self.spot_ids, self.grid, self.pixels))
        ]

    def subset(self, rows) -> "SlideDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(
            self,
            spot_ids=[self.spot_ids[i] for i in rows],
            grid=self.grid[rows],
            pixels=self.pixels[rows],
            expression=self.expression[rows],
            features=None if self.features is None else self.features.subset(rows),
            target_images=None if self.target_images is None else self.target_images[rows],
        )


# ----------------------------------------------------------------------
# ingestion


def _parse_int(value: str, what: str, path, line: int) -> int:
    try:
        return int(value)
    except ValueError:
        raise DataFormatError(f"{what} must be an integer, got {value!r}", path, line) from None


def load_dataset(spots_csv, counts_csv) -> list[SlideDataset]:
    """Read the spots and counts tables and return one dataset per slide.

    Grid coordinates are shifted per slide so both axes start at 0.
    """
    spots_csv, counts_csv = Path(spots_csv), Path(counts_csv)
    for p in (spots_csv, counts_csv):
        if not p.is_file():
            raise FileNotFoundError(f"no such file: {p}")

    with counts_csv.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "spot_id" or len(header) < 2:
            raise DataFormatError("header must be 'spot_id,<gene_1>,...'", counts_csv, 1)
        genes = header[1:]
        if len(set(genes)) != len(genes):
            raise DataFormatError("duplicate gene names in header", counts_csv, 1)
        counts: dict[str, np.ndarray] = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"expected {len(genes)} counts, got {len(row) - 1}", counts_csv, line
                )
            try:
                vals = np.array([float(v) for v in row[1:]])
            except ValueError:
                raise DataFormatError("counts must be numeric", counts_csv, line) from None
            if np.any(vals < 0) or not np.all(np.isfinite(vals)):
                raise DataFormatError("counts must be finite and non-negative", counts_csv, line)
            if row[0] in counts:
                raise DataFormatError(f"duplicate spot_id {row[0]!r}", counts_csv, line)
            counts[row[0]] = vals

    rows_by_slide: dict[str, list] = {}
    patient_of: dict[str, str] = {}
    seen_spots: set[str] = set()
    with spots_csv.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SPOTS_HEADER:
            raise DataFormatError(f"header must be {','.join(SPOTS_HEADER)}", spots_csv, 1)
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SPOTS_HEADER):
                raise DataFormatError(f"expected {len(SPOTS_HEADER)} fields, got {len(row)}", spots_csv, line)
            slide, patient, spot = row[0], row[1], row[2]
            if spot in seen_spots:
                raise DataFormatError(f"duplicate spot_id {spot!r}", spots_csv, line)
            seen_spots.add(spot)
            if patient_of.setdefault(slide, patient) != patient:
                raise DataFormatError(f"slide {slide!r} assigned to two patients", spots_csv, line)
            coords = [_parse_int(v, name, spots_csv, line) for v, name in zip(row[3:], SPOTS_HEADER[3:])]
            rows_by_slide.setdefault(slide, []).append((spot, coords, line))

    missing_counts = sorted(seen_spots - set(counts))
    missing_spots = sorted(set(counts) - seen_spots)
    if missing_counts or missing_spots:
        raise DataFormatError(
            f"spot ids without counts: {missing_counts}; counts without spot rows: {missing_spots}", spots_csv
        )

    datasets = []
    for slide, rows in rows_by_slide.items():
        grid = np.array([c[:2] for _, c, _ in rows], dtype=np.int64)
        grid -= grid.min(axis=0)
        seen_cells: dict[tuple, int] = {}
        for (spot, _, line), cell in zip(rows, map(tuple, grid)):
            if cell in seen_cells:
                raise DataFormatError(
                    f"slide {slide!r}: grid cell {cell} used by two spots", spots_csv, line
                )
            seen_cells[cell] = line
        datasets.append(
            SlideDataset(
                slide_id=slide,
                patient_id=patient_of[slide],
                spot_ids=[s for s, _, _ in rows],
                grid=grid,
                pixels=np.array([c[2:] for _, c, _ in rows], dtype=np.int64),
                expression=np.stack([counts[s] for s, _, _ in rows]),
                gene_names=list(genes),
            )
        )
    return datasets


def write_spots_csv(path, datasets: Sequence[SlideDataset]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPOTS_HEADER)
        for ds in datasets:
            for sid, g, p in zip(ds.spot_ids, ds.grid, ds.pixels):
                w.writerow([ds.slide_id, ds.patient_id, sid, int(g[0]), int(g[1]), int(p[0]), int(p[1])])


def write_matrix_csv(path, spot_ids: Sequence[str], gene_names: Sequence[str], values: np.ndarray, fmt: str = "%.9g") -> None:
    """Write a ``spot_id,<gene...>`` table (counts, labels or predictions)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["spot_id", *gene_names])
        integral = np.issubdtype(values.dtype, np.integer)
        for sid, row in zip(spot_ids, values):
            w.writerow([sid, *(str(int(v)) if integral else fmt % v for v in row)])


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """Read a ``spot_id,<gene...>`` table into (spot_ids, gene_names, values)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "spot_id":
            raise DataFormatError("header must start with spot_id", path, 1)
        ids, rows = [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataFormatError(f"expected {len(header) - 1} values, got {len(row) - 1}", path, line)
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise DataFormatError("values must be numeric", path, line) from None
            ids.append(row[0])
    values = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return ids, header[1:], values


# ----------------------------------------------------------------------
# preprocessing


def select_genes(datasets: Sequence[SlideDataset], m_keep: int = 250) -> list[int]:
    """Indices of the ``m_keep`` genes with the highest mean log(1 + count).

    Ranked by descending mean over every spot of ``datasets``; ties go to the
    lexically smaller gene name.
    """
    if m_keep <= 0:
        raise ValueError(f"m_keep must be positive, got {m_keep}")
    if not datasets:
        raise ValueError("select_genes needs at least one dataset")
    genes = datasets[0].gene_names
    for ds in datasets[1:]:
        if ds.gene_names != genes:
            raise DataFormatError(f"slide {ds.slide_id!r} has a different gene list")
    if m_keep > len(genes):
        raise ValueError(f"m_keep={m_keep} exceeds the {len(genes)} available genes")
    counts = np.concatenate([ds.expression for ds in datasets])
    means = np.log1p(counts).mean(axis=0)
    order = sorted(range(len(genes)), key=lambda j: (-means[j], genes[j]))
    return order[:m_keep]


def apply_gene_selection(ds: SlideDataset, indices: Sequence[int]) -> SlideDataset:
    if ds.stage != "raw":
        raise ValueError(f"gene selection expects raw counts, slide {ds.slide_id!r} is {ds.stage!r}")
    idx = list(indices)
    return replace(ds, expression=ds.expression[:, idx], gene_names=[ds.gene_names[i] for i in idx], stage="selected")


def normalize_expression(ds: SlideDataset) -> SlideDataset:
    """y_ij = log(1 + c_ij / T_i), T_i the spot total over the current genes.

    Spots with T_i == 0 are dropped with a warning.
    """
    if ds.stage not in ("raw", "selected"):
        raise ValueError(f"slide {ds.slide_id!r} is already {ds.stage!r}")
    totals = ds.expression.sum(axis=1)
    keep = np.flatnonzero(totals > 0)
    if len(keep) < ds.n:
        dropped = [ds.spot_ids[i] for i in np.flatnonzero(totals <= 0)]
        warnings.warn(f"slide {ds.slide_id!r}: dropping {len(dropped)} spot(s) with zero total count: {dropped}")
        if len(keep) == 0:
            raise DataFormatError(f"slide {ds.slide_id!r}: every spot has zero total count")
        ds = ds.subset(keep)
        totals = totals[keep]
    y = np.log1p(ds.expression / totals[:, None])
    return replace(ds, expression=y, stage="normalized")


def neighbor_offsets(neighborhood: int) -> list[tuple[int, int]]:
    if neighborhood == 8:
        return [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1) if (dx, dy) != (0, 0)]
    if neighborhood == 4:
        return [(-1, 0), (1, 0), (0, -1), (0, 1)]
    raise ValueError(f"neighborhood must be 4 or 8, got {neighborhood}")


def smooth_expression(ds: SlideDataset, neighborhood: int = 8) -> SlideDataset:
    """Replace each spot by the mean of itself and its present grid neighbours."""
    if ds.stage != "normalized":
        raise ValueError(f"smoothing expects normalized expression, slide {ds.slide_id!r} is {ds.stage!r}")
    where = {tuple(c): i for i, c in enumerate(ds.grid.tolist())}
    total = ds.expression.copy()
    count = np.ones(ds.n)
    for dx, dy in neighbor_offsets(neighborhood):
        for i, (x, y) in enumerate(ds.grid.tolist()):
            j = where.get((x + dx, y + dy))
            if j is not None:
                total[i] += ds.expression[j]
                count[i] += 1
    return replace(ds, expression=total / count[:, None], stage="smoothed")


# ----------------------------------------------------------------------
# patch geometry


def crop(image: np.ndarray, left: int, top: int, width: int, height: int) -> np.ndarray:
    """Window [left, left+width) x [top, top+height) of an (H, W, C) image, zero outside."""
    h, w = image.shape[:2]
    out = np.zeros((height, width) + image.shape[2:], dtype=image.dtype)
    x0, x1 = max(left, 0), min(left + width, w)
    y0, y1 = max(top, 0), min(top + height, h)
    if x0 < x1 and y0 < y1:
        out[y0 - top : y1 - top, x0 - left : x1 - left] = image[y0:y1, x0:x1]
    return out


def extract_target_patch(image: np.ndarray, pixel_x: int, pixel_y: int, size: int = PATCH) -> np.ndarray:
    half = size // 2
    return crop(image, pixel_x - half, pixel_y - half, size, size)


def extract_neighbor_view(image: np.ndarray, pixel_x: int, pixel_y: int, size: int = PATCH, grid: int = NEIGHBOR_GRID) -> np.ndarray:
    """The (grid*size)^2 window around a spot, tiled row-major into grid^2 patches."""
    span = size * grid
    window = crop(image, pixel_x - span // 2, pixel_y - span // 2, span, span)
    tiles = window.reshape(grid, size, grid, size, *image.shape[2:]).swapaxes(1, 2)
    return tiles.reshape(grid * grid, size, size, *image.shape[2:])


# ----------------------------------------------------------------------
# feature extraction


class FeatureExtractor(Protocol):
    """Maps (B, 224, 224, 3) images in [0, 1] to (B, 7, 7, 512) feature maps."""

    def feature_map(self, images: np.ndarray) -> np.ndarray: ...


class ToyExtractor(Module):
    """Small trainable convolutional trunk standing in for a pretrained ResNet18.

    Three stride-2 3x3 conv stages (224 -> 28, edge padded so a flat image
    gives a flat map), a 4x4 average pool (28 -> 7)
    and a 1x1 projection to 512 channels followed by ReLU, so outputs are
    non-negative like a ResNet's final stage.
    """

    def __init__(self, rng: np.random.Generator, widths: Sequence[int] = (8, 16, 32), out_dim: int = FEATURE_DIM):
        chans = [3, *widths]
        self.convs_w = [Parameter(rng.normal(0, np.sqrt(2.0 / (9 * cin)), (cout, cin, 3, 3))) for cin, cout in zip(chans, chans[1:])]
        self.convs_b = [Parameter(np.zeros(cout)) for cout in widths]
        self.head = Linear(widths[-1], out_dim, rng)
        self.out_dim = out_dim

    def named_parameters(self, prefix: str = ""):
        for i, (w, b) in enumerate(zip(self.convs_w, self.convs_b)):
            yield f"{prefix}conv{i}.weight", w
            yield f"{prefix}conv{i}.bias", b
        yield from self.head.named_parameters(prefix + "head.")

    def forward(self, images: Tensor) -> Tensor:
        """(B, 224, 224, 3) -> (B, 7, 7, out_dim)."""
        x = images.permute(0, 3, 1, 2)
        for w, b in zip(self.convs_w, self.convs_b):
            x = relu(conv2d(x, w, b, stride=2, padding="edge"))
        bsz, c, h, wd = x.shape
        if h % 7 or wd % 7:
            raise ValueError(f"trunk output {h}x{wd} is not divisible into a 7x7 grid")
        x = x.reshape(bsz, c, 7, h // 7, 7, wd // 7).mean(axis=(3, 5))
        return relu(self.head(x.permute(0, 2, 3, 1)))

    def feature_map(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(Tensor(np.asarray(images, dtype=self.head.weight.dtype))).data


def _checked_map(extractor: FeatureExtractor, images: np.ndarray) -> np.ndarray:
    fmap = np.asarray(extractor.feature_map(images))
    if fmap.ndim != 4 or fmap.shape[1:3] != (7, 7):
        raise DataFormatError(f"extractor must return (B, 7, 7, d) maps, got {fmap.shape}")
    if not np.all(np.isfinite(fmap)):
        raise FloatingPointError("feature extractor produced non-finite values")
    return fmap


def image_to_float(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return image.astype(np.float32)


def extract_features(extractor: FeatureExtractor, image: np.ndarray, ds: SlideDataset, batch: int = 2) -> FeatureSet:
    """Run ``extractor`` over every spot's target patch and neighbor view.

    Target features are the 49-token reshape of the target patch map; each of
    the 25 neighbor tiles and the target patch are mean-pooled to one vector.
    """
    image = image_to_float(image)
    targets, neighbors, globals_ = [], [], []
    for start in range(0, ds.n, batch):
        idx = range(start, min(start + batch, ds.n))
        tiles = np.stack([extract_neighbor_view(image, *ds.pixels[i]) for i in idx])  # (b, 25, 224, 224, 3)
        b = tiles.shape[0]
        fmap = _checked_map(extractor, tiles.reshape(b * NEIGHBOR_TOKENS, PATCH, PATCH, 3))
        d = fmap.shape[-1]
        fmap = fmap.reshape(b, NEIGHBOR_TOKENS, TARGET_TOKENS, d)
        centre = NEIGHBOR_TOKENS // 2  # tile 12 coincides with the target patch
        targets.append(fmap[:, centre])
        neighbors.append(fmap.mean(axis=2))
        globals_.append(fmap[:, centre].mean(axis=1))
    return FeatureSet(
        np.concatenate(targets).astype(np.float32),
        np.concatenate(neighbors).astype(np.float32),
        np.concatenate(globals_).astype(np.float32),
    )


def extract_target_images(image: np.ndarray, ds: SlideDataset) -> np.ndarray:
    image = image_to_float(image)
    return np.stack([extract_target_patch(image, *p) for p in ds.pixels])


# ----------------------------------------------------------------------
# feature files


def write_feature_file(path, array: np.ndarray) -> None:
    """Write an (n, tokens, dim) float32 array with the TPLXFEAT header."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, None, :]
    if arr.ndim != 3:
        raise ValueError(f"feature array must be (n, tokens, dim), got {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<4I", FEATURE_VERSION, *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise DataFormatError("bad magic, not a TPLXFEAT file", path)
    if len(raw) < 24:
        raise DataFormatError("truncated header", path)
    version, n, tokens, dim = struct.unpack("<4I", raw[8:24])
    if version != FEATURE_VERSION:
        raise DataFormatError(f"unsupported feature file version {version}", path)
    expected = n * tokens * dim * 4
    if len(raw) - 24 != expected:
        raise DataFormatError(f"payload has {len(raw) - 24} bytes, header implies {expected}", path)
    return np.frombuffer(raw, dtype="<f4", offset=24).reshape(n, tokens, dim).astype(np.float32)


def feature_paths(directory, slide_id: str) -> dict[str, Path]:
    directory = Path(directory)
    return {kind: directory / f"{slide_id}.{kind}.feat" for kind in ("target", "neighbor", "global")}


def save_features(directory, slide_id: str, fs: FeatureSet) -> None:
    paths = feature_paths(directory, slide_id)
    write_feature_file(paths["target"], fs.target)
    write_feature_file(paths["neighbor"], fs.neighbor)
    write_feature_file(paths["global"], fs.global_)


def load_features(directory, slide_id: str) -> FeatureSet:
    paths = feature_paths(directory, slide_id)
    for p in paths.values():
        if not p.is_file():
            raise FileNotFoundError(f"no such file: {p}")
    glob = read_feature_file(paths["global"])
    if glob.shape[1] != 1:
        raise DataFormatError(f"global feature file must have one token per spot, got {glob.shape[1]}", paths["global"])
    return FeatureSet(read_feature_file(paths["target"]), read_feature_file(paths["neighbor"]), glob[:, 0])


# ----------------------------------------------------------------------
# slide images


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6, maxval 255) portable pixmap into an (H, W, 3) uint8 array."""
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PPM header", path)
        fields.append(raw[start:pos])
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise DataFormatError("only binary P6 pixmaps with maxval 255 are supported", path)
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_raw_planar(path, height: int, width: int) -> np.ndarray:
    """Read 8-bit planar RGB (all R, then G, then B) into (H, W, 3)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != 3 * height * width:
        raise DataFormatError(f"raw image has {raw.size} bytes, expected {3 * height * width}", path)
    return raw.reshape(3, height, width).transpose(1, 2, 0).copy()
