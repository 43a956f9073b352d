"""Diagnostics: CAM heatmaps, pairwise similarity histograms and parameter sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .consistency import weighted_gap
from .data import Dataset, iterate_batches
from .metrics import evaluate
from .nn import Model, compute_cams
from .train import TrainConfig, fit, predict

log = logging.getLogger(__name__)

SWEEP_PARAMS = ("tau", "alpha")
SWEEP_COLUMNS = ("value", "mA", "accu", "prec", "recall", "f1")


# -- heatmaps ----------------------------------------------------------------

def minmax_to_uint8(a) -> np.ndarray:
    """Scale to [0, 255]; a constant map becomes uniform 128."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    # spreads at rounding level (e.g. a resampled constant) count as constant
    if not np.isfinite(hi - lo) or hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def bilinear_resize(a, height, width) -> np.ndarray:
    """Align-corners bilinear resampling of a 2-D map."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape
    ys = np.linspace(0, h - 1, height) if h > 1 else np.zeros(height)
    xs = np.linspace(0, w - 1, width) if w > 1 else np.zeros(width)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def write_pgm(path, image: np.ndarray):
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)


def cam_heatmap(cam, height, width) -> np.ndarray:
    """Upsample a raw CAM to input extents, then min-max it to 8 bits.

    Upsampling first keeps the mapping monotone, so the brightest pixel of the
    heatmap sits on the upsampled map's maximum.
    """
    return minmax_to_uint8(bilinear_resize(cam, height, width))


def export_cams(model: Model, dataset: Dataset, samples, attributes, out_dir) -> list[Path]:
    """Write one P5 heatmap plus a JSON sidecar per (sample, attribute)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples, attributes = list(samples), list(attributes)
    images = dataset.float_images(np.asarray(samples, dtype=int))
    with T.no_grad():
        fb = model(images)
        cams = compute_cams(fb.features.data, model.head.weight.data)
    h, w = images.shape[2:]
    written = []
    for row, i in enumerate(samples):
        stem = Path(dataset.filenames[i]).stem
        for m in attributes:
            name = dataset.attribute_names[m]
            path = out_dir / f"{stem}_{m:02d}_{name}.pgm"
            write_pgm(path, cam_heatmap(cams[row, m], h, w))
            meta = {"image": dataset.filenames[i], "attribute": name,
                    "probability": float(fb.probs[row, m]), "label": int(dataset.labels[i, m])}
            path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
            written.append(path)
    return written


# -- similarity distributions ---------------------------------------------------

@dataclass
class SimilarityDistribution:
    attribute: int
    name: str
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    frac_high: float
    pairs: int
    note: str = ""

    @property
    def skipped(self):
        return self.pairs == 0


def cosine_rows(x, eps=T.NORM_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return x / np.maximum(norm, eps)


def pair_cosines(u, v) -> np.ndarray:
    """Row-wise cosine of flattened inputs, clipped to [-1, 1]; identical rows give exactly 1."""
    u = np.asarray(u, dtype=np.float64).reshape(len(u), -1)
    v = np.asarray(v, dtype=np.float64).reshape(len(v), -1)
    cos = np.clip((cosine_rows(u) * cosine_rows(v)).sum(axis=1), -1.0, 1.0)
    same = (u == v).all(axis=1) & (np.abs(u).max(axis=1, initial=0.0) > 0)
    return np.where(same, 1.0, cos)


def sample_pairs(n, max_pairs, rng) -> np.ndarray:
    """All ``i < j`` pairs when there are few enough, else ``max_pairs`` distinct ones."""
    i, j = np.triu_indices(n, k=1)
    if len(i) > max_pairs:
        chosen = np.sort(rng.choice(len(i), size=max_pairs, replace=False))
        i, j = i[chosen], j[chosen]
    return np.stack([i, j], axis=1)


def collect_maps(model: Model, dataset: Dataset, kind: str, batch_size: int = 250):
    """Per-sample CAMs ``(n, M, H, W)`` or semantic vectors ``(n, M, C)``."""
    if kind not in ("spatial", "semantic"):
        raise ValueError(f"unknown similarity kind {kind!r}")
    out = []
    with T.no_grad():
        for images, _, _ in iterate_batches(dataset, batch_size, shuffle=False):
            fb = model(images)
            f = fb.features.data.astype(np.float64)
            cams = compute_cams(f, model.head.weight.data.astype(np.float64))
            out.append(cams if kind == "spatial" else weighted_gap(f, cams))
    return np.concatenate(out)


def similarity_distributions(model: Model, dataset: Dataset, kind: str = "spatial",
                             max_pairs: int = 2000, bins: int = 40, seed: int = 0,
                             high: float = 0.9) -> list[SimilarityDistribution]:
    maps = collect_maps(model, dataset, kind)
    return distributions_from_maps(maps, dataset.labels, dataset.attribute_names,
                                   max_pairs, bins, seed, high)


def distributions_from_maps(maps, labels, names, max_pairs=2000, bins=40, seed=0, high=0.9):
    edges = np.linspace(-1.0, 1.0, bins + 1)
    rng = np.random.default_rng(seed)
    result = []
    for m in range(maps.shape[1]):
        pos = np.flatnonzero(np.asarray(labels)[:, m] == 1)
        if len(pos) < 2:
            note = f"skipped: {len(pos)} positive sample(s)"
            log.info("attribute %s %s", names[m], note)
            result.append(SimilarityDistribution(m, names[m], edges, np.zeros(bins, dtype=np.int64),
                                                 float("nan"), float("nan"), 0, note))
            continue
        pairs = sample_pairs(len(pos), max_pairs, rng)
        a = maps[pos[pairs[:, 0]], m]
        b = maps[pos[pairs[:, 1]], m]
        sims = pair_cosines(a, b)
        counts, _ = np.histogram(sims, bins=edges)
        result.append(SimilarityDistribution(m, names[m], edges, counts, float(sims.mean()),
                                             float((sims >= high).mean()), len(sims)))
    return result


def mean_high_fraction(dists) -> float:
    """Average over non-skipped attributes of the share of pairs at or above the cut."""
    vals = [d.frac_high for d in dists if not d.skipped]
    return float(np.mean(vals)) if vals else float("nan")


def histogram_csv(dist: SimilarityDistribution) -> str:
    lines = ["attr,bin_lo,bin_hi,count"]
    for lo, hi, c in zip(dist.bin_edges[:-1], dist.bin_edges[1:], dist.counts):
        lines.append(f"{dist.name},{float(lo)!r},{float(hi)!r},{int(c)}")
    return "\n".join(lines) + "\n"


def write_histograms(dists, out_dir, kind="spatial") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in dists:
        path = out_dir / f"sim_{kind}_{d.attribute:02d}_{d.name}.csv"
        path.write_text(histogram_csv(d))
        paths.append(path)
    summary = [{"attribute": d.name, "pairs": d.pairs, "mean": d.mean, "frac_high": d.frac_high,
                "note": d.note} for d in dists]
    (out_dir / f"sim_{kind}_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return paths


# -- sweeps ---------------------------------------------------------------------

@dataclass
class SweepRow:
    value: float
    mA: float
    accu: float
    prec: float
    recall: float
    f1: float
    extra: dict = field(default_factory=dict)


def with_parameter(template: TrainConfig, param: str, value: float) -> TrainConfig:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
    ccfg = dataclasses.replace(template.consistency, **{param: float(value)})
    return dataclasses.replace(template, consistency=ccfg)


def sweep(template: TrainConfig, param: str, values, train: Dataset, val: Dataset,
          test: Dataset | None = None, backbone=None, on_run=None) -> list[SweepRow]:
    """One training run per value; rows are reported on ``test`` (or ``val``), sorted by value."""
    values = sorted(float(v) for v in values)
    if not values:
        raise ValueError("empty sweep grid")
    configs = [with_parameter(template, param, v) for v in values]
    rows = []
    for v, cfg in zip(values, configs):
        kwargs = {} if backbone is None else {"backbone": backbone}
        result = fit(cfg, train, val, **kwargs)
        target = test if test is not None else val
        probs, _ = predict(result.best_model(), target)
        rep = evaluate(probs, target.labels)
        row = SweepRow(v, rep.mA, rep.accu, rep.prec, rep.recall, rep.f1)
        rows.append(row)
        if on_run is not None:
            on_run(row, result)
    return rows


def sweep_csv(rows) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for r in sorted(rows, key=lambda r: r.value):
        lines.append(",".join(repr(float(getattr(r, c))) for c in SWEEP_COLUMNS))
    return "\n".join(lines) + "\n"
