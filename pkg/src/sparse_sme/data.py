"""Dataset representation, file formats, splits, target preprocessing, and
the synthetic generator.

The binary format ("urf1") is little-endian: magic ``URF1``, then u32
version (=1), u32 region count K, u32 d_e, u32 poi category count C, u32
task count T (24-byte header), followed by K records of u32 region_id plus
(2*d_e + C + T) float32 values ordered image, text, poi, labels.  A
key=value manifest sidecar (``<path>.manifest``) carries the dataset name,
task names, and target-transform parameters.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .numcore import Rng

_MAGIC = b"URF1"
_VERSION = 1

DEFAULT_TASK_NAMES = ["carbon", "population", "light"]
DEFAULT_TRANSFORM = "log1p"


@dataclass
class RegionRecord:
    """One region's precomputed features, raw POI counts, and targets."""

    region_index: int
    image_feat: np.ndarray
    text_feat: np.ndarray
    poi_counts: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image_feat = np.asarray(self.image_feat, dtype=np.float64)
        self.text_feat = np.asarray(self.text_feat, dtype=np.float64)
        self.poi_counts = np.asarray(self.poi_counts, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)


@dataclass
class Dataset:
    name: str
    d_e: int
    poi_categories: int
    task_names: list[str]
    records: list[RegionRecord]
    transform_spec: list[str] = field(default_factory=list)
    target_transform: "TargetTransform | None" = None

    def __post_init__(self):
        if not self.transform_spec:
            self.transform_spec = [DEFAULT_TRANSFORM] * len(self.task_names)

    @property
    def n_tasks(self) -> int:
        return len(self.task_names)

    @property
    def n_regions(self) -> int:
        return len(self.records)

    def labels_matrix(self) -> np.ndarray:
        return np.stack([r.labels for r in self.records]) if self.records else np.zeros((0, self.n_tasks))

    def validate(self) -> "Dataset":
        seen = set()
        for i, rec in enumerate(self.records):
            if rec.image_feat.shape != (self.d_e,) or rec.text_feat.shape != (self.d_e,):
                raise FormatError(
                    f"record {i}: feature length mismatch "
                    f"(expected d_e={self.d_e}, got image {rec.image_feat.size}, text {rec.text_feat.size})"
                )
            if rec.poi_counts.shape != (self.poi_categories,):
                raise FormatError(
                    f"record {i}: poi count length {rec.poi_counts.size} != C={self.poi_categories}"
                )
            if rec.labels.shape != (self.n_tasks,):
                raise FormatError(
                    f"record {i}: label length {rec.labels.size} != T={self.n_tasks}"
                )
            for arr in (rec.image_feat, rec.text_feat, rec.poi_counts, rec.labels):
                if not np.isfinite(arr).all():
                    raise DataError(f"record {i}: non-finite value in payload")
            if (rec.poi_counts < 0).any():
                raise DataError(f"record {i}: negative poi count")
            if rec.region_index in seen:
                raise DataError(f"record {i}: duplicate region index {rec.region_index}")
            seen.add(rec.region_index)
        if len(self.transform_spec) != self.n_tasks:
            raise FormatError("transform spec length does not match task count")
        for s in self.transform_spec:
            if s not in ("none", "log1p"):
                raise FormatError(f"unknown target transform {s!r}")
        return self


@dataclass
class SplitAssignment:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int

    def indices(self, name: str) -> list[int]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None


def split_dataset(dataset: Dataset, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitAssignment:
    """Seeded shuffle cut at floor(r0*K) and floor(r0*K)+floor(r1*K);
    test takes the remainder."""
    k = dataset.n_regions
    if k < 3:
        raise ValueError(f"need at least 3 regions to split, got {k}")
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    perm = Rng(seed).permutation(k).tolist()
    # nudge guards against r*k landing epsilon below an exact integer
    n_train = int(math.floor(ratios[0] * k + 1e-9))
    n_val = int(math.floor(ratios[1] * k + 1e-9))
    return SplitAssignment(
        train=perm[:n_train],
        val=perm[n_train : n_train + n_val],
        test=perm[n_train + n_val :],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# target preprocessing


@dataclass
class TargetTransform:
    """Per-task {identity | log1p} followed by a z-score fitted on train."""

    specs: list[str]
    means: np.ndarray
    stds: np.ndarray
    clamped: list[bool]

    def apply(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        out = np.empty_like(y)
        cols = y.reshape(-1, len(self.specs))
        res = out.reshape(-1, len(self.specs))
        for t, spec in enumerate(self.specs):
            v = cols[:, t]
            if spec == "log1p":
                if (v < 0).any():
                    raise DataError(f"task {t}: log1p transform saw negative target")
                v = np.log1p(v)
            res[:, t] = (v - self.means[t]) / self.stds[t]
        return out

    def invert(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        out = np.empty_like(y)
        cols = y.reshape(-1, len(self.specs))
        res = out.reshape(-1, len(self.specs))
        for t, spec in enumerate(self.specs):
            v = cols[:, t] * self.stds[t] + self.means[t]
            if spec == "log1p":
                v = np.expm1(v)
            res[:, t] = v
        return out


def fit_target_transform(dataset: Dataset, train_indices, specs=None) -> TargetTransform:
    if len(train_indices) == 0:
        raise ValueError("training split is empty")
    specs = list(specs) if specs is not None else list(dataset.transform_spec)
    if len(specs) != dataset.n_tasks:
        raise ValueError(f"{dataset.n_tasks} tasks but {len(specs)} transform specs")
    y = dataset.labels_matrix()[np.asarray(train_indices, dtype=np.intp)]
    means = np.zeros(dataset.n_tasks)
    stds = np.ones(dataset.n_tasks)
    clamped = []
    for t, spec in enumerate(specs):
        v = y[:, t]
        if spec == "log1p":
            if (v < 0).any():
                raise DataError(f"task {dataset.task_names[t]!r}: negative targets under log1p")
            v = np.log1p(v)
        elif spec != "none":
            raise ValueError(f"unknown target transform {spec!r}")
        means[t] = v.mean()
        std = float(v.std())
        clamped.append(std == 0.0)
        stds[t] = 1.0 if std == 0.0 else std
    return TargetTransform(specs=specs, means=means, stds=stds, clamped=clamped)


def poi_featurize(counts) -> np.ndarray:
    """Elementwise log1p of raw category counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if (counts < 0).any():
        raise DataError("poi counts must be nonnegative")
    return np.log1p(counts)


# ---------------------------------------------------------------------------
# file formats


def _manifest_path(path) -> Path:
    return Path(str(path) + ".manifest")


def _write_manifest(dataset: Dataset, path) -> None:
    lines = [
        f"name={dataset.name}",
        f"d_e={dataset.d_e}",
        f"poi_categories={dataset.poi_categories}",
        f"tasks={','.join(dataset.task_names)}",
        f"transform={','.join(dataset.transform_spec)}",
    ]
    tf = dataset.target_transform
    if tf is not None:
        lines.append("transform_mean=" + ",".join(f"{m:.17g}" for m in tf.means))
        lines.append("transform_std=" + ",".join(f"{s:.17g}" for s in tf.stds))
    _manifest_path(path).write_text("\n".join(lines) + "\n")


def _read_manifest(path) -> dict[str, str]:
    mpath = _manifest_path(path)
    if not mpath.exists():
        return {}
    out = {}
    for lineno, line in enumerate(mpath.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{mpath}: line {lineno} is not key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_dataset(dataset: Dataset, path, format: str = "urf1") -> None:
    dataset.validate()
    path = Path(path)
    try:
        if format == "urf1":
            path.write_bytes(_encode_urf1(dataset))
        elif format == "csv":
            path.write_text(_encode_csv(dataset))
        else:
            raise ValueError(f"unknown dataset format {format!r}")
        _write_manifest(dataset, path)
    except OSError as exc:
        raise IOError(f"cannot write dataset to {path}: {exc}") from exc


def _encode_urf1(dataset: Dataset) -> bytes:
    n_float = 2 * dataset.d_e + dataset.poi_categories + dataset.n_tasks
    header = _MAGIC + struct.pack(
        "<IIIII", _VERSION, dataset.n_regions, dataset.d_e,
        dataset.poi_categories, dataset.n_tasks,
    )
    body = bytearray()
    for rec in dataset.records:
        vals = np.concatenate([rec.image_feat, rec.text_feat, rec.poi_counts, rec.labels])
        if vals.size != n_float:
            raise FormatError(f"record {rec.region_index}: wrong payload width")
        body += struct.pack("<I", rec.region_index)
        body += vals.astype("<f4").tobytes()
    return header + bytes(body)


def _encode_csv(dataset: Dataset) -> str:
    cols = (
        ["region_id"]
        + [f"img_{i}" for i in range(dataset.d_e)]
        + [f"txt_{i}" for i in range(dataset.d_e)]
        + [f"poi_{i}" for i in range(dataset.poi_categories)]
        + [f"y_{i}" for i in range(dataset.n_tasks)]
    )
    lines = [",".join(cols)]
    for rec in dataset.records:
        vals = np.concatenate([rec.image_feat, rec.text_feat, rec.poi_counts, rec.labels])
        lines.append(str(rec.region_index) + "," + ",".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise IOError(f"dataset file not found: {path}")
    manifest = _read_manifest(path)
    if path.suffix == ".csv":
        dataset = _decode_csv(path.read_text(), manifest)
    else:
        dataset = _decode_urf1(path.read_bytes(), manifest)
    dataset.validate()
    return dataset


def _dataset_from_manifest(manifest, d_e, n_poi, n_tasks, records) -> Dataset:
    task_names = manifest.get("tasks", "").split(",") if manifest.get("tasks") else [
        f"task_{i}" for i in range(n_tasks)
    ]
    if len(task_names) != n_tasks:
        raise FormatError(
            f"manifest lists {len(task_names)} tasks but file carries {n_tasks}"
        )
    spec = manifest.get("transform", "").split(",") if manifest.get("transform") else []
    ds = Dataset(
        name=manifest.get("name", "dataset"),
        d_e=d_e,
        poi_categories=n_poi,
        task_names=task_names,
        records=records,
        transform_spec=spec,
    )
    if "transform_mean" in manifest and "transform_std" in manifest:
        means = np.array([float(v) for v in manifest["transform_mean"].split(",")])
        stds = np.array([float(v) for v in manifest["transform_std"].split(",")])
        ds.target_transform = TargetTransform(
            specs=list(ds.transform_spec),
            means=means,
            stds=stds,
            clamped=[s == 1.0 for s in stds],
        )
    return ds


def _decode_urf1(blob: bytes, manifest) -> Dataset:
    if len(blob) < 24:
        raise FormatError("file too short for a urf1 header")
    magic = blob[:4]
    if magic != _MAGIC:
        if magic[:3] == b"URF":
            raise FormatError(f"unsupported urf version marker {magic!r}")
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    version, k, d_e, n_poi, n_tasks = struct.unpack("<IIIII", blob[4:24])
    if version != _VERSION:
        raise FormatError(f"unsupported urf1 version {version}")
    n_float = 2 * d_e + n_poi + n_tasks
    rec_size = 4 + 4 * n_float
    payload = blob[24:]
    if len(payload) != k * rec_size:
        bad_index = len(payload) // rec_size if rec_size else 0
        raise FormatError(
            f"truncated or oversized urf1 payload at record {min(bad_index, k - 1) if k else 0}: "
            f"have {len(payload)} bytes, expected {k * rec_size}"
        )
    dtype = np.dtype([("id", "<u4"), ("vals", "<f4", (n_float,))])
    raw = np.frombuffer(payload, dtype=dtype)
    records = []
    for i in range(k):
        vals = raw["vals"][i].astype(np.float64)
        if not np.isfinite(vals).all():
            raise DataError(f"record {i}: NaN or Inf in payload")
        records.append(
            RegionRecord(
                region_index=int(raw["id"][i]),
                image_feat=vals[:d_e],
                text_feat=vals[d_e : 2 * d_e],
                poi_counts=vals[2 * d_e : 2 * d_e + n_poi],
                labels=vals[2 * d_e + n_poi :],
            )
        )
    return _dataset_from_manifest(manifest, d_e, n_poi, n_tasks, records)


def _decode_csv(text: str, manifest) -> Dataset:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty csv dataset")
    header = lines[0].split(",")
    if header[0] != "region_id":
        raise FormatError("csv header must start with region_id")
    d_e = sum(1 for c in header if c.startswith("img_"))
    n_txt = sum(1 for c in header if c.startswith("txt_"))
    n_poi = sum(1 for c in header if c.startswith("poi_"))
    n_tasks = sum(1 for c in header if c.startswith("y_"))
    if n_txt != d_e or len(header) != 1 + 2 * d_e + n_poi + n_tasks:
        raise FormatError("csv header does not match the expected column layout")
    records = []
    for i, line in enumerate(lines[1:]):
        parts = line.split(",")
        if len(parts) != len(header):
            raise FormatError(f"record {i}: {len(parts)} columns, expected {len(header)}")
        try:
            region = int(parts[0])
            vals = np.array([float(p) for p in parts[1:]], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"record {i}: unparseable value ({exc})") from None
        if not np.isfinite(vals).all():
            raise DataError(f"record {i}: NaN or Inf in payload")
        records.append(
            RegionRecord(
                region_index=region,
                image_feat=vals[:d_e],
                text_feat=vals[d_e : 2 * d_e],
                poi_counts=vals[2 * d_e : 2 * d_e + n_poi],
                labels=vals[2 * d_e + n_poi :],
            )
        )
    return _dataset_from_manifest(manifest, d_e, n_poi, n_tasks, records)


# ---------------------------------------------------------------------------
# synthetic generator


def _poisson(rng: Rng, lam: np.ndarray) -> np.ndarray:
    """Knuth's product-of-uniforms sampler, vectorized over lam."""
    flat = np.asarray(lam, dtype=np.float64).ravel()
    limit = np.exp(-flat)
    n = flat.size
    k = np.zeros(n, dtype=np.int64)
    p = np.ones(n)
    active = np.ones(n, dtype=bool)
    while active.any():
        u = rng.uniform(size=n)  # fixed-width draws keep the stream stable
        p = np.where(active, p * u, p)
        k = np.where(active, k + 1, k)
        active &= p > limit
    return (k - 1).reshape(np.asarray(lam).shape)


def _unit_rows(rng: Rng, shape) -> np.ndarray:
    m = rng.normal(size=shape)
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


def gen_synthetic(
    n_regions: int,
    d_e: int = 16,
    poi_categories: int = 15,
    n_tasks: int = 3,
    latent_dim: int = 8,
    noise_std: float = 0.3,
    seed: int = 0,
    task_names=None,
    name: str = "synthetic",
) -> Dataset:
    """Latent-factor dataset: every modality and every target is a view of a
    shared per-region latent vector, so tasks are correlated by construction.

    With noise_std=0 each target is an exact affine function of the latent
    vector.  Values are rounded to float32 so binary round trips are exact.
    """
    if min(n_regions, d_e, poi_categories, n_tasks, latent_dim) < 1:
        raise ValueError("all synthetic dataset dimensions must be >= 1")
    if task_names is None:
        task_names = (
            list(DEFAULT_TASK_NAMES)
            if n_tasks == len(DEFAULT_TASK_NAMES)
            else [f"task_{i}" for i in range(n_tasks)]
        )
    if len(task_names) != n_tasks:
        raise ValueError("task_names length must equal n_tasks")

    rng = Rng(seed)
    mix_rng = rng.child()
    region_rng = rng.child()

    a_img = _unit_rows(mix_rng, (d_e, latent_dim))
    a_txt = _unit_rows(mix_rng, (d_e, latent_dim))
    b_poi = _unit_rows(mix_rng, (poi_categories, latent_dim))
    shared_dir = _unit_rows(mix_rng, (latent_dim,))
    task_dirs = _unit_rows(mix_rng, (n_tasks, latent_dim))
    bend_dir = _unit_rows(mix_rng, (latent_dim,))

    h = region_rng.normal(size=(n_regions, latent_dim))
    img = h @ a_img.T + noise_std * region_rng.normal(size=(n_regions, d_e))
    txt = h @ a_txt.T + noise_std * region_rng.normal(size=(n_regions, d_e))
    rates = np.clip(5.0 * np.exp(0.5 * (h @ b_poi.T)), 0.0, 50.0)
    counts = _poisson(region_rng, rates).astype(np.float64)

    weights = shared_dir[None, :] + 0.5 * task_dirs  # (T, L): mostly shared signal
    clean = h @ weights.T
    bend = 0.5 * np.tanh(h @ bend_dir)
    eps = region_rng.normal(size=(n_regions, n_tasks))
    labels = clean + noise_std * (bend[:, None] + eps)

    def f32(a):
        return a.astype(np.float32).astype(np.float64)

    records = [
        RegionRecord(
            region_index=i,
            image_feat=f32(img[i]),
            text_feat=f32(txt[i]),
            poi_counts=counts[i],
            labels=f32(labels[i]),
        )
        for i in range(n_regions)
    ]
    return Dataset(
        name=name,
        d_e=d_e,
        poi_categories=poi_categories,
        task_names=list(task_names),
        records=records,
        transform_spec=["none"] * n_tasks,  # targets are signed
    ).validate()
