"""Mixed-feature synthetic data with exact ground truth, plus IDX/CSV ingestion.

Each input is M patches.  Every patch comes from a feature name z drawn from the
vocabulary; its representation is ``mu_z + scale_z * u`` with ``u`` uniform on
[-1, 1]^b, then pushed through a randomly chosen affine transform.  The label
distribution of the input is the renormalized elementwise geometric mean of the
per-feature label distributions.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import substream

SPLITS = ("train", "holdout", "temperature-holdout", "test")


class ParseError(ValueError):
    pass


class DegenerateDistributionError(ValueError):
    pass


class GroundTruthUnavailable(LookupError):
    pass


@dataclass
class FeatureSpec:
    name: str
    label_distribution: np.ndarray
    representation_mean: np.ndarray
    representation_scale: float

    def __post_init__(self):
        self.label_distribution = np.asarray(self.label_distribution, dtype=np.float64)
        self.representation_mean = np.asarray(self.representation_mean, dtype=np.float64)
        p = self.label_distribution
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"feature {self.name!r}: label distribution is not on the simplex")
        if self.representation_scale < 0:
            raise ValueError(f"feature {self.name!r}: representation_scale must be >= 0")


@dataclass
class FeatureVocabulary:
    """The generative world.

    ``cooccurrence`` (optional, |Z| x |Z| row-stochastic) switches sampling to
    the anchored mode: the first feature of an input comes from ``sampling_weights``
    and the remaining M-1 from the anchor's row.
    """
    n_classes: int
    patch_dim: int
    features: list[FeatureSpec]
    sampling_weights: np.ndarray
    cooccurrence: np.ndarray | None = None

    def __post_init__(self):
        self.sampling_weights = np.asarray(self.sampling_weights, dtype=np.float64)
        if not self.features:
            raise ValueError("vocabulary needs at least one feature")
        if self.sampling_weights.shape != (len(self.features),):
            raise ValueError("sampling_weights must have one entry per feature")
        if np.any(self.sampling_weights < 0) or abs(self.sampling_weights.sum() - 1) > 1e-12:
            raise ValueError("sampling_weights must be nonnegative and sum to 1")
        for f in self.features:
            if f.label_distribution.shape != (self.n_classes,):
                raise ValueError(f"feature {f.name!r}: expected {self.n_classes} classes")
            if f.representation_mean.shape != (self.patch_dim,):
                raise ValueError(f"feature {f.name!r}: expected patch dim {self.patch_dim}")
        if self.cooccurrence is not None:
            c = np.asarray(self.cooccurrence, dtype=np.float64)
            if c.shape != (self.size, self.size) or np.any(c < 0) \
                    or not np.allclose(c.sum(axis=1), 1.0, atol=1e-12):
                raise ValueError("cooccurrence must be a row-stochastic |Z| x |Z| matrix")
            self.cooccurrence = c

    @property
    def size(self) -> int:
        return len(self.features)

    @property
    def label_matrix(self) -> np.ndarray:
        return np.stack([f.label_distribution for f in self.features])

    @property
    def means(self) -> np.ndarray:
        return np.stack([f.representation_mean for f in self.features])

    @property
    def scales(self) -> np.ndarray:
        return np.array([f.representation_scale for f in self.features])

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "patch_dim": self.patch_dim,
            "sampling_weights": self.sampling_weights.tolist(),
            "cooccurrence": None if self.cooccurrence is None else self.cooccurrence.tolist(),
            "features": [{"name": f.name,
                          "label_distribution": f.label_distribution.tolist(),
                          "representation_mean": f.representation_mean.tolist(),
                          "representation_scale": f.representation_scale}
                         for f in self.features],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVocabulary":
        feats = [FeatureSpec(f["name"], f["label_distribution"], f["representation_mean"],
                             float(f["representation_scale"])) for f in d["features"]]
        return cls(int(d["n_classes"]), int(d["patch_dim"]), feats,
                   np.asarray(d["sampling_weights"]), d.get("cooccurrence"))


def random_vocabulary(n_features: int, n_classes: int, patch_dim: int, *, seed: int,
                      concentration: float = 1.0, mean_spread: float = 1.0,
                      representation_scale: float = 0.1) -> FeatureVocabulary:
    """I.i.d.-mode vocabulary: Dirichlet label distributions, Gaussian centres, uniform p_Z."""
    rng = substream(seed, "vocab")
    labels = rng.dirichlet(np.full(n_classes, concentration), size=n_features)
    # Dirichlet draws can land a hair off the simplex in float64
    labels = labels / labels.sum(axis=1, keepdims=True)
    means = rng.normal(0.0, mean_spread, size=(n_features, patch_dim))
    feats = [FeatureSpec(f"z{i}", labels[i], means[i], representation_scale)
             for i in range(n_features)]
    return FeatureVocabulary(n_classes, patch_dim, feats, np.full(n_features, 1.0 / n_features))


def _kl_matrix(p: np.ndarray) -> np.ndarray:
    logp = np.log(p)
    return (p * logp).sum(axis=1)[:, None] - p @ logp.T


def manifold_vocabulary(n_features: int, n_classes: int, patch_dim: int, *, seed: int,
                        sharpness: float = 2.0, neighbors: int = 2,
                        mean_spread: float = 1.0,
                        representation_scale: float = 0.1) -> FeatureVocabulary:
    """Anchored-mode vocabulary whose co-occurrence decays with label divergence.

    Features sit evenly on a circle of label distributions,
    ``p(k|z) ~ exp(sharpness * cos(theta_z - 2 pi k / K))``.  Co-occurrence
    weights are ``exp(-KL(p_z || p_z') / h_z)`` with ``h_z`` the divergence to
    the ``neighbors``-th nearest feature, so each feature mostly co-occurs with a
    fixed number of label-similar neighbours and the neighbourhood tightens as the
    vocabulary grows.
    """
    rng = substream(seed, "vocab")
    theta = 2 * np.pi * np.arange(n_features) / n_features
    logits = sharpness * np.cos(theta[:, None] - 2 * np.pi * np.arange(n_classes)[None, :] / n_classes)
    labels = np.exp(logits - logits.max(axis=1, keepdims=True))
    labels /= labels.sum(axis=1, keepdims=True)
    kl = _kl_matrix(labels)
    kl = np.maximum(kl, 0.0)
    if n_features > 1:
        r = min(neighbors, n_features - 1)
        bandwidth = np.sort(kl, axis=1)[:, r]
        bandwidth = np.where(bandwidth > 0, bandwidth, 1.0)
        weights = np.exp(-kl / bandwidth[:, None])
    else:
        weights = np.ones((1, 1))
    weights /= weights.sum(axis=1, keepdims=True)
    means = rng.normal(0.0, mean_spread, size=(n_features, patch_dim))
    feats = [FeatureSpec(f"z{i}", labels[i], means[i], representation_scale)
             for i in range(n_features)]
    return FeatureVocabulary(n_classes, patch_dim, feats, np.full(n_features, 1.0 / n_features),
                             cooccurrence=weights)


@dataclass(frozen=True)
class AffineTransform:
    """v -> scale * v[perm] + shift."""
    scale: float
    shift: np.ndarray
    perm: np.ndarray

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.scale * v[..., self.perm] + self.shift

    def displacement_bound(self, centres: np.ndarray, radii: np.ndarray) -> float:
        """sup ||gamma(v) - v||_2 over the boxes ``centre +- radius``.

        The displacement norm is convex in v, so the sup sits on a box vertex;
        vertices are enumerated up to 12 dims, otherwise a triangle bound is used.
        """
        b = centres.shape[1]
        a = self.scale * np.eye(b)[self.perm] - np.eye(b)
        if b <= 12:
            corners = np.array(list(product((-1.0, 1.0), repeat=b)))
            best = 0.0
            for c, r in zip(centres, radii):
                pts = c + r * corners
                best = max(best, float(np.linalg.norm(pts @ a.T + self.shift, axis=1).max()))
            return best
        op = np.linalg.norm(a, 2)
        far = np.linalg.norm(centres, axis=1) + radii * np.sqrt(b)
        return float(op * far.max() + np.linalg.norm(self.shift))


@dataclass
class TransformSet:
    transforms: list[AffineTransform]

    def __post_init__(self):
        if not self.transforms:
            raise ValueError("TransformSet needs at least one transform")

    @classmethod
    def identity(cls, patch_dim: int) -> "TransformSet":
        return cls([AffineTransform(1.0, np.zeros(patch_dim), np.arange(patch_dim))])

    @classmethod
    def random(cls, patch_dim: int, count: int, magnitude: float, *, seed: int,
               permute: bool = False) -> "TransformSet":
        """``count`` maps with scale in 1 +- magnitude/2 and shift of norm ~ magnitude."""
        if magnitude == 0 and not permute:
            return cls.identity(patch_dim)
        rng = substream(seed, "transforms-def")
        out = []
        for _ in range(count):
            scale = 1.0 + magnitude * rng.uniform(-0.5, 0.5)
            shift = rng.normal(0.0, magnitude / np.sqrt(patch_dim), size=patch_dim)
            perm = rng.permutation(patch_dim) if permute else np.arange(patch_dim)
            out.append(AffineTransform(float(scale), shift, perm))
        return cls(out)

    @property
    def is_identity(self) -> bool:
        return all(t.scale == 1.0 and not np.any(t.shift) and np.array_equal(t.perm, np.arange(len(t.perm)))
                   for t in self.transforms)

    def magnitude_bound(self, vocab: FeatureVocabulary) -> float:
        return max(t.displacement_bound(vocab.means, vocab.scales) for t in self.transforms)

    def apply_random(self, patches: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Apply an independently drawn transform to every patch of ``patches`` (..., b)."""
        if len(self.transforms) == 1 and self.is_identity:
            return patches.copy()
        flat = patches.reshape(-1, patches.shape[-1])
        choice = rng.integers(len(self.transforms), size=flat.shape[0])
        out = np.empty_like(flat)
        for j, t in enumerate(self.transforms):
            sel = choice == j
            if sel.any():
                out[sel] = t.apply(flat[sel])
        return out.reshape(patches.shape)

    def to_dict(self) -> list:
        return [{"scale": t.scale, "shift": t.shift.tolist(), "perm": t.perm.tolist()}
                for t in self.transforms]

    @classmethod
    def from_dict(cls, d: list) -> "TransformSet":
        return cls([AffineTransform(float(t["scale"]), np.asarray(t["shift"], dtype=np.float64),
                                    np.asarray(t["perm"], dtype=np.int64)) for t in d])


@dataclass
class MixedFeatureExample:
    patches: np.ndarray
    feature_names: np.ndarray | None
    label: int
    true_distribution: np.ndarray | None


@dataclass
class MixedFeatureDataset:
    """Array-of-structs view over N examples with shared M, b, K.

    ``base_patches`` holds representations before any transform so that
    training loops can redraw transforms every epoch.
    """
    patches: np.ndarray                    # (N, M, b)
    labels: np.ndarray                     # (N,)
    n_classes: int
    feature_names: np.ndarray | None = None       # (N, M) vocabulary indices
    true_distribution: np.ndarray | None = None   # (N, K)
    base_patches: np.ndarray | None = None
    vocabulary: FeatureVocabulary | None = None
    transforms: TransformSet | None = None
    seed: int | None = None
    split: str = "train"
    index_offset: int = 0

    def __post_init__(self):
        if self.patches.ndim != 3:
            raise ValueError("patches must have shape (N, M, b)")
        n = self.patches.shape[0]
        if self.labels.shape != (n,):
            raise ValueError("labels must have shape (N,)")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split tag {self.split!r}")

    def __len__(self) -> int:
        return self.patches.shape[0]

    def __getitem__(self, i: int) -> MixedFeatureExample:
        return MixedFeatureExample(
            self.patches[i],
            None if self.feature_names is None else self.feature_names[i],
            int(self.labels[i]),
            None if self.true_distribution is None else self.true_distribution[i])

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]

    @property
    def patch_dim(self) -> int:
        return self.patches.shape[2]

    @property
    def has_ground_truth(self) -> bool:
        return self.feature_names is not None and self.true_distribution is not None

    def subset(self, idx, split: str | None = None) -> "MixedFeatureDataset":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return MixedFeatureDataset(self.patches[idx], self.labels[idx], self.n_classes,
                                   pick(self.feature_names), pick(self.true_distribution),
                                   pick(self.base_patches), self.vocabulary, self.transforms,
                                   self.seed, split or self.split, self.index_offset)


def true_label_distribution(vocab: FeatureVocabulary, feature_names: Sequence[int]) -> np.ndarray:
    """Renormalized elementwise geometric mean of the listed features' label distributions."""
    names = np.asarray(feature_names, dtype=np.int64)
    if names.size == 0:
        raise ValueError("need at least one feature name")
    return _geometric_rows(vocab.label_matrix, names[None, :])[0]


def _geometric_rows(label_matrix: np.ndarray, names: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logp = np.log(label_matrix)
    g = np.exp(logp[names].mean(axis=1))      # zero wherever any factor is zero
    total = g.sum(axis=1, keepdims=True)
    if np.any(total == 0):
        raise DegenerateDistributionError("degenerate geometric mean")
    return g / total


def sample_feature_names(vocab: FeatureVocabulary, n: int, m: int,
                         rng: np.random.Generator) -> np.ndarray:
    if vocab.cooccurrence is None:
        return rng.choice(vocab.size, size=(n, m), p=vocab.sampling_weights)
    anchors = rng.choice(vocab.size, size=n, p=vocab.sampling_weights)
    names = np.empty((n, m), dtype=np.int64)
    names[:, 0] = anchors
    if m > 1:
        cdf = np.cumsum(vocab.cooccurrence, axis=1)
        cdf[:, -1] = 1.0
        u = rng.random((n, m - 1))
        rows = cdf[anchors]
        names[:, 1:] = np.minimum((u[:, :, None] > rows[:, None, :]).sum(axis=2), vocab.size - 1)
    return names


def sample_labels(true_dist: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(true_dist, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(true_dist.shape[0])
    return (u[:, None] > cdf).sum(axis=1).astype(np.int64)


def sample_dataset(vocab: FeatureVocabulary, n: int, m: int, transforms: TransformSet | None = None,
                   seed: int = 0, split: str = "train") -> MixedFeatureDataset:
    """Draw ``n`` inputs of ``m`` patches; fully determined by (vocab, n, m, transforms, seed, split)."""
    if n < 1 or m < 1:
        raise ValueError("N and M must be positive")
    transforms = transforms or TransformSet.identity(vocab.patch_dim)
    tag = f"data/{split}"
    rng_names = substream(seed, tag + "/names")
    rng_repr = substream(seed, tag + "/repr")
    rng_tf = substream(seed, tag + "/transforms")
    rng_lab = substream(seed, tag + "/labels")

    names = sample_feature_names(vocab, n, m, rng_names)
    return _realize(vocab, names, transforms, rng_repr, rng_tf, rng_lab, seed, split)


def dataset_from_names(vocab: FeatureVocabulary, feature_names, transforms: TransformSet | None = None,
                       seed: int = 0, split: str = "train") -> MixedFeatureDataset:
    """Build a dataset around a fixed (N, M) array of feature names."""
    names = np.asarray(feature_names, dtype=np.int64)
    if names.ndim != 2 or names.size == 0:
        raise ValueError("feature_names must be a nonempty (N, M) array")
    if names.min() < 0 or names.max() >= vocab.size:
        raise ValueError("feature name outside the vocabulary")
    transforms = transforms or TransformSet.identity(vocab.patch_dim)
    tag = f"data/{split}"
    return _realize(vocab, names, transforms, substream(seed, tag + "/repr"),
                    substream(seed, tag + "/transforms"), substream(seed, tag + "/labels"), seed, split)


def _realize(vocab, names, transforms, rng_repr, rng_tf, rng_lab, seed, split) -> MixedFeatureDataset:
    n, m = names.shape
    u = rng_repr.uniform(-1.0, 1.0, size=(n, m, vocab.patch_dim))
    base = vocab.means[names] + vocab.scales[names][:, :, None] * u
    patches = transforms.apply_random(base, rng_tf)
    p_star = _geometric_rows(vocab.label_matrix, names)
    labels = sample_labels(p_star, rng_lab)
    return MixedFeatureDataset(patches, labels, vocab.n_classes, names, p_star, base,
                               vocab, transforms, seed, split)


def sample_splits(vocab: FeatureVocabulary, sizes: dict[str, int], m: int,
                  transforms: TransformSet | None = None, seed: int = 0) -> dict[str, MixedFeatureDataset]:
    """One dataset per split tag; index ranges are laid end to end in SPLITS order."""
    out, offset = {}, 0
    for split in SPLITS:
        if split not in sizes:
            continue
        ds = sample_dataset(vocab, sizes[split], m, transforms, seed, split)
        ds.index_offset = offset
        offset += len(ds)
        out[split] = ds
    return out


def feature_cooccurrence_stats(data: MixedFeatureDataset) -> tuple[np.ndarray, np.ndarray]:
    """Occurrence counts N_z = |{i : z in Z(i)}| and pair counts |{i : z, z' in Z(i)}|."""
    if data.feature_names is None or data.vocabulary is None:
        raise GroundTruthUnavailable("dataset carries no ground-truth feature names")
    size = data.vocabulary.size
    present = np.zeros((len(data), size), dtype=np.int64)
    for i, row in enumerate(data.feature_names):
        present[i, np.unique(row)] = 1
    return present.sum(axis=0), present.T @ present


# --- external datasets ------------------------------------------------------

_IDX_LABEL_MAGIC = 0x00000801
_IDX_IMAGE_MAGIC = 0x00000803


def _read_idx(path: Path, magic: int) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 4:
        raise ParseError(f"{path}: file too short for an IDX header (byte offset 0)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ParseError(f"{path}: bad magic number 0x{found:08x} at byte offset 0, "
                         f"expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    actual = len(raw) - header
    if actual != expected:
        raise ParseError(f"{path}: payload at byte offset {header} has {actual} bytes, "
                         f"expected {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(Path(path), _IDX_LABEL_MAGIC).astype(np.int64)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(Path(path), _IDX_IMAGE_MAGIC).astype(np.float64) / 255.0


def load_external(path, format: str, *, labels_path=None, n_classes: int | None = None,
                  patch_dim: int | None = None) -> MixedFeatureDataset:  # noqa: A002
    """Ingest an IDX image/label pair or a label-first CSV as M = 1 examples.

    For IDX, ``path`` is the image file and ``labels_path`` the label file.
    Ground truth (feature names, true distributions) is absent.
    """
    path = Path(path)
    if format == "idx":
        if labels_path is None:
            raise ValueError("IDX ingestion needs labels_path")
        images = read_idx_images(path)
        labels = read_idx_labels(labels_path)
        if images.shape[0] != labels.shape[0]:
            raise ParseError(f"{path}: {images.shape[0]} images but {labels.shape[0]} labels")
        x = images.reshape(images.shape[0], -1)
    elif format == "csv":
        labels_list, rows = [], []
        with path.open(newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                try:
                    vals = [float(c) for c in row]
                except ValueError:
                    if lineno == 1:
                        continue  # header
                    raise ParseError(f"{path}: line {lineno}: non-numeric field") from None
                feats = vals[1:]
                if patch_dim is None:
                    patch_dim = len(feats)
                if len(feats) != patch_dim:
                    raise ParseError(f"{path}: line {lineno}: expected {patch_dim} features, "
                                     f"got {len(feats)}")
                if vals[0] != int(vals[0]) or vals[0] < 0:
                    raise ParseError(f"{path}: line {lineno}: label must be a nonnegative integer")
                labels_list.append(int(vals[0]))
                rows.append(feats)
        if not rows:
            raise ParseError(f"{path}: no data rows")
        labels = np.asarray(labels_list, dtype=np.int64)
        x = np.asarray(rows, dtype=np.float64)
    else:
        raise ValueError(f"unknown format {format!r}; expected 'idx' or 'csv'")
    k = int(n_classes) if n_classes is not None else int(labels.max()) + 1
    if labels.max() >= k:
        raise ParseError(f"{path}: label {labels.max()} out of range for K={k}")
    return MixedFeatureDataset(x[:, None, :], labels, k)


def split_external(data: MixedFeatureDataset) -> dict[str, MixedFeatureDataset]:
    """Index mod 10: 0-7 train, 8 holdout, 9 temperature-holdout."""
    r = np.arange(len(data)) % 10
    return {"train": data.subset(np.flatnonzero(r < 8), "train"),
            "holdout": data.subset(np.flatnonzero(r == 8), "holdout"),
            "temperature-holdout": data.subset(np.flatnonzero(r == 9), "temperature-holdout")}


# --- serialization ----------------------------------------------------------

def _write_array(path: Path, arr: np.ndarray, dtype: str) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def save_dataset(data: MixedFeatureDataset, out_dir) -> Path:
    """Directory with manifest.json plus raw little-endian arrays."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"patches": ("<f8", data.patches), "labels": ("<i8", data.labels),
              "feature_names": ("<i8", data.feature_names),
              "true_distribution": ("<f8", data.true_distribution),
              "base_patches": ("<f8", data.base_patches)}
    files = {}
    for key, (dtype, arr) in arrays.items():
        if arr is None:
            continue
        _write_array(out / f"{key}.bin", arr, dtype)
        files[key] = {"file": f"{key}.bin", "dtype": dtype, "shape": list(arr.shape)}
    manifest = {
        "format": "distlab-dataset/1",
        "n_examples": len(data), "n_patches": data.n_patches, "patch_dim": data.patch_dim,
        "n_classes": data.n_classes, "seed": data.seed, "split": data.split,
        "index_offset": data.index_offset, "arrays": files,
        "vocabulary": None if data.vocabulary is None else data.vocabulary.to_dict(),
        "transforms": None if data.transforms is None else data.transforms.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_dataset(in_dir) -> MixedFeatureDataset:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    arrs = {}
    for key, meta in manifest["arrays"].items():
        arrs[key] = np.frombuffer((src / meta["file"]).read_bytes(),
                                  dtype=meta["dtype"]).reshape(meta["shape"]).copy()
    vocab = manifest.get("vocabulary")
    tfs = manifest.get("transforms")
    return MixedFeatureDataset(
        arrs["patches"], arrs["labels"], int(manifest["n_classes"]),
        arrs.get("feature_names"), arrs.get("true_distribution"), arrs.get("base_patches"),
        None if vocab is None else FeatureVocabulary.from_dict(vocab),
        None if tfs is None else TransformSet.from_dict(tfs),
        manifest.get("seed"), manifest.get("split", "train"), int(manifest.get("index_offset", 0)))
