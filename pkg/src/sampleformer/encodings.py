"""Relative-feature builders and synthetic datasets.

Point clouds get rotation/translation-invariant pairwise channels (squared
Euclidean distances and surface-normal dot products); sequences get a
sinusoid-product relative tensor.  Toy generators produce parametric 3-D
shapes with analytic normals and cued-parity binary sequences, both pure
functions of their spec.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from typing import Literal

import numpy as np

from .numerics import Rng

__all__ = [
    "PointCloud",
    "ToyDatasetSpec",
    "SinusoidRelative",
    "squared_edm",
    "normal_dot_rpe",
    "sinusoid_rpe",
    "random_rotation",
    "gen_toy_shapes",
    "gen_seq_parity",
    "point_cloud_relative",
    "export_dataset",
    "import_dataset",
]


@dataclass
class PointCloud:
    coords: np.ndarray  # (n, 3)
    normals: np.ndarray  # (n, 3), unit rows
    label: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("normals must have unit length")


@dataclass
class ToyDatasetSpec:
    kind: Literal["shapes3d", "seq_parity"]
    n_tokens: int
    n_classes: int
    n_train: int
    n_test: int
    noise: float
    seed: int


def squared_edm(coords: np.ndarray) -> np.ndarray:
    """D[i, j] = squared Euclidean distance between points i and j."""
    coords = np.asarray(coords, dtype=np.float64)
    sq = (coords**2).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * coords @ coords.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def normal_dot_rpe(normals: np.ndarray) -> np.ndarray:
    """N[i, j] = <n_i, n_j>, the pairwise dot products of unit normals."""
    normals = np.asarray(normals, dtype=np.float64)
    return normals @ normals.T


def point_cloud_relative(cloud: PointCloud) -> np.ndarray:
    """Stacked (n, n, 2) rotation-invariant channels: squared EDM, then normal dots."""
    return np.stack([squared_edm(cloud.coords), normal_dot_rpe(cloud.normals)], axis=2)


class SinusoidRelative:
    """Relative encoding for sequences from a sinusoid table.

    S[i, 2j] = sin(i / 10000^(j / d_pe)) and S[i, 2j+1] = cos of the same
    argument.  The pairwise tensor A[i, j, c] = S[i, c] * S[j, c] is exposed
    lazily: ``dense()`` materializes all of it, ``columns(idx)`` only the
    requested key columns.
    """

    def __init__(self, n: int, d_pe: int):
        if d_pe % 2 != 0:
            raise ValueError("d_pe must be even")
        self.n = n
        self.d_pe = d_pe
        i = np.arange(n, dtype=np.float64)[:, None]
        j = np.arange(d_pe // 2, dtype=np.float64)[None, :]
        arg = i / np.power(10000.0, j / d_pe)
        s = np.empty((n, d_pe))
        s[:, 0::2] = np.sin(arg)
        s[:, 1::2] = np.cos(arg)
        self.table = s

    @property
    def shape(self):
        return (self.n, self.n, self.d_pe)

    def dense(self) -> np.ndarray:
        return self.table[:, None, :] * self.table[None, :, :]

    def columns(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise IndexError("sinusoid column index out of range")
        return self.table[:, None, :] * self.table[idx][None, :, :]


def sinusoid_rpe(n: int, d_pe: int) -> SinusoidRelative:
    """Builder for the sinusoid-product relative tensor."""
    return SinusoidRelative(n, d_pe)


def random_rotation(rng: Rng) -> np.ndarray:
    """Uniformly distributed proper rotation via a normalized quaternion."""
    q = rng.normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ------------------------------------------------------------ toy shape generator

_SHAPE_BUILDERS = {}


def _shape(name):
    def wrap(fn):
        _SHAPE_BUILDERS[name] = fn
        return fn

    return wrap


@_shape("sphere")
def _sphere(rng: Rng, n: int):
    v = rng.normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v.copy(), v.copy()


@_shape("cube")
def _cube(rng: Rng, n: int):
    face = rng.integers(0, 6, size=n)
    uv = rng.gen.uniform(-1.0, 1.0, size=(n, 2))
    coords = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    for i in range(n):
        axis, sign = divmod(int(face[i]), 2)
        sign = 1.0 if sign == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        coords[i, axis] = sign
        coords[i, others[0]] = uv[i, 0]
        coords[i, others[1]] = uv[i, 1]
        normals[i, axis] = sign
    return coords, normals


@_shape("cylinder")
def _cylinder(rng: Rng, n: int):
    theta = rng.gen.uniform(0.0, 2 * np.pi, size=n)
    z = rng.gen.uniform(-1.0, 1.0, size=n)
    coords = np.stack([np.cos(theta), np.sin(theta), z], axis=1)
    normals = np.stack([np.cos(theta), np.sin(theta), np.zeros(n)], axis=1)
    return coords, normals


@_shape("torus")
def _torus(rng: Rng, n: int, big=1.0, small=0.4):
    u = rng.gen.uniform(0.0, 2 * np.pi, size=n)
    v = rng.gen.uniform(0.0, 2 * np.pi, size=n)
    cx = (big + small * np.cos(v)) * np.cos(u)
    cy = (big + small * np.cos(v)) * np.sin(u)
    cz = small * np.sin(v)
    coords = np.stack([cx, cy, cz], axis=1)
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return coords, normals


SHAPE_NAMES = ("sphere", "cube", "cylinder", "torus")


def _normalize_cloud(coords: np.ndarray) -> np.ndarray:
    """Center on the centroid, scale by the farthest point's distance from it."""
    coords = coords - coords.mean(axis=0, keepdims=True)
    radius = np.linalg.norm(coords, axis=1).max()
    if radius > 0:
        coords = coords / radius
    return coords


def gen_toy_shapes(spec: ToyDatasetSpec) -> tuple[list[PointCloud], list[PointCloud]]:
    """Deterministic parametric shape clouds with analytic normals.

    Returns (train, test) lists.  Coordinates get Gaussian jitter at the
    spec's noise level, then centering and max-radius normalization; normals
    are renormalized after jitter.
    """
    if spec.kind != "shapes3d":
        raise ValueError("spec.kind must be shapes3d")
    if not (1 <= spec.n_classes <= len(SHAPE_NAMES)):
        raise ValueError(f"n_classes must be between 1 and {len(SHAPE_NAMES)}")
    rng = Rng(spec.seed)

    def build(count, stream):
        clouds = []
        for item in range(count):
            label = item % spec.n_classes
            r = stream.split(item)
            coords, normals = _SHAPE_BUILDERS[SHAPE_NAMES[label]](r, spec.n_tokens)
            if spec.noise > 0:
                coords = coords + r.normal(coords.shape) * spec.noise
                normals = normals + r.normal(normals.shape) * spec.noise
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
            coords = _normalize_cloud(coords)
            clouds.append(PointCloud(coords=coords, normals=normals, label=label))
        return clouds

    return build(spec.n_train, rng.split("train")), build(spec.n_test, rng.split("test"))


def gen_seq_parity(spec: ToyDatasetSpec) -> tuple[list[tuple[np.ndarray, int]], list[tuple[np.ndarray, int]]]:
    """Cued-parity sequences: label = parity of the one-bits at cued positions.

    Tokens are 2 * cued + bit, so the vocabulary is {0, 1, 2, 3}; cues are
    sparse and far apart, forcing a long-range dependence.
    """
    if spec.kind != "seq_parity":
        raise ValueError("spec.kind must be seq_parity")
    rng = Rng(spec.seed)
    n_cues = max(2, spec.n_tokens // 16)

    def build(count, stream):
        items = []
        for item in range(count):
            r = stream.split(item)
            bits = r.integers(0, 2, size=spec.n_tokens).astype(np.int64)
            cue_pos = np.sort(r.gen.choice(spec.n_tokens, size=n_cues, replace=False))
            cued = np.zeros(spec.n_tokens, dtype=np.int64)
            cued[cue_pos] = 1
            tokens = 2 * cued + bits
            label = int(bits[cue_pos].sum() % 2)
            items.append((tokens, label))
        return items

    return build(spec.n_train, rng.split("train")), build(spec.n_test, rng.split("test"))


# ------------------------------------------------------------ replayable export


def export_dataset(path, spec: ToyDatasetSpec) -> None:
    """Write a dataset as raw tensors plus a JSON manifest (spec echo + checksums)."""
    manifest = {"format": "sampleformer-dataset-v1", "spec": asdict(spec), "arrays": []}
    blobs = []
    offset = 0

    def push(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        manifest["arrays"].append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
            }
        )
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    if spec.kind == "shapes3d":
        train, test = gen_toy_shapes(spec)
        for split, clouds in (("train", train), ("test", test)):
            for i, cloud in enumerate(clouds):
                push(f"{split}/{i}/coords", cloud.coords)
                push(f"{split}/{i}/normals", cloud.normals)
                push(f"{split}/{i}/label", np.array([cloud.label], dtype=np.float64))
    else:
        train, test = gen_seq_parity(spec)
        for split, items in (("train", train), ("test", test)):
            for i, (tokens, label) in enumerate(items):
                push(f"{split}/{i}/tokens", tokens.astype(np.float64))
                push(f"{split}/{i}/label", np.array([label], dtype=np.float64))

    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def import_dataset(path) -> tuple[ToyDatasetSpec, dict[str, np.ndarray]]:
    """Read back an exported dataset, verifying every checksum."""
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    if manifest.get("format") != "sampleformer-dataset-v1":
        raise ValueError("unrecognized dataset file")
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=entry["offset"]).reshape(shape)
        if hashlib.sha256(arr.tobytes()).hexdigest() != entry["sha256"]:
            raise ValueError(f"checksum mismatch for {entry['name']}")
        arrays[entry["name"]] = arr.copy()
    return ToyDatasetSpec(**manifest["spec"]), arrays
