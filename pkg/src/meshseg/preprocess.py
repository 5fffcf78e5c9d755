"""From raw labeled mesh to a fixed-size, standardized, padded Sample.

Pipeline: merge duplicate vertices, QEM simplification (with majority
label transfer), coordinate standardization, normals, spectral features,
connectivity-constrained clustering, padding. Padding faces are isolated
in the dual graph, live in their own dedicated cluster, carry zero area
and the ignore label.
"""

from __future__ import annotations

import io
import json
import logging
import zipfile
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from meshseg import clustering, spectral
from meshseg.errors import DegenerateGeometryError
from meshseg.mesh_io import LabelVec, Mesh, merge_duplicate_vertices
from meshseg.simplify import simplify_qem
from meshseg.spectral import AdjacencyMatrix

logger = logging.getLogger(__name__)

__all__ = [
    "PreprocessConfig",
    "Sample",
    "PAD_LABEL",
    "COORD_COLS",
    "NORMAL_COLS",
    "SPECTRAL_COLS",
    "compute_normals",
    "triangle_areas",
    "standardize_coords",
    "pad_sample",
    "build_sample",
    "save_sample",
    "load_sample",
]

#: Sentinel label for padding faces; ignored by loss and metrics.
PAD_LABEL = -1

#: Column blocks of the per-triangle feature matrix.
COORD_COLS = slice(0, 9)
NORMAL_COLS = slice(9, 12)
SPECTRAL_COLS = slice(12, None)

SAMPLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class PreprocessConfig:
    """Knobs of the preprocessing pipeline (mirrored by CLI flags)."""

    target_vertices: int = 1200
    target_faces: int = 2412
    eigen_count: int = 16
    clustering_lambda: float = 8.0
    merge_eps: float = 1e-8
    simplify: bool = True
    cluster_on_features: bool = False


@dataclass(frozen=True)
class Sample:
    """A preprocessed mesh ready for the network.

    ``cluster_ids`` uses ids 0..num_clusters-1 for real clusters and the
    dedicated id ``num_clusters`` for padding faces (present only when the
    sample is padded).
    """

    features: np.ndarray  # (n_total, 12 + E) float64
    adjacency: AdjacencyMatrix  # over n_total nodes; padding isolated
    cluster_ids: np.ndarray  # (n_total,) int64
    num_clusters: int  # real clusters, excluding the padding cluster
    labels: np.ndarray  # (n_total,) int64, PAD_LABEL on padding
    areas: np.ndarray  # (n_total,) float64, 0 on padding
    real_mask: np.ndarray  # (n_total,) bool
    num_classes: int
    eigen_count: int
    config: dict | None = field(default=None, compare=False)

    @property
    def n_total(self) -> int:
        return len(self.features)

    @property
    def n_real(self) -> int:
        return int(self.real_mask.sum())

    @property
    def has_padding(self) -> bool:
        return bool((~self.real_mask).any())

    @property
    def area_weights(self) -> np.ndarray:
        total = self.areas.sum()
        if total <= 0:
            raise DegenerateGeometryError("total face area is zero")
        return self.areas / total

    def cluster_one_hot(self) -> np.ndarray:
        """One-hot cluster matrix; gains one padding column when padded."""
        width = self.num_clusters + (1 if self.has_padding else 0)
        j = np.zeros((self.n_total, width), dtype=np.float64)
        j[np.arange(self.n_total), self.cluster_ids] = 1.0
        return j

    def co_membership(self) -> np.ndarray:
        ids = self.cluster_ids
        return (ids[:, np.newaxis] == ids[np.newaxis, :]).astype(np.float64)

    def validate(self):
        n = self.n_total
        assert self.features.shape[0] == n
        assert self.features.shape[1] >= 12
        for arr in (self.cluster_ids, self.labels, self.areas, self.real_mask):
            assert len(arr) == n
        assert self.adjacency.n == n
        if self.adjacency.pairs.size:
            assert self.real_mask[self.adjacency.pairs].all(), "padding face with edges"
        pad = ~self.real_mask
        assert (self.areas[pad] == 0).all()
        assert (self.labels[pad] == PAD_LABEL).all()
        assert (self.features[pad] == 0).all()
        if pad.any():
            assert (self.cluster_ids[pad] == self.num_clusters).all()
        assert (self.cluster_ids[self.real_mask] < self.num_clusters).all()


def compute_normals(mesh: Mesh) -> np.ndarray:
    """Unit normals from the counter-clockwise winding of each face."""
    v = mesh.vertices
    f = mesh.faces
    raw = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(raw, axis=1)
    bad = np.flatnonzero(norms < 1e-14)
    if bad.size:
        raise DegenerateGeometryError(f"zero-area face {bad[0]}")
    return raw / norms[:, np.newaxis]


def triangle_areas(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices
    f = mesh.faces
    raw = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    return 0.5 * np.linalg.norm(raw, axis=1)


def standardize_coords(mesh: Mesh) -> Mesh:
    """Uniformly scale and translate so the longest bounding-box axis spans
    [-1, 1], centered at the box center. Aspect ratios are preserved."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0:
        raise DegenerateGeometryError("degenerate bounding box: all vertices identical")
    center = 0.5 * (lo + hi)
    return Mesh(vertices=(mesh.vertices - center) * (2.0 / extent), faces=mesh.faces)


def triangle_centroids(mesh: Mesh) -> np.ndarray:
    v = mesh.vertices
    return v[mesh.faces].mean(axis=1)


def pad_sample(sample: Sample, target_faces: int) -> Sample:
    """Append padding faces up to ``target_faces``.

    Padding rows are zero everywhere, isolated in the adjacency, assigned
    to the dedicated padding cluster, and carry the ignore label. Real-face
    data is preserved bit-exactly. ``target_faces == n_total`` is the
    identity.
    """
    n = sample.n_total
    if target_faces < n:
        raise ValueError(f"target_faces {target_faces} < current face count {n}")
    if target_faces == n:
        return sample
    extra = target_faces - n
    features = np.vstack([sample.features, np.zeros((extra, sample.features.shape[1]))])
    cluster_ids = np.concatenate(
        [sample.cluster_ids, np.full(extra, sample.num_clusters, dtype=np.int64)]
    )
    labels = np.concatenate([sample.labels, np.full(extra, PAD_LABEL, dtype=np.int64)])
    areas = np.concatenate([sample.areas, np.zeros(extra)])
    real_mask = np.concatenate([sample.real_mask, np.zeros(extra, dtype=bool)])
    return replace(
        sample,
        features=features,
        adjacency=sample.adjacency.with_n(target_faces),
        cluster_ids=cluster_ids,
        labels=labels,
        areas=areas,
        real_mask=real_mask,
    )


def _transfer_labels(original: Mesh, original_labels: np.ndarray, simplified: Mesh) -> np.ndarray:
    """Majority label per simplified face over the original faces whose
    centroids map nearest to it; ties broken by smallest class index."""
    from scipy.spatial import cKDTree

    src_centroids = triangle_centroids(original)
    dst_centroids = triangle_centroids(simplified)
    tree = cKDTree(dst_centroids)
    _, nearest = tree.query(src_centroids)
    out = np.full(simplified.num_faces, -1, dtype=np.int64)
    buckets: dict[int, list[int]] = {}
    for src, dst in enumerate(nearest):
        buckets.setdefault(int(dst), []).append(int(original_labels[src]))
    for dst, labs in buckets.items():
        counts = np.bincount(labs)
        out[dst] = int(counts.argmax())  # argmax picks the smallest index on ties
    orphans = np.flatnonzero(out < 0)
    if orphans.size:
        back = cKDTree(src_centroids)
        _, src_for = back.query(dst_centroids[orphans])
        out[orphans] = original_labels[np.atleast_1d(src_for)]
    return out


def build_sample(mesh: Mesh, labels: LabelVec | None, cfg: PreprocessConfig) -> Sample:
    """Run the full preprocessing pipeline on one labeled mesh.

    ``labels`` may be None (segmentation of an unlabeled mesh); the label
    vector is then all ``PAD_LABEL`` and num_classes is 0.
    """
    if labels is not None and len(labels) != mesh.num_faces:
        raise ValueError(
            f"label count {len(labels)} != face count {mesh.num_faces}"
        )
    merged, face_mask = merge_duplicate_vertices(mesh, cfg.merge_eps, return_face_mask=True)
    label_arr = labels.labels[face_mask] if labels is not None else None

    if cfg.simplify and merged.num_vertices > cfg.target_vertices:
        simplified, reached = simplify_qem(merged, cfg.target_vertices)
        if not reached:
            logger.warning(
                "simplification stalled at %d vertices (target %d)",
                simplified.num_vertices,
                cfg.target_vertices,
            )
        if label_arr is not None:
            label_arr = _transfer_labels(merged, label_arr, simplified)
    else:
        simplified = merged

    standardized = standardize_coords(simplified)
    normals = compute_normals(standardized)
    areas = triangle_areas(standardized)

    adj = spectral.build_dual_adjacency(standardized)
    lap = spectral.normalized_laplacian(adj)
    spec_feats = spectral.laplacian_positional_features(lap, cfg.eigen_count)

    n = standardized.num_faces
    coords = standardized.vertices[standardized.faces].reshape(n, 9)
    features = np.hstack([coords, normals, spec_feats.features])

    num_clusters = clustering.cluster_count(
        standardized.num_vertices, cfg.clustering_lambda
    )
    num_clusters = min(num_clusters, n)
    cluster_points = features if cfg.cluster_on_features else triangle_centroids(standardized)
    assignment = clustering.ward_constrained(cluster_points, adj, num_clusters)

    if label_arr is None:
        label_arr = np.full(n, PAD_LABEL, dtype=np.int64)
        num_classes = 0
    else:
        num_classes = labels.num_classes

    sample = Sample(
        features=features,
        adjacency=adj,
        cluster_ids=assignment.assignment,
        num_clusters=assignment.num_clusters,
        labels=label_arr,
        areas=areas,
        real_mask=np.ones(n, dtype=bool),
        num_classes=num_classes,
        eigen_count=cfg.eigen_count,
        config=asdict(cfg),
    )
    if cfg.target_faces > n:
        sample = pad_sample(sample, cfg.target_faces)
    elif cfg.target_faces < n:
        raise ValueError(
            f"mesh has {n} faces after preprocessing, above target_faces={cfg.target_faces}"
        )
    return sample


def save_sample(sample: Sample, path) -> None:
    """Write a sample as a zip of named .npy arrays plus a JSON manifest."""
    arrays = {
        "T": sample.features,
        "A": sample.adjacency.pairs,
        "J": sample.cluster_one_hot().astype(np.uint8),
        "labels": sample.labels,
        "areas": sample.areas,
        "mask": sample.real_mask,
    }
    manifest = {
        "format_version": SAMPLE_FORMAT_VERSION,
        "n_total": sample.n_total,
        "num_clusters": sample.num_clusters,
        "num_classes": sample.num_classes,
        "eigen_count": sample.eigen_count,
        "has_padding": sample.has_padding,
        "arrays": {
            name: {"shape": list(a.shape), "dtype": str(a.dtype)} for name, a in arrays.items()
        },
        "config": sample.config,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arr))
            zf.writestr(f"{name}.npy", buf.getvalue())
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_sample(path) -> Sample:
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != SAMPLE_FORMAT_VERSION:
            raise ValueError(
                f"unsupported sample format version {manifest.get('format_version')}"
            )
        arrays = {
            name: np.load(io.BytesIO(zf.read(f"{name}.npy")))
            for name in ("T", "A", "J", "labels", "areas", "mask")
        }
    n_total = manifest["n_total"]
    cluster_ids = arrays["J"].argmax(axis=1).astype(np.int64)
    return Sample(
        features=arrays["T"],
        adjacency=AdjacencyMatrix(n=n_total, pairs=arrays["A"].reshape(-1, 2)),
        cluster_ids=cluster_ids,
        num_clusters=manifest["num_clusters"],
        labels=arrays["labels"],
        areas=arrays["areas"],
        real_mask=arrays["mask"].astype(bool),
        num_classes=manifest["num_classes"],
        eigen_count=manifest["eigen_count"],
        config=manifest.get("config"),
    )
