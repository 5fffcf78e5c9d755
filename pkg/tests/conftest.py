"""Shared mesh generators and numerical oracles for the test suite."""

import numpy as np
import pytest

from meshseg.mesh_io import LabelVec, Mesh

# ---------------------------------------------------------------------------
# mesh generators


def tetrahedron() -> Mesh:
    return Mesh(
        vertices=[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]],
        faces=[[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
    )


def icosahedron() -> Mesh:
    phi = (1 + np.sqrt(5)) / 2
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    return Mesh(vertices=verts, faces=faces)


def icosphere(subdivisions: int = 1) -> Mesh:
    """Subdivided icosahedron projected onto the unit sphere.

    Vertex counts: 12, 42, 162, 642 for subdivisions 0..3.
    """
    mesh = icosahedron()
    verts = [v for v in mesh.vertices]
    faces = [list(f) for f in mesh.faces]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    return Mesh(vertices=np.array(verts), faces=faces)


def random_hull_mesh(rng: np.random.Generator, n_points: int) -> Mesh:
    """Closed triangulated surface from the convex hull of random points."""
    from scipy.spatial import ConvexHull

    points = rng.normal(size=(n_points, 3))
    hull = ConvexHull(points)
    used = np.unique(hull.simplices)
    remap = {old: new for new, old in enumerate(used)}
    faces = np.vectorize(remap.get)(hull.simplices)
    return Mesh(vertices=points[used], faces=faces)


def hemisphere_labeled_sphere(subdivisions=2, jitter=0.0, seed=0):
    """Sphere with 2-class labels split at the equator of face centroids."""
    mesh = icosphere(subdivisions)
    if jitter:
        rng = np.random.default_rng(seed)
        verts = mesh.vertices + rng.normal(scale=jitter, size=mesh.vertices.shape)
        mesh = Mesh(vertices=verts, faces=mesh.faces)
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    labels = (centroids[:, 2] >= 0).astype(np.int64)
    return mesh, LabelVec(labels=labels, num_classes=2)


def shared_edge_count(mesh: Mesh) -> dict:
    """Map edge -> number of incident faces, by enumeration."""
    counts = {}
    for a, b, c in mesh.faces:
        for u, v in ((a, b), (b, c), (a, c)):
            key = (min(u, v), max(u, v))
            counts[key] = counts.get(key, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# numerical oracles


def jacobi_eigh(matrix: np.ndarray, sweeps: int = 100):
    """Cyclic Jacobi eigensolver for symmetric matrices.

    Independent of numpy.linalg.eigh; used as the brute-force oracle for
    the spectral module. Returns ascending eigenvalues and the matching
    orthonormal eigenvector columns.
    """
    a = np.array(matrix, dtype=np.float64)
    n = len(a)
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt((np.tril(a, -1) ** 2).sum())
        if off < 1e-13:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-16:
                    continue
                theta = (a[q, q] - a[p, p]) / (2 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1))
                if theta == 0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                rot_p = c * v[:, p] - s * v[:, q]
                rot_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = rot_p, rot_q
    values = np.diag(a).copy()
    order = np.argsort(values, kind="stable")
    return values[order], v[:, order]


def ward_oracle(points, adj_pairs, num_clusters):
    """Exhaustive-recompute Ward merge sequence with the same tie rule.

    Every step recomputes all pairwise merge costs from the raw member
    points. Returns the list of merged member tuples.
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    edges = {(int(i), int(j)) for i, j in adj_pairs}
    clusters = [frozenset([i]) for i in range(n)]
    merges = []

    def connected(ca, cb):
        return any(
            ((i, j) in edges or (j, i) in edges) for i in ca for j in cb
        )

    def delta(ca, cb):
        mu_a = points[sorted(ca)].mean(axis=0)
        mu_b = points[sorted(cb)].mean(axis=0)
        d = mu_a - mu_b
        return len(ca) * len(cb) / (len(ca) + len(cb)) * float(d @ d)

    while len(clusters) > num_clusters:
        candidates = [
            (a, b)
            for ai, a in enumerate(clusters)
            for b in clusters[ai + 1 :]
            if connected(a, b)
        ]
        if not candidates:
            candidates = [
                (a, b)
                for ai, a in enumerate(clusters)
                for b in clusters[ai + 1 :]
            ]
        best = min(
            candidates,
            key=lambda pair: (
                delta(*pair),
                tuple(sorted((min(pair[0]), min(pair[1])))),
            ),
        )
        a, b = best
        merges.append((tuple(sorted(a)), tuple(sorted(b))))
        clusters = [c for c in clusters if c not in (a, b)] + [a | b]
    return merges


def finite_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of an array."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        step = h * max(1.0, abs(orig))
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return grad


# ---------------------------------------------------------------------------
# small network fixtures


def small_sample(eigen_count=4, target_faces=None, lam=4.0, subdivisions=0):
    """Labeled 20-face sphere sample with a tiny feature width."""
    from meshseg.preprocess import PreprocessConfig, build_sample

    mesh, labels = hemisphere_labeled_sphere(subdivisions=subdivisions)
    cfg = PreprocessConfig(
        target_faces=target_faces or mesh.num_faces,
        eigen_count=eigen_count,
        clustering_lambda=lam,
        simplify=False,
    )
    return build_sample(mesh, labels, cfg)


def small_model_config(**overrides):
    from meshseg.model import ModelConfig

    base = dict(
        num_classes=2,
        eigen_count=4,
        d_t=16,
        d_p=16,
        num_layers=2,
        num_heads=2,
        ff_multiplier=2,
        max_clusters=8,
        dropout=0.1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def permute_sample(sample, perm):
    """Apply a joint face permutation to every per-face field of a sample."""
    from dataclasses import replace

    from meshseg.spectral import AdjacencyMatrix

    perm = np.asarray(perm)
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(len(perm))
    old_pairs = sample.adjacency.pairs
    if old_pairs.size:
        mapped = inverse[old_pairs]
        pairs = np.sort(mapped, axis=1)
    else:
        pairs = old_pairs
    return replace(
        sample,
        features=sample.features[perm],
        adjacency=AdjacencyMatrix(n=sample.n_total, pairs=pairs),
        cluster_ids=sample.cluster_ids[perm],
        labels=sample.labels[perm],
        areas=sample.areas[perm],
        real_mask=sample.real_mask[perm],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
