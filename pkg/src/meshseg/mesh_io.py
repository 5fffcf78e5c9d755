"""Parsing and serialization of mesh and label files (ASCII OFF/OBJ/PLY).

All parsers are pure functions over text; binary formats are rejected.
Coordinates are written back at 9 significant digits, which round-trips
float32-precision inputs exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from meshseg.errors import MeshFormatError

__all__ = [
    "Mesh",
    "LabelVec",
    "parse_off",
    "parse_obj",
    "parse_ply",
    "parse_face_labels",
    "write_ply_colored",
    "merge_duplicate_vertices",
]


@dataclass(frozen=True)
class Mesh:
    """Triangular mesh: vertex coordinates plus 0-based face indices.

    Counter-clockwise winding is trusted as given; normals, when present,
    are unit vectors derived from that winding.
    """

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (N, 3) int64
    normals: np.ndarray | None = None  # (N, 3) float64, unit rows

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshFormatError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshFormatError(f"faces must be (N, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshFormatError("face index out of range")
        if f.size and ((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])).any():
            raise MeshFormatError("face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.normals is not None:
            n = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64))
            if n.shape != f.shape:
                raise MeshFormatError(f"normals must match faces, got {n.shape} vs {f.shape}")
            norms = np.linalg.norm(n, axis=1)
            if n.size and np.abs(norms - 1.0).max() > 1e-6:
                raise MeshFormatError("normals are not unit length")
            object.__setattr__(self, "normals", n)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class LabelVec:
    """Per-face class labels, remapped to a dense 0-based range.

    ``raw_values[k]`` is the raw label that was mapped to dense id ``k``
    (first-appearance order), so outputs can be reported in dataset terms.
    """

    labels: np.ndarray  # (N,) int64
    num_classes: int
    raw_values: tuple = field(default_factory=tuple)

    def __post_init__(self):
        lab = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "labels", lab)
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        valid = lab[lab >= 0]
        if valid.size and valid.max() >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)


def _lines(text) -> list[str]:
    if isinstance(text, bytes):
        text = text.decode("ascii")
    if hasattr(text, "read"):
        text = text.read()
    return io.StringIO(text).read().split("\n")


def parse_off(text) -> Mesh:
    """Parse an ASCII OFF file.

    Faces of any declared arity are read, but non-triangles are rejected.
    Blank lines and ``#`` comments are skipped. Errors carry 1-based line
    numbers.
    """
    lines = _lines(text)
    # (line_number, content) for non-empty, non-comment lines
    rows = [
        (i + 1, ln.strip())
        for i, ln in enumerate(lines)
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not rows:
        raise MeshFormatError("empty OFF file")
    pos = 0
    header_line, header = rows[pos]
    if header == "OFF":
        pos += 1
        if pos >= len(rows):
            raise MeshFormatError("missing counts line", line=header_line)
        counts_line, counts_text = rows[pos]
    elif header.startswith("OFF"):
        # counts on the header line ("OFF 8 6 12" variant)
        counts_line, counts_text = header_line, header[3:].strip()
    else:
        raise MeshFormatError("missing OFF header", line=header_line)
    pos += 1
    parts = counts_text.split()
    if len(parts) != 3:
        raise MeshFormatError("counts line must have 3 integers", line=counts_line)
    try:
        n_vertices, n_faces, _n_edges = (int(p) for p in parts)
    except ValueError:
        raise MeshFormatError("counts line must have 3 integers", line=counts_line) from None
    if len(rows) - pos < n_vertices + n_faces:
        raise MeshFormatError(
            f"truncated OFF file: expected {n_vertices} vertices and {n_faces} faces"
        )
    vertices = np.empty((n_vertices, 3), dtype=np.float64)
    for k in range(n_vertices):
        line_no, content = rows[pos + k]
        parts = content.split()
        if len(parts) < 3:
            raise MeshFormatError("vertex line needs 3 coordinates", line=line_no)
        try:
            vertices[k] = [float(p) for p in parts[:3]]
        except ValueError:
            raise MeshFormatError("bad vertex coordinate", line=line_no) from None
    pos += n_vertices
    faces = np.empty((n_faces, 3), dtype=np.int64)
    for k in range(n_faces):
        line_no, content = rows[pos + k]
        parts = content.split()
        try:
            arity = int(parts[0])
            idx = [int(p) for p in parts[1 : 1 + arity]]
        except (ValueError, IndexError):
            raise MeshFormatError("bad face record", line=line_no) from None
        if arity != 3 or len(idx) != 3:
            raise MeshFormatError(f"non-triangular face (arity {arity})", line=line_no)
        for j in idx:
            if j < 0 or j >= n_vertices:
                raise MeshFormatError("index out of range", line=line_no)
        faces[k] = idx
    return Mesh(vertices=vertices, faces=faces)


def parse_obj(text) -> Mesh:
    """Parse a Wavefront OBJ file (``v`` and ``f`` records only).

    Slashed ``v/vt/vn`` face tokens use the vertex index only; negative
    indices are resolved relative to the vertices read so far.
    """
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for line_no, raw in enumerate(_lines(text), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshFormatError("vertex record needs 3 coordinates", line=line_no)
            try:
                vertices.append([float(p) for p in parts[1:4]])
            except ValueError:
                raise MeshFormatError("bad vertex coordinate", line=line_no) from None
        elif tag == "f":
            tokens = parts[1:]
            if len(tokens) != 3:
                raise MeshFormatError(
                    f"non-triangular face ({len(tokens)} vertices)", line=line_no
                )
            idx = []
            for tok in tokens:
                head = tok.split("/")[0]
                try:
                    raw_idx = int(head)
                except ValueError:
                    raise MeshFormatError(f"bad face index {head!r}", line=line_no) from None
                if raw_idx > 0:
                    resolved = raw_idx - 1
                elif raw_idx < 0:
                    resolved = len(vertices) + raw_idx
                else:
                    raise MeshFormatError("OBJ indices are 1-based, got 0", line=line_no)
                if resolved < 0 or resolved >= len(vertices):
                    raise MeshFormatError(f"unresolvable index {raw_idx}", line=line_no)
                idx.append(resolved)
            faces.append(idx)
        # all other record types (vn, vt, o, g, s, usemtl, ...) are ignored
    return Mesh(
        vertices=np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
    )


def parse_face_labels(text, n_faces: int) -> LabelVec:
    """Parse one-integer-per-line face labels, remapping to dense 0-based ids.

    Raw label values are remapped in first-appearance order;
    ``num_classes`` is the number of distinct raw values.
    """
    raw: list[int] = []
    for line_no, line in enumerate(_lines(text), start=1):
        token = line.strip()
        if not token:
            continue
        try:
            raw.append(int(token))
        except ValueError:
            raise MeshFormatError(f"non-integer label {token!r}", line=line_no) from None
    if len(raw) != n_faces:
        raise MeshFormatError(f"label count mismatch: {len(raw)} labels for {n_faces} faces")
    mapping: dict[int, int] = {}
    dense = np.empty(n_faces, dtype=np.int64)
    for i, value in enumerate(raw):
        if value not in mapping:
            mapping[value] = len(mapping)
        dense[i] = mapping[value]
    return LabelVec(labels=dense, num_classes=len(mapping), raw_values=tuple(mapping))


def write_ply_colored(mesh: Mesh, labels: LabelVec, palette) -> str:
    """Serialize a mesh as ASCII PLY with per-face RGB colors from a palette."""
    palette = [tuple(int(c) for c in rgb) for rgb in palette]
    if len(palette) < labels.num_classes:
        raise ValueError(
            f"palette too small: {len(palette)} colors for {labels.num_classes} classes"
        )
    if len(labels) != mesh.num_faces:
        raise ValueError(f"label count {len(labels)} != face count {mesh.num_faces}")
    out = [
        "ply",
        "format ascii 1.0",
        f"element vertex {mesh.num_vertices}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {mesh.num_faces}",
        "property list uchar int vertex_indices",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for v in mesh.vertices:
        out.append(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for f, lab in zip(mesh.faces, labels.labels):
        r, g, b = palette[lab] if lab >= 0 else (0, 0, 0)
        out.append(f"3 {f[0]} {f[1]} {f[2]} {r} {g} {b}")
    return "\n".join(out) + "\n"


def parse_ply(text) -> tuple[Mesh, np.ndarray | None]:
    """Parse an ASCII PLY 1.0 file; returns the mesh and per-face RGB (or None).

    Binary PLY is rejected with a clear error.
    """
    lines = _lines(text)
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError("missing 'ply' magic", line=1)
    elements: list[tuple[str, int, list[str]]] = []
    body_start = None
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("comment"):
            continue
        if line.startswith("format"):
            if "ascii" not in line:
                raise MeshFormatError(
                    "binary PLY is not supported, re-export as ASCII", line=line_no
                )
        elif line.startswith("element"):
            _, name, count = line.split()
            elements.append((name, int(count), []))
        elif line.startswith("property"):
            if not elements:
                raise MeshFormatError("property before element", line=line_no)
            elements[-1][2].append(line.split()[-1])
        elif line == "end_header":
            body_start = line_no
            break
        else:
            raise MeshFormatError(f"unexpected header line {line!r}", line=line_no)
    if body_start is None:
        raise MeshFormatError("missing end_header")
    rows = [
        (i, ln.strip()) for i, ln in enumerate(lines[body_start:], start=body_start + 1)
        if ln.strip()
    ]
    pos = 0
    vertices = None
    faces = None
    colors = None
    for name, count, props in elements:
        if len(rows) - pos < count:
            raise MeshFormatError(f"truncated PLY: element {name} incomplete")
        chunk = rows[pos : pos + count]
        pos += count
        if name == "vertex":
            vertices = np.array(
                [[float(p) for p in content.split()[:3]] for _, content in chunk]
            ).reshape(count, 3)
        elif name == "face":
            face_rows = []
            color_rows = []
            has_color = {"red", "green", "blue"} <= set(props)
            for line_no, content in chunk:
                parts = content.split()
                arity = int(parts[0])
                if arity != 3:
                    raise MeshFormatError(f"non-triangular face (arity {arity})", line=line_no)
                face_rows.append([int(p) for p in parts[1:4]])
                if has_color:
                    color_rows.append([int(p) for p in parts[4:7]])
            faces = np.asarray(face_rows, dtype=np.int64).reshape(count, 3)
            if has_color:
                colors = np.asarray(color_rows, dtype=np.int64).reshape(count, 3)
    if vertices is None or faces is None:
        raise MeshFormatError("PLY missing vertex or face element")
    return Mesh(vertices=vertices, faces=faces), colors


def merge_duplicate_vertices(mesh: Mesh, eps: float = 0.0, return_face_mask: bool = False):
    """Collapse vertices within ``eps`` of an earlier vertex onto it.

    Face indices are remapped and faces that become degenerate (a repeated
    index) are dropped. Idempotent for any fixed ``eps``. With
    ``return_face_mask`` the boolean keep-mask over the original faces is
    returned as well, so per-face data can stay aligned.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    v = mesh.vertices
    n = len(v)
    remap = np.arange(n)
    if n:
        if eps == 0.0:
            seen: dict[bytes, int] = {}
            for i in range(n):
                key = v[i].tobytes()
                rep = seen.setdefault(key, i)
                remap[i] = rep
        else:
            from scipy.spatial import cKDTree

            tree = cKDTree(v)
            for i in range(n):
                target = i
                for j in sorted(tree.query_ball_point(v[i], eps)):
                    if j < i and remap[j] == j:
                        target = j
                        break
                remap[i] = target
    keep = np.flatnonzero(remap == np.arange(n))
    new_index = np.full(n, -1, dtype=np.int64)
    new_index[keep] = np.arange(len(keep))
    faces = new_index[remap[mesh.faces]]
    nondegenerate = (
        (faces[:, 0] != faces[:, 1])
        & (faces[:, 1] != faces[:, 2])
        & (faces[:, 0] != faces[:, 2])
    )
    merged = Mesh(vertices=v[keep], faces=faces[nondegenerate])
    if return_face_mask:
        return merged, nondegenerate
    return merged
