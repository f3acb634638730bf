"""Template triangle mesh: OBJ loading, adjacency, vertex colors, barycentrics."""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_image

# area < DEGENERATE_EPS * longest_edge**2 counts as a degenerate triangle
DEGENERATE_EPS = 1e-12


class MeshError(ValueError):
    """Raised for malformed or inconsistent template meshes."""


@dataclass(frozen=True, eq=False)
class TemplateMesh:
    """Static reference shape of the tracked object.

    ``uvs`` are in texture pixel units (x right, y down); pixel ``(r, c)``
    covers ``[c, c+1) x [r, r+1)``. ``edges`` lists every ordered neighbour
    pair ``(i, j)``, so each undirected edge appears twice. ``boundary``
    flags vertices on an edge used by a single face.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray
    texture: np.ndarray
    adjacency: tuple
    edges: np.ndarray
    vertex_colors: np.ndarray
    rest_edge_lengths: np.ndarray
    boundary: np.ndarray

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_faces(self):
        return self.faces.shape[0]

    @property
    def texture_size(self):
        """(width, height) of the texture map."""
        return self.texture.shape[1], self.texture.shape[0]

    def rest_edge_vectors(self):
        i, j = self.edges.T
        return self.vertices[i] - self.vertices[j]


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def build_adjacency(faces, n_vertices):
    """Per-vertex neighbour sets and the sorted array of directed edges."""
    faces = np.asarray(faces, dtype=np.int64)
    und = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    directed = np.concatenate([und, und[:, ::-1]])
    directed = np.unique(directed, axis=0)
    neighbours = [set() for _ in range(n_vertices)]
    for i, j in directed:
        neighbours[i].add(int(j))
    return tuple(frozenset(s) for s in neighbours), directed


def boundary_vertices(faces, n_vertices):
    """Mask of vertices lying on an edge that belongs to exactly one face."""
    faces = np.asarray(faces, dtype=np.int64)
    und = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    pairs, counts = np.unique(und, axis=0, return_counts=True)
    mask = np.zeros(n_vertices, dtype=bool)
    mask[pairs[counts == 1].ravel()] = True
    return mask


def compute_vertex_colors(mesh_or_uvs, texture=None):
    """Nearest-pixel texture lookup at every UV coordinate.

    Accepts a :class:`TemplateMesh` or a ``(uvs, texture)`` pair. Coordinates
    on the far image border are clamped to the last valid pixel.
    """
    if texture is None:
        uvs, texture = mesh_or_uvs.uvs, mesh_or_uvs.texture
    else:
        uvs = np.asarray(mesh_or_uvs, dtype=np.float64)
    h, w = texture.shape[:2]
    cols = np.clip(np.floor(uvs[:, 0]).astype(np.int64), 0, w - 1)
    rows = np.clip(np.floor(uvs[:, 1]).astype(np.int64), 0, h - 1)
    return texture[rows, cols].astype(np.float64)


def triangle_area(a, b, c):
    a, b, c = (np.asarray(p, dtype=np.float64) for p in (a, b, c))
    return 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def is_degenerate(a, b, c):
    a, b, c = (np.asarray(p, dtype=np.float64) for p in (a, b, c))
    longest = max(np.sum((b - a) ** 2), np.sum((c - b) ** 2), np.sum((a - c) ** 2))
    return triangle_area(a, b, c) < DEGENERATE_EPS * longest or longest == 0.0


def barycentric_of_point(p, a, b, c):
    """Weights ``w`` with ``p = w0*a + w1*b + w2*c`` and ``sum(w) == 1``.

    Weights may be negative when ``p`` lies outside the triangle.
    """
    p, a, b, c = (np.asarray(q, dtype=np.float64) for q in (p, a, b, c))
    if is_degenerate(a, b, c):
        raise MeshError(f"degenerate triangle (area={triangle_area(a, b, c):.3e})")
    e1, e2, d = b - a, c - a, p - a
    det = e1[0] * e2[1] - e1[1] * e2[0]
    w1 = (d[0] * e2[1] - d[1] * e2[0]) / det
    w2 = (e1[0] * d[1] - e1[1] * d[0]) / det
    return np.array([1.0 - w1 - w2, w1, w2])


def build_template(vertices, faces, uvs, texture):
    """Validate raw arrays and derive adjacency, colors and rest lengths."""
    V = np.asarray(vertices, dtype=np.float64)
    F = np.asarray(faces)
    U = np.asarray(uvs, dtype=np.float64)
    tex = check_image(texture, name="texture", channels=3)
    if V.ndim != 2 or V.shape[1] != 3 or V.shape[0] == 0:
        raise MeshError(f"vertices must have shape (N, 3), got {V.shape}")
    if not np.all(np.isfinite(V)):
        raise MeshError("vertices contain non-finite values")
    if F.ndim != 2 or F.shape[1] != 3 or F.shape[0] == 0:
        raise MeshError(f"faces must have shape (F, 3), got {F.shape}")
    if not np.issubdtype(F.dtype, np.integer):
        raise MeshError("face indices must be integers")
    F = F.astype(np.int64)
    n = V.shape[0]
    if F.min() < 0 or F.max() >= n:
        bad = int(F[(F < 0) | (F >= n)][0])
        raise MeshError(f"face index {bad} out of range [0, {n})")
    same = (F[:, 0] == F[:, 1]) | (F[:, 1] == F[:, 2]) | (F[:, 0] == F[:, 2])
    if np.any(same):
        raise MeshError(f"degenerate face {int(np.flatnonzero(same)[0])}: repeated vertex index")
    if U.shape != (n, 2):
        raise MeshError(f"uvs must have shape ({n}, 2), got {U.shape}")
    h, w = tex.shape[:2]
    if (U < 0).any() or (U[:, 0] > w).any() or (U[:, 1] > h).any():
        raise MeshError(f"uv coordinates outside texture bounds {w}x{h}")

    adjacency, edges = build_adjacency(F, n)
    i, j = edges.T
    rest = np.linalg.norm(V[i] - V[j], axis=1)
    if np.any(rest <= 0):
        k = int(np.argmin(rest))
        raise MeshError(f"zero-length rest edge between vertices {i[k]} and {j[k]}")
    colors = compute_vertex_colors(U, tex)
    return TemplateMesh(
        vertices=_frozen(V), faces=_frozen(F), uvs=_frozen(U), texture=_frozen(tex),
        adjacency=adjacency, edges=_frozen(edges), vertex_colors=_frozen(colors),
        rest_edge_lengths=_frozen(rest), boundary=_frozen(boundary_vertices(F, n)))


def parse_obj(text):
    """Parse OBJ text into (vertices, faces, normalized uvs per vertex)."""
    verts, tex_coords, faces, face_uv = [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            verts.append([float(x) for x in rest[:3]])
        elif tag == "vt":
            tex_coords.append([float(x) for x in rest[:2]])
        elif tag == "f":
            if len(rest) != 3:
                raise MeshError(f"line {lineno}: non-triangulated face with {len(rest)} vertices")
            vi, ti = [], []
            for ref in rest:
                parts = ref.split("/")
                if len(parts) < 2 or parts[1] == "":
                    raise MeshError(f"line {lineno}: face vertex '{ref}' has no UV reference")
                vi.append(int(parts[0]))
                ti.append(int(parts[1]))
            faces.append(vi)
            face_uv.append(ti)
    if not verts:
        raise MeshError("OBJ contains no vertices")
    if not faces:
        raise MeshError("OBJ contains no faces")
    if not tex_coords:
        raise MeshError("OBJ contains no texture coordinates (vt records)")

    n, nt = len(verts), len(tex_coords)

    def resolve(idx, count, kind):
        out = idx - 1 if idx > 0 else count + idx
        if not 0 <= out < count:
            raise MeshError(f"{kind} index {idx} out of range (have {count})")
        return out

    F = np.array([[resolve(k, n, "vertex") for k in f] for f in faces], dtype=np.int64)
    T = np.array([[resolve(k, nt, "uv") for k in f] for f in face_uv], dtype=np.int64)
    vt = np.asarray(tex_coords, dtype=np.float64)
    uv = np.full((n, 2), np.nan)
    for v_idx, t_idx in zip(F.ravel(), T.ravel()):
        if np.isnan(uv[v_idx, 0]):
            uv[v_idx] = vt[t_idx]
        elif not np.array_equal(uv[v_idx], vt[t_idx]):
            raise MeshError(f"vertex {v_idx + 1} has more than one UV coordinate (seam)")
    if np.isnan(uv).any():
        missing = int(np.flatnonzero(np.isnan(uv[:, 0]))[0])
        raise MeshError(f"vertex {missing + 1} is not referenced by any face and has no UV")
    return np.asarray(verts, dtype=np.float64), F, uv


def normalized_to_pixel_uv(uv, size):
    """OBJ uv in [0,1] (v up) -> texture pixel coordinates (y down)."""
    w, h = size
    uv = np.asarray(uv, dtype=np.float64)
    return np.column_stack([uv[:, 0] * w, (1.0 - uv[:, 1]) * h])


def pixel_to_normalized_uv(uv, size):
    w, h = size
    uv = np.asarray(uv, dtype=np.float64)
    return np.column_stack([uv[:, 0] / w, 1.0 - uv[:, 1] / h])


def load_template(mesh_path, texture_path):
    """Load a triangulated OBJ with per-vertex UVs and its RGB texture."""
    from .imaging import read_image

    mesh_path, texture_path = Path(mesh_path), Path(texture_path)
    try:
        text = mesh_path.read_text()
    except OSError as exc:
        raise MeshError(f"cannot read mesh file {mesh_path}: {exc}") from exc
    try:
        texture = read_image(texture_path)
    except OSError as exc:
        raise MeshError(f"cannot read texture {texture_path}: {exc}") from exc
    V, F, uv = parse_obj(text)
    h, w = texture.shape[:2]
    return build_template(V, F, normalized_to_pixel_uv(uv, (w, h)), texture)


def write_obj(path, vertices, mesh, texture_name=None):
    """Write ``vertices`` with the template's faces and UVs.

    Coordinates use 17 significant digits, so reloading is bit exact.
    """
    V = np.asarray(vertices, dtype=np.float64)
    uv = pixel_to_normalized_uv(mesh.uvs, mesh.texture_size)
    lines = []
    if texture_name:
        lines.append(f"# texture: {texture_name}")
    lines += [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in V]
    lines += [f"vt {u:.17g} {v:.17g}" for u, v in uv]
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj_vertices(path):
    """Vertex positions of an OBJ file (faces and UVs ignored)."""
    verts = []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if parts and parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
    return np.asarray(verts, dtype=np.float64)
