"""Triangular meshes: generation, uniform refinement, point location, ASCII I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, LocationError, MeshFormatError

__all__ = [
    "TriMesh",
    "PointLocation",
    "generate_structured_rect",
    "generate_masked_rect",
    "generate_disk",
    "refine_uniform",
    "locate_point",
    "save_mesh",
    "load_mesh",
    "save_mesh_file",
    "load_mesh_file",
    "mesh_stats",
]


@dataclass(eq=False)
class TriMesh:
    """Conforming 2D triangulation with region and boundary tagging.

    Attributes
    ----------
    nodes : (N, 2) float64 array
        Node coordinates.
    triangles : (M, 3) int64 array
        Node index triples, counterclockwise.
    region_tags : (M,) int64 array
        Subdomain tag per triangle.
    boundary_tags : (N,) int64 array
        Nonzero only for nodes on the topological boundary; 0 marks
        interior nodes (and boundary nodes left untagged on purpose).

    Instances are immutable after construction; the arrays are marked
    read-only so they can be shared freely between threads.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    region_tags: np.ndarray
    boundary_tags: np.ndarray

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.region_tags = np.ascontiguousarray(self.region_tags, dtype=np.int64)
        self.boundary_tags = np.ascontiguousarray(self.boundary_tags, dtype=np.int64)
        _validate(self)
        for arr in (self.nodes, self.triangles, self.region_tags, self.boundary_tags):
            arr.setflags(write=False)
        self._locator = None

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def num_triangles(self) -> int:
        return self.triangles.shape[0]

    def signed_areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def boundary_node_indices(self) -> np.ndarray:
        """Indices of nodes on the topological boundary (tagged or not)."""
        return np.unique(_boundary_edges(self.triangles))

    def domain_diameter(self) -> float:
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return float(np.hypot(*(hi - lo)))


@dataclass
class PointLocation:
    """Result of a point query: containing triangle plus barycentric weights."""

    triangle: int
    barycentric: np.ndarray


def _signed_areas(nodes, triangles):
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _edge_array(triangles):
    """All triangle edges as sorted index pairs, 3 per triangle."""
    e = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=0
    )
    e.sort(axis=1)
    return e


def _boundary_edges(triangles):
    e = _edge_array(triangles)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    if counts.max(initial=1) > 2:
        raise GeometryError("non-conforming mesh: an edge is shared by more than 2 triangles")
    return uniq[counts == 1]


def _validate(mesh: TriMesh):
    n = mesh.nodes.shape[0]
    m = mesh.triangles.shape[0]
    if mesh.nodes.ndim != 2 or mesh.nodes.shape[1] != 2:
        raise GeometryError("nodes must be an (N, 2) array")
    if mesh.triangles.ndim != 2 or mesh.triangles.shape[1] != 3:
        raise GeometryError("triangles must be an (M, 3) array")
    if mesh.region_tags.shape != (m,):
        raise GeometryError("region_tags length must match triangle count")
    if mesh.boundary_tags.shape != (n,):
        raise GeometryError("boundary_tags length must match node count")
    if m == 0:
        raise GeometryError("mesh has no triangles")
    if mesh.triangles.min() < 0 or mesh.triangles.max() >= n:
        raise GeometryError("triangle node index out of range")
    t = mesh.triangles
    if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
        raise GeometryError("triangle with repeated node indices")
    areas = _signed_areas(mesh.nodes, mesh.triangles)
    if areas.min() <= 0.0:
        bad = int(np.argmin(areas))
        raise GeometryError(
            f"triangle {bad} has non-positive signed area {areas[bad]:.3e}; "
            "node order must be counterclockwise"
        )
    on_boundary = np.zeros(n, dtype=bool)
    on_boundary[np.unique(_boundary_edges(mesh.triangles))] = True
    tagged = mesh.boundary_tags != 0
    if np.any(tagged & ~on_boundary):
        bad = int(np.nonzero(tagged & ~on_boundary)[0][0])
        raise GeometryError(f"node {bad} has a boundary tag but is not on the boundary")


def _resolve_tag_fn(fn, default=1):
    if fn is None:
        return lambda p: default
    return fn


def generate_structured_rect(nx, ny, bounds, region_fn=None, boundary_fn=None):
    """Structured triangulation of a rectangle.

    Each of the nx × ny cells is split along its lower-left to upper-right
    diagonal, giving 2*nx*ny triangles. ``region_fn`` is evaluated at
    triangle centroids, ``boundary_fn`` at boundary nodes; both default
    to the constant tag 1.

    Parameters
    ----------
    nx, ny : int
        Cell counts per direction, at least 1.
    bounds : tuple
        (x0, y0, x1, y1) with x1 > x0 and y1 > y0.
    """
    if nx < 1 or ny < 1:
        raise GeometryError(f"cell counts must be at least 1, got nx={nx}, ny={ny}")
    x0, y0, x1, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise GeometryError(f"degenerate bounds {bounds}")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            a = nid(i, j)
            b = nid(i + 1, j)
            c = nid(i + 1, j + 1)
            d = nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    triangles = np.array(tris, dtype=np.int64)

    return _finish_mesh(nodes, triangles, region_fn, boundary_fn)


def generate_masked_rect(nx, ny, bounds, keep_fn, region_fn=None, boundary_fn=None):
    """Structured triangulation restricted to cells selected by ``keep_fn``.

    ``keep_fn`` is evaluated at triangle centroids of the full nx × ny grid;
    triangles where it returns falsy are dropped and the node numbering is
    compacted. The boundary is recomputed topologically on the masked mesh.
    The result must be edge-connected.
    """
    full = generate_structured_rect(nx, ny, bounds, region_fn, boundary_fn)
    cent = full.centroids()
    keep = np.array([bool(keep_fn(c)) for c in cent])
    if not keep.any():
        raise GeometryError("keep_fn removed every triangle")
    triangles = full.triangles[keep]
    used = np.unique(triangles)
    remap = -np.ones(full.num_nodes, dtype=np.int64)
    remap[used] = np.arange(used.size)
    mesh = _finish_mesh(full.nodes[used], remap[triangles], region_fn, boundary_fn)
    _check_connected(mesh)
    return mesh


def generate_disk(rings, sectors, radius=1.0, center=(0.0, 0.0),
                  region_fn=None, boundary_fn=None):
    """Polygonal disk built from concentric rings of sector nodes.

    Node count is 1 + rings*sectors; the outermost ring is the (polygonal)
    domain boundary. The analytic domain is the inscribed regular polygon,
    not the circle.
    """
    if rings < 1 or sectors < 3:
        raise GeometryError(f"need rings >= 1 and sectors >= 3, got {rings}, {sectors}")
    if radius <= 0:
        raise GeometryError(f"radius must be positive, got {radius}")
    cx, cy = center
    nodes = [(cx, cy)]
    for r in range(1, rings + 1):
        rho = radius * r / rings
        for k in range(sectors):
            th = 2.0 * math.pi * k / sectors
            nodes.append((cx + rho * math.cos(th), cy + rho * math.sin(th)))
    nodes = np.array(nodes, dtype=np.float64)

    def ring_id(r, k):
        return 1 + (r - 1) * sectors + (k % sectors)

    tris = []
    for k in range(sectors):
        tris.append((0, ring_id(1, k), ring_id(1, k + 1)))
    for r in range(1, rings):
        for k in range(sectors):
            a = ring_id(r, k)
            b = ring_id(r, k + 1)
            c = ring_id(r + 1, k)
            d = ring_id(r + 1, k + 1)
            tris.append((a, b, d))
            tris.append((a, d, c))
    triangles = np.array(tris, dtype=np.int64)
    return _finish_mesh(nodes, triangles, region_fn, boundary_fn)


def _finish_mesh(nodes, triangles, region_fn, boundary_fn):
    region_fn = _resolve_tag_fn(region_fn)
    boundary_fn = _resolve_tag_fn(boundary_fn)
    cent = nodes[triangles].mean(axis=1)
    region_tags = np.array([int(region_fn(c)) for c in cent], dtype=np.int64)
    boundary_tags = np.zeros(nodes.shape[0], dtype=np.int64)
    for i in np.unique(_boundary_edges(triangles)):
        boundary_tags[i] = int(boundary_fn(nodes[i]))
    return TriMesh(nodes, triangles, region_tags, boundary_tags)


def _check_connected(mesh: TriMesh):
    """Raise if the triangle adjacency graph has more than one component."""
    m = mesh.num_triangles
    edge_owner = {}
    adj = [[] for _ in range(m)]
    tris = mesh.triangles
    for t in range(m):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = (min(tris[t, a], tris[t, b]), max(tris[t, a], tris[t, b]))
            other = edge_owner.get(key)
            if other is None:
                edge_owner[key] = t
            else:
                adj[t].append(other)
                adj[other].append(t)
    seen = np.zeros(m, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        t = stack.pop()
        for u in adj[t]:
            if not seen[u]:
                seen[u] = True
                stack.append(u)
    if not seen.all():
        raise GeometryError("mask produced a disconnected mesh")


def refine_uniform(mesh: TriMesh) -> TriMesh:
    """Split every triangle into 4 congruent children via edge midpoints.

    Original nodes keep their indices and tags. A midpoint of a boundary
    edge becomes a boundary node; it inherits the shared tag of the edge
    endpoints, or the smaller of the two tags when they differ (so an edge
    running from a specially tagged node into a default-tagged stretch does
    not extend the special tag). Region tags pass to all four children.
    """
    nodes = list(map(tuple, mesh.nodes))
    midpoint = {}

    def mid(a, b):
        key = (min(a, b), max(a, b))
        idx = midpoint.get(key)
        if idx is None:
            idx = len(nodes)
            pa = mesh.nodes[a]
            pb = mesh.nodes[b]
            nodes.append(((pa[0] + pb[0]) * 0.5, (pa[1] + pb[1]) * 0.5))
            midpoint[key] = idx
        return idx

    tris = []
    regions = []
    for t in range(mesh.num_triangles):
        v0, v1, v2 = mesh.triangles[t]
        m01 = mid(v0, v1)
        m12 = mid(v1, v2)
        m20 = mid(v2, v0)
        tris.extend([(v0, m01, m20), (m01, v1, m12), (m20, m12, v2), (m01, m12, m20)])
        regions.extend([mesh.region_tags[t]] * 4)

    new_nodes = np.array(nodes, dtype=np.float64)
    new_tris = np.array(tris, dtype=np.int64)
    boundary_tags = np.zeros(len(nodes), dtype=np.int64)
    boundary_tags[: mesh.num_nodes] = mesh.boundary_tags

    bset = {tuple(e) for e in _boundary_edges(mesh.triangles)}
    for (a, b), idx in midpoint.items():
        if (a, b) in bset:
            ta = mesh.boundary_tags[a]
            tb = mesh.boundary_tags[b]
            boundary_tags[idx] = ta if ta == tb else min(ta, tb)

    return TriMesh(new_nodes, new_tris, np.array(regions, dtype=np.int64), boundary_tags)


class _GridLocator:
    """Uniform bucket grid over the mesh bounding box for point queries."""

    def __init__(self, mesh: TriMesh):
        pts = mesh.nodes
        self.xmin, self.ymin = pts.min(axis=0)
        self.xmax, self.ymax = pts.max(axis=0)
        m = mesh.num_triangles
        k = max(1, int(math.sqrt(m / 2.0)))
        self.k = k
        self.dx = max((self.xmax - self.xmin) / k, 1e-300)
        self.dy = max((self.ymax - self.ymin) / k, 1e-300)
        buckets = [[] for _ in range(k * k)]
        tp = pts[mesh.triangles]
        los = tp.min(axis=1)
        his = tp.max(axis=1)
        for t in range(m):
            i0 = self._ix(los[t, 0])
            i1 = self._ix(his[t, 0])
            j0 = self._iy(los[t, 1])
            j1 = self._iy(his[t, 1])
            for j in range(j0, j1 + 1):
                base = j * k
                for i in range(i0, i1 + 1):
                    buckets[base + i].append(t)
        self.buckets = [np.array(b, dtype=np.int64) for b in buckets]

    def _ix(self, x):
        return min(max(int((x - self.xmin) / self.dx), 0), self.k - 1)

    def _iy(self, y):
        return min(max(int((y - self.ymin) / self.dy), 0), self.k - 1)

    def candidates(self, p):
        return self.buckets[self._iy(p[1]) * self.k + self._ix(p[0])]


def _barycentric(mesh, t, p):
    v = mesh.nodes[mesh.triangles[t]]
    d1 = v[1] - v[0]
    d2 = v[2] - v[0]
    det = d1[0] * d2[1] - d1[1] * d2[0]
    rx = p[0] - v[0, 0]
    ry = p[1] - v[0, 1]
    l1 = (rx * d2[1] - ry * d2[0]) / det
    l2 = (ry * d1[0] - rx * d1[1]) / det
    return np.array([1.0 - l1 - l2, l1, l2])


def locate_point(mesh: TriMesh, p, tol=1e-10) -> PointLocation:
    """Find the triangle containing ``p`` and its barycentric coordinates.

    Points on shared edges resolve to the lowest-index containing triangle.
    Points within ``tol`` of the hull are snapped onto the nearest triangle;
    anything farther out raises ``LocationError``.
    """
    p = np.asarray(p, dtype=np.float64)
    if getattr(mesh, "_locator", None) is None:
        mesh._locator = _GridLocator(mesh)
    loc = mesh._locator

    # strict pass over the bucket, ascending triangle index
    for t in loc.candidates(p):
        lam = _barycentric(mesh, int(t), p)
        if lam.min() >= -1e-12:
            lam = np.maximum(lam, 0.0)
            lam /= lam.sum()
            return PointLocation(int(t), lam)

    # fallback: nearest triangle by snap distance, tolerant up to tol
    best = None
    best_dist = math.inf
    for t in range(mesh.num_triangles):
        lam = _barycentric(mesh, t, p)
        if lam.min() >= -1e-12:
            lam = np.maximum(lam, 0.0)
            lam /= lam.sum()
            return PointLocation(t, lam)
        lam_c = np.maximum(lam, 0.0)
        lam_c /= lam_c.sum()
        q = lam_c @ mesh.nodes[mesh.triangles[t]]
        dist = math.hypot(q[0] - p[0], q[1] - p[1])
        if dist < best_dist:
            best_dist = dist
            best = (t, lam_c)
    if best is not None and best_dist <= tol:
        return PointLocation(best[0], best[1])
    raise LocationError(
        f"point ({p[0]:.17g}, {p[1]:.17g}) lies outside the mesh "
        f"(nearest triangle {best[0] if best else -1}, distance {best_dist:.3e})"
    )


def mesh_stats(mesh: TriMesh) -> dict:
    """Summary statistics used by reporting and the mesh-info command."""
    areas = mesh.signed_areas()
    pts = mesh.nodes[mesh.triangles]
    e0 = np.linalg.norm(pts[:, 1] - pts[:, 0], axis=1)
    e1 = np.linalg.norm(pts[:, 2] - pts[:, 1], axis=1)
    e2 = np.linalg.norm(pts[:, 0] - pts[:, 2], axis=1)
    h = np.maximum(np.maximum(e0, e1), e2)
    region_areas = {}
    for tag in np.unique(mesh.region_tags):
        region_areas[int(tag)] = float(areas[mesh.region_tags == tag].sum())
    tag_counts = {}
    for tag in np.unique(mesh.boundary_tags):
        if tag != 0:
            tag_counts[int(tag)] = int((mesh.boundary_tags == tag).sum())
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    return {
        "num_nodes": mesh.num_nodes,
        "num_triangles": mesh.num_triangles,
        "num_boundary_nodes": int(mesh.boundary_node_indices().size),
        "area": float(areas.sum()),
        "h_min": float(h.min()),
        "h_max": float(h.max()),
        "bbox": [float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])],
        "region_areas": region_areas,
        "boundary_tag_counts": tag_counts,
    }


def save_mesh(mesh: TriMesh) -> str:
    """Serialize to the ``trimesh v1`` ASCII format.

    Layout: header line ``trimesh v1``; ``nodes N`` followed by N lines
    ``x y boundary_tag``; ``triangles M`` followed by M lines
    ``i j k region_tag``. Indices are 0-based, ``#`` starts a comment line.
    Coordinates use 17 significant digits, which round-trips float64.
    """
    out = ["trimesh v1", f"nodes {mesh.num_nodes}"]
    for i in range(mesh.num_nodes):
        x, y = mesh.nodes[i]
        out.append(f"{x:.17g} {y:.17g} {mesh.boundary_tags[i]}")
    out.append(f"triangles {mesh.num_triangles}")
    for t in range(mesh.num_triangles):
        a, b, c = mesh.triangles[t]
        out.append(f"{a} {b} {c} {mesh.region_tags[t]}")
    return "\n".join(out) + "\n"


def load_mesh(text: str) -> TriMesh:
    """Parse the ``trimesh v1`` ASCII format; see ``save_mesh``."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s and not s.startswith("#"):
            lines.append((lineno, s))
    pos = 0

    def take(what):
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise MeshFormatError(f"unexpected end of file, expected {what}", line=last)
        item = lines[pos]
        pos += 1
        return item

    lineno, header = take("header")
    if header != "trimesh v1":
        raise MeshFormatError(f"bad header {header!r}, expected 'trimesh v1'", line=lineno)

    def section(name):
        lineno, s = take(f"'{name} N'")
        parts = s.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"expected '{name} N', got {s!r}", line=lineno)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(f"bad count {parts[1]!r}", line=lineno) from None
        if count < 0:
            raise MeshFormatError(f"negative count {count}", line=lineno)
        return count

    n = section("nodes")
    if n == 0:
        raise MeshFormatError("empty node section", line=lineno)
    nodes = np.empty((n, 2), dtype=np.float64)
    btags = np.empty(n, dtype=np.int64)
    for i in range(n):
        lineno, s = take("node line")
        parts = s.split()
        if len(parts) != 3:
            raise MeshFormatError(f"node line needs 'x y tag', got {s!r}", line=lineno)
        try:
            nodes[i, 0] = float(parts[0])
            nodes[i, 1] = float(parts[1])
            btags[i] = int(parts[2])
        except ValueError:
            raise MeshFormatError(f"malformed node line {s!r}", line=lineno) from None

    m = section("triangles")
    tris = np.empty((m, 3), dtype=np.int64)
    rtags = np.empty(m, dtype=np.int64)
    for t in range(m):
        lineno, s = take("triangle line")
        parts = s.split()
        if len(parts) != 4:
            raise MeshFormatError(f"triangle line needs 'i j k tag', got {s!r}", line=lineno)
        try:
            tris[t] = [int(parts[0]), int(parts[1]), int(parts[2])]
            rtags[t] = int(parts[3])
        except ValueError:
            raise MeshFormatError(f"malformed triangle line {s!r}", line=lineno) from None
        if tris[t].min() < 0 or tris[t].max() >= n:
            raise MeshFormatError(
                f"triangle references node index out of range 0..{n - 1}: {s!r}",
                line=lineno,
            )

    if pos != len(lines):
        raise MeshFormatError(f"trailing content {lines[pos][1]!r}", line=lines[pos][0])
    return TriMesh(nodes, tris, rtags, btags)


def save_mesh_file(mesh: TriMesh, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(save_mesh(mesh))


def load_mesh_file(path) -> TriMesh:
    with open(path, "r", encoding="ascii") as fh:
        return load_mesh(fh.read())
