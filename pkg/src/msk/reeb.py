"""Level-set graph of the intensity: critical points, edges, projection.

The graph identifies points lying on the same connected component of a
level set.  Numerically: critical points come from Newton refinement on
grid-seeded candidates; the plane is then cut into bands between
consecutive critical values, and each connected component of a band (flood
fill on the cell grid) becomes one edge.  Components that continue across
a critical value without touching the critical point are spliced through
degree-2 junction vertices; the unbounded family is capped by a vertex at
z_max standing in for the point at infinity.

A thin collar below each saddle value is excluded from the band masks:
cells arbitrarily close to a saddle otherwise bridge the two lobes and the
flood fill would merge edges that are topologically distinct.  The collar
width scales with the Hessian norm times the squared cell size, so it
vanishes under grid refinement.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy import ndimage

from .fields import FieldModel

__all__ = [
    "ReebError",
    "DegenerateCriticalError",
    "NonSimpleValuesError",
    "InsufficientResolutionError",
    "EndpointTooCloseError",
    "MultipleComponentsError",
    "OutOfDomainError",
    "CriticalPoint",
    "Vertex",
    "Edge",
    "GraphPoint",
    "Contour",
    "ReebGraph",
    "find_critical_points",
    "build_reeb_graph",
    "project",
    "project_many",
    "graph_distance",
    "extract_contour",
    "endpoint_separation",
]

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
_MAX_FINE_NODES = 40_000_000


class ReebError(Exception):
    """Base class for level-set graph failures."""


class DegenerateCriticalError(ReebError):
    pass


class NonSimpleValuesError(ReebError):
    pass


class InsufficientResolutionError(ReebError):
    pass


class EndpointTooCloseError(ReebError):
    pass


class MultipleComponentsError(ReebError):
    pass


class OutOfDomainError(ReebError):
    pass


@dataclass(frozen=True)
class CriticalPoint:
    location: np.ndarray
    value: float
    kind: str  # minimum | maximum | saddle


@dataclass(frozen=True)
class Vertex:
    id: int
    kind: str  # extremum | saddle | infinity | junction
    value: float
    location: np.ndarray | None = None


@dataclass
class Edge:
    id: int
    z_lo: float
    z_hi: float
    vertex_lo: int | None
    vertex_hi: int | None
    region_label: int
    band: int
    n_cells: int
    bbox: tuple  # (i0, i1, j0, j1) inclusive cell-index bounds


@dataclass(frozen=True)
class GraphPoint:
    edge_id: int
    z: float


@dataclass(frozen=True)
class Contour:
    """Closed polyline on one level-set component with cached quadrature data."""

    z: float
    edge_id: int
    polyline: np.ndarray    # (m+1, 2), first row repeated at the end
    midpoints: np.ndarray   # (m, 2)
    lengths: np.ndarray     # (m,)
    lam_mid: np.ndarray
    grad_mid: np.ndarray

    @property
    def length(self) -> float:
        return float(self.lengths.sum())


@dataclass
class ReebGraph:
    vertices: list
    edges: list
    critical_points: list
    domain: tuple  # (x0, x1, y0, y1)
    grid_n: int
    z_max: float
    levels: np.ndarray        # critical values ascending, then z_max
    label_grid: np.ndarray    # (grid_n, grid_n) edge ids, -1 unlabeled
    field_name: str = ""

    @property
    def cell_size(self) -> tuple:
        x0, x1, y0, y1 = self.domain
        return ((x1 - x0) / self.grid_n, (y1 - y0) / self.grid_n)

    def vertex(self, vid: int) -> Vertex:
        return self.vertices[vid]

    def incident_edges(self, vid: int) -> list:
        return [e for e in self.edges if vid in (e.vertex_lo, e.vertex_hi)]

    def saddle_vertices(self) -> list:
        return [v for v in self.vertices if v.kind == "saddle"]

    def cell_index(self, q) -> tuple:
        x0, x1, y0, y1 = self.domain
        wx, wy = self.cell_size
        q = np.asarray(q, dtype=float)
        i = np.clip(((q[..., 0] - x0) / wx).astype(int), 0, self.grid_n - 1)
        j = np.clip(((q[..., 1] - y0) / wy).astype(int), 0, self.grid_n - 1)
        return i, j

    # -- serialization ------------------------------------------------------

    def to_document(self) -> dict:
        return {
            "format": "msk-reeb-graph",
            "version": 1,
            "field": self.field_name,
            "domain": list(self.domain),
            "grid_n": self.grid_n,
            "z_max": self.z_max,
            "critical_points": [
                {"xy": list(map(float, c.location)), "value": c.value, "kind": c.kind}
                for c in self.critical_points],
            "vertices": [
                {"id": v.id, "kind": v.kind, "value": v.value,
                 "xy": None if v.location is None else list(map(float, v.location))}
                for v in self.vertices],
            "edges": [
                {"id": e.id, "z_lo": e.z_lo, "z_hi": e.z_hi,
                 "vertex_lo": e.vertex_lo, "vertex_hi": e.vertex_hi,
                 "region_label": e.region_label, "band": e.band,
                 "n_cells": e.n_cells, "bbox": list(e.bbox)}
                for e in self.edges],
        }

    def save(self, prefix) -> None:
        """Write the structured document plus the label-grid sidecar."""
        with open(f"{prefix}.json", "w") as fh:
            json.dump(self.to_document(), fh, indent=1, sort_keys=True)
        np.savez_compressed(f"{prefix}.npz", label_grid=self.label_grid,
                            levels=self.levels)

    @classmethod
    def load(cls, prefix) -> "ReebGraph":
        with open(f"{prefix}.json") as fh:
            doc = json.load(fh)
        if doc.get("format") != "msk-reeb-graph":
            raise ValueError("not a serialized level-set graph")
        arrays = np.load(f"{prefix}.npz")
        vertices = [Vertex(id=v["id"], kind=v["kind"], value=v["value"],
                           location=None if v["xy"] is None else np.array(v["xy"]))
                    for v in doc["vertices"]]
        edges = [Edge(id=e["id"], z_lo=e["z_lo"], z_hi=e["z_hi"],
                      vertex_lo=e["vertex_lo"], vertex_hi=e["vertex_hi"],
                      region_label=e["region_label"], band=e["band"],
                      n_cells=e["n_cells"], bbox=tuple(e["bbox"]))
                 for e in doc["edges"]]
        crits = [CriticalPoint(location=np.array(c["xy"]), value=c["value"],
                               kind=c["kind"])
                 for c in doc["critical_points"]]
        return cls(vertices=vertices, edges=edges, critical_points=crits,
                   domain=tuple(doc["domain"]), grid_n=doc["grid_n"],
                   z_max=doc["z_max"], levels=arrays["levels"],
                   label_grid=arrays["label_grid"], field_name=doc["field"])


# ---------------------------------------------------------------------------
# critical points
# ---------------------------------------------------------------------------

def _classify(hess: np.ndarray) -> str:
    det = hess[0, 0] * hess[1, 1] - hess[0, 1] * hess[1, 0]
    if abs(det) < 1e-10:
        raise DegenerateCriticalError(
            f"critical point with nearly singular Hessian (det={det:.3e})")
    if det < 0:
        return "saddle"
    return "minimum" if hess[0, 0] + hess[1, 1] > 0 else "maximum"


def find_critical_points(field: FieldModel, domain, grid_n: int) -> list:
    """Locate the critical points of the intensity inside a rectangle.

    Seeds Newton iterations from every grid cell where both gradient
    components change sign, merges duplicates, and classifies by the
    Hessian signature.  Degenerate Hessians and coinciding critical values
    are rejected; both break the graph construction downstream.
    """
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("domain must be a nonempty rectangle")
    xs = np.linspace(x0, x1, grid_n + 1)
    ys = np.linspace(y0, y1, grid_n + 1)
    nodes = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    grad = field.grad_lam(nodes)

    def straddles(comp):
        c = grad[..., comp]
        corners = np.stack([c[:-1, :-1], c[1:, :-1], c[1:, 1:], c[:-1, 1:]])
        return (corners.min(axis=0) <= 0) & (corners.max(axis=0) >= 0)

    seeds_i, seeds_j = np.nonzero(straddles(0) & straddles(1))
    pad_x, pad_y = 0.1 * (x1 - x0), 0.1 * (y1 - y0)
    found: list[np.ndarray] = []
    for si, sj in zip(seeds_i, seeds_j):
        x = np.array([0.5 * (xs[si] + xs[si + 1]), 0.5 * (ys[sj] + ys[sj + 1])])
        ok = False
        for _ in range(60):
            g = field.grad_lam(x)
            if np.linalg.norm(g) < 1e-12:
                ok = True
                break
            h = field.hess_lam(x)
            try:
                step = np.linalg.solve(h, g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(h, g, rcond=None)[0]
            x = x - step
            if not (x0 - pad_x <= x[0] <= x1 + pad_x
                    and y0 - pad_y <= x[1] <= y1 + pad_y):
                break
        if not ok or not (x0 <= x[0] <= x1 and y0 <= x[1] <= y1):
            continue
        if all(np.linalg.norm(x - p) > 1e-6 for p in found):
            found.append(x)

    crits = []
    for x in found:
        kind = _classify(field.hess_lam(x))
        crits.append(CriticalPoint(location=x, value=float(field.lam(x)), kind=kind))
    crits.sort(key=lambda c: c.value)
    for a, b in zip(crits, crits[1:]):
        if abs(a.value - b.value) < 1e-9:
            raise NonSimpleValuesError(
                f"critical values coincide: {a.value!r} vs {b.value!r}")
    return crits


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def _saddle_margin(field: FieldModel, crit: CriticalPoint, cell: float) -> float:
    hess = field.hess_lam(crit.location)
    norm = float(np.abs(np.linalg.eigvalsh(hess)).max())
    return 8.0 * norm * cell * cell


def build_reeb_graph(field: FieldModel, domain, grid_n: int,
                     z_max: float) -> ReebGraph:
    """Build the level-set graph on a rectangle, capped at z_max.

    z_max must lie strictly above every critical value; the sublevel set
    {lam <= z_max} must sit inside the domain so no component is clipped.
    """
    crits = find_critical_points(field, domain, grid_n)
    if not crits:
        raise InsufficientResolutionError("no critical points found in domain")
    values = [c.value for c in crits]
    if z_max <= max(values):
        raise ValueError(f"z_max={z_max} must exceed all critical values "
                         f"(max={max(values)})")

    x0, x1, y0, y1 = map(float, domain)
    wx, wy = (x1 - x0) / grid_n, (y1 - y0) / grid_n
    cell = max(wx, wy)
    cx = x0 + (np.arange(grid_n) + 0.5) * wx
    cy = y0 + (np.arange(grid_n) + 0.5) * wy
    centers = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1)
    lam = field.lam(centers)

    boundary = np.zeros_like(lam, dtype=bool)
    boundary[0, :] = boundary[-1, :] = boundary[:, 0] = boundary[:, -1] = True
    if np.any(lam[boundary] < z_max):
        raise ValueError("domain too small: the z_max sublevel set touches "
                         "the boundary")

    levels = np.array(values + [float(z_max)])
    # collar below saddle values so lobes do not merge through the saddle cell
    margins = np.zeros(len(levels))
    for k, c in enumerate(crits):
        if c.kind == "saddle":
            margins[k] = _saddle_margin(field, c, cell)

    label_grid = np.full(lam.shape, -1, dtype=np.int64)
    edges: list[Edge] = []
    band_count = len(levels) - 1
    for band in range(band_count):
        lo, hi = levels[band], levels[band + 1]
        mask = (lam > lo) & (lam < hi - margins[band + 1])
        labeled, n_comp = ndimage.label(mask, structure=_FOUR_CONN)
        for comp in range(1, n_comp + 1):
            cells = labeled == comp
            n_cells = int(cells.sum())
            if n_cells < 4:
                raise InsufficientResolutionError(
                    f"band ({lo:.6g}, {hi:.6g}) has a component of only "
                    f"{n_cells} cells; refine the grid")
            ii, jj = np.nonzero(cells)
            eid = len(edges)
            label_grid[cells] = eid
            edges.append(Edge(id=eid, z_lo=float(lo), z_hi=float(hi),
                              vertex_lo=None, vertex_hi=None, region_label=eid,
                              band=band, n_cells=n_cells,
                              bbox=(int(ii.min()), int(ii.max()),
                                    int(jj.min()), int(jj.max()))))

    band_of = {e.id: e.band for e in edges}

    # adjacency between components of consecutive bands
    links: set[tuple] = set()
    for a, b in ((label_grid[:-1, :], label_grid[1:, :]),
                 (label_grid[:, :-1], label_grid[:, 1:])):
        diff = (a != b) & (a >= 0) & (b >= 0)
        pairs = np.unique(np.stack([a[diff], b[diff]], axis=1), axis=0)
        for pa, pb in pairs:
            lo, hi = (int(pa), int(pb)) if band_of[int(pa)] < band_of[int(pb)] else (int(pb), int(pa))
            if band_of[hi] - band_of[lo] == 1:
                links.add((lo, hi))
            elif band_of[hi] == band_of[lo]:
                continue  # same-band contact is possible across corners; ignore
            else:
                raise InsufficientResolutionError(
                    "components two bands apart touch; refine the grid")

    # incidence of components at each critical point
    vertices: list[Vertex] = []
    incident_at: dict[int, set] = {}
    for k, c in enumerate(crits):
        ci = int(np.clip((c.location[0] - x0) / wx, 0, grid_n - 1))
        cj = int(np.clip((c.location[1] - y0) / wy, 0, grid_n - 1))
        radius = 6
        window = label_grid[max(ci - radius, 0):ci + radius + 1,
                            max(cj - radius, 0):cj + radius + 1]
        labels = set(int(l) for l in np.unique(window) if l >= 0)
        below = {l for l in labels if abs(levels[band_of[l] + 1] - c.value) < 1e-9}
        above = {l for l in labels if abs(levels[band_of[l]] - c.value) < 1e-9}
        vid = len(vertices)
        kind = "saddle" if c.kind == "saddle" else "extremum"
        vertices.append(Vertex(id=vid, kind=kind, value=c.value,
                               location=c.location))
        touched = below | above
        if c.kind == "saddle" and len(touched) != 3:
            raise InsufficientResolutionError(
                f"saddle at value {c.value:.6g} touches {len(touched)} "
                "components, expected 3; refine the grid")
        if c.kind != "saddle" and len(touched) != 1:
            raise InsufficientResolutionError(
                f"extremum at value {c.value:.6g} touches {len(touched)} "
                "components, expected 1; refine the grid")
        incident_at[vid] = touched
        for l in below:
            edges[l].vertex_hi = vid
        for l in above:
            edges[l].vertex_lo = vid

    # junctions: consecutive-band links not explained by a critical vertex
    covered = set()
    for vid, touched in incident_at.items():
        for la in touched:
            for lb in touched:
                if la < lb:
                    covered.add((la, lb))
    for lo, hi in sorted(links):
        if (lo, hi) in covered:
            continue
        if edges[lo].vertex_hi is not None or edges[hi].vertex_lo is not None:
            raise InsufficientResolutionError(
                "ambiguous continuation across a critical level; refine the grid")
        vid = len(vertices)
        vertices.append(Vertex(id=vid, kind="junction",
                               value=float(levels[band_of[hi]]), location=None))
        edges[lo].vertex_hi = vid
        edges[hi].vertex_lo = vid

    # cap the unbounded family at z_max
    top = [e for e in edges if e.band == band_count - 1 and e.vertex_hi is None]
    if len(top) != 1:
        raise InsufficientResolutionError(
            f"expected one unbounded component at z_max, found {len(top)}")
    vid = len(vertices)
    vertices.append(Vertex(id=vid, kind="infinity", value=float(z_max),
                           location=None))
    top[0].vertex_hi = vid

    for e in edges:
        if e.vertex_lo is None or e.vertex_hi is None:
            raise InsufficientResolutionError(
                f"edge {e.id} has a dangling endpoint; refine the grid")

    graph = ReebGraph(vertices=vertices, edges=edges, critical_points=crits,
                      domain=(x0, x1, y0, y1), grid_n=grid_n, z_max=float(z_max),
                      levels=levels, label_grid=label_grid,
                      field_name=field.name)
    for v in graph.vertices:
        deg = len(graph.incident_edges(v.id))
        want = {"saddle": 3, "extremum": 1, "infinity": 1, "junction": 2}[v.kind]
        if deg != want:
            raise InsufficientResolutionError(
                f"vertex {v.id} ({v.kind}) has degree {deg}, expected {want}")
    return graph


# ---------------------------------------------------------------------------
# projection and distance
# ---------------------------------------------------------------------------

def _edge_contains(edge: Edge, z: float, tol: float = 1e-9) -> bool:
    return edge.z_lo - tol <= z <= edge.z_hi + tol


def project(graph: ReebGraph, field: FieldModel, q) -> GraphPoint:
    """Identification map: q -> (lam(q), containing component)."""
    q = np.asarray(q, dtype=float)
    z = float(field.lam(q))
    if z > graph.z_max + 1e-9:
        raise OutOfDomainError(f"lam(q)={z:.6g} above the z_max cap {graph.z_max}")
    i, j = graph.cell_index(q)
    i, j = int(i), int(j)
    label = int(graph.label_grid[i, j])
    if label >= 0 and _edge_contains(graph.edges[label], z):
        return GraphPoint(edge_id=label, z=z)
    # fallback: nearest labeled cell whose edge interval contains z
    n = graph.grid_n
    for radius in range(1, 16):
        best = None
        i0, i1 = max(i - radius, 0), min(i + radius, n - 1)
        j0, j1 = max(j - radius, 0), min(j + radius, n - 1)
        window = graph.label_grid[i0:i1 + 1, j0:j1 + 1]
        ii, jj = np.nonzero(window >= 0)
        for wi, wj in zip(ii, jj):
            lab = int(window[wi, wj])
            if not _edge_contains(graph.edges[lab], z):
                continue
            d = (wi + i0 - i) ** 2 + (wj + j0 - j) ** 2
            if best is None or d < best[0]:
                best = (d, lab)
        if best is not None:
            return GraphPoint(edge_id=best[1], z=z)
    raise OutOfDomainError(f"could not locate q={q} on the graph")


def project_many(graph: ReebGraph, field: FieldModel, pts) -> tuple:
    """Vectorized projection; returns (edge_ids, z_values).

    Points above the z_max cap get edge id -1 rather than raising, so bulk
    post-processing can classify excursions itself.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    z = field.lam(pts)
    i, j = graph.cell_index(pts)
    labels = graph.label_grid[i, j].copy()
    lo = np.array([graph.edges[l].z_lo if l >= 0 else np.inf for l in labels])
    hi = np.array([graph.edges[l].z_hi if l >= 0 else -np.inf for l in labels])
    bad = ~((lo - 1e-9 <= z) & (z <= hi + 1e-9))
    for k in np.nonzero(bad)[0]:
        if z[k] > graph.z_max + 1e-9:
            labels[k] = -1
            continue
        labels[k] = project(graph, field, pts[k]).edge_id
    return labels, z


def graph_distance(graph: ReebGraph, a: GraphPoint, b: GraphPoint) -> float:
    """Tree metric: |dz| along edges, minimized over vertex paths."""
    ea, eb = graph.edges[a.edge_id], graph.edges[b.edge_id]
    if not _edge_contains(ea, a.z) or not _edge_contains(eb, b.z):
        raise ValueError("graph point outside its edge interval")
    if a.edge_id == b.edge_id:
        return abs(a.z - b.z)
    adj: dict[int, list] = {v.id: [] for v in graph.vertices}
    for e in graph.edges:
        w = e.z_hi - e.z_lo
        adj[e.vertex_lo].append((e.vertex_hi, w))
        adj[e.vertex_hi].append((e.vertex_lo, w))
    dist = {v.id: np.inf for v in graph.vertices}
    pq = [(abs(a.z - graph.vertices[ea.vertex_lo].value), ea.vertex_lo),
          (abs(graph.vertices[ea.vertex_hi].value - a.z), ea.vertex_hi)]
    for d0, v in pq:
        dist[v] = min(dist[v], d0)
    heapq.heapify(pq)
    while pq:
        d, v = heapq.heappop(pq)
        if d > dist[v]:
            continue
        for u, w in adj[v]:
            nd = d + w
            if nd < dist[u]:
                dist[u] = nd
                heapq.heappush(pq, (nd, u))
    return min(dist[eb.vertex_lo] + abs(b.z - graph.vertices[eb.vertex_lo].value),
               dist[eb.vertex_hi] + abs(graph.vertices[eb.vertex_hi].value - b.z))


# ---------------------------------------------------------------------------
# contour extraction
# ---------------------------------------------------------------------------

def endpoint_separation(graph: ReebGraph, field: FieldModel, edge_id: int,
                        end: str, cell: float) -> float:
    """Minimum allowed offset of a contour level from an edge endpoint.

    Near a critical point the offset scales with the local gradient a few
    cells away from it (marching squares is ill posed at the critical
    value); regular endpoints (junctions, the z_max cap) need only a
    relative floor.
    """
    edge = graph.edges[edge_id]
    vid = edge.vertex_lo if end == "lo" else edge.vertex_hi
    vertex = graph.vertices[vid]
    base = 1e-4 * (edge.z_hi - edge.z_lo)
    if vertex.location is None:
        return base
    angles = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    ring = vertex.location + 3 * cell * np.stack(
        [np.cos(angles), np.sin(angles)], axis=-1)
    gmax = float(np.linalg.norm(field.grad_lam(ring), axis=-1).max())
    return max(base, 10.0 * cell * gmax)


_SEGMENTS = {
    # case index from corner signs (a, b, c, d) counterclockwise from
    # lower-left; values are pairs of local edge slots 0=bottom 1=right
    # 2=top 3=left
    1: [(3, 0)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)],
    6: [(0, 2)], 7: [(3, 2)], 8: [(2, 3)], 9: [(0, 2)],
    11: [(2, 1)], 12: [(1, 3)], 13: [(0, 1)],
    14: [(3, 0)],
}


def _trace_loops(conn: dict) -> list:
    loops = []
    visited = set()
    for start in conn:
        if start in visited or len(conn[start]) != 2:
            continue
        loop = [start]
        visited.add(start)
        prev, cur = start, conn[start][0]
        while cur != start:
            if cur in visited or len(conn[cur]) != 2:
                loop = None
                break
            loop.append(cur)
            visited.add(cur)
            nxt = conn[cur][0] if conn[cur][0] != prev else conn[cur][1]
            prev, cur = cur, nxt
        if loop is not None and len(loop) >= 3:
            loops.append(loop)
    return loops


def extract_contour(field: FieldModel, graph: ReebGraph, edge_id: int,
                    z: float, cell: float) -> Contour:
    """March the level z inside one edge's region and refine by bisection.

    The returned polyline is closed, oriented counterclockwise, and its
    vertices satisfy |lam - z| < 1e-10.  Raises EndpointTooCloseError when
    z sits too close to a critical value for the marching grid, and
    MultipleComponentsError when the region does not carve out exactly one
    loop (a resolution failure).
    """
    edge = graph.edges[edge_id]
    if not (edge.z_lo < z < edge.z_hi):
        raise EndpointTooCloseError(
            f"z={z} outside the open interval of edge {edge_id}")
    d_lo = endpoint_separation(graph, field, edge_id, "lo", cell)
    d_hi = endpoint_separation(graph, field, edge_id, "hi", cell)
    if z < edge.z_lo + d_lo or z > edge.z_hi - d_hi:
        raise EndpointTooCloseError(
            f"z={z} within the separation band of edge {edge_id} "
            f"[{edge.z_lo + d_lo:.6g}, {edge.z_hi - d_hi:.6g}]")

    x0d, _, y0d, _ = graph.domain
    wx, wy = graph.cell_size
    i0, i1, j0, j1 = edge.bbox
    pad = 4
    gx0 = x0d + max(i0 - pad, 0) * wx
    gx1 = x0d + (i1 + pad + 1) * wx
    gy0 = y0d + max(j0 - pad, 0) * wy
    gy1 = y0d + (j1 + pad + 1) * wy
    nx = int(np.ceil((gx1 - gx0) / cell)) + 1
    ny = int(np.ceil((gy1 - gy0) / cell)) + 1
    if nx * ny > _MAX_FINE_NODES:
        raise MemoryError("contour grid too large; increase cell")
    xs = gx0 + np.arange(nx) * cell
    ys = gy0 + np.arange(ny) * cell
    vals = field.lam(np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)) - z

    pos = vals > 0
    a = pos[:-1, :-1]
    b = pos[1:, :-1]
    c = pos[1:, 1:]
    d = pos[:-1, 1:]
    case = (a.astype(np.int8) + 2 * b.astype(np.int8)
            + 4 * c.astype(np.int8) + 8 * d.astype(np.int8))

    def slot_key(i, j, slot):
        if slot == 0:
            return ("h", i, j)
        if slot == 1:
            return ("v", i + 1, j)
        if slot == 2:
            return ("h", i, j + 1)
        return ("v", i, j)

    conn: dict = {}

    def connect(k1, k2):
        conn.setdefault(k1, []).append(k2)
        conn.setdefault(k2, []).append(k1)

    ci, cj = np.nonzero((case > 0) & (case < 15))
    for i, j in zip(ci, cj):
        cs = int(case[i, j])
        if cs in (5, 10):
            center = field.lam(np.array([xs[i] + cell / 2, ys[j] + cell / 2])) - z
            if cs == 5:  # corners a, c positive
                pairs = [(0, 1), (2, 3)] if center > 0 else [(0, 3), (1, 2)]
            else:        # corners b, d positive
                pairs = [(0, 3), (1, 2)] if center > 0 else [(0, 1), (2, 3)]
        else:
            pairs = _SEGMENTS[cs]
        for s1, s2 in pairs:
            connect(slot_key(i, j, s1), slot_key(i, j, s2))

    loops = _trace_loops(conn)
    if not loops:
        raise MultipleComponentsError(f"no closed contour at z={z}")

    def key_nodes(key):
        kind, i, j = key
        if kind == "h":
            return np.array([xs[i], ys[j]]), np.array([xs[i + 1], ys[j]])
        return np.array([xs[i], ys[j]]), np.array([xs[i], ys[j + 1]])

    selected = []
    for loop in loops:
        probe_keys = loop[:: max(1, len(loop) // 24)]
        pts = np.array([0.5 * (key_nodes(k)[0] + key_nodes(k)[1])
                        for k in probe_keys])
        ii, jj = graph.cell_index(pts)
        labels = graph.label_grid[ii, jj]
        # only cells of the same band are informative: near a critical level
        # the loop passes through collar, or neighbor-band, cells
        votes: dict[int, int] = {}
        for lab in labels:
            if lab >= 0 and _edge_contains(graph.edges[lab], z):
                votes[int(lab)] = votes.get(int(lab), 0) + 1
        if not votes:
            for p in pts[:3]:
                try:
                    votes[project(graph, field, p).edge_id] = 1
                    break
                except OutOfDomainError:
                    continue
        if votes and max(votes, key=votes.get) == edge_id:
            selected.append(loop)
    if len(selected) != 1:
        raise MultipleComponentsError(
            f"found {len(selected)} loops for edge {edge_id} at z={z}")
    loop = selected[0]

    p_lo = np.empty((len(loop), 2))
    p_hi = np.empty((len(loop), 2))
    for k, key in enumerate(loop):
        p_lo[k], p_hi[k] = key_nodes(key)
    f_lo = field.lam(p_lo) - z
    swap = f_lo > 0
    p_lo[swap], p_hi[swap] = p_hi[swap], p_lo[swap].copy()
    t_lo = np.zeros(len(loop))
    t_hi = np.ones(len(loop))
    base, direction = p_lo, p_hi - p_lo
    for _ in range(60):
        t_mid = 0.5 * (t_lo + t_hi)
        f_mid = field.lam(base + t_mid[:, None] * direction) - z
        neg = f_mid <= 0
        t_lo = np.where(neg, t_mid, t_lo)
        t_hi = np.where(neg, t_hi, t_mid)
        if np.abs(f_mid).max() < 1e-12:
            break
    pts = base + (0.5 * (t_lo + t_hi))[:, None] * direction

    # drop accidental duplicates, close, orient counterclockwise
    keep = np.linalg.norm(np.diff(pts, axis=0, append=pts[:1]), axis=1) > 1e-14
    pts = pts[keep]
    if len(pts) < 3:
        raise MultipleComponentsError("contour degenerated after dedup")
    area2 = float(np.sum(pts[:, 0] * np.roll(pts[:, 1], -1)
                         - np.roll(pts[:, 0], -1) * pts[:, 1]))
    if area2 < 0:
        pts = pts[::-1]
    closed = np.vstack([pts, pts[:1]])
    mids = 0.5 * (closed[:-1] + closed[1:])
    lens = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    return Contour(z=float(z), edge_id=edge_id, polyline=closed,
                   midpoints=mids, lengths=lens,
                   lam_mid=field.lam(mids), grad_mid=field.grad_lam(mids))
