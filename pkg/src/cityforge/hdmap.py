"""High-fidelity map extraction from the layout's semantic raster.

Pipeline: binarize the road mask, find road edges (Canny) and vectorize them,
thin the mask to a skeleton (Zhang-Suen), walk the skeleton into a centerline
graph with junction nodes, derive directed lanes from road widths, join lanes
across junctions with tangent-continuous cubic Bezier connectors, then place
road lines and signals.

Coordinates are layout pixels as (x, y) floats; widths are meters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .layout import DEFAULT_PIXEL_SCALE, CityLayout
from .semantics import SemanticClass

LANE_WIDTH_M = 3.5
CANNY_SIGMA = 1.0
CANNY_LOW = 0.1
CANNY_HIGH = 0.3
VECTORIZE_EPS = 1.5
CENTERLINE_EPS = 1.2

STYLE_SOLID_SINGLE_WHITE = "SOLID_SINGLE_WHITE"
STYLE_SOLID_DOUBLE_YELLOW = "SOLID_DOUBLE_YELLOW"
STYLE_BROKEN_SINGLE_WHITE = "BROKEN_SINGLE_WHITE"
ROAD_LINE_STYLES = (STYLE_SOLID_SINGLE_WHITE, STYLE_SOLID_DOUBLE_YELLOW, STYLE_BROKEN_SINGLE_WHITE)

KIND_STOP_SIGN = "STOP_SIGN"
KIND_TRAFFIC_LIGHT = "TRAFFIC_LIGHT"
TRAFFIC_LIGHT_MIN_LANES = 6
STOP_SIGN_MIN_LANES = 2

_BOX8 = np.ones((3, 3), dtype=bool)


# -- data model ---------------------------------------------------------------


@dataclass(frozen=True)
class RoadEdgeGraph:
    nodes: np.ndarray  # (N, 2) float (x, y)
    edges: np.ndarray  # (M, 2) int node index pairs


@dataclass(frozen=True)
class GraphNode:
    id: int
    position: tuple[float, float]
    junction: bool


@dataclass(frozen=True)
class Centerline:
    id: int
    points: np.ndarray  # (P, 2) float (x, y) px
    width_m: float
    start_node: int
    end_node: int
    highway: bool = False


@dataclass(frozen=True)
class Lane:
    id: int
    centerline_id: int
    offset_m: float  # signed perpendicular offset from the centerline
    direction: int  # +1 along the centerline, -1 against it
    points: np.ndarray  # (P, 2) float px, ordered along travel direction
    width_m: float
    start_node: int
    end_node: int
    highway: bool = False


@dataclass(frozen=True)
class Connector:
    id: int
    from_lane: int
    to_lane: int
    control: np.ndarray  # (4, 2) cubic Bezier control points


@dataclass(frozen=True)
class RoadLine:
    id: int
    style: str
    points: np.ndarray

    def __post_init__(self):
        if self.style not in ROAD_LINE_STYLES:
            raise ValueError(f"unknown road line style {self.style!r}")


@dataclass(frozen=True)
class SignalPlacement:
    id: int
    kind: str
    position: tuple[float, float]
    governed_lanes: tuple[int, ...]


@dataclass
class LaneGraph:
    nodes: list[GraphNode] = field(default_factory=list)
    centerlines: list[Centerline] = field(default_factory=list)
    lanes: list[Lane] = field(default_factory=list)
    connectors: list[Connector] = field(default_factory=list)


@dataclass
class HdMap:
    pixel_scale: float
    road_edges: RoadEdgeGraph
    graph: LaneGraph
    road_lines: list[RoadLine]
    signals: list[SignalPlacement]


# -- road mask & edges --------------------------------------------------------


def road_mask(semantic: np.ndarray) -> np.ndarray:
    return (semantic == SemanticClass.ROAD) | (semantic == SemanticClass.HIGHWAY)


def detect_road_edges(semantic: np.ndarray) -> np.ndarray:
    """Canny edges of the binarized ROAD/HIGHWAY mask.

    Gaussian blur sigma 1.0, Sobel gradients, quantized non-maximum
    suppression, double threshold at 0.1 / 0.3 of the maximum magnitude,
    hysteresis over 8-connected weak pixels.
    """
    mask = road_mask(np.asarray(semantic))
    if not mask.any():
        return np.zeros_like(mask)
    img = ndimage.gaussian_filter(mask.astype(np.float64), CANNY_SIGMA)
    gx = ndimage.sobel(img, axis=1)
    gy = ndimage.sobel(img, axis=0)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak == 0.0:
        return np.zeros_like(mask)
    theta = np.arctan2(gy, gx)
    off_i = np.rint(np.sin(theta)).astype(np.int64)
    off_j = np.rint(np.cos(theta)).astype(np.int64)
    h, w = mag.shape
    pad = np.pad(mag, 1, constant_values=0.0)
    ii, jj = np.mgrid[0:h, 0:w]
    fwd = pad[ii + 1 + off_i, jj + 1 + off_j]
    bwd = pad[ii + 1 - off_i, jj + 1 - off_j]
    nms = (mag >= fwd) & (mag >= bwd) & (mag > 0.0)
    strong = nms & (mag >= CANNY_HIGH * peak)
    weak = nms & (mag >= CANNY_LOW * peak)
    labels, _ = ndimage.label(weak, structure=_BOX8)
    keep = np.unique(labels[strong])
    keep = keep[keep > 0]
    return np.isin(labels, keep)


# -- polyline utilities -------------------------------------------------------


def _point_segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=-1)
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(pts - proj, axis=-1)


def douglas_peucker(points: np.ndarray, eps: float) -> np.ndarray:
    """Polyline simplification; max deviation from the input stays <= eps."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n <= 2:
        return pts.copy()
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _point_segment_distance(pts[lo + 1 : hi], pts[lo], pts[hi])
        k = int(np.argmax(d))
        if d[k] > eps:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((lo, mid))
            stack.append((mid, hi))
    return pts[keep]


def _simplify_chain(pts: np.ndarray, eps: float) -> np.ndarray:
    """Douglas-Peucker that keeps closed chains closed."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) > 3 and np.array_equal(pts[0], pts[-1]):
        d = np.linalg.norm(pts - pts[0], axis=1)
        k = int(np.argmax(d))
        if k == 0:
            return pts[[0, -1]]
        first = douglas_peucker(pts[: k + 1], eps)
        second = douglas_peucker(pts[k:], eps)
        return np.vstack([first, second[1:]])
    return douglas_peucker(pts, eps)


# -- edge vectorization -------------------------------------------------------

_NBR8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _remove_staircase_fillers(mask: np.ndarray) -> np.ndarray:
    """Drop pixels with exactly two mutually-adjacent neighbors.

    Such corner fillers make an 8-connected path locally ambiguous (two
    parallel 2-step routes), which splits chain tracing and fakes junctions.
    Removal keeps the two neighbors connected, so topology is preserved.
    """
    mask = mask.copy()
    h, w = mask.shape
    changed = True
    while changed:
        changed = False
        for i, j in zip(*np.nonzero(mask)):
            nbrs = []
            for di, dj in _NBR8:
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and mask[ni, nj]:
                    nbrs.append((ni, nj))
            if len(nbrs) == 2:
                (ai, aj), (bi, bj) = nbrs
                if max(abs(ai - bi), abs(aj - bj)) == 1:
                    mask[i, j] = False
                    changed = True
    return mask


def _neighbor_count(mask: np.ndarray) -> np.ndarray:
    p = np.pad(mask, 1).astype(np.int64)
    return (
        p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:]
        + p[1:-1, :-2] + p[1:-1, 2:]
        + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
    )


def _trace_chains(mask: np.ndarray) -> list[np.ndarray]:
    """Split a thin raster into 8-connected pixel chains.

    Chains run between break pixels (degree != 2); leftover pure cycles are
    traced from their first raster pixel and returned closed (first == last).
    Output points are (x, y).
    """
    mask = _remove_staircase_fillers(mask.astype(bool))
    h, w = mask.shape
    deg = _neighbor_count(mask)

    def nbrs(i, j):
        out = []
        for di, dj in _NBR8:
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and mask[ni, nj]:
                out.append((ni, nj))
        return out

    used = set()  # undirected pixel-pair edges already traversed
    chains: list[list[tuple[int, int]]] = []
    breaks = [(i, j) for i, j in zip(*np.nonzero(mask & (deg != 2)))]
    for start in breaks:
        for nxt in nbrs(*start):
            if frozenset((start, nxt)) in used:
                continue
            chain = [start, nxt]
            used.add(frozenset((start, nxt)))
            prev, cur = start, nxt
            while deg[cur] == 2:
                cont = [q for q in nbrs(*cur) if q != prev]
                if not cont:
                    break
                prev, cur = cur, cont[0]
                used.add(frozenset((prev, cur)))
                chain.append(cur)
            chains.append(chain)
    # Pure cycles: every pixel degree 2, untouched so far.
    touched = set()
    for c in chains:
        touched.update(c)
    for i, j in zip(*np.nonzero(mask & (deg == 2))):
        if (i, j) in touched:
            continue
        start = (i, j)
        chain = [start]
        prev: tuple[int, int] | None = None
        cur = start
        while True:
            cont = [q for q in nbrs(*cur) if q != prev]
            if not cont:
                break
            prev, cur = cur, cont[0]
            chain.append(cur)
            touched.add(cur)
            if cur == start:
                break
        chains.append(chain)
    # Isolated pixels (degree 0) carry no chain.
    return [np.array([(j, i) for i, j in c], dtype=np.float64) for c in chains if len(c) >= 2]


def vectorize_edges(edges: np.ndarray) -> RoadEdgeGraph:
    """Trace 8-connected edge chains and simplify them into a corner graph.

    Corners come from Douglas-Peucker at eps = 1.5 px, so every output
    polyline deviates from its raster chain by at most that.
    """
    chains = _trace_chains(edges)
    node_index: dict[tuple[float, float], int] = {}
    nodes: list[tuple[float, float]] = []
    out_edges: list[tuple[int, int]] = []

    def node_id(p) -> int:
        key = (float(p[0]), float(p[1]))
        if key not in node_index:
            node_index[key] = len(nodes)
            nodes.append(key)
        return node_index[key]

    for chain in chains:
        simp = _simplify_chain(chain, VECTORIZE_EPS)
        ids = [node_id(p) for p in simp]
        for a, b in zip(ids[:-1], ids[1:]):
            if a != b:
                out_edges.append((a, b))
    nodes_arr = np.array(nodes, dtype=np.float64) if nodes else np.zeros((0, 2))
    edges_arr = np.array(out_edges, dtype=np.int64) if out_edges else np.zeros((0, 2), dtype=np.int64)
    return RoadEdgeGraph(nodes_arr, edges_arr)


# -- skeletonization ----------------------------------------------------------


def _zhang_suen_pass(img: np.ndarray, phase: int) -> np.ndarray:
    p = np.pad(img, 1)
    P2 = p[:-2, 1:-1]
    P3 = p[:-2, 2:]
    P4 = p[1:-1, 2:]
    P5 = p[2:, 2:]
    P6 = p[2:, 1:-1]
    P7 = p[2:, :-2]
    P8 = p[1:-1, :-2]
    P9 = p[:-2, :-2]
    seq = [P2, P3, P4, P5, P6, P7, P8, P9]
    B = np.zeros(img.shape, dtype=np.int64)
    for s in seq:
        B += s
    A = np.zeros(img.shape, dtype=np.int64)
    for a, b in zip(seq, seq[1:] + seq[:1]):
        A += (~a) & b
    if phase == 0:
        c1 = ~(P2 & P4 & P6)
        c2 = ~(P4 & P6 & P8)
    else:
        c1 = ~(P2 & P4 & P8)
        c2 = ~(P2 & P6 & P8)
    return img & (B >= 2) & (B <= 6) & (A == 1) & c1 & c2


def _is_8_simple(img: np.ndarray, i: int, j: int) -> bool:
    """True when deleting (i, j) keeps its ring neighbors 8-connected.

    Counts the connected components of the foreground pixels in the 8-ring
    (geometric 8-adjacency between ring cells); exactly one component means
    the pixel is redundant for connectivity.
    """
    h, w = img.shape
    ring = []
    for di, dj in _NBR8:
        ni, nj = i + di, j + dj
        if 0 <= ni < h and 0 <= nj < w and img[ni, nj]:
            ring.append((ni, nj))
    if len(ring) < 2:
        return False
    seen = {ring[0]}
    stack = [ring[0]]
    cells = set(ring)
    while stack:
        ci, cj = stack.pop()
        for ni, nj in cells:
            if (ni, nj) not in seen and max(abs(ni - ci), abs(nj - cj)) == 1:
                seen.add((ni, nj))
                stack.append((ni, nj))
    return len(seen) == len(ring)


def _prune_square_blocks(img: np.ndarray) -> np.ndarray:
    """Remove leftover fully-set 2x2 blocks without breaking connectivity."""
    img = img.copy()
    for _ in range(64):
        blocks = img[:-1, :-1] & img[1:, :-1] & img[:-1, 1:] & img[1:, 1:]
        if not blocks.any():
            break
        progress = False
        for bi, bj in zip(*np.nonzero(blocks)):
            for di, dj in ((0, 0), (0, 1), (1, 0), (1, 1)):
                i, j = bi + di, bj + dj
                if not img[i, j]:
                    continue
                if not (
                    img[bi, bj] and img[bi + 1, bj] and img[bi, bj + 1] and img[bi + 1, bj + 1]
                ):
                    break
                if _is_8_simple(img, i, j):
                    img[i, j] = False
                    progress = True
                    break
        if not progress:
            break
    return img


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen two-subiteration thinning to a fixpoint.

    Thinning alone can dissolve blob-sized components (all four pixels of an
    isolated 2x2 square pass the deletion test simultaneously), so one seed
    pixel is restored per vanished component to keep the component count, and
    a cleanup pass removes any residual fully-set 2x2 block.
    """
    img = np.ascontiguousarray(mask, dtype=bool).copy()
    if not img.any():
        return img
    while True:
        changed = False
        for phase in (0, 1):
            kill = _zhang_suen_pass(img, phase)
            if kill.any():
                img[kill] = False
                changed = True
        if not changed:
            break
    labels, n = ndimage.label(mask, structure=_BOX8)
    if n:
        present = np.zeros(n + 1, dtype=bool)
        present[np.unique(labels[img])] = True
        for k in range(1, n + 1):
            if not present[k]:
                first = int(np.argmax(labels.ravel() == k))
                img.ravel()[first] = True
    return _remove_staircase_fillers(_prune_square_blocks(img))


# -- lane graph ---------------------------------------------------------------


def _cluster_adjacency(cluster_labels: np.ndarray, i: int, j: int) -> list[int]:
    h, w = cluster_labels.shape
    out = set()
    for di, dj in _NBR8:
        ni, nj = i + di, j + dj
        if 0 <= ni < h and 0 <= nj < w and cluster_labels[ni, nj] > 0:
            out.add(int(cluster_labels[ni, nj]))
    return sorted(out)


def build_lane_graph(
    skeleton: np.ndarray,
    half_width_px: np.ndarray,
    pixel_scale: float = DEFAULT_PIXEL_SCALE,
    highway_mask: np.ndarray | None = None,
) -> LaneGraph:
    """Walk the skeleton into centerlines between junctions, then derive lanes.

    Junction pixels are skeleton pixels with >= 3 skeleton neighbors; adjacent
    junction pixels merge into one node at their centroid. Each centerline's
    road width is twice the mean distance-transform value along its chain.
    """
    skel = skeleton.astype(bool)
    graph = LaneGraph()
    if not skel.any():
        return graph
    h, w = skel.shape
    deg = _neighbor_count(skel)
    junction = skel & (deg >= 3)
    clusters, n_clusters = ndimage.label(junction, structure=_BOX8)
    centroids = ndimage.center_of_mass(junction, clusters, range(1, n_clusters + 1)) if n_clusters else []
    cluster_node: dict[int, int] = {}
    for k, (ci, cj) in enumerate(centroids, start=1):
        cluster_node[k] = len(graph.nodes)
        graph.nodes.append(GraphNode(len(graph.nodes), (float(cj), float(ci)), junction=True))

    chain_mask = skel & ~junction
    chain_deg = np.zeros_like(deg)
    p = np.pad(chain_mask, 1).astype(np.int64)
    chain_deg = (
        p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:] + p[1:-1, :-2] + p[1:-1, 2:]
        + p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
    )

    def chain_nbrs(i, j):
        out = []
        for di, dj in _NBR8:
            ni, nj = i + di, j + dj
            if 0 <= ni < h and 0 <= nj < w and chain_mask[ni, nj]:
                out.append((ni, nj))
        return out

    endpoint_node: dict[tuple[int, int], int] = {}

    def node_for_pixel(px) -> int:
        if px not in endpoint_node:
            endpoint_node[px] = len(graph.nodes)
            graph.nodes.append(GraphNode(len(graph.nodes), (float(px[1]), float(px[0])), junction=False))
        return endpoint_node[px]

    visited = np.zeros_like(chain_mask)
    raw_chains: list[tuple[int, list[tuple[int, int]], int]] = []  # (start_node, pixels, end_node)

    def walk(start_px, start_cluster: int | None):
        pixels = [start_px]
        visited[start_px] = True
        prev = None
        cur = start_px
        while True:
            adj = _cluster_adjacency(clusters, *cur)
            if start_cluster is not None and len(pixels) == 1:
                adj = [a for a in adj if a != start_cluster]
            if adj:
                return pixels, ("cluster", adj[0])
            nxt = [q for q in chain_nbrs(*cur) if q != prev and not visited[q]]
            if not nxt:
                return pixels, ("endpoint", cur)
            prev, cur = cur, nxt[0]
            visited[cur] = True
            pixels.append(cur)

    # Chains emanating from junction clusters.
    if n_clusters:
        adj_any = ndimage.binary_dilation(junction, structure=_BOX8) & chain_mask
        for i, j in zip(*np.nonzero(adj_any)):
            if visited[i, j]:
                continue
            start_cluster = _cluster_adjacency(clusters, i, j)[0]
            pixels, end = walk((i, j), start_cluster)
            start_node = cluster_node[start_cluster]
            end_node = cluster_node[end[1]] if end[0] == "cluster" else node_for_pixel(end[1])
            raw_chains.append((start_node, pixels, end_node))
    # Free chains starting at endpoints.
    for i, j in zip(*np.nonzero(chain_mask & (chain_deg <= 1))):
        if visited[i, j]:
            continue
        pixels, end = walk((i, j), None)
        start_node = node_for_pixel((i, j))
        end_node = cluster_node[end[1]] if end[0] == "cluster" else node_for_pixel(end[1])
        raw_chains.append((start_node, pixels, end_node))
    # Pure cycles.
    for i, j in zip(*np.nonzero(chain_mask)):
        if visited[i, j]:
            continue
        pixels, end = walk((i, j), None)
        anchor = node_for_pixel((i, j))
        end_node = cluster_node[end[1]] if end[0] == "cluster" else node_for_pixel(end[1])
        raw_chains.append((anchor, pixels, end_node))

    half = np.asarray(half_width_px, dtype=np.float64)
    for start_node, pixels, end_node in raw_chains:
        pix = np.array(pixels, dtype=np.int64)
        width_m = 2.0 * float(half[pix[:, 0], pix[:, 1]].mean()) * pixel_scale
        pts = np.array([(float(j), float(i)) for i, j in pixels], dtype=np.float64)
        head = np.asarray(graph.nodes[start_node].position, dtype=np.float64)
        tail = np.asarray(graph.nodes[end_node].position, dtype=np.float64)
        if np.linalg.norm(pts[0] - head) > 1e-9:
            pts = np.vstack([head, pts])
        if np.linalg.norm(pts[-1] - tail) > 1e-9:
            pts = np.vstack([pts, tail])
        pts = _simplify_chain(pts, CENTERLINE_EPS)
        if len(pts) < 2:
            continue
        hw = False
        if highway_mask is not None:
            hw = bool(highway_mask[pix[:, 0], pix[:, 1]].mean() > 0.5)
        # Set lanes back from junction nodes so connectors have a real span.
        setback = 0.75 * width_m / pixel_scale
        pts = _trim_polyline(
            pts,
            setback if graph.nodes[start_node].junction else 0.0,
            setback if graph.nodes[end_node].junction else 0.0,
        )
        if len(pts) < 2 or np.linalg.norm(pts[-1] - pts[0]) < 1e-9:
            continue
        cl = Centerline(len(graph.centerlines), pts, width_m, start_node, end_node, hw)
        graph.centerlines.append(cl)
        for lane in derive_lanes(cl, width_m, pixel_scale, next_id=len(graph.lanes)):
            graph.lanes.append(lane)
    return graph


def _trim_polyline(points: np.ndarray, trim_start: float, trim_end: float) -> np.ndarray:
    """Cut arc length off both ends (each trim capped to 40% of the length)."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    total = float(seg.sum())
    if total <= 1e-9:
        return pts.copy()
    trim_start = min(max(trim_start, 0.0), 0.4 * total)
    trim_end = min(max(trim_end, 0.0), 0.4 * total)
    cum = np.concatenate([[0.0], np.cumsum(seg)])

    def point_at(arc):
        k = int(np.searchsorted(cum, arc, side="right") - 1)
        k = min(k, len(pts) - 2)
        denom = cum[k + 1] - cum[k]
        t = 0.0 if denom <= 0 else (arc - cum[k]) / denom
        return pts[k] + t * (pts[k + 1] - pts[k]), k

    a, b = trim_start, total - trim_end
    pa, ka = point_at(a)
    pb, kb = point_at(b)
    middle = pts[ka + 1 : kb + 1]
    out = [pa] + [p for p in middle if not np.allclose(p, pa) and not np.allclose(p, pb)] + [pb]
    return np.asarray(out)


def _vertex_normals(points: np.ndarray) -> np.ndarray:
    """Miter unit normals: offsetting by d along them keeps a perpendicular
    distance of exactly d to both adjacent segments at every vertex."""
    d = np.diff(points, axis=0)
    seg = d / np.linalg.norm(d, axis=1, keepdims=True)
    seg_n = np.stack([seg[:, 1], -seg[:, 0]], axis=1)  # right of travel
    normals = np.empty_like(points)
    normals[0] = seg_n[0]
    normals[-1] = seg_n[-1]
    if len(points) > 2:
        avg = seg_n[:-1] + seg_n[1:]
        norm = np.linalg.norm(avg, axis=1, keepdims=True)
        avg = np.where(norm > 1e-12, avg / np.maximum(norm, 1e-12), seg_n[:-1])
        cos_half = np.clip(np.abs(np.sum(avg * seg_n[:-1], axis=1)), 0.5, 1.0)
        normals[1:-1] = avg / cos_half[:, None]
    return normals


def offset_polyline(points: np.ndarray, offset_px: float) -> np.ndarray:
    if abs(offset_px) < 1e-12:
        return points.copy()
    return points + offset_px * _vertex_normals(points)


def derive_lanes(
    centerline: Centerline | np.ndarray,
    width_m: float,
    pixel_scale: float = DEFAULT_PIXEL_SCALE,
    next_id: int = 0,
) -> list[Lane]:
    """Directed lanes for one centerline.

    n = max(1, floor(width / 3.5)) lanes at 3.5 m spacing, centered on the
    centerline. Travel directions split evenly, the extra lane going forward;
    forward lanes take the most negative offsets (right-hand side of travel).
    """
    if width_m <= 0:
        raise ValueError("road width must be positive")
    if isinstance(centerline, Centerline):
        pts = centerline.points
        cl_id, start, end, hw = centerline.id, centerline.start_node, centerline.end_node, centerline.highway
    else:
        pts = np.asarray(centerline, dtype=np.float64)
        cl_id, start, end, hw = -1, -1, -1, False
    n = max(1, int(math.floor(width_m / LANE_WIDTH_M + 1e-9)))
    n_forward = (n + 1) // 2
    lanes = []
    for idx in range(n):
        offset_m = (idx - (n - 1) / 2.0) * LANE_WIDTH_M
        forward = idx < n_forward
        poly = offset_polyline(pts, offset_m / pixel_scale)
        if not forward:
            poly = poly[::-1].copy()
        lanes.append(
            Lane(
                id=next_id + idx,
                centerline_id=cl_id,
                offset_m=offset_m,
                direction=1 if forward else -1,
                points=poly,
                width_m=LANE_WIDTH_M,
                start_node=start if forward else end,
                end_node=end if forward else start,
                highway=hw,
            )
        )
    return lanes


# -- connectors ---------------------------------------------------------------


def bezier_point(control: np.ndarray, t) -> np.ndarray:
    """Cubic Bezier point(s) by the Bernstein form."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    p0, p1, p2, p3 = control
    mt = 1.0 - t
    return mt**3 * p0 + 3 * mt**2 * t * p1 + 3 * mt * t**2 * p2 + t**3 * p3


def bezier_tangent(control: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)[..., None]
    p0, p1, p2, p3 = control
    mt = 1.0 - t
    return 3 * mt**2 * (p1 - p0) + 6 * mt * t * (p2 - p1) + 3 * t**2 * (p3 - p2)


def connect_intersections(graph: LaneGraph) -> LaneGraph:
    """Join lane ends across every junction with G1 cubic Bezier connectors.

    For each legal turn (incoming lane -> outgoing lane at one node, U-turns
    onto the same centerline excluded), control points sit along the lane
    tangents at one third of the endpoint distance, which makes the connector
    tangent-continuous at both ends by construction.
    """
    graph.connectors.clear()
    by_end: dict[int, list[Lane]] = {}
    by_start: dict[int, list[Lane]] = {}
    for lane in graph.lanes:
        by_end.setdefault(lane.end_node, []).append(lane)
        by_start.setdefault(lane.start_node, []).append(lane)
    cid = 0
    for node in graph.nodes:
        if not node.junction:
            continue
        for lane_in in by_end.get(node.id, []):
            for lane_out in by_start.get(node.id, []):
                if lane_in.centerline_id == lane_out.centerline_id:
                    continue  # U-turn back onto the same road
                p0 = lane_in.points[-1]
                p3 = lane_out.points[0]
                d = float(np.linalg.norm(p3 - p0))
                t_in = lane_in.points[-1] - lane_in.points[-2]
                t_in = t_in / np.linalg.norm(t_in)
                t_out = lane_out.points[1] - lane_out.points[0]
                t_out = t_out / np.linalg.norm(t_out)
                control = np.array([p0, p0 + t_in * d / 3.0, p3 - t_out * d / 3.0, p3])
                graph.connectors.append(Connector(cid, lane_in.id, lane_out.id, control))
                cid += 1
    return graph


# -- road lines and signals ---------------------------------------------------


def place_road_lines(graph: LaneGraph, pixel_scale: float = DEFAULT_PIXEL_SCALE) -> list[RoadLine]:
    """Per-centerline markings.

    Double yellow between opposing direction groups, broken white between
    same-direction neighbors, solid white half a lane outside the outer lanes.
    """
    lines: list[RoadLine] = []
    lid = 0

    def add(style: str, pts: np.ndarray):
        nonlocal lid
        lines.append(RoadLine(lid, style, pts))
        lid += 1

    for cl in graph.centerlines:
        lanes = sorted(
            (l for l in graph.lanes if l.centerline_id == cl.id), key=lambda l: l.offset_m
        )
        if not lanes:
            continue
        offsets = [l.offset_m for l in lanes]
        fwd = [l for l in lanes if l.direction == 1]
        rev = [l for l in lanes if l.direction == -1]
        if fwd and rev:
            boundary = (max(l.offset_m for l in fwd) + min(l.offset_m for l in rev)) / 2.0
            add(STYLE_SOLID_DOUBLE_YELLOW, offset_polyline(cl.points, boundary / pixel_scale))
        for a, b in zip(lanes[:-1], lanes[1:]):
            if a.direction == b.direction:
                mid = (a.offset_m + b.offset_m) / 2.0
                add(STYLE_BROKEN_SINGLE_WHITE, offset_polyline(cl.points, mid / pixel_scale))
        add(STYLE_SOLID_SINGLE_WHITE, offset_polyline(cl.points, (min(offsets) - LANE_WIDTH_M / 2) / pixel_scale))
        add(STYLE_SOLID_SINGLE_WHITE, offset_polyline(cl.points, (max(offsets) + LANE_WIDTH_M / 2) / pixel_scale))
    return lines


def place_signals(graph: LaneGraph) -> list[SignalPlacement]:
    """Signals at junction nodes, sized by how many lanes touch the node."""
    signals: list[SignalPlacement] = []
    sid = 0
    for node in graph.nodes:
        if not node.junction:
            continue
        incident = [l for l in graph.lanes if node.id in (l.start_node, l.end_node)]
        incoming = tuple(sorted(l.id for l in incident if l.end_node == node.id))
        if len(incident) >= TRAFFIC_LIGHT_MIN_LANES:
            kind = KIND_TRAFFIC_LIGHT
        elif len(incident) >= STOP_SIGN_MIN_LANES:
            kind = KIND_STOP_SIGN
        else:
            continue
        signals.append(SignalPlacement(sid, kind, node.position, incoming))
        sid += 1
    return signals


# -- pipeline & serialization -------------------------------------------------


def build_hdmap(layout: CityLayout) -> HdMap:
    """Full HD-map derivation from a city layout. Deterministic."""
    sem = layout.semantic.cells
    ps = layout.pixel_scale
    mask = road_mask(sem)
    edge_graph = vectorize_edges(detect_road_edges(sem))
    skel = skeletonize(mask)
    half = ndimage.distance_transform_edt(mask)
    highway = sem == SemanticClass.HIGHWAY
    graph = build_lane_graph(skel, half, ps, highway_mask=highway)
    graph = connect_intersections(graph)
    lines = place_road_lines(graph, ps)
    signals = place_signals(graph)
    return HdMap(ps, edge_graph, graph, lines, signals)


def _pts(arr: np.ndarray) -> list[list[float]]:
    return [[round(float(x), 6), round(float(y), 6)] for x, y in np.asarray(arr).reshape(-1, 2)]


def hdmap_to_dict(hd: HdMap) -> dict:
    return {
        "pixel_scale": round(hd.pixel_scale, 9),
        "road_edges": {
            "nodes": _pts(hd.road_edges.nodes),
            "edges": [[int(a), int(b)] for a, b in hd.road_edges.edges],
        },
        "nodes": [
            {"id": n.id, "position": [round(n.position[0], 6), round(n.position[1], 6)], "junction": n.junction}
            for n in hd.graph.nodes
        ],
        "centerlines": [
            {
                "id": c.id,
                "points": _pts(c.points),
                "width_m": round(c.width_m, 6),
                "start_node": c.start_node,
                "end_node": c.end_node,
                "highway": c.highway,
            }
            for c in hd.graph.centerlines
        ],
        "lanes": [
            {
                "id": l.id,
                "centerline": l.centerline_id,
                "offset_m": round(l.offset_m, 6),
                "direction": l.direction,
                "points": _pts(l.points),
                "width_m": l.width_m,
                "start_node": l.start_node,
                "end_node": l.end_node,
                "highway": l.highway,
            }
            for l in hd.graph.lanes
        ],
        "connectors": [
            {"id": c.id, "from_lane": c.from_lane, "to_lane": c.to_lane, "control": _pts(c.control)}
            for c in hd.graph.connectors
        ],
        "road_lines": [
            {"id": r.id, "style": r.style, "points": _pts(r.points)} for r in hd.road_lines
        ],
        "signals": [
            {
                "id": s.id,
                "kind": s.kind,
                "position": [round(s.position[0], 6), round(s.position[1], 6)],
                "governed_lanes": list(s.governed_lanes),
            }
            for s in hd.signals
        ],
    }


def save_hdmap(hd: HdMap, path: str | Path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(hdmap_to_dict(hd), sort_keys=True, indent=1) + "\n")
    return p


def load_hdmap(path: str | Path) -> HdMap:
    obj = json.loads(Path(path).read_text())
    graph = LaneGraph(
        nodes=[GraphNode(n["id"], tuple(n["position"]), n["junction"]) for n in obj["nodes"]],
        centerlines=[
            Centerline(
                c["id"], np.array(c["points"]), c["width_m"], c["start_node"], c["end_node"], c["highway"]
            )
            for c in obj["centerlines"]
        ],
        lanes=[
            Lane(
                l["id"], l["centerline"], l["offset_m"], l["direction"], np.array(l["points"]),
                l["width_m"], l["start_node"], l["end_node"], l["highway"],
            )
            for l in obj["lanes"]
        ],
        connectors=[
            Connector(c["id"], c["from_lane"], c["to_lane"], np.array(c["control"]))
            for c in obj["connectors"]
        ],
    )
    edges = RoadEdgeGraph(
        np.array(obj["road_edges"]["nodes"], dtype=np.float64).reshape(-1, 2),
        np.array(obj["road_edges"]["edges"], dtype=np.int64).reshape(-1, 2),
    )
    lines = [RoadLine(r["id"], r["style"], np.array(r["points"])) for r in obj["road_lines"]]
    signals = [
        SignalPlacement(s["id"], s["kind"], tuple(s["position"]), tuple(s["governed_lanes"]))
        for s in obj["signals"]
    ]
    return HdMap(obj["pixel_scale"], edges, graph, lines, signals)
