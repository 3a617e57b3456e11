# services/annotation_service.py (Labelme interchange)
"""
Labelme JSON <-> LabelMask conversion.

Coordinates follow the Labelme image convention: the pixel in row r, column c
has its centre at (x=c, y=r). A pixel belongs to a polygon when its centre is
inside under the even-odd rule or lies on the polygon outline. Exported
polygons run along cell edges (half-integer coordinates), so no pixel centre
ever sits on an exported outline and read(write(mask)) reproduces the mask.
"""
import copy
import json
import logging
import os
from collections import defaultdict, deque

import numpy as np

from backend.app.ml.pseudo_label import IGNORE, LabelMask
from backend.app.utils.error_handlers import AnnotationError, StorageError

logger = logging.getLogger(__name__)

LABELME_VERSION = "5.2.1"
EDGE_TOLERANCE = 1e-9

# Clockwise cell outline in corner-index space (y grows downwards):
# (neighbour offset, edge start, edge end) relative to the cell's top-left corner.
_CELL_EDGES = (
    ((-1, 0), (0, 0), (1, 0)),   # top
    ((0, 1), (1, 0), (1, 1)),    # right
    ((1, 0), (1, 1), (0, 1)),    # bottom
    ((0, -1), (0, 1), (0, 0)),   # left
)


def rasterize_polygon(points, height, width):
    """
    Boolean H x W coverage of one polygon

    Args:
        points (array-like): N x 2 (x, y) vertices, N >= 3
        height (int): canvas rows
        width (int): canvas columns

    Returns:
        np.ndarray: True where the pixel centre is inside (even-odd) or on the outline
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise AnnotationError(f"polygon needs at least 3 (x, y) points, got {len(pts)}")
    if not np.all(np.isfinite(pts)):
        raise AnnotationError("polygon has non-finite coordinates")
    # out-of-canvas points are clipped to the canvas extent
    pts[:, 0] = np.clip(pts[:, 0], -0.5, width - 0.5)
    pts[:, 1] = np.clip(pts[:, 1], -0.5, height - 0.5)

    coverage = np.zeros((height, width), dtype=bool)
    x0, y0 = np.floor(pts.min(axis=0)).astype(int)
    x1, y1 = np.ceil(pts.max(axis=0)).astype(int)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width - 1), min(y1, height - 1)
    if x0 > x1 or y0 > y1:
        return coverage

    py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    px = px.reshape(1, -1).astype(np.float64)
    py = py.reshape(1, -1).astype(np.float64)
    start = pts[:, None, :]
    end = np.roll(pts, -1, axis=0)[:, None, :]
    sx, sy = start[..., 0], start[..., 1]
    ex, ey = end[..., 0], end[..., 1]

    spans = (sy > py) != (ey > py)
    dy = np.where(ey != sy, ey - sy, 1.0)
    crossing_x = sx + (py - sy) * (ex - sx) / dy
    inside = np.logical_xor.reduce(spans & (px < crossing_x), axis=0)

    cross = (ex - sx) * (py - sy) - (ey - sy) * (px - sx)
    length = np.hypot(ex - sx, ey - sy)
    on_line = np.abs(cross) <= EDGE_TOLERANCE * np.maximum(length, 1.0)
    within = (
        (px >= np.minimum(sx, ex) - EDGE_TOLERANCE) & (px <= np.maximum(sx, ex) + EDGE_TOLERANCE)
        & (py >= np.minimum(sy, ey) - EDGE_TOLERANCE) & (py <= np.maximum(sy, ey) + EDGE_TOLERANCE)
    )
    on_edge = np.any(on_line & within, axis=0)

    coverage[y0:y1 + 1, x0:x1 + 1] = (inside | on_edge).reshape(y1 - y0 + 1, x1 - x0 + 1)
    return coverage


def _parse_document(document):
    if isinstance(document, dict):
        return document
    if isinstance(document, (str, bytes)) and str(document).lstrip().startswith("{"):
        try:
            return json.loads(document)
        except json.JSONDecodeError as e:
            raise AnnotationError(f"annotation is not valid JSON: {e}") from e
    return load_labelme(document)


def read_labelme(document, cm, height=None, width=None):
    """
    Rasterize a Labelme annotation into a LabelMask

    Args:
        document (dict | str): parsed document, JSON text, or a file path
        cm (ClassMap): label name -> class index
        height (int): canvas rows (defaults to imageHeight)
        width (int): canvas columns (defaults to imageWidth)

    Returns:
        LabelMask: shapes painted in file order on an all-IGNORE canvas
    """
    doc = _parse_document(document)
    height = height if height is not None else doc.get("imageHeight")
    width = width if width is not None else doc.get("imageWidth")
    if height is None or width is None:
        raise AnnotationError("canvas size missing: pass height/width or set imageHeight/imageWidth")
    for key, expected in (("imageHeight", height), ("imageWidth", width)):
        if doc.get(key) is not None and int(doc[key]) != int(expected):
            raise AnnotationError(f"{key} {doc[key]} does not match canvas size {expected}")

    canvas = np.full((int(height), int(width)), IGNORE, dtype=np.uint8)
    shapes = doc.get("shapes") or []
    for position, shape in enumerate(shapes):
        shape_type = shape.get("shape_type") or "polygon"
        if shape_type != "polygon":
            raise AnnotationError(f"shape {position}: unsupported shape_type '{shape_type}'")
        label = shape.get("label")
        index = cm.index_of(label)
        points = shape.get("points") or []
        if len(points) < 3:
            raise AnnotationError(
                f"shape {position} ('{label}') has {len(points)} points, a polygon needs 3"
            )
        canvas[rasterize_polygon(points, int(height), int(width))] = index
    return LabelMask(canvas)


def connected_regions(values):
    """
    Maximal 4-connected same-class regions, IGNORE excluded

    Returns:
        list: (class index, boolean mask) in raster order of each region's first pixel
    """
    values = np.asarray(values)
    height, width = values.shape
    seen = np.zeros_like(values, dtype=bool)
    regions = []
    for r in range(height):
        for c in range(width):
            cls = values[r, c]
            if seen[r, c] or cls == IGNORE:
                continue
            region = np.zeros_like(seen)
            queue = deque([(r, c)])
            seen[r, c] = True
            while queue:
                y, x = queue.popleft()
                region[y, x] = True
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < height and 0 <= nx < width and not seen[ny, nx] and values[ny, nx] == cls:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            regions.append((int(cls), region))
    return regions


def _boundary_loops(region):
    """Closed loops of cell-edge corners (corner-index space) around a region."""
    height, width = region.shape
    outgoing = defaultdict(list)
    rows, cols = np.nonzero(region)
    for r, c in zip(rows.tolist(), cols.tolist()):
        for (dr, dc), (sx, sy), (ex, ey) in _CELL_EDGES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < height and 0 <= nc < width and region[nr, nc]:
                continue
            outgoing[(c + sx, r + sy)].append((c + ex, r + ey))

    loops = []
    while outgoing:
        start = min(outgoing)
        loop = [start]
        vertex = start
        while True:
            targets = outgoing[vertex]
            nxt = targets.pop()
            if not targets:
                del outgoing[vertex]
            vertex = nxt
            if vertex == start:
                break
            loop.append(vertex)
        loops.append(_drop_collinear(loop))
    return loops


def _drop_collinear(loop):
    kept = []
    count = len(loop)
    for i, vertex in enumerate(loop):
        prev, nxt = loop[i - 1], loop[(i + 1) % count]
        d1 = (vertex[0] - prev[0], vertex[1] - prev[1])
        d2 = (nxt[0] - vertex[0], nxt[1] - vertex[1])
        if d1[0] * d2[1] - d1[1] * d2[0] != 0 or d1[0] * d2[0] + d1[1] * d2[1] < 0:
            kept.append(vertex)
    return kept


def region_polygon(region):
    """
    One even-odd polygon covering exactly the region's pixels.

    Holes are separate boundary loops joined to the first loop by axis-aligned
    connectors that are walked out and back, so they cancel under even-odd.
    """
    loops = _boundary_loops(region)
    first = loops[0]
    path = list(first)
    if len(loops) > 1:
        anchor = first[0]
        path.append(anchor)
        for loop in loops[1:]:
            elbow = (loop[0][0], anchor[1])
            path.extend([elbow] + loop + [loop[0], elbow, anchor])
        path.pop()
    return [[x - 0.5, y - 0.5] for x, y in path]


def write_labelme(mask, cm, image_path=None, base=None):
    """
    Export a LabelMask as a Labelme document

    Args:
        mask (LabelMask): mask to export
        cm (ClassMap): class index -> label name
        image_path (str): optional imagePath recorded in the document
        base (dict): existing document whose unknown fields are kept

    Returns:
        dict: Labelme JSON document, one polygon per 4-connected region
    """
    values = mask.values if isinstance(mask, LabelMask) else LabelMask(mask).values
    height, width = values.shape
    shapes = []
    for cls, region in connected_regions(values):
        shapes.append({
            "label": cm.name_of(cls),
            "points": region_polygon(region),
            "group_id": None,
            "description": "",
            "shape_type": "polygon",
            "flags": {},
        })

    document = copy.deepcopy(base) if base else {}
    document.setdefault("version", LABELME_VERSION)
    document.setdefault("flags", {})
    document["shapes"] = shapes
    if image_path is not None or "imagePath" not in document:
        document["imagePath"] = image_path
    # embedded image payloads are never written
    document["imageData"] = None
    document["imageHeight"] = int(height)
    document["imageWidth"] = int(width)
    return document


def save_labelme(path, document, force=True):
    if not force and os.path.exists(path):
        raise StorageError(f"refusing to overwrite '{path}' (use --force)")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        with open(path, "w") as handle:
            json.dump(document, handle, indent=2)
    except OSError as e:
        raise StorageError(f"cannot write annotation '{path}': {e.strerror or e}") from e
    return path


def load_labelme(path):
    try:
        with open(path) as handle:
            return json.load(handle)
    except OSError as e:
        raise StorageError(f"cannot read annotation '{path}': {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise AnnotationError(f"annotation '{path}' is not valid JSON: {e}") from e


def labelme_path(directory, image_id):
    return os.path.join(directory, f"{image_id}.json")
