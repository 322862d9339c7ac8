import numpy as np
import pytest

from cityforge.layout import CityLayout, HeightFieldPair, SemanticMap
from cityforge.semantics import SemanticClass


def make_layout(sem, bu, td, pixel_scale=0.5972):
    return CityLayout(
        SemanticMap(np.asarray(sem, dtype=np.uint8), pixel_scale),
        HeightFieldPair(np.asarray(bu, dtype=np.int32), np.asarray(td, dtype=np.int32)),
    )


def random_layout(rng, h, w, max_height=20, classes=(0, 1, 3, 4, 5)):
    """Random but invariant-respecting layout: NULL cells carry zero heights."""
    sem = rng.choice(np.array(classes, dtype=np.uint8), size=(h, w))
    bu = rng.integers(0, max_height // 2, size=(h, w)).astype(np.int32)
    td = bu + rng.integers(0, max_height // 2, size=(h, w)).astype(np.int32)
    null = sem == 0
    bu[null] = 0
    td[null] = 0
    return make_layout(sem, bu, td)


def materialize_volume(layout, depth):
    """Independent brute-force 3D label array straight from the slab rule."""
    h, w = layout.shape
    sem = layout.semantic.cells
    bu = layout.heights.bottom_up
    td = layout.heights.top_down
    vol = np.zeros((h, w, depth), dtype=np.uint8)
    k = np.arange(depth)
    occ = (sem[:, :, None] != 0) & (bu[:, :, None] <= k) & (k <= td[:, :, None])
    vol[occ] = np.broadcast_to(sem[:, :, None], occ.shape)[occ]
    return vol


def flood_fill_components(mask):
    """Pure-Python 4-connected component labeling (oracle for instantiation)."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    nxt = 0
    for si in range(h):
        for sj in range(w):
            if not mask[si, sj] or labels[si, sj]:
                continue
            nxt += 1
            stack = [(si, sj)]
            labels[si, sj] = nxt
            while stack:
                i, j = stack.pop()
                for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                    if 0 <= ni < h and 0 <= nj < w and mask[ni, nj] and not labels[ni, nj]:
                        labels[ni, nj] = nxt
                        stack.append((ni, nj))
    return labels, nxt


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
