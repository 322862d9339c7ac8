"""Depth-aware merge of background, building and vehicle renders.

Where layer masks are pairwise disjoint the result is the literal masked sum
of the layers, bit for bit. Real overlaps (a vehicle behind a building edge)
resolve to the nearest depth; ties within 1e-9 break vehicle > building >
background, then lower layer index, so composition is independent of the
order layers are supplied in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .renderer import RenderBuffers

DEPTH_TIE = 1e-9
_KIND_PRIORITY = {"background": 0, "building": 1, "vehicle": 2}


@dataclass
class LayerStack:
    background: RenderBuffers
    buildings: list[RenderBuffers] = field(default_factory=list)
    vehicles: list[RenderBuffers] = field(default_factory=list)

    def layers(self) -> list[tuple[str, int, RenderBuffers]]:
        out = [("background", 0, self.background)]
        out += [("building", i, b) for i, b in enumerate(self.buildings)]
        out += [("vehicle", i, v) for i, v in enumerate(self.vehicles)]
        return out


def compose(stack: LayerStack, sky_color=(0.576, 0.737, 0.905), mask_threshold: float = 0.5) -> RenderBuffers:
    """Merge the stack into one frame: nearest masked layer wins each pixel."""
    layers = stack.layers()
    h, w = stack.background.shape
    for _, _, buf in layers:
        if buf.shape != (h, w):
            raise ValueError("layer buffers disagree on image size")

    best_depth = np.full((h, w), np.inf)
    best_prio = np.full((h, w), -1, dtype=np.int64)
    best_idx = np.full((h, w), np.iinfo(np.int64).max, dtype=np.int64)
    winner = np.full((h, w), -1, dtype=np.int64)
    for li, (kind, idx, buf) in enumerate(layers):
        prio = _KIND_PRIORITY[kind]
        m = buf.mask(mask_threshold)
        with np.errstate(invalid="ignore"):
            closer = m & (buf.depth < best_depth - DEPTH_TIE)
            tied = m & (np.abs(buf.depth - best_depth) <= DEPTH_TIE)
        tie_win = tied & ((prio > best_prio) | ((prio == best_prio) & (idx < best_idx)))
        take = closer | tie_win
        best_depth[take] = buf.depth[take]
        best_prio[take] = prio
        best_idx[take] = idx
        winner[take] = li

    color = np.empty((h, w, 3))
    color[:] = np.asarray(sky_color)
    semantic = np.zeros((h, w), dtype=np.uint8)
    instance = np.zeros((h, w), dtype=np.int32)
    depth = np.full((h, w), np.inf)
    alpha = np.zeros((h, w))
    normal = np.zeros((h, w, 3))
    hit_t = np.full((h, w), np.inf)
    for li, (kind, idx, buf) in enumerate(layers):
        sel = winner == li
        if not sel.any():
            continue
        color[sel] = buf.color[sel]
        semantic[sel] = buf.semantic[sel]
        instance[sel] = buf.instance[sel]
        depth[sel] = buf.depth[sel]
        alpha[sel] = buf.alpha[sel]
        normal[sel] = buf.normal[sel]
        hit_t[sel] = buf.hit_t[sel]
    return RenderBuffers(
        color=color,
        semantic=semantic,
        instance=instance,
        depth=depth,
        alpha=alpha,
        normal=normal,
        hit_t=hit_t,
        energy_error=max(b.energy_error for _, _, b in layers),
    )


def masked_sum(stack: LayerStack) -> np.ndarray:
    """Literal masked sum of the layer colors (the disjoint-mask formula)."""
    total = np.zeros_like(stack.background.color)
    for _, _, buf in stack.layers():
        total += buf.color * buf.mask()[:, :, None]
    return total


def orbit_cameras(center, radius: float, height: float, n_frames: int, template) -> list:
    """Cameras on a circular orbit around `center`, all looking at it."""
    from .camera import Camera

    cams = []
    cx, cy, cz = (float(c) for c in center)
    for k in range(n_frames):
        ang = 2.0 * np.pi * k / n_frames
        pos = (cx + radius * np.cos(ang), cy + radius * np.sin(ang), cz + height)
        cams.append(
            Camera.look_at(
                position=pos,
                target=(cx, cy, cz),
                fx=template.fx,
                fy=template.fy,
                width=template.width,
                height=template.height,
                cx=template.cx,
                cy=template.cy,
            )
        )
    return cams
