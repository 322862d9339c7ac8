"""Pinhole camera model over the layout's cell coordinate system.

World axes: x along raster columns, y along rows, z up (all in cells). The
camera looks along its +z axis; image v grows downward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    position: np.ndarray  # (3,) cells
    rotation: np.ndarray  # (3, 3) world-from-camera, columns are camera axes

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        pos = np.ascontiguousarray(self.position, dtype=np.float64)
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3) or np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation must be orthonormal within 1e-9")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "rotation", rot)

    @staticmethod
    def look_at(
        position,
        target,
        up=(0.0, 0.0, 1.0),
        fx: float = 800.0,
        fy: float | None = None,
        width: int = 960,
        height: int = 540,
        cx: float | None = None,
        cy: float | None = None,
    ) -> "Camera":
        pos = np.asarray(position, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - pos
        n = np.linalg.norm(fwd)
        if n < 1e-12:
            raise ValueError("camera position and target coincide")
        fwd = fwd / n
        upv = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, upv)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            # Looking straight along up; pick an arbitrary horizontal right.
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
            rn = np.linalg.norm(right)
            if rn < 1e-12:
                right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
                rn = np.linalg.norm(right)
        right = right / rn
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        return Camera(
            fx=fx,
            fy=fy if fy is not None else fx,
            cx=cx if cx is not None else width / 2.0,
            cy=cy if cy is not None else height / 2.0,
            width=width,
            height=height,
            position=pos,
            rotation=rot,
        )

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Ray origin (3,) and unit directions (H*W, 3), row-major pixels."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        d = np.stack(
            [
                (uu - self.cx) / self.fx,
                (vv - self.cy) / self.fy,
                np.ones_like(uu),
            ],
            axis=-1,
        ).reshape(-1, 3)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return self.position.copy(), d @ self.rotation.T

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project world points: (u, v, z_cam). Points behind have z_cam <= 0."""
        rel = (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation
        z = rel[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * rel[:, 0] / z + self.cx
            v = self.fy * rel[:, 1] / z + self.cy
        return u, v, z


def camera_from_dict(d: dict) -> Camera:
    return Camera.look_at(
        position=d["position"],
        target=d["look_at"],
        up=d.get("up", (0.0, 0.0, 1.0)),
        fx=float(d["fx"]),
        fy=float(d.get("fy", d["fx"])),
        width=int(d.get("w", 960)),
        height=int(d.get("h", 540)),
        cx=float(d["cx"]) if "cx" in d else None,
        cy=float(d["cy"]) if "cy" in d else None,
    )


def load_camera(path: str | Path) -> Camera:
    return camera_from_dict(json.loads(Path(path).read_text()))
