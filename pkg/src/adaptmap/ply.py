"""PLY export of meshes and labelled point sets (plyfile does the encoding)."""
from __future__ import annotations

import numpy as np
from plyfile import PlyData, PlyElement

from .mesher import Mesh

_VERTEX = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"),
           ("blue", "u1"), ("label", "<u2")]


def _vertex_element(points, colors, labels) -> PlyElement:
    v = np.empty(len(points), dtype=_VERTEX)
    for i, name in enumerate("xyz"):
        v[name] = points[:, i]
    for i, name in enumerate(("red", "green", "blue")):
        v[name] = colors[:, i]
    v["label"] = labels
    return PlyElement.describe(v, "vertex")


def write_mesh_ply(path, mesh: Mesh, binary: bool = True):
    faces = np.empty(len(mesh.triangles), dtype=[("vertex_indices", "i4", (3,))])
    faces["vertex_indices"] = mesh.triangles
    elems = [_vertex_element(mesh.vertices, mesh.colors, mesh.labels),
             PlyElement.describe(faces, "face")]
    PlyData(elems, text=not binary, byte_order="<").write(str(path))


def read_mesh_ply(path) -> Mesh:
    ply = PlyData.read(str(path))
    v = ply["vertex"].data
    tris = np.zeros((0, 3), dtype=np.int64)
    if "face" in ply and len(ply["face"].data):
        tris = np.vstack(ply["face"].data["vertex_indices"]).astype(np.int64)
    return Mesh(np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64),
                np.column_stack([v["red"], v["green"], v["blue"]]).astype(np.uint8),
                np.asarray(v["label"], dtype=np.uint16), tris)


def write_points_ply(path, points, labels, colors=None, binary: bool = True):
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    colors = np.zeros((len(points), 3), np.uint8) if colors is None else colors
    PlyData([_vertex_element(points, colors, labels)], text=not binary, byte_order="<").write(str(path))


def read_points_ply(path) -> tuple[np.ndarray, np.ndarray]:
    v = PlyData.read(str(path))["vertex"].data
    return (np.column_stack([v["x"], v["y"], v["z"]]).astype(np.float64),
            np.asarray(v["label"], dtype=np.int64))
