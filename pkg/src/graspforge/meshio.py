"""Plain-text OBJ and ASCII PLY reading and writing for triangle meshes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import TriMesh


def format_obj(mesh: TriMesh) -> str:
    # %.9g round-trips float32 exactly and keeps the output byte-stable
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    return "\n".join(lines) + "\n"


def write_obj(mesh: TriMesh, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_obj(mesh))


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(t.split("/")[0]) for t in parts[1:]]
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if len(idx) < 3:
                raise ValueError(f"{path}:{lineno}: face with fewer than 3 vertices")
            for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts or not faces:
        raise ValueError(f"{path}: no mesh data")
    return TriMesh(np.array(verts), np.array(faces))


def read_ply(path) -> TriMesh:
    """ASCII PLY with vertex x/y/z and a face vertex_indices list."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n_v = n_f = 0
    i = 1
    while lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:1] == ["format"] and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            n_v = int(parts[2])
        if parts[:2] == ["element", "face"]:
            n_f = int(parts[2])
        i += 1
    body = lines[i + 1:]
    verts = np.array([[float(t) for t in body[k].split()[:3]] for k in range(n_v)])
    faces = []
    for k in range(n_v, n_v + n_f):
        vals = [int(t) for t in body[k].split()]
        idx = vals[1:1 + vals[0]]
        for j in range(1, len(idx) - 1):
            faces.append([idx[0], idx[j], idx[j + 1]])
    return TriMesh(verts, np.array(faces))


def write_ply(mesh: TriMesh, path) -> None:
    header = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
              "property float x", "property float y", "property float z",
              f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    body = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_mesh(path) -> TriMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise ValueError(f"unsupported mesh format {suffix!r} (expected .obj or .ply)")
