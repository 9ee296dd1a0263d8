"""Wavefront OBJ import/export for triangle meshes with optional UVs and normals."""

from dataclasses import dataclass

import numpy as np

from .errors import IoFailure


@dataclass
class ObjData:
    """Raw parsed OBJ contents. Indices are 0-based after parsing."""

    vertices: np.ndarray                 # (n, 3) float64
    uvs: np.ndarray | None               # (k, 2) float64 or None
    normals: np.ndarray | None           # (m, 3) float64 or None
    faces: np.ndarray                    # (f, 3) vertex indices
    face_uvs: np.ndarray | None = None   # (f, 3) uv indices or None
    face_normals: np.ndarray | None = None
    name: str = ""


def _parse_face_token(token: str):
    # forms: v | v/vt | v//vn | v/vt/vn  (1-based, may be negative)
    parts = token.split("/")
    v = int(parts[0])
    vt = int(parts[1]) if len(parts) > 1 and parts[1] else None
    vn = int(parts[2]) if len(parts) > 2 and parts[2] else None
    return v, vt, vn


def _resolve(index: int, count: int) -> int:
    # OBJ allows negative (relative) indices
    return index - 1 if index > 0 else count + index


def read_obj(path) -> ObjData:
    """Parse an OBJ file; triangulates polygonal faces with a fan."""
    try:
        with open(path, "r") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoFailure(f"cannot read OBJ file {path}: {exc}") from exc

    verts, uvs, normals = [], [], []
    faces, face_uvs, face_normals = [], [], []
    name = ""
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        tag, rest = fields[0], fields[1:]
        if tag == "v":
            if len(rest) < 3:
                raise IoFailure(f"{path}:{lineno}: vertex needs 3 coordinates")
            verts.append([float(rest[0]), float(rest[1]), float(rest[2])])
        elif tag == "vt":
            if len(rest) < 2:
                raise IoFailure(f"{path}:{lineno}: texture coordinate needs 2 values")
            uvs.append([float(rest[0]), float(rest[1])])
        elif tag == "vn":
            if len(rest) < 3:
                raise IoFailure(f"{path}:{lineno}: normal needs 3 values")
            normals.append([float(rest[0]), float(rest[1]), float(rest[2])])
        elif tag == "f":
            if len(rest) < 3:
                raise IoFailure(f"{path}:{lineno}: face needs at least 3 vertices")
            corners = [_parse_face_token(t) for t in rest]
            for a, b in zip(corners[1:-1], corners[2:]):
                tri = (corners[0], a, b)
                faces.append([_resolve(c[0], len(verts)) for c in tri])
                if all(c[1] is not None for c in tri):
                    face_uvs.append([_resolve(c[1], len(uvs)) for c in tri])
                else:
                    face_uvs.append(None)
                if all(c[2] is not None for c in tri):
                    face_normals.append([_resolve(c[2], len(normals)) for c in tri])
                else:
                    face_normals.append(None)
        elif tag in ("o", "g"):
            if rest:
                name = rest[0]
        # other tags (s, mtllib, usemtl, ...) are ignored

    if not verts:
        raise IoFailure(f"{path}: no vertices found")

    def _dense(rows, width):
        if not rows or any(r is None for r in rows):
            return None
        return np.asarray(rows, dtype=np.int64).reshape(-1, width)

    return ObjData(
        vertices=np.asarray(verts, dtype=np.float64),
        uvs=np.asarray(uvs, dtype=np.float64) if uvs else None,
        normals=np.asarray(normals, dtype=np.float64) if normals else None,
        faces=np.asarray(faces, dtype=np.int64).reshape(-1, 3),
        face_uvs=_dense(face_uvs, 3),
        face_normals=_dense(face_normals, 3),
        name=name,
    )


def write_obj(path, vertices, faces, uvs=None, face_uvs=None, name="") -> None:
    """Write a triangle mesh as OBJ with 9 significant digits.

    When ``uvs`` is given without ``face_uvs``, UVs are assumed parallel to
    the vertex list and faces are emitted as ``v/vt`` with shared indices.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if uvs is not None:
        uvs = np.asarray(uvs, dtype=np.float64)
        if face_uvs is None:
            face_uvs = faces
        else:
            face_uvs = np.asarray(face_uvs, dtype=np.int64)
    try:
        with open(path, "w") as fh:
            if name:
                fh.write(f"o {name}\n")
            for v in vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            if uvs is not None:
                for t in uvs:
                    fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
                for f, ft in zip(faces, face_uvs):
                    fh.write(
                        f"f {f[0] + 1}/{ft[0] + 1} {f[1] + 1}/{ft[1] + 1} "
                        f"{f[2] + 1}/{ft[2] + 1}\n"
                    )
            else:
                for f in faces:
                    fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    except OSError as exc:
        raise IoFailure(f"cannot write OBJ file {path}: {exc}") from exc
