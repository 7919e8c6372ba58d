"""File formats: PLY (ascii / binary little-endian), OBJ, PFM, PNG and JSON sidecars."""
from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .body import BodyParams
from .camera import Camera, DepthMap
from .errors import InvalidArgument
from .geom import PointCloud, TriMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise InvalidArgument("not a PLY file")
    fmt, elements = None, []
    while True:
        line = fh.readline()
        if not line:
            raise InvalidArgument("truncated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1]["props"].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise InvalidArgument(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_binary_element(fh, el, endian):
    props = el["props"]
    if not any(p[1] == "list" for p in props):
        dt = np.dtype([(p[0], endian + p[1]) for p in props])
        data = np.frombuffer(fh.read(dt.itemsize * el["count"]), dtype=dt, count=el["count"])
        return {p[0]: data[p[0]] for p in props}
    # list properties: assume the common layout of a single list per element
    if len(props) == 1:
        name, _, ctype, itype = props[0]
        start = fh.tell()
        head = np.frombuffer(fh.read(1 if ctype[-1] == "1" else int(ctype[-1])), dtype=endian + ctype)[0]
        fh.seek(start)
        dt = np.dtype([("n", endian + ctype), ("v", endian + itype, (int(head),))])
        raw = fh.read(dt.itemsize * el["count"])
        data = np.frombuffer(raw, dtype=dt, count=el["count"])
        if np.all(data["n"] == head):
            return {name: data["v"].astype(np.int64)}
        fh.seek(start)
    out = {p[0]: [] for p in props}
    for _ in range(el["count"]):
        for p in props:
            if p[1] == "list":
                cdt, idt = np.dtype(endian + p[2]), np.dtype(endian + p[3])
                n = int(np.frombuffer(fh.read(cdt.itemsize), dtype=cdt)[0])
                out[p[0]].append(np.frombuffer(fh.read(idt.itemsize * n), dtype=idt).astype(np.int64))
            else:
                dt = np.dtype(endian + p[1])
                out[p[0]].append(np.frombuffer(fh.read(dt.itemsize), dtype=dt)[0])
    return out


def _read_ascii_element(lines, el):
    out = {p[0]: [] for p in el["props"]}
    for _ in range(el["count"]):
        tok = next(lines).split()
        i = 0
        for p in el["props"]:
            if p[1] == "list":
                n = int(tok[i])
                out[p[0]].append(np.array(tok[i + 1:i + 1 + n], dtype=np.int64))
                i += 1 + n
            else:
                out[p[0]].append(float(tok[i]))
                i += 1
    return {k: (np.array(v) if el["props"][0][1] != "list" else v) for k, v in out.items()}


def read_ply(path) -> dict:
    """Raw PLY contents as {element name: {property: array}}."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        result = {}
        if fmt == "ascii":
            lines = iter(fh.read().decode("ascii").splitlines())
            lines = (ln for ln in lines if ln.strip())
            for el in elements:
                result[el["name"]] = _read_ascii_element(lines, el)
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            for el in elements:
                result[el["name"]] = _read_binary_element(fh, el, endian)
    return result


def _triangulate(face_lists):
    if isinstance(face_lists, np.ndarray) and face_lists.ndim == 2:
        if face_lists.shape[1] == 3:
            return face_lists
        face_lists = list(face_lists)
    tris = []
    for f in face_lists:
        f = np.asarray(f, dtype=np.int64)
        for k in range(1, len(f) - 1):
            tris.append((f[0], f[k], f[k + 1]))
    return np.array(tris, dtype=np.int64).reshape(-1, 3)


def _vertex_cloud(v) -> PointCloud:
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    colors = normals = None
    if all(k in v for k in ("red", "green", "blue")):
        c = np.stack([v["red"], v["green"], v["blue"]], axis=1)
        integral = np.issubdtype(np.asarray(v["red"]).dtype, np.integer) or c.max() > 1
        colors = c.astype(np.float64) / (255.0 if integral else 1.0)
    if all(k in v for k in ("nx", "ny", "nz")):
        n = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float64)
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        if np.all(ln > 0):
            # float32 storage already meets the unit-norm tolerance; keep values bit-exact
            normals = n if np.max(np.abs(ln - 1)) <= 1e-6 else n / ln
    return PointCloud(pos, colors, normals)


def read_point_cloud(path) -> PointCloud:
    data = read_ply(path)
    if "vertex" not in data:
        raise InvalidArgument(f"{path}: PLY has no vertex element")
    return _vertex_cloud(data["vertex"])


def read_mesh(path) -> TriMesh:
    path = os.fspath(path)
    if path.lower().endswith(".obj"):
        return read_obj(path)
    data = read_ply(path)
    v = data["vertex"]
    verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    face = data.get("face", {})
    key = "vertex_indices" if "vertex_indices" in face else ("vertex_index" if "vertex_index" in face else None)
    faces = _triangulate(face[key]) if key else np.zeros((0, 3), np.int64)
    return TriMesh(verts, faces)


def _ply_header(fmt, n_vert, vprops, n_face=None):
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {n_vert}"]
    lines += [f"property {t} {name}" for name, t in vprops]
    if n_face is not None:
        lines += [f"element face {n_face}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_ply(path, positions, colors=None, normals=None, faces=None, binary: bool = True) -> None:
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(pos)
    fields = [("x", "float", pos[:, 0]), ("y", "float", pos[:, 1]), ("z", "float", pos[:, 2])]
    if normals is not None:
        nm = np.asarray(normals)
        fields += [("nx", "float", nm[:, 0]), ("ny", "float", nm[:, 1]), ("nz", "float", nm[:, 2])]
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        fields += [("red", "uchar", c[:, 0]), ("green", "uchar", c[:, 1]), ("blue", "uchar", c[:, 2])]
    fcount = None if faces is None else len(faces)
    header = _ply_header("binary_little_endian" if binary else "ascii", n,
                         [(f[0], f[1]) for f in fields], fcount)
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            dt = np.dtype([(f[0], "<f4" if f[1] == "float" else "u1") for f in fields])
            rec = np.empty(n, dtype=dt)
            for name, _, col in fields:
                rec[name] = col
            fh.write(rec.tobytes())
            if faces is not None:
                fdt = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
                frec = np.empty(len(faces), dtype=fdt)
                frec["n"] = 3
                frec["v"] = np.asarray(faces)
                fh.write(frec.tobytes())
        else:
            rows = []
            for i in range(n):
                parts = []
                for _, t, col in fields:
                    parts.append(repr(float(np.float32(col[i]))) if t == "float" else str(int(col[i])))
                rows.append(" ".join(parts))
            if faces is not None:
                rows += [f"3 {a} {b} {c}" for a, b, c in np.asarray(faces)]
            fh.write(("\n".join(rows) + ("\n" if rows else "")).encode("ascii"))


def write_point_cloud(path, pc: PointCloud, binary: bool = True) -> None:
    write_ply(path, pc.positions, pc.colors, pc.normals, binary=binary)


def write_mesh(path, mesh: TriMesh, binary: bool = True) -> None:
    path = os.fspath(path)
    if path.lower().endswith(".obj"):
        write_obj(path, mesh)
    else:
        write_ply(path, mesh.vertices, faces=mesh.faces, binary=binary)


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(t) for t in tok[1:4]])
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    k = int(t.split("/")[0])
                    idx.append(k - 1 if k > 0 else len(verts) + k)
                faces.append(idx)
    return TriMesh(np.array(verts).reshape(-1, 3), _triangulate(faces))


def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices.tolist():
            fh.write(f"v {v[0]!r} {v[1]!r} {v[2]!r}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def read_pfm(path) -> np.ndarray:
    """PFM image as float64 array, top row first."""
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise InvalidArgument(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while len(dims) < 2:
            dims += fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=endian + "f4", count=w * h * ch)
    img = data.reshape(h, w, ch) if ch == 3 else data.reshape(h, w)
    return np.flipud(img).astype(np.float64)


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(img)).tobytes())


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path))


def read_mask(path) -> np.ndarray:
    img = read_png(path)
    if img.ndim == 3:
        img = img[..., 0] if img.shape[2] < 4 else img[..., 3]
    return img > 0


def write_mask(path, mask) -> None:
    Image.fromarray((np.asarray(mask, bool) * 255).astype(np.uint8)).save(path)


def write_rgb(path, rgb) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


def write_depth_png16(path, depth, scale: float, camera: Camera | None = None) -> None:
    """16-bit PNG depth plus a JSON sidecar ``{scale, camera}`` (meters per unit)."""
    units = np.clip(np.round(np.asarray(depth) / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(units).save(path)
    side = {"scale": scale}
    if camera is not None:
        side["camera"] = camera.to_dict()
    with open(os.path.splitext(os.fspath(path))[0] + ".json", "w") as fh:
        json.dump(side, fh, indent=2)


def read_depth(path, camera: Camera | None = None):
    """Depth grid in meters from PFM or 16-bit PNG (+ sidecar); returns (depth, sidecar camera)."""
    path = os.fspath(path)
    if path.lower().endswith(".pfm"):
        return read_pfm(path), camera
    side_path = os.path.splitext(path)[0] + ".json"
    if not os.path.exists(side_path):
        raise InvalidArgument(f"{path}: 16-bit PNG depth needs a JSON sidecar at {side_path}")
    with open(side_path) as fh:
        side = json.load(fh)
    if "scale" not in side:
        raise InvalidArgument(f"{side_path}: sidecar field 'scale' is missing")
    raw = np.asarray(Image.open(path)).astype(np.float64)
    if camera is None and "camera" in side:
        camera = Camera.from_dict(side["camera"])
    return raw * float(side["scale"]), camera


def read_camera(path) -> Camera:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as e:
        raise InvalidArgument(f"{path}: camera JSON does not parse ({e})") from None
    return Camera.from_dict(d)


def write_camera(path, camera: Camera) -> None:
    with open(path, "w") as fh:
        json.dump(camera.to_dict(), fh, indent=2)


def read_params(path) -> BodyParams:
    with open(path) as fh:
        return BodyParams.from_dict(json.load(fh))


def write_params(path, params: BodyParams) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2)


def load_depth_map(depth_path, mask_path, camera_path=None) -> DepthMap:
    camera = read_camera(camera_path) if camera_path else None
    depth, camera = read_depth(depth_path, camera)
    if camera is None:
        raise InvalidArgument("no camera given and the depth file carries none")
    mask = read_mask(mask_path)
    if mask.shape != depth.shape:
        raise InvalidArgument(f"mask shape {mask.shape} does not match depth {depth.shape}")
    mask &= np.isfinite(depth) & (depth > 0)
    return DepthMap(np.where(mask, depth, 0.0), mask, camera)

