"""File formats: PLY clouds/meshes, 16-bit PGM depth, and the sequence directory."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .cloud import CameraIntrinsics, DepthImage, PointCloud, TriangleMesh
from .se3 import RigidTransform, from_pose_fields, from_pose_text, pose_fields, to_pose_text
from .simulate import BodyModel, Frame, GroundTruth, MarkerDetection, MarkerMap

POSE_COLUMNS = ["tx", "ty", "tz", "qx", "qy", "qz", "qw"]


# PLY ------------------------------------------------------------------------

def write_ply(path, points, normals=None, triangles=None, binary: bool = False) -> None:
    """Write float32 vertices (with optional normals) and optional triangles."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    cols = [pts]
    props = ["x", "y", "z"]
    if normals is not None:
        cols.append(np.asarray(normals, dtype=np.float32).reshape(-1, 3))
        props += ["nx", "ny", "nz"]
    vert = np.hstack(cols)
    tris = np.zeros((0, 3), np.int32) if triangles is None else np.asarray(triangles, dtype=np.int32)
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(vert)}"]
    header += [f"property float {p}" for p in props]
    if triangles is not None:
        header += [f"element face {len(tris)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(vert.astype("<f4").tobytes())
            if triangles is not None:
                face = np.zeros(len(tris), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                face["n"] = 3
                face["v"] = tris
                fh.write(face.tobytes())
        else:
            for row in vert:
                fh.write((" ".join(repr(float(v)) for v in row.astype(np.float64)) + "\n").encode("ascii"))
            for t in tris:
                fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))


def read_ply(path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Return (points, normals or None, triangles or None) as float64 / int64."""
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt, elements, current = None, [], None
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            parts = line.decode("ascii").split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "end_header":
                break
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                current = {"name": parts[1], "count": int(parts[2]), "props": []}
                elements.append(current)
            elif parts[0] == "property":
                current["props"].append(parts[1:])
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
        verts = faces = None
        vprops: list[str] = []
        if fmt == "ascii":
            rest = fh.read().decode("ascii").splitlines()
            pos = 0
            for el in elements:
                lines = rest[pos:pos + el["count"]]
                pos += el["count"]
                if el["name"] == "vertex":
                    vprops = [p[-1] for p in el["props"]]
                    verts = np.array([[float(v) for v in ln.split()] for ln in lines]).reshape(-1, len(vprops))
                elif el["name"] == "face":
                    faces = np.array([[int(v) for v in ln.split()[1:4]] for ln in lines], dtype=np.int64).reshape(-1, 3)
        else:
            types = {"float": "<f4", "float32": "<f4", "double": "<f8", "int": "<i4", "uchar": "u1", "uint8": "u1"}
            for el in elements:
                if el["name"] == "vertex":
                    vprops = [p[-1] for p in el["props"]]
                    dt = np.dtype([(p[-1], types[p[0]]) for p in el["props"]])
                    raw = np.frombuffer(fh.read(dt.itemsize * el["count"]), dtype=dt)
                    verts = np.column_stack([raw[p].astype(float) for p in vprops]) if el["count"] else np.zeros((0, len(vprops)))
                elif el["name"] == "face":
                    _, cnt_t, idx_t, _ = el["props"][0]
                    dt = np.dtype([("n", types[cnt_t]), ("v", types[idx_t], (3,))])
                    raw = np.frombuffer(fh.read(dt.itemsize * el["count"]), dtype=dt)
                    if np.any(raw["n"] != 3):
                        raise ValueError(f"{path}: only triangle faces are supported")
                    faces = raw["v"].astype(np.int64)
    if verts is None:
        raise ValueError(f"{path}: no vertex element")
    col = {p: i for i, p in enumerate(vprops)}
    pts = verts[:, [col["x"], col["y"], col["z"]]]
    normals = verts[:, [col["nx"], col["ny"], col["nz"]]] if "nx" in col else None
    return pts, normals, faces


def save_cloud(path, cloud: PointCloud, binary: bool = True) -> None:
    write_ply(path, cloud.points, cloud.normals, binary=binary)


def load_cloud(path) -> PointCloud:
    pts, normals, _ = read_ply(path)
    if normals is not None:
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def save_mesh(path, mesh: TriangleMesh, binary: bool = True) -> None:
    write_ply(path, mesh.vertices, None, mesh.triangles, binary=binary)


def load_mesh(path) -> TriangleMesh:
    pts, _, faces = read_ply(path)
    return TriangleMesh(pts, faces if faces is not None else np.zeros((0, 3), np.int64)).compute_vertex_normals()


# PGM ------------------------------------------------------------------------

def write_pgm16(path, image: DepthImage) -> None:
    d = image.data
    with open(path, "wb") as fh:
        fh.write(f"P5\n{d.shape[1]} {d.shape[0]}\n65535\n".encode("ascii"))
        fh.write(d.astype(">u2").tobytes())


def read_pgm16(path) -> DepthImage:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return DepthImage(arr.astype(np.uint16))


# Poses and small files --------------------------------------------------------

def write_pose(path, t: RigidTransform) -> None:
    Path(path).write_text(to_pose_text(t) + "\n")


def read_pose(path) -> RigidTransform:
    return from_pose_text(Path(path).read_text())


def _fmt(v: float) -> str:
    return repr(float(v))


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps(asdict(k), indent=2) + "\n")


def read_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics(**json.loads(Path(path).read_text()))


def write_marker_map(path, mmap: MarkerMap, body_from_map: RigidTransform | None = None) -> None:
    doc = {
        "marker_side": mmap.marker_side,
        "markers": {str(i): [float(v) for v in c.ravel()] for i, c in mmap.markers.items()},
    }
    if body_from_map is not None:
        doc["body_from_map"] = pose_fields(body_from_map)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_marker_map(path) -> tuple[MarkerMap, RigidTransform | None]:
    doc = json.loads(Path(path).read_text())
    mmap = MarkerMap({int(i): np.reshape(v, (4, 3)) for i, v in doc["markers"].items()}, float(doc["marker_side"]))
    body = from_pose_fields(doc["body_from_map"]) if "body_from_map" in doc else None
    return mmap, body


def detections_to_json(index: int, detections) -> str:
    return json.dumps({
        "frame": index,
        "markers": [{"id": d.id, "corners": [[float(x) for x in c] for c in d.corners]} for d in detections],
    })


def detections_from_json(line: str) -> tuple[int, list[MarkerDetection]]:
    doc = json.loads(line)
    return int(doc["frame"]), [MarkerDetection(int(m["id"]), np.asarray(m["corners"], dtype=float)) for m in doc["markers"]]


# Sequence directory -----------------------------------------------------------

FRAMES_DIR = "frames"


def write_sequence(directory, frames: list[Frame], body: BodyModel, k: CameraIntrinsics,
                   reference_pose: RigidTransform | None = None, metadata: dict | None = None) -> None:
    root = Path(directory)
    (root / FRAMES_DIR).mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.json", k)
    save_mesh(root / "body_model.ply", body.mesh)
    write_marker_map(root / "marker_map.json", body.marker_map, body.body_from_map)
    if reference_pose is not None:
        write_pose(root / "reference_pose.txt", reference_pose)
    if metadata is not None:
        (root / "sequence.json").write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    with open(root / "detections.jsonl", "w") as det, \
            open(root / "scene_poses.csv", "w", newline="") as sp, \
            open(root / "ground_truth.csv", "w", newline="") as gt:
        spw, gtw = csv.writer(sp, lineterminator="\n"), csv.writer(gt, lineterminator="\n")
        spw.writerow(["frame", "valid", *POSE_COLUMNS])
        gtw.writerow(["frame", *(f"body_{c}" for c in POSE_COLUMNS), *(f"camera_{c}" for c in POSE_COLUMNS)])
        for f in frames:
            write_pgm16(root / FRAMES_DIR / f"{f.index:06d}.pgm", f.depth)
            det.write(detections_to_json(f.index, f.detections) + "\n")
            spw.writerow([f.index, int(f.scene_valid), *map(_fmt, pose_fields(f.scene_pose))])
            if f.ground_truth is not None:
                gtw.writerow([f.index, *map(_fmt, pose_fields(f.ground_truth.body_pose)),
                              *map(_fmt, pose_fields(f.ground_truth.camera_pose))])


def read_ground_truth(path) -> dict[int, GroundTruth]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            body = from_pose_fields([row[f"body_{c}"] for c in POSE_COLUMNS])
            cam = from_pose_fields([row[f"camera_{c}"] for c in POSE_COLUMNS])
            out[int(row["frame"])] = GroundTruth(body, cam)
    return out


class SequenceReader:
    """Lazy reader over a sequence directory; depth images load on demand."""

    def __init__(self, directory) -> None:
        self.root = Path(directory)
        if not self.root.is_dir():
            raise FileNotFoundError(f"sequence directory not found: {self.root}")
        for name in ("intrinsics.json", "marker_map.json", "scene_poses.csv", "detections.jsonl"):
            if not (self.root / name).is_file():
                raise FileNotFoundError(f"sequence is missing {name}: {self.root}")
        self.intrinsics = read_intrinsics(self.root / "intrinsics.json")
        self.marker_map, self.body_from_map = read_marker_map(self.root / "marker_map.json")
        self._scene: dict[int, tuple[RigidTransform, bool]] = {}
        with open(self.root / "scene_poses.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                self._scene[int(row["frame"])] = (from_pose_fields([row[c] for c in POSE_COLUMNS]), row["valid"] == "1")
        self._detections = {}
        with open(self.root / "detections.jsonl") as fh:
            for line in fh:
                if line.strip():
                    idx, dets = detections_from_json(line)
                    self._detections[idx] = dets
        gt_path = self.root / "ground_truth.csv"
        self.ground_truth = read_ground_truth(gt_path) if gt_path.is_file() else {}
        self.indices = sorted(self._scene)
        if not self.indices:
            raise ValueError(f"sequence has no frames: {self.root}")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def reference_pose(self) -> RigidTransform | None:
        p = self.root / "reference_pose.txt"
        return read_pose(p) if p.is_file() else None

    def body_model(self) -> BodyModel:
        return BodyModel(load_mesh(self.root / "body_model.ply"), self.marker_map,
                     self.body_from_map or RigidTransform.identity())

    def frame(self, index: int) -> Frame:
        depth = read_pgm16(self.root / FRAMES_DIR / f"{index:06d}.pgm")
        scene, valid = self._scene[index]
        return Frame(index, depth, self._detections.get(index, []), scene, valid, self.ground_truth.get(index))

    def frames(self, indices=None):
        for i in self.indices if indices is None else indices:
            yield self.frame(i)
