"""Synthetic datasets, the binary cloud format, and checkpoint persistence.

Cloud file layout (little-endian, byte offsets):

    0   4  magic  b"PSHC"
    4   4  u32 version (currently 1)
    8   4  u32 n            point count
    12  4  u32 c            feature channels (0 = none)
    16  4  u32 label_mode   0 = none, 1 = per-cloud, 2 = per-point
    20  n*12   float32 points, xyz per point
    ..  n*c*4  float32 features (when c > 0)
    ..  4 | n*4  int32 labels (mode 1: one, mode 2: n)

Checkpoint layout:

    0   4  magic b"PSCK"
    4   4  u32 version (currently 1)
    8   4  u32 section count
    per section: u16 name length, name utf-8, u64 payload length,
                 payload bytes, u32 crc32(payload)

Sections: "config" (JSON), "weights" (tensor pack), and optionally
"optimizer" (tensor pack + JSON header), "state" (JSON), "metrics" (JSON).
Tensor pack: u32 count, then per tensor u16 name length, name, u8 dtype
code (0 = float32, 1 = float64), u8 ndim, ndim x u32 dims, raw C-order data.
"""

from __future__ import annotations

import io
import json
import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    ChecksumError,
    FormatError,
    SizeError,
    TruncatedFileError,
    VersionError,
)
from .geometry import PointCloud

CLOUD_MAGIC = b"PSHC"
CHECKPOINT_MAGIC = b"PSCK"
CLOUD_VERSION = 1
CHECKPOINT_VERSION = 1

SHAPE_CLASSES = [
    "sphere",
    "cube",
    "cylinder",
    "cone",
    "torus",
    "plane_pair",
    "helix_tube",
    "two_spheres",
]
PART_SLOTS = 4


@dataclass
class Dataset:
    """Labeled clouds with disjoint, covering train/test splits."""

    clouds: list[PointCloud]
    train_indices: list[int]
    test_indices: list[int]
    names: list[str]
    kind: str = "shapes"

    def __post_init__(self):
        n = len(self.clouds)
        seen = set(self.train_indices) | set(self.test_indices)
        if len(self.train_indices) + len(self.test_indices) != n or seen != set(range(n)):
            raise SizeError("train/test splits must be disjoint and cover the dataset")

    @property
    def k_out(self) -> int:
        return len(self.names)


# ---------------------------------------------------------------------------
# analytic surface samplers (float64; callers normalize and cast)


def sample_sphere(n: int, rng: np.random.Generator, radius: float = 1.0) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * radius


def sample_cube(n: int, rng: np.random.Generator, half: float = 1.0) -> np.ndarray:
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-half, half, (n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, half, -half)
    for a in range(3):
        m = axis == a
        others = [d for d in range(3) if d != a]
        pts[m, a] = sign[m]
        pts[np.ix_(m, others)] = uv[m]
    return pts


def sample_cylinder(
    n: int, rng: np.random.Generator, radius: float = 0.6, height: float = 2.0
) -> np.ndarray:
    lateral = 2 * math.pi * radius * height
    caps = 2 * math.pi * radius**2
    on_side = rng.uniform(0, lateral + caps, n) < lateral
    theta = rng.uniform(-math.pi, math.pi, n)
    pts = np.empty((n, 3))
    z = rng.uniform(-height / 2, height / 2, n)
    r_disc = radius * np.sqrt(rng.uniform(0, 1, n))
    cap_side = np.where(rng.uniform(0, 1, n) < 0.5, height / 2, -height / 2)
    r = np.where(on_side, radius, r_disc)
    pts[:, 0] = r * np.cos(theta)
    pts[:, 1] = r * np.sin(theta)
    pts[:, 2] = np.where(on_side, z, cap_side)
    return pts


def sample_cone(
    n: int, rng: np.random.Generator, radius: float = 0.8, height: float = 1.6
) -> np.ndarray:
    slant = math.hypot(radius, height)
    lateral = math.pi * radius * slant
    base = math.pi * radius**2
    on_side = rng.uniform(0, lateral + base, n) < lateral
    theta = rng.uniform(-math.pi, math.pi, n)
    # radial density grows linearly outward on both the lateral surface and
    # the base disk, so one sqrt draw serves both
    t = np.sqrt(rng.uniform(0, 1, n))
    pts = np.empty((n, 3))
    r = t * radius
    pts[:, 0] = r * np.cos(theta)
    pts[:, 1] = r * np.sin(theta)
    pts[:, 2] = np.where(on_side, height * (1 - t), 0.0)
    return pts


def sample_torus(
    n: int, rng: np.random.Generator, major: float = 0.8, minor: float = 0.3
) -> np.ndarray:
    out = np.empty((n, 3))
    got = 0
    while got < n:
        want = n - got
        theta = rng.uniform(-math.pi, math.pi, 2 * want)
        accept = rng.uniform(0, 1, 2 * want) < (major + minor * np.cos(theta)) / (
            major + minor
        )
        theta = theta[accept][:want]
        m = len(theta)
        phi = rng.uniform(-math.pi, math.pi, m)
        ring = major + minor * np.cos(theta)
        out[got : got + m, 0] = ring * np.cos(phi)
        out[got : got + m, 1] = ring * np.sin(phi)
        out[got : got + m, 2] = minor * np.sin(theta)
        got += m
    return out


def sample_plane_pair(
    n: int, rng: np.random.Generator, half: float = 1.0, gap: float = 0.8
) -> np.ndarray:
    pts = np.empty((n, 3))
    pts[:, :2] = rng.uniform(-half, half, (n, 2))
    pts[:, 2] = np.where(rng.uniform(0, 1, n) < 0.5, gap / 2, -gap / 2)
    return pts


def sample_helix_tube(
    n: int,
    rng: np.random.Generator,
    major: float = 0.7,
    pitch: float = 0.5,
    tube: float = 0.15,
    turns: float = 2.0,
) -> np.ndarray:
    b = pitch / (2 * math.pi)
    curvature = major / (major**2 + b**2)
    speed = math.sqrt(major**2 + b**2)
    out = np.empty((n, 3))
    got = 0
    while got < n:
        want = n - got
        t = rng.uniform(0, 2 * math.pi * turns, 2 * want)
        phi = rng.uniform(-math.pi, math.pi, 2 * want)
        # surface density correction for curve curvature
        accept = rng.uniform(0, 1, 2 * want) < (
            1 - tube * curvature * np.cos(phi)
        ) / (1 + tube * curvature)
        t, phi = t[accept][:want], phi[accept][:want]
        m = len(t)
        center = np.stack(
            [major * np.cos(t), major * np.sin(t), b * t], axis=1
        )
        normal = np.stack([-np.cos(t), -np.sin(t), np.zeros(m)], axis=1)
        tangent = np.stack(
            [-major * np.sin(t), major * np.cos(t), np.full(m, b)], axis=1
        ) / speed
        binormal = np.cross(tangent, normal)
        offs = tube * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * binormal)
        out[got : got + m] = center + offs
        got += m
    return out


def sample_two_spheres(
    n: int,
    rng: np.random.Generator,
    r1: float = 0.7,
    r2: float = 0.5,
    dist: float = 0.9,
) -> np.ndarray:
    c1 = np.array([-dist / 2, 0.0, 0.0])
    c2 = np.array([dist / 2, 0.0, 0.0])
    w1 = r1**2 / (r1**2 + r2**2)
    out = np.empty((n, 3))
    got = 0
    while got < n:
        want = n - got
        pick1 = rng.uniform(0, 1, 2 * want) < w1
        pts = np.where(
            pick1[:, None],
            sample_sphere(2 * want, rng, r1) + c1,
            sample_sphere(2 * want, rng, r2) + c2,
        )
        # union surface: drop points buried inside the other sphere
        inside_other = np.where(
            pick1,
            np.linalg.norm(pts - c2, axis=1) < r2,
            np.linalg.norm(pts - c1, axis=1) < r1,
        )
        pts = pts[~inside_other][:want]
        out[got : got + len(pts)] = pts
        got += len(pts)
    return out


_SHAPE_SAMPLERS = {
    "sphere": lambda n, rng, p: sample_sphere(n, rng),
    "cube": lambda n, rng, p: sample_cube(n, rng),
    "cylinder": lambda n, rng, p: sample_cylinder(n, rng, height=p["aspect"]),
    "cone": lambda n, rng, p: sample_cone(n, rng, height=p["aspect"]),
    "torus": lambda n, rng, p: sample_torus(n, rng, minor=p["minor"]),
    "plane_pair": lambda n, rng, p: sample_plane_pair(n, rng, gap=p["gap"]),
    "helix_tube": lambda n, rng, p: sample_helix_tube(n, rng, turns=p["turns"]),
    "two_spheres": lambda n, rng, p: sample_two_spheres(n, rng, dist=p["dist"]),
}


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation matrix from a random unit quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def unit_normalize(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale the farthest point to norm 1."""
    pts = points - points.mean(axis=0)
    scale = np.linalg.norm(pts, axis=1).max()
    if scale > 0:
        pts /= scale
    return pts


def generate_shapes(
    num_per_class: int,
    points_per_cloud: int,
    seed: int,
    train_per_class: int | None = None,
) -> Dataset:
    """8 analytic surface classes, unit-normalized and randomly rotated.

    Exactly num_per_class clouds per class; the first train_per_class of
    each (default: 80%, rounded) form the training split.
    """
    if num_per_class < 1 or points_per_cloud < 1:
        raise SizeError("counts must be at least 1")
    if train_per_class is None:
        train_per_class = max(1, round(0.8 * num_per_class))
    if not 0 <= train_per_class <= num_per_class:
        raise SizeError("train_per_class out of range")
    clouds = []
    train_idx, test_idx = [], []
    for cls, name in enumerate(SHAPE_CLASSES):
        for inst in range(num_per_class):
            rng = np.random.default_rng(np.random.SeedSequence((seed, cls, inst)))
            params = {
                "aspect": rng.uniform(1.2, 2.4),
                "minor": rng.uniform(0.22, 0.42),
                "gap": rng.uniform(0.5, 1.1),
                "turns": rng.uniform(1.5, 2.5),
                "dist": rng.uniform(0.7, 1.1),
            }
            pts = _SHAPE_SAMPLERS[name](points_per_cloud, rng, params)
            pts = unit_normalize(pts @ random_rotation(rng).T)
            idx = len(clouds)
            clouds.append(PointCloud(pts.astype(np.float32), labels=cls))
            (train_idx if inst < train_per_class else test_idx).append(idx)
    return Dataset(clouds, train_idx, test_idx, list(SHAPE_CLASSES), kind="shapes")


_PART_PRIMITIVES = [sample_sphere, sample_cube, sample_cylinder, sample_cone]
PART_NAMES = ["sphere", "cube", "cylinder", "cone"]
# like real part categories, each kind has a characteristic size band
_PART_SCALES = [(0.28, 0.36), (0.40, 0.50), (0.50, 0.62), (0.62, 0.75)]


def generate_parts(
    num_objects: int,
    points_per_cloud: int,
    seed: int,
    train_fraction: float = 0.8,
) -> Dataset:
    """Composite objects of 2..4 distinct primitives, each point labeled by
    the kind of primitive that generated it.

    Kind labels are consistent across objects (0=sphere .. 3=cone) so the
    segmentation task is well-posed under random rotation. Points are split
    evenly across the parts (remainder to the earlier parts); the whole
    object is rotated and unit-normalized.
    """
    if num_objects < 1 or points_per_cloud < 1:
        raise SizeError("counts must be at least 1")
    clouds = []
    for obj in range(num_objects):
        rng = np.random.default_rng(np.random.SeedSequence((seed, obj)))
        n_parts = int(rng.integers(2, PART_SLOTS + 1))
        kinds = rng.choice(len(_PART_PRIMITIVES), n_parts, replace=False)
        counts = np.full(n_parts, points_per_cloud // n_parts)
        counts[: points_per_cloud % n_parts] += 1
        direction = sample_sphere(1, rng)[0]
        pts = np.empty((points_per_cloud, 3))
        labels = np.empty(points_per_cloud, dtype=np.int32)
        offset = 0
        for part, kind in enumerate(kinds):
            lo, hi = _PART_SCALES[kind]
            scale = rng.uniform(lo, hi)
            jitter = rng.normal(0, 0.06, 3)
            center = direction * (1.2 * part) + jitter
            body = _PART_PRIMITIVES[kind](int(counts[part]), rng) * scale + center
            pts[offset : offset + len(body)] = body
            labels[offset : offset + len(body)] = kind
            offset += len(body)
        pts = unit_normalize(pts @ random_rotation(rng).T)
        clouds.append(PointCloud(pts.astype(np.float32), labels=labels))
    n_train = max(1, min(num_objects - 1, round(train_fraction * num_objects))) \
        if num_objects > 1 else 1
    train_idx = list(range(n_train))
    test_idx = list(range(n_train, num_objects))
    return Dataset(clouds, train_idx, test_idx, list(PART_NAMES), kind="parts")


# ---------------------------------------------------------------------------
# binary cloud format


def _read_exact(fh, count: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise TruncatedFileError(f"file ended while reading {what}")
    return buf


def write_cloud(cloud: PointCloud, path) -> None:
    n = len(cloud)
    c = 0 if cloud.features is None else cloud.features.shape[1]
    if isinstance(cloud.labels, np.ndarray):
        mode = 2
    elif cloud.labels is not None:
        mode = 1
    else:
        mode = 0
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<IIII", CLOUD_VERSION, n, c, mode))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())
        if c:
            fh.write(np.ascontiguousarray(cloud.features, dtype="<f4").tobytes())
        if mode == 1:
            fh.write(struct.pack("<i", int(cloud.labels)))
        elif mode == 2:
            fh.write(np.ascontiguousarray(cloud.labels, dtype="<i4").tobytes())


def read_cloud(path) -> PointCloud:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CLOUD_MAGIC:
            raise BadMagicError(f"not a cloud file: magic {magic!r}")
        version, n, c, mode = struct.unpack("<IIII", _read_exact(fh, 16, "header"))
        if version != CLOUD_VERSION:
            raise VersionError(f"unsupported cloud format version {version}")
        if n < 1:
            raise FormatError("cloud file declares zero points")
        if mode not in (0, 1, 2):
            raise FormatError(f"unknown label mode {mode}")
        pts = np.frombuffer(
            _read_exact(fh, n * 12, "points"), dtype="<f4"
        ).reshape(n, 3)
        feats = None
        if c:
            feats = np.frombuffer(
                _read_exact(fh, n * c * 4, "features"), dtype="<f4"
            ).reshape(n, c)
        labels = None
        if mode == 1:
            labels = struct.unpack("<i", _read_exact(fh, 4, "label"))[0]
        elif mode == 2:
            labels = np.frombuffer(
                _read_exact(fh, n * 4, "labels"), dtype="<i4"
            ).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after cloud payload")
    return PointCloud(pts.copy(), features=feats, labels=labels)


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write one cloud file per cloud plus a manifest.json with the splits."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    files = []
    for i, cloud in enumerate(dataset.clouds):
        name = f"cloud_{i:05d}.pcld"
        write_cloud(cloud, os.path.join(out_dir, name))
        files.append(name)
    manifest = {
        "kind": dataset.kind,
        "names": dataset.names,
        "files": files,
        "train": dataset.train_indices,
        "test": dataset.test_indices,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_dataset(path) -> Dataset:
    import os

    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError(f"bad manifest: {e}") from e
    clouds = [read_cloud(os.path.join(path, f)) for f in manifest["files"]]
    return Dataset(
        clouds,
        list(manifest["train"]),
        list(manifest["test"]),
        list(manifest["names"]),
        kind=manifest.get("kind", "shapes"),
    )


# ---------------------------------------------------------------------------
# checkpoints


_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _pack_tensors(named) -> bytes:
    out = io.BytesIO()
    items = list(named)
    out.write(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype == np.float32:
            code = 0
        elif arr.dtype == np.float64:
            code = 1
        else:
            raise FormatError(f"cannot serialize dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr).tobytes())
    return out.getvalue()


def _unpack_tensors(payload: bytes) -> dict:
    fh = io.BytesIO(payload)
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
        name = _read_exact(fh, nlen, "tensor name").decode("utf-8")
        code, ndim = struct.unpack("<BB", _read_exact(fh, 2, "tensor header"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown tensor dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "tensor dims"))
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(_read_exact(fh, nbytes, f"tensor {name}"), dtype=dtype)
        out[name] = data.reshape(dims).copy()
    if fh.read(1):
        raise FormatError("trailing bytes in tensor pack")
    return out


def _write_section(fh, name: str, payload: bytes) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", len(payload)))
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def save_checkpoint(net, state: dict | None, path) -> None:
    """Serialize a network (and optional training state) to one file."""
    sections: list[tuple[str, bytes]] = []
    config = {"format": "pointshell-checkpoint", "network": net.config.to_dict()}
    sections.append(("config", json.dumps(config).encode("utf-8")))
    sections.append(("weights", _pack_tensors(
        (name, t.data) for name, t in net.named_parameters()
    )))
    if state:
        adam = state.get("adam")
        if adam is not None:
            moments = [(f"m.{k}", v) for k, v in adam["m"].items()]
            moments += [(f"v.{k}", v) for k, v in adam["v"].items()]
            header = json.dumps({"step": adam["step"]}).encode("utf-8")
            payload = struct.pack("<I", len(header)) + header + _pack_tensors(moments)
            sections.append(("optimizer", payload))
        meta = {
            "next_epoch": state.get("next_epoch", 0),
            "train_config": state.get("train_config"),
        }
        sections.append(("state", json.dumps(meta).encode("utf-8")))
        sections.append(
            ("metrics", json.dumps(state.get("history", [])).encode("utf-8"))
        )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(sections)))
        for name, payload in sections:
            _write_section(fh, name, payload)


def _read_sections(path) -> dict:
    sections = {}
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"not a checkpoint: magic {magic!r}")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "section name length"))
            name = _read_exact(fh, nlen, "section name").decode("utf-8")
            (plen,) = struct.unpack("<Q", _read_exact(fh, 8, "section length"))
            payload = _read_exact(fh, plen, f"section {name}")
            (crc,) = struct.unpack("<I", _read_exact(fh, 4, "section checksum"))
            if crc != zlib.crc32(payload):
                raise ChecksumError(f"section {name!r} failed its checksum")
            sections[name] = payload
        if fh.read(1):
            raise FormatError("trailing bytes after final section")
    return sections


def load_checkpoint(path):
    """Rebuild (Network, state dict) from a checkpoint file."""
    from . import network as net_mod

    sections = _read_sections(path)
    if "config" not in sections or "weights" not in sections:
        raise FormatError("checkpoint is missing config or weights")
    config = json.loads(sections["config"].decode("utf-8"))
    net = net_mod.build(net_mod.NetworkConfig(**config["network"]))
    weights = _unpack_tensors(sections["weights"])
    named = dict(net.named_parameters())
    if set(weights) != set(named):
        missing = set(named) ^ set(weights)
        raise FormatError(f"weight names do not match the config: {sorted(missing)}")
    for name, arr in weights.items():
        tensor = named[name]
        if arr.shape != tensor.data.shape or arr.dtype != tensor.data.dtype:
            raise FormatError(
                f"weight {name!r}: stored {arr.shape}/{arr.dtype}, "
                f"expected {tensor.data.shape}/{tensor.data.dtype}"
            )
        tensor.data[...] = arr
    state: dict = {}
    if "optimizer" in sections:
        payload = sections["optimizer"]
        (hlen,) = struct.unpack("<I", payload[:4])
        header = json.loads(payload[4 : 4 + hlen].decode("utf-8"))
        moments = _unpack_tensors(payload[4 + hlen :])
        state["adam"] = {
            "step": header["step"],
            "m": {k[2:]: v for k, v in moments.items() if k.startswith("m.")},
            "v": {k[2:]: v for k, v in moments.items() if k.startswith("v.")},
        }
    if "state" in sections:
        meta = json.loads(sections["state"].decode("utf-8"))
        state["next_epoch"] = meta.get("next_epoch", 0)
        state["train_config"] = meta.get("train_config")
    if "metrics" in sections:
        state["history"] = json.loads(sections["metrics"].decode("utf-8"))
    return net, state
