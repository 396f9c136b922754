"""Scene files, frame manifests and image I/O.

Scene format: a JSON document listing cameras and per-Gaussian records in
activated space, with an optional G4DT sidecar holding the (N, 64) semantic
feature block (float32, so features survive a round trip only at float32
precision; every JSON-held value round-trips bit-exactly at 64-bit).
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image

from . import tensorio
from .errors import DataError
from .scene import CameraModel, FrameObservation, GaussianSet

SCENE_FORMAT = "gs4d-scene"
MANIFEST_FORMAT = "gs4d-manifest"


def _camera_to_json(cam: CameraModel) -> dict:
    return {"K": cam.K.tolist(), "R": cam.R.tolist(), "t": cam.t.tolist(),
            "width": cam.width, "height": cam.height,
            "near": cam.near, "far": cam.far}


def _camera_from_json(d: dict, where: str) -> CameraModel:
    try:
        return CameraModel(K=np.array(d["K"]), R=np.array(d["R"]), t=np.array(d["t"]),
                           width=int(d["width"]), height=int(d["height"]),
                           near=float(d.get("near", 0.2)), far=float(d.get("far", 400.0)))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{where}: bad camera record ({e})") from e


def save_scene(path, gaussians: GaussianSet, cameras: List[CameraModel],
               anchor_time: int = 0) -> None:
    path = Path(path)
    doc = {
        "format": SCENE_FORMAT,
        "version": 1,
        "anchor_time": anchor_time,
        "orders": gaussians.orders,
        "cameras": [_camera_to_json(c) for c in cameras],
        "gaussians": [],
    }
    if gaussians.feature is not None:
        feature_file = path.with_suffix(".features.g4dt")
        tensorio.write_tensor(feature_file, gaussians.feature)
        doc["feature_file"] = feature_file.name
    for i in range(len(gaussians)):
        rec = {
            "mu": gaussians.mu[i].tolist(),
            "q": gaussians.q[i].tolist(),
            "s": gaussians.s[i].tolist(),
            "alpha": float(gaussians.alpha[i]),
            "c": gaussians.c[i].tolist(),
            "motion": {"speeds": gaussians.speeds[i].tolist(),
                       "dirs": gaussians.dirs[i].tolist()},
        }
        if gaussians.feature is not None:
            rec["feature_ref"] = i
        doc["gaussians"].append(rec)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load_scene(path) -> Tuple[GaussianSet, List[CameraModel], int]:
    """Returns (gaussians, cameras, anchor_time)."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if doc.get("format") != SCENE_FORMAT:
        raise DataError(f"{path}: not a {SCENE_FORMAT} file")
    cameras = [_camera_from_json(c, f"{path} camera {i}")
               for i, c in enumerate(doc.get("cameras", []))]
    orders = int(doc.get("orders", 3))
    feature_block = None
    if "feature_file" in doc:
        feature_block = tensorio.read_tensor(path.parent / doc["feature_file"])
    records = doc.get("gaussians", [])
    n = len(records)
    mu = np.zeros((n, 3))
    q = np.zeros((n, 4))
    s = np.zeros((n, 3))
    alpha = np.zeros(n)
    c = np.zeros((n, 3))
    speeds = np.zeros((n, orders))
    dirs = np.zeros((n, orders, 3))
    feature = None if feature_block is None else np.zeros((n, feature_block.shape[1]))
    for i, rec in enumerate(records):
        try:
            mu[i] = rec["mu"]
            q[i] = rec["q"]
            s[i] = rec["s"]
            alpha[i] = rec["alpha"]
            c[i] = rec["c"]
            speeds[i] = rec["motion"]["speeds"]
            dirs[i] = rec["motion"]["dirs"]
            if feature is not None:
                feature[i] = feature_block[int(rec["feature_ref"])]
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise DataError(f"{path}: bad gaussian record {i}: field {e}") from e
    if n == 0:
        gs = GaussianSet.empty(orders=orders,
                               feature_dim=None if feature_block is None
                               else feature_block.shape[1])
    else:
        gs = GaussianSet(mu, q, s, alpha, c, feature, speeds, dirs)
    return gs, cameras, int(doc.get("anchor_time", 0))


def write_image(path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as 8-bit PNG or PPM (P6). Quantization
    is round-half-even."""
    path = Path(path)
    data = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(data * 255.0).astype(np.uint8)
    if u8.ndim == 2:
        u8 = np.repeat(u8[:, :, None], 3, axis=2)
    if path.suffix.lower() == ".ppm":
        h, w = u8.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(u8.tobytes())
    else:
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Read PNG or PPM into a float (H, W, 3) array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        with open(path, "rb") as f:
            data = f.read()
        fields: List[bytes] = []
        pos = 0
        while len(fields) < 4:
            while pos < len(data) and data[pos:pos + 1].isspace():
                pos += 1
            if data[pos:pos + 1] == b"#":
                pos = data.index(b"\n", pos) + 1
                continue
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace():
                pos += 1
            fields.append(data[start:pos])
        if fields[0] != b"P6":
            raise DataError(f"{path}: not a P6 PPM file")
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
        if maxval != 255:
            raise DataError(f"{path}: only maxval 255 PPM supported")
        pos += 1
        pix = np.frombuffer(data, dtype=np.uint8, offset=pos, count=w * h * 3)
        return pix.reshape(h, w, 3).astype(np.float64) / 255.0
    arr = np.asarray(Image.open(path).convert("RGB"))
    return arr.astype(np.float64) / 255.0


def load_manifest(path) -> Tuple[List[FrameObservation], List[CameraModel]]:
    """Load a frame manifest; all referenced paths resolve relative to the
    manifest's directory. Timestamps must be strictly increasing."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if doc.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path}: not a {MANIFEST_FORMAT} file")
    cameras = [_camera_from_json(c, f"{path} camera {i}")
               for i, c in enumerate(doc.get("cameras", []))]
    frames: List[FrameObservation] = []
    prev_t = None
    for i, rec in enumerate(doc.get("frames", [])):
        base = path.parent

        def tensor(key):
            return tensorio.read_tensor(base / rec[key]).astype(np.float64) \
                if key in rec else None

        t = int(rec["time"])
        if prev_t is not None and t <= prev_t:
            raise DataError(f"{path}: frame {i} timestamp {t} not strictly increasing")
        prev_t = t
        cam_ref = rec["camera"]
        cam = cameras[cam_ref] if isinstance(cam_ref, int) \
            else _camera_from_json(cam_ref, f"{path} frame {i}")
        depth_valid = tensor("depth_valid")
        sky = tensor("sky_mask")
        labels = tensor("labels")
        frames.append(FrameObservation(
            image=read_image(base / rec["image"]),
            timestamp=t,
            camera=cam,
            depth_gt=tensor("depth"),
            depth_valid=None if depth_valid is None else depth_valid > 0.5,
            sky_mask=None if sky is None else sky > 0.5,
            teacher_features=tensor("teacher_features"),
            semantic_labels=None if labels is None
            else np.round(labels).astype(np.int64),
        ))
    if not frames:
        raise DataError(f"{path}: manifest has no frames")
    return frames, cameras
