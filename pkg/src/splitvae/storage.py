"""Raw float32 raster directories described by a ``manifest.json``.

Every image is stored as one file of little-endian float32 values in C
row-major order. The manifest lists the files, their shapes and any
provenance the writer wants to keep next to the pixels.
"""

import hashlib
import json
import os

import numpy as np

MANIFEST_NAME = "manifest.json"
SCHEMA_VERSION = 1
RAW_DTYPE = "<f4"


def write_raw(path, image):
    np.ascontiguousarray(image, dtype=RAW_DTYPE).tofile(path)


def read_raw(path, shape):
    data = np.fromfile(path, dtype=RAW_DTYPE)
    expected = int(np.prod(shape))
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} float32 values, found {data.size}")
    return data.reshape(shape).astype(np.float64)


def write_dataset(directory, records, provenance=None, kind="dataset"):
    """Write a raster directory.

    Parameters
    ----------
    directory : str
        Output directory, created if needed.
    records : list of dict
        One dict per entry with an ``"id"`` key and a ``"images"`` dict
        mapping a role name (``"input"``, ``"target1"``, ...) to a 2D array.
    provenance : dict, optional
        Free-form JSON-serialisable metadata (seeds, noise parameters).
    kind : str
        Stored in the manifest so readers can tell datasets and predictions apart.
    """
    os.makedirs(directory, exist_ok=True)
    entries = []
    for rec in records:
        files = {}
        for role, img in rec["images"].items():
            if img is None:
                continue
            img = np.asarray(img)
            name = f"{rec['id']}_{role}.raw"
            write_raw(os.path.join(directory, name), img)
            files[role] = {"file": name, "shape": list(img.shape)}
        entries.append({"id": rec["id"], "files": files})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "dtype": "float32",
        "byte_order": "little",
        "order": "C",
        "entries": entries,
        "provenance": provenance or {},
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {version!r}")
    return manifest


def read_dataset(directory):
    """Return ``(records, manifest)`` with images loaded as float64 arrays."""
    manifest = read_manifest(directory)
    records = []
    for entry in manifest["entries"]:
        images = {
            role: read_raw(os.path.join(directory, spec["file"]), tuple(spec["shape"]))
            for role, spec in entry["files"].items()
        }
        records.append({"id": entry["id"], "images": images})
    return records, manifest


def file_digest(path, length=16):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:length]
