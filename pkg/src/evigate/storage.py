"""Artifact persistence with bit-exact round trips.

Dataset split files: one JSON header line (schema, counts, dims, config
hash, byte length of the blob), a raw little-endian float32 blob of all
frame matrices concatenated row-major, then one JSON line with the label
table.  Checkpoints: one JSON header line plus named little-endian float64
parameter blocks in header order.  All files are written atomically
(temp file + rename) and refuse to load under a different config hash
unless explicitly overridden.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .data import FeatureBag
from .errors import ConfigError

DATASET_FORMAT = "evigate-dataset"
CHECKPOINT_FORMAT = "evigate-checkpoint"
FORMAT_VERSION = 1


class ArtifactError(ConfigError):
    """Missing, malformed or mismatched artifact file."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def _canon_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _check_hash(found: str, expected: str | None, allow_mismatch: bool,
                path: Path) -> None:
    if expected is not None and found != expected and not allow_mismatch:
        raise ArtifactError(
            f"{path}: config hash {found} does not match expected {expected}"
            " (pass allow_mismatch to override)")


def save_split(path: str | Path, split: str, bags: list[FeatureBag],
               config_hash: str) -> None:
    if any(b.split != split for b in bags):
        raise ConfigError("bag split fields disagree with the file split")
    frames_blob = b"".join(
        np.ascontiguousarray(b.frames, dtype="<f4").tobytes() for b in bags)
    header = {
        "format": DATASET_FORMAT,
        "version": FORMAT_VERSION,
        "split": split,
        "config_hash": config_hash,
        "n_bags": len(bags),
        "feature_dim": int(bags[0].frames.shape[1]) if bags else 0,
        "frame_counts": [int(b.n_frames) for b in bags],
        "frames_bytes": len(frames_blob),
    }
    labels = [{
        "bag_id": b.bag_id,
        "local": b.local_label,
        "central": b.central_label,
        "adjudicator": b.adjudicator_label,
        "final": b.final_label,
        "true_class": b.true_class,
        "difficulty": b.difficulty,
    } for b in bags]
    payload = (_canon_json(header) + "\n").encode() + frames_blob \
        + ("\n" + _canon_json(labels) + "\n").encode()
    atomic_write_bytes(path, payload)


def load_split(path: str | Path, expected_hash: str | None = None,
               allow_mismatch: bool = False) -> list[FeatureBag]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"dataset file not found: {path}")
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path}: bad dataset header: {exc}") from None
        if header.get("format") != DATASET_FORMAT:
            raise ArtifactError(f"{path}: not a dataset file")
        if header.get("version") != FORMAT_VERSION:
            raise ArtifactError(f"{path}: unsupported version {header.get('version')}")
        _check_hash(header["config_hash"], expected_hash, allow_mismatch, path)
        blob = fh.read(header["frames_bytes"])
        if len(blob) != header["frames_bytes"]:
            raise ArtifactError(f"{path}: truncated frame blob")
        labels = json.loads(fh.read())
    dim = header["feature_dim"]
    counts = header["frame_counts"]
    if len(labels) != header["n_bags"] or len(counts) != header["n_bags"]:
        raise ArtifactError(f"{path}: label table does not match header")
    flat = np.frombuffer(blob, dtype="<f4").reshape(-1, dim) if dim else \
        np.zeros((0, 0), dtype=np.float32)
    bags = []
    offset = 0
    for rec, n in zip(labels, counts):
        frames = np.array(flat[offset:offset + n], dtype=np.float32)
        offset += n
        bags.append(FeatureBag(
            bag_id=int(rec["bag_id"]),
            frames=frames,
            local_label=int(rec["local"]),
            central_label=int(rec["central"]),
            adjudicator_label=None if rec["adjudicator"] is None
            else int(rec["adjudicator"]),
            final_label=int(rec["final"]),
            split=header["split"],
            true_class=int(rec["true_class"]),
            difficulty=float(rec["difficulty"]),
        ))
    return bags


def save_checkpoint(path: str | Path, kind: str, arch: dict,
                    params: dict[str, np.ndarray], seed: int,
                    config_hash: str) -> None:
    names = sorted(params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": kind,
        "arch": arch,
        "seed": seed,
        "config_hash": config_hash,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes()
                    for n in names)
    atomic_write_bytes(path, (_canon_json(header) + "\n").encode() + blob)


def load_checkpoint(path: str | Path, expected_kind: str | None = None,
                    expected_hash: str | None = None,
                    allow_mismatch: bool = False) -> dict:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path}: bad checkpoint header: {exc}") from None
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ArtifactError(f"{path}: not a checkpoint file")
        if header.get("version") != FORMAT_VERSION:
            raise ArtifactError(f"{path}: unsupported version {header.get('version')}")
        if expected_kind is not None and header["kind"] != expected_kind:
            raise ArtifactError(
                f"{path}: checkpoint kind {header['kind']!r}, expected {expected_kind!r}")
        _check_hash(header["config_hash"], expected_hash, allow_mismatch, path)
        blob = fh.read()
    params = {}
    offset = 0
    for spec in header["params"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) * 8
        chunk = blob[offset:offset + size]
        if len(chunk) != size:
            raise ArtifactError(f"{path}: truncated parameter block {spec['name']}")
        params[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise ArtifactError(f"{path}: trailing bytes after parameter blocks")
    return {"kind": header["kind"], "arch": header["arch"],
            "seed": int(header["seed"]), "config_hash": header["config_hash"],
            "params": params}
