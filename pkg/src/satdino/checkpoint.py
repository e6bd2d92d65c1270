"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"SATDCKPT"
    version    uint32
    hdr_len    uint64
    header     hdr_len bytes of UTF-8 JSON (sorted keys)
    payload    float32 little-endian arrays, in header order
    crc32      uint32 over header + payload

The header holds the format version, the config text and its digest, step,
epoch, normalization statistics and the name/shape of every array. Arrays
are ``student/<param>``, ``teacher/<param>``, ``center`` and the AdamW moments
``optim/exp_avg/<param>`` and ``optim/exp_avg_sq/<param>``.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from satdino.augment import Normalization
from satdino.config import RunConfig, parse_config_text
from satdino.exceptions import CheckpointError

MAGIC = b"SATDCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def _resolve(path) -> Path:
    path = Path(path)
    if path.is_dir():
        from satdino.train import RunDirectory

        return RunDirectory(path).checkpoint_path
    return path


def _arrays(state) -> list[tuple[str, np.ndarray]]:
    out = []
    for name, p in state.student.named_parameters():
        out.append((f"student/{name}", p.detach()))
    for name, p in state.teacher.named_parameters():
        out.append((f"teacher/{name}", p.detach()))
    out.append(("center", state.center))
    for name, p in state.student.named_parameters():
        st = state.optimizer.state.get(p)
        if st:
            out.append((f"optim/exp_avg/{name}", st["exp_avg"]))
            out.append((f"optim/exp_avg_sq/{name}", st["exp_avg_sq"]))
    return [(n, t.cpu().numpy().astype("<f4", copy=False)) for n, t in out]


def _optimizer_steps(state) -> dict:
    return {
        name: int(state.optimizer.state[p]["step"])
        for name, p in state.student.named_parameters()
        if state.optimizer.state.get(p)
    }


def save_checkpoint(state, path) -> Path:
    """Write ``state`` atomically to ``path`` (a file or a run directory)."""
    path = _resolve(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _arrays(state)
    header = {
        "format_version": FORMAT_VERSION,
        "config": state.config.to_text(),
        "config_digest": state.config.digest(),
        "step": state.step,
        "epoch": state.epoch,
        "steps_per_epoch": state.steps_per_epoch,
        "optimizer_steps": _optimizer_steps(state),
        "norm_mean": list(state.norm.mean),
        "norm_std": list(state.norm.std),
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(a.tobytes() for _, a in arrays)
    crc = zlib.crc32(head + payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)))
        fh.write(head)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> tuple[dict, dict]:
    """Parse a checkpoint into (header, {name: float32 array})."""
    path = _resolve(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated (no header)")
    magic, version, hdr_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hdr_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    sizes = [int(np.prod(a["shape"], dtype=np.int64)) * 4 for a in header["arrays"]]
    expected = start + hdr_len + sum(sizes) + 4
    if len(data) != expected:
        raise CheckpointError(
            f"{path}: truncated or padded file ({len(data)} bytes, expected {expected})"
        )
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if crc != zlib.crc32(data[start:expected - 4]):
        raise CheckpointError(f"{path}: checksum mismatch")
    arrays = {}
    offset = start + hdr_len
    for spec, size in zip(header["arrays"], sizes):
        arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += size
    return header, arrays


def load_checkpoint(path, expected_config: Optional[RunConfig] = None, force: bool = False):
    """Rebuild a TrainState from ``path``.

    When ``expected_config`` is given its digest must match the stored one
    unless ``force`` is set.
    """
    from satdino.train import init_state

    header, arrays = read_checkpoint(path)
    config = RunConfig().update(parse_config_text(header["config"]))
    if config.digest() != header["config_digest"]:
        raise CheckpointError("stored config does not match its digest")
    if expected_config is not None and expected_config.digest() != header["config_digest"] \
            and not force:
        raise CheckpointError(
            "checkpoint was written with a different configuration "
            "(digest mismatch); pass force to load anyway"
        )
    norm = Normalization(tuple(header["norm_mean"]), tuple(header["norm_std"]))
    state = init_state(config, norm, header["steps_per_epoch"])
    state.step = header["step"]
    state.epoch = header["epoch"]

    def fill(module, prefix):
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint lacks array {key}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(arrays[key]))

    fill(state.student, "student")
    fill(state.teacher, "teacher")
    state.center = torch.from_numpy(arrays["center"]).clone()
    opt_steps = header.get("optimizer_steps", {})
    for name, p in state.student.named_parameters():
        key = f"optim/exp_avg/{name}"
        if key in arrays:
            state.optimizer.state[p] = {
                "step": torch.tensor(float(opt_steps.get(name, 0))),
                "exp_avg": torch.from_numpy(arrays[key]).clone(),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/exp_avg_sq/{name}"]).clone(),
            }
    return state
