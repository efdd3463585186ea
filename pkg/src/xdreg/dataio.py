"""Bit-exact file formats: feature files, manifests, checkpoints, configs.

All writers are atomic (temp file + rename) and all readers reject any
structural violation outright rather than guessing.

Feature file (extension ``.fea``)::

    offset 0   magic   4 bytes  b"FEA1"
    offset 4   domain  1 byte   0 = rgb, 1 = edm (energy distribution)
    offset 5   dim     uint32 little-endian
    offset 9   values  dim x float32 little-endian

Manifest: UTF-8 text, one record per line,
``<file name> <groundtruth energy kCal> [<category>]``, ``#`` comments
and blank lines ignored; the energy must parse as a positive number.

Checkpoint::

    offset 0   magic       8 bytes  b"XDRCKPT1"
    offset 8   header_len  uint32 little-endian
    offset 12  header      UTF-8 JSON (canonical: sorted keys)
    then       raw little-endian float64 arrays: parameters in the
               model's traversal order, then Adam first moments, then
               second moments (when the optimizer is Adam)

A dataset directory holds ``manifest.txt`` plus ``edm/<name>.fea`` and
``rgb/<name>.fea`` per manifest record.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DomainError, FormatError, IncompatibleCheckpointError
from .training import Checkpoint

FEATURE_MAGIC = b"FEA1"
CHECKPOINT_MAGIC = b"XDRCKPT1"

DOMAIN_RGB = "rgb"
DOMAIN_EDM = "edm"
_DOMAIN_TO_BYTE = {DOMAIN_RGB: 0, DOMAIN_EDM: 1}
_BYTE_TO_DOMAIN = {v: k for k, v in _DOMAIN_TO_BYTE.items()}


@dataclass
class FeatureVector:
    """A feature vector tagged with its source domain."""

    domain: str
    values: np.ndarray

    def __post_init__(self):
        if self.domain not in _DOMAIN_TO_BYTE:
            raise DomainError(f"unknown feature domain {self.domain!r}")
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1)


@dataclass
class Sample:
    """A paired observation: both domain features plus the target energy."""

    id: str
    x_m: FeatureVector
    x_f: FeatureVector
    target_kcal: float
    category: Optional[str] = None


@dataclass
class ManifestEntry:
    name: str
    energy_kcal: float
    category: Optional[str] = None


def _atomic_write(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp-{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Feature files


def write_feature_file(path, domain: str, values) -> None:
    values = np.asarray(values, dtype=np.float32).reshape(-1)
    if values.size < 1:
        raise DomainError("feature files require dim >= 1")
    if not np.all(np.isfinite(values)):
        raise DomainError("feature values must be finite")
    if domain not in _DOMAIN_TO_BYTE:
        raise DomainError(f"unknown feature domain {domain!r}")
    payload = (
        FEATURE_MAGIC
        + struct.pack("<BI", _DOMAIN_TO_BYTE[domain], values.size)
        + values.astype("<f4").tobytes()
    )
    _atomic_write(path, payload)


def read_feature_file(path) -> FeatureVector:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad feature-file magic {data[:4]!r}", offset=0)
    if len(data) < 9:
        raise FormatError(f"{path}: truncated header, {len(data)} bytes", offset=len(data))
    domain_byte, dim = struct.unpack_from("<BI", data, 4)
    if domain_byte not in _BYTE_TO_DOMAIN:
        raise FormatError(f"{path}: unknown domain byte {domain_byte}", offset=4)
    expected = 9 + 4 * dim
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "trailing bytes in"
        raise FormatError(
            f"{path}: {kind} feature file, declared dim {dim} needs "
            f"{expected} bytes but file has {len(data)}",
            offset=expected,
        )
    values = np.frombuffer(data, dtype="<f4", count=dim, offset=9)
    return FeatureVector(_BYTE_TO_DOMAIN[domain_byte], values.copy())


# ---------------------------------------------------------------------------
# Manifests


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) not in (2, 3):
                raise FormatError(
                    f"{path}: expected '<name> <energy> [<category>]', got {line!r}",
                    line=lineno,
                )
            try:
                energy = float(tokens[1])
            except ValueError:
                raise FormatError(
                    f"{path}: energy {tokens[1]!r} is not a number", line=lineno
                )
            if not energy > 0 or not np.isfinite(energy):
                raise FormatError(
                    f"{path}: energy must be a positive finite number, got {tokens[1]}",
                    line=lineno,
                )
            entries.append(
                ManifestEntry(tokens[0], energy, tokens[2] if len(tokens) == 3 else None)
            )
    return entries


def write_manifest(path, entries) -> None:
    lines = []
    for e in entries:
        row = f"{e.name} {float(e.energy_kcal)!r}"
        if e.category:
            row += f" {e.category}"
        lines.append(row)
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# Dataset directories


def write_dataset(directory, samples) -> None:
    directory = Path(directory)
    (directory / DOMAIN_EDM).mkdir(parents=True, exist_ok=True)
    (directory / DOMAIN_RGB).mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        write_feature_file(directory / DOMAIN_EDM / f"{s.id}.fea", DOMAIN_EDM, s.x_m.values)
        write_feature_file(directory / DOMAIN_RGB / f"{s.id}.fea", DOMAIN_RGB, s.x_f.values)
        entries.append(ManifestEntry(s.id, s.target_kcal, s.category))
    write_manifest(directory / "manifest.txt", entries)


def load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{directory}: no manifest.txt")
    samples = []
    dims = None
    for entry in read_manifest(manifest):
        x_m = read_feature_file(directory / DOMAIN_EDM / f"{entry.name}.fea")
        x_f = read_feature_file(directory / DOMAIN_RGB / f"{entry.name}.fea")
        if x_m.domain != DOMAIN_EDM or x_f.domain != DOMAIN_RGB:
            raise FormatError(
                f"{entry.name}: feature files carry domains "
                f"({x_m.domain}, {x_f.domain}), expected (edm, rgb)"
            )
        pair = (x_m.values.size, x_f.values.size)
        if dims is None:
            dims = pair
        elif pair != dims:
            raise FormatError(
                f"{entry.name}: feature dims {pair} differ from the dataset's {dims}"
            )
        samples.append(Sample(entry.name, x_m, x_f, entry.energy_kcal, entry.category))
    return samples


# ---------------------------------------------------------------------------
# Checkpoints


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    header = {
        "variant": ckpt.variant,
        "dims": {"c_m": ckpt.c_m, "c_f": ckpt.c_f, "hidden": ckpt.hidden},
        "eps": ckpt.eps,
        "dropout_p": ckpt.dropout_p,
        "num_groups": ckpt.num_groups,
        "epoch": ckpt.epoch,
        "dtype": ckpt.dtype,
        "target_mean": ckpt.target_mean,
        "target_std": ckpt.target_std,
        "optimizer": {"kind": ckpt.opt_kind, "t": ckpt.opt_t},
        "params": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in zip(ckpt.param_names, ckpt.params)
        ],
        "config": ckpt.config,
    }
    blob = _canonical_json(header)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    arrays = list(ckpt.params)
    if ckpt.opt_kind == "adam":
        arrays += list(ckpt.opt_m) + list(ckpt.opt_v)
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:7] != CHECKPOINT_MAGIC[:7]:
        raise IncompatibleCheckpointError(
            f"{path}: bad checkpoint magic {data[:8]!r}", offset=0
        )
    if data[:8] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpointError(
            f"{path}: unsupported checkpoint version {data[7:8]!r}", offset=7
        )
    if len(data) < 12:
        raise FormatError(f"{path}: truncated checkpoint header", offset=len(data))
    (header_len,) = struct.unpack_from("<I", data, 8)
    body_start = 12 + header_len
    if len(data) < body_start:
        raise FormatError(f"{path}: truncated checkpoint header", offset=body_start)
    try:
        header = json.loads(data[12:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad checkpoint header: {exc}", offset=12)

    dtype = np.dtype(header["dtype"])
    shapes = [tuple(p["shape"]) for p in header["params"]]
    names = [p["name"] for p in header["params"]]
    n_param_values = sum(int(np.prod(s)) for s in shapes)
    copies = 3 if header["optimizer"]["kind"] == "adam" else 1
    expected = body_start + 8 * n_param_values * copies
    if len(data) != expected:
        raise FormatError(
            f"{path}: checkpoint payload is {len(data)} bytes, expected {expected}",
            offset=expected,
        )

    flat = np.frombuffer(data, dtype="<f8", offset=body_start)

    def take(pos):
        arrays = []
        for shape in shapes:
            size = int(np.prod(shape))
            arrays.append(flat[pos : pos + size].reshape(shape).astype(dtype))
            pos += size
        return arrays, pos

    params, pos = take(0)
    opt_m = opt_v = None
    if header["optimizer"]["kind"] == "adam":
        opt_m, pos = take(pos)
        opt_v, pos = take(pos)

    return Checkpoint(
        epoch=int(header["epoch"]),
        variant=header["variant"],
        c_m=int(header["dims"]["c_m"]),
        c_f=int(header["dims"]["c_f"]),
        hidden=int(header["dims"]["hidden"]),
        eps=float(header["eps"]),
        dropout_p=float(header["dropout_p"]),
        num_groups=int(header["num_groups"]),
        dtype=header["dtype"],
        param_names=names,
        params=params,
        opt_kind=header["optimizer"]["kind"],
        opt_t=int(header["optimizer"]["t"]),
        opt_m=opt_m,
        opt_v=opt_v,
        target_mean=header["target_mean"],
        target_std=header["target_std"],
        config=header.get("config", {}),
    )


# ---------------------------------------------------------------------------
# Run configuration


def load_run_config(path) -> dict:
    """Parse a run-configuration JSON file.

    Top-level keys: "synth" (SynthConfig fields), "train" (TrainConfig
    fields) and "seeds" (list of ints); all optional, unknown keys are
    rejected.  Returns {"synth": SynthConfig, "train": TrainConfig,
    "seeds": list | None}.
    """
    from .synthbench import SynthConfig  # local import to avoid a cycle
    from .training import TrainConfig

    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: not valid JSON: {exc}")
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: run config must be a JSON object")
    unknown = set(raw) - {"synth", "train", "seeds"}
    if unknown:
        raise FormatError(f"{path}: unknown run-config keys {sorted(unknown)}")

    def build(cls, section):
        fields = raw.get(section, {})
        if not isinstance(fields, dict):
            raise FormatError(f"{path}: {section!r} must be a JSON object")
        valid = {f.name for f in cls.__dataclass_fields__.values()}
        bad = set(fields) - valid
        if bad:
            raise FormatError(f"{path}: unknown {section} fields {sorted(bad)}")
        if "target_range" in fields:
            fields = dict(fields, target_range=tuple(fields["target_range"]))
        return cls(**fields)

    seeds = raw.get("seeds")
    if seeds is not None and (
        not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds)
    ):
        raise FormatError(f"{path}: 'seeds' must be a list of integers")
    return {
        "synth": build(SynthConfig, "synth"),
        "train": build(TrainConfig, "train"),
        "seeds": seeds,
    }
