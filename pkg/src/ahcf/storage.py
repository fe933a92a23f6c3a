"""Checkpoints, CSV/JSON reports, experiment configs and run manifests."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from .lattice import Lattice, LatticeField
from .structure import ENDO, FORM, AHStructure

MAGIC = b"AHCFCKPT"
FORMAT_VERSION = 1


class StorageError(ValueError):
    pass


# --- checkpoints ---------------------------------------------------------------------


def _lattice_dict(lat: Lattice) -> dict:
    return {"n": lat.n, "points_per_axis": lat.points_per_axis, "side_length": lat.side_length}


def write_checkpoint(path, times: Iterable[float], structures: list[AHStructure], records: list[dict] | None = None) -> None:
    """Self-describing container: magic, header length (uint64 LE), JSON header, raw '<f8' payloads."""
    times = [float(t) for t in times]
    if len(times) != len(structures) or not structures:
        raise StorageError("need one time per structure and at least one structure")
    lat = structures[0].lattice
    fields_ = [("g", FORM), ("J", ENDO), ("omega", FORM)]
    offsets, blobs, pos = [], [], 0
    for s in structures:
        if s.lattice != lat:
            raise StorageError("all structures must share one lattice")
        entry = {}
        for name, _ in fields_:
            arr = np.ascontiguousarray(getattr(s, name).data, dtype="<f8")
            blobs.append(arr.tobytes())
            entry[name] = [pos, list(arr.shape)]
            pos += arr.nbytes
        entry["volume"] = s.volume
        offsets.append(entry)
    header = {
        "version": FORMAT_VERSION,
        "lattice": _lattice_dict(lat),
        "valences": {name: list(v) for name, v in fields_},
        "times": times,
        "states": offsets,
        "records": _jsonable(records or []),
        "dtype": "<f8",
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[list[float], list[AHStructure], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise StorageError("not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise StorageError(f"unsupported checkpoint version {header.get('version')}")
    base = start + hlen
    lat = Lattice(**header["lattice"])
    valences = {k: tuple(v) for k, v in header["valences"].items()}
    structures = []
    for entry in header["states"]:
        arrs = {}
        for name in ("g", "J", "omega"):
            off, shape = entry[name]
            count = int(np.prod(shape))
            arrs[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=base + off).reshape(shape).copy()
        structures.append(
            AHStructure(
                g=LatticeField(lat, valences["g"], arrs["g"]),
                J=LatticeField(lat, valences["J"], arrs["J"]),
                omega=LatticeField(lat, valences["omega"], arrs["omega"]),
                volume=float(entry["volume"]),
            )
        )
    return header["times"], structures, header


# --- reports -------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def csv_columns(k: int) -> list[str]:
    return ["t", "rho_l2", "psi_l2"] + [f"psi_c{j}" for j in range(k + 1)] + ["gauge", "pi0_ratio"]


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def dumps_csv(records: list[dict], k: int) -> str:
    buf = io.StringIO()
    cols = csv_columns(k)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def write_csv(path, records: list[dict], k: int) -> None:
    Path(path).write_text(dumps_csv(records, k), encoding="utf-8")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, config: dict, artifacts: list[str]) -> Path:
    out_dir = Path(out_dir)
    entries = {name: sha256(out_dir / name) for name in sorted(artifacts)}
    path = out_dir / "manifest.json"
    write_json(path, {"config": config, "artifacts": entries, "format_version": FORMAT_VERSION})
    return path


# --- configuration -------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Experiment settings.  Keys of the config file match the field names."""

    n: int = 1
    points_per_axis: int = 12
    side_length: float = 2 * math.pi
    amplitude: float = 1e-2
    mode_band: tuple = (1, 2)
    seed: int = 0
    dt: float = 0.05
    t_end: float = 5.0
    record_every: int = 2
    s_param: float = 0.0
    recenter_T: float = 0.0
    fit_window_fraction: float = 0.2
    gauge: str = "deturck"
    norm_order: int = 2
    intervals: int = 4
    components: str = "both"

    def lattice(self) -> Lattice:
        return Lattice(self.n, self.points_per_axis, self.side_length)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode_band"] = list(self.mode_band)
        return d


CONFIG_KEYS = tuple(f.name for f in fields(ExperimentConfig))


def _coerce(key: str, value):
    default = getattr(ExperimentConfig, key, None)
    if key == "mode_band":
        if isinstance(value, str):
            parts = [p for p in value.replace(":", ",").replace(" ", ",").split(",") if p]
        else:
            parts = list(value)
        if len(parts) != 2:
            raise StorageError("mode_band needs two integers kmin,kmax")
        return (int(parts[0]), int(parts[1]))
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        v = str(value).strip().lower()
        if v in ("2pi", "2*pi"):
            return 2 * math.pi
        return float(value)
    return str(value)


def parse_overrides(text: str | None) -> dict:
    """Parse ``k=v[,k=v...]``; a comma inside ``mode_band=1,2`` is kept with its key."""
    out = {}
    if not text:
        return out
    key = None
    for piece in text.split(","):
        if "=" in piece:
            key, value = piece.split("=", 1)
            key = key.strip()
            out[key] = value.strip()
        elif key is not None:
            out[key] = out[key] + "," + piece.strip()
        else:
            raise StorageError(f"malformed override {piece!r}")
    return out


def make_config(values: dict | None = None) -> ExperimentConfig:
    values = values or {}
    unknown = sorted(set(values) - set(CONFIG_KEYS))
    if unknown:
        raise StorageError(f"unknown config keys: {', '.join(unknown)}")
    return ExperimentConfig(**{k: _coerce(k, v) for k, v in values.items()})


def read_config_file(path) -> dict:
    """Read ``key = value`` lines (an optional ``[section]`` header is ignored)."""
    text = Path(path).read_text(encoding="utf-8")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if not text.lstrip().startswith("["):
        text = "[experiment]\n" + text
    parser.read_string(text)
    out = {}
    for section in parser.sections():
        out.update(dict(parser[section]))
    return out


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    values = read_config_file(path) if path else {}
    values.update(overrides or {})
    return make_config(values)
