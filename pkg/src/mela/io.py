"""On-disk formats: atomic writes, JSONL/CSV, manifests, configs and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import CheckpointError, ConfigError
from .nets import PARAM_NAMES, ParamSet

CHECKPOINT_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write to a sibling temp file, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v)}")


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=_jsonable)


def write_jsonl(path, rows: Iterable[Mapping]) -> Path:
    return atomic_write_text(path, "".join(dumps(r) + "\n" for r in rows))


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(path, header: list[str], rows: Iterable[Iterable]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir) -> Path:
    """List every file under ``out_dir`` (except the manifest) with its sha256."""
    out_dir = Path(out_dir)
    files = sorted(p for p in out_dir.rglob("*")
                   if p.is_file() and p.name != "manifest.json" and not p.name.startswith("."))
    entries = [{"path": str(p.relative_to(out_dir)), "sha256": file_sha256(p),
                "bytes": p.stat().st_size} for p in files]
    return atomic_write_text(out_dir / "manifest.json", json.dumps({"artifacts": entries}, indent=2))


# -- configs -----------------------------------------------------------------

def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k.replace("-", "_")] = v
    return out


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null", ""):
        return None
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or default is None:
            return float(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value


def build_dataclass(cls, values: Mapping[str, object]):
    """Instantiate a dataclass from strings or typed values, rejecting unknown keys."""
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    defaults = cls()
    kw = {k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(dumps(dict(cfg)).encode()).hexdigest()[:16]


def config_text(cfg: Mapping) -> str:
    return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in sorted(cfg.items()))


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    arch: str
    actor: dict[str, np.ndarray]
    critic: ParamSet | None = None
    critic_target: ParamSet | None = None
    log_temperature: float = 0.0
    config: dict = dataclasses.field(default_factory=dict)
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    arrays = {f"actor/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in ckpt.actor.items()}
    for group in ("critic", "critic_target"):
        ps = getattr(ckpt, group)
        if ps is not None:
            arrays.update({f"{group}/{k}": v for k, v in ps.items()})
    header = {"version": CHECKPOINT_VERSION, "arch": ckpt.arch, "config": ckpt.config,
              "config_hash": ckpt.config_hash, "meta": ckpt.meta,
              "log_temperature": ckpt.log_temperature}
    arrays["header"] = np.frombuffer(dumps(header).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"{path}: checkpoint file not found")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as e:
        raise CheckpointError(f"{path}: not a readable checkpoint container ({e})") from None
    if "header" not in data:
        raise CheckpointError(f"{path}: missing field 'header'")
    try:
        header = json.loads(bytes(data.pop("header")).decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: field 'header' is corrupt") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    for k in ("arch", "config", "config_hash"):
        if k not in header:
            raise CheckpointError(f"{path}: header is missing field '{k}'")
    if config_hash(header["config"]) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash does not match the stored config")
    for k, v in data.items():
        if not np.isfinite(v).all():
            raise CheckpointError(f"{path}: field '{k}' holds non-finite values")
    actor = {k[6:]: v for k, v in data.items() if k.startswith("actor/")}
    if not actor:
        raise CheckpointError(f"{path}: missing actor parameters")
    needed = PARAM_NAMES if header["arch"] == "single" else [
        f"{g}.{n}" for g in ("experts", "gating") for n in PARAM_NAMES]
    missing = [n for n in needed if n not in actor]
    if missing:
        raise CheckpointError(f"{path}: missing field 'actor/{missing[0]}'")
    groups = {}
    for g in ("critic", "critic_target"):
        d = {k[len(g) + 1:]: v for k, v in data.items() if k.startswith(g + "/")}
        if not d:
            groups[g] = None
            continue
        missing = [n for n in PARAM_NAMES if n not in d]
        if missing:
            raise CheckpointError(f"{path}: missing field '{g}/{missing[0]}'")
        try:
            groups[g] = ParamSet.from_dict(d)
        except ValueError as e:
            raise CheckpointError(f"{path}: field '{g}': {e}") from None
    return Checkpoint(arch=header["arch"], actor=actor, critic=groups["critic"],
                      critic_target=groups["critic_target"],
                      log_temperature=float(header.get("log_temperature", 0.0)),
                      config=header["config"], meta=header.get("meta", {}))
