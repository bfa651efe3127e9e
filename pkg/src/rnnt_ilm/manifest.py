"""Provenance records written next to every command output."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional

MANIFEST_SUFFIX = ".manifest.json"
CONFIG_SUFFIX = ".config.json"


class UnwritableError(OSError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _files(path: Path) -> List[Path]:
    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.is_file())
    return [path]


def digests(paths: Iterable) -> Dict[str, str]:
    """sha256 of every file, expanding directories recursively."""
    out = {}
    for p in paths:
        for f in _files(Path(p)):
            out[str(f)] = sha256_file(f)
    return dict(sorted(out.items()))


def manifest_path(out) -> Path:
    return Path(str(out).rstrip("/") + MANIFEST_SUFFIX)


def config_path(out) -> Path:
    return Path(str(out).rstrip("/") + CONFIG_SUFFIX)


def run_key(command: str, args: dict, config: dict, inputs: Dict[str, str]) -> str:
    blob = json.dumps({"command": command, "args": args, "config": config, "inputs": inputs}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def up_to_date(out, key: str) -> bool:
    """True when a manifest with ``key`` exists and every output it lists is unchanged."""
    mpath = manifest_path(out)
    if not mpath.exists():
        return False
    try:
        record = json.loads(mpath.read_text())
    except json.JSONDecodeError:
        return False
    if record.get("key") != key:
        return False
    for path, digest in record.get("outputs", {}).items():
        if not Path(path).is_file() or sha256_file(path) != digest:
            return False
    return True


def ensure_writable(path) -> None:
    parent = Path(path).parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UnwritableError(f"cannot create {parent}: {e}") from e
    if not os.access(parent, os.W_OK):
        raise UnwritableError(f"directory {parent} is not writable")


def write_manifest(out, command: str, args: dict, config: dict, seeds: dict, inputs: Dict[str, str],
                   outputs: Iterable, wall_clock: float, key: str) -> dict:
    """Write the resolved config and the manifest beside ``out``; return the manifest record."""
    cpath = config_path(out)
    ensure_writable(cpath)
    cpath.write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    record = {
        "command": command,
        "key": key,
        "args": args,
        "seeds": seeds,
        "config_file": str(cpath),
        "inputs": inputs,
        "outputs": digests(list(outputs) + [cpath]),
        "wall_clock_s": round(wall_clock, 3),
    }
    manifest_path(out).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def run_manifest(run_dir) -> dict:
    """Aggregate provenance for a run directory.

    Collects every manifest below ``run_dir`` and reports artifacts that no
    manifest lists (``unlisted``) and listed outputs whose digest no longer
    matches (``modified``).
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise FileNotFoundError(f"no run directory {run_dir}")
    records, listed, modified = [], set(), []
    for mpath in sorted(run_dir.rglob("*" + MANIFEST_SUFFIX)):
        rec = json.loads(mpath.read_text())
        records.append({"manifest": str(mpath), **rec})
        for path, digest in rec.get("outputs", {}).items():
            listed.add(str(Path(path).resolve()))
            if not Path(path).is_file() or sha256_file(path) != digest:
                modified.append(path)
    skip = lambda p: p.name.endswith(MANIFEST_SUFFIX) or p.name == "provenance.json"
    unlisted = [str(p) for p in sorted(run_dir.rglob("*"))
                if p.is_file() and not skip(p) and str(p.resolve()) not in listed]
    summary = {"run_dir": str(run_dir), "runs": records, "unlisted": unlisted, "modified": modified}
    out = run_dir / "provenance.json"
    try:
        out.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise UnwritableError(f"cannot write {out}: {e}") from e
    return summary
