"""Run manifests: what a command produced, with content hashes."""

import hashlib
import json
import os

__all__ = ["write_run_manifest", "load_run_manifest", "verify_run_manifest", "file_sha256"]

MANIFEST_VERSION = 1


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_manifest(path, command, seed, config_hash, config_text, artifacts, wall_clock, extra=None):
    """``artifacts`` maps names to absolute or manifest-relative paths."""
    from . import __version__, backend_name

    root = os.path.dirname(os.path.abspath(path))
    entries = {}
    for name, apath in artifacts.items():
        rel = os.path.relpath(os.path.abspath(apath), root)
        entries[name] = {
            "path": rel,
            "sha256": file_sha256(apath),
            "bytes": os.path.getsize(apath),
        }
    payload = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "seed": seed,
        "config_hash": config_hash,
        "config_text": config_text,
        "artifacts": entries,
        "wall_clock_seconds": wall_clock,
        "backend": backend_name(),
        "package_version": __version__,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload


def load_run_manifest(path):
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported run manifest version")
    return manifest


def verify_run_manifest(path):
    """Check every referenced artifact exists and hash-matches.

    Returns (manifest, problems) where problems is a list of strings.
    """
    manifest = load_run_manifest(path)
    root = os.path.dirname(os.path.abspath(path))
    problems = []
    for name, entry in manifest.get("artifacts", {}).items():
        apath = os.path.join(root, entry["path"])
        if not os.path.exists(apath):
            problems.append(f"{name}: missing file {entry['path']}")
            continue
        digest = file_sha256(apath)
        if digest != entry["sha256"]:
            problems.append(f"{name}: hash mismatch for {entry['path']}")
    return manifest, problems
