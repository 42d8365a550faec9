"""Run manifests and versioned CSV emission.

Every CLI run writes a manifest recording the resolved configuration, the
master seed, and the sha256 of every emitted artifact, which is what makes
bit-identical replay checkable. CSV files open with a schema comment line so
their layout is versioned independently of the toolkit.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_SCHEMA = "equicert.manifest.v1"

CSV_SCHEMAS = {
    "outcomes": "equicert.outcomes.v1",
    "robustness_curve": "equicert.robustness_curve.v1",
    "security_curve": "equicert.security_curve.v1",
    "pgd_trace": "equicert.pgd_trace.v1",
    "train_history": "equicert.train_history.v1",
    "attack_eval": "equicert.attack_eval.v1",
}


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form, replay-stable
    return str(value)


def write_csv(path, kind: str, header: list[str], rows) -> None:
    schema = CSV_SCHEMAS[kind]
    lines = [f"# schema: {schema}\n", ",".join(header) + "\n"]
    for row in rows:
        lines.append(",".join(_format_cell(v) for v in row) + "\n")
    Path(path).write_text("".join(lines))


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise ValueError(f"{path} lacks a schema line")
    schema = lines[0][len("# schema: "):]
    header = lines[1].split(",")
    rows = [line.split(",") for line in lines[2:] if line]
    return schema, header, rows


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, command: str, config: dict, master_seed: int,
                   outputs: list[str], timings: dict | None = None) -> Path:
    """Record a run: resolved config, seed, and hashes of emitted files.

    outputs are paths relative to the manifest directory; every artifact the
    run produced must be listed.
    """
    root = Path(directory)
    entries = []
    for rel in sorted(outputs):
        entries.append({"path": rel, "sha256": sha256_file(root / rel)})
    doc = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "config": config,
        "master_seed": master_seed,
        "toolkit_version": __version__,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "outputs": entries,
    }
    if timings:
        doc["timings"] = timings
    path = root / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unsupported manifest schema {doc.get('schema')!r}")
    return doc


def compare_outputs(manifest: dict, directory) -> list[str]:
    """Return the paths whose current hashes differ from the manifest."""
    root = Path(directory)
    mismatched = []
    for entry in manifest["outputs"]:
        target = root / entry["path"]
        if not target.exists() or sha256_file(target) != entry["sha256"]:
            mismatched.append(entry["path"])
    return mismatched
