"""Run manifests: what ran, with which config, on which bytes.

Every CLI run directory gets a ``manifest.json`` written atomically at the
end of the run, listing the command, the resolved config, and content
hashes of all input and output files.  Wall time is recorded only outside
deterministic mode so that repeated deterministic runs stay byte-stable.
Run directories are guarded by an exclusive lock file while in use.
"""

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

from .determinism import deterministic_mode
from .errors import ConfigError

LOCK_NAME = ".pgst.lock"
MANIFEST_NAME = "manifest.json"


def sha256_file(path) -> str:
    h = sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_files(paths) -> dict[str, str]:
    """Map each existing path to its content hash, sorted by path."""
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_file():
            out[str(p)] = sha256_file(p)
    return dict(sorted(out.items()))


def hash_tree(root, skip: tuple[str, ...] = (LOCK_NAME, MANIFEST_NAME)) -> dict[str, str]:
    """Hashes of every file under ``root``, keyed by relative path."""
    root = Path(root)
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip:
            out[str(p.relative_to(root))] = sha256_file(p)
    return out


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    deterministic: bool = False
    wall_time_s: float | None = None

    def to_json(self) -> dict:
        obj = {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "deterministic": self.deterministic,
        }
        if not self.deterministic:
            obj["wall_time_s"] = self.wall_time_s
        return obj

    def write(self, run_dir) -> Path:
        """Atomically write ``manifest.json`` into ``run_dir``."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        target = run_dir / MANIFEST_NAME
        tmp = run_dir / (MANIFEST_NAME + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, target)
        return target


@contextmanager
def run_lock(run_dir):
    """Exclusive lock on a run directory for the duration of a command."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"run directory {run_dir} is in use (stale {LOCK_NAME}? remove it)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            lock_path.unlink()
        except OSError:
            pass


def finalize_run(
    run_dir,
    command: str,
    config: dict,
    seed: int | None,
    input_paths,
    wall_time_s: float | None,
) -> RunManifest:
    """Hash inputs and the run directory's outputs, then write the manifest."""
    det = deterministic_mode()
    manifest = RunManifest(
        command=command,
        config=config,
        seed=seed,
        inputs=hash_files(input_paths),
        outputs=hash_tree(run_dir),
        deterministic=det,
        wall_time_s=None if det else wall_time_s,
    )
    manifest.write(run_dir)
    return manifest
