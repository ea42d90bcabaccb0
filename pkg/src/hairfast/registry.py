"""Checkpoint registry: one bundle container holding every component under
its reserved name prefix, plus a manifest with content hashes.

Layout of a registry directory:

    bundle.hfck     all component tensors ("generator/...", "rotate/...", ...)
    manifest.json   {"version": 1, "fingerprint": ..., "generator_config": ...,
                     "alpha": ..., "perception_seeds": [...],
                     "files": {"bundle.hfck": "<sha256>"},
                     "components": {name: {"file": ..., "prefix": ...}}}

Loading verifies file hashes and that every component carries the same
generator-config fingerprint; mismatches are hard errors.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .checkpoint import file_sha256, load_container, save_container, state_to_tensors, tensors_to_state
from .config import GeneratorConfig
from .errors import CheckpointError
from .pipeline import HairFastRuntime

BUNDLE_NAME = "bundle.hfck"
MANIFEST_NAME = "manifest.json"
ENV_CHECKPOINT_DIR = "HAIRFAST_CHECKPOINT_DIR"


def default_checkpoint_dir() -> Path:
    return Path(os.environ.get(ENV_CHECKPOINT_DIR, "checkpoints"))


def save_runtime(rt: HairFastRuntime, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, module in rt.modules().items():
        if module is None:
            continue
        tensors.update(state_to_tensors(module, name))
    fingerprint = rt.cfg.fingerprint()
    meta = {
        "generator_config": rt.cfg.to_json(),
        "alpha": rt.alpha,
        "perception_seeds": list(rt.perception.seeds),
    }
    bundle = directory / BUNDLE_NAME
    save_container(bundle, tensors, fingerprint, meta)
    manifest = {
        "version": 1,
        "fingerprint": fingerprint,
        "generator_config": rt.cfg.to_json(),
        "alpha": rt.alpha,
        "perception_seeds": list(rt.perception.seeds),
        "files": {BUNDLE_NAME: file_sha256(bundle)},
        "components": {
            name: {"file": BUNDLE_NAME, "prefix": f"{name}/"}
            for name, module in rt.modules().items()
            if module is not None
        },
    }
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_runtime(directory) -> HairFastRuntime:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(f"no {MANIFEST_NAME} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    loaded: dict[str, tuple[dict, str]] = {}
    for fname, want_hash in manifest["files"].items():
        path = directory / fname
        if not path.exists():
            raise CheckpointError(f"manifest names missing file {fname!r}")
        got = file_sha256(path)
        if got != want_hash:
            raise CheckpointError(f"{fname}: content hash mismatch (expected {want_hash[:12]}..., got {got[:12]}...)")
        loaded[fname] = load_container(path)
    cfg = GeneratorConfig.from_json(manifest["generator_config"])
    fingerprint = cfg.fingerprint()
    if manifest["fingerprint"] != fingerprint:
        raise CheckpointError("manifest fingerprint does not match its generator config")
    for fname, (_, fp, _) in loaded.items():
        if fp != fingerprint:
            raise CheckpointError(
                f"{fname}: config fingerprint {fp} does not match registry {fingerprint}"
            )
    from .perception import PerceptionBundle  # deferred: keeps module import light

    rt = HairFastRuntime.from_random(cfg, seed=0)
    rt.alpha = float(manifest.get("alpha", 0.95))
    seeds = manifest.get("perception_seeds")
    if seeds:
        rt.perception = PerceptionBundle(cfg.embed_dim, tuple(int(s) for s in seeds))
    for name, entry in manifest["components"].items():
        tensors, _, _ = loaded[entry["file"]]
        module = rt.modules().get(name)
        if module is None:
            raise CheckpointError(f"manifest names unknown component {name!r}")
        tensors_to_state(module, tensors, name)
    rt.eval_all()
    return rt


def registry_hashes(directory) -> dict[str, str]:
    manifest = json.loads((Path(directory) / MANIFEST_NAME).read_text())
    return dict(manifest["files"])
