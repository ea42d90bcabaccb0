import hashlib
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CACHE_ROOT = Path(__file__).parent / ".stack_cache"


def _source_hash() -> str:
    root = Path(__file__).parent.parent / "src" / "hairfast"
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


@dataclass
class StackHandle:
    runtime: object
    train_data: object
    heldout: object
    build_seconds: float


@pytest.fixture(scope="session")
def toy_stack():
    """Trained tiny stack; rebuilt when the package source changes, cached
    on disk otherwise so reruns skip the training wait."""
    from hairfast import toystack
    from hairfast.data import SyntheticFaces
    from hairfast.registry import load_runtime, save_runtime

    cfg = toystack.tiny_config()
    sizes = toystack.tiny_sizes()
    cache = CACHE_ROOT / f"{_source_hash()}-{cfg.fingerprint()}"
    meta_path = cache / "build_meta.json"
    if meta_path.exists():
        rt = load_runtime(cache)
        build_seconds = json.loads(meta_path.read_text())["build_seconds"]
    else:
        start = time.time()
        stack = toystack.build_toy_stack(cfg, sizes, seed=0)
        build_seconds = time.time() - start
        rt = stack.runtime
        cache.parent.mkdir(exist_ok=True)
        save_runtime(rt, cache)
        meta_path.write_text(json.dumps({"build_seconds": build_seconds}))
    train_data = SyntheticFaces(sizes.n_train, cfg, seed=100)
    heldout = SyntheticFaces(sizes.n_heldout, cfg, seed=200)
    return StackHandle(runtime=rt, train_data=train_data, heldout=heldout,
                       build_seconds=build_seconds)
