"""Self-describing named-array containers and run manifests.

Every artifact (dataset, checkpoint, observation stream, trajectory) is one
NumPy ``.npz`` archive holding named arrays plus a ``__meta__`` entry with a
JSON key-value block.  Artifact identity is a content hash over the arrays
and metadata, so it is stable across rewrites of the same data (zip headers
carry timestamps and are excluded on purpose).
"""

import hashlib
import json
import os
import platform
import time

import numpy as np

from .errors import InvalidInput

SCHEMA_VERSION = 1
TOOL_VERSION = "0.1.0"

META_KEY = "__meta__"

# Metadata keys excluded from content hashing (vary run to run without
# changing the payload).
_VOLATILE_META = ("created_at", "hostname", "wall_time_s")


def save_container(path, arrays, meta=None):
    """Write named arrays plus a JSON metadata block to ``path``.

    Returns the content hash of what was written.
    """
    arrays = dict(arrays)
    if META_KEY in arrays:
        raise InvalidInput(f"array name {META_KEY!r} is reserved")
    meta = dict(meta or {})
    meta.setdefault("schema_version", SCHEMA_VERSION)
    meta.setdefault("tool_version", TOOL_VERSION)
    meta.setdefault("created_at", time.strftime("%Y-%m-%dT%H:%M:%S"))
    digest = content_hash(arrays, meta)
    meta["content_hash"] = digest
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    # A file handle keeps the name exactly as given (np.savez would append
    # .npz to a bare path).
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **payload)
    return digest


def load_container(path):
    """Read a container; returns ``(arrays, meta)``."""
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive:
            raise InvalidInput(f"{path}: not a cada container (missing metadata block)")
        meta = json.loads(str(archive[META_KEY]))
        arrays = {k: archive[k] for k in archive.files if k != META_KEY}
    version = meta.get("schema_version")
    if version != SCHEMA_VERSION:
        raise InvalidInput(f"{path}: schema version {version} not supported (want {SCHEMA_VERSION})")
    return arrays, meta


def content_hash(arrays, meta=None):
    """Hash array names, dtypes, shapes, raw bytes, and stable metadata."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name]))
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    if meta is not None:
        stable = {
            k: v
            for k, v in meta.items()
            if k not in _VOLATILE_META and k != "content_hash"
        }
        h.update(json.dumps(stable, sort_keys=True, default=str).encode())
    return h.hexdigest()


def container_content_hash(path):
    """Content hash of an existing container file."""
    arrays, meta = load_container(path)
    return content_hash(arrays, meta)


def state_dict_arrays(state_dict, prefix):
    """Flatten a torch ``state_dict`` into ``{prefix/name: ndarray}``."""
    out = {}
    for name, tensor in state_dict.items():
        out[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    return out


def arrays_state_dict(arrays, prefix):
    """Inverse of :func:`state_dict_arrays`; returns ``{name: ndarray}``."""
    import torch

    head = prefix + "/"
    return {
        k[len(head):]: torch.from_numpy(np.ascontiguousarray(v))
        for k, v in arrays.items()
        if k.startswith(head)
    }


def params_hash(state_dict):
    """Order-independent hash of named parameters; used to link checkpoints."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        value = state_dict[name]
        arr = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def write_manifest(out_path, command, config, input_hashes, seed, started_at,
                   metrics=None, output_hash=None):
    """Write the run manifest JSON next to ``out_path``."""
    manifest = {
        "command": command,
        "config": config,
        "input_hashes": input_hashes,
        "output_hash": output_hash,
        "seed": seed,
        "started_at": started_at,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "wall_time_s": round(time.time() - _parse_ts(started_at), 3),
        "tool_version": TOOL_VERSION,
        "hostname": platform.node(),
        "metrics": metrics or {},
    }
    path = manifest_path(out_path)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def manifest_path(out_path):
    return str(out_path) + ".manifest.json"


def read_manifest(out_path):
    with open(manifest_path(out_path)) as fh:
        return json.load(fh)


def _parse_ts(stamp):
    try:
        return time.mktime(time.strptime(stamp, "%Y-%m-%dT%H:%M:%S"))
    except (ValueError, TypeError):
        return time.time()


def cache_dir():
    """Directory for intermediate artifacts (``CADA_CACHE_DIR`` overrides)."""
    return os.environ.get("CADA_CACHE_DIR", os.path.join(os.path.expanduser("~"), ".cache", "cada"))
