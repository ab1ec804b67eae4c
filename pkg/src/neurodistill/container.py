"""On-disk formats: session containers and model checkpoints.

Both formats pair a small JSON manifest with raw little-endian arrays so
any language can read them. Containers are one directory per session
(manifest.json plus one file per array); checkpoints are a single file
with a magic string, a length-prefixed JSON header and a concatenated
array blob. Serialization is canonical (sorted keys, fixed separators),
so saving the same state twice produces identical bytes.
"""

from __future__ import annotations

import json
import os

import numpy as np

SCHEMA_VERSION = 1
CKPT_MAGIC = b"NDCKPT01\n"

_DTYPES = {
    "uint8": ("<u1", np.uint8),
    "float32": ("<f4", np.float32),
    "float64": ("<f8", np.float64),
    "int64": ("<i8", np.int64),
}


def _canon_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _dtype_name(arr):
    name = arr.dtype.name
    if name not in _DTYPES:
        raise ValueError(f"unsupported array dtype {name}")
    return name


# ---------------------------------------------------------------------------
# session containers


def write_session_container(dirpath, session, stats=None, subject_id="synthetic", bin_ms=10.0):
    """Write one session directory: manifest.json + raw array files."""
    os.makedirs(dirpath, exist_ok=True)
    # fixed wire types: counts are uint8, every dense stream is float32
    arrays = {
        "spikes": np.ascontiguousarray(session.spikes, dtype=np.uint8),
        "lfp": np.ascontiguousarray(session.lfp, dtype=np.float32),
        "behavior": np.ascontiguousarray(session.behavior, dtype=np.float32),
    }
    if getattr(session, "true_latents", None) is not None:
        arrays["true_latents"] = np.ascontiguousarray(session.true_latents, dtype=np.float32)
    n_t = arrays["spikes"].shape[0]
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "session_id": session.session_id,
        "subject_id": subject_id,
        "bin_ms": bin_ms,
        "n_timesteps": int(n_t),
        "seq_len": int(getattr(session, "seq_len", 0)),
        "dims": {},
        "arrays": {},
        "zscore_stats": {},
    }
    for name, arr in arrays.items():
        if arr.shape[0] != n_t:
            raise ValueError(f"{name} timestep count disagrees with spikes")
        dname = _dtype_name(arr)
        fname = f"{name}.bin"
        manifest["dims"][name] = int(arr.shape[1])
        manifest["arrays"][name] = {
            "file": fname,
            "dtype": dname,
            "shape": list(arr.shape),
        }
        little = arr.astype(_DTYPES[dname][0], copy=False)
        with open(os.path.join(dirpath, fname), "wb") as f:
            f.write(little.tobytes(order="C"))
    for mod, (mean, std) in (stats or {}).items():
        manifest["zscore_stats"][mod] = {
            "mean": [float(v) for v in np.asarray(mean).ravel()],
            "std": [float(v) for v in np.asarray(std).ravel()],
        }
    with open(os.path.join(dirpath, "manifest.json"), "wb") as f:
        f.write(_canon_json(manifest))
    return manifest


def read_session_container(dirpath):
    """Load a session directory; validates schema and byte lengths."""
    with open(os.path.join(dirpath, "manifest.json"), "rb") as f:
        manifest = json.loads(f.read())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(
            f"container schema {manifest.get('schema_version')} != supported {SCHEMA_VERSION}"
        )
    arrays = {}
    for name, entry in manifest["arrays"].items():
        path = os.path.join(dirpath, entry["file"])
        wire, np_dtype = _DTYPES[entry["dtype"]]
        raw = np.fromfile(path, dtype=wire)
        shape = tuple(entry["shape"])
        expect = int(np.prod(shape))
        if raw.size != expect:
            raise ValueError(
                f"{name}: file holds {raw.size} values but manifest says {shape}"
            )
        arrays[name] = raw.reshape(shape).astype(np_dtype, copy=False)
    stats = {
        mod: (np.asarray(s["mean"]), np.asarray(s["std"]))
        for mod, s in manifest.get("zscore_stats", {}).items()
    }
    return manifest, arrays, stats


def write_dataset(dirpath, sessions, gen_manifest, stats_by_session=None):
    """Dataset dir: index.json + one container subdir per session."""
    os.makedirs(dirpath, exist_ok=True)
    index = {"schema_version": SCHEMA_VERSION, "generator": gen_manifest, "sessions": []}
    for s in sessions:
        sub = os.path.join(dirpath, s.session_id)
        stats = (stats_by_session or {}).get(s.session_id)
        write_session_container(sub, s, stats=stats)
        index["sessions"].append(s.session_id)
    with open(os.path.join(dirpath, "index.json"), "wb") as f:
        f.write(_canon_json(index))
    return index


def read_dataset(dirpath):
    with open(os.path.join(dirpath, "index.json"), "rb") as f:
        index = json.loads(f.read())
    if index.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("dataset index schema mismatch")
    out = []
    for sid in index["sessions"]:
        out.append(read_session_container(os.path.join(dirpath, sid)))
    return index, out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays, meta=None):
    """Write named arrays + JSON-able meta to one file.

    arrays: dict name -> ndarray (Tensors should be unwrapped by the
    caller). Entries are laid out in sorted-name order, so identical state
    always produces identical bytes.
    """
    names = sorted(arrays)
    entries = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        dname = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dname][0], copy=False).tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": dname,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = _canon_json(
        {"schema_version": SCHEMA_VERSION, "meta": meta or {}, "entries": entries}
    )
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(len(header).to_bytes(4, "little"))
        f.write(header)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path, names=None):
    """Read (arrays, meta); names, if given, loads just that subset.

    Unknown requested names raise with the available manifest, which is
    how config/checkpoint mismatches surface.
    """
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        hlen = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(hlen))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(
                f"checkpoint schema {header.get('schema_version')} != {SCHEMA_VERSION}"
            )
        base = f.tell()
        by_name = {e["name"]: e for e in header["entries"]}
        if names is None:
            names = list(by_name)
        missing = [n for n in names if n not in by_name]
        if missing:
            raise KeyError(
                f"checkpoint lacks entries {missing}; it holds {sorted(by_name)[:8]}..."
            )
        arrays = {}
        for name in names:
            e = by_name[name]
            f.seek(base + e["offset"])
            raw = f.read(e["nbytes"])
            wire, np_dtype = _DTYPES[e["dtype"]]
            arrays[name] = (
                np.frombuffer(raw, dtype=wire).reshape(tuple(e["shape"])).astype(np_dtype)
            )
    return arrays, header["meta"]
