"""Binary checkpoint container.

Layout: magic ``WNPH``, format version (u32 LE), header length (u64 LE),
canonical JSON header, then the raw little-endian array payloads in
header order. The header serialization is deterministic, so
save -> load -> save produces byte-identical files. Checkpoints holding
non-finite values are never written.
"""

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import CheckpointError, NonFiniteError
from .model import Encoder, ModelConfig
from .objectives import CodebookState

MAGIC = b"WNPH"
FORMAT_VERSION = 1


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True).encode("utf-8")


def save(path, encoder: Encoder, step=0, kind="supervised", train_config=None,
         optimizer=None, codebook=None):
    arrays = OrderedDict()
    for name, t in encoder.named_tensors().items():
        arrays[f"param/{name}"] = np.ascontiguousarray(t.data)
    for name, b in encoder.named_buffers().items():
        arrays[f"buffer/{name}"] = np.ascontiguousarray(b)
    opt_meta = None
    if optimizer is not None:
        m, v = optimizer.state_arrays()
        for name in sorted(m):
            arrays[f"opt_m/{name}"] = np.ascontiguousarray(m[name])
            arrays[f"opt_v/{name}"] = np.ascontiguousarray(v[name])
        opt_meta = {"t": optimizer.t}
    cb_meta = None
    if codebook is not None:
        arrays["codebook/entries"] = np.ascontiguousarray(codebook.entries)
        arrays["codebook/ema_cluster_size"] = np.ascontiguousarray(codebook.ema_cluster_size)
        arrays["codebook/ema_embed_sum"] = np.ascontiguousarray(codebook.ema_embed_sum)
        cb_meta = {"decay": codebook.decay, "laplace_epsilon": codebook.laplace_epsilon}

    for name, arr in arrays.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"refusing to write checkpoint: {name} has non-finite values")

    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "step": int(step),
        "config": encoder.cfg.to_dict(),
        "train_config": train_config,
        "has_pt_head": encoder.has_pt_head,
        "frozen_feature_extractor": encoder.frozen_feature_extractor,
        "optimizer": opt_meta,
        "codebook": cb_meta,
        "arrays": [[name, list(arr.shape), str(arr.dtype)]
                   for name, arr in arrays.items()],
    }
    blob = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return path


class Checkpoint:
    def __init__(self, header, arrays):
        self.header = header
        self.arrays = arrays

    @property
    def kind(self):
        return self.header["kind"]

    @property
    def step(self):
        return self.header["step"]

    @property
    def train_config(self):
        return self.header["train_config"]

    def model_config(self):
        return ModelConfig.from_dict(self.header["config"])

    def section(self, prefix):
        plen = len(prefix)
        return {name[plen:]: arr for name, arr in self.arrays.items()
                if name.startswith(prefix)}

    def codebook(self):
        meta = self.header.get("codebook")
        if meta is None:
            return None
        return CodebookState(entries=self.arrays["codebook/entries"].copy(),
                             ema_cluster_size=self.arrays["codebook/ema_cluster_size"].copy(),
                             ema_embed_sum=self.arrays["codebook/ema_embed_sum"].copy(),
                             decay=meta["decay"], laplace_epsilon=meta["laplace_epsilon"])


def load(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    arrays = OrderedDict()
    pos = 16 + hlen
    for name, shape, dtype in header["arrays"]:
        dt = np.dtype(dtype).newbyteorder("<")
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(raw[pos:pos + nbytes], dtype=dt) \
                         .reshape(shape).astype(np.dtype(dtype))
        pos += nbytes
    return Checkpoint(header, arrays)


def restore_encoder(ckpt: Checkpoint, seed=0):
    enc = Encoder(ckpt.model_config(), seed=seed)
    if not ckpt.header["has_pt_head"]:
        enc.drop_pt_head()
    params = ckpt.section("param/")
    tensors = enc.named_tensors()
    missing = set(tensors) - set(params)
    extra = set(params) - set(tensors)
    if missing or extra:
        raise CheckpointError(
            f"parameter mismatch: missing {sorted(missing)[:4]}, extra {sorted(extra)[:4]}")
    for name, t in tensors.items():
        if tuple(params[name].shape) != t.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: {params[name].shape} vs {t.data.shape}")
        t.data = params[name].copy()
    buffers = ckpt.section("buffer/")
    for name, b in enc.named_buffers().items():
        if name not in buffers:
            raise CheckpointError(f"missing buffer {name}")
        b[:] = buffers[name]
    if ckpt.header["frozen_feature_extractor"]:
        enc.freeze_feature_extractor()
    return enc


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
