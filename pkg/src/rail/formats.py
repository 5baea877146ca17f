"""Binary artifact formats: RCKP1 checkpoints and RDEM1 demonstration files.

Both containers start with a 5-byte magic, a little-endian uint32 header
length and a UTF-8 JSON header, followed by row-major little-endian blobs.
Checkpoints store policy weights and normalizer moments as float32 and may
carry an optional discriminator section (its own length-prefixed JSON
sub-header plus blobs). Demonstration files store per-episode step counts
followed by interleaved (float32[n] observation, uint8 action) records.
"""

import hashlib
import json
import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .discriminator import DiscriminatorParams
from .errors import FormatError
from .policy import NormalizerState, PolicyParams

CHECKPOINT_MAGIC = b"RCKP1"
DEMO_MAGIC = b"RDEM1"


def config_digest(config_dict: dict) -> str:
    """Content hash of a JSON-serializable configuration."""
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_header(f, header: dict):
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


def _read_exact(f, size: int, what: str) -> bytes:
    data = f.read(size)
    if len(data) != size:
        raise FormatError(f"truncated file while reading {what}")
    return data


def _read_header(f, what: str, limit: int = 1 << 20) -> dict:
    (length,) = struct.unpack("<I", _read_exact(f, 4, f"{what} length"))
    if length == 0 or length > limit:
        raise FormatError(f"implausible {what} length {length}")
    try:
        return json.loads(_read_exact(f, length, what).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed {what}: {exc}") from exc


def _write_blob(f, array: np.ndarray):
    f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def _read_blob(f, shape, what: str) -> np.ndarray:
    count = int(np.prod(shape))
    raw = _read_exact(f, count * 4, what)
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)


@dataclass
class Checkpoint:
    params: PolicyParams
    normalizer: NormalizerState
    disc: Optional[DiscriminatorParams] = None
    extra: Optional[dict] = None


def write_checkpoint(path, params: PolicyParams, normalizer: NormalizerState,
                     disc: Optional[DiscriminatorParams] = None,
                     extra: Optional[dict] = None):
    header = {
        "kind": params.kind,
        "n": params.n,
        "h": params.h,
        "p": params.p,
        "normalizer_count": normalizer.count,
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        _write_header(f, header)
        _write_blob(f, params.w_in)
        if params.w_out is not None:
            _write_blob(f, params.w_out)
        _write_blob(f, normalizer.mean)
        _write_blob(f, normalizer.m2)
        if disc is not None:
            _write_header(f, {"hidden": disc.hidden,
                              "input_dim": disc.input_dim})
            _write_blob(f, disc.w1)
            _write_blob(f, disc.b1)
            _write_blob(f, disc.w2)
            _write_blob(f, np.asarray([disc.b2]))


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, len(CHECKPOINT_MAGIC), "magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        header = _read_header(f, "checkpoint header")
        for key in ("kind", "n", "h", "p", "normalizer_count"):
            if key not in header:
                raise FormatError(f"checkpoint header missing {key!r}")
        kind = header["kind"]
        n, h, p = int(header["n"]), int(header["h"]), int(header["p"])
        if kind == "linear":
            params = PolicyParams(kind, _read_blob(f, (p, n), "policy weights"))
        elif kind == "two_layer":
            params = PolicyParams(kind,
                                  _read_blob(f, (h, n), "input layer"),
                                  _read_blob(f, (p, h), "output layer"))
        else:
            raise FormatError(f"unknown policy kind {kind!r}")
        normalizer = NormalizerState(
            count=int(header["normalizer_count"]),
            mean=_read_blob(f, (n,), "normalizer mean"),
            m2=_read_blob(f, (n,), "normalizer m2"),
        )
        disc = None
        pos = f.tell()
        if f.read(1):
            f.seek(pos)
            sub = _read_header(f, "discriminator sub-header")
            m = int(sub["hidden"])
            d = int(sub["input_dim"])
            disc = DiscriminatorParams(
                w1=_read_blob(f, (m, d), "disc w1"),
                b1=_read_blob(f, (m,), "disc b1"),
                w2=_read_blob(f, (m,), "disc w2"),
                b2=float(_read_blob(f, (1,), "disc b2")[0]),
            )
        trailing = f.read(1)
        if trailing:
            raise FormatError("unexpected trailing bytes in checkpoint")
    return Checkpoint(params, normalizer, disc, header.get("extra", {}))


def write_demos(path, episodes: List, n: int, p: int,
                config_digest_hex: str, source: str = ""):
    """Write trajectories as an RDEM1 file. Observations quantize to float32."""
    step_dtype = np.dtype([("obs", "<f4", (n,)), ("act", "u1")])
    header = {
        "n": n,
        "p": p,
        "episodes": len(episodes),
        "config_digest": config_digest_hex,
        "source": source,
    }
    with open(path, "wb") as f:
        f.write(DEMO_MAGIC)
        _write_header(f, header)
        for traj in episodes:
            steps = len(traj)
            record = np.empty(steps, dtype=step_dtype)
            record["obs"] = traj.observations.astype("<f4")
            record["act"] = traj.actions.astype("u1")
            f.write(struct.pack("<I", steps))
            f.write(record.tobytes())


def read_demos(path):
    """Read an RDEM1 file -> (episodes as (obs, actions) Trajectories, header)."""
    from .highway import Trajectory

    with open(path, "rb") as f:
        magic = _read_exact(f, len(DEMO_MAGIC), "magic")
        if magic != DEMO_MAGIC:
            raise FormatError(f"bad demonstration magic {magic!r}")
        header = _read_header(f, "demonstration header")
        for key in ("n", "p", "episodes", "config_digest"):
            if key not in header:
                raise FormatError(f"demonstration header missing {key!r}")
        n = int(header["n"])
        count = int(header["episodes"])
        step_dtype = np.dtype([("obs", "<f4", (n,)), ("act", "u1")])
        episodes = []
        for i in range(count):
            (steps,) = struct.unpack("<I", _read_exact(f, 4, "episode length"))
            if steps == 0 or steps > 10_000_000:
                raise FormatError(f"implausible episode length {steps}")
            raw = _read_exact(f, steps * step_dtype.itemsize, f"episode {i}")
            record = np.frombuffer(raw, dtype=step_dtype)
            episodes.append(Trajectory(
                observations=record["obs"].astype(np.float64),
                actions=record["act"].astype(np.int64),
            ))
        if f.read(1):
            raise FormatError("unexpected trailing bytes in demonstration file")
    return episodes, header
