"""Checkpoint files: raw little-endian parameter blocks with a manifest.

Layout (all little-endian):
  magic "WMCK" | u32 version | u64 step_count | u32 meta_len | meta JSON |
  u32 block_count | blocks... | u32 crc32-of-everything-before

Each block: u16 name_len | name utf8 | u8 ndim | u32*ndim shape | f32 data.
Blocks are written in sorted name order, so save -> load -> save round-trips
byte-identically. The meta JSON carries the model dims and a config hash.

A .trainstate.npz sidecar (optional) carries everything needed to resume a
training run exactly: replay episodes, optimizer moments, and RNG states.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .trainer import ActorCriticParams, ReplayBuffer, init_actor_critic
from .world_model import ModelConfig, WorldModelParams, init_world_model
from .autodiff import AdamState, Tensor

MAGIC = b"WMCK"
VERSION = 1

DIM_FIELDS = ("obs_dim", "action_count", "h", "groups", "classes", "hidden",
              "ensemble", "ensemble_hidden")


class CheckpointError(RuntimeError):
    pass


def _meta_dict(cfg: ModelConfig, config_hash: str) -> dict:
    return {"dims": {f: getattr(cfg, f) for f in DIM_FIELDS}, "config_hash": config_hash}


def save_checkpoint(path, wm: WorldModelParams, ac: ActorCriticParams,
                    step_count: int, config_hash: str = "0" * 16) -> None:
    blocks = {f"wm.{k}": v.data for k, v in wm.params.items()}
    blocks.update({f"ac.{k}": v.data for k, v in ac.params.items()})
    meta = json.dumps(_meta_dict(wm.cfg, config_hash), sort_keys=True).encode()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IQ", VERSION, step_count)
    out += struct.pack("<I", len(meta))
    out += meta
    out += struct.pack("<I", len(blocks))
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f4")
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path, expect_cfg: ModelConfig | None = None):
    """Returns (wm, ac, step_count, meta). Raises CheckpointError on a bad
    magic/version/checksum or a dim mismatch with ``expect_cfg``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint: {err}") from err
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    off = 4
    version, step_count = struct.unpack_from("<IQ", raw, off)
    off += 12
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    (n_blocks,) = struct.unpack_from("<I", raw, off)
    off += 4
    blocks = {}
    for _ in range(n_blocks):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        blocks[name] = arr.astype(np.float32)
    cfg = ModelConfig(**meta["dims"])
    if expect_cfg is not None and cfg != expect_cfg:
        raise CheckpointError(
            f"{path}: dims {meta['dims']} do not match the configured model")
    wm = init_world_model(cfg, np.random.default_rng(0))
    ac = init_actor_critic(cfg, np.random.default_rng(0))
    for k, t in wm.params.items():
        key = f"wm.{k}"
        if key not in blocks or blocks[key].shape != t.data.shape:
            raise CheckpointError(f"{path}: missing or misshapen block {key}")
        t.data[...] = blocks[key]
    for k, t in ac.params.items():
        key = f"ac.{k}"
        if key not in blocks or blocks[key].shape != t.data.shape:
            raise CheckpointError(f"{path}: missing or misshapen block {key}")
        t.data[...] = blocks[key]
    return wm, ac, step_count, meta


# ---------------------------------------------------------------------------
# exact-resume sidecar


def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, default=str)


def _rng_from_json(blob: str) -> np.random.Generator:
    state = json.loads(blob)
    state["state"] = {k: int(v) for k, v in state["state"].items()}
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def save_train_state(path, buffer: ReplayBuffer, opts: dict, rngs: dict,
                     env_steps: int) -> None:
    """opts: name -> AdamState; rngs: name -> Generator."""
    payload = {"env_steps": np.array(env_steps)}
    payload["episode_count"] = np.array(len(buffer.episodes))
    payload["capacity"] = np.array(buffer.capacity)
    for i, ep in enumerate(buffer.episodes):
        for field in ("obs", "prev_action", "reward", "cont"):
            payload[f"ep{i}_{field}"] = ep[field]
    for name, st in opts.items():
        payload[f"opt_{name}_t"] = np.array(st.t)
        for k, arr in st.m.items():
            payload[f"opt_{name}_m_{k}"] = arr
        for k, arr in st.v.items():
            payload[f"opt_{name}_v_{k}"] = arr
    rng_blob = json.dumps({name: _rng_state_json(r) for name, r in rngs.items()})
    payload["rngs"] = np.frombuffer(rng_blob.encode(), dtype=np.uint8)
    np.savez_compressed(path, **payload)


def load_train_state(path):
    """Returns (buffer, opts dict, rngs dict, env_steps)."""
    data = np.load(path)
    buffer = ReplayBuffer(int(data["capacity"]))
    for i in range(int(data["episode_count"])):
        buffer.add_episode(data[f"ep{i}_obs"], data[f"ep{i}_prev_action"],
                           data[f"ep{i}_reward"], data[f"ep{i}_cont"])
    opts: dict[str, AdamState] = {}
    for key in data.files:
        if key.startswith("opt_") and key.endswith("_t"):
            opts[key[4:-2]] = AdamState(t=int(data[key]))
    for key in data.files:
        if key.startswith("opt_") and not key.endswith("_t"):
            rest = key[4:]
            for name in opts:
                for kind in ("_m_", "_v_"):
                    prefix = name + kind
                    if rest.startswith(prefix):
                        moments = opts[name].m if kind == "_m_" else opts[name].v
                        moments[rest[len(prefix):]] = data[key].copy()
    rng_blob = bytes(data["rngs"].tobytes()).decode()
    rngs = {name: _rng_from_json(blob) for name, blob in json.loads(rng_blob).items()}
    return buffer, opts, rngs, int(data["env_steps"])
