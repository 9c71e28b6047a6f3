"""Single-file checkpoint container.

A checkpoint is an uncompressed zip archive holding ``manifest.json`` and one
raw little-endian float32 blob per named array. Entry timestamps are fixed
so equal states produce byte-identical files.

Array names::

    theta1.body.<param>  theta1.pri.<param>  theta1.aux.<param>  theta2.<param>
    opt.theta1.<part>.<param>.exp_avg / .exp_avg_sq   (likewise opt.theta2.*)
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ArtifactError
from .networks import MaskNetParams, NetworkConfig, ParamPartition

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    stage: str
    theta1: ParamPartition
    theta2: MaskNetParams
    epoch: int = 0
    seed: int = 0
    optimizer_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def _opt_arrays(opt: torch.optim.Adam | None, named) -> tuple[dict, dict]:
    arrays, steps = {}, {}
    if opt is None:
        return arrays, steps
    for name, t in named:
        st = opt.state.get(t)
        if not st:
            continue
        arrays[f"{name}.exp_avg"] = st["exp_avg"]
        arrays[f"{name}.exp_avg_sq"] = st["exp_avg_sq"]
        steps[name] = float(st["step"])
    return arrays, steps


def checkpoint_from_state(state, config: dict | None = None) -> Checkpoint:
    opt = {}
    for key, params, optimizer in (
        ("theta1", list(state.theta1.named()), state.opt_theta1),
        ("theta2", list(state.theta2.named()), state.opt_theta2),
    ):
        arrays, steps = _opt_arrays(optimizer, params)
        opt[key] = {"arrays": arrays, "steps": steps}
    return Checkpoint(state.stage, state.theta1, state.theta2, state.epoch, state.seed, opt, config or {})


def _f32_bytes(t: torch.Tensor) -> bytes:
    return t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    arrays: list[tuple[str, torch.Tensor]] = []
    for name, t in ckpt.theta1.named():
        arrays.append((f"theta1.{name}", t))
    for name, t in ckpt.theta2.named():
        arrays.append((f"theta2.{name}", t))
    steps = {}
    for key in ("theta1", "theta2"):
        entry = ckpt.optimizer_state.get(key, {})
        for name, t in entry.get("arrays", {}).items():
            arrays.append((f"opt.{key}.{name}", t))
        steps[key] = entry.get("steps", {})

    manifest = {
        "format_version": ckpt.format_version,
        "stage": ckpt.stage,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "network": ckpt.theta1.config.to_dict(),
        "config": ckpt.config,
        "optimizer_steps": steps,
        "arrays": [{"name": n, "shape": list(t.shape), "dtype": "<f4"} for n, t in arrays],
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        put("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        for n, t in arrays:
            put(f"arrays/{n}", _f32_bytes(t))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, dtype=torch.float32) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ArtifactError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            tensors = {}
            for entry in manifest["arrays"]:
                raw = zf.read(f"arrays/{entry['name']}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
                tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32)).to(dtype)
        net_cfg = NetworkConfig(**manifest["network"])
        parts = {"body": {}, "pri": {}, "aux": {}}
        mask, opt = {}, {"theta1": {"arrays": {}, "steps": {}}, "theta2": {"arrays": {}, "steps": {}}}
        for name, t in tensors.items():
            head, _, rest = name.partition(".")
            if head == "theta1":
                part, _, pname = rest.partition(".")
                parts[part][pname] = t
            elif head == "theta2":
                mask[rest] = t
            elif head == "opt":
                key, _, aname = rest.partition(".")
                opt[key]["arrays"][aname] = t
            else:
                raise ArtifactError(f"unexpected array {name!r}")
        for key, steps in manifest.get("optimizer_steps", {}).items():
            opt[key]["steps"] = steps
        theta1 = ParamPartition(net_cfg, parts["body"], parts["pri"], parts["aux"])
        theta2 = MaskNetParams(net_cfg, mask)
    except ArtifactError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"corrupt checkpoint {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ArtifactError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    return Checkpoint(
        manifest["stage"], theta1, theta2, manifest["epoch"], manifest["seed"], opt,
        manifest.get("config", {}), manifest["format_version"],
    )


def _restore_opt(opt: torch.optim.Adam, named, entry: dict) -> None:
    for name, t in named:
        if name not in entry["steps"]:
            continue
        opt.state[t] = {
            "step": torch.tensor(entry["steps"][name], dtype=torch.float32),
            "exp_avg": entry["arrays"][f"{name}.exp_avg"].clone(),
            "exp_avg_sq": entry["arrays"][f"{name}.exp_avg_sq"].clone(),
        }


def state_from_checkpoint(ckpt: Checkpoint, restore_optimizer: bool = True):
    from .meta_train import TrainState

    state = TrainState.create(ckpt.theta1, ckpt.theta2, seed=ckpt.seed, stage=ckpt.stage)
    state.epoch = ckpt.epoch
    if restore_optimizer:
        _restore_opt(state.opt_theta1, list(ckpt.theta1.named()), ckpt.optimizer_state["theta1"])
        _restore_opt(state.opt_theta2, list(ckpt.theta2.named()), ckpt.optimizer_state["theta2"])
    return state
