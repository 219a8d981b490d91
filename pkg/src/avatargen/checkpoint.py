"""Single-file checkpoint archives with named parameter groups."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import torch

FORMAT = "avatargen-checkpoint"
VERSION = 1


def save_checkpoint(path, groups: dict, **extra) -> None:
    """Write ``{"groups": {name: state_dict}, ...extra}`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": FORMAT, "version": VERSION,
               "groups": {name: module.state_dict() for name, module in groups.items()}, **extra}
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a checkpoint archive")
    return payload


def restore_groups(groups: dict, payload: dict) -> None:
    missing = set(groups) - set(payload["groups"])
    if missing:
        raise KeyError(f"checkpoint lacks parameter groups: {sorted(missing)}")
    for name, module in groups.items():
        module.load_state_dict(payload["groups"][name])
