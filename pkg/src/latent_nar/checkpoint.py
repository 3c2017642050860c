"""Saving and loading trained models.

A checkpoint is a plain dict written with ``torch.save``::

    {format, version, kind, config, vocab_size, state_dict, meta}

``kind`` is ``"teacher"`` or ``"nar"``; ``config`` is the model config as a
dict so that loading never unpickles arbitrary objects.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import torch

from .errors import MissingArtifactError
from .model import LatentNAR, LatentNARConfig
from .teacher import TeacherConfig, TeacherModel

logger = logging.getLogger(__name__)

FORMAT = "latent-nar-checkpoint"
VERSION = 1
KINDS = ("teacher", "nar")


def save_checkpoint(model, kind: str, path: Path, meta: dict | None = None) -> Path:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": dataclasses.asdict(model.config),
        "vocab_size": model.vocab_size,
        "state_dict": model.state_dict(),
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)
    logger.info("saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path: Path, kind: str | None = None) -> dict:
    """Read and validate a checkpoint container.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ValueError
        On a foreign file, an unsupported version or the wrong ``kind``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if payload.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if kind is not None and payload.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    return payload


def _restore(path: Path, kind: str, command: str):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{kind} checkpoint", path, command)
    return load_checkpoint(path, kind)


def load_teacher(path: Path) -> TeacherModel:
    payload = _restore(path, "teacher", "train-teacher")
    model = TeacherModel(payload["vocab_size"], TeacherConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval()


def load_nar(path: Path) -> LatentNAR:
    payload = _restore(path, "nar", "train-nar")
    model = LatentNAR(payload["vocab_size"], LatentNARConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval()
