"""Versioned, self-contained model files.

A model file is one JSON object::

    {"version": 1, "kind": "lstm", "stats": {...}, "params": {...},
     "config": {...}, "dataset_fingerprint": "sha256:..."}

Floats are written with their shortest round-trip representation, so
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .crf import CrfModel
from .episode import Episode, episode_to_dict
from .features import FeaturizerStats
from .hmm import HmmBank
from .lstm import LstmLabeler, LstmParams

MODEL_FORMAT_VERSION = 1
MODEL_KINDS = ("hmm", "crf-lbfgs", "crf-arow", "lstm")


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelFile:
    kind: str
    stats: FeaturizerStats
    model: object  # HmmBank, CrfModel or LstmParams
    config: dict = field(default_factory=dict)
    dataset_fingerprint: str = ""

    def labeler(self):
        if self.kind == "lstm":
            return LstmLabeler(self.model, self.stats)
        return self.model

    def to_dict(self) -> dict:
        if self.kind not in MODEL_KINDS:
            raise ModelFileError(f"unknown model kind {self.kind!r}")
        params = self.model.to_dict()
        if self.kind == "lstm":
            params["shapes"] = {k: list(np.shape(v)) for k, v in params.items()}
        return {
            "version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "stats": self.stats.to_dict(),
            "params": params,
            "config": self.config,
            "dataset_fingerprint": self.dataset_fingerprint,
        }


def dataset_fingerprint(episodes: Sequence[Episode]) -> str:
    h = hashlib.sha256()
    for ep in episodes:
        h.update(json.dumps(episode_to_dict(ep), sort_keys=True, allow_nan=False).encode())
        h.update(b"\n")
    return "sha256:" + h.hexdigest()


def dumps(mf: ModelFile) -> str:
    return json.dumps(mf.to_dict(), sort_keys=True, allow_nan=False) + "\n"


def save_model(path: str | os.PathLike, mf: ModelFile) -> None:
    text = dumps(mf)
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    except OSError as err:
        raise OSError(f"cannot write model file {path}: {err}") from err


def _field(d: dict, key: str, where: str):
    if key not in d:
        raise ModelFileError(f"{where}: missing field {key!r}")
    return d[key]


def from_dict(d: dict, where: str = "model") -> ModelFile:
    if not isinstance(d, dict):
        raise ModelFileError(f"{where}: top level must be an object")
    version = _field(d, "version", where)
    if version != MODEL_FORMAT_VERSION:
        raise ModelFileError(f"{where}: unsupported model format version {version!r} (expected {MODEL_FORMAT_VERSION})")
    kind = _field(d, "kind", where)
    if kind not in MODEL_KINDS:
        raise ModelFileError(f"{where}: unknown model kind {kind!r}")
    try:
        stats = FeaturizerStats.from_dict(_field(d, "stats", where))
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFileError(f"{where}: bad field 'stats': {err}") from err
    params = _field(d, "params", where)
    try:
        if kind == "hmm":
            model = HmmBank.from_dict(params, stats)
        elif kind == "lstm":
            model = LstmParams.from_dict(params)
            shapes = params.get("shapes", {})
            for name, shape in shapes.items():
                if list(getattr(model, name).shape) != list(shape):
                    raise ValueError(f"{name} has shape {list(getattr(model, name).shape)}, header says {shape}")
        else:
            model = CrfModel.from_dict(params, stats)
    except ModelFileError:
        raise
    except (KeyError, TypeError, ValueError) as err:
        raise ModelFileError(f"{where}: bad field 'params': {err}") from err
    return ModelFile(kind, stats, model, _field(d, "config", where), _field(d, "dataset_fingerprint", where))


def load_model(path: str | os.PathLike) -> ModelFile:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ModelFileError(f"cannot read model file {path}: {err}") from err
    try:
        d = json.loads(text)
    except json.JSONDecodeError as err:
        raise ModelFileError(f"{path}: invalid JSON at offset {err.pos}: {err.msg}") from err
    return from_dict(d, str(path))
