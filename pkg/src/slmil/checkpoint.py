"""Model checkpoints as sorted-key JSON.

Floats are written with ``repr`` precision so a save/load cycle is exact and
two saves of the same parameters are byte-identical.
"""
import json
import math
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, InputIOError, ValidationError
from .gctrans import GctransConfig
from .milhead import MilConfig, init_model

FORMAT = "slmil-checkpoint"
VERSION = 1


def _named(params):
    out = {}
    for p in params.named_params():
        out[p.name] = p
    return out


def checkpoint_dict(params, extra=None):
    meta = dict(params.metadata())
    meta.update(extra or {})
    tensors = {name: {"shape": list(p.shape), "values": [float(v) for v in p.data.ravel()]}
               for name, p in _named(params).items()}
    return {"format": FORMAT, "version": VERSION, "meta": meta, "tensors": tensors}


def save_checkpoint(path, params, extra=None):
    """Write ``params`` plus ``extra`` metadata (e.g. subnet names) to ``path``."""
    text = json.dumps(checkpoint_dict(params, extra), sort_keys=True, indent=1) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot write checkpoint {path}: {exc}") from exc


def _rebuild(doc, where):
    if doc.get("format") != FORMAT or doc.get("version") != VERSION:
        raise ValidationError(f"{where}: not a version-{VERSION} {FORMAT} file")
    meta = doc["meta"]
    gcfg = GctransConfig(**meta["gctrans"])
    mcfg = MilConfig(**meta["mil"])
    params = init_model(gcfg, mcfg, meta["n_time"], meta["n_instances"], seed=0)
    named = _named(params)
    stored = doc["tensors"]
    if set(stored) != set(named):
        missing = sorted(set(named) - set(stored))
        extra = sorted(set(stored) - set(named))
        raise ValidationError(f"{where}: tensor names differ (missing {missing}, unexpected {extra})")
    for name, p in named.items():
        entry = stored[name]
        if tuple(entry["shape"]) != p.shape:
            raise ValidationError(f"{where}: tensor {name} has shape {entry['shape']}, expected {list(p.shape)}")
        values = np.asarray(entry["values"], dtype=np.float64)
        if values.size != p.data.size or not all(math.isfinite(v) for v in values):
            raise ValidationError(f"{where}: tensor {name} has bad values")
        p.data[...] = values.reshape(p.shape)
    return params, meta


def load_checkpoint(path):
    """Return ``(ModelParams, metadata dict)``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputIOError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed checkpoint ({exc})") from exc
    try:
        return _rebuild(doc, path)
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed checkpoint ({exc})") from exc


def check_compatible(meta, n_time, n_instances, subnet_names=None, roi_count=None):
    """Raise :class:`CompatibilityError` naming every field that disagrees."""
    bad = {}
    if meta["n_time"] != n_time:
        bad["n_time"] = (meta["n_time"], n_time)
    if meta["n_instances"] != n_instances:
        bad["n_instances"] = (meta["n_instances"], n_instances)
    if subnet_names is not None and "subnet_names" in meta and list(meta["subnet_names"]) != list(subnet_names):
        bad["subnet_names"] = (list(meta["subnet_names"]), list(subnet_names))
    if roi_count is not None and "roi_count" in meta and meta["roi_count"] != roi_count:
        bad["roi_count"] = (meta["roi_count"], roi_count)
    if bad:
        raise CompatibilityError(bad)
