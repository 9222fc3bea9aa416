"""
Binary container for parameter checkpoints and sample sets.

An ``.npz`` archive with one little-endian float64 array per name, plus:

    __format__   version tag (``hamflow-npz``, version 1)
    __meta__     JSON manifest as a 0-d unicode array

Loading refuses archives with another tag or version.
"""
import json
from pathlib import Path

import numpy as np

from .exceptions import CheckpointFormatError

FORMAT_TAG = 'hamflow-npz'
FORMAT_VERSION = 1
_RESERVED = ('__format__', '__meta__')


def save_arrays(path, arrays, meta=None):
    path = Path(path)
    payload = {}
    for name, value in arrays.items():
        if name in _RESERVED:
            raise CheckpointFormatError(f"'{name}' is a reserved container entry")
        payload[name] = np.ascontiguousarray(value, dtype='<f8')
    payload['__format__'] = np.array(f"{FORMAT_TAG}:{FORMAT_VERSION}")
    payload['__meta__'] = np.array(json.dumps(meta or {}, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(f"container not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if '__format__' not in archive.files:
            raise CheckpointFormatError(f"{path} has no format tag")
        tag, _, version = str(archive['__format__']).partition(':')
        if tag != FORMAT_TAG or version != str(FORMAT_VERSION):
            raise CheckpointFormatError(f"{path} has unsupported format '{tag}:{version}'")
        meta = json.loads(str(archive['__meta__'])) if '__meta__' in archive.files else {}
        arrays = {name: archive[name].astype('<f8') for name in archive.files if name not in _RESERVED}
    return arrays, meta
