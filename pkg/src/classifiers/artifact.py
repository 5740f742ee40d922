"""
Model file format.

    magic   4 bytes  b'BSNG'
    version u16      1
    kind    u8       1 knn, 2 forest, 3 cnn
    meta    u32 length + UTF-8 JSON {class_table, hyper_params, arrays}
    payload u64 length + concatenated little-endian array bytes

`arrays` in the JSON lists name, dtype, shape, offset and nbytes of every
array in payload order. See docs/model-format.md.
"""

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from ..errors import ArtifactError, BadMagic, TruncatedPayload, UnsupportedVersion
from .cnn import CnnModel
from .forest import ForestModel
from .knn import KnnModel

logger = logging.getLogger(__name__)

MAGIC = b'BSNG'
VERSION = 1
KIND_TAGS = {'knn': 1, 'forest': 2, 'cnn': 3}
MODEL_CLASSES = {'knn': KnnModel, 'forest': ForestModel, 'cnn': CnnModel}

_HEADER = struct.Struct('<4sHBI')
_PAYLOAD_LENGTH = struct.Struct('<Q')

Model = Union[KnnModel, ForestModel, CnnModel]


@dataclass
class ModelArtifact:
    kind: str
    version: int
    class_table: List[str]
    hyper_params: Dict[str, Any]
    parameters: Dict[str, np.ndarray]

    def __post_init__(self):
        if not self.class_table:
            raise ArtifactError("Model artifact has an empty class table")

    def __repr__(self) -> str:
        return f"ModelArtifact(kind={self.kind}, version={self.version}, classes={len(self.class_table)})"


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    return array.astype(array.dtype.newbyteorder('<'), copy=False)


def save_model(model: Model) -> bytes:
    """Serialise a fitted model; equal models give equal bytes"""
    if model.kind not in KIND_TAGS:
        raise ArtifactError(f"Unknown model kind {model.kind!r}")
    manifest, chunks, offset = [], [], 0
    for name, array in model.arrays().items():
        data = _little_endian(array)
        raw = data.tobytes()
        manifest.append({
            'name': name,
            'dtype': data.dtype.str,
            'shape': list(data.shape),
            'offset': offset,
            'nbytes': len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    meta = json.dumps({
        'class_table': list(model.class_table),
        'hyper_params': model.hyper_params(),
        'arrays': manifest,
    }, sort_keys=True, separators=(',', ':')).encode('utf-8')
    payload = b''.join(chunks)
    header = _HEADER.pack(MAGIC, VERSION, KIND_TAGS[model.kind], len(meta))
    return header + meta + _PAYLOAD_LENGTH.pack(len(payload)) + payload


def load_model(data: bytes) -> ModelArtifact:
    """Parse model bytes into an artifact without building the model"""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("Not a birdsong model file")
    if len(data) < _HEADER.size:
        raise TruncatedPayload("Model file ends inside its header")
    _, version, tag, meta_length = _HEADER.unpack_from(data)
    if version != VERSION:
        raise UnsupportedVersion(f"Model file version {version} is not supported (expected {VERSION})")
    kinds = {v: k for k, v in KIND_TAGS.items()}
    if tag not in kinds:
        raise ArtifactError(f"Unknown model kind tag {tag}")
    position = _HEADER.size
    if len(data) < position + meta_length + _PAYLOAD_LENGTH.size:
        raise TruncatedPayload("Model file ends inside its metadata")
    try:
        meta = json.loads(data[position:position + meta_length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactError(f"Model metadata is not valid JSON: {e}")
    position += meta_length
    (payload_length,) = _PAYLOAD_LENGTH.unpack_from(data, position)
    position += _PAYLOAD_LENGTH.size
    payload = data[position:position + payload_length]
    if len(payload) < payload_length:
        raise TruncatedPayload(f"Payload declares {payload_length} bytes, file holds {len(payload)}")

    if not isinstance(meta, dict) or not {'class_table', 'hyper_params', 'arrays'} <= set(meta):
        raise ArtifactError("Model metadata is missing class_table, hyper_params or arrays")
    parameters = {}
    for entry in meta['arrays']:
        start, stop = entry['offset'], entry['offset'] + entry['nbytes']
        if stop > payload_length:
            raise TruncatedPayload(f"Array {entry['name']} runs past the end of the payload")
        array = np.frombuffer(payload[start:stop], dtype=np.dtype(entry['dtype']))
        parameters[entry['name']] = array.reshape(entry['shape']).astype(array.dtype.newbyteorder('='))
    return ModelArtifact(kinds[tag], version, list(meta['class_table']), meta['hyper_params'], parameters)


def restore_model(artifact: ModelArtifact) -> Model:
    """Rebuild the model object an artifact describes"""
    model = MODEL_CLASSES[artifact.kind].from_arrays(artifact.hyper_params, artifact.parameters,
                                                     artifact.class_table)
    logger.debug(f"Restored {model!r}")
    return model


def write_model(model: Model, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_model(model))
    logger.info(f"Wrote {model.kind} model to {path}")


def read_model(path: Path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model artifact not found: {path}")
    return restore_model(load_model(path.read_bytes()))
