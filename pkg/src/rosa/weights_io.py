"""Weight files in the safetensors layout, and raw token-id files.

A weight file is an 8-byte little-endian header length ``N``, ``N`` bytes of
JSON, then the tensor payload. The header maps each tensor name to
``{"dtype", "shape", "data_offsets": [begin, end]}`` with offsets relative to
the payload start; ``__metadata__`` holds string-valued model settings.

Tensor names: ``embed``, ``layers.{l}.{wq,wk,wv,wo,w_up,w_gate,w_down,
attn_norm,mlp_norm}``, ``final_norm``, ``head``. Rotated models add
``rotations.{l}`` and ``adapters.{l}``.
"""

import json
import struct

import numpy as np

from rosa.errors import ParseError, SchemaError
from rosa.model import LayerWeights, Model, ModelConfig
from rosa.rotation import RotatedModel, RotationMatrix

DTYPES = {"F16": np.dtype("<f2"), "F32": np.dtype("<f4"), "F64": np.dtype("<f8")}
_NAMES = {v: k for k, v in DTYPES.items()}
_CONFIG_FIELDS = {
    "hidden": int, "layers": int, "heads": int, "kv_groups": int,
    "mlp_ratio": float, "vocab": int, "norm_eps": float, "seed": int,
}


def model_tensors(model):
    """Name-to-array mapping for ``model`` under the file naming scheme."""
    tensors = {"embed": model.embed}
    for l, lw in enumerate(model.layers):
        for name in LayerWeights.MATRICES + LayerWeights.GAINS:
            tensors[f"layers.{l}.{name}"] = getattr(lw, name)
    tensors["final_norm"] = model.final_norm
    tensors["head"] = model.head
    if isinstance(model, RotatedModel):
        for l, r in enumerate(model.rotations):
            tensors[f"rotations.{l}"] = r.q
        for l, a in enumerate(model.residual_adapters):
            tensors[f"adapters.{l}"] = a
    return tensors


def encode(tensors, metadata=None, dtype="F64"):
    """Serialize named arrays to bytes."""
    if dtype not in DTYPES:
        raise SchemaError(f"unsupported dtype {dtype}")
    header = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype=DTYPES[dtype]).tobytes()
        header[name] = {"dtype": dtype, "shape": list(np.shape(arr)), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # pad the header so the payload starts 8-byte aligned
    blob += b" " * (-len(blob) % 8)
    return struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def decode(data):
    """Parse weight-file bytes into ``(tensors, metadata)`` with float64 arrays."""
    if len(data) < 8:
        raise ParseError("file shorter than the 8-byte header length", position=len(data))
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise ParseError(f"header length {n} runs past end of file ({len(data)} bytes)", position=8)
    try:
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = 8 + getattr(exc, "pos", getattr(exc, "start", 0))
        raise ParseError(f"header is not valid JSON: {exc}", position=pos) from None
    if not isinstance(header, dict):
        raise ParseError("header is not a JSON object", position=8)
    metadata = header.pop("__metadata__", {}) or {}
    payload = data[8 + n:]

    tensors = {}
    spans = []
    for name, info in header.items():
        try:
            dtype = DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise SchemaError(f"tensor {name!r} has a malformed or unsupported header entry") from None
        if any(s < 0 for s in shape) or not 0 <= begin <= end:
            raise SchemaError(f"tensor {name!r} has invalid shape or offsets")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if end - begin != expected:
            raise SchemaError(
                f"tensor {name!r}: shape {shape} as {info['dtype']} needs {expected} bytes, "
                f"offsets give {end - begin}"
            )
        if end > len(payload):
            raise ParseError(
                f"tensor {name!r} ends at payload byte {end} but the payload has {len(payload)}",
                position=8 + n + len(payload),
            )
        spans.append((begin, end, name))
        tensors[name] = np.frombuffer(payload, dtype=dtype, count=expected // dtype.itemsize,
                                      offset=begin).reshape(shape).astype(np.float64)
    spans.sort()
    for (b0, e0, n0), (b1, e1, n1) in zip(spans, spans[1:]):
        if b1 < e0:
            raise SchemaError(f"tensors {n0!r} and {n1!r} overlap")
    return tensors, metadata


def config_metadata(config):
    return {k: str(v) for k, v in config.to_dict().items()}


def config_from_metadata(metadata):
    missing = [k for k in _CONFIG_FIELDS if k not in metadata]
    if missing:
        raise SchemaError(f"metadata lacks model settings: {', '.join(missing)}")
    try:
        return ModelConfig(**{k: conv(metadata[k]) for k, conv in _CONFIG_FIELDS.items()})
    except ValueError as exc:
        raise SchemaError(f"bad model settings in metadata: {exc}") from None


def _take(tensors, name, shape):
    if name not in tensors:
        raise SchemaError(f"missing tensor {name!r}")
    arr = tensors[name]
    if arr.shape != tuple(shape):
        raise SchemaError(f"tensor {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr


def model_from_tensors(tensors, config):
    d, v = config.hidden, config.vocab
    shapes = LayerWeights.expected_shapes(config)
    layers = []
    for l in range(config.layers):
        layers.append(LayerWeights(**{
            name: _take(tensors, f"layers.{l}.{name}", shapes[name])
            for name in LayerWeights.MATRICES + LayerWeights.GAINS
        }))
    embed = _take(tensors, "embed", (v, d))
    final_norm = _take(tensors, "final_norm", (d,))
    head = _take(tensors, "head", (d, v))
    if not any(k.startswith("rotations.") for k in tensors):
        return Model(config, embed, layers, final_norm, head)
    rotations = [RotationMatrix(_take(tensors, f"rotations.{l}", (d, d))) for l in range(config.layers)]
    adapters = [_take(tensors, f"adapters.{l}", (d, d)) for l in range(config.layers - 1)]
    return RotatedModel(
        config=config, embed=embed, layers=layers, final_norm=final_norm, head=head,
        rotations=rotations, residual_adapters=adapters,
        embed_rotation_applied=True, head_rotation_applied=True, gains_folded=True,
    )


def save_weights(model, path, dtype="F64"):
    with open(path, "wb") as f:
        f.write(encode(model_tensors(model), config_metadata(model.config), dtype=dtype))


def load_weights(path):
    """Read a model (plain or rotated) from ``path``; tensors are widened to float64."""
    with open(path, "rb") as f:
        data = f.read()
    tensors, metadata = decode(data)
    return model_from_tensors(tensors, config_from_metadata(metadata))


def save_rotations(rotations, path, config=None):
    tensors = {f"rotations.{l}": (r.q if isinstance(r, RotationMatrix) else r) for l, r in enumerate(rotations)}
    meta = config_metadata(config) if config is not None else None
    with open(path, "wb") as f:
        f.write(encode(tensors, meta))


def load_rotations(path):
    with open(path, "rb") as f:
        tensors, _ = decode(f.read())
    names = sorted((k for k in tensors if k.startswith("rotations.")), key=lambda k: int(k.split(".")[1]))
    if not names:
        raise SchemaError("missing tensor 'rotations.0'")
    return [RotationMatrix(tensors[k]) for k in names]


def read_tokens(path, vocab=None):
    """Token ids from a raw little-endian uint32 file."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) % 4:
        raise ParseError("token file length is not a multiple of 4", position=len(data) - len(data) % 4)
    ids = np.frombuffer(data, dtype="<u4").astype(np.int64)
    if vocab is not None and ids.size and ids.max() >= vocab:
        pos = int(np.argmax(ids >= vocab)) * 4
        raise SchemaError(f"token id {int(ids.max())} at byte {pos} exceeds vocabulary {vocab}")
    return ids


def write_tokens(ids, path):
    with open(path, "wb") as f:
        f.write(np.asarray(ids, dtype="<u4").tobytes())
