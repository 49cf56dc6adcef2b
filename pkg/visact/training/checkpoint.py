"""
Checkpoint container.

Binary layout (all integers little-endian):

    bytes 0..7     magic b"VISACTCK"
    bytes 8..15    header length H (uint64)
    next H bytes   header, UTF-8 JSON with sorted keys and no whitespace:
                     format_version, kind, step, model_config, train_config,
                     train_config_type, vocabulary_id, config_hash, extra,
                     tensors: [{name, dtype, shape, offset, nbytes, sha256}]
    remainder      raw tensor bytes, concatenated in header order; offsets are
                   relative to the end of the header

dtype is one of "<f4", "<f8", "<i8", "|u1". The vocabulary lives next to the
checkpoint in `<path>.vocab.txt` (one token per line, line index = id);
vocabulary_id in the header must match it on load.
"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import torch

from visact.models.errors import CheckpointError
from visact.models.schemas import FinetuneConfig, ModelConfig, TrainConfig
from visact.nets.encoders import Vocabulary
from visact.nets.model import VisualActionModel

logger = logging.getLogger(__name__)

MAGIC = b"VISACTCK"
FORMAT_VERSION = 1
SUPPORTED_DTYPES = ("<f4", "<f8", "<i8", "|u1")
TRAIN_CONFIG_TYPES = {"TrainConfig": TrainConfig, "FinetuneConfig": FinetuneConfig}


def _canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(_canonical_json(config.model_dump(mode="json")).encode("utf-8")).hexdigest()[:16]


def file_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def vocab_path(path: Union[str, Path]) -> Path:
    return Path(f"{path}.vocab.txt")


@dataclass
class Checkpoint:
    """Weights plus everything needed to rebuild and verify the model."""
    model_config: ModelConfig
    weights: Dict[str, np.ndarray]
    vocabulary: Vocabulary
    train_config: Optional[Union[TrainConfig, FinetuneConfig]] = None
    step: int = 0
    kind: str = "pretext"
    rng_state: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    @property
    def vocabulary_id(self) -> str:
        return self.vocabulary.vocabulary_id

    @property
    def config_hash(self) -> str:
        return config_hash(self.model_config)


def _as_le(array: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        return arr.astype("<f4", copy=False)
    if arr.dtype == np.float64:
        return arr.astype("<f8", copy=False)
    if arr.dtype == np.int64:
        return arr.astype("<i8", copy=False)
    if arr.dtype == np.uint8:
        return arr
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> Path:
    """
    Write the container and its vocabulary sidecar.

    Returns:
        Path of the checkpoint file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    tensors = OrderedDict(ckpt.weights)
    if ckpt.rng_state is not None:
        tensors["__rng_state__"] = np.asarray(ckpt.rng_state, dtype=np.uint8)

    entries, blobs, offset = [], [], 0
    for name, array in tensors.items():
        arr = _as_le(array)
        data = arr.tobytes(order="C")
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
        blobs.append(data)
        offset += len(data)

    train_config = ckpt.train_config
    header = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "step": ckpt.step,
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "train_config": train_config.model_dump(mode="json") if train_config is not None else None,
        "train_config_type": type(train_config).__name__ if train_config is not None else None,
        "vocabulary_id": ckpt.vocabulary_id,
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    header_bytes = _canonical_json(header).encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    ckpt.vocabulary.save(vocab_path(path))
    logger.info("💾 Checkpoint saved: %s (step %d, %d tensors)", path, ckpt.step, len(entries))
    return path


def read_header(path: Union[str, Path]) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (length,) = struct.unpack("<Q", f.read(8))
        try:
            return json.loads(f.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: corrupt header ({e})") from e


def load_checkpoint(path: Union[str, Path], expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read and verify a checkpoint.

    Raises:
        CheckpointError: missing file, corrupt content, config hash mismatch,
            vocabulary mismatch, or a config different from expected_config.
    """
    path = Path(path)
    header = read_header(path)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")

    model_config = ModelConfig.model_validate(header["model_config"])
    if config_hash(model_config) != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    if expected_config is not None and config_hash(expected_config) != header["config_hash"]:
        raise CheckpointError(
            f"{path}: model config {header['config_hash']} does not match expected {config_hash(expected_config)}"
        )

    if not vocab_path(path).is_file():
        raise CheckpointError(f"{path}: missing vocabulary sidecar {vocab_path(path).name}")
    vocabulary = Vocabulary.load(vocab_path(path))
    if vocabulary.vocabulary_id != header["vocabulary_id"]:
        raise CheckpointError(
            f"{path}: vocabulary {vocabulary.vocabulary_id} does not match header {header['vocabulary_id']}"
        )

    raw = path.read_bytes()
    start = len(MAGIC) + 8 + struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])[0]
    weights: Dict[str, np.ndarray] = OrderedDict()
    rng_state = None
    for entry in header["tensors"]:
        if entry["dtype"] not in SUPPORTED_DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {entry['dtype']} for {entry['name']}")
        lo = start + entry["offset"]
        data = raw[lo:lo + entry["nbytes"]]
        if len(data) != entry["nbytes"] or hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated or corrupt")
        array = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        if entry["name"] == "__rng_state__":
            rng_state = array
        else:
            weights[entry["name"]] = array

    train_config = None
    if header.get("train_config") is not None:
        cls = TRAIN_CONFIG_TYPES[header["train_config_type"]]
        train_config = cls.model_validate(header["train_config"])

    return Checkpoint(
        model_config=model_config,
        weights=weights,
        vocabulary=vocabulary,
        train_config=train_config,
        step=header["step"],
        kind=header["kind"],
        rng_state=rng_state,
        extra=header.get("extra", {}),
    )


def checkpoint_from_model(
    model: VisualActionModel,
    train_config: Optional[Union[TrainConfig, FinetuneConfig]] = None,
    step: int = 0,
    kind: str = "pretext",
    extra: Optional[dict] = None,
) -> Checkpoint:
    weights = OrderedDict(
        (name, tensor.detach().cpu().numpy().copy()) for name, tensor in model.state_dict().items()
    )
    return Checkpoint(
        model_config=model.config,
        weights=weights,
        vocabulary=model.vocabulary,
        train_config=train_config,
        step=step,
        kind=kind,
        rng_state=torch.get_rng_state().numpy().copy(),
        extra=dict(extra or {}),
    )


def model_from_checkpoint(ckpt: Checkpoint, device: str = "cpu") -> VisualActionModel:
    """Rebuild the model and load the stored weights (strict)."""
    model = VisualActionModel(ckpt.model_config, ckpt.vocabulary)
    first = next(iter(ckpt.weights.values()), None)
    if first is not None and first.dtype == np.float64:
        model = model.double()
    state = {name: torch.from_numpy(array) for name, array in ckpt.weights.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint weights do not fit the model: {e}") from e
    return model.to(device)
