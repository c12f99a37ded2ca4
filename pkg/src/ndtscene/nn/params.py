"""Named parameter storage, deterministic initialization and checkpoints."""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import FormatError, VersionMismatchError
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"NDTP"
CHECKPOINT_VERSION = 1

# init kinds understood by ParamStore.initialize
XAVIER = "xavier"
ZEROS = "zeros"
ONES = "ones"


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by (seed, parameter name).

    Keying on the name makes every parameter's draw independent of how many
    other parameters exist or the order they are created in.
    """
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    name_key = int.from_bytes(digest, "little")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, name_key], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def xavier_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class ParamStore(Mapping[str, np.ndarray]):
    """Immutable mapping of parameter name to float64 array.

    ``tensor(name)`` hands out one cached leaf :class:`Tensor` per name so
    gradients returned by ``backward`` can be matched back to names with
    :meth:`named_grads`.
    """

    def __init__(self, arrays: Mapping[str, np.ndarray], seed: int = 0):
        self._arrays = {}
        for name, value in arrays.items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            self._arrays[name] = arr
        self.seed = seed
        self._tensors: dict[str, Tensor] = {}

    @classmethod
    def initialize(cls, layout: Mapping[str, tuple[tuple[int, ...], str]], seed: int) -> "ParamStore":
        arrays = {}
        for name, (shape, kind) in layout.items():
            if kind == XAVIER:
                arrays[name] = xavier_uniform(shape, param_rng(seed, name))
            elif kind == ZEROS:
                arrays[name] = np.zeros(shape)
            elif kind == ONES:
                arrays[name] = np.ones(shape)
            else:
                raise ValueError(f"unknown init kind {kind!r} for {name}")
        return cls(arrays, seed=seed)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def tensor(self, name: str) -> Tensor:
        t = self._tensors.get(name)
        if t is None:
            if name not in self._arrays:
                raise KeyError(f"missing parameter {name!r}")
            t = Tensor(self._arrays[name], requires_grad=True)
            self._tensors[name] = t
        return t

    def named_grads(self, grads: Mapping[Tensor, np.ndarray]) -> dict[str, np.ndarray]:
        return {name: grads[t] for name, t in self._tensors.items() if t in grads}

    def with_updates(self, updates: Mapping[str, np.ndarray]) -> "ParamStore":
        unknown = set(updates) - set(self._arrays)
        if unknown:
            raise KeyError(f"unknown parameters: {sorted(unknown)}")
        merged = dict(self._arrays)
        merged.update(updates)
        return ParamStore(merged, seed=self.seed)

    def bind(self, tensors: Mapping[str, Tensor]) -> "ParamStore":
        """Copy of this store whose named entries are the given tensors.

        Keys that are not parameter names are ignored, so a gradient-check
        input dict can carry both parameters and data.
        """
        own = {k: t for k, t in tensors.items() if k in self._arrays}
        store = self.with_updates({k: t.data for k, t in own.items()})
        store._tensors.update(own)
        return store

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._arrays.items()}

    # ------------------------------------------------------------ checkpoints

    def save(self, path) -> None:
        chunks = [CHECKPOINT_MAGIC,
                  struct.pack("<IqI", CHECKPOINT_VERSION, self.seed, len(self._arrays))]
        for name in sorted(self._arrays):
            arr = self._arrays[name]
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.astype("<f8").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path) -> "ParamStore":
        buf = Path(path).read_bytes()
        if buf[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a parameter checkpoint")
        version, seed, count = struct.unpack_from("<IqI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"{path}: checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
        offset = 4 + struct.calcsize("<IqI")
        arrays = {}
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", buf, offset)
                offset += 4
                name = buf[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (ndim,) = struct.unpack_from("<I", buf, offset)
                offset += 4
                shape = struct.unpack_from(f"<{ndim}I", buf, offset)
                offset += 4 * ndim
                size = int(np.prod(shape, dtype=np.int64))
                arr = np.frombuffer(buf, dtype="<f8", count=size, offset=offset).reshape(shape)
                offset += 8 * size
                arrays[name] = arr
        except (struct.error, ValueError) as exc:
            raise FormatError(f"{path}: truncated checkpoint") from exc
        if offset != len(buf):
            raise FormatError(f"{path}: trailing bytes in checkpoint")
        return cls(arrays, seed=seed)
