"""Named parameter collections with frozen flags."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .tensor import Gradients, Tensor


class StructureError(ValueError):
    pass


@dataclass
class Param:
    value: np.ndarray
    frozen: bool = False


class ParamTree:
    """Mapping from slash-delimited paths to float64 arrays.

    Iteration is always in lexicographic path order so that every reduction
    over a tree (hashing, aggregation, serialisation) is deterministic.
    """

    def __init__(self, entries: Mapping[str, Param] | None = None):
        self._entries: dict[str, Param] = {}
        for path, p in (entries or {}).items():
            self.add(path, p.value, p.frozen)

    def add(self, path: str, value, frozen: bool = False) -> None:
        if path in self._entries:
            raise StructureError(f"duplicate parameter path {path!r}")
        if not path or "" in path.split("/"):
            raise StructureError(f"malformed parameter path {path!r}")
        self._entries[path] = Param(np.array(value, dtype=np.float64), bool(frozen))

    def __contains__(self, path: str) -> bool:
        return path in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.paths())

    def paths(self) -> list[str]:
        return sorted(self._entries)

    def items(self) -> list[tuple[str, Param]]:
        return [(k, self._entries[k]) for k in self.paths()]

    def value(self, path: str) -> np.ndarray:
        return self._entries[path].value

    def __getitem__(self, path: str) -> np.ndarray:
        return self.value(path)

    def set(self, path: str, value) -> None:
        old = self._entries[path]
        value = np.array(value, dtype=np.float64)
        if value.shape != old.value.shape:
            raise StructureError(f"{path}: shape {value.shape} != {old.value.shape}")
        old.value = value

    def is_frozen(self, path: str) -> bool:
        return self._entries[path].frozen

    def freeze(self, prefix: str = "") -> None:
        for k, p in self._entries.items():
            if k.startswith(prefix):
                p.frozen = True

    def trainable_paths(self) -> list[str]:
        return [k for k in self.paths() if not self._entries[k].frozen]

    def size(self) -> int:
        return sum(p.value.size for p in self._entries.values())

    # -- structure

    def subtree(self, prefix: str) -> "ParamTree":
        """Entries under ``prefix/`` with the prefix stripped (values shared)."""
        pre = prefix.rstrip("/") + "/"
        out = ParamTree()
        for k in self.paths():
            if k.startswith(pre):
                out._entries[k[len(pre):]] = self._entries[k]
        return out

    def prefixed(self, prefix: str) -> "ParamTree":
        out = ParamTree()
        for k in self.paths():
            out._entries[f"{prefix.rstrip('/')}/{k}"] = self._entries[k]
        return out

    def merge(self, *others: "ParamTree") -> "ParamTree":
        out = self.copy()
        for other in others:
            for k, p in other.items():
                out.add(k, p.value, p.frozen)
        return out

    def copy(self) -> "ParamTree":
        out = ParamTree()
        for k, p in self.items():
            out._entries[k] = Param(p.value.copy(), p.frozen)
        return out

    def structure(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, p.value.shape) for k, p in self.items()]

    def check_same_structure(self, other: "ParamTree") -> None:
        mine, theirs = dict(self.structure()), dict(other.structure())
        for path in sorted(set(mine) | set(theirs)):
            if mine.get(path) != theirs.get(path):
                raise StructureError(
                    f"structure mismatch at {path!r}: {mine.get(path)} vs {theirs.get(path)}")

    def update_from(self, other: "ParamTree") -> None:
        """Overwrite values of every path also present in ``other``."""
        for k, p in other.items():
            if k in self._entries:
                self.set(k, p.value)

    # -- numerics

    def tensors(self) -> dict[str, Tensor]:
        return {k: Tensor(p.value, requires_grad=not p.frozen, name=k) for k, p in self.items()}

    def gradients(self, leaves: Mapping[str, Tensor], grads: Gradients) -> dict[str, np.ndarray]:
        """Collect gradients for the trainable paths (zeros where unused)."""
        out = {}
        for k in self.trainable_paths():
            g = grads.get(leaves[k])
            out[k] = np.zeros_like(self._entries[k].value) if g is None else g
        return out

    def round_f32(self) -> None:
        """Quantise every value to float32 precision (checkpoint precision)."""
        for p in self._entries.values():
            p.value = p.value.astype(np.float32).astype(np.float64)

    def digest(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for k, p in self.items():
            if not k.startswith(prefix):
                continue
            h.update(k.encode())
            h.update(b"\x01" if p.frozen else b"\x00")
            h.update(np.asarray(p.value.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamTree) or self.paths() != other.paths():
            return False
        return all(
            p.frozen == other._entries[k].frozen
            and p.value.shape == other._entries[k].value.shape
            and np.array_equal(p.value, other._entries[k].value)
            for k, p in self.items()
        )

    def __repr__(self) -> str:
        return f"ParamTree({len(self)} tensors, {self.size()} values)"
