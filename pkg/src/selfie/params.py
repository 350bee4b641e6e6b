"""Named, ordered parameter collection with role tags for block-wise transfer."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError

# Role tags drive weight transfer: the pretrain checkpoint and the finetune
# classifier share names and roles for everything the transfer copies.
ROLES = ("stem", "group1", "group2", "group3", "group4", "pool", "embed", "head")


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    role: str
    trainable: bool
    decay: bool  # participates in L2 weight decay


class ParamStore:
    """Insertion-ordered mapping of parameter name -> entry."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, data: np.ndarray, role: str, trainable: bool = True,
            decay: bool = True) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r} for parameter {name!r}")
        t = Tensor(data, requires_grad=trainable)
        self._entries[name] = ParamEntry(name, t, role, trainable, decay)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def entries(self, role: Optional[str] = None, trainable: Optional[bool] = None
                ) -> Iterator[ParamEntry]:
        for e in self._entries.values():
            if role is not None and e.role != role:
                continue
            if trainable is not None and e.trainable != trainable:
                continue
            yield e

    def names(self) -> list[str]:
        return list(self._entries)

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.tensor.zero_grad()

    def total_params(self, trainable_only: bool = True) -> int:
        return sum(e.tensor.size for e in self._entries.values()
                   if e.trainable or not trainable_only)
