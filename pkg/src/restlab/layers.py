"""Parameter containers shared by the three networks."""
from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from . import numcore as nc


class ParamSet:
    """Named, ordered parameters with checkpoint and digest helpers."""

    arch_id = "none"

    def __init__(self):
        self.params: "OrderedDict[str, nc.Tensor]" = OrderedDict()

    def add_conv(self, name: str, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 std: float | None = None) -> None:
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / fan_in) if std is None else std
        w = rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32)
        self.params[f"{name}.w"] = nc.Tensor(w, requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = nc.Tensor(np.zeros(c_out, np.float32), requires_grad=True,
                                             name=f"{name}.b")

    def conv(self, name: str, x: nc.Tensor) -> nc.Tensor:
        return nc.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def parameters(self) -> list:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        if list(state) != list(self.params):
            raise ValueError(f"parameter names differ: {list(state)} vs {list(self.params)}")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {arr.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float32)
            self.params[k].grad = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        nc.save(path, self.arch_id, self.state_dict())

    def load_params(self, path) -> None:
        _, state = nc.load(path, expect_arch=self.arch_id)
        self.load_state_dict(state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
