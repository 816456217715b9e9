"""Modular forecaster: invariant encoder, style encoder, residual modulator,
decoder and projection head, each a small MLP.

    z = phi(x)    c = mean_o psi(o)    z_mod = f([z, c]) + z    y = g(z_mod)
    p = h(c) / |h(c)|
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .dataio import PRED_LEN, STYLE_DIM, InstanceWindow, input_features, style_features

GROUPS = ("phi", "psi", "f", "g", "h")


class ModelError(Exception):
    pass


@dataclass
class Architecture:
    input_dim: int
    style_dim: int = STYLE_DIM
    z_dim: int = 64
    c_dim: int = 32
    proj_dim: int = 16
    phi_hidden: tuple[int, ...] = (128,)
    psi_hidden: tuple[int, ...] = (128,)
    f_hidden: tuple[int, ...] = (64,)
    g_hidden: tuple[int, ...] = (128,)
    h_hidden: tuple[int, ...] = (32,)
    pred_len: int = PRED_LEN

    def widths(self) -> dict[str, list[int]]:
        return {
            "phi": [self.input_dim, *self.phi_hidden, self.z_dim],
            "psi": [self.style_dim, *self.psi_hidden, self.c_dim],
            "f": [self.z_dim + self.c_dim, *self.f_hidden, self.z_dim],
            "g": [self.z_dim, *self.g_hidden, self.pred_len * 2],
            "h": [self.c_dim, *self.h_hidden, self.proj_dim],
        }


class ModularForecaster:
    def __init__(self, arch: Architecture, seed: int = 0, build: bool = True):
        self.arch = arch
        self.frozen: set[str] = set()
        self.nets: dict[str, dc.Mlp] = {}
        if build:
            rng = np.random.default_rng(seed)
            for name, widths in arch.widths().items():
                self.nets[name] = dc.Mlp(widths, rng=rng, zero_last=(name == "f"))

    # --- parameter groups

    def __getattr__(self, name):
        nets = self.__dict__.get("nets", {})
        if name in nets:
            return nets[name]
        raise AttributeError(name)

    def parameters(self, groups: Sequence[str] = GROUPS) -> list[dc.Value]:
        return [p for g in groups for p in self.nets[g].parameters()]

    def freeze(self, *groups: str) -> None:
        for g in groups:
            self.nets[g].set_requires_grad(False)
            self.frozen.add(g)

    def unfreeze(self, *groups: str) -> None:
        for g in groups:
            self.nets[g].set_requires_grad(True)
            self.frozen.discard(g)

    def only_trainable(self, groups: Sequence[str]) -> None:
        self.freeze(*[g for g in GROUPS if g not in groups])
        self.unfreeze(*groups)

    def state(self) -> dict[str, list[np.ndarray]]:
        return {name: net.state() for name, net in self.nets.items()}

    def load_state(self, state: dict[str, list[np.ndarray]]) -> None:
        for name, arrays in state.items():
            self.nets[name].load_state(arrays)

    def copy(self) -> "ModularForecaster":
        clone = ModularForecaster(self.arch, build=False)
        clone.nets = {k: v.copy() for k, v in self.nets.items()}
        clone.frozen = set(self.frozen)
        return clone

    def group_digest(self, group: str) -> str:
        return dc.params_digest(self.nets[group].parameters())

    def digest(self) -> str:
        h = hashlib.sha256()
        for g in GROUPS:
            h.update(self.group_digest(g).encode())
        return h.hexdigest()

    # --- forward pieces

    def encode_invariant(self, x) -> dc.Value:
        x = dc.constant(x)
        if x.data.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ModelError(f"invariant encoder expects (N, {self.arch.input_dim}), got {x.shape}")
        return self.phi(x)

    def encode_style(self, observations) -> dc.Value:
        """``observations`` is ``(N, S, style_dim)``: S observations per row, averaged."""
        obs = dc.constant(observations)
        if obs.data.ndim == 2:
            obs = dc.reshape(obs, (1,) + obs.shape)
        if obs.data.ndim != 3 or obs.shape[2] != self.arch.style_dim:
            raise ModelError(f"style encoder expects (N, S, {self.arch.style_dim}), got {obs.shape}")
        n, s, d = obs.shape
        if s == 0:
            raise ModelError("empty observation set")
        flat = self.psi(dc.reshape(obs, (n * s, d)))
        return dc.mean(dc.reshape(flat, (n, s, self.arch.c_dim)), axis=1)

    def modulate(self, z, c) -> dc.Value:
        z, c = dc.constant(z), dc.constant(c)
        if z.shape[1] != self.arch.z_dim or c.shape[1] != self.arch.c_dim or z.shape[0] != c.shape[0]:
            raise ModelError(f"modulator got z {z.shape}, c {c.shape}")
        return dc.add(self.f(dc.concat([z, c], axis=1)), z)

    def decode(self, z_mod) -> dc.Value:
        z_mod = dc.constant(z_mod)
        if z_mod.data.ndim != 2 or z_mod.shape[1] != self.arch.z_dim:
            raise ModelError(f"decoder expects (N, {self.arch.z_dim}), got {z_mod.shape}")
        out = self.g(z_mod)
        return dc.reshape(out, (z_mod.shape[0], self.arch.pred_len, 2))

    def project(self, c) -> dc.Value:
        hc = self.h(dc.constant(c))
        norms = np.sqrt((hc.data**2).sum(axis=1))
        if np.any(norms < 1e-12):
            raise ModelError("degenerate projection: |h(c)| below 1e-12")
        return dc.l2_normalize(hc, axis=1)

    def invariant_forward(self, x) -> dc.Value:
        return self.decode(self.encode_invariant(x))

    def forward(self, x, observations) -> tuple[dc.Value, dc.Value]:
        """Batched modular prediction; returns ``(y_hat (N,12,2), c)``."""
        c = self.encode_style(observations)
        z = self.encode_invariant(x)
        if c.shape[0] == 1 and z.shape[0] > 1:
            c = dc.add(dc.Value(np.zeros((z.shape[0], self.arch.c_dim))), c)
        return self.decode(self.modulate(z, c)), c

    def forward_full(
        self, window: InstanceWindow, observations: Sequence[InstanceWindow]
    ) -> tuple[np.ndarray, np.ndarray]:
        """World-frame prediction for one window and the unit style embedding."""
        if not observations:
            raise ModelError("empty observation set")
        if len({o.env_id for o in observations}) > 1:
            raise ModelError("style observations come from different environments")
        x = input_features(window)[None, :]
        obs = np.stack([window_style_features(o) for o in observations])[None]
        y_hat, c = self.forward(x, obs)
        p = self.project(c)
        return y_hat.data[0] + window.origin, p.data[0]

    # --- persistence

    def save(self, directory: str | Path, groups: Sequence[str] = GROUPS) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for g in groups:
            dc.save_mlp(self.nets[g], directory / f"{g}.json")
        desc = {"architecture": _arch_dict(self.arch), "groups": list(GROUPS)}
        (directory / "architecture.json").write_text(json.dumps(desc, indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "ModularForecaster":
        directory = Path(directory)
        desc_path = directory / "architecture.json"
        if not desc_path.exists():
            raise FileNotFoundError(f"no architecture descriptor in {directory}")
        desc = json.loads(desc_path.read_text())
        arch = Architecture(**{k: tuple(v) if isinstance(v, list) else v for k, v in desc["architecture"].items()})
        model = cls(arch, build=False)
        for g in GROUPS:
            model.nets[g] = dc.load_mlp(directory / f"{g}.json")
        widths = arch.widths()
        for g in GROUPS:
            if model.nets[g].widths != widths[g]:
                raise ModelError(f"{g}: checkpoint widths {model.nets[g].widths} do not match descriptor")
        return model


def window_style_features(window: InstanceWindow) -> np.ndarray:
    primary = np.concatenate([window.past[:, :2], window.future], axis=0)
    return style_features(primary, window.style_neighbor)


def _arch_dict(arch: Architecture) -> dict:
    d = asdict(arch)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
