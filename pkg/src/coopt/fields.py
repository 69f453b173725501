"""Implicit neural scalar fields for density, deposition order and fiber direction.

Each field is a small SiLU multilayer perceptron.  Spatial derivatives are
propagated forward through the network alongside the values (first and
second order "jets"), so gradients and Hessians with respect to position are
exact and remain differentiable with respect to the network coefficients.
"""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .material import DTYPE, as_tensor

DEFAULT_SHARPNESS = 5.0


class Mode(str, enum.Enum):
    FIVE_AXIS = "5axis"
    THREE_AXIS = "3axis"
    PLANAR = "2.5axis"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "").replace("axis", "")
        table = {"5": cls.FIVE_AXIS, "five": cls.FIVE_AXIS, "3": cls.THREE_AXIS, "three": cls.THREE_AXIS,
                 "2.5": cls.PLANAR, "25": cls.PLANAR, "twopointfive": cls.PLANAR, "planar": cls.PLANAR}
        if key not in table:
            raise ValueError(f"unknown motion mode {value!r}; expected one of 5axis, 3axis, 2.5axis")
        return table[key]


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of the three field networks and the domain they live in.

    ``lo``/``hi`` bound the design domain in mm; positions are mapped
    affinely (per axis) onto ``[-1, 1]^3`` before entering a network.
    """

    hidden_layer_count: int = 2
    hidden_width: int = 64
    activation: str = "silu"
    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sharpness: float = DEFAULT_SHARPNESS
    init_scale: float = 1.0

    def validate(self) -> None:
        if self.hidden_layer_count < 1 or self.hidden_width < 1:
            raise ValueError("network: hidden_layer_count and hidden_width must be >= 1")
        if self.activation != "silu":
            raise ValueError(f"network.activation: only 'silu' is supported, got {self.activation!r}")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("network: domain upper corner must exceed lower corner")
        if self.sharpness <= 0:
            raise ValueError("network.sharpness must be positive")
        if self.init_scale <= 0:
            raise ValueError("network.init_scale must be positive")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo, float) + np.asarray(self.hi, float))

    @property
    def half(self) -> np.ndarray:
        """Per-axis normalization factors (half extents, mm)."""
        return 0.5 * (np.asarray(self.hi, float) - np.asarray(self.lo, float))

    @property
    def field_scale(self) -> float:
        """Output scale of the m and a networks (mm), so their gradients are O(1)."""
        return float(self.half.max())

    def to_dict(self) -> dict:
        return {"hidden_layer_count": self.hidden_layer_count, "hidden_width": self.hidden_width,
                "activation": self.activation, "lo": list(self.lo), "hi": list(self.hi),
                "sharpness": self.sharpness, "init_scale": self.init_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["lo"], d["hi"] = tuple(map(float, d["lo"])), tuple(map(float, d["hi"]))
        return cls(**d)


def heaviside_project(rho_raw, sharpness: float = DEFAULT_SHARPNESS):
    """Smooth step used as the solid indicator; 0.5 at the origin."""
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    return torch.sigmoid(sharpness * as_tensor(rho_raw))


def _silu_derivs(z):
    s = torch.sigmoid(z)
    d1 = s * (1 + z * (1 - s))
    d2 = s * (1 - s) * (2 + z * (1 - 2 * s))
    return z * s, d1, d2


class ScalarFieldNet(nn.Module):
    """SiLU MLP with a trainable linear input-to-output skip term."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.init_scale = spec.init_scale
        widths = [3] + [spec.hidden_width] * spec.hidden_layer_count
        self.hidden = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:]))
        self.out = nn.Linear(spec.hidden_width, 1, dtype=DTYPE)
        self.skip = nn.Parameter(torch.zeros(3, dtype=DTYPE))

    def reset(self, gen: torch.Generator) -> None:
        with torch.no_grad():
            for k, layer in enumerate(self.hidden):
                # a wider first layer lets the fields start with finer spatial detail
                bound = (self.init_scale if k == 0 else 1.0) / layer.in_features**0.5
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                layer.bias.copy_((torch.rand(layer.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            self.out.weight.zero_()
            self.out.bias.zero_()
            self.skip.zero_()

    def jet(self, xn: torch.Tensor, order: int = 0):
        """Value, gradient ``(N, 3)`` and Hessian ``(N, 3, 3)`` in normalized coordinates.

        Second derivatives are carried as the 6 unique components of the
        symmetric Hessian and expanded only at the output.
        """
        h = xn
        dh = d2h = None
        for k, layer in enumerate(self.hidden):
            W = layer.weight
            z = h @ W.T + layer.bias
            h, s1, s2 = _silu_derivs(z)
            if order == 0:
                continue
            if k == 0:
                # dz/dx is the constant weight matrix and d2z vanishes
                Wt = W.T
                dh_next = s1[:, None, :] * Wt
                if order >= 2:
                    d2h = s2[:, None, :] * (Wt[_SYM_I] * Wt[_SYM_J])
            else:
                dz = dh @ W.T
                dh_next = s1[:, None, :] * dz
                if order >= 2:
                    d2h = s2[:, None, :] * (dz[:, _SYM_I] * dz[:, _SYM_J]) + s1[:, None, :] * (d2h @ W.T)
            dh = dh_next
        w = self.out.weight[0]
        value = h @ w + self.out.bias[0] + xn @ self.skip
        grad = dh @ w + self.skip if order >= 1 else None
        hess = (d2h @ w)[:, _SYM_FULL].reshape(-1, 3, 3) if order >= 2 else None
        return value, grad, hess


# unique Hessian components (00, 11, 22, 01, 12, 02) and their scatter into 3x3
_SYM_I = [0, 1, 2, 0, 1, 0]
_SYM_J = [0, 1, 2, 1, 2, 2]
_SYM_FULL = [0, 3, 5, 3, 1, 4, 5, 4, 2]


@dataclass
class FieldSamples:
    """Per-point field evaluation (batched).  All derivatives are physical (mm)."""

    x: torch.Tensor
    rho_raw: torch.Tensor
    rho: torch.Tensor
    m: torch.Tensor | None = None
    a: torch.Tensor | None = None
    grad_m: torch.Tensor | None = None
    grad_a: torch.Tensor | None = None
    hess_m: torch.Tensor | None = None
    hess_a: torch.Tensor | None = None
    out_of_domain: torch.Tensor | None = None

    @property
    def fiber(self) -> torch.Tensor:
        return torch.linalg.cross(self.grad_a, self.grad_m, dim=-1)

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class FieldTriple:
    """Complete design state: the three networks, setup orientation and motion mode."""

    spec: NetworkSpec
    rho_net: ScalarFieldNet
    m_net: ScalarFieldNet
    a_net: ScalarFieldNet
    n: nn.Parameter
    mode: Mode = Mode.FIVE_AXIS
    seed: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def nets(self) -> dict[str, ScalarFieldNet]:
        return {"rho": self.rho_net, "m": self.m_net, "a": self.a_net}

    def parameter_groups(self) -> dict[str, list[torch.Tensor]]:
        return {
            "rho": list(self.rho_net.parameters()),
            "m": list(self.m_net.parameters()),
            "a": list(self.a_net.parameters()),
            "n": [self.n],
        }

    def theta(self, name: str) -> torch.Tensor:
        """Flat coefficient vector of one network (detached copy)."""
        return nn.utils.parameters_to_vector(self.nets[name].parameters()).detach().clone()

    def n_hat(self) -> torch.Tensor:
        norm = torch.linalg.vector_norm(self.n)
        if float(norm.detach()) <= 0:
            raise ValueError("setup orientation n must be nonzero")
        return self.n / norm

    def clone(self) -> "FieldTriple":
        other = init_networks(self.spec, self.mode, self.seed)
        other.load_flat(self.to_flat())
        other.extras = dict(self.extras)
        return other

    # -- persistence ---------------------------------------------------
    def _ordered(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        for name, net in self.nets.items():
            out += [(f"{name}.{k}", p) for k, p in net.named_parameters()]
        out.append(("n", self.n))
        return out

    def to_flat(self) -> np.ndarray:
        return np.concatenate([p.detach().numpy().ravel() for _, p in self._ordered()]).astype("<f8")

    def load_flat(self, flat: np.ndarray) -> None:
        i = 0
        with torch.no_grad():
            for _, p in self._ordered():
                k = p.numel()
                p.copy_(torch.as_tensor(np.array(flat[i:i + k], dtype=float), dtype=DTYPE).view_as(p))
                i += k
        if i != len(flat):
            raise ValueError(f"coefficient blob has {len(flat)} values, expected {i}")

    def save(self, path) -> None:
        header = {
            "format": "coopt-fields/1",
            "network": self.spec.to_dict(),
            "mode": self.mode.value,
            "n": self.n.detach().tolist(),
            "seed": self.seed,
            "layers": [[name, list(p.shape)] for name, p in self._ordered()],
            "extras": self.extras,
        }
        raw = json.dumps(header).encode()
        with open(path, "wb") as fh:
            fh.write(b"CFLD")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(self.to_flat().tobytes())

    @classmethod
    def load(cls, path) -> "FieldTriple":
        data = Path(path).read_bytes()
        if data[:4] != b"CFLD":
            raise ValueError(f"{path}: not a field coefficient file")
        (size,) = struct.unpack("<I", data[4:8])
        header = json.loads(data[8:8 + size])
        triple = init_networks(NetworkSpec.from_dict(header["network"]), header["mode"], header["seed"])
        triple.load_flat(np.frombuffer(data[8 + size:], dtype="<f8"))
        triple.extras = header.get("extras", {})
        return triple


def init_networks(spec: NetworkSpec, mode=Mode.FIVE_AXIS, seed: int = 0) -> FieldTriple:
    """Random hidden layers from ``seed``; output layers set for the starting fields.

    The starting fields are a uniform projected density of 0.5, a deposition
    field with unit gradient along +z and an auxiliary field with unit
    gradient along +y (so fibers start along +x).
    """
    spec.validate()
    mode = Mode.parse(mode)
    gen = torch.Generator().manual_seed(int(seed))
    nets = []
    for _ in range(3):
        net = ScalarFieldNet(spec)
        net.reset(gen)
        nets.append(net)
    rho_net, m_net, a_net = nets
    scale = spec.field_scale
    with torch.no_grad():
        # physical slope of m along z is field_scale * skip_z / half_z
        m_net.skip[2] = spec.half[2] / scale
        a_net.skip[1] = spec.half[1] / scale
    n = nn.Parameter(torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE))
    return FieldTriple(spec, rho_net, m_net, a_net, n, mode, int(seed))


def evaluate(triple: FieldTriple, points, order: int = 2, hess_a: bool = False) -> FieldSamples:
    """Evaluate all fields at ``points`` (mm).

    ``order`` 0 gives values only, 1 adds gradients of m and a, 2 adds the
    Hessian of m (and of a when ``hess_a`` is set).  Points outside the
    design domain are evaluated but flagged in ``out_of_domain``.
    """
    spec = triple.spec
    x = as_tensor(points).reshape(-1, 3)
    center = torch.as_tensor(spec.center, dtype=DTYPE)
    inv_half = torch.as_tensor(1.0 / spec.half, dtype=DTYPE)
    xn = (x - center) * inv_half
    tol = 1e-9
    outside = ((xn < -1 - tol) | (xn > 1 + tol)).any(-1)

    rho_raw, _, _ = triple.rho_net.jet(xn, 0)
    out = FieldSamples(x=x, rho_raw=rho_raw, rho=heaviside_project(rho_raw, spec.sharpness),
                       out_of_domain=outside)
    scale = spec.field_scale

    def physical(net, want_hess):
        v, g, h = net.jet(xn, 2 if want_hess else min(order, 1))
        v = scale * v
        if g is not None:
            g = scale * g * inv_half
        if h is not None and want_hess:
            h = scale * h * inv_half[:, None] * inv_half[None, :]
        return v, g, h

    if triple.mode is Mode.PLANAR:
        n_hat = triple.n_hat()
        out.m = (x - center) @ n_hat
        if order >= 1:
            out.grad_m = n_hat.expand(len(x), 3)
        if order >= 2:
            out.hess_m = torch.zeros(len(x), 3, 3, dtype=DTYPE)
    else:
        out.m, out.grad_m, out.hess_m = physical(triple.m_net, order >= 2)
    want_ha = order >= 2 and hess_a
    out.a, out.grad_a, ha = physical(triple.a_net, want_ha)
    out.hess_a = ha if want_ha else None
    if order < 1:
        out.grad_m = out.grad_a = None
    return out
