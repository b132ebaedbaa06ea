"""Coordinate networks: the SDF geometry MLP and the radiance MLP."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from math import pi, sqrt

import numpy as np

from . import diffmath as dm
from .diffmath import Value

#: Version tag for the radiance input layout [enc(x), normal, enc(v), feature].
RADIANCE_LAYOUT = "x_n_v_f/1"


@dataclass(frozen=True)
class PosEncodingConfig:
    num_freqs_x: int = 6
    num_freqs_v: int = 4
    include_input: bool = True

    def dim(self, input_dim: int, num_freqs: int) -> int:
        return input_dim * (int(self.include_input) + 2 * num_freqs)


@dataclass(frozen=True)
class Toggles:
    """Which geometry-derived blocks the radiance network sees."""

    use_normals: bool = True
    use_feature: bool = True

    @classmethod
    def from_ablation(cls, name: str | None) -> "Toggles":
        table = {
            None: cls(True, True),
            "none": cls(True, True),
            "no-normals": cls(False, True),
            "no-feature": cls(True, False),
            "neither": cls(False, False),
        }
        if name not in table:
            raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(k for k in table if k)}")
        return table[name]


def positional_encode(p, num_freqs: int, include_input: bool = True):
    """[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)].

    Accepts an ndarray or a tape value of shape ``(n, d)``; each sin/cos
    block covers all ``d`` components at one frequency.
    """
    if not isinstance(p, Value):
        return positional_encode(Value(np.atleast_2d(p)), num_freqs, include_input).data
    blocks = [p] if include_input else []
    for k in range(num_freqs):
        scaled = p * (2.0**k * pi)
        blocks.append(dm.sin(scaled))
        blocks.append(dm.cos(scaled))
    if not blocks:
        return Value(np.zeros((p.shape[0], 0)))
    return blocks[0] if len(blocks) == 1 else dm.concat(blocks, axis=1)


class _Linear:
    def __init__(self, w: np.ndarray, b: np.ndarray, name: str):
        self.W = dm.param(w, name=f"{name}.W")
        self.b = dm.param(b.reshape(1, -1), name=f"{name}.b")

    def __call__(self, x: Value) -> Value:
        return x @ self.W + self.b


class SdfField:
    """Geometry MLP: point -> (signed distance, feature vector).

    ``depth`` affine layers of ``width`` units; the encoded input is
    concatenated back in before layer ``skip_at``.  With ``geometric_init``
    the untrained field approximates a sphere of radius ``init_radius``.
    """

    def __init__(
        self,
        enc: PosEncodingConfig | None = None,
        width: int = 512,
        depth: int = 8,
        skip_at: int | None = 4,
        feature_dim: int = 256,
        beta: float = 100.0,
        init_radius: float = 0.5,
        geometric_init: bool = True,
        seed=0,
    ):
        self.enc = enc or PosEncodingConfig()
        self.width = width
        self.depth = depth
        self.skip_at = skip_at if skip_at and 0 < skip_at < depth else None
        self.feature_dim = feature_dim
        self.beta = beta
        self.init_radius = init_radius
        self.geometric_init = geometric_init and self.enc.include_input
        self.in_dim = self.enc.dim(3, self.enc.num_freqs_x)
        rng = dm.make_rng(seed)

        self.layers: list[_Linear] = []
        out_dim = 1 + feature_dim
        for l in range(depth):
            d_in = self.in_dim if l == 0 else width
            if l == self.skip_at:
                d_in = width + self.in_dim
            d_out = out_dim if l == depth - 1 else width
            w, b = self._init_layer(l, d_in, d_out, rng)
            self.layers.append(_Linear(w, b, f"geo.l{l}"))
        if self.geometric_init:
            self._center_on_init_sphere(rng)

    def _init_layer(self, l, d_in, d_out, rng):
        if not self.geometric_init:
            w = rng.normal(0.0, sqrt(2.0 / d_in), size=(d_in, d_out))
            return w, np.zeros(d_out)
        if l == self.depth - 1:
            w = rng.normal(sqrt(pi) / sqrt(d_in), 1e-4, size=(d_in, d_out))
            return w, np.full(d_out, -self.init_radius)
        w = rng.normal(0.0, sqrt(2.0) / sqrt(d_out), size=(d_in, d_out))
        # encoded frequencies start switched off so the init is a clean sphere
        if l == 0:
            w[3:, :] = 0.0
        elif l == self.skip_at:
            w[self.width + 3 :, :] = 0.0
        return w, np.zeros(d_out)

    def _center_on_init_sphere(self, rng, n: int = 2048):
        # finite width and the softplus offset bias the init; shift it so the
        # init sphere is (on average) the zero level set
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        self.layers[-1].b.data[0, 0] -= float(self.sdf(self.init_radius * d).mean())

    # -- parameters -------------------------------------------------------
    def parameters(self) -> list[Value]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]

    def named_parameters(self) -> dict[str, Value]:
        return {p.name: p for p in self.parameters()}

    def config(self) -> dict:
        return {
            "kind": "sdf",
            "enc": asdict(self.enc),
            "width": self.width,
            "depth": self.depth,
            "skip_at": self.skip_at,
            "feature_dim": self.feature_dim,
            "beta": self.beta,
            "init_radius": self.init_radius,
        }

    # -- evaluation -------------------------------------------------------
    def evaluate(self, x) -> tuple[Value, Value]:
        """Signed distance ``(n, 1)`` and feature ``(n, F)`` at points ``x``."""
        x = x if isinstance(x, Value) else Value(np.atleast_2d(x))
        enc = positional_encode(x, self.enc.num_freqs_x, self.enc.include_input)
        h = enc
        inv_sqrt2 = 1.0 / sqrt(2.0)
        for l, layer in enumerate(self.layers):
            if l == self.skip_at:
                h = dm.concat([h, enc], axis=1) * inv_sqrt2
            h = layer(h)
            if l < self.depth - 1:
                h = dm.softplus(h, self.beta)
        sdf = dm.take_cols(h, 0, 1)
        feature = dm.take_cols(h, 1, 1 + self.feature_dim)
        return sdf, feature

    def sdf(self, points: np.ndarray, chunk: int = 8192) -> np.ndarray:
        """Plain-array signed distances, shape ``(n,)``; records nothing."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        out = np.empty(len(points))
        with dm.no_grad():
            for i in range(0, len(points), chunk):
                s, _ = self.evaluate(Value(points[i : i + chunk]))
                out[i : i + chunk] = s.data[:, 0]
        return out


def sdf_eval(field, x) -> tuple[Value, Value]:
    return field.evaluate(x)


def normal(field, x: Value, create_graph: bool = True) -> tuple[Value, Value, Value]:
    """Spatial gradient of the SDF at ``x`` plus the sdf and feature there.

    ``x`` must be on the tape.  The gradient is not renormalised.
    """
    with dm.enable_grad():
        sdf, feature = field.evaluate(x)
        n = dm.input_gradient(sdf.sum(), x, create_graph=create_graph)
    return n, sdf, feature


def normals_numpy(field, points: np.ndarray, chunk: int = 8192) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    out = np.empty_like(points)
    for i in range(0, len(points), chunk):
        x = dm.param(points[i : i + chunk])
        n, _, _ = normal(field, x, create_graph=False)
        out[i : i + chunk] = n.data
    return out


class RadianceField:
    """Rendering MLP: (enc(x), normal, enc(v), feature) -> RGB in [0, 1]."""

    def __init__(
        self,
        enc: PosEncodingConfig | None = None,
        feature_dim: int = 256,
        width: int = 512,
        depth: int = 4,
        beta: float = 100.0,
        seed=1,
    ):
        self.enc = enc or PosEncodingConfig()
        self.feature_dim = feature_dim
        self.width = width
        self.depth = depth
        self.beta = beta
        self.dx = self.enc.dim(3, self.enc.num_freqs_x)
        self.dv = self.enc.dim(3, self.enc.num_freqs_v)
        self.in_dim = self.dx + 3 + self.dv + feature_dim
        rng = dm.make_rng(seed)
        self.layers = []
        for l in range(depth):
            d_in = self.in_dim if l == 0 else width
            d_out = 3 if l == depth - 1 else width
            w = rng.normal(0.0, sqrt(2.0 / d_in), size=(d_in, d_out))
            if l == depth - 1:
                w *= 0.1
            self.layers.append(_Linear(w, np.zeros(d_out), f"rad.l{l}"))

    def parameters(self) -> list[Value]:
        return [p for layer in self.layers for p in (layer.W, layer.b)]

    def named_parameters(self) -> dict[str, Value]:
        return {p.name: p for p in self.parameters()}

    def config(self) -> dict:
        return {
            "kind": "radiance",
            "layout": RADIANCE_LAYOUT,
            "enc": asdict(self.enc),
            "feature_dim": self.feature_dim,
            "width": self.width,
            "depth": self.depth,
            "beta": self.beta,
        }

    def shade(self, x, n, v, feature, toggles: Toggles = Toggles()) -> Value:
        x, n, v = (t if isinstance(t, Value) else Value(np.atleast_2d(t)) for t in (x, n, v))
        m = x.shape[0]
        if feature is None:
            feature = Value(np.zeros((m, self.feature_dim)))
        elif not isinstance(feature, Value):
            feature = Value(np.atleast_2d(feature))
        if x.shape[1] != 3 or n.shape != (m, 3) or v.shape != (m, 3):
            raise ValueError(f"expected (n, 3) point/normal/view blocks, got {x.shape}, {n.shape}, {v.shape}")
        if feature.shape != (m, self.feature_dim):
            raise ValueError(f"feature block has shape {feature.shape}, expected {(m, self.feature_dim)}")
        if not toggles.use_normals:
            n = Value(np.zeros((m, 3)))
        if not toggles.use_feature:
            feature = Value(np.zeros((m, self.feature_dim)))
        h = dm.concat(
            [
                positional_encode(x, self.enc.num_freqs_x, self.enc.include_input),
                n,
                positional_encode(v, self.enc.num_freqs_v, self.enc.include_input),
                feature,
            ],
            axis=1,
        )
        for l, layer in enumerate(self.layers):
            h = layer(h)
            if l < self.depth - 1:
                h = dm.softplus(h, self.beta)
        return dm.sigmoid(h)

    __call__ = shade


def radiance_eval(g: RadianceField, x, n, v, feature, toggles: Toggles = Toggles()) -> Value:
    return g.shade(x, n, v, feature, toggles)


def field_state(net) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in net.named_parameters().items()}


def load_field_state(net, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
    params = net.named_parameters()
    missing = [k for k in params if k not in arrays]
    if strict and missing:
        raise KeyError(f"checkpoint lacks parameters {missing[:4]}")
    for name, p in params.items():
        if name in arrays:
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} != {p.shape}")
            p.data[...] = arrays[name]


def build_sdf(cfg: dict, seed=0) -> SdfField:
    enc = PosEncodingConfig(**cfg["enc"])
    return SdfField(
        enc=enc,
        width=cfg["width"],
        depth=cfg["depth"],
        skip_at=cfg["skip_at"],
        feature_dim=cfg["feature_dim"],
        beta=cfg.get("beta", 100.0),
        init_radius=cfg.get("init_radius", 0.5),
        seed=seed,
    )


def build_radiance(cfg: dict, seed=1) -> RadianceField:
    if cfg.get("layout", RADIANCE_LAYOUT) != RADIANCE_LAYOUT:
        raise ValueError(f"unsupported radiance input layout {cfg.get('layout')!r}")
    return RadianceField(
        enc=PosEncodingConfig(**cfg["enc"]),
        feature_dim=cfg["feature_dim"],
        width=cfg["width"],
        depth=cfg["depth"],
        beta=cfg.get("beta", 100.0),
        seed=seed,
    )
