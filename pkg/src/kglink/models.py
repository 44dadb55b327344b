"""Embedding models: parameter containers, initialisation, scoring functions
and their analytic gradients.

Complex-valued models (ComplEx, RotatE) store ``d`` complex coordinates as
``2 d`` interleaved reals ``(re_0, im_0, re_1, im_1, ...)``. RotatE relations
are stored as ``d`` phase angles. All arithmetic is float64.

Every kind implements the same batched kernel interface on gathered rows:

* ``triple(params, H, R, T)`` -> ``(B,)``
* ``objects(params, H, R, E)`` -> ``(B, N)`` scores of ``(h_i, r_i, e_j)``
* ``subjects(params, R, T, E)`` -> ``(B, N)`` scores of ``(e_j, r_i, t_i)``

and matching ``*_grad`` methods that take the upstream derivative of a scalar
loss with respect to the scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError

MODEL_NAMES = ("TransE", "TransH", "RotatE", "DistMult", "ComplEx", "ConvE")
COMPLEX_MODELS = ("RotatE", "ComplEx")
NORM_MODELS = ("TransE", "TransH", "RotatE")
INIT_FAMILIES = ("Uniform", "Normal", "XavierUniform", "XavierNormal")

# (B * N * width) elements per broadcast chunk
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class ModelKind:
    name: str
    norm: int = 2
    conv_filters: int = 32

    def __post_init__(self):
        canon = {n.lower(): n for n in MODEL_NAMES}.get(str(self.name).lower())
        if canon is None:
            raise ConfigError([f"model: unknown kind {self.name!r}, expected one of "
                               f"{list(MODEL_NAMES)}"])
        object.__setattr__(self, "name", canon)
        if self.norm not in (1, 2):
            raise ConfigError([f"model.norm: must be 1 or 2, got {self.norm}"])

    @property
    def is_complex(self) -> bool:
        return self.name in COMPLEX_MODELS

    def __str__(self) -> str:
        if self.name in NORM_MODELS:
            return f"{self.name}(L{self.norm})"
        return self.name


@dataclass(frozen=True)
class InitSpec:
    """Embedding initialiser. ``lower`` is the uniform lower bound (the upper
    bound is ``-lower``); Xavier families derive their scale from fans."""

    family: str = "Normal"
    std: float = 0.1
    lower: float = -0.1
    mean: float = 0.0
    gain: float = 1.0

    def __post_init__(self):
        if self.family not in INIT_FAMILIES:
            raise ConfigError([f"init.type: {self.family!r} not in {list(INIT_FAMILIES)}"])
        if not self.std > 0:
            raise ConfigError([f"init.normal_std: must be > 0, got {self.std}"])
        if not self.lower < 0:
            raise ConfigError([f"init.uniform_lower_bound: must be < 0, got {self.lower}"])

    def xavier_uniform_bound(self, fan_in: int, fan_out: int) -> float:
        return self.gain * math.sqrt(6.0 / (fan_in + fan_out))

    def xavier_normal_std(self, fan_in: int, fan_out: int) -> float:
        return self.gain * math.sqrt(2.0 / (fan_in + fan_out))

    def sample(self, rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
        if self.family == "Normal":
            return rng.normal(self.mean, self.std, size=shape)
        if self.family == "Uniform":
            return rng.uniform(self.lower, -self.lower, size=shape)
        if self.family == "XavierUniform":
            b = self.xavier_uniform_bound(fan_in, fan_out)
            return rng.uniform(-b, b, size=shape)
        return rng.normal(0.0, self.xavier_normal_std(fan_in, fan_out), size=shape)


def conve_shape(d: int) -> tuple[int, int]:
    """``(k1, k2)`` with ``k1`` the largest divisor of ``d`` not above sqrt(d)."""
    k1 = max(k for k in range(1, int(math.isqrt(d)) + 1) if d % k == 0)
    return k1, d // k1


@dataclass
class ModelParams:
    kind: ModelKind
    d: int
    entity: np.ndarray
    relation: np.ndarray
    normals: np.ndarray | None = None
    conv_filter: np.ndarray | None = None
    conv_projection: np.ndarray | None = None
    conv_shape: tuple[int, int] | None = None
    reciprocal: bool = False

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation.shape[0]

    @property
    def n_base_relations(self) -> int:
        return self.n_relations // 2 if self.reciprocal else self.n_relations

    def tables(self) -> dict[str, np.ndarray]:
        out = {"entity": self.entity, "relation": self.relation}
        for name in ("normals", "conv_filter", "conv_projection"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def copy(self) -> "ModelParams":
        return replace(self, **{k: v.copy() for k, v in self.tables().items()})

    def rel_rows(self, p) -> np.ndarray:
        """Relation-side rows fed to kernels; TransH appends the normal."""
        rows = self.relation[p]
        if self.kind.name == "TransH":
            rows = np.concatenate([rows, self.normals[p]], axis=-1)
        return rows

    @property
    def rel_width(self) -> int:
        return self.relation.shape[1]


def init_params(kind: ModelKind, n_entities: int, n_relations: int, d: int,
                spec: InitSpec = InitSpec(), seed: int = 0, reciprocal: bool = False) -> ModelParams:
    """Draw a fresh parameter bundle. ``n_relations`` is the number of
    relation rows, already doubled when ``reciprocal`` is set."""
    if isinstance(kind, str):
        kind = ModelKind(kind)
    if d < 1 or n_entities < 1 or n_relations < 1:
        raise ConfigError([f"init: need d, n_entities, n_relations >= 1, got "
                           f"{d}, {n_entities}, {n_relations}"])
    rng = np.random.default_rng(seed)
    width = 2 * d if kind.is_complex else d
    entity = spec.sample(rng, (n_entities, width), d, d)
    rel_width = d if kind.name == "RotatE" else width
    relation = spec.sample(rng, (n_relations, rel_width), d, d)
    params = ModelParams(kind, d, entity, relation, reciprocal=reciprocal)
    if kind.name == "TransH":
        w = spec.sample(rng, (n_relations, d), d, d)
        params.normals = _unit_rows(w, rng)
    elif kind.name == "ConvE":
        k1, k2 = conve_shape(d)
        f = kind.conv_filters
        xu = InitSpec("XavierUniform")
        params.conv_shape = (k1, k2)
        params.conv_filter = xu.sample(rng, (f, 3, 3), 9, 9 * f)
        params.conv_projection = xu.sample(rng, (2 * f * d, d), 2 * f * d, d)
    return params


def _unit_rows(w: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    if zero.any():
        rng = rng or np.random.default_rng(0)
        w = w.copy()
        w[zero] = rng.normal(size=(int(zero.sum()), w.shape[-1]))
        norms = np.linalg.norm(w, axis=-1, keepdims=True)
    return w / norms


def renormalize_normals(params: ModelParams, rows=None) -> None:
    if params.normals is None:
        return
    if rows is None:
        params.normals[:] = _unit_rows(params.normals)
    else:
        params.normals[rows] = _unit_rows(params.normals[rows])


# -- complex helpers ---------------------------------------------------------

def as_complex(x: np.ndarray) -> np.ndarray:
    return x[..., 0::2] + 1j * x[..., 1::2]


def as_real(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def _neg_norm(x: np.ndarray, order: int) -> np.ndarray:
    a = np.abs(x)
    if order == 1:
        return -a.sum(-1)
    return -np.sqrt((a * a).sum(-1))


def _neg_norm_grad(x: np.ndarray, order: int):
    """Derivative of ``-||x||`` w.r.t. x (complex: d/dre + i d/dim) and a
    mask of nondifferentiable rows, where the subgradient 0 is used."""
    a = np.abs(x)
    if order == 1:
        zero = a == 0
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(zero, 0.0, -x / np.where(zero, 1.0, a))
        return g, zero.any(-1)
    n = np.sqrt((a * a).sum(-1, keepdims=True))
    zero = n == 0
    g = np.where(zero, 0.0, -x / np.where(zero, 1.0, n))
    return g, zero[..., 0]


def _chunks(b: int, n: int, width: int):
    step = max(1, _CHUNK_ELEMS // max(1, b * width))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


# -- kernels -----------------------------------------------------------------

class _Kernel:
    """Fallbacks: subject sweeps via repeated triple scoring."""

    def subjects(self, params, R, T, E):
        b, n = R.shape[0], E.shape[0]
        out = np.empty((b, n))
        for sl in _chunks(b, n, max(E.shape[1], 1) * 8):
            m = sl.stop - sl.start
            H = np.tile(E[sl], (b, 1))
            out[:, sl] = self.triple(params, H, np.repeat(R, m, 0),
                                     np.repeat(T, m, 0)).reshape(b, m)
        return out

    def subjects_grad(self, params, R, T, E, up):
        b, n = R.shape[0], E.shape[0]
        dR, dT, dE = np.zeros_like(R), np.zeros_like(T), np.zeros_like(E)
        dense: dict[str, np.ndarray] = {}
        for sl in _chunks(b, n, max(E.shape[1], 1) * 8):
            m = sl.stop - sl.start
            H = np.tile(E[sl], (b, 1))
            dh, dr, dt, dd = self.triple_grad(params, H, np.repeat(R, m, 0),
                                              np.repeat(T, m, 0), up[:, sl].reshape(-1))
            dE[sl] += dh.reshape(b, m, -1).sum(0)
            dR += dr.reshape(b, m, -1).sum(1)
            dT += dt.reshape(b, m, -1).sum(1)
            for k, v in dd.items():
                dense[k] = dense.get(k, 0) + v
        return dR, dT, dE, dense


class _Translational(_Kernel):
    """TransE and TransH. TransH relation rows carry ``[r | w]``."""

    def __init__(self, projected: bool):
        self.projected = projected

    def _split(self, params, R):
        if self.projected:
            d = params.d
            return R[:, :d], R[:, d:]
        return R, None

    @staticmethod
    def _proj(y, w):
        # y - (w . y) w, broadcasting w over y's middle axis when needed
        if y.ndim == 3:
            return y - np.einsum("bnd,bd->bn", y, w)[..., None] * w[:, None, :]
        return y - (y * w).sum(-1, keepdims=True) * w

    def _residual(self, r, w, y):
        if w is None:
            return y + (r[:, None, :] if y.ndim == 3 else r)
        return self._proj(y, w) + (r[:, None, :] if y.ndim == 3 else r)

    def _back(self, g, w, y):
        """Given G = dL/dX, return (dY, dr, dw) with X = P(w) y + r."""
        red = (lambda a: a.sum(1)) if y.ndim == 3 else (lambda a: a)
        dr = red(g)
        if w is None:
            return g, dr, None
        dy = self._proj(g, w)
        if y.ndim == 3:
            gw = np.einsum("bnd,bd->bn", g, w)
            yw = np.einsum("bnd,bd->bn", y, w)
            dw = -(np.einsum("bn,bnd->bd", gw, y) + np.einsum("bn,bnd->bd", yw, g))
        else:
            dw = -((g * w).sum(-1, keepdims=True) * y + (y * w).sum(-1, keepdims=True) * g)
        return dy, dr, dw

    def _join(self, dr, dw):
        return dr if dw is None else np.concatenate([dr, dw], axis=-1)

    def _triple_residual(self, r, w, H, T):
        if w is None:
            return H + r - T
        return self._residual(r, w, H - T)

    def triple(self, params, H, R, T):
        r, w = self._split(params, R)
        return _neg_norm(self._triple_residual(r, w, H, T), params.kind.norm)

    def triple_grad(self, params, H, R, T, up, flags=None):
        r, w = self._split(params, R)
        y = H - T
        g, zero = _neg_norm_grad(self._triple_residual(r, w, H, T), params.kind.norm)
        if flags is not None:
            flags.append(zero)
        g = g * up[:, None]
        dy, dr, dw = self._back(g, w, y)
        return dy, self._join(dr, dw), -dy, {}

    def objects(self, params, H, R, E):
        r, w = self._split(params, R)
        out = np.empty((H.shape[0], E.shape[0]))
        for sl in _chunks(H.shape[0], E.shape[0], E.shape[1]):
            y = H[:, None, :] - E[None, sl, :]
            out[:, sl] = _neg_norm(self._residual(r, w, y), params.kind.norm)
        return out

    def objects_grad(self, params, H, R, E, up):
        r, w = self._split(params, R)
        dH, dE = np.zeros_like(H), np.zeros_like(E)
        dr = np.zeros_like(r)
        dw = None if w is None else np.zeros_like(w)
        for sl in _chunks(H.shape[0], E.shape[0], E.shape[1]):
            y = H[:, None, :] - E[None, sl, :]
            g, _ = _neg_norm_grad(self._residual(r, w, y), params.kind.norm)
            g = g * up[:, sl, None]
            dy, dr_c, dw_c = self._back(g, w, y)
            dH += dy.sum(1)
            dE[sl] -= dy.sum(0)
            dr += dr_c
            if dw is not None:
                dw += dw_c
        return dH, self._join(dr, dw), dE, {}

    def subjects(self, params, R, T, E):
        r, w = self._split(params, R)
        out = np.empty((R.shape[0], E.shape[0]))
        for sl in _chunks(R.shape[0], E.shape[0], E.shape[1]):
            y = E[None, sl, :] - T[:, None, :]
            out[:, sl] = _neg_norm(self._residual(r, w, y), params.kind.norm)
        return out

    def subjects_grad(self, params, R, T, E, up):
        r, w = self._split(params, R)
        dT, dE = np.zeros_like(T), np.zeros_like(E)
        dr = np.zeros_like(r)
        dw = None if w is None else np.zeros_like(w)
        for sl in _chunks(R.shape[0], E.shape[0], E.shape[1]):
            y = E[None, sl, :] - T[:, None, :]
            g, _ = _neg_norm_grad(self._residual(r, w, y), params.kind.norm)
            g = g * up[:, sl, None]
            dy, dr_c, dw_c = self._back(g, w, y)
            dE[sl] += dy.sum(0)
            dT -= dy.sum(1)
            dr += dr_c
            if dw is not None:
                dw += dw_c
        return self._join(dr, dw), dT, dE, {}


class _RotatE(_Kernel):

    @staticmethod
    def _phase_grad(gr, rot):
        # gr = dL/dr as complex; r = exp(i theta) => dL/dtheta = Re(conj(gr) i r)
        return (np.conj(gr) * 1j * rot).real

    def triple(self, params, H, R, T):
        x = as_complex(H) * np.exp(1j * R) - as_complex(T)
        return _neg_norm(x, params.kind.norm)

    def triple_grad(self, params, H, R, T, up, flags=None):
        h, t, rot = as_complex(H), as_complex(T), np.exp(1j * R)
        g, zero = _neg_norm_grad(h * rot - t, params.kind.norm)
        if flags is not None:
            flags.append(zero)
        g = g * up[:, None]
        return (as_real(g * np.conj(rot)), self._phase_grad(g * np.conj(h), rot),
                as_real(-g), {})

    def objects(self, params, H, R, E):
        q = as_complex(H) * np.exp(1j * R)
        e = as_complex(E)
        out = np.empty((H.shape[0], E.shape[0]))
        for sl in _chunks(H.shape[0], E.shape[0], E.shape[1]):
            out[:, sl] = _neg_norm(q[:, None, :] - e[None, sl, :], params.kind.norm)
        return out

    def objects_grad(self, params, H, R, E, up):
        h, rot, e = as_complex(H), np.exp(1j * R), as_complex(E)
        q = h * rot
        dq = np.zeros_like(q)
        de = np.zeros_like(e)
        for sl in _chunks(H.shape[0], E.shape[0], E.shape[1]):
            g, _ = _neg_norm_grad(q[:, None, :] - e[None, sl, :], params.kind.norm)
            g = g * up[:, sl, None]
            dq += g.sum(1)
            de[sl] -= g.sum(0)
        return (as_real(dq * np.conj(rot)), self._phase_grad(dq * np.conj(h), rot),
                as_real(de), {})

    def subjects(self, params, R, T, E):
        rot, t, e = np.exp(1j * R), as_complex(T), as_complex(E)
        out = np.empty((R.shape[0], E.shape[0]))
        for sl in _chunks(R.shape[0], E.shape[0], E.shape[1]):
            x = e[None, sl, :] * rot[:, None, :] - t[:, None, :]
            out[:, sl] = _neg_norm(x, params.kind.norm)
        return out

    def subjects_grad(self, params, R, T, E, up):
        rot, t, e = np.exp(1j * R), as_complex(T), as_complex(E)
        drot = np.zeros_like(rot)
        dt = np.zeros_like(t)
        de = np.zeros_like(e)
        for sl in _chunks(R.shape[0], E.shape[0], E.shape[1]):
            x = e[None, sl, :] * rot[:, None, :] - t[:, None, :]
            g, _ = _neg_norm_grad(x, params.kind.norm)
            g = g * up[:, sl, None]
            de[sl] += (g * np.conj(rot)[:, None, :]).sum(0)
            drot += (g * np.conj(e[None, sl, :])).sum(1)
            dt -= g.sum(1)
        return self._phase_grad(drot, rot), as_real(dt), as_real(de), {}


class _DistMult(_Kernel):

    def triple(self, params, H, R, T):
        return (H * R * T).sum(-1)

    def triple_grad(self, params, H, R, T, up, flags=None):
        u = up[:, None]
        return u * R * T, u * H * T, u * H * R, {}

    def objects(self, params, H, R, E):
        return (H * R) @ E.T

    def objects_grad(self, params, H, R, E, up):
        q = H * R
        dq = up @ E
        return dq * R, dq * H, up.T @ q, {}

    def subjects(self, params, R, T, E):
        return (R * T) @ E.T

    def subjects_grad(self, params, R, T, E, up):
        q = R * T
        dq = up @ E
        return dq * T, dq * R, up.T @ q, {}


class _ComplEx(_Kernel):
    """Re(<e_s, r_p, conj(e_o)>)."""

    def triple(self, params, H, R, T):
        return (as_complex(H) * as_complex(R) * np.conj(as_complex(T))).real.sum(-1)

    def triple_grad(self, params, H, R, T, up, flags=None):
        h, r, t = as_complex(H), as_complex(R), as_complex(T)
        u = up[:, None]
        return (as_real(u * np.conj(r) * t), as_real(u * np.conj(h) * t),
                as_real(u * h * r), {})

    def objects(self, params, H, R, E):
        q = as_complex(H) * as_complex(R)
        e = as_complex(E)
        return q.real @ e.real.T + q.imag @ e.imag.T

    def objects_grad(self, params, H, R, E, up):
        h, r, e = as_complex(H), as_complex(R), as_complex(E)
        q = h * r
        gq = up @ e
        return as_real(gq * np.conj(r)), as_real(gq * np.conj(h)), as_real(up.T @ q), {}

    def subjects(self, params, R, T, E):
        a = as_complex(R) * np.conj(as_complex(T))
        e = as_complex(E)
        return a.real @ e.real.T - a.imag @ e.imag.T

    def subjects_grad(self, params, R, T, E, up):
        r, t, e = as_complex(R), as_complex(T), as_complex(E)
        a = r * np.conj(t)
        ge = up @ np.conj(e)
        s = up @ e
        return as_real(ge * t), as_real(r * s), as_real(up.T @ np.conj(a)), {}


class _ConvE(_Kernel):
    """relu(vec(relu([e_s; r_p] * w)) W) . e_o, 3x3 filters, 'same' padding."""

    @staticmethod
    def _patches(img):
        b, hh, ww = img.shape
        pad = np.pad(img, ((0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(1, 2))
        return win.reshape(b, hh * ww, 9)

    def _forward(self, params, H, R):
        k1, k2 = params.conv_shape
        b = H.shape[0]
        img = np.concatenate([H.reshape(b, k1, k2), R.reshape(b, k1, k2)], axis=1)
        patches = self._patches(img)
        wf = params.conv_filter.reshape(-1, 9)
        conv = patches @ wf.T
        a1 = np.maximum(conv, 0.0)
        vec = a1.reshape(b, -1)
        u = vec @ params.conv_projection
        z = np.maximum(u, 0.0)
        return z, (patches, conv, vec, u)

    def _backward(self, params, cache, dz):
        patches, conv, vec, u = cache
        k1, k2 = params.conv_shape
        b = dz.shape[0]
        du = dz * (u > 0)
        dproj = vec.T @ du
        dconv = (du @ params.conv_projection.T).reshape(conv.shape) * (conv > 0)
        wf = params.conv_filter.reshape(-1, 9)
        dfilter = np.einsum("bpk,bpf->fk", patches, dconv).reshape(params.conv_filter.shape)
        dpatch = (dconv @ wf).reshape(b, 2 * k1, k2, 3, 3)
        dpad = np.zeros((b, 2 * k1 + 2, k2 + 2))
        for i in range(3):
            for j in range(3):
                dpad[:, i:i + 2 * k1, j:j + k2] += dpatch[..., i, j]
        dimg = dpad[:, 1:-1, 1:-1]
        dense = {"conv_filter": dfilter, "conv_projection": dproj}
        return dimg[:, :k1].reshape(b, -1), dimg[:, k1:].reshape(b, -1), dense

    def triple(self, params, H, R, T):
        z, _ = self._forward(params, H, R)
        return (z * T).sum(-1)

    def triple_grad(self, params, H, R, T, up, flags=None):
        z, cache = self._forward(params, H, R)
        dH, dR, dense = self._backward(params, cache, up[:, None] * T)
        return dH, dR, up[:, None] * z, dense

    def objects(self, params, H, R, E):
        z, _ = self._forward(params, H, R)
        return z @ E.T

    def objects_grad(self, params, H, R, E, up):
        z, cache = self._forward(params, H, R)
        dH, dR, dense = self._backward(params, cache, up @ E)
        return dH, dR, up.T @ z, dense


KERNELS = {
    "TransE": _Translational(projected=False),
    "TransH": _Translational(projected=True),
    "RotatE": _RotatE(),
    "DistMult": _DistMult(),
    "ComplEx": _ComplEx(),
    "ConvE": _ConvE(),
}


def kernel(params: ModelParams) -> _Kernel:
    return KERNELS[params.kind.name]


# -- public scoring API --------------------------------------------------------

@dataclass
class RowGrad:
    """Gradient rows for a parameter table; ``rows`` may repeat."""

    rows: np.ndarray
    values: np.ndarray

    def dense(self, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows, self.values.shape[1]))
        np.add.at(out, self.rows, self.values)
        return out


@dataclass
class ScoreGradient:
    grads: dict = field(default_factory=dict)
    nondifferentiable: bool = False


def _check_ids(params: ModelParams, s, p, o):
    for name, ids, n in (("subject", s, params.n_entities), ("relation", p, params.n_relations),
                         ("object", o, params.n_entities)):
        if ids is None:
            continue
        a = np.asarray(ids)
        if a.size and (a.min() < 0 or a.max() >= n):
            raise IndexError(f"{name} id out of range [0, {n})")


def score(params: ModelParams, s, p, o):
    """Score of ``(s, p, o)``; array arguments give a vector of scores."""
    _check_ids(params, s, p, o)
    scalar = np.ndim(s) == 0 and np.ndim(p) == 0 and np.ndim(o) == 0
    s, p, o = (np.atleast_1d(np.asarray(x, dtype=np.int64)) for x in (s, p, o))
    s, p, o = np.broadcast_arrays(s, p, o)
    out = kernel(params).triple(params, params.entity[s], params.rel_rows(p), params.entity[o])
    return float(out[0]) if scalar else out


def score_all_objects(params: ModelParams, s, p) -> np.ndarray:
    """Scores of ``(s, p, e)`` for every entity ``e``."""
    _check_ids(params, s, p, None)
    scalar = np.ndim(s) == 0 and np.ndim(p) == 0
    s, p = np.broadcast_arrays(np.atleast_1d(s), np.atleast_1d(p))
    out = kernel(params).objects(params, params.entity[s], params.rel_rows(p), params.entity)
    return out[0] if scalar else out


def score_all_subjects(params: ModelParams, p, o, use_reciprocal: bool | None = None) -> np.ndarray:
    """Scores of ``(e, p, o)`` for every entity ``e``.

    With reciprocal relations this is the object sweep of ``(o, p_inv, .)``,
    which is what a reciprocal model is trained to answer.
    """
    if use_reciprocal is None:
        use_reciprocal = params.reciprocal
    if use_reciprocal:
        return score_all_objects(params, o, np.asarray(p) + params.n_base_relations)
    _check_ids(params, None, p, o)
    scalar = np.ndim(p) == 0 and np.ndim(o) == 0
    p, o = np.broadcast_arrays(np.atleast_1d(p), np.atleast_1d(o))
    out = kernel(params).subjects(params, params.rel_rows(p), params.entity[o], params.entity)
    return out[0] if scalar else out


def relation_row_grads(params: ModelParams, p: np.ndarray, dR: np.ndarray) -> dict:
    """Split kernel relation-side gradients into table gradients."""
    w = params.rel_width
    out = {"relation": RowGrad(p, dR[:, :w])}
    if params.kind.name == "TransH":
        out["normals"] = RowGrad(p, dR[:, w:])
    return out


def score_gradients(params: ModelParams, s: int, p: int, o: int) -> ScoreGradient:
    """Analytic gradient of ``score(params, s, p, o)`` w.r.t. every touched
    parameter. Norm-based scores at a zero residual get the subgradient 0
    and ``nondifferentiable=True``."""
    _check_ids(params, s, p, o)
    s_, p_, o_ = (np.array([x], dtype=np.int64) for x in (s, p, o))
    flags: list[np.ndarray] = []
    dH, dR, dT, dense = kernel(params).triple_grad(
        params, params.entity[s_], params.rel_rows(p_), params.entity[o_], np.ones(1), flags)
    grads = {"entity": RowGrad(np.concatenate([s_, o_]), np.concatenate([dH, dT]))}
    grads.update(relation_row_grads(params, p_, dR))
    grads.update(dense)
    return ScoreGradient(grads, bool(flags and flags[0].any()))
