"""Attention-only patch regressor with analytic gradients.

The feature block is cut into overlapping 16 x 16 patches (stride 10), each
patch is linearly embedded, a learned [CLS] token is prepended, learned
positional embeddings are added, and a pre-norm transformer encoder runs
over the sequence. The final [CLS] state goes through a layer norm, a
linear head and a sigmoid; the sigmoid output is mapped affinely onto a
log10-volume range.

Everything is plain numpy. ``forward`` returns a cache that ``backward``
consumes to produce exact gradients for every parameter tensor.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericalError, ParameterError
from .features import N_FEATURES, N_FRAMES, FeatureStats, standardize_rows

LN_EPS = 1e-6
DEFAULT_LABEL_MAP = (1.0, 4.5)


def patch_count(n_features, n_frames, patch=16, stride=10):
    """Number of patches along both axes, ``(floor((F-p)/s)+1) * (floor((T-p)/s)+1)``."""
    pf, pt = (patch, patch) if np.isscalar(patch) else patch
    sf, st = (stride, stride) if np.isscalar(stride) else stride
    if n_features < pf or n_frames < pt:
        raise ParameterError(f"input {n_features}x{n_frames} smaller than patch {pf}x{pt}")
    return ((n_features - pf) // sf + 1) * ((n_frames - pt) // st + 1)


def _offsets(length, patch, stride):
    n = (length - patch) // stride + 1
    off = np.arange(n) * stride
    off[-1] = length - patch  # last patch ends exactly at the boundary
    return off


@dataclass(frozen=True)
class PatchGrid:
    n_features: int = N_FEATURES
    n_frames: int = N_FRAMES
    patch: tuple = (16, 16)
    stride: tuple = (10, 10)

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(v) for v in self.patch))
        object.__setattr__(self, "stride", tuple(int(v) for v in self.stride))
        if min(self.stride) < 1:
            raise ParameterError(f"stride must be positive, got {self.stride}")
        patch_count(self.n_features, self.n_frames, self.patch, self.stride)

    @property
    def feature_offsets(self):
        return _offsets(self.n_features, self.patch[0], self.stride[0])

    @property
    def frame_offsets(self):
        return _offsets(self.n_frames, self.patch[1], self.stride[1])

    @property
    def n_f(self):
        return len(self.feature_offsets)

    @property
    def n_t(self):
        return len(self.frame_offsets)

    @property
    def n_patches(self):
        return self.n_f * self.n_t

    @property
    def patch_size(self):
        return self.patch[0] * self.patch[1]


def patchify(block, grid):
    """Cut ``(..., F, T)`` into ``(..., P, patch_f * patch_t)``.

    Patches are ordered feature-offset-major, then time offset; each patch is
    flattened row-major.
    """
    x = np.asarray(getattr(block, "data", block))
    if x.shape[-2:] != (grid.n_features, grid.n_frames):
        raise ParameterError(f"block shape {x.shape[-2:]} does not match grid "
                             f"{grid.n_features}x{grid.n_frames}")
    pf, pt = grid.patch
    rows = grid.feature_offsets[:, None] + np.arange(pf)
    cols = grid.frame_offsets[:, None] + np.arange(pt)
    p = x[..., rows[:, None, :, None], cols[None, :, None, :]]
    return p.reshape(*x.shape[:-2], grid.n_patches, pf * pt)


@dataclass(frozen=True)
class ModelConfig:
    width: int = 768
    layers: int = 12
    heads: int = 12
    mlp_ratio: int = 4
    dropout: float = 0.1
    label_map: tuple = DEFAULT_LABEL_MAP
    grid: PatchGrid = field(default_factory=PatchGrid)

    def __post_init__(self):
        if self.width % self.heads:
            raise ParameterError(f"width {self.width} not divisible by {self.heads} heads")
        if not 0 <= self.dropout < 1:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        lo, hi = self.label_map
        if not lo < hi:
            raise ParameterError(f"label_map min must be below max, got {self.label_map}")
        object.__setattr__(self, "label_map", (float(lo), float(hi)))

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def hidden(self):
        return self.width * self.mlp_ratio

    @property
    def n_tokens(self):
        return self.grid.n_patches + 1

    def to_json(self):
        d = asdict(self)
        d["label_map"] = list(self.label_map)
        d["grid"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["grid"].items()}
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["grid"] = PatchGrid(**d["grid"])
        d["label_map"] = tuple(d["label_map"])
        return cls(**d)

    def replace(self, **changes):
        return replace(self, **changes)


PROFILES = {
    "full": ModelConfig(),
    "desk": ModelConfig(width=64, layers=2, heads=4),
}


def layer_names(i):
    p = f"blocks.{i}."
    return [p + n for n in ("ln1_g", "ln1_b", "qkv_w", "qkv_b", "proj_w", "proj_b",
                            "ln2_g", "ln2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")]


def param_shapes(config):
    d, k, h = config.width, config.grid.patch_size, config.hidden
    shapes = OrderedDict([("patch_w", (k, d)), ("patch_b", (d,)), ("cls", (d,)),
                          ("pos", (config.n_tokens, d))])
    for i in range(config.layers):
        n = layer_names(i)
        for name, shape in zip(n, [(d,), (d,), (d, 3 * d), (3 * d,), (d, d), (d,),
                                   (d,), (d,), (d, h), (h,), (h, d), (d,)]):
            shapes[name] = shape
    shapes.update([("norm_g", (d,)), ("norm_b", (d,)), ("head_w", (d,)), ("head_b", (1,))])
    return shapes


class ModelParams:
    """Parameter tensors plus the configuration, label map and feature statistics.

    ``generation`` increases whenever tensors are updated in place, which
    lets ``backward`` reject caches from an earlier forward pass.
    """

    def __init__(self, config, tensors, stats=None):
        shapes = param_shapes(config)
        if list(tensors) != list(shapes):
            missing = set(shapes) ^ set(tensors)
            raise ParameterError(f"tensor names do not match config: {sorted(missing)[:5]}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ParameterError(f"{name}: shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = OrderedDict((k, np.asarray(v, dtype=np.float64)) for k, v in tensors.items())
        self.stats = stats
        self.generation = 0

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def label_map(self):
        return self.config.label_map

    def copy(self):
        out = ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
                          self.stats)
        return out

    def bump(self):
        self.generation += 1

    def n_parameters(self):
        return sum(v.size for v in self.tensors.values())

    def prepare(self, x):
        """Apply the stored magnitude-row standardisation to raw features."""
        return standardize_rows(x, self.stats)

    def to_norm(self, log10_volume):
        lo, hi = self.label_map
        return (np.asarray(log10_volume, dtype=np.float64) - lo) / (hi - lo)

    def from_norm(self, y_norm):
        lo, hi = self.label_map
        return lo + np.asarray(y_norm, dtype=np.float64) * (hi - lo)


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


def init_params(config, seed=0, stats=None):
    """ViT-style initialisation: truncated normal (std 0.02) weights, zero biases, unit norms."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            tensors[name] = np.ones(shape)
        elif leaf.endswith("_b"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = _trunc_normal(rng, shape)
    return ModelParams(config, tensors, stats)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_backward(dy, g, cache):
    xhat, rstd = cache
    red = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=red)
    db = dy.sum(axis=red)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _dropout_mask(rng, shape, p):
    if rng is None or p == 0.0:
        return None
    return rng.random(shape) >= p


def _apply_mask(x, mask, p):
    return x if mask is None else x * mask / (1.0 - p)


def _softmax(s):
    """Row softmax computed in place on ``s`` (which is returned)."""
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _sum_leading(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _matmul_grad(a, dy):
    """Weight gradient of ``y = a @ W`` for batched ``a``."""
    return a.reshape(-1, a.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


class ForwardCache:
    __slots__ = ("params", "generation", "patches", "layers", "final", "y", "consumed")

    def __init__(self, params, patches):
        self.params = params
        self.generation = params.generation
        self.patches = patches
        self.layers = []
        self.final = None
        self.y = None
        self.consumed = False


def forward(x, params, rng=None):
    """Run the model on a batch of (already standardised) feature blocks.

    Parameters
    ----------
    x : ndarray, shape (B, F, T) or (F, T)
    params : ModelParams
    rng : numpy.random.Generator, optional
        Enables dropout (training mode). ``None`` means evaluation mode.

    Returns
    -------
    y_norm : ndarray, shape (B,) or scalar
        Sigmoid outputs in (0, 1).
    cache : ForwardCache
    """
    cfg = params.config
    t = params.tensors
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    p_drop = cfg.dropout if rng is not None else 0.0
    patches = patchify(x, cfg.grid)
    bsz, n_p, _ = patches.shape
    d, h, dh = cfg.width, cfg.heads, cfg.head_dim
    n = n_p + 1
    scale = 1.0 / math.sqrt(dh)
    cache = ForwardCache(params, patches)

    emb = patches @ t["patch_w"] + t["patch_b"]
    tok = np.concatenate([np.broadcast_to(t["cls"], (bsz, 1, d)), emb], axis=1) + t["pos"]

    for i in range(cfg.layers):
        w = {k.rsplit(".", 1)[-1]: t[k] for k in layer_names(i)}
        a_in, ln1 = _ln_forward(tok, w["ln1_g"], w["ln1_b"])
        qkv = (a_in @ w["qkv_w"] + w["qkv_b"]).reshape(bsz, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = _softmax((q * scale) @ k.transpose(0, 1, 3, 2))
        m_attn = _dropout_mask(rng, attn.shape, p_drop)
        attn_d = _apply_mask(attn, m_attn, p_drop)
        o = (attn_d @ v).transpose(0, 2, 1, 3).reshape(bsz, n, d)
        proj = o @ w["proj_w"] + w["proj_b"]
        m_proj = _dropout_mask(rng, proj.shape, p_drop)
        tok = tok + _apply_mask(proj, m_proj, p_drop)

        m_in, ln2 = _ln_forward(tok, w["ln2_g"], w["ln2_b"])
        h1 = m_in @ w["fc1_w"] + w["fc1_b"]
        g = _gelu(h1)
        m_fc1 = _dropout_mask(rng, g.shape, p_drop)
        g_d = _apply_mask(g, m_fc1, p_drop)
        h2 = g_d @ w["fc2_w"] + w["fc2_b"]
        m_fc2 = _dropout_mask(rng, h2.shape, p_drop)
        tok = tok + _apply_mask(h2, m_fc2, p_drop)
        if not np.all(np.isfinite(tok)):
            raise NumericalError(f"non-finite activations after encoder layer {i}")
        cache.layers.append((a_in, ln1, q, k, v, attn, m_attn, o, m_proj,
                             m_in, ln2, h1, g_d, m_fc1, m_fc2))

    c = tok[:, 0, :]
    cn, lnf = _ln_forward(c, t["norm_g"], t["norm_b"])
    logit = cn @ t["head_w"] + t["head_b"][0]
    y = 1.0 / (1.0 + np.exp(-logit))
    if not np.all(np.isfinite(y)):
        raise NumericalError("non-finite model output")
    cache.final = (cn, lnf, p_drop)
    cache.y = y
    return (y[0] if single else y), cache


def backward(cache, d_y):
    """Gradients of ``sum(d_y * y_norm)`` with respect to every parameter tensor.

    Returns an OrderedDict keyed like ``params.tensors``. A cache can be used
    once, and only while its parameters are unchanged.
    """
    params = cache.params
    if cache.consumed or cache.generation != params.generation:
        raise ContractError("stale forward cache: parameters changed or cache already used")
    cache.consumed = True
    cfg = params.config
    t = params.tensors
    d, h, dh = cfg.width, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    y = cache.y
    d_y = np.broadcast_to(np.asarray(d_y, dtype=np.float64), y.shape)
    bsz = y.shape[0]
    n = cache.patches.shape[1] + 1
    cn, lnf, p_drop = cache.final
    grads = OrderedDict((k, None) for k in t)

    dlogit = d_y * y * (1.0 - y)
    grads["head_w"] = cn.T @ dlogit
    grads["head_b"] = np.array([dlogit.sum()])
    dc, grads["norm_g"], grads["norm_b"] = _ln_backward(dlogit[:, None] * t["head_w"], t["norm_g"], lnf)
    dtok = np.zeros((bsz, n, d))
    dtok[:, 0, :] = dc

    for i in reversed(range(cfg.layers)):
        names = layer_names(i)
        w = {k.rsplit(".", 1)[-1]: t[k] for k in names}
        (a_in, ln1, q, k, v, attn, m_attn, o, m_proj,
         m_in, ln2, h1, g_d, m_fc1, m_fc2) = cache.layers[i]
        g = {}

        dh2 = _apply_mask(dtok, m_fc2, p_drop)
        g["fc2_w"] = _matmul_grad(g_d, dh2)
        g["fc2_b"] = _sum_leading(dh2)
        dg = _apply_mask(dh2 @ w["fc2_w"].T, m_fc1, p_drop)
        dh1 = dg * _gelu_grad(h1)
        g["fc1_w"] = _matmul_grad(m_in, dh1)
        g["fc1_b"] = _sum_leading(dh1)
        dx, g["ln2_g"], g["ln2_b"] = _ln_backward(dh1 @ w["fc1_w"].T, w["ln2_g"], ln2)
        dtok = dtok + dx

        dproj = _apply_mask(dtok, m_proj, p_drop)
        g["proj_w"] = _matmul_grad(o, dproj)
        g["proj_b"] = _sum_leading(dproj)
        do = (dproj @ w["proj_w"].T).reshape(bsz, n, h, dh).transpose(0, 2, 1, 3)
        attn_d = _apply_mask(attn, m_attn, p_drop)
        dv = attn_d.transpose(0, 1, 3, 2) @ do
        dattn = _apply_mask(do @ v.transpose(0, 1, 3, 2), m_attn, p_drop)
        # softmax backward, in place: ds = attn * (dattn - rowsum(dattn * attn))
        rows = np.einsum("bhij,bhij->bhi", dattn, attn)[..., None]
        dattn -= rows
        dattn *= attn
        dq = (dattn @ k) * scale
        dk = (dattn.transpose(0, 1, 3, 2) @ q) * scale
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, n, 3 * d)
        g["qkv_w"] = _matmul_grad(a_in, dqkv)
        g["qkv_b"] = _sum_leading(dqkv)
        dx, g["ln1_g"], g["ln1_b"] = _ln_backward(dqkv @ w["qkv_w"].T, w["ln1_g"], ln1)
        dtok = dtok + dx
        for name in names:
            grads[name] = g[name.rsplit(".", 1)[-1]]

    grads["pos"] = dtok.sum(axis=0)
    grads["cls"] = dtok[:, 0, :].sum(axis=0)
    de = dtok[:, 1:, :]
    grads["patch_w"] = _matmul_grad(cache.patches, de)
    grads["patch_b"] = _sum_leading(de)
    return grads


def predict_norm(x, params, chunk=8):
    """Evaluation-mode sigmoid outputs for raw (unstandardised) features, in chunks."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = np.concatenate([forward(params.prepare(x[s:s + chunk]), params)[0]
                          for s in range(0, x.shape[0], chunk)]) if x.shape[0] else np.zeros(0)
    return out[0] if single else out


def predict_log_volume(x, params):
    """log10 volume estimate(s) for raw feature block(s)."""
    return params.from_norm(predict_norm(x, params))


def fit_stats(x):
    """Magnitude-row statistics from a (N, F, T) training array."""
    return FeatureStats.fit(x)
