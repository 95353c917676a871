"""Token transformer denoiser with hook points, trained by hand-written gradients.

The model embeds its input into a (batch, tokens, channels) tensor, adds a
positional table plus a conditioning offset built from the timestep and the
class label, runs a stack of pre-norm attention blocks, and projects back to
the input shape through a zero-initialized head (so a fresh model predicts
exactly zero noise).  Images are tokenized into square patches; flat vectors
are lifted into a configurable number of tokens by a learned linear map.

Two intervention sites per block are exposed to callers of ``forward``:

* TOKEN_INPUT: the full hidden tensor entering the block is rewritten by a
  norm-preserving token perturbation,
* ATTENTION_MAP: the post-softmax attention weights are replaced by the
  identity or smeared by a one-dimensional Gaussian along the key axis.

All parameter gradients are derived manually in ``loss_grads``; there is no
autodiff anywhere.  A finite-difference check in the test suite polices every
layer type.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np
from scipy.special import erf

from .diffusion import NoiseSchedule, dsm_loss, forward_noise
from .errors import InvalidCondition, InvalidConfig, InvalidHook, ShapeMismatch
from .perturb import PerturbOp
from .rng import SeededRng

# ---------------------------------------------------------------------------
# configuration

def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture hyperparameters.

    ``input_shape`` is (height, width, channels) for images or (dims,) for
    flat vectors.  ``num_classes`` includes the reserved null class; index
    ``num_classes - 1`` is the null label used for unconditional passes.
    """

    input_shape: tuple[int, ...]
    num_classes: int
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 6
    heads: int = 4
    time_embed_dim: int = 32
    vector_tokens: int = 16
    mlp_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if len(self.input_shape) not in (1, 3):
            raise InvalidConfig(f"input_shape must be (dims,) or (H, W, C), got {self.input_shape}")
        if any(v < 1 for v in self.input_shape):
            raise InvalidConfig(f"input_shape entries must be positive, got {self.input_shape}")
        if self.is_image:
            h, w, _ = self.input_shape
            if h % self.patch_size or w % self.patch_size:
                raise InvalidConfig(
                    f"spatial dims {h}x{w} not divisible by patch_size {self.patch_size}"
                )
        if not _is_pow2(self.n_tokens):
            raise InvalidConfig(f"token count {self.n_tokens} must be a power of two")
        if self.depth < 1:
            raise InvalidConfig(f"depth must be >= 1, got {self.depth}")
        if self.embed_dim % self.heads:
            raise InvalidConfig(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.time_embed_dim % 2:
            raise InvalidConfig(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2 (at least one real class plus null)")
        if self.mlp_ratio < 1:
            raise InvalidConfig(f"mlp_ratio must be >= 1, got {self.mlp_ratio}")

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    @property
    def n_tokens(self) -> int:
        if self.is_image:
            h, w, _ = self.input_shape
            return (h // self.patch_size) * (w // self.patch_size)
        return self.vector_tokens

    @property
    def token_dim(self) -> int:
        """Raw per-token input width (patch pixels for images)."""
        if self.is_image:
            return self.patch_size * self.patch_size * self.input_shape[2]
        return self.input_shape[0]

    @property
    def null_class(self) -> int:
        return self.num_classes - 1


# ---------------------------------------------------------------------------
# hooks

class HookSite(Enum):
    TOKEN_INPUT = "token_input"
    ATTENTION_MAP = "attention_map"


@dataclass(frozen=True)
class HookPoint:
    layer: int
    site: HookSite


@dataclass(frozen=True)
class TokenPerturb:
    op: PerturbOp


@dataclass(frozen=True)
class AttentionIdentity:
    pass


@dataclass(frozen=True)
class AttentionBlur:
    sigma: float


def _check_hooks(hooks, cfg: DenoiserConfig):
    if not hooks:
        return {}
    checked = {}
    for point, action in hooks.items():
        if not isinstance(point, HookPoint):
            raise InvalidHook(f"hook key must be a HookPoint, got {point!r}")
        if not (0 <= point.layer < cfg.depth):
            raise InvalidHook(f"hook layer {point.layer} outside [0, {cfg.depth})")
        if point.site is HookSite.TOKEN_INPUT:
            if not isinstance(action, TokenPerturb):
                raise InvalidHook(f"TOKEN_INPUT site takes TokenPerturb, got {action!r}")
            if action.op.n != cfg.n_tokens:
                raise InvalidHook(
                    f"perturbation built for {action.op.n} tokens, model has {cfg.n_tokens}"
                )
        elif point.site is HookSite.ATTENTION_MAP:
            if not isinstance(action, (AttentionIdentity, AttentionBlur)):
                raise InvalidHook(f"ATTENTION_MAP site takes identity or blur, got {action!r}")
            if isinstance(action, AttentionBlur) and not (action.sigma > 0):
                raise InvalidHook(f"blur width must be positive, got {action.sigma}")
        else:  # pragma: no cover - enum is closed
            raise InvalidHook(f"unknown hook site {point.site!r}")
        checked[point] = action
    return checked


def blur_rows(attn: np.ndarray, sigma: float) -> np.ndarray:
    """Smear each attention row with a Gaussian along the key axis.

    Zero padding at the edges followed by renormalization keeps every row a
    probability vector.  Widths well below one key spacing leave the rows
    numerically unchanged because all off-center weights underflow.
    """
    n = attn.shape[-1]
    radius = max(1, int(np.ceil(3.0 * sigma)))
    radius = min(radius, n - 1) if n > 1 else 0
    out = np.zeros_like(attn)
    for d in range(-radius, radius + 1):
        w = float(np.exp(-(d * d) / (2.0 * sigma * sigma)))
        if d == 0:
            out += w * attn
        elif d > 0:
            out[..., d:] += w * attn[..., :n - d]
        else:
            out[..., :n + d] += w * attn[..., -d:]
    return out / out.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# small pieces

def time_embedding(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved (sin, cos) features of the raw timestep.

    Frequencies are geometrically spaced from 1 down to base**-(1 - 1/half),
    so t = 0 maps to [0, 1, 0, 1, ...].  Accepts a scalar or a vector of
    timesteps.
    """
    if dim < 2 or dim % 2:
        raise InvalidConfig(f"embedding dim must be even and >= 2, got {dim}")
    scalar = np.ndim(t) == 0
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = tv[:, None] * freqs[None, :]
    out = np.empty((len(tv), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out[0] if scalar else out


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, tokens, patch*patch*C), patches row-major."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (B, H, W, C), got shape {x.shape}")
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeMismatch(f"spatial dims {h}x{w} not divisible by patch {patch}")
    hp, wp = h // patch, w // patch
    x = x.reshape(b, hp, patch, wp, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hp * wp, patch * patch * c)


def unpatchify(tokens: np.ndarray, patch: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Inverse of patchify for the given target (H, W, C)."""
    h, w, c = shape
    hp, wp = h // patch, w // patch
    b = tokens.shape[0]
    if tokens.shape != (b, hp * wp, patch * patch * c):
        raise ShapeMismatch(f"token tensor {tokens.shape} does not tile {shape} with patch {patch}")
    x = tokens.reshape(b, hp, wp, patch, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def _gelu(u):
    return 0.5 * u * (1.0 + erf(u / np.sqrt(2.0)))


def _gelu_grad(u):
    cdf = 0.5 * (1.0 + erf(u / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi)
    return cdf + u * pdf


def _layernorm(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return g * xhat + b, (xhat, inv)


def _layernorm_back(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _split_heads(x, heads):
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, n, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * d)


# ---------------------------------------------------------------------------
# parameters

def _block_param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.embed_dim
    m = cfg.mlp_ratio * c
    return {
        "ln1_g": (c,), "ln1_b": (c,),
        "qkv_w": (c, 3 * c), "qkv_b": (3 * c,),
        "proj_w": (c, c), "proj_b": (c,),
        "ln2_g": (c,), "ln2_b": (c,),
        "fc1_w": (c, m), "fc1_b": (m,),
        "fc2_w": (m, c), "fc2_b": (c,),
    }


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.embed_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.is_image:
        shapes["embed_w"] = (cfg.token_dim, c)
        shapes["embed_b"] = (c,)
        shapes["head_w"] = (c, cfg.token_dim)
        shapes["head_b"] = (cfg.token_dim,)
    else:
        d = cfg.input_shape[0]
        shapes["embed_w"] = (d, cfg.n_tokens * c)
        shapes["embed_b"] = (cfg.n_tokens * c,)
        shapes["head_w"] = (cfg.n_tokens * c, d)
        shapes["head_b"] = (d,)
    shapes["pos"] = (cfg.n_tokens, c)
    shapes["class_emb"] = (cfg.num_classes, c)
    shapes["tmlp_w1"] = (cfg.time_embed_dim, c)
    shapes["tmlp_b1"] = (c,)
    shapes["tmlp_w2"] = (c, c)
    shapes["tmlp_b2"] = (c,)
    for k in range(cfg.depth):
        for name, shape in _block_param_shapes(cfg).items():
            shapes[f"blk{k}.{name}"] = shape
    shapes["lnf_g"] = (c,)
    shapes["lnf_b"] = (c,)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    """Closed-form total parameter count for the configuration."""
    c = cfg.embed_dim
    m = cfg.mlp_ratio * c
    per_block = 2 * c + (c * 3 * c + 3 * c) + (c * c + c) + 2 * c + (c * m + m) + (m * c + c)
    if cfg.is_image:
        p = cfg.token_dim
        ends = (p * c + c) + (c * p + p)
    else:
        d = cfg.input_shape[0]
        ends = (d * cfg.n_tokens * c + cfg.n_tokens * c) + (cfg.n_tokens * c * d + d)
    cond = cfg.n_tokens * c + cfg.num_classes * c + (cfg.time_embed_dim * c + c) + (c * c + c)
    return ends + cond + cfg.depth * per_block + 2 * c


def init_params(cfg: DenoiserConfig, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameter set: scaled-uniform linear maps, zeroed head and biases.

    Each tensor draws from its own named substream, so adding or removing a
    parameter never shifts any other parameter's values.
    """
    root = SeededRng(seed).stream("init")
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        base = name.split(".")[-1]
        if base in ("ln1_g", "ln2_g", "lnf_g"):
            params[name] = np.ones(shape)
        elif base in ("pos", "class_emb"):
            params[name] = root.stream(name).generator().uniform(-0.02, 0.02, size=shape)
        elif base == "head_w" or len(shape) == 1:
            # biases and the output projection start at zero, so a fresh
            # model predicts exactly zero noise
            params[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape[0], shape[1]
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = root.stream(name).generator().uniform(-limit, limit, size=shape)
    return params


# ---------------------------------------------------------------------------
# the model

class Denoiser:
    """Noise predictor over images or flat vectors.

    Holds the configuration and a flat name -> array parameter dict.
    ``forward_calls`` counts every forward evaluation, which is how tests
    verify that guided sampling costs exactly two passes per solver step.
    ``cond_dropout_p`` is set by the trainer and records whether the model
    ever saw the null class during training (required for the
    null-conditioned guidance method).
    """

    def __init__(self, cfg: DenoiserConfig, params: dict[str, np.ndarray],
                 cond_dropout_p: float | None = None):
        self.cfg = cfg
        self.params = params
        self.cond_dropout_p = cond_dropout_p
        self.forward_calls = 0

    @classmethod
    def init(cls, cfg: DenoiserConfig, seed: int) -> "Denoiser":
        return cls(cfg, init_params(cfg, seed))

    # -- condition handling

    def _class_vector(self, c, batch: int) -> np.ndarray:
        cfg = self.cfg
        if c is None:
            return np.full(batch, cfg.null_class, dtype=np.int64)
        cv = np.atleast_1d(np.asarray(c, dtype=np.int64))
        if cv.shape == (1,) and batch != 1:
            cv = np.full(batch, cv[0], dtype=np.int64)
        if cv.shape != (batch,):
            raise InvalidCondition(f"condition shape {cv.shape} does not match batch {batch}")
        if np.any(cv < 0) or np.any(cv >= cfg.num_classes):
            raise InvalidCondition(
                f"class index outside [0, {cfg.num_classes}): {cv.min()}..{cv.max()}"
            )
        return cv

    def _embed_in(self, x: np.ndarray):
        """Returns (raw per-token input, token tensor)."""
        cfg = self.cfg
        p = self.params
        if cfg.is_image:
            if x.shape[1:] != cfg.input_shape:
                raise ShapeMismatch(f"input shape {x.shape[1:]} != model shape {cfg.input_shape}")
            raw = patchify(x, cfg.patch_size)
            tokens = raw @ p["embed_w"] + p["embed_b"]
        else:
            if x.shape[1:] != cfg.input_shape:
                raise ShapeMismatch(f"input shape {x.shape[1:]} != model shape {cfg.input_shape}")
            raw = x
            tokens = (raw @ p["embed_w"] + p["embed_b"]).reshape(
                x.shape[0], cfg.n_tokens, cfg.embed_dim
            )
        return raw, tokens

    # -- forward

    def forward(self, x, t, c=None, hooks: Mapping | None = None, capture: dict | None = None):
        """Predict the noise component of x at timestep t under condition c.

        ``c`` may be None (the null class), a scalar class index, or one
        index per batch element.  ``hooks`` maps HookPoint to an action.
        ``capture``, if given, is filled with named intermediate tensors.
        """
        out, _ = self._run(np.asarray(x, dtype=np.float64), t, c, hooks, capture, need_cache=False)
        return out

    def _run(self, x, t, c, hooks, capture, need_cache):
        cfg = self.cfg
        p = self.params
        hooks = _check_hooks(hooks, cfg)
        self.forward_calls += 1
        b = x.shape[0]
        cv = self._class_vector(c, b)

        raw, tokens = self._embed_in(x)
        temb = time_embedding(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)),
                              cfg.time_embed_dim)
        t1 = temb @ p["tmlp_w1"] + p["tmlp_b1"]
        tg = _gelu(t1)
        cond = tg @ p["tmlp_w2"] + p["tmlp_b2"] + p["class_emb"][cv]

        h = tokens + p["pos"][None] + cond[:, None, :]

        heads = cfg.heads
        scale = 1.0 / np.sqrt(cfg.embed_dim // heads)
        cache = {"raw": raw, "temb": temb, "t1": t1, "tg": tg, "cv": cv, "blocks": []} if need_cache else None

        for k in range(cfg.depth):
            if capture is not None:
                capture[f"blk{k}.in"] = h.copy()
            act = hooks.get(HookPoint(k, HookSite.TOKEN_INPUT))
            if act is not None:
                h = act.op.apply(h)
                if capture is not None:
                    capture[f"blk{k}.in_hooked"] = h.copy()
            pre = p[f"blk{k}.ln1_g"], p[f"blk{k}.ln1_b"]
            a_in, ln1c = _layernorm(h, *pre)
            qkv = a_in @ p[f"blk{k}.qkv_w"] + p[f"blk{k}.qkv_b"]
            q, kk, v = (_split_heads(m, heads) for m in np.split(qkv, 3, axis=-1))
            s = q @ kk.transpose(0, 1, 3, 2) * scale
            attn = _softmax(s)
            amap = hooks.get(HookPoint(k, HookSite.ATTENTION_MAP))
            if isinstance(amap, AttentionIdentity):
                attn = np.broadcast_to(np.eye(attn.shape[-1]), attn.shape)
            elif isinstance(amap, AttentionBlur):
                attn = blur_rows(attn, amap.sigma)
            ctx = attn @ v
            ctxm = _merge_heads(ctx)
            attn_out = ctxm @ p[f"blk{k}.proj_w"] + p[f"blk{k}.proj_b"]
            if capture is not None:
                capture[f"blk{k}.attn_weights"] = np.array(attn, copy=True)
                capture[f"blk{k}.v"] = _merge_heads(v)
                capture[f"blk{k}.ctx"] = ctxm.copy()
                capture[f"blk{k}.attn_out"] = attn_out.copy()
            h2 = h + attn_out
            m_in, ln2c = _layernorm(h2, p[f"blk{k}.ln2_g"], p[f"blk{k}.ln2_b"])
            u = m_in @ p[f"blk{k}.fc1_w"] + p[f"blk{k}.fc1_b"]
            g = _gelu(u)
            mlp = g @ p[f"blk{k}.fc2_w"] + p[f"blk{k}.fc2_b"]
            h = h2 + mlp
            if need_cache:
                cache["blocks"].append(
                    {"ln1c": ln1c, "a_in": a_in, "q": q, "k": kk, "v": v,
                     "attn": attn, "ctxm": ctxm, "h2": h2, "ln2c": ln2c,
                     "m_in": m_in, "u": u, "g": g}
                )

        hf, lnfc = _layernorm(h, p["lnf_g"], p["lnf_b"])
        if cfg.is_image:
            out_tokens = hf @ p["head_w"] + p["head_b"]
            out = unpatchify(out_tokens, cfg.patch_size, cfg.input_shape)
        else:
            flat = hf.reshape(b, cfg.n_tokens * cfg.embed_dim)
            out = flat @ p["head_w"] + p["head_b"]
        if need_cache:
            cache["hf"] = hf
            cache["lnfc"] = lnfc
            cache["h_final"] = h
        return out, cache

    # -- training loss and gradients

    def loss_grads(self, x0, t, eps, c, sched: NoiseSchedule):
        """Denoising loss at (x0, t, eps, c) and its parameter gradients.

        Corrupts x0 to step t with eps, runs the hook-free forward with a
        full cache, and backpropagates the mean squared error by hand.
        Returns (loss, grads) where grads matches the parameter dict.
        """
        cfg = self.cfg
        p = self.params
        x0 = np.asarray(x0, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        x_t = forward_noise(x0, t, eps, sched)
        out, cache = self._run(x_t, t, c, None, None, need_cache=True)
        loss = dsm_loss(out, eps)
        dout = 2.0 * (out - eps) / out.size

        grads = {name: np.zeros_like(arr) for name, arr in p.items()}
        b = x_t.shape[0]
        heads = cfg.heads
        scale = 1.0 / np.sqrt(cfg.embed_dim // heads)

        if cfg.is_image:
            dout_tokens = patchify(dout, cfg.patch_size)
            grads["head_w"] += np.einsum("bnc,bnp->cp", cache["hf"], dout_tokens, optimize=True)
            grads["head_b"] += dout_tokens.sum(axis=(0, 1))
            dhf = dout_tokens @ p["head_w"].T
        else:
            flat = cache["hf"].reshape(b, cfg.n_tokens * cfg.embed_dim)
            grads["head_w"] += flat.T @ dout
            grads["head_b"] += dout.sum(axis=0)
            dhf = (dout @ p["head_w"].T).reshape(b, cfg.n_tokens, cfg.embed_dim)

        dh, dg_, db_ = _layernorm_back(dhf, p["lnf_g"], cache["lnfc"])
        grads["lnf_g"] += dg_
        grads["lnf_b"] += db_

        for k in range(cfg.depth - 1, -1, -1):
            bc = cache["blocks"][k]
            # mlp branch
            dmlp = dh
            grads[f"blk{k}.fc2_w"] += np.einsum("bnm,bnc->mc", bc["g"], dmlp, optimize=True)
            grads[f"blk{k}.fc2_b"] += dmlp.sum(axis=(0, 1))
            dgact = dmlp @ p[f"blk{k}.fc2_w"].T
            du = dgact * _gelu_grad(bc["u"])
            grads[f"blk{k}.fc1_w"] += np.einsum("bnc,bnm->cm", bc["m_in"], du, optimize=True)
            grads[f"blk{k}.fc1_b"] += du.sum(axis=(0, 1))
            dm_in = du @ p[f"blk{k}.fc1_w"].T
            dh2, dg_, db_ = _layernorm_back(dm_in, p[f"blk{k}.ln2_g"], bc["ln2c"])
            grads[f"blk{k}.ln2_g"] += dg_
            grads[f"blk{k}.ln2_b"] += db_
            dh2 = dh2 + dh
            # attention branch
            dattn_out = dh2
            grads[f"blk{k}.proj_w"] += np.einsum("bnc,bnk->ck", bc["ctxm"], dattn_out, optimize=True)
            grads[f"blk{k}.proj_b"] += dattn_out.sum(axis=(0, 1))
            dctxm = dattn_out @ p[f"blk{k}.proj_w"].T
            dctx = _split_heads(dctxm, heads)
            dA = dctx @ bc["v"].transpose(0, 1, 3, 2)
            dv = bc["attn"].transpose(0, 1, 3, 2) @ dctx
            a = bc["attn"]
            ds = a * (dA - (dA * a).sum(axis=-1, keepdims=True))
            dq = ds @ bc["k"] * scale
            dk = ds.transpose(0, 1, 3, 2) @ bc["q"] * scale
            dqkv = np.concatenate(
                [_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1
            )
            grads[f"blk{k}.qkv_w"] += np.einsum("bnc,bnk->ck", bc["a_in"], dqkv, optimize=True)
            grads[f"blk{k}.qkv_b"] += dqkv.sum(axis=(0, 1))
            da_in = dqkv @ p[f"blk{k}.qkv_w"].T
            dhin, dg_, db_ = _layernorm_back(da_in, p[f"blk{k}.ln1_g"], bc["ln1c"])
            grads[f"blk{k}.ln1_g"] += dg_
            grads[f"blk{k}.ln1_b"] += db_
            dh = dh2 + dhin

        # dh is now the gradient at h0 = tokens + pos + cond
        grads["pos"] += dh.sum(axis=0)
        dcond = dh.sum(axis=1)
        np.add.at(grads["class_emb"], cache["cv"], dcond)
        grads["tmlp_w2"] += cache["tg"].T @ dcond
        grads["tmlp_b2"] += dcond.sum(axis=0)
        dtg = dcond @ p["tmlp_w2"].T
        dt1 = dtg * _gelu_grad(cache["t1"])
        grads["tmlp_w1"] += cache["temb"].T @ dt1
        grads["tmlp_b1"] += dt1.sum(axis=0)

        dtokens = dh
        if cfg.is_image:
            grads["embed_w"] += np.einsum("bnp,bnc->pc", cache["raw"], dtokens, optimize=True)
            grads["embed_b"] += dtokens.sum(axis=(0, 1))
        else:
            dtok_flat = dtokens.reshape(b, cfg.n_tokens * cfg.embed_dim)
            grads["embed_w"] += cache["raw"].T @ dtok_flat
            grads["embed_b"] += dtok_flat.sum(axis=0)

        return loss, grads


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    cond_dropout: float = 0.1
    seed: int = 7

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfig("epochs and batch_size must be >= 1")
        if not (self.lr > 0):
            raise InvalidConfig(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.cond_dropout <= 1.0):
            raise InvalidConfig(f"cond_dropout must be in [0, 1], got {self.cond_dropout}")


@dataclass
class TrainResult:
    losses: list[float]
    steps: int
    null_seen: int


def train(model: Denoiser, sched: NoiseSchedule, samples: np.ndarray, labels: np.ndarray,
          tcfg: TrainConfig) -> TrainResult:
    """Adam training of the denoising objective, fully determined by tcfg.seed.

    Every stochastic choice (minibatch order, timesteps, noise draws, label
    dropout) comes from its own named substream keyed by (epoch, batch), so
    runs with the same seed reproduce the same loss curve exactly.  Labels
    are replaced by the null class with probability cond_dropout per example;
    the count of null presentations is reported for auditability.
    """
    cfg = model.cfg
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(samples)
    if n == 0:
        from .errors import EmptyDataset
        raise EmptyDataset("cannot train on an empty dataset")
    if np.any(labels < 0) or np.any(labels >= cfg.null_class):
        raise InvalidCondition(f"labels must lie in [0, {cfg.null_class})")
    root = SeededRng(tcfg.seed).stream("train")
    t_max = sched.timesteps

    mom = {k: np.zeros_like(v) for k, v in model.params.items()}
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    step = 0
    losses: list[float] = []
    null_seen = 0

    for epoch in range(tcfg.epochs):
        order = root.stream("order", epoch).generator().permutation(n)
        epoch_losses = []
        for ib, lo in enumerate(range(0, n, tcfg.batch_size)):
            idx = order[lo:lo + tcfg.batch_size]
            x0 = samples[idx]
            lab = labels[idx]
            t_vec = root.stream("t", epoch, ib).generator().integers(1, t_max + 1, size=len(idx))
            eps = root.stream("eps", epoch, ib).generator().standard_normal(x0.shape)
            if tcfg.cond_dropout > 0:
                u = root.stream("drop", epoch, ib).generator().random(len(idx))
                lab = np.where(u < tcfg.cond_dropout, cfg.null_class, lab)
            null_seen += int(np.sum(lab == cfg.null_class))
            loss, grads = model.loss_grads(x0, t_vec, eps, lab, sched)
            step += 1
            bc1 = 1.0 - beta1 ** step
            bc2 = 1.0 - beta2 ** step
            for name, g in grads.items():
                mom[name] = beta1 * mom[name] + (1 - beta1) * g
                vel[name] = beta2 * vel[name] + (1 - beta2) * g * g
                model.params[name] -= tcfg.lr * (mom[name] / bc1) / (
                    np.sqrt(vel[name] / bc2) + adam_eps
                )
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))

    # Snap weights to the nearest 32-bit value so that serialization (which
    # stores 32-bit floats) is exactly lossless with respect to this model.
    for name in model.params:
        model.params[name] = model.params[name].astype(np.float32).astype(np.float64)
    model.cond_dropout_p = tcfg.cond_dropout
    return TrainResult(losses=losses, steps=step, null_seen=null_seen)
