"""Transformer actor-critic over keypoint-first token sequences.

The network is written directly in numpy with an explicit backward pass:

    tokens  = [keypoint embedder(kp), joint embedder(joint_i) + pos_i ...]
    x       = L pre-norm blocks of  x + MHA(LN(x));  x + W2 ELU(W1 LN(x))
    z       = LN(x[:, 0])                        # keypoint token readout
    mean    = bound * tanh(actor_mlp(z))
    value   = critic_mlp(z)
    log_std = log_std_param + log(bound)         # state independent

``log_std_param`` is therefore measured in units of the per-step bound.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .env import Observation, joint_token_width
from .errors import CheckpointError, ContractViolation, NumericError

LN_EPS = 1e-5
LOG_2PI = math.log(2 * math.pi)


class PolicyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dof: int = Field(3, ge=1)
    layers: int = Field(6, ge=1)
    heads: int = Field(3, ge=1)
    width: int = Field(48, ge=1)
    ff_width: int | None = None
    head_hidden: int = Field(64, ge=1)
    keypoint_width: int = 7
    encoding: Literal["trig", "raw"] = "trig"
    history: int = Field(1, ge=1, le=4)
    action_bound: tuple[float, ...] = (0.08, 0.08, 0.08)
    log_std_init: float = -0.7
    # fixed affine normalization of the keypoint position before embedding
    keypoint_center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    keypoint_scale: float = Field(1.0, gt=0.0)

    @model_validator(mode="after")
    def _check(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} is not divisible by heads {self.heads}")
        if len(self.action_bound) != self.dof:
            raise ValueError(f"action_bound has {len(self.action_bound)} entries for {self.dof} joints")
        if any(b <= 0 for b in self.action_bound):
            raise ValueError("action bounds must be positive")
        return self

    @classmethod
    def for_scene(cls, scene, half_width: float = 0.10, **overrides) -> "PolicyConfig":
        """Config whose joint count, action bound and keypoint normalization match ``scene``.

        The keypoint position is centred on the scene's initial guess and
        scaled so the training box maps to roughly ``[-1, 1]``.
        """
        base = dict(
            dof=scene.chain.dof,
            action_bound=tuple(float(b) for b in scene.step_bound),
            keypoint_center=tuple(float(c) for c in scene.guess),
            keypoint_scale=1.0 / half_width if half_width > 0 else 1.0,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def ff(self) -> int:
        return self.ff_width or 4 * self.width

    @property
    def joint_width(self) -> int:
        return joint_token_width(self.encoding, self.history)

    @property
    def bound(self):
        return np.asarray(self.action_bound, dtype=float)


def param_shapes(cfg: PolicyConfig) -> dict:
    D, F, Hh, J = cfg.width, cfg.ff, cfg.head_hidden, cfg.dof
    shapes = {
        "embed.key.w": (cfg.keypoint_width, D),
        "embed.key.b": (D,),
        "embed.joint.w": (cfg.joint_width, D),
        "embed.joint.b": (D,),
        "embed.pos": (J, D),
    }
    for l in range(cfg.layers):
        p = f"layer{l}."
        shapes.update({
            p + "ln1.g": (D,), p + "ln1.b": (D,),
            p + "attn.wq": (D, D), p + "attn.bq": (D,),
            p + "attn.wk": (D, D), p + "attn.bk": (D,),
            p + "attn.wv": (D, D), p + "attn.bv": (D,),
            p + "attn.wo": (D, D), p + "attn.bo": (D,),
            p + "ln2.g": (D,), p + "ln2.b": (D,),
            p + "ff.w1": (D, F), p + "ff.b1": (F,),
            p + "ff.w2": (F, D), p + "ff.b2": (D,),
        })
    shapes.update({
        "final_ln.g": (D,), "final_ln.b": (D,),
        "actor.w1": (D, Hh), "actor.b1": (Hh,), "actor.w2": (Hh, J), "actor.b2": (J,),
        "critic.w1": (D, Hh), "critic.b1": (Hh,), "critic.w2": (Hh, 1), "critic.b2": (1,),
        "log_std": (J,),
    })
    return shapes


def init_params(cfg: PolicyConfig, seed: int) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif name == "log_std":
            params[name] = np.full(shape, cfg.log_std_init)
        elif name == "embed.pos":
            params[name] = rng.uniform(-1.0, 1.0, shape) / math.sqrt(cfg.width)
        elif len(shape) == 2:
            params[name] = rng.uniform(-1.0, 1.0, shape) / math.sqrt(shape[0])
        else:
            params[name] = np.zeros(shape)
    # near-zero initial action means keep early exploration centred
    params["actor.w2"] *= 0.01
    return params


def validate_params(cfg: PolicyConfig, params: dict) -> None:
    shapes = param_shapes(cfg)
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ContractViolation(f"parameter names differ from config: missing {missing}, unexpected {extra}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ContractViolation(f"{name}: shape {params[name].shape}, config expects {shape}")
        if not np.all(np.isfinite(params[name])):
            raise NumericError(f"{name}: non-finite parameter values")


def elu(x):
    return np.maximum(x, 0.0) + np.expm1(np.minimum(x, 0.0))


def elu_grad_from_output(y):
    """ELU derivative expressed through its output: 1 for y > 0, y + 1 otherwise."""
    return np.minimum(y, 0.0) + 1.0


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_bwd(dy, g, cache):
    xhat, inv = cache
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    axes = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(axes), dy.sum(axes)


def _check_layout(cfg: PolicyConfig, obs: Observation):
    if obs.keypoint.ndim != 2 or obs.keypoint.shape[1] != cfg.keypoint_width:
        raise ContractViolation(f"keypoint token has shape {obs.keypoint.shape}, expected (B, {cfg.keypoint_width})")
    expected = (obs.keypoint.shape[0], cfg.dof, cfg.joint_width)
    if obs.joints.shape != expected:
        raise ContractViolation(f"joint tokens have shape {obs.joints.shape}, expected {expected}")


def normalized_keypoint(cfg: PolicyConfig, keypoint):
    k = np.array(keypoint, dtype=float)
    k[:, :3] = (k[:, :3] - np.asarray(cfg.keypoint_center)) * cfg.keypoint_scale
    return k


def embed_tokens(cfg: PolicyConfig, obs: Observation, params: dict):
    """Embed the token sequence; returns an array of shape ``(B, 1 + dof, width)``."""
    _check_layout(cfg, obs)
    x0 = normalized_keypoint(cfg, obs.keypoint) @ params["embed.key.w"] + params["embed.key.b"]
    xj = obs.joints @ params["embed.joint.w"] + params["embed.joint.b"] + params["embed.pos"]
    return np.concatenate([x0[:, None], xj], axis=1)


@dataclass
class PolicyOutput:
    mean: np.ndarray      # (B, J)
    log_std: np.ndarray   # (J,)
    value: np.ndarray     # (B,)
    cache: dict | None = None


def forward(cfg: PolicyConfig, obs: Observation, params: dict, keep_cache: bool = False) -> PolicyOutput:
    x = embed_tokens(cfg, obs, params)
    B, T, D = x.shape
    H = cfg.heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)
    cache = {"obs": obs, "layers": []} if keep_cache else None

    for l in range(cfg.layers):
        p = f"layer{l}."
        h, ln1 = _ln_fwd(x, params[p + "ln1.g"], params[p + "ln1.b"])
        h2d = h.reshape(B * T, D)
        q = (h2d @ params[p + "attn.wq"] + params[p + "attn.bq"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (h2d @ params[p + "attn.wk"] + params[p + "attn.bk"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (h2d @ params[p + "attn.wv"] + params[p + "attn.bv"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        s = (q @ k.transpose(0, 1, 3, 2)) * scale
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(-1, keepdims=True)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B * T, D)
        x = x + (o @ params[p + "attn.wo"] + params[p + "attn.bo"]).reshape(B, T, D)

        h2, ln2 = _ln_fwd(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h2.reshape(B * T, D) @ params[p + "ff.w1"] + params[p + "ff.b1"]
        eu = elu(u)
        x = x + (eu @ params[p + "ff.w2"] + params[p + "ff.b2"]).reshape(B, T, D)
        if keep_cache:
            cache["layers"].append(dict(ln1=ln1, h=h2d, q=q, k=k, v=v, att=att, o=o, ln2=ln2, h2=h2.reshape(B * T, D), eu=eu))

    z, lnf = _ln_fwd(x[:, 0], params["final_ln.g"], params["final_ln.b"])
    ua = z @ params["actor.w1"] + params["actor.b1"]
    ea = elu(ua)
    th = np.tanh(ea @ params["actor.w2"] + params["actor.b2"])
    bound = cfg.bound
    mean = bound * th
    uc = z @ params["critic.w1"] + params["critic.b1"]
    ec = elu(uc)
    value = (ec @ params["critic.w2"] + params["critic.b2"])[:, 0]
    log_std = params["log_std"] + np.log(bound)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(value))):
        raise NumericError("non-finite policy output")
    if keep_cache:
        cache.update(shape=(B, T, D), lnf=lnf, z=z, ea=ea, th=th, ec=ec)
    return PolicyOutput(mean, log_std, value, cache)


def backward(cfg: PolicyConfig, out: PolicyOutput, params: dict, d_mean=None, d_log_std=None, d_value=None) -> dict:
    """Gradients of a scalar loss given its partials w.r.t. the outputs.

    ``d_mean`` has shape ``(B, J)``, ``d_log_std`` ``(J,)`` and ``d_value``
    ``(B,)``; omitted partials are treated as zero.
    """
    c = out.cache
    if c is None:
        raise ContractViolation("forward must be called with keep_cache=True before backward")
    B, T, D = c["shape"]
    H = cfg.heads
    dh = D // H
    scale = 1.0 / math.sqrt(dh)
    J = cfg.dof
    g = {}

    d_mean = np.zeros((B, J)) if d_mean is None else np.asarray(d_mean, dtype=float)
    d_value = np.zeros(B) if d_value is None else np.asarray(d_value, dtype=float)
    g["log_std"] = np.zeros(J) if d_log_std is None else np.asarray(d_log_std, dtype=float).copy()

    dm = d_mean * cfg.bound * (1.0 - c["th"] ** 2)
    g["actor.w2"] = c["ea"].T @ dm
    g["actor.b2"] = dm.sum(0)
    dua = (dm @ params["actor.w2"].T) * elu_grad_from_output(c["ea"])
    g["actor.w1"] = c["z"].T @ dua
    g["actor.b1"] = dua.sum(0)
    dz = dua @ params["actor.w1"].T

    dv = d_value[:, None]
    g["critic.w2"] = c["ec"].T @ dv
    g["critic.b2"] = dv.sum(0)
    duc = (dv @ params["critic.w2"].T) * elu_grad_from_output(c["ec"])
    g["critic.w1"] = c["z"].T @ duc
    g["critic.b1"] = duc.sum(0)
    dz = dz + duc @ params["critic.w1"].T

    dx0, g["final_ln.g"], g["final_ln.b"] = _ln_bwd(dz, params["final_ln.g"], c["lnf"])
    dx = np.zeros((B, T, D))
    dx[:, 0] = dx0

    for l in reversed(range(cfg.layers)):
        p = f"layer{l}."
        lc = c["layers"][l]
        # feed-forward residual
        df = dx.reshape(B * T, D)
        g[p + "ff.w2"] = lc["eu"].T @ df
        g[p + "ff.b2"] = df.sum(0)
        du = (df @ params[p + "ff.w2"].T) * elu_grad_from_output(lc["eu"])
        g[p + "ff.w1"] = lc["h2"].T @ du
        g[p + "ff.b1"] = du.sum(0)
        dh2 = (du @ params[p + "ff.w1"].T).reshape(B, T, D)
        dln2, g[p + "ln2.g"], g[p + "ln2.b"] = _ln_bwd(dh2, params[p + "ln2.g"], lc["ln2"])
        dx = dx + dln2
        # attention residual
        da = dx.reshape(B * T, D)
        g[p + "attn.wo"] = lc["o"].T @ da
        g[p + "attn.bo"] = da.sum(0)
        do = (da @ params[p + "attn.wo"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att, q, k, v = lc["att"], lc["q"], lc["k"], lc["v"]
        datt = do @ v.transpose(0, 1, 3, 2)
        dvv = att.transpose(0, 1, 3, 2) @ do
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        h2d = lc["h"]
        dh_total = np.zeros((B * T, D))
        for name, dproj in (("q", dq), ("k", dk), ("v", dvv)):
            d2 = dproj.transpose(0, 2, 1, 3).reshape(B * T, D)
            g[p + f"attn.w{name}"] = h2d.T @ d2
            g[p + f"attn.b{name}"] = d2.sum(0)
            dh_total += d2 @ params[p + f"attn.w{name}"].T
        dln1, g[p + "ln1.g"], g[p + "ln1.b"] = _ln_bwd(dh_total.reshape(B, T, D), params[p + "ln1.g"], lc["ln1"])
        dx = dx + dln1

    obs = c["obs"]
    g["embed.key.w"] = normalized_keypoint(cfg, obs.keypoint).T @ dx[:, 0]
    g["embed.key.b"] = dx[:, 0].sum(0)
    dxj = dx[:, 1:]
    W = obs.joints.shape[-1]
    g["embed.joint.w"] = obs.joints.reshape(-1, W).T @ dxj.reshape(-1, D)
    g["embed.joint.b"] = dxj.sum((0, 1))
    g["embed.pos"] = dxj.sum(0)

    for name, arr in g.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite gradient for {name}")
    return {name: g[name] for name in params}


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return -np.sum(0.5 * z * z + log_std + 0.5 * LOG_2PI, axis=-1)


def gaussian_entropy(log_std):
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def sample_gaussian(mean, log_std, rng):
    """Draw from the diagonal Gaussian; returns ``(sample, log_prob)`` without clipping.

    ``rng`` is a generator, an integer seed, or a sequence of generators
    (one per batch row).
    """
    mean = np.asarray(mean, dtype=float)
    if isinstance(rng, (list, tuple)):
        eps = np.stack([g.standard_normal(mean.shape[-1]) for g in rng])
    else:
        g = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        eps = g.standard_normal(mean.shape)
    x = mean + np.exp(log_std) * eps
    return x, gaussian_log_prob(x, mean, log_std)


def sample_action(mean, log_std, rng, bound=None):
    """Sample, then clip to ``[-bound, bound]``; the log-probability is that of the unclipped draw."""
    x, logp = sample_gaussian(mean, log_std, rng)
    if bound is not None:
        x = np.clip(x, -bound, bound)
    return x, logp


def act(cfg: PolicyConfig, params: dict, obs: Observation):
    """Deterministic action (the Gaussian mean) for evaluation."""
    return forward(cfg, obs, params).mean


# --- checkpoints -------------------------------------------------------------

MAGIC = b"SEEKARM\x00"
FORMAT_VERSION = 1


def save_checkpoint(path, cfg: PolicyConfig, params: dict, meta: dict | None = None) -> None:
    """Write a self-checking binary checkpoint.

    Layout: magic, u32 format version, u64 header length, UTF-8 JSON header
    (config, ordered tensor table of name/shape/offset/count, metadata),
    little-endian float64 payload, then a SHA-256 digest of all preceding
    bytes.
    """
    table, chunks, offset = [], [], 0
    for name, shape in param_shapes(cfg).items():
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise ContractViolation(f"{name}: shape {arr.shape}, config expects {shape}")
        table.append({"name": name, "shape": list(shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"config": cfg.model_dump(mode="json"), "tensors": table, "meta": meta or {}},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())


def load_checkpoint(path):
    """Returns ``(config, params, meta)``; raises :class:`CheckpointError` on any corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 + 32 or not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: integrity check failed (checksum mismatch)")
    version, hlen = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + hlen])
    payload = np.frombuffer(body[start + hlen :], dtype="<f8")
    cfg = PolicyConfig.model_validate(header["config"])
    params = {}
    for t in header["tensors"]:
        flat = payload[t["offset"] : t["offset"] + t["count"]]
        if flat.size != t["count"]:
            raise CheckpointError(f"{path}: tensor {t['name']} is truncated")
        params[t["name"]] = flat.astype(np.float64).reshape(t["shape"])
    try:
        validate_params(cfg, params)
    except (ContractViolation, NumericError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return cfg, params, header.get("meta", {})
