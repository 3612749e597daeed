"""Toy diffusion-transformer backbone.

Blocks pair grouped-query joint attention (image queries over concatenated
image and text KV) with either a dense SwiGLU FFN or a sparse MoE layer.
Timestep conditioning enters through zero-initialized modulation, so every
block is an exact identity at initialization. The fused residual /
normalization ops are single tape nodes with hand-derived pullbacks and are
contractually equivalent to their multi-op compositions.

Text is encoded by a deterministic hash embedder; per-layer text key/value
tensors are a pure function of the prompt and are precomputed once per
prompt set, never per denoising step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as nt
from .moe import ExpertBank, moe_forward, swiglu
from .router import ConfigError, RouterConfig, StageId, capacity_schedule, DENSE
from .tensor import DomainError, ShapeError, Tensor


# ---------------------------------------------------------------------------
# fused modulation kernels (one tape node each)


def _expand_mod(m: np.ndarray, like_shape: tuple[int, ...]) -> tuple[np.ndarray, bool]:
    if m.shape == like_shape:
        return m, False
    if len(like_shape) == 3 and m.shape == (like_shape[0], like_shape[2]):
        return m[:, None, :], True
    raise ShapeError(f"modulation shape {m.shape} does not broadcast over "
                     f"{like_shape}")


def fused_gated_residual(x: Tensor, g: Tensor, r: Tensor) -> Tensor:
    """x + tanh(g) * r in one pass; g is (B, d) broadcast over tokens or
    shaped like x. tanh(0) = 0 gates the branch fully off."""
    if r.shape != x.shape:
        raise ShapeError(f"residual shape {r.shape} != {x.shape}")
    gd, expanded = _expand_mod(g.data.astype(np.float64, copy=False), x.shape)
    th = np.tanh(gd)
    xd = x.data.astype(np.float64, copy=False)
    rd = r.data.astype(np.float64, copy=False)
    out = (xd + th * rd).astype(nt._result_dtype(x, g, r))

    def bwd(G):
        dg = G * rd * (1.0 - th * th)
        if expanded:
            dg = dg.sum(axis=1)
        return G, dg, G * th

    return nt.record("fused_gated_residual", (x, g, r), (out,), bwd)[0]


def _ln_stats(xd: np.ndarray, eps: float):
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _ln_bwd(xhat: np.ndarray, inv: np.ndarray, g: np.ndarray) -> np.ndarray:
    gm = g.mean(axis=-1, keepdims=True)
    gx = (g * xhat).mean(axis=-1, keepdims=True)
    return inv * (g - gm - xhat * gx)


def fused_ln_scale(x: Tensor, s: Tensor, eps: float = 1e-6) -> Tensor:
    """LayerNorm(x) * (1 + s) in one pass; s = 0 reduces to plain LayerNorm."""
    sd, expanded = _expand_mod(s.data.astype(np.float64, copy=False), x.shape)
    xhat, inv = _ln_stats(x.data.astype(np.float64, copy=False), eps)
    out = (xhat * (1.0 + sd)).astype(nt._result_dtype(x, s))

    def bwd(G):
        ds = G * xhat
        if expanded:
            ds = ds.sum(axis=1)
        return _ln_bwd(xhat, inv, G * (1.0 + sd)), ds

    return nt.record("fused_ln_scale", (x, s), (out,), bwd)[0]


def fused_gate_res_ln_scale(x: Tensor, g: Tensor, r: Tensor, s: Tensor,
                            eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Gated residual then LayerNorm-scale, one pass.

    Returns (h, m) with h = x + tanh(g) * r (the updated residual stream)
    and m = LayerNorm(h) * (1 + s).
    """
    if r.shape != x.shape:
        raise ShapeError(f"residual shape {r.shape} != {x.shape}")
    gd, g_exp = _expand_mod(g.data.astype(np.float64, copy=False), x.shape)
    sd, s_exp = _expand_mod(s.data.astype(np.float64, copy=False), x.shape)
    th = np.tanh(gd)
    xd = x.data.astype(np.float64, copy=False)
    rd = r.data.astype(np.float64, copy=False)
    h = xd + th * rd
    xhat, inv = _ln_stats(h, eps)
    m = xhat * (1.0 + sd)
    dtype = nt._result_dtype(x, g, r, s)

    def bwd(Gh, Gm):
        ds = Gm * xhat
        if s_exp:
            ds = ds.sum(axis=1)
        dh = Gh + _ln_bwd(xhat, inv, Gm * (1.0 + sd))
        dg = dh * rd * (1.0 - th * th)
        if g_exp:
            dg = dg.sum(axis=1)
        return dh, dg, dh * th, ds

    return nt.record("fused_gate_res_ln_scale", (x, g, r, s),
                     (h.astype(dtype), m.astype(dtype)), bwd)


# ---------------------------------------------------------------------------
# rotary positions (two spatial axes)


def _rope_tables(pos_h, pos_w, d_h: int, base: float = 10000.0):
    if d_h % 4 != 0:
        raise ConfigError(f"head dim {d_h} not divisible by 4")
    quarter = d_h // 4
    freqs = base ** (-np.arange(quarter, dtype=np.float64) / quarter)
    ang_h = np.multiply.outer(np.asarray(pos_h, dtype=np.float64), freqs)
    ang_w = np.multiply.outer(np.asarray(pos_w, dtype=np.float64), freqs)
    ang = np.concatenate([ang_h, ang_w], axis=-1)       # (..., d_h/2)
    ang = np.repeat(ang, 2, axis=-1)                    # pairs share an angle
    return np.cos(ang), np.sin(ang)


def rotate_pairs(t: Tensor) -> Tensor:
    """(x0, x1) -> (-x1, x0) within each adjacent dim pair."""
    x = t.data
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]

    def bwd(g):
        gi = np.empty_like(g)
        gi[..., 1::2] = -g[..., 0::2]
        gi[..., 0::2] = g[..., 1::2]
        return (gi,)

    return nt.record("rotate_pairs", (t,), (out,), bwd)[0]


def rope_2d(x: Tensor, pos_h: int, pos_w: int) -> Tensor:
    """Rotate a (..., d_h) vector by height/width-indexed angles.

    The first half of head dims carries the height axis, the second half
    the width axis; rotation preserves the vector norm, and inner products
    between rotated vectors depend only on position differences.
    """
    cos, sin = _rope_tables(pos_h, pos_w, x.shape[-1])
    c = Tensor(cos, dtype=np.float64)
    s = Tensor(sin, dtype=np.float64)
    if c.shape != x.shape:
        c = nt.broadcast_to(c, x.shape)
        s = nt.broadcast_to(s, x.shape)
    return nt.add(nt.mul(x, c), nt.mul(rotate_pairs(x), s))


def rope_apply_grid(x: Tensor, pos_h: np.ndarray, pos_w: np.ndarray) -> Tensor:
    """Apply per-token rotary angles to (B, S, H, d_h) head vectors."""
    B, S, H, d_h = x.shape
    cos, sin = _rope_tables(pos_h, pos_w, d_h)          # (S, d_h)
    c = nt.broadcast_to(Tensor(cos[None, :, None, :], dtype=np.float64), x.shape)
    s = nt.broadcast_to(Tensor(sin[None, :, None, :], dtype=np.float64), x.shape)
    return nt.add(nt.mul(x, c), nt.mul(rotate_pairs(x), s))


# ---------------------------------------------------------------------------
# attention


def repeat_kv_heads(t: Tensor, n_rep: int) -> Tensor:
    """(B, S, H_kv, d_h) -> (B, S, H_kv * n_rep, d_h) by repetition."""
    if n_rep == 1:
        return t
    B, S, H, D = t.shape
    t = nt.reshape(t, (B, S, H, 1, D))
    t = nt.broadcast_to(t, (B, S, H, n_rep, D))
    return nt.reshape(t, (B, S, H * n_rep, D))


def joint_attention(q: Tensor, k_img: Tensor, v_img: Tensor,
                    k_txt: Tensor | None = None, v_txt: Tensor | None = None,
                    text_mask: np.ndarray | None = None) -> Tensor:
    """Image queries attend over concatenated image and text KV.

    q: (B, S_i, H_q, d_h); k/v img: (B, S_i, H_kv, d_h); text KV optional
    (B, S_t, H_kv, d_h); text_mask is a boolean (B, S_t) validity mask.
    Text contributes no queries, so scores are (S_i, S_i + S_t). Returns
    (B, S_i, H_q * d_h).
    """
    B, S_i, H_q, d_h = q.shape
    H_kv = k_img.shape[2]
    if H_q % H_kv != 0:
        raise ConfigError(f"query heads {H_q} not a multiple of kv heads {H_kv}")
    n_rep = H_q // H_kv

    if k_txt is not None and k_txt.shape[1] > 0:
        k_all = nt.concat([k_img, k_txt], axis=1)
        v_all = nt.concat([v_img, v_txt], axis=1)
        S_t = k_txt.shape[1]
    else:
        k_all, v_all, S_t = k_img, v_img, 0

    k_all = repeat_kv_heads(k_all, n_rep)
    v_all = repeat_kv_heads(v_all, n_rep)

    qh = nt.transpose(q, (0, 2, 1, 3))                  # (B, H_q, S_i, d_h)
    kh = nt.transpose(k_all, (0, 2, 3, 1))              # (B, H_q, d_h, S_kv)
    scores = nt.mul(nt.matmul(qh, kh), 1.0 / math.sqrt(d_h))
    if S_t > 0 and text_mask is not None:
        add = np.zeros((B, 1, 1, S_i + S_t))
        add[:, 0, 0, S_i:] = np.where(np.asarray(text_mask, bool), 0.0, -1e30)
        scores = nt.add(scores, nt.broadcast_to(Tensor(add, dtype=np.float64),
                                                scores.shape))
    attn = nt.softmax(scores, axis=-1)
    out = nt.matmul(attn, nt.transpose(v_all, (0, 2, 1, 3)))  # (B, H_q, S_i, d_h)
    out = nt.transpose(out, (0, 2, 1, 3))
    return nt.reshape(out, (B, S_i, H_q * d_h))


def kv_cache_elements(n_layers: int, seq: int, n_kv_heads: int, head_dim: int) -> int:
    """Per-image KV cache element count: 2 * L * S * H_kv * d_h."""
    return 2 * n_layers * seq * n_kv_heads * head_dim


# ---------------------------------------------------------------------------
# timestep embedding


def sinusoidal_features(t: Tensor, dim: int) -> Tensor:
    """Half sine / half cosine features over log-spaced frequencies.

    t: scalar or (B,) tensor of values in [0, 1]; at t = 0 the sine half is
    exactly 0 and the cosine half exactly 1.
    """
    if dim % 2 != 0:
        raise ConfigError(f"feature dim {dim} must be even")
    vals = t.data if isinstance(t, Tensor) else np.asarray(t)
    if np.any(vals < 0.0) or np.any(vals > 1.0):
        raise DomainError(f"timestep outside [0, 1]: {vals}")
    t = nt.as_tensor(t)
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, math.log(10000.0), half))
    tcol = nt.reshape(t, (t.size, 1))
    args = nt.mul(nt.broadcast_to(tcol, (t.size, half)),
                  nt.broadcast_to(Tensor(freqs[None, :], dtype=np.float64),
                                  (t.size, half)))
    return nt.concat([nt.sin(args), nt.cos(args)], axis=-1)


class TimestepEmbed:
    """Sinusoidal features through a two-layer SiLU MLP."""

    def __init__(self, d_model: int, rng: np.random.Generator, dtype=np.float64):
        self.d_model = d_model
        self.w1 = Tensor(trunc_normal(rng, (d_model, d_model)), requires_grad=True, dtype=dtype)
        self.b1 = Tensor(np.zeros(d_model), requires_grad=True, dtype=dtype)
        self.w2 = Tensor(trunc_normal(rng, (d_model, d_model)), requires_grad=True, dtype=dtype)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True, dtype=dtype)

    def __call__(self, t) -> Tensor:
        feats = sinusoidal_features(t, self.d_model)          # (B, d)
        h = nt.silu(nt.add(nt.matmul(feats, self.w1),
                           nt.broadcast_to(nt.reshape(self.b1, (1, -1)),
                                           (feats.shape[0], self.d_model))))
        return nt.add(nt.matmul(h, self.w2),
                      nt.broadcast_to(nt.reshape(self.b2, (1, -1)),
                                      (feats.shape[0], self.d_model)))

    def named_parameters(self, prefix: str):
        return {f"{prefix}.fc1.weight": self.w1, f"{prefix}.fc1.bias": self.b1,
                f"{prefix}.fc2.weight": self.w2, f"{prefix}.fc2.bias": self.b2}


def timestep_embed(t, d: int, seed: int = 0) -> Tensor:
    """Standalone timestep embedding with weights derived from a seed."""
    emb = TimestepEmbed(d, np.random.default_rng(seed))
    return emb(t)


# ---------------------------------------------------------------------------
# text encoding and text-KV precompute


def hash_token_embedding(token: str, dim: int) -> np.ndarray:
    """Deterministic per-token embedding from a content hash."""
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim) / math.sqrt(dim)


def encode_prompt(prompt: str, dim: int) -> np.ndarray:
    toks = prompt.split()
    if not toks:
        return np.zeros((0, dim))
    return np.stack([hash_token_embedding(tok, dim) for tok in toks])


@dataclass
class TextContext:
    """Per-layer text key/value tensors, fixed for a given prompt set.

    Nothing here depends on the diffusion timestep, so a context computed
    once is reused across every denoising step.
    """

    k_txt: list[Tensor]          # per layer, (B, S_t, H_kv, d_h)
    v_txt: list[Tensor]
    mask: np.ndarray             # (B, S_t) validity for padded positions
    s_t: int
    prompts: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# model


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until inside +-2 std."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_q_heads: int = 4
    n_kv_heads: int = 1
    head_dim: int = 8
    n_experts: int = 4
    expert_hidden: int = 16
    shared_hidden: int | None = None
    dense_hidden: int | None = None
    dense_layers: int = 3
    latent_channels: int = 4
    patch: int = 2
    gate_scale: float = 1.0
    gate_eps: float = 1e-6
    capacity_override: float | None = None
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ConfigError("n_q_heads must be a multiple of n_kv_heads")
        if self.n_q_heads * self.head_dim != self.d_model:
            raise ConfigError("n_q_heads * head_dim must equal d_model")
        if self.head_dim % 4 != 0:
            raise ConfigError("head_dim must be divisible by 4 for 2-axis rope")
        if self.shared_hidden is None:
            self.shared_hidden = self.expert_hidden
        if self.dense_hidden is None:
            self.dense_hidden = self.d_model

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class RouteRecord:
    """Instrumentation record of one routing pass at one layer/step."""

    layer: int
    step: int
    logits: np.ndarray        # (S, E)
    top_indices: np.ndarray   # (E, capacity)
    grid: tuple[int, int]


class Block:
    def __init__(self, cfg: ModelConfig, layer: int, rng: np.random.Generator):
        d, dt = cfg.d_model, cfg.np_dtype
        kv_dim = cfg.n_kv_heads * cfg.head_dim
        p = lambda shape, std=0.02: Tensor(trunc_normal(rng, shape, std),
                                           requires_grad=True, dtype=dt)
        self.layer = layer
        self.cfg = cfg
        self.wq = p((d, d))
        self.wk = p((d, kv_dim))
        self.wv = p((d, kv_dim))
        self.wo = p((d, d))
        self.wk_txt = p((d, kv_dim))
        self.wv_txt = p((d, kv_dim))
        # (sa_shift, sa_scale, sa_gate, ff_scale, ff_gate) from t_emb
        self.mod_w = Tensor(np.zeros((d, 5 * d)), requires_grad=True, dtype=dt)
        self.mod_b = Tensor(np.zeros(5 * d), requires_grad=True, dtype=dt)
        self.dense = layer < cfg.dense_layers
        if self.dense:
            h = cfg.dense_hidden
            self.ffn_w1 = p((h, d))
            self.ffn_w3 = p((h, d))
            self.ffn_w2 = p((d, h))
        else:
            E, h, hs = cfg.n_experts, cfg.expert_hidden, cfg.shared_hidden
            self.router_gate = p((2 * d, E), std=0.006)
            self.bank = ExpertBank(w1=p((E, h, d)), w3=p((E, h, d)),
                                   w2=p((E, d, h)), shared_w1=p((hs, d)),
                                   shared_w3=p((hs, d)), shared_w2=p((d, hs)))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.attn.wq": self.wq, f"{prefix}.attn.wk": self.wk,
               f"{prefix}.attn.wv": self.wv, f"{prefix}.attn.wo": self.wo,
               f"{prefix}.attn.wk_txt": self.wk_txt,
               f"{prefix}.attn.wv_txt": self.wv_txt,
               f"{prefix}.img_mod.weight": self.mod_w,
               f"{prefix}.img_mod.bias": self.mod_b}
        if self.dense:
            out.update({f"{prefix}.ffn.w1": self.ffn_w1,
                        f"{prefix}.ffn.w3": self.ffn_w3,
                        f"{prefix}.ffn.w2": self.ffn_w2})
        else:
            out.update({f"{prefix}.router.gate": self.router_gate,
                        f"{prefix}.moe.w1": self.bank.w1,
                        f"{prefix}.moe.w3": self.bank.w3,
                        f"{prefix}.moe.w2": self.bank.w2,
                        f"{prefix}.moe.shared_w1": self.bank.shared_w1,
                        f"{prefix}.moe.shared_w3": self.bank.shared_w3,
                        f"{prefix}.moe.shared_w2": self.bank.shared_w2})
        return out


def _chunks(m: Tensor, d: int, n: int) -> list[Tensor]:
    return [nt.gather_rows(nt.transpose(m, (1, 0)), np.arange(i * d, (i + 1) * d))
            for i in range(n)]


class MoEDiT:
    """Patchified latent in, velocity out; dense then MoE blocks."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, dt = cfg.d_model, cfg.np_dtype
        in_dim = cfg.latent_channels * cfg.patch * cfg.patch
        self.patch_w = Tensor(trunc_normal(rng, (in_dim, d)), requires_grad=True, dtype=dt)
        self.patch_b = Tensor(np.zeros(d), requires_grad=True, dtype=dt)
        self.time_embed = TimestepEmbed(d, rng, dtype=dt)
        self.blocks = [Block(cfg, i, rng) for i in range(cfg.n_layers)]
        self.final_mod_w = Tensor(np.zeros((d, 2 * d)), requires_grad=True, dtype=dt)
        self.final_mod_b = Tensor(np.zeros(2 * d), requires_grad=True, dtype=dt)
        self.final_proj_w = Tensor(trunc_normal(rng, (d, in_dim)), requires_grad=True, dtype=dt)
        self.final_proj_b = Tensor(np.zeros(in_dim), requires_grad=True, dtype=dt)
        self._text_kv_recomputes = 0

    # -- parameters -------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"patch_embed.weight": self.patch_w,
                  "patch_embed.bias": self.patch_b}
        params.update(self.time_embed.named_parameters("time_embed"))
        for i, blk in enumerate(self.blocks):
            params.update(blk.named_parameters(f"blocks.{i}"))
        params.update({"final_mod.weight": self.final_mod_w,
                       "final_mod.bias": self.final_mod_b,
                       "final_proj.weight": self.final_proj_w,
                       "final_proj.bias": self.final_proj_b})
        return params

    def router_weights(self) -> dict[int, Tensor]:
        return {b.layer: b.router_gate for b in self.blocks if not b.dense}

    # -- text -------------------------------------------------------------

    @property
    def text_kv_recompute_count(self) -> int:
        return self._text_kv_recomputes

    def precompute_text_kv(self, prompts: list[str]) -> TextContext:
        """Project encoder output to per-layer text KV, once per prompt set."""
        self._text_kv_recomputes += 1
        cfg = self.cfg
        d = cfg.d_model
        enc = [encode_prompt(p, d) for p in prompts]
        s_t = max((e.shape[0] for e in enc), default=0)
        B = len(prompts)
        mask = np.zeros((B, s_t), dtype=bool)
        cmat = np.zeros((B, s_t, d))
        for b, e in enumerate(enc):
            mask[b, :e.shape[0]] = True
            cmat[b, :e.shape[0]] = e
        if s_t == 0:
            return TextContext(k_txt=[], v_txt=[], mask=mask, s_t=0,
                               prompts=tuple(prompts))
        c = Tensor(cmat, dtype=cfg.np_dtype)
        ks, vs = [], []
        pos_w = np.arange(s_t)
        pos_h = np.zeros(s_t)
        for blk in self.blocks:
            k = nt.reshape(nt.matmul(c, blk.wk_txt),
                           (B, s_t, cfg.n_kv_heads, cfg.head_dim))
            k = rope_apply_grid(nt.rmsnorm(k), pos_h, pos_w)
            v = nt.reshape(nt.matmul(c, blk.wv_txt),
                           (B, s_t, cfg.n_kv_heads, cfg.head_dim))
            ks.append(k)
            vs.append(v)
        return TextContext(k_txt=ks, v_txt=vs, mask=mask, s_t=s_t,
                           prompts=tuple(prompts))

    # -- forward ----------------------------------------------------------

    def patchify(self, z: Tensor) -> tuple[Tensor, tuple[int, int]]:
        B, C, H, W = z.shape
        p = self.cfg.patch
        if H % p or W % p:
            raise ShapeError(f"latent {H}x{W} not divisible by patch {p}")
        gh, gw = H // p, W // p
        t = nt.reshape(z, (B, C, gh, p, gw, p))
        t = nt.transpose(t, (0, 2, 4, 1, 3, 5))
        return nt.reshape(t, (B, gh * gw, C * p * p)), (gh, gw)

    def unpatchify(self, tokens: Tensor, grid: tuple[int, int],
                   shape: tuple[int, ...]) -> Tensor:
        B, C, H, W = shape
        p = self.cfg.patch
        gh, gw = grid
        t = nt.reshape(tokens, (B, gh, gw, C, p, p))
        t = nt.transpose(t, (0, 3, 1, 4, 2, 5))
        return nt.reshape(t, (B, C, H, W))

    def capacity_factor_for(self, layer: int, stage: StageId) -> float:
        if self.cfg.capacity_override is not None:
            return self.cfg.capacity_override
        cf = capacity_schedule(max(layer, 3), stage,
                               n_layers=max(32, self.cfg.n_layers))
        assert cf is not DENSE
        return cf

    def forward(self, z_t: Tensor, t, ctx: TextContext | None,
                stage: StageId, capture_step: int | None = None):
        """Predict the velocity for a noisy latent.

        Returns (velocity, aux) where aux carries tape-connected router
        logits per MoE layer plus routing records when capture_step is set.
        """
        cfg = self.cfg
        B = z_t.shape[0]
        tokens, (gh, gw) = self.patchify(z_t)
        x = nt.add(nt.matmul(tokens, self.patch_w),
                   nt.broadcast_to(nt.reshape(self.patch_b, (1, 1, -1)),
                                   (B, gh * gw, cfg.d_model)))
        t_arr = np.full(B, float(t)) if np.isscalar(t) else np.asarray(t, dtype=np.float64)
        t_vec = self.time_embed(Tensor(t_arr, dtype=cfg.np_dtype))
        pos_h = np.repeat(np.arange(gh), gw)
        pos_w = np.tile(np.arange(gw), gh)

        aux = {"router_logits": [], "decisions": [], "records": []}
        for blk in self.blocks:
            mod = nt.add(nt.matmul(t_vec, blk.mod_w),
                         nt.broadcast_to(nt.reshape(blk.mod_b, (1, -1)),
                                         (B, 5 * cfg.d_model)))
            sa_shift, sa_scale, sa_gate, ff_scale, ff_gate = [
                nt.transpose(c, (1, 0)) for c in _chunks(mod, cfg.d_model, 5)]

            a_in = nt.add(fused_ln_scale(x, sa_scale),
                          nt.broadcast_to(nt.reshape(sa_shift, (B, 1, -1)), x.shape))
            r_attn = self._attention(blk, a_in, ctx, pos_h, pos_w)

            if blk.dense:
                h, f_in = fused_gate_res_ln_scale(x, sa_gate, r_attn, ff_scale)
                f2 = nt.reshape(f_in, (B * gh * gw, cfg.d_model))
                f_out = swiglu(f2, blk.ffn_w1, blk.ffn_w3, blk.ffn_w2)
                x = fused_gated_residual(h, ff_gate, nt.reshape(f_out, x.shape))
            else:
                h = fused_gated_residual(x, sa_gate, r_attn)
                scale = 1.0 / math.sqrt(blk.layer + 1)
                x_norm = nt.mul(nt.rmsnorm(h), scale)
                x_mod = nt.mul(x_norm,
                               nt.add(nt.broadcast_to(
                                   nt.reshape(ff_scale, (B, 1, -1)), h.shape), 1.0))
                rcfg = RouterConfig(d_model=cfg.d_model, n_experts=cfg.n_experts,
                                    capacity_factor=self.capacity_factor_for(
                                        blk.layer, stage),
                                    gate_scale=cfg.gate_scale,
                                    gate_eps=cfg.gate_eps, seed=cfg.seed)
                moe_out, decisions, routing = moe_forward(
                    h, x_norm, x_mod, t_vec, rcfg, blk.bank, blk.router_gate,
                    return_routing=True)
                aux["router_logits"].append(routing["logits"])
                aux["decisions"].append((blk.layer, decisions))
                if capture_step is not None:
                    for dec in decisions:
                        aux["records"].append(RouteRecord(
                            layer=blk.layer, step=capture_step,
                            logits=dec.logits, top_indices=dec.top_indices,
                            grid=(gh, gw)))
                x = fused_gated_residual(h, ff_gate, moe_out)

        fmod = nt.add(nt.matmul(t_vec, self.final_mod_w),
                      nt.broadcast_to(nt.reshape(self.final_mod_b, (1, -1)),
                                      (B, 2 * cfg.d_model)))
        f_shift, f_scale = [nt.transpose(c, (1, 0))
                            for c in _chunks(fmod, cfg.d_model, 2)]
        y = nt.add(fused_ln_scale(x, f_scale),
                   nt.broadcast_to(nt.reshape(f_shift, (B, 1, -1)), x.shape))
        out = nt.add(nt.matmul(y, self.final_proj_w),
                     nt.broadcast_to(nt.reshape(self.final_proj_b, (1, 1, -1)),
                                     (B, gh * gw, self.patch_w.shape[0])))
        vel = self.unpatchify(out, (gh, gw), z_t.shape)
        return vel, aux

    def _attention(self, blk: Block, a_in: Tensor, ctx: TextContext | None,
                   pos_h: np.ndarray, pos_w: np.ndarray) -> Tensor:
        cfg = self.cfg
        B, S, _ = a_in.shape
        q = nt.reshape(nt.matmul(a_in, blk.wq), (B, S, cfg.n_q_heads, cfg.head_dim))
        k = nt.reshape(nt.matmul(a_in, blk.wk), (B, S, cfg.n_kv_heads, cfg.head_dim))
        v = nt.reshape(nt.matmul(a_in, blk.wv), (B, S, cfg.n_kv_heads, cfg.head_dim))
        q = rope_apply_grid(nt.rmsnorm(q), pos_h, pos_w)
        k = rope_apply_grid(nt.rmsnorm(k), pos_h, pos_w)
        if ctx is not None and ctx.s_t > 0:
            attn = joint_attention(q, k, v, ctx.k_txt[blk.layer],
                                   ctx.v_txt[blk.layer], ctx.mask)
        else:
            attn = joint_attention(q, k, v)
        return nt.matmul(attn, blk.wo)
