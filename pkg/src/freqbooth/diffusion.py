"""Generation branch: noise schedule, epsilon-predicting denoiser built from
adaptive-attention blocks with an additive frequency-control residual,
deterministic DDIM sampling, and classifier-free guidance.

The denoiser is a small residual token network over flattened latent
positions.  Per block:

    h <- h + time_features @ time_proj + text_embed[text_id]
    h <- h + adaptive_attention(h, identity_tokens_k, scale)
    h <- h + ctrl_gate * (control_tokens @ ctrl_proj)      (if control given)
    h <- h + tanh(h @ ff_w1) @ ff_w2

with a linear in/out projection and a fixed additive position code.  Forward
and backward passes are hand-written; the test suite checks every gradient
against central finite differences.

Parameters are grouped into three sets with distinct training stages:
`backbone` (stage 0 pretraining, frozen afterwards), `identity_adapter`
(stage 1: identity key/value projections, per-block feature heads, pooler),
and `control` (stage 2: control projections and their zero-initialized
gates).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attention import AdaptiveAttentionWeights, attention_backward, attention_forward
from .codes import grid_position_codes, time_features
from .config import ModelConfig
from .dct_freq import MaskKind, make_control_signal
from .reference_encoder import (FrozenEncoders, ProjectionWeights, ReferenceCache,
                                decode_latent, encode_latent, reference_forward)
from .tensor_core import RngState, assert_all_finite


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseSchedule:
    timesteps: int
    betas: np.ndarray       # length T; betas[i] applies at step t = i + 1
    alphas: np.ndarray      # 1 - betas
    alpha_bars: np.ndarray  # length T + 1; alpha_bars[0] == 1.0

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [0, {self.timesteps}]")
        return float(self.alpha_bars[t])


def linear_schedule(timesteps: int) -> NoiseSchedule:
    """Linear beta schedule; endpoints are 1e-4..0.02 at T >= 1000 and are
    scaled by 500/T at shorter horizons.

    The scaling keeps the terminal alpha_bar below 1e-2 (signal essentially
    destroyed at the last step) at any step count without overshooting: a
    vanishingly small terminal alpha_bar makes the x0 estimate at the first
    sampling steps hypersensitive to prediction error, since DDIM divides
    by its square root.
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    scale = max(1.0, 500.0 / timesteps)
    betas = np.linspace(1e-4 * scale, 0.02 * scale, timesteps)
    if betas[-1] >= 1.0:
        raise ValueError(f"schedule too short: terminal beta {betas[-1]:.3f} >= 1")
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(timesteps=timesteps, betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars)


def forward_noise(z0: np.ndarray, t: int, eps: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    """Noising step: sqrt(a_bar_t) z0 + sqrt(1 - a_bar_t) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {z0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic update via the predicted clean latent.

    x0 = (z_t - sqrt(1 - a_bar_t) eps) / sqrt(a_bar_t)
    z  = sqrt(a_bar_prev) x0 + sqrt(1 - a_bar_prev) eps
    """
    if not 0 <= t_prev <= t:
        raise ValueError(f"need t >= t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_p = schedule.alpha_bar(t_prev)
    if ab_t <= 0.0:
        raise FloatingPointError(f"alpha_bar({t}) is zero; cannot recover x0")
    x0 = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p) * eps_hat


def cfg_combine(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Guided prediction w * cond + (1 - w) * uncond (exact at w in {0, 1})."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch: {eps_cond.shape} vs {eps_uncond.shape}")
    if w == 1.0:
        return eps_cond
    if w == 0.0:
        return eps_uncond
    return w * eps_cond + (1.0 - w) * eps_uncond


@dataclass
class GuidanceConfig:
    w_guidance: float = 3.0

    def __post_init__(self):
        if not np.isfinite(self.w_guidance) or self.w_guidance < 0:
            raise ValueError(f"guidance scale must be finite and >= 0, got {self.w_guidance}")


def sampling_timesteps(timesteps: int, steps: int) -> np.ndarray:
    """Ascending unique integer grid 0 .. T with ~`steps` strides."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    steps = min(steps, timesteps)
    return np.unique(np.round(np.linspace(0.0, timesteps, steps + 1)).astype(int))


# ---------------------------------------------------------------------------
# weights


@dataclass
class BlockWeights:
    attn: AdaptiveAttentionWeights
    ff_w1: np.ndarray       # (d_model, d_ff)
    ff_w2: np.ndarray       # (d_ff, d_model)
    time_proj: np.ndarray   # (d_time, d_model)
    time_gain: np.ndarray   # (d_time, d_model); residual gain 1 + tfeat @ time_gain
    text_embed: np.ndarray  # (n_text + 1, d_model); last row is the null text
    id_head: np.ndarray     # (d_id, d_id) per-block identity feature head
    ctrl_proj: np.ndarray   # (latent_channels, d_model)
    ctrl_gate: np.ndarray   # (1,) zero-initialized gate


PARAM_SETS = ("backbone", "identity_adapter", "control")

_SET_BY_LEAF = {
    "in_proj": "backbone", "out_proj": "backbone",
    "attn.w_query": "backbone", "attn.w_key": "backbone", "attn.w_value": "backbone",
    "ff_w1": "backbone", "ff_w2": "backbone",
    "time_proj": "backbone", "time_gain": "backbone", "text_embed": "backbone",
    "attn.w_key_id": "identity_adapter", "attn.w_value_id": "identity_adapter",
    "id_head": "identity_adapter",
    "proj.queries": "identity_adapter", "proj.w_key": "identity_adapter",
    "proj.w_value": "identity_adapter",
    "ctrl_proj": "control", "ctrl_gate": "control",
}


def param_set_of(name: str) -> str:
    leaf = name.split(".", 2)[-1] if name.startswith("blocks.") else name
    try:
        return _SET_BY_LEAF[leaf]
    except KeyError:
        raise KeyError(f"unknown parameter {name}") from None


@dataclass
class ModelWeights:
    config: ModelConfig
    in_proj: np.ndarray
    out_proj: np.ndarray
    blocks: list[BlockWeights]
    projection: ProjectionWeights
    pos_code: np.ndarray = field(repr=False)  # fixed buffer, not a parameter
    completed_stages: list[int] = field(default_factory=list)

    def params(self) -> dict[str, np.ndarray]:
        out = {"in_proj": self.in_proj, "out_proj": self.out_proj,
               "proj.queries": self.projection.queries,
               "proj.w_key": self.projection.w_key,
               "proj.w_value": self.projection.w_value}
        for k, blk in enumerate(self.blocks):
            p = f"blocks.{k}"
            out[f"{p}.attn.w_query"] = blk.attn.w_query
            out[f"{p}.attn.w_key"] = blk.attn.w_key
            out[f"{p}.attn.w_value"] = blk.attn.w_value
            out[f"{p}.attn.w_key_id"] = blk.attn.w_key_id
            out[f"{p}.attn.w_value_id"] = blk.attn.w_value_id
            out[f"{p}.ff_w1"] = blk.ff_w1
            out[f"{p}.ff_w2"] = blk.ff_w2
            out[f"{p}.time_proj"] = blk.time_proj
            out[f"{p}.time_gain"] = blk.time_gain
            out[f"{p}.text_embed"] = blk.text_embed
            out[f"{p}.id_head"] = blk.id_head
            out[f"{p}.ctrl_proj"] = blk.ctrl_proj
            out[f"{p}.ctrl_gate"] = blk.ctrl_gate
        return out

    def names_in_set(self, set_name: str) -> list[str]:
        return sorted(n for n in self.params() if param_set_of(n) == set_name)

    def checksum(self, set_name: str) -> str:
        """SHA-256 over the set's parameter bytes (bitwise freeze marker)."""
        params = self.params()
        digest = hashlib.sha256()
        for name in self.names_in_set(set_name):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(params[name]).tobytes())
        return digest.hexdigest()

    def id_heads(self) -> list[np.ndarray]:
        return [blk.id_head for blk in self.blocks]


def init_weights(config: ModelConfig, seed: int) -> ModelWeights:
    """Fresh weights: random backbone, pooler, and identity projections;
    zero control gates (frequency control is inert until stage 2 opens it).

    The identity branch starts random rather than zero because it is trained
    from scratch in its own stage, and a zero value path would silence every
    upstream adapter gradient at the start of that stage.
    """
    root = RngState(seed).derive("weights-init")

    def draw(tag, shape, scale):
        return root.derive(tag).normal(shape) * scale

    c, d, dff = config.latent_channels, config.d_model, config.d_ff
    blocks = []
    for k in range(config.n_blocks):
        attn = AdaptiveAttentionWeights(
            w_query=draw(f"b{k}.wq", (d, d), 1.0 / np.sqrt(d)),
            w_key=draw(f"b{k}.wk", (d, d), 1.0 / np.sqrt(d)),
            w_value=draw(f"b{k}.wv", (d, d), 1.0 / np.sqrt(d)),
            # wide value init: early adapter training first absorbs the random
            # branch into the frozen backbone, then mines it for identity
            w_key_id=draw(f"b{k}.wkid", (config.d_id, d), 0.2 / np.sqrt(config.d_id)),
            w_value_id=draw(f"b{k}.wvid", (config.d_id, d), 0.8 / np.sqrt(config.d_id)),
            heads=config.heads,
        )
        blocks.append(BlockWeights(
            attn=attn,
            ff_w1=draw(f"b{k}.ff1", (d, dff), 1.0 / np.sqrt(d)),
            ff_w2=draw(f"b{k}.ff2", (dff, d), 0.5 / np.sqrt(dff)),
            time_proj=draw(f"b{k}.time", (config.d_time, d), 0.3),
            # zero so every residual gain starts at exactly 1; the pretrain
            # learns how strongly each channel's injections should scale
            # with the noise level (the useful correction magnitude spans
            # orders of magnitude across timesteps)
            time_gain=np.zeros((config.d_time, d)),
            text_embed=draw(f"b{k}.text", (config.n_text + 1, d), 0.3),
            # identity features start large so the zero-initialized injection
            # matrices need only small magnitudes to act; Adam moves weights
            # at ~lr per step, so the achievable injection strength within a
            # fixed step budget scales directly with this amplification
            id_head=draw(f"b{k}.idh", (config.d_id, config.d_id), 7.0 / np.sqrt(config.d_id)),
            ctrl_proj=draw(f"b{k}.ctrl", (c, d), 1.0 / np.sqrt(c)),
            ctrl_gate=np.zeros(1),
        ))
    projection = ProjectionWeights(
        # large queries sharpen the pooler's softmax so each identity token
        # starts near a distinct patch rather than the patch average
        queries=draw("proj.q", (config.n_query, config.d_query), 2.0),
        w_key=draw("proj.k", (config.d_tok, config.d_query), 1.0 / np.sqrt(config.d_tok)),
        w_value=draw("proj.v", (config.d_tok, config.d_id), 7.0 / np.sqrt(config.d_tok)),
    )
    hw = config.latent_hw
    return ModelWeights(
        config=config,
        in_proj=draw("in_proj", (c, d), 1.0 / np.sqrt(c)),
        out_proj=draw("out_proj", (d, c), 0.5 / np.sqrt(d)),
        blocks=blocks,
        projection=projection,
        pos_code=grid_position_codes(hw, hw, config.d_model),
    )


# ---------------------------------------------------------------------------
# denoiser forward / backward


def latent_to_seq(latent: np.ndarray) -> np.ndarray:
    """(C, h, w) -> (h*w, C) row-major token order."""
    c = latent.shape[0]
    return latent.reshape(c, -1).T


def seq_to_latent(seq: np.ndarray, hw: int) -> np.ndarray:
    return seq.T.reshape(-1, hw, hw)


def denoiser_forward(w: ModelWeights, z_seq: np.ndarray, t: int,
                     text_id, identity, ctrl_seq, scale: float):
    """Predict noise tokens; returns (eps_seq, cache).

    text_id None selects the reserved null-text row; identity None (or
    scale 0) skips every cross-attention summand; ctrl_seq None skips the
    control residuals.
    """
    cfg = w.config
    tid = cfg.null_text_id if text_id is None else int(text_id)
    if not 0 <= tid <= cfg.n_text:
        raise ValueError(f"text id {tid} outside [0, {cfg.n_text}]")
    tfeat = time_features(t, cfg.d_time, cfg.timesteps)
    h = z_seq @ w.in_proj + w.pos_code
    caches = []
    for k, blk in enumerate(w.blocks):
        cond = tfeat @ blk.time_proj + blk.text_embed[tid]
        h1 = h + cond
        gain = 1.0 + tfeat @ blk.time_gain  # per-channel residual scale
        ident_k = identity[k] if identity is not None else None
        attn_out, acache = attention_forward(h1, ident_k, blk.attn, scale)
        h2 = h1 + gain * attn_out
        if ctrl_seq is not None:
            fields = ctrl_seq @ blk.ctrl_proj
            h3 = h2 + blk.ctrl_gate[0] * (gain * fields)
        else:
            fields = None
            h3 = h2
        ff_act = np.tanh(h3 @ blk.ff_w1)
        h = h3 + ff_act @ blk.ff_w2
        caches.append(dict(tfeat=tfeat, tid=tid, acache=acache, h3=h3,
                           gain=gain, attn_out=attn_out,
                           fields=fields, ff_act=ff_act))
    eps_seq = h @ w.out_proj
    cache = dict(w=w, z_seq=z_seq, h_final=h, ctrl_seq=ctrl_seq, caches=caches)
    return eps_seq, cache


def denoiser_backward(deps_seq: np.ndarray, cache):
    """Gradients for every denoiser parameter plus the identity features.

    Returns (grads, didentity) where grads maps registry names to arrays and
    didentity is a per-block list (None entries where no cross term ran).
    """
    w: ModelWeights = cache["w"]
    ctrl_seq = cache["ctrl_seq"]
    grads: dict[str, np.ndarray] = {}
    grads["out_proj"] = cache["h_final"].T @ deps_seq
    dh = deps_seq @ w.out_proj.T
    didentity: list = [None] * len(w.blocks)

    for k in reversed(range(len(w.blocks))):
        blk, c = w.blocks[k], cache["caches"][k]
        p = f"blocks.{k}"
        # feed-forward residual
        grads[f"{p}.ff_w2"] = c["ff_act"].T @ dh
        dff_act = dh @ blk.ff_w2.T
        dff_pre = dff_act * (1.0 - c["ff_act"] ** 2)
        grads[f"{p}.ff_w1"] = c["h3"].T @ dff_pre
        dh3 = dh + dff_pre @ blk.ff_w1.T
        # control residual (scaled by the shared time gain)
        gain = c["gain"]
        if c["fields"] is not None:
            scaled = gain * c["fields"]
            grads[f"{p}.ctrl_gate"] = np.array([np.sum(dh3 * scaled)])
            grads[f"{p}.ctrl_proj"] = ctrl_seq.T @ (blk.ctrl_gate[0] * (gain * dh3))
            dgain = blk.ctrl_gate[0] * (dh3 * c["fields"]).sum(axis=0)
        else:
            grads[f"{p}.ctrl_gate"] = np.zeros(1)
            grads[f"{p}.ctrl_proj"] = np.zeros_like(blk.ctrl_proj)
            dgain = np.zeros(gain.shape[0])
        dh2 = dh3
        # adaptive attention residual
        dgain += (dh2 * c["attn_out"]).sum(axis=0)
        dh1_attn, dident, agrads = attention_backward(gain * dh2, c["acache"])
        dh1 = dh2 + dh1_attn
        didentity[k] = dident
        for leaf, g in agrads.items():
            grads[f"{p}.attn.{leaf}"] = g
        # timestep / text conditioning (broadcast add over the sequence)
        dcond = dh1.sum(axis=0)
        grads[f"{p}.time_gain"] = np.outer(c["tfeat"], dgain)
        grads[f"{p}.time_proj"] = np.outer(c["tfeat"], dcond)
        demb = np.zeros_like(blk.text_embed)
        demb[c["tid"]] = dcond
        grads[f"{p}.text_embed"] = demb
        dh = dh1
    grads["in_proj"] = cache["z_seq"].T @ dh
    return grads, didentity


def predict_eps(w: ModelWeights, z_t: np.ndarray, t: int, text_id=None,
                identity=None, ctrl: np.ndarray | None = None,
                scale: float = 0.0) -> np.ndarray:
    """Noise prediction on a (C, h, w) latent; conditions are all optional."""
    hw = w.config.latent_hw
    if z_t.shape != (w.config.latent_channels, hw, hw):
        raise ValueError(
            f"latent shape {z_t.shape} does not match config "
            f"({w.config.latent_channels}, {hw}, {hw})"
        )
    ctrl_seq = latent_to_seq(ctrl) if ctrl is not None else None
    eps_seq, _ = denoiser_forward(w, latent_to_seq(z_t), t, text_id, identity,
                                  ctrl_seq, scale)
    return assert_all_finite(seq_to_latent(eps_seq, hw), "noise prediction")


# ---------------------------------------------------------------------------
# sampling


def sample(w: ModelWeights, enc: FrozenEncoders, schedule: NoiseSchedule,
           rng: RngState, ref_img: np.ndarray | None = None, text_id=None,
           mask_kind: MaskKind | None = None, steps: int = 20,
           guidance: float = 3.0, identity_scale: float = 0.4,
           force_both_branches: bool = False):
    """DDIM sampling with classifier-free guidance.

    Identity features and the frequency control signal are computed once
    from the reference image and held fixed across all steps.  Returns
    (image, info) where image is the decoded (3, H, W) float array
    (unclamped) and info records the run inputs.

    `force_both_branches` evaluates the unconditional branch even when the
    guidance weight makes it a no-op (test hook for the w == 1 identity).
    """
    GuidanceConfig(w_guidance=guidance)
    cfg = w.config
    if schedule.timesteps != cfg.timesteps:
        raise ValueError(
            f"schedule has {schedule.timesteps} steps but config expects {cfg.timesteps}"
        )
    identity = None
    if ref_img is not None and identity_scale != 0.0:
        identity = reference_forward(ref_img, w.projection, w.id_heads(), enc,
                                     cache=ReferenceCache())
    ctrl = None
    if mask_kind is not None:
        if ref_img is None:
            raise ValueError("frequency conditioning requires a reference image")
        ctrl = make_control_signal(encode_latent(ref_img, enc), mask_kind)

    z = rng.normal((cfg.latent_channels, cfg.latent_hw, cfg.latent_hw))
    taus = sampling_timesteps(schedule.timesteps, steps)
    for m in range(len(taus) - 1, 0, -1):
        t, t_prev = int(taus[m]), int(taus[m - 1])
        eps_cond = predict_eps(w, z, t, text_id, identity, ctrl, identity_scale)
        if guidance == 1.0 and not force_both_branches:
            eps_hat = eps_cond
        else:
            eps_uncond = predict_eps(w, z, t, None, None, None, 0.0)
            eps_hat = cfg_combine(eps_cond, eps_uncond, guidance)
        z = ddim_step(z, eps_hat, t, t_prev, schedule)

    image = decode_latent(z, enc)
    info = dict(steps=int(len(taus) - 1), guidance=float(guidance),
                identity_scale=float(identity_scale),
                mask=None if mask_kind is None else MaskKind(mask_kind).value,
                text_id=None if text_id is None else int(text_id),
                used_reference=ref_img is not None and
                (identity_scale != 0.0 or mask_kind is not None))
    return image, info
