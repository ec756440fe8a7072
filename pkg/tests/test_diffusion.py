import numpy as np
import pytest

from freqbooth.config import tiny_config
from freqbooth.dct_freq import MaskKind
from freqbooth.diffusion import (GuidanceConfig, cfg_combine, ddim_step,
                                 forward_noise, init_weights, latent_to_seq,
                                 linear_schedule, param_set_of, predict_eps,
                                 sample, sampling_timesteps, seq_to_latent)
from freqbooth.reference_encoder import build_encoders
from freqbooth.tensor_core import RngState


@pytest.fixture(scope="module")
def cfg():
    return tiny_config()


@pytest.fixture(scope="module")
def enc(cfg):
    return build_encoders(cfg)


@pytest.fixture(scope="module")
def schedule(cfg):
    return linear_schedule(cfg.timesteps)


def rand_latent(cfg, seed):
    return RngState(seed).derive("latent").normal(
        (cfg.latent_channels, cfg.latent_hw, cfg.latent_hw))


# ---------------------------------------------------------------------------
# schedule


@pytest.mark.parametrize("steps", [50, 200, 1000])
def test_schedule_destroys_signal_by_the_final_step(steps):
    sched = linear_schedule(steps)
    assert sched.alpha_bar(0) == 1.0
    assert sched.alpha_bar(steps) < 0.01
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert np.all((sched.betas > 0) & (sched.betas < 1))


def test_schedule_validation():
    with pytest.raises(ValueError):
        linear_schedule(0)
    sched = linear_schedule(50)
    with pytest.raises(ValueError):
        sched.alpha_bar(51)
    with pytest.raises(ValueError):
        sched.alpha_bar(-1)


# ---------------------------------------------------------------------------
# forward noising


def test_no_noise_at_step_zero(cfg, schedule):
    z0 = rand_latent(cfg, 0)
    eps = rand_latent(cfg, 1)
    assert np.array_equal(forward_noise(z0, 0, eps, schedule), z0)


def test_pure_noise_scaling_for_zero_signal(cfg, schedule):
    eps = rand_latent(cfg, 2)
    t = 30
    want = np.sqrt(1.0 - schedule.alpha_bar(t)) * eps
    got = forward_noise(np.zeros_like(eps), t, eps, schedule)
    assert np.max(np.abs(got - want)) <= 1e-15


def test_forward_noise_matches_elementwise_oracle(cfg, schedule):
    z0 = rand_latent(cfg, 3)
    eps = rand_latent(cfg, 4)
    t = 17
    got = forward_noise(z0, t, eps, schedule)
    ab = schedule.alpha_bar(t)
    for idx in np.ndindex(z0.shape):
        want = np.sqrt(ab) * z0[idx] + np.sqrt(1.0 - ab) * eps[idx]
        assert abs(got[idx] - want) <= 1e-12


def test_forward_noise_shape_check(cfg, schedule):
    with pytest.raises(ValueError, match="mismatch"):
        forward_noise(np.zeros((4, 2, 2)), 1, np.zeros((4, 2, 3)), schedule)


# ---------------------------------------------------------------------------
# deterministic stepping


def test_true_noise_inverts_to_clean_latent(cfg, schedule):
    z0 = rand_latent(cfg, 5)
    eps = rand_latent(cfg, 6)
    for t in (1, 10, cfg.timesteps):
        z_t = forward_noise(z0, t, eps, schedule)
        assert np.max(np.abs(ddim_step(z_t, eps, t, 0, schedule) - z0)) <= 1e-9


def test_degenerate_step_is_identity(cfg, schedule):
    z = rand_latent(cfg, 7)
    eps = rand_latent(cfg, 8)
    assert np.max(np.abs(ddim_step(z, eps, 25, 25, schedule) - z)) <= 1e-12


def test_zero_prediction_follows_closed_form(cfg, schedule):
    z = rand_latent(cfg, 9)
    start = z.copy()
    taus = [40, 31, 17, 6, 0]
    for t, t_prev in zip(taus[:-1], taus[1:]):
        z = ddim_step(z, np.zeros_like(z), t, t_prev, schedule)
    want = start * np.sqrt(schedule.alpha_bar(0) / schedule.alpha_bar(40))
    assert np.max(np.abs(z - want)) <= 1e-12


def test_step_ordering_is_enforced(cfg, schedule):
    z = rand_latent(cfg, 10)
    with pytest.raises(ValueError):
        ddim_step(z, z, 5, 6, schedule)


def test_sampling_grid_is_strictly_ascending():
    taus = sampling_timesteps(200, 20)
    assert taus[0] == 0 and taus[-1] == 200
    assert np.all(np.diff(taus) > 0)
    full = sampling_timesteps(50, 50)
    assert np.array_equal(full, np.arange(51))
    dense = sampling_timesteps(50, 500)  # clamps to the schedule length
    assert np.array_equal(dense, np.arange(51))
    with pytest.raises(ValueError):
        sampling_timesteps(50, 0)


# ---------------------------------------------------------------------------
# guidance


def test_guidance_endpoints_are_exact():
    rng = np.random.default_rng(0)
    cond, uncond = rng.normal(size=(2, 4, 3, 3))
    assert cfg_combine(cond, uncond, 1.0) is cond
    assert cfg_combine(cond, uncond, 0.0) is uncond


def test_guidance_scalar_blend():
    cond = np.array([1.0])
    uncond = np.array([0.0])
    assert cfg_combine(cond, uncond, 7.5)[0] == 7.5


def test_guidance_validation():
    assert GuidanceConfig().w_guidance == 3.0
    with pytest.raises(ValueError):
        GuidanceConfig(w_guidance=-1.0)
    with pytest.raises(ValueError):
        GuidanceConfig(w_guidance=float("inf"))
    with pytest.raises(ValueError, match="mismatch"):
        cfg_combine(np.zeros(2), np.zeros(3), 2.0)


# ---------------------------------------------------------------------------
# denoiser


def test_sequence_layout_roundtrip(cfg):
    z = rand_latent(cfg, 11)
    seq = latent_to_seq(z)
    assert seq.shape == (cfg.seq, cfg.latent_channels)
    assert np.array_equal(seq_to_latent(seq, cfg.latent_hw), z)


def test_parameter_sets_partition_all_names(cfg):
    weights = init_weights(cfg, 0)
    names = weights.params().keys()
    by_set = {s: weights.names_in_set(s) for s in ("backbone", "identity_adapter", "control")}
    spread = sorted(n for group in by_set.values() for n in group)
    assert spread == sorted(names)
    assert param_set_of("blocks.0.attn.w_key_id") == "identity_adapter"
    assert param_set_of("in_proj") == "backbone"
    with pytest.raises(KeyError):
        param_set_of("blocks.0.nonsense")


def test_fresh_weights_keep_control_inert(cfg):
    weights = init_weights(cfg, 4)
    for blk in weights.blocks:
        assert not blk.ctrl_gate.any()
        assert not blk.time_gain.any()
    again = init_weights(cfg, 4)
    assert weights.checksum("backbone") == again.checksum("backbone")
    assert init_weights(cfg, 5).checksum("backbone") != weights.checksum("backbone")


def test_prediction_is_deterministic(cfg, schedule, enc):
    weights = init_weights(cfg, 1)
    z = rand_latent(cfg, 12)
    a = predict_eps(weights, z, 10, text_id=1)
    b = predict_eps(weights, z, 10, text_id=1)
    assert np.array_equal(a, b)
    assert a.shape == z.shape


def test_zero_strength_ignores_identity_features(cfg):
    weights = init_weights(cfg, 2)
    z = rand_latent(cfg, 13)
    feats = [RngState(7).derive(("f", k)).normal((cfg.n_query, cfg.d_id))
             for k in range(cfg.n_blocks)]
    plain = predict_eps(weights, z, 9, text_id=0)
    with_feats = predict_eps(weights, z, 9, text_id=0, identity=feats, scale=0.0)
    assert np.array_equal(plain, with_feats)


def test_zeroed_adapters_and_gates_silence_all_conditions(cfg):
    """With identity projections and control gates zeroed, the prediction is
    independent of both the identity features and the control signal."""
    weights = init_weights(cfg, 3)
    for blk in weights.blocks:
        blk.attn.w_key_id[:] = 0.0
        blk.attn.w_value_id[:] = 0.0
        blk.ctrl_gate[:] = 0.0
    z = rand_latent(cfg, 14)
    feats = [RngState(8).derive(("f", k)).normal((cfg.n_query, cfg.d_id))
             for k in range(cfg.n_blocks)]
    ctrl = rand_latent(cfg, 15)
    bare = predict_eps(weights, z, 12, text_id=0)
    loaded = predict_eps(weights, z, 12, text_id=0, identity=feats,
                         ctrl=ctrl, scale=1.0)
    assert np.array_equal(bare, loaded)


def test_invalid_latents_and_text_ids_are_rejected(cfg):
    weights = init_weights(cfg, 6)
    with pytest.raises(ValueError, match="latent shape"):
        predict_eps(weights, np.zeros((4, 3, 3)), 5)
    with pytest.raises(ValueError, match="text id"):
        predict_eps(weights, rand_latent(cfg, 16), 5, text_id=11)


# ---------------------------------------------------------------------------
# sampling


def make_ref(cfg, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(3, cfg.image_size, cfg.image_size))


def test_sampling_is_seed_deterministic(cfg, schedule, enc):
    weights = init_weights(cfg, 7)
    ref = make_ref(cfg, 0)
    kw = dict(ref_img=ref, text_id=0, steps=5, guidance=2.0, identity_scale=0.4)
    a, info_a = sample(weights, enc, schedule, RngState(42), **kw)
    b, info_b = sample(weights, enc, schedule, RngState(42), **kw)
    assert np.array_equal(a, b)
    assert info_a == info_b
    c, _ = sample(weights, enc, schedule, RngState(43), **kw)
    assert not np.array_equal(a, c)


def test_unconditioned_sampling_ignores_the_reference(cfg, schedule, enc):
    weights = init_weights(cfg, 8)
    kw = dict(text_id=0, steps=5, guidance=2.0, identity_scale=0.0, mask_kind=None)
    a, info = sample(weights, enc, schedule, RngState(1), ref_img=make_ref(cfg, 1), **kw)
    b, _ = sample(weights, enc, schedule, RngState(1), ref_img=make_ref(cfg, 2), **kw)
    assert np.array_equal(a, b)
    assert info["used_reference"] is False


def test_single_step_matches_hand_trace(cfg, schedule, enc):
    from freqbooth.diffusion import cfg_combine as combine
    from freqbooth.reference_encoder import decode_latent

    weights = init_weights(cfg, 9)
    got, _ = sample(weights, enc, schedule, RngState(5), text_id=1, steps=1,
                    guidance=2.0, identity_scale=0.0)

    z = RngState(5).normal((cfg.latent_channels, cfg.latent_hw, cfg.latent_hw))
    t = cfg.timesteps
    eps_c = predict_eps(weights, z, t, text_id=1)
    eps_u = predict_eps(weights, z, t, None)
    eps_hat = combine(eps_c, eps_u, 2.0)
    ab = schedule.alpha_bar(t)
    x0 = (z - np.sqrt(1 - ab) * eps_hat) / np.sqrt(ab)
    assert np.max(np.abs(got - decode_latent(x0, enc))) <= 1e-12


def test_both_branch_hook_is_a_noop_at_unit_guidance(cfg, schedule, enc):
    weights = init_weights(cfg, 10)
    kw = dict(text_id=0, steps=4, guidance=1.0, identity_scale=0.0)
    fast, _ = sample(weights, enc, schedule, RngState(6), **kw)
    slow, _ = sample(weights, enc, schedule, RngState(6),
                     force_both_branches=True, **kw)
    assert np.array_equal(fast, slow)


def test_control_conditioning_requires_a_reference(cfg, schedule, enc):
    weights = init_weights(cfg, 11)
    with pytest.raises(ValueError, match="reference"):
        sample(weights, enc, schedule, RngState(7), ref_img=None,
               mask_kind=MaskKind.LOW, steps=2)


def test_schedule_config_mismatch_is_rejected(cfg, enc):
    weights = init_weights(cfg, 12)
    with pytest.raises(ValueError, match="schedule"):
        sample(weights, enc, linear_schedule(cfg.timesteps + 1), RngState(8), steps=2)
