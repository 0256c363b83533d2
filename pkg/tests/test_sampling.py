import numpy as np
import pytest

from mvgen.sampling import (
    ReferenceKV,
    SamplerConfig,
    ViewRequest,
    cross_frame_attention,
    ddim_invert,
    ddim_invert_step,
    ddim_sample,
    ddim_step,
    generate_novel_views,
    hag_combine,
    hard_attention,
)
from mvgen.schedule import NoiseSchedule, forward_diffuse, make_schedule
from mvgen.tensor import Tensor
from mvgen.unet import UNetConfig, make_denoiser


def _two_step_schedule(ab0=0.81, ab1=0.64):
    """A length-2 schedule with chosen alpha_bar values."""
    beta = np.array([1.0 - ab0, 1.0 - ab1 / ab0])
    sched = NoiseSchedule(beta=beta, alpha_bar=np.cumprod(1.0 - beta))
    sched.validate()
    return sched


@pytest.fixture(scope="module")
def toy():
    """A random (untrained) tiny denoiser; zero out-conv replaced so the
    network actually transforms its input."""
    cfg = UNetConfig(image_size=8, base_channels=4, channel_multipliers=(1, 2),
                     res_blocks_per_level=1, attention_levels=frozenset({4}),
                     groupnorm_groups=2, embed_dim=8, pose_count=4)
    ckpt = make_denoiser(cfg, make_schedule(40), seed=6)
    w = ckpt.params["out.conv.w"]
    ckpt.params["out.conv.w"] = Tensor(
        np.random.default_rng(8).normal(size=w.shape) * 0.05, requires_grad=True)
    return ckpt


# ------------------------------------------------------------------ config

def test_sampler_config_defaults():
    cfg = SamplerConfig()
    assert cfg.steps == 50 and cfg.gamma == 1.5 and cfg.share_initial_noise


def test_sampler_config_gamma_handling():
    with pytest.raises(ValueError):
        SamplerConfig(gamma=-0.1)
    with pytest.warns(UserWarning, match="unrealistic"):
        cfg = SamplerConfig(gamma=5.0)
    assert cfg.gamma == 4.0  # clamped
    with pytest.warns(UserWarning):
        SamplerConfig(gamma=3.0)


def test_sampler_config_subsequence_validation():
    with pytest.raises(ValueError):
        SamplerConfig(timestep_subsequence=(3, 3, 5))
    with pytest.raises(ValueError):
        SamplerConfig(timestep_subsequence=(-1, 5))
    with pytest.raises(ValueError):
        SamplerConfig(steps=0)
    cfg = SamplerConfig(timestep_subsequence=(0, 10, 20))
    with pytest.raises(ValueError, match="exceeds"):
        cfg.resolve_subsequence(15)


def test_resolve_subsequence_uniform():
    seq = SamplerConfig(steps=50).resolve_subsequence(1000)
    assert len(seq) == 50
    assert seq[0] == 0 and seq[-1] == 999
    assert np.all(np.diff(seq) > 0)
    full = SamplerConfig(steps=40).resolve_subsequence(40)
    assert np.array_equal(full, np.arange(40))


# -------------------------------------------------------------- attention

def test_cfa_single_key_copies_value():
    q = np.random.default_rng(0).normal(size=(5, 3))
    k = np.array([[1.0, 2.0, 3.0]])
    v = np.array([[7.0, -1.0, 0.5]])
    out = cross_frame_attention(q, k, v)
    assert np.allclose(out, np.tile(v, (5, 1)))


def test_cfa_self_equals_standard_softmax():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(6, 4))
    k = rng.normal(size=(6, 4))
    v = rng.normal(size=(6, 4))
    logits = q @ k.T / 2.0
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    assert np.abs(cross_frame_attention(q, k, v) - w @ v).max() < 1e-6


def test_cfa_uniform_weights_by_symmetry():
    out = cross_frame_attention(np.array([[0.0]]), np.array([[1.0], [-1.0]]),
                                np.array([[2.0], [4.0]]))
    assert out[0, 0] == pytest.approx(3.0)


def test_cfa_dimension_mismatch():
    with pytest.raises(ValueError):
        cross_frame_attention(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        cross_frame_attention(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((3, 3)))


def test_hard_attention_gathers_best_value():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = np.array([[2.0, 0.0], [0.0, 2.0]])
    v = np.array([[10.0, 0.0], [20.0, 0.0]])
    out = hard_attention(q, k, v)
    assert np.array_equal(out, np.array([[10.0, 0.0], [20.0, 0.0]]))


def test_hard_attention_tie_breaks_to_first_row():
    out = hard_attention(np.array([[0.0]]), np.array([[1.0], [1.0]]),
                         np.array([[5.0], [9.0]]))
    assert out[0, 0] == 5.0


def test_hard_attention_scalar_example():
    out = hard_attention(np.array([[1.0]]), np.array([[0.9], [1.1]]),
                         np.array([[5.0], [7.0]]))
    assert out[0, 0] == 7.0


def test_hard_attention_rows_are_value_rows():
    rng = np.random.default_rng(2)
    q = rng.normal(size=(16, 5))
    k = rng.normal(size=(9, 5))
    v = rng.normal(size=(9, 5))
    out = hard_attention(q, k, v)
    for row in out:
        assert any(np.array_equal(row, vr) for vr in v)


# ------------------------------------------------------------ hag_combine

def test_hag_gamma_one_returns_soft_untouched():
    soft = np.random.default_rng(0).normal(size=(3, 4, 4))
    hard = np.random.default_rng(1).normal(size=(3, 4, 4))
    out = hag_combine(soft, hard, 1.0)
    assert out is soft


def test_hag_endpoints_and_scalar():
    soft = np.array([0.2])
    hard = np.array([0.1])
    assert hag_combine(soft, hard, 0.0)[0] == 0.1
    assert hag_combine(soft, hard, 1.5)[0] == pytest.approx(0.25)


def test_hag_shape_mismatch():
    with pytest.raises(ValueError):
        hag_combine(np.zeros(3), np.zeros(4), 1.5)
    with pytest.raises(ValueError):
        hag_combine(np.zeros(3), np.zeros(3), -1.0)


# -------------------------------------------------------------- ddim_step

def test_ddim_step_scalar_example():
    sched = _two_step_schedule()
    out = ddim_step(np.array([1.1]), np.array([0.5]), 1, 0, sched)
    assert out[0] == pytest.approx(1.11795, abs=1e-5)


def test_ddim_step_perfect_denoiser_recovers_x0():
    sched = _two_step_schedule()
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(3, 4, 4))
    eps = rng.normal(size=(3, 4, 4))
    x_t = np.sqrt(0.64) * x0 + np.sqrt(0.36) * eps
    out = ddim_step(x_t, eps, 1, -1, sched)
    assert np.abs(out - x0).max() < 1e-12


def test_ddim_step_equal_alpha_bar_is_identity():
    # degenerate schedule object with equal retention on both ends: the
    # noise removed and re-added cancel, whatever eps is
    sched = NoiseSchedule(beta=np.array([0.3, 0.3]), alpha_bar=np.array([0.7, 0.7]))
    x = np.random.default_rng(1).normal(size=(5,))
    eps = np.random.default_rng(2).normal(size=(5,))
    out = ddim_step(x, eps, 1, 0, sched)
    assert np.abs(out - x).max() < 1e-12


def test_ddim_step_direction_and_range():
    sched = make_schedule(10)
    x = np.zeros(3)
    with pytest.raises(ValueError):
        ddim_step(x, x, 2, 5, sched)
    with pytest.raises(ValueError):
        ddim_step(x, x, 10, 0, sched)
    with pytest.raises(ValueError):
        ddim_invert_step(x, x, 5, 2, sched)


def test_ddim_step_invert_step_round_trip():
    sched = make_schedule(100)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 6, 6))
    eps = rng.normal(size=(3, 6, 6))
    down = ddim_step(x, eps, 80, 30, sched)
    back = ddim_invert_step(down, eps, 30, 80, sched)
    assert np.abs(back - x).max() < 1e-10


# ------------------------------------------------------------ trajectories

def test_sample_recovers_planted_trajectory(toy):
    sched = toy.schedule
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=(3, 8, 8)) * 0.5
    eps_true = rng.normal(size=(3, 8, 8))

    def oracle(ck, x, t, p, mode=None, kv=None):
        return eps_true[None]

    x_top = forward_diffuse(x0, sched.T - 1, eps_true, sched)
    cfg = SamplerConfig(steps=sched.T, gamma=1.0)
    rec = ddim_sample(toy, x_top, 0, cfg, forward_fn=oracle)
    assert np.abs(rec - x0).max() < 1e-4


def test_sample_deterministic(toy):
    noise = np.random.default_rng(5).normal(size=(3, 8, 8))
    cfg = SamplerConfig(steps=8, gamma=1.0)
    a = ddim_sample(toy, noise, 1, cfg)
    b = ddim_sample(toy, noise, 1, cfg)
    assert np.array_equal(a, b)


def test_sample_self_reference_matches_standard(toy):
    noise = np.random.default_rng(6).normal(size=(3, 8, 8))
    cfg = SamplerConfig(steps=10, gamma=1.0)
    std = ddim_sample(toy, noise, 2, cfg, attn_mode="standard")
    rec, ref = ddim_sample(toy, noise, 2, cfg, attn_mode="record_kv")
    assert np.array_equal(std, rec)
    seq = cfg.resolve_subsequence(toy.schedule.T)
    assert sorted(ref.by_timestep) == [int(t) for t in seq]
    cfa = ddim_sample(toy, noise, 2, cfg, attn_mode="use_reference_kv",
                      reference_kv=ref)
    assert np.abs(cfa - std).max() < 1e-5


def test_sample_gamma_one_never_runs_hard_pass(toy):
    from mvgen.unet import denoiser_forward
    noise = np.random.default_rng(7).normal(size=(3, 8, 8))
    cfg = SamplerConfig(steps=6, gamma=1.0)
    _, ref = ddim_sample(toy, noise, 0, cfg, attn_mode="record_kv")

    def guarded(ck, x, t, p, mode="standard", kv=None):
        assert mode != "use_reference_kv_hard", "gamma=1 must skip the hard pass"
        return denoiser_forward(ck, x, t, p, mode, kv)

    out = ddim_sample(toy, noise, 0, cfg, attn_mode="use_reference_kv",
                      reference_kv=ref, forward_fn=guarded)
    plain = ddim_sample(toy, noise, 0, cfg, attn_mode="use_reference_kv",
                        reference_kv=ref)
    assert np.array_equal(out, plain)


def test_sample_guided_differs_from_plain(toy):
    rng = np.random.default_rng(8)
    cfg = SamplerConfig(steps=6, gamma=1.0)
    _, ref = ddim_sample(toy, rng.normal(size=(3, 8, 8)), 0, cfg,
                         attn_mode="record_kv")
    noise = rng.normal(size=(3, 8, 8))
    plain = ddim_sample(toy, noise, 1, cfg, attn_mode="use_reference_kv",
                        reference_kv=ref)
    guided = ddim_sample(toy, noise, 1, SamplerConfig(steps=6, gamma=1.5),
                         attn_mode="use_reference_kv", reference_kv=ref)
    assert np.abs(plain - guided).max() > 0


def test_sample_missing_reference_timestep_raises(toy):
    cfg = SamplerConfig(steps=6, gamma=1.0)
    noise = np.zeros((3, 8, 8))
    _, ref = ddim_sample(toy, noise, 0, cfg, attn_mode="record_kv")
    del ref.by_timestep[int(cfg.resolve_subsequence(toy.schedule.T)[0])]
    with pytest.raises(ValueError, match="no reference K/V"):
        ddim_sample(toy, noise, 0, cfg, attn_mode="use_reference_kv",
                    reference_kv=ref)
    with pytest.raises(ValueError, match="requires reference_kv"):
        ddim_sample(toy, noise, 0, cfg, attn_mode="use_reference_kv")


def test_sample_validates_noise_shape(toy):
    with pytest.raises(ValueError, match="noise shape"):
        ddim_sample(toy, np.zeros((3, 4, 4)), 0, SamplerConfig(steps=4))


# --------------------------------------------------------------- inversion

def test_invert_zero_denoiser_is_pure_rescaling(toy):
    x0 = np.random.default_rng(9).normal(size=(3, 8, 8)) * 0.4

    def zero(ck, x, t, p, mode=None, kv=None):
        return np.zeros_like(x)

    cfg = SamplerConfig(steps=10, gamma=1.0)
    noise, _ = ddim_invert(toy, x0, 0, cfg, forward_fn=zero)
    ab_top = toy.schedule.alpha_bar[toy.schedule.T - 1]
    assert np.abs(noise - np.sqrt(ab_top) * x0).max() < 1e-12


def test_invert_constant_denoiser_round_trips_exactly(toy):
    # when eps does not depend on x the first-order inversion is exact
    eps_const = np.random.default_rng(10).normal(size=(3, 8, 8))

    def const(ck, x, t, p, mode=None, kv=None):
        return eps_const[None]

    x0 = np.random.default_rng(11).normal(size=(3, 8, 8)) * 0.3
    cfg = SamplerConfig(steps=7, gamma=1.0)
    noise, _ = ddim_invert(toy, x0, 0, cfg, forward_fn=const)
    back = ddim_sample(toy, noise, 0, cfg, forward_fn=const)
    # the sampled image comes back in float32, which bounds the round trip
    assert np.abs(back - x0).max() < 1e-6


def test_invert_deterministic_and_complete(toy):
    img = np.clip(np.random.default_rng(12).normal(size=(3, 8, 8)) * 0.4, -1, 1)
    cfg = SamplerConfig(steps=9, gamma=1.0)
    n1, kv1 = ddim_invert(toy, img, 3, cfg)
    n2, kv2 = ddim_invert(toy, img, 3, cfg)
    assert np.array_equal(n1, n2)
    seq = cfg.resolve_subsequence(toy.schedule.T)
    kv1.validate(toy, seq)
    assert sorted(kv1.by_timestep) == [int(t) for t in seq]
    for t, layers in kv1.by_timestep.items():
        for name, (k_arr, v_arr) in layers.items():
            assert np.array_equal(k_arr, kv2.by_timestep[t][name][0])
            assert np.array_equal(v_arr, kv2.by_timestep[t][name][1])


# -------------------------------------------------------------- novel views

def test_novel_views_self_target_reproduces_reference(toy):
    noise = np.random.default_rng(13).normal(size=(3, 8, 8))
    cfg = SamplerConfig(steps=10, gamma=1.0)
    ref_img, _ = ddim_sample(toy, noise, 2, cfg, attn_mode="record_kv")
    req = ViewRequest(targets=(2,), reference_pose=2, reference_noise=noise)
    views = generate_novel_views(toy, req, cfg)
    assert len(views) == 1
    assert np.abs(views[0] - ref_img).max() < 1e-4


def test_novel_views_permutation_and_subset_invariance(toy):
    noise = np.random.default_rng(14).normal(size=(3, 8, 8))
    cfg = SamplerConfig(steps=6, gamma=1.5)
    all_views = generate_novel_views(
        toy, ViewRequest(targets=(0, 1, 3), reference_pose=2,
                         reference_noise=noise), cfg)
    flipped = generate_novel_views(
        toy, ViewRequest(targets=(3, 1, 0), reference_pose=2,
                         reference_noise=noise), cfg)
    only_one = generate_novel_views(
        toy, ViewRequest(targets=(1,), reference_pose=2,
                         reference_noise=noise), cfg)
    assert np.array_equal(all_views[0], flipped[2])
    assert np.array_equal(all_views[1], flipped[1])
    assert np.array_equal(all_views[2], flipped[0])
    assert np.array_equal(all_views[1], only_one[0])


def test_novel_views_image_reference_runs(toy):
    img = np.clip(np.random.default_rng(15).normal(size=(3, 8, 8)) * 0.3, -1, 1)
    cfg = SamplerConfig(steps=6, gamma=1.5)
    views = generate_novel_views(
        toy, ViewRequest(targets=(0, 1), reference_pose=3,
                         reference_image=img), cfg)
    assert len(views) == 2 and all(v.shape == (3, 8, 8) for v in views)
    assert np.abs(views[0] - views[1]).max() > 0  # poses actually differ


def test_novel_views_unshared_noise_is_seeded(toy):
    noise = np.random.default_rng(16).normal(size=(3, 8, 8))
    cfg = SamplerConfig(steps=6, gamma=1.0, share_initial_noise=False)
    req = ViewRequest(targets=(1,), reference_pose=0, reference_noise=noise)
    a = generate_novel_views(toy, req, cfg, seed=1)
    b = generate_novel_views(toy, req, cfg, seed=1)
    c = generate_novel_views(toy, req, cfg, seed=2)
    assert np.array_equal(a[0], b[0])
    assert not np.array_equal(a[0], c[0])


def test_view_request_validation():
    noise = np.zeros((3, 8, 8))
    with pytest.raises(ValueError, match="exactly one"):
        ViewRequest(targets=(0,), reference_pose=0)
    with pytest.raises(ValueError, match="exactly one"):
        ViewRequest(targets=(0,), reference_pose=0, reference_image=noise,
                    reference_noise=noise)
    req = ViewRequest(targets=(9,), reference_pose=0, reference_noise=noise)
    with pytest.raises(ValueError, match="out of range"):
        req.validate(4)
