from dataclasses import replace

import numpy as np
import pytest
import torch
from loguru import logger

from emcot_vla.config.configurations import RunConfig
from emcot_vla.model.batch import IGNORE_INDEX, collate
from emcot_vla.model.checkpoint import load_checkpoint, save_checkpoint
from emcot_vla.model.codec import (
    LatentCodec,
    decode_latents,
    encode_latents,
    fit_latent_codec,
    load_codec,
    parameter_hash,
    psnr,
    save_codec,
)
from emcot_vla.model.embedders import sinusoidal_embedding
from emcot_vla.model.flow import add_noise, euler_integrate, sample_flow
from emcot_vla.model.mot import EXPERTS, MoTPolicy
from emcot_vla.tokenstream.mask import ACT_NOISE, TEXT, VIS_NOISE
from emcot_vla.tokenstream.packing import PackedSequence, pack_samples
from emcot_vla.tokenstream.records import Sample, TokenRecord
from emcot_vla.training.losses import compute_components
from emcot_vla.utils.errors import ConfigurationError, InputError, SamplingError


def toy_pack(config, rng: np.random.Generator) -> PackedSequence:
    """
    Короткая упаковка ``[t1, t2 | u1, u2 | c1 | n1, n2 | g1 | a1, a2]``.
    """
    p_dim = config.patch_size * config.patch_size * 3
    c_dim = config.latent_channels
    records = [
        TokenRecord("text", payload=20),
        TokenRecord("text", payload=21),
        TokenRecord("vis_und", payload=rng.normal(size=p_dim), frame=0),
        TokenRecord("vis_und", payload=rng.normal(size=p_dim), frame=0),
        TokenRecord("vis_clean", payload=rng.normal(size=c_dim), frame=0),
        TokenRecord("vis_noise", group=0, target_frame=1, loss=True, target=rng.normal(size=c_dim)),
        TokenRecord("vis_noise", group=0, target_frame=1, loss=True, target=rng.normal(size=c_dim)),
        TokenRecord("vis_clean", payload=rng.normal(size=c_dim), frame=1),
        TokenRecord("act_noise", group=1, loss=True, target=rng.uniform(-1, 1, size=8)),
        TokenRecord("act_noise", group=1, loss=True, target=rng.uniform(-1, 1, size=8)),
    ]
    return PackedSequence([Sample("toy", "emcot", records)], 64)


@pytest.fixture
def toy_batch(tiny_model_config, rng):
    batch, _, _ = add_noise(collate([toy_pack(tiny_model_config, rng)], tiny_model_config))
    return batch


@pytest.fixture
def policy(tiny_model_config):
    torch.manual_seed(0)
    return MoTPolicy(tiny_model_config)


# батч


def test_collate_layout(builder, stack_record, stack_trajectory, tiny_model_config):
    samples = [builder.assemble_emcot_sequence(stack_record, stack_trajectory, t, "full") for t in (2, 6)]
    packs = pack_samples(samples, 2048)
    batch = collate(packs, tiny_model_config)
    assert batch.shape == (1, len(packs[0]))
    assert torch.equal(batch.mask[0], torch.from_numpy(np.array(packs[0].mask)))
    text = batch.role == TEXT
    assert (batch.text_target[text & ~batch.loss] == IGNORE_INDEX).all()
    assert (batch.text_target[text & batch.loss] >= 0).all()
    assert set(batch.segment[0].tolist()) == {0, 1}


def test_collate_pads_shorter_packs(tiny_model_config, rng):
    long_pack = toy_pack(tiny_model_config, rng)
    short_pack = PackedSequence([Sample("s", "vqa", [TokenRecord("text", payload=3)])], 64)
    batch = collate([long_pack, short_pack], tiny_model_config)
    assert batch.shape == (2, len(long_pack))
    assert (batch.role[1, 1:] == -1).all()
    assert batch.mask[1].diagonal().all()
    with pytest.raises(InputError):
        collate([], tiny_model_config)


# поток


def test_add_noise_interpolates_targets(toy_batch):
    clean, _, _ = add_noise(toy_batch)
    noisy, v_vis, v_act = add_noise(clean)
    t = noisy.flow_t[..., None]
    vis = noisy.role == VIS_NOISE
    act = noisy.role == ACT_NOISE
    restored_vis = noisy.latents + (1 - t) * v_vis
    restored_act = noisy.actions + (1 - t) * v_act
    assert torch.allclose(restored_vis[vis], clean.latent_target[vis], atol=1e-5)
    assert torch.allclose(restored_act[act], clean.action_target[act], atol=1e-5)
    assert noisy.flow_t[vis].unique().numel() == 1
    assert noisy.flow_t[act].unique().numel() == 1
    other = ~(vis | act)
    assert torch.equal(noisy.latents[other], clean.latents[other])
    assert (noisy.flow_t[other] == 0).all()


def test_euler_exact_for_straight_flow():
    torch.manual_seed(1)
    x0 = torch.randn(5, 8, dtype=torch.float64)
    x1 = torch.randn(5, 8, dtype=torch.float64)
    for steps in (1, 4, 10):
        out = euler_integrate(lambda x, t: x1 - x0, x0, steps)
        assert torch.allclose(out, x1, atol=1e-6)


def test_euler_exact_for_point_target_field():
    torch.manual_seed(2)
    x0 = torch.randn(3, 4, dtype=torch.float64)
    x1 = torch.randn(3, 4, dtype=torch.float64)
    out = euler_integrate(lambda x, t: (x1 - x) / (1.0 - t), x0, 7)
    assert torch.allclose(out, x1, atol=1e-6)


def test_euler_rejects_non_finite():
    with pytest.raises(SamplingError):
        euler_integrate(lambda x, t: torch.full_like(x, float("nan")), torch.zeros(2), 3)
    with pytest.raises(ValueError):
        euler_integrate(lambda x, t: x, torch.zeros(2), 0)


def test_sample_flow_fills_only_requested_positions(policy, toy_batch):
    generator = torch.Generator().manual_seed(0)
    out = sample_flow(policy, toy_batch, "act", 2, generator)
    act = toy_batch.role == ACT_NOISE
    assert out.shape == toy_batch.actions.shape
    assert (out[~act] == 0).all()
    assert torch.isfinite(out[act]).all()


def test_sinusoidal_embedding():
    emb = sinusoidal_embedding(torch.tensor([0.0, 0.5, 1.0]), 16)
    assert emb.shape == (3, 16)
    assert torch.allclose(emb[0, :8], torch.zeros(8))
    assert torch.allclose(emb[0, 8:], torch.ones(8))
    with pytest.raises(ValueError):
        sinusoidal_embedding(torch.zeros(2), 15)


# смесь трансформеров


def test_attention_weights_follow_mask(policy, toy_batch):
    weights = policy.attention_weights(toy_batch)
    assert len(weights) == policy.config.n_layers
    blocked = ~toy_batch.mask[:, None]
    for layer in weights:
        assert (layer[blocked.expand_as(layer)] == 0).all()
        assert torch.allclose(layer.sum(-1), torch.ones_like(layer.sum(-1)), atol=1e-5)


def test_hidden_states_ignore_invisible_actions(policy, toy_batch):
    policy = policy.double()
    batch = toy_batch.to(dtype=torch.float64)
    act = batch.role == ACT_NOISE
    before = policy(batch)
    changed = replace(batch, actions=batch.actions + 5.0 * act[..., None])
    after = policy(changed)
    assert torch.allclose(before[~act], after[~act], atol=1e-10)
    assert not torch.allclose(before[act], after[act])


def test_identity_attention_is_positionwise(tiny_model_config, toy_batch):
    torch.manual_seed(0)
    policy = MoTPolicy(tiny_model_config, attention_mode="identity").double()
    batch = toy_batch.to(dtype=torch.float64)
    before = policy(batch)
    latents = batch.latents.clone()
    latents[0, 4] += 1.0
    after = policy(replace(batch, latents=latents))
    changed = (before - after).abs().amax(-1)[0] > 1e-12
    assert changed.nonzero().flatten().tolist() == [4]
    with pytest.raises(InputError):
        MoTPolicy(tiny_model_config, attention_mode="sparse")


def test_expert_parameters_are_disjoint(policy):
    groups = policy.parameter_groups()
    assert set(groups) == {*EXPERTS, "shared"}
    seen = [id(p) for params in groups.values() for p in params.values()]
    assert len(seen) == len(set(seen)) == len(list(policy.parameters()))
    per_expert = [sum(p.numel() for p in groups[name].values()) for name in EXPERTS]
    assert len(set(per_expert)) == 1


def test_text_loss_leaves_action_expert_untouched(policy, toy_batch):
    hidden = policy(toy_batch)
    text = toy_batch.role == TEXT
    policy.text_logits(hidden)[text].logsumexp(-1).sum().backward()
    for param in policy.parameter_groups()["act"].values():
        assert param.grad is None or torch.all(param.grad == 0)
    assert any(
        p.grad is not None and p.grad.abs().sum() > 0 for p in policy.parameter_groups()["und"].values()
    )


def test_gradcheck_through_joint_attention(policy, toy_batch):
    policy = policy.double()
    batch = toy_batch.to(dtype=torch.float64)
    act = batch.role == ACT_NOISE

    def action_velocity(latents):
        hidden = policy(replace(batch, latents=latents))
        return policy.velocity(hidden, "act")[act]

    latents = batch.latents.clone().requires_grad_(True)
    assert torch.autograd.gradcheck(action_velocity, (latents,), eps=1e-6, atol=1e-5)


@pytest.mark.parametrize("component", ["ce", "mse", "l1"])
def test_loss_gradients_match_finite_differences(policy, toy_batch, component):
    policy = policy.double()
    batch = toy_batch.to(dtype=torch.float64)
    # обе текстовые записи получают цели, чтобы CE была определена
    batch.text_target[0, :2] = batch.token_ids[0, :2]
    batch.loss[0, :2] = True

    def loss() -> torch.Tensor:
        return compute_components(policy, batch, torch.Generator().manual_seed(0))[component]

    eps = 1e-6
    checked = 0
    for expert in EXPERTS:
        name, param = next((n, p) for n, p in policy.parameter_groups()[expert].items() if p.dim() == 2)
        policy.zero_grad(set_to_none=True)
        loss().backward()
        analytic = param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param)
        flat = analytic.flatten()
        picked = flat.abs().topk(3).indices
        for index in picked.tolist():
            cell = tuple(int(i) for i in np.unravel_index(index, param.shape))
            with torch.no_grad():
                param[cell] += eps
                plus = float(loss())
                param[cell] -= 2 * eps
                minus = float(loss())
                param[cell] += eps
            numeric = (plus - minus) / (2 * eps)
            exact = float(flat[index])
            scale = max(abs(numeric), abs(exact))
            if scale < 1e-5:
                continue
            assert abs(numeric - exact) / scale <= 1e-4, (expert, name, cell)
            checked += 1
    assert checked > 0


def test_mask_shape_checked(policy, toy_batch):
    with pytest.raises(InputError):
        policy(replace(toy_batch, mask=toy_batch.mask[:, :-1]))


# кодек


def test_codec_shapes_and_freeze(tiny_model_config):
    torch.manual_seed(0)
    codec = LatentCodec(tiny_model_config)
    image = np.random.default_rng(0).integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    latents = encode_latents(codec, image)
    assert latents.shape == (tiny_model_config.n_latents, tiny_model_config.latent_channels)
    decoded = decode_latents(codec, latents)
    assert decoded.shape == (64, 64, 3) and decoded.dtype == np.uint8
    assert not codec.frozen
    digest = parameter_hash(codec)
    assert codec.freeze().frozen
    assert parameter_hash(codec) == digest
    with pytest.raises(InputError):
        encode_latents(codec, image[:32])


def test_codec_needs_enough_images(tiny_model_config):
    images = np.zeros((10, 64, 64, 3), dtype=np.uint8)
    with pytest.raises(InputError):
        fit_latent_codec(images, tiny_model_config, show_progress=False)


def test_codec_file_checks_dimensions(tmp_path, tiny_model_config):
    codec = LatentCodec(tiny_model_config).freeze()
    path = tmp_path / "codec.pt"
    save_codec(path, codec, {"holdout_mse": 1e-3, "loss_curve": [1.0]})
    restored = load_codec(path, tiny_model_config)
    assert parameter_hash(restored) == parameter_hash(codec)
    with pytest.raises(InputError):
        load_codec(path, replace(tiny_model_config, latent_channels=8))


def test_psnr():
    assert psnr(0.0) == float("inf")
    assert psnr(1e-3) == pytest.approx(30.0)


# контрольные точки


def test_checkpoint_round_trip(tmp_path, tiny_run_config, toy_batch):
    torch.manual_seed(3)
    model = MoTPolicy(tiny_run_config.model)
    codec = LatentCodec(tiny_run_config.model).freeze()
    path = save_checkpoint(tmp_path / "ckpt.pt", model, tiny_run_config, codec=codec, step=7, regime="pretrain/full")
    restored, restored_codec, payload = load_checkpoint(path, tiny_run_config)
    assert payload["step"] == 7 and payload["regime"] == "pretrain/full"
    assert set(payload["experts"]) == set(EXPERTS)
    with torch.no_grad():
        assert torch.allclose(model(toy_batch), restored(toy_batch))
    assert parameter_hash(restored_codec) == parameter_hash(codec)


def test_checkpoint_rejects_other_model_config(tmp_path, tiny_run_config):
    path = save_checkpoint(tmp_path / "ckpt.pt", MoTPolicy(tiny_run_config.model), tiny_run_config)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path, RunConfig())
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "missing.pt")


def test_checkpoint_warns_on_other_run_settings(tmp_path, tiny_run_config):
    path = save_checkpoint(tmp_path / "ckpt.pt", MoTPolicy(tiny_run_config.model), tiny_run_config)
    messages = []
    handle = logger.add(messages.append, level="WARNING", format="{message}")
    try:
        load_checkpoint(path, tiny_run_config)
        assert messages == []
        other = replace(tiny_run_config, env=replace(tiny_run_config.env, step_limit=tiny_run_config.env.step_limit + 1))
        load_checkpoint(path, other)
    finally:
        logger.remove(handle)
    assert len(messages) == 1
    assert "Хеш конфигурации" in messages[0]
