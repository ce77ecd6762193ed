import numpy as np
import pytest

from emcot_vla.processing.vqa import VQASample, generate_vqa
from emcot_vla.tokenstream.assemble import (
    action_chunk,
    ap_sample,
    context_indices,
    patchify,
    sample_summary,
    span_order_valid,
    vg_sample,
)
from emcot_vla.tokenstream.mask import (
    build_attention_mask,
    demo_emcot_records,
    demo_pretrain_records,
    inspect_mask,
)
from emcot_vla.tokenstream.packing import PackedSequence, ffd_bins, pack_samples
from emcot_vla.tokenstream.records import ROLES, Sample, TokenRecord
from emcot_vla.tokenstream.vocab import SPECIAL_TOKENS, Vocabulary
from emcot_vla.utils.errors import InputError, SplitError

VISUAL = {"vis_und", "vis_clean"}
NOISE = {"vis_noise", "act_noise"}


def oracle_allowed(records, i, j, isolate=True) -> bool:
    """
    Правила маски, проверяемые попарно по определению.
    """
    a, b = records[i], records[j]
    if a.sample != b.sample:
        return False
    if a.role == "text":
        return b.role not in NOISE and j <= i
    if a.role in VISUAL:
        if b.role in NOISE:
            return False
        if b.role in VISUAL and a.frame is not None and a.frame == b.frame:
            return True
        return j < i
    if b.role in NOISE:
        if a.group == b.group:
            return True
        return not isolate and j < i
    if j >= i:
        return False
    if b.role == "vis_clean" and a.target_frame is not None and b.frame == a.target_frame:
        return False
    return True


def oracle_mask(records, isolate=True) -> np.ndarray:
    n = len(records)
    return np.array([[oracle_allowed(records, i, j, isolate) for j in range(n)] for i in range(n)], dtype=bool)


def random_layout(rng: np.random.Generator, n: int) -> list[TokenRecord]:
    samples = np.sort(rng.integers(0, 3, size=n))
    records = []
    for sample in samples:
        role = ROLES[rng.integers(len(ROLES))]
        frame = group = target_frame = None
        if role in VISUAL:
            frame = int(rng.integers(0, 4))
        if role in NOISE:
            group = int(rng.integers(0, 3))
            if role == "vis_noise" and rng.random() < 0.8:
                target_frame = int(rng.integers(0, 4))
        records.append(TokenRecord(role, frame=frame, group=group, target_frame=target_frame, sample=int(sample)))
    return records


# словарь


def test_vocab_size_and_special_ids():
    vocab = Vocabulary()
    assert len(vocab) <= 512
    assert [vocab.id(t) for t in SPECIAL_TOKENS] == list(range(len(SPECIAL_TOKENS)))
    assert vocab.is_special(vocab.id("<think_end>"))
    assert not vocab.is_special(vocab.id("arm"))


def test_vocab_round_trip_and_words():
    vocab = Vocabulary()
    text = "<think_start>pick up the red block, x=1.5<think_end>"
    ids = vocab.encode(text)
    assert vocab.decode(ids) == text
    assert vocab.id("block") in ids
    assert vocab.encode("<visual_start>")[0] == vocab.id("<vision_start>")
    assert vocab.encode("é") == [vocab.id("<unk>")]


# маска


def test_demo_mask_rows():
    mask = build_attention_mask(demo_emcot_records())
    expected = {
        0: {0},
        1: {0, 1},
        2: {0, 1, 2, 3},
        3: {0, 1, 2, 3},
        4: {0, 1, 2, 3, 4, 5},
        5: {0, 1, 2, 3, 4, 5},
        6: {0, 1, 2, 3, 6},
        7: {0, 1, 2, 3, 6, 7},
    }
    for row, allowed in expected.items():
        assert set(np.flatnonzero(mask[row])) == allowed
    t1, t2, u1, u2, n1, n2, g1, a1 = range(8)
    assert mask[u1, u2] and mask[u2, u1]
    assert mask[t2, t1] and not mask[t1, t2]
    assert mask[n1, n2] and mask[n2, n1]
    assert not mask[n1, g1]
    assert mask[a1, g1] and not mask[a1, n1]
    assert not mask[t1, n1]


def test_demo_mask_matches_oracle():
    records = demo_emcot_records()
    assert np.array_equal(build_attention_mask(records), oracle_mask(records))


def test_noise_does_not_see_own_target_latents():
    records = [
        TokenRecord("vis_clean", frame=1),
        TokenRecord("vis_clean", frame=0),
        TokenRecord("vis_noise", group=0, target_frame=1),
    ]
    mask = build_attention_mask(records)
    assert not mask[2, 0]
    assert mask[2, 1]


@pytest.mark.parametrize("isolate", [True, False])
def test_mask_matches_oracle_on_random_layouts(isolate):
    rng = np.random.default_rng(1234 + int(isolate))
    for _ in range(500):
        n = int(rng.integers(1, 257))
        records = random_layout(rng, n)
        assert np.array_equal(build_attention_mask(records, isolate), oracle_mask(records, isolate))


def test_pretrain_demo_is_block_diagonal():
    records = demo_pretrain_records()
    mask = build_attention_mask(records)
    samples = np.array([r.sample for r in records])
    assert not (mask & (samples[:, None] != samples[None, :])).any()
    assert np.array_equal(mask, oracle_mask(records))


def test_inspect_mask_formats(tmp_path):
    mask = build_attention_mask(demo_emcot_records())
    pgm = inspect_mask(mask, tmp_path / "mask.pgm").read_text().split()
    assert pgm[:4] == ["P2", "8", "8", "255"]
    grid = np.array(pgm[4:], dtype=int).reshape(8, 8)
    assert np.array_equal(grid == 255, mask)
    csv = inspect_mask(mask, tmp_path / "mask.txt", fmt="csv")
    loaded = np.loadtxt(csv, delimiter=",", dtype=int)
    assert np.array_equal(loaded.astype(bool), mask)
    with pytest.raises(InputError):
        inspect_mask(mask, tmp_path / "mask.bmp")


# упаковка


def test_ffd_bins_example():
    assert ffd_bins([1500, 1200, 800], 2048) == [[0], [1, 2]]


def test_ffd_rejects_oversize():
    with pytest.raises(SplitError) as info:
        ffd_bins([3000], 2048)
    assert "max_len" in str(info.value)


def test_packed_mask_is_block_diagonal():
    a = Sample("a", "vqa", [TokenRecord("text", payload=1), TokenRecord("text", payload=2)])
    b = Sample("b", "ap", [TokenRecord("vis_und", frame=0), TokenRecord("act_noise", group=1)])
    packs = pack_samples([a, b], 8)
    assert len(packs) == 1
    pack = packs[0]
    assert pack.segments == [(0, 2), (2, 4)]
    assert not pack.mask[2:, :2].any()
    assert not pack.mask[:2, 2:].any()
    assert pack.mask[3, 2]
    with pytest.raises(ValueError):
        pack.mask[0, 0] = False


def test_packed_sequence_length_limit():
    sample = Sample("a", "vqa", [TokenRecord("text", payload=1)] * 3)
    with pytest.raises(SplitError):
        PackedSequence([sample, sample], 5)


# сборка


def test_patchify_shape_and_range():
    image = np.full((64, 64, 3), 255, dtype=np.uint8)
    patches = patchify(image, 16)
    assert patches.shape == (16, 16 * 16 * 3)
    assert np.allclose(patches, 1.0)
    with pytest.raises(InputError):
        patchify(np.zeros((60, 64, 3), dtype=np.uint8), 16)


def test_context_and_chunk_padding():
    assert context_indices(0, 3) == [0, 0, 0]
    assert context_indices(5, 3) == [3, 4, 5]
    actions = np.arange(24, dtype=float).reshape(3, 8)
    chunk, padded = action_chunk(actions, 2, 4)
    assert padded == 3
    assert np.array_equal(chunk[1:], np.repeat(actions[-1:], 3, axis=0))


@pytest.mark.parametrize("mode", ["full", "no_text", "no_vis", "none"])
def test_emcot_span_order(builder, stack_record, stack_trajectory, mode):
    sample = builder.assemble_emcot_sequence(stack_record, stack_trajectory, 3, mode)
    ids = [r.payload for r in sample.records if r.role == "text"]
    assert span_order_valid(ids, builder.vocab, mode)
    summary = sample_summary(sample)
    config = builder.model_config
    assert summary["act_noise"] == config.chunk
    assert summary.get("vis_noise", 0) == (config.n_latents if mode in ("full", "no_text") else 0)
    text_loss = [r for r in sample.records if r.role == "text" and r.loss]
    assert bool(text_loss) == (mode in ("full", "no_vis"))


def test_emcot_layout_details(builder, stack_record, stack_trajectory):
    config = builder.model_config
    t = 5
    sample = builder.assemble_emcot_sequence(stack_record, stack_trajectory, t, "full")
    records = sample.records
    vocab = builder.vocab
    vision_start = next(r for r in records if r.role == "text" and r.payload == vocab.id("<vision_start>"))
    assert vision_start.loss
    goal_clean = [r for r in records if r.role == "vis_clean" and r.frame == config.context_frames]
    assert len(goal_clean) == config.n_latents
    noise = [r for r in records if r.role == "vis_noise"]
    assert all(r.target_frame == config.context_frames for r in noise)
    goal_image = stack_trajectory.observations[stack_record.frames[t]["goal"]].image
    assert np.allclose(noise[0].target, np.asarray(goal_image, dtype=np.float32).mean() / 255.0)
    actions = [r.target for r in records if r.role == "act_noise"]
    assert np.stack(actions).shape == (config.chunk, 8)
    assert sample.meta["padded"] == 0
    line = vocab.decode([r.payload for r in records if r.role == "text"])
    assert "state: " in line
    assert stack_record.frames[t]["subtask"] in line


def test_emcot_mask_blocks_cross_group_attention(builder, stack_record, stack_trajectory):
    sample = builder.assemble_emcot_sequence(stack_record, stack_trajectory, 2, "full")
    mask = build_attention_mask(sample.records)
    roles = np.array(sample.roles())
    act = np.flatnonzero(roles == "act_noise")
    vis = np.flatnonzero(roles == "vis_noise")
    assert not mask[np.ix_(act, vis)].any()
    assert not mask[np.ix_(vis, act)].any()
    goal = [i for i, r in enumerate(sample.records) if r.role == "vis_clean" and r.frame == builder.model_config.context_frames]
    assert mask[np.ix_(act, goal)].all()


def test_emcot_rejects_bad_frame(builder, stack_record, stack_trajectory):
    with pytest.raises(InputError):
        builder.assemble_emcot_sequence(stack_record, stack_trajectory, len(stack_trajectory), "full")
    with pytest.raises(InputError):
        builder.assemble_emcot_sequence(stack_record, stack_trajectory, 0, "both")


def test_pretrain_samples(builder, stack_trajectory, env_config):
    config = builder.model_config
    vqa = generate_vqa(["stack_two"], [0], ["easy"], env_config, per_scene=1)[0]
    sample = builder.assemble_pretrain_sequence(vqa)
    assert sample.kind == "vqa"
    assert sample.records[-1].payload == builder.vocab.id("<eos>") and sample.records[-1].loss
    vg = builder.assemble_pretrain_sequence(vg_sample(stack_trajectory, 4, 2, 4))
    assert sample_summary(vg)["vis_noise"] == config.n_latents
    assert all(r.target_frame == 2 for r in vg.records if r.role == "vis_noise")
    ap = builder.assemble_pretrain_sequence(ap_sample(stack_trajectory, len(stack_trajectory) - 2, 2, config.chunk))
    assert ap.meta["padded"] == config.chunk - 2
    assert sample_summary(ap)["act_noise"] == config.chunk
    with pytest.raises(InputError):
        builder.assemble_pretrain_sequence(VQASample("empty", None, "", ""))


def test_frame_cache_reuses_encodings(builder, stack_trajectory):
    image = stack_trajectory.observations[0].image
    first = builder.encode_frame(image)
    assert builder.encode_frame(image.copy()) is first


def test_span_order_rejects_missing_and_reordered(builder):
    vocab = builder.vocab
    ids = [vocab.id(t) for t in ("<think_start>", "<think_end>", "<action_start>", "<action_end>")]
    assert span_order_valid(ids, vocab, "no_vis")
    assert not span_order_valid(ids, vocab, "full")
    assert not span_order_valid(ids[2:] + ids[:2], vocab, "no_vis")
