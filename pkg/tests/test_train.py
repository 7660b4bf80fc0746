import math
from collections import OrderedDict

import numpy as np
import pytest

from lipread import tensor as T
from lipread.data import SynthConfig, generate_dataset
from lipread.decode import DecodeConfig
from lipread.decoder import DecoderConfig
from lipread.encoder import ConformerConfig
from lipread.errors import ConfigError, ContractError, ShapeError
from lipread.frontend import FrontendConfig
from lipread.model import ModelConfig, VSRModel, micro_config
from lipread.nn import Parameter
from lipread.objective import HyperParams
from lipread.train import (
    Adam,
    Checkpoint,
    CurriculumStage,
    TrainConfig,
    average_checkpoints,
    evaluate,
    filter_by_duration,
    load_checkpoint,
    load_into,
    make_batches,
    model_checkpoint,
    model_from_checkpoint,
    noam_lr,
    run_curriculum,
    save_checkpoint,
    train_stage,
)
from lipread.vocab import Vocab


def small_config(vocab_size):
    return ModelConfig(
        vocab_size=vocab_size,
        frontend=FrontendConfig(stem_kernel=(3, 3, 3), stem_channels=4, trunk=((8, 2),), d_model=16, input_size=8),
        encoder=ConformerConfig(num_blocks=2, d_model=16, heads=2, conv_kernel=3, ffn_dim=32, interctc_interval=1,
                                max_len=64),
        decoder=DecoderConfig(left_layers=1, right_layers=1, d_model=16, heads=2, ffn_dim=32, max_len=16),
    )


def small_data(n=10, seed=0):
    cfg = SynthConfig(alphabet="abcd", num_utterances=n, min_len=2, max_len=3, frames_per_token=3, frame_size=10,
                      noise=0.1)
    samples = generate_dataset(cfg, seed)
    vocab = Vocab.build_from_corpus(s.transcript for s in samples)
    return samples, vocab


SMALL_TRAIN = TrainConfig(peak_lr=1e-2, warmup_steps=20, max_frames=60, crop_size=8)


# ------------------------------------------------------------------ optimizer


def test_adam_first_steps_match_hand_computation():
    p = Parameter(np.array([1.0, -2.0]))
    opt = Adam([p], betas=(0.9, 0.98), eps=1e-9, clip_norm=None)
    g1, g2 = np.array([0.5, -1.0]), np.array([0.1, 0.2])
    p.grad = g1.copy()
    opt.step(0.1)
    # first bias-corrected step is lr * sign(g)
    np.testing.assert_allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-9)
    p.grad = g2.copy()
    opt.step(0.1)
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.98 * 0.02 * g1**2 + 0.02 * g2**2
    step = 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.98**2)) + 1e-9)
    np.testing.assert_allclose(p.data, np.array([0.9, -1.9]) - step, atol=1e-12)


def test_adam_clips_global_norm():
    a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    opt = Adam([a, b], clip_norm=5.0)
    a.grad, b.grad = np.array([30.0]), np.array([40.0])
    assert opt.step(0.0) == pytest.approx(50.0)
    # after clipping the moments saw (3, 4)
    np.testing.assert_allclose([opt.m[0][0], opt.m[1][0]], [0.1 * 3.0, 0.1 * 4.0])


def test_noam_schedule():
    assert noam_lr(1, 1e-3, 100) == pytest.approx(1e-5)
    assert noam_lr(100, 1e-3, 100) == pytest.approx(1e-3)
    assert noam_lr(400, 1e-3, 100) == pytest.approx(5e-4)
    assert noam_lr(50, 1e-3, 0) == 1e-3
    lrs = [noam_lr(s, 1.0, 10) for s in range(1, 40)]
    assert max(lrs) == lrs[9]


# ------------------------------------------------------------------ batching


def test_make_batches_respects_budget_and_covers_everything():
    rng = np.random.default_rng(0)
    lengths = rng.integers(5, 60, size=200).tolist()
    batches = make_batches(lengths, 240)
    assert sorted(i for b in batches for i in b) == list(range(200))
    for b in batches:
        assert len(b) == 1 or len(b) * max(lengths[i] for i in b) <= 240
    flat = [i for b in batches for i in b]
    assert flat == sorted(range(200), key=lambda i: (lengths[i], i))


def test_make_batches_single_long_item():
    assert make_batches([500, 3], 100) == [[1], [0]]


def test_duration_filter_keeps_at_most_100_frames_for_4s():
    cfg = SynthConfig(alphabet="abcdef", num_utterances=40, min_len=2, max_len=12, frames_per_token=10, frame_size=10)
    samples = generate_dataset(cfg, 1)
    kept = filter_by_duration(samples, 4.0)
    assert kept and len(kept) < len(samples)
    assert all(s.video.num_frames <= 100 for s in kept)
    assert {s.utterance_id for s in kept} == {s.utterance_id for s in samples if s.video.num_frames <= 100}
    assert filter_by_duration(samples, None) == samples


def test_empty_duration_filter_is_a_config_error(tmp_path):
    samples, vocab = small_data(4)
    model = VSRModel(small_config(vocab.size))
    stage = CurriculumStage(1, max_duration=0.01, epochs=1, avg_from=1, avg_to=1)
    with pytest.raises(ConfigError):
        train_stage(stage, samples, model, vocab, HyperParams(), SMALL_TRAIN, tmp_path)


def test_stage_validation():
    with pytest.raises(ConfigError):
        CurriculumStage(1, epochs=3, avg_from=2, avg_to=4).validate()
    with pytest.raises(ConfigError):
        CurriculumStage(1, init="warm").validate()


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = VSRModel(micro_config(), seed=3)
    ckpt = model_checkpoint(model, {"epoch": 4})
    save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert list(back.params) == list(ckpt.params)
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
    assert back.metadata == ckpt.metadata and back.digest == ckpt.digest
    save_checkpoint(tmp_path / "b.ckpt", back)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    again = model_from_checkpoint(back)
    for (k, a), (_, b) in zip(model.state_dict().items(), again.state_dict().items()):
        assert a.tobytes() == b.tobytes(), k


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nope")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "x.ckpt")


def _ckpt(values, name="w"):
    return Checkpoint(OrderedDict([(name, np.asarray(values, dtype=np.float64))]), {"source": str(values)})


def test_average_of_identical_checkpoints_is_bit_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7)) * 1e3
    avg = average_checkpoints([_ckpt(x)] * 10)
    assert avg.params["w"].tobytes() == x.tobytes()


def test_average_values_and_order_invariance():
    rng = np.random.default_rng(1)
    xs = [rng.normal(size=(4, 3)) for _ in range(5)]
    a = average_checkpoints([_ckpt(x) for x in xs])
    b = average_checkpoints([_ckpt(x) for x in reversed(xs)])
    np.testing.assert_allclose(a.params["w"], np.mean(xs, axis=0), atol=1e-15)
    assert a.params["w"].tobytes() == b.params["w"].tobytes()
    assert a.metadata["averaged_from"] == b.metadata["averaged_from"]


def test_average_mismatch_names_the_parameter():
    with pytest.raises(ShapeError, match="w"):
        average_checkpoints([_ckpt(np.zeros(3)), _ckpt(np.zeros(4))])
    with pytest.raises(ShapeError, match="v"):
        average_checkpoints([_ckpt(np.zeros(3)), _ckpt(np.zeros(3), name="v")])
    with pytest.raises(ContractError):
        average_checkpoints([])


def test_load_into_rejects_other_architecture():
    a = VSRModel(micro_config(6))
    b = VSRModel(micro_config(7))
    with pytest.raises(ShapeError):
        load_into(a, model_checkpoint(b))


# ------------------------------------------------------------------ training


def test_overfit_ten_utterances(tmp_path):
    samples, vocab = small_data(10)
    model = VSRModel(small_config(vocab.size), seed=0)
    stage = CurriculumStage(1, epochs=60, avg_from=60, avg_to=60)
    losses = []
    res = train_stage(stage, samples, model, vocab, HyperParams(), SMALL_TRAIN, tmp_path,
                      on_epoch=lambda e, m, loss: losses.append(loss))
    steps_per_epoch = len(make_batches([s.video.num_frames for s in samples], SMALL_TRAIN.max_frames))
    assert 60 * steps_per_epoch <= 200
    assert losses == res.epoch_losses
    assert losses[-1] < 0.5 * losses[0]


def test_train_stage_is_deterministic(tmp_path):
    samples, vocab = small_data(6)
    stage = CurriculumStage(1, epochs=2, avg_from=1, avg_to=2)
    outs = []
    for run in ("a", "b"):
        model = VSRModel(small_config(vocab.size), seed=0)
        with open(tmp_path / f"{run}.log", "w") as fh:
            train_stage(stage, samples, model, vocab, HyperParams(), SMALL_TRAIN, tmp_path / run, fh)
        outs.append(((tmp_path / run / "stage1_epoch002.ckpt").read_bytes(), (tmp_path / f"{run}.log").read_text()))
    assert outs[0] == outs[1]
    assert outs[0][1].count("\n") > 0


def test_run_curriculum_two_stages(tmp_path):
    samples, vocab = small_data(8)
    stages = [CurriculumStage(1, max_duration=0.3, epochs=2, avg_from=1, avg_to=2),
              CurriculumStage(2, data="finetune", init="previous", epochs=2, avg_from=2, avg_to=2)]
    model, results = run_curriculum(stages, {"train": samples}, vocab, small_config(vocab.size), HyperParams(),
                                    SMALL_TRAIN, tmp_path)
    assert [r.stage_id for r in results] == [1, 2]
    assert (tmp_path / "stage1_avg.ckpt").exists() and (tmp_path / "stage2_avg.ckpt").exists()
    final = load_checkpoint(tmp_path / "stage2_avg.ckpt")
    last = load_checkpoint(tmp_path / "stage2_epoch002.ckpt")
    for k, v in model.state_dict().items():
        assert v.tobytes() == final.params[k].tobytes() == last.params[k].tobytes()
    with pytest.raises(ConfigError):
        run_curriculum(stages[1:], {"train": samples}, vocab, small_config(vocab.size), HyperParams(),
                       SMALL_TRAIN, tmp_path)


# ------------------------------------------------------------------ evaluation



def test_evaluate_cer_greedy_fields():
    samples, vocab = small_data(3)
    model = VSRModel(small_config(vocab.size), seed=0)
    res = evaluate(model, None, samples, DecodeConfig(beam_size=2), vocab, SMALL_TRAIN, mode="greedy")
    errors = sum(u.errors for u in res.utterances)
    chars = sum(len(s.transcript) for s in samples)
    assert res.cer == pytest.approx(errors / chars)
    assert [u.utterance_id for u in res.utterances] == [s.utterance_id for s in samples]


def test_evaluate_joint_reports_finite_breakdown():
    samples, vocab = small_data(2)
    model = VSRModel(small_config(vocab.size), seed=0)
    res = evaluate(model, None, samples, DecodeConfig(beam_size=3, lm_weight=0.0), vocab, SMALL_TRAIN)
    for u in res.utterances:
        assert math.isfinite(u.combined) and u.lm == 0.0
