import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stflow import synthdata, tasks


@pytest.fixture(scope="module")
def sample():
    return synthdata.generate_samples(1, 8, 6, seed=3)[0]


def test_mask_frames_counts():
    frames = torch.zeros(4, 3, 8, 8)
    for rate, expect in ((0.0, 0), (0.3, 1), (0.5, 2), (0.7, 3), (0.9, 4)):
        masked, missing = tasks.mask_frames(frames, rate,
                                            torch.Generator().manual_seed(0))
        assert len(missing) == expect
        for i in missing:
            assert torch.equal(masked[i], torch.full((3, 8, 8), tasks.MASK_FILL))
    with pytest.raises(ValueError):
        tasks.mask_frames(frames, 1.2, torch.Generator().manual_seed(0))


def test_mask_frames_leaves_visible_untouched(sample):
    masked, missing = tasks.mask_frames(sample.x_clear, 0.5,
                                        torch.Generator().manual_seed(1))
    for i in range(len(sample)):
        if i not in missing:
            assert torch.equal(masked[i], sample.x_clear[i])


def test_assemble_recon_layout(sample):
    b = tasks.assemble_recon(sample, 0.5, torch.Generator().manual_seed(2))
    t = len(sample)
    assert b.state.shape == (t, 3, 8, 8)
    assert b.condition.shape == (t, 5, 8, 8)
    assert torch.equal(b.condition[:, 3:], sample.q_aux)
    assert torch.equal(b.state, sample.x_clear)
    assert b.aux is not None and b.missing is not None


def test_assemble_recon_aux_absent_zero_filled(sample):
    b = tasks.assemble_recon(sample, 0.5, torch.Generator().manual_seed(2),
                             use_aux=False)
    assert torch.equal(b.condition[:, 3:], torch.zeros_like(b.condition[:, 3:]))
    assert b.aux is None


def test_assemble_cloudrm(sample):
    contam, *_ = synthdata.contaminate(sample.x_clear, 9, 0.5)
    sample2 = synthdata.TimeSeriesSample(
        x_clear=sample.x_clear, q_aux=sample.q_aux, x_contam=contam,
        labels=sample.labels, m_doy=sample.m_doy, m_lonlat=sample.m_lonlat,
        cloud_frac=sample.cloud_frac, shadow_frac=sample.shadow_frac)
    b = tasks.assemble_cloudrm(sample2)
    assert torch.equal(b.condition[:, :3], contam)
    with pytest.raises(ValueError):
        tasks.assemble_cloudrm(sample)   # no contaminated frames


def test_assemble_scd_onehot(sample):
    b = tasks.assemble_scd(sample, num_classes=4)
    assert b.state.shape == (len(sample), 4, 8, 8)
    assert torch.equal(tasks.decode_argmax(b.state), sample.labels)


def test_assemble_forecast_split(sample):
    history, future, b = tasks.assemble_forecast(sample, t_his=3)
    assert history.shape == (3, 5, 8, 8)
    assert torch.equal(future, sample.x_clear[3:6])
    assert b.doys == sample.m_doy[3:6]
    with pytest.raises(ValueError):
        tasks.assemble_forecast(sample, t_his=4)   # needs 8 frames


def test_onehot_roundtrip_and_validation():
    labels = torch.randint(0, 5, (2, 6, 6),
                           generator=torch.Generator().manual_seed(4))
    oh = tasks.encode_onehot(labels, 5)
    assert oh.shape == (2, 5, 6, 6)
    assert torch.equal(oh.sum(dim=1), torch.ones(2, 6, 6))
    assert torch.equal(tasks.decode_argmax(oh), labels)
    with pytest.raises(ValueError):
        tasks.encode_onehot(labels, 4)


def test_decode_argmax_tie_break_lowest_index():
    scores = torch.zeros(3, 2, 2)   # all tied
    assert torch.equal(tasks.decode_argmax(scores), torch.zeros(2, 2).long())


def test_window_plan_examples():
    assert tasks.window_plan(8, 4) == [0, 4]
    assert tasks.window_plan(10, 4) == [0, 4, 6]   # last window right-aligned
    assert tasks.window_plan(4, 4) == [0]
    with pytest.raises(ValueError):
        tasks.window_plan(3, 4)


@given(st.integers(1, 8), st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_window_plan_covers_everything(window, length):
    if length < window:
        return
    starts = tasks.window_plan(length, window)
    covered = set()
    for s in starts:
        assert 0 <= s and s + window <= length
        covered.update(range(s, s + window))
    assert covered == set(range(length))


def test_infer_sequence_first_write_wins(sample):
    calls = []

    def predictor(window_sample):
        calls.append(list(window_sample.m_doy))
        return torch.full((4, 1, 8, 8), float(len(calls)))

    out = tasks.infer_sequence(predictor, sample, window=4)
    assert out.shape == (6, 1, 8, 8)
    # frames 0-3 from call 1; frames 4,5 from call 2 (overlap 2,3 kept from 1)
    assert (out[:4] == 1.0).all()
    assert (out[4:] == 2.0).all()
    assert len(calls) == 2


def test_infer_sequence_pads_short_input(sample):
    short = synthdata.generate_samples(1, 8, 2, seed=5)[0]
    seen = {}

    def predictor(window_sample):
        seen["len"] = len(window_sample)
        return window_sample.x_clear

    out = tasks.infer_sequence(predictor, short, window=4)
    assert seen["len"] == 4
    assert out.shape == (2, 3, 8, 8)
    assert torch.equal(out, short.x_clear)


def test_infer_autoregressive_rolls_history():
    history = torch.ones(2, 5, 4, 4)
    fed = []

    def predict_future(buf):
        fed.append(buf.clone())
        return torch.full((2, 3, 4, 4), 2.0)

    out = tasks.infer_autoregressive(predict_future, history, horizon=5)
    assert out.shape == (5, 3, 4, 4)
    assert (out == 2.0).all()
    # second call sees generated frames rolled in, aux channels zeroed
    assert torch.equal(fed[1][:, :3], torch.full((2, 3, 4, 4), 2.0))
    assert torch.equal(fed[1][:, 3:], torch.zeros(2, 2, 4, 4))


def test_task_presets_documented():
    assert tasks.TASK_PRESETS["recon"]["default"] == (12, 10)
    assert tasks.TASK_PRESETS["scd"]["pair-aux"] == (4, 6)
    assert tasks.TASK_PRESETS["forecast"]["reduced"] == (6, 4)
