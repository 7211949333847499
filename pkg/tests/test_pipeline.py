import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from wavelldm.nn import Parameter
from wavelldm.pipeline import checkpoint as ck
from wavelldm.pipeline.audio import (
    AudioClip,
    DegradationSpec,
    active_power,
    degrade,
    load_wav,
    pad_to_multiple,
    save_wav,
    toy_corpus,
)
from wavelldm.pipeline.optim import Adam, AdamW, adam_step, adamw_step, lr_schedule

# -- optimizers --------------------------------------------------------------


def test_adam_zero_grad_is_noop():
    p = np.array([1.5, -2.0, 0.25])
    new, m, v = adam_step(p, np.zeros(3), np.zeros(3), np.zeros(3), 1, 2e-4, 0.8, 0.99)
    np.testing.assert_array_equal(new, p)


def test_adamw_zero_grad_decays():
    p = np.array([1.5, -2.0, 0.25])
    new, _, _ = adamw_step(p, np.zeros(3), np.zeros(3), np.zeros(3), 1, 2e-4, 0.9, 0.999, weight_decay=1e-2)
    np.testing.assert_allclose(new - p, -2e-4 * 1e-2 * p, rtol=1e-9)


def test_adam_single_step_closed_form():
    lr, b1, b2, eps = 2e-4, 0.8, 0.99, 1e-8
    g = 1.0
    m, v = (1 - b1) * g, (1 - b2) * g * g
    expected = -lr * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    new, _, _ = adam_step(np.array([0.0]), np.array([g]), np.zeros(1), np.zeros(1), 1, lr, b1, b2, eps)
    assert new[0] == pytest.approx(expected, rel=1e-12)
    assert new[0] == pytest.approx(-lr, rel=1e-6)


def test_adam_two_steps_unrolled():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    g1, g2, p = 0.3, -1.2, 0.7
    m1 = (1 - b1) * g1
    v1 = (1 - b2) * g1**2
    p1 = p - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2 = b1 * m1 + (1 - b1) * g2
    v2 = b2 * v1 + (1 - b2) * g2**2
    p2 = p1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
    x, m, v = adam_step(np.array([p]), np.array([g1]), np.zeros(1), np.zeros(1), 1, lr, b1, b2, eps)
    x, m, v = adam_step(x, np.array([g2]), m, v, 2, lr, b1, b2, eps)
    assert x[0] == pytest.approx(p2, rel=1e-12)


def test_adam_class_matches_function():
    w = Parameter(np.array([[0.5, -1.0]]), dtype=np.float64)
    opt = Adam([("w", w)], lr=1e-3, betas=(0.8, 0.99))
    w.grad = np.array([[0.2, 0.4]])
    opt.step()
    ref, _, _ = adam_step(np.array([[0.5, -1.0]]), np.array([[0.2, 0.4]]), 0, 0, 1, 1e-3, 0.8, 0.99)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)


def test_optimizer_state_round_trip():
    w = Parameter(np.ones((2, 3), np.float32))
    opt = AdamW([("w", w)], lr=1e-3)
    for g in (0.1, -0.3):
        w.grad = np.full((2, 3), g, np.float32)
        opt.step()
    state = ck.decode(ck.encode(opt.state_dict()))
    w2 = Parameter(w.data.copy())
    opt2 = AdamW([("w", w2)], lr=1e-3)
    opt2.load_state_dict(state)
    for o, p in ((opt, w), (opt2, w2)):
        p.grad = np.full((2, 3), 0.7, np.float32)
        o.step()
    np.testing.assert_array_equal(w.data, w2.data)


def test_lr_schedule_values():
    assert lr_schedule(1999, 2e-4, 0.998, 2000) == 2e-4
    assert lr_schedule(2000, 2e-4, 0.998, 2000) == pytest.approx(1.996e-4, rel=1e-12)
    assert lr_schedule(4000, 2e-4, 0.998, 2000) == pytest.approx(2e-4 * 0.998**2, rel=1e-12)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_lr_schedule_non_increasing(a, b):
    lo, hi = sorted((a, b))
    assert lr_schedule(hi, 2e-4, 0.998, 2500) <= lr_schedule(lo, 2e-4, 0.998, 2500)


def test_lr_schedule_rejects_nonpositive():
    with pytest.raises(ValueError):
        lr_schedule(0, 2e-4, 0.998, 0)


# -- WAV I/O -----------------------------------------------------------------


def test_silence_file(tmp_path):
    wavfile.write(tmp_path / "s.wav", 48000, np.zeros(48000, np.int16))
    clip = load_wav(tmp_path / "s.wav")
    assert clip.sample_rate == 48000 and clip.samples.size == 48000 and not clip.samples.any()


def test_pcm16_scaling(tmp_path):
    wavfile.write(tmp_path / "h.wav", 16000, np.array([16384, -32768, 0], np.int16))
    np.testing.assert_array_equal(load_wav(tmp_path / "h.wav").samples, [0.5, -1.0, 0.0])


def test_first_channel_and_float(tmp_path):
    data = np.stack([np.linspace(-1, 1, 100), np.zeros(100)], axis=1).astype(np.float32)
    wavfile.write(tmp_path / "st.wav", 8000, data)
    np.testing.assert_array_equal(load_wav(tmp_path / "st.wav").samples, data[:, 0])


def test_round_trip_quantization(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 5000).astype(np.float32)
    save_wav(AudioClip(x, 48000), tmp_path / "r.wav")
    back = load_wav(tmp_path / "r.wav")
    assert np.abs(back.samples - x).max() <= 1 / 32768


def test_malformed_wav(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF\x00\x00garbage")
    with pytest.raises(ValueError):
        load_wav(tmp_path / "bad.wav")


def test_clip_invariants():
    with pytest.raises(ValueError):
        AudioClip(np.array([1.5], np.float32), 48000)
    with pytest.raises(ValueError):
        AudioClip(np.zeros(3, np.float32), 0)


def test_pad_to_multiple():
    y, n = pad_to_multiple(np.ones((1, 1, 1000)), 1024)
    assert y.shape == (1, 1, 1024) and n == 1000 and y[..., 1000:].sum() == 0


# -- degradation -------------------------------------------------------------


@pytest.fixture(scope="module")
def speechlike():
    return toy_corpus(1, seed=5)[0]


def test_mask_450ms(speechlike):
    out, info = degrade(speechlike, DegradationSpec("mask", 450), np.random.default_rng(0))
    assert info.mask_length == 21600
    seg = out.samples[info.mask_start : info.mask_start + 21600]
    assert not seg.any()


def test_mask_zero_is_identity(speechlike):
    out, info = degrade(speechlike, DegradationSpec("mask", 0), np.random.default_rng(0))
    np.testing.assert_array_equal(out.samples, speechlike.samples)
    assert info.mask_start is None


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([50, 250, 450]), st.integers(0, 2**31))
def test_unmasked_samples_bit_equal(speechlike, ms, seed):
    out, info = degrade(speechlike, DegradationSpec("mask", ms), np.random.default_rng(seed))
    keep = np.ones(out.samples.size, bool)
    keep[info.mask_start : info.mask_start + info.mask_length] = False
    np.testing.assert_array_equal(out.samples[keep], speechlike.samples[keep])


def test_mask_too_long():
    clip = AudioClip(np.zeros(4800, np.float32), 48000)
    with pytest.raises(ValueError, match="exceeds clip length"):
        degrade(clip, DegradationSpec("mask", 250), np.random.default_rng(0))


@pytest.mark.parametrize("snr", [-5.0, 0.0, 10.0, 20.0])
def test_noise_snr(speechlike, snr):
    noise = np.random.default_rng(1).standard_normal(speechlike.samples.size)
    out, info = degrade(speechlike, DegradationSpec("noise", snr_db=snr), np.random.default_rng(0), noise=noise)
    recovered = out.samples.astype(np.float64) / info.gain - speechlike.samples
    achieved = 10 * np.log10(active_power(speechlike.samples) / np.mean(recovered**2))
    assert abs(achieved - snr) < 0.01
    assert np.abs(out.samples).max() <= 1.0


# -- checkpoint --------------------------------------------------------------


def sample_entries():
    rng = np.random.default_rng(0)
    return {
        "codec.w": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "scalar": np.array(2.5, np.float32),
        "ünï": np.arange(7, dtype=np.float32),
        "config": ck.text_entry("stage: codec\nsteps: 10\n"),
    }


def test_checkpoint_round_trip(tmp_path):
    e = sample_entries()
    ck.save_checkpoint(tmp_path / "a.ckpt", e)
    back = ck.load_checkpoint(tmp_path / "a.ckpt")
    assert list(back) == list(e)
    for k in e:
        assert back[k].shape == e[k].shape
        np.testing.assert_array_equal(back[k], e[k])
    assert ck.entry_text(back["config"]) == "stage: codec\nsteps: 10\n"


def test_checkpoint_layout():
    blob = ck.encode({"a": np.array([1.0, 2.0], np.float32)})
    assert blob[:4] == b"WLDM"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<I", blob, 12) == (1,)
    assert blob[16:17] == b"a"
    assert struct.unpack_from("<II", blob, 17) == (1, 2)
    assert np.frombuffer(blob[25:33], "<f4").tolist() == [1.0, 2.0]
    assert struct.unpack_from("<I", blob, 33)[0] == zlib.crc32(blob[:33])


def test_checkpoint_corruption_detected():
    blob = bytearray(ck.encode(sample_entries()))
    blob[40] ^= 0xFF
    with pytest.raises(ck.CheckpointError, match="checksum"):
        ck.decode(bytes(blob))


def test_checkpoint_bad_magic_and_version():
    blob = ck.encode(sample_entries())
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode(b"XXXX" + blob[4:])
    body = blob[:4] + struct.pack("<I", 9) + blob[8:-4]
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.decode(body + struct.pack("<I", zlib.crc32(body)))


def test_checkpoint_truncated():
    blob = ck.encode(sample_entries())
    with pytest.raises(ck.CheckpointError):
        ck.decode(blob[:-10])


def test_checkpoint_duplicate_names():
    one = ck.encode({"a": np.zeros(1, np.float32)})
    body = one[:4] + struct.pack("<II", 1, 2) + one[12:-4] + one[12:-4]
    with pytest.raises(ck.CheckpointError, match="duplicate"):
        ck.decode(body + struct.pack("<I", zlib.crc32(body)))


def test_prefix_helpers():
    s = {"a": np.zeros(1), "b.c": np.ones(2)}
    wrapped = ck.with_prefix("unet", s)
    assert set(wrapped) == {"unet.a", "unet.b.c"}
    assert set(ck.strip_prefix("unet", {**wrapped, "codec.x": np.zeros(1)})) == {"a", "b.c"}
