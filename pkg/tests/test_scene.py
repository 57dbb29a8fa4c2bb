import numpy as np
import pytest
from scipy.signal import coherence, correlate

from dnbd.scene import (GroundTruth, NoiseSource, RoomSpec, SceneSpec, default_scene, diffuse_coherence,
                        generate_rir, generate_rirs, image_sources, linear_array, load_scene,
                        perturb_training_positions, render_scene, simulate_vad_error,
                        synthesize_diffuse_field, synthetic_speech, theoretical_tdoa, vad_labels)
from dnbd.stft import AnalysisConfig


def schroeder_t60(h, fs):
    """Decay time from a -5 to -25 dB line fit of the backward-integrated energy."""
    edc = np.cumsum(h[::-1] ** 2)[::-1]
    edc_db = 10 * np.log10(edc / edc[0])
    sel = (edc_db <= -5) & (edc_db >= -25)
    t = np.arange(len(h))[sel] / fs
    slope = np.polyfit(t, edc_db[sel], 1)[0]
    return -60 / slope


def small_scene(**kw):
    base = dict(room=RoomSpec((5, 5, 3), t60=0.0), nodes=[linear_array((1, 1, 1.5), (1, 0, 0), 2, 0.05),
                                                       linear_array((4, 3, 1.5), (0, 1, 0), 2, 0.05)],
                speakers=[(2.5, 2.0, 1.5)])
    base.update(kw)
    return SceneSpec(**base)


def test_direct_path_delay_and_amplitude():
    room = RoomSpec(t60=0.0)
    src, mic = np.array([1.0, 1.0, 1.5]), np.array([4.43, 1.0, 1.5])  # 3.43 m apart
    h = generate_rir(room, src, mic, fs=8000)
    assert np.argmax(np.abs(h)) == 80
    assert h[80] == pytest.approx(1 / (4 * np.pi * 3.43), rel=1e-12)
    assert np.count_nonzero(np.abs(h) > 1e-15) == 1


def test_anechoic_fractional_delay_single_interpolated_tap():
    room = RoomSpec(t60=0.0)
    h = generate_rir(room, (1.0, 1.0, 1.5), (2.0, 1.7, 1.2), fs=8000)
    d = np.linalg.norm([1.0, 0.7, -0.3])
    peak = np.argmax(np.abs(h))
    assert abs(peak - d / 343 * 8000) < 1
    assert np.count_nonzero(h) <= 8


@pytest.mark.parametrize("t60", [0.3, 0.5])
def test_schroeder_t60_within_20_percent(t60):
    room = RoomSpec(t60=t60)
    for src, mic in [((1.2, 1.5, 1.4), (3.7, 3.1, 1.6)), ((4.1, 0.8, 2.2), (2.0, 3.9, 1.1))]:
        h = generate_rir(room, src, mic, fs=8000)
        assert schroeder_t60(h, 8000) == pytest.approx(t60, rel=0.2)


def test_image_source_count_and_orders():
    room = RoomSpec(t60=0.3)
    pos, gains = image_sources(room, (1.0, 2.0, 1.5), 1)
    assert len(pos) == 7  # direct path plus one image per wall
    assert np.isclose(np.sort(gains)[-1], 1.0)


def test_position_outside_room_rejected():
    with pytest.raises(ValueError, match="outside"):
        generate_rir(RoomSpec(), (6.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        generate_rir(RoomSpec(), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0))
    with pytest.raises(ValueError):
        small_scene(speakers=[(2.5, 2.0, 3.5)])


def test_zero_sources_give_sensor_noise_only():
    spec = small_scene(speakers=[(2.5, 2.0, 1.5)])
    n = 4000
    mix, truth = render_scene(spec, [np.zeros(n)], [])
    assert np.array_equal(mix, truth.sensor_noise)
    assert np.mean(mix ** 2) == pytest.approx(10 ** (-30 / 10), rel=0.1)
    assert not truth.vad.any()


def test_anechoic_single_speaker_delayed_copies(rng):
    spec = small_scene(sensor_noise_snr_db=200.0)
    s = rng.standard_normal(8000)
    mix, truth = render_scene(spec, [s], [])
    a, b = mix[:, 0], mix[:, 2]
    cc = correlate(b, a, mode="full")
    lag = np.argmax(cc) - (len(a) - 1)
    assert abs(lag - truth.tdoa[1, 0] * 8000) <= 1


def test_directional_noise_calibrated_at_reference_mic(rng):
    spec = default_scene(t60=0.0, noise_sources=[{"position": [3.7, 1.2, 1.5], "snr_db": 10.0}])
    n = 16000
    mix, truth = render_scene(spec, [synthetic_speech(n, 8000, rng), synthetic_speech(n, 8000, rng)],
                              [rng.standard_normal(n)])
    p_speaker = np.mean(truth.speech_images[0][:, 0] ** 2)
    p_noise = np.mean(truth.noise_images[0][:, 0] ** 2)
    assert 10 * np.log10(p_speaker / p_noise) == pytest.approx(10.0, abs=0.1)
    p_other = np.mean(truth.speech_images[1][:, 0] ** 2)
    assert p_other == pytest.approx(p_speaker, rel=1e-9)
    total = np.mean(truth.speech_images.sum(axis=0)[:, 0] ** 2)
    assert 10 * np.log10(total / np.mean(truth.sensor_noise[:, 0] ** 2)) == pytest.approx(30.0, abs=0.2)


def test_render_length_mismatch():
    spec = small_scene(noise_sources=[NoiseSource((3.0, 3.0, 1.0))])
    with pytest.raises(ValueError, match="length"):
        render_scene(spec, [np.ones(100)], [np.ones(99)])


def test_render_is_deterministic(rng):
    spec = default_scene()
    sig = [rng.standard_normal(4000) for _ in range(4)]
    a, ta = render_scene(spec, sig[:2], sig[2:])
    b, tb = render_scene(spec, sig[:2], sig[2:])
    assert np.array_equal(a, b) and np.array_equal(ta.vad, tb.vad)


def test_vad_zero_exactly_where_speech_silent(rng):
    cfg = AnalysisConfig(frame_length=256, hop_length=128)
    s = rng.standard_normal(256 * 40)
    s[256 * 10:256 * 20] = 0.0
    images = np.repeat(s[None, :, None], 2, axis=2)
    vad = vad_labels(images, [0, 1], cfg)
    silent = [l for l in range(vad.shape[0]) if 256 * 10 <= l * 128 and l * 128 + 256 <= 256 * 20]
    assert silent and not vad[silent].any()
    assert vad[0].all()


def test_theoretical_tdoa_geometry():
    spec = small_scene()
    T = theoretical_tdoa(spec)
    ref = spec.mic_positions[spec.reference_rows]
    d = np.linalg.norm(ref - np.array(spec.speakers[0]), axis=1)
    assert T[0, 0] == 0.0
    assert T[1, 0] == pytest.approx((d[1] - d[0]) / 343.0)


class TestPerturbation:
    def test_zero_radius(self, rng):
        spec = default_scene()
        out = perturb_training_positions(spec, [0.0, 0.0], rng)
        assert np.array_equal(out[0], spec.speakers[0])

    def test_exact_radius(self, rng):
        spec = default_scene()
        for p, q in zip(spec.speakers, perturb_training_positions(spec, [0.05, 0.05], rng)):
            assert abs(np.linalg.norm(q - np.array(p)) - 0.05) < 1e-12

    def test_monte_carlo_mean(self):
        spec = default_scene()
        rng = np.random.default_rng(7)
        r, n = 0.05, 10_000
        draws = np.array([perturb_training_positions(spec, [r, r], rng)[0] for _ in range(n)])
        sigma = r / np.sqrt(3) / np.sqrt(n)  # per-coordinate std of the mean
        assert np.all(np.abs(draws.mean(axis=0) - spec.speakers[0]) < 3 * sigma)

    def test_impossible_radius(self, rng):
        with pytest.raises(ValueError, match="no in-room point"):
            perturb_training_positions(default_scene(), [10.0, 0.0], rng, max_tries=200)

    def test_negative_radius(self, rng):
        with pytest.raises(ValueError):
            perturb_training_positions(default_scene(), [-0.1, 0.0], rng)


class TestDiffuse:
    def test_first_zero_at_171_hz(self):
        # first zero of sin(x)/x at x = pi: f = c / (2 lambda)
        assert 343.0 / 2 == 171.5
        assert abs(diffuse_coherence(171.5, 1.0)) < 1e-15
        f = np.linspace(1, 400, 4000)
        g = diffuse_coherence(f, 1.0)
        first = f[np.argmax(g <= 0)]
        assert first == pytest.approx(171.5, abs=0.1)

    def test_limits(self):
        assert diffuse_coherence(0.0, 1.0) == 1.0
        assert diffuse_coherence(1000.0, 0.0) == 1.0
        assert abs(diffuse_coherence(343.0, 0.5)) < 1e-15

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            diffuse_coherence(-1.0, 1.0)

    @pytest.mark.parametrize("lam", [0.5, 1.0])
    def test_measured_coherence_tracks_model(self, lam):
        rng = np.random.default_rng(3)
        fs = 8000
        mics = np.array([[0.0, 0.0, 0.0], [lam, 0.0, 0.0]])
        x = synthesize_diffuse_field(mics, 8 * fs, fs, rng, n_sources=512)
        f, msc = coherence(x[:, 0], x[:, 1], fs=fs, nperseg=512)
        band = (f >= 100) & (f <= 3000)
        mad = np.mean(np.abs(msc[band] - diffuse_coherence(f[band], lam) ** 2))
        assert mad < 0.1


class TestVadError:
    def truth(self, vad):
        n = 10
        return GroundTruth(vad=np.asarray(vad, dtype=bool), speech_images=np.zeros((1, n, 1)),
                           noise_images=np.zeros((0, n, 1)), sensor_noise=np.zeros((n, 1)),
                           tdoa=np.zeros((1, 1)), reference_rows=[0])

    def test_ideal_vad(self, rng):
        assert len(simulate_vad_error(self.truth(np.ones((1000, 2))), 0.0, rng)) == 0

    def test_count_and_membership(self, rng):
        vad = rng.random((1000, 2)) < 0.9
        frames = simulate_vad_error(self.truth(vad), 0.05, rng)
        assert len(frames) == 50 and len(set(frames)) == 50
        assert vad[frames].all()

    def test_nested_across_rates(self):
        t = self.truth(np.ones((400, 1)))
        small = simulate_vad_error(t, 0.05, np.random.default_rng(1))
        large = simulate_vad_error(t, 0.15, np.random.default_rng(1))
        assert set(small) <= set(large)

    def test_rate_too_high(self, rng):
        vad = np.zeros((100, 1), dtype=bool)
        vad[:10] = True
        with pytest.raises(ValueError):
            simulate_vad_error(self.truth(vad), 0.2, rng)


def test_multi_mic_rirs_match_single(rng):
    room = RoomSpec(t60=0.3)
    mics = np.array([[1.0, 1.0, 1.0], [3.0, 2.0, 1.2]])
    H = generate_rirs(room, (2.0, 3.0, 1.5), mics, max_order=6)
    for m in range(2):
        h = generate_rir(room, (2.0, 3.0, 1.5), mics[m], max_order=6, length=H.shape[1])
        assert np.allclose(H[m], h, atol=1e-15)


def test_default_config_loads():
    spec = load_scene(__import__("dnbd.scene", fromlist=["x"]).default_scene_path())
    assert spec.node_sizes == (6, 6, 6, 6)
    assert len(spec.speakers) == 2 and len(spec.noise_sources) == 2
    ref = spec.mic_positions[spec.reference_rows]
    # adjacent microphones 3 cm apart
    assert np.linalg.norm(spec.nodes[0][1] - spec.nodes[0][0]) == pytest.approx(0.03)
    assert ref.shape == (4, 3)
