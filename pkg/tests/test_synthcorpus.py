import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppl.patchgrid import PatchGrid, PatchIndex, patch_pixel_bounds
from ppl.synthcorpus import (
    BAYER_2X2,
    DEFAULT_STRENGTH,
    ArtifactProfile,
    CorpusConfig,
    CorpusError,
    SampleRecord,
    SplitConfig,
    build_corpus,
    corrupt,
    default_profiles,
    dominant_region,
    gen_real,
    inject_dominant_artifact,
    jpeg_available,
    load_corpus,
    load_manifest,
    quantize_8bit,
    radial_power,
    reconstruct,
)

PROFILES = default_profiles()
KINDS = ["checker", "notch", "quant"]


def test_default_strength_matches_reference():
    assert DEFAULT_STRENGTH == 0.25


def test_gen_real_deterministic_and_distinct():
    a, b = gen_real(7, 112, 112), gen_real(7, 112, 112)
    assert a.dtype == np.float32 and a.shape == (112, 112, 3)
    assert np.array_equal(a, b)
    c = gen_real(8, 112, 112)
    assert (np.abs(a - c) > 0.01).mean() > 0.10


def test_gen_real_range_many_seeds():
    for seed in range(1000):
        img = gen_real(seed, 28, 28)
        assert img.min() >= 0.0 and img.max() <= 1.0 and np.isfinite(img).all()


def test_gen_real_power_spectrum_decays():
    # mean over a few images: low-frequency band power dominates high-frequency power
    p = np.mean([radial_power(gen_real(s, 112, 112)) for s in range(8)], axis=0)
    assert p[0] > p[2] > p[-1]


def test_gen_real_rejects_bad_size():
    with pytest.raises(ValueError):
        gen_real(0, 0, 28)


def test_checker_closed_form():
    img = np.full((28, 28, 3), 0.5, np.float32)
    out = reconstruct(img, PROFILES["checker"], 0.25)
    depth = 0.5
    amp = 0.25 * 0.25 * depth
    yy, xx = np.mgrid[0:28, 0:28]
    want = np.where((yy + xx) % 2 == 0, 0.5 - amp, 0.5 + amp)
    assert np.allclose(out[:, :, 0], want, atol=1e-7)
    assert np.allclose(out[:, :, 1], want, atol=1e-7)


def test_quant_closed_form_on_constant():
    # ordered dither: floor(x/step + (B+0.5)/4) * step, tiled 2x2 Bayer thresholds
    x = 0.3
    img = np.full((4, 4, 1), x, np.float32)
    out = reconstruct(img, PROFILES["quant"], 0.5)
    step = 0.25 * 0.5
    thr = np.tile((BAYER_2X2 + 0.5) / 4, (2, 2))
    want = np.floor(np.float64(np.float32(x)) / step + thr) * step
    assert np.allclose(out[:, :, 0], want, atol=1e-7)


@pytest.mark.parametrize("kind", KINDS)
def test_reconstruct_deviation_bound(kind):
    for seed in range(100):
        img = gen_real(seed, 56, 56)
        for s in (0.1, 0.25, 1.0):
            out = reconstruct(img, PROFILES[kind], s)
            assert out.shape == img.shape and out.dtype == img.dtype
            # float32 storage of the bound adds at most one ulp-scale error
            assert np.abs(out.astype(np.float64) - img).max() <= 0.25 * s + 1e-6


@pytest.mark.parametrize("kind", KINDS)
def test_fingerprint_in_every_patch(kind):
    grid = PatchGrid(112, 112, 14)
    for seed in range(20):
        img = gen_real(seed, 112, 112)
        for s in (0.1, 0.25):
            out = reconstruct(img, PROFILES[kind], s)
            for idx in grid.indices():
                top, left, h, w = patch_pixel_bounds(grid, idx)
                dev = np.abs(out[top:top + h, left:left + w] - img[top:top + h, left:left + w]).mean()
                assert dev > 0, (kind, seed, s, idx)


@pytest.mark.parametrize("kind", KINDS)
def test_reconstruct_monotone_in_strength(kind):
    img = gen_real(3, 56, 56)
    devs = [np.abs(reconstruct(img, PROFILES[kind], s) - img).max() for s in (0.01, 0.05, 0.25, 1.0)]
    assert all(a <= b + 1e-7 for a, b in zip(devs, devs[1:]))
    assert devs[0] <= 0.25 * 0.01 + 1e-6


def test_reconstruct_deterministic_and_validates():
    img = gen_real(1, 28, 28)
    p = PROFILES["notch"]
    assert np.array_equal(reconstruct(img, p, 0.25), reconstruct(img, p, 0.25))
    for s in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            reconstruct(img, p, s)


def test_profile_validation_and_round_trip():
    with pytest.raises(ValueError):
        ArtifactProfile("x", "blur")
    with pytest.raises(ValueError):
        ArtifactProfile("x", "spectral-notch", {}, True, {"size": 5})
    p = PROFILES["quant+dominant"]
    assert ArtifactProfile.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        ArtifactProfile.from_dict({**p.to_dict(), "extra": 1})


def test_dominant_amplitude_zero_is_identity():
    g = PatchGrid(28, 28, 14)
    img = gen_real(2, 28, 28)
    assert np.array_equal(inject_dominant_artifact(img, g, {PatchIndex(0, 0)}, 0.0), img)


def test_dominant_is_local():
    g = PatchGrid(56, 56, 14)
    img = gen_real(2, 56, 56)
    out = inject_dominant_artifact(img, g, {PatchIndex(0, 0)}, 0.5)
    diff = np.any(out != img, axis=2)
    assert diff[:14, :14].any()
    diff[:14, :14] = False
    assert not diff.any()


def test_dominant_empty_region_rejected():
    g = PatchGrid(28, 28, 14)
    with pytest.raises(ValueError):
        inject_dominant_artifact(gen_real(0, 28, 28), g, set(), 0.5)


@given(st.integers(1, 4), st.integers(0, 10_000))
def test_dominant_region_size(size, seed):
    g = PatchGrid(112, 112, 14)
    prof = ArtifactProfile("d", "level-quantization", {}, True, {"size": size})
    region = dominant_region(g, prof, seed)
    assert len(region) == size
    rows = sorted({i.row for i in region})
    cols = sorted({i.col for i in region})
    # contiguous block
    assert len(rows) * len(cols) == size
    assert rows == list(range(rows[0], rows[-1] + 1)) and cols == list(range(cols[0], cols[-1] + 1))


def test_dominant_linear_probe_separates():
    # logistic probe on per-patch mean absolute horizontal gradient separates injected images
    g = PatchGrid(28, 28, 14)
    feats, labels = [], []
    for i in range(400):
        img = gen_real(10_000 + i, 28, 28)
        if i % 2:
            img = inject_dominant_artifact(img, g, {PatchIndex(0, 0)}, 0.5)
        grad = np.abs(np.diff(img.mean(axis=2), axis=1))
        feats.append([grad[:14, :13].mean(), grad[:14, 14:].mean(), grad[14:, :13].mean(), grad[14:, 14:].mean()])
        labels.append(i % 2)
    x = np.asarray(feats)
    x = (x - x.mean(0)) / x.std(0)
    y = np.asarray(labels, dtype=np.float64)
    w = np.zeros(4)
    b = 0.0
    for _ in range(2000):
        p = 1 / (1 + np.exp(-(x @ w + b)))
        w -= 0.5 * x.T @ (p - y) / len(y)
        b -= 0.5 * (p - y).mean()
    acc = (((x @ w + b) > 0) == (y == 1)).mean()
    assert acc == 1.0


def test_corrupt_identities():
    img = gen_real(5, 56, 56)
    assert np.array_equal(corrupt(img, "gaussian_blur", 0.0), img)
    assert np.abs(corrupt(img, "resize", 1.0) - img).max() <= 1e-6
    const = np.full((28, 28, 3), 0.37, np.float32)
    assert np.allclose(corrupt(const, "gaussian_blur", 2.0), const, atol=1e-7)


def test_blur_matches_separable_reference():
    from scipy.ndimage import correlate1d

    img = gen_real(9, 28, 28).astype(np.float64)
    sigma = 1.5
    radius = int(4 * sigma + 0.5)
    t = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    want = correlate1d(correlate1d(img, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")
    got = corrupt(img.astype(np.float32), "gaussian_blur", sigma)
    assert np.abs(got - np.clip(want, 0, 1)).max() < 1e-6


def test_resize_shape_and_smoothing():
    img = gen_real(4, 56, 56)
    out = corrupt(img, "resize", 0.5)
    assert out.shape == img.shape and out.dtype == img.dtype
    assert not np.array_equal(out, img)


def test_corrupt_errors():
    img = gen_real(4, 28, 28)
    with pytest.raises(ValueError):
        corrupt(img, "gaussian_blur", 3.5)
    with pytest.raises(ValueError):
        corrupt(img, "resize", 0.4)
    with pytest.raises(ValueError):
        corrupt(img, "sharpen", 1.0)
    with pytest.raises(ValueError):
        corrupt(img, "gaussian_blur", -1.0, check_range=False)
    assert corrupt(img, "gaussian_blur", 4.0, check_range=False).shape == img.shape


@pytest.mark.skipif(not jpeg_available(), reason="no JPEG codec")
def test_jpeg_round_trip_shape():
    img = gen_real(4, 28, 28)
    out = corrupt(img, "jpeg", 90)
    assert out.shape == img.shape and np.abs(out - img).max() < 0.3


def _small_config(seed=0):
    return CorpusConfig(height=28, width=28, master_seed=seed, splits=[
        SplitConfig("train", 6, 6, "quant+dominant"),
        SplitConfig("test", 3, 3, "checker"),
    ])


def _digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_build_corpus_counts_and_bookkeeping(tmp_path):
    cfg = CorpusConfig(height=28, width=28, splits=[SplitConfig("train", 100, 100, "quant+dominant")])
    manifests = build_corpus(cfg, tmp_path, workers=1)
    m = manifests["train"]
    labels = m.labels()
    assert len(m.records) == 200 and labels.sum() == 100
    for r in m.records:
        assert (tmp_path / "train" / r.image_path).exists()
        if r.image_label == 1:
            assert r.generator_tag == "quant+dominant" and r.patch_labels == (1,) * 4
        else:
            assert r.generator_tag == "real" and r.patch_labels is None
    meta = json.loads((tmp_path / "corpus.json").read_text())
    assert meta["split_sizes"] == {"train": 200}
    assert {"height", "width", "channels", "patch_size", "profiles", "master_seed"} <= set(meta)


def test_build_corpus_deterministic_serial_and_parallel(tmp_path):
    build_corpus(_small_config(), tmp_path / "a", workers=1)
    build_corpus(_small_config(), tmp_path / "b", workers=2)
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    build_corpus(_small_config(seed=1), tmp_path / "c", workers=1)
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_manifest_round_trip_and_images(tmp_path):
    build_corpus(_small_config(), tmp_path, workers=1)
    corpus = load_corpus(tmp_path)
    assert set(corpus) == {"train", "test"}
    m = load_manifest(tmp_path / "test")
    assert m.grid == PatchGrid(28, 28, 14) and m.split == "test"
    img = m.load_image(m.records[-1])
    assert img.shape == (28, 28, 3)
    # stored pixels equal the 8-bit quantization of the in-memory render
    from ppl.synthcorpus import make_fake
    cfg = _small_config()
    want = quantize_8bit(make_fake(m.records[-1].seed, cfg, cfg.profiles["checker"], 0.25))
    assert np.array_equal(img, want)


def test_manifest_bad_line(tmp_path):
    build_corpus(_small_config(), tmp_path, workers=1)
    path = tmp_path / "test" / "manifest.jsonl"
    path.write_text(path.read_text() + '{"image_path": "x.png"}\n')
    with pytest.raises(CorpusError):
        load_manifest(path)


def test_sample_record_validation():
    with pytest.raises(CorpusError):
        SampleRecord.from_dict({"image_path": "a", "image_label": 2, "generator_tag": "t", "seed": 0})
    rec = SampleRecord("a.png", 1, (1, 1), "quant", 3)
    assert SampleRecord.from_dict(json.loads(rec.to_json())) == rec


def test_corpus_config_rejects_unknown_and_invalid():
    with pytest.raises(CorpusError):
        CorpusConfig.from_dict({"colour": 1})
    with pytest.raises(CorpusError):
        CorpusConfig.from_dict({"splits": [{"name": "a", "n_real": 1, "n_fake": 1, "profile": "nope"}]})
    with pytest.raises(ValueError):
        CorpusConfig.from_dict({"height": 30})
    cfg = CorpusConfig.from_dict(_small_config().to_dict())
    assert cfg.to_dict() == _small_config().to_dict()
