import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from vpseg.field import label_volumes
from vpseg.io import FormatError
from vpseg.synthdata import SynthConfig, generate, load_dataset, save_dataset
from vpseg.wasserstein import w1_empirical_1d


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(intensities=(0.1, 1.2, 0.5))
    with pytest.raises(ValueError):
        SynthConfig(ratio_ranges=((0.3, 0.4), (0.2, 0.3)))  # cannot fit
    with pytest.raises(ValueError):
        SynthConfig(n_classes=2)  # intensity count mismatch
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"size": 16, "colour": 1})
    cfg = SynthConfig(size=16)
    assert SynthConfig.from_dict(cfg.to_dict()) == cfg


def test_noiseless_images_take_class_means():
    cfg = SynthConfig(noise_sigma=0.0, count=5, intensities=(0.0, 1.0, 0.6))
    for s in generate(cfg):
        assert set(np.unique(s.image)) <= {0.0, 1.0, np.rint(0.6 * 255) / 255}
        for k, level in enumerate([0.0, 1.0, np.rint(0.6 * 255) / 255]):
            assert np.all(s.image[s.mask == k] == level)


def test_volumes_match_histogram():
    for s in generate(SynthConfig(count=20)):
        assert_array_equal(s.volumes, label_volumes(s.mask, 3))
        assert s.volumes.min() > 0


def test_nested_geometry():
    s = generate(SynthConfig(count=1, noise_sigma=0.0))[0]
    ys, xs = np.nonzero(s.mask == 1)
    cy, cx = ys.mean(), xs.mean()
    # the inner disc sits inside the shell: its centre pixel is class 1
    assert s.mask[int(round(cy)), int(round(cx))] == 1


def test_mean_ratio_for_k2():
    cfg = SynthConfig(n_classes=2, intensities=(0.2, 0.8), ratio_ranges=((0.2, 0.3),), count=200, seed=4)
    ratios = [s.volumes[1] / s.mask.size for s in generate(cfg)]
    assert 0.22 <= np.mean(ratios) <= 0.28


def test_pure_function_of_config():
    a = generate(SynthConfig(count=4, seed=9))
    b = generate(SynthConfig(count=6, seed=9))
    for x, y in zip(a, b[:4]):
        assert_array_equal(x.image, y.image)
        assert_array_equal(x.mask, y.mask)
    c = generate(SynthConfig(count=4, seed=10))
    assert not np.array_equal(a[0].image, c[0].image)


def test_volume_distribution_converges():
    a = generate(SynthConfig(count=500, seed=1, size=24))
    b = generate(SynthConfig(count=500, seed=2, size=24))
    for k in range(3):
        ra = [s.volumes[k] / s.mask.size for s in a]
        rb = [s.volumes[k] / s.mask.size for s in b]
        assert w1_empirical_1d(ra, rb) <= 0.03


def test_round_trip_and_manifest(tmp_path):
    cfg = SynthConfig(count=5, seed=3)
    samples = generate(cfg)
    save_dataset(samples, tmp_path, cfg)
    back = load_dataset(tmp_path)
    for x, y in zip(samples, back):
        assert_array_equal(x.image, y.image)
        assert_array_equal(x.mask, y.mask)
        assert_array_equal(x.volumes, y.volumes)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3
    regenerated = generate(SynthConfig.from_dict(manifest["config"]))
    assert all(np.array_equal(x.image, y.image) for x, y in zip(samples, regenerated))


def test_load_errors(tmp_path):
    cfg = SynthConfig(count=3)
    save_dataset(generate(cfg), tmp_path, cfg)
    (tmp_path / "img_0002.pgm").unlink()
    with pytest.raises(FormatError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_dataset(tmp_path)
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "missing")
