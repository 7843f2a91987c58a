import numpy as np
import pytest
import torch

from datasets import make_dataset
from datasets.sampler import SeededSampler
from datasets.synthetic import (DEFAULT_SPEC, SyntheticSceneSpec, class_prototypes, degrade_heterogeneous,
                                degrade_spatial, degrade_spectral, extract_patches, gaussian_kernel,
                                generate_scene, inject_noise, load_scene, response_matrix, save_scene,
                                spectral_angle, split_scene)
from network.tensor_engine import RngState
from transforms.transforms import AddGaussianNoise, MaskingNoise, measured_snr
from utils.errors import DimensionError, FormatError, ParameterError


class TestDegrade:

    def test_response_rows_are_stochastic(self):
        R = response_matrix(8, 64)
        assert R.shape == (8, 64)
        assert np.allclose(R.sum(axis=1), 1.0)
        assert (R >= 0).all()

    def test_spectral_is_per_pixel_matmul(self):
        rng = np.random.default_rng(0)
        hi = rng.random((3, 4, 10))
        R = response_matrix(2, 10)
        lo = degrade_spectral(hi, R)
        assert lo.shape == (3, 4, 2)
        assert np.allclose(lo[1, 2], R @ hi[1, 2])
        with pytest.raises(DimensionError):
            degrade_spectral(hi, response_matrix(2, 9))

    def test_spatial_zero_sigma_is_identity(self):
        cube = np.random.default_rng(1).random((5, 5, 2))
        assert np.array_equal(degrade_spatial(cube, 0.0), cube)

    def test_spatial_keeps_constant_cube(self):
        cube = np.full((9, 7, 3), 0.4)
        assert np.allclose(degrade_spatial(cube, 1.5), 0.4)

    def test_spatial_delta_gives_kernel(self):
        cube = np.zeros((15, 15, 1))
        cube[7, 7, 0] = 1.0
        k = gaussian_kernel(1.0)
        assert k.shape == (7,)
        out = degrade_spatial(cube, 1.0)[:, :, 0]
        assert np.allclose(out[4:11, 4:11], np.outer(k, k))
        assert abs(out.sum() - 1.0) < 1e-12

    def test_negative_sigma(self):
        with pytest.raises(ParameterError):
            degrade_spatial(np.zeros((3, 3, 1)), -1.0)

    def test_heterogeneous_stays_in_unit_range(self):
        out = degrade_heterogeneous(np.random.default_rng(2).random((6, 6, 3)), 4.0, np.random.default_rng(3))
        assert out.min() >= 0.0 and abs(out.max() - 1.0) < 1e-12


class TestNoise:

    def test_infinite_snr_is_identity(self):
        cube = np.random.default_rng(0).random((4, 4, 2))
        assert np.array_equal(inject_noise(cube, float('inf'), np.random.default_rng(0)), cube)

    def test_snr_before_clamping(self):
        rng = np.random.default_rng(4)
        cube = rng.uniform(0.2, 0.8, (64, 64, 8))
        for snr in (5.0, 10.0, 20.0, 40.0):
            noisy = inject_noise(cube, snr, np.random.default_rng(5), clamp=False)
            assert abs(measured_snr(cube, noisy) - snr) < 0.5

    def test_clamped_output_in_unit_range(self):
        cube = np.random.default_rng(6).random((8, 8, 2))
        out = AddGaussianNoise(0.0, np.random.default_rng(7))(cube)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_nan_snr(self):
        with pytest.raises(ParameterError):
            inject_noise(np.ones((2, 2, 1)), float('nan'), np.random.default_rng(0))

    def test_masking_noise(self):
        x = torch.ones(200, 50, dtype=torch.float64)
        a = MaskingNoise(0.1, RngState(1))(x)
        b = MaskingNoise(0.1, RngState(1))(x)
        assert torch.equal(a, b)
        assert set(torch.unique(a).tolist()) <= {0.0, 1.0}
        assert 0.05 < float((a == 0).double().mean()) < 0.15
        assert MaskingNoise(0.0)(x) is x
        with pytest.raises(ParameterError):
            MaskingNoise(1.0)


class TestPatches:

    def _scene(self, tiny_scene, cube):
        scene = generate_scene(tiny_scene.spec)
        scene.lo_cube = cube
        return scene

    def test_reflect_corner_window(self, tiny_scene):
        h, w, d1 = tiny_scene.lo_cube.shape
        cube = np.arange(h * w * d1, dtype=np.float64).reshape(h, w, d1)
        scene = self._scene(tiny_scene, cube)
        batch = extract_patches(scene, [0], 3)
        assert batch.patches.shape == (1, d1, 3, 3)
        reflect = [1, 0, 1]
        for i in range(3):
            for j in range(3):
                assert np.array_equal(batch.patches[0, :, i, j], cube[reflect[i], reflect[j]])

    def test_interior_window(self, tiny_scene):
        h, w, d1 = tiny_scene.lo_cube.shape
        cube = np.random.default_rng(0).random((h, w, d1))
        scene = self._scene(tiny_scene, cube)
        pid = 5 * w + 6
        batch = extract_patches(scene, [pid], 3)
        assert np.array_equal(batch.patches[0], cube[4:7, 5:8].transpose(2, 0, 1))
        assert np.array_equal(batch.spectra[0], scene.hi_cube[5, 6])
        assert batch.labels[0] == scene.labels[5, 6]

    def test_single_pixel_patch(self, tiny_scene):
        batch = extract_patches(tiny_scene, tiny_scene.ids('train'), 1)
        assert batch.patches.shape[2:] == (1, 1)

    def test_even_patch_rejected(self, tiny_scene):
        with pytest.raises(ParameterError):
            extract_patches(tiny_scene, [0], 4)

    def test_dataset_items(self, tiny_scene):
        dataset = make_dataset(tiny_scene, tiny_scene.ids('unlabeled'), 3, with_spectra=False, with_labels=False)
        item = dataset[0]
        assert set(item) == {'index', 'x_o'}
        assert item['x_o'].dtype == torch.float64


class TestScene:

    def test_splits_partition_every_pixel(self, tiny_scene):
        masks = tiny_scene.train_mask.astype(int) + tiny_scene.unlabeled_mask + tiny_scene.test_mask
        assert (masks == 1).all()

    def test_every_class_in_train_and_test(self, tiny_scene):
        spec = tiny_scene.spec
        for c in range(spec.num_classes):
            in_class = tiny_scene.labels == c
            assert (tiny_scene.train_mask & in_class).sum() >= min(spec.min_per_class, in_class.sum() - 1)
            assert (tiny_scene.test_mask & in_class).sum() >= 1

    def test_split_respects_fractions(self):
        labels = np.repeat([0, 1], 100).reshape(20, 10)
        train, unlabeled, test = split_scene(labels, 0.1, 0.3, 2, np.random.default_rng(0))
        assert train.sum() == 20 and unlabeled.sum() == 60 and test.sum() == 120

    def test_cube_ranges(self, tiny_scene):
        assert tiny_scene.hi_cube.shape == (12, 12, 16)
        assert tiny_scene.lo_cube.shape == (12, 12, 4)
        for cube in (tiny_scene.hi_cube, tiny_scene.lo_cube):
            assert cube.min() >= 0.0 and cube.max() <= 1.0

    def test_generation_is_a_function_of_the_seed(self, tiny_scene):
        again = generate_scene(tiny_scene.spec)
        assert np.array_equal(again.hi_cube, tiny_scene.hi_cube)
        assert np.array_equal(again.train_mask, tiny_scene.train_mask)
        other = generate_scene(tiny_scene.spec._replace(seed=8))
        assert not np.array_equal(other.hi_cube, tiny_scene.hi_cube)

    def test_prototypes_keep_min_angle(self):
        protos = class_prototypes(6, 64, 15.0, np.random.default_rng(0))
        for a in range(6):
            for b in range(a + 1, 6):
                assert spectral_angle(protos[a], protos[b]) >= 15.0

    def test_unreachable_min_angle(self):
        # non-negative spectra are never more than 90 degrees apart
        with pytest.raises(ParameterError):
            class_prototypes(3, 16, 95.0, np.random.default_rng(0))

    def test_invalid_spec(self):
        with pytest.raises(ParameterError):
            DEFAULT_SPEC._replace(label_fraction=1.0).validate()
        with pytest.raises(ParameterError):
            DEFAULT_SPEC._replace(bands_lo=64).validate()
        with pytest.raises(ParameterError):
            DEFAULT_SPEC._replace(modality='lidar').validate()

    def test_sar_scene(self, tiny_scene):
        scene = generate_scene(tiny_scene.spec._replace(modality='sar'))
        assert scene.lo_cube.shape == tiny_scene.lo_cube.shape
        assert scene.lo_cube.max() <= 1.0

    def test_save_load(self, tiny_scene, tmp_path):
        out = str(tmp_path / 'scene')
        save_scene(tiny_scene, out)
        back = load_scene(out)
        assert back.spec == tiny_scene.spec
        assert np.array_equal(back.lo_cube, tiny_scene.lo_cube)
        assert np.array_equal(back.test_mask, tiny_scene.test_mask)
        assert SyntheticSceneSpec.parse(tiny_scene.spec.format()) == tiny_scene.spec

    def test_tampered_array_fails_hash(self, tiny_scene, tmp_path):
        out = str(tmp_path / 'scene')
        save_scene(tiny_scene, out)
        with open(str(tmp_path / 'scene' / 'labels.xmdt'), 'ab') as f:
            f.write(b'\x00')
        with pytest.raises(FormatError, match='hash'):
            load_scene(out)


class TestSampler:

    def test_same_epoch_same_order(self):
        data = list(range(10))
        a = SeededSampler(data, 3)
        b = SeededSampler(data, 3)
        assert list(a) == list(b)
        a.set_epoch(1)
        assert list(a) != list(b)

    def test_cycles_small_datasets(self):
        order = list(SeededSampler(list(range(4)), 0, num_samples=10))
        assert len(order) == 10
        assert sorted(order[:4]) == [0, 1, 2, 3]
