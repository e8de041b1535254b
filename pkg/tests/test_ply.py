import numpy as np
import pytest

from robustsplat.ply import load_ply, save_ply

from conftest import random_cloud


class TestPly:
    def test_roundtrip_float32_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        cloud = random_cloud(rng, 17, degree=2)
        p = tmp_path / "c.ply"
        save_ply(cloud, p)
        back = load_ply(p)
        assert len(back) == 17
        assert back.degree == 2
        for field in ('mu', 'log_scale', 'rot', 'opacity_logit', 'sh'):
            a = getattr(cloud, field).astype(np.float32)
            b = getattr(back, field).astype(np.float32)
            assert np.array_equal(a, b)

    def test_property_layout(self, tmp_path):
        rng = np.random.default_rng(1)
        cloud = random_cloud(rng, 2, degree=1)
        p = tmp_path / "c.ply"
        save_ply(cloud, p)
        blob = p.read_bytes()
        header, _, body = blob.partition(b'end_header\n')
        lines = header.decode().splitlines()
        props = [l.split()[-1] for l in lines if l.startswith('property')]
        assert props[:14] == ['x', 'y', 'z', 'opacity_logit', 'log_scale_0',
                              'log_scale_1', 'log_scale_2', 'rot_w', 'rot_x',
                              'rot_y', 'rot_z', 'f_dc_0', 'f_dc_1', 'f_dc_2']
        assert props[14:] == [f'f_rest_{i}' for i in range(9)]
        data = np.frombuffer(body, dtype='<f4').reshape(2, 23)
        assert np.allclose(data[:, 0:3], cloud.mu.astype(np.float32))
        assert np.allclose(data[:, 3], cloud.opacity_logit.astype(np.float32))
        # f_rest channel-major: first 3 entries are channel 0's rest coeffs
        assert np.allclose(data[0, 14:17], cloud.sh[0, 0, 1:].astype(np.float32))
        assert np.allclose(data[0, 17:20], cloud.sh[0, 1, 1:].astype(np.float32))

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(2)
        cloud = random_cloud(rng, 5)
        p = tmp_path / "c.ply"
        save_ply(cloud, p)
        blob = p.read_bytes()
        p.write_bytes(blob[:-10])
        with pytest.raises(ValueError, match="truncated"):
            load_ply(p)

    def test_not_ply(self, tmp_path):
        p = tmp_path / "x.ply"
        p.write_bytes(b"hello world")
        with pytest.raises(ValueError):
            load_ply(p)

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        cloud = random_cloud(rng, 9)
        p1, p2 = tmp_path / "a.ply", tmp_path / "b.ply"
        save_ply(cloud, p1)
        save_ply(cloud, p2)
        assert p1.read_bytes() == p2.read_bytes()
