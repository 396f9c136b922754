import numpy as np
import pytest

from conftest import make_camera, random_scene
from gs4d import tensorio
from gs4d.errors import DataError
from gs4d.sceneio import (load_manifest, load_scene, read_image, save_scene,
                          write_image)


class TestTensorFormat:
    def test_roundtrip_shapes(self, rng, tmp_path):
        for shape in [(3,), (4, 5), (2, 3, 4), (1, 1, 1, 7)]:
            arr = rng.normal(size=shape).astype(np.float32)
            p = tmp_path / "t.g4dt"
            tensorio.write_tensor(p, arr)
            back = tensorio.read_tensor(p)
            assert back.shape == arr.shape
            np.testing.assert_array_equal(back, arr)

    def test_float64_written_as_float32(self, rng, tmp_path):
        arr = rng.normal(size=(4, 4))
        p = tmp_path / "t.g4dt"
        tensorio.write_tensor(p, arr)
        back = tensorio.read_tensor(p)
        assert back.dtype == np.float32
        np.testing.assert_allclose(back, arr, atol=1e-6)

    def test_bytes_roundtrip(self, rng):
        arr = rng.normal(size=(3, 7)).astype(np.float32)
        assert np.array_equal(
            tensorio.tensor_from_bytes(tensorio.tensor_to_bytes(arr)), arr)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.g4dt"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(DataError):
            tensorio.read_tensor(p)

    def test_truncated_payload(self, rng, tmp_path):
        arr = rng.normal(size=(8, 8)).astype(np.float32)
        p = tmp_path / "t.g4dt"
        tensorio.write_tensor(p, arr)
        data = p.read_bytes()
        p.write_bytes(data[:-7])
        with pytest.raises(DataError):
            tensorio.read_tensor(p)


class TestSceneFormat:
    def test_roundtrip_exact_json_fields(self, rng, tmp_path):
        g = random_scene(rng, n=12, nfeat=8, with_motion=True)
        cam = make_camera()
        p = tmp_path / "scene.json"
        save_scene(p, g, [cam], anchor_time=7)
        back, cams, anchor = load_scene(p)
        assert anchor == 7
        assert len(cams) == 1
        # JSON float round trip is exact for doubles
        np.testing.assert_array_equal(back.mu, g.mu)
        np.testing.assert_array_equal(back.q, g.q)
        np.testing.assert_array_equal(back.s, g.s)
        np.testing.assert_array_equal(back.alpha, g.alpha)
        np.testing.assert_array_equal(back.c, g.c)
        np.testing.assert_array_equal(back.speeds, g.speeds)
        np.testing.assert_array_equal(back.dirs, g.dirs)
        # features ride in a float32 sidecar
        np.testing.assert_allclose(back.feature, g.feature, atol=1e-6)
        np.testing.assert_array_equal(cams[0].K, cam.K)

    def test_featureless_scene(self, rng, tmp_path):
        g = random_scene(rng, n=3, nfeat=0)
        p = tmp_path / "scene.json"
        save_scene(p, g, [make_camera()])
        back, _, _ = load_scene(p)
        assert back.feature is None
        assert not (tmp_path / "scene.features.g4dt").exists() or g.feature is not None

    def test_empty_scene(self, tmp_path):
        from gs4d.scene import GaussianSet
        p = tmp_path / "scene.json"
        save_scene(p, GaussianSet.empty(), [make_camera()])
        back, _, _ = load_scene(p)
        assert len(back) == 0

    def test_wrong_format_tag(self, tmp_path):
        p = tmp_path / "scene.json"
        p.write_text('{"format": "other"}')
        with pytest.raises(DataError):
            load_scene(p)

    def test_invalid_json_reports_line(self, tmp_path):
        p = tmp_path / "scene.json"
        p.write_text('{"format": "gs4d-scene",\n broken')
        with pytest.raises(DataError, match="line 2"):
            load_scene(p)

    def test_corrupt_record(self, rng, tmp_path):
        import json
        g = random_scene(rng, n=2, nfeat=0)
        p = tmp_path / "scene.json"
        save_scene(p, g, [make_camera()])
        doc = json.loads(p.read_text())
        del doc["gaussians"][1]["q"]
        p.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="record 1"):
            load_scene(p)


class TestImages:
    @pytest.mark.parametrize("ext", ["png", "ppm"])
    def test_quantization_roundtrip(self, rng, tmp_path, ext):
        img = rng.uniform(size=(9, 13, 3))
        p = tmp_path / f"img.{ext}"
        write_image(p, img)
        back = read_image(p)
        assert back.shape == img.shape
        # one 8-bit quantization step of error at most
        assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12

    def test_u8_exact_roundtrip(self, rng, tmp_path):
        u8 = rng.integers(0, 256, (6, 6, 3)).astype(np.uint8)
        img = u8 / 255.0
        for ext in ("png", "ppm"):
            p = tmp_path / f"img.{ext}"
            write_image(p, img)
            assert np.array_equal(read_image(p), img)

    def test_grayscale_promoted(self, tmp_path):
        write_image(tmp_path / "g.png", np.full((4, 4), 0.5))
        assert read_image(tmp_path / "g.png").shape == (4, 4, 3)

    def test_values_clipped(self, tmp_path):
        write_image(tmp_path / "c.ppm", np.array([[[2.0, -1.0, 0.5]]]))
        back = read_image(tmp_path / "c.ppm")
        np.testing.assert_allclose(back[0, 0], [1.0, 0.0, 0.5], atol=1e-2)

    def test_ppm_comment_header(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P6\n# comment line\n2 1\n255\n" + bytes(6))
        assert read_image(p).shape == (1, 2, 3)

    def test_non_p6_rejected(self, tmp_path):
        p = tmp_path / "c.ppm"
        p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(DataError):
            read_image(p)


def write_manifest(tmp_path, rng, times=(0, 1, 2), with_depth=False, cam=None):
    import json
    cam = cam or make_camera(width=8, height=8)
    doc = {"format": "gs4d-manifest",
           "cameras": [{"K": cam.K.tolist(), "R": cam.R.tolist(),
                        "t": cam.t.tolist(), "width": 8, "height": 8}],
           "frames": []}
    for i, t in enumerate(times):
        write_image(tmp_path / f"f{i}.png", rng.uniform(size=(8, 8, 3)))
        rec = {"time": t, "camera": 0, "image": f"f{i}.png"}
        if with_depth:
            tensorio.write_tensor(tmp_path / f"d{i}.g4dt",
                                  rng.uniform(1, 10, (8, 8)).astype(np.float32))
            tensorio.write_tensor(tmp_path / f"m{i}.g4dt",
                                  (rng.uniform(size=(8, 8)) > 0.5).astype(np.float32))
            rec["depth"] = f"d{i}.g4dt"
            rec["depth_valid"] = f"m{i}.g4dt"
        doc["frames"].append(rec)
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(doc))
    return p


class TestManifest:
    def test_basic_load(self, rng, tmp_path):
        p = write_manifest(tmp_path, rng)
        frames, cams = load_manifest(p)
        assert [f.timestamp for f in frames] == [0, 1, 2]
        assert frames[0].image.shape == (8, 8, 3)
        assert frames[0].depth_gt is None

    def test_depth_and_mask(self, rng, tmp_path):
        p = write_manifest(tmp_path, rng, with_depth=True)
        frames, _ = load_manifest(p)
        assert frames[0].depth_gt.shape == (8, 8)
        assert frames[0].depth_valid.dtype == bool

    def test_non_increasing_timestamps(self, rng, tmp_path):
        p = write_manifest(tmp_path, rng, times=(0, 2, 2))
        with pytest.raises(DataError, match="strictly increasing"):
            load_manifest(p)

    def test_empty_manifest(self, tmp_path):
        import json
        p = tmp_path / "manifest.json"
        p.write_text(json.dumps({"format": "gs4d-manifest", "frames": []}))
        with pytest.raises(DataError):
            load_manifest(p)

    def test_missing_image_file(self, rng, tmp_path):
        p = write_manifest(tmp_path, rng)
        (tmp_path / "f1.png").unlink()
        with pytest.raises((DataError, FileNotFoundError)):
            load_manifest(p)
