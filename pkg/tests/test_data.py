import hashlib
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from recurvsr import data as D
from recurvsr.errors import ConfigError, DataIOError, InputError, ShapeError


def clip_of(n, size=4):
    frames = torch.arange(n, dtype=torch.float32).view(n, 1, 1, 1).expand(n, 3, size, size) / max(n, 1)
    return D.VideoClip(frames.contiguous())


def source_indices(clip):
    return [int(round(f[0, 0, 0].item() * 1000)) for f in clip.frames]


class TestStandardize:
    def test_identity(self):
        clip = clip_of(32)
        assert torch.equal(D.standardize_clip(clip, 32).frames, clip.frames)

    def test_downsample_64_to_32(self):
        expected = [int(np.floor(k * 63 / 31 + 0.5)) for k in range(32)]
        assert D.standardize_indices(64, 32) == expected
        assert expected[0] == 0 and expected[-1] == 63

    def test_upsample_5_to_32(self):
        idx = D.standardize_indices(5, 32)
        counts = np.bincount(idx, minlength=5)
        assert set(counts) <= {6, 7}
        assert counts.sum() == 32
        assert all(a <= b for a, b in zip(idx, idx[1:]))
        assert idx[0] == 0 and idx[-1] == 4

    @settings(max_examples=200, deadline=None)
    @given(n=st.integers(1, 80), target=st.integers(1, 64))
    def test_properties(self, n, target):
        idx = D.standardize_indices(n, target)
        assert len(idx) == target
        assert all(0 <= i < n for i in idx)
        assert all(a <= b for a, b in zip(idx, idx[1:]))
        if target > 1:
            assert idx[0] == 0 and idx[-1] == n - 1
        clip = clip_of(n)
        once = D.standardize_clip(clip, target)
        assert torch.equal(D.standardize_clip(once, target).frames, once.frames)

    def test_empty(self):
        with pytest.raises(InputError):
            D.standardize_indices(0, 32)
        with pytest.raises(InputError):
            D.VideoClip(torch.zeros(0, 3, 4, 4))


class TestDegrade:
    def test_constant_color_full_mask(self):
        color = torch.tensor([0.2, -0.4, 0.9]).view(1, 3, 1, 1)
        clip = D.VideoClip(color.expand(2, 3, 192, 192).contiguous())
        out = D.degrade(clip, torch.ones(2, 192, 192))
        assert out.frames.shape == (2, 3, 64, 64)
        torch.testing.assert_close(out.frames, color.expand(2, 3, 64, 64), rtol=0, atol=1e-6)

    def test_zero_mask_is_black(self):
        clip = D.VideoClip(torch.rand(2, 3, 192, 192))
        out = D.degrade(clip, torch.zeros(192, 192))
        assert torch.all(out.frames == -1.0)

    def test_three_pixel_checkerboard_block_average(self):
        yy, xx = np.meshgrid(np.arange(192), np.arange(192), indexing="ij")
        board = (((yy // 3) + (xx // 3)) % 2).astype(np.float32) * 2 - 1
        clip = D.VideoClip(torch.from_numpy(board).expand(1, 3, 192, 192).contiguous())
        out = D.degrade(clip, "none").frames[0, 0].numpy()
        # closed-form 3x3 block means
        expected = board.reshape(64, 3, 64, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_pixel_checkerboard_block_average(self):
        yy, xx = np.meshgrid(np.arange(192), np.arange(192), indexing="ij")
        board = ((yy + xx) % 2).astype(np.float32)
        clip = D.VideoClip(torch.from_numpy(board).expand(1, 3, 192, 192).contiguous())
        out = D.degrade(clip, "none").frames[0, 0].numpy()
        assert set(np.round(np.unique(out) * 9).astype(int)) == {4, 5}
        np.testing.assert_allclose(out.mean(), 0.5, atol=1e-6)

    def test_mask_shape_mismatch(self):
        with pytest.raises(ShapeError):
            D.degrade(D.VideoClip(torch.zeros(2, 3, 32, 32)), torch.ones(2, 16, 16))


def tree_checksums(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


class TestSynthesis:
    def test_deterministic(self, tmp_path):
        D.synthesize_toy_dataset(tmp_path / "a", n_subjects=2, n_frames=8, high_res=64, low_res=16, seed=7)
        D.synthesize_toy_dataset(tmp_path / "b", n_subjects=2, n_frames=8, high_res=64, low_res=16, seed=7)
        a, b = tree_checksums(tmp_path / "a"), tree_checksums(tmp_path / "b")
        assert a == b and len(a) > 0
        D.synthesize_toy_dataset(tmp_path / "c", n_subjects=2, n_frames=8, high_res=64, low_res=16, seed=8)
        assert tree_checksums(tmp_path / "c") != a

    def test_structure(self, tmp_path):
        m = D.synthesize_toy_dataset(tmp_path, n_subjects=4, n_frames=6, high_res=32, low_res=8, seed=0)
        assert len(m.records) == 4 * 6
        assert m.subjects("train") == {"s000", "s001", "s002"}
        assert m.subjects("test") == {"s003"}
        reloaded = D.SampleManifest.load(tmp_path / D.MANIFEST_NAME)
        assert reloaded.records == m.records
        for r in m.records:
            pair = D.load_clip_pair(m, r)
            assert torch.equal(pair.v_high[0], pair.identity)
            assert pair.v_low.resolution == (8, 8) and pair.v_high.resolution == (32, 32)
            diffs = (pair.v_high.frames[1:] - pair.v_high.frames[:-1]).abs().flatten(1).sum(1)
            assert torch.all(diffs > 0)

    def test_two_subjects_keep_one_for_test(self, tmp_path):
        m = D.synthesize_toy_dataset(tmp_path, n_subjects=2, n_frames=2, high_res=16, low_res=8, expressions=["fear"])
        assert m.subjects("train") == {"s000"} and m.subjects("test") == {"s001"}

    def test_low_res_background_is_black(self, tmp_path):
        m = D.synthesize_toy_dataset(tmp_path, n_subjects=1, n_frames=2, high_res=64, low_res=16, seed=0, expressions=["anger"])
        low = D.load_clip_pair(m, m.records[0]).v_low.frames
        assert torch.all(low[:, :, 0, 0] == -1.0)

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataIOError, match="file"):
            D.synthesize_toy_dataset(blocker / "sub", n_subjects=1, n_frames=2, high_res=16, low_res=8)


class TestLoading:
    @pytest.fixture
    def manifest(self, tmp_path):
        return D.synthesize_toy_dataset(tmp_path, n_subjects=2, n_frames=5, high_res=16, low_res=8, seed=1, expressions=["happiness", "fear"])

    def test_sample_count_and_previous(self, manifest):
        samples = list(D.load_pairs(manifest, "train"))
        n_train_clips = sum(r.split == "train" for r in manifest.records)
        assert len(samples) == 5 * n_train_clips
        firsts = [s for s in samples if s.frame_index == 1]
        assert all(torch.equal(s.previous, s.identity) for s in firsts)
        by_clip = [s for s in samples if s.subject_id == samples[0].subject_id and s.expression_label == samples[0].expression_label]
        for a, b in zip(by_clip, by_clip[1:]):
            assert torch.equal(b.previous, a.target)
        for s in samples:
            for x in (s.low_res, s.identity, s.target, s.previous):
                assert x.min() >= -1 and x.max() <= 1

    def test_derives_low_res_when_absent(self, manifest, tmp_path):
        for r in manifest.records:
            r.low_res_dir = None
        samples = list(D.load_pairs(manifest, "train", low_res=4))
        assert samples[0].low_res.shape == (3, 4, 4)

    def test_split_overlap_rejected(self, manifest, tmp_path):
        manifest.records[-1].subject_id = manifest.records[0].subject_id
        manifest.records[-1].split = "test"
        with pytest.raises(ConfigError, match="both"):
            list(D.load_pairs(manifest, "train"))
        manifest.save(tmp_path / "bad.jsonl")
        with pytest.raises(ConfigError, match="both"):
            D.SampleManifest.load(tmp_path / "bad.jsonl")

    def test_missing_frame_names_record(self, manifest):
        r = manifest.records[0]
        for p in (manifest.root / r.high_res_dir).iterdir():
            p.write_bytes(b"not a png")
            break
        with pytest.raises(DataIOError, match=f"{r.subject_id}/{r.expression_label}"):
            list(D.load_pairs(manifest, r.split))

    def test_manifest_record_format(self, manifest):
        line = (manifest.root / D.MANIFEST_NAME).read_text().splitlines()[0]
        rec = json.loads(line)
        assert set(rec) == {"subject_id", "expression_label", "identity_image_path", "high_res_dir", "low_res_dir", "split"}


class TestPixelMapping:
    def test_roundtrip_all_values(self):
        pixels = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
        x = D.normalize(pixels)
        assert x.shape == (3, 16, 16)
        assert x.min() == -1.0 and x.max() == 1.0
        assert np.array_equal(D.denormalize(x), pixels)

    def test_png_roundtrip_within_one_step(self, tmp_path):
        g = torch.Generator().manual_seed(0)
        x = torch.rand(3, 12, 12, generator=g) * 2 - 1
        D.write_image(x, tmp_path / "f.png")
        y = D.read_image(tmp_path / "f.png")
        assert (x - y).abs().max() <= 1 / 127.5 + 1e-6

    def test_clip_roundtrip(self, tmp_path):
        clip = D.VideoClip(D.normalize(np.random.default_rng(0).integers(0, 256, (4, 8, 8, 3), dtype=np.uint8)))
        paths = D.write_clip(clip, tmp_path / "c")
        assert [p.name for p in paths] == ["000.png", "001.png", "002.png", "003.png"]
        assert torch.equal(D.read_clip(tmp_path / "c").frames, clip.frames)
