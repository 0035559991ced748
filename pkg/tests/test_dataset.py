import shutil
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from facepipe.dataset import (ConfigurationError, DatasetError, DatasetManifest, FrameExtractionError,
                              SplitSpec, assign_splits, augment, build_manifest, extract_frames,
                              preprocess, split_counts)
from facepipe.imageio import ImageBuffer, write_image


def _write_y4m(path, frames, rate):
    h, w = frames[0].shape[:2]
    out = bytearray(f"YUV4MPEG2 W{w} H{h} F{rate}:1 Ip A1:1 C444\n".encode())
    for f in frames:
        out += b"FRAME\n" + np.ascontiguousarray(f.transpose(2, 0, 1)).tobytes()
    path.write_bytes(bytes(out))


def _extractor(fixtures_dir):
    return f"{sys.executable} {fixtures_dir / 'y4m_extract.py'} {{input}} {{fps}} {{outdir}}"


def test_extract_one_second_at_ten_fps(tmp_path, fixtures_dir, rng):
    frames = [rng.integers(0, 256, (8, 8, 3), dtype=np.uint8) for _ in range(30)]
    _write_y4m(tmp_path / "clip.y4m", frames, 30)
    n = extract_frames(tmp_path / "clip.y4m", tmp_path / "out", 10, _extractor(fixtures_dir))
    assert n == 10
    assert sorted(p.name for p in (tmp_path / "out").iterdir())[0] == "frame_000001.ppm"


def test_extract_long_clip_rate(tmp_path, fixtures_dir):
    # 30 s at a 48 fps source rate sampled at 24 fps -> about 720 frames
    frames = [np.full((2, 2, 3), i % 256, np.uint8) for i in range(30 * 48)]
    _write_y4m(tmp_path / "long.y4m", frames, 48)
    n = extract_frames(tmp_path / "long.y4m", tmp_path / "out", 24, _extractor(fixtures_dir))
    assert abs(n - 720) <= 0.05 * 720


def test_missing_extractor_writes_nothing(tmp_path):
    out = tmp_path / "frames"
    with pytest.raises(ConfigurationError, match="not found"):
        extract_frames(tmp_path / "v.mp4", out, 24, "no-such-decoder-xyz -i {input} {outdir}")
    assert not out.exists()


def test_extractor_failure_is_reported(tmp_path, fixtures_dir):
    (tmp_path / "bad.y4m").write_bytes(b"garbage\n")
    with pytest.raises(FrameExtractionError, match="not a YUV4MPEG2"):
        extract_frames(tmp_path / "bad.y4m", tmp_path / "out", 5, _extractor(fixtures_dir))


@pytest.mark.skipif(shutil.which("ffmpeg") is None, reason="ffmpeg not installed")
def test_default_command_with_ffmpeg(tmp_path, rng):
    frames = [rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(24)]
    _write_y4m(tmp_path / "clip.y4m", frames, 24)
    assert extract_frames(tmp_path / "clip.y4m", tmp_path / "out", 12) in (12, 13)


def test_split_counts_for_a_table_row():
    files = {"Rohith": [f"Rohith/{i:05d}.ppm" for i in range(1300)]}
    entries = assign_splits(files, SplitSpec((0.75, 0.25, 0.0), seed=0))
    splits = [s for _, _, s in entries]
    assert splits.count("train") == 975
    assert splits.count("validation") == 325


def test_degenerate_split():
    entries = assign_splits({"a": ["a/1", "a/2", "a/3"]}, SplitSpec((1.0, 0.0, 0.0)))
    assert {s for _, _, s in entries} == {"train"}


def test_seeds_change_membership_not_counts():
    files = {lab: [f"{lab}/{i}.ppm" for i in range(40)] for lab in ("x", "y")}
    a = assign_splits(files, SplitSpec((0.6, 0.2, 0.2), seed=1))
    b = assign_splits(files, SplitSpec((0.6, 0.2, 0.2), seed=1))
    c = assign_splits(files, SplitSpec((0.6, 0.2, 0.2), seed=2))
    assert a == b
    assert a != c
    count = lambda es: sorted((lab, s) for _, lab, s in es)  # noqa: E731
    assert count(a) == count(c)


@given(st.integers(1, 500), st.floats(0, 1), st.floats(0, 1))
def test_split_counts_partition(n, f1, f2):
    f1, f2 = min(f1, 1 - 1e-9), f2
    rest = 1 - f1
    fr = (f1, rest * f2, rest * (1 - f2))
    counts = split_counts(n, fr)
    assert sum(counts) == n
    assert min(counts) >= 0
    assert counts[0] >= 1


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec((0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        SplitSpec((1.2, -0.2, 0.0))


def _tree(root, counts):
    for label, n in counts.items():
        (root / label).mkdir(parents=True)
        for i in range(n):
            write_image(root / label / f"{i:03d}.ppm", ImageBuffer(np.full((4, 4, 3), i, np.uint8)))


def test_build_manifest_and_csv_round_trip(tmp_path):
    _tree(tmp_path, {"Ada": 8, "Bao": 4})
    (tmp_path / "Ada" / "notes.txt").write_text("ignored")
    m = build_manifest(tmp_path, SplitSpec((0.5, 0.25, 0.25), seed=4))
    assert m.labels == ["Ada", "Bao"]
    assert m.counts() == {"Ada": {"train": 4, "validation": 2, "test": 2},
                          "Bao": {"train": 2, "validation": 1, "test": 1}}
    m.save(tmp_path / "manifest.csv")
    text = (tmp_path / "manifest.csv").read_text()
    assert text.splitlines()[1] == "path,label,split"
    back = DatasetManifest.load(tmp_path / "manifest.csv")
    assert back.entries == m.entries
    assert back.seed == 4 and back.fractions == (0.5, 0.25, 0.25)
    assert back.resolve(back.entries[0][0]).is_file()


def test_empty_label_directory_is_named(tmp_path):
    _tree(tmp_path, {"Ada": 2})
    (tmp_path / "Ghost").mkdir()
    with pytest.raises(DatasetError, match="Ghost"):
        build_manifest(tmp_path)


def test_manifest_rejects_bad_rows():
    with pytest.raises(DatasetError):
        DatasetManifest.from_csv("a,b,c\n")
    with pytest.raises(DatasetError, match="split"):
        DatasetManifest.from_csv("path,label,split\nx.ppm,a,holdout\n")
    with pytest.raises(DatasetError, match="unique"):
        DatasetManifest.from_csv("path,label,split\nx.ppm,a,train\nx.ppm,b,train\n")


def test_preprocess_constant_image():
    t = preprocess(ImageBuffer(np.full((6, 5, 3), 128, np.uint8)), (6, 5))
    assert t.shape == (1, 3, 6, 5) and t.dtype == np.float32
    np.testing.assert_allclose(t, 128 / 255, rtol=1e-7)


def test_preprocess_checkerboard_downscale():
    board = (np.indices((8, 8)).sum(axis=0) % 2 * 255).astype(np.uint8)
    t = preprocess(ImageBuffer(board), (4, 4))
    np.testing.assert_allclose(t, 0.5, atol=1e-7)


def test_preprocess_mean_centering(rng):
    img = ImageBuffer(rng.integers(0, 256, (7, 9, 3), dtype=np.uint8))
    mean = img.pixels.reshape(-1, 3).mean(axis=0) / 255
    t = preprocess(img, (7, 9), mean=mean)
    assert np.all(np.abs(t.mean(axis=(0, 2, 3))) < 1e-6)


def test_preprocess_channel_conversion(rng):
    gray = ImageBuffer(rng.integers(0, 256, (4, 4, 1), dtype=np.uint8))
    t = preprocess(gray, (4, 4), channels=3)
    assert t.shape == (1, 3, 4, 4)
    assert np.array_equal(t[0, 0], t[0, 2])


def test_augment_identities(rng):
    img = ImageBuffer(rng.integers(0, 256, (6, 7, 3), dtype=np.uint8))
    assert augment(img, 5, flip_p=0.0, max_crop=0.0) == img
    once = augment(img, 1, max_crop=0.0, force_flip=True)
    assert augment(once, 2, max_crop=0.0, force_flip=True) == img


def test_augment_flip_reverses_columns(rng):
    px = rng.integers(0, 256, (3, 5, 3), dtype=np.uint8)
    out = augment(ImageBuffer(px), 0, max_crop=0.0, force_flip=True).pixels
    for y in range(3):
        for x in range(5):
            assert (out[y, x] == px[y, 4 - x]).all()


def test_augment_deterministic_and_bounded(rng):
    img = ImageBuffer(rng.integers(0, 256, (20, 20, 3), dtype=np.uint8))
    a, b = augment(img, 9), augment(img, 9)
    assert a == b
    assert 18 <= a.height <= 20 and 18 <= a.width <= 20
