import numpy as np
import pytest

from cmedit.control import ControlConfig
from cmedit.io import (
    ConfigError,
    EditJob,
    EmptyFrameDirError,
    FrameFormatError,
    FrameSizeError,
    UnsupportedFormatError,
    decode_ppm,
    encode_pgm,
    encode_ppm,
    frame_name,
    job_from_config,
    load_config,
    load_frames,
    parse_config,
    save_frames,
    write_ppm,
)


def test_minimal_p6():
    img = decode_ppm(b"P6\n2 2\n255\n" + bytes(range(12)))
    assert img.shape == (2, 2, 3)
    assert img[1, 0].tolist() == [6, 7, 8]


def test_header_comments_and_whitespace():
    img = decode_ppm(b"P6 # made by hand\n1\t1 255\n" + b"\x01\x02\x03")
    assert img.tolist() == [[[1, 2, 3]]]


def test_ppm_round_trip(tmp_path):
    frames = [np.random.default_rng(i).integers(0, 256, (6, 5, 3)).astype(np.uint8) for i in range(3)]
    save_frames(tmp_path, frames)
    assert sorted(p.name for p in tmp_path.iterdir()) == [frame_name(i) for i in range(3)]
    back = load_frames(tmp_path)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(frames, back))


def test_encode_layout():
    assert encode_ppm(np.zeros((1, 2, 3), np.uint8)) == b"P6\n2 1\n255\n" + b"\0" * 6
    assert encode_pgm(np.full((2, 1), 9, np.uint8)) == b"P5\n1 2\n255\n\x09\x09"


@pytest.mark.parametrize("data", [b"P5\n1 1\n255\n\0", b"P3\n1 1\n255\n0 0 0", b"P6\n1 1\n65535\n" + b"\0" * 6])
def test_unsupported_formats(data):
    with pytest.raises(UnsupportedFormatError):
        decode_ppm(data)


@pytest.mark.parametrize("data", [b"GIF89a", b"P6\n2 2\n255\n\0\0", b"P6\nx 2\n255\n", b"P6\n2"])
def test_malformed(data):
    with pytest.raises(FrameFormatError):
        decode_ppm(data)


def test_errors_name_the_file(tmp_path):
    (tmp_path / "frame_0000.ppm").write_bytes(b"JUNK")
    with pytest.raises(FrameFormatError, match="frame_0000.ppm"):
        load_frames(tmp_path)


def test_size_mismatch(tmp_path):
    write_ppm(tmp_path / frame_name(0), np.zeros((4, 4, 3), np.uint8))
    write_ppm(tmp_path / frame_name(1), np.zeros((4, 5, 3), np.uint8))
    with pytest.raises(FrameSizeError, match="frame_0001.ppm"):
        load_frames(tmp_path)


def test_empty_dir(tmp_path):
    (tmp_path / "notes.txt").write_text("hi")
    with pytest.raises(EmptyFrameDirError):
        load_frames(tmp_path)
    with pytest.raises(EmptyFrameDirError):
        load_frames(tmp_path / "missing")


# config -------------------------------------------------------------------------------


def test_config_sets_r():
    cfg, job = parse_config("r = 1.5\n")
    assert cfg.r == 1.5 and job == {}


def test_empty_config_defaults():
    assert parse_config("") == (ControlConfig(), {})
    assert parse_config("# only a comment\n\n") == (ControlConfig(), {})


def test_full_config():
    text = """
    # thresholds
    t_s = 500
    t_c = -1          # off
    t_bg = 0x100
    thresh_edit = 0.25
    tokenflow = off
    blend_tokens = aligned
    src_prompt = "a cat # on a mat"
    tgt_prompt = 'a dog'
    steps = 6
    seed = 99
    """
    cfg, job = parse_config(text)
    assert (cfg.t_s, cfg.t_c, cfg.t_bg, cfg.thresh_edit) == (500, -1, 256, 0.25)
    assert cfg.tokenflow is False and cfg.blend_tokens == "aligned"
    assert job == {"src_prompt": "a cat # on a mat", "tgt_prompt": "a dog", "steps": 6, "seed": 99}


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("r = 0.5", r":1: r = 0.5 must be >= 1"),
        ("\nbogus = 1", r":2: unknown key 'bogus'"),
        ("t_s 3", r":1: expected 'key = value'"),
        ("steps = many", r":1: bad value for steps"),
        ("blend = maybe", r":1: bad value for blend"),
        ("\n\nt_bg = 1000", r":3: t_bg = 1000"),
        ("steps = 1", r":1: steps = 1"),
    ],
)
def test_config_errors(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text)


def test_load_config_file(tmp_path):
    p = tmp_path / "job.cfg"
    p.write_text("r = 2.0\nsteps = 3\n")
    cfg, job = load_config(p)
    assert cfg.r == 2.0 and job["steps"] == 3
    p.write_bytes(b"r = \xff\n")
    with pytest.raises(ConfigError, match="UTF-8"):
        load_config(p)


def test_job_overrides_beat_config(tmp_path):
    p = tmp_path / "job.cfg"
    p.write_text("steps = 3\nseed = 5\nsrc_prompt = a cat\n")
    job = job_from_config(p, steps=6, seed=None, tgt_prompt="a dog")
    assert (job.steps, job.seed, job.src_prompt, job.tgt_prompt) == (6, 5, "a cat", "a dog")
    assert job_from_config(None, steps=None) == EditJob()


@pytest.mark.parametrize(
    "job",
    [
        EditJob(src_prompt="a", tgt_prompt="b", steps=1),
        EditJob(src_prompt=" ", tgt_prompt="b"),
        EditJob(src_prompt="a", tgt_prompt=""),
        EditJob(src_prompt="a", tgt_prompt="b", seed=-1),
        EditJob(src_prompt="a", tgt_prompt="b", cfg=ControlConfig(r=0.1)),
    ],
)
def test_job_validation(job):
    with pytest.raises(ConfigError):
        job.validate()


def test_reconstruct_job_needs_no_target():
    EditJob(src_prompt="a").validate(need_target=False)
