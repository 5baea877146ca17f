import numpy as np
import pytest

from rail.discriminator import DiscriminatorParams
from rail.errors import FormatError
from rail.formats import (Checkpoint, config_digest, file_digest,
                          read_checkpoint, read_demos, write_checkpoint,
                          write_demos)
from rail.highway import HighwayConfig, Trajectory
from rail.policy import NormalizerState, PolicyParams, normalizer_update


def sample_checkpoint(rng, with_disc=True):
    params = PolicyParams("two_layer",
                          rng.standard_normal((4, 9)).astype(np.float32),
                          rng.standard_normal((5, 4)).astype(np.float32))
    norm = normalizer_update(NormalizerState.identity(9),
                             rng.standard_normal((30, 9)))
    disc = None
    if with_disc:
        disc = DiscriminatorParams.random_init(14, 6, rng)
    return params, norm, disc


def test_checkpoint_roundtrip_digest_stable(tmp_path, rng):
    params, norm, disc = sample_checkpoint(rng)
    path_a = tmp_path / "a.rckp"
    path_b = tmp_path / "b.rckp"
    extra = {"iteration": 12, "config_digest": "ff" * 32}
    write_checkpoint(path_a, params, norm, disc, extra=extra)
    loaded = read_checkpoint(path_a)
    write_checkpoint(path_b, loaded.params, loaded.normalizer, loaded.disc,
                     extra=loaded.extra)
    assert file_digest(path_a) == file_digest(path_b)
    assert loaded.extra == extra
    assert loaded.params.kind == "two_layer"
    assert loaded.normalizer.count == norm.count
    # float32 quantization is the only loss
    assert np.allclose(loaded.params.w_in, params.w_in, atol=1e-6)
    assert np.allclose(loaded.disc.w1, disc.w1, atol=1e-6)
    assert loaded.disc.b2 == pytest.approx(disc.b2, abs=1e-6)


def test_checkpoint_linear_and_no_disc(tmp_path, rng):
    params = PolicyParams("linear", rng.standard_normal((5, 7)))
    norm = NormalizerState.identity(7)
    path = tmp_path / "lin.rckp"
    write_checkpoint(path, params, norm)
    loaded = read_checkpoint(path)
    assert loaded.params.kind == "linear"
    assert loaded.params.w_out is None
    assert loaded.disc is None


def test_checkpoint_bad_magic_rejected(tmp_path, rng):
    params, norm, disc = sample_checkpoint(rng)
    path = tmp_path / "x.rckp"
    write_checkpoint(path, params, norm, disc)
    raw = bytearray(path.read_bytes())
    raw[0:5] = b"XXXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_checkpoint_corrupt_length_rejected(tmp_path, rng):
    params, norm, disc = sample_checkpoint(rng)
    path = tmp_path / "x.rckp"
    write_checkpoint(path, params, norm, disc)
    raw = bytearray(path.read_bytes())
    raw[5:9] = (0xFFFFFFFF).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path, rng):
    params, norm, disc = sample_checkpoint(rng)
    path = tmp_path / "x.rckp"
    write_checkpoint(path, params, norm, disc)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) - 7])
    with pytest.raises(FormatError):
        read_checkpoint(path)


def test_checkpoint_trailing_garbage_rejected(tmp_path, rng):
    params, norm, disc = sample_checkpoint(rng)
    path = tmp_path / "x.rckp"
    write_checkpoint(path, params, norm, disc)
    with open(path, "ab") as f:
        f.write(b"\x00\x01")
    with pytest.raises(FormatError):
        read_checkpoint(path)


def sample_episodes(rng, n=6, count=3):
    episodes = []
    for _ in range(count):
        steps = int(rng.integers(2, 9))
        episodes.append(Trajectory(
            observations=rng.random((steps, n)),
            actions=rng.integers(0, 5, steps)))
    return episodes


def test_demos_roundtrip(tmp_path, rng):
    episodes = sample_episodes(rng)
    digest = config_digest(HighwayConfig().to_dict())
    path_a = tmp_path / "a.rdem"
    path_b = tmp_path / "b.rdem"
    write_demos(path_a, episodes, 6, 5, digest, source="expert")
    loaded, header = read_demos(path_a)
    assert header["episodes"] == 3
    assert header["config_digest"] == digest
    assert header["n"] == 6 and header["p"] == 5
    write_demos(path_b, loaded, 6, 5, digest, source="expert")
    assert file_digest(path_a) == file_digest(path_b)
    for orig, back in zip(episodes, loaded):
        assert np.array_equal(orig.actions, back.actions)
        assert np.allclose(orig.observations, back.observations, atol=1e-6)


def test_demos_bad_magic_and_length(tmp_path, rng):
    episodes = sample_episodes(rng)
    path = tmp_path / "a.rdem"
    write_demos(path, episodes, 6, 5, "00" * 32)
    raw = bytearray(path.read_bytes())
    head = bytes(raw)
    raw[0:5] = b"RCKP1"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_demos(path)
    # corrupt the first episode's step count
    raw = bytearray(head)
    offset = 5 + 4 + int.from_bytes(head[5:9], "little")
    raw[offset:offset + 4] = (0xFFFFFF).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        read_demos(path)


def test_config_digest_canonical_and_sensitive():
    a = config_digest({"x": 1, "y": [1, 2]})
    b = config_digest({"y": [1, 2], "x": 1})
    c = config_digest({"x": 2, "y": [1, 2]})
    assert a == b
    assert a != c
