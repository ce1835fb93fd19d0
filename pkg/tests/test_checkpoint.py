import numpy as np
import pytest

from stutterlab.checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from stutterlab.corpus import CorpusSpec, generate_corpus
from stutterlab.errors import CheckpointError
from stutterlab.model import System
from stutterlab.train import TrainConfig, init_train_state, train_step
from tests.test_train import tiny_model_config


@pytest.fixture(scope="module")
def trained_state():
    spec = CorpusSpec(n_utterances=24, alphabet_size=6, seed=55)
    corpus = generate_corpus(spec)
    system = System(tiny_model_config(spec.alphabet), seed=21)
    cfg = TrainConfig(max_steps=8, batch_size=3, seed=21, phase_a_frac=0.5)
    state = init_train_state(system, cfg)
    for _ in range(5):  # stops inside phase B with LoRA attached
        train_step(state, corpus)
    return spec, corpus, state


def all_param_bytes(state):
    return {n: state.system.store[n].data.tobytes() for n in state.system.store.names()}


def test_round_trip_restores_everything(tmp_path, trained_state):
    spec, corpus, state = trained_state
    path = tmp_path / "ckpt.bin"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    assert loaded.step == state.step
    assert loaded.phase == state.phase
    assert loaded.cfg == state.cfg
    assert loaded.system.store.names() != []
    assert set(loaded.system.store.names()) == set(state.system.store.names())
    for name in state.system.store.names():
        a, b = state.system.store[name], loaded.system.store[name]
        assert a.trainable == b.trainable, name
        assert np.array_equal(a.data, b.data), name
        assert (a.lora is None) == (b.lora is None)
    assert loaded.optim.step == state.optim.step
    for name in state.optim.m:
        assert np.array_equal(loaded.optim.m[name], state.optim.m[name])
        assert np.array_equal(loaded.optim.v[name], state.optim.v[name])
    assert loaded.rng.bit_generator.state == state.rng.bit_generator.state


def test_save_load_step_equals_uninterrupted_step(tmp_path, trained_state):
    spec, corpus, state = trained_state
    path = tmp_path / "ckpt.bin"
    save_checkpoint(state, path)
    loaded = load_checkpoint(path)
    train_step(state, corpus)
    train_step(loaded, corpus)
    assert state.log[-1] == loaded.log[-1]
    for name in state.system.store.names():
        assert np.array_equal(state.system.store[name].data,
                              loaded.system.store[name].data), name


def test_corrupted_trailing_bytes_rejected(tmp_path, trained_state):
    spec, corpus, state = trained_state
    path = tmp_path / "ckpt.bin"
    save_checkpoint(state, path)
    blob = bytearray(path.read_bytes())
    blob[-6] ^= 0xFF
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(bad)
    assert "integrity" in str(err.value) or "CRC" in str(err.value)


def test_truncated_file_rejected(tmp_path, trained_state):
    spec, corpus, state = trained_state
    path = tmp_path / "ckpt.bin"
    save_checkpoint(state, path)
    blob = path.read_bytes()
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)


def test_unknown_version_names_found_and_expected(tmp_path, trained_state):
    import json
    import struct
    import zlib

    spec, corpus, state = trained_state
    path = tmp_path / "ckpt.bin"
    save_checkpoint(state, path)
    blob = path.read_bytes()
    header_len = struct.unpack("<Q", blob[:8])[0]
    header = json.loads(blob[8 : 8 + header_len])
    header["version"] = 99
    new_header = json.dumps(header, sort_keys=True).encode()
    payload = struct.pack("<Q", len(new_header)) + new_header + blob[8 + header_len : -4]
    payload += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    bad = tmp_path / "ver.bin"
    bad.write_bytes(payload)
    with pytest.raises(CheckpointError) as err:
        load_checkpoint(bad)
    assert "99" in str(err.value) and str(FORMAT_VERSION) in str(err.value)
