import json
import os
import struct

import numpy as np
import pytest

from cudr.model import ModelConfig, forward, init_params
from cudr.tensor import make_rng
from cudr.weights import LoadError, infer_config, load_weights, read_manifest, read_tensors, save_weights, write_tensors
from oracles import reference_forward

PROMPTS = [
    "Bob is hungry, so he",
    "The meeting was cancelled because",
    "When Mary and John went to the store, John gave a drink to",
    "Much is being done in Colombia to fight the drug cartel mafia. For example,",
    "It was raining; however,",
]


def raw_file(path, header: dict, blob: bytes = b""):
    raw = json.dumps(header).encode()
    path.write_bytes(struct.pack("<Q", len(raw)) + raw + blob)
    return path


def test_container_round_trip(tmp_path):
    rng = make_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5), "c": np.zeros((0, 2), np.float32)}
    write_tensors(tmp_path / "t.st", tensors, {"k": "v"})
    back, meta = read_tensors(tmp_path / "t.st")
    assert meta == {"k": "v"}
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_params_round_trip_preserves_fingerprint(tmp_path):
    p = init_params(ModelConfig(n_layer=2, n_head=2, d_model=16, vocab_size=11, max_seq=6), make_rng(1), std=0.1)
    save_weights(tmp_path / "m.safetensors", p, {"note": "x"})
    cfg, q = load_weights(tmp_path / "m.safetensors")
    assert cfg == p.config
    assert q.fingerprint == p.fingerprint


def test_untied_unembedding_survives(tmp_path):
    p = init_params(ModelConfig(n_layer=1, n_head=2, d_model=8, vocab_size=7, max_seq=4), make_rng(2), std=0.1)
    assert not np.array_equal(p["unembed.W_U"], p["embed.W_E"].T)
    save_weights(tmp_path / "m.st", p)
    _, q = load_weights(tmp_path / "m.st")
    np.testing.assert_array_equal(q["unembed.W_U"], p["unembed.W_U"])


@pytest.mark.parametrize(
    "header,blob,needle",
    [
        ({"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, b"\0" * 8, "inconsistent"),
        ({"w": {"dtype": "Q7", "shape": [1], "data_offsets": [0, 4]}}, b"\0" * 4, "unsupported dtype"),
        ({"w": {"dtype": "F32", "shape": [1]}}, b"", "malformed"),
        (
            {"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}, "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]}},
            b"\0" * 12,
            "overlap",
        ),
    ],
)
def test_malformed_manifests(tmp_path, header, blob, needle):
    with pytest.raises(LoadError, match=needle):
        read_manifest(raw_file(tmp_path / "bad.st", header, blob))


def test_truncated_and_garbage_files(tmp_path):
    (tmp_path / "short").write_bytes(b"\1\0")
    with pytest.raises(LoadError):
        read_manifest(tmp_path / "short")
    (tmp_path / "big").write_bytes(struct.pack("<Q", 10**9) + b"{}")
    with pytest.raises(LoadError, match="exceeds"):
        read_manifest(tmp_path / "big")
    (tmp_path / "junk").write_bytes(struct.pack("<Q", 3) + b"\xff\xfe\x00")
    with pytest.raises(LoadError, match="malformed"):
        read_manifest(tmp_path / "junk")


def test_unknown_and_missing_tensor_names(tmp_path):
    p = init_params(ModelConfig(n_layer=1, n_head=2, d_model=8, vocab_size=7, max_seq=4), make_rng(3))
    save_weights(tmp_path / "m.st", p)
    tensors, meta = read_tensors(tmp_path / "m.st")
    write_tensors(tmp_path / "extra.st", {**tensors, "h.0.attn.mystery": np.zeros(2, np.float32)}, meta)
    with pytest.raises(LoadError, match="unknown tensor"):
        load_weights(tmp_path / "extra.st")
    del tensors["h.0.mlp.c_fc.bias"]
    write_tensors(tmp_path / "missing.st", tensors, meta)
    with pytest.raises(LoadError, match="missing tensor"):
        load_weights(tmp_path / "missing.st")


def test_infer_config_from_width():
    tensors = {"wte.weight": np.zeros((50, 768)), "wpe.weight": np.zeros((16, 768)), "ln_f.weight": np.zeros(768), "h.0.mlp.c_fc.weight": np.zeros((768, 3072))}
    cfg = infer_config(tensors, {})
    assert (cfg.n_layer, cfg.n_head, cfg.d_mlp) == (1, 12, 3072)
    with pytest.raises(LoadError, match="n_head"):
        infer_config({**tensors, "wte.weight": np.zeros((50, 770)), "wpe.weight": np.zeros((16, 770)), "ln_f.weight": np.zeros(770)}, {})


def _hf_model(n_layer=2, n_head=4, n_embd=32, vocab=97, n_pos=16, seed=0):
    torch = pytest.importorskip("torch")
    transformers = pytest.importorskip("transformers")
    torch.manual_seed(seed)
    cfg = transformers.GPT2Config(n_layer=n_layer, n_head=n_head, n_embd=n_embd, vocab_size=vocab, n_positions=n_pos)
    model = transformers.GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        # default init leaves biases and LayerNorm at trivial values; randomise them
        for name, t in model.named_parameters():
            if "ln" in name or name.endswith("bias"):
                t.add_(0.1 * torch.randn_like(t))
    return model


def test_matches_transformers_gpt2(tmp_path):
    torch = pytest.importorskip("torch")
    st = pytest.importorskip("safetensors.torch")
    model = _hf_model()
    state = {k: v.contiguous() for k, v in model.state_dict().items() if k != "lm_head.weight"}
    st.save_file(state, str(tmp_path / "model.safetensors"), metadata={"format": "pt"})
    (tmp_path / "config.json").write_text(json.dumps(model.config.to_dict()))
    cfg, params = load_weights(tmp_path / "model.safetensors", dtype=np.float64)
    assert (cfg.n_layer, cfg.n_head, cfg.d_model) == (2, 4, 32)
    tokens = make_rng(4).integers(0, 97, (3, 12))
    with torch.no_grad():
        ref = model.double()(torch.tensor(tokens)).logits.numpy()
    ours, _ = forward(params, tokens)
    assert np.abs(ours - ref).max() < 1e-8
    np.testing.assert_allclose(reference_forward(params, tokens)[0], ref, atol=1e-8)


@pytest.mark.skipif(not os.environ.get("CUDR_GPT2_CHECKPOINT"), reason="set CUDR_GPT2_CHECKPOINT to a GPT-2 small model.safetensors")
def test_real_checkpoint_parity(gpt2_files):
    torch = pytest.importorskip("torch")
    transformers = pytest.importorskip("transformers")
    from cudr.tokenizer import BPETokenizer

    path = os.environ["CUDR_GPT2_CHECKPOINT"]
    _, params = load_weights(path)
    tok = BPETokenizer.from_files(*gpt2_files)
    ref_model = transformers.GPT2LMHeadModel.from_pretrained(os.path.dirname(path)).eval()
    for prompt in PROMPTS:
        ids = np.array([tok.encode(prompt)])
        with torch.no_grad():
            ref = ref_model(torch.tensor(ids)).logits.numpy()
        assert np.abs(forward(params, ids)[0] - ref).max() < 1e-3
