import math
import struct

import numpy as np
import pytest

from gradcheck import model_error
from klal import tensor as T
from klal import vocab
from klal.dataset import make_intersection_sample
from klal.model import (
    MAGIC,
    CheckpointError,
    CheckpointNameError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ModelConfig,
    ToyVLM,
    images_to_patches,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)

SMALL = ModelConfig(layers=2, heads=2, d_model=16, patch=8, grid_rows=8, grid_cols=8, max_seq=96, seed=3)


def _perturbed(cfg, scale=0.5, seed=0):
    model = ToyVLM(cfg)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data += rng.normal(scale=scale, size=p.shape)
    return model


def _inputs(seed=0):
    s = make_intersection_sample(seed, 1)
    return s.layout.tokens()[None, :-1], s.image.array()[None], s.layout.visual_start


def test_config_checks_heads():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=4)


def test_config_text_roundtrip():
    assert ModelConfig.from_text(SMALL.to_text()) == SMALL


def test_patchify_constant_image():
    cfg = SMALL
    model = _perturbed(cfg)
    white = np.full((1, 64, 64, 3), 255, dtype=np.uint8)
    emb = (model.patchify(white) - model.params["patch_pos"]).data[0]
    assert emb.shape == (cfg.n_visual, cfg.d_model)
    np.testing.assert_allclose(emb, np.broadcast_to(emb[0], emb.shape), atol=1e-12)


def test_patch_order_is_row_major():
    img = np.zeros((1, 64, 64, 3), dtype=np.uint8)
    img[0, 16:24, 40:48] = 255  # row 2, col 5
    x = images_to_patches(img, SMALL)[0]
    assert np.flatnonzero(x.sum(axis=1)).tolist() == [2 * 8 + 5]


def test_patchify_rejects_wrong_size():
    with pytest.raises(ValueError):
        images_to_patches(np.zeros((1, 32, 64, 3), dtype=np.uint8), SMALL)


def test_attention_rows_are_causal_distributions():
    model = _perturbed(SMALL)
    tokens, images, vs = _inputs()
    out = model.forward(tokens, images, vs)
    n = tokens.shape[1]
    assert out.logits.shape == (1, n, SMALL.vocab_size)
    assert out.hidden.shape == (1, n, SMALL.d_model)
    assert len(out.attentions) == SMALL.layers
    for a in out.attentions:
        assert a.shape == (1, SMALL.heads, n, n)
        np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(np.triu(a.data, k=1) == 0.0)


def test_future_tokens_do_not_leak():
    model = _perturbed(SMALL)
    tokens, images, vs = _inputs()
    swapped = tokens.copy()
    swapped[0, -2], swapped[0, -1] = tokens[0, -1], tokens[0, -2]
    a = model.forward(tokens, images, vs).logits.data
    b = model.forward(swapped, images, vs).logits.data
    assert np.array_equal(a[:, :-2], b[:, :-2])


def test_forward_rejects_bad_input():
    model = ToyVLM(SMALL)
    tokens, images, vs = _inputs()
    bad = tokens.copy()
    bad[0, 0] = SMALL.vocab_size
    with pytest.raises(ValueError):
        model.forward(bad, images, vs)
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 97), dtype=int), images, vs)


def _gelu(x):
    return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def _layer_norm(v, g, b):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + 1e-5) * gi + bi for x, gi, bi in zip(v, g, b)]


def _vecmat(v, m):
    return [sum(v[k] * m[k][j] for k in range(len(v))) for j in range(len(m[0]))]


def test_one_layer_matches_hand_rolled_oracle():
    cfg = ModelConfig(layers=1, heads=1, d_model=4, patch=2, grid_rows=1, grid_cols=1, max_seq=3, mlp_ratio=2, seed=5)
    model = _perturbed(cfg, scale=0.7, seed=5)
    P = {k: v.data.tolist() for k, v in model.params.items()}
    rng = np.random.default_rng(5)
    image = rng.integers(0, 256, size=(2, 2, 3), dtype=np.uint8)
    tokens = [vocab.BOS, vocab.IMG, vocab.TOKEN_ID["yes"]]

    pixels = [float(v) / 255 for v in image.reshape(-1)]
    vis = [a + b for a, b in zip(_vecmat(pixels, P["patch_w"]), P["patch_b"])]
    vis = [a + b for a, b in zip(vis, P["patch_pos"][0])]
    xs = [P["tok_emb"][tokens[0]], vis, P["tok_emb"][tokens[2]]]
    xs = [[a + b for a, b in zip(x, P["pos_emb"][i])] for i, x in enumerate(xs)]

    hs = [_layer_norm(x, P["l0.ln1_g"], P["l0.ln1_b"]) for x in xs]
    q = [_vecmat(h, P["l0.wq"]) for h in hs]
    k = [_vecmat(h, P["l0.wk"]) for h in hs]
    v = [_vecmat(h, P["l0.wv"]) for h in hs]
    attn = []
    for i in range(3):
        s = [sum(a * b for a, b in zip(q[i], k[j])) / 2.0 for j in range(i + 1)]
        m = max(s)
        e = [math.exp(x - m) for x in s]
        attn.append([x / sum(e) for x in e] + [0.0] * (2 - i))
    mixed = [[sum(attn[i][j] * v[j][c] for j in range(3)) for c in range(4)] for i in range(3)]
    xs = [[a + b for a, b in zip(x, _vecmat(mx, P["l0.wo"]))] for x, mx in zip(xs, mixed)]
    out = []
    for x in xs:
        h = _layer_norm(x, P["l0.ln2_g"], P["l0.ln2_b"])
        f = [_gelu(a + b) for a, b in zip(_vecmat(h, P["l0.w1"]), P["l0.b1"])]
        x = [a + b + c for a, b, c in zip(x, _vecmat(f, P["l0.w2"]), P["l0.b2"])]
        h = _layer_norm(x, P["lnf_g"], P["lnf_b"])
        out.append([a + b for a, b in zip(_vecmat(h, P["head_w"]), P["head_b"])])

    res = model.forward(np.array([tokens]), image[None], visual_start=1)
    np.testing.assert_allclose(res.logits.data[0], np.array(out), rtol=0, atol=1e-9)
    np.testing.assert_allclose(res.attentions[0].data[0, 0], np.array(attn), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_full_model_gradient(seed):
    assert model_error(seed) < 1e-4


def test_greedy_decode_eos_gives_empty_answer():
    model = ToyVLM(SMALL)
    model.params["head_b"].data[:] = 0.0
    model.params["head_b"].data[vocab.EOS] = 1e3
    s = make_intersection_sample(0, 1)
    assert model.greedy_decode(s.layout.prefix(), s.image.array(), s.layout.visual_start) == [[]]


def test_greedy_decode_breaks_ties_low():
    model = ToyVLM(SMALL)
    for name in ("head_w", "head_b"):
        model.params[name].data[:] = 0.0
    s = make_intersection_sample(0, 1)
    assert model.greedy_decode(s.layout.prefix(), s.image.array(), s.layout.visual_start, max_new=2) == [[0, 0]]


def test_greedy_decode_is_deterministic_and_batched():
    model = _perturbed(SMALL, scale=0.3)
    samples = [make_intersection_sample(k, k % 4) for k in range(3)]
    prefix = np.stack([s.layout.prefix() for s in samples])
    images = np.stack([s.image.array() for s in samples])
    batch = model.greedy_decode(prefix, images, 2, max_new=3)
    assert batch == model.greedy_decode(prefix, images, 2, max_new=3)
    singles = [model.greedy_decode(s.layout.prefix(), s.image.array(), 2, max_new=3)[0] for s in samples]
    assert batch == singles


def test_param_shapes_order():
    names = list(param_shapes(SMALL))
    assert names[:5] == ["tok_emb", "pos_emb", "patch_w", "patch_b", "patch_pos"]
    assert names[-4:] == ["lnf_g", "lnf_b", "head_w", "head_b"]


# -- checkpoints --------------------------------------------------------------------
def test_checkpoint_roundtrip(tmp_path):
    model = _perturbed(SMALL)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.cfg == model.cfg
    for name, p in model.params.items():
        assert np.array_equal(back.params[name].data, p.data)
    save_checkpoint(back, tmp_path / "n.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_checkpoint_layout(tmp_path):
    save_checkpoint(ToyVLM(SMALL), tmp_path / "m.ckpt")
    data = (tmp_path / "m.ckpt").read_bytes()
    assert data[:8] == MAGIC
    assert struct.unpack("<I", data[8:12]) == (1,)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(ToyVLM(SMALL), path)
    good = path.read_bytes()

    path.write_bytes(b"XXXXXXXX" + good[8:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)

    path.write_bytes(good[:8] + struct.pack("<I", 2) + good[12:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)

    path.write_bytes(good[:-100])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)

    path.write_bytes(good.replace(b"l0.wq", b"l0.wz", 1))
    with pytest.raises(CheckpointNameError):
        load_checkpoint(path)

    path.write_bytes(good + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_reloaded_model_predicts_identically(tmp_path):
    model = _perturbed(SMALL, scale=0.3)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    tokens, images, vs = _inputs(2)
    with T.no_grad():
        assert np.array_equal(model.forward(tokens, images, vs).logits.data, back.forward(tokens, images, vs).logits.data)
