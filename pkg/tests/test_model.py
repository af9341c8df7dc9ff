import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anysat import numerics as nx
from anysat.combiner import Combiner, CombinerInputError, TokenSet
from anysat.data import DatasetSpec, MemoryDataset, ModalitySpec, SyntheticConfig, registry_from, validate_dataset_spec
from anysat.encoder import LTAE, PatchEncoder, temporal_encoding
from anysat.model import AnySat, ModelConfig
from anysat.nn import ParamTreeError
from anysat.numerics import Tensor

from conftest import TINY


def test_temporal_encoding_range():
    enc = temporal_encoding(np.array([1, 100, 366]), 8)
    assert enc.shape == (3, 8)
    np.testing.assert_allclose(enc[:, 0] ** 2 + enc[:, 1] ** 2, 1.0)


def _ltae():
    mod = LTAE("t", c_in=3, d_model=8, E=6, heads=2, d_k=4)
    return mod, mod.init(np.random.default_rng(0))


def test_ltae_shapes_and_attention():
    mod, params = _ltae()
    x = Tensor(np.random.default_rng(1).normal(size=(5, 7, 3)))
    out, attn = mod(params, x, np.arange(10, 80, 10), return_attention=True)
    assert out.shape == (5, 6) and attn.shape == (5, 2, 7)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.integers(2, 6))
def test_ltae_is_invariant_to_reordering_dated_observations(seed, T):
    mod, params = _ltae()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, T, 3))
    dates = rng.choice(np.arange(1, 367), size=T, replace=False)
    perm = rng.permutation(T)
    a = mod(params, Tensor(x), dates).data
    b = mod(params, Tensor(x[:, perm]), dates[perm]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_ltae_single_date_reduces_to_head_output():
    mod, params = _ltae()
    x = np.random.default_rng(2).normal(size=(1, 1, 3))
    full = mod(params, Tensor(x), np.array([42])).data[0]
    head = mod.head_output(params, Tensor(x[0, 0]), 42).data
    np.testing.assert_allclose(full, head, atol=1e-12)


def test_encoder_shapes_at_two_patch_sizes(tiny_model, rng):
    ds = MemoryDataset.generate(
        validate_dataset_spec(DatasetSpec("d", 20.0, ["ts", "img"], 1, [10.0, 20.0], 1), tiny_model.registry),
        SyntheticConfig(seed=0, K=2),
    )
    params = tiny_model.init(rng)
    for P, n in ((10.0, 4), (20.0, 1)):
        em = tiny_model.encode(params, ds[0], ds.info, P)
        assert em.per_axis ** 2 == n
        assert em.unimodal["ts"].shape == (n, 16)
        assert em.subpatch["img"].shape == (n, em.layouts["img"].total, 16)


def test_patch_embeddings_depend_only_on_their_patch(tiny_model, tiny_ds, rng):
    params = tiny_model.init(rng)
    tile = tiny_ds[0]
    base = tiny_model.encode(params, tile, tiny_ds.info, 10.0)
    changed = type(tile)(tile.dataset, tile.tile_id, {k: v.copy() for k, v in tile.arrays.items()}, tile.dates, tile.labels)
    changed.arrays["img"][:4, :4] += 5.0  # top-left 10 m patch of the 2.5 m image
    after = tiny_model.encode(params, changed, tiny_ds.info, 10.0)
    diff = np.abs(after.unimodal["img"].data - base.unimodal["img"].data).max(axis=1)
    assert diff[0] > 1e-6 and np.all(diff[1:] == 0)
    np.testing.assert_array_equal(after.unimodal["ts"].data, base.unimodal["ts"].data)


def test_missing_channels_are_padded(rng):
    reg = registry_from([ModalitySpec("ts", 10.0, (2, 3), 4, 1)])
    spec = DatasetSpec("m", 20.0, ["ts"], 1, [10.0], 1, channel_masks={"ts": [True, False, True, False]})
    ds = MemoryDataset.generate(validate_dataset_spec(spec, reg), SyntheticConfig(seed=0, K=2))
    model = AnySat(reg, TINY)
    em = model.encode(model.init(rng), ds[0], ds.info, 10.0)
    assert em.unimodal["ts"].shape == (4, 16)


def test_context_modality_yields_one_token(rng):
    reg = registry_from(
        [ModalitySpec("ts", 10.0, (2, 3), 2, 1), ModalitySpec("coarse", 250.0, (3, 3), 2, 1, role="context")]
    )
    ds = MemoryDataset.generate(
        validate_dataset_spec(DatasetSpec("c", 20.0, ["ts", "coarse"], 1, [10.0], 1), reg), SyntheticConfig(seed=0, K=2)
    )
    model = AnySat(reg, TINY)
    params = model.init(rng)
    em, mm = model.backbone(params, ds[0], ds.info, 10.0)
    assert em.context["coarse"].shape == (1, 16)
    assert mm.per_patch.shape == (4, 16)
    with pytest.raises(ValueError):
        PatchEncoder(registry_from([ModalitySpec("c", 250.0, (1, 1), 2, 2, role="context")]), 16, 2, 1)


# ---------------------------------------------------------------- combiner


def _combiner_tokens(n_patches=4, mods=("a", "b"), seed=0):
    rng = np.random.default_rng(seed)
    ids = np.concatenate([np.arange(n_patches)] * len(mods))
    names = [m for m in mods for _ in range(n_patches)]
    return TokenSet(ids, names, Tensor(rng.normal(size=(len(ids), 16))))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_combiner_is_invariant_to_token_order(seed):
    comb = Combiner(16, 2, 1)
    params = comb.init(np.random.default_rng(1))
    toks = _combiner_tokens(seed=seed)
    perm = np.random.default_rng(seed).permutation(len(toks))
    a = comb(params, toks, per_axis=2, P=10.0, want_tile_embedding=True)
    b = comb(params, toks.permuted(perm), per_axis=2, P=10.0, want_tile_embedding=True)
    np.testing.assert_allclose(a.per_patch.data, b.per_patch.data, atol=1e-12)
    np.testing.assert_allclose(a.tile.data, b.tile.data, atol=1e-12)


def test_combiner_covers_only_present_patches():
    comb = Combiner(16, 2, 1)
    params = comb.init(np.random.default_rng(1))
    toks = _combiner_tokens()
    keep = np.flatnonzero(toks.patch_ids != 2)
    out = comb(params, toks.permuted(keep), per_axis=2, P=10.0)
    assert out.patch_ids.tolist() == [0, 1, 3] and out.per_patch.shape == (3, 16)
    assert out.tile is None


def test_combiner_input_errors():
    comb = Combiner(16, 2, 1)
    params = comb.init(np.random.default_rng(1))
    toks = _combiner_tokens()
    with pytest.raises(CombinerInputError):
        comb(params, toks.permuted([]), per_axis=2)
    with pytest.raises(CombinerInputError):
        comb(params, toks, per_axis=1)
    with pytest.raises(CombinerInputError):
        comb(params, toks.permuted([0, 0, 1]), per_axis=2)


def test_context_tokens_reach_every_patch():
    comb = Combiner(16, 2, 1)
    params = comb.init(np.random.default_rng(1))
    toks = _combiner_tokens()
    a = comb(params, toks, per_axis=2, P=10.0).per_patch.data
    b = comb(params, toks, [Tensor(np.ones((1, 16)))], per_axis=2, P=10.0).per_patch.data
    assert np.all(np.abs(a - b).max(axis=1) > 1e-8)


# ---------------------------------------------------------------- model


def test_parameter_tree_names_and_teacher(tiny_model, rng):
    params = tiny_model.init(rng)
    tops = {k.split("/", 1)[0] for k in params}
    assert tops == {"encoder", "combiner", "predictor", "tokens"}
    teacher = tiny_model.teacher_from(params)
    assert {k.split("/", 1)[0] for k in teacher} == {"encoder", "combiner"}
    assert teacher.parameters() == []
    tiny_model.check_tree(params)
    with pytest.raises(ParamTreeError):
        tiny_model.check_tree(teacher)


def test_model_config_checks_head_split():
    with pytest.raises(ValueError):
        ModelConfig(E=18, heads=4)


def test_full_forward_is_differentiable(tiny_model, tiny_ds, rng):
    params = tiny_model.init(rng)
    _, mm = tiny_model.backbone(params, tiny_ds[0], tiny_ds.info, 10.0, want_tile_embedding=True)
    nx.backward(nx.sum_(mm.tile * mm.tile) + nx.sum_(mm.per_patch), params.subtree("encoder", "combiner").parameters())
    grads = [p.grad for p in params.subtree("encoder", "combiner").parameters()]
    assert all(g is not None and np.all(np.isfinite(g)) for g in grads)
