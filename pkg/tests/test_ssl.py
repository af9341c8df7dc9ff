import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anysat import numerics as nx
from anysat.geometry import ceil_half
from anysat.model import AnySat
from anysat.numerics import Parameter, Tensor
from anysat.ssl import (
    LossInputError,
    MaskConfig,
    MaskPlan,
    MaskPlanError,
    NonFiniteLossError,
    PretrainConfig,
    contrastive_loss,
    ema_update,
    expected_drop_rate,
    init_state,
    jepa_loss,
    pretrain,
    restore_state,
    sample_mask_plan,
    state_arrays,
    student_forward,
    teacher_forward,
)
from anysat.ssl.masking import rectangle_drop

from conftest import TINY, tiny_dataset
from oracles import contrastive_oracle, jepa_oracle

# ---------------------------------------------------------------- masking


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 16), st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 12))
def test_mask_plan_invariants(per_axis, seed, n_mods, T):
    mods = [f"m{i}" for i in range(n_mods)]
    plan = sample_mask_plan(per_axis, mods, {"m0": T, "ctx": 3}, np.random.default_rng(seed))
    plan.check(mods, {"m0": T, "ctx": 3})
    assert len(plan.kept_timestamps["m0"]) == ceil_half(T)


def test_mask_plan_check_catches_violations():
    with pytest.raises(MaskPlanError):
        MaskPlan(2, (), frozenset()).check(["a"])
    with pytest.raises(MaskPlanError):
        MaskPlan(2, (0, 1, 2, 3), frozenset()).check(["a"])
    with pytest.raises(MaskPlanError):
        MaskPlan(2, (0,), frozenset({(1, "a"), (1, "b")})).check(["a", "b"])
    with pytest.raises(MaskPlanError):
        MaskPlan(2, (0,), frozenset(), {"a": np.array([0, 0])}).check(["a"], {"a": 4})


def test_single_patch_grid_is_rejected():
    with pytest.raises(MaskPlanError):
        sample_mask_plan(1, ["a"], {}, np.random.default_rng(0))


def test_rectangles_cover_about_the_requested_area():
    rng = np.random.default_rng(0)
    cfg = MaskConfig(n_rects=1)
    fracs = [len(rectangle_drop(32, rng, cfg)) / 32**2 for _ in range(300)]
    # one 15-20% rectangle, rounded outward to whole cells
    assert 0.15 <= np.mean(fracs) <= 0.26


def test_modality_mask_rate_is_respected():
    rng = np.random.default_rng(1)
    mods = ["a", "b", "c", "d"]
    rates = []
    for _ in range(300):
        plan = sample_mask_plan(8, mods, {}, rng)
        rates.append(len(plan.masked) / (len(plan.kept) * len(mods)))
    # 0.5 before the repair that unmasks one modality of fully masked patches
    assert 0.44 < np.mean(rates) < 0.5


def test_random_drop_matches_expected_rate():
    cfg = MaskConfig(random_drop=True)
    rate = expected_drop_rate(6, MaskConfig())
    rng = np.random.default_rng(2)
    got = np.mean([len(sample_mask_plan(6, ["a"], {}, rng, cfg).dropped) / 36 for _ in range(2000)])
    assert abs(got - rate) < 0.02


# ---------------------------------------------------------------- losses


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(2, 3), st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.1, 1.0]))
def test_contrastive_matches_loop_oracle(n_p, n_m, seed, tau):
    f = np.random.default_rng(seed).normal(size=(n_p, n_m, 5))
    got = contrastive_loss(Tensor(f), tau).item()
    assert got == pytest.approx(contrastive_oracle(f, tau), abs=1e-10, rel=1e-10)


def test_contrastive_degenerate_cases():
    assert contrastive_loss(Tensor(np.ones((1, 3, 4)))) is None
    assert contrastive_loss(Tensor(np.ones((3, 1, 4)))) is None
    with pytest.raises(LossInputError):
        contrastive_loss(Tensor(np.ones((2, 2, 4))), tau=0.0)


def test_contrastive_is_scale_invariant_and_rewards_alignment():
    rng = np.random.default_rng(3)
    base = rng.normal(size=(4, 1, 6))
    aligned = np.concatenate([base, base * 3.0], axis=1)
    shuffled = np.concatenate([base, base[::-1] * 3.0], axis=1)
    assert contrastive_loss(Tensor(aligned)).item() < contrastive_loss(Tensor(shuffled)).item()
    f = rng.normal(size=(3, 2, 6))
    a = contrastive_loss(Tensor(f)).item()
    b = contrastive_loss(Tensor(f * rng.uniform(0.1, 10, size=(3, 2, 1)))).item()
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**32 - 1), st.data())
def test_jepa_matches_loop_oracle(n, seed, data):
    rng = np.random.default_rng(seed)
    pred, teach = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    dropped = data.draw(st.lists(st.integers(0, n - 1), min_size=1, unique=True))
    got = jepa_loss(Tensor(pred), teach, dropped).item()
    assert got == pytest.approx(jepa_oracle(pred, teach, sorted(dropped)), abs=1e-10)


def test_jepa_gradient_flows_to_prediction_only():
    pred = Parameter("pred", np.random.default_rng(0).normal(size=(3, 2)))
    teacher = Parameter("teacher", np.zeros((3, 2)))
    nx.backward(jepa_loss(pred, teacher, [1]), [pred])
    assert teacher.grad is None
    np.testing.assert_array_equal(pred.grad[[0, 2]], 0.0)
    np.testing.assert_allclose(pred.grad[1], 2 * pred.data[1])


# ---------------------------------------------------------------- student / teacher


@pytest.fixture
def setup():
    ds = tiny_dataset(num_tiles=4)
    model = AnySat(ds.info.modalities, TINY)
    state = init_state(model, PretrainConfig(seed=0))
    return model, ds, state


def test_student_output_shapes_and_teacher_is_constant(setup):
    model, ds, state = setup
    tile = ds[0]
    T = {m: tile.arrays[m].shape[2] for m in ds.info.spec.modalities}
    plan = sample_mask_plan(2, ds.info.patch_modalities(), T, np.random.default_rng(0))
    out = student_forward(model, state.student, tile, ds.info, 10.0, plan)
    assert out.predictions.shape == (4, 16) and out.unimodal.shape == (4, 2, 16)
    assert out.combined.patch_ids.tolist() == list(plan.kept)
    target = teacher_forward(model, state.teacher, tile, ds.info, 10.0)
    assert not target.per_patch.requires_grad


def test_predictions_for_dropped_patches_do_not_see_their_inputs(setup):
    model, ds, state = setup
    tile = ds[1]
    T = {m: tile.arrays[m].shape[2] for m in ds.info.spec.modalities}
    plan = sample_mask_plan(2, ds.info.patch_modalities(), T, np.random.default_rng(4))
    d = plan.dropped[0]
    base = student_forward(model, state.student, tile, ds.info, 10.0, plan).predictions.data
    changed = type(tile)(tile.dataset, tile.tile_id, {k: v.copy() for k, v in tile.arrays.items()}, tile.dates, tile.labels)
    y, x = divmod(d, 2)
    changed.arrays["img"][y * 4 : y * 4 + 4, x * 4 : x * 4 + 4] += 10.0
    changed.arrays["ts"][y, x] += 10.0
    after = student_forward(model, state.student, changed, ds.info, 10.0, plan).predictions.data
    np.testing.assert_array_equal(base, after)


def test_ema_update_formula():
    rng = np.random.default_rng(0)
    from anysat.nn import ParamTree

    student = ParamTree({"a/w": Parameter("a/w", rng.normal(size=3))})
    teacher = student.frozen()
    teacher["a/w"].data = rng.normal(size=3)
    prev = teacher["a/w"].data.copy()
    ema_update(teacher, student, 0.9)
    np.testing.assert_allclose(teacher["a/w"].data, 0.9 * prev + 0.1 * student["a/w"].data, atol=1e-15)
    with pytest.raises(ValueError):
        ema_update(teacher, student, 1.5)


# ---------------------------------------------------------------- training loop


def test_pretrain_is_deterministic_and_resumable(tmp_path):
    ds = tiny_dataset(num_tiles=4)
    model = AnySat(ds.info.modalities, TINY)
    cfg = PretrainConfig(seed=7, lr=1e-3)
    _, full = pretrain(model, [ds], cfg, 6)
    _, again = pretrain(model, [ds], cfg, 6)
    assert [r.to_json() for r in full] == [r.to_json() for r in again]

    trace = tmp_path / "trace.jsonl"
    state, first = pretrain(model, [ds], cfg, 3, trace_path=trace)
    restored = restore_state(model, cfg, state_arrays(state), json.loads(json.dumps(state.meta())), 6)
    _, second = pretrain(model, [ds], cfg, 3, state=restored, trace_path=trace)
    assert [r.to_json() for r in first + second] == [r.to_json() for r in full]
    assert [json.loads(line)["step"] for line in trace.read_text().splitlines()] == list(range(6))


def test_pretrain_rejects_zero_steps():
    ds = tiny_dataset(num_tiles=4)
    with pytest.raises(ValueError):
        pretrain(AnySat(ds.info.modalities, TINY), [ds], PretrainConfig(), 0)


def test_non_finite_loss_aborts():
    ds = tiny_dataset(num_tiles=4)
    model = AnySat(ds.info.modalities, TINY)
    cfg = PretrainConfig()
    state = init_state(model, cfg)
    state.student["tokens/drop"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError) as exc:
        pretrain(model, [ds], cfg, 1, state=state)
    assert exc.value.step == 0


def test_ablations_change_the_trace():
    ds = tiny_dataset(num_tiles=4)
    model = AnySat(ds.info.modalities, TINY)
    _, base = pretrain(model, [ds], PretrainConfig(seed=1), 3)
    _, no_con = pretrain(model, [ds], PretrainConfig(seed=1, no_contrastive=True), 3)
    assert all(r.l_con is not None for r in base)
    assert all(r.l_con is None and r.total == pytest.approx(r.l_jepa) for r in no_con)
