import math

import numpy as np
import pytest

from src.detect.pyramid import FeaturePyramid, GroundTruth
from src.mscal import (
    MscalModule,
    SampleAssignment,
    assign_samples,
    calibrate_threshold,
    freeze_class_modules,
    mscal_loss,
    mscal_loss_and_grads,
    mscal_loss_floor,
    mscal_loss_gradients,
    mscal_total_loss,
    ood_score,
    ood_score_map,
    project,
)
from src.mscal.gradcheck import STEP, TOLERANCE, check_gradients, relative_error
from src.train import OptimizerState, adamw_step
from src.utils.errors import DegenerateProjection, EmptyScores, NoModules, NoSamples, ShapeMismatch


def random_pyramid(geometry, dim, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    layers, boxes = [], []
    for h, w, s in geometry.shapes:
        values = rng.normal(size=(h, w, dim))
        layers.append(np.abs(values) + 0.1 if positive else values)
        field = np.zeros((h, w, 4))
        field[..., 2:] = s
        boxes.append(field)
    return FeaturePyramid(layers=layers, boxes=boxes, geometry=geometry)


def masks(n, positive=(), negative=()):
    pos = np.zeros(n, dtype=bool)
    neg = np.zeros(n, dtype=bool)
    pos[list(positive)] = True
    neg[list(negative)] = True
    return pos, neg


def assignment_of(*levels):
    return SampleAssignment(positive=[p for p, _ in levels], negative=[n for _, n in levels])


def brute_force_loss(module, projected, assignment):
    """Term-by-term double sum over pooled samples."""
    samples = []
    for j, z in enumerate(projected):
        for k in range(z.shape[0]):
            if assignment.positive[j][k] or assignment.negative[j][k]:
                logit = sum(float(a) * float(b) for a, b in zip(module.anchor(j), z[k])) / module.tau
                samples.append((logit, bool(assignment.positive[j][k])))
    denominator = sum(math.exp(s) for s, _ in samples)
    positives = [s for s, p in samples if p]
    return -sum(math.log(math.exp(s) / denominator) for s in positives) / len(positives)


# ------------------------------------------------------------------ projector

def test_project_outputs_unit_norm(make_module, geometry):
    module = make_module(dim=6)
    grids = project(module, random_pyramid(geometry, 6), mode="infer")
    assert [g.shape for g in grids] == [(4, 4, 3), (2, 2, 3)]
    for g in grids:
        np.testing.assert_allclose(np.linalg.norm(g, axis=-1), 1.0, atol=1e-9)


def test_project_matches_straight_line_recomputation(make_module, geometry):
    module = make_module(dim=6)
    module.layers[0]["running_mean"] = np.full(6, 0.1)
    module.layers[0]["running_var"] = np.full(6, 2.0)
    pyramid = random_pyramid(geometry, 6)
    grids = project(module, pyramid, mode="infer")
    p = module.layers[0]
    x = pyramid.layers[0][1, 2]
    a = x @ p["w1"] + p["b1"]
    h = p["gamma"] * (a - 0.1) / np.sqrt(2.0 + module.bn_eps) + p["beta"]
    u = np.maximum(h, 0.0) @ p["w2"] + p["b2"]
    np.testing.assert_allclose(grids[0][1, 2], u / np.linalg.norm(u), atol=1e-12)


def test_project_identity_layers(make_module, geometry):
    module = make_module(dim=4, proj_dim=4, hidden_dim=4)
    for p in module.layers:
        p["w1"] = np.eye(4)
        p["b1"] = np.zeros(4)
        p["w2"] = np.eye(4)
        p["b2"] = np.zeros(4)
    pyramid = random_pyramid(geometry, 4, seed=3, positive=True)
    grids = project(module, pyramid, mode="infer")
    x = pyramid.layers[1][0, 1]
    r = np.maximum(x / np.sqrt(1.0 + module.bn_eps), 0.0)
    np.testing.assert_allclose(grids[1][0, 1], r / np.linalg.norm(r), atol=1e-12)


def test_zero_weights_are_degenerate(make_module, geometry):
    module = make_module(dim=4)
    for p in module.layers:
        for key in ("w1", "b1", "w2", "b2"):
            p[key] = np.zeros_like(p[key])
    with pytest.raises(DegenerateProjection):
        project(module, random_pyramid(geometry, 4), mode="infer")


def test_project_rejects_wrong_dim(make_module, geometry):
    with pytest.raises(ShapeMismatch):
        project(make_module(dim=6), random_pyramid(geometry, 5), mode="infer")


def test_shared_anchor(make_module):
    module = make_module(share_anchor=True)
    assert len(module.anchors) == 1
    assert module.shares_anchor
    assert module.anchor(1) is module.anchor(0)


def test_checkpoint_dict_is_exact(make_module):
    module = make_module(seed=7)
    restored = MscalModule.from_dict(module.to_dict())
    for name, value in module.parameters().items():
        assert restored.parameters()[name].tobytes() == value.tobytes()


def test_running_stats_update(make_module):
    module = make_module(num_levels=1, dim=4)
    x = np.random.default_rng(0).normal(size=(5, 4))
    _, traces = module.forward([x], "train")
    module.update_running_stats(traces)
    a = traces[0]["a"]
    np.testing.assert_allclose(module.layers[0]["running_mean"], 0.1 * a.mean(axis=0))
    np.testing.assert_allclose(module.layers[0]["running_var"], 0.9 + 0.1 * a.var(axis=0, ddof=1))


# ----------------------------------------------------------------- assignment

def test_assign_whole_grid_box(geometry):
    gt = [GroundTruth(box=(0, 0, 32, 32), class_id=0)]
    assignment = assign_samples(geometry, gt, class_id=0, neg_cap=10, rng_seed=0, level_bounds=[0, 16])
    assert assignment.positive[1].all()
    assert not assignment.positive[0].any()
    assert assignment.num_positive == 4


def test_assign_no_boxes_of_class(geometry):
    gt = [GroundTruth(box=(0, 0, 8, 8), class_id=1)]
    assignment = assign_samples(geometry, gt, class_id=0, neg_cap=10, rng_seed=0, level_bounds=[0, 16])
    assert assignment.num_positive == 0
    assert assignment.num_negative <= 10


def test_assign_hand_enumerated_grid(geometry):
    # Two 2x2-location boxes on the 4x4 stride-8 level.
    gt = [GroundTruth(box=(0, 0, 15, 15), class_id=0), GroundTruth(box=(16, 16, 31, 31), class_id=1)]
    assignment = assign_samples(geometry, gt, class_id=0, neg_cap=10, rng_seed=0, level_bounds=[0, 16])
    assert np.flatnonzero(assignment.positive[0]).tolist() == [0, 1, 4, 5]
    assert assignment.num_positive == 4
    class_neg = [10, 11, 14, 15]
    assert assignment.negative[0][class_neg].all()
    # 4 class negatives plus all 12 background locations fit under the cap of 40.
    assert assignment.num_negative == 4 + 8 + 4
    assert not (assignment.positive[0] & assignment.negative[0]).any()


def test_assign_cap_is_respected(geometry):
    gt = [GroundTruth(box=(0, 0, 8, 8), class_id=0)]
    assignment = assign_samples(geometry, gt, class_id=0, neg_cap=2, rng_seed=5, level_bounds=[0, 16])
    assert assignment.num_positive == 1
    assert assignment.num_negative == 2
    again = assign_samples(geometry, gt, class_id=0, neg_cap=2, rng_seed=5, level_bounds=[0, 16])
    for a, b in zip(assignment.negative, again.negative):
        np.testing.assert_array_equal(a, b)


# ----------------------------------------------------------------------- loss

def test_single_positive_has_zero_loss(make_module):
    module = make_module(num_levels=1, dim=4)
    z = np.random.default_rng(0).normal(size=(3, 2))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    pos, neg = masks(3, positive=[1])
    loss, _, grad_anchor = mscal_loss_and_grads(module, [z], SampleAssignment([pos], [neg]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad_anchor["anchor0"], 0.0, atol=1e-12)


def test_balanced_pair_is_ln2(make_module):
    module = make_module(num_levels=1, dim=4)
    module.anchors = [np.array([1.0, 0.0])]
    z = np.array([[0.6, 0.8], [0.6, -0.8]])
    pos, neg = masks(2, positive=[0], negative=[1])
    assert mscal_loss(module, [z], SampleAssignment([pos], [neg])) == pytest.approx(math.log(2), abs=1e-12)


def test_loss_matches_brute_force(make_module):
    rng = np.random.default_rng(0)
    module = make_module(num_levels=2, dim=6)
    projected = []
    for n in (6, 4):
        z = rng.normal(size=(n, 3))
        projected.append(z / np.linalg.norm(z, axis=1, keepdims=True))
    pos0, neg0 = masks(6, positive=[0, 2], negative=[1, 3, 4])
    pos1, neg1 = masks(4, positive=[3], negative=[0, 1])
    assignment = SampleAssignment([pos0, pos1], [neg0, neg1])
    assert mscal_loss(module, projected, assignment) == pytest.approx(
        brute_force_loss(module, projected, assignment), abs=1e-10)


def test_doubling_tau_halves_gap_and_keeps_anchor_direction(make_module):
    z = np.array([[0.6, 0.8], [0.8, -0.6]])
    assignment = assignment_of(masks(2, positive=[0], negative=[1]))
    gaps, directions = [], []
    for tau in (0.1, 0.2):
        module = make_module(num_levels=1, dim=4, tau=tau)
        module.anchors = [np.array([1.0, 0.0])]
        loss, _, grad_anchor = mscal_loss_and_grads(module, [z], assignment)
        # two samples: loss = log(1 + exp(-gap))
        gaps.append(-math.log(math.expm1(loss)))
        directions.append(grad_anchor["anchor0"] / np.linalg.norm(grad_anchor["anchor0"]))
    assert gaps[1] == pytest.approx(gaps[0] / 2, abs=1e-12)
    np.testing.assert_allclose(directions[1], directions[0], atol=1e-12)


def test_loss_ignores_sample_order_within_a_level(make_module):
    rng = np.random.default_rng(7)
    module = make_module(num_levels=2, dim=6)
    projected = [rng.normal(size=(7, 3)), rng.normal(size=(5, 3))]
    assignment = assignment_of(masks(7, [0, 4], [1, 2, 6]), masks(5, [3], [0, 1, 2]))
    base = mscal_loss(module, projected, assignment)
    for j in range(2):
        order = rng.permutation(projected[j].shape[0])
        projected[j] = projected[j][order]
        assignment = assignment_of(*[(p[order], n[order]) if k == j else (p, n)
                                     for k, (p, n) in enumerate(zip(assignment.positive, assignment.negative))])
    assert mscal_loss(module, projected, assignment) == pytest.approx(base, abs=1e-12)


def test_loss_ignores_consistent_level_relabeling(make_module):
    rng = np.random.default_rng(8)
    module = make_module(num_levels=3, dim=6)
    levels = [rng.normal(size=(n, 6)) for n in (6, 4, 3)]
    assignment = assignment_of(masks(6, [1], [0, 2, 5]), masks(4, [0, 3], [1]), masks(3, [], [0, 2]))
    relabeled = MscalModule(module.class_id, module.class_name, module.task_id, module.layers[::-1],
                            module.anchors[::-1], tau=module.tau)
    reversed_assignment = SampleAssignment(assignment.positive[::-1], assignment.negative[::-1])
    for mode in ("train", "infer"):
        projected, _ = module.forward(levels, mode)
        relabeled_projected, _ = relabeled.forward(levels[::-1], mode)
        assert mscal_loss(relabeled, relabeled_projected, reversed_assignment) == pytest.approx(
            mscal_loss(module, projected, assignment), abs=1e-12)


def test_training_lowers_ood_score_at_positives(make_module):
    rng = np.random.default_rng(9)
    module = make_module(num_levels=2, dim=6, seed=4)
    direction = np.array([1.0, 0.5, 0.0, -0.5, 0.0, 0.2])
    levels, assignment_levels = [], []
    for n, n_pos in ((12, 4), (6, 2)):
        x = rng.normal(scale=0.3, size=(n, 6))
        x[:n_pos] += 2.0 * direction
        x[n_pos:] -= 2.0 * direction
        levels.append(x)
        assignment_levels.append(masks(n, positive=range(n_pos), negative=range(n_pos, n)))
    assignment = assignment_of(*assignment_levels)

    def mean_positive_score():
        projected, _ = module.forward(levels, "infer")
        return float(np.mean(np.concatenate([-(z[p] @ module.anchor(j))
                                             for j, (z, p) in enumerate(zip(projected, assignment.positive))])))

    state = OptimizerState()
    checkpoints = [mean_positive_score()]
    for step in range(1, 201):
        _, traces = module.forward(levels, "train")
        grads = mscal_loss_gradients(module, traces, assignment)
        module.update_running_stats(traces)
        updated, state = adamw_step(module.parameters(), grads, state, lr=1e-3)
        module.set_parameters(updated)
        module.renormalize_anchors()
        if step % 50 == 0:
            checkpoints.append(mean_positive_score())
    assert all(later <= earlier for earlier, later in zip(checkpoints, checkpoints[1:]))
    assert checkpoints[-1] < checkpoints[0]


def test_loss_is_bounded_below_by_log_positive_count(make_module):
    rng = np.random.default_rng(11)
    module = make_module(num_levels=2, dim=6)
    for _ in range(20):
        projected = [rng.normal(size=(8, 3)), rng.normal(size=(5, 3))]
        n0, n1 = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        assignment = assignment_of(masks(8, range(n0), range(n0, 8)), masks(5, range(n1), range(n1, 5)))
        floor = mscal_loss_floor([module], {module.class_id: assignment})
        assert floor == pytest.approx(math.log(n0 + n1), abs=1e-12)
        assert mscal_loss(module, projected, assignment) >= floor - 1e-12


def test_loss_reaches_floor_with_tied_positives_and_no_negatives(make_module):
    module = make_module(num_levels=1)
    z = np.tile(np.array([[0.0, 0.6, 0.8]]), (3, 1))
    assignment = assignment_of(masks(3, positive=[0, 1, 2]))
    assert mscal_loss(module, [z], assignment) == pytest.approx(math.log(3), abs=1e-12)


def test_floor_averages_over_all_classes(make_module):
    first, second = make_module(class_id=0, num_levels=1), make_module(class_id=1, num_levels=1)
    assignments = {0: assignment_of(masks(4, positive=[0, 1], negative=[2])),
                   1: assignment_of(masks(4, negative=[0, 3]))}
    assert mscal_loss_floor([first, second], assignments) == pytest.approx(math.log(2) / 2, abs=1e-12)
    assert mscal_loss_floor([], {}) == 0.0


def test_no_positives_and_no_samples(make_module):
    module = make_module(num_levels=1)
    z = np.ones((2, 3)) / np.sqrt(3)
    pos, neg = masks(2, negative=[0])
    assert mscal_loss(module, [z], SampleAssignment([pos], [neg])) == 0.0
    with pytest.raises(NoSamples):
        mscal_loss(module, [z], SampleAssignment([pos], [np.zeros(2, dtype=bool)]))


def test_gradients_wrt_projections(make_module):
    rng = np.random.default_rng(1)
    module = make_module(num_levels=2, dim=6)
    projected = [rng.normal(size=(5, 3)), rng.normal(size=(3, 3))]
    pos0, neg0 = masks(5, positive=[1], negative=[0, 2, 4])
    pos1, neg1 = masks(3, positive=[0, 2], negative=[1])
    assignment = SampleAssignment([pos0, pos1], [neg0, neg1])
    _, grad_z, grad_anchor = mscal_loss_and_grads(module, projected, assignment)
    params = {"z0": projected[0], "z1": projected[1], "anchor0": module.anchors[0], "anchor1": module.anchors[1]}
    analytic = {"z0": grad_z[0], "z1": grad_z[1], **grad_anchor}
    errors = check_gradients(lambda: mscal_loss(module, projected, assignment), params, analytic, h=STEP)
    for name, err in errors.items():
        assert err <= TOLERANCE, name


@pytest.mark.parametrize("mode", ["train", "infer"])
def test_projector_gradients_match_central_differences(make_module, mode):
    rng = np.random.default_rng(2)
    module = make_module(num_levels=2, dim=6, seed=3)
    levels = [rng.normal(size=(10, 6)), rng.normal(size=(5, 6))]
    pos0, neg0 = masks(10, positive=[0, 3, 7], negative=[1, 2, 5, 9])
    pos1, neg1 = masks(5, positive=[4], negative=[0, 2])
    assignment = SampleAssignment([pos0, pos1], [neg0, neg1])

    _, traces = module.forward(levels, mode)
    analytic = mscal_loss_gradients(module, traces, assignment)
    errors = check_gradients(lambda: mscal_loss(module, module.forward(levels, mode)[0], assignment),
                             module.parameters(), analytic, h=STEP)
    assert set(errors) == set(module.parameters())
    for name, err in errors.items():
        assert err <= TOLERANCE, name


def test_shared_anchor_gradient_accumulates(make_module):
    rng = np.random.default_rng(4)
    module = make_module(num_levels=2, dim=6, share_anchor=True)
    levels = [rng.normal(size=(6, 6)), rng.normal(size=(4, 6))]
    pos0, neg0 = masks(6, positive=[0], negative=[1, 2])
    pos1, neg1 = masks(4, positive=[1], negative=[3])
    assignment = SampleAssignment([pos0, pos1], [neg0, neg1])
    _, traces = module.forward(levels, "infer")
    analytic = mscal_loss_gradients(module, traces, assignment)
    errors = check_gradients(lambda: mscal_loss(module, module.forward(levels, "infer")[0], assignment),
                             {"anchor0": module.anchors[0]}, analytic, h=STEP)
    assert errors["anchor0"] <= TOLERANCE


def test_relative_error_floor():
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0]), atol=1e-6) == 0.0
    assert relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(1.0)


def test_total_loss_is_mean_over_classes(make_module):
    rng = np.random.default_rng(5)
    modules = [make_module(class_id=c, seed=c, num_levels=2, dim=6) for c in range(3)]
    levels = [rng.normal(size=(8, 6)), rng.normal(size=(4, 6))]
    assignments = {
        0: assignment_of(masks(8, [0, 1], [2, 3]), masks(4, [], [0])),
        1: assignment_of(masks(8, [4], [0, 5]), masks(4, [2], [1, 3])),
        2: assignment_of(masks(8, [], [6]), masks(4, [], [0])),
    }
    expected = []
    for module in modules:
        projected, _ = module.forward(levels, "train")
        expected.append(mscal_loss(module, projected, assignments[module.class_id]))
    assert expected[2] == 0.0
    assert mscal_total_loss(modules, levels, assignments) == pytest.approx(np.mean(expected), abs=1e-12)
    assert mscal_total_loss(modules[:1], levels, assignments) == pytest.approx(expected[0], abs=1e-12)


# -------------------------------------------------------------------- scoring

def test_ood_score_examples(make_module):
    m1 = make_module(class_id=0, num_levels=1)
    m2 = make_module(class_id=1, num_levels=1)
    m1.anchors = [np.array([1.0, 0.0, 0.0])]
    m2.anchors = [np.array([0.0, 1.0, 0.0])]
    assert ood_score([m1], [np.array([1.0, 0.0, 0.0])], layer=0) == pytest.approx(-1.0)
    z1 = np.array([0.9, np.sqrt(1 - 0.81), 0.0])
    z2 = np.array([0.0, 0.2, np.sqrt(1 - 0.04)])
    assert ood_score([m1, m2], [z1, z2], layer=0) == pytest.approx(-0.9)
    with pytest.raises(NoModules):
        ood_score([], [], layer=0)


def test_ood_score_map_matches_pointwise(make_module, geometry):
    modules = [make_module(class_id=c, seed=c) for c in range(2)]
    pyramid = random_pyramid(geometry, 6, seed=9)
    maps = ood_score_map(modules, pyramid)
    assert [m.shape for m in maps] == [(4, 4), (2, 2)]
    grids = [project(m, pyramid, mode="infer") for m in modules]
    for j in range(2):
        z_by_class = [g[j][1, 1] for g in grids]
        assert maps[j][1, 1] == pytest.approx(ood_score(modules, z_by_class, layer=j), abs=1e-12)
        assert np.all(np.abs(maps[j]) <= 1.0 + 1e-9)


def test_calibrate_threshold():
    assert calibrate_threshold([1, 2, 3, 4, 5], 0.5) == 3.0
    assert calibrate_threshold([0.7] * 4, 0.95) == pytest.approx(0.7)
    scores = np.random.default_rng(0).normal(size=101)
    ordered = np.sort(scores)
    position = 0.95 * 100
    lo = int(np.floor(position))
    expected = ordered[lo] + (position - lo) * (ordered[lo + 1] - ordered[lo])
    assert calibrate_threshold(scores, 0.95) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(EmptyScores):
        calibrate_threshold([], 0.95)
    with pytest.raises(ValueError):
        calibrate_threshold([1.0], 1.0)


def test_freeze_class_modules_is_idempotent(make_module):
    modules = [make_module(class_id=0, task_id=1), make_module(class_id=1, task_id=2)]
    freeze_class_modules(modules, up_to_task=1)
    assert [m.frozen for m in modules] == [True, False]
    assert modules[0].default_mode == "infer"
    freeze_class_modules(modules, up_to_task=1)
    assert [m.frozen for m in modules] == [True, False]


def test_task2_module_still_learns_after_freeze(make_module):
    rng = np.random.default_rng(6)
    modules = [make_module(class_id=0, task_id=1, seed=1), make_module(class_id=1, task_id=2, seed=2)]
    freeze_class_modules(modules, up_to_task=1)
    levels = [rng.normal(size=(8, 6)), rng.normal(size=(4, 6))]
    assignment = assignment_of(masks(8, [0, 1], [2, 3, 4]), masks(4, [0], [1]))
    _, traces = modules[1].forward(levels, modules[1].default_mode)
    grads = mscal_loss_gradients(modules[1], traces, assignment)
    assert sum(float(np.linalg.norm(g)) for g in grads.values()) > 0.0
