"""Acceptance gates for the whole engine.

Criteria 1-5 are property and oracle checks that run in seconds.  Criteria
6-9 train real models on the bundled digit subset and the synthetic shape
corpus with pinned seeds; together they take roughly half an hour on one
CPU core.  Each criterion is one test; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import time

import numpy as np
import pytest

from helpers import (
    assert_grad_close,
    naive_layer_flops,
    numerical_grad,
    random_small_graph,
    random_traces,
)
from sdnet.analysis import (
    confidence_indicator_report,
    confusion_normalize,
    confusion_scores,
    confusion_unbounded,
    cumulative_accuracy,
    error_indicator_report,
    ideal_exit_analysis,
    overthinking_report,
    per_head_accuracy,
)
from sdnet.autodiff import Parameter, Tensor, conv2d, flatten, linear, mixed_pool2d, softmax_cross_entropy
from sdnet.cost import build_cost_profile, eligible_placements
from sdnet.data import TriggerSpec, apply_trigger, load_idx_dir, poison, split_holdout, synthetic_shapes
from sdnet.exits import DEFAULT_Q_GRID, ExitPolicy, calibrate_threshold, early_exit, evaluate_policy_traces, trace_dataset
from sdnet.graph import Backbone, infer_shapes, load_architecture, parse_architecture
from sdnet.sdn import attach_ics, build_sdn
from sdnet.trainer import TrainConfig, sdn_loss, train

# no relu or max-pool in the shared path: finite differences are only
# meaningful away from their kinks, and the weighted-loss check targets the
# loss combination, not those ops
SMOOTH_SDN_ARCH = """
input 1 8 8 classes 3
conv 2 3 1 1
conv 3 3 1 1
flatten
fc 3
"""


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def mnist():
    return load_idx_dir("data/mnist")


@pytest.fixture(scope="module")
def timings():
    return {}


@pytest.fixture(scope="module")
def mnist_backbone(mnist, timings):
    train_set, test_set = mnist
    graph = load_architecture("configs/mnist_ref.txt")
    backbone = Backbone.build(graph, seed=7)
    t0 = time.monotonic()
    result = train(backbone, train_set, TrainConfig(regime="backbone", epochs=15, seed=7),
                   test_set=test_set)
    timings["backbone"] = time.monotonic() - t0
    return backbone, result


@pytest.fixture(scope="module")
def mnist_sdn(mnist, mnist_backbone, timings):
    """Convert the trained backbone; also record the freeze/interference evidence."""
    train_set, test_set = mnist
    backbone, _ = mnist_backbone
    probe = Tensor(test_set.images[:256])
    logits_plain = backbone.forward(probe).data.copy()
    params_before = {k: p.data.copy() for k, p in backbone.named_parameters().items()}

    model = build_sdn(backbone, seed=7)
    logits_attached = model.forward_heads(probe)[-1].data.copy()

    t0 = time.monotonic()
    train(model, train_set, TrainConfig(regime="ic_only", epochs=8, seed=7), test_set=test_set)
    timings["convert"] = time.monotonic() - t0

    logits_after = model.forward_heads(probe)[-1].data.copy()
    return {
        "model": model,
        "probe_logits": (logits_plain, logits_attached, logits_after),
        "backbone_params_before": params_before,
    }


@pytest.fixture(scope="module")
def mnist_traces(mnist, mnist_sdn, timings):
    train_set, test_set = mnist
    model = mnist_sdn["model"]
    t0 = time.monotonic()
    test_traces = trace_dataset(model, test_set.images)
    train_traces = trace_dataset(model, train_set.images)
    timings["tracing"] = time.monotonic() - t0
    return test_traces, train_traces


# ------------------------------------------------------------- criterion 1

def test_criterion_1_gradient_suite():
    """Every differentiable op matches central finite differences within
    1e-4 relative error over 20+ random seeds, in under a minute."""
    t0 = time.monotonic()
    seeds_run = 0

    for seed in range(5):  # convolution: input, weight, bias
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
        w = Parameter(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        b = Parameter(rng.standard_normal(3) * 0.1)
        hw = Parameter(rng.standard_normal((3 * 25, 3)) * 0.1, frozen=True)
        hb = Parameter(np.zeros(3), frozen=True)
        y = rng.integers(0, 3, size=2)

        def f():
            loss, _ = softmax_cross_entropy(
                linear(flatten(conv2d(x, w, b, padding=1)), hw, hb), y)
            return loss.item()

        loss, _ = softmax_cross_entropy(linear(flatten(conv2d(x, w, b, padding=1)), hw, hb), y)
        loss.backward()
        assert_grad_close(x.grad, numerical_grad(f, x.data), what=f"conv input s{seed}")
        assert_grad_close(w.grad, numerical_grad(f, w.data), what=f"conv weight s{seed}")
        assert_grad_close(b.grad, numerical_grad(f, b.data), what=f"conv bias s{seed}")
        seeds_run += 1

    for seed in range(5, 10):  # mixed pooling including the mix parameter
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        mix = Parameter(rng.standard_normal() * 0.5)
        hw = Parameter(rng.standard_normal((2 * 4 * 4, 3)) * 0.3, frozen=True)
        hb = Parameter(np.zeros(3), frozen=True)
        y = [1]

        def f():
            loss, _ = softmax_cross_entropy(
                linear(flatten(mixed_pool2d(x, 3, 1, mix)), hw, hb), y)
            return loss.item()

        loss, _ = softmax_cross_entropy(linear(flatten(mixed_pool2d(x, 3, 1, mix)), hw, hb), y)
        loss.backward()
        assert_grad_close(x.grad, numerical_grad(f, x.data), what=f"mixed input s{seed}")
        assert_grad_close(mix.grad, numerical_grad(f, mix.data), what=f"mix param s{seed}")
        seeds_run += 1

    for seed in range(10, 15):  # fully connected
        rng = np.random.default_rng(seed)
        x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        w = Parameter(rng.standard_normal((6, 4)))
        b = Parameter(rng.standard_normal(4))
        y = rng.integers(0, 4, size=3)

        def f():
            loss, _ = softmax_cross_entropy(linear(x, w, b), y)
            return loss.item()

        loss, _ = softmax_cross_entropy(linear(x, w, b), y)
        loss.backward()
        assert_grad_close(x.grad, numerical_grad(f, x.data), what=f"fc input s{seed}")
        assert_grad_close(w.grad, numerical_grad(f, w.data), what=f"fc weight s{seed}")
        assert_grad_close(b.grad, numerical_grad(f, b.data), what=f"fc bias s{seed}")
        seeds_run += 1

    for seed in range(15, 20):  # fused softmax + cross-entropy
        rng = np.random.default_rng(seed)
        logits = Tensor(rng.standard_normal((4, 6)) * 3, requires_grad=True)
        y = rng.integers(0, 6, size=4)

        def f():
            loss, _ = softmax_cross_entropy(logits, y)
            return loss.item()

        loss, _ = softmax_cross_entropy(logits, y)
        loss.backward()
        assert_grad_close(logits.grad, numerical_grad(f, logits.data), what=f"fused s{seed}")
        seeds_run += 1

    for seed in range(20, 23):  # weighted multi-head loss through shared weights
        rng = np.random.default_rng(seed)
        bb = Backbone.build(parse_architecture(SMOOTH_SDN_ARCH), seed=seed)
        model = attach_ics(bb, [0, 1], seed=seed + 1)
        x = Tensor(rng.standard_normal((2, 1, 8, 8)))
        y = rng.integers(0, 3, size=2)
        taus = [0.25, 0.75]
        shared = model.backbone.params["layer0.weight"]

        def f():
            heads = model.forward_heads(x)
            losses = [softmax_cross_entropy(h, y)[0] for h in heads]
            return sdn_loss(losses[-1], losses[:-1], taus).item()

        heads = model.forward_heads(x)
        losses = [softmax_cross_entropy(h, y)[0] for h in heads]
        total = sdn_loss(losses[-1], losses[:-1], taus)
        total.backward()
        assert_grad_close(shared.grad, numerical_grad(f, shared.data),
                          what=f"shared weight s{seed}")
        seeds_run += 1

    elapsed = time.monotonic() - t0
    assert seeds_run >= 20
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s"


# ------------------------------------------------------------- criterion 2

def test_criterion_2_cost_oracle():
    """layer_flops and build_cost_profile agree exactly with per-element
    counting on 50 randomized small graphs; exit costs strictly increase."""
    from sdnet.cost import layer_flops

    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        g = random_small_graph(rng)
        profile = build_cost_profile(g)
        cur = tuple(g.input_shape)
        naive = []
        for spec, shape in zip(g.layers, infer_shapes(g)):
            n = naive_layer_flops(spec, cur)
            assert layer_flops(spec, cur) == n
            naive.append(n)
            cur = shape
        assert profile.layer_flops == tuple(naive)
        assert profile.total == sum(naive)
        assert profile.fractions[-1] == 1.0

        eligible = eligible_placements(g)
        model = attach_ics(Backbone.build(g, seed=seed), eligible, seed=seed)
        costs = model.exit_costs()
        assert all(b > a for a, b in zip(costs, costs[1:]))


# ------------------------------------------------------------- criterion 3

def test_criterion_3_non_interference_and_freeze(mnist_sdn):
    """Attaching heads leaves the final logits bit-identical on a fixed
    256-sample batch, and head-only training never touches the backbone."""
    logits_plain, logits_attached, logits_after = mnist_sdn["probe_logits"]
    assert np.array_equal(logits_plain, logits_attached), "attachment changed final logits"
    assert np.array_equal(logits_plain, logits_after), "head-only training changed predictions"
    model = mnist_sdn["model"]
    for name, before in mnist_sdn["backbone_params_before"].items():
        after = model.backbone.params[name].data
        assert np.array_equal(before, after), f"backbone parameter {name} moved"


# ------------------------------------------------------------- criterion 4

def test_criterion_4_exit_policy_properties(mnist, mnist_sdn, mnist_traces):
    """Exit index is nondecreasing in q per sample; q=0 and q=1 reduce to the
    first-head and most-confident-head policies; calibrated policies respect
    their budgets within 0.02 on the test split."""
    train_set, test_set = mnist
    model = mnist_sdn["model"]
    test_traces, _ = mnist_traces
    labels = test_set.labels

    grid = sorted(set(DEFAULT_Q_GRID))
    conf = np.stack([t.confidences for t in test_traces])
    prev = np.full(len(test_traces), -1)
    for q in grid:
        exceeds = conf > q
        fallback = conf.argmax(axis=1)
        head = np.where(exceeds.any(axis=1), exceeds.argmax(axis=1), fallback)
        assert (head >= prev).all(), f"exit index decreased at q={q}"
        prev = head

    ev0 = evaluate_policy_traces(test_traces, labels, ExitPolicy(q=0.0))
    first_head_acc = per_head_accuracy(test_traces, labels)[0]
    assert ev0.accuracy == first_head_acc

    ev1 = evaluate_policy_traces(test_traces, labels, ExitPolicy(q=1.0))
    oracle = np.mean([
        t.predictions[int(t.confidences.argmax())] == y for t, y in zip(test_traces, labels)
    ])
    assert ev1.accuracy == pytest.approx(float(oracle), abs=0)

    _, holdout = split_holdout(train_set, 0.1, seed=7)
    for budget in (0.25, 0.5, 0.75):
        policy = calibrate_threshold(model, holdout, budget)
        ev = evaluate_policy_traces(test_traces, labels, policy)
        assert ev.avg_cost_fraction <= budget + 0.02, (
            f"budget {budget}: test cost {ev.avg_cost_fraction:.4f}"
        )


# ------------------------------------------------------------- criterion 5

def test_criterion_5_analysis_oracles():
    """Cumulative accuracy and the perfect-exit analysis match brute-force
    per-sample oracles on 1000 synthetic traces; confusion respects its
    bounds and normalization is an exact z-score."""
    rng = np.random.default_rng(2024)
    costs = tuple(sorted(rng.integers(50, 5000, size=7).tolist()))
    traces = random_traces(rng, 1000, 7, 5, costs=costs)
    labels = rng.integers(0, 5, size=1000)

    hit_any = 0
    ideal_total = 0.0
    counts = [0] * 7
    for t, y in zip(traces, labels):
        correct = [int(t.predictions[h]) == int(y) for h in range(7)]
        hit_any += any(correct)
        h = correct.index(True) if any(correct) else 6
        counts[h] += 1
        ideal_total += t.exit_flops[h]
    assert cumulative_accuracy(traces, labels) == hit_any / 1000
    ideal = ideal_exit_analysis(traces, labels)
    assert ideal.exit_counts == tuple(counts)
    assert ideal.avg_cost == pytest.approx(ideal_total / 1000, rel=1e-12)

    same = np.full((7, 4), 0.25)
    from helpers import make_trace

    assert confusion_unbounded(make_trace(same)) == 0.0
    for t in traces[:200]:
        assert 0.0 <= confusion_unbounded(t) <= 2 * 6

    scores = confusion_scores(traces)
    normalized, _ = confusion_normalize(scores, scores)
    assert abs(normalized.mean()) <= 1e-9
    assert abs(normalized.std() - 1.0) <= 1e-9


# ------------------------------------------------------------- criterion 6

def test_criterion_6_desk_scale_end_to_end(mnist, mnist_backbone, mnist_sdn, mnist_traces, timings):
    """On the bundled digit subset with pinned seeds: the backbone reaches
    97% test accuracy in 15 epochs; after conversion the cumulative accuracy
    strictly exceeds the final accuracy; a perfect exit oracle would save
    over 30% of inference cost; and a threshold calibrated to a 50% budget
    keeps accuracy within one point of the backbone.  The whole pipeline
    fits in 30 minutes."""
    train_set, test_set = mnist
    _, backbone_result = mnist_backbone
    model = mnist_sdn["model"]
    test_traces, _ = mnist_traces
    labels = test_set.labels

    backbone_acc = backbone_result.final_accuracy()
    assert backbone_acc >= 0.97, f"backbone test accuracy {backbone_acc:.4f}"

    report = overthinking_report(test_traces, labels)
    assert report.cumulative_accuracy > report.final_accuracy, "no destructive effect observed"
    assert report.ideal.cost_reduction > 0.30, (
        f"ideal cost reduction only {report.ideal.cost_reduction:.3f}"
    )

    _, holdout = split_holdout(train_set, 0.1, seed=7)
    policy = calibrate_threshold(model, holdout, 0.5)
    assert policy.feasible
    ev = evaluate_policy_traces(test_traces, labels, policy)
    assert ev.avg_cost_fraction <= 0.5, f"average cost {ev.avg_cost_fraction:.4f}"
    assert ev.accuracy >= backbone_acc - 0.01, (
        f"early-exit accuracy {ev.accuracy:.4f} vs backbone {backbone_acc:.4f}"
    )

    pipeline = timings["backbone"] + timings["convert"] + timings["tracing"]
    assert pipeline < 1800.0, f"pipeline took {pipeline:.0f}s"


# ------------------------------------------------------------- criterion 7

def test_criterion_7_joint_training_beats_head_only():
    """Trained jointly for 15 epochs on the shape corpus, every head is at
    least as accurate (within 0.5 points) as its head-only counterpart, and
    the final head stays within one point of a plain backbone."""
    train_set = synthetic_shapes(2000, 4, seed=31)
    test_set = synthetic_shapes(500, 4, seed=32)
    test_set.split = "test"
    graph = load_architecture("configs/shapes_small.txt")
    common = dict(batch_size=64, lr=2e-3, seed=31, augment=False)

    backbone = Backbone.build(graph, seed=31)
    res_backbone = train(backbone, train_set,
                         TrainConfig(regime="backbone", epochs=15, **common), test_set=test_set)

    converted = build_sdn(backbone, seed=32)
    res_head_only = train(converted, train_set,
                          TrainConfig(regime="ic_only", epochs=8, **common), test_set=test_set)

    joint = build_sdn(Backbone.build(graph, seed=31), seed=32)
    res_joint = train(joint, train_set,
                      TrainConfig(regime="sdn", epochs=15, **common), test_set=test_set)

    head_only = res_head_only.head_accuracies()
    jointly = res_joint.head_accuracies()
    for i, (ho, jo) in enumerate(zip(head_only[:-1], jointly[:-1])):
        assert jo >= ho - 0.005, f"head {i}: joint {jo:.4f} vs head-only {ho:.4f}"
    assert abs(jointly[-1] - res_backbone.final_accuracy()) <= 0.01


# ------------------------------------------------------------- criterion 8

def test_criterion_8_confusion_indicator(mnist, mnist_traces):
    """Misclassified samples score at least 0.5 standard deviations more
    confusion than correct ones, and confusion misses no more errors than
    the final-head confidence baseline."""
    _, test_set = mnist
    test_traces, train_traces = mnist_traces
    labels = test_set.labels

    normalized, _ = confusion_normalize(
        confusion_scores(test_traces), confusion_scores(train_traces))
    correct = np.array([t.predictions[-1] for t in test_traces]) == labels
    assert correct.any() and (~correct).any(), "need both outcome classes at desk scale"

    indicator = error_indicator_report(normalized, correct)
    margin = indicator.mean_wrong - indicator.mean_correct
    assert margin > 0.5, f"confusion margin {margin:.3f}"

    baseline = confidence_indicator_report(
        [t.confidences[-1] for t in test_traces], correct)
    assert indicator.fn_rate <= baseline.fn_rate, (
        f"confusion fn {indicator.fn_rate:.4f} vs confidence fn {baseline.fn_rate:.4f}"
    )


# ------------------------------------------------------------- criterion 9

def test_criterion_9_backdoor_recovery(mnist):
    """A 3x3 bottom-right trigger poisoned into 5% of training labels owns
    the final head (attack success >= 90%) but not the early heads (some
    head <= 50%); early exits at a 50%-budget threshold recover at least 30
    points of triggered-input accuracy."""
    train_set, test_set = mnist
    trigger = TriggerSpec(patch_size=3, target=0, rate=0.05)
    poisoned = poison(train_set, trigger, seed=41)
    graph = load_architecture("configs/mnist_ref.txt")

    backbone = Backbone.build(graph, seed=41)
    train(backbone, poisoned, TrainConfig(regime="backbone", epochs=15, seed=41),
          test_set=test_set)
    model = build_sdn(backbone, seed=42)
    train(model, train_set, TrainConfig(regime="ic_only", epochs=8, seed=42),
          test_set=test_set)  # the defender converts with clean data

    triggered = apply_trigger(test_set.images, trigger)
    trig_traces = trace_dataset(model, triggered)
    labels = test_set.labels
    preds = np.stack([t.predictions for t in trig_traces])

    attack_per_head = (preds == trigger.target).mean(axis=0)
    assert attack_per_head[-1] >= 0.90, f"final-head attack success {attack_per_head[-1]:.3f}"
    assert attack_per_head[:-1].min() <= 0.50, (
        f"every internal head compromised: {np.round(attack_per_head[:-1], 3)}"
    )

    no_exit_acc = float((preds[:, -1] == labels).mean())
    _, holdout = split_holdout(train_set, 0.1, seed=41)
    policy = calibrate_threshold(model, holdout, 0.5)
    ev = evaluate_policy_traces(trig_traces, labels, policy)
    gain = ev.accuracy - no_exit_acc
    assert gain >= 0.30, (
        f"early exits recovered only {gain:.3f} (from {no_exit_acc:.3f} to {ev.accuracy:.3f})"
    )
