import numpy as np
import pytest

from fedsa import archs, nn
from fedsa import data as D
from fedsa import federation as F
from fedsa import saliency as S
from fedsa.distill import TeacherNode


def small_plan(n_train=20, n_test=20):
    return D.standard_scenario(0.25, n_train, n_test)


def random_nodes(plan, n=None, spec=None):
    spec = spec or archs.small()
    nodes = []
    for i, task in enumerate(plan.teachers[:n]):
        train, test = D.synth_generate(task, 0)
        c = spec.encoder_out_shape()[-1]
        tr = nn.build_translator(c, spec.hint_dim, 50 + i)
        nodes.append(TeacherNode(i, spec, nn.build(spec, 10 + i).frozen(),
                                 nn.TranslatorBlock(c, spec.hint_dim, tr.params.frozen()), train, test))
    return nodes


def target(plan):
    train, test = D.synth_generate(plan.target, 0)
    return D.make_probe(train, plan.label_fraction, 0), test


def quick(**kw):
    base = dict(rounds=2, local_epochs=1, selective_gap=1, warm_epochs=1, adapt_epochs=2, k=2)
    base.update(kw)
    return F.FederationConfig(**base)


@pytest.fixture(scope="module")
def setup():
    plan = small_plan()
    probe, test = target(plan)
    return random_nodes(plan), probe, test


def test_config_validation():
    for bad in (dict(rounds=0), dict(k=0), dict(selective_gap=0), dict(local_lr=0), dict(aggregation="max"),
                dict(clip_norm=-1)):
        with pytest.raises(F.ConfigError):
            quick(**bad).validate()


def test_reselection_count():
    cfg = F.FederationConfig(rounds=20, selective_gap=5)
    assert cfg.reselection_rounds() == [0, 5, 10, 15]
    assert len(F.FederationConfig(rounds=7, selective_gap=3).reselection_rounds()) == 3


def test_pretrain_degenerate_and_deterministic():
    task = D.TaskSpec("one", (D.ClassProto(0, "h", 0),), 8, 8)
    plan = D.PartitionPlan((task,), D.TaskSpec("t", (D.ClassProto(1, "v", 0),), 8, 8))
    a = F.pretrain_teachers(plan, [archs.small()], [3], epochs=1)
    b = F.pretrain_teachers(plan, [archs.small()], [3], epochs=1)
    assert nn.accuracy(a[0].params, a[0].spec, a[0].test.x, a[0].test.y) == 1.0
    assert a[0].digest() == b[0].digest()


def test_pretrain_floor_names_node():
    plan = small_plan(8, 8)
    with pytest.raises(F.PretrainError, match="teacher 0"):
        F.pretrain_teachers(plan, [archs.small()] * 6, range(6), floor=1.01, epochs=0)


def test_warm_training(setup):
    _, probe, _ = setup
    spec = archs.small()
    p = nn.build(spec, 0)
    state = F.CenterState(p.copy(), spec, probe)
    F.warm_train_target(state, 0, 0.05, F.rng_for(0))
    assert state.params.digest() == p.digest()
    before = nn.mean_loss(state.params, spec, probe.x, probe.y)
    F.warm_train_target(state, 5, 0.05, F.rng_for(0))
    assert nn.mean_loss(state.params, spec, probe.x, probe.y) < before
    again = F.CenterState(p.copy(), spec, probe)
    F.warm_train_target(again, 5, 0.05, F.rng_for(0))
    assert again.params.digest() == state.params.digest()


def test_single_node_is_always_selected(setup):
    nodes, probe, _ = setup
    spec = archs.small()
    for kind in ("fedsa", "random", "leastk"):
        state = F.CenterState(nn.build(spec, 0), spec, probe)
        sel = F.reselect(state, nodes[:1], quick(k=3, strategy=S.SelectionStrategy(kind)), F.rng_for(0))
        assert sel.selected == (0, 0, 0)


def test_teacher_equal_to_target_has_top_score(setup):
    nodes, probe, _ = setup
    spec = archs.small()
    state = F.CenterState(nodes[3].params.trainable(), spec, probe)
    sel = F.reselect(state, nodes, quick(), F.rng_for(0))
    assert sel.similarities[3] == pytest.approx(1.0, abs=1e-12)
    assert sel.probs.argmax() == 3


def test_aggregation_examples():
    p = [nn.build(archs.small(), s) for s in range(3)]
    assert F.aggregate([p[0], p[0]]).digest() == p[0].digest()
    assert F.aggregate(p[:2], "positive", [0.3, 0.3]).digest() == F.aggregate(p[:2]).digest()
    dup = F.aggregate([p[0], p[0], p[1]])
    want = nn.avg_params([p[0], p[1]], [2 / 3, 1 / 3])
    for k in dup:
        np.testing.assert_allclose(dup[k].data, want[k].data, rtol=1e-12, atol=1e-15)


def test_aggregation_weights():
    np.testing.assert_allclose(F.aggregation_weights("positive", [1, 3]), [0.25, 0.75])
    np.testing.assert_allclose(F.aggregation_weights("negative", [1, 3]), [0.75, 0.25])
    assert F.aggregation_weights("unweighted", [1, 3]) is None


def test_adaptation_freezes_encoder(setup):
    _, probe, _ = setup
    spec = archs.small()
    p = nn.build(spec, 0)
    out = F.task_adaptation(p, spec, probe, 3, 0.1, F.rng_for(0))
    enc_before, dec_before = nn.split_roles(p, spec)
    enc_after, dec_after = nn.split_roles(out, spec)
    assert enc_after.digest() == enc_before.digest()
    assert dec_after.digest() != dec_before.digest()
    assert F.task_adaptation(p, spec, probe, 3, 0.0, F.rng_for(0)).digest() == p.digest()


def test_run_round_counts_and_fixed_selection(setup):
    nodes, probe, test = setup
    cfg = quick(rounds=4, selective_gap=2, strategy=S.SelectionStrategy("fixed", (0, 1, 2)), k=3)
    _, metrics = F.run_fedsa(cfg, nodes, archs.small(), probe, test)
    assert len(metrics) == 4
    assert [m.reselected for m in metrics] == [True, False, True, False]
    assert all(m.selected == [0, 1, 2] for m in metrics)
    assert all(m.wall_ms is None for m in metrics)
    assert all(0 <= m.test_acc <= 1 for m in metrics)


def test_run_is_deterministic_and_teachers_unchanged(setup):
    nodes, probe, test = setup
    digests = [n.digest() for n in nodes]
    a_final, a = F.run_fedsa(quick(seed=3), nodes, archs.small(), probe, test)
    b_final, b = F.run_fedsa(quick(seed=3, workers=2), nodes, archs.small(), probe, test)
    assert [m.to_record() for m in a] == [m.to_record() for m in b]
    assert a_final.digest() == b_final.digest()
    assert [n.digest() for n in nodes] == digests


def test_run_uploads_only_student_params(setup):
    nodes, probe, test = setup
    seen = []
    F.run_fedsa(quick(), nodes, archs.small(), probe, test, upload_hook=seen.append)
    names = set(nn.build(archs.small(), 0))
    assert seen and all(set(u.params) == names for u in seen)


def test_duplicate_draws_dispatch_once(setup):
    nodes, probe, test = setup
    seen = []
    cfg = quick(rounds=1, strategy=S.SelectionStrategy("fixed", (4, 4, 1)), k=3)
    _, m = F.run_fedsa(cfg, nodes, archs.small(), probe, test, upload_hook=seen.append)
    assert sorted(u.node_id for u in seen) == [1, 4]
    assert m[0].selected == [4, 4, 1]


def test_translator_kept_while_node_stays_selected(setup, monkeypatch):
    nodes, probe, test = setup
    used = []
    real = F._distill_job

    def spy(node, gp, tr, spec, config, t):
        used.append((t, node.node_id, id(tr)))
        return real(node, gp, tr, spec, config, t)

    monkeypatch.setattr(F, "_distill_job", spy)
    cfg = quick(rounds=3, selective_gap=10, strategy=S.SelectionStrategy("fixed", (2,)), k=1)
    F.run_fedsa(cfg, nodes, archs.small(), probe, test)
    assert len({i for _, _, i in used}) == 1


def test_heterogeneous_teachers(setup):
    _, probe, test = setup
    plan = small_plan()
    nodes = [random_nodes(plan, 1, archs.get(a))[0] for a in ("wide", "deep")]
    for i, n in enumerate(nodes):
        n.node_id = i
    _, m = F.run_fedsa(quick(rounds=1), nodes, archs.small(), probe, test)
    assert np.all(np.isfinite(list(m[0].kd_loss_per_node.values())))


def test_scratch_budget_matches_center_epochs():
    cfg = F.FederationConfig(rounds=20, selective_gap=5, warm_epochs=3, adapt_epochs=30)
    assert cfg.center_epoch_budget() == 42
    cfg.warm_every_reselection = False
    assert cfg.center_epoch_budget() == 33


@pytest.mark.parametrize("seed", range(5))
def test_teacher_on_the_target_task_helps(seed):
    plan = D.standard_scenario(0.1)
    train, test = D.synth_generate(plan.target, seed)
    probe = D.make_probe(train, 0.1, seed)
    own = D.PartitionPlan((plan.target,), plan.teachers[0])
    node = F.pretrain_teachers(own, [archs.small()], [seed + 1], epochs=15, data_seed=seed)[0]
    cfg = F.FederationConfig(rounds=1, k=1, local_epochs=10, seed=seed)
    spec = archs.small()
    warm = F.CenterState(nn.build(spec, int(F.rng_for(seed, F._TARGET_INIT).integers(2**31))), spec, probe)
    F.warm_train_target(warm, cfg.warm_epochs, cfg.center_lr, F.rng_for(seed, F._WARM, 0), cfg.batch_size)
    warm_acc = nn.accuracy(warm.params, spec, test.x, test.y)
    final, metrics = F.run_fedsa(cfg, [node], spec, probe, test)
    final_acc = nn.accuracy(final, spec, test.x, test.y)
    assert final_acc >= warm_acc
    assert final_acc >= metrics[-1].test_acc - 0.01  # adaptation


def test_teacher_hints_are_calibrated():
    plan = small_plan(20, 20)
    nodes = F.pretrain_teachers(plan, [archs.small()] * 6, range(6), floor=0.0, epochs=2)
    for node in nodes:
        h = node.hints()
        assert h.reshape(-1, h.shape[-1]).var(axis=0).mean() == pytest.approx(1.0, rel=1e-9)
