import json
import math

import numpy as np
import pytest

from polarground import autodiff as ad
from polarground.estimator import (
    EstimatorConfig,
    EstimatorModel,
    EstimatorState,
    TrainingSample,
    assemble_features,
    estimate_sequence,
    flatten_params,
    forward_step,
    gps_layer_forward,
    init_parameters,
    loss_total,
    model_from_json,
    model_to_json,
    new_model,
    pack_scene,
    positional_encode,
    predict_heads,
    sequence_loss,
    train,
    unflatten_params,
    zero_state,
)
from polarground.parsing import embed_text, to_relation_tuples, ParsedInstruction
from polarground.polar import KAPPA_MAX, gaussian_pdf, von_mises_pdf
from polarground.scene import ObjectNode, build_scene_graph

TINY = EstimatorConfig(freqs=2, width=8, layers=1, heads=2, loss_mix=0.5, seed=0)


def make_scene(n=3, seed=0, names=None, lo=0.15, hi=0.85, box_lo=0.05, box_hi=0.15):
    rng = np.random.default_rng(seed)
    names = names or ["red bowl", "gray cube", "green ring", "blue box", "tree"]
    objects = []
    for i in range(n):
        cx, cy = rng.uniform(lo, hi, size=2)
        w, h = rng.uniform(box_lo, box_hi, size=2)
        objects.append(
            ObjectNode(
                id=i, name=names[i % len(names)], coord=(float(cx), float(cy)),
                box=(float(cx), float(cy), float(w), float(h)),
            )
        )
    return build_scene_graph(objects)


def make_clustered_scene(n=3, seed=0):
    """Objects packed tightly enough that every pair gets a near edge."""
    scene = make_scene(n, seed=seed, lo=0.42, hi=0.58, box_lo=0.12, box_hi=0.15)
    assert len(scene.edges) > 0
    return scene


def make_tuples(*pairs):
    parsed = ParsedInstruction(action="put", source="red bowl", targets=tuple(pairs))
    return to_relation_tuples(parsed)


class TestPositionalEncode:
    def test_output_length(self):
        assert positional_encode((0.3, -0.2), 4).shape == (18,)

    def test_origin(self):
        out = positional_encode((0.0, 0.0), 3)
        raw = out[[0, 7]]
        sins = out[[1, 3, 5, 8, 10, 12]]
        coss = out[[2, 4, 6, 9, 11, 13]]
        np.testing.assert_allclose(raw, 0.0)
        np.testing.assert_allclose(sins, 0.0)
        np.testing.assert_allclose(coss, 1.0)

    def test_parity(self):
        plus = positional_encode((1.0, 0.0), 4)
        minus = positional_encode((-1.0, 0.0), 4)
        half = 2 * 4 + 1
        # x block: raw and sin terms negate, cos terms match
        assert plus[0] == -minus[0]
        for j in range(4):
            assert plus[1 + 2 * j] == pytest.approx(-minus[1 + 2 * j], abs=1e-12)
            assert plus[2 + 2 * j] == pytest.approx(minus[2 + 2 * j], abs=1e-12)
        np.testing.assert_allclose(plus[half:], minus[half:])

    def test_vectorized_matches_scalar(self):
        coords = np.array([[0.1, 0.2], [-0.5, 0.9]])
        batch = positional_encode(coords, 2)
        for i, c in enumerate(coords):
            np.testing.assert_array_equal(batch[i], positional_encode(tuple(c), 2))


class TestConfig:
    def test_node_width(self):
        assert EstimatorConfig(freqs=4, width=32).node_width == 4 * 32 + 18
        assert TINY.node_width == 42

    def test_invalid(self):
        with pytest.raises(ValueError):
            EstimatorConfig(loss_mix=1.5)
        with pytest.raises(ValueError):
            EstimatorConfig(width=0)
        with pytest.raises(ValueError):
            EstimatorConfig(freqs=2, width=8, heads=4)  # 42 % 4 != 0


class TestAssellembleFeatures:
    def test_row_width_and_zero_state(self):
        scene = make_scene(3)
        pack = pack_scene(scene, TINY)
        params = init_parameters(TINY)
        rel = make_tuples(("gray cube", "left"))[0]
        state = zero_state(3, TINY)
        x0, e0 = assemble_features(pack, rel.f_ref, rel.f_pred, state.hidden, params)
        assert x0.shape == (3, TINY.node_width)
        assert e0.shape == (len(pack.edge_src), TINY.node_width)
        # Zero previous state contributes a zero block regardless of weights.
        np.testing.assert_array_equal(x0[:, -TINY.width :], 0.0)

    def test_identical_nodes_identical_rows(self):
        objects = [
            ObjectNode(id=i, name="red bowl", coord=(0.4, 0.6), box=(0.4, 0.6, 0.1, 0.1))
            for i in range(2)
        ]
        # bypass build_scene_graph for identical-coordinate nodes
        from polarground.scene import SceneGraph

        scene = SceneGraph(nodes={0: objects[0], 1: objects[1]}, edges=())
        pack = pack_scene(scene, TINY)
        params = init_parameters(TINY)
        rel = make_tuples(("red bowl", "close"))[0]
        x0, _ = assemble_features(
            pack, rel.f_ref, rel.f_pred, zero_state(2, TINY).hidden, params
        )
        np.testing.assert_array_equal(x0[0], x0[1])


def layer_params_unprefixed(config, seed=0, zero_gine=False):
    cfg = EstimatorConfig(
        freqs=config.freqs, width=config.width, layers=1, heads=config.heads, seed=seed
    )
    params = init_parameters(cfg)
    out = {
        k[len("layer0.") :]: v for k, v in params.items() if k.startswith("layer0.")
    }
    if zero_gine:
        out["gine_w1"] = np.zeros_like(out["gine_w1"])
        out["gine_w2"] = np.zeros_like(out["gine_w2"])
    return out


class TestGpsLayer:
    def test_zero_gine_mlp_ignores_adjacency(self):
        rng = np.random.default_rng(5)
        n, dn = 4, TINY.node_width
        x = rng.normal(size=(n, dn))
        params = layer_params_unprefixed(TINY, zero_gine=True)
        dense = np.ones((n, n)) - np.eye(n)
        e_dense = rng.normal(size=(int(dense.sum()), dn))
        out_dense, _ = gps_layer_forward(x, e_dense, dense, params, TINY.heads)
        out_empty, _ = gps_layer_forward(
            x, np.zeros((0, dn)), np.zeros((n, n)), params, TINY.heads
        )
        np.testing.assert_allclose(out_dense, out_empty, atol=1e-12)

    def test_single_node_finite(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, TINY.node_width))
        params = layer_params_unprefixed(TINY)
        out, e = gps_layer_forward(
            x, np.zeros((0, TINY.node_width)), np.zeros((1, 1)), params, TINY.heads
        )
        assert np.all(np.isfinite(out))
        assert e.shape == (0, TINY.node_width)

    def test_edges_pass_through(self):
        rng = np.random.default_rng(7)
        n, dn = 3, TINY.node_width
        adj = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]])
        x = rng.normal(size=(n, dn))
        e = rng.normal(size=(2, dn))
        params = layer_params_unprefixed(TINY)
        _, e_out = gps_layer_forward(x, e, adj, params, TINY.heads)
        np.testing.assert_array_equal(ad.value_of(e_out), e)

    def test_permutation_equivariance_full_stack(self):
        scene = make_scene(4, seed=3)
        tuples = make_tuples(("gray cube", "left"), ("red bowl", "close"))
        model = new_model(TINY)
        base = estimate_sequence(scene, tuples, model)
        # Relabel node ids with a permutation; ordered_nodes then reorders.
        perm = [2, 0, 3, 1]
        relabeled = build_scene_graph(
            [
                ObjectNode(
                    id=perm[node.id], name=node.name, coord=node.coord, box=node.box
                )
                for node in scene.ordered_nodes()
            ]
        )
        permuted = estimate_sequence(relabeled, tuples, model)
        for (mix_a, _), (mix_b, _) in zip(base, permuted):
            by_id_a = {c.node_id: c for c in mix_a.components}
            by_id_b = {c.node_id: c for c in mix_b.components}
            for old_id, comp in by_id_a.items():
                twin = by_id_b[perm[old_id]]
                assert comp.weight == pytest.approx(twin.weight, rel=1e-9)
                assert comp.params.mu_d == pytest.approx(twin.params.mu_d, rel=1e-9)
                assert comp.params.mu_phi == pytest.approx(twin.params.mu_phi, rel=1e-9)
                assert comp.anchor == twin.anchor


class TestPredictHeads:
    def test_zero_preactivations_closed_form(self):
        # With all-zero head weights every pre-activation is 0, so the
        # softplus heads output ln 2 and the concentration is 1/ln 2.
        config = TINY
        params = {
            k: np.zeros_like(v)
            for k, v in init_parameters(config).items()
            if k.startswith("head_")
        }
        x = np.random.default_rng(0).normal(size=(3, config.node_width))
        heads = predict_heads(x, params)
        ln2 = math.log(2.0)
        np.testing.assert_allclose(heads["weight"], ln2)
        np.testing.assert_allclose(heads["dist_mean"], ln2)
        np.testing.assert_allclose(heads["dist_var"], ln2)
        np.testing.assert_allclose(heads["concentration"], 1.0 / ln2)
        np.testing.assert_allclose(heads["angle"], 0.0)  # atan2(0, 0)

    def test_atan2_axis_values(self):
        config = TINY
        params = {
            k: np.zeros_like(v)
            for k, v in init_parameters(config).items()
            if k.startswith("head_")
        }
        # Bias the angle head to (x=0, y=1) -> pi/2, then (-1, 0) -> pi.
        params["head_angle_b2"] = np.array([0.0, 1.0])
        x = np.zeros((1, config.node_width))
        assert predict_heads(x, params)["angle"][0, 0] == pytest.approx(math.pi / 2)
        params["head_angle_b2"] = np.array([-1.0, 0.0])
        assert predict_heads(x, params)["angle"][0, 0] == pytest.approx(math.pi)

    def test_domain_invariants_on_random_models(self):
        scene = make_scene(5, seed=11)
        tuples = make_tuples(("red bowl", "far"), ("gray cube", "right above"))
        for seed in range(3):
            model = new_model(
                EstimatorConfig(freqs=2, width=8, layers=2, heads=2, seed=seed)
            )
            for mix, state in estimate_sequence(scene, tuples, model):
                for comp in mix.components:
                    assert comp.weight >= 0
                    assert comp.params.var_d > 0
                    assert 0 < comp.params.kappa_phi <= KAPPA_MAX
                    assert -math.pi <= comp.params.mu_phi <= math.pi
                assert np.all(np.isfinite(state.hidden))


class TestEstimateSequence:
    def test_single_tuple(self):
        scene = make_scene(3)
        tuples = make_tuples(("gray cube", "left"))
        model = new_model(TINY)
        out = estimate_sequence(scene, tuples, model)
        assert len(out) == 1
        assert len(out[0][0].components) == 3
        assert out[0][1].hidden.shape == (3, TINY.node_width)

    def test_state_dependence(self):
        scene = make_scene(3)
        tuples = make_tuples(("gray cube", "left"), ("gray cube", "left"))
        model = new_model(TINY)
        first, second = estimate_sequence(scene, tuples, model)
        # identical tuples, but the chained state shifts the second estimate
        a = first[0].components[0].params
        b = second[0].components[0].params
        assert (a.mu_d, a.mu_phi) != (b.mu_d, b.mu_phi)

    def test_bitwise_determinism(self):
        scene = make_scene(4, seed=2)
        tuples = make_tuples(("red bowl", "close"), ("green ring", "above"))
        model = new_model(TINY)
        run1 = estimate_sequence(scene, tuples, model)
        run2 = estimate_sequence(scene, tuples, model)
        for (mix1, st1), (mix2, st2) in zip(run1, run2):
            assert mix1 == mix2
            np.testing.assert_array_equal(st1.hidden, st2.hidden)

    def test_empty_tuples_rejected(self):
        with pytest.raises(ValueError):
            estimate_sequence(make_scene(2), [], new_model(TINY))


class TestLossTotal:
    def make_mixture(self, weights):
        scene = make_scene(len(weights), seed=4)
        from polarground.polar import MixtureComponent, PolarParams, SpatialMixture

        nodes = scene.ordered_nodes()
        return SpatialMixture(
            components=tuple(
                MixtureComponent(
                    weight=w,
                    params=PolarParams(mu_d=0.5, var_d=1.0, mu_phi=0.0, kappa_phi=0.0),
                    anchor=node.coord,
                    node_id=node.id,
                )
                for w, node in zip(weights, nodes)
            )
        )

    def test_perfect_weight_zeroes_l2(self):
        mix = self.make_mixture([1.0, 0.0, 0.0])
        w_des = np.array([1.0, 0.0, 0.0])
        _, _, l2 = loss_total(mix, (0.5, 0.5), w_des, 0.5)
        assert l2 == pytest.approx(0.0, abs=1e-12)

    def test_lambda_one_is_pure_location_loss(self):
        mix = self.make_mixture([0.4, 0.3, 0.3])
        w_des = np.array([0.0, 1.0, 0.0])
        total, l1, l2 = loss_total(mix, (0.4, 0.6), w_des, 1.0)
        assert total == pytest.approx(l1)
        assert l2 != 0.0

    def test_mode_value_composition(self):
        # Target at the hot component's mode distance with var=1, kappa=0.
        mix = self.make_mixture([1.0, 0.0])
        hot = mix.components[0]
        x_des = (hot.anchor[0] + 0.5, hot.anchor[1])
        _, l1, _ = loss_total(mix, x_des, np.array([1.0, 0.0]), 0.5)
        expected = -math.log(gaussian_pdf(0.5, 0.5, 1.0) * von_mises_pdf(0.0, 0.0, 0.0))
        assert l1 == pytest.approx(expected, rel=1e-12)

    def test_invalid_lambda(self):
        mix = self.make_mixture([1.0])
        with pytest.raises(ValueError):
            loss_total(mix, (0.5, 0.5), np.array([1.0]), 1.5)

    def test_taped_loss_matches_public_formula(self):
        scene = make_scene(3, seed=9)
        tuples = make_tuples(("gray cube", "left"))
        model = new_model(TINY)
        pack = pack_scene(scene, model.config)
        feats = [(t.f_ref, t.f_pred) for t in tuples]
        x_des = (0.3, 0.7)
        taped = sequence_loss(pack, feats, [x_des], [1], model.params, model.config)
        mix = estimate_sequence(scene, tuples, model)[0][0]
        expected, _, _ = loss_total(mix, x_des, np.array([0, 1.0, 0]), model.config.loss_mix)
        assert float(taped) == pytest.approx(expected, rel=1e-9)


def fd_gradient(loss_fn, flat, h=1e-5, chunk=128):
    flat = flat.astype(float)
    grads = np.zeros_like(flat)
    for start in range(0, flat.size, chunk):
        idx = np.arange(start, min(start + chunk, flat.size))
        batch = np.tile(flat, (2 * len(idx), 1))
        batch[np.arange(len(idx)), idx] += h
        batch[len(idx) + np.arange(len(idx)), idx] -= h
        losses = loss_fn(batch)
        grads[idx] = (losses[: len(idx)] - losses[len(idx) :]) / (2 * h)
    return grads


def gradient_check(seed: int, rtol=1e-4, atol=1e-7):
    """Analytic vs central-difference gradients on the tiny configuration."""
    config = EstimatorConfig(freqs=2, width=8, layers=1, heads=2, seed=seed)
    scene = make_clustered_scene(3, seed=seed + 100)
    tuples = make_tuples(("gray cube", "left"), ("red bowl", "close"))
    rng = np.random.default_rng(seed + 500)
    targets = [tuple(rng.uniform(0.1, 0.9, size=2)) for _ in range(2)]
    hots = [int(rng.integers(0, 3)) for _ in range(2)]
    params = init_parameters(config)
    pack = pack_scene(scene, config)
    feats = [(t.f_ref, t.f_pred) for t in tuples]

    taped = {k: ad.Tensor(v) for k, v in params.items()}
    loss = sequence_loss(pack, feats, targets, hots, taped, config)
    ad.backward(loss)
    analytic = np.concatenate(
        [
            (taped[k].grad if taped[k].grad is not None else np.zeros_like(v)).reshape(-1)
            for k, v in params.items()
        ]
    )

    flat = flatten_params(params)

    def loss_fn(batch):
        batch_params = unflatten_params(batch, params)
        return np.asarray(
            sequence_loss(pack, feats, targets, hots, batch_params, config)
        )

    numeric = fd_gradient(loss_fn, flat)
    err = np.abs(analytic - numeric)
    bound = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    bad = np.where(err > bound)[0]
    return analytic, numeric, bad


class TestGradients:
    def test_finite_difference_agreement(self):
        analytic, numeric, bad = gradient_check(seed=0)
        assert bad.size == 0, f"{bad.size} mismatched params, first at {bad[:5]}"

    def test_gradient_covers_all_branches(self):
        # Every parameter family must receive some gradient signal.
        config = EstimatorConfig(freqs=2, width=8, layers=1, heads=2, seed=1)
        scene = make_clustered_scene(3, seed=7)
        tuples = make_tuples(("gray cube", "left"), ("red bowl", "close"))
        params = init_parameters(config)
        pack = pack_scene(scene, config)
        feats = [(t.f_ref, t.f_pred) for t in tuples]
        taped = {k: ad.Tensor(v) for k, v in params.items()}
        loss = sequence_loss(pack, feats, [(0.2, 0.8), (0.7, 0.3)], [0, 2], taped, config)
        ad.backward(loss)
        for family in ("proj_viz", "proj_ref", "proj_state", "proj_edge",
                       "layer0.gine_w1", "layer0.attn_wq", "layer0.ffn_w1",
                       "head_weight_w1", "head_angle_w2", "layer0.gine_eps"):
            grad = taped[family].grad
            assert grad is not None and np.any(grad != 0.0), family


class TestTraining:
    def make_dataset(self, n_samples=2, seed=0):
        samples = []
        for i in range(n_samples):
            scene = make_scene(3, seed=seed + i)
            tuples = make_tuples(("gray cube", "left"), ("red bowl", "close"))
            nodes = scene.ordered_nodes()
            hot = [1, 0]
            x_des = []
            w_des = []
            for t_idx, h in enumerate(hot):
                anchor = nodes[h].coord
                x_des.append((anchor[0] - 0.2 + 0.05 * t_idx, anchor[1]))
                onehot = np.zeros(3)
                onehot[h] = 1.0
                w_des.append(onehot)
            samples.append(
                TrainingSample(scene=scene, tuples=tuple(tuples), x_des=tuple(x_des), w_des=tuple(w_des))
            )
        return samples

    def test_memorization(self):
        data = self.make_dataset(1)
        history = []
        train(data, TINY, epochs=200, history=history)
        assert len(history) == 200
        assert history[-1] < history[0]

    def test_seed_determinism_bytewise(self):
        data = self.make_dataset(2)
        m1 = train(data, TINY, epochs=5)
        m2 = train(data, TINY, epochs=5)
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k], m2.params[k])

    def test_empty_data_rejected(self):
        with pytest.raises(ValueError):
            train([], TINY)

    def test_training_sample_validation(self):
        scene = make_scene(2)
        tuples = make_tuples(("gray cube", "left"))
        with pytest.raises(ValueError):
            TrainingSample(
                scene=scene,
                tuples=tuple(tuples),
                x_des=((0.5, 0.5),),
                w_des=(np.array([0.5, 0.5]),),
            )


class TestModelSerialization:
    def test_roundtrip_bit_exact(self):
        model = new_model(TINY)
        text = model_to_json(model)
        back = model_from_json(text)
        assert back.config == model.config
        for k in model.params:
            np.testing.assert_array_equal(back.params[k], model.params[k])

    def test_rejects_unknown_format(self):
        with pytest.raises(ValueError):
            model_from_json(json.dumps({"format": "other"}))

    def test_shape_validation(self):
        model = new_model(TINY)
        params = dict(model.params)
        params["proj_viz"] = np.zeros((2, 2))
        with pytest.raises(ValueError):
            EstimatorModel(config=model.config, params=params)
