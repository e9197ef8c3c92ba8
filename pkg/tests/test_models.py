import math

import numpy as np
import pytest

from arfdx import models
from arfdx.models import (
    ArrayDataset,
    Diverged,
    HyperParams,
    ModelError,
    ModelKind,
    ModelSpec,
    SweepGrid,
    backward,
    enumerate_configs,
    forward,
    init_params,
    load_checkpoint,
    loss,
    predict_patient,
    save_checkpoint,
    sgd_step,
    sweep,
    train,
)
from oracles import finite_diff_grads, max_relative_error, random_gradcheck_instance

ALL_SPECS = [
    ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=7),
    ModelSpec(ModelKind.EHR_TWO_LAYER, ehr_dim=7),
    ModelSpec(ModelKind.IMAGE_LINEAR, emb_dim=5),
    ModelSpec(ModelKind.COMBINED_DIRECT, ehr_dim=7, emb_dim=5),
    ModelSpec(ModelKind.COMBINED_HIDDEN, ehr_dim=7, emb_dim=5),
]


def zero_params(spec):
    return {name: np.zeros(shape) for name, shape in spec.param_shapes().items()}


class TestForward:
    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind.value)
    def test_zero_parameters_give_half(self, spec):
        ehr = np.ones((2, spec.ehr_dim)) if spec.needs_ehr else None
        emb = np.ones((2, spec.emb_dim)) if spec.needs_emb else None
        probs = forward(spec, zero_params(spec), ehr, emb)
        assert np.allclose(probs, 0.5)

    def test_single_weight_log_odds(self):
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=4)
        params = zero_params(spec)
        params["W"][1, 2] = math.log(3.0)
        x = np.zeros((1, 4))
        x[0, 2] = 1.0
        probs = forward(spec, params, ehr=x)
        assert probs[0, 1] == pytest.approx(0.75, abs=1e-12)
        assert probs[0, 0] == pytest.approx(0.5)

    def test_combined_direct_with_zero_image_weights_matches_ehr_linear(self):
        rng = np.random.default_rng(7)
        d, e = 6, 4
        ehr_spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=d)
        ehr_params = init_params(ehr_spec, rng)
        combined_spec = ModelSpec(ModelKind.COMBINED_DIRECT, ehr_dim=d, emb_dim=e)
        combined_params = zero_params(combined_spec)
        combined_params["W"][:, e:] = ehr_params["W"]
        combined_params["b"][:] = ehr_params["b"]
        x = rng.integers(0, 2, size=(10, d)).astype(float)
        emb = rng.normal(size=(10, e))
        lhs = forward(combined_spec, combined_params, ehr=x, emb=emb)
        rhs = forward(ehr_spec, ehr_params, ehr=x)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind.value)
    def test_outputs_strictly_inside_unit_interval(self, spec):
        rng = np.random.default_rng(8)
        params, ehr, emb, _ = random_gradcheck_instance(spec, rng)
        probs = forward(spec, params, ehr, emb)
        assert np.all(probs > 0.0) and np.all(probs < 1.0)

    def test_missing_required_input_raises(self):
        spec = ModelSpec(ModelKind.COMBINED_DIRECT, ehr_dim=3, emb_dim=2)
        with pytest.raises(ModelError):
            forward(spec, zero_params(spec), ehr=np.ones((1, 3)), emb=None)

    def test_shape_mismatch_raises(self):
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=3)
        with pytest.raises(ModelError):
            forward(spec, zero_params(spec), ehr=np.ones((1, 5)))


class TestLoss:
    def test_half_probability(self):
        assert loss(np.array([[0.5]]), np.array([[1.0]])) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_prediction_near_zero(self):
        assert loss(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]])) < 1e-6

    def test_three_output_example(self):
        value = loss(np.array([[0.9, 0.5, 0.1]]), np.array([[1.0, 0.0, 0.0]]))
        assert value == pytest.approx(0.9038682118755978, abs=1e-9)

    def test_batch_mean(self):
        probs = np.array([[0.5], [0.5]])
        y = np.array([[1.0], [0.0]])
        assert loss(probs, y) == pytest.approx(math.log(2.0))


class TestBackward:
    def test_single_sample_linear_gradient(self):
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=4)
        x = np.zeros((1, 4))
        x[0, 2] = 1.0
        y = np.array([[1.0, 0.0, 0.0]])
        grads = backward(spec, zero_params(spec), x, None, y)
        assert grads["W"][0, 2] == pytest.approx(-0.5, abs=1e-12)
        assert grads["W"][1, 2] == pytest.approx(0.5, abs=1e-12)

    def test_gradient_vanishes_at_interior_optimum(self):
        # symmetric labels make p = 0.5 the optimum, reached at zero params
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=2)
        x = np.array([[1.0, 0.0], [1.0, 0.0]])
        y = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
        grads = backward(spec, zero_params(spec), x, None, y)
        assert max(np.abs(g).max() for g in grads.values()) < 1e-6

    @pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind.value)
    def test_matches_finite_differences(self, spec):
        rng = np.random.default_rng(9)
        for _ in range(5):
            params, ehr, emb, y = random_gradcheck_instance(spec, rng)
            analytic = backward(spec, params, ehr, emb, y)
            numeric = finite_diff_grads(spec, params, ehr, emb, y)
            assert max_relative_error(analytic, numeric) < 1e-4


class TestSgdStep:
    def hp(self, lr=0.1, momentum=0.9, wd=0.0):
        return HyperParams(learning_rate=lr, momentum=momentum, weight_decay=wd)

    def test_first_step(self):
        params, velocity = {"w": np.array([0.0])}, {"w": np.array([0.0])}
        new_params, new_velocity = sgd_step(params, velocity, {"w": np.array([1.0])}, self.hp())
        assert new_params["w"][0] == pytest.approx(-0.1, abs=1e-15)
        assert new_velocity["w"][0] == pytest.approx(1.0)

    def test_second_identical_step_accumulates_momentum(self):
        params, velocity = {"w": np.array([0.0])}, {"w": np.array([0.0])}
        grads = {"w": np.array([1.0])}
        params, velocity = sgd_step(params, velocity, grads, self.hp())
        params, velocity = sgd_step(params, velocity, grads, self.hp())
        assert velocity["w"][0] == pytest.approx(1.9, abs=1e-12)
        assert params["w"][0] == pytest.approx(-0.29, abs=1e-12)

    def test_decay_only_step(self):
        params, velocity = {"w": np.array([1.0])}, {"w": np.array([0.0])}
        new_params, _ = sgd_step(params, velocity, {"w": np.array([0.0])}, self.hp(lr=1.0, momentum=0.0, wd=0.1))
        assert new_params["w"][0] == pytest.approx(0.9, abs=1e-15)

    def test_reduces_to_vanilla_gradient_descent(self):
        rng = np.random.default_rng(10)
        theta = rng.normal(size=(3, 4))
        grad = rng.normal(size=(3, 4))
        hp = HyperParams(learning_rate=0.05, momentum=0.0, weight_decay=0.0)
        new_params, _ = sgd_step({"w": theta}, {"w": np.zeros_like(theta)}, {"w": grad}, hp)
        assert np.array_equal(new_params["w"], theta - 0.05 * grad)

    def test_non_finite_update_raises(self):
        params, velocity = {"w": np.array([0.0])}, {"w": np.array([0.0])}
        with pytest.raises(Diverged):
            sgd_step(params, velocity, {"w": np.array([np.inf])}, self.hp())


def separable_dataset(n, rng):
    """Each diagnosis is a deterministic read of one feature column."""
    x = rng.integers(0, 2, size=(n, 4)).astype(float)
    y = np.stack([x[:, 0], x[:, 1], x[:, 2]], axis=1)
    return ArrayDataset(labels=y, ehr=x)


class TestTrain:
    def test_reaches_perfect_auroc_on_separable_data(self):
        rng = np.random.default_rng(12)
        train_set = separable_dataset(20, rng)
        val_set = separable_dataset(12, rng)
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=4)
        hp = HyperParams(learning_rate=0.5, weight_decay=1e-4, max_epochs=60, patience=10)
        _, history = train(spec, hp, train_set, val_set, seed=0)
        assert max(history.val_auroc) == pytest.approx(1.0)

    def test_patience_counts_five_stale_epochs(self):
        # constant zero features keep every prediction tied, so validation
        # macro AUROC is exactly 0.5 each epoch
        x = np.zeros((8, 1))
        y = np.zeros((8, 3))
        y[:4, :] = 1.0
        data = ArrayDataset(labels=y, ehr=x)
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=1)
        hp = HyperParams(learning_rate=0.1, max_epochs=50, patience=5)
        _, history = train(spec, hp, data, data, seed=1)
        assert history.best_epoch == 1
        assert len(history.val_auroc) == 6

    def test_same_seed_bit_identical_parameters(self):
        rng = np.random.default_rng(13)
        train_set = separable_dataset(24, rng)
        val_set = separable_dataset(10, rng)
        spec = ModelSpec(ModelKind.EHR_TWO_LAYER, ehr_dim=4)
        hp = HyperParams(learning_rate=0.1, max_epochs=5, patience=5)
        params_a, _ = train(spec, hp, train_set, val_set, seed=42)
        params_b, _ = train(spec, hp, train_set, val_set, seed=42)
        assert all(np.array_equal(params_a[k], params_b[k]) for k in params_a)

    def test_returns_best_checkpoint(self):
        from arfdx.evaluation import macro_auroc

        rng = np.random.default_rng(14)
        train_set = separable_dataset(30, rng)
        val_set = separable_dataset(14, rng)
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=4)
        hp = HyperParams(learning_rate=0.3, max_epochs=12, patience=12)
        params, history = train(spec, hp, train_set, val_set, seed=3)
        returned = macro_auroc(forward(spec, params, ehr=val_set.ehr), val_set.labels)
        assert returned == pytest.approx(max(history.val_auroc), abs=1e-12)
        assert history.val_auroc[history.best_epoch - 1] == pytest.approx(max(history.val_auroc))


class TestSweep:
    def test_full_grid_size_per_architecture(self):
        configs = enumerate_configs([ModelKind.EHR_LINEAR], SweepGrid())
        assert len(configs) == 6 * 2 * 4

    def test_enumeration_is_learning_rate_major(self):
        grid = SweepGrid(learning_rates=(1.0, 2.0), momentums=(0.8,), weight_decays=(0.1, 0.2))
        configs = enumerate_configs([ModelKind.EHR_LINEAR, ModelKind.EHR_TWO_LAYER], grid)
        flattened = [(hp.learning_rate, hp.weight_decay, kind) for kind, hp in configs]
        assert flattened == [
            (1.0, 0.1, ModelKind.EHR_LINEAR),
            (1.0, 0.1, ModelKind.EHR_TWO_LAYER),
            (1.0, 0.2, ModelKind.EHR_LINEAR),
            (1.0, 0.2, ModelKind.EHR_TWO_LAYER),
            (2.0, 0.1, ModelKind.EHR_LINEAR),
            (2.0, 0.1, ModelKind.EHR_TWO_LAYER),
            (2.0, 0.2, ModelKind.EHR_LINEAR),
            (2.0, 0.2, ModelKind.EHR_TWO_LAYER),
        ]

    def test_grid_of_one_returns_that_config(self):
        rng = np.random.default_rng(15)
        train_set = separable_dataset(20, rng)
        val_set = separable_dataset(10, rng)
        grid = SweepGrid(learning_rates=(0.2,), momentums=(0.9,), weight_decays=(1e-3,), max_epochs=4)
        result = sweep("image", grid, _with_emb(train_set, rng), _with_emb(val_set, rng),
                       seed=0, emb_dim=3)
        assert result.spec.kind is ModelKind.IMAGE_LINEAR
        assert result.hp.learning_rate == 0.2
        assert len(result.runs) == 1

    def test_dominant_config_is_chosen(self):
        rng = np.random.default_rng(16)
        train_set = separable_dataset(30, rng)
        val_set = separable_dataset(14, rng)
        grid = SweepGrid(learning_rates=(1e-12, 0.5), momentums=(0.9,), weight_decays=(1e-4,),
                         max_epochs=8, patience=8)
        result = sweep("ehr", grid, train_set, val_set, seed=4, ehr_dim=4)
        assert result.hp.learning_rate == 0.5
        assert len(result.runs) == 4  # 2 learning rates x 2 architectures
        assert result.val_auroc == max(run.val_auroc for run in result.runs)


def _with_emb(data, rng):
    emb = np.stack([data.labels[:, 0] * 2 - 1, rng.normal(size=len(data)), rng.normal(size=len(data))], axis=1)
    return ArrayDataset(labels=data.labels, ehr=data.ehr, emb=emb)


class TestPredictPatient:
    def test_average_over_study_images(self):
        spec = ModelSpec(ModelKind.IMAGE_LINEAR, emb_dim=1)
        params = {"W": np.ones((3, 1)), "b": np.zeros(3)}
        logit = lambda p: math.log(p / (1 - p))
        probs = predict_patient(spec, params, embeddings=[np.array([logit(0.6)]), np.array([logit(0.8)])])
        assert probs == pytest.approx([0.7, 0.7, 0.7], abs=1e-12)

    def test_single_image_is_its_own_prediction(self):
        spec = ModelSpec(ModelKind.IMAGE_LINEAR, emb_dim=2)
        params = {"W": np.zeros((3, 2)), "b": np.array([1.0, 0.0, -1.0])}
        probs = predict_patient(spec, params, embeddings=[np.array([5.0, -3.0])])
        expected = 1.0 / (1.0 + np.exp(-np.array([1.0, 0.0, -1.0])))
        assert probs == pytest.approx(expected)

    def test_ehr_model_ignores_images(self):
        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=2)
        params = {"W": np.ones((3, 2)), "b": np.zeros(3)}
        x = np.array([1.0, 0.0])
        with_images = predict_patient(spec, params, ehr_x=x, embeddings=[np.array([99.0])])
        without = predict_patient(spec, params, ehr_x=x)
        assert np.array_equal(with_images, without)

    def test_image_model_requires_an_image(self):
        spec = ModelSpec(ModelKind.IMAGE_LINEAR, emb_dim=2)
        with pytest.raises(ModelError):
            predict_patient(spec, {"W": np.zeros((3, 2)), "b": np.zeros(3)}, embeddings=[])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        spec = ModelSpec(ModelKind.COMBINED_HIDDEN, ehr_dim=5, emb_dim=3)
        params = init_params(spec, rng)
        hp = HyperParams()
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, spec, params, hp, seed=9, val_metrics={"macro_auroc": 0.8})
        loaded = load_checkpoint(path)
        assert loaded.spec == spec
        assert loaded.hp == hp
        assert loaded.seed == 9
        assert all(np.allclose(loaded.params[k], params[k]) for k in params)

    def test_shape_validation(self, tmp_path):
        import json

        spec = ModelSpec(ModelKind.EHR_LINEAR, ehr_dim=3)
        params = zero_params(spec)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, spec, params, HyperParams(), seed=0, val_metrics={})
        payload = json.loads(path.read_text())
        payload["params"]["W"]["shape"] = [3, 99]
        path.write_text(json.dumps(payload))
        with pytest.raises(ModelError, match="shape"):
            load_checkpoint(path)

    def test_hidden_layer_size_is_pinned(self):
        with pytest.raises(ModelError):
            ModelSpec(ModelKind.EHR_TWO_LAYER, ehr_dim=3, hidden=50)
