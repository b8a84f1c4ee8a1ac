import csv
import json

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from imabench import diffmath
from imabench.acceptance import gradient_check_flow, identity_flow
from imabench.errors import NonFiniteLoss, SingularJacobian, TrainingAborted
from imabench.flows import build_flow, flat_parameters, model_log_likelihood, snapshot, spectral_normalize
from imabench.mixing import SourcePrior, mix_forward, sample_mixing
from imabench.models import RegularizerSpec, RunManifest, TrainConfig
from imabench.training import (
    TRAJECTORY_COLUMNS,
    FixedDatasetSampler,
    GenerativeSampler,
    TrajectoryLog,
    TrajectoryRecord,
    batch_loss,
    equal_area_check,
    make_sampler,
    objective_function,
    train,
    weight_penalty,
    write_manifest,
)

PRIOR2 = SourcePrior("standard_normal", 2)
NONE = RegularizerSpec()


def _tiny_config(**overrides):
    values = dict(iterations=6, batch_size=32, eval_every=3, eval_batch=64, learning_rate=1e-2, seed=0, lipschitz_pairs=32)
    values.update(overrides)
    return TrainConfig(**values)


def _tiny_flow(kind="full", seed=0):
    return build_flow(2, block_count=2, hidden_width=8, kind=kind, seed=seed)


def _batch(count=16, n=2, seed=0):
    return np.random.default_rng(seed).standard_normal((count, n))


def test_regularizer_spec_normalization():
    assert RegularizerSpec(kind="cima", strength=0.0).kind == "none"
    assert RegularizerSpec(kind="l1", strength=1e-3).label == "l1=0.001"
    with pytest.raises(ValidationError):
        RegularizerSpec(kind="none", strength=0.5)
    with pytest.raises(ValidationError):
        RegularizerSpec(kind="cima", strength=-1.0)


def test_train_config_rejects_zero_iterations():
    with pytest.raises(ValidationError):
        TrainConfig(iterations=0)
    with pytest.raises(ValidationError):
        TrainConfig(unknown_field=1)


def test_batch_loss_without_penalty_is_mean_loglik():
    model = _tiny_flow()
    x = _batch()
    expected = model_log_likelihood(model, x).mean()
    assert float((batch_loss(model, x, NONE) - expected).abs()) < 1e-12


def test_cima_penalty_vanishes_for_identity_model():
    model = identity_flow(2)
    x = _batch()
    plain = batch_loss(model, x, NONE)
    penalized = batch_loss(model, x, RegularizerSpec(kind="cima", strength=1.0))
    assert float((plain - penalized).abs()) < 1e-12


def test_weight_penalties():
    w = torch.zeros(3, 3, dtype=diffmath.DTYPE)
    w[1, 2] = 2.0
    zeros = torch.zeros(4, dtype=diffmath.DTYPE)
    assert float(weight_penalty([w, zeros], RegularizerSpec(kind="l2", strength=1e-3))) == pytest.approx(4e-3)
    assert float(weight_penalty([w, -w], RegularizerSpec(kind="l1", strength=1e-3))) == pytest.approx(4e-3)
    assert float(weight_penalty([w], NONE)) == 0.0


def test_weight_penalty_ignores_biases():
    model = _tiny_flow()
    x = _batch()
    reg = RegularizerSpec(kind="l2", strength=1e-3)
    before = float(batch_loss(model, x, reg) - model_log_likelihood(model, x).mean())
    with torch.no_grad():
        for block in model.blocks:
            for b in block.biases:
                b.fill_(5.0)
    after = float(batch_loss(model, x, reg) - model_log_likelihood(model, x).mean())
    assert after == pytest.approx(before, abs=1e-12)


def test_batch_loss_rejects_tiny_batches():
    with pytest.raises(ValueError):
        batch_loss(_tiny_flow(), _batch(count=1), NONE)


def test_nonfinite_likelihood_is_reported(monkeypatch):
    model = _tiny_flow()
    monkeypatch.setattr(model.base, "log_prob", lambda y: torch.full(y.shape[:1], float("inf"), dtype=diffmath.DTYPE))
    with pytest.raises(NonFiniteLoss) as e:
        batch_loss(model, _batch(), NONE)
    assert e.value.term == "loglik"


@pytest.mark.parametrize(
    "reg",
    [NONE, RegularizerSpec(kind="cima", strength=1.0), RegularizerSpec(kind="l1", strength=1e-3), RegularizerSpec(kind="l2", strength=1e-3)],
    ids=lambda r: r.label,
)
def test_objective_gradient_matches_finite_differences(reg):
    model = gradient_check_flow(2, seed=0)
    x = _batch(count=8, seed=1)
    report = diffmath.finite_diff_check(objective_function(model, x, reg), flat_parameters(model), step=1e-5, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_training_is_deterministic_and_logs_schedule():
    mixing = sample_mixing(2, 2, seed=0)
    config = _tiny_config(iterations=7)
    _, log_a = train(_tiny_flow(), GenerativeSampler(mixing, PRIOR2, config.seed), config, NONE)
    _, log_b = train(_tiny_flow(), GenerativeSampler(mixing, PRIOR2, config.seed), config, NONE)
    assert [r.iteration for r in log_a.records] == [0, 3, 6, 7]
    assert log_a.same_trajectory(log_b)


def test_training_keeps_flow_contractive_and_triangular():
    mixing = sample_mixing(2, 2, seed=1)
    config = _tiny_config(iterations=10, learning_rate=5e-2)
    model, log = train(_tiny_flow(kind="triangular"), GenerativeSampler(mixing, PRIOR2, 0), config, RegularizerSpec(kind="cima", strength=1.0))
    assert all(r < 1.0 for r in model.audit_lipschitz(pairs=500))
    with torch.no_grad():
        J = model(torch.as_tensor(_batch(count=50), dtype=diffmath.DTYPE)).jacobian
    assert float(torch.triu(J, diagonal=1).abs().max()) < 1e-12
    assert all(np.isfinite(r.loss) for r in log.records)


def test_training_aborts_and_restores_last_valid_state():
    class PoisonedSampler(GenerativeSampler):
        def __init__(self, *args):
            super().__init__(*args)
            self.calls = 0

        def next_batch(self, size):
            self.calls += 1
            batch = super().next_batch(size)
            if self.calls == 3:
                batch[0, 0] = np.inf
            return batch

    model = _tiny_flow()
    sampler = PoisonedSampler(sample_mixing(2, 2, seed=0), PRIOR2, 0)
    with pytest.raises(TrainingAborted) as e:
        train(model, sampler, _tiny_config(iterations=10), NONE)
    assert e.value.iteration == 3
    assert isinstance(e.value.cause, (NonFiniteLoss, SingularJacobian))
    assert len(e.value.log) >= 1
    assert all(bool(torch.isfinite(p).all()) for p in e.value.model.parameters())


def test_train_rejects_dimension_mismatch():
    sampler = GenerativeSampler(sample_mixing(3, 2, seed=0), SourcePrior("standard_normal", 3), 0)
    with pytest.raises(ValueError):
        train(_tiny_flow(), sampler, _tiny_config(), NONE)


def test_generative_sampler_streams_are_reproducible():
    mixing = sample_mixing(2, 2, seed=0)
    a, b = GenerativeSampler(mixing, PRIOR2, 5), GenerativeSampler(mixing, PRIOR2, 5)
    assert np.array_equal(a.next_batch(10), b.next_batch(10))
    assert np.array_equal(a.holdout(10), b.holdout(10))
    assert not np.array_equal(a.next_batch(10), a.holdout(10))


def test_fixed_dataset_sampler_cycles_epochs():
    data = np.arange(20, dtype=np.float64).reshape(10, 2)
    sampler = FixedDatasetSampler(data, seed=0)
    seen = np.concatenate([sampler.next_batch(5), sampler.next_batch(5)])
    assert sorted(seen[:, 0].tolist()) == sorted(data[:, 0].tolist())
    assert sampler.next_batch(5).shape == (5, 2)
    with pytest.raises(ValueError):
        sampler.next_batch(11)


def test_make_sampler_fixed_dataset():
    mixing = sample_mixing(2, 2, seed=0)
    sampler = make_sampler(mixing, PRIOR2, TrainConfig(data_source="fixed_dataset", dataset_size=50, seed=1))
    assert isinstance(sampler, FixedDatasetSampler)
    assert sampler.observations.shape == (50, 2)
    assert isinstance(make_sampler(mixing, PRIOR2, TrainConfig()), GenerativeSampler)


def test_fixed_dataset_holdout_is_disjoint_from_training_rows():
    mixing = sample_mixing(2, 2, seed=0)
    sampler = make_sampler(mixing, PRIOR2, TrainConfig(data_source="fixed_dataset", dataset_size=500, seed=1))
    held = sampler.holdout(2048)
    assert held.shape == (2048, 2)
    training_rows = {tuple(row) for row in sampler.observations}
    assert not any(tuple(row) in training_rows for row in held)
    again = make_sampler(mixing, PRIOR2, TrainConfig(data_source="fixed_dataset", dataset_size=500, seed=1))
    assert np.array_equal(again.holdout(2048), held)
    with pytest.raises(ValueError):
        FixedDatasetSampler(sampler.observations, seed=0).holdout(10)


def test_trajectory_log_rules(tmp_path):
    log = TrajectoryLog()
    log.append(TrajectoryRecord(0, 1.0, -1.0, 0.1, 0.01, 0.5))
    with pytest.raises(ValueError):
        log.append(TrajectoryRecord(0, 1.0, -1.0, 0.1, 0.01, 0.5))
    with pytest.raises(NonFiniteLoss):
        log.append(TrajectoryRecord(1, float("nan"), -1.0, 0.1, 0.01, 0.5))
    path = log.to_csv(tmp_path / "trajectory.csv")
    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == TRAJECTORY_COLUMNS
    assert rows[1][0] == "0"


def test_equal_area_check_on_identical_models():
    model = _tiny_flow()
    points = _batch(count=100)
    report = equal_area_check(model, model, points)
    assert report.passed
    assert float(np.max(report.logdet_gap)) == 0.0

    frozen = snapshot(model)
    for block in frozen.blocks:
        spectral_normalize(block, power_iters=5, bound=100.0)
    report = equal_area_check(model, frozen, points)
    assert float(np.max(report.logdet_gap)) < 1e-10


def test_equal_area_check_detects_different_models():
    points = mix_forward(sample_mixing(2, 2, seed=0), _batch(count=200))
    report = equal_area_check(gradient_check_flow(2, seed=0), gradient_check_flow(2, seed=1), points, eps=1e-3, tol=1e-3)
    assert report.logdet_gap.shape == (200,)
    assert float(np.max(report.logdet_gap)) > 0.0
    assert 0 <= report.conditioned_points <= 200


def test_write_manifest_records_digest(tmp_path):
    manifest = RunManifest(command="train", config={"a": 1}, seeds={"train": 0})
    payload = json.loads(write_manifest(manifest, tmp_path / "manifest.json").read_text())
    assert payload["digest"] == manifest.digest
    assert payload["code_hash"] == manifest.code_hash
    assert payload["command"] == "train"
