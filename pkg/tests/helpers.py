"""Shared problem builders for the test suite.

The synthetic benchmark here uses the same stream layout as the command-line
problem builder, so numbers produced by these tests can be reproduced from an
equivalent INI configuration.
"""

import numpy as np

from hfldd.datagen import (
    PartitionSpec,
    class_means,
    make_probe_dataset,
    partition_label_skew,
    sample_classes,
    shift_means,
    split_train_test,
)
from hfldd.distill import KipConfig
from hfldd.fltrain import ClientState, RunConfig
from hfldd.numkernel import SeededRng

S_MEANS = 10 << 48
S_POOL = 11 << 48
S_SPLIT = 12 << 48
S_SHIFT = 13 << 48
S_PROBE_POOL = 14 << 48
S_PROBE = 15 << 48


def build_problem(
    seed,
    classes_per_client,
    n_classes=10,
    dim=1024,
    separation=5.5,
    per_class=448,
    n_clients=20,
    samples_per_client=160,
    test_fraction=0.2,
    probe_size=100,
    probe_shift=1.0,
):
    """Materialize (clients, probe, test) for one label-skew experiment."""
    means = class_means(n_classes, dim, separation, SeededRng(seed, S_MEANS))
    pool = sample_classes(means, per_class, SeededRng(seed, S_POOL))
    train_pool, test = split_train_test(pool, test_fraction, SeededRng(seed, S_SPLIT))
    spec = PartitionSpec(n_clients, classes_per_client, n_classes, samples_per_client, seed)
    parts = partition_label_skew(train_pool, spec)
    probe_means = shift_means(means, probe_shift, SeededRng(seed, S_SHIFT))
    per_class_probe = max(1, -(-probe_size // n_classes))
    probe_pool = sample_classes(probe_means, per_class_probe, SeededRng(seed, S_PROBE_POOL))
    probe = make_probe_dataset(probe_pool, probe_size, SeededRng(seed, S_PROBE))
    clients = [ClientState(i, part) for i, part in enumerate(parts)]
    return clients, probe, test


def benchmark_config(seed, algorithm, **overrides):
    """The frozen training schedule used by the paired-run experiments."""
    kw = dict(
        rounds=50,
        local_steps=2,
        pretrain_steps=10,
        learning_rate=0.01,
        batch_size=16,
        algorithm=algorithm,
        prox_mu=0.0,
        seed=seed,
    )
    kw.update(overrides)
    return RunConfig(**kw)


def benchmark_kip(seed):
    return KipConfig(
        support_size=80,
        ridge_lambda=1e-6,
        learning_rate=0.004,
        iterations=300,
        target_batch=10,
        seed=seed,
    )


def tiny_problem(seed=7, n_clients=6, classes_per_client=2, n_classes=4, dim=8,
                 per_class=120, samples_per_client=40, separation=4.0):
    """Small, fast problem for unit tests of the orchestration layer."""
    return build_problem(
        seed,
        classes_per_client,
        n_classes=n_classes,
        dim=dim,
        separation=separation,
        per_class=per_class,
        n_clients=n_clients,
        samples_per_client=samples_per_client,
        test_fraction=0.25,
        probe_size=20,
    )


def models_equal(a, b) -> bool:
    """Bit-exact parameter equality."""
    return all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights)) and all(
        np.array_equal(x, y) for x, y in zip(a.biases, b.biases)
    )


def models_close(a, b, atol=1e-10) -> bool:
    return all(
        np.allclose(x, y, rtol=0.0, atol=atol) for x, y in zip(a.weights, b.weights)
    ) and all(np.allclose(x, y, rtol=0.0, atol=atol) for x, y in zip(a.biases, b.biases))
